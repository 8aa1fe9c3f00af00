//! `impact`: score per-neuron impact for a checkpoint on the config's data.
//!
//! Regenerates the config's dataset deterministically, averages per-sample
//! impact per domain against the checkpoint's merged-label head, and writes
//! one score file per domain plus a descending sorted-score CSV. With
//! `--method both` it also writes a per-neuron exact-vs-taylor comparison
//! CSV per domain and prints their correlations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dgd_core::config::{ExperimentConfig, ImpactSplit};
use dgd_core::error::{Error, Result};
use dgd_core::impact::{average_impact, cross_domain_correlation, ImpactMethod, ImpactScores};
use dgd_core::nn::checkpoint::load_checkpoint;
use dgd_core::nn::model::{ClassifierHead, EncoderModel, HeadSet};
use dgd_core::pipeline::prepare_data;

use crate::MethodArg;

pub fn run(
    exp: &ExperimentConfig,
    out: &Path,
    seed: u64,
    checkpoint_path: &Path,
    method: MethodArg,
) -> Result<()> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let head = match &checkpoint.heads {
        HeadSet::Single(head) => head,
        HeadSet::PerDomain(_) => {
            return Err(Error::Config(format!(
                "checkpoint {} holds per-domain heads; impact scoring needs a merged-label head",
                checkpoint_path.display()
            )))
        }
    };
    if checkpoint.encoder.input_dim() != exp.input_dim {
        return Err(Error::Config(format!(
            "checkpoint {} expects {}-dimensional inputs but the config generates {}",
            checkpoint_path.display(),
            checkpoint.encoder.input_dim(),
            exp.input_dim
        )));
    }

    let data = prepare_data(exp, seed)?;
    let pool = match exp.impact.split {
        ImpactSplit::Train => &data.train,
        ImpactSplit::Val => &data.val,
    };
    fs::create_dir_all(out.join("impact"))?;

    let mut sorted_csv = String::from("domain,rank,score\n");
    for domain_id in pool.domain_ids() {
        let samples = pool.domain_samples(domain_id)?;
        let primary = match method.single() {
            Some(m) => {
                let scores = score(&checkpoint.encoder, head, &samples, m)?;
                save_scores(out, &format!("impact_d{domain_id}.json"), &scores)?;
                println!(
                    "domain {domain_id}: {} of {} neurons non-positive",
                    scores.non_positive_count(),
                    scores.scores.len()
                );
                scores
            }
            None => {
                let exact =
                    score(&checkpoint.encoder, head, &samples, ImpactMethod::Exact)?;
                let taylor =
                    score(&checkpoint.encoder, head, &samples, ImpactMethod::Taylor)?;
                save_scores(out, &format!("impact_exact_d{domain_id}.json"), &exact)?;
                save_scores(out, &format!("impact_taylor_d{domain_id}.json"), &taylor)?;
                write_comparison_csv(out, domain_id, &exact, &taylor)?;
                let corr = cross_domain_correlation(&exact, &taylor)?;
                println!(
                    "domain {domain_id}: {} of {} neurons non-positive (exact); \
                     exact vs taylor pearson {} spearman {}",
                    exact.non_positive_count(),
                    exact.scores.len(),
                    fmt_corr(corr.pearson),
                    fmt_corr(corr.spearman),
                );
                exact
            }
        };

        let mut values: Vec<f64> = primary.scores.data().to_vec();
        values.sort_by(|a, b| b.partial_cmp(a).expect("scores are finite"));
        for (rank, v) in values.iter().enumerate() {
            writeln!(sorted_csv, "{domain_id},{},{v}", rank + 1).expect("write to string");
        }
    }
    fs::write(out.join("impact/sorted_impact.csv"), sorted_csv)?;
    Ok(())
}

fn score(
    encoder: &EncoderModel,
    head: &ClassifierHead,
    samples: &[dgd_core::data::Sample],
    method: ImpactMethod,
) -> Result<ImpactScores> {
    average_impact(encoder, head, samples, method)
}

fn save_scores(out: &Path, name: &str, scores: &ImpactScores) -> Result<()> {
    let json = serde_json::to_string_pretty(scores)?;
    fs::write(out.join("impact").join(name), json)?;
    Ok(())
}

fn write_comparison_csv(
    out: &Path,
    domain_id: u32,
    exact: &ImpactScores,
    taylor: &ImpactScores,
) -> Result<()> {
    let mut text = String::from("neuron,exact,taylor\n");
    for (i, (e, t)) in exact.scores.data().iter().zip(taylor.scores.data()).enumerate() {
        writeln!(text, "{i},{e},{t}").expect("write to string");
    }
    fs::write(out.join("impact").join(format!("impact_compare_d{domain_id}.csv")), text)?;
    Ok(())
}

fn fmt_corr(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "undefined".to_string(),
    }
}
