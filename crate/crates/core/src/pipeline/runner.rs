//! Full multi-stage runs: synthetic data preparation, stage sequencing with
//! checkpoint hand-off, and artifact persistence under a run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{ExperimentConfig, ImpactSplit, Objective, StageKind, StagePlan};
use crate::data::{
    generate_domain, merge_single_task, split_probe_gallery, split_train_val, DomainSpec,
    MergedDataset, ProbeGallery, Sample,
};
use crate::dgd::{cumulative_keep_histogram, DropoutPolicy};
use crate::impact::{average_impact, cross_domain_correlation, ImpactScores};
use crate::nn::{
    load_checkpoint, save_checkpoint, Checkpoint, ClassifierHead, EncoderModel, HeadSet,
};
use crate::rng::mix_seed;
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::engine::StageConfig;
use super::report::{
    save_stage_report, write_cumulative_keep_csv, write_gain_vs_dropped_csv,
    write_impact_scores_csv, write_loss_curves_csv, write_score_comparison_csv,
    write_summary_csv, GainRow, ScorePairRow, StageReport, TrainRunRecord,
};
use super::stages::{
    evaluate_domain, finetune_on_domain, resume_with_dgd, train_individual, train_jstl,
    train_multitask,
};

/// Synthetic datasets for one run: merged training and validation splits over
/// the training identities, plus a per-domain retrieval protocol over the
/// held-out identities.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: MergedDataset,
    pub val: MergedDataset,
    pub protocols: BTreeMap<u32, ProbeGallery>,
}

/// Generates every domain, holds out the highest-labeled identities for
/// retrieval, merges the rest into the shared label space, and splits
/// train/validation. Everything is derived from `run_seed`.
pub fn prepare_data(exp: &ExperimentConfig, run_seed: u64) -> Result<PreparedData> {
    let mut train_pools = Vec::with_capacity(exp.domains.len());
    let mut protocols = BTreeMap::new();
    for dc in &exp.domains {
        let spec = DomainSpec {
            domain_id: dc.domain_id,
            num_identities: dc.num_identities,
            samples_per_identity: dc.samples_per_identity,
            input_dim: exp.input_dim,
            bias_strength: dc.bias_strength,
            noise_sigma: dc.noise_sigma,
            seed: mix_seed(run_seed, u64::from(dc.domain_id)),
        };
        let all = generate_domain(&spec)?;
        let train_cut = dc.train_identities() as u32;
        let (train_pool, test_pool): (Vec<Sample>, Vec<Sample>) =
            all.into_iter().partition(|s| s.local_label <= train_cut);
        let protocol =
            split_probe_gallery(&test_pool, mix_seed(run_seed, u64::from(dc.domain_id)))?;
        protocols.insert(dc.domain_id, protocol);
        train_pools.push(train_pool);
    }
    let merged = merge_single_task(&train_pools)?;
    let (train, val) = split_train_val(&merged, exp.val_fraction, run_seed)?;
    Ok(PreparedData { train, val, protocols })
}

/// Run-level options that live outside the experiment config.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub seed: u64,
    /// When set, only these stage kinds execute; earlier stages' artifacts
    /// are loaded from the run directory instead.
    pub stages: Option<BTreeSet<StageKind>>,
}

/// Everything a run produced, with paths relative to the run directory.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub reports: Vec<StageReport>,
    pub checkpoint_files: Vec<String>,
    pub report_files: Vec<String>,
    pub impact_files: Vec<String>,
    pub csv_files: Vec<String>,
}

/// Models and scores carried between stages in memory; anything missing is
/// loaded from the run directory so filtered reruns work.
#[derive(Default)]
struct RunState {
    jstl: Option<(EncoderModel, HeadSet)>,
    jstl_dgd: Option<(EncoderModel, HeadSet)>,
    impact_jstl: Option<BTreeMap<u32, ImpactScores>>,
    impact_jstl_dgd: Option<BTreeMap<u32, ImpactScores>>,
}

fn checkpoint_rel(name: &str) -> String {
    format!("checkpoints/{name}.json")
}

fn impact_rel(snapshot: &str, domain_id: u32) -> String {
    format!("impact/impact_{snapshot}_d{domain_id}.json")
}

fn save_model(
    out_dir: &Path,
    name: &str,
    encoder: &EncoderModel,
    heads: &HeadSet,
) -> Result<String> {
    let rel = checkpoint_rel(name);
    let checkpoint = Checkpoint::new(encoder.clone(), heads.clone());
    save_checkpoint(&checkpoint, &out_dir.join(&rel))?;
    Ok(rel)
}

fn load_model(out_dir: &Path, name: &str) -> Result<(EncoderModel, HeadSet)> {
    let path = out_dir.join(checkpoint_rel(name));
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing checkpoint {}; run the {name} stage first",
            path.display()
        )));
    }
    let checkpoint = load_checkpoint(&path)?;
    Ok((checkpoint.encoder, checkpoint.heads))
}

fn save_impact(out_dir: &Path, snapshot: &str, scores: &ImpactScores) -> Result<String> {
    let rel = impact_rel(snapshot, scores.domain_id);
    let json = serde_json::to_string_pretty(scores)?;
    fs::write(out_dir.join(&rel), json)?;
    Ok(rel)
}

fn load_impact_map(
    out_dir: &Path,
    snapshot: &str,
    domain_ids: &[u32],
) -> Result<BTreeMap<u32, ImpactScores>> {
    let mut map = BTreeMap::new();
    for &id in domain_ids {
        let rel = impact_rel(snapshot, id);
        let path = out_dir.join(&rel);
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing impact scores {}; run the stage that produces the {snapshot} snapshot \
                 first",
                path.display()
            )));
        }
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let scores: ImpactScores = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("malformed impact file {}: {e}", path.display())))?;
        map.insert(id, scores);
    }
    Ok(map)
}

/// Scores every domain of the configured split against a trained model and
/// persists one snapshot file per domain.
fn compute_impact_snapshot(
    out_dir: &Path,
    snapshot: &str,
    model: &EncoderModel,
    head: &ClassifierHead,
    data: &PreparedData,
    exp: &ExperimentConfig,
) -> Result<(BTreeMap<u32, ImpactScores>, Vec<String>)> {
    let pool = match exp.impact.split {
        ImpactSplit::Train => &data.train,
        ImpactSplit::Val => &data.val,
    };
    let mut map = BTreeMap::new();
    let mut files = Vec::new();
    for id in pool.domain_ids() {
        let samples = pool.domain_samples(id)?;
        let scores = average_impact(model, head, &samples, exp.impact.method)?;
        files.push(save_impact(out_dir, snapshot, &scores)?);
        map.insert(id, scores);
    }
    Ok((map, files))
}

fn domain_samples_or_empty(dataset: &MergedDataset, domain_id: u32) -> Vec<Sample> {
    dataset.domain_samples(domain_id).unwrap_or_default()
}

fn sorted_domain_ids(data: &PreparedData) -> Vec<u32> {
    data.train.domain_ids().collect()
}

fn run_individual(
    data: &PreparedData,
    exp: &ExperimentConfig,
    plan: &StagePlan,
    opts: &RunOptions,
) -> Result<StageReport> {
    let mut runs = Vec::new();
    let mut cmc = BTreeMap::new();
    for id in sorted_domain_ids(data) {
        let cfg = StageConfig::from_plan(plan, opts.seed, exp.momentum, Some(id));
        let train = domain_samples_or_empty(&data.train, id);
        let val = domain_samples_or_empty(&data.val, id);
        let classes = data.train.domain_classes(id)?;
        let (model, head, epochs) = train_individual(&train, &val, classes, exp, &cfg)?;
        let heads = HeadSet::Single(head);
        let checkpoint =
            save_model(&opts.out_dir, &format!("individual_d{id}"), &model, &heads)?;
        let protocol = &data.protocols[&id];
        let curve = evaluate_domain(
            &model,
            &DropoutPolicy::Standard { rate: cfg.dropout.rate },
            protocol,
            exp.eval.max_rank,
        )?;
        cmc.insert(id, curve.accuracies);
        runs.push(TrainRunRecord { domain: Some(id), epochs, checkpoint });
    }
    Ok(StageReport {
        config_hash: String::new(),
        stage: StageKind::Individual,
        runs,
        cmc,
        masks: BTreeMap::new(),
        keep_probabilities: BTreeMap::new(),
        scores_used: BTreeMap::new(),
        temperatures: BTreeMap::new(),
        impact_refs: Vec::new(),
        wall_clock_secs: 0.0,
    })
}

fn run_jstl(
    state: &mut RunState,
    data: &PreparedData,
    exp: &ExperimentConfig,
    plan: &StagePlan,
    opts: &RunOptions,
) -> Result<StageReport> {
    let cfg = StageConfig::from_plan(plan, opts.seed, exp.momentum, None);
    let (model, heads, epochs) = if plan.objective == Objective::MultiTask {
        let (model, head_map, epochs) = train_multitask(&data.train, &data.val, exp, &cfg)?;
        (model, HeadSet::PerDomain(head_map), epochs)
    } else {
        let (model, head, epochs) = train_jstl(&data.train, &data.val, exp, &cfg)?;
        (model, HeadSet::Single(head), epochs)
    };
    let checkpoint = save_model(&opts.out_dir, "jstl", &model, &heads)?;

    let mut impact_refs = Vec::new();
    match &heads {
        HeadSet::Single(head) => {
            let (map, files) =
                compute_impact_snapshot(&opts.out_dir, "jstl", &model, head, data, exp)?;
            state.impact_jstl = Some(map);
            impact_refs = files;
        }
        HeadSet::PerDomain(_) => {
            log::warn!(
                "jstl trained with per-domain heads; skipping the impact snapshot (guided \
                 stages need the merged-label head)"
            );
        }
    }

    let mut cmc = BTreeMap::new();
    for id in sorted_domain_ids(data) {
        let curve = evaluate_domain(
            &model,
            &DropoutPolicy::Standard { rate: cfg.dropout.rate },
            &data.protocols[&id],
            exp.eval.max_rank,
        )?;
        cmc.insert(id, curve.accuracies);
    }
    state.jstl = Some((model, heads));
    Ok(StageReport {
        config_hash: String::new(),
        stage: StageKind::Jstl,
        runs: vec![TrainRunRecord { domain: None, epochs, checkpoint }],
        cmc,
        masks: BTreeMap::new(),
        keep_probabilities: BTreeMap::new(),
        scores_used: BTreeMap::new(),
        temperatures: BTreeMap::new(),
        impact_refs,
        wall_clock_secs: 0.0,
    })
}

fn run_jstl_dgd(
    state: &mut RunState,
    data: &PreparedData,
    exp: &ExperimentConfig,
    plan: &StagePlan,
    opts: &RunOptions,
) -> Result<StageReport> {
    let cfg = StageConfig::from_plan(plan, opts.seed, exp.momentum, None);
    let (mut model, heads) = match state.jstl.take() {
        Some(pair) => pair,
        None => load_model(&opts.out_dir, "jstl")?,
    };
    let mut head = heads.single()?.clone();
    state.jstl = Some((model.clone(), heads));

    let domain_ids = sorted_domain_ids(data);
    let impact = match &state.impact_jstl {
        Some(map) => map.clone(),
        None => {
            let map = load_impact_map(&opts.out_dir, "jstl", &domain_ids)?;
            state.impact_jstl = Some(map.clone());
            map
        }
    };
    let mut impact_refs: Vec<String> =
        domain_ids.iter().map(|&id| impact_rel("jstl", id)).collect();

    let resume = resume_with_dgd(&mut model, &mut head, &data.train, &data.val, &impact, exp, &cfg)?;
    let heads = HeadSet::Single(head.clone());
    let checkpoint = save_model(&opts.out_dir, "jstl_dgd", &model, &heads)?;

    // Scores shift once training resumes; re-score the updated model so the
    // fine-tuning stages mask with current impacts.
    let (recomputed, files) =
        compute_impact_snapshot(&opts.out_dir, "jstl_dgd", &model, &head, data, exp)?;
    state.impact_jstl_dgd = Some(recomputed);
    impact_refs.extend(files);

    let mut cmc = BTreeMap::new();
    for id in &domain_ids {
        let policy = resume.policies.get(id).ok_or_else(|| {
            Error::Config(format!("no guided-dropout policy for domain {id}"))
        })?;
        let curve = evaluate_domain(&model, policy, &data.protocols[id], exp.eval.max_rank)?;
        cmc.insert(*id, curve.accuracies);
    }
    state.jstl_dgd = Some((model, heads));
    Ok(StageReport {
        config_hash: String::new(),
        stage: StageKind::JstlDgd,
        runs: vec![TrainRunRecord { domain: None, epochs: resume.epochs, checkpoint }],
        cmc,
        masks: resume.masks,
        keep_probabilities: resume.keep_probabilities,
        scores_used: resume.scores_used,
        temperatures: resume.temperatures,
        impact_refs,
        wall_clock_secs: 0.0,
    })
}

fn run_finetune(
    state: &mut RunState,
    data: &PreparedData,
    exp: &ExperimentConfig,
    plan: &StagePlan,
    opts: &RunOptions,
) -> Result<StageReport> {
    let kind = plan.stage;
    let guided = kind == StageKind::FtJstlDgd;
    let (base_name, snapshot) = if guided { ("jstl_dgd", "jstl_dgd") } else { ("jstl", "") };

    let base = {
        let slot = if guided { &mut state.jstl_dgd } else { &mut state.jstl };
        if slot.is_none() {
            *slot = Some(load_model(&opts.out_dir, base_name)?);
        }
        slot.as_ref().expect("slot filled above").0.clone()
    };

    let targets: Vec<u32> = match plan.target_domain {
        Some(id) => vec![id],
        None => sorted_domain_ids(data),
    };

    let impact = if guided {
        let slot = &mut state.impact_jstl_dgd;
        if slot.is_none() {
            *slot = Some(load_impact_map(&opts.out_dir, snapshot, &targets)?);
        }
        slot.clone()
    } else {
        None
    };

    let mut runs = Vec::new();
    let mut cmc = BTreeMap::new();
    let mut masks = BTreeMap::new();
    let mut keep_probabilities = BTreeMap::new();
    let mut scores_used = BTreeMap::new();
    let mut temperatures = BTreeMap::new();
    let mut impact_refs = Vec::new();

    for &id in &targets {
        let cfg = StageConfig::from_plan(plan, opts.seed, exp.momentum, Some(id));
        let train = domain_samples_or_empty(&data.train, id);
        let val = domain_samples_or_empty(&data.val, id);
        let classes = data.train.domain_classes(id)?;
        let domain_impact = match &impact {
            Some(map) => Some(map.get(&id).ok_or_else(|| {
                Error::Config(format!("missing impact scores for domain {id}"))
            })?),
            None => None,
        };
        if guided {
            impact_refs.push(impact_rel(snapshot, id));
        }
        let result = finetune_on_domain(&base, &train, &val, classes, domain_impact, &cfg)?;
        let heads = HeadSet::Single(result.head);
        let checkpoint =
            save_model(&opts.out_dir, &format!("{}_d{id}", kind.name()), &result.model, &heads)?;
        let curve =
            evaluate_domain(&result.model, &result.policy, &data.protocols[&id], exp.eval.max_rank)?;
        cmc.insert(id, curve.accuracies);
        match &result.policy {
            DropoutPolicy::DeterministicDgd { scores } => {
                masks.insert(
                    id,
                    crate::dgd::deterministic_mask(&scores.scores).values.data().to_vec(),
                );
                scores_used.insert(id, scores.scores.data().to_vec());
            }
            DropoutPolicy::StochasticDgd { scores, temperature } => {
                let probs: Vec<f64> = scores
                    .scores
                    .data()
                    .iter()
                    .map(|&s| crate::dgd::keep_probability(s, *temperature))
                    .collect::<Result<_>>()?;
                keep_probabilities.insert(id, probs);
                scores_used.insert(id, scores.scores.data().to_vec());
                temperatures.insert(id, *temperature);
            }
            DropoutPolicy::Standard { .. } | DropoutPolicy::None => {}
        }
        runs.push(TrainRunRecord { domain: Some(id), epochs: result.epochs, checkpoint });
    }

    Ok(StageReport {
        config_hash: String::new(),
        stage: kind,
        runs,
        cmc,
        masks,
        keep_probabilities,
        scores_used,
        temperatures,
        impact_refs,
        wall_clock_secs: 0.0,
    })
}

/// Executes the configured stages in order against synthetic data derived
/// from the run seed, persisting checkpoints, impact snapshots, reports, and
/// CSV summaries under the run directory. A stage failure halts the run;
/// artifacts of completed stages stay on disk.
pub fn run_full_pipeline(exp: &ExperimentConfig, opts: &RunOptions) -> Result<PipelineOutcome> {
    exp.validate()?;
    for sub in ["checkpoints", "impact", "reports"] {
        fs::create_dir_all(opts.out_dir.join(sub))?;
    }
    let data = prepare_data(exp, opts.seed)?;
    let config_hash = exp.content_hash();

    let mut state = RunState::default();
    let mut reports = Vec::new();
    let mut report_files = Vec::new();
    let mut timings: BTreeMap<String, f64> = BTreeMap::new();
    let mut executed: BTreeSet<StageKind> = BTreeSet::new();

    for plan in exp.effective_stages() {
        if let Some(filter) = &opts.stages {
            if !filter.contains(&plan.stage) {
                continue;
            }
        }
        let started = Instant::now();
        let mut report = match plan.stage {
            StageKind::Individual => run_individual(&data, exp, &plan, opts)?,
            StageKind::Jstl => run_jstl(&mut state, &data, exp, &plan, opts)?,
            StageKind::JstlDgd => run_jstl_dgd(&mut state, &data, exp, &plan, opts)?,
            StageKind::FtJstl | StageKind::FtJstlDgd => {
                run_finetune(&mut state, &data, exp, &plan, opts)?
            }
        };
        report.config_hash = config_hash.clone();
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        timings.insert(plan.stage.name().to_string(), report.wall_clock_secs);
        let rel = format!("reports/{}.json", plan.stage.name());
        save_stage_report(&opts.out_dir.join(&rel), &report)?;
        report_files.push(rel);
        executed.insert(plan.stage);
        log::info!("stage {} done in {:.2}s", plan.stage.name(), report.wall_clock_secs);
        reports.push(report);
    }

    if let Some(filter) = &opts.stages {
        for kind in filter {
            if !executed.contains(kind) {
                log::warn!("requested stage {} is not in the configured plan", kind.name());
            }
        }
    }

    let csv_files = write_run_csvs(&opts.out_dir, &reports, &state, &data)?;
    let timing_json = serde_json::to_string_pretty(&timings)?;
    fs::write(opts.out_dir.join("timing.json"), timing_json)?;

    let checkpoint_files = reports
        .iter()
        .flat_map(|r| r.runs.iter().map(|run| run.checkpoint.clone()))
        .collect();
    let impact_files = {
        let mut files: Vec<String> =
            reports.iter().flat_map(|r| r.impact_refs.iter().cloned()).collect();
        files.sort();
        files.dedup();
        files
    };
    Ok(PipelineOutcome { reports, checkpoint_files, report_files, impact_files, csv_files })
}

fn write_run_csvs(
    out_dir: &Path,
    reports: &[StageReport],
    state: &RunState,
    data: &PreparedData,
) -> Result<Vec<String>> {
    let mut files = Vec::new();

    write_summary_csv(&out_dir.join("summary.csv"), reports)?;
    files.push("summary.csv".to_string());
    write_loss_curves_csv(&out_dir.join("loss_curves.csv"), reports)?;
    files.push("loss_curves.csv".to_string());

    let mut snapshots: Vec<(&str, &BTreeMap<u32, ImpactScores>)> = Vec::new();
    if let Some(map) = &state.impact_jstl {
        snapshots.push(("jstl", map));
    }
    if let Some(map) = &state.impact_jstl_dgd {
        snapshots.push(("jstl_dgd", map));
    }
    if !snapshots.is_empty() {
        write_impact_scores_csv(&out_dir.join("impact_scores.csv"), &snapshots)?;
        files.push("impact_scores.csv".to_string());
    }

    if let Some(map) = &state.impact_jstl {
        let ids: Vec<u32> = map.keys().copied().collect();
        let mut rows = Vec::new();
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                let corr = cross_domain_correlation(&map[&a], &map[&b])?;
                rows.push(ScorePairRow {
                    domain_a: a,
                    domain_b: b,
                    pearson: corr.pearson,
                    spearman: corr.spearman,
                });
            }
        }
        if !rows.is_empty() {
            write_score_comparison_csv(&out_dir.join("score_comparison.csv"), &rows)?;
            files.push("score_comparison.csv".to_string());
        }
    }

    let find = |kind: StageKind| reports.iter().find(|r| r.stage == kind);
    if let (Some(base), Some(guided), Some(impact)) =
        (find(StageKind::Jstl), find(StageKind::JstlDgd), &state.impact_jstl)
    {
        let mut rows = Vec::new();
        for (&id, scores) in impact {
            let (Some(t_base), Some(t_guided)) = (base.top1(id), guided.top1(id)) else {
                continue;
            };
            rows.push(GainRow {
                domain_id: id,
                train_samples: data.train.domain_sample_indices(id).map_or(0, <[usize]>::len),
                dropped_neurons: scores.non_positive_count(),
                top1_base: t_base,
                top1_guided: t_guided,
            });
        }
        if !rows.is_empty() {
            write_gain_vs_dropped_csv(&out_dir.join("gain_vs_dropped.csv"), &rows)?;
            files.push("gain_vs_dropped.csv".to_string());
        }
    }

    if let Some(ft) = find(StageKind::FtJstlDgd) {
        let mut rows = Vec::new();
        for (&id, scores) in &ft.scores_used {
            let Some(&temperature) = ft.temperatures.get(&id) else { continue };
            let tensor = Tensor::new(vec![scores.len()], scores.clone())?;
            rows.push((id, cumulative_keep_histogram(&tensor, temperature)?));
        }
        if !rows.is_empty() {
            write_cumulative_keep_csv(&out_dir.join("cumulative_keep.csv"), &rows)?;
            files.push("cumulative_keep.csv".to_string());
        }
    }

    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DomainConfig, EncoderConfig, EvalConfig, ImpactConfig, StagePlan};

    fn micro_exp() -> ExperimentConfig {
        let mut stages: Vec<StagePlan> = ExperimentConfig::standard_stages();
        for plan in &mut stages {
            plan.epochs = Some(match plan.stage {
                StageKind::Individual => 2,
                StageKind::Jstl => 4,
                _ => 2,
            });
            plan.batch_size = Some(8);
        }
        ExperimentConfig {
            input_dim: 6,
            domains: vec![
                DomainConfig {
                    domain_id: 1,
                    num_identities: 8,
                    test_identities: 3,
                    samples_per_identity: 3,
                    bias_strength: 1.0,
                    noise_sigma: 0.05,
                },
                DomainConfig {
                    domain_id: 2,
                    num_identities: 6,
                    test_identities: 3,
                    samples_per_identity: 3,
                    bias_strength: 0.5,
                    noise_sigma: 0.05,
                },
            ],
            encoder: EncoderConfig { hidden: vec![8], feature_dim: 8 },
            val_fraction: 0.34,
            seed: 0,
            momentum: 0.9,
            stages,
            impact: ImpactConfig::default(),
            eval: EvalConfig { max_rank: 3 },
        }
    }

    fn opts(dir: &Path, seed: u64, stages: Option<&[StageKind]>) -> RunOptions {
        RunOptions {
            out_dir: dir.to_path_buf(),
            seed,
            stages: stages.map(|s| s.iter().copied().collect()),
        }
    }

    #[test]
    fn prepare_data_splits_identities_and_protocols() {
        let exp = micro_exp();
        let data = prepare_data(&exp, 5).unwrap();
        assert_eq!(data.train.domain_classes(1).unwrap(), 5);
        assert_eq!(data.train.domain_classes(2).unwrap(), 3);
        assert_eq!(data.train.total_classes(), 8);
        assert_eq!(data.protocols.len(), 2);
        // One gallery entry per held-out identity; the rest probe.
        assert_eq!(data.protocols[&1].gallery.len(), 3);
        assert_eq!(data.protocols[&1].probes.len(), 6);
        // Held-out identities never appear in train or val.
        for s in data.train.samples().iter().chain(data.val.samples()) {
            let cut = if s.domain_id == 1 { 5 } else { 3 };
            assert!(s.local_label <= cut);
        }
        // Deterministic in the run seed.
        let again = prepare_data(&exp, 5).unwrap();
        assert_eq!(data.train.samples(), again.train.samples());
        assert_eq!(data.val.samples(), again.val.samples());
    }

    #[test]
    fn full_pipeline_emits_ordered_reports_and_artifacts() {
        let exp = micro_exp();
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_full_pipeline(&exp, &opts(dir.path(), 3, None)).unwrap();

        let kinds: Vec<StageKind> = outcome.reports.iter().map(|r| r.stage).collect();
        assert_eq!(
            kinds,
            vec![
                StageKind::Individual,
                StageKind::Jstl,
                StageKind::JstlDgd,
                StageKind::FtJstl,
                StageKind::FtJstlDgd
            ]
        );
        for rel in outcome
            .checkpoint_files
            .iter()
            .chain(&outcome.report_files)
            .chain(&outcome.impact_files)
            .chain(&outcome.csv_files)
        {
            assert!(dir.path().join(rel).exists(), "missing artifact {rel}");
        }
        assert!(outcome.csv_files.contains(&"gain_vs_dropped.csv".to_string()));
        assert!(outcome.csv_files.contains(&"cumulative_keep.csv".to_string()));
        assert!(dir.path().join("timing.json").exists());

        // Guided stage logged masks consistent with its scores.
        let dgd = &outcome.reports[2];
        assert!(!dgd.masks.is_empty());
        for (id, mask) in &dgd.masks {
            for (m, s) in mask.iter().zip(&dgd.scores_used[id]) {
                assert_eq!(*m == 0.0, *s <= 0.0, "domain {id} mask/score mismatch");
            }
        }
        // Stochastic fine-tune resolved a temperature per domain.
        let ft_dgd = &outcome.reports[4];
        assert_eq!(ft_dgd.temperatures.len(), 2);
        assert_eq!(ft_dgd.keep_probabilities.len(), 2);
    }

    #[test]
    fn reruns_reproduce_all_reports_bitwise() {
        let exp = micro_exp();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let out_a = run_full_pipeline(&exp, &opts(dir_a.path(), 9, None)).unwrap();
        let out_b = run_full_pipeline(&exp, &opts(dir_b.path(), 9, None)).unwrap();
        assert_eq!(out_a.reports, out_b.reports);
        for rel in out_a
            .report_files
            .iter()
            .chain(&out_a.checkpoint_files)
            .chain(&out_a.impact_files)
            .chain(&out_a.csv_files)
        {
            let a = fs::read(dir_a.path().join(rel)).unwrap();
            let b = fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "artifact {rel} differs between identical runs");
        }
    }

    #[test]
    fn filtered_rerun_reproduces_downstream_stages_from_checkpoints() {
        let exp = micro_exp();
        let dir = tempfile::tempdir().unwrap();
        let full = run_full_pipeline(&exp, &opts(dir.path(), 21, None)).unwrap();

        // Rerun only the fine-tuning stages in a fresh process state; they
        // must load the jstl/jstl_dgd checkpoints and reproduce bitwise.
        let rerun = run_full_pipeline(
            &exp,
            &opts(dir.path(), 21, Some(&[StageKind::FtJstl, StageKind::FtJstlDgd])),
        )
        .unwrap();
        assert_eq!(rerun.reports.len(), 2);
        assert_eq!(rerun.reports[0], full.reports[3]);
        assert_eq!(rerun.reports[1], full.reports[4]);
    }

    #[test]
    fn missing_prerequisites_name_the_stage_to_run_first() {
        let exp = micro_exp();
        let dir = tempfile::tempdir().unwrap();
        let err = run_full_pipeline(&exp, &opts(dir.path(), 2, Some(&[StageKind::JstlDgd])))
            .unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("jstl"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
