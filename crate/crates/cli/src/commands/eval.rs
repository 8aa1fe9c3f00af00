//! `eval`: rank gallery features against probes under a dropout policy.
//!
//! Takes protocol files written by `generate` and a checkpoint; features
//! come from the checkpoint's encoder. Guided policies read impact score
//! files and pick each protocol's scores by domain id. Emits one CMC CSV
//! per protocol and prints the top-1 accuracies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dgd_core::data::ProbeGallery;
use dgd_core::dgd::{select_temperature, DropoutPolicy};
use dgd_core::error::{Error, Result};
use dgd_core::impact::ImpactScores;
use dgd_core::nn::checkpoint::load_checkpoint;
use dgd_core::pipeline::evaluate_domain;

use crate::PolicyArg;

pub struct Args<'a> {
    pub checkpoint: &'a Path,
    pub protocols: &'a [PathBuf],
    pub policy: PolicyArg,
    pub rate: f64,
    pub scores: &'a [PathBuf],
    pub temperature: Option<f64>,
    pub max_rank: usize,
}

pub fn run(out: &Path, args: &Args<'_>) -> Result<()> {
    let checkpoint = load_checkpoint(args.checkpoint)?;
    let scores = load_scores(args.scores)?;
    fs::create_dir_all(out)?;

    for path in args.protocols {
        let protocol = load_protocol(path)?;
        let policy = build_policy(args, &scores, protocol.domain_id)?;
        let curve = evaluate_domain(&checkpoint.encoder, &policy, &protocol, args.max_rank)?;

        let mut csv = String::from("rank,accuracy\n");
        for (i, acc) in curve.accuracies.iter().enumerate() {
            writeln!(csv, "{},{acc}", i + 1).expect("write to string");
        }
        fs::write(out.join(format!("cmc_d{}.csv", protocol.domain_id)), csv)?;
        println!(
            "protocol d{}: top-1 {:.4} over {} probes",
            protocol.domain_id,
            curve.accuracies.first().copied().unwrap_or(0.0),
            curve.num_probes
        );
    }
    Ok(())
}

fn load_protocol(path: &Path) -> Result<ProbeGallery> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("malformed protocol {}: {e}", path.display())))
}

fn load_scores(paths: &[PathBuf]) -> Result<BTreeMap<u32, ImpactScores>> {
    let mut map = BTreeMap::new();
    for path in paths {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let scores: ImpactScores = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("malformed score file {}: {e}", path.display())))?;
        map.insert(scores.domain_id, scores);
    }
    Ok(map)
}

fn build_policy(
    args: &Args<'_>,
    scores: &BTreeMap<u32, ImpactScores>,
    domain_id: u32,
) -> Result<DropoutPolicy> {
    let guided = |what: &str| {
        scores.get(&domain_id).ok_or_else(|| {
            Error::Config(format!(
                "{what} policy needs --scores with impact scores for domain {domain_id}"
            ))
        })
    };
    Ok(match args.policy {
        PolicyArg::None => DropoutPolicy::None,
        PolicyArg::Standard => DropoutPolicy::Standard { rate: args.rate },
        PolicyArg::Deterministic => {
            DropoutPolicy::DeterministicDgd { scores: guided("deterministic")?.clone() }
        }
        PolicyArg::Stochastic => {
            let s = guided("stochastic")?;
            let temperature = match args.temperature {
                Some(t) => t,
                // Matches the config default: the top-impact neuron keeps
                // probability 0.9.
                None => select_temperature(&s.scores, 0.9)?,
            };
            DropoutPolicy::StochasticDgd { scores: s.clone(), temperature }
        }
    })
}
