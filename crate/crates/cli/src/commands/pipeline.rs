//! `pipeline`: run the staged training procedure for one or many seeds.
//!
//! The manifest hits the disk before any stage executes, so the config hash
//! is recorded first; it is rewritten as runs finish. A stage failure stops
//! the invocation but keeps the manifest and every completed artifact.
//! Multi-seed runs go into seed_<s>/ subdirectories and add a per-seed
//! summary plus a mean-and-std aggregate across seeds.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dgd_core::config::{ExperimentConfig, StageKind};
use dgd_core::error::Result;
use dgd_core::pipeline::{run_full_pipeline, PipelineOutcome, RunOptions, StageReport};

use crate::manifest::RunManifest;
use crate::table;

pub struct Args {
    pub out: PathBuf,
    pub base_seed: u64,
    pub seeds: Option<u32>,
    pub stages: Option<Vec<StageKind>>,
}

pub fn run(exp: &ExperimentConfig, args: &Args) -> Result<()> {
    let seed_list: Vec<u64> = match args.seeds {
        None => vec![args.base_seed],
        Some(n) => (0..n).map(|i| args.base_seed + u64::from(i)).collect(),
    };
    let multi = args.seeds.is_some();
    let stage_filter: Option<BTreeSet<StageKind>> =
        args.stages.as_ref().map(|s| s.iter().copied().collect());

    fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::new(&exp.content_hash(), seed_list.clone());
    manifest.save(&args.out)?;

    let domain_ids: Vec<u32> = exp.domains.iter().map(|d| d.domain_id).collect();
    let mut per_seed: Vec<(u64, Vec<StageReport>)> = Vec::new();

    for &seed in &seed_list {
        let (run_dir, prefix) = if multi {
            (args.out.join(format!("seed_{seed}")), format!("seed_{seed}/"))
        } else {
            (args.out.clone(), String::new())
        };
        let opts =
            RunOptions { out_dir: run_dir.clone(), seed, stages: stage_filter.clone() };
        log::info!("running seed {seed} into {}", run_dir.display());
        match run_full_pipeline(exp, &opts) {
            Ok(outcome) => {
                record_outcome(&mut manifest, &outcome, &prefix);
                manifest.save(&args.out)?;
                if !multi {
                    print!("{}", summary_table(&outcome.reports, &domain_ids));
                }
                per_seed.push((seed, outcome.reports));
            }
            Err(e) => {
                manifest.record_run_dir(&run_dir, &prefix);
                manifest.save(&args.out)?;
                return Err(e);
            }
        }
    }

    if multi {
        write_per_seed_csv(&args.out.join("summary_per_seed.csv"), &per_seed, &domain_ids)?;
        let (table_text, csv_text) = aggregate(&per_seed, &domain_ids);
        fs::write(args.out.join("summary_mean_std.csv"), csv_text)?;
        print!("{table_text}");
    }
    println!("run {} complete: {} seed(s)", manifest.run_id, seed_list.len());
    Ok(())
}

fn record_outcome(manifest: &mut RunManifest, outcome: &PipelineOutcome, prefix: &str) {
    for rel in &outcome.checkpoint_files {
        manifest.checkpoints.push(format!("{prefix}{rel}"));
    }
    for rel in &outcome.report_files {
        manifest.reports.push(format!("{prefix}{rel}"));
    }
}

/// Stage rows by domain columns, top-1 accuracy in the cells.
pub fn summary_table(reports: &[StageReport], domain_ids: &[u32]) -> String {
    let mut header = vec!["method".to_string()];
    header.extend(domain_ids.iter().map(|id| format!("top1_d{id}")));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.stage.name().to_string()];
            row.extend(domain_ids.iter().map(|&id| match r.top1(id) {
                Some(v) => format!("{v:.4}"),
                None => String::new(),
            }));
            row
        })
        .collect();
    table::render(&header, &rows)
}

fn write_per_seed_csv(
    path: &Path,
    per_seed: &[(u64, Vec<StageReport>)],
    domain_ids: &[u32],
) -> Result<()> {
    let mut text = String::from("seed,method");
    for id in domain_ids {
        write!(text, ",top1_d{id}").expect("write to string");
    }
    text.push('\n');
    for (seed, reports) in per_seed {
        for report in reports {
            write!(text, "{seed},{}", report.stage.name()).expect("write to string");
            for &id in domain_ids {
                match report.top1(id) {
                    Some(v) => write!(text, ",{v}").expect("write to string"),
                    None => text.push(','),
                }
            }
            text.push('\n');
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// Mean and sample standard deviation (n - 1 denominator, 0 for a single
/// seed) of top-1 per stage and domain, as a printable table and a CSV.
fn aggregate(per_seed: &[(u64, Vec<StageReport>)], domain_ids: &[u32]) -> (String, String) {
    let mut stages: Vec<StageKind> = Vec::new();
    for (_, reports) in per_seed {
        for r in reports {
            if !stages.contains(&r.stage) {
                stages.push(r.stage);
            }
        }
    }

    let mut header = vec!["method".to_string()];
    let mut csv = String::from("method");
    for id in domain_ids {
        header.push(format!("top1_d{id}"));
        write!(csv, ",top1_d{id}_mean,top1_d{id}_std").expect("write to string");
    }
    csv.push('\n');

    let mut rows = Vec::new();
    for stage in stages {
        let mut row = vec![stage.name().to_string()];
        write!(csv, "{}", stage.name()).expect("write to string");
        for &id in domain_ids {
            let values: Vec<f64> = per_seed
                .iter()
                .flat_map(|(_, reports)| reports.iter())
                .filter(|r| r.stage == stage)
                .filter_map(|r| r.top1(id))
                .collect();
            if values.is_empty() {
                row.push(String::new());
                csv.push_str(",,");
                continue;
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = if values.len() < 2 {
                0.0
            } else {
                let var =
                    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
                var.sqrt()
            };
            row.push(format!("{mean:.4}\u{00b1}{std:.4}"));
            write!(csv, ",{mean},{std}").expect("write to string");
        }
        rows.push(row);
        csv.push('\n');
    }
    (table::render(&header, &rows), csv)
}
