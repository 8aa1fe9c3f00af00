//! `report`: rebuild tables and plot CSVs from a finished run directory.
//!
//! Reads the stage reports (and any impact snapshot files) a pipeline run
//! left behind, prints the method-by-domain top-1 table, and rewrites the
//! summary, loss-curve, impact-score, score-comparison, and cumulative-keep
//! CSVs. The gain-vs-dropped CSV needs training-set sizes that the reports
//! do not carry, so it is written at pipeline time only and left untouched
//! here.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dgd_core::config::StageKind;
use dgd_core::dgd::cumulative_keep_histogram;
use dgd_core::error::{Error, Result};
use dgd_core::impact::{cross_domain_correlation, ImpactScores};
use dgd_core::pipeline::{
    load_stage_report, write_cumulative_keep_csv, write_impact_scores_csv,
    write_loss_curves_csv, write_score_comparison_csv, write_summary_csv, ScorePairRow,
    StageReport,
};
use dgd_core::tensor::Tensor;

use crate::commands::pipeline::summary_table;

const STAGE_ORDER: [StageKind; 5] = [
    StageKind::Individual,
    StageKind::Jstl,
    StageKind::JstlDgd,
    StageKind::FtJstl,
    StageKind::FtJstlDgd,
];

pub fn run(out: &Path) -> Result<()> {
    let mut reports: Vec<StageReport> = Vec::new();
    for kind in STAGE_ORDER {
        let path = out.join(format!("reports/{}.json", kind.name()));
        if path.exists() {
            reports.push(load_stage_report(&path)?);
        }
    }
    if reports.is_empty() {
        return Err(Error::Config(format!(
            "no stage reports under {}; run the pipeline first",
            out.join("reports").display()
        )));
    }

    write_summary_csv(&out.join("summary.csv"), &reports)?;
    write_loss_curves_csv(&out.join("loss_curves.csv"), &reports)?;

    let snapshots = load_impact_snapshots(&out.join("impact"))?;
    if !snapshots.is_empty() {
        let refs: Vec<(&str, &BTreeMap<u32, ImpactScores>)> =
            snapshots.iter().map(|(name, map)| (name.as_str(), map)).collect();
        write_impact_scores_csv(&out.join("impact_scores.csv"), &refs)?;
    }
    if let Some(map) = snapshots.get("jstl") {
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
            write_score_comparison_csv(&out.join("score_comparison.csv"), &rows)?;
        }
    }

    if let Some(ft) = reports.iter().find(|r| r.stage == StageKind::FtJstlDgd) {
        let mut rows = Vec::new();
        for (&id, scores) in &ft.scores_used {
            let Some(&temperature) = ft.temperatures.get(&id) else { continue };
            let tensor = Tensor::new(vec![scores.len()], scores.clone())?;
            rows.push((id, cumulative_keep_histogram(&tensor, temperature)?));
        }
        if !rows.is_empty() {
            write_cumulative_keep_csv(&out.join("cumulative_keep.csv"), &rows)?;
        }
    }

    let mut domain_ids: Vec<u32> = Vec::new();
    for r in &reports {
        for &id in r.cmc.keys() {
            if !domain_ids.contains(&id) {
                domain_ids.push(id);
            }
        }
    }
    domain_ids.sort_unstable();
    print!("{}", summary_table(&reports, &domain_ids));
    Ok(())
}

/// Groups `impact/impact_<snapshot>_d<id>.json` files by snapshot name.
fn load_impact_snapshots(dir: &Path) -> Result<BTreeMap<String, BTreeMap<u32, ImpactScores>>> {
    let mut snapshots: BTreeMap<String, BTreeMap<u32, ImpactScores>> = BTreeMap::new();
    let entries = match fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(_) => return Ok(snapshots),
    };
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_prefix("impact_").and_then(|s| s.strip_suffix(".json"))
        else {
            continue;
        };
        let Some((snapshot, _)) = stem.rsplit_once("_d") else { continue };
        let text = fs::read_to_string(entry.path())?;
        let scores: ImpactScores = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("malformed score file {}: {e}", entry.path().display()))
        })?;
        snapshots.entry(snapshot.to_string()).or_default().insert(scores.domain_id, scores);
    }
    Ok(snapshots)
}
