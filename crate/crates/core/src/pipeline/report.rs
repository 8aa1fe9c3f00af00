//! Per-stage reports and the CSV artifacts derived from them. Everything
//! written here is deterministic for a fixed config and seed; wall-clock
//! timings are kept out of the serialized forms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::StageKind;
use crate::{Error, Result};

use super::engine::EpochStats;

/// Training trace of one model within a stage (shared stages have one,
/// per-domain stages one per domain).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    /// Domain the model was trained on; `None` for shared models.
    pub domain: Option<u32>,
    pub epochs: Vec<EpochStats>,
    /// Checkpoint path relative to the run directory.
    pub checkpoint: String,
}

/// Everything recorded about one completed stage. Serialized per stage under
/// `reports/`; the wall clock is excluded so reruns are bytewise comparable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageKind,
    /// Content hash of the experiment config this stage ran under, recorded
    /// so every report names the exact inputs that produced it.
    #[serde(default)]
    pub config_hash: String,
    pub runs: Vec<TrainRunRecord>,
    /// Final CMC accuracies (ranks 1..=K) per domain.
    pub cmc: BTreeMap<u32, Vec<f64>>,
    /// Binary guided-dropout masks per domain (deterministic guided stages).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub masks: BTreeMap<u32, Vec<f64>>,
    /// Keep probabilities per domain (stochastic guided stages).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub keep_probabilities: BTreeMap<u32, Vec<f64>>,
    /// Impact scores backing the stage's masks or probabilities.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scores_used: BTreeMap<u32, Vec<f64>>,
    /// Resolved sigmoid temperatures (stochastic guided stages).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub temperatures: BTreeMap<u32, f64>,
    /// Impact snapshot files this stage read or wrote, relative to the run
    /// directory.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub impact_refs: Vec<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Wall clock is timing telemetry, not part of the reproducible result, so
/// equality ignores it. Destructuring keeps the impl honest when fields are
/// added.
impl PartialEq for StageReport {
    fn eq(&self, other: &Self) -> bool {
        let Self {
            stage,
            config_hash,
            runs,
            cmc,
            masks,
            keep_probabilities,
            scores_used,
            temperatures,
            impact_refs,
            wall_clock_secs: _,
        } = self;
        *stage == other.stage
            && *config_hash == other.config_hash
            && *runs == other.runs
            && *cmc == other.cmc
            && *masks == other.masks
            && *keep_probabilities == other.keep_probabilities
            && *scores_used == other.scores_used
            && *temperatures == other.temperatures
            && *impact_refs == other.impact_refs
    }
}

impl StageReport {
    pub fn validate(&self) -> Result<()> {
        for run in &self.runs {
            for e in &run.epochs {
                if !e.train_loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "{} report train loss, epoch {}",
                        self.stage.name(),
                        e.epoch
                    )));
                }
                if e.val_loss.is_some_and(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "{} report val loss, epoch {}",
                        self.stage.name(),
                        e.epoch
                    )));
                }
            }
        }
        for (id, curve) in &self.cmc {
            if curve.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
                return Err(Error::InvalidArgument(format!(
                    "{} report: domain {id} CMC accuracy out of [0,1]",
                    self.stage.name()
                )));
            }
        }
        Ok(())
    }

    /// Rank-1 accuracy for one domain, when this stage evaluated it.
    pub fn top1(&self, domain_id: u32) -> Option<f64> {
        self.cmc.get(&domain_id).and_then(|c| c.first().copied())
    }
}

pub fn save_stage_report(path: &Path, report: &StageReport) -> Result<()> {
    report.validate()?;
    let json = serde_json::to_string_pretty(report)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_stage_report(path: &Path) -> Result<StageReport> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let report: StageReport = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("malformed report {}: {e}", path.display())))?;
    Ok(report)
}

/// Methods-by-domains table of rank-1 accuracies, one row per stage in run
/// order.
pub fn write_summary_csv(path: &Path, reports: &[StageReport]) -> Result<()> {
    let ids: BTreeSet<u32> = reports.iter().flat_map(|r| r.cmc.keys().copied()).collect();
    let mut out = String::from("method");
    for id in &ids {
        let _ = write!(out, ",top1_d{id}");
    }
    out.push('\n');
    for report in reports {
        out.push_str(report.stage.name());
        for id in &ids {
            match report.top1(*id) {
                Some(t1) => {
                    let _ = write!(out, ",{t1}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Long-format per-epoch losses across all stages and domains.
pub fn write_loss_curves_csv(path: &Path, reports: &[StageReport]) -> Result<()> {
    let mut out = String::from("stage,domain,epoch,learning_rate,train_loss,val_loss\n");
    for report in reports {
        for run in &report.runs {
            let domain = run.domain.map(|d| d.to_string()).unwrap_or_default();
            for e in &run.epochs {
                let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{domain},{},{},{},{val}",
                    report.stage.name(),
                    e.epoch,
                    e.learning_rate,
                    e.train_loss
                );
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-neuron impact scores, one row per (snapshot, domain, neuron).
pub fn write_impact_scores_csv(
    path: &Path,
    snapshots: &[(&str, &BTreeMap<u32, crate::impact::ImpactScores>)],
) -> Result<()> {
    let mut out = String::from("snapshot,domain,neuron,score\n");
    for (name, map) in snapshots {
        for (id, scores) in *map {
            for (i, s) in scores.scores.data().iter().enumerate() {
                let _ = writeln!(out, "{name},{id},{i},{s}");
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// One row of the dropped-neurons-versus-accuracy-gain diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct GainRow {
    pub domain_id: u32,
    pub train_samples: usize,
    pub dropped_neurons: usize,
    pub top1_base: f64,
    pub top1_guided: f64,
}

/// Per-domain comparison of how many neurons guided dropout removed against
/// the rank-1 change it bought, paired with the domain's training size.
pub fn write_gain_vs_dropped_csv(path: &Path, rows: &[GainRow]) -> Result<()> {
    let mut out =
        String::from("domain,train_samples,dropped_neurons,top1_base,top1_guided,top1_gain\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.domain_id,
            r.train_samples,
            r.dropped_neurons,
            r.top1_base,
            r.top1_guided,
            r.top1_guided - r.top1_base
        );
    }
    fs::write(path, out)?;
    Ok(())
}

/// Cumulative keep-probability histograms per domain under the stochastic
/// scheme: `count` neurons have keep probability at most `keep_probability`.
pub fn write_cumulative_keep_csv(
    path: &Path,
    rows: &[(u32, Vec<(f64, usize)>)],
) -> Result<()> {
    let mut out = String::from("domain,keep_probability,neurons_at_or_below\n");
    for (id, hist) in rows {
        for (p, count) in hist {
            let _ = writeln!(out, "{id},{p},{count}");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Pairwise agreement of per-domain impact scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePairRow {
    pub domain_a: u32,
    pub domain_b: u32,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

pub fn write_score_comparison_csv(path: &Path, rows: &[ScorePairRow]) -> Result<()> {
    let mut out = String::from("domain_a,domain_b,pearson,spearman\n");
    for r in rows {
        let p = r.pearson.map(|v| v.to_string()).unwrap_or_default();
        let s = r.spearman.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{p},{s}", r.domain_a, r.domain_b);
    }
    fs::write(path, out)?;
    Ok(())
}
