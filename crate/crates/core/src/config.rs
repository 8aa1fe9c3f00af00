//! Experiment configuration: one JSON document describing domains, encoder,
//! stages, and evaluation settings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dgd::{DEFAULT_TARGET_MAX_KEEP, STANDARD_DROPOUT_RATE};
use crate::impact::ImpactMethod;
use crate::schedule::Schedule;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub input_dim: usize,
    pub domains: Vec<DomainConfig>,
    pub encoder: EncoderConfig,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Stage plans, executed in order. Empty means the standard five-stage
    /// sequence.
    #[serde(default)]
    pub stages: Vec<StagePlan>,
    #[serde(default)]
    pub impact: ImpactConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub domain_id: u32,
    /// Total identities, training and held-out test together.
    pub num_identities: usize,
    /// Identities (the highest labels) reserved for the retrieval protocol.
    pub test_identities: usize,
    pub samples_per_identity: usize,
    #[serde(default)]
    pub bias_strength: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl DomainConfig {
    pub fn train_identities(&self) -> usize {
        self.num_identities - self.test_identities
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpactConfig {
    #[serde(default = "default_impact_method")]
    pub method: ImpactMethod,
    /// Which split the per-domain averages are taken over.
    #[serde(default)]
    pub split: ImpactSplit,
    /// Recompute scores (and masks) every this many epochs inside a guided
    /// stage. Unset means scores stay frozen at stage start.
    #[serde(default)]
    pub recompute_interval: Option<u32>,
}

fn default_impact_method() -> ImpactMethod {
    ImpactMethod::Taylor
}

impl Default for ImpactConfig {
    fn default() -> Self {
        Self { method: default_impact_method(), split: ImpactSplit::Train, recompute_interval: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactSplit {
    #[default]
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_max_rank")]
    pub max_rank: usize,
}

fn default_max_rank() -> usize {
    10
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_rank: default_max_rank() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Individual,
    Jstl,
    JstlDgd,
    FtJstl,
    FtJstlDgd,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Individual => "individual",
            StageKind::Jstl => "jstl",
            StageKind::JstlDgd => "jstl_dgd",
            StageKind::FtJstl => "ft_jstl",
            StageKind::FtJstlDgd => "ft_jstl_dgd",
        }
    }

    /// Stable tag mixed into stage seeds; independent of stage order so
    /// filtered reruns reproduce full runs bitwise.
    pub fn seed_tag(self) -> u64 {
        match self {
            StageKind::Individual => 1,
            StageKind::Jstl => 2,
            StageKind::JstlDgd => 3,
            StageKind::FtJstl => 4,
            StageKind::FtJstlDgd => 5,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "individual" => Ok(StageKind::Individual),
            "jstl" => Ok(StageKind::Jstl),
            "jstl_dgd" => Ok(StageKind::JstlDgd),
            "ft_jstl" => Ok(StageKind::FtJstl),
            "ft_jstl_dgd" => Ok(StageKind::FtJstlDgd),
            other => Err(Error::Config(format!(
                "unknown stage {other:?} (expected individual, jstl, jstl_dgd, ft_jstl, \
                 ft_jstl_dgd)"
            ))),
        }
    }

    fn is_ft(self) -> bool {
        matches!(self, StageKind::FtJstl | StageKind::FtJstlDgd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    SingleTask,
    MultiTask,
}

/// One stage entry of the experiment config. Unset fields fall back to the
/// stage kind's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: StageKind,
    #[serde(default)]
    pub epochs: Option<u32>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub schedule: Option<Schedule>,
    #[serde(default)]
    pub dropout: Option<DropoutSpec>,
    #[serde(default)]
    pub objective: Objective,
    /// Fine-tuning target. Unset on an FT stage means every domain in turn;
    /// non-FT stages must leave it unset.
    #[serde(default)]
    pub target_domain: Option<u32>,
    #[serde(default)]
    pub early_stop_patience: Option<u32>,
}

impl StagePlan {
    pub fn of(stage: StageKind) -> Self {
        Self {
            stage,
            epochs: None,
            batch_size: None,
            schedule: None,
            dropout: None,
            objective: Objective::SingleTask,
            target_domain: None,
            early_stop_patience: None,
        }
    }

    pub fn epochs(&self) -> u32 {
        self.epochs.unwrap_or(match self.stage {
            StageKind::Individual | StageKind::Jstl => 100,
            StageKind::JstlDgd | StageKind::FtJstl | StageKind::FtJstlDgd => 10,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(64)
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule.unwrap_or(match self.stage {
            StageKind::Individual | StageKind::Jstl => Schedule::StepDecay,
            _ => Schedule::PolyDecay,
        })
    }

    pub fn dropout(&self) -> DropoutSpec {
        self.dropout.clone().unwrap_or_else(|| match self.stage {
            StageKind::Individual | StageKind::Jstl | StageKind::FtJstl => {
                DropoutSpec::standard()
            }
            StageKind::JstlDgd => DropoutSpec::of(DropoutKind::DeterministicDgd),
            StageKind::FtJstlDgd => DropoutSpec::of(DropoutKind::StochasticDgd),
        })
    }

    fn validate(&self, cfg: &ExperimentConfig) -> Result<()> {
        if self.epochs() == 0 {
            return Err(Error::Config(format!("stage {} has zero epochs", self.stage.name())));
        }
        if self.batch_size() == 0 {
            return Err(Error::Config(format!(
                "stage {} has zero batch size",
                self.stage.name()
            )));
        }
        if let Some(d) = self.target_domain {
            if !self.stage.is_ft() {
                return Err(Error::Config(format!(
                    "stage {} does not take a target_domain",
                    self.stage.name()
                )));
            }
            if !cfg.domains.iter().any(|dc| dc.domain_id == d) {
                return Err(Error::Config(format!(
                    "stage {} targets unknown domain {d}",
                    self.stage.name()
                )));
            }
        }
        let dropout = self.dropout();
        dropout.validate()?;
        match (self.stage, dropout.kind) {
            (StageKind::Individual | StageKind::Jstl | StageKind::FtJstl, k)
                if k != DropoutKind::Standard && k != DropoutKind::None =>
            {
                return Err(Error::Config(format!(
                    "stage {} uses plain dropout; got {k:?}",
                    self.stage.name()
                )));
            }
            (StageKind::JstlDgd | StageKind::FtJstlDgd, k)
                if k != DropoutKind::DeterministicDgd && k != DropoutKind::StochasticDgd =>
            {
                return Err(Error::Config(format!(
                    "stage {} needs a guided dropout kind; got {k:?}",
                    self.stage.name()
                )));
            }
            _ => {}
        }
        if self.objective == Objective::MultiTask && self.stage != StageKind::Jstl {
            return Err(Error::Config(format!(
                "multi-task objective is only supported on the jstl stage, not {}",
                self.stage.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutKind {
    Standard,
    DeterministicDgd,
    StochasticDgd,
    None,
}

/// Config-level dropout description; the runtime policy is built once the
/// stage's impact scores exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSpec {
    pub kind: DropoutKind,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default)]
    pub temperature: TemperatureSpec,
    #[serde(default = "default_target_max_keep")]
    pub target_max_keep: f64,
}

fn default_rate() -> f64 {
    STANDARD_DROPOUT_RATE
}

fn default_target_max_keep() -> f64 {
    DEFAULT_TARGET_MAX_KEEP
}

impl DropoutSpec {
    pub fn of(kind: DropoutKind) -> Self {
        Self {
            kind,
            rate: default_rate(),
            temperature: TemperatureSpec::Auto,
            target_max_keep: default_target_max_keep(),
        }
    }

    pub fn standard() -> Self {
        Self::of(DropoutKind::Standard)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config(format!(
                "dropout rate must lie in (0,1), got {}",
                self.rate
            )));
        }
        if let TemperatureSpec::Fixed(t) = self.temperature {
            if !(t > 0.0) {
                return Err(Error::Config(format!("temperature must be positive, got {t}")));
            }
        }
        if !(self.target_max_keep > 0.5 && self.target_max_keep < 1.0) {
            return Err(Error::Config(format!(
                "target_max_keep must lie in (0.5, 1), got {}",
                self.target_max_keep
            )));
        }
        Ok(())
    }
}

/// Either the literal string "auto" or a positive real.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TemperatureSpec {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for TemperatureSpec {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TemperatureSpec::Auto => ser.serialize_str("auto"),
            TemperatureSpec::Fixed(t) => ser.serialize_f64(*t),
        }
    }
}

impl<'de> Deserialize<'de> for TemperatureSpec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(de)? {
            Repr::Num(t) => Ok(TemperatureSpec::Fixed(t)),
            Repr::Str(s) if s == "auto" => Ok(TemperatureSpec::Auto),
            Repr::Str(s) => Err(serde::de::Error::custom(format!(
                "temperature must be \"auto\" or a number, got {s:?}"
            ))),
        }
    }
}

impl ExperimentConfig {
    /// The standard five-stage sequence with per-kind defaults.
    pub fn standard_stages() -> Vec<StagePlan> {
        [
            StageKind::Individual,
            StageKind::Jstl,
            StageKind::JstlDgd,
            StageKind::FtJstl,
            StageKind::FtJstlDgd,
        ]
        .into_iter()
        .map(StagePlan::of)
        .collect()
    }

    /// Stage plans to execute: the configured list, or the standard sequence
    /// when none are given.
    pub fn effective_stages(&self) -> Vec<StagePlan> {
        if self.stages.is_empty() {
            Self::standard_stages()
        } else {
            self.stages.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.domains {
            if !seen.insert(d.domain_id) {
                return Err(Error::Config(format!("duplicate domain id {}", d.domain_id)));
            }
            if d.test_identities < 2 {
                return Err(Error::Config(format!(
                    "domain {} needs at least 2 test identities for retrieval, got {}",
                    d.domain_id, d.test_identities
                )));
            }
            if d.num_identities < d.test_identities + 2 {
                return Err(Error::Config(format!(
                    "domain {} needs at least 2 training identities ({} total, {} test)",
                    d.domain_id, d.num_identities, d.test_identities
                )));
            }
            if d.samples_per_identity < 2 {
                return Err(Error::Config(format!(
                    "domain {} needs at least 2 samples per identity",
                    d.domain_id
                )));
            }
            if d.bias_strength < 0.0 || !d.bias_strength.is_finite() {
                return Err(Error::Config(format!(
                    "domain {} bias_strength must be finite and non-negative",
                    d.domain_id
                )));
            }
            if d.noise_sigma < 0.0 || !d.noise_sigma.is_finite() {
                return Err(Error::Config(format!(
                    "domain {} noise_sigma must be finite and non-negative",
                    d.domain_id
                )));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0,1), got {}",
                self.val_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if self.encoder.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.encoder.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.eval.max_rank == 0 {
            return Err(Error::Config("eval.max_rank must be positive".into()));
        }
        for plan in self.effective_stages() {
            plan.validate(self)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!(
                "{}:{}:{}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex digest of the canonical JSON encoding, recorded in run manifests.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization cannot fail");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ExperimentConfig {
        ExperimentConfig {
            input_dim: 8,
            domains: vec![
                DomainConfig {
                    domain_id: 0,
                    num_identities: 10,
                    test_identities: 4,
                    samples_per_identity: 4,
                    bias_strength: 1.0,
                    noise_sigma: 0.2,
                },
                DomainConfig {
                    domain_id: 1,
                    num_identities: 6,
                    test_identities: 2,
                    samples_per_identity: 4,
                    bias_strength: 0.5,
                    noise_sigma: 0.2,
                },
            ],
            encoder: EncoderConfig { hidden: vec![16], feature_dim: 12 },
            val_fraction: 0.2,
            seed: 0,
            momentum: 0.9,
            stages: vec![],
            impact: ImpactConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    #[test]
    fn minimal_config_validates_with_standard_stages() {
        let cfg = minimal();
        cfg.validate().unwrap();
        let stages = cfg.effective_stages();
        assert_eq!(
            stages.iter().map(|p| p.stage).collect::<Vec<_>>(),
            vec![
                StageKind::Individual,
                StageKind::Jstl,
                StageKind::JstlDgd,
                StageKind::FtJstl,
                StageKind::FtJstlDgd
            ]
        );
    }

    #[test]
    fn stage_defaults_follow_kind() {
        let jstl = StagePlan::of(StageKind::Jstl);
        assert_eq!(jstl.epochs(), 100);
        assert_eq!(jstl.batch_size(), 64);
        assert_eq!(jstl.schedule(), Schedule::StepDecay);
        assert_eq!(jstl.dropout().kind, DropoutKind::Standard);

        let dgd = StagePlan::of(StageKind::JstlDgd);
        assert_eq!(dgd.epochs(), 10);
        assert_eq!(dgd.schedule(), Schedule::PolyDecay);
        assert_eq!(dgd.dropout().kind, DropoutKind::DeterministicDgd);

        let ft = StagePlan::of(StageKind::FtJstlDgd);
        assert_eq!(ft.dropout().kind, DropoutKind::StochasticDgd);
        assert_eq!(ft.dropout().temperature, TemperatureSpec::Auto);
    }

    #[test]
    fn target_domain_is_ft_only() {
        let mut cfg = minimal();
        let mut plan = StagePlan::of(StageKind::Jstl);
        plan.target_domain = Some(0);
        cfg.stages = vec![plan];
        assert!(cfg.validate().is_err());

        let mut plan = StagePlan::of(StageKind::FtJstl);
        plan.target_domain = Some(1);
        cfg.stages = vec![plan];
        cfg.validate().unwrap();

        let mut plan = StagePlan::of(StageKind::FtJstl);
        plan.target_domain = Some(9);
        cfg.stages = vec![plan];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn guided_stages_require_guided_dropout() {
        let mut cfg = minimal();
        let mut plan = StagePlan::of(StageKind::JstlDgd);
        plan.dropout = Some(DropoutSpec::standard());
        cfg.stages = vec![plan];
        assert!(cfg.validate().is_err());

        let mut plan = StagePlan::of(StageKind::Jstl);
        plan.dropout = Some(DropoutSpec::of(DropoutKind::StochasticDgd));
        cfg.stages = vec![plan];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn temperature_spec_accepts_auto_or_number() {
        let spec: DropoutSpec = serde_json::from_str(
            r#"{"kind":"stochastic_dgd","temperature":"auto","target_max_keep":0.9}"#,
        )
        .unwrap();
        assert_eq!(spec.temperature, TemperatureSpec::Auto);

        let spec: DropoutSpec =
            serde_json::from_str(r#"{"kind":"stochastic_dgd","temperature":0.05}"#).unwrap();
        assert_eq!(spec.temperature, TemperatureSpec::Fixed(0.05));

        assert!(serde_json::from_str::<DropoutSpec>(
            r#"{"kind":"stochastic_dgd","temperature":"warm"}"#
        )
        .is_err());

        let json = serde_json::to_string(&DropoutSpec::of(DropoutKind::StochasticDgd)).unwrap();
        assert!(json.contains("\"temperature\":\"auto\""), "{json}");
    }

    #[test]
    fn bad_domain_shapes_are_rejected() {
        let mut cfg = minimal();
        cfg.domains[0].test_identities = 9;
        assert!(cfg.validate().is_err());

        let mut cfg = minimal();
        cfg.domains[1].domain_id = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = minimal();
        cfg.domains[0].samples_per_identity = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn load_reports_position_on_malformed_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, "{\n  \"input_dim\": oops\n}").unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains(":2:"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_hash_is_stable_and_content_sensitive() {
        let a = minimal().content_hash();
        let b = minimal().content_hash();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        let mut cfg = minimal();
        cfg.seed = 1;
        assert_ne!(a, cfg.content_hash());
    }

    #[test]
    fn config_json_round_trips() {
        let cfg = minimal();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn multitask_is_jstl_only() {
        let mut cfg = minimal();
        let mut plan = StagePlan::of(StageKind::Individual);
        plan.objective = Objective::MultiTask;
        cfg.stages = vec![plan];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_kind_parse_round_trips() {
        for kind in [
            StageKind::Individual,
            StageKind::Jstl,
            StageKind::JstlDgd,
            StageKind::FtJstl,
            StageKind::FtJstlDgd,
        ] {
            assert_eq!(StageKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(StageKind::parse("warmup").is_err());
    }
}
