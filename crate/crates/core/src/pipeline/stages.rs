//! The training stages: per-domain baselines, joint training on the merged
//! label space, guided-dropout resumption, and per-domain fine-tuning.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DropoutKind, DropoutSpec, ExperimentConfig, ImpactSplit, Objective};
use crate::data::{MergedDataset, ProbeGallery, Sample};
use crate::dgd::{deterministic_mask, keep_probability, select_temperature, DropoutPolicy};
use crate::eval::{cmc, extract_features, CmcCurve};
use crate::impact::{average_impact, ImpactScores};
use crate::nn::{ClassifierHead, EncoderModel, HeadSet};
use crate::rng::{mix_seed, SALT_INIT};
use crate::{Error, Result};

use super::engine::{
    init_model, train, DropoutRefresh, EpochStats, HeadLayout, Labeling, StageConfig,
    StageDropout, TrainSetup,
};

/// Builds the runtime dropout policy from its config description. Guided
/// kinds need the domain's impact scores; the stochastic temperature is
/// resolved here (returned alongside when one was chosen).
pub fn build_policy(
    spec: &DropoutSpec,
    scores: Option<&ImpactScores>,
) -> Result<(DropoutPolicy, Option<f64>)> {
    let need_scores = || {
        scores.ok_or_else(|| {
            Error::Config("guided dropout needs impact scores; none were supplied".into())
        })
    };
    match spec.kind {
        DropoutKind::Standard => Ok((DropoutPolicy::Standard { rate: spec.rate }, None)),
        DropoutKind::None => Ok((DropoutPolicy::None, None)),
        DropoutKind::DeterministicDgd => {
            let scores = need_scores()?;
            Ok((DropoutPolicy::DeterministicDgd { scores: scores.clone() }, None))
        }
        DropoutKind::StochasticDgd => {
            let scores = need_scores()?;
            let temperature = match spec.temperature {
                crate::config::TemperatureSpec::Fixed(t) => t,
                crate::config::TemperatureSpec::Auto => {
                    select_temperature(&scores.scores, spec.target_max_keep)?
                }
            };
            Ok((
                DropoutPolicy::StochasticDgd { scores: scores.clone(), temperature },
                Some(temperature),
            ))
        }
    }
}

fn stage_label(cfg: &StageConfig) -> String {
    match cfg.target_domain {
        Some(d) => format!("{}(d{d})", cfg.stage.name()),
        None => cfg.stage.name().to_string(),
    }
}

/// Joint training on the merged label space: one softmax head over all
/// classes, mixed-domain batches with no per-domain balancing.
pub fn train_jstl(
    train_set: &MergedDataset,
    val_set: &MergedDataset,
    exp: &ExperimentConfig,
    cfg: &StageConfig,
) -> Result<(EncoderModel, ClassifierHead, Vec<EpochStats>)> {
    cfg.validate()?;
    if cfg.objective != Objective::SingleTask {
        return Err(Error::Config(
            "train_jstl uses the single-task merged objective; use train_multitask for \
             per-domain heads"
                .into(),
        ));
    }
    let (policy, _) = build_policy(&cfg.dropout, None)?;
    let (mut model, mut heads) = init_model(
        exp.input_dim,
        &exp.encoder.hidden,
        exp.encoder.feature_dim,
        &HeadLayout::Single(train_set.total_classes()),
        cfg.seed,
    )?;
    let name = stage_label(cfg);
    let (stats, _) = train(
        &mut model,
        &mut heads,
        TrainSetup {
            stage_name: &name,
            train: train_set.samples(),
            val: val_set.samples(),
            labeling: Labeling::Merged,
            dropout: StageDropout::Uniform(policy),
            schedule: cfg.schedule,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            momentum: cfg.momentum,
            seed: cfg.seed,
            early_stop_patience: cfg.early_stop_patience,
            refresh_every: None,
            refresh: None,
        },
    )?;
    match heads {
        HeadSet::Single(head) => Ok((model, head, stats)),
        HeadSet::PerDomain(_) => unreachable!("single-head layout"),
    }
}

/// Joint training with one softmax head per domain over local labels; each
/// sample's loss is routed to its own domain's head. Kept for the
/// shared-head-versus-per-domain-heads comparison.
pub fn train_multitask(
    train_set: &MergedDataset,
    val_set: &MergedDataset,
    exp: &ExperimentConfig,
    cfg: &StageConfig,
) -> Result<(EncoderModel, BTreeMap<u32, ClassifierHead>, Vec<EpochStats>)> {
    cfg.validate()?;
    if cfg.objective != Objective::MultiTask {
        return Err(Error::Config("train_multitask requires the multi-task objective".into()));
    }
    let mut widths = BTreeMap::new();
    for id in train_set.domain_ids() {
        widths.insert(id, train_set.domain_classes(id)?);
    }
    let (policy, _) = build_policy(&cfg.dropout, None)?;
    let (mut model, mut heads) = init_model(
        exp.input_dim,
        &exp.encoder.hidden,
        exp.encoder.feature_dim,
        &HeadLayout::PerDomain(widths),
        cfg.seed,
    )?;
    let name = stage_label(cfg);
    let (stats, _) = train(
        &mut model,
        &mut heads,
        TrainSetup {
            stage_name: &name,
            train: train_set.samples(),
            val: val_set.samples(),
            labeling: Labeling::Local,
            dropout: StageDropout::Uniform(policy),
            schedule: cfg.schedule,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            momentum: cfg.momentum,
            seed: cfg.seed,
            early_stop_patience: cfg.early_stop_patience,
            refresh_every: None,
            refresh: None,
        },
    )?;
    match heads {
        HeadSet::PerDomain(map) => Ok((model, map, stats)),
        HeadSet::Single(_) => unreachable!("per-domain layout"),
    }
}

/// From-scratch baseline on a single domain: fresh encoder, local-label head,
/// plain dropout.
pub fn train_individual(
    domain_train: &[Sample],
    domain_val: &[Sample],
    num_classes: usize,
    exp: &ExperimentConfig,
    cfg: &StageConfig,
) -> Result<(EncoderModel, ClassifierHead, Vec<EpochStats>)> {
    cfg.validate()?;
    let target = cfg
        .target_domain
        .ok_or_else(|| Error::Config("per-domain baseline needs a target domain".into()))?;
    check_domain_samples(domain_train, domain_val, target)?;
    let (policy, _) = build_policy(&cfg.dropout, None)?;
    let (mut model, mut heads) = init_model(
        exp.input_dim,
        &exp.encoder.hidden,
        exp.encoder.feature_dim,
        &HeadLayout::Single(num_classes),
        cfg.seed,
    )?;
    let name = stage_label(cfg);
    let (stats, _) = train(
        &mut model,
        &mut heads,
        TrainSetup {
            stage_name: &name,
            train: domain_train,
            val: domain_val,
            labeling: Labeling::Local,
            dropout: StageDropout::Uniform(policy),
            schedule: cfg.schedule,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            momentum: cfg.momentum,
            seed: cfg.seed,
            early_stop_patience: cfg.early_stop_patience,
            refresh_every: None,
            refresh: None,
        },
    )?;
    match heads {
        HeadSet::Single(head) => Ok((model, head, stats)),
        HeadSet::PerDomain(_) => unreachable!("single-head layout"),
    }
}

fn check_domain_samples(train: &[Sample], val: &[Sample], target: u32) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config(format!("no training samples for domain {target}")));
    }
    if train.iter().chain(val.iter()).any(|s| s.domain_id != target) {
        return Err(Error::Config(format!(
            "samples from another domain passed to a domain-{target} stage"
        )));
    }
    Ok(())
}

/// Outcome of resuming joint training under impact-guided dropout.
#[derive(Debug, Clone)]
pub struct DgdResume {
    pub epochs: Vec<EpochStats>,
    /// Final per-domain policies, as used in the last epoch (they change
    /// mid-stage only under a recompute interval).
    pub policies: BTreeMap<u32, DropoutPolicy>,
    /// Binary masks per domain (deterministic policies only).
    pub masks: BTreeMap<u32, Vec<f64>>,
    /// Keep probabilities per domain (stochastic policies only).
    pub keep_probabilities: BTreeMap<u32, Vec<f64>>,
    /// Scores backing the final policies.
    pub scores_used: BTreeMap<u32, Vec<f64>>,
    /// Resolved temperatures (stochastic policies only).
    pub temperatures: BTreeMap<u32, f64>,
}

/// Continues training a jointly trained model with each sample masked by its
/// own domain's guided-dropout policy. The heads stay in the merged label
/// space; scores are frozen at stage start unless a recompute interval is
/// configured.
pub fn resume_with_dgd(
    model: &mut EncoderModel,
    head: &mut ClassifierHead,
    train_set: &MergedDataset,
    val_set: &MergedDataset,
    impact: &BTreeMap<u32, ImpactScores>,
    exp: &ExperimentConfig,
    cfg: &StageConfig,
) -> Result<DgdResume> {
    cfg.validate()?;
    let mut policies = BTreeMap::new();
    for id in train_set.domain_ids() {
        let scores = impact.get(&id).ok_or_else(|| {
            Error::Config(format!(
                "missing impact scores for domain {id}; score the jointly trained model first"
            ))
        })?;
        scores.check_dim(model.feature_dim())?;
        let (policy, _) = build_policy(&cfg.dropout, Some(scores))?;
        policies.insert(id, policy);
    }

    let refresh_pool: BTreeMap<u32, Vec<Sample>> = if exp.impact.recompute_interval.is_some() {
        let pool = match exp.impact.split {
            ImpactSplit::Train => train_set,
            ImpactSplit::Val => val_set,
        };
        let mut map = BTreeMap::new();
        for id in pool.domain_ids() {
            map.insert(id, pool.domain_samples(id)?);
        }
        map
    } else {
        BTreeMap::new()
    };
    let method = exp.impact.method;
    let dropout_spec = cfg.dropout.clone();
    let refresh_fn = move |m: &EncoderModel, h: &HeadSet| -> Result<StageDropout> {
        let head = h.single()?;
        let mut map = BTreeMap::new();
        for (id, samples) in &refresh_pool {
            let scores = average_impact(m, head, samples, method)?;
            let (policy, _) = build_policy(&dropout_spec, Some(&scores))?;
            map.insert(*id, policy);
        }
        Ok(StageDropout::PerDomain(map))
    };
    let refresh: Option<&DropoutRefresh> =
        if exp.impact.recompute_interval.is_some() { Some(&refresh_fn) } else { None };

    let mut heads = HeadSet::Single(head.clone());
    let name = stage_label(cfg);
    let (stats, final_dropout) = train(
        model,
        &mut heads,
        TrainSetup {
            stage_name: &name,
            train: train_set.samples(),
            val: val_set.samples(),
            labeling: Labeling::Merged,
            dropout: StageDropout::PerDomain(policies),
            schedule: cfg.schedule,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            momentum: cfg.momentum,
            seed: cfg.seed,
            early_stop_patience: cfg.early_stop_patience,
            refresh_every: exp.impact.recompute_interval,
            refresh,
        },
    )?;
    *head = match heads {
        HeadSet::Single(h) => h,
        HeadSet::PerDomain(_) => unreachable!("single-head layout"),
    };

    let policies = match final_dropout {
        StageDropout::PerDomain(map) => map,
        StageDropout::Uniform(_) => unreachable!("per-domain dropout"),
    };
    let mut masks = BTreeMap::new();
    let mut keep_probabilities = BTreeMap::new();
    let mut scores_used = BTreeMap::new();
    let mut temperatures = BTreeMap::new();
    for (&id, policy) in &policies {
        match policy {
            DropoutPolicy::DeterministicDgd { scores } => {
                masks.insert(id, deterministic_mask(&scores.scores).values.data().to_vec());
                scores_used.insert(id, scores.scores.data().to_vec());
            }
            DropoutPolicy::StochasticDgd { scores, temperature } => {
                let probs: Vec<f64> = scores
                    .scores
                    .data()
                    .iter()
                    .map(|&s| keep_probability(s, *temperature))
                    .collect::<Result<_>>()?;
                keep_probabilities.insert(id, probs);
                scores_used.insert(id, scores.scores.data().to_vec());
                temperatures.insert(id, *temperature);
            }
            DropoutPolicy::Standard { .. } | DropoutPolicy::None => {}
        }
    }
    Ok(DgdResume { epochs: stats, policies, masks, keep_probabilities, scores_used, temperatures })
}

/// Outcome of fine-tuning on one domain.
#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub model: EncoderModel,
    pub head: ClassifierHead,
    pub epochs: Vec<EpochStats>,
    /// Dropout policy the stage trained under; evaluation applies its
    /// test-time scaling.
    pub policy: DropoutPolicy,
    /// Resolved temperature when the policy is stochastic.
    pub temperature: Option<f64>,
}

/// Fine-tunes a trained encoder on a single domain: the encoder is
/// warm-started from `base`, the classifier head is re-initialized to the
/// domain's own label space. Guided kinds freeze the supplied scores for the
/// whole stage.
pub fn finetune_on_domain(
    base: &EncoderModel,
    domain_train: &[Sample],
    domain_val: &[Sample],
    num_classes: usize,
    impact: Option<&ImpactScores>,
    cfg: &StageConfig,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    let target = cfg
        .target_domain
        .ok_or_else(|| Error::Config("fine-tuning needs a target domain".into()))?;
    check_domain_samples(domain_train, domain_val, target)?;
    if let Some(scores) = impact {
        scores.check_dim(base.feature_dim())?;
    }
    let (policy, temperature) = build_policy(&cfg.dropout, impact)?;

    let mut model = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SALT_INIT));
    let head = ClassifierHead::random(num_classes, base.feature_dim(), &mut rng)?;
    let mut heads = HeadSet::Single(head);
    let name = stage_label(cfg);
    let (stats, _) = train(
        &mut model,
        &mut heads,
        TrainSetup {
            stage_name: &name,
            train: domain_train,
            val: domain_val,
            labeling: Labeling::Local,
            dropout: StageDropout::Uniform(policy.clone()),
            schedule: cfg.schedule,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            momentum: cfg.momentum,
            seed: cfg.seed,
            early_stop_patience: cfg.early_stop_patience,
            refresh_every: None,
            refresh: None,
        },
    )?;
    let head = match heads {
        HeadSet::Single(h) => h,
        HeadSet::PerDomain(_) => unreachable!("single-head layout"),
    };
    Ok(FinetuneResult { model, head, epochs: stats, policy, temperature })
}

/// Retrieval evaluation of one domain's protocol under a dropout policy's
/// test-time scaling. `max_rank` is clamped to the gallery size.
pub fn evaluate_domain(
    model: &EncoderModel,
    policy: &DropoutPolicy,
    protocol: &ProbeGallery,
    max_rank: usize,
) -> Result<CmcCurve> {
    let gallery = extract_features(model, policy, &protocol.gallery)?;
    let probes = extract_features(model, policy, &protocol.probes)?;
    let rank = max_rank.min(gallery.rows());
    if rank < max_rank {
        log::warn!(
            "domain {}: max_rank {max_rank} clamped to gallery size {}",
            protocol.domain_id,
            gallery.rows()
        );
    }
    cmc(&probes, &gallery, rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        DomainConfig, DropoutKind, EncoderConfig, EvalConfig, ImpactConfig, StageKind,
    };
    use crate::data::{generate_domain, merge_single_task, split_train_val, DomainSpec};
    use crate::impact::ImpactMethod;
    use crate::schedule::Schedule;
    use crate::tensor::Tensor;

    use super::super::engine::{train, StageDropout, TrainSetup};

    fn toy_domain(domain_id: u32, identities: usize, seed: u64) -> Vec<Sample> {
        generate_domain(&DomainSpec {
            domain_id,
            num_identities: identities,
            samples_per_identity: 3,
            input_dim: 6,
            bias_strength: 1.0,
            noise_sigma: 0.05,
            seed,
        })
        .unwrap()
    }

    fn toy_exp() -> ExperimentConfig {
        ExperimentConfig {
            input_dim: 6,
            domains: vec![DomainConfig {
                domain_id: 1,
                num_identities: 8,
                test_identities: 3,
                samples_per_identity: 3,
                bias_strength: 1.0,
                noise_sigma: 0.05,
            }],
            encoder: EncoderConfig { hidden: vec![8], feature_dim: 8 },
            val_fraction: 0.34,
            seed: 0,
            momentum: 0.9,
            stages: vec![],
            impact: ImpactConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    fn toy_cfg(
        stage: StageKind,
        kind: DropoutKind,
        epochs: u32,
        seed: u64,
        target: Option<u32>,
    ) -> StageConfig {
        StageConfig {
            stage,
            objective: Objective::SingleTask,
            schedule: Schedule::PolyDecay,
            dropout: DropoutSpec::of(kind),
            target_domain: target,
            epochs,
            batch_size: 8,
            seed,
            momentum: 0.9,
            early_stop_patience: None,
        }
    }

    fn toy_split(domains: &[Vec<Sample>]) -> (MergedDataset, MergedDataset) {
        let merged = merge_single_task(domains).unwrap();
        split_train_val(&merged, 0.34, 77).unwrap()
    }

    fn positive_scores(domain_id: u32, d: usize) -> ImpactScores {
        ImpactScores::new(
            domain_id,
            Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            ImpactMethod::Exact,
            1,
        )
        .unwrap()
    }

    #[test]
    fn single_domain_multitask_matches_single_task_bitwise() {
        let (train_set, val_set) = toy_split(&[toy_domain(3, 5, 50)]);
        let exp = toy_exp();
        let mut cfg = toy_cfg(StageKind::Jstl, DropoutKind::Standard, 6, 99, None);
        let (model_s, head_s, stats_s) = train_jstl(&train_set, &val_set, &exp, &cfg).unwrap();
        cfg.objective = Objective::MultiTask;
        let (model_m, heads_m, stats_m) =
            train_multitask(&train_set, &val_set, &exp, &cfg).unwrap();
        assert_eq!(model_s, model_m);
        assert_eq!(&head_s, &heads_m[&3]);
        assert_eq!(stats_s, stats_m);
    }

    #[test]
    fn jstl_head_width_is_the_merged_class_count() {
        let (train_set, val_set) = toy_split(&[toy_domain(1, 4, 51), toy_domain(2, 3, 52)]);
        let exp = toy_exp();
        let cfg = toy_cfg(StageKind::Jstl, DropoutKind::Standard, 2, 5, None);
        let (_, head, _) = train_jstl(&train_set, &val_set, &exp, &cfg).unwrap();
        assert_eq!(head.num_classes(), 7);
        assert_eq!(train_set.total_classes(), 7);
    }

    #[test]
    fn jstl_rejects_objective_mismatches() {
        let (train_set, val_set) = toy_split(&[toy_domain(1, 4, 53)]);
        let exp = toy_exp();
        let mut cfg = toy_cfg(StageKind::Jstl, DropoutKind::Standard, 1, 5, None);
        cfg.objective = Objective::MultiTask;
        assert!(train_jstl(&train_set, &val_set, &exp, &cfg).is_err());
        cfg.objective = Objective::SingleTask;
        assert!(train_multitask(&train_set, &val_set, &exp, &cfg).is_err());
    }

    #[test]
    fn multitask_routes_each_domain_to_its_own_head() {
        let (train_set, val_set) = toy_split(&[toy_domain(1, 4, 54), toy_domain(2, 3, 55)]);
        let exp = toy_exp();
        let mut cfg = toy_cfg(StageKind::Jstl, DropoutKind::Standard, 2, 5, None);
        cfg.objective = Objective::MultiTask;
        let (_, heads, _) = train_multitask(&train_set, &val_set, &exp, &cfg).unwrap();
        assert_eq!(heads.len(), 2);
        assert_eq!(heads[&1].num_classes(), 4);
        assert_eq!(heads[&2].num_classes(), 3);
    }

    #[test]
    fn resume_with_all_positive_scores_equals_plain_continuation() {
        let (train_set, val_set) = toy_split(&[toy_domain(1, 5, 56)]);
        let exp = toy_exp();
        let jstl_cfg = toy_cfg(StageKind::Jstl, DropoutKind::Standard, 3, 7, None);
        let (model, head, _) = train_jstl(&train_set, &val_set, &exp, &jstl_cfg).unwrap();

        let resume_cfg = toy_cfg(StageKind::JstlDgd, DropoutKind::DeterministicDgd, 4, 8, None);
        let mut model_a = model.clone();
        let mut head_a = head.clone();
        let mut impact = BTreeMap::new();
        impact.insert(1u32, positive_scores(1, 8));
        resume_with_dgd(&mut model_a, &mut head_a, &train_set, &val_set, &impact, &exp, &resume_cfg)
            .unwrap();

        let mut model_b = model;
        let mut heads_b = HeadSet::Single(head);
        train(
            &mut model_b,
            &mut heads_b,
            TrainSetup {
                stage_name: "plain",
                train: train_set.samples(),
                val: val_set.samples(),
                labeling: Labeling::Merged,
                dropout: StageDropout::Uniform(DropoutPolicy::None),
                schedule: resume_cfg.schedule,
                epochs: resume_cfg.epochs,
                batch_size: resume_cfg.batch_size,
                momentum: resume_cfg.momentum,
                seed: resume_cfg.seed,
                early_stop_patience: None,
                refresh_every: None,
                refresh: None,
            },
        )
        .unwrap();
        assert_eq!(model_a, model_b);
        let HeadSet::Single(head_b) = heads_b else { panic!("single layout") };
        assert_eq!(head_a, head_b);
    }

    #[test]
    fn resume_masks_follow_each_domains_scores() {
        let (train_set, val_set) = toy_split(&[toy_domain(1, 4, 57), toy_domain(2, 4, 58)]);
        let exp = toy_exp();
        let jstl_cfg = toy_cfg(StageKind::Jstl, DropoutKind::Standard, 2, 9, None);
        let (mut model, mut head, _) = train_jstl(&train_set, &val_set, &exp, &jstl_cfg).unwrap();

        let mut impact = BTreeMap::new();
        let mut s1 = vec![1.0; 8];
        s1[0] = -1.0;
        let mut s2 = vec![-1.0; 8];
        s2[0] = 1.0;
        impact.insert(
            1u32,
            ImpactScores::new(1, Tensor::new(vec![8], s1).unwrap(), ImpactMethod::Exact, 1)
                .unwrap(),
        );
        impact.insert(
            2u32,
            ImpactScores::new(2, Tensor::new(vec![8], s2).unwrap(), ImpactMethod::Exact, 1)
                .unwrap(),
        );
        let cfg = toy_cfg(StageKind::JstlDgd, DropoutKind::DeterministicDgd, 1, 9, None);
        let resume =
            resume_with_dgd(&mut model, &mut head, &train_set, &val_set, &impact, &exp, &cfg)
                .unwrap();
        assert_ne!(resume.masks[&1], resume.masks[&2]);
        for (id, mask) in &resume.masks {
            for (m, s) in mask.iter().zip(&resume.scores_used[id]) {
                assert_eq!(*m == 0.0, *s <= 0.0, "mask/score mismatch in domain {id}");
            }
        }
    }

    #[test]
    fn resume_requires_scores_for_every_domain() {
        let (train_set, val_set) = toy_split(&[toy_domain(1, 4, 59), toy_domain(2, 4, 60)]);
        let exp = toy_exp();
        let jstl_cfg = toy_cfg(StageKind::Jstl, DropoutKind::Standard, 1, 10, None);
        let (mut model, mut head, _) = train_jstl(&train_set, &val_set, &exp, &jstl_cfg).unwrap();
        let mut impact = BTreeMap::new();
        impact.insert(1u32, positive_scores(1, 8));
        let cfg = toy_cfg(StageKind::JstlDgd, DropoutKind::DeterministicDgd, 1, 10, None);
        let err =
            resume_with_dgd(&mut model, &mut head, &train_set, &val_set, &impact, &exp, &cfg)
                .unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("domain 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn finetune_reinitializes_head_and_warm_starts_encoder() {
        let (train_set, val_set) = toy_split(&[toy_domain(1, 5, 61)]);
        let exp = toy_exp();
        let jstl_cfg = toy_cfg(StageKind::Jstl, DropoutKind::Standard, 2, 11, None);
        let (base, _, _) = train_jstl(&train_set, &val_set, &exp, &jstl_cfg).unwrap();

        let train_d = train_set.domain_samples(1).unwrap();
        let val_d = val_set.domain_samples(1).unwrap();
        let mut cfg = toy_cfg(StageKind::FtJstl, DropoutKind::Standard, 0, 12, Some(1));
        let frozen = finetune_on_domain(&base, &train_d, &val_d, 5, None, &cfg).unwrap();
        assert_eq!(frozen.model, base, "zero-epoch fine-tune must keep the base encoder");
        assert_eq!(frozen.head.num_classes(), 5);

        cfg.epochs = 3;
        let tuned = finetune_on_domain(&base, &train_d, &val_d, 5, None, &cfg).unwrap();
        assert_ne!(tuned.model, base);
        assert_eq!(tuned.head.num_classes(), 5);
        assert!(tuned.temperature.is_none());
    }

    #[test]
    fn finetune_rejects_mismatched_domains_and_missing_scores() {
        let (train_set, val_set) = toy_split(&[toy_domain(1, 4, 62)]);
        let exp = toy_exp();
        let jstl_cfg = toy_cfg(StageKind::Jstl, DropoutKind::Standard, 1, 13, None);
        let (base, _, _) = train_jstl(&train_set, &val_set, &exp, &jstl_cfg).unwrap();
        let train_d = train_set.domain_samples(1).unwrap();

        let cfg = toy_cfg(StageKind::FtJstl, DropoutKind::Standard, 1, 13, Some(9));
        let err = finetune_on_domain(&base, &train_d, &[], 4, None, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "unexpected {err:?}");

        let cfg = toy_cfg(StageKind::FtJstlDgd, DropoutKind::StochasticDgd, 1, 13, Some(1));
        let err = finetune_on_domain(&base, &train_d, &[], 4, None, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "unexpected {err:?}");
    }

    #[test]
    fn stochastic_finetune_resolves_the_auto_temperature() {
        let (train_set, val_set) = toy_split(&[toy_domain(1, 5, 63)]);
        let exp = toy_exp();
        let jstl_cfg = toy_cfg(StageKind::Jstl, DropoutKind::Standard, 2, 14, None);
        let (base, _, _) = train_jstl(&train_set, &val_set, &exp, &jstl_cfg).unwrap();
        let train_d = train_set.domain_samples(1).unwrap();
        let val_d = val_set.domain_samples(1).unwrap();

        let scores = ImpactScores::new(
            1,
            Tensor::new(vec![8], vec![0.4, -0.1, 0.2, 0.05, -0.3, 0.1, 0.0, 0.25]).unwrap(),
            ImpactMethod::Taylor,
            6,
        )
        .unwrap();
        let cfg = toy_cfg(StageKind::FtJstlDgd, DropoutKind::StochasticDgd, 2, 15, Some(1));
        let result =
            finetune_on_domain(&base, &train_d, &val_d, 5, Some(&scores), &cfg).unwrap();
        let expected = select_temperature(&scores.scores, cfg.dropout.target_max_keep).unwrap();
        assert_eq!(result.temperature, Some(expected));
        match result.policy {
            DropoutPolicy::StochasticDgd { temperature, .. } => {
                assert_eq!(temperature, expected);
            }
            other => panic!("unexpected policy {other:?}"),
        }
    }

    #[test]
    fn build_policy_honors_fixed_temperatures() {
        let scores = positive_scores(1, 4);
        let mut spec = DropoutSpec::of(DropoutKind::StochasticDgd);
        spec.temperature = crate::config::TemperatureSpec::Fixed(0.125);
        let (policy, t) = build_policy(&spec, Some(&scores)).unwrap();
        assert_eq!(t, Some(0.125));
        match policy {
            DropoutPolicy::StochasticDgd { temperature, .. } => assert_eq!(temperature, 0.125),
            other => panic!("unexpected policy {other:?}"),
        }
        assert!(build_policy(&spec, None).is_err());
    }
}
