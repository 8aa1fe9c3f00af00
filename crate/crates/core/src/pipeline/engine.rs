//! Mini-batch SGD training loop shared by every stage: shuffled mixed-domain
//! batches, per-sample dropout masks, deterministic gradient reduction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DropoutSpec, Objective, StageKind, StagePlan};
use crate::data::Sample;
use crate::dgd::{apply_test_scaling, train_mask, DropoutPolicy};
use crate::nn::{
    backward_with_loss, encode, loss_and_probs, ClassifierHead, EncoderModel, GradientSet,
    HeadSet, SgdOptimizer,
};
use crate::par;
use crate::rng::{mix_seed, SALT_INIT, SALT_MASK, SALT_SHUFFLE};
use crate::schedule::Schedule;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Resolved settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageKind,
    pub objective: Objective,
    pub schedule: Schedule,
    pub dropout: DropoutSpec,
    /// Fine-tuning (and per-domain baseline) target; forbidden on shared
    /// stages.
    pub target_domain: Option<u32>,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    pub early_stop_patience: Option<u32>,
}

/// Seed for one stage of one run. Mixed from the stage kind (and target
/// domain), not the stage's position, so a filtered rerun that loads
/// checkpoints reproduces the full run bitwise.
pub fn stage_seed(run_seed: u64, kind: StageKind, domain: Option<u32>) -> u64 {
    let base = mix_seed(run_seed, kind.seed_tag());
    match domain {
        Some(d) => mix_seed(base, u64::from(d).wrapping_add(1)),
        None => base,
    }
}

impl StageConfig {
    pub fn from_plan(
        plan: &StagePlan,
        run_seed: u64,
        momentum: f64,
        target_domain: Option<u32>,
    ) -> Self {
        Self {
            stage: plan.stage,
            objective: plan.objective,
            schedule: plan.schedule(),
            dropout: plan.dropout(),
            target_domain,
            epochs: plan.epochs(),
            batch_size: plan.batch_size(),
            seed: stage_seed(run_seed, plan.stage, target_domain),
            momentum,
            early_stop_patience: plan.early_stop_patience,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.stage {
            StageKind::FtJstl | StageKind::FtJstlDgd => {
                if self.target_domain.is_none() {
                    return Err(Error::Config(format!(
                        "stage {} requires a target domain",
                        self.stage.name()
                    )));
                }
            }
            StageKind::Jstl | StageKind::JstlDgd => {
                if self.target_domain.is_some() {
                    return Err(Error::Config(format!(
                        "stage {} does not take a target domain",
                        self.stage.name()
                    )));
                }
            }
            StageKind::Individual => {}
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.dropout.validate()
    }
}

/// Head widths for a fresh model: one merged-label head or one per domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadLayout {
    Single(usize),
    PerDomain(BTreeMap<u32, usize>),
}

/// Draws a fresh encoder and classifier heads from the stage's init stream.
/// The encoder is drawn first, then heads in ascending domain order, so a
/// one-domain per-domain layout consumes exactly the same draws as a single
/// head of equal width.
pub fn init_model(
    input_dim: usize,
    hidden: &[usize],
    feature_dim: usize,
    layout: &HeadLayout,
    seed: u64,
) -> Result<(EncoderModel, HeadSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_INIT));
    let model = EncoderModel::random(input_dim, hidden, feature_dim, &mut rng)?;
    let heads = match layout {
        HeadLayout::Single(classes) => {
            HeadSet::Single(ClassifierHead::random(*classes, feature_dim, &mut rng)?)
        }
        HeadLayout::PerDomain(widths) => {
            let mut map = BTreeMap::new();
            for (&id, &classes) in widths {
                map.insert(id, ClassifierHead::random(classes, feature_dim, &mut rng)?);
            }
            HeadSet::PerDomain(map)
        }
    };
    Ok((model, heads))
}

/// Loss and learning-rate trace for one epoch. The validation loss is absent
/// when no validation split was given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Which label space the classifier heads operate in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Labeling {
    Merged,
    Local,
}

fn class_of(sample: &Sample, labeling: Labeling) -> usize {
    match labeling {
        Labeling::Merged => sample.merged_class(),
        Labeling::Local => sample.local_class(),
    }
}

/// Dropout policies for a stage: one shared policy, or one per domain when
/// masks are impact-guided.
#[derive(Debug, Clone)]
pub enum StageDropout {
    Uniform(DropoutPolicy),
    PerDomain(BTreeMap<u32, DropoutPolicy>),
}

impl StageDropout {
    pub fn policy_for(&self, domain_id: u32) -> Result<&DropoutPolicy> {
        match self {
            StageDropout::Uniform(p) => Ok(p),
            StageDropout::PerDomain(map) => map.get(&domain_id).ok_or_else(|| {
                Error::Config(format!("no impact scores for domain {domain_id}"))
            }),
        }
    }
}

/// Rebuilds the stage's dropout policies from the current model, used when a
/// recompute interval is configured on a guided stage.
pub type DropoutRefresh<'a> = dyn Fn(&EncoderModel, &HeadSet) -> Result<StageDropout> + 'a;

pub struct TrainSetup<'a> {
    /// Stage name for diagnostics.
    pub stage_name: &'a str,
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub labeling: Labeling,
    pub dropout: StageDropout,
    pub schedule: Schedule,
    pub epochs: u32,
    pub batch_size: usize,
    pub momentum: f64,
    /// Stage seed; shuffle, mask, and init streams are salted from it.
    pub seed: u64,
    pub early_stop_patience: Option<u32>,
    /// Recompute the dropout policies every this many epochs.
    pub refresh_every: Option<u32>,
    pub refresh: Option<&'a DropoutRefresh<'a>>,
}

fn add_assign(acc: &mut Tensor, grad: &Tensor) {
    debug_assert_eq!(acc.shape(), grad.shape());
    for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
        *a += g;
    }
}

fn scale_in_place(t: &mut Tensor, factor: f64) {
    for v in t.data_mut() {
        *v *= factor;
    }
}

/// Per-batch gradient accumulators for the classifier heads. Every head gets
/// an entry each batch; heads that saw no samples keep a zero gradient so the
/// momentum update sequence is identical regardless of batch composition.
enum HeadGradAcc {
    Single(Tensor, Tensor),
    PerDomain(BTreeMap<u32, (Tensor, Tensor)>),
}

impl HeadGradAcc {
    fn zeros_like(heads: &HeadSet) -> Self {
        let zeros = |h: &ClassifierHead| {
            (
                Tensor::zeros(vec![h.num_classes(), h.feature_dim()]),
                Tensor::zeros(vec![h.num_classes()]),
            )
        };
        match heads {
            HeadSet::Single(h) => {
                let (w, b) = zeros(h);
                HeadGradAcc::Single(w, b)
            }
            HeadSet::PerDomain(map) => HeadGradAcc::PerDomain(
                map.iter().map(|(&id, h)| (id, zeros(h))).collect(),
            ),
        }
    }

    fn accumulate(&mut self, domain_id: u32, grads: &GradientSet) {
        match self {
            HeadGradAcc::Single(w, b) => {
                add_assign(w, &grads.head_weights);
                add_assign(b, &grads.head_bias);
            }
            HeadGradAcc::PerDomain(map) => {
                let (w, b) = map.get_mut(&domain_id).expect("head exists for routed domain");
                add_assign(w, &grads.head_weights);
                add_assign(b, &grads.head_bias);
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        match self {
            HeadGradAcc::Single(w, b) => {
                scale_in_place(w, factor);
                scale_in_place(b, factor);
            }
            HeadGradAcc::PerDomain(map) => {
                for (w, b) in map.values_mut() {
                    scale_in_place(w, factor);
                    scale_in_place(b, factor);
                }
            }
        }
    }
}

/// Trains `model` and `heads` in place and returns the per-epoch trace plus
/// the dropout policies in effect at the end (they change only when a refresh
/// hook is configured).
///
/// Determinism contract: for a fixed setup and initial parameters the
/// resulting parameters are bitwise identical across runs, thread counts, and
/// the parallel/sequential feature split. Per-sample work runs in parallel
/// but is reduced sequentially in batch order; mask streams are keyed by
/// (epoch, dataset index), not worker.
pub fn train(
    model: &mut EncoderModel,
    heads: &mut HeadSet,
    setup: TrainSetup<'_>,
) -> Result<(Vec<EpochStats>, StageDropout)> {
    let n = setup.train.len();
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "{}: training set is empty",
            setup.stage_name
        )));
    }
    if setup.batch_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "{}: batch size must be positive",
            setup.stage_name
        )));
    }
    let d = model.feature_dim();
    let batches_per_epoch = n.div_ceil(setup.batch_size);
    let total_iters = u64::from(setup.epochs) * batches_per_epoch as u64;
    let shuffle_seed = mix_seed(setup.seed, SALT_SHUFFLE);
    let mask_seed = mix_seed(setup.seed, SALT_MASK);

    let mut optimizer = SgdOptimizer::new(setup.momentum)?;
    let mut dropout = setup.dropout;
    let mut stats = Vec::with_capacity(setup.epochs as usize);
    let mut best_val = f64::INFINITY;
    let mut epochs_since_best = 0u32;

    for epoch in 0..setup.epochs {
        if let (Some(every), Some(refresh)) = (setup.refresh_every, setup.refresh) {
            if epoch > 0 && every > 0 && epoch % every == 0 {
                dropout = refresh(model, heads)?;
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(shuffle_seed, u64::from(epoch)));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut first_lr = 0.0;
        for (batch_idx, batch) in order.chunks(setup.batch_size).enumerate() {
            let iter = u64::from(epoch) * batches_per_epoch as u64 + batch_idx as u64;
            let lr = setup.schedule.learning_rate(epoch, iter, total_iters)?;
            if batch_idx == 0 {
                first_lr = lr;
            }

            // Immutable borrows of model/heads end with `results`, before the
            // optimizer mutates them.
            let results: Vec<Result<(u32, f64, GradientSet)>> = {
                let model = &*model;
                let heads = &*heads;
                let dropout = &dropout;
                let labeling = setup.labeling;
                let train = setup.train;
                par::map_collect(batch, move |&idx| {
                    let sample = &train[idx];
                    let policy = dropout.policy_for(sample.domain_id)?;
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                    mask_rng.set_stream((u64::from(epoch) << 32) | idx as u64);
                    let mask = train_mask(policy, d, &mut mask_rng)?;
                    let head = heads.for_domain(sample.domain_id)?;
                    let label = class_of(sample, labeling);
                    let (loss, grads) =
                        backward_with_loss(model, head, &sample.features, label, Some(&mask.values))?;
                    Ok((sample.domain_id, loss, grads))
                })
            };

            let mut layer_acc: Vec<(Tensor, Tensor)> = model
                .layers()
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(vec![l.output_dim(), l.input_dim()]),
                        Tensor::zeros(vec![l.output_dim()]),
                    )
                })
                .collect();
            let mut head_acc = HeadGradAcc::zeros_like(heads);
            for result in results {
                let (domain_id, loss, grads) = result?;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "{}: non-finite loss at epoch {epoch}",
                        setup.stage_name
                    )));
                }
                loss_sum += loss;
                for ((w, b), lg) in layer_acc.iter_mut().zip(&grads.layers) {
                    add_assign(w, &lg.weights);
                    add_assign(b, &lg.bias);
                }
                head_acc.accumulate(domain_id, &grads);
            }
            let batch_scale = 1.0 / batch.len() as f64;
            for (w, b) in &mut layer_acc {
                scale_in_place(w, batch_scale);
                scale_in_place(b, batch_scale);
            }
            head_acc.scale(batch_scale);

            for (k, (name, param)) in model.named_params_mut().into_iter().enumerate() {
                let (w, b) = &layer_acc[k / 2];
                let grad = if k % 2 == 0 { w } else { b };
                optimizer.step(&name, param, grad, lr)?;
            }
            match (&mut *heads, &head_acc) {
                (HeadSet::Single(h), HeadGradAcc::Single(w, b)) => {
                    optimizer.step("head.weights", &mut h.weights, w, lr)?;
                    optimizer.step("head.bias", &mut h.bias, b, lr)?;
                }
                (HeadSet::PerDomain(map), HeadGradAcc::PerDomain(accs)) => {
                    for (id, h) in map.iter_mut() {
                        let (w, b) = &accs[id];
                        optimizer.step(&format!("head.d{id}.weights"), &mut h.weights, w, lr)?;
                        optimizer.step(&format!("head.d{id}.bias"), &mut h.bias, b, lr)?;
                    }
                }
                _ => unreachable!("accumulator mirrors head set shape"),
            }
        }

        let train_loss = loss_sum / n as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "{}: non-finite epoch loss at epoch {epoch}",
                setup.stage_name
            )));
        }
        let val_loss =
            validation_loss(model, heads, setup.val, setup.labeling, &dropout, setup.stage_name)?;
        stats.push(EpochStats { epoch, learning_rate: first_lr, train_loss, val_loss });

        if let (Some(patience), Some(v)) = (setup.early_stop_patience, val_loss) {
            if v < best_val {
                best_val = v;
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if epochs_since_best >= patience {
                    log::info!(
                        "{}: early stop at epoch {epoch} (no val improvement in {patience} epochs)",
                        setup.stage_name
                    );
                    break;
                }
            }
        }
    }

    Ok((stats, dropout))
}

/// Mean loss over the validation samples under test-time dropout behavior.
/// `None` when the validation set is empty.
pub fn validation_loss(
    model: &EncoderModel,
    heads: &HeadSet,
    val: &[Sample],
    labeling: Labeling,
    dropout: &StageDropout,
    stage_name: &str,
) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let losses: Vec<Result<f64>> = par::map_collect(val, |sample| {
        let policy = dropout.policy_for(sample.domain_id)?;
        let g = encode(model, &sample.features, None)?;
        let g = apply_test_scaling(policy, &g)?;
        let head = heads.for_domain(sample.domain_id)?;
        let (loss, _) = loss_and_probs(head, &g, class_of(sample, labeling))?;
        Ok(loss)
    });
    let mut sum = 0.0;
    for loss in losses {
        sum += loss?;
    }
    let mean = sum / val.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Diverged(format!("{stage_name}: non-finite validation loss")));
    }
    Ok(Some(mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StageKind;
    use crate::data::{generate_domain, DomainSpec};

    fn toy_samples(domain_id: u32, identities: usize, seed: u64) -> Vec<Sample> {
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

    fn toy_setup<'a>(train: &'a [Sample], val: &'a [Sample], epochs: u32) -> TrainSetup<'a> {
        TrainSetup {
            stage_name: "toy",
            train,
            val,
            labeling: Labeling::Local,
            dropout: StageDropout::Uniform(DropoutPolicy::Standard { rate: 0.5 }),
            schedule: Schedule::StepDecay,
            epochs,
            batch_size: 8,
            momentum: 0.9,
            seed: 11,
            early_stop_patience: None,
            refresh_every: None,
            refresh: None,
        }
    }

    #[test]
    fn stage_seed_depends_on_kind_and_domain_only() {
        let a = stage_seed(7, StageKind::Jstl, None);
        assert_eq!(a, stage_seed(7, StageKind::Jstl, None));
        assert_ne!(a, stage_seed(7, StageKind::JstlDgd, None));
        assert_ne!(a, stage_seed(8, StageKind::Jstl, None));
        assert_ne!(
            stage_seed(7, StageKind::FtJstl, Some(0)),
            stage_seed(7, StageKind::FtJstl, Some(1))
        );
        assert_ne!(stage_seed(7, StageKind::FtJstl, Some(0)), stage_seed(7, StageKind::FtJstl, None));
    }

    #[test]
    fn one_domain_per_domain_layout_draws_like_single() {
        let single = init_model(6, &[10], 8, &HeadLayout::Single(5), 3).unwrap();
        let mut widths = BTreeMap::new();
        widths.insert(4u32, 5usize);
        let per_domain = init_model(6, &[10], 8, &HeadLayout::PerDomain(widths), 3).unwrap();
        assert_eq!(single.0, per_domain.0);
        let HeadSet::Single(sh) = single.1 else { panic!("single layout") };
        let HeadSet::PerDomain(map) = per_domain.1 else { panic!("per-domain layout") };
        assert_eq!(&sh, &map[&4]);
    }

    #[test]
    fn training_reduces_loss_and_is_bitwise_reproducible() {
        let samples = toy_samples(1, 5, 40);
        let (train_split, val_split) = samples.split_at(10);

        let run = || {
            let (mut model, mut heads) =
                init_model(6, &[10], 8, &HeadLayout::Single(5), 11).unwrap();
            let (stats, _) =
                train(&mut model, &mut heads, toy_setup(train_split, val_split, 12)).unwrap();
            (model, heads, stats)
        };
        let (model_a, heads_a, stats_a) = run();
        let (model_b, heads_b, stats_b) = run();
        assert_eq!(model_a, model_b);
        assert_eq!(heads_a, heads_b);
        assert_eq!(stats_a, stats_b);

        assert_eq!(stats_a.len(), 12);
        assert!(stats_a.last().unwrap().train_loss < stats_a[0].train_loss);
        assert!(stats_a.iter().all(|e| e.train_loss.is_finite()));
        assert!(stats_a.iter().all(|e| e.val_loss.unwrap().is_finite()));
        assert_eq!(stats_a[0].learning_rate, 0.1);
    }

    #[test]
    fn empty_validation_split_reports_no_val_loss() {
        let samples = toy_samples(1, 4, 41);
        let (mut model, mut heads) = init_model(6, &[], 8, &HeadLayout::Single(4), 1).unwrap();
        let (stats, _) = train(&mut model, &mut heads, toy_setup(&samples, &[], 2)).unwrap();
        assert!(stats.iter().all(|e| e.val_loss.is_none()));
    }

    #[test]
    fn early_stop_halts_after_patience_epochs_without_improvement() {
        let samples = toy_samples(1, 4, 42);
        let (train_split, val_split) = samples.split_at(8);
        let (mut model, mut heads) = init_model(6, &[], 8, &HeadLayout::Single(4), 2).unwrap();
        let mut setup = toy_setup(train_split, val_split, 200);
        setup.early_stop_patience = Some(3);
        let (stats, _) = train(&mut model, &mut heads, setup).unwrap();
        assert!(stats.len() < 200, "expected an early stop, ran {} epochs", stats.len());
    }

    #[test]
    fn poly_schedule_starts_at_its_base_rate() {
        let samples = toy_samples(1, 4, 43);
        let (mut model, mut heads) = init_model(6, &[], 8, &HeadLayout::Single(4), 1).unwrap();
        let mut setup = toy_setup(&samples, &[], 2);
        setup.schedule = Schedule::PolyDecay;
        let (stats, _) = train(&mut model, &mut heads, setup).unwrap();
        assert_eq!(stats[0].learning_rate, 0.01);
    }

    #[test]
    fn missing_per_domain_policy_is_a_config_error() {
        let samples = toy_samples(1, 4, 44);
        let (mut model, mut heads) = init_model(6, &[], 8, &HeadLayout::Single(4), 1).unwrap();
        let mut setup = toy_setup(&samples, &[], 1);
        setup.dropout = StageDropout::PerDomain(BTreeMap::new());
        let err = train(&mut model, &mut heads, setup).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "unexpected {err:?}");
    }

    #[test]
    fn stage_config_validation_enforces_target_domain_rules() {
        let plan = crate::config::StagePlan::of(StageKind::FtJstl);
        let cfg = StageConfig::from_plan(&plan, 1, 0.9, None);
        assert!(cfg.validate().is_err());
        let cfg = StageConfig::from_plan(&plan, 1, 0.9, Some(2));
        cfg.validate().unwrap();

        let plan = crate::config::StagePlan::of(StageKind::Jstl);
        let cfg = StageConfig::from_plan(&plan, 1, 0.9, Some(2));
        assert!(cfg.validate().is_err());
    }
}
