//! Training harness: optimizer schedule, subject-independent folds,
//! metrics, synthetic data, and the pretraining/fine-tuning loops.

pub mod loops;
pub mod optim;
pub mod synth;

pub use loops::{
    finetune_loop, make_pretrain_batch, pretrain_loop, Axis, BatchPair, FinetuneReport,
    MeanMetrics, PreparedExample, PretrainOutcome, TraceRow,
};
pub use optim::{adam_update, load_trainer_state, save_trainer_state, AdamState};
pub use synth::{synth_generate, ClassScheme, SynthExample, SynthSpec};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// How the cosine schedule bottoms out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScheduleMode {
    /// Anneal to zero (default reading of the training recipe).
    CosineToZero,
    /// Anneal to `floor_frac * base_lr` instead (the alternative reading
    /// of "decay rate 0.001" as a schedule floor).
    CosineToFloor { floor_frac: f64 },
}

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub finetune_epochs: usize,
    pub schedule: ScheduleMode,
    /// Steps between intermediate checkpoints; 0 = final only.
    pub checkpoint_interval: usize,
}

impl TrainConfig {
    /// Published recipe values: Adam at 1e-4, batch 4, cosine schedule,
    /// decoupled weight decay 0.001.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 4,
            base_lr: 1e-4,
            weight_decay: 0.001,
            total_steps: 200,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            finetune_epochs: 10,
            schedule: ScheduleMode::CosineToZero,
            checkpoint_interval: 0,
        }
    }

    /// Desk-scale defaults used by the CI-sized training runs: the paper
    /// rate is tuned for 90k-clip pretraining and moves a desk model too
    /// slowly to demonstrate learning in 200 steps.
    pub fn desk() -> Self {
        TrainConfig {
            base_lr: 3e-3,
            ..Self::paper()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::config(format!(
                "batch_size must be even and at least 2 (negative-pair construction), got {}",
                self.batch_size
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be positive"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if let ScheduleMode::CosineToFloor { floor_frac } = self.schedule {
            if !(0.0..=1.0).contains(&floor_frac) {
                return Err(Error::config("schedule floor_frac must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Cosine learning-rate schedule: `base * 0.5 * (1 + cos(pi step/total))`,
/// optionally lifted onto a floor.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, mode: ScheduleMode) -> f64 {
    debug_assert!(step <= total_steps);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
    match mode {
        ScheduleMode::CosineToZero => base_lr * cos,
        ScheduleMode::CosineToFloor { floor_frac } => {
            let floor = base_lr * floor_frac;
            floor + (base_lr - floor) * cos
        }
    }
}

/// Subject-level fold assignment for subject-independent cross-validation.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub k: usize,
    /// subject id -> fold index
    pub assignments: IndexMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_subjects(&self, fold: usize) -> Vec<&String> {
        self.assignments
            .iter()
            .filter_map(|(s, &f)| (f == fold).then_some(s))
            .collect()
    }

    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignments.get(subject).copied()
    }
}

/// Deterministic shuffled partition of subjects into `k` folds whose
/// sizes differ by at most one.
pub fn kfold_split(subject_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    let n = subject_ids.len();
    if k == 0 || k > n {
        return Err(Error::config(format!(
            "k = {k} must lie in 1..={n} (number of subjects)"
        )));
    }
    {
        let mut dedup = subject_ids.to_vec();
        dedup.sort();
        dedup.dedup();
        if dedup.len() != n {
            return Err(Error::config("duplicate subject ids in fold split"));
        }
    }
    let mut order: Vec<&String> = subject_ids.iter().collect();
    let mut rng = rng::derive(seed, Stream::Fold, 0);
    rng::shuffle(&mut rng, &mut order);

    let base = n / k;
    let extra = n % k;
    let mut assignments = IndexMap::new();
    let mut at = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for subject in &order[at..at + size] {
            assignments.insert((*subject).clone(), fold);
        }
        at += size;
    }
    Ok(FoldPlan { k, assignments })
}

/// Classification quality summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Macro-averaged F1 (classes never predicted score 0).
    pub f1: f64,
    /// `confusion[true][pred]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Metrics from argmax predictions and true labels.
pub fn metrics_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<Metrics> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::data("predictions and labels must align and be non-empty"));
    }
    if predictions.iter().chain(labels).any(|&c| c >= n_classes) {
        return Err(Error::data("class index out of range"));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        confusion[t][p] += 1;
    }
    let total = predictions.len() as f64;
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let mut f1_sum = 0.0;
    for c in 0..n_classes {
        let tp = confusion[c][c] as f64;
        let fp: f64 = (0..n_classes).filter(|&t| t != c).map(|t| confusion[t][c] as f64).sum();
        let fn_: f64 = (0..n_classes).filter(|&p| p != c).map(|p| confusion[c][p] as f64).sum();
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        f1_sum += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    Ok(Metrics {
        accuracy: correct as f64 / total,
        f1: f1_sum / n_classes as f64,
        confusion,
    })
}
