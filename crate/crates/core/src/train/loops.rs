//! Pretraining and fine-tuning loops with negative-pair construction and
//! subject-independent evaluation.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use super::optim::{adam_update, load_trainer_state, save_trainer_state, AdamState};
use super::{lr_schedule, metrics_from_predictions, FoldPlan, Metrics, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{
    classify_pair, compute_gradients, Batch, FinetuneExample, ParamStore, PretrainExample,
    TransformerConfig,
};
use crate::patch::{plan_mask, PatchGrid};
use crate::rng::{self, Stream};

/// A dataset example after preprocessing: both modalities as patch grids.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub subject_id: String,
    pub face: PatchGrid,
    pub bio: PatchGrid,
    pub valence: usize,
    pub arousal: usize,
}

/// Which label axis a fine-tuning run classifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Valence,
    Arousal,
}

impl Axis {
    pub fn label_of(&self, ex: &PreparedExample) -> usize {
        match self {
            Axis::Valence => ex.valence,
            Axis::Arousal => ex.arousal,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "valence" => Ok(Axis::Valence),
            "arousal" => Ok(Axis::Arousal),
            other => Err(Error::config(format!("unknown axis `{other}`"))),
        }
    }
}

/// One pair slot in a pretraining batch: where the face and biosensor
/// images come from and whether they are aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPair {
    pub face_source: usize,
    pub bio_source: usize,
    pub label: u8,
}

/// Exactly half positives, half negatives; every negative swaps in a
/// face from a different source example. Deterministic per seed.
pub fn make_pretrain_batch(
    n_examples: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<BatchPair>> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::config("batch_size must be even and at least 2"));
    }
    if n_examples < batch_size {
        return Err(Error::data(format!(
            "dataset has {n_examples} examples, batch needs {batch_size}"
        )));
    }
    let mut rng = rng::derive(seed, Stream::Batch, 0);
    let chosen = rng::sample_without_replacement(&mut rng, n_examples, batch_size);
    let half = batch_size / 2;
    let mut out = Vec::with_capacity(batch_size);
    for &idx in &chosen[..half] {
        out.push(BatchPair {
            face_source: idx,
            bio_source: idx,
            label: 1,
        });
    }
    for &idx in &chosen[half..] {
        // substitute a face from any other example
        let mut face = rng.random_range(0..n_examples - 1);
        if face >= idx {
            face += 1;
        }
        out.push(BatchPair {
            face_source: face,
            bio_source: idx,
            label: 0,
        });
    }
    Ok(out)
}

/// One row of the loss trace CSV (`step,l_m,l_c,total,lr`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub l_m: f64,
    pub l_c: f64,
    pub total: f64,
    pub lr: f64,
}

/// Write the trace in the documented CSV layout.
pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from("step,l_m,l_c,total,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.l_m, r.l_c, r.total, r.lr
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Result of a pretraining run.
#[derive(Debug)]
pub struct PretrainOutcome {
    pub params: ParamStore,
    pub trace: Vec<TraceRow>,
    pub checkpoint_dir: Option<PathBuf>,
}

const TRAINER_STATE_FILE: &str = "trainer_state.bin";

// Sub-seed tags for the per-step randomness streams.
const TAG_BATCH: u64 = 1;
const TAG_MASK_FACE: u64 = 2;
const TAG_MASK_BIO: u64 = 3;

fn step_batch(
    examples: &[PreparedExample],
    config: &TransformerConfig,
    train: &TrainConfig,
    step: usize,
) -> Result<Batch> {
    let pairs = make_pretrain_batch(
        examples.len(),
        train.batch_size,
        rng::subseed(train.seed, &[TAG_BATCH, step as u64]),
    )?;
    let n_patches = config.n_patches();
    let items = pairs
        .iter()
        .enumerate()
        .map(|(slot, pair)| {
            let positive = pair.label == 1;
            let plan = |tag: u64| {
                plan_mask(
                    n_patches,
                    config.mask_ratio,
                    rng::subseed(train.seed, &[tag, step as u64, slot as u64]),
                )
            };
            Ok(PretrainExample {
                face: examples[pair.face_source].face.clone(),
                bio: examples[pair.bio_source].bio.clone(),
                match_label: pair.label,
                face_plan: positive.then(|| plan(TAG_MASK_FACE)).transpose()?,
                bio_plan: positive.then(|| plan(TAG_MASK_BIO)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch::Pretrain(items))
}

/// Masked-autoencoding + contrastive pretraining. Per step: build a
/// half-negative batch, draw fresh mask plans for the aligned pairs,
/// take one Adam step at the scheduled rate, and append a trace row.
/// Checkpoints (f32 interchange + f64 trainer state) land in
/// `checkpoint_dir` at the configured interval and at the end. On a
/// numerics error the loop aborts, leaving the last saved checkpoint.
pub fn pretrain_loop(
    examples: &[PreparedExample],
    config: &TransformerConfig,
    train: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    train.validate()?;
    if examples.is_empty() {
        return Err(Error::data("empty pretraining dataset"));
    }

    let (mut params, mut state) = match resume_from {
        Some(dir) => load_trainer_state(&dir.join(TRAINER_STATE_FILE), config)?,
        None => {
            let params = ParamStore::init(config, train.seed)?;
            let state = AdamState::zeros(&params);
            (params, state)
        }
    };

    let mut trace = Vec::with_capacity(train.total_steps);
    let start = state.step;
    for step in start..train.total_steps {
        let batch = step_batch(examples, config, train, step)?;
        // on error the loop returns immediately; whatever checkpoint was
        // last written stays behind for recovery
        let (parts, grads) = compute_gradients(&batch, &params, config)?;
        let lr = lr_schedule(step, train.total_steps, train.base_lr, train.schedule);
        adam_update(&mut params, &grads, &mut state, lr, train)?;
        trace.push(TraceRow {
            step: step + 1,
            l_m: parts.l_m,
            l_c: parts.l_c,
            total: parts.total,
            lr,
        });
        if let Some(dir) = checkpoint_dir {
            let interval = train.checkpoint_interval;
            let is_last = step + 1 == train.total_steps;
            if is_last || (interval > 0 && (step + 1) % interval == 0) {
                params.save_checkpoint(dir)?;
                save_trainer_state(&dir.join(TRAINER_STATE_FILE), &params, &state)?;
            }
        }
    }
    Ok(PretrainOutcome {
        params,
        trace,
        checkpoint_dir: checkpoint_dir.map(Path::to_path_buf),
    })
}

/// Argmax classification metrics over prepared examples.
pub fn evaluate(
    params: &ParamStore,
    config: &TransformerConfig,
    examples: &[PreparedExample],
    axis: Axis,
) -> Result<Metrics> {
    let n_classes = config
        .n_classes
        .ok_or_else(|| Error::config("evaluation requires n_classes in the config"))?;
    let mut preds = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        let logits = classify_pair(&ex.face, &ex.bio, params, config)?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap();
        preds.push(pred);
        labels.push(axis.label_of(ex));
    }
    metrics_from_predictions(&preds, &labels, n_classes)
}

/// Aggregate over folds: mean accuracy/F1, summed confusion counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Cross-validation report, serialized as the metrics JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub per_fold: Vec<Metrics>,
    pub mean: MeanMetrics,
}

impl FinetuneReport {
    pub fn from_folds(per_fold: Vec<Metrics>) -> Self {
        let k = per_fold.len().max(1) as f64;
        let accuracy = per_fold.iter().map(|m| m.accuracy).sum::<f64>() / k;
        let f1 = per_fold.iter().map(|m| m.f1).sum::<f64>() / k;
        let n = per_fold.first().map(|m| m.confusion.len()).unwrap_or(0);
        let mut confusion = vec![vec![0usize; n]; n];
        for m in &per_fold {
            for (dst, src) in confusion.iter_mut().zip(&m.confusion) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        FinetuneReport {
            per_fold,
            mean: MeanMetrics {
                accuracy,
                f1,
                confusion,
            },
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::parse(format!("metrics encode: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }
}

/// Subject-independent fine-tuning: for each fold, attach a fresh MLP
/// head to the pretrained encoder, train encoder + head on the fold's
/// training subjects, and evaluate on its held-out subjects.
pub fn finetune_loop(
    examples: &[PreparedExample],
    pretrained: &ParamStore,
    base_config: &TransformerConfig,
    train: &TrainConfig,
    axis: Axis,
    fold_plan: &FoldPlan,
    n_classes: usize,
) -> Result<FinetuneReport> {
    let config = base_config.clone().with_classes(n_classes);
    config.validate()?;
    train.validate()?;
    for ex in examples {
        if fold_plan.fold_of(&ex.subject_id).is_none() {
            return Err(Error::config(format!(
                "subject `{}` is not covered by the fold plan",
                ex.subject_id
            )));
        }
        if axis.label_of(ex) >= n_classes {
            return Err(Error::data(format!(
                "label {} out of range for {n_classes} classes",
                axis.label_of(ex)
            )));
        }
    }

    let mut per_fold = Vec::with_capacity(fold_plan.k);
    for fold in 0..fold_plan.k {
        let (train_set, test_set): (Vec<&PreparedExample>, Vec<&PreparedExample>) = examples
            .iter()
            .partition(|ex| fold_plan.fold_of(&ex.subject_id) != Some(fold));
        if train_set.is_empty() || test_set.is_empty() {
            return Err(Error::data(format!(
                "fold {fold} leaves an empty train or test split"
            )));
        }

        let mut params = pretrained.clone();
        params.add_classifier(&config, rng::subseed(train.seed, &[7, fold as u64]))?;
        let mut state = AdamState::zeros(&params);

        let steps_per_epoch = train_set.len().div_ceil(train.batch_size);
        let total_steps = steps_per_epoch * train.finetune_epochs;
        let mut step = 0usize;
        for epoch in 0..train.finetune_epochs {
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            let mut rng = rng::derive(
                rng::subseed(train.seed, &[9, fold as u64, epoch as u64]),
                Stream::Shuffle,
                0,
            );
            rng::shuffle(&mut rng, &mut order);
            for chunk in order.chunks(train.batch_size) {
                let batch: Vec<FinetuneExample> = chunk
                    .iter()
                    .map(|&i| FinetuneExample {
                        face: train_set[i].face.clone(),
                        bio: train_set[i].bio.clone(),
                        label: axis.label_of(train_set[i]),
                    })
                    .collect();
                let (_, grads) = compute_gradients(&Batch::Finetune(batch), &params, &config)?;
                let lr = lr_schedule(step, total_steps, train.base_lr, train.schedule);
                adam_update(&mut params, &grads, &mut state, lr, train)?;
                step += 1;
            }
        }

        let test_owned: Vec<PreparedExample> = test_set.into_iter().cloned().collect();
        per_fold.push(evaluate(&params, &config, &test_owned, axis)?);
    }
    Ok(FinetuneReport::from_folds(per_fold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_labels_are_balanced_and_negatives_mismatched() {
        let pairs = make_pretrain_batch(10, 4, 3).unwrap();
        assert_eq!(pairs.len(), 4);
        let positives = pairs.iter().filter(|p| p.label == 1).count();
        assert_eq!(positives, 2);
        for p in &pairs {
            match p.label {
                1 => assert_eq!(p.face_source, p.bio_source),
                0 => assert_ne!(p.face_source, p.bio_source),
                _ => unreachable!(),
            }
            assert!(p.face_source < 10 && p.bio_source < 10);
        }
    }

    #[test]
    fn batch_is_deterministic_per_seed() {
        let a = make_pretrain_batch(16, 8, 5).unwrap();
        let b = make_pretrain_batch(16, 8, 5).unwrap();
        assert_eq!(a, b);
        let c = make_pretrain_batch(16, 8, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batch_balance_holds_for_every_even_size() {
        for batch_size in [2usize, 4, 6, 8, 12] {
            let pairs = make_pretrain_batch(16, batch_size, 11).unwrap();
            let pos = pairs.iter().filter(|p| p.label == 1).count();
            assert_eq!(pos, batch_size / 2);
        }
    }

    #[test]
    fn batch_rejects_bad_sizes() {
        assert!(make_pretrain_batch(10, 3, 0).is_err());
        assert!(make_pretrain_batch(2, 4, 0).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let rows = vec![TraceRow {
            step: 1,
            l_m: 1.5,
            l_c: 0.25,
            total: 0.85,
            lr: 0.0001,
        }];
        write_trace_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,l_m,l_c,total,lr\n1,1.5,0.25,0.85,0.0001\n");
    }

    #[test]
    fn mean_metrics_aggregate() {
        let m1 = Metrics {
            accuracy: 1.0,
            f1: 1.0,
            confusion: vec![vec![2, 0], vec![0, 2]],
        };
        let m2 = Metrics {
            accuracy: 0.5,
            f1: 1.0 / 3.0,
            confusion: vec![vec![2, 0], vec![2, 0]],
        };
        let report = FinetuneReport::from_folds(vec![m1, m2]);
        assert!((report.mean.accuracy - 0.75).abs() < 1e-15);
        assert_eq!(report.mean.confusion, vec![vec![4, 0], vec![2, 2]]);
        assert_eq!(report.per_fold.len(), 2);
    }
}
