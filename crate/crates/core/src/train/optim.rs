//! Adam with decoupled weight decay, plus the exact-resume trainer state.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{GradStore, ParamKind, ParamStore, TransformerConfig};
use crate::tensor::Tensor;

use super::TrainConfig;

/// First/second moment estimates per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
    /// Completed update count (bias correction uses `step + 1`).
    pub step: usize,
}

impl AdamState {
    pub fn zeros(params: &ParamStore) -> Self {
        let zero = |p: &ParamStore| -> IndexMap<String, Tensor> {
            p.iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.dims())))
                .collect()
        };
        AdamState {
            m: zero(params),
            v: zero(params),
            step: 0,
        }
    }
}

/// One Adam step with bias correction; decoupled weight decay applies to
/// `ParamKind::Weight` tensors only (never biases or norm parameters).
pub fn adam_update(
    params: &mut ParamStore,
    grads: &GradStore,
    state: &mut AdamState,
    lr: f64,
    train: &TrainConfig,
) -> Result<()> {
    let t = (state.step + 1) as f64;
    let bc1 = 1.0 - train.beta1.powf(t);
    let bc2 = 1.0 - train.beta2.powf(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::config(format!("gradient store is missing `{name}`")))?;
        grad.ensure_finite(name)
            .map_err(|_| Error::numerics(Some(name), "gradient is not finite"))?;
        let kind = params.kind(name).unwrap();
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        let p = params.get_mut(name)?;
        for i in 0..p.len() {
            let g = grad.data()[i];
            let mi = train.beta1 * m.data()[i] + (1.0 - train.beta1) * g;
            let vi = train.beta2 * v.data()[i] + (1.0 - train.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let mut delta = lr * m_hat / (v_hat.sqrt() + train.epsilon);
            if kind == ParamKind::Weight && train.weight_decay > 0.0 {
                delta += lr * train.weight_decay * p.data()[i];
            }
            p.data_mut()[i] -= delta;
        }
        p.ensure_finite(name)?;
    }
    state.step += 1;
    Ok(())
}

const STATE_MAGIC: &[u8; 8] = b"PMSTATE1";

/// Exact-resume snapshot: f64 parameters plus both Adam moments. The f32
/// interchange checkpoint cannot resume bitwise; this sidecar can.
pub fn save_trainer_state(
    path: &Path,
    params: &ParamStore,
    state: &AdamState,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&(state.step as u64).to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor) in params.iter() {
        let m = &state.m[name];
        let v = &state.v[name];
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
        for src in [tensor, m, v] {
            for &x in src.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Restore params + moments into a layout defined by the config.
pub fn load_trainer_state(
    path: &Path,
    config: &TransformerConfig,
) -> Result<(ParamStore, AdamState)> {
    let bytes = std::fs::read(path)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(*at..*at + n)
            .ok_or_else(|| Error::parse("trainer state truncated"))?;
        *at += n;
        Ok(s)
    };
    if take(&mut at, 8)? != STATE_MAGIC {
        return Err(Error::parse("not a trainer state file"));
    }
    let read_u64 = |at: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(at, 8)?.try_into().unwrap()))
    };
    let step = read_u64(&mut at)? as usize;
    let count = read_u64(&mut at)? as usize;

    let mut params = ParamStore::init(config, 0)?;
    let mut state = AdamState::zeros(&params);
    if count != params.len() {
        return Err(Error::config(format!(
            "trainer state has {count} tensors, config expects {}",
            params.len()
        )));
    }
    for _ in 0..count {
        let name_len = read_u64(&mut at)? as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|_| Error::parse("bad tensor name in trainer state"))?;
        let len = read_u64(&mut at)? as usize;
        if params.get(&name)?.len() != len {
            return Err(Error::config(format!(
                "trainer state tensor `{name}` length mismatch"
            )));
        }
        for dst in [
            params.get_mut(&name)?,
            state.m.get_mut(&name).unwrap(),
            state.v.get_mut(&name).unwrap(),
        ] {
            for i in 0..len {
                dst.data_mut()[i] = f64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
            }
        }
    }
    state.step = step;
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Batch, PretrainExample, TransformerConfig};
    use crate::patch::plan_mask;

    fn desk_train() -> TrainConfig {
        TrainConfig::desk()
    }

    #[test]
    fn zero_gradient_moves_only_decayed_weights() {
        let config = TransformerConfig::tiny();
        let mut params = ParamStore::init(&config, 1).unwrap();
        let before = params.clone();
        let grads = params.zero_grads();
        let mut state = AdamState::zeros(&params);
        let mut train = desk_train();
        train.weight_decay = 0.001;
        adam_update(&mut params, &grads, &mut state, 0.1, &train).unwrap();
        for (name, t) in params.iter() {
            let b = before.get(name).unwrap();
            match before.kind(name).unwrap() {
                ParamKind::Weight => {
                    for (x, y) in t.data().iter().zip(b.data()) {
                        assert!((x - y * (1.0 - 0.1 * 0.001)).abs() < 1e-15, "{name}");
                    }
                }
                _ => assert_eq!(t, b, "{name} should be untouched"),
            }
        }
    }

    #[test]
    fn first_step_update_is_minus_lr() {
        // hand-evaluated Adam recurrence at t=1 with g=1
        let config = TransformerConfig::tiny();
        let mut params = ParamStore::init(&config, 2).unwrap();
        let before = params.get("match.b").unwrap().data()[0];
        let mut grads = params.zero_grads();
        grads.grads.get_mut("match.b").unwrap().data_mut()[0] = 1.0;
        let mut state = AdamState::zeros(&params);
        let mut train = desk_train();
        train.weight_decay = 0.0;
        adam_update(&mut params, &grads, &mut state, 0.1, &train).unwrap();
        let after = params.get("match.b").unwrap().data()[0];
        assert!(
            (after - (before - 0.1)).abs() < 1e-8,
            "delta {}",
            after - before
        );
    }

    #[test]
    fn nonfinite_gradient_is_numerics_error_with_name() {
        let config = TransformerConfig::tiny();
        let mut params = ParamStore::init(&config, 3).unwrap();
        let mut grads = params.zero_grads();
        grads.grads.get_mut("dec.head.b").unwrap().data_mut()[0] = f64::INFINITY;
        let mut state = AdamState::zeros(&params);
        let err = adam_update(&mut params, &grads, &mut state, 0.1, &desk_train()).unwrap_err();
        match err {
            Error::Numerics { tensor, .. } => assert_eq!(tensor.as_deref(), Some("dec.head.b")),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn ten_steps_are_bitwise_reproducible() {
        let config = TransformerConfig::tiny();
        let train = desk_train();
        let run = || {
            let mut params = ParamStore::init(&config, 4).unwrap();
            let mut state = AdamState::zeros(&params);
            let n = config.n_patches();
            for step in 0..10u64 {
                let batch = Batch::Pretrain(vec![PretrainExample {
                    face: crate::train::tests::grid_from_seed(&config, step),
                    bio: crate::train::tests::grid_from_seed(&config, step + 50),
                    match_label: 1,
                    face_plan: Some(plan_mask(n, 0.75, step).unwrap()),
                    bio_plan: Some(plan_mask(n, 0.75, step + 99).unwrap()),
                }]);
                let (_, grads) = crate::model::compute_gradients(&batch, &params, &config).unwrap();
                adam_update(&mut params, &grads, &mut state, 1e-3, &train).unwrap();
            }
            params
        };
        let a = run();
        let b = run();
        for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn trainer_state_round_trips_exactly() {
        let config = TransformerConfig::tiny();
        let mut params = ParamStore::init(&config, 5).unwrap();
        let mut state = AdamState::zeros(&params);
        // take one real step so the moments are nonzero
        let n = config.n_patches();
        let batch = Batch::Pretrain(vec![PretrainExample {
            face: crate::train::tests::grid_from_seed(&config, 1),
            bio: crate::train::tests::grid_from_seed(&config, 2),
            match_label: 1,
            face_plan: Some(plan_mask(n, 0.75, 3).unwrap()),
            bio_plan: Some(plan_mask(n, 0.75, 4).unwrap()),
        }]);
        let (_, grads) = crate::model::compute_gradients(&batch, &params, &config).unwrap();
        adam_update(&mut params, &grads, &mut state, 1e-3, &desk_train()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trainer_state.bin");
        save_trainer_state(&path, &params, &state).unwrap();
        let (params2, state2) = load_trainer_state(&path, &config).unwrap();
        assert_eq!(state2.step, 1);
        for ((_, a), (_, b)) in params.iter().zip(params2.iter()) {
            assert_eq!(a.data(), b.data());
        }
        for (name, a) in &state.m {
            assert_eq!(a.data(), state2.m[name].data());
        }
        for (name, a) in &state.v {
            assert_eq!(a.data(), state2.v[name].data());
        }
    }
}
