//! The unified biosensor-vision transformer: shared encoder over
//! concatenated modality tokens, a decoder with [MASK] insertion for
//! masked-patch reconstruction, a sigmoid matching head on [CLS], the
//! weighted pretraining objective, and the fine-tuning MLP head — with
//! analytic gradients for every parameter.

pub mod config;
pub mod forward;
pub mod params;

pub use config::TransformerConfig;
pub use forward::{
    assemble_decoder_input, classifier_forward, contrastive_loss, contrastive_loss_strict,
    decoder_forward, embed_tokens, encoder_forward, mae_loss, matching_probability, pretrain_loss,
    EncoderOutput,
};
pub use params::{GradStore, ParamKind, ParamStore};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::patch::{MaskPlan, PatchGrid, TokenModality};
use forward::{load_params, ParamVars};

/// One pretraining pair. Positives (`match_label == 1`) carry mask plans
/// and enter the reconstruction loss; negatives only enter the matching
/// loss.
#[derive(Debug, Clone)]
pub struct PretrainExample {
    pub face: PatchGrid,
    pub bio: PatchGrid,
    pub match_label: u8,
    pub face_plan: Option<MaskPlan>,
    pub bio_plan: Option<MaskPlan>,
}

/// One labeled pair for fine-tuning.
#[derive(Debug, Clone)]
pub struct FinetuneExample {
    pub face: PatchGrid,
    pub bio: PatchGrid,
    pub label: usize,
}

/// A forward/backward workload: which loss to differentiate, with its data.
#[derive(Debug, Clone)]
pub enum Batch {
    Pretrain(Vec<PretrainExample>),
    Finetune(Vec<FinetuneExample>),
}

/// Loss values from one gradient evaluation. For fine-tuning, `total` is
/// the cross-entropy and the pretraining parts are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l_m: f64,
    pub l_c: f64,
    pub total: f64,
}

fn check_grid(grid: &PatchGrid, config: &TransformerConfig, what: &str) -> Result<()> {
    if grid.n_patches() != config.n_patches() || grid.patch_dim() != config.patch_dim() {
        return Err(Error::data(format!(
            "{what} grid {}x{} does not match config ({} patches of {})",
            grid.n_patches(),
            grid.patch_dim(),
            config.n_patches(),
            config.patch_dim()
        )));
    }
    Ok(())
}

/// Masked reconstruction sub-graph for one aligned pair; returns the
/// per-example Eq-style loss node.
fn mae_pass(
    tape: &mut Tape,
    pv: &ParamVars,
    ex: &PretrainExample,
    config: &TransformerConfig,
) -> Result<Var> {
    let face_plan = ex
        .face_plan
        .as_ref()
        .ok_or_else(|| Error::data("aligned pair is missing its face mask plan"))?;
    let bio_plan = ex
        .bio_plan
        .as_ref()
        .ok_or_else(|| Error::data("aligned pair is missing its bio mask plan"))?;
    for plan in [face_plan, bio_plan] {
        if plan.n_patches != config.n_patches() {
            return Err(Error::data("mask plan does not match config grid"));
        }
        if plan.n_masked() == 0 || plan.n_masked() == plan.n_patches {
            return Err(Error::data(
                "mask plan must leave at least one masked and one visible patch",
            ));
        }
    }

    let grid_w = config.grid_side();
    let face_target = tape.leaf(ex.face.patches.clone());
    let bio_target = tape.leaf(ex.bio.patches.clone());

    let face_tokens = forward::embed_on_tape(tape, pv, face_target, grid_w, TokenModality::Face, false)?;
    let bio_tokens = forward::embed_on_tape(tape, pv, bio_target, grid_w, TokenModality::Biosensor, false)?;
    let face_vis = tape.gather_rows(face_tokens, &face_plan.visible_indices());
    let bio_vis = tape.gather_rows(bio_tokens, &bio_plan.visible_indices());

    let cls = pv.get("embed.cls")?;
    let (hidden, face_span, bio_span) =
        forward::encoder_on_tape(tape, pv, cls, face_vis, bio_vis, config)?;

    let mut loss = None;
    for (span, plan, modality, target) in [
        (face_span, face_plan, TokenModality::Face, face_target),
        (bio_span, bio_plan, TokenModality::Biosensor, bio_target),
    ] {
        let rows: Vec<usize> = span.collect();
        let enc = tape.gather_rows(hidden, &rows);
        let dec_in = forward::assemble_on_tape(tape, pv, enc, plan, modality, config)?;
        let recon = forward::decoder_on_tape(tape, pv, dec_in, config)?;
        let term = forward::mae_term_on_tape(tape, recon, target, plan)?;
        loss = Some(match loss {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    Ok(loss.unwrap())
}

/// Unmasked matching sub-graph for one (possibly mismatched) pair.
fn contrastive_pass(
    tape: &mut Tape,
    pv: &ParamVars,
    ex: &PretrainExample,
    config: &TransformerConfig,
) -> Result<Var> {
    let grid_w = config.grid_side();
    let face_leaf = tape.leaf(ex.face.patches.clone());
    let bio_leaf = tape.leaf(ex.bio.patches.clone());
    let face_tokens = forward::embed_on_tape(tape, pv, face_leaf, grid_w, TokenModality::Face, false)?;
    let bio_tokens = forward::embed_on_tape(tape, pv, bio_leaf, grid_w, TokenModality::Biosensor, false)?;
    let cls = pv.get("embed.cls")?;
    let (hidden, _, _) = forward::encoder_on_tape(tape, pv, cls, face_tokens, bio_tokens, config)?;
    let cls_h = tape.gather_rows(hidden, &[0]);
    let z = forward::matching_logit_on_tape(tape, pv, cls_h)?;
    let y = f64::from(ex.match_label);
    if config.strict_matching_loss {
        // -y log sigmoid(z) == y * bce(z, 1)
        let pos = tape.bce_with_logits(z, 1.0);
        Ok(tape.scale(pos, y))
    } else {
        Ok(tape.bce_with_logits(z, y))
    }
}

/// Loss values only (no backward pass); the finite-difference oracle in
/// the test suite differentiates exactly this function.
pub fn compute_loss(
    batch: &Batch,
    params: &ParamStore,
    config: &TransformerConfig,
) -> Result<LossParts> {
    config.validate()?;
    let mut tape = Tape::new();
    let pv = load_params(&mut tape, params);
    let (parts, _) = build_loss(&mut tape, &pv, batch, config)?;
    Ok(parts)
}

/// Build the requested loss over the batch, backpropagate, and harvest a
/// gradient tensor for every parameter in the manifest (exact zeros for
/// parameters the loss does not reach).
pub fn compute_gradients(
    batch: &Batch,
    params: &ParamStore,
    config: &TransformerConfig,
) -> Result<(LossParts, GradStore)> {
    config.validate()?;
    let mut tape = Tape::new();
    let pv = load_params(&mut tape, params);
    let (parts, loss_var) = build_loss(&mut tape, &pv, batch, config)?;

    if !parts.total.is_finite() {
        params.ensure_all_finite()?;
        return Err(Error::numerics(Some("loss"), "loss is not finite"));
    }

    let node_grads = tape.backward(loss_var);
    let mut grads = params.zero_grads();
    for name in params.names() {
        if let Some(var) = pv.var_of(name) {
            if let Some(g) = node_grads[var.index()].as_ref() {
                g.ensure_finite(name)?;
                *grads.grads.get_mut(name).unwrap() = g.clone();
            }
        }
    }
    Ok((parts, grads))
}

fn build_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    batch: &Batch,
    config: &TransformerConfig,
) -> Result<(LossParts, Var)> {
    let out = match batch {
        Batch::Pretrain(examples) => {
            if examples.is_empty() {
                return Err(Error::data("empty pretraining batch"));
            }
            for ex in examples {
                check_grid(&ex.face, config, "face")?;
                check_grid(&ex.bio, config, "bio")?;
                if ex.match_label > 1 {
                    return Err(Error::data("match label must be 0 or 1"));
                }
            }
            let positives: Vec<&PretrainExample> =
                examples.iter().filter(|e| e.match_label == 1).collect();
            if positives.is_empty() {
                return Err(Error::data(
                    "pretraining batch needs at least one aligned pair for the reconstruction loss",
                ));
            }
            let mut l_m_acc: Option<Var> = None;
            for ex in &positives {
                let term = mae_pass(tape, pv, ex, config)?;
                l_m_acc = Some(match l_m_acc {
                    None => term,
                    Some(acc) => tape.add(acc, term),
                });
            }
            let l_m = tape.scale(l_m_acc.unwrap(), 1.0 / positives.len() as f64);

            let mut l_c_acc: Option<Var> = None;
            for ex in examples {
                let term = contrastive_pass(tape, pv, ex, config)?;
                l_c_acc = Some(match l_c_acc {
                    None => term,
                    Some(acc) => tape.add(acc, term),
                });
            }
            let l_c = tape.scale(l_c_acc.unwrap(), 1.0 / examples.len() as f64);

            let wm = tape.scale(l_m, config.lambda_m);
            let wc = tape.scale(l_c, config.lambda_c);
            let total = tape.add(wm, wc);
            (
                LossParts {
                    l_m: tape.scalar(l_m),
                    l_c: tape.scalar(l_c),
                    total: tape.scalar(total),
                },
                total,
            )
        }
        Batch::Finetune(examples) => {
            if examples.is_empty() {
                return Err(Error::data("empty fine-tuning batch"));
            }
            let n_classes = config
                .n_classes
                .ok_or_else(|| Error::config("fine-tuning requires n_classes in the config"))?;
            let grid_w = config.grid_side();
            let mut cls_rows = Vec::with_capacity(examples.len());
            let mut labels = Vec::with_capacity(examples.len());
            for ex in examples {
                check_grid(&ex.face, config, "face")?;
                check_grid(&ex.bio, config, "bio")?;
                if ex.label >= n_classes {
                    return Err(Error::data(format!(
                        "label {} out of range for {n_classes} classes",
                        ex.label
                    )));
                }
                let face_leaf = tape.leaf(ex.face.patches.clone());
                let bio_leaf = tape.leaf(ex.bio.patches.clone());
                let face_tokens =
                    forward::embed_on_tape(tape, pv, face_leaf, grid_w, TokenModality::Face, false)?;
                let bio_tokens = forward::embed_on_tape(
                    tape,
                    pv,
                    bio_leaf,
                    grid_w,
                    TokenModality::Biosensor,
                    false,
                )?;
                let cls = pv.get("embed.cls")?;
                let (hidden, _, _) =
                    forward::encoder_on_tape(tape, pv, cls, face_tokens, bio_tokens, config)?;
                cls_rows.push(tape.gather_rows(hidden, &[0]));
                labels.push(ex.label);
            }
            let stacked = tape.concat_rows(&cls_rows);
            let logits = forward::classifier_on_tape(tape, pv, stacked)?;
            let ce = tape.cross_entropy_rows(logits, &labels);
            (
                LossParts {
                    l_m: 0.0,
                    l_c: 0.0,
                    total: tape.scalar(ce),
                },
                ce,
            )
        }
    };
    Ok(out)
}

/// Full-pipeline matching probability for an aligned/mismatched pair.
pub fn pair_matching_probability(
    face: &PatchGrid,
    bio: &PatchGrid,
    params: &ParamStore,
    config: &TransformerConfig,
) -> Result<f64> {
    let face_seq = embed_tokens(face, TokenModality::Face, params, config)?;
    let bio_seq = embed_tokens(bio, TokenModality::Biosensor, params, config)?;
    let out = encoder_forward(&face_seq, &bio_seq, params, config)?;
    matching_probability(out.cls_hidden(), params)
}

/// Full-pipeline class logits for a pair.
pub fn classify_pair(
    face: &PatchGrid,
    bio: &PatchGrid,
    params: &ParamStore,
    config: &TransformerConfig,
) -> Result<Vec<f64>> {
    let n_classes = config
        .n_classes
        .ok_or_else(|| Error::config("classification requires n_classes in the config"))?;
    let face_seq = embed_tokens(face, TokenModality::Face, params, config)?;
    let bio_seq = embed_tokens(bio, TokenModality::Biosensor, params, config)?;
    let out = encoder_forward(&face_seq, &bio_seq, params, config)?;
    classifier_forward(out.cls_hidden(), params, n_classes)
}
