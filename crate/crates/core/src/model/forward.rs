//! Graph construction for every forward pass, plus the value-level
//! operations built on top of the same graphs (one implementation serves
//! both inference and gradient computation).

use std::ops::Range;

use indexmap::IndexMap;

use super::config::TransformerConfig;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::patch::{MaskPlan, PatchGrid, TokenModality, TokenSequence};
use crate::tensor::Tensor;

/// Parameter tensors pushed onto a tape, by name.
pub(crate) struct ParamVars {
    map: IndexMap<String, Var>,
}

impl ParamVars {
    pub(crate) fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter tensor `{name}`")))
    }

    pub(crate) fn var_of(&self, name: &str) -> Option<Var> {
        self.map.get(name).copied()
    }
}

/// Push every parameter onto the tape as a leaf.
pub(crate) fn load_params(tape: &mut Tape, store: &ParamStore) -> ParamVars {
    let map = store
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
        .collect();
    ParamVars { map }
}

// ---- token embedding ----

/// Project patches and add positional + modality vectors; optionally
/// prepend the shared [CLS] vector.
pub(crate) fn embed_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    patches: Var,
    grid_w: usize,
    modality: TokenModality,
    with_cls: bool,
) -> Result<Var> {
    let m = modality.tag();
    let n = tape.value(patches).rows();
    let w = pv.get(&format!("{m}.proj.w"))?;
    let b = pv.get(&format!("{m}.proj.b"))?;
    let proj = tape.linear(patches, w, b);

    let row_ids: Vec<usize> = (0..n).map(|i| i / grid_w).collect();
    let col_ids: Vec<usize> = (0..n).map(|i| i % grid_w).collect();
    let pos_row = pv.get(&format!("{m}.pos_row"))?;
    let pos_col = pv.get(&format!("{m}.pos_col"))?;
    let pr = tape.gather_rows(pos_row, &row_ids);
    let pc = tape.gather_rows(pos_col, &col_ids);
    let modal = pv.get("embed.modality")?;
    let modal_row = tape.gather_rows(modal, &[modality.index()]);
    let modal_tile = tape.tile_rows(modal_row, n);

    let mut tokens = tape.add(proj, pr);
    tokens = tape.add(tokens, pc);
    tokens = tape.add(tokens, modal_tile);
    if with_cls {
        let cls = pv.get("embed.cls")?;
        tokens = tape.concat_rows(&[cls, tokens]);
    }
    Ok(tokens)
}

// ---- transformer blocks ----

fn multi_head_attention(
    tape: &mut Tape,
    pv: &ParamVars,
    h: Var,
    prefix: &str,
    n_heads: usize,
) -> Result<Var> {
    let wq = pv.get(&format!("{prefix}.attn.wq"))?;
    let bq = pv.get(&format!("{prefix}.attn.bq"))?;
    let wk = pv.get(&format!("{prefix}.attn.wk"))?;
    let bk = pv.get(&format!("{prefix}.attn.bk"))?;
    let wv = pv.get(&format!("{prefix}.attn.wv"))?;
    let bv = pv.get(&format!("{prefix}.attn.bv"))?;
    let q = tape.linear(h, wq, bq);
    let k = tape.linear(h, wk, bk);
    let v = tape.linear(h, wv, bv);

    let width = tape.value(q).cols();
    let dh = width / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let (lo, hi) = (i * dh, (i + 1) * dh);
        let qi = tape.slice_cols(q, lo, hi);
        let ki = tape.slice_cols(k, lo, hi);
        let vi = tape.slice_cols(v, lo, hi);
        let kt = tape.transpose(ki);
        let scores = tape.matmul(qi, kt);
        let scores = tape.scale(scores, scale);
        let att = tape.softmax_rows(scores);
        heads.push(tape.matmul(att, vi));
    }
    let cat = tape.concat_cols(&heads);
    let wo = pv.get(&format!("{prefix}.attn.wo"))?;
    let bo = pv.get(&format!("{prefix}.attn.bo"))?;
    Ok(tape.linear(cat, wo, bo))
}

/// Pre-norm block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`. No trailing
/// norm, so a block with zeroed attention/MLP weights is the identity.
fn transformer_block(
    tape: &mut Tape,
    pv: &ParamVars,
    x: Var,
    prefix: &str,
    n_heads: usize,
    eps: f64,
) -> Result<Var> {
    let g1 = pv.get(&format!("{prefix}.ln1.g"))?;
    let o1 = pv.get(&format!("{prefix}.ln1.o"))?;
    let h = tape.layer_norm_rows(x, g1, o1, eps);
    let attn = multi_head_attention(tape, pv, h, prefix, n_heads)?;
    let x = tape.add(x, attn);

    let g2 = pv.get(&format!("{prefix}.ln2.g"))?;
    let o2 = pv.get(&format!("{prefix}.ln2.o"))?;
    let h2 = tape.layer_norm_rows(x, g2, o2, eps);
    let w1 = pv.get(&format!("{prefix}.mlp.w1"))?;
    let b1 = pv.get(&format!("{prefix}.mlp.b1"))?;
    let w2 = pv.get(&format!("{prefix}.mlp.w2"))?;
    let b2 = pv.get(&format!("{prefix}.mlp.b2"))?;
    let m = tape.linear(h2, w1, b1);
    let m = tape.gelu(m);
    let m = tape.linear(m, w2, b2);
    Ok(tape.add(x, m))
}

fn run_blocks(
    tape: &mut Tape,
    pv: &ParamVars,
    mut x: Var,
    stack: &str,
    layers: usize,
    n_heads: usize,
    eps: f64,
) -> Result<Var> {
    for i in 0..layers {
        x = transformer_block(tape, pv, x, &format!("{stack}.{i}"), n_heads, eps)?;
    }
    Ok(x)
}

/// Shared encoder over `[CLS] ++ face tokens ++ bio tokens`.
pub(crate) fn encoder_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cls: Var,
    face_tokens: Var,
    bio_tokens: Var,
    config: &TransformerConfig,
) -> Result<(Var, Range<usize>, Range<usize>)> {
    let nf = tape.value(face_tokens).rows();
    let nb = tape.value(bio_tokens).rows();
    let joint = tape.concat_rows(&[cls, face_tokens, bio_tokens]);
    let hidden = run_blocks(
        tape,
        pv,
        joint,
        "enc",
        config.enc_layers,
        config.n_heads_enc,
        config.ln_eps,
    )?;
    Ok((hidden, 1..1 + nf, 1 + nf..1 + nf + nb))
}

/// Decoder input for one modality: bridge-projected visible encodings
/// scattered over a field of [MASK] vectors, plus the decoder's own
/// (separately parametrized) positional tables.
pub(crate) fn assemble_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    encoded_visible: Var,
    plan: &MaskPlan,
    modality: TokenModality,
    config: &TransformerConfig,
) -> Result<Var> {
    let n_patches = plan.n_patches;
    let visible = plan.visible_indices();
    if tape.value(encoded_visible).rows() != visible.len() {
        return Err(Error::data(format!(
            "plan expects {} visible tokens, got {}",
            visible.len(),
            tape.value(encoded_visible).rows()
        )));
    }
    let bw = pv.get("dec.bridge.w")?;
    let bb = pv.get("dec.bridge.b")?;
    let proj = tape.linear(encoded_visible, bw, bb);

    let mask = pv.get("dec.mask")?;
    let field = tape.tile_rows(mask, n_patches);
    let seq = tape.scatter_rows_replace(field, proj, &visible);

    let m = modality.tag();
    let grid_w = config.grid_side();
    let row_ids: Vec<usize> = (0..n_patches).map(|i| i / grid_w).collect();
    let col_ids: Vec<usize> = (0..n_patches).map(|i| i % grid_w).collect();
    let pr_table = pv.get(&format!("dec.{m}.pos_row"))?;
    let pc_table = pv.get(&format!("dec.{m}.pos_col"))?;
    let pr = tape.gather_rows(pr_table, &row_ids);
    let pc = tape.gather_rows(pc_table, &col_ids);
    let seq = tape.add(seq, pr);
    Ok(tape.add(seq, pc))
}

pub(crate) fn decoder_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    tokens: Var,
    config: &TransformerConfig,
) -> Result<Var> {
    let hidden = run_blocks(
        tape,
        pv,
        tokens,
        "dec",
        config.dec_layers,
        config.n_heads_dec,
        config.ln_eps,
    )?;
    let hw = pv.get("dec.head.w")?;
    let hb = pv.get("dec.head.b")?;
    Ok(tape.linear(hidden, hw, hb))
}

/// Masked-patch MSE for one modality: squared error summed over each
/// masked patch vector, averaged over the masked count.
pub(crate) fn mae_term_on_tape(
    tape: &mut Tape,
    recon: Var,
    target: Var,
    plan: &MaskPlan,
) -> Result<Var> {
    if plan.n_masked() == 0 {
        return Err(Error::data("MAE loss needs a non-empty mask plan"));
    }
    let rec = tape.gather_rows(recon, &plan.masked_indices);
    let tgt = tape.gather_rows(target, &plan.masked_indices);
    let diff = tape.sub(rec, tgt);
    let sq = tape.mul(diff, diff);
    let sum = tape.sum_all(sq);
    Ok(tape.scale(sum, 1.0 / plan.n_masked() as f64))
}

/// Matching logit from the CLS hidden state.
pub(crate) fn matching_logit_on_tape(tape: &mut Tape, pv: &ParamVars, cls_hidden: Var) -> Result<Var> {
    let w = pv.get("match.w")?;
    let b = pv.get("match.b")?;
    Ok(tape.linear(cls_hidden, w, b))
}

/// Two-layer MLP classifier over CLS hidden states (rows).
pub(crate) fn classifier_on_tape(tape: &mut Tape, pv: &ParamVars, cls_rows: Var) -> Result<Var> {
    let w1 = pv.get("cls_head.w1")?;
    let b1 = pv.get("cls_head.b1")?;
    let w2 = pv.get("cls_head.w2")?;
    let b2 = pv.get("cls_head.b2")?;
    let h = tape.linear(cls_rows, w1, b1);
    let h = tape.gelu(h);
    Ok(tape.linear(h, w2, b2))
}

// ---- value-level operations ----

/// Encoder output: hidden states with the CLS at row 0 and the token
/// ranges each modality occupies.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden: Tensor,
    pub face_span: Range<usize>,
    pub bio_span: Range<usize>,
}

impl EncoderOutput {
    pub fn cls_hidden(&self) -> &[f64] {
        self.hidden.row(0)
    }

    pub fn modality_rows(&self, span: &Range<usize>) -> Tensor {
        let mut out = Tensor::zeros(&[span.len(), self.hidden.cols()]);
        for (r, src) in span.clone().enumerate() {
            out.row_mut(r).copy_from_slice(self.hidden.row(src));
        }
        out
    }
}

fn grid_positions(n: usize, grid_w: usize, with_cls: bool) -> Vec<Option<(usize, usize)>> {
    let mut positions = Vec::with_capacity(n + usize::from(with_cls));
    if with_cls {
        positions.push(None);
    }
    positions.extend((0..n).map(|i| Some((i / grid_w, i % grid_w))));
    positions
}

/// Tokens for a patch grid: linear projection plus row/column/modality
/// embeddings, with the [CLS] vector prepended.
pub fn embed_tokens(
    grid: &PatchGrid,
    modality: TokenModality,
    params: &ParamStore,
    config: &TransformerConfig,
) -> Result<TokenSequence> {
    let proj = params.get(&format!("{}.proj.w", modality.tag()))?;
    if proj.rows() != grid.patch_dim() {
        return Err(Error::config(format!(
            "projection expects patch_dim {}, grid has {}",
            proj.rows(),
            grid.patch_dim()
        )));
    }
    let mut tape = Tape::new();
    let pv = load_params(&mut tape, params);
    let patches = tape.leaf(grid.patches.clone());
    let tokens = embed_on_tape(&mut tape, &pv, patches, grid.grid_w, modality, true)?;
    let _ = config;
    Ok(TokenSequence {
        tokens: tape.value(tokens).clone(),
        modality,
        has_cls: true,
        positions: grid_positions(grid.n_patches(), grid.grid_w, true),
    })
}

fn patch_rows(seq: &TokenSequence) -> Tensor {
    let offset = usize::from(seq.has_cls);
    let n = seq.n_patch_tokens();
    let mut out = Tensor::zeros(&[n.max(1), seq.tokens.cols()]);
    for r in 0..n {
        out.row_mut(r).copy_from_slice(seq.tokens.row(r + offset));
    }
    if n == 0 {
        Tensor::zeros(&[1, seq.tokens.cols()])
    } else {
        out
    }
}

/// Run the shared encoder over both modalities' (possibly masked) token
/// sequences. The single summary slot comes from the face sequence's CLS
/// when present, else the bio one, else the [CLS] parameter itself.
pub fn encoder_forward(
    face: &TokenSequence,
    bio: &TokenSequence,
    params: &ParamStore,
    config: &TransformerConfig,
) -> Result<EncoderOutput> {
    for seq in [face, bio] {
        if seq.tokens.cols() != config.d_model {
            return Err(Error::config(format!(
                "token width {} does not match d_model {}",
                seq.tokens.cols(),
                config.d_model
            )));
        }
    }
    if face.n_patch_tokens() == 0 && bio.n_patch_tokens() == 0 {
        return Err(Error::data("encoder needs at least one patch token"));
    }
    let mut tape = Tape::new();
    let pv = load_params(&mut tape, params);
    let cls = if face.has_cls {
        tape.leaf(Tensor::matrix(1, config.d_model, face.tokens.row(0).to_vec()))
    } else if bio.has_cls {
        tape.leaf(Tensor::matrix(1, config.d_model, bio.tokens.row(0).to_vec()))
    } else {
        pv.get("embed.cls")?
    };
    // Zero-row tensors don't exist; splice in real rows only.
    let face_rows = patch_rows(face);
    let bio_rows = patch_rows(bio);
    let (nf, nb) = (face.n_patch_tokens(), bio.n_patch_tokens());
    let mut parts = vec![cls];
    if nf > 0 {
        let v = tape.leaf(face_rows);
        parts.push(v);
    }
    if nb > 0 {
        let v = tape.leaf(bio_rows);
        parts.push(v);
    }
    let joint = tape.concat_rows(&parts);
    let hidden = run_blocks(
        &mut tape,
        &pv,
        joint,
        "enc",
        config.enc_layers,
        config.n_heads_enc,
        config.ln_eps,
    )?;
    Ok(EncoderOutput {
        hidden: tape.value(hidden).clone(),
        face_span: 1..1 + nf,
        bio_span: 1 + nf..1 + nf + nb,
    })
}

/// Value-level decoder input assembly (see [`assemble_on_tape`]).
pub fn assemble_decoder_input(
    encoded_visible: &Tensor,
    plan: &MaskPlan,
    modality: TokenModality,
    params: &ParamStore,
    config: &TransformerConfig,
) -> Result<Tensor> {
    if plan.n_patches != config.n_patches() {
        return Err(Error::data(format!(
            "plan covers {} patches, config expects {}",
            plan.n_patches,
            config.n_patches()
        )));
    }
    let mut tape = Tape::new();
    let pv = load_params(&mut tape, params);
    let enc = tape.leaf(encoded_visible.clone());
    let out = assemble_on_tape(&mut tape, &pv, enc, plan, modality, config)?;
    Ok(tape.value(out).clone())
}

/// Value-level decoder + reconstruction head.
pub fn decoder_forward(
    tokens: &Tensor,
    params: &ParamStore,
    config: &TransformerConfig,
) -> Result<Tensor> {
    if tokens.cols() != config.d_decoder {
        return Err(Error::config(format!(
            "decoder token width {} does not match d_decoder {}",
            tokens.cols(),
            config.d_decoder
        )));
    }
    let mut tape = Tape::new();
    let pv = load_params(&mut tape, params);
    let t = tape.leaf(tokens.clone());
    let out = decoder_on_tape(&mut tape, &pv, t, config)?;
    Ok(tape.value(out).clone())
}

/// Masked-autoencoding loss over both modalities:
/// `sum_masked ||x - x_hat||^2 / N_masked`, per modality, summed.
/// Only masked positions contribute.
pub fn mae_loss(
    recon_face: &Tensor,
    recon_bio: &Tensor,
    target_face: &PatchGrid,
    target_bio: &PatchGrid,
    plan_face: &MaskPlan,
    plan_bio: &MaskPlan,
) -> Result<f64> {
    let term = |recon: &Tensor, target: &PatchGrid, plan: &MaskPlan| -> Result<f64> {
        if plan.n_masked() == 0 {
            return Err(Error::data("MAE loss needs a non-empty mask plan"));
        }
        if recon.rows() != target.n_patches() || recon.cols() != target.patch_dim() {
            return Err(Error::data(format!(
                "reconstruction {}x{} does not match target {}x{}",
                recon.rows(),
                recon.cols(),
                target.n_patches(),
                target.patch_dim()
            )));
        }
        if plan.n_patches != target.n_patches() {
            return Err(Error::data("mask plan does not match target grid"));
        }
        let mut sum = 0.0;
        for &i in &plan.masked_indices {
            for (r, t) in recon.row(i).iter().zip(target.patches.row(i)) {
                sum += (r - t) * (r - t);
            }
        }
        Ok(sum / plan.n_masked() as f64)
    };
    Ok(term(recon_face, target_face, plan_face)? + term(recon_bio, target_bio, plan_bio)?)
}

/// `sigmoid(w . h + b)`, strictly inside (0, 1).
pub fn matching_probability(cls_hidden: &[f64], params: &ParamStore) -> Result<f64> {
    let w = params.get("match.w")?;
    let b = params.get("match.b")?;
    if w.rows() != cls_hidden.len() {
        return Err(Error::config(format!(
            "matching head expects width {}, got {}",
            w.rows(),
            cls_hidden.len()
        )));
    }
    let z: f64 = cls_hidden
        .iter()
        .enumerate()
        .map(|(i, h)| h * w.at(i, 0))
        .sum::<f64>()
        + b.data()[0];
    Ok(1.0 / (1.0 + (-z).exp()))
}

const PROB_CLAMP: f64 = 1e-7;

/// Full binary cross-entropy with the probability clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn contrastive_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let y = f64::from(y);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Literal `-y log p` variant: negative pairs contribute nothing.
pub fn contrastive_loss_strict(p: f64, y: u8) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -f64::from(y) * p.ln()
}

/// Weighted pretraining objective: `lambda_m * l_m + lambda_c * l_c`.
pub fn pretrain_loss(l_m: f64, l_c: f64, config: &TransformerConfig) -> f64 {
    config.lambda_m * l_m + config.lambda_c * l_c
}

/// Logits of the two-layer MLP head on a CLS hidden state.
pub fn classifier_forward(
    cls_hidden: &[f64],
    params: &ParamStore,
    n_classes: usize,
) -> Result<Vec<f64>> {
    let w2 = params.get("cls_head.w2")?;
    if w2.cols() != n_classes {
        return Err(Error::config(format!(
            "classifier head has {} classes, caller expects {n_classes}",
            w2.cols()
        )));
    }
    if params.get("cls_head.w1")?.rows() != cls_hidden.len() {
        return Err(Error::config("classifier width mismatch"));
    }
    let mut tape = Tape::new();
    let pv = load_params(&mut tape, params);
    let h = tape.leaf(Tensor::matrix(1, cls_hidden.len(), cls_hidden.to_vec()));
    let logits = classifier_on_tape(&mut tape, &pv, h)?;
    Ok(tape.value(logits).row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamKind;
    use crate::patch::plan_mask;
    use rand::Rng;

    fn rand_grid(config: &TransformerConfig, seed: u64) -> PatchGrid {
        let mut rng = crate::rng::derive(seed, crate::rng::Stream::Synth, 3);
        let side = config.grid_side();
        let n = config.n_patches();
        let d = config.patch_dim();
        let data = (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        PatchGrid {
            patches: Tensor::matrix(n, d, data),
            grid_h: side,
            grid_w: side,
            patch_size: config.patch_size,
        }
    }

    fn rand_tokens(n: usize, d: usize, seed: u64, modality: TokenModality) -> TokenSequence {
        let mut rng = crate::rng::derive(seed, crate::rng::Stream::Synth, 4);
        let data = (0..n * d).map(|_| rng.random::<f64>() - 0.5).collect();
        TokenSequence {
            tokens: Tensor::matrix(n, d, data),
            modality,
            has_cls: false,
            positions: (0..n).map(|i| Some((i / 4, i % 4))).collect(),
        }
    }

    #[test]
    fn embed_zero_patches_zero_params_gives_zero_tokens_except_cls() {
        let config = TransformerConfig::tiny();
        let mut params = ParamStore::init(&config, 1).unwrap();
        for name in params.names().cloned().collect::<Vec<_>>() {
            if params.kind(&name) != Some(ParamKind::Norm) && name != "embed.cls" {
                for v in params.get_mut(&name).unwrap().data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut grid = rand_grid(&config, 2);
        for v in grid.patches.data_mut() {
            *v = 0.0;
        }
        let seq = embed_tokens(&grid, TokenModality::Face, &params, &config).unwrap();
        assert!(seq.has_cls);
        assert_eq!(seq.tokens.row(0), params.get("embed.cls").unwrap().data());
        for r in 1..seq.n_tokens() {
            assert!(seq.tokens.row(r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn embed_position_difference_is_exactly_the_embedding_difference() {
        let config = TransformerConfig::tiny();
        let params = ParamStore::init(&config, 3).unwrap();
        let mut grid = rand_grid(&config, 4);
        // same content in grid cells 0 and 3
        let row0 = grid.patches.row(0).to_vec();
        grid.patches.row_mut(3).copy_from_slice(&row0);
        let seq = embed_tokens(&grid, TokenModality::Face, &params, &config).unwrap();
        let (r0, c0) = grid.position(0);
        let (r3, c3) = grid.position(3);
        let pr = params.get("face.pos_row").unwrap();
        let pc = params.get("face.pos_col").unwrap();
        for k in 0..config.d_model {
            let diff = seq.tokens.at(1 + 3, k) - seq.tokens.at(1, k);
            let expect = pr.at(r3, k) - pr.at(r0, k) + pc.at(c3, k) - pc.at(c0, k);
            assert!((diff - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_modality_difference_is_constant() {
        let config = TransformerConfig::tiny();
        let params = ParamStore::init(&config, 5).unwrap();
        let grid = rand_grid(&config, 6);
        let f = embed_tokens(&grid, TokenModality::Face, &params, &config).unwrap();
        // reuse the same projection so only the modality vector differs
        let mut params_same_proj = params.clone();
        let face_w = params.get("face.proj.w").unwrap().clone();
        let face_b = params.get("face.proj.b").unwrap().clone();
        let face_pr = params.get("face.pos_row").unwrap().clone();
        let face_pc = params.get("face.pos_col").unwrap().clone();
        *params_same_proj.get_mut("bio.proj.w").unwrap() = face_w;
        *params_same_proj.get_mut("bio.proj.b").unwrap() = face_b;
        *params_same_proj.get_mut("bio.pos_row").unwrap() = face_pr;
        *params_same_proj.get_mut("bio.pos_col").unwrap() = face_pc;
        let b = embed_tokens(&grid, TokenModality::Biosensor, &params_same_proj, &config).unwrap();
        let modal = params.get("embed.modality").unwrap();
        for r in 1..f.n_tokens() {
            for k in 0..config.d_model {
                let diff = f.tokens.at(r, k) - b.tokens.at(r, k);
                let expect = modal.at(0, k) - modal.at(1, k);
                assert!((diff - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_is_linear_in_patches_with_zero_offsets() {
        let config = TransformerConfig::tiny();
        let mut params = ParamStore::init(&config, 7).unwrap();
        for name in ["face.proj.b", "face.pos_row", "face.pos_col", "embed.modality"] {
            for v in params.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let grid = rand_grid(&config, 8);
        let mut scaled = grid.clone();
        scaled.patches.scale_in_place(2.5);
        let a = embed_tokens(&grid, TokenModality::Face, &params, &config).unwrap();
        let b = embed_tokens(&scaled, TokenModality::Face, &params, &config).unwrap();
        for r in 1..a.n_tokens() {
            for k in 0..config.d_model {
                assert!((b.tokens.at(r, k) - 2.5 * a.tokens.at(r, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_encoder_is_identity() {
        let config = TransformerConfig::tiny();
        let mut params = ParamStore::init(&config, 9).unwrap();
        for i in 0..config.enc_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                for v in params.get_mut(&format!("enc.{i}.attn.{w}")).unwrap().data_mut() {
                    *v = 0.0;
                }
            }
            for w in ["w1", "w2"] {
                for v in params.get_mut(&format!("enc.{i}.mlp.{w}")).unwrap().data_mut() {
                    *v = 0.0;
                }
            }
        }
        let face = rand_tokens(5, config.d_model, 10, TokenModality::Face);
        let bio = rand_tokens(4, config.d_model, 11, TokenModality::Biosensor);
        let out = encoder_forward(&face, &bio, &params, &config).unwrap();
        assert_eq!(out.hidden.rows(), 1 + 5 + 4);
        for r in 0..5 {
            assert_eq!(out.hidden.row(1 + r), face.tokens.row(r));
        }
        for r in 0..4 {
            assert_eq!(out.hidden.row(6 + r), bio.tokens.row(r));
        }
    }

    #[test]
    fn encoder_output_shape_and_determinism() {
        let config = TransformerConfig::tiny();
        let params = ParamStore::init(&config, 12).unwrap();
        let face = rand_tokens(50, config.d_model, 13, TokenModality::Face);
        let bio = rand_tokens(50, config.d_model, 14, TokenModality::Biosensor);
        let a = encoder_forward(&face, &bio, &params, &config).unwrap();
        assert_eq!(a.hidden.dims(), &[101, config.d_model]);
        assert_eq!(a.face_span, 1..51);
        assert_eq!(a.bio_span, 51..101);
        let b = encoder_forward(&face, &bio, &params, &config).unwrap();
        assert_eq!(a.hidden, b.hidden);
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let config = TransformerConfig::tiny();
        let params = ParamStore::init(&config, 15).unwrap();
        let face = rand_tokens(6, config.d_model, 16, TokenModality::Face);
        let bio = rand_tokens(3, config.d_model, 17, TokenModality::Biosensor);
        let base = encoder_forward(&face, &bio, &params, &config).unwrap();

        // permute the face patch tokens
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut permuted = face.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted
                .tokens
                .row_mut(dst)
                .copy_from_slice(face.tokens.row(src));
        }
        let out = encoder_forward(&permuted, &bio, &params, &config).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for k in 0..config.d_model {
                let a = base.hidden.at(1 + src, k);
                let b = out.hidden.at(1 + dst, k);
                assert!((a - b).abs() < 1e-9, "row {src}->{dst} col {k}: {a} vs {b}");
            }
        }
        // CLS agrees too
        for k in 0..config.d_model {
            assert!((base.hidden.at(0, k) - out.hidden.at(0, k)).abs() < 1e-9);
        }
    }

    #[test]
    fn assemble_masked_slots_are_mask_plus_positional() {
        let config = TransformerConfig::tiny();
        let params = ParamStore::init(&config, 18).unwrap();
        let n = config.n_patches();
        let plan = plan_mask(n, 0.75, 99).unwrap();
        let n_vis = n - plan.n_masked();
        let encoded = Tensor::matrix(
            n_vis,
            config.d_model,
            (0..n_vis * config.d_model).map(|i| i as f64 * 0.01).collect(),
        );
        let out =
            assemble_decoder_input(&encoded, &plan, TokenModality::Face, &params, &config).unwrap();
        assert_eq!(out.dims(), &[n, config.d_decoder]);
        let mask = params.get("dec.mask").unwrap();
        let pr = params.get("dec.face.pos_row").unwrap();
        let pc = params.get("dec.face.pos_col").unwrap();
        let grid_w = config.grid_side();
        for &i in &plan.masked_indices {
            for k in 0..config.d_decoder {
                let expect = mask.at(0, k) + pr.at(i / grid_w, k) + pc.at(i % grid_w, k);
                assert!((out.at(i, k) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn assemble_empty_plan_projects_everything() {
        let config = TransformerConfig::tiny();
        let params = ParamStore::init(&config, 19).unwrap();
        let n = config.n_patches();
        let plan = MaskPlan {
            masked_indices: vec![],
            n_patches: n,
            seed: 0,
        };
        let encoded = Tensor::matrix(n, config.d_model, vec![0.1; n * config.d_model]);
        let out =
            assemble_decoder_input(&encoded, &plan, TokenModality::Biosensor, &params, &config)
                .unwrap();
        assert_eq!(out.rows(), n);
        // no slot equals MASK + positional: everything is a projection
        let mask = params.get("dec.mask").unwrap();
        let pr = params.get("dec.bio.pos_row").unwrap();
        let pc = params.get("dec.bio.pos_col").unwrap();
        let grid_w = config.grid_side();
        for i in 0..n {
            let is_mask_slot = (0..config.d_decoder).all(|k| {
                let expect = mask.at(0, k) + pr.at(i / grid_w, k) + pc.at(i % grid_w, k);
                (out.at(i, k) - expect).abs() < 1e-12
            });
            assert!(!is_mask_slot, "slot {i} looks like a MASK slot");
        }
    }

    #[test]
    fn assemble_rejects_inconsistent_plan() {
        let config = TransformerConfig::tiny();
        let params = ParamStore::init(&config, 20).unwrap();
        let plan = plan_mask(config.n_patches(), 0.5, 1).unwrap();
        let wrong = Tensor::matrix(1, config.d_model, vec![0.0; config.d_model]);
        assert!(matches!(
            assemble_decoder_input(&wrong, &plan, TokenModality::Face, &params, &config)
                .unwrap_err(),
            Error::Data(_)
        ));
    }

    #[test]
    fn zeroed_decoder_reconstructs_zeros() {
        let config = TransformerConfig::tiny();
        let mut params = ParamStore::init(&config, 21).unwrap();
        for v in params.get_mut("dec.head.w").unwrap().data_mut() {
            *v = 0.0;
        }
        let tokens = Tensor::matrix(
            config.n_patches(),
            config.d_decoder,
            vec![0.3; config.n_patches() * config.d_decoder],
        );
        let out = decoder_forward(&tokens, &params, &config).unwrap();
        assert_eq!(out.dims(), &[config.n_patches(), config.patch_dim()]);
        // head bias is zero-initialized, head weights zeroed above
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_distinguishes_positions_of_identical_mask_tokens() {
        let config = TransformerConfig::tiny();
        let params = ParamStore::init(&config, 22).unwrap();
        let n = config.n_patches();
        // one visible slot, everything else is the same MASK vector
        let plan = MaskPlan {
            masked_indices: (1..n).collect(),
            n_patches: n,
            seed: 0,
        };
        let encoded = Tensor::matrix(1, config.d_model, vec![0.2; config.d_model]);
        let assembled =
            assemble_decoder_input(&encoded, &plan, TokenModality::Face, &params, &config).unwrap();
        let recon = decoder_forward(&assembled, &params, &config).unwrap();
        // two different masked positions decode differently thanks to the
        // decoder positional embeddings
        let a = recon.row(1);
        let b = recon.row(2);
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn mae_loss_hand_case_and_locality() {
        let config = TransformerConfig::tiny();
        let n = config.n_patches();
        let d = config.patch_dim();
        let zeros = PatchGrid {
            patches: Tensor::zeros(&[n, d]),
            grid_h: config.grid_side(),
            grid_w: config.grid_side(),
            patch_size: config.patch_size,
        };
        // bio: two masked patches with squared-error sums 2 and 4
        let mut recon_bio = Tensor::zeros(&[n, d]);
        recon_bio.set(0, 0, 2f64.sqrt());
        recon_bio.set(1, 0, 2.0);
        let plan_bio = MaskPlan {
            masked_indices: vec![0, 1],
            n_patches: n,
            seed: 0,
        };
        // face: perfect on its single masked patch
        let recon_face = Tensor::zeros(&[n, d]);
        let plan_face = MaskPlan {
            masked_indices: vec![2],
            n_patches: n,
            seed: 0,
        };
        let loss = mae_loss(&recon_face, &recon_bio, &zeros, &zeros, &plan_face, &plan_bio).unwrap();
        assert!((loss - 3.0).abs() < 1e-12, "{loss}");

        // perturb unmasked entries only: loss unchanged exactly
        let mut recon_bio2 = recon_bio.clone();
        for i in 2..n {
            recon_bio2.set(i, 3, 123.456);
        }
        let mut recon_face2 = recon_face.clone();
        recon_face2.set(0, 0, -55.0);
        let loss2 =
            mae_loss(&recon_face2, &recon_bio2, &zeros, &zeros, &plan_face, &plan_bio).unwrap();
        assert_eq!(loss, loss2);

        // perfect reconstruction -> 0
        let zero_loss = mae_loss(
            &Tensor::zeros(&[n, d]),
            &Tensor::zeros(&[n, d]),
            &zeros,
            &zeros,
            &plan_face,
            &plan_bio,
        )
        .unwrap();
        assert_eq!(zero_loss, 0.0);

        // empty plan is a data error (division by zero in the objective)
        let empty = MaskPlan {
            masked_indices: vec![],
            n_patches: n,
            seed: 0,
        };
        assert!(matches!(
            mae_loss(&recon_face, &recon_bio, &zeros, &zeros, &empty, &plan_bio).unwrap_err(),
            Error::Data(_)
        ));
    }

    #[test]
    fn matching_probability_cases() {
        let config = TransformerConfig::tiny();
        let mut params = ParamStore::init(&config, 23).unwrap();
        let h = vec![0.5; config.d_model];
        for v in params.get_mut("match.w").unwrap().data_mut() {
            *v = 0.0;
        }
        let p = matching_probability(&h, &params).unwrap();
        assert!((p - 0.5).abs() < 1e-15);

        params.get_mut("match.b").unwrap().data_mut()[0] = 3f64.ln();
        let p = matching_probability(&h, &params).unwrap();
        assert!((p - 0.75).abs() < 1e-12);

        params.get_mut("match.b").unwrap().data_mut()[0] = 20.0;
        let p = matching_probability(&h, &params).unwrap();
        assert!(p > 0.999999 && p < 1.0);
    }

    #[test]
    fn contrastive_loss_cases() {
        assert!(contrastive_loss(1.0 - 1e-9, 1) < 1e-6);
        assert!((contrastive_loss(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((contrastive_loss(0.5, 0) - std::f64::consts::LN_2).abs() < 1e-12);
        // strict variant zeroes out negatives
        assert_eq!(contrastive_loss_strict(0.1, 0), 0.0);
        assert!((contrastive_loss_strict(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn pretrain_loss_weights() {
        let config = TransformerConfig::paper();
        assert!((pretrain_loss(1.0, 2.0, &config) - 2.4).abs() < 1e-15);
        assert_eq!(pretrain_loss(0.0, 0.0, &config), 0.0);
        let mut ablated = config;
        ablated.lambda_m = 0.0;
        assert_eq!(pretrain_loss(5.0, 2.0, &ablated), 2.0);
    }

    #[test]
    fn classifier_shapes_and_shift_invariance() {
        let config = TransformerConfig::tiny().with_classes(3);
        let mut params = ParamStore::init(&config, 24).unwrap();
        let h: Vec<f64> = (0..config.d_model).map(|i| i as f64 * 0.1).collect();
        let logits = classifier_forward(&h, &params, 3).unwrap();
        assert_eq!(logits.len(), 3);

        // zero weights -> all-zero logits -> uniform softmax
        for name in ["cls_head.w1", "cls_head.b1", "cls_head.w2", "cls_head.b2"] {
            for v in params.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let logits = classifier_forward(&h, &params, 3).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));

        // softmax cross-entropy is invariant to adding a constant
        let ce = |logits: &[f64], label: usize| {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            lse - logits[label]
        };
        let raw = vec![0.3, -1.2, 0.9];
        let shifted: Vec<f64> = raw.iter().map(|v| v + 7.7).collect();
        assert!((ce(&raw, 2) - ce(&shifted, 2)).abs() < 1e-9);
    }
}
