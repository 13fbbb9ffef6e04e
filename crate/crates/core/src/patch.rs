//! Image-to-token plumbing: square patches, per-patch standardization,
//! and the random masking plan used by the masked-autoencoding objective.

use crate::error::{Error, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Which embedding table a token sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenModality {
    Face,
    Biosensor,
}

impl TokenModality {
    pub fn index(&self) -> usize {
        match self {
            TokenModality::Face => 0,
            TokenModality::Biosensor => 1,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            TokenModality::Face => "face",
            TokenModality::Biosensor => "bio",
        }
    }
}

/// Flattened, per-patch standardized pixels in row-major grid order.
/// These exact values double as the reconstruction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// `[grid_h * grid_w, patch_size^2 * 3]`
    pub patches: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.cols()
    }

    /// Grid coordinates of patch `i` (row-major).
    pub fn position(&self, i: usize) -> (usize, usize) {
        (i / self.grid_w, i % self.grid_w)
    }
}

const VARIANCE_FLOOR: f64 = 1e-6;

/// Cut an image into square patches and standardize each one to zero
/// mean / unit variance (variance floor 1e-6; constant patches become
/// all-zero rows).
pub fn patchify(image: &ImageTensor, patch_size: usize) -> Result<PatchGrid> {
    let mut raw = patchify_raw(image, patch_size)?;
    let dim = raw.patches.cols();
    for r in 0..raw.patches.rows() {
        let row = raw.patches.row_mut(r);
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let std = var.max(VARIANCE_FLOOR).sqrt();
        for v in row {
            *v = (*v - mean) / std;
        }
    }
    Ok(raw)
}

/// Same cut without standardization; `unpatchify` inverts it exactly.
pub fn patchify_raw(image: &ImageTensor, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0 {
        return Err(Error::data(format!(
            "image {}x{} is not divisible into {patch_size}x{patch_size} patches",
            image.height, image.width
        )));
    }
    let grid_h = image.height / patch_size;
    let grid_w = image.width / patch_size;
    let dim = patch_size * patch_size * CHANNELS;
    let mut patches = Tensor::zeros(&[grid_h * grid_w, dim]);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let row = patches.row_mut(gy * grid_w + gx);
            let mut k = 0;
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for c in 0..CHANNELS {
                        row[k] = image.at(gy * patch_size + py, gx * patch_size + px, c);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        patches,
        grid_h,
        grid_w,
        patch_size,
    })
}

/// Reassemble a raw (unstandardized) patch grid into the image it came from.
pub fn unpatchify(grid: &PatchGrid) -> Result<ImageTensor> {
    let ps = grid.patch_size;
    let mut img = ImageTensor::zeros(grid.grid_h * ps, grid.grid_w * ps);
    for i in 0..grid.n_patches() {
        let (gy, gx) = grid.position(i);
        let row = grid.patches.row(i);
        let mut k = 0;
        for py in 0..ps {
            for px in 0..ps {
                for c in 0..CHANNELS {
                    img.set(gy * ps + py, gx * ps + px, c, row[k]);
                    k += 1;
                }
            }
        }
    }
    Ok(img)
}

/// Embedded tokens with their grid coordinates. Token 0 is the [CLS]
/// slot when `has_cls` is set; its position is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `[n_tokens, d_model]`
    pub tokens: Tensor,
    pub modality: TokenModality,
    pub has_cls: bool,
    pub positions: Vec<Option<(usize, usize)>>,
}

impl TokenSequence {
    pub fn n_tokens(&self) -> usize {
        self.tokens.rows()
    }

    /// Patch tokens only (excludes the CLS slot).
    pub fn n_patch_tokens(&self) -> usize {
        self.n_tokens() - usize::from(self.has_cls)
    }
}

/// Which patch indices are hidden from the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted, unique patch indices in `0..n_patches`. CLS is not a patch
    /// and can never appear here.
    pub masked_indices: Vec<usize>,
    pub n_patches: usize,
    pub seed: u64,
}

impl MaskPlan {
    pub fn n_masked(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        let masked: std::collections::HashSet<usize> =
            self.masked_indices.iter().copied().collect();
        (0..self.n_patches).filter(|i| !masked.contains(i)).collect()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked_indices.binary_search(&i).is_ok()
    }
}

/// Uniform sample without replacement of `round(ratio * n_patches)`
/// indices; deterministic per (n, ratio, seed).
pub fn plan_mask(n_patches: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!(
            "mask ratio must be in (0, 1), got {ratio}"
        )));
    }
    let n_masked = (ratio * n_patches as f64).round() as usize;
    let mut rng = rng::derive(seed, Stream::Mask, 0);
    let mut masked = rng::sample_without_replacement(&mut rng, n_patches, n_masked);
    masked.sort_unstable();
    Ok(MaskPlan {
        masked_indices: masked,
        n_patches,
        seed,
    })
}

/// Drop masked patch tokens, keeping the CLS slot and original relative
/// order. Positions ride along so the decoder can restore the layout.
pub fn apply_mask(tokens: &TokenSequence, plan: &MaskPlan) -> Result<TokenSequence> {
    let n_patches = tokens.n_patch_tokens();
    if plan.n_patches != n_patches {
        return Err(Error::data(format!(
            "mask plan covers {} patches but sequence has {n_patches}",
            plan.n_patches
        )));
    }
    if plan.masked_indices.iter().any(|&i| i >= n_patches) {
        return Err(Error::data("mask plan index out of range"));
    }
    let offset = usize::from(tokens.has_cls);
    let d = tokens.tokens.cols();
    let mut keep_rows: Vec<usize> = Vec::with_capacity(tokens.n_tokens() - plan.n_masked());
    if tokens.has_cls {
        keep_rows.push(0);
    }
    keep_rows.extend(
        (0..n_patches)
            .filter(|i| !plan.is_masked(*i))
            .map(|i| i + offset),
    );
    let mut out = Tensor::zeros(&[keep_rows.len(), d]);
    let mut positions = Vec::with_capacity(keep_rows.len());
    for (r, &src) in keep_rows.iter().enumerate() {
        out.row_mut(r).copy_from_slice(tokens.tokens.row(src));
        positions.push(tokens.positions[src]);
    }
    Ok(TokenSequence {
        tokens: out,
        modality: tokens.modality,
        has_cls: tokens.has_cls,
        positions,
    })
}
