//! Transformer hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::CHANNELS;

/// Architecture and objective weights for the unified encoder/decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_decoder: usize,
    pub n_heads_enc: usize,
    pub n_heads_dec: usize,
    pub mlp_ratio: f64,
    pub image_size: usize,
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub lambda_m: f64,
    pub lambda_c: f64,
    pub ln_eps: f64,
    /// Set when a classification head is attached for fine-tuning.
    pub n_classes: Option<usize>,
    /// Literal `-y log p` contrastive term instead of full binary
    /// cross-entropy (comparison mode; negatives then carry no signal).
    pub strict_matching_loss: bool,
}

impl TransformerConfig {
    /// Published model size: 12-layer/768 encoder, 8-layer/512 decoder,
    /// 224x224 images in 16x16 patches, 75% masking, loss weights 0.4/1.
    pub fn paper() -> Self {
        TransformerConfig {
            d_model: 768,
            enc_layers: 12,
            dec_layers: 8,
            d_decoder: 512,
            n_heads_enc: 12,
            n_heads_dec: 8,
            mlp_ratio: 4.0,
            image_size: 224,
            patch_size: 16,
            mask_ratio: 0.75,
            lambda_m: 0.4,
            lambda_c: 1.0,
            ln_eps: 1e-6,
            n_classes: None,
            strict_matching_loss: false,
        }
    }

    /// Desk-scale configuration every CI test trains: 32x32 images in
    /// 8x8 patches (16 per modality), 2+1 layers at width 64.
    pub fn desk() -> Self {
        TransformerConfig {
            d_model: 64,
            enc_layers: 2,
            dec_layers: 1,
            d_decoder: 64,
            n_heads_enc: 4,
            n_heads_dec: 4,
            image_size: 32,
            patch_size: 8,
            ..Self::paper()
        }
    }

    /// Smallest config with every architectural feature present; finite
    /// differences over all parameters stay affordable here.
    pub fn tiny() -> Self {
        TransformerConfig {
            d_model: 8,
            enc_layers: 2,
            dec_layers: 1,
            d_decoder: 8,
            n_heads_enc: 2,
            n_heads_dec: 2,
            image_size: 16,
            patch_size: 8,
            ..Self::paper()
        }
    }

    pub fn with_classes(mut self, n_classes: usize) -> Self {
        self.n_classes = Some(n_classes);
        self
    }

    /// Patches per grid side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patches per modality image.
    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Flattened patch length (`patch_size^2 * 3`).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn mlp_hidden(&self, width: usize) -> usize {
        ((width as f64) * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_decoder", self.d_decoder),
            ("n_heads_enc", self.n_heads_enc),
            ("n_heads_dec", self.n_heads_dec),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads_enc != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads_enc {}",
                self.d_model, self.n_heads_enc
            )));
        }
        if self.d_decoder % self.n_heads_dec != 0 {
            return Err(Error::config(format!(
                "d_decoder {} not divisible by n_heads_dec {}",
                self.d_decoder, self.n_heads_dec
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(format!(
                "mask_ratio must be in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if self.lambda_m < 0.0 || self.lambda_c < 0.0 {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps must be positive"));
        }
        if self.n_classes == Some(0) || self.n_classes == Some(1) {
            return Err(Error::config("classifier needs at least 2 classes"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        TransformerConfig::paper().validate().unwrap();
        TransformerConfig::desk().validate().unwrap();
        TransformerConfig::tiny().validate().unwrap();
    }

    #[test]
    fn paper_dimensions() {
        let c = TransformerConfig::paper();
        assert_eq!(c.n_patches(), 196);
        assert_eq!(c.patch_dim(), 768);
        assert_eq!(c.grid_side(), 14);
        assert_eq!(c.mlp_hidden(c.d_model), 3072);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = TransformerConfig::desk();
        c.n_heads_enc = 5;
        assert!(c.validate().is_err());
        let mut c = TransformerConfig::desk();
        c.mask_ratio = 1.5;
        assert!(c.validate().is_err());
        let mut c = TransformerConfig::desk();
        c.n_classes = Some(1);
        assert!(c.validate().is_err());
    }
}
