//! Biosignal emotion-recognition pipeline: ECG/PPG preprocessing, three
//! 1D-to-2D representations, and a unified biosensor-vision transformer
//! pretrained with masked autoencoding plus contrastive matching, then
//! fine-tuned for arousal/valence classification.
//!
//! Everything is deterministic given explicit seeds, runs in double
//! precision, and is sized so the whole stack can be exercised on
//! synthetic data on one desktop core.

pub mod dataset;
pub mod error;
pub mod fft;
pub mod filters;
pub mod graph;
pub mod image;
pub mod model;
pub mod patch;
pub mod rng;
pub mod signal;
pub mod tensor;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
pub use filters::{apply_filter, FilterKind, FilterOutput, FilterSpec};
pub use image::{render_image, render_to, ImageTensor};
pub use model::{
    classify_pair, compute_gradients, compute_loss, pair_matching_probability, Batch,
    FinetuneExample, GradStore, LossParts, ParamStore, PretrainExample, TransformerConfig,
};
pub use patch::{
    apply_mask, patchify, patchify_raw, plan_mask, unpatchify, MaskPlan, PatchGrid,
    TokenModality, TokenSequence,
};
pub use signal::{
    detect_peaks, detrend_polynomial, load_signal, normalize_personal, segment_fixed,
    segment_pulses, Modality, NormalizationParams, Segment, Signal, SignalFormat,
};
pub use tensor::Tensor;
pub use transform::{
    cwt_scalogram, spwvd_map, toeplitz_map, CwtParams, MapKind, SmoothingWindows, TimeFreqMap,
};
