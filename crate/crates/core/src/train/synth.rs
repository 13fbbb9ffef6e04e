//! Synthetic paired face/biosensor data with label-dependent structure
//! in both modalities, standing in for the access-restricted corpora.
//!
//! Biosensor traces are pulse trains whose rate tracks arousal and whose
//! amplitude/width track valence. Face images are sinusoidal gratings
//! whose orientation tracks valence and contrast tracks arousal.
//!
//! Aligned pairs share a latent code drawn per example: the code places
//! a bright vertical stripe in the face image and a sharp burst at the
//! same relative position in the biosensor trace (a vertical ridge in
//! its time-frequency image). Matching is then a learnable alignment
//! check, and mismatched pairs (built later by batch construction) have
//! independent codes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::ImageTensor;
use crate::rng::{self, Stream};
use crate::signal::Segment;

/// Label scheme: 3 classes per axis (calm/medium/activated style) or the
/// binary high/low split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassScheme {
    MahnobThreeByThree,
    DeapBinary,
}

impl ClassScheme {
    pub fn n_classes(&self) -> usize {
        match self {
            ClassScheme::MahnobThreeByThree => 3,
            ClassScheme::DeapBinary => 2,
        }
    }
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub per_subject: usize,
    pub scheme: ClassScheme,
    /// Face image side; also the render target for biosensor maps.
    pub image_size: usize,
    pub bio_fs: f64,
    pub bio_duration_s: f64,
    /// Noise sigma relative to unit pulse amplitude.
    pub noise: f64,
    /// Pulse rate at the lowest/highest arousal class.
    pub low_rate_hz: f64,
    pub high_rate_hz: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 4,
            per_subject: 8,
            scheme: ClassScheme::DeapBinary,
            image_size: 32,
            bio_fs: 128.0,
            bio_duration_s: 2.5,
            noise: 0.05,
            low_rate_hz: 0.9,
            high_rate_hz: 1.4,
        }
    }
}

impl SynthSpec {
    /// Pulse rate for an arousal class under this spec.
    pub fn pulse_rate_for(&self, arousal: usize) -> f64 {
        let c = self.scheme.n_classes();
        let t = if c > 1 {
            arousal as f64 / (c - 1) as f64
        } else {
            0.0
        };
        self.low_rate_hz + (self.high_rate_hz - self.low_rate_hz) * t
    }
}

/// One generated example: an aligned face/biosensor pair with labels.
#[derive(Debug, Clone)]
pub struct SynthExample {
    pub subject_id: String,
    pub index: usize,
    pub face: ImageTensor,
    pub bio: Segment,
    pub valence: usize,
    pub arousal: usize,
}

/// Deterministic dataset generation: same (spec, seed) always produces
/// bitwise-identical examples.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Vec<SynthExample>> {
    let c = spec.scheme.n_classes();
    let mut out = Vec::with_capacity(spec.n_subjects * spec.per_subject);
    for subject in 0..spec.n_subjects {
        let subject_id = format!("subj{subject:03}");
        let mut subject_rng = rng::derive(seed, Stream::Synth, subject as u64);
        // mild subject-specific nuisance variation
        let bio_gain = 0.9 + 0.2 * subject_rng.random::<f64>();
        let brightness = 0.05 * (subject_rng.random::<f64>() - 0.5);

        // balanced labels, order shuffled per subject
        let mut label_pairs: Vec<(usize, usize)> = (0..spec.per_subject)
            .map(|i| (i % c, (i / c) % c))
            .collect();
        rng::shuffle(&mut subject_rng, &mut label_pairs);

        for (index, &(valence, arousal)) in label_pairs.iter().enumerate() {
            let mut ex_rng = rng::derive(
                seed,
                Stream::Synth,
                1_000_000 + (subject * spec.per_subject + index) as u64,
            );
            let phase = ex_rng.random::<f64>() * std::f64::consts::TAU;
            // shared latent code: relative position of the cross-modal marker
            let code = 0.15 + 0.7 * ex_rng.random::<f64>();
            let bio = gen_bio(spec, valence, arousal, phase, code, bio_gain, &mut ex_rng)?;
            let face = gen_face(spec, valence, arousal, phase, code, brightness, &mut ex_rng)?;
            out.push(SynthExample {
                subject_id: subject_id.clone(),
                index,
                face,
                bio,
                valence,
                arousal,
            });
        }
    }
    Ok(out)
}

fn class_frac(class: usize, n_classes: usize) -> f64 {
    if n_classes > 1 {
        class as f64 / (n_classes - 1) as f64
    } else {
        0.0
    }
}

fn gen_bio(
    spec: &SynthSpec,
    valence: usize,
    arousal: usize,
    phase: f64,
    code: f64,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<Segment> {
    let c = spec.scheme.n_classes();
    let rate = spec.pulse_rate_for(arousal);
    let amp = gain * (0.6 + 0.8 * class_frac(valence, c));
    let width = 0.05 + 0.04 * class_frac(valence, c);

    let mut n = (spec.bio_duration_s * spec.bio_fs).floor() as usize;
    if n % 2 == 1 {
        n -= 1;
    }
    let mut samples = vec![0.0f64; n];
    // pulse centers shifted by the shared latent phase
    let period = 1.0 / rate;
    let mut center = (phase / std::f64::consts::TAU) * period;
    while center < spec.bio_duration_s + 3.0 * width {
        for (i, s) in samples.iter_mut().enumerate() {
            let dt = i as f64 / spec.bio_fs - center;
            *s += amp * (-0.5 * (dt / width).powi(2)).exp();
        }
        center += period;
    }
    // cross-modal marker: a sharp burst at the latent-code position,
    // a vertical broadband ridge in the time-frequency image
    let marker_t = code * spec.bio_duration_s;
    for (i, s) in samples.iter_mut().enumerate() {
        let dt = i as f64 / spec.bio_fs - marker_t;
        *s += 2.0 * gain * (-0.5 * (dt / 0.012).powi(2)).exp();
    }
    for s in &mut samples {
        *s += spec.noise * rng::normal(rng);
    }
    Segment::new(samples, spec.bio_fs, 0, n as f64 / spec.bio_fs)
}

fn gen_face(
    spec: &SynthSpec,
    valence: usize,
    arousal: usize,
    phase: f64,
    code: f64,
    brightness: f64,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    let c = spec.scheme.n_classes();
    let theta = std::f64::consts::FRAC_PI_2 * class_frac(valence, c);
    let contrast = 0.4 + 0.6 * class_frac(arousal, c);
    let cycles = 3.0;
    let size = spec.image_size;
    let marker_x = code * size as f64;
    let mut img = ImageTensor::zeros(size, size);
    let (sin_t, cos_t) = theta.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 * cos_t + y as f64 * sin_t) / size as f64;
            let wave = (std::f64::consts::TAU * cycles * u + phase).sin();
            // the marker stripe shares its position with the bio burst
            let stripe = (-0.5 * ((x as f64 - marker_x) / 1.2).powi(2)).exp();
            let noise = spec.noise * 0.5 * rng::normal(rng);
            let v = (0.5 + brightness + 0.3 * contrast * wave + 0.45 * stripe + noise)
                .clamp(0.0, 1.0);
            for ch in 0..3 {
                img.set(y, x, ch, v);
            }
        }
    }
    Ok(img)
}
