//! IIR filtering: biquad notch, Butterworth high/lowpass, and a
//! moving-average "smooth and subtract" for motion artifacts.
//!
//! Notch/highpass/lowpass run forward-backward over a reflected pad so the
//! result is zero-phase and peak positions survive for pulse segmentation.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::signal::Signal;

/// Filter families used by the preprocessing recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Notch,
    Highpass,
    Lowpass,
    SmoothSubtract,
}

/// One preprocessing step.
///
/// `cutoff_hz` is the notch center / corner frequency; for
/// `SmoothSubtract` it is the smoothing corner `1 / window_seconds`.
/// `q_or_order` is the notch Q, the Butterworth order (even), and is
/// unused for `SmoothSubtract`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub cutoff_hz: f64,
    pub q_or_order: f64,
}

impl FilterSpec {
    pub const DEFAULT_NOTCH_Q: f64 = 30.0;
    pub const DEFAULT_BUTTERWORTH_ORDER: f64 = 4.0;
    pub const DEFAULT_SMOOTH_WINDOW_S: f64 = 0.25;

    pub fn new(kind: FilterKind, cutoff_hz: f64, q_or_order: f64) -> Result<Self> {
        if !(cutoff_hz > 0.0) || !cutoff_hz.is_finite() {
            return Err(Error::config(format!(
                "filter cutoff must be positive, got {cutoff_hz}"
            )));
        }
        if !(q_or_order > 0.0) {
            return Err(Error::config("filter Q/order must be positive"));
        }
        if matches!(kind, FilterKind::Highpass | FilterKind::Lowpass) {
            let order = q_or_order;
            if order.fract() != 0.0 || (order as usize) % 2 != 0 {
                return Err(Error::config(format!(
                    "Butterworth order must be a positive even integer, got {order}"
                )));
            }
        }
        Ok(FilterSpec {
            kind,
            cutoff_hz,
            q_or_order,
        })
    }

    pub fn notch(center_hz: f64, q: f64) -> Result<Self> {
        Self::new(FilterKind::Notch, center_hz, q)
    }

    pub fn highpass(corner_hz: f64) -> Result<Self> {
        Self::new(FilterKind::Highpass, corner_hz, Self::DEFAULT_BUTTERWORTH_ORDER)
    }

    pub fn lowpass(corner_hz: f64) -> Result<Self> {
        Self::new(FilterKind::Lowpass, corner_hz, Self::DEFAULT_BUTTERWORTH_ORDER)
    }

    pub fn smooth_subtract(window_s: f64) -> Result<Self> {
        if !(window_s > 0.0) {
            return Err(Error::config("smoothing window must be positive"));
        }
        Self::new(FilterKind::SmoothSubtract, 1.0 / window_s, 1.0)
    }
}

/// Result of [`apply_filter`]: either the filtered signal, or the input
/// passed through untouched because the cutoff sits at or above Nyquist
/// (the published recipe's 200 Hz lowpass at fs = 256 does exactly this).
#[derive(Debug, Clone)]
pub enum FilterOutput {
    Applied(Signal),
    Skipped { signal: Signal, warning: String },
}

impl FilterOutput {
    pub fn into_signal(self) -> Signal {
        match self {
            FilterOutput::Applied(s) => s,
            FilterOutput::Skipped { signal, .. } => signal,
        }
    }

    pub fn signal(&self) -> &Signal {
        match self {
            FilterOutput::Applied(s) => s,
            FilterOutput::Skipped { signal, .. } => signal,
        }
    }

    pub fn warning(&self) -> Option<&str> {
        match self {
            FilterOutput::Applied(_) => None,
            FilterOutput::Skipped { warning, .. } => Some(warning),
        }
    }
}

/// Apply one filter step. Length and sample rate are always preserved.
pub fn apply_filter(signal: &Signal, spec: &FilterSpec) -> Result<FilterOutput> {
    let fs = signal.sample_rate_hz;
    match spec.kind {
        FilterKind::SmoothSubtract => {
            let window_s = 1.0 / spec.cutoff_hz;
            let out = smooth_subtract(&signal.samples, fs, window_s);
            Ok(FilterOutput::Applied(signal.with_samples(out)))
        }
        FilterKind::Notch | FilterKind::Highpass | FilterKind::Lowpass => {
            let nyquist = fs / 2.0;
            if spec.cutoff_hz >= nyquist {
                return Ok(FilterOutput::Skipped {
                    signal: signal.clone(),
                    warning: format!(
                        "{:?} cutoff {} Hz is at or above Nyquist {} Hz; signal passed through unchanged",
                        spec.kind, spec.cutoff_hz, nyquist
                    ),
                });
            }
            let sections = match spec.kind {
                FilterKind::Notch => vec![Biquad::notch(spec.cutoff_hz, spec.q_or_order, fs)],
                FilterKind::Highpass => butterworth(spec.cutoff_hz, spec.q_or_order as usize, fs, true),
                FilterKind::Lowpass => butterworth(spec.cutoff_hz, spec.q_or_order as usize, fs, false),
                FilterKind::SmoothSubtract => unreachable!(),
            };
            let pad = pad_len(signal.len(), spec, fs);
            let out = filtfilt(&signal.samples, &sections, pad);
            Ok(FilterOutput::Applied(signal.with_samples(out)))
        }
    }
}

/// Subtract a centered moving average (edges use the truncated window).
fn smooth_subtract(x: &[f64], fs: f64, window_s: f64) -> Vec<f64> {
    let mut w = (window_s * fs).round() as usize;
    if w % 2 == 0 {
        w += 1;
    }
    let half = (w / 2) as i64;
    let n = x.len() as i64;
    (0..n)
        .map(|i| {
            let lo = (i - half).max(0) as usize;
            let hi = (i + half).min(n - 1) as usize;
            let mean = x[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            x[i as usize] - mean
        })
        .collect()
}

/// Reflection pad long enough for the slowest transient to die out.
fn pad_len(n: usize, spec: &FilterSpec, fs: f64) -> usize {
    let settle_s = match spec.kind {
        // notch ring time ~ Q / (pi f0)
        FilterKind::Notch => 5.0 * spec.q_or_order / (PI * spec.cutoff_hz),
        _ => 3.0 / spec.cutoff_hz,
    };
    ((settle_s * fs).ceil() as usize).min(n.saturating_sub(1)).max(2.min(n.saturating_sub(1)))
}

/// Zero-phase filtering: odd-reflect both ends, run the cascade forward,
/// then backward, then strip the pad.
fn filtfilt(x: &[f64], sections: &[Biquad], pad: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for k in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[k.min(n - 1)]);
    }
    ext.extend_from_slice(x);
    for k in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - k.min(n - 1)]);
    }

    for s in sections {
        s.run_in_place(&mut ext);
    }
    ext.reverse();
    for s in sections {
        s.run_in_place(&mut ext);
    }
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Second-order IIR section, normalized so a0 = 1.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    fn notch(f0: f64, q: f64, fs: f64) -> Biquad {
        let w0 = 2.0 * PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let cosw = w0.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b0: 1.0 / a0,
            b1: -2.0 * cosw / a0,
            b2: 1.0 / a0,
            a1: -2.0 * cosw / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    fn lowpass(fc: f64, q: f64, fs: f64) -> Biquad {
        let w0 = 2.0 * PI * fc / fs;
        let alpha = w0.sin() / (2.0 * q);
        let cosw = w0.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 - cosw) / 2.0 / a0,
            b1: (1.0 - cosw) / a0,
            b2: (1.0 - cosw) / 2.0 / a0,
            a1: -2.0 * cosw / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    fn highpass(fc: f64, q: f64, fs: f64) -> Biquad {
        let w0 = 2.0 * PI * fc / fs;
        let alpha = w0.sin() / (2.0 * q);
        let cosw = w0.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 + cosw) / 2.0 / a0,
            b1: -(1.0 + cosw) / a0,
            b2: (1.0 + cosw) / 2.0 / a0,
            a1: -2.0 * cosw / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    // Direct form II transposed.
    fn run_in_place(&self, x: &mut [f64]) {
        let mut z1 = 0.0;
        let mut z2 = 0.0;
        for v in x.iter_mut() {
            let input = *v;
            let out = self.b0 * input + z1;
            z1 = self.b1 * input - self.a1 * out + z2;
            z2 = self.b2 * input - self.a2 * out;
            *v = out;
        }
    }
}

/// Even-order Butterworth as cascaded biquads. Section Q values come from
/// the analog pole angles: Q_k = 1 / (2 cos(pi (2k+1) / (2N))).
fn butterworth(fc: f64, order: usize, fs: f64, highpass: bool) -> Vec<Biquad> {
    assert!(order >= 2 && order % 2 == 0);
    (0..order / 2)
        .map(|k| {
            let theta = PI * (2 * k + 1) as f64 / (2 * order) as f64;
            let q = 1.0 / (2.0 * theta.cos());
            if highpass {
                Biquad::highpass(fc, q, fs)
            } else {
                Biquad::lowpass(fc, q, fs)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Modality;
    use std::f64::consts::TAU;

    fn make(samples: Vec<f64>, fs: f64) -> Signal {
        Signal::new(samples, fs, "t", Modality::Ecg).unwrap()
    }

    /// Magnitude of DFT bin k, via direct summation (test oracle).
    fn dft_bin_mag(x: &[f64], k: usize) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in x.iter().enumerate() {
            let ang = -TAU * k as f64 * i as f64 / n;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn highpass_kills_dc() {
        let fs = 256.0;
        let s = make(vec![1.0; (10.0 * fs) as usize], fs);
        let out = apply_filter(&s, &FilterSpec::highpass(0.4).unwrap())
            .unwrap()
            .into_signal();
        assert_eq!(out.len(), s.len());
        let settled = &out.samples[(fs as usize)..out.len() - fs as usize];
        let max = settled.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 0.01, "max after settling {max}");

        // DFT oracle: DC bin attenuated by more than 40 dB.
        let in_dc = dft_bin_mag(&s.samples, 0);
        let out_dc = dft_bin_mag(&out.samples, 0);
        assert!(out_dc < in_dc * 10f64.powf(-40.0 / 20.0), "{out_dc} vs {in_dc}");
    }

    #[test]
    fn notch_kills_60hz_tone() {
        let fs = 256.0;
        let n = (10.0 * fs) as usize;
        let samples: Vec<f64> = (0..n).map(|i| (TAU * 60.0 * i as f64 / fs).sin()).collect();
        let s = make(samples, fs);
        let out = apply_filter(&s, &FilterSpec::notch(60.0, 30.0).unwrap())
            .unwrap()
            .into_signal();
        let lo = n / 10;
        let hi = n - n / 10;
        let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        let out_rms = rms(&out.samples[lo..hi]);
        let in_rms = rms(&s.samples[lo..hi]);
        assert!(out_rms < 0.05 * in_rms, "residual rms {out_rms} of {in_rms}");

        // DFT oracle on the 60 Hz bin (10 s window -> bin 600).
        let in_bin = dft_bin_mag(&s.samples, 600);
        let out_bin = dft_bin_mag(&out.samples, 600);
        assert!(out_bin < 0.05 * in_bin);
    }

    #[test]
    fn lowpass_above_nyquist_is_skipped() {
        let s = make(vec![0.5; 256], 256.0);
        let out = apply_filter(&s, &FilterSpec::lowpass(200.0).unwrap()).unwrap();
        assert!(out.warning().is_some());
        assert_eq!(out.signal().samples, s.samples);
    }

    #[test]
    fn lowpass_passes_slow_and_blocks_fast() {
        let fs = 256.0;
        let n = (8.0 * fs) as usize;
        let slow: Vec<f64> = (0..n).map(|i| (TAU * 2.0 * i as f64 / fs).sin()).collect();
        let fast: Vec<f64> = (0..n).map(|i| (TAU * 100.0 * i as f64 / fs).sin()).collect();
        let mixed: Vec<f64> = slow.iter().zip(&fast).map(|(a, b)| a + b).collect();
        let out = apply_filter(&make(mixed, fs), &FilterSpec::lowpass(20.0).unwrap())
            .unwrap()
            .into_signal();
        let lo = n / 10;
        let hi = n - n / 10;
        let err: f64 = out.samples[lo..hi]
            .iter()
            .zip(&slow[lo..hi])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / (hi - lo) as f64;
        assert!(err.sqrt() < 0.02, "rms deviation {}", err.sqrt());
    }

    #[test]
    fn filters_preserve_length_and_rate() {
        let fs = 128.0;
        let samples: Vec<f64> = (0..512).map(|i| (i as f64 * 0.13).sin()).collect();
        let s = make(samples, fs);
        for spec in [
            FilterSpec::notch(50.0, 30.0).unwrap(),
            FilterSpec::highpass(0.4).unwrap(),
            FilterSpec::lowpass(30.0).unwrap(),
            FilterSpec::smooth_subtract(0.25).unwrap(),
        ] {
            let out = apply_filter(&s, &spec).unwrap().into_signal();
            assert_eq!(out.len(), s.len());
            assert_eq!(out.sample_rate_hz, s.sample_rate_hz);
        }
    }

    #[test]
    fn smooth_subtract_removes_slow_drift() {
        let fs = 128.0;
        let n = 1024;
        let samples: Vec<f64> = (0..n)
            .map(|i| 5.0 + 0.001 * i as f64 + (TAU * 8.0 * i as f64 / fs).sin())
            .collect();
        let s = make(samples, fs);
        let out = apply_filter(&s, &FilterSpec::smooth_subtract(0.25).unwrap())
            .unwrap()
            .into_signal();
        let interior = &out.samples[64..n - 64];
        let mean = interior.iter().sum::<f64>() / interior.len() as f64;
        assert!(mean.abs() < 1e-2, "mean {mean}");
    }

    #[test]
    fn odd_butterworth_order_rejected() {
        assert!(FilterSpec::new(FilterKind::Lowpass, 10.0, 3.0).is_err());
    }
}
