//! Continuous wavelet transform scalograms with generalized Morse
//! wavelets.
//!
//! The wavelet is defined in the frequency domain as
//! `Psi(w) = a * w^beta * exp(-w^gamma)` for `w > 0` (zero elsewhere),
//! with `beta = time_bandwidth / gamma` and peak frequency
//! `w_p = (beta/gamma)^(1/gamma)`. The default (gamma=3, P^2=60) pair
//! gives `beta = 20`. Coefficients come from frequency-domain
//! multiplication and one inverse FFT per scale; the scalogram is the
//! coefficient magnitude.

use num_complex::Complex64;
use std::f64::consts::TAU;

use super::{MapKind, TimeFreqMap};
use crate::error::{Error, Result};
use crate::fft::{fft_in_place, ifft_in_place, next_pow2};
use crate::signal::Segment;
use crate::tensor::Tensor;

/// Morse wavelet shape and frequency-grid controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwtParams {
    pub gamma: f64,
    pub time_bandwidth: f64,
    pub voices_per_octave: usize,
}

impl Default for CwtParams {
    fn default() -> Self {
        CwtParams {
            gamma: 3.0,
            time_bandwidth: 60.0,
            voices_per_octave: 10,
        }
    }
}

/// Peak angular frequency of the Morse wavelet: `(beta/gamma)^(1/gamma)`.
pub fn morse_peak_omega(gamma: f64, beta: f64) -> f64 {
    (beta / gamma).powf(1.0 / gamma)
}

/// Morse magnitude response at angular frequency `w` (radians/sample),
/// normalized to peak value 2 so a unit tone yields a unit-magnitude
/// ridge. Evaluated in log space: beta = 20 overflows `w^beta` otherwise.
fn morse_response(w: f64, gamma: f64, beta: f64, w_peak: f64) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    2.0 * (beta * (w / w_peak).ln() - (w.powf(gamma) - w_peak.powf(gamma))).exp()
}

/// |CWT| magnitudes on a geometric frequency grid from `fs/2` down to
/// `2/duration`. Row 0 is the highest frequency.
pub fn cwt_scalogram(segment: &Segment, params: &CwtParams) -> Result<TimeFreqMap> {
    if segment.len() < 32 {
        return Err(Error::data(format!(
            "scalogram needs at least 32 samples, got {}",
            segment.len()
        )));
    }
    if !(params.time_bandwidth > params.gamma) || !(params.gamma > 0.0) {
        return Err(Error::config(
            "Morse parameters need time_bandwidth > gamma > 0",
        ));
    }
    if params.voices_per_octave == 0 {
        return Err(Error::config("voices_per_octave must be at least 1"));
    }

    let fs = segment.sample_rate_hz;
    let n = segment.len();
    let beta = params.time_bandwidth / params.gamma;
    let w_peak = morse_peak_omega(params.gamma, beta);

    let f_max = fs / 2.0;
    let f_min = 2.0 / segment.duration_s;
    let mut freqs = Vec::new();
    let mut j = 0usize;
    loop {
        let f = f_max * 2f64.powf(-(j as f64) / params.voices_per_octave as f64);
        if f < f_min * (1.0 - 1e-12) && !freqs.is_empty() {
            break;
        }
        freqs.push(f);
        if f < f_min {
            break;
        }
        j += 1;
    }

    // Pad to limit circular wrap-around of the widest (lowest frequency)
    // wavelet.
    let nfft = next_pow2(2 * n);
    let mut spectrum: Vec<Complex64> = segment
        .samples
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(nfft)
        .collect();
    fft_in_place(&mut spectrum);

    let mut values = Tensor::zeros(&[freqs.len(), n]);
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for (row, &f) in freqs.iter().enumerate() {
        let scale = w_peak * fs / (TAU * f);
        buf[0] = Complex64::new(0.0, 0.0);
        for k in 1..nfft {
            if k <= nfft / 2 {
                let w = TAU * k as f64 / nfft as f64;
                buf[k] = spectrum[k] * morse_response(scale * w, params.gamma, beta, w_peak);
            } else {
                buf[k] = Complex64::new(0.0, 0.0);
            }
        }
        ifft_in_place(&mut buf);
        for col in 0..n {
            values.set(row, col, buf[col].norm());
        }
    }

    let dt = 1.0 / fs;
    Ok(TimeFreqMap {
        values,
        row_axis: freqs,
        col_axis: (0..n).map(|c| c as f64 * dt).collect(),
        kind: MapKind::Scalogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(samples: Vec<f64>, fs: f64) -> Segment {
        let duration = samples.len() as f64 / fs;
        Segment::new(samples, fs, 0, duration).unwrap()
    }

    #[test]
    fn peak_omega_for_default_morse() {
        // (20/3)^(1/3)
        let w = morse_peak_omega(3.0, 20.0);
        assert!((w - (20.0f64 / 3.0).powf(1.0 / 3.0)).abs() < 1e-15);
        // response peaks there with value 2
        let r = morse_response(w, 3.0, 20.0, w);
        assert!((r - 2.0).abs() < 1e-12);
        assert!(morse_response(w * 0.9, 3.0, 20.0, w) < r);
        assert!(morse_response(w * 1.1, 3.0, 20.0, w) < r);
    }

    #[test]
    fn zero_signal_gives_zero_map() {
        let s = seg(vec![0.0; 128], 128.0);
        let m = cwt_scalogram(&s, &CwtParams::default()).unwrap();
        assert!(m.values.data().iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn ridge_tracks_a_4hz_tone() {
        let fs = 128.0;
        let n = (5.0 * fs) as usize;
        let samples: Vec<f64> = (0..n).map(|i| (TAU * 4.0 * i as f64 / fs).sin()).collect();
        let m = cwt_scalogram(&seg(samples, fs), &CwtParams::default()).unwrap();
        let margin = n / 5;
        for col in (margin..n - margin).step_by(31) {
            let row = m.column_argmax(col);
            let f = m.row_axis[row];
            assert!((f - 4.0).abs() <= 0.05 * 4.0, "col {col}: ridge at {f} Hz");
        }
    }

    #[test]
    fn magnitudes_are_linear_in_amplitude() {
        let fs = 128.0;
        let base: Vec<f64> = (0..256)
            .map(|i| (TAU * 6.0 * i as f64 / fs).sin() + 0.3 * (TAU * 17.0 * i as f64 / fs).cos())
            .collect();
        let scaled: Vec<f64> = base.iter().map(|v| 2.5 * v).collect();
        let p = CwtParams::default();
        let m1 = cwt_scalogram(&seg(base, fs), &p).unwrap();
        let m2 = cwt_scalogram(&seg(scaled, fs), &p).unwrap();
        for (a, b) in m1.values.data().iter().zip(m2.values.data()) {
            assert!((b - 2.5 * a).abs() <= 1e-9 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn impulse_localizes_in_time_at_every_scale() {
        let fs = 128.0;
        let n = 256;
        let mut samples = vec![0.0; n];
        samples[n / 2] = 1.0;
        let m = cwt_scalogram(&seg(samples, fs), &CwtParams::default()).unwrap();
        for row in 0..m.n_rows() {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for col in 0..n {
                let v = m.values.at(row, col);
                if v > best_v {
                    best_v = v;
                    best = col;
                }
            }
            assert!(
                (best as i64 - (n / 2) as i64).abs() <= 2,
                "row {row}: max at column {best}"
            );
        }
    }

    #[test]
    fn frequency_grid_is_geometric_and_bounded() {
        let fs = 128.0;
        let s = seg(vec![1.0; 640], fs);
        let p = CwtParams::default();
        let m = cwt_scalogram(&s, &p).unwrap();
        assert!((m.row_axis[0] - 64.0).abs() < 1e-12);
        let ratio = 2f64.powf(-1.0 / p.voices_per_octave as f64);
        for w in m.row_axis.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-12);
        }
        let f_min = 2.0 / 5.0;
        assert!(*m.row_axis.last().unwrap() <= f_min / ratio);
        assert!(*m.row_axis.last().unwrap() >= f_min * ratio);
    }
}
