//! Smoothed pseudo Wigner-Ville distribution.
//!
//! Discrete form, computed on the analytic extension of the segment:
//!
//! ```text
//! SPWVD[k][n] = | sum_tau v[tau] ( sum_mu u[mu] x[n+mu+tau] conj(x[n+mu-tau]) ) e^{-j 4 pi k tau / N} |
//! ```
//!
//! with `u` the time smoothing window, `v` the lag (frequency) smoothing
//! window, zero padding outside the segment, and `k` running over
//! `0..=N/2` so the row axis spans 0..fs/2 in Hz. Smoothing in time kills
//! the oscillating cross-terms of multi-component signals; the lag window
//! trades frequency resolution for the rest.

use num_complex::Complex64;
use std::f64::consts::PI;

use super::{MapKind, TimeFreqMap};
use crate::error::{Error, Result};
use crate::fft::analytic_signal;
use crate::signal::Segment;
use crate::tensor::Tensor;

/// Kaiser smoothing windows for the SPWVD, unit-sum normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingWindows {
    pub time_window: Vec<f64>,
    pub freq_window: Vec<f64>,
    pub beta: f64,
}

impl SmoothingWindows {
    pub const DEFAULT_LEN: usize = 31;
    pub const DEFAULT_BETA: f64 = 8.6;

    /// Kaiser windows of the given odd length and shape parameter.
    pub fn kaiser(len: usize, beta: f64) -> Result<Self> {
        if len % 2 == 0 || len < 3 {
            return Err(Error::config(format!(
                "smoothing window length must be odd and at least 3, got {len}"
            )));
        }
        if !(beta > 0.0) {
            return Err(Error::config("Kaiser beta must be positive"));
        }
        let w = kaiser_window(len, beta);
        Ok(SmoothingWindows {
            time_window: w.clone(),
            freq_window: w,
            beta,
        })
    }

    pub fn half_time(&self) -> usize {
        (self.time_window.len() - 1) / 2
    }

    pub fn half_freq(&self) -> usize {
        (self.freq_window.len() - 1) / 2
    }
}

impl Default for SmoothingWindows {
    fn default() -> Self {
        SmoothingWindows::kaiser(Self::DEFAULT_LEN, Self::DEFAULT_BETA).unwrap()
    }
}

fn kaiser_window(len: usize, beta: f64) -> Vec<f64> {
    let m = (len - 1) as f64 / 2.0;
    let denom = bessel_i0(beta);
    let mut w: Vec<f64> = (0..len)
        .map(|i| {
            let r = (i as f64 - m) / m;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=40 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// SPWVD of a real segment. `n_freq_bins` sets the FFT length `N`; the
/// output has `N/2 + 1` rows at `k * fs / N` Hz and one column per sample.
pub fn spwvd_map(
    segment: &Segment,
    windows: &SmoothingWindows,
    n_freq_bins: usize,
) -> Result<TimeFreqMap> {
    let min_len = windows.time_window.len() + windows.freq_window.len();
    if segment.len() < min_len {
        return Err(Error::data(format!(
            "SPWVD needs at least {min_len} samples (two window lengths), got {}",
            segment.len()
        )));
    }
    let analytic = analytic_signal(&segment.samples);
    spwvd_map_analytic(&analytic, segment.sample_rate_hz, windows, n_freq_bins)
}

/// SPWVD of an already-analytic sequence. The real path is exactly
/// `spwvd_map_analytic(analytic_signal(x), ..)`.
pub fn spwvd_map_analytic(
    x: &[Complex64],
    sample_rate_hz: f64,
    windows: &SmoothingWindows,
    n_freq_bins: usize,
) -> Result<TimeFreqMap> {
    if n_freq_bins < 32 || !n_freq_bins.is_power_of_two() {
        return Err(Error::config(format!(
            "n_freq_bins must be a power of two >= 32, got {n_freq_bins}"
        )));
    }
    let n = x.len();
    let big_n = n_freq_bins;
    let half_u = windows.half_time() as i64;
    let half_v = windows.half_freq() as i64;
    let u = &windows.time_window;
    let v = &windows.freq_window;

    let at = |i: i64| -> Complex64 {
        if i < 0 || i >= n as i64 {
            Complex64::new(0.0, 0.0)
        } else {
            x[i as usize]
        }
    };

    // Smoothed instantaneous autocorrelation S[n][tau], tau = 0..=half_v.
    // S[n][-tau] = conj(S[n][tau]) since u is real, so only tau >= 0 is kept.
    let n_tau = half_v as usize + 1;
    let mut smoothed = vec![Complex64::new(0.0, 0.0); n * n_tau];
    for col in 0..n as i64 {
        for tau in 0..=half_v {
            let mut acc = Complex64::new(0.0, 0.0);
            for mu in -half_u..=half_u {
                let w = u[(mu + half_u) as usize];
                acc += w * at(col + mu + tau) * at(col + mu - tau).conj();
            }
            smoothed[col as usize * n_tau + tau as usize] = acc;
        }
    }

    // Real-valued lag-window DFT: rows k = 0..=N/2 map to k*fs/N Hz.
    let n_rows = big_n / 2 + 1;
    let mut phase = vec![Complex64::new(0.0, 0.0); n_rows * n_tau];
    for k in 0..n_rows {
        for tau in 0..n_tau {
            let ang = -4.0 * PI * (k * tau) as f64 / big_n as f64;
            phase[k * n_tau + tau] = Complex64::from_polar(1.0, ang);
        }
    }

    let mut values = Tensor::zeros(&[n_rows, n]);
    for col in 0..n {
        let s = &smoothed[col * n_tau..(col + 1) * n_tau];
        for k in 0..n_rows {
            let ph = &phase[k * n_tau..(k + 1) * n_tau];
            let mut acc = v[half_v as usize] * s[0].re;
            for tau in 1..n_tau {
                let w = v[(half_v as usize) + tau];
                acc += 2.0 * w * (s[tau] * ph[tau]).re;
            }
            values.set(k, col, acc.abs());
        }
    }

    let dt = 1.0 / sample_rate_hz;
    Ok(TimeFreqMap {
        values,
        row_axis: (0..n_rows)
            .map(|k| k as f64 * sample_rate_hz / big_n as f64)
            .collect(),
        col_axis: (0..n).map(|c| c as f64 * dt).collect(),
        kind: MapKind::Spwvd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn seg(samples: Vec<f64>, fs: f64) -> Segment {
        let duration = samples.len() as f64 / fs;
        Segment::new(samples, fs, 0, duration).unwrap()
    }

    fn tone(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (TAU * freq * i as f64 / fs).cos()).collect()
    }

    #[test]
    fn kaiser_window_is_symmetric_positive_unit_sum() {
        let w = SmoothingWindows::default();
        for win in [&w.time_window, &w.freq_window] {
            assert_eq!(win.len(), 31);
            assert!((win.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(win.iter().all(|&v| v > 0.0));
            for i in 0..win.len() {
                assert!((win[i] - win[win.len() - 1 - i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bessel_i0_reference_values() {
        // Abramowitz & Stegun 9.8: I0(0)=1, I0(1)=1.2660658..., I0(2)=2.2795853...
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_3).abs() < 1e-12);
        assert!((bessel_i0(2.0) - 2.279_585_302_336_067).abs() < 1e-12);
    }

    #[test]
    fn zero_signal_gives_zero_map() {
        let s = seg(vec![0.0; 128], 128.0);
        let m = spwvd_map(&s, &SmoothingWindows::default(), 64).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_tone_ridge_at_tone_frequency() {
        let fs = 256.0;
        let s = seg(tone(32.0, fs, (5.0 * fs) as usize), fs);
        let m = spwvd_map(&s, &SmoothingWindows::default(), 256).unwrap();
        // bin width is fs/N = 1 Hz, so the ridge row should be 32 +/- 1
        for col in (31..m.n_cols() - 31).step_by(17) {
            let k = m.column_argmax(col);
            assert!(
                (m.row_axis[k] - 32.0).abs() <= 1.0 + 1e-9,
                "col {col}: ridge at {} Hz",
                m.row_axis[k]
            );
        }
    }

    #[test]
    fn energy_scales_quadratically_with_amplitude() {
        let fs = 128.0;
        let base = tone(10.0, fs, 256);
        let scaled: Vec<f64> = base.iter().map(|v| 3.0 * v).collect();
        let m1 = spwvd_map(&seg(base, fs), &SmoothingWindows::default(), 64).unwrap();
        let m2 = spwvd_map(&seg(scaled, fs), &SmoothingWindows::default(), 64).unwrap();
        let e1: f64 = m1.values.data().iter().sum();
        let e2: f64 = m2.values.data().iter().sum();
        assert!((e2 / e1 - 9.0).abs() < 1e-6 * 9.0, "ratio {}", e2 / e1);
    }

    #[test]
    fn matches_real_path_when_fed_the_analytic_extension() {
        let fs = 128.0;
        let samples = tone(20.0, fs, 128);
        let s = seg(samples.clone(), fs);
        let via_real = spwvd_map(&s, &SmoothingWindows::default(), 64).unwrap();
        let analytic = crate::fft::analytic_signal(&samples);
        let via_complex =
            spwvd_map_analytic(&analytic, fs, &SmoothingWindows::default(), 64).unwrap();
        for (a, b) in via_real.values.data().iter().zip(via_complex.values.data()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn time_shift_moves_columns_on_the_grid() {
        // Two tones, both integer-bin in each window, so the analytic
        // extension of the shifted window is exactly the shifted analytic
        // extension; interior columns must then match under a whole-sample
        // shift. Two components keep the columns time-varying (beat terms),
        // making the check non-vacuous.
        let fs = 128.0;
        let n = 256;
        let delta = 16usize;
        let long: Vec<f64> = tone(16.0, fs, n + delta)
            .iter()
            .zip(&tone(24.0, fs, n + delta))
            .map(|(a, b)| a + b)
            .collect();
        let a = seg(long[..n].to_vec(), fs);
        let b = seg(long[delta..].to_vec(), fs);
        let wins = SmoothingWindows::default();
        let ma = spwvd_map(&a, &wins, 64).unwrap();
        let mb = spwvd_map(&b, &wins, 64).unwrap();
        let margin = 2 * wins.time_window.len();
        for col in margin..n - margin - delta {
            for row in 0..ma.n_rows() {
                let x = ma.values.at(row, col + delta);
                let y = mb.values.at(row, col);
                assert!(
                    (x - y).abs() <= 1e-9 * x.abs().max(1.0),
                    "row {row} col {col}: {x} vs {y}"
                );
            }
        }
    }
}
