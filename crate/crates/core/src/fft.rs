//! Thin FFT helpers over rustfft plus the analytic-signal transform.

use num_complex::Complex64;
use rustfft::FftPlanner;

pub fn fft_in_place(buf: &mut [Complex64]) {
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(buf.len()).process(buf);
}

pub fn ifft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    let mut planner = FftPlanner::new();
    planner.plan_fft_inverse(n).process(buf);
    let scale = 1.0 / n as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Analytic extension via the FFT Hilbert transform: zero the negative
/// frequencies, double the positive ones, keep DC and Nyquist.
pub fn analytic_signal(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        if k == 0 || (n % 2 == 0 && k == n / 2) {
            // keep
        } else if k < n.div_ceil(2) {
            *v *= 2.0;
        } else {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    ifft_in_place(&mut buf);
    buf
}

pub fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    #[test]
    fn fft_ifft_roundtrip() {
        let x: Vec<Complex64> = (0..64)
            .map(|i| Complex64::new((i as f64 * 0.3).sin(), (i as f64 * 0.17).cos()))
            .collect();
        let mut buf = x.clone();
        fft_in_place(&mut buf);
        ifft_in_place(&mut buf);
        for (a, b) in x.iter().zip(&buf) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn analytic_signal_of_integer_bin_cosine_is_complex_exponential() {
        let n = 256;
        let f = 8.0; // integer bin
        let x: Vec<f64> = (0..n).map(|i| (TAU * f * i as f64 / n as f64).cos()).collect();
        let a = analytic_signal(&x);
        for (i, v) in a.iter().enumerate() {
            let expect = Complex64::from_polar(1.0, TAU * f * i as f64 / n as f64);
            assert!((v - expect).norm() < 1e-10, "i={i}: {v} vs {expect}");
        }
    }

    #[test]
    fn analytic_signal_real_part_matches_input() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.21).sin() + 0.3).collect();
        let a = analytic_signal(&x);
        for (v, orig) in a.iter().zip(&x) {
            assert!((v.re - orig).abs() < 1e-10);
        }
    }
}
