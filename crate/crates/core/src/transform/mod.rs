//! 1D-to-2D signal representations: lagged-window (Toeplitz) maps,
//! smoothed pseudo Wigner-Ville time-frequency maps, and wavelet
//! scalograms.

mod spwvd;
mod wavelet;

pub use spwvd::{spwvd_map, spwvd_map_analytic, SmoothingWindows};
pub use wavelet::{cwt_scalogram, morse_peak_omega, CwtParams};

use crate::error::{Error, Result};
use crate::signal::Segment;
use crate::tensor::Tensor;

/// Which 1D-to-2D representation produced a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Toeplitz,
    Spwvd,
    Scalogram,
}

/// A 2-D representation of a segment: rows index frequency (or lag),
/// columns index time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFreqMap {
    pub values: Tensor,
    /// Row axis values: Hz for SPWVD/scalogram, seconds of lag for Toeplitz.
    pub row_axis: Vec<f64>,
    /// Column axis values in seconds.
    pub col_axis: Vec<f64>,
    pub kind: MapKind,
}

impl TimeFreqMap {
    pub fn n_rows(&self) -> usize {
        self.values.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.cols()
    }

    /// Row index of the per-column maximum.
    pub fn column_argmax(&self, col: usize) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for r in 0..self.n_rows() {
            let v = self.values.at(r, col);
            if v > best_v {
                best_v = v;
                best = r;
            }
        }
        best
    }
}

/// Square lagged-sample matrix: `out[i][j] = samples[i + j]` with side
/// `P/2`. Quasiperiodic inputs produce the striped structure the image
/// classifier consumes.
pub fn toeplitz_map(segment: &Segment) -> Result<TimeFreqMap> {
    let p = segment.len();
    if p % 2 != 0 || p < 4 {
        return Err(Error::data(format!(
            "Toeplitz map needs an even segment of at least 4 samples, got {p}"
        )));
    }
    let side = p / 2;
    let mut values = Tensor::zeros(&[side, side]);
    for i in 0..side {
        for j in 0..side {
            values.set(i, j, segment.samples[i + j]);
        }
    }
    let dt = 1.0 / segment.sample_rate_hz;
    Ok(TimeFreqMap {
        values,
        row_axis: (0..side).map(|i| i as f64 * dt).collect(),
        col_axis: (0..side).map(|j| j as f64 * dt).collect(),
        kind: MapKind::Toeplitz,
    })
}
