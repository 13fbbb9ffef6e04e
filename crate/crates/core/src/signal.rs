//! ECG/PPG signal loading, segmentation, detrending, and normalization.

use std::path::Path;

use crate::error::{Error, Result};

/// Which biosensor produced a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Ecg,
    Ppg,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Ecg => "ECG",
            Modality::Ppg => "PPG",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ECG" => Ok(Modality::Ecg),
            "PPG" => Ok(Modality::Ppg),
            other => Err(Error::parse(format!("unknown modality `{other}`"))),
        }
    }
}

/// Uniformly sampled 1-D biosignal trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub sample_rate_hz: f64,
    pub subject_id: String,
    pub modality: Modality,
}

impl Signal {
    pub fn new(
        samples: Vec<f64>,
        sample_rate_hz: f64,
        subject_id: impl Into<String>,
        modality: Modality,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("signal has no samples"));
        }
        if !(sample_rate_hz > 0.0) {
            return Err(Error::data(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite sample at index {i}")));
        }
        Ok(Signal {
            samples,
            sample_rate_hz,
            subject_id: subject_id.into(),
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    /// Same metadata, new samples (must keep length).
    pub fn with_samples(&self, samples: Vec<f64>) -> Signal {
        debug_assert_eq!(samples.len(), self.samples.len());
        Signal {
            samples,
            ..self.clone()
        }
    }
}

/// On-disk signal layouts understood by [`load_signal`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalFormat {
    /// `# fs <float> [<ECG|PPG> [<subject_id>]]`, then one sample per line.
    HeaderedText,
    /// `time_s,value` rows with uniform spacing (tolerance 50% of the
    /// nominal period).
    TwoColumnCsv,
}

pub fn load_signal(path: &Path, declared_format: SignalFormat) -> Result<Signal> {
    let text = std::fs::read_to_string(path)?;
    match declared_format {
        SignalFormat::HeaderedText => parse_headered(&text),
        SignalFormat::TwoColumnCsv => parse_two_column_csv(&text),
    }
}

pub fn parse_headered(text: &str) -> Result<Signal> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse("empty file"))?;
    let rest = header
        .strip_prefix('#')
        .ok_or_else(|| Error::parse("header must start with `#`"))?;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    if fields.first() != Some(&"fs") {
        return Err(Error::parse("header must be `# fs <float> [modality [subject]]`"));
    }
    let fs: f64 = fields
        .get(1)
        .ok_or_else(|| Error::parse("header missing sample rate"))?
        .parse()
        .map_err(|_| Error::parse("sample rate is not a number"))?;
    if !(fs > 0.0) || !fs.is_finite() {
        return Err(Error::parse(format!("sample rate must be positive, got {fs}")));
    }
    let modality = match fields.get(2) {
        Some(m) => Modality::parse(m)?,
        None => Modality::Ecg,
    };
    let subject_id = fields.get(3).copied().unwrap_or("").to_string();

    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| Error::parse(format!("bad sample on line {}", lineno + 2)))?;
        if !v.is_finite() {
            return Err(Error::data(format!("non-finite sample on line {}", lineno + 2)));
        }
        samples.push(v);
    }
    Signal::new(samples, fs, subject_id, modality)
}

pub fn parse_two_column_csv(text: &str) -> Result<Signal> {
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let (t, v) = (cols.next().unwrap_or(""), cols.next().unwrap_or(""));
        if lineno == 0 && t.parse::<f64>().is_err() {
            continue; // header row
        }
        let t: f64 = t
            .parse()
            .map_err(|_| Error::parse(format!("bad time on line {}", lineno + 1)))?;
        let v: f64 = v
            .parse()
            .map_err(|_| Error::parse(format!("bad value on line {}", lineno + 1)))?;
        if !v.is_finite() {
            return Err(Error::data(format!("non-finite sample on line {}", lineno + 1)));
        }
        times.push(t);
        values.push(v);
    }
    if times.len() < 2 {
        return Err(Error::parse("CSV needs at least two rows"));
    }
    // Nominal period = median gap, so a single bad gap cannot hide by
    // skewing the estimate it is checked against.
    let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let nominal = gaps[gaps.len() / 2];
    if !(nominal > 0.0) {
        return Err(Error::parse("timestamps must be increasing"));
    }
    for w in times.windows(2) {
        let gap = w[1] - w[0];
        if (gap - nominal).abs() > 0.5 * nominal {
            return Err(Error::data(format!(
                "nonuniform timestamps: gap {gap:.6} vs nominal period {nominal:.6}"
            )));
        }
    }
    Signal::new(values, 1.0 / nominal, "", Modality::Ecg)
}

/// A windowed slice of a parent signal. Length is always even so the
/// Toeplitz map's `P/2` square side is well defined.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub samples: Vec<f64>,
    pub sample_rate_hz: f64,
    pub source_index: usize,
    pub duration_s: f64,
}

impl Segment {
    pub fn new(
        samples: Vec<f64>,
        sample_rate_hz: f64,
        source_index: usize,
        duration_s: f64,
    ) -> Result<Self> {
        if samples.is_empty() || samples.len() % 2 != 0 {
            return Err(Error::data(format!(
                "segment length must be even and nonzero, got {}",
                samples.len()
            )));
        }
        let nominal = duration_s * sample_rate_hz;
        if (samples.len() as f64 - nominal).abs() > 1.0 + 1e-9 {
            return Err(Error::data(format!(
                "segment length {} inconsistent with {duration_s} s at {sample_rate_hz} Hz",
                samples.len()
            )));
        }
        Ok(Segment {
            samples,
            sample_rate_hz,
            source_index,
            duration_s,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Window length in samples for a duration: floor, then forced even.
pub fn window_len(duration_s: f64, sample_rate_hz: f64) -> usize {
    let mut w = (duration_s * sample_rate_hz).floor() as usize;
    if w % 2 == 1 {
        w -= 1;
    }
    w
}

/// Consecutive non-overlapping windows; the trailing remainder is dropped.
pub fn segment_fixed(signal: &Signal, duration_s: f64) -> Result<Vec<Segment>> {
    if !(duration_s > 0.0) {
        return Err(Error::data("segment duration must be positive"));
    }
    let w = window_len(duration_s, signal.sample_rate_hz);
    if w < 2 {
        return Err(Error::data(format!(
            "duration {duration_s} s is shorter than two samples at {} Hz",
            signal.sample_rate_hz
        )));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + w <= signal.len() {
        out.push(Segment {
            samples: signal.samples[start..start + w].to_vec(),
            sample_rate_hz: signal.sample_rate_hz,
            source_index: start,
            duration_s,
        });
        start += w;
    }
    Ok(out)
}

/// One window per peak, centered on it; windows that would run out of
/// bounds are skipped. Pulse segmentation uses `round` (not `floor`)
/// before evenizing so the window brackets the peak symmetrically.
pub fn segment_pulses(signal: &Signal, peaks: &[usize], duration_s: f64) -> Result<Vec<Segment>> {
    let mut w = (duration_s * signal.sample_rate_hz).round() as usize;
    if w % 2 == 1 {
        w -= 1;
    }
    if w < 2 {
        return Err(Error::data(format!(
            "pulse window {duration_s} s is shorter than two samples at {} Hz",
            signal.sample_rate_hz
        )));
    }
    let half = w / 2;
    let mut out = Vec::new();
    for &peak in peaks {
        if peak < half || peak + half > signal.len() {
            continue;
        }
        let start = peak - half;
        out.push(Segment {
            samples: signal.samples[start..start + w].to_vec(),
            sample_rate_hz: signal.sample_rate_hz,
            source_index: start,
            duration_s,
        });
    }
    Ok(out)
}

/// Per-subject normalization constants for the min-max rescale to `[0, alpha]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationParams {
    pub person_min: f64,
    pub person_max: f64,
    pub alpha: f64,
}

impl NormalizationParams {
    pub const DEFAULT_ALPHA: f64 = 1000.0;

    pub fn new(person_min: f64, person_max: f64, alpha: f64) -> Result<Self> {
        if !(person_max > person_min) {
            return Err(Error::data(format!(
                "person_max ({person_max}) must exceed person_min ({person_min})"
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::data("alpha must be positive"));
        }
        Ok(NormalizationParams {
            person_min,
            person_max,
            alpha,
        })
    }

    /// Min/max over a subject's pooled samples, default alpha.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(min, max, Self::DEFAULT_ALPHA)
    }
}

/// `(z - min) / (max - min) * alpha`, applied samplewise.
pub fn normalize_personal(segment: &Segment, params: &NormalizationParams) -> Result<Segment> {
    if params.person_max == params.person_min {
        return Err(Error::data("degenerate normalization range"));
    }
    let span = params.person_max - params.person_min;
    let samples = segment
        .samples
        .iter()
        .map(|&z| (z - params.person_min) / span * params.alpha)
        .collect();
    Ok(Segment {
        samples,
        ..segment.clone()
    })
}

// ---- Peak detection ----

/// Local maxima filtered by prominence and a minimum spacing.
///
/// A candidate index `i` satisfies `samples[i-1] < samples[i] >= samples[i+1]`.
/// Prominence is the drop from the peak to the higher of the two valley
/// minima separating it from taller terrain. When peaks collide within
/// `min_distance_s`, the taller one wins.
pub fn detect_peaks(signal: &Signal, min_distance_s: f64, min_prominence: f64) -> Result<Vec<usize>> {
    let min_dist = (min_distance_s * signal.sample_rate_hz).round() as i64;
    if min_dist < 1 {
        return Err(Error::data(
            "min_distance_s must cover at least one sample period",
        ));
    }
    let s = &signal.samples;
    let n = s.len();
    if n < 3 {
        return Ok(Vec::new());
    }

    let mut candidates = Vec::new();
    for i in 1..n - 1 {
        if s[i - 1] < s[i] && s[i] >= s[i + 1] && prominence(s, i) >= min_prominence {
            candidates.push(i);
        }
    }

    // Tallest-first greedy spacing; ties broken by index for determinism.
    candidates.sort_by(|&a, &b| {
        s[b].partial_cmp(&s[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &candidates {
        if kept
            .iter()
            .all(|&j| (i as i64 - j as i64).abs() >= min_dist)
        {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

fn prominence(s: &[f64], peak: usize) -> f64 {
    let h = s[peak];
    let mut left_min = h;
    for j in (0..peak).rev() {
        if s[j] > h {
            break;
        }
        left_min = left_min.min(s[j]);
    }
    let mut right_min = h;
    for &v in &s[peak + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

/// Interquartile range (linear-interpolation percentiles). The pipeline's
/// default prominence threshold is `0.3 * iqr`.
pub fn iqr(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    percentile(&sorted, 0.75) - percentile(&sorted, 0.25)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

// ---- Polynomial detrend ----

/// Subtract the least-squares polynomial fit of the given order.
///
/// The fit runs on time rescaled to [-1, 1] in a basis of polynomials
/// orthogonalized on the sample grid (Stieltjes three-term recurrence),
/// which keeps order-50 fits well conditioned where a monomial
/// Vandermonde solve would collapse.
pub fn detrend_polynomial(signal: &Signal, order: usize) -> Result<Signal> {
    if order < 1 {
        return Err(Error::data("detrend order must be at least 1"));
    }
    let n = signal.len();
    if n <= order {
        return Err(Error::data(format!(
            "need more than {order} samples to fit order {order}, got {n}"
        )));
    }
    let t: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                0.0
            } else {
                -1.0 + 2.0 * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    let fitted = orthogonal_poly_fit(&t, &signal.samples, order);
    let residual = signal
        .samples
        .iter()
        .zip(&fitted)
        .map(|(y, f)| y - f)
        .collect();
    Ok(signal.with_samples(residual))
}

/// Least-squares fit of degree `order` evaluated at the sample points.
fn orthogonal_poly_fit(t: &[f64], y: &[f64], order: usize) -> Vec<f64> {
    let n = t.len();
    let mut fit = vec![0.0; n];
    let mut q_prev = vec![0.0; n];
    let mut q = vec![1.0; n];
    let mut norm_prev = 0.0;

    for k in 0..=order {
        let norm: f64 = q.iter().map(|v| v * v).sum();
        if norm <= 0.0 {
            break;
        }
        let coef = dot(y, &q) / norm;
        for (f, qi) in fit.iter_mut().zip(&q) {
            *f += coef * qi;
        }
        if k == order {
            break;
        }
        // q_{k+1} = (t - a) q_k - b q_{k-1}
        let a = t
            .iter()
            .zip(&q)
            .map(|(ti, qi)| ti * qi * qi)
            .sum::<f64>()
            / norm;
        let b = if norm_prev > 0.0 { norm / norm_prev } else { 0.0 };
        let next: Vec<f64> = (0..n)
            .map(|i| (t[i] - a) * q[i] - b * q_prev[i])
            .collect();
        q_prev = q;
        q = next;
        norm_prev = norm;
    }
    fit
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
