//! Otsu thresholding over a 256-bin histogram.

pub const BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuResult {
    /// Pixels `<= threshold` form the dark class.
    pub threshold: f64,
    /// Fewer than two occupied bins: no split exists and `threshold` is the constant level.
    pub degenerate: bool,
}

#[inline]
pub(crate) fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) as f64) * (BINS - 1) as f64).round() as usize
}

/// Maximises between-class variance. When several splits tie (empty bins between
/// modes), the threshold sits in the middle of the tied range.
pub fn otsu_threshold(values: &[f32]) -> OtsuResult {
    let mut hist = [0u64; BINS];
    for &v in values {
        hist[bin_of(v)] += 1;
    }
    let occupied = hist.iter().filter(|c| **c > 0).count();
    if occupied < 2 {
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64
        };
        return OtsuResult {
            threshold: mean,
            degenerate: true,
        };
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let mut scores = [f64::NEG_INFINITY; BINS];
    for t in 0..BINS - 1 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        scores[t] = w0 * w1 * (m0 - m1).powi(2);
    }
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = best * 1e-12;
    let first = scores
        .iter()
        .position(|&s| s >= best - tol)
        .expect("max exists");
    let last = scores
        .iter()
        .rposition(|&s| s >= best - tol)
        .expect("max exists");
    let t = (first + last) as f64 / 2.0;
    OtsuResult {
        threshold: (t + 0.5) / (BINS - 1) as f64,
        degenerate: false,
    }
}
