//! Training losses with analytic gradients: partial cross-entropy over a mask
//! hierarchy, transform-aligned consistency, rotation and soft cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hpm::MaskHierarchy;
use crate::imgcore::{invert_geometric, AugmentationRecord};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before any logarithm.
pub const EPS: f64 = 1e-7;
pub const DEFAULT_LAMBDA: f64 = 0.85;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Derivative of `ln(clamp(p))`; zero where the clamp is active.
fn dlog(p: f64) -> f64 {
    if (EPS..=1.0 - EPS).contains(&p) {
        1.0 / p
    } else {
        0.0
    }
}

/// Per-pixel foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "probability {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, p: f64) -> Result<Self> {
        Self::new(height, width, vec![p; height * width])
    }

    pub fn from_logits(height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        Self::new(height, width, logits.iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss value with its gradient. `degenerate` marks an empty support (value 0).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
    pub degenerate: bool,
}

/// Majority class `c1`, minority class `c2` and the majority weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub c1: usize,
    pub c2: usize,
    pub consensus: bool,
    pub lambda: f64,
}

impl SoftLabel {
    pub fn new(c1: usize, c2: usize, consensus: bool, lambda: f64) -> Result<Self> {
        if consensus != (c1 == c2) {
            return Err(Error::Label(format!(
                "c1={c1}, c2={c2} inconsistent with consensus={consensus}"
            )));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Label(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(Self {
            c1,
            c2,
            consensus,
            lambda,
        })
    }

    pub fn consensus(class: usize) -> Self {
        Self {
            c1: class,
            c2: class,
            consensus: true,
            lambda: DEFAULT_LAMBDA,
        }
    }

    /// Weights on `(c1, c2)`; a consensus label puts everything on `c1`.
    fn weights(&self) -> (f64, f64) {
        if self.consensus {
            (1.0, 0.0)
        } else {
            (self.lambda, 1.0 - self.lambda)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) || !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and >= 0, got {alpha}, {beta}"
            )));
        }
        if alpha == 0.0 && beta == 0.0 {
            return Err(Error::InvalidArgument(
                "alpha and beta are both zero".into(),
            ));
        }
        Ok(Self { alpha, beta })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

pub fn fine_total(seg: f64, con: f64, w: &LossWeights) -> f64 {
    w.alpha * seg + w.beta * con
}

fn check_hier(h: usize, w: usize, hier: &MaskHierarchy) -> Result<()> {
    if hier.height() != h || hier.width() != w {
        return Err(Error::Shape(format!(
            "{h}x{w} map against a {}x{} hierarchy",
            hier.height(),
            hier.width()
        )));
    }
    Ok(())
}

/// Partial cross-entropy: `M_0` pixels are foreground, pixels outside the outer
/// layer are background, the rings in between are ignored. Normalized by the
/// total pixel count. Gradient is with respect to the probabilities.
pub fn seg_partial_ce(pred: &ProbMap, hier: &MaskHierarchy) -> Result<LossGrad> {
    check_hier(pred.height, pred.width, hier)?;
    let n = pred.values.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.values.len()];
    let mut any = false;
    for ((label, &p), g) in hier
        .confidence_labels()
        .into_iter()
        .zip(&pred.values)
        .zip(&mut grad)
    {
        match label {
            Some(0) => {
                value -= clamp_prob(p).ln();
                *g = -dlog(p) / n;
                any = true;
            }
            Some(_) => {
                value -= (1.0 - clamp_prob(p)).ln();
                *g = dlog(1.0 - p) / n;
                any = true;
            }
            None => {}
        }
    }
    Ok(LossGrad {
        value: value / n,
        grad,
        degenerate: !any,
    })
}

/// [`seg_partial_ce`] on `sigmoid(logits)`, with the gradient taken with respect
/// to the logits in a numerically stable form.
pub fn seg_partial_ce_logits(
    h: usize,
    w: usize,
    logits: &[f64],
    hier: &MaskHierarchy,
) -> Result<LossGrad> {
    check_hier(h, w, hier)?;
    if logits.len() != h * w {
        return Err(Error::Shape(format!(
            "{} logits for a {h}x{w} map",
            logits.len()
        )));
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    let mut any = false;
    for ((label, &z), g) in hier
        .confidence_labels()
        .into_iter()
        .zip(logits)
        .zip(&mut grad)
    {
        let Some(label) = label else { continue };
        let target = if label == 0 { 1.0 } else { 0.0 };
        let p = clamp_prob(sigmoid(z));
        value -= if label == 0 { p.ln() } else { (1.0 - p).ln() };
        *g = (sigmoid(z) - target) / n;
        any = true;
    }
    Ok(LossGrad {
        value: value / n,
        grad,
        degenerate: !any,
    })
}

/// Mean squared difference between the student and teacher maps after undoing
/// each map's geometric augmentation, over pixels valid in both. The gradient
/// is with respect to the student map only.
pub fn consistency(
    student: &ProbMap,
    teacher: &ProbMap,
    r_student: &AugmentationRecord,
    r_teacher: &AugmentationRecord,
) -> Result<LossGrad> {
    let (h, w) = (student.height, student.width);
    if teacher.height != h || teacher.width != w {
        return Err(Error::Shape(
            "student and teacher maps differ in size".into(),
        ));
    }
    let (a, va) = invert_geometric(&student.values, h, w, r_student)?;
    let (b, vb) = invert_geometric(&teacher.values, h, w, r_teacher)?;
    let valid = va.intersection(&vb)?;
    let n = valid.count();
    if n == 0 {
        return Ok(LossGrad {
            value: 0.0,
            grad: vec![0.0; h * w],
            degenerate: true,
        });
    }
    let mut value = 0.0;
    let mut grad_a = vec![0.0; h * w];
    for (i, &ok) in valid.bits().iter().enumerate() {
        if ok {
            let d = a[i] - b[i];
            value += d * d;
            grad_a[i] = 2.0 * d / n as f64;
        }
    }
    let grad = if r_student.is_geometric_identity() {
        grad_a
    } else {
        r_student.inverse_resampler(h, w)?.adjoint(&grad_a)
    };
    Ok(LossGrad {
        value: value / n as f64,
        grad,
        degenerate: false,
    })
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Cross-entropy of `softmax(logits)` against a one-hot target; gradient is
/// with respect to the logits.
pub fn softmax_ce(logits: &[f64], target: usize) -> Result<LossGrad> {
    if target >= logits.len() {
        return Err(Error::Label(format!(
            "target {target} with {} logits",
            logits.len()
        )));
    }
    let lsm = log_softmax(logits);
    let mut grad: Vec<f64> = lsm.iter().map(|l| l.exp()).collect();
    grad[target] -= 1.0;
    Ok(LossGrad {
        value: -lsm[target],
        grad,
        degenerate: false,
    })
}

/// Four-way rotation cross-entropy; targets index 0, 90, 180, 270 degrees.
pub fn rotation_ce(logits: &[f64], target: usize) -> Result<LossGrad> {
    if logits.len() != 4 {
        return Err(Error::Shape(format!(
            "rotation head has {} logits, expected 4",
            logits.len()
        )));
    }
    softmax_ce(logits, target)
}

fn check_label(k: usize, label: &SoftLabel) -> Result<()> {
    if label.c1 >= k || label.c2 >= k {
        return Err(Error::Label(format!(
            "label ({}, {}) with {k} classes",
            label.c1, label.c2
        )));
    }
    if label.consensus != (label.c1 == label.c2) {
        return Err(Error::Label("inconsistent soft label".into()));
    }
    Ok(())
}

/// `-(λ ln p_c1 + (1 - λ) ln p_c2)`; a consensus label gives `-ln p_c1`.
/// Gradient is with respect to the probabilities.
pub fn soft_ce(probs: &[f64], label: &SoftLabel) -> Result<LossGrad> {
    check_label(probs.len(), label)?;
    let (w1, w2) = label.weights();
    let mut grad = vec![0.0; probs.len()];
    grad[label.c1] -= w1 * dlog(probs[label.c1]);
    grad[label.c2] -= w2 * dlog(probs[label.c2]);
    Ok(LossGrad {
        value: -(w1 * clamp_prob(probs[label.c1]).ln() + w2 * clamp_prob(probs[label.c2]).ln()),
        grad,
        degenerate: false,
    })
}

/// [`soft_ce`] on `softmax(logits)` with the gradient taken with respect to the
/// logits. For a consensus label this is exactly [`softmax_ce`].
pub fn soft_ce_logits(logits: &[f64], label: &SoftLabel) -> Result<LossGrad> {
    check_label(logits.len(), label)?;
    if label.consensus {
        return softmax_ce(logits, label.c1);
    }
    let (w1, w2) = label.weights();
    let lsm = log_softmax(logits);
    let mut grad: Vec<f64> = lsm.iter().map(|l| l.exp()).collect();
    grad[label.c1] -= w1;
    grad[label.c2] -= w2;
    Ok(LossGrad {
        value: -(w1 * lsm[label.c1] + w2 * lsm[label.c2]),
        grad,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::{rot90_plane, BinaryMask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let rel = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                rel <= 1e-4,
                "coordinate {i}: numeric {num} analytic {}",
                grad[i]
            );
        }
    }

    fn two_layer(h: usize, w: usize) -> MaskHierarchy {
        let m0 = BinaryMask::from_fn(h, w, |x, y| (2..4).contains(&x) && (2..4).contains(&y));
        let m1 = BinaryMask::from_fn(h, w, |x, y| (1..5).contains(&x) && (1..5).contains(&y));
        MaskHierarchy::new(vec![m0, m1.clone()], m1).unwrap()
    }

    #[test]
    fn seg_loss_vanishes_on_confident_background() {
        let bg = BinaryMask::full(3, 3);
        let hier = MaskHierarchy::new(vec![BinaryMask::from_fn(3, 3, |x, y| x == 1 && y == 1)], bg)
            .unwrap();
        let pred = ProbMap::new(
            3,
            3,
            (0..9)
                .map(|i| if i == 4 { 1.0 - EPS } else { EPS })
                .collect(),
        )
        .unwrap();
        assert!(seg_partial_ce(&pred, &hier).unwrap().value <= 1e-6);
    }

    #[test]
    fn seg_loss_two_by_two() {
        let m0 = BinaryMask::from_fn(2, 2, |x, y| x == 0 && y == 0);
        let hier = MaskHierarchy::new(vec![m0.clone()], m0).unwrap();
        let pred = ProbMap::filled(2, 2, 0.5).unwrap();
        let l = seg_partial_ce(&pred, &hier).unwrap().value;
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_ignores_ring() {
        let hier = two_layer(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..36).map(|_| rng.random_range(0.01..0.99)).collect();
        let a = seg_partial_ce(&ProbMap::new(6, 6, vals.clone()).unwrap(), &hier).unwrap();
        let mut other = vals;
        for (v, l) in other.iter_mut().zip(hier.confidence_labels()) {
            if l.is_none() {
                *v = rng.random_range(0.01..0.99);
            }
        }
        let b = seg_partial_ce(&ProbMap::new(6, 6, other).unwrap(), &hier).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn seg_gradients_match_finite_differences() {
        let hier = two_layer(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..36).map(|_| rng.random_range(0.05..0.95)).collect();
        let g = seg_partial_ce(&ProbMap::new(6, 6, vals.clone()).unwrap(), &hier).unwrap();
        fd_check(
            |v| {
                seg_partial_ce(&ProbMap::new(6, 6, v.to_vec()).unwrap(), &hier)
                    .unwrap()
                    .value
            },
            &vals,
            &g.grad,
        );
        let z: Vec<f64> = (0..36).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gl = seg_partial_ce_logits(6, 6, &z, &hier).unwrap();
        let via_probs = seg_partial_ce(&ProbMap::from_logits(6, 6, &z).unwrap(), &hier).unwrap();
        assert!((gl.value - via_probs.value).abs() < 1e-12);
        fd_check(
            |v| seg_partial_ce_logits(6, 6, v, &hier).unwrap().value,
            &z,
            &gl.grad,
        );
    }

    #[test]
    fn consistency_basics() {
        let id = AugmentationRecord::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ProbMap::new(8, 8, (0..64).map(|_| rng.random::<f64>()).collect()).unwrap();
        assert_eq!(consistency(&m, &m, &id, &id).unwrap().value, 0.0);
        let mut r1 = id;
        r1.rotation = 10.0;
        r1.shift = (0.05, -0.05);
        let mut r2 = id;
        r2.vflip = true;
        r2.rotation = -7.0;
        let p = ProbMap::filled(8, 8, 1.0 - EPS).unwrap();
        let q = ProbMap::filled(8, 8, EPS).unwrap();
        let l = consistency(&p, &q, &r1, &r2).unwrap();
        assert!((l.value - (1.0 - 2.0 * EPS).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn consistency_matches_quarter_turn_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = 7;
            let a: Vec<f64> = (0..n * n).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..n * n).map(|_| rng.random()).collect();
            let (k1, k2) = (rng.random_range(0..4usize), rng.random_range(0..4usize));
            let mut r1 = AugmentationRecord::identity();
            r1.rotation = 90.0 * k1 as f64;
            let mut r2 = AugmentationRecord::identity();
            r2.rotation = 90.0 * k2 as f64;
            let (ua, _, _) = rot90_plane(&a, n, n, 1, (4 - k1) % 4);
            let (ub, _, _) = rot90_plane(&b, n, n, 1, (4 - k2) % 4);
            let mut want = 0.0;
            for i in 0..n * n {
                want += (ua[i] - ub[i]).powi(2);
            }
            want /= (n * n) as f64;
            let got = consistency(
                &ProbMap::new(n, n, a).unwrap(),
                &ProbMap::new(n, n, b).unwrap(),
                &r1,
                &r2,
            )
            .unwrap();
            assert!((got.value - want).abs() <= 1e-10, "{} vs {want}", got.value);
        }
    }

    #[test]
    fn consistency_gradient_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..100).map(|_| rng.random_range(0.1..0.9)).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.random_range(0.1..0.9)).collect();
        let mut r1 = AugmentationRecord::identity();
        r1.rotation = 8.0;
        r1.vflip = true;
        r1.scale = 0.8;
        let mut r2 = AugmentationRecord::identity();
        r2.shift = (0.1, 0.0);
        let tb = ProbMap::new(10, 10, b.clone()).unwrap();
        let g = consistency(&ProbMap::new(10, 10, a.clone()).unwrap(), &tb, &r1, &r2).unwrap();
        // values stay in [0, 1] for step 1e-5 since inputs are in [0.1, 0.9]
        fd_check(
            |v| {
                consistency(&ProbMap::new(10, 10, v.to_vec()).unwrap(), &tb, &r1, &r2)
                    .unwrap()
                    .value
            },
            &a,
            &g.grad,
        );
        let swapped = consistency(&tb, &ProbMap::new(10, 10, a).unwrap(), &r2, &r1).unwrap();
        assert!((swapped.value - g.value).abs() < 1e-15);
    }

    #[test]
    fn rotation_ce_values() {
        let u = rotation_ce(&[0.3; 4], 2).unwrap();
        assert!((u.value - 4f64.ln()).abs() < 1e-12);
        let s = rotation_ce(&[10.0, 0.0, 0.0, 0.0], 0).unwrap();
        assert!((s.value - (1.0 + 3.0 * (-10f64).exp()).ln()).abs() < 1e-15);
        assert!((s.value - 1.3619e-4).abs() < 1e-7);
        assert!(s.grad.iter().sum::<f64>().abs() < 1e-15);
        assert!(rotation_ce(&[0.0; 3], 0).is_err());
        assert!(rotation_ce(&[0.0; 4], 4).is_err());
    }

    #[test]
    fn soft_ce_values() {
        let p = [0.7, 0.2, 0.05, 0.05];
        let c = soft_ce(&p, &SoftLabel::consensus(0)).unwrap();
        assert!((c.value + 0.7f64.ln()).abs() < 1e-12);
        let s = soft_ce(&p, &SoftLabel::new(0, 1, false, 0.85).unwrap()).unwrap();
        assert!((s.value - (-0.85 * 0.7f64.ln() - 0.15 * 0.2f64.ln())).abs() < 1e-12);
        assert!((s.value - 0.5446).abs() < 1e-4);
        let one = soft_ce(&p, &SoftLabel::new(0, 3, false, 1.0).unwrap()).unwrap();
        assert_eq!(one.value.to_bits(), c.value.to_bits());
        assert!(SoftLabel::new(1, 1, false, 0.85).is_err());
        assert!(SoftLabel::new(0, 1, true, 0.85).is_err());
    }

    #[test]
    fn soft_ce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let label = SoftLabel::new(2, 0, false, 0.85).unwrap();
        let p: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..0.5)).collect();
        let g = soft_ce(&p, &label).unwrap();
        fd_check(|v| soft_ce(v, &label).unwrap().value, &p, &g.grad);
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gl = soft_ce_logits(&z, &label).unwrap();
        assert!((gl.value - soft_ce(&softmax(&z), &label).unwrap().value).abs() < 1e-12);
        fd_check(|v| soft_ce_logits(v, &label).unwrap().value, &z, &gl.grad);
        let gr = rotation_ce(&z[..4], 1).unwrap();
        fd_check(|v| rotation_ce(v, 1).unwrap().value, &z[..4], &gr.grad);
    }

    #[test]
    fn soft_ce_with_full_weight_is_vanilla_ce() {
        let z = [0.4, -1.2, 2.0, 0.1];
        let a = soft_ce_logits(&z, &SoftLabel::new(2, 1, false, 1.0).unwrap()).unwrap();
        let b = softmax_ce(&z, 2).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert!(a
            .grad
            .iter()
            .zip(&b.grad)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn fine_total_is_linear() {
        assert_eq!(fine_total(0.5, 0.25, &LossWeights::default()), 0.75);
        assert_eq!(
            fine_total(0.5, 0.25, &LossWeights::new(1.0, 0.0).unwrap()),
            0.5
        );
        assert!((fine_total(0.9, 0.1, &LossWeights::new(0.0, 2.0).unwrap()) - 0.2).abs() < 1e-15);
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
    }
}
