//! Layer primitives on single-sample `C×H×W` feature maps, each with an explicit backward.

use super::real::{gemm, Real};

/// Row-major `C×H×W` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmap<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Fmap<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn new(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "feature map size");
        Self { c, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn add_assign(&mut self, other: &Fmap<T>) {
        assert_eq!(
            (self.c, self.h, self.w),
            (other.c, other.h, other.w),
            "feature map shapes"
        );
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

/// Valid destination column range for a horizontal tap offset `dx`.
fn tap_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

fn im2col<T: Real>(x: &Fmap<T>, k: usize) -> Vec<T> {
    let p = (k / 2) as isize;
    let (h, w) = (x.h, x.w);
    let hw = x.hw();
    let mut cols = vec![T::zero(); x.c * k * k * hw];
    for ci in 0..x.c {
        let plane = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - p, kx as isize - p);
                let (lo, hi) = tap_range(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = sy as usize * w;
                    row[y * w + lo..y * w + hi].copy_from_slice(
                        &plane[(src as isize + lo as isize + dx) as usize
                            ..(src as isize + hi as isize + dx) as usize],
                    );
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Fmap<T> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut out = Fmap::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - p, kx as isize - p);
                let (lo, hi) = tap_range(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = (sy as usize * w) as isize + dx;
                    let target =
                        &mut plane[(dst + lo as isize) as usize..(dst + hi as isize) as usize];
                    for (t, &v) in target.iter_mut().zip(&row[y * w + lo..y * w + hi]) {
                        *t = *t + v;
                    }
                }
            }
        }
    }
    out
}

/// Same-padded stride-1 convolution with an odd `k×k` kernel.
/// `weight` is `c_out × (c_in·k·k)`, `bias` is `c_out`.
pub fn conv_forward<T: Real>(
    x: &Fmap<T>,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    k: usize,
) -> Fmap<T> {
    let kk = x.c * k * k;
    assert_eq!(weight.len(), c_out * kk, "conv weight size");
    assert_eq!(bias.len(), c_out, "conv bias size");
    let hw = x.hw();
    let mut out = Fmap::zeros(c_out, x.h, x.w);
    for (co, &b) in bias.iter().enumerate() {
        out.data[co * hw..(co + 1) * hw].fill(b);
    }
    if k == 1 {
        gemm(
            c_out,
            kk,
            hw,
            weight,
            false,
            &x.data,
            false,
            T::one(),
            &mut out.data,
        );
    } else {
        let cols = im2col(x, k);
        gemm(
            c_out,
            kk,
            hw,
            weight,
            false,
            &cols,
            false,
            T::one(),
            &mut out.data,
        );
    }
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub fn conv_backward<T: Real>(
    x: &Fmap<T>,
    weight: &[T],
    c_out: usize,
    k: usize,
    d_out: &Fmap<T>,
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Fmap<T> {
    conv_backward_impl(x, weight, c_out, k, d_out, d_weight, d_bias, true)
        .expect("input gradient requested")
}

/// Like [`conv_backward`] without the input gradient, for layers fed by the image.
pub fn conv_backward_params<T: Real>(
    x: &Fmap<T>,
    weight: &[T],
    c_out: usize,
    k: usize,
    d_out: &Fmap<T>,
    d_weight: &mut [T],
    d_bias: &mut [T],
) {
    conv_backward_impl(x, weight, c_out, k, d_out, d_weight, d_bias, false);
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_impl<T: Real>(
    x: &Fmap<T>,
    weight: &[T],
    c_out: usize,
    k: usize,
    d_out: &Fmap<T>,
    d_weight: &mut [T],
    d_bias: &mut [T],
    need_dx: bool,
) -> Option<Fmap<T>> {
    let kk = x.c * k * k;
    let hw = x.hw();
    for (co, db) in d_bias.iter_mut().enumerate() {
        *db = *db
            + d_out.data[co * hw..(co + 1) * hw]
                .iter()
                .copied()
                .sum::<T>();
    }
    if k == 1 {
        gemm(
            c_out,
            hw,
            kk,
            &d_out.data,
            false,
            &x.data,
            true,
            T::one(),
            d_weight,
        );
        if !need_dx {
            return None;
        }
        let mut dx = Fmap::zeros(x.c, x.h, x.w);
        gemm(
            kk,
            c_out,
            hw,
            weight,
            true,
            &d_out.data,
            false,
            T::zero(),
            &mut dx.data,
        );
        Some(dx)
    } else {
        let cols = im2col(x, k);
        gemm(
            c_out,
            hw,
            kk,
            &d_out.data,
            false,
            &cols,
            true,
            T::one(),
            d_weight,
        );
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); kk * hw];
        gemm(
            kk,
            c_out,
            hw,
            weight,
            true,
            &d_out.data,
            false,
            T::zero(),
            &mut dcols,
        );
        Some(col2im(&dcols, x.c, x.h, x.w, k))
    }
}

/// In-place ReLU; NaN passes through so that corruption is not hidden.
pub fn relu_forward<T: Real>(x: &mut Fmap<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `d` in place where the ReLU output was not positive.
pub fn relu_backward<T: Real>(out: &Fmap<T>, d: &mut Fmap<T>) {
    for (g, &o) in d.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 stride-2 max pooling; returns the output and the flat argmax per output.
pub fn maxpool_forward<T: Real>(x: &Fmap<T>) -> (Fmap<T>, Vec<u32>) {
    assert!(
        x.h.is_multiple_of(2) && x.w.is_multiple_of(2),
        "pooling needs even dims"
    );
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Fmap::zeros(x.c, oh, ow);
    let mut arg = vec![0u32; x.c * oh * ow];
    for c in 0..x.c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (T::neg_infinity(), 0usize);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = (c * x.h + 2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[i] > best.0 {
                        best = (x.data[i], i);
                    }
                }
                let o = (c * oh + y) * ow + xx;
                out.data[o] = best.0;
                arg[o] = best.1 as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Real>(
    arg: &[u32],
    d_out: &Fmap<T>,
    c: usize,
    h: usize,
    w: usize,
) -> Fmap<T> {
    let mut dx = Fmap::zeros(c, h, w);
    for (&i, &g) in arg.iter().zip(&d_out.data) {
        dx.data[i as usize] = dx.data[i as usize] + g;
    }
    dx
}

/// Per output index along one axis: the two source indices and the weight on the second.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear ×2 upsampling with half-pixel centres and clamped borders.
pub fn upsample_forward<T: Real>(x: &Fmap<T>) -> Fmap<T> {
    let ty = upsample_taps(x.h);
    let tx = upsample_taps(x.w);
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = Fmap::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let plane = &x.data[c * x.hw()..(c + 1) * x.hw()];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let top = plane[y0 * x.w + x0] * (T::one() - fx) + plane[y0 * x.w + x1] * fx;
                let bot = plane[y1 * x.w + x0] * (T::one() - fx) + plane[y1 * x.w + x1] * fx;
                out.data[(c * oh + oy) * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample_backward<T: Real>(d_out: &Fmap<T>, h: usize, w: usize) -> Fmap<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut dx = Fmap::zeros(d_out.c, h, w);
    for c in 0..d_out.c {
        let plane = &mut dx.data[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let g = d_out.data[(c * d_out.h + oy) * d_out.w + ox];
                let (gt, gb) = (g * (T::one() - fy), g * fy);
                plane[y0 * w + x0] = plane[y0 * w + x0] + gt * (T::one() - fx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + gt * fx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + gb * (T::one() - fx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + gb * fx;
            }
        }
    }
    dx
}

/// Global average pool to one value per channel.
pub fn gap_forward<T: Real>(x: &Fmap<T>) -> Vec<T> {
    let n = T::from_usize(x.hw()).expect("size");
    x.data
        .chunks(x.hw())
        .map(|p| p.iter().copied().sum::<T>() / n)
        .collect()
}

pub fn gap_backward<T: Real>(d: &[T], c: usize, h: usize, w: usize) -> Fmap<T> {
    let n = T::from_usize(h * w).expect("size");
    let mut dx = Fmap::zeros(c, h, w);
    for (plane, &g) in dx.data.chunks_mut(h * w).zip(d) {
        plane.fill(g / n);
    }
    dx
}

/// `weight` is `out × in`.
pub fn linear_forward<T: Real>(x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let n_in = x.len();
    assert_eq!(weight.len(), bias.len() * n_in, "linear weight size");
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            b + weight[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(x)
                .map(|(&w, &v)| w * v)
                .sum::<T>()
        })
        .collect()
}

pub fn linear_backward<T: Real>(
    x: &[T],
    weight: &[T],
    d_out: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Vec<T> {
    let n_in = x.len();
    let mut dx = vec![T::zero(); n_in];
    for (o, &g) in d_out.iter().enumerate() {
        d_bias[o] = d_bias[o] + g;
        for i in 0..n_in {
            d_weight[o * n_in + i] = d_weight[o * n_in + i] + g * x[i];
            dx[i] = dx[i] + g * weight[o * n_in + i];
        }
    }
    dx
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Checks `grad` against central differences of `f` at every coordinate of `x`.
    pub(crate) fn fd_check(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], tol: f64) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let rel = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-6);
            assert!(
                rel <= tol,
                "coordinate {i}: numeric {num} analytic {}",
                grad[i]
            );
        }
    }

    /// Random linear functional `<r, y>` used to reduce layer outputs to a scalar.
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let (ci, co, h, w) = (2, 3, 5, 4);
            let x = rand_vec(ci * h * w, &mut rng);
            let wt = rand_vec(co * ci * k * k, &mut rng);
            let b = rand_vec(co, &mut rng);
            let r = rand_vec(co * h * w, &mut rng);
            let fwd = |x: &[f64], wt: &[f64], b: &[f64]| {
                dot(
                    &conv_forward(&Fmap::new(ci, h, w, x.to_vec()), wt, b, co, k).data,
                    &r,
                )
            };
            let mut dw = vec![0.0; wt.len()];
            let mut db = vec![0.0; co];
            let dx = conv_backward(
                &Fmap::new(ci, h, w, x.clone()),
                &wt,
                co,
                k,
                &Fmap::new(co, h, w, r.clone()),
                &mut dw,
                &mut db,
            );
            fd_check(&|v| fwd(v, &wt, &b), &x, &dx.data, 1e-4);
            fd_check(&|v| fwd(&x, v, &b), &wt, &dw, 1e-4);
            fd_check(&|v| fwd(&x, &wt, v), &b, &db, 1e-4);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (ci, co, h, w) = (2, 2, 4, 5);
        let x = Fmap::new(ci, h, w, rand_vec(ci * h * w, &mut rng));
        let wt = rand_vec(co * ci * 9, &mut rng);
        let b = rand_vec(co, &mut rng);
        let out = conv_forward(&x, &wt, &b, co, 3);
        for o in 0..co {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut s = b[o];
                    for c in 0..ci {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    s += wt[((o * ci + c) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.data[(c * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    assert!((out.data[(o * h + y as usize) * w + xx as usize] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn relu_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w) = (2, 4, 6);
        let x = rand_vec(c * h * w, &mut rng);
        let r = rand_vec(c * h * w / 4, &mut rng);
        let fwd = |x: &[f64]| {
            let mut a = Fmap::new(c, h, w, x.to_vec());
            relu_forward(&mut a);
            dot(&maxpool_forward(&a).0.data, &r)
        };
        let mut a = Fmap::new(c, h, w, x.clone());
        relu_forward(&mut a);
        let (_, arg) = maxpool_forward(&a);
        let mut d = maxpool_backward(&arg, &Fmap::new(c, h / 2, w / 2, r.clone()), c, h, w);
        relu_backward(&a, &mut d);
        fd_check(&fwd, &x, &d.data, 1e-4);
    }

    #[test]
    fn upsample_gradient_and_constancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, h, w) = (2, 3, 4);
        let x = rand_vec(c * h * w, &mut rng);
        let r = rand_vec(c * 4 * h * w, &mut rng);
        let d = upsample_backward(&Fmap::new(c, 2 * h, 2 * w, r.clone()), h, w);
        fd_check(
            &|v| dot(&upsample_forward(&Fmap::new(c, h, w, v.to_vec())).data, &r),
            &x,
            &d.data,
            1e-4,
        );
        let up = upsample_forward(&Fmap::new(1, h, w, vec![0.37f64; h * w]));
        assert!(up.data.iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn gap_and_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h, w, o) = (3, 2, 2, 4);
        let x = rand_vec(c * h * w, &mut rng);
        let wt = rand_vec(o * c, &mut rng);
        let b = rand_vec(o, &mut rng);
        let r = rand_vec(o, &mut rng);
        let fwd = |x: &[f64], wt: &[f64], b: &[f64]| {
            dot(
                &linear_forward(&gap_forward(&Fmap::new(c, h, w, x.to_vec())), wt, b),
                &r,
            )
        };
        let pooled = gap_forward(&Fmap::new(c, h, w, x.clone()));
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; o];
        let dp = linear_backward(&pooled, &wt, &r, &mut dw, &mut db);
        let dx = gap_backward(&dp, c, h, w);
        fd_check(&|v| fwd(v, &wt, &b), &x, &dx.data, 1e-4);
        fd_check(&|v| fwd(&x, v, &b), &wt, &dw, 1e-4);
        fd_check(&|v| fwd(&x, &wt, v), &b, &db, 1e-4);
    }

    #[test]
    fn linear_is_linear_and_zero_weights_give_zero() {
        let x = [0.5f64, -1.0, 2.0];
        let wt = [0.1, 0.2, 0.3, -0.4, 0.5, 0.6];
        let a = linear_forward(&x, &wt, &[0.0, 0.0]);
        let b = linear_forward(&x.map(|v| 2.0 * v), &wt, &[0.0, 0.0]);
        assert!((b[0] - 2.0 * a[0]).abs() < 1e-15 && (b[1] - 2.0 * a[1]).abs() < 1e-15);
        assert_eq!(linear_forward(&x, &[0.0; 6], &[0.0, 0.0]), vec![0.0, 0.0]);
    }
}
