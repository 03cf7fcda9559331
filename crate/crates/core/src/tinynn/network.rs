//! Encoder-decoder network with rotation and class heads.
//!
//! Encoder stage `s` is two 3×3 conv + ReLU layers; 2×2 max pooling sits between
//! stages and after the last one, giving the lowest-resolution map used by the
//! heads. The decoder projects the lowest map and every stage output to a common
//! width with 1×1 convs, upsamples bilinearly and adds, then a 1×1 conv gives the
//! foreground logit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    conv_backward, conv_backward_params, conv_forward, gap_backward, gap_forward, linear_backward,
    linear_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward,
    upsample_backward, upsample_forward, Fmap,
};
use super::real::Real;
use crate::error::{Error, Result};
use crate::imgcore::ImageCrop;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub in_channels: usize,
    /// Channels per encoder stage.
    pub widths: Vec<usize>,
    pub decoder_width: usize,
    /// Zero means no class head.
    pub num_classes: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: vec![16, 32, 64],
            decoder_width: 16,
            num_classes: 0,
        }
    }
}

impl Arch {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn lowest_channels(&self) -> usize {
        *self.widths.last().expect("at least one stage")
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.widths.is_empty()
            || self.widths.contains(&0)
            || self.decoder_width == 0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid architecture {self:?}"
            )));
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` for every tensor, in storage order.
    fn tensor_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<_>, name: String, c_in: usize, c_out: usize, k: usize| {
            specs.push((format!("{name}.w"), vec![c_out, c_in, k, k], c_in * k * k));
            specs.push((format!("{name}.b"), vec![c_out], c_in * k * k));
        };
        let mut c_in = self.in_channels;
        for (s, &c) in self.widths.iter().enumerate() {
            conv(&mut specs, format!("enc.{s}.conv0"), c_in, c, 3);
            conv(&mut specs, format!("enc.{s}.conv1"), c, c, 3);
            c_in = c;
        }
        let d = self.decoder_width;
        for (s, &c) in self.widths.iter().enumerate() {
            conv(&mut specs, format!("dec.lat{s}"), c, d, 1);
        }
        conv(&mut specs, "dec.low".into(), self.lowest_channels(), d, 1);
        conv(&mut specs, "dec.head".into(), d, 1, 1);
        let low = self.lowest_channels();
        specs.push(("rot.w".into(), vec![4, low], low));
        specs.push(("rot.b".into(), vec![4], low));
        if self.num_classes > 0 {
            specs.push(("cls.w".into(), vec![self.num_classes, low], low));
            specs.push(("cls.b".into(), vec![self.num_classes], low));
        }
        specs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered named tensors for one network; gradients use the same container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    arch: Arch,
    tensors: Vec<Param<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Rotation,
    Class,
}

impl<T: Real> Params<T> {
    /// Kaiming-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(arch: &Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = arch
            .tensor_specs()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".b") {
                    vec![T::zero(); n]
                } else {
                    let normal =
                        Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..n)
                        .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                        .collect()
                };
                Param { name, shape, data }
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn zeros(arch: &Arch) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .tensor_specs()
            .into_iter()
            .map(|(name, shape, _)| {
                let n = shape.iter().product();
                Param {
                    name,
                    shape,
                    data: vec![T::zero(); n],
                }
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    /// Assembles parameters from tensors, checking names and shapes against `arch`.
    pub fn from_tensors(arch: &Arch, tensors: Vec<Param<T>>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.tensor_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in specs.iter().zip(&tensors) {
            if *name != t.name
                || *shape != t.shape
                || t.data.len() != shape.iter().product::<usize>()
            {
                return Err(Error::Checkpoint(format!(
                    "tensor {} does not match {name} {shape:?}",
                    t.name
                )));
            }
        }
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn tensors(&self) -> &[Param<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Param<T>] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in &mut z.tensors {
            t.data.fill(T::zero());
        }
        z
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Param {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t
                        .data
                        .iter()
                        .map(|&v| U::from_f64_lossy(v.as_f64()))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Replaces (or adds) a freshly initialized `k`-way class head, keeping every other tensor.
    pub fn with_class_head(&self, k: usize, seed: u64) -> Result<Self> {
        let arch = Arch {
            num_classes: k,
            ..self.arch.clone()
        };
        let fresh = Self::init(&arch, seed)?;
        let tensors = fresh
            .tensors
            .into_iter()
            .map(|t| match self.tensors.iter().find(|o| o.name == t.name) {
                Some(o) if !t.name.starts_with("cls.") => o.clone(),
                _ => t,
            })
            .collect();
        Ok(Self { arch, tensors })
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v * s;
            }
        }
    }

    /// Errors naming the first tensor with a NaN or infinite entry.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self
            .tensors
            .iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
        {
            Some(t) => Err(Error::NonFinite(format!("{what} of {}", t.name))),
            None => Ok(()),
        }
    }

    fn w(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }

    fn enc_idx(&self, stage: usize, conv: usize) -> usize {
        4 * stage + 2 * conv
    }

    fn lat_idx(&self, stage: usize) -> usize {
        4 * self.arch.stages() + 2 * stage
    }

    fn low_idx(&self) -> usize {
        6 * self.arch.stages()
    }

    fn head_idx(&self) -> usize {
        self.low_idx() + 2
    }

    fn out_idx(&self, head: Head) -> Result<usize> {
        match head {
            Head::Rotation => Ok(self.head_idx() + 2),
            Head::Class if self.arch.num_classes > 0 => Ok(self.head_idx() + 4),
            Head::Class => Err(Error::InvalidArgument("network has no class head".into())),
        }
    }

    /// Adds `d` to the gradient pair (weight, bias) starting at `i`.
    fn pair_mut(&mut self, i: usize) -> (&mut [T], &mut [T]) {
        let (a, b) = self.tensors.split_at_mut(i + 1);
        (&mut a[i].data, &mut b[0].data)
    }
}

pub fn fmap_from_image<T: Real>(img: &ImageCrop) -> Fmap<T> {
    let data = (0..img.channels())
        .flat_map(|c| {
            img.plane(c)
                .into_iter()
                .map(|v| T::from_f64_lossy(v as f64))
        })
        .collect();
    Fmap::new(img.channels(), img.height(), img.width(), data)
}

#[derive(Debug, Clone)]
struct StageTrace<T> {
    input: Fmap<T>,
    /// Argmax of the pooling that produced `input`; empty for the first stage.
    pool_arg: Vec<u32>,
    a1: Fmap<T>,
    out: Fmap<T>,
}

/// Cached encoder activations.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    stages: Vec<StageTrace<T>>,
    lowest: Fmap<T>,
    lowest_arg: Vec<u32>,
}

impl<T: Real> EncoderTrace<T> {
    /// Stage outputs followed by the pooled lowest-resolution map.
    pub fn pyramid(&self) -> Vec<&Fmap<T>> {
        self.stages
            .iter()
            .map(|s| &s.out)
            .chain(std::iter::once(&self.lowest))
            .collect()
    }

    pub fn lowest(&self) -> &Fmap<T> {
        &self.lowest
    }
}

pub fn encoder_forward<T: Real>(p: &Params<T>, img: &Fmap<T>) -> Result<EncoderTrace<T>> {
    let arch = &p.arch;
    let div = 1usize << arch.stages();
    if img.c != arch.in_channels
        || !img.h.is_multiple_of(div)
        || !img.w.is_multiple_of(div)
        || img.h == 0
        || img.w == 0
    {
        return Err(Error::Shape(format!(
            "{}x{}x{} input for {} channels and {} stages",
            img.c,
            img.h,
            img.w,
            arch.in_channels,
            arch.stages()
        )));
    }
    let mut stages: Vec<StageTrace<T>> = Vec::with_capacity(arch.stages());
    for (s, &c) in arch.widths.iter().enumerate() {
        let (input, pool_arg) = match stages.last() {
            None => (img.clone(), Vec::new()),
            Some(prev) => maxpool_forward(&prev.out),
        };
        let i0 = p.enc_idx(s, 0);
        let mut a1 = conv_forward(&input, p.w(i0), p.w(i0 + 1), c, 3);
        relu_forward(&mut a1);
        let i1 = p.enc_idx(s, 1);
        let mut out = conv_forward(&a1, p.w(i1), p.w(i1 + 1), c, 3);
        relu_forward(&mut out);
        stages.push(StageTrace {
            input,
            pool_arg,
            a1,
            out,
        });
    }
    let (lowest, lowest_arg) = maxpool_forward(&stages.last().expect("stages").out);
    Ok(EncoderTrace {
        stages,
        lowest,
        lowest_arg,
    })
}

/// Cached decoder activations; `logits` is the 1-channel full-resolution map.
#[derive(Debug, Clone)]
pub struct DecoderTrace<T> {
    low: Fmap<T>,
    /// Post-ReLU fused map per stage.
    fused: Vec<Fmap<T>>,
    pub logits: Fmap<T>,
}

impl<T: Real> DecoderTrace<T> {
    pub fn probs(&self) -> Vec<f64> {
        self.logits
            .data
            .iter()
            .map(|&z| crate::losses::sigmoid(z.as_f64()))
            .collect()
    }
}

pub fn decoder_forward<T: Real>(p: &Params<T>, enc: &EncoderTrace<T>) -> DecoderTrace<T> {
    let dw = p.arch.decoder_width;
    let il = p.low_idx();
    let low = conv_forward(&enc.lowest, p.w(il), p.w(il + 1), dw, 1);
    let mut fused = vec![Fmap::zeros(0, 0, 0); p.arch.stages()];
    let mut d = low.clone();
    for s in (0..p.arch.stages()).rev() {
        let mut z = upsample_forward(&d);
        let i = p.lat_idx(s);
        z.add_assign(&conv_forward(&enc.stages[s].out, p.w(i), p.w(i + 1), dw, 1));
        relu_forward(&mut z);
        fused[s] = z.clone();
        d = z;
    }
    let ih = p.head_idx();
    let logits = conv_forward(&d, p.w(ih), p.w(ih + 1), 1, 1);
    DecoderTrace { low, fused, logits }
}

/// Accumulates decoder gradients into `g` and returns gradients for the pyramid
/// (stage outputs then lowest map).
pub fn decoder_backward<T: Real>(
    p: &Params<T>,
    enc: &EncoderTrace<T>,
    dec: &DecoderTrace<T>,
    d_logits: &[T],
    g: &mut Params<T>,
) -> Vec<Fmap<T>> {
    let dw = p.arch.decoder_width;
    let (h, w) = (dec.logits.h, dec.logits.w);
    let ih = p.head_idx();
    let (gw, gb) = g.pair_mut(ih);
    let mut d = conv_backward(
        &dec.fused[0],
        p.w(ih),
        1,
        1,
        &Fmap::new(1, h, w, d_logits.to_vec()),
        gw,
        gb,
    );
    let mut d_pyr = Vec::with_capacity(p.arch.stages() + 1);
    for s in 0..p.arch.stages() {
        relu_backward(&dec.fused[s], &mut d);
        let i = p.lat_idx(s);
        let (gw, gb) = g.pair_mut(i);
        d_pyr.push(conv_backward(&enc.stages[s].out, p.w(i), dw, 1, &d, gw, gb));
        let below = if s + 1 < p.arch.stages() {
            &dec.fused[s + 1]
        } else {
            &dec.low
        };
        d = upsample_backward(&d, below.h, below.w);
    }
    let il = p.low_idx();
    let (gw, gb) = g.pair_mut(il);
    d_pyr.push(conv_backward(&enc.lowest, p.w(il), dw, 1, &d, gw, gb));
    d_pyr
}

/// Global-average-pooled lowest map and the head's logits.
pub fn head_forward<T: Real>(
    p: &Params<T>,
    head: Head,
    enc: &EncoderTrace<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let i = p.out_idx(head)?;
    let pooled = gap_forward(&enc.lowest);
    let logits = linear_forward(&pooled, p.w(i), p.w(i + 1));
    Ok((pooled, logits))
}

/// Accumulates head gradients and returns the gradient for the lowest map.
pub fn head_backward<T: Real>(
    p: &Params<T>,
    head: Head,
    enc: &EncoderTrace<T>,
    pooled: &[T],
    d_logits: &[T],
    g: &mut Params<T>,
) -> Result<Fmap<T>> {
    let i = p.out_idx(head)?;
    let (gw, gb) = g.pair_mut(i);
    let dp = linear_backward(pooled, p.w(i), d_logits, gw, gb);
    let l = &enc.lowest;
    Ok(gap_backward(&dp, l.c, l.h, l.w))
}

/// Backpropagates pyramid gradients (stage outputs then lowest map; entries may
/// be `None`) through the encoder, accumulating into `g`.
pub fn encoder_backward<T: Real>(
    p: &Params<T>,
    enc: &EncoderTrace<T>,
    d_pyr: Vec<Option<Fmap<T>>>,
    g: &mut Params<T>,
) {
    let n = p.arch.stages();
    assert_eq!(d_pyr.len(), n + 1, "pyramid gradient count");
    let mut d_pyr = d_pyr;
    let last = &enc.stages[n - 1].out;
    let mut carry = d_pyr[n]
        .take()
        .map(|d| maxpool_backward(&enc.lowest_arg, &d, last.c, last.h, last.w));
    for s in (0..n).rev() {
        let st = &enc.stages[s];
        let mut d = match (carry.take(), d_pyr[s].take()) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                a
            }
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => continue,
        };
        let c = p.arch.widths[s];
        relu_backward(&st.out, &mut d);
        let i1 = p.enc_idx(s, 1);
        let (gw, gb) = g.pair_mut(i1);
        let mut da = conv_backward(&st.a1, p.w(i1), c, 3, &d, gw, gb);
        relu_backward(&st.a1, &mut da);
        let i0 = p.enc_idx(s, 0);
        let (gw, gb) = g.pair_mut(i0);
        if s == 0 {
            conv_backward_params(&st.input, p.w(i0), c, 3, &da, gw, gb);
        } else {
            let d_in = conv_backward(&st.input, p.w(i0), c, 3, &da, gw, gb);
            let prev = &enc.stages[s - 1].out;
            carry = Some(maxpool_backward(
                &st.pool_arg,
                &d_in,
                prev.c,
                prev.h,
                prev.w,
            ));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{rotation_ce, sigmoid};
    use crate::tinynn::layers::tests::rand_vec;
    use rand::{Rng, SeedableRng};

    fn small_arch() -> Arch {
        Arch {
            in_channels: 1,
            widths: vec![4, 6, 8],
            decoder_width: 4,
            num_classes: 3,
        }
    }

    #[test]
    fn shapes_and_zero_params() {
        let arch = Arch::default();
        let p = Params::<f32>::zeros(&arch).unwrap();
        let img = Fmap::new(1, 64, 64, vec![0.3f32; 64 * 64]);
        let enc = encoder_forward(&p, &img).unwrap();
        let dims: Vec<_> = enc.pyramid().iter().map(|f| (f.c, f.h)).collect();
        assert_eq!(dims, vec![(16, 64), (32, 32), (64, 16), (64, 8)]);
        let dec = decoder_forward(&p, &enc);
        assert_eq!((dec.logits.h, dec.logits.w), (64, 64));
        assert!(dec.probs().iter().all(|&v| v == 0.5));
        let (_, rot) = head_forward(&p, Head::Rotation, &enc).unwrap();
        assert_eq!(rot, vec![0.0; 4]);
        assert!(head_forward(&p, Head::Class, &enc).is_err());
        assert!(encoder_forward(&p, &Fmap::new(1, 12, 12, vec![0.0f32; 144])).is_err());
        let p5 = Params::<f32>::init(
            &Arch {
                num_classes: 5,
                ..arch
            },
            0,
        )
        .unwrap();
        assert_eq!(head_forward(&p5, Head::Class, &enc).unwrap().1.len(), 5);
    }

    #[test]
    fn probs_in_unit_interval() {
        let p = Params::<f32>::init(&small_arch(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Fmap::new(1, 16, 16, (0..256).map(|_| rng.random::<f32>()).collect());
        let enc = encoder_forward(&p, &img).unwrap();
        assert!(decoder_forward(&p, &enc)
            .probs()
            .iter()
            .all(|&v| v > 0.0 && v < 1.0));
    }

    /// Scalar objective touching every path: seg logits against random targets,
    /// rotation CE and a class-logit functional.
    fn objective(p: &Params<f64>, img: &Fmap<f64>, r_seg: &[f64], r_cls: &[f64]) -> f64 {
        let enc = encoder_forward(p, img).unwrap();
        let dec = decoder_forward(p, &enc);
        let seg: f64 = dec
            .logits
            .data
            .iter()
            .zip(r_seg)
            .map(|(&z, &t)| (sigmoid(z) - t).powi(2))
            .sum();
        let (_, rot) = head_forward(p, Head::Rotation, &enc).unwrap();
        let (_, cls) = head_forward(p, Head::Class, &enc).unwrap();
        seg + rotation_ce(&rot, 2).unwrap().value
            + cls.iter().zip(r_cls).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn full_network_gradient_check() {
        let arch = small_arch();
        let mut p = Params::<f64>::init(&arch, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // nonzero biases so ReLUs are not all at the origin
        for t in p.tensors_mut() {
            if t.name.ends_with(".b") {
                t.data = rand_vec(t.data.len(), &mut rng)
                    .iter()
                    .map(|v| 0.1 * v)
                    .collect();
            }
        }
        let img = Fmap::new(1, 16, 16, (0..256).map(|_| rng.random::<f64>()).collect());
        let r_seg: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
        let r_cls = rand_vec(3, &mut rng);

        let enc = encoder_forward(&p, &img).unwrap();
        let dec = decoder_forward(&p, &enc);
        let mut g = p.zeros_like();
        let d_logits: Vec<f64> = dec
            .logits
            .data
            .iter()
            .zip(&r_seg)
            .map(|(&z, &t)| {
                let s = sigmoid(z);
                2.0 * (s - t) * s * (1.0 - s)
            })
            .collect();
        let mut d_pyr: Vec<Option<Fmap<f64>>> = decoder_backward(&p, &enc, &dec, &d_logits, &mut g)
            .into_iter()
            .map(Some)
            .collect();
        let (pooled, rot) = head_forward(&p, Head::Rotation, &enc).unwrap();
        let d_rot = head_backward(
            &p,
            Head::Rotation,
            &enc,
            &pooled,
            &rotation_ce(&rot, 2).unwrap().grad,
            &mut g,
        )
        .unwrap();
        let d_cls = head_backward(&p, Head::Class, &enc, &pooled, &r_cls, &mut g).unwrap();
        let low = d_pyr[3].as_mut().unwrap();
        low.add_assign(&d_rot);
        low.add_assign(&d_cls);
        encoder_backward(&p, &enc, d_pyr, &mut g);

        let mut checked = 0;
        let h = 1e-5;
        let total = p.parameter_count();
        while checked < 100 {
            let flat = rng.random_range(0..total);
            let (mut ti, mut off) = (0, flat);
            while off >= p.tensors()[ti].data.len() {
                off -= p.tensors()[ti].data.len();
                ti += 1;
            }
            let mut pp = p.clone();
            pp.tensors_mut()[ti].data[off] += h;
            let mut pm = p.clone();
            pm.tensors_mut()[ti].data[off] -= h;
            let num = (objective(&pp, &img, &r_seg, &r_cls) - objective(&pm, &img, &r_seg, &r_cls))
                / (2.0 * h);
            let ana = g.tensors()[ti].data[off];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            assert!(
                rel <= 1e-3,
                "{}[{off}]: numeric {num} analytic {ana}",
                p.tensors()[ti].name
            );
            checked += 1;
        }
    }

    #[test]
    fn class_head_swap_keeps_backbone() {
        let p = Params::<f32>::init(&Arch::default(), 1).unwrap();
        let q = p.with_class_head(4, 2).unwrap();
        assert_eq!(q.arch().num_classes, 4);
        for t in p.tensors() {
            let o = q.tensors().iter().find(|o| o.name == t.name).unwrap();
            assert_eq!(o, t);
        }
        assert!(q
            .tensors()
            .iter()
            .any(|t| t.name == "cls.w" && t.shape == vec![4, 64]));
    }

    #[test]
    fn non_finite_is_named() {
        let mut p = Params::<f32>::zeros(&small_arch()).unwrap();
        p.tensors_mut()[5].data[0] = f32::NAN;
        let err = p.check_finite("gradient").unwrap_err().to_string();
        assert!(err.contains("enc.1.conv0.b"), "{err}");
    }
}
