//! Scalar-intensity k-means restricted to a region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raster::{BinaryMask, ImageCrop};
use crate::error::{Error, Result};

const MAX_ITERS: usize = 100;
const TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    height: usize,
    width: usize,
    /// Cluster index per pixel, `None` outside the region. Index 0 is the darkest cluster.
    pub labels: Vec<Option<u8>>,
    /// Ascending.
    pub centroids: Vec<f64>,
    /// Set when the region had fewer distinct intensities than requested clusters.
    pub reduced_k: bool,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_mask(&self, idx: usize) -> BinaryMask {
        let bits = self.labels.iter().map(|l| *l == Some(idx as u8)).collect();
        BinaryMask::new(self.height, self.width, bits).expect("label dims")
    }

    /// Within-cluster sum of squared deviations.
    pub fn sse(&self, img: &ImageCrop) -> f64 {
        self.labels
            .iter()
            .zip(img.data())
            .filter_map(|(l, &v)| l.map(|l| (v as f64 - self.centroids[l as usize]).powi(2)))
            .sum()
    }
}

/// Lloyd's algorithm on the single-channel intensities inside `region`.
///
/// Centroids start at the `(2i+1)/2k` quantiles of the region's intensities;
/// iteration stops once no centroid moves more than 1e-6 or after 100 rounds.
/// An emptied cluster is reseeded from a seeded random region pixel.
pub fn kmeans_intensity(
    img: &ImageCrop,
    k: usize,
    seed: u64,
    region: &BinaryMask,
) -> Result<KMeansResult> {
    if img.channels() != 1 {
        return Err(Error::InvalidArgument(
            "k-means expects a single-channel image".into(),
        ));
    }
    if region.height() != img.height() || region.width() != img.width() {
        return Err(Error::Shape("region does not match image".into()));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be >= 2, got {k}")));
    }
    let idx: Vec<usize> = (0..region.bits().len())
        .filter(|&i| region.bits()[i])
        .collect();
    if idx.is_empty() {
        return Err(Error::Degenerate("empty k-means region".into()));
    }
    let values: Vec<f64> = idx.iter().map(|&i| img.data()[i] as f64).collect();
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    let reduced_k = distinct.len() < k;
    let k = k.min(distinct.len());

    let n = sorted.len();
    let mut centroids: Vec<f64> = (0..k)
        .map(|i| {
            let q = (2 * i + 1) as f64 / (2 * k) as f64;
            sorted[((q * n as f64).floor() as usize).min(n - 1)]
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = vec![0usize; n];
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        iterations += 1;
        for (a, &v) in assign.iter_mut().zip(&values) {
            *a = nearest(&centroids, v);
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&a, &v) in assign.iter().zip(&values) {
            sums[a] += v;
            counts[a] += 1;
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let next = if counts[c] > 0 {
                sums[c] / counts[c] as f64
            } else {
                values[rng.random_range(0..n)]
            };
            shift = shift.max((next - centroids[c]).abs());
            centroids[c] = next;
        }
        if shift < TOL {
            break;
        }
    }
    for (a, &v) in assign.iter_mut().zip(&values) {
        *a = nearest(&centroids, v);
    }

    // relabel so centroids ascend
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]));
    let mut rank = vec![0u8; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r as u8;
    }
    let mut labels = vec![None; img.height() * img.width()];
    for (&pix, &a) in idx.iter().zip(&assign) {
        labels[pix] = Some(rank[a]);
    }
    Ok(KMeansResult {
        height: img.height(),
        width: img.width(),
        labels,
        centroids: order.iter().map(|&c| centroids[c]).collect(),
        reduced_k,
        iterations,
    })
}

fn nearest(centroids: &[f64], v: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in centroids.iter().enumerate() {
        let d = (v - c).abs();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_level() -> ImageCrop {
        ImageCrop::gray_from_fn(9, 9, |x, y| [0.1, 0.5, 0.9][(x + 2 * y) % 3])
    }

    #[test]
    fn recovers_three_levels_exactly() {
        let img = three_level();
        let r = kmeans_intensity(&img, 3, 0, &BinaryMask::full(9, 9)).unwrap();
        assert!(!r.reduced_k);
        for (c, want) in r.centroids.iter().zip([0.1, 0.5, 0.9]) {
            assert!((c - want).abs() < 1e-6, "{c} vs {want}");
        }
        let dark = r.cluster_mask(0);
        for y in 0..9 {
            for x in 0..9 {
                assert_eq!(dark.get(x, y), (img.get(x, y, 0) - 0.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reduces_k_when_too_few_levels() {
        let img = ImageCrop::gray_from_fn(4, 4, |x, _| if x < 2 { 0.2 } else { 0.7 });
        let r = kmeans_intensity(&img, 3, 0, &BinaryMask::full(4, 4)).unwrap();
        assert!(r.reduced_k);
        assert_eq!(r.k(), 2);
    }

    #[test]
    fn respects_region_and_is_deterministic() {
        let img = three_level();
        let region = BinaryMask::from_fn(9, 9, |x, _| x < 4);
        let a = kmeans_intensity(&img, 3, 42, &region).unwrap();
        let b = kmeans_intensity(&img, 3, 42, &region).unwrap();
        assert_eq!(a, b);
        assert!(a
            .labels
            .iter()
            .enumerate()
            .all(|(i, l)| l.is_some() == region.bits()[i]));
    }

    #[test]
    fn beats_random_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..144).map(|_| rng.random::<f32>()).collect();
        let img = ImageCrop::new(12, 12, 1, data).unwrap();
        let r = kmeans_intensity(&img, 3, 0, &BinaryMask::full(12, 12)).unwrap();
        let sse = r.sse(&img);
        for _ in 0..1000 {
            let mut sums = [0.0f64; 3];
            let mut sq = [0.0f64; 3];
            let mut n = [0usize; 3];
            for &v in img.data() {
                let g = rng.random_range(0..3);
                sums[g] += v as f64;
                sq[g] += (v as f64).powi(2);
                n[g] += 1;
            }
            let part: f64 = (0..3)
                .filter(|&g| n[g] > 0)
                .map(|g| sq[g] - sums[g].powi(2) / n[g] as f64)
                .sum();
            assert!(sse <= part + 1e-9);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let img = three_level();
        assert!(kmeans_intensity(&img, 1, 0, &BinaryMask::full(9, 9)).is_err());
        assert!(kmeans_intensity(&img, 3, 0, &BinaryMask::empty(9, 9)).is_err());
        assert!(kmeans_intensity(&img, 3, 0, &BinaryMask::full(8, 9)).is_err());
    }
}
