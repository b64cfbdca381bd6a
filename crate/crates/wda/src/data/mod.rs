//! Domain types, point sampling, and dataset plumbing.
//!
//! A [`DomainSample`] is one 2-d slice with whatever supervision its domain
//! provides: dense masks and full center points on the source domain,
//! sparse center points on the target training split, evaluation-only
//! masks on the target test split.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, WdaError};
use crate::grid;

pub mod io;
pub mod synth;

/// Which distribution a sample was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One image slice plus its available annotations.
#[derive(Debug, Clone)]
pub struct DomainSample {
    /// Intensities in `[0,1]`, shape `(H, W)`.
    pub image: Array2<f32>,
    /// Dense binary labels, if this split has them.
    pub mask: Option<Array2<u8>>,
    /// Instance center points `(row, col)`; full on source, sparse on target.
    pub points: Option<Vec<(usize, usize)>>,
    pub domain: Domain,
    pub id: String,
}

impl DomainSample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }
}

/// Instance ids over a grid: 0 = background, ids run 1..=count, one
/// 8-connected component each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabelMap {
    pub labels: Array2<u32>,
    pub count: usize,
}

impl InstanceLabelMap {
    /// Labels the 8-connected components of a binary mask.
    pub fn from_mask(mask: &Array2<u8>) -> Self {
        let (labels, count) = grid::connected_components(mask);
        InstanceLabelMap { labels, count }
    }

    pub fn to_mask(&self) -> Array2<u8> {
        self.labels.mapv(|l| u8::from(l != 0))
    }
}

/// How many of an image's center points to keep when simulating a sparse
/// annotator.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SparsePointBudget {
    /// Fraction of instances annotated, in `(0, 1]`.
    pub ratio: f64,
    pub seed: u64,
}

/// One center point per 8-connected component: the rounded pixel-mean
/// centroid, snapped to the nearest component pixel when the centroid
/// falls outside (concave shapes).
///
/// ```
/// use ndarray::Array2;
/// use wda::data::centers_from_mask;
///
/// let mut mask = Array2::<u8>::zeros((8, 8));
/// for y in 2..=4 {
///     for x in 2..=4 {
///         mask[[y, x]] = 1;
///     }
/// }
/// assert_eq!(centers_from_mask(&mask), vec![(3, 3)]);
/// ```
pub fn centers_from_mask(mask: &Array2<u8>) -> Vec<(usize, usize)> {
    let inst = InstanceLabelMap::from_mask(mask);
    let cents = grid::centroids(&inst.labels, inst.count);
    let mut out = Vec::with_capacity(inst.count);
    for (k, &(cy, cx)) in cents.iter().enumerate() {
        let id = (k + 1) as u32;
        let (ry, rx) = (cy.round() as usize, cx.round() as usize);
        if inst.labels.get((ry, rx)) == Some(&id) {
            out.push((ry, rx));
            continue;
        }
        // Concave component: snap to its pixel nearest the true centroid.
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for ((y, x), &l) in inst.labels.indexed_iter() {
            if l == id {
                let d = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                if d < best_d {
                    best_d = d;
                    best = Some((y, x));
                }
            }
        }
        out.push(best.expect("component has pixels"));
    }
    out
}

/// Uniform sample without replacement of `round(ratio * N)` points (at
/// least one when any exist), in original order. The same seed always
/// selects the same subset.
pub fn sample_sparse_points(
    points: &[(usize, usize)],
    budget: SparsePointBudget,
) -> Result<Vec<(usize, usize)>> {
    if !(budget.ratio > 0.0 && budget.ratio <= 1.0) {
        return Err(WdaError::Config(format!(
            "sparse ratio must be in (0,1], got {}",
            budget.ratio
        )));
    }
    let n = points.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = ((budget.ratio * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| points[i]).collect())
}

/// Stateless seed mixer for deriving independent substreams, after
/// SplitMix64's finalizer.
pub(crate) fn mix_seed(base: u64, stream: u64, k: u64) -> u64 {
    let mut x = base
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(stream.wrapping_add(1)))
        .wrapping_add(0xbf58476d1ce4e5b9u64.wrapping_mul(k.wrapping_add(1)));
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_of_empty_mask_are_empty() {
        let mask = Array2::<u8>::zeros((4, 4));
        assert!(centers_from_mask(&mask).is_empty());
    }

    #[test]
    fn concave_component_center_stays_inside_it() {
        // U shape: centroid lands in the hole between the arms.
        let mut mask = Array2::<u8>::zeros((10, 10));
        for y in 1..8 {
            mask[[y, 2]] = 1;
            mask[[y, 6]] = 1;
        }
        for x in 2..=6 {
            mask[[7, x]] = 1;
        }
        let pts = centers_from_mask(&mask);
        assert_eq!(pts.len(), 1);
        let (r, c) = pts[0];
        assert_eq!(mask[[r, c]], 1, "snapped point must lie on the component");

        // Oracle: brute-force nearest component pixel to the exact centroid.
        let (mut sy, mut sx, mut n) = (0.0f64, 0.0f64, 0usize);
        for ((y, x), &m) in mask.indexed_iter() {
            if m != 0 {
                sy += y as f64;
                sx += x as f64;
                n += 1;
            }
        }
        let (cy, cx) = (sy / n as f64, sx / n as f64);
        let mut best = (0, 0);
        let mut best_d = f64::INFINITY;
        for ((y, x), &m) in mask.indexed_iter() {
            if m != 0 {
                let d = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                if d < best_d {
                    best_d = d;
                    best = (y, x);
                }
            }
        }
        assert_eq!(pts[0], best);
    }

    #[test]
    fn sparse_sampling_rounds_and_floors_to_one() {
        let pts: Vec<(usize, usize)> = (0..20).map(|i| (i, i)).collect();
        let got = sample_sparse_points(&pts, SparsePointBudget { ratio: 0.15, seed: 1 }).unwrap();
        assert_eq!(got.len(), 3);
        let one = sample_sparse_points(&pts[..1], SparsePointBudget { ratio: 0.05, seed: 1 }).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn sparse_sampling_is_deterministic_and_without_replacement() {
        let pts: Vec<(usize, usize)> = (0..40).map(|i| (i, 2 * i)).collect();
        let b = SparsePointBudget { ratio: 0.25, seed: 99 };
        let a = sample_sparse_points(&pts, b).unwrap();
        let c = sample_sparse_points(&pts, b).unwrap();
        assert_eq!(a, c);
        let mut uniq = a.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), a.len());
        for p in &a {
            assert!(pts.contains(p));
        }
    }

    #[test]
    fn sparse_ratio_out_of_range_is_a_config_error() {
        let pts = vec![(1, 1)];
        assert!(sample_sparse_points(&pts, SparsePointBudget { ratio: 0.0, seed: 0 }).is_err());
        assert!(sample_sparse_points(&pts, SparsePointBudget { ratio: 1.5, seed: 0 }).is_err());
    }
}
