//! Entropy-gated pseudo-labels for the unlabeled domain.
//!
//! A pixel receives its argmax class as a pseudo-label only when the
//! normalized entropy of its predicted distribution falls below a
//! per-class threshold: the Kth decile of that class's entropy population
//! over the whole target training set. Everything else stays ignored
//! (an all-zero one-hot row), contributing no gradient.

use ndarray::{Array3, ArrayView3};

use crate::error::{Result, WdaError};

/// Partial one-hot labels, class-first `(2, H, W)`; an all-zero column
/// means "ignored".
#[derive(Debug, Clone)]
pub struct PseudoLabelMask {
    pub onehot: Array3<u8>,
    /// Fraction of pixels that received a label.
    pub coverage: f64,
}

/// Per-class entropy cutoffs. `v[l] = +inf` means the threshold is vacuous
/// for class `l` (its population was empty when computed).
#[derive(Debug, Clone, Copy)]
pub struct EntropyThresholds {
    pub v: [f64; 2],
    pub k: u8,
}

/// Shannon entropy normalized to `[0,1]` by `log L`, with `0 log 0 := 0`.
///
/// ```
/// use wda::pseudo::normalized_entropy;
///
/// assert_eq!(normalized_entropy(&[0.5, 0.5]).unwrap(), 1.0);
/// assert_eq!(normalized_entropy(&[1.0, 0.0]).unwrap(), 0.0);
/// ```
pub fn normalized_entropy(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(WdaError::Invalid("entropy needs at least two classes".into()));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
        return Err(WdaError::Invalid(format!("not a probability vector: {p:?}")));
    }
    let h: f64 = p.iter().map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 }).sum();
    Ok(h / (p.len() as f64).ln())
}

/// Binary-case entropy of `(p, 1-p)`, normalized by `ln 2`.
fn entropy2(p: f64) -> f64 {
    let q = 1.0 - p;
    let term = |v: f64| if v > 0.0 { -v * v.ln() } else { 0.0 };
    ((term(p) + term(q)) / std::f64::consts::LN_2).clamp(0.0, 1.0)
}

/// Kth decile of a population: the value at 0-based rank
/// `floor(k/10 * n)` after sorting ascending (clamped to the last
/// element). Selecting strictly below it keeps ~k/10 of the population.
fn kth_decile(pop: &mut [f64], k: u8) -> f64 {
    debug_assert!((1..=9).contains(&k));
    debug_assert!(!pop.is_empty());
    pop.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((k as usize * pop.len()) / 10).min(pop.len() - 1);
    pop[idx]
}

/// Population cap above which every 4th pixel is sampled instead.
const MAX_POPULATION: usize = 10_000_000;

/// Per-class Kth-decile entropy thresholds over a set of probability maps
/// (each `(2, H, W)`, channel 1 = foreground). A class nobody predicts
/// gets a vacuous `+inf` threshold and a logged warning.
pub fn compute_thresholds<'a, I>(prob_maps: I, k: u8) -> Result<EntropyThresholds>
where
    I: IntoIterator<Item = ArrayView3<'a, f32>> + Clone,
{
    if !(1..=9).contains(&k) {
        return Err(WdaError::Config(format!("decile index K must be in 1..=9, got {k}")));
    }
    let total: usize = prob_maps.clone().into_iter().map(|m| m.dim().1 * m.dim().2).sum();
    let stride = if total > MAX_POPULATION { 4 } else { 1 };
    let mut pops: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for map in prob_maps {
        let (c, h, w) = map.dim();
        if c != 2 {
            return Err(WdaError::Shape(format!("probability map must have 2 channels, got {c}")));
        }
        for i in (0..h * w).step_by(stride) {
            let (y, x) = (i / w, i % w);
            let fg = map[[1, y, x]] as f64;
            let class = usize::from(fg > 0.5);
            pops[class].push(entropy2(fg));
        }
    }
    let mut v = [f64::INFINITY; 2];
    for (l, pop) in pops.iter_mut().enumerate() {
        if pop.is_empty() {
            log::warn!("entropy threshold: class {l} has an empty population, threshold is vacuous");
        } else {
            v[l] = kth_decile(pop, k);
        }
    }
    Ok(EntropyThresholds { v, k })
}

/// Labels each pixel with its argmax class iff its normalized entropy is
/// strictly below that class's threshold; otherwise leaves it ignored.
pub fn generate_pseudo_labels(prob_map: &ArrayView3<f32>, thresholds: &EntropyThresholds) -> PseudoLabelMask {
    let (c, h, w) = prob_map.dim();
    assert_eq!(c, 2, "probability map must have 2 channels");
    let mut onehot = Array3::<u8>::zeros((2, h, w));
    let mut labeled = 0usize;
    for y in 0..h {
        for x in 0..w {
            let fg = prob_map[[1, y, x]] as f64;
            let class = usize::from(fg > 0.5);
            if entropy2(fg) < thresholds.v[class] {
                onehot[[class, y, x]] = 1;
                labeled += 1;
            }
        }
    }
    PseudoLabelMask { onehot, coverage: labeled as f64 / (h * w) as f64 }
}
