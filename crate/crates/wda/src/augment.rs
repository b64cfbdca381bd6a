//! Augmentation: standard geometric/photometric transforms, and a
//! cut-and-paste scheme that moves the most densely annotated window of
//! one target sample onto the least annotated window of another,
//! carrying the point annotations along.

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{mix_seed, DomainSample};
use crate::error::{Result, WdaError};
use crate::grid;

/// Stochastic augmentation policy; each field independently enables one
/// family of transforms. Points and masks move with the image.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugPolicy {
    pub flips: bool,
    /// Rotations by random multiples of 90 degrees.
    pub rot90: bool,
    /// Gaussian blur sigma drawn uniformly from this range; 0 skips.
    pub blur_sigma_range: (f64, f64),
    /// Additive brightness shift range.
    pub brightness: (f64, f64),
    /// Multiplicative contrast range, applied around 0.5.
    pub contrast: (f64, f64),
    /// Gamma exponent range.
    pub gamma: (f64, f64),
    pub seed: u64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        AugPolicy {
            flips: true,
            rot90: true,
            blur_sigma_range: (0.0, 1.5),
            brightness: (-0.1, 0.1),
            contrast: (0.9, 1.1),
            gamma: (0.8, 1.25),
            seed: 0,
        }
    }
}

/// Cut-and-paste configuration. The donor window is the crop of `a` with
/// the most annotated points; the recipient window is the crop of `b`
/// with the fewest.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CPAugConfig {
    pub crop_hw: (usize, usize),
    /// Re-center points of instances the crop cuts, using the current
    /// segmentation probabilities.
    pub boundary_relabel: bool,
}

impl Default for CPAugConfig {
    fn default() -> Self {
        CPAugConfig { crop_hw: (64, 64), boundary_relabel: true }
    }
}

fn flip_rows<T: Copy>(a: &Array2<T>) -> Array2<T> {
    a.slice(s![..;-1, ..]).to_owned()
}

fn flip_cols<T: Copy>(a: &Array2<T>) -> Array2<T> {
    a.slice(s![.., ..;-1]).to_owned()
}

/// Clockwise quarter turn: out[y, x] = in[h-1-x, y].
fn rot90_cw<T: Copy + Default>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((w, h), |(y, x)| a[[h - 1 - x, y]])
}

/// Horizontal flip (columns reversed) of image, mask, and points.
pub fn flip_h(sample: &DomainSample) -> DomainSample {
    let w = sample.image.dim().1;
    DomainSample {
        image: flip_cols(&sample.image),
        mask: sample.mask.as_ref().map(flip_cols),
        points: sample
            .points
            .as_ref()
            .map(|ps| ps.iter().map(|&(r, c)| (r, w - 1 - c)).collect()),
        domain: sample.domain,
        id: sample.id.clone(),
    }
}

/// Vertical flip (rows reversed) of image, mask, and points.
pub fn flip_v(sample: &DomainSample) -> DomainSample {
    let h = sample.image.dim().0;
    DomainSample {
        image: flip_rows(&sample.image),
        mask: sample.mask.as_ref().map(flip_rows),
        points: sample
            .points
            .as_ref()
            .map(|ps| ps.iter().map(|&(r, c)| (h - 1 - r, c)).collect()),
        domain: sample.domain,
        id: sample.id.clone(),
    }
}

/// Rotation by `k` clockwise quarter turns.
pub fn rot90k(sample: &DomainSample, k: usize) -> DomainSample {
    let mut out = sample.clone();
    for _ in 0..k % 4 {
        let h = out.image.dim().0;
        out = DomainSample {
            image: rot90_cw(&out.image),
            mask: out.mask.as_ref().map(rot90_cw),
            points: out
                .points
                .as_ref()
                .map(|ps| ps.iter().map(|&(r, c)| (c, h - 1 - r)).collect()),
            domain: out.domain,
            id: out.id,
        };
    }
    out
}

/// Random flips and quarter turns; the identical transform is applied to
/// image, mask, and points.
pub fn apply_geometric(sample: &DomainSample, policy: &AugPolicy, draw: u64) -> DomainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(policy.seed, 5, draw));
    let mut out = sample.clone();
    if policy.flips {
        if rng.gen::<bool>() {
            out = flip_h(&out);
        }
        if rng.gen::<bool>() {
            out = flip_v(&out);
        }
    }
    if policy.rot90 {
        let k = rng.gen_range(0..4usize);
        out = rot90k(&out, k);
    }
    out
}

/// Random blur, brightness, contrast, and gamma on the image only;
/// output stays in [0, 1].
pub fn apply_photometric(sample: &DomainSample, policy: &AugPolicy, draw: u64) -> DomainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(policy.seed, 6, draw));
    let mut img = sample.image.clone();
    let (lo, hi) = policy.blur_sigma_range;
    let sigma = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    if sigma > 1e-3 {
        img = grid::gaussian_blur(&img, sigma);
    }
    let contrast = sample_range(&mut rng, policy.contrast);
    let brightness = sample_range(&mut rng, policy.brightness);
    let gamma = sample_range(&mut rng, policy.gamma);
    img.mapv_inplace(|v| {
        let v = 0.5 + contrast as f32 * (v - 0.5) + brightness as f32;
        v.clamp(0.0, 1.0).powf(gamma as f32)
    });
    DomainSample { image: img, ..sample.clone() }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Geometric then photometric augmentation under one policy draw.
pub fn apply_policy(sample: &DomainSample, policy: &AugPolicy, draw: u64) -> DomainSample {
    apply_photometric(&apply_geometric(sample, policy, draw), policy, draw)
}

/// Crop-window count scan: positions step by crop/4 per axis; returns the
/// first window in row-major scan order that attains the best count.
fn scan_windows(
    points: &[(usize, usize)],
    hw: (usize, usize),
    crop: (usize, usize),
    take_max: bool,
) -> (usize, usize) {
    let (h, w) = hw;
    let (ch, cw) = crop;
    let (sy, sx) = ((ch / 4).max(1), (cw / 4).max(1));
    let mut best: Option<((usize, usize), usize)> = None;
    let mut y = 0;
    while y + ch <= h {
        let mut x = 0;
        while x + cw <= w {
            let n = points
                .iter()
                .filter(|&&(r, c)| r >= y && r < y + ch && c >= x && c < x + cw)
                .count();
            let better = match best {
                None => true,
                Some((_, bn)) => {
                    if take_max {
                        n > bn
                    } else {
                        n < bn
                    }
                }
            };
            if better {
                best = Some(((y, x), n));
            }
            x += sx;
        }
        y += sy;
    }
    best.expect("crop fits, so at least one window exists").0
}

/// Cuts the most annotated `cfg.crop_hw` window out of `a` and pastes it
/// over the least annotated window of `b`, merging point annotations.
///
/// With `boundary_relabel` and segmentation probabilities for `a`
/// (`seg_prob_a`, channel-first `(2, H, W)`), any annotated instance the
/// crop cuts has its point re-centered on the in-crop part of its
/// estimated component. Fully deterministic in its inputs.
pub fn cp_aug(
    a: &DomainSample,
    b: &DomainSample,
    cfg: &CPAugConfig,
    seg_prob_a: Option<&Array3<f32>>,
) -> Result<DomainSample> {
    cp_aug_traced(a, b, cfg, seg_prob_a).map(|(sample, _)| sample)
}

/// The window corners a [`cp_aug_traced`] call settled on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CpWindows {
    /// Top-left of the window cut out of the donor.
    pub src: (usize, usize),
    /// Top-left of the window overwritten in the recipient.
    pub dst: (usize, usize),
}

/// [`cp_aug`] that also reports which windows were used, so callers can
/// composite any side-channel maps (cached probabilities, pseudo-labels)
/// the same way.
pub fn cp_aug_traced(
    a: &DomainSample,
    b: &DomainSample,
    cfg: &CPAugConfig,
    seg_prob_a: Option<&Array3<f32>>,
) -> Result<(DomainSample, CpWindows)> {
    let (ch, cw) = cfg.crop_hw;
    let (ah, aw) = a.image.dim();
    let (bh, bw) = b.image.dim();
    if ch == 0 || cw == 0 || ch > ah || cw > aw || ch > bh || cw > bw {
        return Err(WdaError::Config(format!(
            "crop {ch}x{cw} does not fit donor {ah}x{aw} and recipient {bh}x{bw}"
        )));
    }
    let a_points = a.points.clone().unwrap_or_default();
    let b_points = b.points.clone().unwrap_or_default();
    let (ay, ax) = scan_windows(&a_points, (ah, aw), (ch, cw), true);
    let (by, bx) = scan_windows(&b_points, (bh, bw), (ch, cw), false);

    let mut image = b.image.clone();
    image
        .slice_mut(s![by..by + ch, bx..bx + cw])
        .assign(&a.image.slice(s![ay..ay + ch, ax..ax + cw]));
    let mask = match (&a.mask, &b.mask) {
        (Some(am), Some(bm)) => {
            let mut m = bm.clone();
            m.slice_mut(s![by..by + ch, bx..bx + cw])
                .assign(&am.slice(s![ay..ay + ch, ax..ax + cw]));
            Some(m)
        }
        _ => None,
    };

    // Estimated components of a, labeled once, for boundary relabeling.
    let comp = match (cfg.boundary_relabel, seg_prob_a) {
        (true, Some(p)) => {
            let fg = Array2::from_shape_fn((ah, aw), |(r, c)| u8::from(p[[1, r, c]] > 0.5));
            Some(grid::connected_components(&fg).0)
        }
        _ => None,
    };

    let mut points: Vec<(usize, usize)> = b_points
        .iter()
        .copied()
        .filter(|&(r, c)| !(r >= by && r < by + ch && c >= bx && c < bx + cw))
        .collect();
    for &(r, c) in a_points.iter().filter(|&&(r, c)| r >= ay && r < ay + ch && c >= ax && c < ax + cw)
    {
        let (mut pr, mut pc) = (r, c);
        if let Some(labels) = &comp {
            let id = labels[[r, c]];
            if id != 0 {
                let mut inside = Vec::new();
                let mut cut = false;
                for rr in 0..ah {
                    for cc in 0..aw {
                        if labels[[rr, cc]] == id {
                            if rr >= ay && rr < ay + ch && cc >= ax && cc < ax + cw {
                                inside.push((rr, cc));
                            } else {
                                cut = true;
                            }
                        }
                    }
                }
                if cut && !inside.is_empty() {
                    let n = inside.len() as f64;
                    let cy = inside.iter().map(|p| p.0 as f64).sum::<f64>() / n;
                    let cx = inside.iter().map(|p| p.1 as f64).sum::<f64>() / n;
                    // Snap to the nearest in-crop component pixel so the
                    // point stays on the instance even when it is concave.
                    (pr, pc) = *inside
                        .iter()
                        .min_by(|p, q| {
                            let dp = (p.0 as f64 - cy).powi(2) + (p.1 as f64 - cx).powi(2);
                            let dq = (q.0 as f64 - cy).powi(2) + (q.1 as f64 - cx).powi(2);
                            dp.total_cmp(&dq)
                        })
                        .unwrap();
                }
            }
        }
        points.push((pr - ay + by, pc - ax + bx));
    }

    let sample = DomainSample {
        image,
        mask,
        points: Some(points),
        domain: b.domain,
        id: format!("{}+{}", b.id, a.id),
    };
    Ok((sample, CpWindows { src: (ay, ax), dst: (by, bx) }))
}

#[cfg(test)]
mod tests;
