//! Source annotation refinement: snaps each instance mask to nearby
//! image boundaries with a morphological geodesic active contour, so
//! that roughly drawn source labels line up with actual edges before
//! training.
//!
//! The contour is evolved per instance and clamped to a band around the
//! original annotation, which together forbid splits and merges: the
//! output has exactly as many instances as the input.

use ndarray::{s, Array2};

use crate::data::{Domain, DomainSample};
use crate::error::{Result, WdaError};
use crate::grid;

/// Contour evolution settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SarConfig {
    pub iterations: usize,
    /// Curvature smoothing passes per iteration.
    pub smoothing: usize,
    /// Maximum displacement from the original annotation, in pixels.
    pub band_px: usize,
    /// Uniform inflation (>0) or deflation (<0) pressure; 0 disables.
    pub balloon: f64,
}

impl Default for SarConfig {
    fn default() -> Self {
        SarConfig { iterations: 30, smoothing: 1, band_px: 6, balloon: 0.0 }
    }
}

const EDGE_ALPHA: f32 = 1000.0;
const EDGE_SIGMA: f64 = 2.0;

/// Inverse-gradient edge-stopping map g = 1 / (1 + alpha |grad(G_2 * I)|^2):
/// close to 1 on flat regions, small on edges.
pub fn edge_stopping_map(image: &Array2<f32>) -> Array2<f32> {
    let sm = grid::gaussian_blur(image, EDGE_SIGMA);
    let (h, w) = sm.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let gy = (sm[[(r + 1).min(h - 1), c]] - sm[[r.saturating_sub(1), c]]) * 0.5;
        let gx = (sm[[r, (c + 1).min(w - 1)]] - sm[[r, c.saturating_sub(1)]]) * 0.5;
        1.0 / (1.0 + EDGE_ALPHA * (gx * gx + gy * gy))
    })
}

/// Length-3 line structuring elements through the center.
const LINES: [[(isize, isize); 3]; 4] = [
    [(0, -1), (0, 0), (0, 1)],
    [(-1, 0), (0, 0), (1, 0)],
    [(-1, -1), (0, 0), (1, 1)],
    [(-1, 1), (0, 0), (1, -1)],
];

fn probe(u: &Array2<u8>, r: usize, c: usize, d: (isize, isize)) -> u8 {
    let (h, w) = u.dim();
    let (rr, cc) = (r as isize + d.0, c as isize + d.1);
    if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
        0
    } else {
        u[[rr as usize, cc as usize]]
    }
}

/// max over lines of (min over the line): removes single-pixel spurs.
fn sup_inf(u: &Array2<u8>) -> Array2<u8> {
    Array2::from_shape_fn(u.dim(), |(r, c)| {
        LINES
            .iter()
            .map(|l| l.iter().map(|&d| probe(u, r, c, d)).min().unwrap())
            .max()
            .unwrap()
    })
}

/// min over lines of (max over the line): fills single-pixel pits.
fn inf_sup(u: &Array2<u8>) -> Array2<u8> {
    Array2::from_shape_fn(u.dim(), |(r, c)| {
        LINES
            .iter()
            .map(|l| l.iter().map(|&d| probe(u, r, c, d)).max().unwrap())
            .min()
            .unwrap()
    })
}

/// One attachment step: move the contour along the edge-stopping map's
/// gradient where it crosses the current boundary. Forces below `eps`
/// are numerical noise at a valley bottom and leave the pixel alone.
fn attach(u: &Array2<u8>, dgy: &Array2<f32>, dgx: &Array2<f32>, eps: f32) -> Array2<u8> {
    let (h, w) = u.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let duy = (probe(u, r, c, (1, 0)) as f32 - probe(u, r, c, (-1, 0)) as f32) * 0.5;
        let dux = (probe(u, r, c, (0, 1)) as f32 - probe(u, r, c, (0, -1)) as f32) * 0.5;
        let dot = dgy[[r, c]] * duy + dgx[[r, c]] * dux;
        if dot > eps {
            1
        } else if dot < -eps {
            0
        } else {
            u[[r, c]]
        }
    })
}

/// Refines every instance of a binary source mask toward image edges.
///
/// Each 8-connected instance evolves independently for `cfg.iterations`
/// steps, stays within `band_px` of its original footprint, and keeps a
/// one-pixel separation from every other instance, so the instance count
/// never changes. An empty mask is returned unchanged.
pub fn refine_source_mask(
    image: &Array2<f32>,
    mask: &Array2<u8>,
    cfg: &SarConfig,
) -> Result<Array2<u8>> {
    if image.dim() != mask.dim() {
        return Err(WdaError::Shape(format!(
            "image {:?} vs mask {:?}",
            image.dim(),
            mask.dim()
        )));
    }
    if mask.iter().any(|&v| v > 1) {
        return Err(WdaError::Invalid("mask must be binary".into()));
    }
    let (labels, n) = grid::connected_components(mask);
    if n == 0 {
        return Ok(mask.clone());
    }
    let (h, w) = mask.dim();
    let g = edge_stopping_map(image);
    let dgy = Array2::from_shape_fn((h, w), |(r, c)| {
        (g[[(r + 1).min(h - 1), c]] - g[[r.saturating_sub(1), c]]) * 0.5
    });
    let dgx = Array2::from_shape_fn((h, w), |(r, c)| {
        (g[[r, (c + 1).min(w - 1)]] - g[[r, c.saturating_sub(1)]]) * 0.5
    });

    // First-writer composition of the per-instance results.
    let mut out_labels = Array2::<u32>::zeros((h, w));
    for inst in 1..=n as u32 {
        let mut r0 = h;
        let mut r1 = 0;
        let mut c0 = w;
        let mut c1 = 0;
        for ((r, c), &l) in labels.indexed_iter() {
            if l == inst {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
        let m = cfg.band_px + 3;
        let (wr0, wc0) = (r0.saturating_sub(m), c0.saturating_sub(m));
        let (wr1, wc1) = ((r1 + m + 1).min(h), (c1 + m + 1).min(w));
        let win = s![wr0..wr1, wc0..wc1];
        let wl = labels.slice(win);
        let u0 = wl.mapv(|l| u8::from(l == inst));
        let others = wl.mapv(|l| u8::from(l != 0 && l != inst));
        let band = grid::dilate_disk(&u0, cfg.band_px);
        let core = grid::erode_disk(&u0, cfg.band_px);
        // One-pixel exclusion zone around other instances prevents merges.
        let excl = grid::dilate_disk(&others, 1);
        let allowed =
            Array2::from_shape_fn(u0.dim(), |p| band[p] & (1 - excl[p]));
        let wdgy = dgy.slice(win).to_owned();
        let wdgx = dgx.slice(win).to_owned();
        let wg = g.slice(win);
        let scale = wdgy.iter().chain(wdgx.iter()).fold(0.0f32, |m, v| m.max(v.abs()));
        let eps = 1e-3 * scale;

        let mut u = u0.clone();
        for it in 0..cfg.iterations {
            if cfg.balloon != 0.0 {
                // Inflate or deflate only where no edge resists.
                let aux = if cfg.balloon > 0.0 {
                    grid::dilate_disk(&u, 1)
                } else {
                    grid::erode_disk(&u, 1)
                };
                for (p, v) in u.indexed_iter_mut() {
                    if wg[p] > 0.8 {
                        *v = aux[p];
                    }
                }
            }
            for _ in 0..cfg.smoothing {
                let s = if it % 2 == 0 { inf_sup(&sup_inf(&u)) } else { sup_inf(&inf_sup(&u)) };
                // Curvature smoothing regularizes only where the image
                // offers no edge; near edges the data term governs.
                for (p, v) in u.indexed_iter_mut() {
                    if wg[p] > 0.5 {
                        *v = s[p];
                    }
                }
            }
            u = attach(&u, &wdgy, &wdgx, eps);
            for (p, v) in u.indexed_iter_mut() {
                *v = (*v & allowed[p]) | core[p];
            }
        }
        for ((r, c), &v) in u.indexed_iter() {
            if v == 1 && out_labels[[wr0 + r, wc0 + c]] == 0 {
                out_labels[[wr0 + r, wc0 + c]] = inst;
            }
        }
    }

    // Carve a one-pixel gap wherever two refined instances ended up
    // adjacent; only expansion pixels can be adjacent, so originals stay.
    let mut carve = Vec::new();
    for ((r, c), &l) in out_labels.indexed_iter() {
        if l == 0 {
            continue;
        }
        'n: for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                    continue;
                }
                let o = out_labels[[rr as usize, cc as usize]];
                if o != 0 && o != l {
                    carve.push((r, c));
                    break 'n;
                }
            }
        }
    }
    for p in carve {
        out_labels[p] = 0;
    }

    // Exactly one component per instance: keep the largest piece, or fall
    // back to the original annotation if evolution erased it.
    let mut out = Array2::<u8>::zeros((h, w));
    for inst in 1..=n as u32 {
        let bin = out_labels.mapv(|l| u8::from(l == inst));
        let (comp, k) = grid::connected_components(&bin);
        if k == 0 {
            for (p, &l) in labels.indexed_iter() {
                if l == inst {
                    out[p] = 1;
                }
            }
            continue;
        }
        let mut areas = vec![0usize; k + 1];
        for &cl in comp.iter() {
            if cl > 0 {
                areas[cl as usize] += 1;
            }
        }
        let keep = (1..=k).max_by_key(|&i| (areas[i], usize::MAX - i)).unwrap() as u32;
        for (p, &cl) in comp.indexed_iter() {
            if cl == keep {
                out[p] = 1;
            }
        }
    }
    Ok(out)
}

/// Refinement is a source-annotation repair; target labels are withheld
/// by design, so target samples are rejected outright.
pub fn refine_sample(sample: &DomainSample, cfg: &SarConfig) -> Result<DomainSample> {
    if sample.domain != Domain::Source {
        return Err(WdaError::Invalid(format!(
            "refinement only applies to source masks, got a {:?} sample",
            sample.domain
        )));
    }
    let mask = sample
        .mask
        .as_ref()
        .ok_or_else(|| WdaError::Invalid("sample has no mask to refine".into()))?;
    let refined = refine_source_mask(&sample.image, mask, cfg)?;
    Ok(DomainSample { mask: Some(refined), ..sample.clone() })
}

#[cfg(test)]
mod tests;
