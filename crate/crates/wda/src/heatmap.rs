//! Gaussian density heatmaps for center points, the spatial weight maps
//! used by the detection loss, and peak extraction from predicted maps.
//!
//! Density maps are normalized so that each point contributes unit mass
//! even at image borders, which makes the grid sum a count estimate.

use ndarray::Array2;

use crate::error::{Result, WdaError};

/// A rendered point-density grid whose integral equals the point count.
#[derive(Debug, Clone)]
pub struct DensityMap {
    pub values: Array2<f32>,
    pub sigma: f64,
}

impl DensityMap {
    /// Count estimate: the integral of the map.
    pub fn total_mass(&self) -> f64 {
        total_mass(&self.values)
    }
}

/// Sum of a density grid in double precision.
pub fn total_mass(values: &Array2<f32>) -> f64 {
    values.iter().map(|&v| v as f64).sum()
}

/// Spatial weights for the detection loss on the sparse domain: `w` marks
/// pixels where the ground truth is considered known (confident background
/// or near an annotated center), `beta` concentrates extra weight in a
/// small neighborhood of each center.
#[derive(Debug, Clone)]
pub struct WeightMaps {
    pub w: Array2<u8>,
    pub beta: Array2<f32>,
}

/// Detected heatmap peaks, strongest first.
#[derive(Debug, Clone)]
pub struct PeakSet {
    /// `(row, col, score)` with pairwise distances > `nms_radius`.
    pub peaks: Vec<(usize, usize, f32)>,
    pub nms_radius: f64,
}

impl PeakSet {
    pub fn count(&self) -> usize {
        self.peaks.len()
    }
}

/// Sum of truncated (±4 sigma), per-point renormalized Gaussians.
///
/// Renormalization runs over the in-bounds part of each point's window, so
/// corner points still contribute exactly unit mass.
///
/// ```
/// use wda::heatmap::render_density;
///
/// let d = render_density(&[(0, 0)], 64, 64, 10.0);
/// assert!((d.total_mass() - 1.0).abs() <= 1e-3);
/// ```
pub fn render_density(points: &[(usize, usize)], h: usize, w: usize, sigma: f64) -> DensityMap {
    assert!(sigma > 0.0, "render_density: sigma must be positive");
    let mut values = Array2::<f32>::zeros((h, w));
    let r = (4.0 * sigma).ceil() as i64;
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
    for &(py, px) in points {
        debug_assert!(py < h && px < w, "point outside grid");
        let y0 = (py as i64 - r).max(0);
        let y1 = (py as i64 + r).min(h as i64 - 1);
        let x0 = (px as i64 - r).max(0);
        let x1 = (px as i64 + r).min(w as i64 - 1);
        let mut mass = 0.0f64;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = ((y - py as i64).pow(2) + (x - px as i64).pow(2)) as f64;
                if d2 <= (r * r) as f64 {
                    mass += (-d2 * inv_2s2).exp();
                }
            }
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = ((y - py as i64).pow(2) + (x - px as i64).pow(2)) as f64;
                if d2 <= (r * r) as f64 {
                    values[[y as usize, x as usize]] += ((-d2 * inv_2s2).exp() / mass) as f32;
                }
            }
        }
    }
    DensityMap { values, sigma }
}

/// Builds the detection weight maps for a sparsely annotated image:
/// `w = 1` where the foreground probability is below `rho` (confident
/// background) or inside the support of the sigma1 heatmap of the
/// annotated points; `beta` is the sigma2 density of the same points.
pub fn build_weight_maps(
    sparse_points: &[(usize, usize)],
    fg_prob: &Array2<f32>,
    rho: f64,
    sigma2: f64,
    sigma1: f64,
) -> Result<WeightMaps> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(WdaError::Config(format!("rho must be in (0,1), got {rho}")));
    }
    let (h, w) = fg_prob.dim();
    for &(r, c) in sparse_points {
        if r >= h || c >= w {
            return Err(WdaError::Shape(format!("point ({r},{c}) outside {h}x{w} probability map")));
        }
    }
    let hbar = render_density(sparse_points, h, w, sigma1);
    let mut wmap = Array2::<u8>::zeros((h, w));
    for ((y, x), out) in wmap.indexed_iter_mut() {
        let known = (fg_prob[[y, x]] as f64) < rho || hbar.values[[y, x]] > 1e-8;
        *out = u8::from(known);
    }
    let beta = render_density(sparse_points, h, w, sigma2).values;
    Ok(WeightMaps { w: wmap, beta })
}

/// Local maxima (3x3 neighborhood, absolute floor 1e-4), greedy NMS by
/// descending score within `nms_radius`, then the top `keep_fraction` of
/// survivors by score (count rounded up).
pub fn extract_peaks(heatmap: &Array2<f32>, nms_radius: f64, keep_fraction: f64) -> PeakSet {
    assert!(keep_fraction > 0.0 && keep_fraction <= 1.0, "keep_fraction in (0,1]");
    assert!(nms_radius >= 1.0, "nms_radius must be at least 1");
    let (h, w) = heatmap.dim();
    let floor = 1e-4f32;
    let mut cand: Vec<(usize, usize, f32)> = Vec::new();
    for y in 0..h {
        'pix: for x in 0..w {
            let v = heatmap[[y, x]];
            if v <= floor {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 && heatmap[[ny as usize, nx as usize]] > v {
                        continue 'pix;
                    }
                }
            }
            cand.push((y, x, v));
        }
    }
    // Descending score; raster order on ties keeps the scan deterministic.
    cand.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let r2 = nms_radius * nms_radius;
    let mut kept: Vec<(usize, usize, f32)> = Vec::new();
    for &(y, x, v) in &cand {
        let far = kept.iter().all(|&(ky, kx, _)| {
            let d2 = (y as f64 - ky as f64).powi(2) + (x as f64 - kx as f64).powi(2);
            d2 > r2
        });
        if far {
            kept.push((y, x, v));
        }
    }
    let take = ((keep_fraction * kept.len() as f64).ceil() as usize).min(kept.len());
    kept.truncate(take);
    PeakSet { peaks: kept, nms_radius }
}
