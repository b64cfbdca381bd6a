//! Synthetic two-domain dataset: elliptical organelle-like instances with a
//! double-membrane ring over textured background, rendered under two
//! different acquisition styles so a model trained on one domain degrades
//! on the other in a controllable way.
//!
//! Instances never touch (a 2 px minimum gap is enforced at placement), so
//! connected components of the dense mask correspond one-to-one with
//! generated instances.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, WdaError};
use crate::grid;

use super::{centers_from_mask, mix_seed, sample_sparse_points, Domain, DomainSample, SparsePointBudget};

/// Rendering knobs that differ between the two domains.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainKnobs {
    /// Background texture frequency, cycles per image side.
    pub bg_freq: f64,
    /// Gamma applied to the rendered intensities.
    pub gamma: f64,
    /// Contrast multiplier around mid-gray.
    pub contrast: f64,
    /// Instance count multiplier relative to the sampled count.
    pub density_mult: f64,
    /// Additive Gaussian noise sigma.
    pub noise_sigma: f64,
}

impl Default for DomainKnobs {
    fn default() -> Self {
        DomainKnobs { bg_freq: 3.0, gamma: 1.0, contrast: 1.0, density_mult: 1.0, noise_sigma: 0.015 }
    }
}

impl DomainKnobs {
    /// Default shifted style for the unlabeled domain.
    pub fn shifted() -> Self {
        DomainKnobs { bg_freq: 7.0, gamma: 1.8, contrast: 0.75, density_mult: 1.5, noise_sigma: 0.03 }
    }
}

/// Full description of a generated dataset pair.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub n_source: usize,
    pub n_target_train: usize,
    pub n_target_test: usize,
    /// Instances per image are drawn uniformly from this inclusive range.
    pub instances_min: usize,
    pub instances_max: usize,
    /// Semi-major axis range in pixels; the minor axis is 0.55-1.0 of it.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Fraction of target-train instances that receive a center point.
    pub sparse_ratio: f64,
    pub source: DomainKnobs,
    pub target: DomainKnobs,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 128,
            width: 128,
            n_source: 8,
            n_target_train: 8,
            n_target_test: 4,
            instances_min: 3,
            instances_max: 12,
            radius_min: 5.0,
            radius_max: 11.0,
            sparse_ratio: 0.15,
            source: DomainKnobs::default(),
            target: DomainKnobs::shifted(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(WdaError::Config("synth: image side must be at least 32".into()));
        }
        if self.instances_min == 0 || self.instances_min > self.instances_max {
            return Err(WdaError::Config(format!(
                "synth: bad instance range {}..={}",
                self.instances_min, self.instances_max
            )));
        }
        if !(self.sparse_ratio > 0.0 && self.sparse_ratio <= 1.0) {
            return Err(WdaError::Config(format!(
                "synth: sparse_ratio must be in (0,1], got {}",
                self.sparse_ratio
            )));
        }
        if !(self.radius_min >= 2.0 && self.radius_min <= self.radius_max) {
            return Err(WdaError::Config("synth: bad radius range".into()));
        }
        for (name, k) in [("source", &self.source), ("target", &self.target)] {
            if k.density_mult <= 0.0 || k.gamma <= 0.0 || k.contrast <= 0.0 {
                return Err(WdaError::Config(format!("synth: non-positive knob in {name} domain")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    /// Phase of the interior stripe texture.
    phase: f64,
}

impl Ellipse {
    /// Normalized squared radius: <=1 inside, with `u` the coordinate along
    /// the major axis (drives the stripe texture).
    fn q2_u(&self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.a).powi(2) + (v / self.b).powi(2), u)
    }
}

/// Rejection-places `n` ellipses keeping every pair of instance masks at
/// least 2 px apart (Chebyshev), so components never merge.
fn place_instances(rng: &mut ChaCha8Rng, cfg: &SynthConfig, n: usize) -> Vec<Ellipse> {
    let (h, w) = (cfg.height, cfg.width);
    let mut occupied = Array2::<u8>::zeros((h, w));
    let mut placed = Vec::with_capacity(n);
    'outer: for _ in 0..n {
        for _attempt in 0..1000 {
            let a = rng.gen_range(cfg.radius_min..=cfg.radius_max);
            let b = a * rng.gen_range(0.55..=1.0);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            // Keep at least half the major axis inside the frame.
            let m = 0.5 * a;
            let cy = rng.gen_range(m..=(h as f64 - 1.0 - m));
            let cx = rng.gen_range(m..=(w as f64 - 1.0 - m));
            let e = Ellipse { cy, cx, a, b, theta, phase: rng.gen_range(0.0..std::f64::consts::TAU) };
            let r = a.max(b).ceil() as i64;
            let (y0, y1) = ((cy as i64 - r).max(0), (cy as i64 + r).min(h as i64 - 1));
            let (x0, x1) = ((cx as i64 - r).max(0), (cx as i64 + r).min(w as i64 - 1));
            let mut clash = false;
            'scan: for y in y0..=y1 {
                for x in x0..=x1 {
                    if e.q2_u(y as f64, x as f64).0 > 1.0 {
                        continue;
                    }
                    for dy in -2i64..=2 {
                        for dx in -2i64..=2 {
                            let (ny, nx) = (y + dy, x + dx);
                            if ny >= 0
                                && nx >= 0
                                && ny < h as i64
                                && nx < w as i64
                                && occupied[[ny as usize, nx as usize]] != 0
                            {
                                clash = true;
                                break 'scan;
                            }
                        }
                    }
                }
            }
            if clash {
                continue;
            }
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if e.q2_u(y as f64, x as f64).0 <= 1.0 {
                        occupied[[y as usize, x as usize]] = 1;
                    }
                }
            }
            placed.push(e);
            continue 'outer;
        }
        break; // image is saturated; keep what fits
    }
    placed
}

fn rasterize_mask(h: usize, w: usize, es: &[Ellipse]) -> Array2<u8> {
    let mut mask = Array2::<u8>::zeros((h, w));
    for ((y, x), m) in mask.indexed_iter_mut() {
        for e in es {
            if e.q2_u(y as f64, x as f64).0 <= 1.0 {
                *m = 1;
                break;
            }
        }
    }
    mask
}

fn render_image(rng: &mut ChaCha8Rng, knobs: &DomainKnobs, h: usize, w: usize, es: &[Ellipse]) -> Array2<f32> {
    let (p1, p2) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
    let f = knobs.bg_freq;
    let mut img = Array2::<f32>::zeros((h, w));
    for ((y, x), v) in img.indexed_iter_mut() {
        let (yf, xf) = (y as f64 / h as f64, x as f64 / w as f64);
        let tex = (std::f64::consts::TAU * f * xf + p1 + 1.7 * (std::f64::consts::TAU * 0.7 * f * yf + p2).sin()).sin();
        let mut val = 0.58 + 0.05 * tex;
        for e in es {
            let (q2, u) = e.q2_u(y as f64, x as f64);
            if q2 > 1.0 {
                continue;
            }
            let q = q2.sqrt();
            val = if q > 0.86 {
                0.16 // outer membrane
            } else if q > 0.74 {
                0.52 // inter-membrane gap
            } else if q > 0.62 {
                0.22 // inner membrane
            } else {
                // interior with faint stripes along the major axis
                0.40 + 0.05 * (0.9 * u + e.phase).sin()
            };
            break;
        }
        *v = val as f32;
    }
    let mut img = grid::gaussian_blur(&img, 0.6);
    for v in img.iter_mut() {
        let centered = 0.5 + (*v as f64 - 0.5) * knobs.contrast;
        let g = centered.clamp(0.0, 1.0).powf(knobs.gamma);
        // Box-Muller from two explicit draws keeps noise reproducible.
        let (u1, u2) = (rng.gen_range(1e-12f64..1.0), rng.gen_range(0.0f64..std::f64::consts::TAU));
        let n = (-2.0 * u1.ln()).sqrt() * u2.cos();
        *v = (g + knobs.noise_sigma * n).clamp(0.0, 1.0) as f32;
    }
    img
}

fn gen_split(cfg: &SynthConfig, knobs: &DomainKnobs, domain: Domain, prefix: &str, n_images: usize, stream: u64, seed: u64) -> Vec<DomainSample> {
    (0..n_images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stream, i as u64));
            let base = rng.gen_range(cfg.instances_min..=cfg.instances_max);
            let n = ((base as f64 * knobs.density_mult).round() as usize).max(1);
            let es = place_instances(&mut rng, cfg, n);
            let mask = rasterize_mask(cfg.height, cfg.width, &es);
            let image = render_image(&mut rng, knobs, cfg.height, cfg.width, &es);
            let points = centers_from_mask(&mask);
            DomainSample {
                image,
                mask: Some(mask),
                points: Some(points),
                domain,
                id: format!("{prefix}{i:04}"),
            }
        })
        .collect()
}

/// A generated dataset pair with nothing withheld: every split carries its
/// dense masks and full point sets. [`synth_domain_pair`] derives the
/// weakly supervised view from this.
#[derive(Debug, Clone)]
pub struct SynthSets {
    pub source: Vec<DomainSample>,
    pub target_train: Vec<DomainSample>,
    pub target_test: Vec<DomainSample>,
}

/// Generates both domains with full ground truth retained.
pub fn synth_full(cfg: &SynthConfig, seed: u64) -> Result<SynthSets> {
    cfg.validate()?;
    Ok(SynthSets {
        source: gen_split(cfg, &cfg.source, Domain::Source, "source_", cfg.n_source, 1, seed),
        target_train: gen_split(cfg, &cfg.target, Domain::Target, "target_train_", cfg.n_target_train, 2, seed),
        target_test: gen_split(cfg, &cfg.target, Domain::Target, "target_test_", cfg.n_target_test, 3, seed),
    })
}

/// The weakly supervised view of a generated pair:
/// source keeps dense masks and full centers, target-train keeps only a
/// sparse subset of centers, target-test keeps masks for evaluation only.
pub fn synth_domain_pair(
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(Vec<DomainSample>, Vec<DomainSample>, Vec<DomainSample>)> {
    let full = synth_full(cfg, seed)?;
    let target_train = sparsify(&full.target_train, cfg.sparse_ratio, seed)?;
    let mut target_test = full.target_test;
    for s in &mut target_test {
        s.points = None;
    }
    Ok((full.source, target_train, target_test))
}

/// Drops masks and keeps a per-slice sparse sample of the center points.
pub fn sparsify(full: &[DomainSample], ratio: f64, seed: u64) -> Result<Vec<DomainSample>> {
    full.iter()
        .enumerate()
        .map(|(i, s)| {
            let all = s.points.clone().unwrap_or_default();
            let sparse = sample_sparse_points(
                &all,
                SparsePointBudget { ratio, seed: mix_seed(seed, 4, i as u64) },
            )?;
            Ok(DomainSample {
                image: s.image.clone(),
                mask: None,
                points: Some(sparse),
                domain: s.domain,
                id: s.id.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InstanceLabelMap;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = synth_full(&cfg, 7).unwrap();
        let b = synth_full(&cfg, 7).unwrap();
        for (x, y) in a.source.iter().zip(&b.source) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.points, y.points);
        }
        let c = synth_full(&cfg, 8).unwrap();
        assert_ne!(a.source[0].image, c.source[0].image);
    }

    #[test]
    fn source_instance_totals_stay_in_the_configured_range() {
        let cfg = SynthConfig { n_source: 50, ..SynthConfig::default() };
        let sets = synth_full(&cfg, 3).unwrap();
        let total: usize = sets
            .source
            .iter()
            .map(|s| InstanceLabelMap::from_mask(s.mask.as_ref().unwrap()).count)
            .sum();
        assert!((150..=600).contains(&total), "total {total} outside [150, 600]");
    }

    #[test]
    fn points_match_components_one_to_one() {
        let sets = synth_full(&SynthConfig::default(), 11).unwrap();
        for s in sets.source.iter().chain(&sets.target_train) {
            let inst = InstanceLabelMap::from_mask(s.mask.as_ref().unwrap());
            let pts = s.points.as_ref().unwrap();
            assert_eq!(pts.len(), inst.count);
            let mut seen = vec![false; inst.count + 1];
            for &(r, c) in pts {
                let l = inst.labels[[r, c]] as usize;
                assert!(l > 0, "point must sit on an instance");
                assert!(!seen[l], "one point per instance");
                seen[l] = true;
            }
        }
    }

    #[test]
    fn sparse_target_points_hit_distinct_true_instances() {
        let cfg = SynthConfig::default();
        let full = synth_full(&cfg, 21).unwrap();
        let (_, target_train, _) = synth_domain_pair(&cfg, 21).unwrap();
        for (sparse, truth) in target_train.iter().zip(&full.target_train) {
            assert!(sparse.mask.is_none());
            let inst = InstanceLabelMap::from_mask(truth.mask.as_ref().unwrap());
            let pts = sparse.points.as_ref().unwrap();
            assert!(!pts.is_empty());
            assert!(pts.len() <= inst.count);
            let mut seen = vec![false; inst.count + 1];
            for &(r, c) in pts {
                let l = inst.labels[[r, c]] as usize;
                assert!(l > 0, "sparse point off-instance in {}", sparse.id);
                assert!(!seen[l]);
                seen[l] = true;
            }
        }
    }

    #[test]
    fn domains_differ_in_mean_intensity() {
        let sets = synth_full(&SynthConfig::default(), 5).unwrap();
        let mean = |xs: &[DomainSample]| {
            xs.iter().map(|s| s.image.mean().unwrap() as f64).sum::<f64>() / xs.len() as f64
        };
        let (ms, mt) = (mean(&sets.source), mean(&sets.target_train));
        assert!((ms - mt).abs() > 0.02, "domain gap too small: {ms} vs {mt}");
    }

    #[test]
    fn target_density_multiplier_raises_counts() {
        let cfg = SynthConfig { n_source: 20, n_target_train: 20, ..SynthConfig::default() };
        let sets = synth_full(&cfg, 13).unwrap();
        let avg = |xs: &[DomainSample]| {
            xs.iter().map(|s| s.points.as_ref().unwrap().len() as f64).sum::<f64>() / xs.len() as f64
        };
        assert!(avg(&sets.target_train) > avg(&sets.source) * 1.2);
    }

    #[test]
    fn degenerate_config_is_rejected() {
        let cfg = SynthConfig { instances_min: 0, ..SynthConfig::default() };
        assert!(synth_full(&cfg, 0).is_err());
        let cfg = SynthConfig { sparse_ratio: 0.0, ..SynthConfig::default() };
        assert!(synth_full(&cfg, 0).is_err());
    }
}
