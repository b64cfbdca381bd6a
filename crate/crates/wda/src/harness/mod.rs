//! Orchestration: run configuration, the three training phases (source
//! model, counting network, adversarial adaptation), evaluation, and
//! report rendering.
//!
//! Every stochastic choice in a phase derives from `(run seed, stream,
//! iteration)`, so a phase restarted from a checkpoint at iteration `z`
//! continues exactly as the uninterrupted run would have.

use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::synth::SynthConfig;
use crate::data::DomainSample;
use crate::error::{Result, WdaError};
use crate::losses::LossWeights;
use crate::net::{BackboneConfig, DiscriminatorConfig};
use crate::sar::SarConfig;

pub mod adapt;
pub mod counter;
pub mod eval;
pub mod report;
pub mod source;

pub use adapt::{adapt, discriminator_checkpoint, AdaptAblation, AdaptOutcome, AdaptResume};
pub use counter::{count_multiscale, counter_checkpoint, train_counter};
pub use eval::{
    evaluate_model, infer, overlay_planes, predict_mask, write_eval_outputs, EvalBundle, Inference,
    PredArtifacts,
};
pub use source::{source_checkpoint, train_source, SourceOutcome};

// Deterministic stream ids; data synthesis owns 1..=4, augmentation 5..=6.
pub(crate) const STREAM_SOURCE_BATCH: u64 = 10;
pub(crate) const STREAM_TARGET_BATCH: u64 = 11;
pub(crate) const STREAM_COUNTER_BATCH: u64 = 13;
pub(crate) const STREAM_SOURCE_POLICY: u64 = 15;
pub(crate) const STREAM_COUNTER_POLICY: u64 = 16;
pub(crate) const STREAM_G1_INIT: u64 = 30;
pub(crate) const STREAM_G2_INIT: u64 = 31;
pub(crate) const STREAM_D_INIT: u64 = 32;

/// Where the datasets live when running from the command line.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: Option<PathBuf>,
    pub target_train: Option<PathBuf>,
    pub target_test: Option<PathBuf>,
    pub layout: crate::data::io::StackLayout,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: None,
            target_train: None,
            target_test: None,
            layout: crate::data::io::StackLayout::PngSlices,
        }
    }
}

/// Network shapes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone: BackboneConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone: BackboneConfig { base_channels: 64, ..BackboneConfig::default() },
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

/// Optimization schedule for all three phases.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    /// Crops per domain per iteration.
    pub batch_size: usize,
    /// Training crop; must divide by 2^depth.
    pub train_crop: (usize, usize),
    pub lr_g: f64,
    pub momentum: f64,
    pub poly_power: f64,
    /// Discriminator step size (adaptive-moment updates).
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Adaptation iterations; the polynomial decay runs over these.
    pub max_iters: u64,
    /// Iterations over which the counting consistency weight decays to 0.
    pub z_max: u64,
    pub source_iters: u64,
    pub counter_iters: u64,
    pub counter_lr: f64,
    /// Pseudo-labels, entropy thresholds, and the paste caches are
    /// recomputed every this many adaptation iterations.
    pub refresh_period: u64,
    /// Weight of the true-count hinge while training the source model.
    pub source_count_weight: f64,
    /// Global L2 bound on generator gradients; 0 disables clipping.
    /// Tames the detection head's large initial errors at high rates.
    pub grad_clip: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            batch_size: 2,
            train_crop: (512, 512),
            lr_g: 5e-5,
            momentum: 0.9,
            poly_power: 0.9,
            lr_d: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            max_iters: 20_000,
            z_max: 10_000,
            source_iters: 5_000,
            counter_iters: 2_000,
            counter_lr: 1e-4,
            refresh_period: 2_000,
            source_count_weight: 0.1,
            grad_clip: 0.0,
        }
    }
}

/// Loss shape knobs beyond the scalar weights.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_a: f64,
    pub lambda_d: f64,
    pub lambda_focus: f64,
    pub epsilon: f64,
    pub rho: f64,
    /// Center-heatmap spread (detection targets).
    pub sigma1: f64,
    /// Density spread (counting targets and the focus weights).
    pub sigma2: f64,
    /// Entropy decile for pseudo-label selection.
    pub decile_k: u8,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            lambda_a: w.lambda_a,
            lambda_d: w.lambda_d,
            lambda_focus: w.lambda_focus,
            epsilon: w.epsilon,
            rho: w.rho,
            sigma1: 10.0,
            sigma2: 2.0,
            decile_k: 8,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_a: self.lambda_a,
            lambda_d: self.lambda_d,
            lambda_focus: self.lambda_focus,
            epsilon: self.epsilon,
            rho: self.rho,
        }
    }
}

/// Training-stream augmentation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub policy: crate::augment::AugPolicy,
    pub cp: crate::augment::CPAugConfig,
    /// Probability that a target sample is paste-augmented.
    pub cp_prob: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            policy: crate::augment::AugPolicy::default(),
            cp: crate::augment::CPAugConfig::default(),
            cp_prob: 0.5,
        }
    }
}

/// Inference and scoring.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Sliding-window size for images larger than one window.
    pub patch_hw: (usize, usize),
    /// Window overlap in pixels; overlapping predictions average.
    pub overlap: usize,
    /// Component-survival area when no peak supports it.
    pub min_area: usize,
    /// Apply the peak-guided false-positive filter.
    pub filter: bool,
    pub nms_radius: f64,
    /// Fraction of NMS survivors kept, strongest first.
    pub peak_keep: f64,
    /// Counting network inference scales; predictions average.
    pub count_scales: Vec<f64>,
    pub overlays: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            patch_hw: (512, 512),
            overlap: 64,
            min_area: 1024,
            filter: true,
            nms_radius: 8.0,
            peak_keep: 1.0,
            count_scales: vec![0.75, 1.0, 1.25],
            overlays: false,
        }
    }
}

/// One run's complete effective configuration.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub losses: LossSection,
    pub augment: AugmentSection,
    pub sar: SarConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Paper-scale settings: 512 px patches, 20k iterations.
    pub fn full() -> Self {
        RunConfig {
            synth: SynthConfig {
                height: 512,
                width: 512,
                radius_min: 20.0,
                radius_max: 44.0,
                ..SynthConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// CPU-scale settings: 128 px images, 64 px crops, 2k iterations.
    /// Pixel-denominated knobs shrink with the patch; the blob-scale
    /// sigmas stay absolute because the synthetic instances stay
    /// blob-sized.
    pub fn desk() -> Self {
        let mut cfg = RunConfig::default();
        cfg.model.backbone.base_channels = 16;
        cfg.model.discriminator = DiscriminatorConfig::desk();
        cfg.optim = OptimSection {
            batch_size: 1,
            train_crop: (64, 64),
            lr_g: 1e-3,
            grad_clip: 1.0,
            max_iters: 2_000,
            z_max: 1_000,
            source_iters: 1_000,
            counter_iters: 400,
            refresh_period: 200,
            ..OptimSection::default()
        };
        cfg.augment.cp.crop_hw = (64, 64);
        cfg.eval = EvalSection {
            patch_hw: (128, 128),
            overlap: 16,
            min_area: 64,
            nms_radius: 6.0,
            ..EvalSection::default()
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.backbone.validate()?;
        self.model.discriminator.validate()?;
        let o = &self.optim;
        for (name, v) in [
            ("lr_g", o.lr_g),
            ("lr_d", o.lr_d),
            ("counter_lr", o.counter_lr),
            ("poly_power", o.poly_power),
        ] {
            if v <= 0.0 {
                return Err(WdaError::Config(format!("optim.{name} must be positive, got {v}")));
            }
        }
        if o.batch_size == 0 {
            return Err(WdaError::Config("optim.batch_size must be at least 1".into()));
        }
        if o.z_max == 0 || o.z_max > o.max_iters {
            return Err(WdaError::Config(format!(
                "optim.z_max must be in 1..=max_iters ({} vs {})",
                o.z_max, o.max_iters
            )));
        }
        if o.refresh_period == 0 {
            return Err(WdaError::Config("optim.refresh_period must be at least 1".into()));
        }
        let div = 1usize << self.model.backbone.depth;
        for (name, (h, w)) in [("optim.train_crop", o.train_crop), ("eval.patch_hw", self.eval.patch_hw)] {
            if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
                return Err(WdaError::Config(format!(
                    "{name} {h}x{w} must be a positive multiple of 2^depth = {div}"
                )));
            }
        }
        if self.eval.overlap >= self.eval.patch_hw.0 || self.eval.overlap >= self.eval.patch_hw.1 {
            return Err(WdaError::Config("eval.overlap must be smaller than the patch".into()));
        }
        if !(0.0..=1.0).contains(&self.augment.cp_prob) {
            return Err(WdaError::Config(format!(
                "augment.cp_prob must be in [0,1], got {}",
                self.augment.cp_prob
            )));
        }
        if !(self.eval.peak_keep > 0.0 && self.eval.peak_keep <= 1.0) {
            return Err(WdaError::Config("eval.peak_keep must be in (0,1]".into()));
        }
        if self.eval.nms_radius < 1.0 {
            return Err(WdaError::Config("eval.nms_radius must be at least 1".into()));
        }
        if self.eval.count_scales.is_empty() || self.eval.count_scales.iter().any(|&s| s <= 0.0) {
            return Err(WdaError::Config("eval.count_scales must be positive and nonempty".into()));
        }
        let l = &self.losses;
        if !(l.rho > 0.0 && l.rho < 1.0) {
            return Err(WdaError::Config(format!("losses.rho must be in (0,1), got {}", l.rho)));
        }
        if l.sigma1 <= 0.0 || l.sigma2 <= 0.0 || l.epsilon < 0.0 {
            return Err(WdaError::Config("losses: sigmas must be positive, epsilon nonnegative".into()));
        }
        if !(1..=9).contains(&l.decile_k) {
            return Err(WdaError::Config(format!("losses.decile_k must be in 1..=9, got {}", l.decile_k)));
        }
        Ok(())
    }

    pub fn from_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| WdaError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| WdaError::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// JSON form for embedding into checkpoints and reports.
    pub fn as_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// One training iteration's log record; phases fill the fields they have.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IterLog {
    pub z: u64,
    pub lr: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub det: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cons: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

impl IterLog {
    pub(crate) fn new(z: u64, lr: f64, total: f64) -> Self {
        IterLog {
            z,
            lr,
            total,
            seg: None,
            det: None,
            adv: None,
            cons: None,
            count: None,
            d_loss: None,
            lambda_c: None,
            coverage: None,
        }
    }
}

/// Appends records to a JSONL file, one per line.
pub fn write_jsonl(path: &Path, log: &[IterLog]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in log {
        serde_json::to_writer(&mut f, rec)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<IterLog>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(WdaError::from))
        .collect()
}

/// Cuts `h x w` pixels at `(y0, x0)`: the window of every map, plus the
/// in-window points shifted to crop coordinates.
pub fn crop_sample(s: &DomainSample, y0: usize, x0: usize, h: usize, w: usize) -> DomainSample {
    assert!(y0 + h <= s.height() && x0 + w <= s.width(), "crop outside sample");
    let image = s.image.slice(ndarray::s![y0..y0 + h, x0..x0 + w]).to_owned();
    let mask = s.mask.as_ref().map(|m| m.slice(ndarray::s![y0..y0 + h, x0..x0 + w]).to_owned());
    let points = s.points.as_ref().map(|pts| {
        pts.iter()
            .filter(|&&(r, c)| r >= y0 && r < y0 + h && c >= x0 && c < x0 + w)
            .map(|&(r, c)| (r - y0, c - x0))
            .collect()
    });
    DomainSample { image, mask, points, domain: s.domain, id: s.id.clone() }
}

/// Uniform random crop origin for a `crop` window inside `(h, w)`.
pub(crate) fn rand_origin(rng: &mut ChaCha8Rng, hw: (usize, usize), crop: (usize, usize)) -> (usize, usize) {
    assert!(crop.0 <= hw.0 && crop.1 <= hw.1, "crop larger than image");
    let y = rng.gen_range(0..=hw.0 - crop.0);
    let x = rng.gen_range(0..=hw.1 - crop.1);
    (y, x)
}

/// Stacks crops into a `[B,1,h,w]` input tensor.
pub(crate) fn stack_images(crops: &[DomainSample]) -> ArrayD<f32> {
    let b = crops.len();
    let (h, w) = crops[0].image.dim();
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[b, 1, h, w]));
    for (i, c) in crops.iter().enumerate() {
        assert_eq!(c.image.dim(), (h, w), "ragged batch");
        out.slice_mut(ndarray::s![i, 0, .., ..]).assign(&c.image);
    }
    out
}

/// Dense two-class one-hot targets `[B,2,h,w]` from binary masks.
pub(crate) fn stack_onehot(crops: &[DomainSample]) -> ArrayD<f32> {
    let b = crops.len();
    let (h, w) = crops[0].image.dim();
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[b, 2, h, w]));
    for (i, c) in crops.iter().enumerate() {
        let m = c.mask.as_ref().expect("dense training requires masks");
        for ((y, x), &v) in m.indexed_iter() {
            out[[i, usize::from(v != 0), y, x]] = 1.0;
        }
    }
    out
}

/// Renders per-crop point densities into `[B,1,h,w]`.
pub(crate) fn stack_density(crops: &[DomainSample], sigma: f64) -> ArrayD<f32> {
    let b = crops.len();
    let (h, w) = crops[0].image.dim();
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[b, 1, h, w]));
    for (i, c) in crops.iter().enumerate() {
        let pts = c.points.clone().unwrap_or_default();
        let d = crate::heatmap::render_density(&pts, h, w, sigma);
        out.slice_mut(ndarray::s![i, 0, .., ..]).assign(&d.values);
    }
    out
}
