//! Source-only training of the counting network: trunk initialized from
//! the trained multi-task model, density head regressed against rendered
//! point densities on multi-scale augmented crops.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::source::sample_centers;
use super::{
    crop_sample, rand_origin, stack_density, stack_images, IterLog, RunConfig, STREAM_COUNTER_BATCH,
    STREAM_COUNTER_POLICY, STREAM_G2_INIT,
};
use crate::augment::apply_policy;
use crate::autograd::Graph;
use crate::data::{mix_seed, DomainSample};
use crate::error::{Result, WdaError};
use crate::grid::resize_bilinear;
use crate::losses::weighted_mse_node;
use crate::net::checkpoint::{Checkpoint, CheckpointMeta};
use crate::net::opt::{clip_grads, collect_grads, Adam};
use crate::net::{G1, G2};

/// Training scales; crops are resized by these factors (snapped to the
/// network's stride) before regression, teaching the head some scale
/// tolerance. Inference averages over [`RunConfig::eval`]'s scale list.
const TRAIN_SCALES: [f64; 3] = [0.75, 1.0, 1.25];

fn snap(n: f64, div: usize) -> usize {
    let k = (n / div as f64).round().max(1.0) as usize;
    k * div
}

/// Trains the counting network on source crops for
/// `cfg.optim.counter_iters` iterations, trunk warm-started from `init`.
pub fn train_counter(
    cfg: &RunConfig,
    data: &[DomainSample],
    init: &G1<f32>,
) -> Result<(G2<f32>, Vec<IterLog>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(WdaError::Config("counter training set is empty".into()));
    }
    let o = &cfg.optim;
    let (ch, cw) = o.train_crop;
    let div = 1usize << cfg.model.backbone.depth;

    let mut g2 = G2::<f32>::new(cfg.model.backbone, mix_seed(cfg.seed, STREAM_G2_INIT, 0))?;
    g2.init_trunk_from(&init.params)?;
    let mut opt = Adam::<f32>::new(o.counter_lr, o.adam_beta1, o.adam_beta2);

    let mut policy = cfg.augment.policy.clone();
    policy.seed = mix_seed(cfg.seed, STREAM_COUNTER_POLICY, 0);
    let batch = o.batch_size;
    let mut log = Vec::with_capacity(o.counter_iters as usize);

    for z in 0..o.counter_iters {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_COUNTER_BATCH, z));
        let scale = TRAIN_SCALES[rng.gen_range(0..TRAIN_SCALES.len())];
        let (sh, sw) = (snap(ch as f64 * scale, div), snap(cw as f64 * scale, div));
        let mut crops = Vec::with_capacity(batch);
        for slot in 0..batch {
            let s = &data[rng.gen_range(0..data.len())];
            let (y0, x0) = rand_origin(&mut rng, (s.height(), s.width()), (ch, cw));
            let crop = crop_sample(s, y0, x0, ch, cw);
            let mut aug = apply_policy(&crop, &policy, z * batch as u64 + slot as u64);
            if aug.points.is_none() {
                aug.points = Some(sample_centers(&aug)?);
            }
            // Rescale the image; points scale with it (the density target
            // keeps unit mass per point regardless of resolution).
            let pts: Vec<(usize, usize)> = aug
                .points
                .as_ref()
                .unwrap()
                .iter()
                .map(|&(r, c)| {
                    let rr = ((r as f64 + 0.5) * sh as f64 / ch as f64) as usize;
                    let cc = ((c as f64 + 0.5) * sw as f64 / cw as f64) as usize;
                    (rr.min(sh - 1), cc.min(sw - 1))
                })
                .collect();
            aug.image = resize_bilinear(&aug.image, sh, sw);
            aug.mask = None;
            aug.points = Some(pts);
            crops.push(aug);
        }
        let x = stack_images(&crops);
        let target = stack_density(&crops, cfg.losses.sigma2);
        let ones = ArrayD::<f32>::ones(IxDyn(target.shape()));
        let truth: Vec<f64> = crops
            .iter()
            .map(|c| c.points.as_ref().map_or(0, |p| p.len()) as f64)
            .collect();

        let mut g = Graph::<f32>::new();
        let bound = g2.params.bind(&mut g, true);
        let xn = g.constant(x);
        let out = g2.forward(&mut g, &bound, xn);
        let loss = weighted_mse_node(&mut g, out.density, &target, &ones);
        let loss_v = g.scalar(loss) as f64;
        if !loss_v.is_finite() {
            return Err(WdaError::Invalid(format!("counter training diverged at iteration {z}")));
        }
        g.backward(loss);
        let mut grads = collect_grads(&mut g, &bound);
        clip_grads(&mut grads, o.grad_clip);
        opt.step(&mut g2.params, &grads);

        let counts = g.value(out.count);
        let mae = counts
            .iter()
            .zip(&truth)
            .map(|(&p, &t)| (p as f64 - t).abs())
            .sum::<f64>()
            / truth.len() as f64;
        let mut rec = IterLog::new(z, o.counter_lr, loss_v);
        rec.count = Some(mae);
        log::debug!("counter z={z} loss={loss_v:.6} count_mae={mae:.3}");
        log.push(rec);
    }
    Ok((g2, log))
}

/// Counting-network checkpoint.
pub fn counter_checkpoint(g2: &G2<f32>, cfg: &RunConfig, iters: u64) -> Checkpoint {
    let meta = CheckpointMeta {
        version: 0,
        kind: "g2".into(),
        backbone: Some(g2.cfg),
        discriminator: None,
        iters,
        config: Some(cfg.as_value()),
    };
    Checkpoint::from_store(meta, &g2.params)
}

/// Predicted count of one full image, averaged over inference scales.
/// Returns the average and each scale's prediction (so callers can log
/// the multi-scale vs single-scale delta).
pub fn count_multiscale(g2: &G2<f32>, image: &Array2<f32>, scales: &[f64]) -> Result<(f64, Vec<f64>)> {
    if scales.is_empty() {
        return Err(WdaError::Config("count_multiscale: no scales given".into()));
    }
    let (h, w) = image.dim();
    let div = 1usize << g2.cfg.depth;
    let mut per_scale = Vec::with_capacity(scales.len());
    for &s in scales {
        if s <= 0.0 {
            return Err(WdaError::Config(format!("count_multiscale: scale {s} must be positive")));
        }
        let (sh, sw) = (snap(h as f64 * s, div), snap(w as f64 * s, div));
        let img = resize_bilinear(image, sh, sw);
        per_scale.push(count_once(g2, &img));
    }
    let mean = per_scale.iter().sum::<f64>() / per_scale.len() as f64;
    Ok((mean, per_scale))
}

/// One forward pass; the image must already divide the network stride.
pub(crate) fn count_once(g2: &G2<f32>, image: &Array2<f32>) -> f64 {
    let (h, w) = image.dim();
    let x = image
        .to_owned()
        .into_shape_with_order(IxDyn(&[1, 1, h, w]))
        .expect("reshape");
    let mut g = Graph::<f32>::new();
    let bound = g2.params.bind(&mut g, false);
    let xn = g.constant(x);
    let out = g2.forward(&mut g, &bound, xn);
    g.value(out.count)[0] as f64
}
