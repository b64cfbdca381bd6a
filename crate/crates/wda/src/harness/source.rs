//! Source-domain pretraining of the multi-task network on dense masks:
//! cross-entropy segmentation, center-heatmap regression, and a count
//! hinge to warm up the counting subnet.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    crop_sample, rand_origin, stack_density, stack_images, stack_onehot, IterLog, RunConfig,
    STREAM_G1_INIT, STREAM_SOURCE_BATCH, STREAM_SOURCE_POLICY,
};
use crate::augment::apply_policy;
use crate::autograd::Graph;
use crate::data::{centers_from_mask, mix_seed, DomainSample};
use crate::error::{Result, WdaError};
use crate::losses::{counting_consistency_node, detection_source_node, seg_loss_node};
use crate::net::checkpoint::{Checkpoint, CheckpointMeta};
use crate::net::opt::{clip_grads, collect_grads, SgdPoly};
use crate::net::{ParamStore, G1};

/// Prefix for optimizer tensors stored alongside model tensors; plain
/// model loaders never look for these names, so they are inert there.
const OPT_PREFIX: &str = "opt.";

pub(crate) fn attach_sgd_state(ck: &mut Checkpoint, params: &ParamStore<f32>, opt: &SgdPoly<f32>) {
    for i in 0..params.len() {
        if let Some(v) = opt.velocity(i) {
            ck.tensors.insert(format!("{OPT_PREFIX}{}", params.name(i)), v.clone());
        }
    }
}

pub(crate) fn restore_sgd_state(opt: &mut SgdPoly<f32>, params: &ParamStore<f32>, ck: &Checkpoint) {
    for i in 0..params.len() {
        if let Some(v) = ck.tensors.get(&format!("{OPT_PREFIX}{}", params.name(i))) {
            opt.set_velocity(i, v.clone());
        }
    }
}

pub(crate) fn restore_params(params: &mut ParamStore<f32>, ck: &Checkpoint) -> Result<()> {
    params.load_matching(&ck.to_store(), |n| !n.starts_with(OPT_PREFIX))?;
    Ok(())
}

/// Model plus optimizer state, resumable via [`train_source`]'s `resume`.
pub fn source_checkpoint(g1: &G1<f32>, opt: &SgdPoly<f32>, cfg: &RunConfig, iters: u64) -> Checkpoint {
    let meta = CheckpointMeta {
        version: 0,
        kind: "g1".into(),
        backbone: Some(g1.cfg),
        discriminator: None,
        iters,
        config: Some(cfg.as_value()),
    };
    let mut ck = Checkpoint::from_store(meta, &g1.params);
    attach_sgd_state(&mut ck, &g1.params, opt);
    ck
}

/// Instance center points of a sample, falling back to mask components.
pub(crate) fn sample_centers(s: &DomainSample) -> Result<Vec<(usize, usize)>> {
    if let Some(p) = &s.points {
        return Ok(p.clone());
    }
    match &s.mask {
        Some(m) => Ok(centers_from_mask(m)),
        None => Err(WdaError::Config(format!("{}: no points and no mask to derive them", s.id))),
    }
}

/// Trained network, a resumable checkpoint of the final state, and the
/// per-iteration log.
pub struct SourceOutcome {
    pub g1: G1<f32>,
    pub checkpoint: Checkpoint,
    pub log: Vec<IterLog>,
}

/// Trains the multi-task network on densely labeled images for
/// `cfg.optim.source_iters` iterations. Also the fully supervised
/// baseline when handed target images with masks. Restarting from a
/// mid-run checkpoint continues the exact uninterrupted trajectory;
/// with `out_dir` set, a resumable `source_g1_latest.ckpt` lands there
/// every `refresh_period` iterations.
pub fn train_source(
    cfg: &RunConfig,
    data: &[DomainSample],
    resume: Option<&Checkpoint>,
    out_dir: Option<&std::path::Path>,
) -> Result<SourceOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(WdaError::Config("source training set is empty".into()));
    }
    for s in data {
        if s.mask.is_none() {
            return Err(WdaError::Config(format!("{}: dense training requires a mask", s.id)));
        }
    }
    let o = &cfg.optim;
    let (ch, cw) = o.train_crop;
    for s in data {
        if s.height() < ch || s.width() < cw {
            return Err(WdaError::Config(format!(
                "{}: image {}x{} smaller than the {}x{} crop",
                s.id,
                s.height(),
                s.width(),
                ch,
                cw
            )));
        }
    }

    let mut g1 = G1::<f32>::new(cfg.model.backbone, mix_seed(cfg.seed, STREAM_G1_INIT, 0))?;
    let mut opt = SgdPoly::<f32>::new(o.lr_g, o.momentum, o.poly_power, o.source_iters);
    let mut start = 0u64;
    if let Some(ck) = resume {
        restore_params(&mut g1.params, ck)?;
        restore_sgd_state(&mut opt, &g1.params, ck);
        start = ck.meta.iters;
    }

    let mut policy = cfg.augment.policy.clone();
    policy.seed = mix_seed(cfg.seed, STREAM_SOURCE_POLICY, 0);
    let lam_focus = cfg.losses.lambda_focus;
    let batch = o.batch_size;
    let mut log = Vec::with_capacity((o.source_iters - start) as usize);

    for z in start..o.source_iters {
        if z % o.refresh_period == 0 && z != start {
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir)?;
                source_checkpoint(&g1, &opt, cfg, z).save(&dir.join("source_g1_latest.ckpt"))?;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_SOURCE_BATCH, z));
        let mut crops = Vec::with_capacity(batch);
        for slot in 0..batch {
            let s = &data[rng.gen_range(0..data.len())];
            let (y0, x0) = rand_origin(&mut rng, (s.height(), s.width()), (ch, cw));
            let crop = crop_sample(s, y0, x0, ch, cw);
            crops.push(apply_policy(&crop, &policy, z * batch as u64 + slot as u64));
        }
        for c in &mut crops {
            if c.points.is_none() {
                c.points = Some(sample_centers(c)?);
            }
        }
        let x = stack_images(&crops);
        let onehot = stack_onehot(&crops);
        let h = stack_density(&crops, cfg.losses.sigma1);
        let beta = stack_density(&crops, cfg.losses.sigma2);
        let counts: Vec<f64> = crops
            .iter()
            .map(|c| c.points.as_ref().map_or(0, |p| p.len()) as f64)
            .collect();

        let mut g = Graph::<f32>::new();
        let bound = g1.params.bind(&mut g, true);
        let xn = g.constant(x);
        let out = g1.forward(&mut g, &bound, xn);
        let l_seg = seg_loss_node(&mut g, out.seg_prob, &onehot, None);
        let l_det = detection_source_node(&mut g, out.det_heat, &h, &beta, lam_focus);
        let l_cnt = counting_consistency_node(&mut g, out.count_hat, &counts, cfg.losses.epsilon);
        let wd = g.scale(l_det, cfg.losses.lambda_d as f32);
        let wc = g.scale(l_cnt, o.source_count_weight as f32);
        let t0 = g.add(l_seg, wd);
        let total = g.add(t0, wc);

        let total_v = g.scalar(total) as f64;
        if !total_v.is_finite() {
            return Err(WdaError::Invalid(format!("source training diverged at iteration {z}")));
        }
        g.backward(total);
        let mut grads = collect_grads(&mut g, &bound);
        clip_grads(&mut grads, o.grad_clip);
        let lr = opt.lr(z);
        opt.step(&mut g1.params, &grads, z);

        let mut rec = IterLog::new(z, lr, total_v);
        rec.seg = Some(g.scalar(l_seg) as f64);
        rec.det = Some(g.scalar(l_det) as f64);
        rec.count = Some(g.scalar(l_cnt) as f64);
        log::debug!(
            "source z={z} lr={lr:.3e} total={total_v:.4} seg={:.4} det={:.4} cnt={:.4}",
            rec.seg.unwrap(),
            rec.det.unwrap(),
            rec.count.unwrap()
        );
        log.push(rec);
    }
    let checkpoint = source_checkpoint(&g1, &opt, cfg, o.source_iters);
    Ok(SourceOutcome { g1, checkpoint, log })
}

/// Assembles a batch-shaped `[B,1,h,w]` tensor from one map per crop.
pub(crate) fn plane_to_batch(planes: &[ndarray::Array2<f32>]) -> ArrayD<f32> {
    let b = planes.len();
    let (h, w) = planes[0].dim();
    let mut out = ArrayD::<f32>::zeros(ndarray::IxDyn(&[b, 1, h, w]));
    for (i, p) in planes.iter().enumerate() {
        assert_eq!(p.dim(), (h, w), "ragged planes");
        out.slice_mut(ndarray::s![i, 0, .., ..]).assign(p);
    }
    out
}
