//! Adversarial adaptation of the multi-task network to the sparsely
//! annotated target domain.
//!
//! Per iteration: sample a source batch and a (paste-augmented) target
//! batch, update the discriminator on detached segmentation outputs, then
//! update the generator on the combined objective. Every
//! `refresh_period` iterations the target probability cache, entropy
//! thresholds, and pseudo-labels are recomputed from the current model.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eval::infer;
use super::source::{plane_to_batch, restore_params, restore_sgd_state, source_checkpoint};
use super::{
    crop_sample, rand_origin, stack_density, stack_images, stack_onehot, IterLog, RunConfig,
    STREAM_D_INIT, STREAM_SOURCE_BATCH, STREAM_SOURCE_POLICY, STREAM_TARGET_BATCH,
};
use crate::augment::{apply_policy, cp_aug_traced};
use crate::autograd::Graph;
use crate::data::{mix_seed, DomainSample};
use crate::error::{Result, WdaError};
use crate::heatmap::{build_weight_maps, render_density};
use crate::losses::{
    adversarial_loss_node, counting_consistency_node, detection_loss_node, discriminator_loss_node,
    lambda_c, seg_loss_node, total_generator_loss_node,
};
use crate::net::checkpoint::{Checkpoint, CheckpointMeta};
use crate::net::opt::{clip_grads, collect_grads, Adam, SgdPoly};
use crate::net::{Discriminator, G1, G2};
use crate::pseudo::{compute_thresholds, generate_pseudo_labels};

/// Which adaptation ingredients are active; the full recipe enables all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptAblation {
    pub adversarial: bool,
    pub detection: bool,
    pub pseudo_labels: bool,
    pub cp_aug: bool,
    pub consistency: bool,
}

impl AdaptAblation {
    pub fn full() -> Self {
        AdaptAblation {
            adversarial: true,
            detection: true,
            pseudo_labels: true,
            cp_aug: true,
            consistency: true,
        }
    }

    /// Output-space alignment only: source supervision + adversarial term.
    pub fn adversarial_only() -> Self {
        AdaptAblation {
            adversarial: true,
            detection: false,
            pseudo_labels: false,
            cp_aug: false,
            consistency: false,
        }
    }

    /// Everything except the counting-consistency hinge.
    pub fn no_consistency() -> Self {
        AdaptAblation { consistency: false, ..AdaptAblation::full() }
    }
}

/// Adapted generator, trained discriminator, the per-iteration log, and
/// resumable checkpoints of the final state.
pub struct AdaptOutcome {
    pub g1: G1<f32>,
    pub d: Discriminator<f32>,
    pub log: Vec<IterLog>,
    pub checkpoints: AdaptResume,
}

/// Checkpoints to continue an interrupted adaptation from; must have been
/// written at a refresh boundary.
pub struct AdaptResume {
    pub g1: Checkpoint,
    pub d: Checkpoint,
}

/// Discriminator checkpoint with its optimizer moments.
pub fn discriminator_checkpoint(
    d: &Discriminator<f32>,
    opt: &Adam<f32>,
    cfg: &RunConfig,
) -> Checkpoint {
    let meta = CheckpointMeta {
        version: 0,
        kind: "discriminator".into(),
        backbone: None,
        discriminator: Some(d.cfg.clone()),
        iters: opt.steps(),
        config: Some(cfg.as_value()),
    };
    let mut ck = Checkpoint::from_store(meta, &d.params);
    for i in 0..d.params.len() {
        if let Some((m, v)) = opt.moments(i) {
            ck.tensors.insert(format!("opt.m.{}", d.params.name(i)), m.clone());
            ck.tensors.insert(format!("opt.v.{}", d.params.name(i)), v.clone());
        }
    }
    ck
}

fn restore_adam(opt: &mut Adam<f32>, d: &Discriminator<f32>, ck: &Checkpoint) {
    opt.set_steps(ck.meta.iters);
    for i in 0..d.params.len() {
        let name = d.params.name(i);
        if let (Some(m), Some(v)) =
            (ck.tensors.get(&format!("opt.m.{name}")), ck.tensors.get(&format!("opt.v.{name}")))
        {
            opt.set_moments(i, m.clone(), v.clone());
        }
    }
}

/// Per-refresh snapshot of target-side model knowledge.
struct TargetCache {
    /// `(2, H, W)` class probabilities per target training image.
    prob: Vec<Array3<f32>>,
    /// Pseudo one-hot labels (all-zero rows mean "ignored").
    pseudo: Vec<Array3<u8>>,
    /// Mean labeled fraction over the set; `None` with pseudo-labels off.
    coverage: Option<f64>,
}

fn refresh_cache(
    g1: &G1<f32>,
    target: &[DomainSample],
    cfg: &RunConfig,
    abl: &AdaptAblation,
) -> Result<TargetCache> {
    let prob: Vec<Array3<f32>> = target
        .iter()
        .map(|t| infer(g1, &t.image, cfg.eval.patch_hw, cfg.eval.overlap).seg_prob)
        .collect();
    if !abl.pseudo_labels {
        return Ok(TargetCache { prob, pseudo: Vec::new(), coverage: None });
    }
    let views: Vec<_> = prob.iter().map(|p| p.view()).collect();
    let thresholds = compute_thresholds(views, cfg.losses.decile_k)?;
    let mut pseudo = Vec::with_capacity(prob.len());
    let mut coverage = 0.0;
    for p in &prob {
        let m = generate_pseudo_labels(&p.view(), &thresholds);
        coverage += m.coverage;
        pseudo.push(m.onehot);
    }
    let coverage = coverage / prob.len() as f64;
    Ok(TargetCache { prob, pseudo, coverage: Some(coverage) })
}

/// One assembled target-batch slot.
struct TargetSlot {
    crop: DomainSample,
    /// Foreground probability under the crop window, from the cache.
    fg_prob: Array2<f32>,
    /// Pseudo one-hot under the crop window; empty when pseudo-labels are off.
    pseudo: Option<Array3<u8>>,
}

/// Picks a training-crop origin that maximizes overlap with a pasted
/// window (equal sizes line up exactly).
fn crop_origin_for_window(dst: (usize, usize), win: (usize, usize), crop: (usize, usize), hw: (usize, usize)) -> (usize, usize) {
    let center = |d: usize, w: usize, c: usize, n: usize| -> usize {
        let want = (d + w / 2).saturating_sub(c / 2);
        want.min(n - c)
    };
    (center(dst.0, win.0, crop.0, hw.0), center(dst.1, win.1, crop.1, hw.1))
}

fn assemble_target_slot(
    rng: &mut ChaCha8Rng,
    target: &[DomainSample],
    cache: &TargetCache,
    cfg: &RunConfig,
    abl: &AdaptAblation,
) -> Result<TargetSlot> {
    let (ch, cw) = cfg.optim.train_crop;
    let bi = rng.gen_range(0..target.len());
    let coin = rng.gen_bool(cfg.augment.cp_prob);
    let recipient = &target[bi];
    let hw = (recipient.height(), recipient.width());

    if abl.cp_aug && coin {
        let ai = rng.gen_range(0..target.len());
        let donor_prob = &cache.prob[ai];
        let (composite, wins) =
            cp_aug_traced(&target[ai], recipient, &cfg.augment.cp, Some(donor_prob))?;
        let (wh, ww) = cfg.augment.cp.crop_hw;
        let (oy, ox) = crop_origin_for_window(wins.dst, (wh, ww), (ch, cw), hw);
        let crop = crop_sample(&composite, oy, ox, ch, cw);

        // Composite the cached maps exactly as the images were composited.
        let (sy, sx) = wins.src;
        let (dy, dx) = wins.dst;
        let mut prob_c = cache.prob[bi].clone();
        prob_c
            .slice_mut(s![.., dy..dy + wh, dx..dx + ww])
            .assign(&cache.prob[ai].slice(s![.., sy..sy + wh, sx..sx + ww]));
        let fg_prob = prob_c.index_axis(Axis(0), 1).slice(s![oy..oy + ch, ox..ox + cw]).to_owned();
        let pseudo = abl.pseudo_labels.then(|| {
            let mut ps = cache.pseudo[bi].clone();
            ps.slice_mut(s![.., dy..dy + wh, dx..dx + ww])
                .assign(&cache.pseudo[ai].slice(s![.., sy..sy + wh, sx..sx + ww]));
            ps.slice(s![.., oy..oy + ch, ox..ox + cw]).to_owned()
        });
        return Ok(TargetSlot { crop, fg_prob, pseudo });
    }

    let (oy, ox) = rand_origin(rng, hw, (ch, cw));
    let crop = crop_sample(recipient, oy, ox, ch, cw);
    let fg_prob =
        cache.prob[bi].index_axis(Axis(0), 1).slice(s![oy..oy + ch, ox..ox + cw]).to_owned();
    let pseudo = abl
        .pseudo_labels
        .then(|| cache.pseudo[bi].slice(s![.., oy..oy + ch, ox..ox + cw]).to_owned());
    Ok(TargetSlot { crop, fg_prob, pseudo })
}

/// Pseudo one-hot slots stacked to a float `[B,2,h,w]` training target.
fn stack_pseudo(slots: &[TargetSlot]) -> ArrayD<f32> {
    let b = slots.len();
    let first = slots[0].pseudo.as_ref().expect("pseudo stacking requires pseudo labels");
    let (_, h, w) = first.dim();
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[b, 2, h, w]));
    for (i, slot) in slots.iter().enumerate() {
        let p = slot.pseudo.as_ref().expect("ragged pseudo slots");
        for ((c, y, x), &v) in p.indexed_iter() {
            out[[i, c, y, x]] = v as f32;
        }
    }
    out
}

/// Writes the resumable checkpoint pair under `out_dir` (if any).
#[allow(clippy::too_many_arguments)]
fn save_state(
    out_dir: Option<&Path>,
    cfg: &RunConfig,
    g1: &G1<f32>,
    opt_g: &SgdPoly<f32>,
    d: &Discriminator<f32>,
    opt_d: &Adam<f32>,
    z: u64,
    tag: &str,
) -> Result<()> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        source_checkpoint(g1, opt_g, cfg, z).save(&dir.join(format!("adapt_g1_{tag}.ckpt")))?;
        discriminator_checkpoint(d, opt_d, cfg).save(&dir.join(format!("adapt_d_{tag}.ckpt")))?;
    }
    Ok(())
}

/// Frozen-counter predictions for a `[B,1,h,w]` batch.
fn counts_for(g2: &G2<f32>, x: &ArrayD<f32>) -> Vec<f64> {
    let mut g = Graph::<f32>::new();
    let bound = g2.params.bind(&mut g, false);
    let xn = g.constant(x.clone());
    let out = g2.forward(&mut g, &bound, xn);
    g.value(out.count).iter().map(|&v| v as f64).collect()
}

/// Runs the adaptation loop. `g2` stays frozen throughout; pass
/// `out_dir` to get checkpoints at refresh boundaries plus a final pair
/// and the iteration log. `resume` continues from checkpoints written at
/// a refresh boundary, bit-compatibly with the uninterrupted run.
pub fn adapt(
    cfg: &RunConfig,
    source: &[DomainSample],
    target: &[DomainSample],
    g1_init: &G1<f32>,
    g2: &G2<f32>,
    abl: &AdaptAblation,
    out_dir: Option<&Path>,
    resume: Option<&AdaptResume>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(WdaError::Config("adaptation needs both source and target sets".into()));
    }
    for s in source {
        if s.mask.is_none() {
            return Err(WdaError::Config(format!("{}: source side requires dense masks", s.id)));
        }
    }
    for t in target {
        if t.points.is_none() {
            return Err(WdaError::Config(format!("{}: target side requires sparse points", t.id)));
        }
    }
    let o = &cfg.optim;
    let (ch, cw) = o.train_crop;
    let (ph, pw) = cfg.augment.cp.crop_hw;
    if abl.cp_aug {
        for t in target {
            if t.height() < ph.max(ch) || t.width() < pw.max(cw) {
                return Err(WdaError::Config(format!(
                    "{}: target image too small for paste window and crop",
                    t.id
                )));
            }
        }
    }

    let mut g1 = g1_init.clone();
    let mut d = Discriminator::<f32>::new(
        cfg.model.discriminator.clone(),
        mix_seed(cfg.seed, STREAM_D_INIT, 0),
    )?;
    let mut opt_g = SgdPoly::<f32>::new(o.lr_g, o.momentum, o.poly_power, o.max_iters);
    let mut opt_d = Adam::<f32>::new(o.lr_d, o.adam_beta1, o.adam_beta2);
    let mut start = 0u64;
    if let Some(r) = resume {
        if r.g1.meta.iters % o.refresh_period != 0 {
            return Err(WdaError::Checkpoint(format!(
                "adaptation resume point {} is not a refresh boundary (period {})",
                r.g1.meta.iters, o.refresh_period
            )));
        }
        restore_params(&mut g1.params, &r.g1)?;
        restore_sgd_state(&mut opt_g, &g1.params, &r.g1);
        d.params.load_matching(&r.d.to_store(), |n| !n.starts_with("opt."))?;
        restore_adam(&mut opt_d, &d, &r.d);
        start = r.g1.meta.iters;
    }

    let mut policy = cfg.augment.policy.clone();
    policy.seed = mix_seed(cfg.seed, STREAM_SOURCE_POLICY, 1);
    let weights = cfg.losses.weights();
    let lam_focus = cfg.losses.lambda_focus;
    let batch = o.batch_size;
    let mut cache = refresh_cache(&g1, target, cfg, abl)?;
    let mut log = Vec::with_capacity((o.max_iters - start) as usize);

    for z in start..o.max_iters {
        if z % o.refresh_period == 0 && z != start {
            cache = refresh_cache(&g1, target, cfg, abl)?;
            save_state(out_dir, cfg, &g1, &opt_g, &d, &opt_d, z, "latest")?;
        }

        // Source batch: dense crops with photometric/geometric augmentation.
        let mut rng_s = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_SOURCE_BATCH, z));
        let mut src = Vec::with_capacity(batch);
        for slot in 0..batch {
            let s = &source[rng_s.gen_range(0..source.len())];
            let (y0, x0) = rand_origin(&mut rng_s, (s.height(), s.width()), (ch, cw));
            let crop = crop_sample(s, y0, x0, ch, cw);
            let mut aug = apply_policy(&crop, &policy, z * batch as u64 + slot as u64);
            if aug.points.is_none() {
                aug.points = Some(super::source::sample_centers(&aug)?);
            }
            src.push(aug);
        }
        let x_s = stack_images(&src);
        let onehot_s = stack_onehot(&src);
        let h_s = stack_density(&src, cfg.losses.sigma1);
        let beta_s = stack_density(&src, cfg.losses.sigma2);

        // Target batch: paste-augmented crops, no photometric jitter (the
        // cached probability and pseudo-label windows must stay aligned
        // with the pixels).
        let mut rng_t = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_TARGET_BATCH, z));
        let mut tgt = Vec::with_capacity(batch);
        for _ in 0..batch {
            tgt.push(assemble_target_slot(&mut rng_t, target, &cache, cfg, abl)?);
        }
        let tgt_crops: Vec<DomainSample> = tgt.iter().map(|t| t.crop.clone()).collect();
        let x_t = stack_images(&tgt_crops);

        // Generator graph: both domains forward through shared weights.
        let mut g = Graph::<f32>::new();
        let bound_g = g1.params.bind(&mut g, true);
        let xs_node = g.constant(x_s);
        let xt_node = g.constant(x_t.clone());
        let out_s = g1.forward(&mut g, &bound_g, xs_node);
        let out_t = g1.forward(&mut g, &bound_g, xt_node);

        // Discriminator step on detached probabilities, before the
        // generator sees the (updated) discriminator.
        let mut d_loss_v = None;
        if abl.adversarial {
            let ps = g.value(out_s.seg_prob).clone();
            let pt = g.value(out_t.seg_prob).clone();
            let mut gd = Graph::<f32>::new();
            let bound_d = d.params.bind(&mut gd, true);
            let ps_node = gd.constant(ps);
            let pt_node = gd.constant(pt);
            let ls = d.forward(&mut gd, &bound_d, ps_node);
            let lt = d.forward(&mut gd, &bound_d, pt_node);
            let dps = gd.sigmoid(ls);
            let dpt = gd.sigmoid(lt);
            let l_d = discriminator_loss_node(&mut gd, dps, dpt);
            let l_d_v = gd.scalar(l_d) as f64;
            if !l_d_v.is_finite() {
                save_state(out_dir, cfg, &g1, &opt_g, &d, &opt_d, z, "nan")?;
                return Err(WdaError::Invalid(format!("discriminator diverged at iteration {z}")));
            }
            gd.backward(l_d);
            let grads = collect_grads(&mut gd, &bound_d);
            opt_d.step(&mut d.params, &grads);
            d_loss_v = Some(l_d_v);
        }

        // Generator objective.
        let l_seg = match &tgt[0].pseudo {
            Some(_) => {
                let pseudo_t = stack_pseudo(&tgt);
                seg_loss_node(&mut g, out_s.seg_prob, &onehot_s, Some((out_t.seg_prob, &pseudo_t)))
            }
            None => seg_loss_node(&mut g, out_s.seg_prob, &onehot_s, None),
        };
        let l_adv = abl.adversarial.then(|| {
            let bound_d = d.params.bind(&mut g, false);
            let lt = d.forward(&mut g, &bound_d, out_t.seg_prob);
            let dpt = g.sigmoid(lt);
            adversarial_loss_node(&mut g, dpt)
        });
        let l_det = if abl.detection {
            let mut hbars = Vec::with_capacity(batch);
            let mut ws = Vec::with_capacity(batch);
            let mut betas = Vec::with_capacity(batch);
            for t in &tgt {
                let pts = t.crop.points.clone().unwrap_or_default();
                let maps = build_weight_maps(
                    &pts,
                    &t.fg_prob,
                    cfg.losses.rho,
                    cfg.losses.sigma2,
                    cfg.losses.sigma1,
                )?;
                hbars.push(render_density(&pts, ch, cw, cfg.losses.sigma1).values);
                ws.push(maps.w.mapv(|v| v as f32));
                betas.push(maps.beta);
            }
            Some(detection_loss_node(
                &mut g,
                out_s.det_heat,
                &h_s,
                &beta_s,
                out_t.det_heat,
                &plane_to_batch(&hbars),
                &plane_to_batch(&ws),
                &plane_to_batch(&betas),
                lam_focus,
            ))
        } else {
            None
        };
        let lc = lambda_c(z, o.z_max);
        let l_cons = (abl.consistency && lc > 0.0).then(|| {
            let t_vals = counts_for(g2, &x_t);
            counting_consistency_node(&mut g, out_t.count_hat, &t_vals, cfg.losses.epsilon)
        });

        let total = total_generator_loss_node(&mut g, l_seg, l_adv, l_det, l_cons, &weights, z, o.z_max);
        let total_v = g.scalar(total) as f64;
        if !total_v.is_finite() {
            save_state(out_dir, cfg, &g1, &opt_g, &d, &opt_d, z, "nan")?;
            return Err(WdaError::Invalid(format!("adaptation diverged at iteration {z}")));
        }
        g.backward(total);
        let mut grads = collect_grads(&mut g, &bound_g);
        clip_grads(&mut grads, o.grad_clip);
        let lr = opt_g.lr(z);
        opt_g.step(&mut g1.params, &grads, z);

        let mut rec = IterLog::new(z, lr, total_v);
        rec.seg = Some(g.scalar(l_seg) as f64);
        rec.det = l_det.map(|n| g.scalar(n) as f64);
        rec.adv = l_adv.map(|n| g.scalar(n) as f64);
        rec.cons = l_cons.map(|n| g.scalar(n) as f64);
        rec.d_loss = d_loss_v;
        rec.lambda_c = Some(lc);
        rec.coverage = cache.coverage;
        log::debug!(
            "adapt z={z} lr={lr:.3e} total={total_v:.4} seg={:.4} det={:?} adv={:?} cons={:?} d={:?} lc={lc:.3}",
            rec.seg.unwrap(),
            rec.det,
            rec.adv,
            rec.cons,
            rec.d_loss
        );
        log.push(rec);
    }

    save_state(out_dir, cfg, &g1, &opt_g, &d, &opt_d, o.max_iters, "final")?;
    if let Some(dir) = out_dir {
        super::write_jsonl(&dir.join("adapt_log.jsonl"), &log)?;
    }
    let checkpoints = AdaptResume {
        g1: source_checkpoint(&g1, &opt_g, cfg, o.max_iters),
        d: discriminator_checkpoint(&d, &opt_d, cfg),
    };
    Ok(AdaptOutcome { g1, d, log, checkpoints })
}
