//! Full-image inference and scoring: tiled forward passes with overlap
//! averaging, peak-guided mask cleanup, metric aggregation, and report
//! files (JSON, CSV, difference overlays).

use std::path::Path;

use ndarray::{s, Array2, Array3, Axis, IxDyn};

use super::{EvalSection, RunConfig};
use crate::autograd::Graph;
use crate::data::{centers_from_mask, DomainSample, InstanceLabelMap};
use crate::error::{Result, WdaError};
use crate::heatmap::{extract_peaks, PeakSet};
use crate::metrics::{aggregate, filter_segmentation, pq, EvalReport};
use crate::net::G1;

/// Full-image outputs of the multi-task network.
pub struct Inference {
    /// `(2, H, W)` class probabilities.
    pub seg_prob: Array3<f32>,
    /// `(H, W)` center heatmap.
    pub det_heat: Array2<f32>,
    /// `(H, W)` counting density.
    pub count_density: Array2<f32>,
    /// Integral of the counting density.
    pub count_hat: f64,
}

/// Mirror-extends to `(oh, ow)`; indices past an edge reflect back.
fn pad_symmetric(img: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    assert!(oh >= h && ow >= w);
    let sym = |i: usize, n: usize| -> usize {
        let m = i % (2 * n);
        if m < n {
            m
        } else {
            2 * n - 1 - m
        }
    };
    Array2::from_shape_fn((oh, ow), |(y, x)| img[[sym(y, h), sym(x, w)]])
}

/// Window origins covering `0..len` with `win`-sized windows and the
/// given overlap; the last window is flush with the end.
fn tile_origins(len: usize, win: usize, overlap: usize) -> Vec<usize> {
    assert!(win <= len);
    if win == len {
        return vec![0];
    }
    let stride = win.saturating_sub(overlap).max(1);
    let mut out = Vec::new();
    let mut y = 0;
    loop {
        if y + win >= len {
            out.push(len - win);
            break;
        }
        out.push(y);
        y += stride;
    }
    out
}

/// One forward pass over a window; returns `(seg (2,h,w), det, density)`.
fn forward_window(g1: &G1<f32>, window: &Array2<f32>) -> (Array3<f32>, Array2<f32>, Array2<f32>) {
    let (h, w) = window.dim();
    let x = window.to_owned().into_shape_with_order(IxDyn(&[1, 1, h, w])).expect("reshape");
    let mut g = Graph::<f32>::new();
    let bound = g1.params.bind(&mut g, false);
    let xn = g.constant(x);
    let out = g1.forward(&mut g, &bound, xn);
    let seg = g
        .value(out.seg_prob)
        .to_owned()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("seg rank")
        .index_axis_move(Axis(0), 0);
    let plane = |id| {
        g.value(id)
            .to_owned()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("rank")
            .index_axis_move(Axis(0), 0)
            .index_axis_move(Axis(0), 0)
    };
    (seg, plane(out.det_heat), plane(out.count_density))
}

/// Runs the network over an arbitrary-size image. Images up to one patch
/// run in a single padded pass; larger ones run as a sliding window with
/// `overlap` pixels of overlap, averaging where windows meet. The count
/// is the integral of the (cropped, averaged) counting density, so
/// padding never inflates it.
pub fn infer(g1: &G1<f32>, image: &Array2<f32>, patch: (usize, usize), overlap: usize) -> Inference {
    let (h, w) = image.dim();
    let div = 1usize << g1.cfg.depth;
    let ceil = |n: usize| n.div_ceil(div) * div;
    let (hp, wp) = (ceil(h), ceil(w));
    let padded = if (hp, wp) == (h, w) { image.to_owned() } else { pad_symmetric(image, hp, wp) };

    let (wh, ww) = (patch.0.min(hp), patch.1.min(wp));
    assert!(wh % div == 0 && ww % div == 0, "patch must divide the network stride");
    let mut seg_sum = Array3::<f32>::zeros((2, hp, wp));
    let mut det_sum = Array2::<f32>::zeros((hp, wp));
    let mut cnt_sum = Array2::<f32>::zeros((hp, wp));
    let mut weight = Array2::<f32>::zeros((hp, wp));
    for &y0 in &tile_origins(hp, wh, overlap) {
        for &x0 in &tile_origins(wp, ww, overlap) {
            let win = padded.slice(s![y0..y0 + wh, x0..x0 + ww]).to_owned();
            let (seg, det, cnt) = forward_window(g1, &win);
            let mut dst = seg_sum.slice_mut(s![.., y0..y0 + wh, x0..x0 + ww]);
            dst += &seg;
            let mut dst = det_sum.slice_mut(s![y0..y0 + wh, x0..x0 + ww]);
            dst += &det;
            let mut dst = cnt_sum.slice_mut(s![y0..y0 + wh, x0..x0 + ww]);
            dst += &cnt;
            let mut dst = weight.slice_mut(s![y0..y0 + wh, x0..x0 + ww]);
            dst += 1.0;
        }
    }
    let seg_prob = Array3::from_shape_fn((2, h, w), |(c, y, x)| seg_sum[[c, y, x]] / weight[[y, x]]);
    let det_heat = Array2::from_shape_fn((h, w), |(y, x)| det_sum[[y, x]] / weight[[y, x]]);
    let count_density = Array2::from_shape_fn((h, w), |(y, x)| cnt_sum[[y, x]] / weight[[y, x]]);
    let count_hat = count_density.iter().map(|&v| v as f64).sum();
    Inference { seg_prob, det_heat, count_density, count_hat }
}

/// Thresholds the foreground, extracts detection peaks, and (optionally)
/// drops unsupported components.
pub fn predict_mask(inf: &Inference, eval: &EvalSection) -> (Array2<u8>, PeakSet) {
    let fg = inf.seg_prob.index_axis(Axis(0), 1);
    let mask = fg.mapv(|p| u8::from(p > 0.5));
    let peaks = extract_peaks(&inf.det_heat, eval.nms_radius, eval.peak_keep);
    let mask = if eval.filter { filter_segmentation(&mask, &peaks, eval.min_area) } else { mask };
    (mask, peaks)
}

/// Per-image leftovers of an evaluation, for overlays and counting checks.
pub struct PredArtifacts {
    pub id: String,
    pub mask: Array2<u8>,
    pub truth: Array2<u8>,
    pub count_hat: f64,
    pub truth_count: usize,
}

/// Scores the model on every (image, dense mask) pair.
pub fn evaluate_model(
    g1: &G1<f32>,
    samples: &[DomainSample],
    eval: &EvalSection,
) -> Result<(EvalReport, Vec<PredArtifacts>)> {
    if samples.is_empty() {
        return Err(WdaError::Config("evaluation split is empty".into()));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    let mut artifacts = Vec::with_capacity(samples.len());
    for s in samples {
        let truth = s
            .mask
            .as_ref()
            .ok_or_else(|| WdaError::Config(format!("{}: evaluation requires a dense mask", s.id)))?;
        let inf = infer(g1, &s.image, eval.patch_hw, eval.overlap);
        let (mask, _) = predict_mask(&inf, eval);
        per_image.push(crate::metrics::evaluate_pair(&mask, truth, &s.id));
        artifacts.push(PredArtifacts {
            id: s.id.clone(),
            mask,
            truth: truth.clone(),
            count_hat: inf.count_hat,
            truth_count: centers_from_mask(truth).len(),
        });
    }
    Ok((aggregate(per_image)?, artifacts))
}

/// PQ of the whole split with the component filter toggled, at otherwise
/// identical settings (the filter should only remove false positives).
pub fn pq_filter_delta(
    g1: &G1<f32>,
    samples: &[DomainSample],
    eval: &EvalSection,
) -> Result<(f64, f64)> {
    let mut on = eval.clone();
    on.filter = true;
    let mut off = eval.clone();
    off.filter = false;
    let (r_on, _) = evaluate_model(g1, samples, &on)?;
    let (r_off, _) = evaluate_model(g1, samples, &off)?;
    Ok((r_on.pq, r_off.pq))
}

/// A serialized evaluation: effective config, what was evaluated, scores.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalBundle {
    pub config: serde_json::Value,
    pub checkpoint_iters: u64,
    pub split: String,
    pub report: EvalReport,
}

impl EvalBundle {
    pub fn new(cfg: &RunConfig, checkpoint_iters: u64, split: &str, report: EvalReport) -> Self {
        EvalBundle { config: cfg.as_value(), checkpoint_iters, split: split.into(), report }
    }

    /// Canonical byte form; identical runs must produce identical bytes.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serializes");
        bytes.push(b'\n');
        bytes
    }
}

/// Difference overlay planes: green where prediction and truth agree on
/// foreground, red for predicted-only, blue for truth-only, black
/// elsewhere.
pub fn overlay_planes(pred: &Array2<u8>, truth: &Array2<u8>) -> [Array2<f32>; 3] {
    assert_eq!(pred.dim(), truth.dim(), "overlay: shape mismatch");
    let (h, w) = pred.dim();
    let mut r = Array2::<f32>::zeros((h, w));
    let mut g = Array2::<f32>::zeros((h, w));
    let mut b = Array2::<f32>::zeros((h, w));
    for ((y, x), &p) in pred.indexed_iter() {
        let t = truth[[y, x]] != 0;
        match (p != 0, t) {
            (true, true) => g[[y, x]] = 1.0,
            (true, false) => r[[y, x]] = 1.0,
            (false, true) => b[[y, x]] = 1.0,
            (false, false) => {}
        }
    }
    [r, g, b]
}

/// Writes `report.json`, `per_image.csv`, and (if configured) one
/// difference overlay PNG per image into `dir`.
pub fn write_eval_outputs(
    dir: &Path,
    bundle: &EvalBundle,
    artifacts: &[PredArtifacts],
    eval: &EvalSection,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), bundle.to_json_bytes())?;

    let mut wtr = csv::Writer::from_path(dir.join("per_image.csv"))?;
    wtr.write_record([
        "id", "dice", "aji", "pq", "sq", "dq", "tp", "fp", "fn", "count_hat", "count_truth",
    ])?;
    for (row, art) in bundle.report.per_image.iter().zip(artifacts) {
        wtr.write_record([
            row.id.clone(),
            format!("{:.6}", row.dice),
            format!("{:.6}", row.aji),
            format!("{:.6}", row.pq),
            format!("{:.6}", row.sq),
            format!("{:.6}", row.dq),
            row.tp.to_string(),
            row.fp.to_string(),
            row.fn_.to_string(),
            format!("{:.3}", art.count_hat),
            art.truth_count.to_string(),
        ])?;
    }
    wtr.flush()?;

    if eval.overlays {
        for art in artifacts {
            let planes = overlay_planes(&art.mask, &art.truth);
            crate::data::io::write_rgb_png(&dir.join(format!("overlay_{}.png", art.id)), &planes)?;
        }
    }
    Ok(())
}

/// PQ of one prediction against instance truth (for quick checks).
pub fn instance_pq(pred: &Array2<u8>, truth: &Array2<u8>) -> f64 {
    pq(&InstanceLabelMap::from_mask(pred), &InstanceLabelMap::from_mask(truth), 0.5).pq
}
