//! Evaluation: peak-guided false-positive filtering and the three
//! segmentation metrics (Dice, AJI, PQ) over 8-connected instance maps.
//!
//! The instance matchers here are optimized with joint histograms; the
//! [`reference`] module holds plain nested-loop implementations that the
//! tests hold them to, exactly.

use std::collections::HashMap;

use ndarray::Array2;

use crate::data::InstanceLabelMap;
use crate::error::{Result, WdaError};
use crate::grid;
use crate::heatmap::PeakSet;

pub mod reference;

/// Instance-level matching outcome and the panoptic scores.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PqResult {
    pub pq: f64,
    pub sq: f64,
    pub dq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Pixel Dice coefficient 2|S & G| / (|S| + |G|); 1.0 when both empty.
pub fn dice(s: &Array2<u8>, g: &Array2<u8>) -> f64 {
    assert_eq!(s.dim(), g.dim(), "dice: shape mismatch");
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&a, &b) in s.iter().zip(g.iter()) {
        inter += usize::from(a == 1 && b == 1);
        total += usize::from(a == 1) + usize::from(b == 1);
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Per-instance areas and the joint overlap histogram keyed `(g, s)`.
fn overlaps(
    s: &InstanceLabelMap,
    g: &InstanceLabelMap,
) -> (Vec<usize>, Vec<usize>, HashMap<(u32, u32), usize>) {
    assert_eq!(s.labels.dim(), g.labels.dim(), "instance maps: shape mismatch");
    let mut area_s = vec![0usize; s.count + 1];
    let mut area_g = vec![0usize; g.count + 1];
    let mut joint: HashMap<(u32, u32), usize> = HashMap::new();
    for (&sl, &gl) in s.labels.iter().zip(g.labels.iter()) {
        if sl > 0 {
            area_s[sl as usize] += 1;
        }
        if gl > 0 {
            area_g[gl as usize] += 1;
        }
        if sl > 0 && gl > 0 {
            *joint.entry((gl, sl)).or_insert(0) += 1;
        }
    }
    (area_s, area_g, joint)
}

/// Candidate matches sorted by intersection desc, IoU desc, then ids asc.
fn sorted_pairs(
    area_s: &[usize],
    area_g: &[usize],
    joint: &HashMap<(u32, u32), usize>,
) -> Vec<(u32, u32, usize, f64)> {
    let mut pairs: Vec<(u32, u32, usize, f64)> = joint
        .iter()
        .map(|(&(j, k), &i)| {
            let u = area_g[j as usize] + area_s[k as usize] - i;
            (j, k, i, i as f64 / u as f64)
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.2.cmp(&a.2)
            .then(b.3.total_cmp(&a.3))
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    pairs
}

/// Aggregated Jaccard index under greedy descending-overlap matching with
/// each prediction instance used at most once. 1.0 when both maps are
/// empty; unmatched truth adds its area to the denominator, as does every
/// unused prediction.
pub fn aji(s: &InstanceLabelMap, g: &InstanceLabelMap) -> f64 {
    if s.count == 0 && g.count == 0 {
        return 1.0;
    }
    let (area_s, area_g, joint) = overlaps(s, g);
    let mut matched_g = vec![false; g.count + 1];
    let mut used_s = vec![false; s.count + 1];
    let mut num = 0usize;
    let mut den = 0usize;
    for (j, k, i, _) in sorted_pairs(&area_s, &area_g, &joint) {
        if matched_g[j as usize] || used_s[k as usize] {
            continue;
        }
        matched_g[j as usize] = true;
        used_s[k as usize] = true;
        num += i;
        den += area_g[j as usize] + area_s[k as usize] - i;
    }
    for j in 1..=g.count {
        if !matched_g[j] {
            den += area_g[j];
        }
    }
    for k in 1..=s.count {
        if !used_s[k] {
            den += area_s[k];
        }
    }
    num as f64 / den as f64
}

/// Panoptic quality at the given IoU threshold (>0.5 makes matches
/// provably unique). Empty vs empty scores (1, 1, 1, 0, 0, 0).
pub fn pq(s: &InstanceLabelMap, g: &InstanceLabelMap, iou_thresh: f64) -> PqResult {
    if s.count == 0 && g.count == 0 {
        return PqResult { pq: 1.0, sq: 1.0, dq: 1.0, tp: 0, fp: 0, fn_: 0 };
    }
    let (area_s, area_g, joint) = overlaps(s, g);
    let mut matched: Vec<(u32, u32, f64)> = joint
        .iter()
        .filter_map(|(&(j, k), &i)| {
            let u = area_g[j as usize] + area_s[k as usize] - i;
            let iou = i as f64 / u as f64;
            (iou > iou_thresh).then_some((j, k, iou))
        })
        .collect();
    // summation order must not depend on hash order
    matched.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let tp = matched.len();
    let iou_sum: f64 = matched.iter().map(|m| m.2).sum();
    let fp = s.count - tp;
    let fn_ = g.count - tp;
    let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
    let dq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
    PqResult { pq: sq * dq, sq, dq, tp, fp, fn_ }
}

/// Removes noise blobs from a binary segmentation: opening by
/// reconstruction (never splits or reshapes surviving components), then a
/// component is kept iff it contains a detected peak or its area reaches
/// `min_area`.
pub fn filter_segmentation(seg: &Array2<u8>, peaks: &PeakSet, min_area: usize) -> Array2<u8> {
    let marker = grid::open_disk(seg, 1);
    let opened = grid::reconstruct(&marker, seg);
    let (labels, n) = grid::connected_components(&opened);
    if n == 0 {
        return opened;
    }
    let mut area = vec![0usize; n + 1];
    for &l in labels.iter() {
        if l > 0 {
            area[l as usize] += 1;
        }
    }
    let mut has_peak = vec![false; n + 1];
    for &(r, c, _) in &peaks.peaks {
        let l = labels[[r, c]];
        if l > 0 {
            has_peak[l as usize] = true;
        }
    }
    labels.mapv(|l| {
        u8::from(l > 0 && (has_peak[l as usize] || area[l as usize] >= min_area))
    })
}

/// One image's metrics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ImageEval {
    pub id: String,
    pub dice: f64,
    pub aji: f64,
    pub pq: f64,
    pub sq: f64,
    pub dq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Dataset-level metrics: Dice and AJI average per image; the panoptic
/// scores pool matches across images so pq = sq * dq still holds exactly.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub dice: f64,
    pub aji: f64,
    pub pq: f64,
    pub sq: f64,
    pub dq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub per_image: Vec<ImageEval>,
}

/// All metrics for one predicted/truth mask pair.
pub fn evaluate_pair(pred: &Array2<u8>, truth: &Array2<u8>, id: &str) -> ImageEval {
    let s = InstanceLabelMap::from_mask(pred);
    let g = InstanceLabelMap::from_mask(truth);
    let p = pq(&s, &g, 0.5);
    ImageEval {
        id: id.to_string(),
        dice: dice(pred, truth),
        aji: aji(&s, &g),
        pq: p.pq,
        sq: p.sq,
        dq: p.dq,
        tp: p.tp,
        fp: p.fp,
        fn_: p.fn_,
    }
}

/// Folds per-image metrics into one report.
pub fn aggregate(per_image: Vec<ImageEval>) -> Result<EvalReport> {
    if per_image.is_empty() {
        return Err(WdaError::Invalid("nothing to aggregate".into()));
    }
    let n = per_image.len() as f64;
    let dice = per_image.iter().map(|e| e.dice).sum::<f64>() / n;
    let aji = per_image.iter().map(|e| e.aji).sum::<f64>() / n;
    let tp: usize = per_image.iter().map(|e| e.tp).sum();
    let fp: usize = per_image.iter().map(|e| e.fp).sum();
    let fn_: usize = per_image.iter().map(|e| e.fn_).sum();
    let iou_sum: f64 = per_image.iter().map(|e| e.sq * e.tp as f64).sum();
    let (pq, sq, dq) = if tp + fp + fn_ == 0 {
        (1.0, 1.0, 1.0)
    } else {
        let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
        let dq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
        (sq * dq, sq, dq)
    };
    Ok(EvalReport { dice, aji, pq, sq, dq, tp, fp, fn_, per_image })
}

#[cfg(test)]
mod tests;
