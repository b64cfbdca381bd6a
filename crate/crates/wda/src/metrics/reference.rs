//! Deliberately slow nested-loop metric implementations. These exist only
//! as ground truth for the optimized matchers in the parent module; tests
//! require exact agreement on random instance maps.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::InstanceLabelMap;

fn pair_counts(s: &InstanceLabelMap, g: &InstanceLabelMap, j: u32, k: u32) -> (usize, usize, usize) {
    let mut inter = 0usize;
    let mut ag = 0usize;
    let mut asz = 0usize;
    for (&sl, &gl) in s.labels.iter().zip(g.labels.iter()) {
        if gl == j {
            ag += 1;
        }
        if sl == k {
            asz += 1;
        }
        if gl == j && sl == k {
            inter += 1;
        }
    }
    (inter, ag, asz)
}

/// AJI by brute force: every (truth, prediction) pair is measured with a
/// fresh full-image scan, then matched greedily by intersection desc, IoU
/// desc, truth id asc, prediction id asc, each side used at most once.
pub fn naive_aji(s: &InstanceLabelMap, g: &InstanceLabelMap) -> f64 {
    if s.count == 0 && g.count == 0 {
        return 1.0;
    }
    let mut pairs: Vec<(u32, u32, usize, usize)> = Vec::new();
    for j in 1..=g.count as u32 {
        for k in 1..=s.count as u32 {
            let (inter, ag, asz) = pair_counts(s, g, j, k);
            if inter > 0 {
                pairs.push((j, k, inter, ag + asz - inter));
            }
        }
    }
    pairs.sort_by(|a, b| {
        let iou_a = a.2 as f64 / a.3 as f64;
        let iou_b = b.2 as f64 / b.3 as f64;
        b.2.cmp(&a.2)
            .then(iou_b.total_cmp(&iou_a))
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut g_done = vec![false; g.count + 1];
    let mut s_done = vec![false; s.count + 1];
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (j, k, inter, union) in pairs {
        if g_done[j as usize] || s_done[k as usize] {
            continue;
        }
        g_done[j as usize] = true;
        s_done[k as usize] = true;
        num += inter as f64;
        den += union as f64;
    }
    for j in 1..=g.count as u32 {
        if !g_done[j as usize] {
            den += g.labels.iter().filter(|&&l| l == j).count() as f64;
        }
    }
    for k in 1..=s.count as u32 {
        if !s_done[k as usize] {
            den += s.labels.iter().filter(|&&l| l == k).count() as f64;
        }
    }
    num / den
}

/// PQ by brute force, matching any pair with IoU above the threshold.
pub fn naive_pq(s: &InstanceLabelMap, g: &InstanceLabelMap, iou_thresh: f64) -> (f64, f64, f64, usize, usize, usize) {
    if s.count == 0 && g.count == 0 {
        return (1.0, 1.0, 1.0, 0, 0, 0);
    }
    let mut tp = 0usize;
    let mut iou_sum = 0.0f64;
    for j in 1..=g.count as u32 {
        for k in 1..=s.count as u32 {
            let (inter, ag, asz) = pair_counts(s, g, j, k);
            if inter == 0 {
                continue;
            }
            let iou = inter as f64 / (ag + asz - inter) as f64;
            if iou > iou_thresh {
                tp += 1;
                iou_sum += iou;
            }
        }
    }
    let fp = s.count - tp;
    let fn_ = g.count - tp;
    let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
    let dq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
    (sq * dq, sq, dq, tp, fp, fn_)
}

/// Random small instance map: up to `max_inst` disks of radius 1..=3
/// stamped onto an h x w grid, then relabeled by connected components so
/// overlapping stamps merge the way a real mask would.
pub fn random_instance_map(rng: &mut ChaCha8Rng, h: usize, w: usize, max_inst: usize) -> InstanceLabelMap {
    let mut mask = Array2::<u8>::zeros((h, w));
    let n = rng.gen_range(0..=max_inst);
    for _ in 0..n {
        let cy = rng.gen_range(0..h) as i64;
        let cx = rng.gen_range(0..w) as i64;
        let r = rng.gen_range(1..=3i64);
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                if (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r {
                    mask[[y as usize, x as usize]] = 1;
                }
            }
        }
    }
    InstanceLabelMap::from_mask(&mask)
}
