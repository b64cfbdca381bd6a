use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::reference::{naive_aji, naive_pq, random_instance_map};
use super::*;
use crate::data::InstanceLabelMap;
use crate::heatmap::PeakSet;

fn blob(mask: &mut Array2<u8>, r0: usize, r1: usize, c0: usize, c1: usize) {
    for y in r0..r1 {
        for x in c0..c1 {
            mask[[y, x]] = 1;
        }
    }
}

fn inst(mask: &Array2<u8>) -> InstanceLabelMap {
    InstanceLabelMap::from_mask(mask)
}

#[test]
fn dice_worked_example_and_symmetry() {
    let mut s = Array2::<u8>::zeros((8, 8));
    let mut g = Array2::<u8>::zeros((8, 8));
    blob(&mut g, 1, 3, 1, 5); // 8 px
    blob(&mut s, 1, 2, 1, 5); // 4 px, all inside g
    let d = dice(&s, &g);
    assert!((d - 2.0 / 3.0).abs() < 1e-12, "dice {d}");
    assert_eq!(dice(&g, &s), d);
}

#[test]
fn dice_empty_cases() {
    let z = Array2::<u8>::zeros((4, 4));
    let mut s = z.clone();
    s[[2, 2]] = 1;
    assert_eq!(dice(&z, &z), 1.0);
    assert_eq!(dice(&s, &z), 0.0);
    assert_eq!(dice(&z, &s), 0.0);
}

#[test]
fn aji_identical_maps_score_one() {
    let mut m = Array2::<u8>::zeros((12, 12));
    blob(&mut m, 1, 4, 1, 4);
    blob(&mut m, 6, 10, 6, 11);
    let a = inst(&m);
    assert_eq!(aji(&a, &a), 1.0);
}

#[test]
fn aji_spurious_prediction() {
    let mut g = Array2::<u8>::zeros((10, 10));
    blob(&mut g, 1, 4, 1, 4); // 9 px
    let mut s = g.clone();
    blob(&mut s, 6, 8, 6, 8); // extra 4 px blob
    // matched union 9, unused prediction area 4
    assert_eq!(aji(&inst(&s), &inst(&g)), 9.0 / 13.0);
}

#[test]
fn aji_missing_instance() {
    let mut g = Array2::<u8>::zeros((10, 10));
    blob(&mut g, 1, 4, 1, 4); // 9 px
    blob(&mut g, 6, 8, 1, 4); // 6 px
    let mut s = Array2::<u8>::zeros((10, 10));
    blob(&mut s, 1, 4, 1, 4);
    assert_eq!(aji(&inst(&s), &inst(&g)), 9.0 / 15.0);
}

#[test]
fn aji_empty_cases() {
    let z = inst(&Array2::<u8>::zeros((6, 6)));
    let mut m = Array2::<u8>::zeros((6, 6));
    blob(&mut m, 2, 4, 2, 4);
    let nz = inst(&m);
    assert_eq!(aji(&z, &z), 1.0);
    assert_eq!(aji(&nz, &z), 0.0);
    assert_eq!(aji(&z, &nz), 0.0);
}

#[test]
fn pq_perfect_match() {
    let mut m = Array2::<u8>::zeros((12, 12));
    blob(&mut m, 1, 4, 1, 4);
    blob(&mut m, 6, 10, 6, 10);
    let a = inst(&m);
    let r = pq(&a, &a, 0.5);
    assert_eq!((r.pq, r.sq, r.dq), (1.0, 1.0, 1.0));
    assert_eq!((r.tp, r.fp, r.fn_), (2, 0, 0));
}

#[test]
fn pq_partial_overlap_with_missed_instance() {
    // strips of 9 px shifted by one: intersection 8, union 10
    let mut g = Array2::<u8>::zeros((8, 12));
    blob(&mut g, 1, 2, 1, 10);
    blob(&mut g, 4, 6, 1, 3); // second instance, never predicted
    let mut s = Array2::<u8>::zeros((8, 12));
    blob(&mut s, 1, 2, 2, 11);
    let r = pq(&inst(&s), &inst(&g), 0.5);
    assert!((r.sq - 0.8).abs() < 1e-12, "sq {}", r.sq);
    assert!((r.dq - 2.0 / 3.0).abs() < 1e-12, "dq {}", r.dq);
    assert!((r.pq - 8.0 / 15.0).abs() < 1e-4, "pq {}", r.pq);
    assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 1));
}

#[test]
fn pq_iou_at_threshold_is_not_a_match() {
    let mut g = Array2::<u8>::zeros((6, 12));
    blob(&mut g, 2, 3, 1, 11); // 10 px
    let mut s = Array2::<u8>::zeros((6, 12));
    blob(&mut s, 2, 3, 1, 6); // first 5 px: IoU exactly 0.5
    let r = pq(&inst(&s), &inst(&g), 0.5);
    assert_eq!((r.pq, r.sq, r.dq), (0.0, 0.0, 0.0));
    assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));
}

#[test]
fn pq_empty_maps() {
    let z = inst(&Array2::<u8>::zeros((5, 5)));
    let r = pq(&z, &z, 0.5);
    assert_eq!((r.pq, r.sq, r.dq), (1.0, 1.0, 1.0));
    assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 0));
}

#[test]
fn matchers_agree_with_reference_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..300 {
        let s = random_instance_map(&mut rng, 12, 12, 4);
        let g = random_instance_map(&mut rng, 12, 12, 4);
        assert_eq!(aji(&s, &g), naive_aji(&s, &g), "aji trial {trial}");
        let r = pq(&s, &g, 0.5);
        let (npq, nsq, ndq, ntp, nfp, nfn) = naive_pq(&s, &g, 0.5);
        assert_eq!(
            (r.pq, r.sq, r.dq, r.tp, r.fp, r.fn_),
            (npq, nsq, ndq, ntp, nfp, nfn),
            "pq trial {trial}"
        );
    }
}

#[test]
fn metrics_invariant_under_instance_relabeling() {
    let reversed = |m: &InstanceLabelMap| InstanceLabelMap {
        labels: m.labels.mapv(|l| if l == 0 { 0 } else { m.count as u32 + 1 - l }),
        count: m.count,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let s = random_instance_map(&mut rng, 12, 12, 4);
        let g = random_instance_map(&mut rng, 12, 12, 4);
        let (sr, gr) = (reversed(&s), reversed(&g));
        assert_eq!(aji(&s, &g), aji(&sr, &gr));
        assert_eq!(pq(&s, &g, 0.5), pq(&sr, &gr, 0.5));
    }
}

#[test]
fn filter_applies_peak_and_area_rules() {
    let mut seg = Array2::<u8>::zeros((40, 32));
    blob(&mut seg, 2, 5, 2, 5); // 9 px, has a peak
    blob(&mut seg, 2, 5, 10, 13); // 9 px, no peak
    blob(&mut seg, 10, 35, 5, 25); // 500 px, no peak
    let peaks = PeakSet { peaks: vec![(3, 3, 1.0)], nms_radius: 3.0 };
    let out = filter_segmentation(&seg, &peaks, 64);
    assert_eq!(out[[3, 3]], 1, "peaked blob kept");
    assert_eq!(out[[3, 11]], 0, "unpeaked speck dropped");
    assert_eq!(out[[20, 15]], 1, "large blob kept");
    let (_, n) = grid::connected_components(&out);
    assert_eq!(n, 2);
}

#[test]
fn filter_never_splits_or_adds_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let mask = random_instance_map(&mut rng, 32, 32, 4).labels.mapv(|l| u8::from(l > 0));
        let (in_labels, n_in) = grid::connected_components(&mask);
        let out = filter_segmentation(&mask, &PeakSet { peaks: vec![], nms_radius: 3.0 }, 6);
        let (out_labels, n_out) = grid::connected_components(&out);
        assert!(n_out <= n_in);
        for l in 1..=n_out as u32 {
            let mut src = 0u32;
            for ((y, x), &ol) in out_labels.indexed_iter() {
                if ol == l {
                    src = in_labels[[y, x]];
                    break;
                }
            }
            assert!(src > 0);
            // survivors keep their exact input pixel set
            for ((y, x), &il) in in_labels.indexed_iter() {
                assert_eq!(out_labels[[y, x]] == l, il == src, "pixel ({y},{x})");
            }
        }
    }
}

#[test]
fn aggregate_means_dice_and_pools_matches() {
    let mut g1 = Array2::<u8>::zeros((12, 12));
    blob(&mut g1, 1, 4, 1, 4);
    blob(&mut g1, 6, 10, 6, 10);
    let mut g2 = Array2::<u8>::zeros((8, 12));
    blob(&mut g2, 1, 2, 1, 10);
    blob(&mut g2, 4, 6, 1, 3);
    let mut s2 = Array2::<u8>::zeros((8, 12));
    blob(&mut s2, 1, 2, 2, 11);
    let evals = vec![evaluate_pair(&g1, &g1, "a"), evaluate_pair(&s2, &g2, "b")];
    let (d0, d1) = (evals[0].dice, evals[1].dice);
    let rep = aggregate(evals).unwrap();
    assert!((rep.dice - 0.5 * (d0 + d1)).abs() < 1e-12);
    assert_eq!((rep.tp, rep.fp, rep.fn_), (3, 0, 1));
    // pooled sq: two exact matches plus one at 0.8
    assert!((rep.sq - (2.0 + 0.8) / 3.0).abs() < 1e-12, "sq {}", rep.sq);
    assert!((rep.pq - rep.sq * rep.dq).abs() < 1e-9);
    assert_eq!(rep.per_image.len(), 2);
    assert!(aggregate(vec![]).is_err());
}

#[test]
fn aggregate_of_empty_images_scores_one() {
    let z = Array2::<u8>::zeros((6, 6));
    let rep = aggregate(vec![evaluate_pair(&z, &z, "a"), evaluate_pair(&z, &z, "b")]).unwrap();
    assert_eq!((rep.dice, rep.aji), (1.0, 1.0));
    assert_eq!((rep.pq, rep.sq, rep.dq), (1.0, 1.0, 1.0));
    assert_eq!((rep.tp, rep.fp, rep.fn_), (0, 0, 0));
}
