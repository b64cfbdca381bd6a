use super::*;
use crate::data::synth::{synth_full, SynthConfig};
use crate::data::{sample_sparse_points, Domain, SparsePointBudget};
use ndarray::Array3;

fn blank(h: usize, w: usize, points: Vec<(usize, usize)>) -> DomainSample {
    DomainSample {
        image: Array2::zeros((h, w)),
        mask: None,
        points: Some(points),
        domain: Domain::Target,
        id: "t".into(),
    }
}

fn small_synth(seed: u64) -> Vec<DomainSample> {
    let cfg = SynthConfig {
        height: 64,
        width: 64,
        n_source: 1,
        n_target_train: 2,
        n_target_test: 1,
        instances_min: 3,
        instances_max: 8,
        radius_min: 4.0,
        radius_max: 8.0,
        ..SynthConfig::default()
    };
    synth_full(&cfg, seed).unwrap().target_train
}

#[test]
fn horizontal_flip_reflects_the_column() {
    let s = blank(16, 128, vec![(10, 3)]);
    let f = flip_h(&s);
    assert_eq!(f.points.unwrap(), vec![(10, 124)]);
}

#[test]
fn two_half_turns_are_the_identity() {
    let s = &small_synth(1)[0];
    let back = rot90k(&rot90k(s, 2), 2);
    assert_eq!(back.image, s.image);
    assert_eq!(back.mask, s.mask);
    assert_eq!(back.points, s.points);
}

#[test]
fn quarter_turn_preserves_component_count() {
    let s = &small_synth(2)[0];
    let (_, n0) = grid::connected_components(s.mask.as_ref().unwrap());
    let r = rot90k(s, 1);
    let (_, n1) = grid::connected_components(r.mask.as_ref().unwrap());
    assert_eq!(n0, n1);
    assert_eq!(r.image.dim(), (s.image.dim().1, s.image.dim().0));
}

#[test]
fn geometric_transform_moves_points_with_the_mask() {
    let s = &small_synth(3)[0];
    let policy = AugPolicy::default();
    let n = s.points.as_ref().unwrap().len();
    for draw in 0..20 {
        let t = apply_geometric(s, &policy, draw);
        let (h, w) = t.image.dim();
        let mask = t.mask.as_ref().unwrap();
        let pts = t.points.as_ref().unwrap();
        assert_eq!(pts.len(), n);
        for &(r, c) in pts {
            assert!(r < h && c < w);
            // Centers start on foreground, so they must stay on it.
            assert_eq!(mask[[r, c]], 1, "draw {draw} point ({r},{c}) off instance");
        }
    }
}

#[test]
fn geometric_transform_is_deterministic_per_draw() {
    let s = &small_synth(4)[0];
    let policy = AugPolicy::default();
    let a = apply_geometric(s, &policy, 9);
    let b = apply_geometric(s, &policy, 9);
    assert_eq!(a.image, b.image);
    assert_eq!(a.points, b.points);
    assert!((0..16).any(|d| apply_geometric(s, &policy, d).image != a.image));
}

#[test]
fn photometric_transform_keeps_range_and_geometry() {
    let s = &small_synth(5)[0];
    let policy = AugPolicy::default();
    let t = apply_photometric(s, &policy, 3);
    assert!(t.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(t.mask, s.mask);
    assert_eq!(t.points, s.points);
    let u = apply_policy(s, &policy, 3);
    assert!(u.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn window_scan_breaks_ties_toward_first_in_scan_order() {
    // No points anywhere: every window ties, so both scans pick (0, 0).
    assert_eq!(scan_windows(&[], (32, 32), (8, 8), true), (0, 0));
    assert_eq!(scan_windows(&[], (32, 32), (8, 8), false), (0, 0));
    // A single cluster: the max scan lands on a window containing it.
    let pts = vec![(18, 18), (19, 20), (20, 19)];
    let (y, x) = scan_windows(&pts, (32, 32), (8, 8), true);
    assert!(y <= 18 && 18 < y + 8 && x <= 18 && 18 < x + 8);
}

#[test]
fn empty_donor_only_replaces_pixels() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    use rand::Rng;
    let mut a = blank(32, 32, vec![]);
    a.image.mapv_inplace(|_| rng.gen::<f32>());
    let mut b = blank(32, 32, vec![(2, 2), (30, 29)]);
    b.image.mapv_inplace(|_| rng.gen::<f32>());
    let cfg = CPAugConfig { crop_hw: (8, 8), boundary_relabel: true };
    let out = cp_aug(&a, &b, &cfg, None).unwrap();
    assert_eq!(out.points.as_ref().unwrap(), b.points.as_ref().unwrap());
    // All donor windows tie at zero points, so the crop comes from (0, 0).
    let (by, bx) = scan_windows(b.points.as_ref().unwrap(), (32, 32), (8, 8), false);
    assert_eq!(out.image.slice(s![by..by + 8, bx..bx + 8]), a.image.slice(s![0..8, 0..8]));
    let mut untouched = b.image.clone();
    untouched
        .slice_mut(s![by..by + 8, bx..bx + 8])
        .assign(&a.image.slice(s![0..8, 0..8]));
    assert_eq!(out.image, untouched);
}

#[test]
fn disjoint_windows_union_point_counts() {
    // Five donor points in one tight cluster, three recipient points far
    // from the empty corner: counts add.
    let a = blank(32, 32, vec![(10, 10), (11, 11), (12, 10), (10, 12), (12, 12)]);
    let b = blank(32, 32, vec![(25, 25), (26, 27), (28, 26)]);
    let cfg = CPAugConfig { crop_hw: (8, 8), boundary_relabel: false };
    let out = cp_aug(&a, &b, &cfg, None).unwrap();
    assert_eq!(out.points.unwrap().len(), 3 + 5);
}

#[test]
fn pasted_region_is_bit_identical_and_rest_untouched() {
    let samples = small_synth(6);
    let (a, b) = (&samples[0], &samples[1]);
    let cfg = CPAugConfig { crop_hw: (16, 16), boundary_relabel: false };
    let out = cp_aug(a, b, &cfg, None).unwrap();
    let a_pts = a.points.clone().unwrap();
    let b_pts = b.points.clone().unwrap();
    let (ay, ax) = scan_windows(&a_pts, a.image.dim(), (16, 16), true);
    let (by, bx) = scan_windows(&b_pts, b.image.dim(), (16, 16), false);
    let donor = a.image.slice(s![ay..ay + 16, ax..ax + 16]);
    let pasted = out.image.slice(s![by..by + 16, bx..bx + 16]);
    assert!(donor.iter().zip(pasted.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    for r in 0..32 {
        for c in 0..32 {
            let inside = r >= by && r < by + 16 && c >= bx && c < bx + 16;
            if !inside && r < out.image.dim().0 && c < out.image.dim().1 {
                assert_eq!(out.image[[r, c]].to_bits(), b.image[[r, c]].to_bits());
            }
        }
    }
    // Annotations outside the recipient window all survive.
    let out_pts = out.points.unwrap();
    for &(r, c) in &b_pts {
        if !(r >= by && r < by + 16 && c >= bx && c < bx + 16) {
            assert!(out_pts.contains(&(r, c)));
        }
    }
}

#[test]
fn cut_instance_point_recenters_on_the_in_crop_part() {
    // Vertical bar rows 4..28, cols 12..15 of a 32x32 image; the 16x16
    // crop at (0, 0) cuts it at row 16. One annotated point near the top.
    let mut a = blank(32, 32, vec![(6, 13)]);
    let mut prob = Array3::<f32>::zeros((2, 32, 32));
    for r in 4..28 {
        for c in 12..15 {
            a.image[[r, c]] = 1.0;
            prob[[1, r, c]] = 1.0;
        }
    }
    let b = blank(32, 32, vec![]);
    let cfg = CPAugConfig { crop_hw: (16, 16), boundary_relabel: true };
    let out = cp_aug(&a, &b, &cfg, Some(&prob)).unwrap();
    let pts = out.points.unwrap();
    assert_eq!(pts.len(), 1);
    // In-crop part is rows 4..16 x cols 12..15; centroid (9.5, 13) snaps
    // to the first nearest pixel in row-major order.
    assert_eq!(pts[0], (9, 13));
    assert!(pts[0].0 < 16 && pts[0].1 < 16);
    assert_eq!(out.image[[pts[0].0, pts[0].1]], 1.0);
}

#[test]
fn uncut_instance_point_is_only_translated() {
    let mut a = blank(32, 32, vec![(6, 6)]);
    let mut prob = Array3::<f32>::zeros((2, 32, 32));
    for r in 5..8 {
        for c in 5..8 {
            a.image[[r, c]] = 1.0;
            prob[[1, r, c]] = 1.0;
        }
    }
    let b = blank(32, 32, vec![]);
    let cfg = CPAugConfig { crop_hw: (16, 16), boundary_relabel: true };
    let out = cp_aug(&a, &b, &cfg, Some(&prob)).unwrap();
    assert_eq!(out.points.unwrap(), vec![(6, 6)]);
}

#[test]
fn point_precision_stays_high_over_many_draws() {
    let mut on_fg = 0usize;
    let mut total = 0usize;
    for draw in 0..100u64 {
        let full = small_synth(1000 + draw);
        let sparse: Vec<DomainSample> = full
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let pts = sample_sparse_points(
                    s.points.as_ref().unwrap(),
                    SparsePointBudget { ratio: 0.5, seed: draw * 10 + i as u64 },
                )
                .unwrap();
                DomainSample { points: Some(pts), ..s.clone() }
            })
            .collect();
        let truth = sparse[0].mask.as_ref().unwrap();
        let prob = Array3::from_shape_fn((2, 64, 64), |(ch, r, c)| {
            let fg = truth[[r, c]] as f32;
            if ch == 1 {
                fg
            } else {
                1.0 - fg
            }
        });
        let cfg = CPAugConfig::default();
        let out = cp_aug(&sparse[0], &sparse[1], &cfg, Some(&prob)).unwrap();
        let mask = out.mask.as_ref().unwrap();
        for &(r, c) in out.points.as_ref().unwrap() {
            total += 1;
            on_fg += mask[[r, c]] as usize;
        }
    }
    assert!(total > 0);
    let precision = on_fg as f64 / total as f64;
    assert!(precision >= 0.95, "precision {precision:.3} over {total} points");
}

#[test]
fn cut_and_paste_is_deterministic() {
    let samples = small_synth(8);
    let cfg = CPAugConfig::default();
    let x = cp_aug(&samples[0], &samples[1], &cfg, None).unwrap();
    let y = cp_aug(&samples[0], &samples[1], &cfg, None).unwrap();
    assert!(x.image.iter().zip(y.image.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(x.points, y.points);
}

#[test]
fn oversized_crop_is_a_config_error() {
    let a = blank(16, 16, vec![]);
    let b = blank(16, 16, vec![]);
    let cfg = CPAugConfig { crop_hw: (32, 32), boundary_relabel: false };
    assert!(cp_aug(&a, &b, &cfg, None).is_err());
}
