use super::*;
use crate::data::synth::{synth_full, SynthConfig};
use crate::grid::connected_components;
use ndarray::Array2;

fn ellipse_mask(h: usize, w: usize, cy: f64, cx: f64, a: f64, b: f64) -> Array2<u8> {
    Array2::from_shape_fn((h, w), |(r, c)| {
        let q = ((r as f64 - cy) / a).powi(2) + ((c as f64 - cx) / b).powi(2);
        u8::from(q <= 1.0)
    })
}

fn iou(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    let mut i = 0.0;
    let mut u = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x == 1 && y == 1 {
            i += 1.0;
        }
        if x == 1 || y == 1 {
            u += 1.0;
        }
    }
    if u == 0.0 {
        1.0
    } else {
        i / u
    }
}

/// Mean absolute radial distance of mask boundary pixels to a circle.
fn boundary_distance(mask: &Array2<u8>, cy: f64, cx: f64, radius: f64) -> f64 {
    let (h, w) = mask.dim();
    let mut total = 0.0;
    let mut n = 0usize;
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 {
                continue;
            }
            let edge = [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dr, dc)| {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                rr < 0
                    || rr >= h as isize
                    || cc < 0
                    || cc >= w as isize
                    || mask[[rr as usize, cc as usize]] == 0
            });
            if edge {
                let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
                total += (d - radius).abs();
                n += 1;
            }
        }
    }
    total / n as f64
}

#[test]
fn mask_on_a_sharp_edge_barely_moves() {
    // Large enough that single-pixel staircase asperities, which sit
    // below the sigma=2 edge-map resolution, are a small area fraction.
    let mask = ellipse_mask(64, 64, 32.0, 32.0, 14.0, 12.0);
    let image = mask.mapv(|v| if v == 1 { 0.8f32 } else { 0.2 });
    let refined = refine_source_mask(&image, &mask, &SarConfig::default()).unwrap();
    let v = iou(&refined, &mask);
    assert!(v >= 0.95, "IoU {v:.3}");
}

#[test]
fn uniform_image_keeps_the_mask_within_the_band() {
    let mask = ellipse_mask(40, 40, 20.0, 20.0, 8.0, 8.0);
    let image = Array2::from_elem((40, 40), 0.5f32);
    let cfg = SarConfig::default();
    let refined = refine_source_mask(&image, &mask, &cfg).unwrap();
    let band = grid::dilate_disk(&mask, cfg.band_px);
    let core = grid::erode_disk(&mask, cfg.band_px);
    for (p, &v) in refined.indexed_iter() {
        assert!(v <= band[p], "escaped the band at {p:?}");
        assert!(v >= core[p], "lost the core at {p:?}");
    }
}

#[test]
fn under_annotated_ellipse_moves_toward_the_true_ring() {
    // Dark ring of radius 14 on a bright cell; annotation drawn 3 px
    // inside the true boundary.
    let (cy, cx, radius) = (24.0, 24.0, 14.0);
    let image = Array2::from_shape_fn((48, 48), |(r, c)| {
        let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
        if (d - radius).abs() <= 1.5 {
            0.1f32
        } else if d < radius {
            0.65
        } else {
            0.55
        }
    });
    let annotated = ellipse_mask(48, 48, cy, cx, radius - 3.0, radius - 3.0);
    let refined = refine_source_mask(&image, &annotated, &SarConfig::default()).unwrap();
    let before = boundary_distance(&annotated, cy, cx, radius);
    let after = boundary_distance(&refined, cy, cx, radius);
    assert!(after < before, "distance {before:.2} -> {after:.2}");
}

#[test]
fn component_count_is_preserved_on_synthetic_images() {
    let cfg = SynthConfig {
        height: 96,
        width: 96,
        n_source: 4,
        n_target_train: 1,
        n_target_test: 1,
        instances_min: 4,
        instances_max: 9,
        ..SynthConfig::default()
    };
    let sets = synth_full(&cfg, 42).unwrap();
    for s in &sets.source {
        let mask = s.mask.as_ref().unwrap();
        let refined = refine_source_mask(&s.image, mask, &SarConfig::default()).unwrap();
        let (_, before) = connected_components(mask);
        let (_, after) = connected_components(&refined);
        assert_eq!(before, after, "{}", s.id);
    }
}

#[test]
fn second_application_changes_almost_nothing() {
    let (cy, cx, radius) = (24.0, 24.0, 13.0);
    let image = Array2::from_shape_fn((48, 48), |(r, c)| {
        let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
        if (d - radius).abs() <= 1.5 {
            0.1f32
        } else {
            0.6
        }
    });
    let annotated = ellipse_mask(48, 48, cy, cx, radius - 2.0, radius - 2.0);
    let cfg = SarConfig::default();
    let once = refine_source_mask(&image, &annotated, &cfg).unwrap();
    let twice = refine_source_mask(&image, &once, &cfg).unwrap();
    let changed = once.iter().zip(twice.iter()).filter(|(a, b)| a != b).count();
    assert!(
        (changed as f64) < 0.01 * once.len() as f64,
        "{changed} of {} pixels changed",
        once.len()
    );
}

#[test]
fn empty_mask_stays_empty() {
    let image = Array2::from_elem((32, 32), 0.4f32);
    let mask = Array2::<u8>::zeros((32, 32));
    let refined = refine_source_mask(&image, &mask, &SarConfig::default()).unwrap();
    assert!(refined.iter().all(|&v| v == 0));
}

#[test]
fn target_samples_are_rejected() {
    let sets = synth_full(&SynthConfig::default(), 3).unwrap();
    let err = refine_sample(&sets.target_train[0], &SarConfig::default());
    assert!(err.is_err());
    assert!(refine_sample(&sets.source[0], &SarConfig::default()).is_ok());
}

#[test]
fn shape_and_value_errors_are_reported() {
    let image = Array2::from_elem((16, 16), 0.5f32);
    let mask = Array2::<u8>::zeros((16, 8));
    assert!(refine_source_mask(&image, &mask, &SarConfig::default()).is_err());
    let bad = Array2::from_elem((16, 16), 2u8);
    assert!(refine_source_mask(&image, &bad, &SarConfig::default()).is_err());
}
