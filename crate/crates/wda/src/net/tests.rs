use super::checkpoint::{load_g1, Checkpoint, CheckpointMeta};
use super::opt::{collect_grads, Adam, SgdPoly};
use super::*;
use crate::autograd::Graph;
use ndarray::{ArrayD, IxDyn};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;

fn tiny() -> BackboneConfig {
    BackboneConfig { depth: 2, base_channels: 4, block: BlockKind::HddLite }
}

fn rand_input<T: Scalar>(shape: &[usize], seed: u64) -> ArrayD<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(0.0f64, 1.0);
    ArrayD::from_shape_vec(
        IxDyn(shape),
        (0..shape.iter().product()).map(|_| T::c(dist.sample(&mut rng))).collect(),
    )
    .unwrap()
}

#[test]
fn g1_default_config_output_shapes() {
    let net = G1::<f32>::new(BackboneConfig::default(), 3).unwrap();
    let mut g = Graph::new();
    let bound = net.params.bind(&mut g, false);
    let x = g.constant(rand_input(&[1, 1, 128, 128], 0));
    let out = net.forward(&mut g, &bound, x);
    assert_eq!(g.value(out.seg_prob).shape(), &[1, 2, 128, 128]);
    assert_eq!(g.value(out.det_heat).shape(), &[1, 1, 128, 128]);
    assert_eq!(g.value(out.count_hat).shape(), &[1]);
}

#[test]
fn seg_probabilities_sum_to_one_and_heat_is_nonnegative() {
    let net = G1::<f32>::new(tiny(), 5).unwrap();
    let mut g = Graph::new();
    let bound = net.params.bind(&mut g, false);
    let x = g.constant(rand_input(&[2, 1, 16, 16], 1));
    let out = net.forward(&mut g, &bound, x);
    let seg = g.value(out.seg_prob);
    for b in 0..2 {
        for y in 0..16 {
            for xx in 0..16 {
                let s = seg[[b, 0, y, xx]] + seg[[b, 1, y, xx]];
                assert!((s - 1.0).abs() <= 1e-5, "prob sum {s}");
            }
        }
    }
    assert!(g.value(out.det_heat).iter().all(|&v| v >= 0.0));
}

#[test]
fn count_hat_is_the_integral_of_the_count_density() {
    let net = G1::<f32>::new(tiny(), 6).unwrap();
    let mut g = Graph::new();
    let bound = net.params.bind(&mut g, false);
    let x = g.constant(rand_input(&[2, 1, 16, 16], 2));
    let out = net.forward(&mut g, &bound, x);
    let density = g.value(out.count_density).clone();
    let t = g.value(out.count_hat).clone();
    for b in 0..2 {
        let mass: f64 = density.index_axis(ndarray::Axis(0), b).iter().map(|&v| v as f64).sum();
        assert!((mass - t[[b]] as f64).abs() <= 1e-4 * mass.max(1.0));
    }
}

#[test]
fn all_zero_input_yields_finite_outputs() {
    for block in [BlockKind::HddLite, BlockKind::PlainConv] {
        let cfg = BackboneConfig { block, ..tiny() };
        let net = G1::<f32>::new(cfg, 7).unwrap();
        let mut g = Graph::new();
        let bound = net.params.bind(&mut g, false);
        let x = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 16, 16])));
        let out = net.forward(&mut g, &bound, x);
        for id in [out.seg_prob, out.det_heat, out.count_density, out.count_hat] {
            assert!(g.value(id).iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn construction_is_deterministic_per_seed() {
    let a = G1::<f32>::new(tiny(), 11).unwrap();
    let b = G1::<f32>::new(tiny(), 11).unwrap();
    let c = G1::<f32>::new(tiny(), 12).unwrap();
    for i in 0..a.params.len() {
        assert_eq!(a.params.value(i), b.params.value(i));
    }
    assert!((0..a.params.len()).any(|i| a.params.value(i) != c.params.value(i)));
}

#[test]
fn hdd_lite_has_strictly_fewer_parameters_than_plain_conv() {
    let lite = G1::<f32>::new(BackboneConfig::default(), 0).unwrap();
    let plain = G1::<f32>::new(
        BackboneConfig { block: BlockKind::PlainConv, ..BackboneConfig::default() },
        0,
    )
    .unwrap();
    assert!(
        lite.params.total_params() < plain.params.total_params(),
        "{} vs {}",
        lite.params.total_params(),
        plain.params.total_params()
    );
}

#[test]
fn discriminator_halves_spatial_size_per_layer() {
    let d = Discriminator::<f32>::new(DiscriminatorConfig::desk(), 2).unwrap();
    let mut g = Graph::new();
    let bound = d.params.bind(&mut g, false);
    let x = g.constant(rand_input(&[1, 2, 128, 128], 3));
    let y = d.forward(&mut g, &bound, x);
    assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
    assert!(g.value(y).iter().all(|v| v.is_finite()));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let net = G1::<f32>::new(tiny(), 21).unwrap();
    let meta = CheckpointMeta {
        version: 0,
        kind: "g1".into(),
        backbone: Some(net.cfg),
        discriminator: None,
        iters: 17,
        config: None,
    };
    let ck = Checkpoint::from_store(meta, &net.params);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g1.ckpt");
    ck.save(&path).unwrap();
    let (loaded, meta) = load_g1(&path).unwrap();
    assert_eq!(meta.iters, 17);
    assert_eq!(loaded.params.len(), net.params.len());
    for i in 0..net.params.len() {
        let a = net.params.value(i);
        let b = loaded.params.get(net.params.name(i)).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn loading_the_wrong_kind_is_rejected() {
    let net = G1::<f32>::new(tiny(), 22).unwrap();
    let meta = CheckpointMeta {
        version: 0,
        kind: "g2".into(),
        backbone: Some(net.cfg),
        discriminator: None,
        iters: 0,
        config: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    Checkpoint::from_store(meta, &net.params).save(&path).unwrap();
    let err = match load_g1(&path) {
        Err(e) => e.to_string(),
        Ok(_) => panic!("kind mismatch accepted"),
    };
    assert!(err.contains("expected g1"), "{err}");
}

#[test]
fn g2_trunk_init_copies_exactly_and_leaves_head_alone() {
    let g1 = G1::<f32>::new(tiny(), 30).unwrap();
    let mut g2 = G2::<f32>::new(tiny(), 31).unwrap();
    let head_before = g2.params.get("head.out.w").unwrap().clone();
    let copied = g2.init_trunk_from(&g1.params).unwrap();
    assert!(copied > 0);
    let mut trunk_tensors = 0;
    for (name, v) in g2.params.iter() {
        if name.starts_with("trunk.") {
            trunk_tensors += 1;
            let src = g1.params.get(name).unwrap();
            assert!(v.iter().zip(src.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
        }
    }
    assert_eq!(copied, trunk_tensors);
    assert_eq!(g2.params.get("head.out.w").unwrap(), &head_before);
}

#[test]
fn g2_trunk_init_reports_shape_mismatches_by_name() {
    let g1 = G1::<f32>::new(BackboneConfig { base_channels: 8, ..tiny() }, 32).unwrap();
    let mut g2 = G2::<f32>::new(tiny(), 33).unwrap();
    let err = g2.init_trunk_from(&g1.params).unwrap_err().to_string();
    assert!(err.contains("trunk.stem.w"), "{err}");
    let empty = ParamStore::<f32>::new();
    let err = g2.init_trunk_from(&empty).unwrap_err().to_string();
    assert!(err.contains("missing") && err.contains("trunk.stem.w"), "{err}");
}

#[test]
fn one_backward_pass_reaches_every_parameter() {
    for block in [BlockKind::HddLite, BlockKind::PlainConv] {
        let cfg = BackboneConfig { depth: 2, base_channels: 4, block };
        let net = G1::<f64>::new(cfg, 40).unwrap();
        let mut g = Graph::new();
        let bound = net.params.bind(&mut g, true);
        let x = g.constant(rand_input(&[1, 1, 8, 8], 4));
        let out = net.forward(&mut g, &bound, x);
        // Random positive weights on every output keep cancellation from
        // masking a live path.
        let r1 = g.constant(rand_input(&[1, 2, 8, 8], 5));
        let r2 = g.constant(rand_input(&[1, 1, 8, 8], 6));
        let a = g.mul(out.seg_prob, r1);
        let a = g.sum_all(a);
        let b = g.mul(out.det_heat, r2);
        let b = g.sum_all(b);
        let c = g.sum_all(out.count_hat);
        let ab = g.add(a, b);
        let loss = g.add(ab, c);
        g.backward(loss);
        let grads = collect_grads(&mut g, &bound);
        for (i, gr) in grads.iter().enumerate() {
            let gr = gr.as_ref().unwrap_or_else(|| panic!("no grad for {}", net.params.name(i)));
            let mag = gr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(mag > 0.0, "zero grad for {}", net.params.name(i));
        }
    }
}

#[test]
fn discriminator_backward_reaches_every_parameter() {
    let d = Discriminator::<f64>::new(DiscriminatorConfig { channels: vec![4, 8, 1] }, 41).unwrap();
    let mut g = Graph::new();
    let bound = d.params.bind(&mut g, true);
    let x = g.constant(rand_input(&[1, 2, 16, 16], 7));
    let y = d.forward(&mut g, &bound, x);
    let sq = g.square(y);
    let loss = g.sum_all(sq);
    g.backward(loss);
    for (i, gr) in collect_grads(&mut g, &bound).iter().enumerate() {
        let mag =
            gr.as_ref().map(|a| a.iter().fold(0.0f64, |m, v| m.max(v.abs()))).unwrap_or(0.0);
        assert!(mag > 0.0, "zero grad for {}", d.params.name(i));
    }
}

#[test]
fn model_info_reports_shapes_and_rejects_indivisible_inputs() {
    let infos =
        model_info(&BackboneConfig::default(), &DiscriminatorConfig::desk(), (128, 128)).unwrap();
    assert_eq!(infos.len(), 3);
    assert!(infos.iter().all(|i| i.parameters > 0));
    let g1 = &infos[0];
    assert_eq!(g1.kind, "g1");
    assert_eq!(g1.output_shapes[0].1, vec![1, 2, 128, 128]);
    let d = &infos[2];
    assert_eq!(d.output_shapes[0].1, vec![1, 1, 4, 4]);
    assert!(model_info(&BackboneConfig::default(), &DiscriminatorConfig::desk(), (100, 100))
        .is_err());
}

#[test]
fn sgd_poly_schedule_and_momentum_update() {
    let mut store = ParamStore::<f64>::new();
    store.add("w".into(), ArrayD::from_elem(IxDyn(&[1]), 1.0));
    let mut opt = SgdPoly::new(0.5, 0.9, 0.9, 100);
    assert!((opt.lr(0) - 0.5).abs() < 1e-12);
    assert!(opt.lr(100) == 0.0);
    assert!((opt.lr(50) - 0.5 * 0.5f64.powf(0.9)).abs() < 1e-12);
    // Two steps with grad 1 at iter 0: v1 = 1, w1 = 1 - 0.5; v2 = 1.9.
    let grad = vec![Some(ArrayD::from_elem(IxDyn(&[1]), 1.0))];
    opt.step(&mut store, &grad, 0);
    assert!((store.value(0)[[0]] - 0.5).abs() < 1e-12);
    opt.step(&mut store, &grad, 0);
    assert!((store.value(0)[[0]] - (0.5 - 0.5 * 1.9)).abs() < 1e-12);
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut store = ParamStore::<f64>::new();
    store.add("w".into(), ArrayD::from_elem(IxDyn(&[2]), 0.0));
    let mut opt = Adam::new(1e-3, 0.9, 0.99);
    let g = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3, -0.7]).unwrap();
    opt.step(&mut store, &[Some(g.clone())]);
    for (i, &gv) in g.iter().enumerate() {
        let want = -1e-3 * gv / (gv.abs() + 1e-8);
        assert!((store.value(0)[[i]] - want).abs() < 1e-9);
    }
}
