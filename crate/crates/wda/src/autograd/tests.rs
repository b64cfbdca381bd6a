use super::conv::{conv2d_forward, depthwise_forward, ConvCfg};
use super::{Graph, NodeId};
use ndarray::{ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn randn(rng: &mut StdRng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// Central finite differences of `f` w.r.t. every input, compared against
/// the graph gradient with relative tolerance `tol`.
fn check_grads(
    inputs: &[ArrayD<f64>],
    f: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    tol: f64,
) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = f(&mut g, &ids);
    g.backward(out);
    let analytic: Vec<ArrayD<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("missing gradient").clone())
        .collect();

    let eval = |inputs: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| g.leaf(x.clone(), false)).collect();
        let out = f(&mut g, &ids);
        g.scalar(out)
    };
    let h = 1e-5;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[j] -= h;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ana = analytic[i].as_slice().unwrap()[j];
            let denom = num.abs().max(ana.abs()).max(1.0);
            assert!(
                (num - ana).abs() / denom < tol,
                "input {i} elem {j}: numeric {num} vs analytic {ana}"
            );
        }
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = StdRng::seed_from_u64(7);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let y = randn(&mut rng, &[2, 3, 4, 4]);
    check_grads(&[x.clone(), y.clone()], &|g, ids| {
        let a = g.mul(ids[0], ids[1]);
        let b = g.sub(ids[0], a);
        let c = g.add(b, ids[1]);
        let d = g.scale(c, 0.7);
        let e = g.offset(d, -0.3);
        let f = g.square(e);
        g.sum_all(f)
    }, 1e-6);
    check_grads(&[x.clone()], &|g, ids| {
        let a = g.sigmoid(ids[0]);
        let b = g.softplus(a);
        g.sum_all(b)
    }, 1e-6);
    check_grads(&[x.clone()], &|g, ids| {
        // keep inputs away from the kink at 0
        let a = g.offset(ids[0], 3.0);
        let b = g.leaky_relu(a, 0.2);
        let c = g.relu(b);
        g.sum_all(c)
    }, 1e-6);
    check_grads(&[x], &|g, ids| {
        let a = g.sigmoid(ids[0]); // (0,1), inside the clamp band
        let b = g.ln_clamped(a, 1e-7, 1.0 - 1e-7);
        g.sum_all(b)
    }, 1e-6);
}

#[test]
fn softmax_and_reductions_match_finite_differences() {
    let mut rng = StdRng::seed_from_u64(8);
    let x = randn(&mut rng, &[2, 3, 3, 3]);
    let w = randn(&mut rng, &[2, 3, 3, 3]);
    check_grads(&[x.clone(), w], &|g, ids| {
        let p = g.softmax_ch(ids[0]);
        let q = g.mul(p, ids[1]);
        g.sum_all(q)
    }, 1e-6);
    check_grads(&[x], &|g, ids| {
        let s = g.sum_per_image(ids[0]);
        let t = g.square(s);
        let m = g.sum_all(t);
        g.scale(m, 0.5)
    }, 1e-6);
}

#[test]
fn bias_pool_upsample_concat_match_finite_differences() {
    let mut rng = StdRng::seed_from_u64(9);
    let x = randn(&mut rng, &[2, 2, 4, 4]);
    let b = randn(&mut rng, &[2]);
    check_grads(&[x.clone(), b], &|g, ids| {
        let a = g.add_bias(ids[0], ids[1]);
        let p = g.maxpool2(a);
        let u = g.upsample_nearest2(p);
        let s = g.square(u);
        g.sum_all(s)
    }, 1e-5);
    let y = randn(&mut rng, &[2, 3, 4, 4]);
    check_grads(&[x, y], &|g, ids| {
        let c = g.concat_ch(ids[0], ids[1]);
        let s = g.square(c);
        g.sum_all(s)
    }, 1e-6);
}

/// Direct nested-loop convolution used as the oracle for the GEMM path.
fn conv_naive(x: &ArrayD<f64>, w: &ArrayD<f64>, cfg: ConvCfg, groups_depthwise: bool) -> ArrayD<f64> {
    let (b, cin, h, wd) = {
        let s = x.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (cout, _, kh, kw) = {
        let s = w.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (oh, ow) = cfg.out_hw(h, wd, kh, kw);
    let mut y = ArrayD::zeros(IxDyn(&[b, cout, oh, ow]));
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    let cin_range: Vec<usize> = if groups_depthwise { vec![co] } else { (0..cin).collect() };
                    for (wci, &ci) in cin_range.iter().enumerate() {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * cfg.stride + i * cfg.dilation) as isize - cfg.pad.0 as isize;
                                let ix = (ox * cfg.stride + j * cfg.dilation) as isize - cfg.pad.1 as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += w[[co, wci, i, j]] * x[[bi, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    y[[bi, co, oy, ox]] = acc;
                }
            }
        }
    }
    y
}

#[test]
fn conv2d_forward_matches_naive_convolution() {
    let mut rng = StdRng::seed_from_u64(10);
    let mut scratch = Vec::new();
    let cases = [
        (vec![2, 3, 8, 8], vec![4, 3, 3, 3], ConvCfg::same3(1)),
        (vec![1, 2, 9, 7], vec![3, 2, 3, 3], ConvCfg { stride: 2, pad: (1, 1), dilation: 1 }),
        (vec![2, 4, 8, 8], vec![5, 4, 1, 1], ConvCfg::unit()),
        (vec![1, 2, 10, 10], vec![2, 2, 3, 3], ConvCfg::same3(2)),
        (vec![1, 3, 8, 8], vec![2, 3, 4, 4], ConvCfg { stride: 2, pad: (1, 1), dilation: 1 }),
        (vec![1, 2, 8, 6], vec![2, 2, 1, 3], ConvCfg::same(1, 3)),
        (vec![1, 2, 8, 6], vec![2, 2, 3, 1], ConvCfg::same(3, 1)),
    ];
    for (xs, wsairs, cfg) in cases {
        let x = randn(&mut rng, &xs);
        let w = randn(&mut rng, &wsairs);
        let got = conv2d_forward(&x, &w, cfg, &mut scratch);
        let want = conv_naive(&x, &w, cfg, false);
        let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10, "cfg {cfg:?}: max abs err {err}");
    }
}

#[test]
fn depthwise_forward_matches_naive_convolution() {
    let mut rng = StdRng::seed_from_u64(11);
    let x = randn(&mut rng, &[2, 3, 8, 8]);
    let w = randn(&mut rng, &[3, 1, 3, 3]);
    for cfg in [ConvCfg::same3(1), ConvCfg::same3(2), ConvCfg { stride: 2, pad: (1, 1), dilation: 1 }] {
        let got = depthwise_forward(&x, &w, cfg);
        let want = conv_naive(&x, &w, cfg, true);
        let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10, "cfg {cfg:?}: max abs err {err}");
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = StdRng::seed_from_u64(12);
    for cfg in [
        ConvCfg::same3(1),
        ConvCfg { stride: 2, pad: (1, 1), dilation: 1 },
        ConvCfg::same3(2),
        ConvCfg::unit(),
    ] {
        let (kh, kw) = if cfg == ConvCfg::unit() { (1, 1) } else { (3, 3) };
        let x = randn(&mut rng, &[2, 2, 6, 6]);
        let w = randn(&mut rng, &[3, 2, kh, kw]);
        let m = randn(&mut rng, &[1]); // scalar mixer to vary output weighting
        check_grads(&[x, w, m], &|g, ids| {
            let y = g.conv2d(ids[0], ids[1], cfg);
            let sq = g.square(y);
            let s = g.sum_all(sq);
            let t = g.sum_all(ids[2]);
            let u = g.mul(s, t);
            g.sum_all(u)
        }, 1e-5);
    }
}

#[test]
fn depthwise_gradients_match_finite_differences() {
    let mut rng = StdRng::seed_from_u64(13);
    let x = randn(&mut rng, &[1, 3, 6, 6]);
    let w = randn(&mut rng, &[3, 1, 3, 3]);
    check_grads(&[x, w], &|g, ids| {
        let y = g.depthwise_conv2d(ids[0], ids[1], ConvCfg::same3(2));
        let sq = g.square(y);
        g.sum_all(sq)
    }, 1e-5);
}

#[test]
fn gradients_accumulate_across_shared_subexpressions() {
    // f = sum(x*x) + sum(x) uses x twice; grad = 2x + 1.
    let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0f64, -2.0, 0.5]).unwrap();
    let mut g = Graph::new();
    let xid = g.leaf(x, true);
    let sq = g.square(xid);
    let a = g.sum_all(sq);
    let b = g.sum_all(xid);
    let tot = g.add(a, b);
    g.backward(tot);
    let got = g.grad(xid).unwrap().as_slice().unwrap().to_vec();
    assert_eq!(got, vec![3.0, -3.0, 2.0]);
}

#[test]
fn constant_leaves_receive_no_gradient() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(ArrayD::from_elem(IxDyn(&[2]), 2.0), true);
    let c = g.constant(ArrayD::from_elem(IxDyn(&[2]), 5.0));
    let y = g.mul(x, c);
    let s = g.sum_all(y);
    g.backward(s);
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().as_slice().unwrap(), &[5.0, 5.0]);
}

#[test]
fn maxpool_ties_pick_the_first_corner() {
    let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0f64, 1.0, 1.0, 1.0]).unwrap();
    let mut g = Graph::new();
    let xid = g.leaf(x, true);
    let p = g.maxpool2(xid);
    let s = g.sum_all(p);
    g.backward(s);
    assert_eq!(g.grad(xid).unwrap().as_slice().unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}
