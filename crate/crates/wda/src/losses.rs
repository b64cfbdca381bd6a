//! Training objectives: partial cross-entropy segmentation loss, weighted
//! detection regression, the discriminator/adversarial pair, the counting
//! consistency hinge, and their weighted combination.
//!
//! Each loss exists once, as a graph builder (`*_node`); the plain
//! evaluation functions run the same builders on constant inputs, so
//! a value checked in a test is exactly the value training optimizes.
//!
//! Reductions are pixel means inside each image, then a mean over the
//! batch, which keeps the loss weights independent of patch size.

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::autograd::{Graph, NodeId, Scalar};
use crate::error::{Result, WdaError};
use crate::pseudo::PseudoLabelMask;

/// Probabilities are clipped to `[CLIP, 1-CLIP]` inside every log.
pub const PROB_CLIP: f64 = 1e-7;

/// Scalar weights of the combined objective.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Adversarial weight.
    pub lambda_a: f64,
    /// Detection weight.
    pub lambda_d: f64,
    /// Focus multiplier on the center-neighborhood weight maps.
    pub lambda_focus: f64,
    /// Margin of the counting consistency hinge.
    pub epsilon: f64,
    /// Confident-background probability threshold.
    pub rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_a: 1e-3, lambda_d: 1e-1, lambda_focus: 3.0, epsilon: 3.0, rho: 0.1 }
    }
}

/// Consistency weight schedule: decays linearly from 1 to 0 over
/// `z_max` iterations, clamped at 0 afterwards.
pub fn lambda_c(z: u64, z_max: u64) -> f64 {
    assert!(z_max > 0, "z_max must be positive");
    (1.0 - z as f64 / z_max as f64).max(0.0)
}

fn count_labeled_per_image<T: Scalar>(onehot: &ArrayD<T>) -> Vec<usize> {
    let s = onehot.shape();
    let (b, per) = (s[0], s[1] * s[2] * s[3]);
    let v = onehot.as_slice().expect("onehot must be contiguous");
    (0..b)
        .map(|i| v[i * per..(i + 1) * per].iter().filter(|&&x| x > T::zero()).count())
        .collect()
}

/// Mean cross-entropy over the labeled pixels of each image, then over the
/// batch. `p` is a `[B,2,H,W]` probability node; `onehot` is `[B,2,H,W]`
/// with all-zero columns meaning "ignored". Ignored pixels contribute
/// exactly zero loss and zero gradient; an image with no labels
/// contributes zero.
pub fn partial_ce_node<T: Scalar>(g: &mut Graph<T>, p: NodeId, onehot: &ArrayD<T>) -> NodeId {
    assert_eq!(g.value(p).shape(), onehot.shape(), "partial_ce: shape mismatch");
    let b = onehot.shape()[0];
    let counts = count_labeled_per_image(onehot);
    let lnp = g.ln_clamped(p, T::c(PROB_CLIP), T::c(1.0 - PROB_CLIP));
    let neg = g.scale(lnp, -T::one());
    let mask = g.constant(onehot.clone());
    let picked = g.mul(neg, mask);
    let per_image = g.sum_per_image(picked);
    let norm: Vec<T> = counts
        .iter()
        .map(|&n| if n == 0 { T::zero() } else { T::one() / T::c((b * n) as f64) })
        .collect();
    let norm = g.constant(ArrayD::from_shape_vec(IxDyn(&[b]), norm).unwrap());
    let weighted = g.mul(per_image, norm);
    g.sum_all(weighted)
}

/// Segmentation loss: full-label cross-entropy on the source batch plus
/// partial cross-entropy on the pseudo-labeled target batch (when given).
pub fn seg_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    p_s: NodeId,
    y_s: &ArrayD<T>,
    target: Option<(NodeId, &ArrayD<T>)>,
) -> NodeId {
    let src = partial_ce_node(g, p_s, y_s);
    match target {
        Some((p_t, yhat)) => {
            let tgt = partial_ce_node(g, p_t, yhat);
            g.add(src, tgt)
        }
        None => src,
    }
}

/// Per-pixel weighted squared error, averaged over all pixels of each
/// image then over the batch: `mean(weight * (pred - target)^2)`.
/// The weights are folded into one constant, so zero-weight pixels have
/// exactly zero gradient.
pub fn weighted_mse_node<T: Scalar>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: &ArrayD<T>,
    weight: &ArrayD<T>,
) -> NodeId {
    assert_eq!(g.value(pred).shape(), target.shape(), "weighted_mse: target shape");
    assert_eq!(target.shape(), weight.shape(), "weighted_mse: weight shape");
    let n: usize = target.len();
    let scaled: ArrayD<T> = weight.mapv(|w| w / T::c(n as f64));
    let t = g.constant(target.clone());
    let w = g.constant(scaled);
    let diff = g.sub(pred, t);
    let sq = g.square(diff);
    let prod = g.mul(sq, w);
    g.sum_all(prod)
}

/// Source half of the detection loss: weight `1 + lambda * beta`.
pub fn detection_source_node<T: Scalar>(
    g: &mut Graph<T>,
    hhat: NodeId,
    h: &ArrayD<T>,
    beta: &ArrayD<T>,
    lambda_focus: f64,
) -> NodeId {
    let lam = T::c(lambda_focus);
    let weight = beta.mapv(|b| T::one() + lam * b);
    weighted_mse_node(g, hhat, h, &weight)
}

/// Target half of the detection loss: weight `w + lambda * beta`, so
/// pixels with `w = 0` and `beta = 0` contribute nothing.
pub fn detection_target_node<T: Scalar>(
    g: &mut Graph<T>,
    hhat: NodeId,
    hbar: &ArrayD<T>,
    w: &ArrayD<T>,
    beta: &ArrayD<T>,
    lambda_focus: f64,
) -> NodeId {
    let lam = T::c(lambda_focus);
    let weight = ndarray::Zip::from(w).and(beta).map_collect(|&w, &b| w + lam * b);
    weighted_mse_node(g, hhat, hbar, &weight)
}

/// Full detection loss over both domains.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    hhat_s: NodeId,
    h_s: &ArrayD<T>,
    beta_s: &ArrayD<T>,
    hhat_t: NodeId,
    hbar_t: &ArrayD<T>,
    w_t: &ArrayD<T>,
    beta_t: &ArrayD<T>,
    lambda_focus: f64,
) -> NodeId {
    let src = detection_source_node(g, hhat_s, h_s, beta_s, lambda_focus);
    let tgt = detection_target_node(g, hhat_t, hbar_t, w_t, beta_t, lambda_focus);
    g.add(src, tgt)
}

/// Discriminator objective: score source outputs as 1 and target outputs
/// as 0. Inputs are probability grids (post-sigmoid).
pub fn discriminator_loss_node<T: Scalar>(g: &mut Graph<T>, d_ps: NodeId, d_pt: NodeId) -> NodeId {
    let (lo, hi) = (T::c(PROB_CLIP), T::c(1.0 - PROB_CLIP));
    let ln_s = g.ln_clamped(d_ps, lo, hi);
    let m_s = g.mean_all(ln_s);
    let neg = g.scale(d_pt, -T::one());
    let one_minus = g.offset(neg, T::one());
    let ln_t = g.ln_clamped(one_minus, lo, hi);
    let m_t = g.mean_all(ln_t);
    let sum = g.add(m_s, m_t);
    g.scale(sum, -T::one())
}

/// Adversarial objective for the generator: make the discriminator score
/// target outputs as source.
pub fn adversarial_loss_node<T: Scalar>(g: &mut Graph<T>, d_pt: NodeId) -> NodeId {
    let ln_t = g.ln_clamped(d_pt, T::c(PROB_CLIP), T::c(1.0 - PROB_CLIP));
    let m = g.mean_all(ln_t);
    g.scale(m, -T::one())
}

/// Counting consistency hinge, meaned over the batch: zero inside the band
/// `[T - eps, T + eps]`, slope 1 outside. `t_hat` has shape `[B]`.
pub fn counting_consistency_node<T: Scalar>(
    g: &mut Graph<T>,
    t_hat: NodeId,
    t: &[f64],
    epsilon: f64,
) -> NodeId {
    let b = g.value(t_hat).len();
    assert_eq!(b, t.len(), "counting_consistency: batch size mismatch");
    let upper = ArrayD::from_shape_vec(IxDyn(&[b]), t.iter().map(|&v| T::c(v + epsilon)).collect()).unwrap();
    let lower = ArrayD::from_shape_vec(IxDyn(&[b]), t.iter().map(|&v| T::c(v - epsilon)).collect()).unwrap();
    let upper = g.constant(upper);
    let lower = g.constant(lower);
    let over = g.sub(t_hat, upper);
    let over = g.relu(over);
    let under = g.sub(lower, t_hat);
    let under = g.relu(under);
    let sum = g.add(over, under);
    let total = g.sum_all(sum);
    g.scale(total, T::one() / T::c(b as f64))
}

/// Combined generator objective:
/// `L_seg + lambda_a L_adv + lambda_d L_det + lambda_c(z) L_cons`.
pub fn total_generator_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    l_seg: NodeId,
    l_adv: Option<NodeId>,
    l_det: Option<NodeId>,
    l_cons: Option<NodeId>,
    weights: &LossWeights,
    z: u64,
    z_max: u64,
) -> NodeId {
    let mut total = l_seg;
    if let Some(a) = l_adv {
        let a = g.scale(a, T::c(weights.lambda_a));
        total = g.add(total, a);
    }
    if let Some(d) = l_det {
        let d = g.scale(d, T::c(weights.lambda_d));
        total = g.add(total, d);
    }
    if let Some(c) = l_cons {
        let lc = lambda_c(z, z_max);
        if lc > 0.0 {
            let c = g.scale(c, T::c(lc));
            total = g.add(total, c);
        }
    }
    total
}

// ---------------------------------------------------------------------
// Plain evaluation wrappers: single-image, double precision, validated.
// ---------------------------------------------------------------------

fn ensure_finite(name: &str, vals: &[&Array3<f64>]) -> Result<()> {
    for a in vals {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(WdaError::Invalid(format!("{name}: non-finite input")));
        }
    }
    Ok(())
}

fn batchify3(a: &Array3<f64>) -> ArrayD<f64> {
    let (c, h, w) = a.dim();
    a.clone().into_shape_with_order(IxDyn(&[1, c, h, w])).unwrap()
}

fn batchify2(a: &Array2<f64>) -> ArrayD<f64> {
    let (h, w) = a.dim();
    a.clone().into_shape_with_order(IxDyn(&[1, 1, h, w])).unwrap()
}

fn onehot_to_f64(m: &Array3<u8>) -> ArrayD<f64> {
    let (c, h, w) = m.dim();
    let v: Vec<f64> = m.iter().map(|&x| x as f64).collect();
    ArrayD::from_shape_vec(IxDyn(&[1, c, h, w]), v).unwrap()
}

/// Segmentation loss of one source image and one pseudo-labeled target
/// image. Probability maps are `(2, H, W)`.
pub fn seg_loss(
    p_s: &Array3<f64>,
    y_s: &Array3<u8>,
    p_t: &Array3<f64>,
    yhat_t: &PseudoLabelMask,
) -> Result<f64> {
    ensure_finite("seg_loss", &[p_s, p_t])?;
    if p_s.dim() != (y_s.dim().0, y_s.dim().1, y_s.dim().2) || p_t.dim().1 != yhat_t.onehot.dim().1 {
        return Err(WdaError::Shape("seg_loss: shape mismatch".into()));
    }
    let mut g: Graph<f64> = Graph::new();
    let ps = g.constant(batchify3(p_s));
    let pt = g.constant(batchify3(p_t));
    let ys = onehot_to_f64(y_s);
    let yt = onehot_to_f64(&yhat_t.onehot);
    let out = seg_loss_node(&mut g, ps, &ys, Some((pt, &yt)));
    Ok(g.scalar(out))
}

/// Detection loss of one source and one target image. All grids `(H, W)`.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss(
    hhat_s: &Array2<f64>,
    h_s: &Array2<f64>,
    beta_s: &Array2<f64>,
    hhat_t: &Array2<f64>,
    hbar_t: &Array2<f64>,
    w_t: &Array2<u8>,
    beta_t: &Array2<f64>,
    lambda_focus: f64,
) -> Result<f64> {
    if beta_s.iter().chain(beta_t.iter()).any(|&b| b < 0.0) {
        return Err(WdaError::Invalid("detection_loss: negative focus weight".into()));
    }
    if lambda_focus < 0.0 {
        return Err(WdaError::Invalid("detection_loss: negative lambda".into()));
    }
    let mut g: Graph<f64> = Graph::new();
    let hs = g.constant(batchify2(hhat_s));
    let ht = g.constant(batchify2(hhat_t));
    let w_t: Array2<f64> = w_t.mapv(|v| v as f64);
    let out = detection_loss_node(
        &mut g,
        hs,
        &batchify2(h_s),
        &batchify2(beta_s),
        ht,
        &batchify2(hbar_t),
        &batchify2(&w_t),
        &batchify2(beta_t),
        lambda_focus,
    );
    Ok(g.scalar(out))
}

fn check_prob_grid(name: &str, a: &Array2<f64>) -> Result<()> {
    if a.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(WdaError::Invalid(format!("{name}: probability outside [0,1]")));
    }
    Ok(())
}

/// Discriminator loss over two score grids (post-sigmoid).
pub fn discriminator_loss(d_ps: &Array2<f64>, d_pt: &Array2<f64>) -> Result<f64> {
    check_prob_grid("discriminator_loss", d_ps)?;
    check_prob_grid("discriminator_loss", d_pt)?;
    let mut g: Graph<f64> = Graph::new();
    let s = g.constant(batchify2(d_ps));
    let t = g.constant(batchify2(d_pt));
    let out = discriminator_loss_node(&mut g, s, t);
    Ok(g.scalar(out))
}

/// Adversarial loss over one target score grid (post-sigmoid).
pub fn adversarial_loss(d_pt: &Array2<f64>) -> Result<f64> {
    check_prob_grid("adversarial_loss", d_pt)?;
    let mut g: Graph<f64> = Graph::new();
    let t = g.constant(batchify2(d_pt));
    let out = adversarial_loss_node(&mut g, t);
    Ok(g.scalar(out))
}

/// Hinge on the difference between a predicted and a reference count:
/// zero inside `[t - epsilon, t + epsilon]`, slope 1 outside.
pub fn counting_consistency(t_hat: f64, t: f64, epsilon: f64) -> f64 {
    assert!(epsilon >= 0.0, "epsilon must be non-negative");
    (t_hat - (t + epsilon)).max(0.0) + ((t - epsilon) - t_hat).max(0.0)
}

/// Components of the combined objective.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct LossParts {
    pub l_seg: f64,
    pub l_adv: f64,
    pub l_det: f64,
    pub l_cons: f64,
}

/// Scalar version of the combined objective.
pub fn total_generator_loss(parts: &LossParts, weights: &LossWeights, z: u64, z_max: u64) -> f64 {
    parts.l_seg
        + weights.lambda_a * parts.l_adv
        + weights.lambda_d * parts.l_det
        + lambda_c(z, z_max) * parts.l_cons
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full_labels(mask: &Array2<u8>) -> Array3<u8> {
        let (h, w) = mask.dim();
        let mut y = Array3::<u8>::zeros((2, h, w));
        for ((r, c), &m) in mask.indexed_iter() {
            y[[usize::from(m != 0), r, c]] = 1;
        }
        y
    }

    fn probs_from_labels(y: &Array3<u8>, confidence: f64) -> Array3<f64> {
        let (_, h, w) = y.dim();
        let mut p = Array3::<f64>::zeros((2, h, w));
        for r in 0..h {
            for c in 0..w {
                let cls = usize::from(y[[1, r, c]] == 1);
                p[[cls, r, c]] = confidence;
                p[[1 - cls, r, c]] = 1.0 - confidence;
            }
        }
        p
    }

    #[test]
    fn perfect_confident_prediction_has_negligible_seg_loss() {
        let mut mask = Array2::<u8>::zeros((6, 6));
        mask[[2, 2]] = 1;
        let y = full_labels(&mask);
        let p = probs_from_labels(&y, 1.0 - 1e-7);
        let ignored = PseudoLabelMask { onehot: Array3::zeros((2, 6, 6)), coverage: 0.0 };
        let l = seg_loss(&p, &y, &p, &ignored).unwrap();
        assert!(l <= 1e-6, "got {l}");
    }

    #[test]
    fn fully_ignored_target_reduces_to_the_source_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mask = Array2::<u8>::zeros((5, 5));
        mask[[1, 1]] = 1;
        mask[[3, 4]] = 1;
        let y = full_labels(&mask);
        let p = probs_from_labels(&y, 0.7);
        let junk = Array3::<f64>::from_shape_fn((2, 5, 5), |_| rng.gen_range(0.0..1.0));
        let mut junk_p = junk.clone();
        for r in 0..5 {
            for c in 0..5 {
                let s = junk[[0, r, c]] + junk[[1, r, c]];
                junk_p[[0, r, c]] /= s;
                junk_p[[1, r, c]] /= s;
            }
        }
        let ignored = PseudoLabelMask { onehot: Array3::zeros((2, 5, 5)), coverage: 0.0 };
        let with_target = seg_loss(&p, &y, &junk_p, &ignored).unwrap();
        let source_only = -(0.7f64.ln()); // every pixel predicted right at 0.7
        assert!((with_target - source_only).abs() < 1e-9);
    }

    #[test]
    fn uniform_predictions_with_full_labels_cost_two_log_two() {
        let mask = Array2::<u8>::zeros((4, 4));
        let y = full_labels(&mask);
        let p = Array3::<f64>::from_elem((2, 4, 4), 0.5);
        let full = PseudoLabelMask { onehot: full_labels(&mask), coverage: 1.0 };
        let l = seg_loss(&p, &y, &p, &full).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() <= 1e-6, "got {l}");
    }

    #[test]
    fn seg_loss_rejects_nan() {
        let mask = Array2::<u8>::zeros((2, 2));
        let y = full_labels(&mask);
        let mut p = probs_from_labels(&y, 0.9);
        p[[0, 0, 0]] = f64::NAN;
        let ignored = PseudoLabelMask { onehot: Array3::zeros((2, 2, 2)), coverage: 0.0 };
        assert!(seg_loss(&p, &y, &p.mapv(|v| if v.is_nan() { 0.5 } else { v }), &ignored).is_err());
    }

    #[test]
    fn ignored_pixels_receive_exactly_zero_gradient() {
        // Logits -> softmax -> partial CE; the ignored pixel's logits must
        // end with grad identically 0.0, not merely small.
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 2]), vec![0.3, -0.7, 0.2, 0.9]).unwrap(),
            true,
        );
        let p = g.softmax_ch(logits);
        // pixel 0 labeled class 1, pixel 1 ignored
        let onehot = ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 2]), vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = partial_ce_node(&mut g, p, &onehot);
        g.backward(loss);
        let grad = g.grad(logits).unwrap();
        assert_ne!(grad[[0, 0, 0, 0]], 0.0);
        assert_eq!(grad[[0, 0, 0, 1]], 0.0);
        assert_eq!(grad[[0, 1, 0, 1]], 0.0);
    }

    #[test]
    fn detection_loss_matches_the_worked_single_pixel_example() {
        let one = |v: f64| Array2::from_elem((1, 1), v);
        let l = detection_loss(
            &one(2.0),          // prediction
            &one(0.0),          // truth
            &one(0.5),          // beta_s
            &one(0.0),          // target prediction
            &one(0.0),
            &Array2::zeros((1, 1)),
            &one(0.0),
            3.0,
        )
        .unwrap();
        assert!((l - 10.0).abs() < 1e-12, "got {l}");
    }

    #[test]
    fn exact_regression_and_no_knowledge_both_cost_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Array2::<f64>::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
        let beta = Array2::<f64>::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
        let zero = Array2::<f64>::zeros((4, 4));
        let exact = detection_loss(&h, &h, &beta, &h, &h, &Array2::ones((4, 4)), &beta, 3.0).unwrap();
        assert_eq!(exact, 0.0);
        let junk = Array2::<f64>::from_shape_fn((4, 4), |_| rng.gen_range(-5.0..5.0));
        let blind =
            detection_loss(&zero, &zero, &zero, &junk, &zero, &Array2::zeros((4, 4)), &zero, 3.0).unwrap();
        assert_eq!(blind, 0.0, "no-knowledge target pixels contribute nothing");
    }

    #[test]
    fn unknown_target_pixels_receive_exactly_zero_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let pred = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![0.7, -0.4]).unwrap(),
            true,
        );
        let hbar = ArrayD::zeros(IxDyn(&[1, 1, 1, 2]));
        // pixel 0 known background (w=1), pixel 1 unknown
        let w = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![1.0, 0.0]).unwrap();
        let beta = ArrayD::zeros(IxDyn(&[1, 1, 1, 2]));
        let loss = detection_target_node(&mut g, pred, &hbar, &w, &beta, 3.0);
        g.backward(loss);
        let grad = g.grad(pred).unwrap();
        assert_ne!(grad[[0, 0, 0, 0]], 0.0);
        assert_eq!(grad[[0, 0, 0, 1]], 0.0);
    }

    #[test]
    fn negative_weights_are_rejected() {
        let z = Array2::<f64>::zeros((2, 2));
        let neg = Array2::<f64>::from_elem((2, 2), -0.1);
        assert!(detection_loss(&z, &z, &neg, &z, &z, &Array2::zeros((2, 2)), &z, 3.0).is_err());
    }

    #[test]
    fn discriminator_loss_reference_values() {
        let half = Array2::<f64>::from_elem((3, 3), 0.5);
        let l = discriminator_loss(&half, &half).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);

        let ones = Array2::<f64>::from_elem((3, 3), 1.0);
        let zeros = Array2::<f64>::zeros((3, 3));
        let perfect = discriminator_loss(&ones, &zeros).unwrap();
        assert!(perfect.abs() < 1e-5, "perfect discrimination costs ~0, got {perfect}");

        let a = Array2::<f64>::from_elem((2, 2), 0.8);
        let b = Array2::<f64>::from_elem((2, 2), 0.3);
        let l = discriminator_loss(&a, &b).unwrap();
        assert!((l - (-(0.8f64.ln()) - 0.7f64.ln())).abs() < 1e-9);

        let bad = Array2::<f64>::from_elem((2, 2), 1.2);
        assert!(discriminator_loss(&bad, &b).is_err());
    }

    #[test]
    fn adversarial_loss_reference_values() {
        let ones = Array2::<f64>::from_elem((2, 2), 1.0);
        assert!(adversarial_loss(&ones).unwrap().abs() < 1e-5);
        let half = Array2::<f64>::from_elem((2, 2), 0.5);
        assert!((adversarial_loss(&half).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
        let tenth = Array2::<f64>::from_elem((2, 2), 0.1);
        assert!((adversarial_loss(&tenth).unwrap() - 2.3026).abs() < 1e-4);
    }

    #[test]
    fn hinge_band_and_slopes() {
        assert_eq!(counting_consistency(12.0, 10.0, 3.0), 0.0);
        assert_eq!(counting_consistency(15.0, 10.0, 3.0), 2.0);
        assert_eq!(counting_consistency(5.0, 10.0, 3.0), 2.0);
        assert_eq!(counting_consistency(13.0, 10.0, 3.0), 0.0, "band edges cost zero");
        assert_eq!(counting_consistency(7.0, 10.0, 3.0), 0.0);
    }

    #[test]
    fn hinge_is_convex_in_the_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = rng.gen_range(0.0..30.0);
            let eps = rng.gen_range(0.0..5.0);
            let a = rng.gen_range(-10.0..40.0);
            let b = rng.gen_range(-10.0..40.0);
            let mid = 0.5 * (a + b);
            let lhs = counting_consistency(mid, t, eps);
            let rhs = 0.5 * counting_consistency(a, t, eps) + 0.5 * counting_consistency(b, t, eps);
            assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn hinge_node_agrees_with_the_scalar_form() {
        let mut g: Graph<f64> = Graph::new();
        let t_hat = g.leaf(ArrayD::from_shape_vec(IxDyn(&[3]), vec![15.0, 5.0, 11.0]).unwrap(), true);
        let loss = counting_consistency_node(&mut g, t_hat, &[10.0, 10.0, 10.0], 3.0);
        let want = (2.0 + 2.0 + 0.0) / 3.0;
        assert!((g.scalar(loss) - want).abs() < 1e-12);
        g.backward(loss);
        let grad = g.grad(t_hat).unwrap();
        assert_eq!(grad.as_slice().unwrap(), &[1.0 / 3.0, -1.0 / 3.0, 0.0]);
    }

    #[test]
    fn consistency_schedule_decays_linearly_and_clamps() {
        assert_eq!(lambda_c(0, 10_000), 1.0);
        assert_eq!(lambda_c(5_000, 10_000), 0.5);
        assert_eq!(lambda_c(10_000, 10_000), 0.0);
        assert_eq!(lambda_c(15_000, 10_000), 0.0);
    }

    #[test]
    fn total_loss_composes_the_weighted_parts() {
        let parts = LossParts { l_seg: 1.0, l_adv: 2.0, l_det: 3.0, l_cons: 4.0 };
        let w = LossWeights::default();
        let at_start = total_generator_loss(&parts, &w, 0, 10_000);
        assert!((at_start - (1.0 + 2e-3 + 0.3 + 4.0)).abs() < 1e-12);
        let at_end = total_generator_loss(&parts, &w, 10_000, 10_000);
        assert!((at_end - (1.0 + 2e-3 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn losses_are_non_negative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p_raw = Array3::<f64>::from_shape_fn((2, 3, 3), |_| rng.gen_range(0.01..1.0));
            let mut p = p_raw.clone();
            for r in 0..3 {
                for c in 0..3 {
                    let s = p_raw[[0, r, c]] + p_raw[[1, r, c]];
                    p[[0, r, c]] /= s;
                    p[[1, r, c]] /= s;
                }
            }
            let mut mask = Array2::<u8>::zeros((3, 3));
            mask[[rng.gen_range(0..3), rng.gen_range(0..3)]] = 1;
            let y = full_labels(&mask);
            let ignored = PseudoLabelMask { onehot: Array3::zeros((2, 3, 3)), coverage: 0.0 };
            assert!(seg_loss(&p, &y, &p, &ignored).unwrap() >= 0.0);

            let d = Array2::<f64>::from_shape_fn((3, 3), |_| rng.gen_range(0.0..1.0));
            assert!(discriminator_loss(&d, &d).unwrap() >= 0.0);
            assert!(adversarial_loss(&d).unwrap() >= 0.0);
            assert!(counting_consistency(rng.gen_range(-5.0..30.0), 10.0, 3.0) >= 0.0);
        }
    }
}
