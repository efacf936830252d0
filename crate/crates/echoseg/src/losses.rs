//! Training objectives: masked reconstruction, hybrid segmentation loss,
//! pseudo-label objective, cosine alignment, semantic consistency, and the
//! two stage-level compositions. Every loss is built from tape primitives
//! so its analytic gradient is checkable against finite differences.

use ndarray::Array2;
use tapegrad::{Graph, Scalar, Var};

use crate::config::LossConfig;
use crate::{Error, Result};

/// Stage-level loss weights; defaults follow the published recipe.
pub type LossWeights = LossConfig;

/// Mean squared error over masked pixels only (`mask_map` is 0/1 with
/// 1 = masked). Returns 0 with a logged warning when the mask is empty.
pub fn masked_mse<T: Scalar>(g: &mut Graph<T>, reconstruction: Var, original: Var, mask_map: Var) -> Var {
    assert_eq!(g.value(reconstruction).shape(), g.value(original).shape());
    assert_eq!(g.value(reconstruction).shape(), g.value(mask_map).shape());
    let count: f64 = g.value(mask_map).iter().map(|&v| Scalar::to_f64(v)).sum();
    if count == 0.0 {
        log::warn!("masked_mse over an empty mask; contributing 0");
        return g.scalar(T::zero());
    }
    let diff = g.sub(reconstruction, original);
    let sq = g.square(diff);
    let masked = g.mul(sq, mask_map);
    let s = g.sum(masked);
    g.scale(s, T::from_f64(1.0 / count))
}

/// Reconstruction objective: masked MSE on the local view plus masked MSE
/// on the global view.
#[allow(clippy::too_many_arguments)]
pub fn mae_loss<T: Scalar>(
    g: &mut Graph<T>,
    recon_local: Var,
    orig_local: Var,
    mask_local: Var,
    recon_global: Var,
    orig_global: Var,
    mask_global: Var,
) -> Var {
    let l = masked_mse(g, recon_local, orig_local, mask_local);
    let gl = masked_mse(g, recon_global, orig_global, mask_global);
    g.add(l, gl)
}

fn check_binary_target(target: &Array2<u8>) -> Result<()> {
    if target.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument("segmentation target must be binary".into()));
    }
    Ok(())
}

/// Hybrid segmentation loss: soft Dice (smoothing 1.0 on the foreground
/// probability) plus mean pixel cross-entropy, equally weighted.
pub fn seg_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &Array2<u8>) -> Result<Var> {
    seg_loss_smooth(g, logits, target, 1.0)
}

pub fn seg_loss_smooth<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    target: &Array2<u8>,
    smooth: f64,
) -> Result<Var> {
    check_binary_target(target)?;
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {shape:?} vs target with {} pixels",
            target.len()
        )));
    }
    let classes = shape[1];
    let n_px = shape[0];

    let mut onehot = Array2::<T>::zeros((n_px, classes));
    let mut fg = Array2::<T>::zeros((n_px, 1));
    for (i, &t) in target.iter().enumerate() {
        onehot[(i, t as usize)] = T::one();
        if t == 1 {
            fg[(i, 0)] = T::one();
        }
    }
    let n_fg: f64 = target.iter().map(|&t| f64::from(t)).sum();
    let onehot = g.constant(onehot.into_dyn());
    let fg = g.constant(fg.into_dyn());

    // Cross-entropy.
    let lsm = g.log_softmax_rows(logits);
    let picked = g.mul(lsm, onehot);
    let ce_sum = g.sum(picked);
    let ce = g.scale(ce_sum, T::from_f64(-1.0 / n_px as f64));

    // Soft Dice on the foreground probability.
    let probs = g.softmax_rows(logits);
    let p = g.slice_cols(probs, 1, 1);
    let pq = g.mul(p, fg);
    let inter = g.sum(pq);
    let num = g.scale(inter, T::from_f64(2.0));
    let num = g.add_scalar(num, T::from_f64(smooth));
    let p_sum = g.sum(p);
    let den = g.add_scalar(p_sum, T::from_f64(n_fg + smooth));
    let ratio = g.div(num, den);
    let neg = g.neg(ratio);
    let dice_term = g.add_scalar(neg, T::one());

    Ok(g.add(ce, dice_term))
}

/// Pseudo-label objective: target-domain term plus `beta` times the
/// source-domain term, both on masked student views.
pub fn mpl_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_logits_target_masked: Var,
    pseudo_label: &Array2<u8>,
    student_logits_source_masked: Var,
    source_label: &Array2<u8>,
    beta: f64,
) -> Result<Var> {
    let t = seg_loss(g, student_logits_target_masked, pseudo_label)?;
    let s = seg_loss(g, student_logits_source_masked, source_label)?;
    let s = g.scale(s, T::from_f64(beta));
    Ok(g.add(t, s))
}

/// `1 - cos(a, b)` over pooled feature vectors with an epsilon-guarded
/// denominator. The standard form guards the norm product; the literal
/// form reproduces the printed `max(|a|, |b|, eps)` denominator.
pub fn cosine_align<T: Scalar>(
    g: &mut Graph<T>,
    feat_a: Var,
    feat_b: Var,
    epsilon: f64,
    paper_literal: bool,
) -> Var {
    assert_eq!(g.value(feat_a).shape(), g.value(feat_b).shape());
    let prod = g.mul(feat_a, feat_b);
    let dot = g.sum(prod);
    let a2 = g.square(feat_a);
    let a2 = g.sum(a2);
    let na = g.sqrt(a2);
    let b2 = g.square(feat_b);
    let b2 = g.sum(b2);
    let nb = g.sqrt(b2);
    let den = if paper_literal {
        let m = g.maximum(na, nb);
        g.clamp_min(m, T::from_f64(epsilon))
    } else {
        let m = g.mul(na, nb);
        g.clamp_min(m, T::from_f64(epsilon))
    };
    let cos = g.div(dot, den);
    let neg = g.neg(cos);
    g.add_scalar(neg, T::one())
}

/// Cross-echo semantic consistency over pooled encoder and decoder
/// features of same-location views.
#[allow(clippy::too_many_arguments)]
pub fn semantic_consistency<T: Scalar>(
    g: &mut Graph<T>,
    z_enc_i: Var,
    z_enc_j: Var,
    z_dec_i: Var,
    z_dec_j: Var,
    lambda_enc: f64,
    lambda_dec: f64,
    epsilon: f64,
    paper_literal: bool,
) -> Var {
    let e = cosine_align(g, z_enc_i, z_enc_j, epsilon, paper_literal);
    let e = g.scale(e, T::from_f64(lambda_enc));
    let d = cosine_align(g, z_dec_i, z_dec_j, epsilon, paper_literal);
    let d = g.scale(d, T::from_f64(lambda_dec));
    g.add(e, d)
}

/// Global-local collaboration for one domain: `gamma` times the auxiliary
/// global segmentation loss plus `delta` times the local/global cosine
/// alignment.
#[allow(clippy::too_many_arguments)]
pub fn glc_loss<T: Scalar>(
    g: &mut Graph<T>,
    global_logits: Var,
    global_label: &Array2<u8>,
    feat_local: Var,
    feat_global: Var,
    gamma: f64,
    delta: f64,
    epsilon: f64,
    paper_literal: bool,
) -> Result<Var> {
    let seg = seg_loss(g, global_logits, global_label)?;
    let seg = g.scale(seg, T::from_f64(gamma));
    let cos = cosine_align(g, feat_local, feat_global, epsilon, paper_literal);
    let cos = g.scale(cos, T::from_f64(delta));
    Ok(g.add(seg, cos))
}

/// Pretraining total: reconstruction plus weighted semantic consistency.
pub fn mae_total<T: Scalar>(g: &mut Graph<T>, mae: Var, sc: Var, gamma_sc: f64) -> Var {
    let sc = g.scale(sc, T::from_f64(gamma_sc));
    g.add(mae, sc)
}

/// Adaptation total: fully-supervised source loss + pseudo-label loss +
/// global-local collaboration + weighted semantic consistency.
pub fn mpl_total<T: Scalar>(g: &mut Graph<T>, mpl: Var, glc: Var, sc: Var, fss: Var, gamma_sc: f64) -> Var {
    let s = g.add(fss, mpl);
    let s = g.add(s, glc);
    let sc = g.scale(sc, T::from_f64(gamma_sc));
    g.add(s, sc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tapegrad::check::assert_grads_match;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random::<f64>() * 2.0 - 1.0)
    }

    fn rand_target(h: usize, w: usize, seed: u64) -> Array2<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((h, w), || u8::from(rng.random::<f64>() < 0.4))
    }

    #[test]
    fn masked_mse_examples() {
        // Identity reconstruction -> 0.
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[4, 4], 1));
        let m = g.constant(ArrayD::from_elem(IxDyn(&[4, 4]), 1.0));
        let l = masked_mse(&mut g, x, x, m);
        assert_eq!(g.scalar_value(l), 0.0);

        // Constant error 1 on half the pixels -> 1.0.
        let mut g = Graph::<f64>::new();
        let ones = g.constant(ArrayD::from_elem(IxDyn(&[4, 4]), 1.0));
        let zeros = g.constant(ArrayD::zeros(IxDyn(&[4, 4])));
        let mut half = ArrayD::zeros(IxDyn(&[4, 4]));
        half.as_slice_mut().unwrap()[..8].fill(1.0);
        let half = g.constant(half);
        let l = masked_mse(&mut g, zeros, ones, half);
        assert!((g.scalar_value(l) - 1.0).abs() < 1e-12);

        // Random 4x4 vs brute-force mean over masked entries.
        let r = randn(&[4, 4], 2);
        let o = randn(&[4, 4], 3);
        let mut mask = ArrayD::zeros(IxDyn(&[4, 4]));
        for (i, v) in mask.as_slice_mut().unwrap().iter_mut().enumerate() {
            *v = f64::from(i % 3 == 0);
        }
        let expect = {
            let (mut s, mut n) = (0.0, 0.0);
            for ((rv, ov), mv) in r.iter().zip(o.iter()).zip(mask.iter()) {
                if *mv == 1.0 {
                    s += (rv - ov) * (rv - ov);
                    n += 1.0;
                }
            }
            s / n
        };
        let mut g = Graph::<f64>::new();
        let rv = g.constant(r);
        let ov = g.constant(o);
        let mv = g.constant(mask);
        let l = masked_mse(&mut g, rv, ov, mv);
        assert!((g.scalar_value(l) - expect).abs() < 1e-12);

        // Empty mask -> 0 (warned).
        let mut g = Graph::<f64>::new();
        let a = g.constant(randn(&[2, 2], 4));
        let b = g.constant(randn(&[2, 2], 5));
        let m0 = g.constant(ArrayD::zeros(IxDyn(&[2, 2])));
        let l = masked_mse(&mut g, a, b, m0);
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn mae_loss_is_additive() {
        let mut g = Graph::<f64>::new();
        let rl = g.constant(randn(&[4, 4], 10));
        let ol = g.constant(randn(&[4, 4], 11));
        let rg = g.constant(randn(&[4, 4], 12));
        let og = g.constant(randn(&[4, 4], 13));
        let m = g.constant(ArrayD::from_elem(IxDyn(&[4, 4]), 1.0));
        let a = masked_mse(&mut g, rl, ol, m);
        let b = masked_mse(&mut g, rg, og, m);
        let total = mae_loss(&mut g, rl, ol, m, rg, og, m);
        let expect = g.scalar_value(a) + g.scalar_value(b);
        assert!((g.scalar_value(total) - expect).abs() < 1e-12);
        // Zero when both terms are zero.
        let z = mae_loss(&mut g, rl, rl, m, rg, rg, m);
        assert_eq!(g.scalar_value(z), 0.0);
    }

    #[test]
    fn seg_loss_saturated_correct_goes_to_zero() {
        let t = rand_target(8, 8, 20);
        let mut logits = Array2::<f64>::zeros((64, 2));
        for (i, &v) in t.iter().enumerate() {
            // Logit gap 20 in favor of the correct class.
            logits[(i, v as usize)] = 20.0;
        }
        let mut g = Graph::<f64>::new();
        let lv = g.constant(logits.into_dyn());
        let l = seg_loss(&mut g, lv, &t).unwrap();
        assert!(g.scalar_value(l) < 1e-3);
    }

    #[test]
    fn seg_loss_uniform_logits_closed_form() {
        // Uniform logits: p = 0.5 everywhere; target half foreground.
        let n = 64usize;
        let t = Array2::from_shape_fn((8, 8), |(r, _)| u8::from(r < 4));
        let logits = Array2::<f64>::zeros((n, 2));
        let mut g = Graph::<f64>::new();
        let lv = g.constant(logits.into_dyn());
        let l = seg_loss(&mut g, lv, &t).unwrap();
        let ce = f64::ln(2.0);
        // Dice term: 1 - (2*0.5*|q| + 1)/(0.5n + |q| + 1) with |q| = n/2.
        let dice = 1.0 - (2.0 * 0.5 * 32.0 + 1.0) / (0.5 * 64.0 + 32.0 + 1.0);
        assert!((g.scalar_value(l) - (ce + dice)).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_rejects_non_binary_target() {
        let mut t = rand_target(4, 4, 21);
        t[(0, 0)] = 2;
        let mut g = Graph::<f64>::new();
        let lv = g.constant(randn(&[16, 2], 22));
        assert!(seg_loss(&mut g, lv, &t).is_err());
    }

    #[test]
    fn cosine_align_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(randn(&[6], 30));
        let same = cosine_align(&mut g, a, a, 1e-8, false);
        assert!(g.scalar_value(same).abs() < 1e-12);

        let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 0.0]).unwrap());
        let y = g.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.0, 1.0]).unwrap());
        let orth = cosine_align(&mut g, x, y, 1e-8, false);
        assert!((g.scalar_value(orth) - 1.0).abs() < 1e-12);

        let nx = g.neg(x);
        let anti = cosine_align(&mut g, x, nx, 1e-8, false);
        assert!((g.scalar_value(anti) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_align_scale_invariance_standard_but_not_literal() {
        let av = randn(&[8], 31);
        let bv = randn(&[8], 32);
        let mut g = Graph::<f64>::new();
        let a = g.constant(av.clone());
        let b = g.constant(bv.clone());
        let base = cosine_align(&mut g, a, b, 1e-8, false);
        let a3 = g.scale(a, 3.7);
        let scaled = cosine_align(&mut g, a3, b, 1e-8, false);
        assert!((g.scalar_value(base) - g.scalar_value(scaled)).abs() < 1e-6);

        // The printed denominator is NOT scale-invariant; the flag
        // reproduces it faithfully.
        let lit_base = cosine_align(&mut g, a, b, 1e-8, true);
        let lit_scaled = cosine_align(&mut g, a3, b, 1e-8, true);
        assert!((g.scalar_value(lit_base) - g.scalar_value(lit_scaled)).abs() > 1e-3);
    }

    #[test]
    fn semantic_consistency_composition() {
        let ze_i = randn(&[5], 40);
        let ze_j = randn(&[5], 41);
        let zd_i = randn(&[7], 42);
        let zd_j = randn(&[7], 43);
        let mut g = Graph::<f64>::new();
        let (a, b, c, d) = (
            g.constant(ze_i),
            g.constant(ze_j),
            g.constant(zd_i),
            g.constant(zd_j),
        );
        let sc = semantic_consistency(&mut g, a, b, c, d, 0.5, 0.5, 1e-8, false);
        let ca = cosine_align(&mut g, a, b, 1e-8, false);
        let cb = cosine_align(&mut g, c, d, 1e-8, false);
        let expect = 0.5 * g.scalar_value(ca) + 0.5 * g.scalar_value(cb);
        assert!((g.scalar_value(sc) - expect).abs() < 1e-12);

        // Identical pairs -> 0; lambda_dec = 0 keeps only the encoder term.
        let zero = semantic_consistency(&mut g, a, a, c, c, 0.5, 0.5, 1e-8, false);
        assert!(g.scalar_value(zero).abs() < 1e-12);
        let enc_only = semantic_consistency(&mut g, a, b, c, d, 1.0, 0.0, 1e-8, false);
        assert!((g.scalar_value(enc_only) - g.scalar_value(ca)).abs() < 1e-12);
    }

    #[test]
    fn mpl_loss_weighting() {
        let t = rand_target(4, 4, 50);
        let y = rand_target(4, 4, 51);
        let logits_t = randn(&[16, 2], 52);
        let logits_s = randn(&[16, 2], 53);
        let mut g = Graph::<f64>::new();
        let lt = g.constant(logits_t);
        let ls = g.constant(logits_s);
        let l_beta = mpl_loss(&mut g, lt, &t, ls, &y, 0.5).unwrap();
        let st = seg_loss(&mut g, lt, &t).unwrap();
        let ss = seg_loss(&mut g, ls, &y).unwrap();
        let expect = g.scalar_value(st) + 0.5 * g.scalar_value(ss);
        assert!((g.scalar_value(l_beta) - expect).abs() < 1e-12);

        // Identical terms -> (1 + beta) * L.
        let l_same = mpl_loss(&mut g, lt, &t, lt, &t, 0.5).unwrap();
        assert!((g.scalar_value(l_same) - 1.5 * g.scalar_value(st)).abs() < 1e-12);

        // beta = 0 -> target term only.
        let l0 = mpl_loss(&mut g, lt, &t, ls, &y, 0.0).unwrap();
        assert!((g.scalar_value(l0) - g.scalar_value(st)).abs() < 1e-12);
    }

    #[test]
    fn glc_loss_composition() {
        let y = rand_target(4, 4, 60);
        let logits = randn(&[16, 2], 61);
        let fa = randn(&[6], 62);
        let fb = randn(&[6], 63);
        let mut g = Graph::<f64>::new();
        let lv = g.constant(logits);
        let a = g.constant(fa);
        let b = g.constant(fb);
        let glc = glc_loss(&mut g, lv, &y, a, b, 1.0, 0.1, 1e-8, false).unwrap();
        let seg = seg_loss(&mut g, lv, &y).unwrap();
        let cos = cosine_align(&mut g, a, b, 1e-8, false);
        let expect = g.scalar_value(seg) + 0.1 * g.scalar_value(cos);
        assert!((g.scalar_value(glc) - expect).abs() < 1e-12);

        let zero = glc_loss(&mut g, lv, &y, a, b, 0.0, 0.0, 1e-8, false).unwrap();
        assert_eq!(g.scalar_value(zero), 0.0);
        let delta_only = glc_loss(&mut g, lv, &y, a, a, 0.0, 1.0, 1e-8, false).unwrap();
        assert!(g.scalar_value(delta_only).abs() < 1e-12);
    }

    #[test]
    fn stage_totals_compose_linearly() {
        let mut g = Graph::<f64>::new();
        let mae = g.scalar(0.7);
        let sc = g.scalar(0.3);
        let tot = mae_total(&mut g, mae, sc, 0.4);
        assert!((g.scalar_value(tot) - (0.7 + 0.4 * 0.3)).abs() < 1e-12);

        let (m, glc, s, f) = (g.scalar(0.2), g.scalar(0.5), g.scalar(0.11), g.scalar(0.07));
        let tot = mpl_total(&mut g, m, glc, s, f, 0.4);
        assert!((g.scalar_value(tot) - (0.07 + 0.2 + 0.5 + 0.4 * 0.11)).abs() < 1e-12);

        // Linear in each component: perturb one at a time.
        let m2 = g.scalar(0.2 + 1.0);
        let tot2 = mpl_total(&mut g, m2, glc, s, f, 0.4);
        assert!((g.scalar_value(tot2) - g.scalar_value(tot) - 1.0).abs() < 1e-12);
        let s2 = g.scalar(0.11 + 1.0);
        let tot3 = mpl_total(&mut g, m, glc, s2, f, 0.4);
        assert!((g.scalar_value(tot3) - g.scalar_value(tot) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn losses_nonnegative_and_finite_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for trial in 0..25 {
            let mut g = Graph::<f64>::new();
            let t = rand_target(4, 4, 700 + trial);
            let logits = g.constant(randn(&[16, 2], 800 + trial).mapv(|v| v * 5.0));
            let l = seg_loss(&mut g, logits, &t).unwrap();
            let v = g.scalar_value(l);
            assert!(v.is_finite() && v >= 0.0);

            let a = g.constant(randn(&[9], 900 + trial));
            let b = g.constant(randn(&[9], 1000 + trial));
            let c = cosine_align(&mut g, a, b, 1e-8, rng.random());
            let cv = g.scalar_value(c);
            assert!(cv.is_finite() && (-1e-12..=2.0 + 1e-12).contains(&cv));

            let r = g.constant(randn(&[6, 6], 1100 + trial));
            let o = g.constant(randn(&[6, 6], 1200 + trial));
            let m = g.constant(randn(&[6, 6], 1300 + trial).mapv(|v| f64::from(v > 0.0)));
            let mm = masked_mse(&mut g, r, o, m);
            let mv = g.scalar_value(mm);
            assert!(mv.is_finite() && mv >= 0.0);
        }
    }

    // Gradient fidelity for all nine loss operations (the acceptance suite
    // re-runs this battery; see tests/acceptance.rs).
    #[test]
    fn all_loss_gradients_match_finite_differences() {
        super::gradfidelity::gradcheck_all_losses(1e-4, 2024);
    }
}

/// Finite-difference verification battery for every loss operation,
/// shared between the unit tests and the acceptance suite.
pub mod gradfidelity {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tapegrad::check::assert_grads_match;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random::<f64>() * 2.0 - 1.0)
    }

    fn rand_target(h: usize, w: usize, seed: u64) -> Array2<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((h, w), || u8::from(rng.random::<f64>() < 0.4))
    }

    /// Check the analytic gradient of all nine loss ops against central
    /// differences on an f64 shadow graph, 10 random coordinates per input.
    /// Panics on the first violation of `tol` relative error.
    pub fn gradcheck_all_losses(tol: f64, seed: u64) {
        // 1. masked_mse
        let mask = randn(&[5, 5], seed).mapv(|v| f64::from(v > -0.2));
        assert_grads_match(
            &[randn(&[5, 5], seed + 1), randn(&[5, 5], seed + 2)],
            tol,
            seed,
            {
                let mask = mask.clone();
                move |g, v| {
                    let m = g.constant(mask.clone());
                    masked_mse(g, v[0], v[1], m)
                }
            },
        );

        // 2. mae_loss
        assert_grads_match(
            &[
                randn(&[4, 4], seed + 3),
                randn(&[4, 4], seed + 4),
                randn(&[4, 4], seed + 5),
                randn(&[4, 4], seed + 6),
            ],
            tol,
            seed + 1,
            |g, v| {
                let m = g.constant(ArrayD::from_elem(IxDyn(&[4, 4]), 1.0));
                mae_loss(g, v[0], v[1], m, v[2], v[3], m)
            },
        );

        // 3. seg_loss
        let t = rand_target(4, 4, seed + 7);
        assert_grads_match(&[randn(&[16, 2], seed + 8)], tol, seed + 2, {
            let t = t.clone();
            move |g, v| seg_loss(g, v[0], &t).unwrap()
        });

        // 4. mpl_loss
        let y = rand_target(4, 4, seed + 9);
        assert_grads_match(
            &[randn(&[16, 2], seed + 10), randn(&[16, 2], seed + 11)],
            tol,
            seed + 3,
            {
                let (t, y) = (t.clone(), y.clone());
                move |g, v| mpl_loss(g, v[0], &t, v[1], &y, 0.5).unwrap()
            },
        );

        // 5. cosine_align (both denominator forms)
        for literal in [false, true] {
            assert_grads_match(
                &[randn(&[12], seed + 12), randn(&[12], seed + 13)],
                tol,
                seed + 4,
                move |g, v| cosine_align(g, v[0], v[1], 1e-8, literal),
            );
        }

        // 6. semantic_consistency
        assert_grads_match(
            &[
                randn(&[8], seed + 14),
                randn(&[8], seed + 15),
                randn(&[6], seed + 16),
                randn(&[6], seed + 17),
            ],
            tol,
            seed + 5,
            |g, v| semantic_consistency(g, v[0], v[1], v[2], v[3], 0.5, 0.5, 1e-8, false),
        );

        // 7. glc_loss
        assert_grads_match(
            &[randn(&[16, 2], seed + 18), randn(&[7], seed + 19), randn(&[7], seed + 20)],
            tol,
            seed + 6,
            {
                let y = y.clone();
                move |g, v| glc_loss(g, v[0], &y, v[1], v[2], 1.0, 0.1, 1e-8, false).unwrap()
            },
        );

        // 8. mae_total (scalar composition)
        assert_grads_match(
            &[
                randn(&[1], seed + 21).mapv(f64::abs),
                randn(&[1], seed + 22).mapv(f64::abs),
            ],
            tol,
            seed + 7,
            |g, v| mae_total(g, v[0], v[1], 0.4),
        );

        // 9. mpl_total (scalar composition)
        assert_grads_match(
            &[
                randn(&[1], seed + 23).mapv(f64::abs),
                randn(&[1], seed + 24).mapv(f64::abs),
                randn(&[1], seed + 25).mapv(f64::abs),
                randn(&[1], seed + 26).mapv(f64::abs),
            ],
            tol,
            seed + 8,
            |g, v| mpl_total(g, v[0], v[1], v[2], v[3], 0.4),
        );
    }
}
