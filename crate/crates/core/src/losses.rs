//! Reconstruction, classification and consistency losses.
//!
//! All losses are generic over the graph precision so the same code runs in
//! `f32` for training and in `f64` for gradient checks.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Lower clamp for norm products in the cosine denominator.
pub const NORM_FLOOR: f64 = 1e-8;
/// Lower clamp on probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;

static ZERO_NORM_LAYERS: AtomicU64 = AtomicU64::new(0);

/// Number of layers seen so far whose norm product fell under
/// [`NORM_FLOOR`]. Such layers contribute a loss term of 1.
pub fn zero_norm_layer_count() -> u64 {
    ZERO_NORM_LAYERS.load(Ordering::Relaxed)
}

/// `1 - <a, b> / (|a| |b|)` over all elements of two equally sized tensors.
fn cosine_distance<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.dot(a, b)?;
    let na = g.norm2(a);
    let nb = g.norm2(b);
    let den = g.mul(na, nb)?;
    if g.value(den).item().as_f64() < NORM_FLOOR {
        ZERO_NORM_LAYERS.fetch_add(1, Ordering::Relaxed);
    }
    let den = g.clamp_min(den, T::from_f64(NORM_FLOOR));
    let cos = g.div(d, den)?;
    let neg = g.scale(cos, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

/// Sum over layers of `1 - cos(f_E^l, f_D^l)`, each layer flattened as a
/// whole. With `block_enc_grad` the encoder side of every term is wrapped
/// in a stop-gradient. Range `[0, 2L]`.
pub fn global_cosine_loss<T: Scalar>(
    g: &mut Graph<T>,
    enc: &[Var],
    dec: &[Var],
    block_enc_grad: bool,
) -> Result<Var> {
    if enc.len() != dec.len() || enc.is_empty() {
        return Err(invalid(
            "global_cosine_loss",
            format!(
                "pyramid depths differ or are empty ({} vs {})",
                enc.len(),
                dec.len()
            ),
        ));
    }
    let mut total: Option<Var> = None;
    for (&e, &d) in enc.iter().zip(dec) {
        if g.shape(e) != g.shape(d) {
            return Err(Error::ShapeMismatch {
                op: "global_cosine_loss",
                left: g.shape(e).to_vec(),
                right: g.shape(d).to_vec(),
            });
        }
        let e = if block_enc_grad {
            g.stop_gradient(e)
        } else {
            e
        };
        let term = cosine_distance(g, e, d)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes])?;
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        t.data_mut()[i * classes + l] = T::one();
    }
    Ok(t)
}

/// Mean over the batch of `-log_softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(invalid(
            "cross_entropy",
            format!("logits {s:?} vs {} labels", labels.len()),
        ));
    }
    let oh = g.constant(one_hot(labels, s[1])?);
    let lp = g.log_softmax(logits);
    let picked = g.mul(lp, oh)?;
    let total = g.sum(picked);
    Ok(g.scale(total, T::from_f64(-1.0 / s[0] as f64)))
}

/// Checks that every row of a `[batch, C]` tensor is a distribution.
pub fn check_distribution<T: Scalar>(p: &Tensor<T>, tol: f64) -> Result<()> {
    let c = *p
        .shape()
        .last()
        .ok_or_else(|| invalid("distribution", "empty shape"))?;
    for (row, r) in p.data().chunks_exact(c).enumerate() {
        let sum: f64 = r.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > tol || r.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::NotADistribution { row, sum });
        }
    }
    Ok(())
}

/// Mean over the batch of `sum_k p_k (log p_k - log q_k)`, probabilities
/// clamped at [`PROB_FLOOR`] before the logs. Rows must sum to 1 within
/// `1e-4`.
pub fn kl_divergence<T: Scalar>(g: &mut Graph<T>, p: Var, q: Var) -> Result<Var> {
    let s = g.shape(p).to_vec();
    if s != g.shape(q) || s.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            left: s,
            right: g.shape(q).to_vec(),
        });
    }
    check_distribution(g.value(p), 1e-4)?;
    check_distribution(g.value(q), 1e-4)?;
    let floor = T::from_f64(PROB_FLOOR);
    let pc = g.clamp_min(p, floor);
    let qc = g.clamp_min(q, floor);
    let lp = g.log(pc);
    let lq = g.log(qc);
    let diff = g.sub(lp, lq)?;
    let w = g.mul(p, diff)?;
    let total = g.sum(w);
    Ok(g.scale(total, T::from_f64(1.0 / s[0] as f64)))
}

/// Direction of the consistency term between the two predictors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlDirection {
    /// `D(P||Q)` with `P` from the first predictor.
    Forward,
    /// `(D(P||Q) + D(Q||P)) / 2`.
    Symmetric,
}

pub fn consistency<T: Scalar>(g: &mut Graph<T>, p: Var, q: Var, dir: KlDirection) -> Result<Var> {
    match dir {
        KlDirection::Forward => kl_divergence(g, p, q),
        KlDirection::Symmetric => {
            let a = kl_divergence(g, p, q)?;
            let b = kl_divergence(g, q, p)?;
            let s = g.add(a, b)?;
            Ok(g.scale(s, T::from_f64(0.5)))
        }
    }
}

/// Weights of the joint objective; all 1 by default.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f32,
    pub aux: f32,
    pub kl: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            aux: 1.0,
            kl: 1.0,
        }
    }
}

/// `ce * sum(ce_terms) + aux * aux_total + kl * kl_term`. Absent terms are
/// skipped (single-encoder objective: one CE term, no KL).
pub fn train_loss<T: Scalar>(
    g: &mut Graph<T>,
    ce_terms: &[Var],
    aux_total: Option<Var>,
    kl: Option<Var>,
    w: LossWeights,
) -> Result<Var> {
    let mut parts: Vec<Var> = Vec::new();
    for &c in ce_terms {
        parts.push(g.scale(c, T::from_f64(w.ce as f64)));
    }
    if let Some(a) = aux_total {
        parts.push(g.scale(a, T::from_f64(w.aux as f64)));
    }
    if let Some(k) = kl {
        parts.push(g.scale(k, T::from_f64(w.kl as f64)));
    }
    let mut it = parts.into_iter();
    let first = it
        .next()
        .ok_or_else(|| invalid("train_loss", "no loss terms"))?;
    it.try_fold(first, |acc, p| g.add(acc, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn leaf(g: &mut Graph<f64>, d: &[f64], rg: bool) -> Var {
        g.leaf(Tensor::from_vec(d.to_vec()).unwrap(), rg)
    }

    #[test]
    fn cosine_anchors() {
        let mut g = Graph::<f64>::new();
        let e: Vec<Var> = (0..3)
            .map(|i| leaf(&mut g, &[1.0 + i as f64, -2.0, 0.5], false))
            .collect();
        let l = global_cosine_loss(&mut g, &e, &e, true).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let a = leaf(&mut g, &[1.0, 2.0], false);
        let b = leaf(&mut g, &[3.0, -1.0, 2.0], false);
        let na = leaf(&mut g, &[-1.0, -2.0], false);
        let nb = leaf(&mut g, &[-3.0, 1.0, -2.0], false);
        let l = global_cosine_loss(&mut g, &[a, b], &[na, nb], true).unwrap();
        assert!((g.value(l).item() - 4.0).abs() < 1e-12);

        let x = leaf(&mut g, &[1.0, 0.0], false);
        let y = leaf(&mut g, &[0.0, 1.0], false);
        let l = global_cosine_loss(&mut g, &[x], &[y], true).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn cosine_errors_and_zero_layer() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, &[1.0, 2.0], false);
        let b = leaf(&mut g, &[1.0, 2.0, 3.0], false);
        assert!(global_cosine_loss(&mut g, &[a], &[b], true).is_err());
        assert!(global_cosine_loss(&mut g, &[a, a], &[a], true).is_err());
        let z = leaf(&mut g, &[0.0, 0.0], false);
        let before = zero_norm_layer_count();
        let l = global_cosine_loss(&mut g, &[z], &[a], true).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        assert!(zero_norm_layer_count() > before);
    }

    #[test]
    fn cosine_scale_invariance() {
        let mut rng = Rng::new(9);
        let mut g = Graph::<f64>::new();
        let e = g.constant(rng.normal(&[12], 0.0, 1.0).unwrap());
        let d = g.constant(rng.normal(&[12], 0.0, 1.0).unwrap());
        let d3 = g.scale(d, 3.7);
        let e5 = g.scale(e, 0.2);
        let l1 = global_cosine_loss(&mut g, &[e], &[d], true).unwrap();
        let l2 = global_cosine_loss(&mut g, &[e5], &[d3], true).unwrap();
        assert!((g.value(l1).item() - g.value(l2).item()).abs() < 1e-5);
    }

    #[test]
    fn blocked_encoder_side_has_zero_gradient() {
        let mut rng = Rng::new(10);
        let mut g = Graph::<f64>::new();
        let e = g.param(rng.normal(&[6], 0.0, 1.0).unwrap());
        let d = g.param(rng.normal(&[6], 0.0, 1.0).unwrap());
        let l = global_cosine_loss(&mut g, &[e], &[d], true).unwrap();
        let gr = g.backward(l).unwrap();
        assert!(gr.get(e).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(gr.get(d).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn cross_entropy_anchors() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[3, 4]).unwrap());
        let l = cross_entropy(&mut g, z, &[0, 1, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let z = g.constant(Tensor::new(&[1, 2], vec![10.0, -10.0]).unwrap());
        let l = cross_entropy(&mut g, z, &[0]).unwrap();
        assert!(g.value(l).item() <= 1e-4);
        assert!(matches!(
            cross_entropy(&mut g, z, &[2]),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn kl_anchors() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let q = g.constant(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap());
        let l = kl_divergence(&mut g, p, q).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let l = kl_divergence(&mut g, q, q).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let bad = g.constant(Tensor::new(&[1, 2], vec![0.7, 0.7]).unwrap());
        assert!(matches!(
            kl_divergence(&mut g, bad, q),
            Err(Error::NotADistribution { .. })
        ));
    }

    #[test]
    fn train_loss_is_a_sum() {
        let mut g = Graph::<f64>::new();
        let ce = leaf(&mut g, &[1.0], false);
        let aux = leaf(&mut g, &[2.0], false);
        let l = train_loss(&mut g, &[ce], Some(aux), None, LossWeights::default()).unwrap();
        assert_eq!(g.value(l).item(), 3.0);
        let z = leaf(&mut g, &[0.0], false);
        let l = train_loss(&mut g, &[z, z], Some(z), Some(z), LossWeights::default()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn train_loss_gradient_is_sum_of_parts() {
        let mut rng = Rng::new(12);
        let w0: Tensor<f64> = rng.normal(&[5], 0.0, 1.0).unwrap();
        let x1: Tensor<f64> = rng.normal(&[5], 0.0, 1.0).unwrap();
        let x2: Tensor<f64> = rng.normal(&[5], 0.0, 1.0).unwrap();
        let parts = |which: u8| {
            let mut g = Graph::<f64>::new();
            let w = g.param(w0.clone());
            let a = g.constant(x1.clone());
            let b = g.constant(x2.clone());
            let t1 = g.dot(w, a).unwrap();
            let wb = g.mul(w, b).unwrap();
            let t2 = g.sum(wb);
            let sq = g.mul(w, w).unwrap();
            let t3 = g.sum(sq);
            let l = match which {
                0 => train_loss(&mut g, &[t1], Some(t2), Some(t3), LossWeights::default()).unwrap(),
                1 => t1,
                2 => t2,
                _ => t3,
            };
            g.backward(l).unwrap().get(w).unwrap().clone()
        };
        let total = parts(0);
        let sum = parts(1).add(&parts(2)).unwrap().add(&parts(3)).unwrap();
        for (a, b) in total.data().iter().zip(sum.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
