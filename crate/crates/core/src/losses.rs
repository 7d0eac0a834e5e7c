//! Training objectives: the attention-map reconstruction divergence, the
//! exponentially weighted anticipation loss, and their weighted sum.

use crate::autodiff::{Tape, Tensor, Var};
use crate::{CapError, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const EPSILON: f64 = 1e-4;
pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_LAMBDA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_a: f64,
    pub l_total: f64,
    pub lambda: f64,
}

/// L = L_d + lambda * L_a.
pub fn total_loss(l_d: f64, l_a: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        l_d,
        l_a,
        l_total: l_d + lambda * l_a,
        lambda,
    }
}

fn check_normalized(map: &Array2<f64>, what: &str) -> Result<()> {
    let s = map.sum();
    if (s - 1.0).abs() > 1e-6 || map.iter().any(|&v| v < 0.0) {
        return Err(CapError::BadInput(format!(
            "{what} map is not a distribution (sum {s})"
        )));
    }
    Ok(())
}

/// Reconstruction divergence summed over frames:
/// sum_i D(i) * log(eps + D(i) / (eps + Dhat(i))).
pub fn attention_loss(
    gt: &[Array2<f64>],
    pred: &[Array2<f64>],
    epsilon: f64,
    reduction: Reduction,
) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(CapError::BadInput("frame count mismatch".into()));
    }
    let mut total = 0.0;
    for (d, dh) in gt.iter().zip(pred) {
        if d.dim() != dh.dim() {
            return Err(CapError::BadInput("map shape mismatch".into()));
        }
        check_normalized(d, "ground-truth")?;
        check_normalized(dh, "predicted")?;
        for (&a, &b) in d.iter().zip(dh.iter()) {
            total += a * (epsilon + a / (epsilon + b)).ln();
        }
    }
    if reduction == Reduction::Mean && !gt.is_empty() {
        total /= gt.len() as f64;
    }
    Ok(total)
}

/// Exponential weight: 1 for t >= t_ai, decaying as e^{-(t_ai - t)/r}
/// before the accident window.
pub fn anticipation_weight(t: f64, t_ai: f64, r: f64) -> f64 {
    (-((t_ai - t) / r).max(0.0)).exp()
}

/// Per-frame anticipation loss. Positives pay an exponentially weighted
/// log loss on p, negatives a plain log loss on 1-p. Probabilities are
/// clamped away from {0, 1}.
pub fn anticipation_loss(
    p_hat: &[f64],
    positive: bool,
    t_ai_local: f64,
    fps: f64,
    reduction: Reduction,
) -> f64 {
    let mut total = 0.0;
    for (t, &p) in p_hat.iter().enumerate() {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if positive {
            total -= anticipation_weight(t as f64, t_ai_local, fps) * p.ln();
        } else {
            total -= (1.0 - p).ln();
        }
    }
    if reduction == Reduction::Mean && !p_hat.is_empty() {
        total /= p_hat.len() as f64;
    }
    total
}

/// Tape version of the reconstruction divergence for one frame; the ground
/// truth enters as a constant.
pub fn attention_loss_var(tape: &mut Tape, gt: &Array2<f64>, pred: Var, epsilon: f64) -> Var {
    assert_eq!(tape.value(pred).shape(), &[gt.nrows(), gt.ncols()]);
    let d = tape.constant(gt.clone().into_dyn());
    let denom = tape.add_scalar(pred, epsilon);
    let ratio = tape.div(d, denom);
    let arg = tape.add_scalar(ratio, epsilon);
    let lg = tape.ln(arg);
    let weighted = tape.mul(d, lg);
    tape.sum_all(weighted)
}

/// Tape version of the anticipation loss over a clip's per-frame (1 x 1)
/// probability nodes.
pub fn anticipation_loss_var(
    tape: &mut Tape,
    p_hats: &[Var],
    positive: bool,
    t_ai_local: f64,
    fps: f64,
) -> Var {
    let mut acc: Option<Var> = None;
    for (t, &p) in p_hats.iter().enumerate() {
        let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let term = if positive {
            let lp = tape.ln(p);
            let w = anticipation_weight(t as f64, t_ai_local, fps);
            tape.scale(lp, -w)
        } else {
            let neg = tape.scale(p, -1.0);
            let one_minus = tape.add_scalar(neg, 1.0);
            let l = tape.ln(one_minus);
            tape.scale(l, -1.0)
        };
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    acc.unwrap_or_else(|| tape.constant(Tensor::zeros(ndarray::IxDyn(&[1, 1]))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn uniform(n: usize) -> Array2<f64> {
        Array2::from_elem((n, n), 1.0 / (n * n) as f64)
    }

    #[test]
    fn epsilon_floor_at_identity() {
        let d = uniform(2);
        let loss = attention_loss(&[d.clone()], &[d.clone()], EPSILON, Reduction::Sum).unwrap();
        assert!(loss.abs() < 1e-3);
        // Exact value of the floor for the 4-pixel uniform case.
        let expected = 4.0 * 0.25 * (EPSILON + 0.25 / (0.25 + EPSILON)).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!(loss < 0.0);
    }

    #[test]
    fn concentrated_mass_stays_finite() {
        let mut d = Array2::zeros((2, 2));
        d[[0, 0]] = 1.0;
        let mut dh = Array2::zeros((2, 2));
        dh[[1, 1]] = 1.0;
        let loss = attention_loss(&[d], &[dh], EPSILON, Reduction::Sum).unwrap();
        // Single term log(eps + 1/eps), about 9.21.
        assert!((loss - (EPSILON + 1.0 / EPSILON).ln()).abs() < 1e-12);
        assert!(loss.is_finite());
    }

    #[test]
    fn two_pixel_hand_case() {
        let d = Array2::from_shape_vec((1, 2), vec![0.5, 0.5]).unwrap();
        let dh = Array2::from_shape_vec((1, 2), vec![0.9, 0.1]).unwrap();
        let loss = attention_loss(&[d], &[dh], EPSILON, Reduction::Sum).unwrap();
        let expected = 0.5 * (EPSILON + 0.5 / 0.9001).ln() + 0.5 * (EPSILON + 0.5 / 0.1001).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.5105).abs() < 1e-3);
    }

    #[test]
    fn unnormalized_inputs_rejected() {
        let d = uniform(2);
        let bad = Array2::from_elem((2, 2), 0.5);
        assert!(attention_loss(&[d.clone()], &[bad], EPSILON, Reduction::Sum).is_err());
        let neg = Array2::from_shape_vec((1, 2), vec![1.5, -0.5]).unwrap();
        assert!(attention_loss(&[neg], &[d], EPSILON, Reduction::Sum).is_err());
    }

    #[test]
    fn exponential_weights() {
        let r = 1.0;
        assert!((anticipation_weight(2.0, 2.0, r) - 1.0).abs() < 1e-9);
        assert!((anticipation_weight(1.0, 2.0, r) - (-1.0f64).exp()).abs() < 1e-9);
        assert!((anticipation_weight(0.0, 2.0, r) - (-2.0f64).exp()).abs() < 1e-9);
        // Non-decreasing in t, exactly 1 at and after t_ai.
        let mut prev = 0.0;
        for t in 0..10 {
            let w = anticipation_weight(t as f64, 5.0, 2.0);
            assert!(w >= prev);
            prev = w;
            if t >= 5 {
                assert_eq!(w, 1.0);
            }
        }
    }

    #[test]
    fn negative_clip_closed_form() {
        let p = vec![0.5; 10];
        let loss = anticipation_loss(&p, false, 0.0, 1.0, Reduction::Sum);
        assert!((loss - 10.0 * 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn positive_clip_hand_case() {
        let p = vec![0.5; 3];
        let loss = anticipation_loss(&p, true, 2.0, 1.0, Reduction::Sum);
        let expected = ((-2.0f64).exp() + (-1.0f64).exp() + 1.0) * 2.0f64.ln();
        assert!((loss - expected).abs() < 1e-9);
        assert!((loss - 1.0418).abs() < 1e-3);
    }

    #[test]
    fn monotone_in_probabilities() {
        let base = vec![0.3, 0.6, 0.2];
        let l0 = anticipation_loss(&base, true, 1.0, 1.0, Reduction::Sum);
        for i in 0..3 {
            let mut p = base.clone();
            p[i] += 0.05;
            assert!(anticipation_loss(&p, true, 1.0, 1.0, Reduction::Sum) < l0);
        }
        let n0 = anticipation_loss(&base, false, 0.0, 1.0, Reduction::Sum);
        for i in 0..3 {
            let mut p = base.clone();
            p[i] += 0.05;
            assert!(anticipation_loss(&p, false, 0.0, 1.0, Reduction::Sum) > n0);
        }
        assert!(l0 >= 0.0 && n0 >= 0.0);
    }

    #[test]
    fn lambda_linearity_is_exact() {
        let b = total_loss(1.0, 2.0, 5.0);
        assert_eq!(b.l_total, 11.0);
        let b2 = total_loss(0.0, 3.25, 4.0);
        assert_eq!(b2.l_total, 4.0 * 3.25);
        for lambda in [0.0, 0.5, 5.0, 9.75] {
            let b = total_loss(0.7, 1.3, lambda);
            assert_eq!(b.l_total, 0.7 + lambda * 1.3);
        }
    }

    #[test]
    fn mean_reduction_divides_by_frames() {
        let p = vec![0.5; 4];
        let s = anticipation_loss(&p, false, 0.0, 1.0, Reduction::Sum);
        let m = anticipation_loss(&p, false, 0.0, 1.0, Reduction::Mean);
        assert!((s / 4.0 - m).abs() < 1e-12);
        let d = uniform(2);
        let ls = attention_loss(&[d.clone(), d.clone()], &[d.clone(), d.clone()], EPSILON, Reduction::Sum).unwrap();
        let lm = attention_loss(&[d.clone(), d.clone()], &[d.clone(), d], EPSILON, Reduction::Mean).unwrap();
        assert!((ls / 2.0 - lm).abs() < 1e-15);
    }

    #[test]
    fn tape_losses_match_plain_and_finite_differences() {
        // Attention loss on a direct 2x2 prediction.
        let d = Array2::from_shape_vec((2, 2), vec![0.4, 0.1, 0.3, 0.2]).unwrap();
        let dh = Array2::from_shape_vec((2, 2), vec![0.25, 0.25, 0.3, 0.2]).unwrap();
        let eval = |dh: &Array2<f64>, grad: bool| -> (f64, Option<Tensor>) {
            let mut tape = Tape::new();
            let p = tape.leaf(dh.clone().into_dyn(), true);
            let loss = attention_loss_var(&mut tape, &d, p, EPSILON);
            if !grad {
                return (tape.scalar(loss), None);
            }
            let g = tape.backward(loss);
            (tape.scalar(loss), g[p.0].clone())
        };
        let (lv, grad) = eval(&dh, true);
        let plain = attention_loss(&[d.clone()], &[dh.clone()], EPSILON, Reduction::Sum).unwrap();
        assert!((lv - plain).abs() < 1e-12);
        let grad = grad.unwrap();
        let h = 1e-6;
        for (r, c) in [(0, 0), (1, 1)] {
            let mut plus = dh.clone();
            plus[[r, c]] += h;
            let mut minus = dh.clone();
            minus[[r, c]] -= h;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            assert!((fd - grad[[r, c]]).abs() < 1e-6, "fd={fd} g={}", grad[[r, c]]);
        }

        // Anticipation loss on direct probabilities.
        let probs = [0.3, 0.7, 0.55];
        let eval_a = |probs: &[f64], grad: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = probs
                .iter()
                .map(|&p| tape.leaf(Tensor::from_elem(IxDyn(&[1, 1]), p), true))
                .collect();
            let loss = anticipation_loss_var(&mut tape, &vars, true, 2.0, 1.0);
            if !grad {
                return (tape.scalar(loss), vec![]);
            }
            let g = tape.backward(loss);
            let gs = vars
                .iter()
                .map(|v| g[v.0].as_ref().unwrap()[[0, 0]])
                .collect();
            (tape.scalar(loss), gs)
        };
        let (lv, gs) = eval_a(&probs, true);
        let plain = anticipation_loss(&probs, true, 2.0, 1.0, Reduction::Sum);
        assert!((lv - plain).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..3 {
            let mut plus = probs.to_vec();
            plus[i] += h;
            let mut minus = probs.to_vec();
            minus[i] -= h;
            let fd = (eval_a(&plus, false).0 - eval_a(&minus, false).0) / (2.0 * h);
            assert!((fd - gs[i]).abs() < 1e-6);
        }
    }
}
