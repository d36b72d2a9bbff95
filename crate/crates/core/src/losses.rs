//! Student training objectives: temperature-scaled distillation, Grad-CAM
//! attention alignment, cross-entropy, and their weighted sum.
//!
//! Every function builds onto a [`Graph`] so the result is differentiable.
//! Log-probabilities are formed as `z/T - max - log(sum(exp(...)))`, which
//! never takes the log of an underflowed probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Weights of the composite student objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Attention-alignment weight.
    pub alpha: f64,
    /// Distillation weight.
    pub beta: f64,
    /// Classification weight.
    pub theta: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.01,
            beta: 0.8,
            theta: 0.2,
            temperature: 3.0,
        }
    }
}

impl LossWeights {
    /// Plain cross-entropy: `(0, 0, 1)`.
    pub fn classification_only() -> Self {
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
            theta: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("theta", self.theta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        check_temperature(self.temperature)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be > 0, got {t}")))
    }
}

fn check_logits<F: Real>(g: &Graph<F>, logits: Var, op: &str) -> Result<()> {
    if g.shape(logits).len() != 1 {
        return Err(Error::Contract(format!(
            "{op}: logits must be a vector, got shape {:?}",
            g.shape(logits)
        )));
    }
    Ok(())
}

/// `z/T` shifted by its (detached) maximum.
fn shifted_logits<F: Real>(g: &mut Graph<F>, logits: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    check_logits(g, logits, "softmax")?;
    let scaled = g.scale(logits, F::from_f64(1.0 / temperature))?;
    let max = g.value(scaled).max_value();
    g.offset(scaled, -max)
}

/// `log softmax(z / T)`.
pub fn log_softmax_t<F: Real>(g: &mut Graph<F>, logits: Var, temperature: f64) -> Result<Var> {
    let shifted = shifted_logits(g, logits, temperature)?;
    let e = g.exp(shifted)?;
    let total = g.sum(e)?;
    let lse = g.log(total)?;
    g.sub(shifted, lse)
}

/// `softmax(z / T)` with max-subtraction.
pub fn softmax_t<F: Real>(g: &mut Graph<F>, logits: Var, temperature: f64) -> Result<Var> {
    let shifted = shifted_logits(g, logits, temperature)?;
    let e = g.exp(shifted)?;
    let total = g.sum(e)?;
    g.div(e, total)
}

/// Temperature softmax of plain values.
pub fn softmax_values<F: Real>(logits: &[F], temperature: f64) -> Result<Vec<F>> {
    let mut g = Graph::new();
    let z = g.constant(Tensor::new(vec![logits.len()], logits.to_vec())?)?;
    let p = softmax_t(&mut g, z, temperature)?;
    Ok(g.value(p).data().to_vec())
}

/// `T^2 * KL(P || Q)` with `P = softmax(teacher / T)`, `Q = softmax(student / T)`.
///
/// The teacher side is detached: no gradient reaches `teacher_logits`.
pub fn kl_distill<F: Real>(g: &mut Graph<F>, teacher_logits: Var, student_logits: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    check_logits(g, teacher_logits, "kl_distill")?;
    check_logits(g, student_logits, "kl_distill")?;
    if g.shape(teacher_logits) != g.shape(student_logits) {
        return Err(Error::shape(
            "kl_distill",
            g.shape(teacher_logits),
            g.shape(student_logits),
        ));
    }
    let teacher = g.constant(g.value(teacher_logits).clone())?;
    let log_p = log_softmax_t(g, teacher, temperature)?;
    let p = g.exp(log_p)?;
    let log_q = log_softmax_t(g, student_logits, temperature)?;
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    let kl = g.sum(terms)?;
    g.scale(kl, F::from_f64(temperature * temperature))
}

/// `-log softmax(z)[label]`.
pub fn cross_entropy<F: Real>(g: &mut Graph<F>, logits: Var, label: usize) -> Result<Var> {
    check_logits(g, logits, "cross_entropy")?;
    let k = g.shape(logits)[0];
    if label >= k {
        return Err(Error::Domain(format!("label {label} out of range for {k} classes")));
    }
    let log_p = log_softmax_t(g, logits, 1.0)?;
    let mut onehot = Tensor::zeros(vec![k]);
    onehot.data_mut()[label] = F::one();
    let onehot = g.constant(onehot)?;
    let picked = g.mul(log_p, onehot)?;
    let total = g.sum(picked)?;
    g.scale(total, -F::one())
}

const RANGE_SLACK: f64 = 1e-6;

/// Mean squared difference between a heatmap and a mask, both valued in `[0, 1]`.
pub fn attention_mse<F: Real>(g: &mut Graph<F>, heatmap: Var, mask: Var) -> Result<Var> {
    if g.shape(heatmap) != g.shape(mask) {
        return Err(Error::shape("attention_mse", g.shape(heatmap), g.shape(mask)));
    }
    let (lo, hi) = (F::from_f64(-RANGE_SLACK), F::from_f64(1.0 + RANGE_SLACK));
    for (name, v) in [("heatmap", heatmap), ("mask", mask)] {
        if g.value(v).data().iter().any(|&x| x < lo || x > hi) {
            return Err(Error::Domain(format!("attention_mse: {name} values must lie in [0, 1]")));
        }
    }
    let diff = g.sub(heatmap, mask)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

/// `alpha * attn + beta * dist + theta * cls`.
///
/// A term whose weight is exactly zero is left out of the graph, so with
/// weights `(0, 0, 1)` the result is the classification term itself.
pub fn total_loss<F: Real>(g: &mut Graph<F>, attn: Var, dist: Var, cls: Var, weights: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (v, w) in [(attn, weights.alpha), (dist, weights.beta), (cls, weights.theta)] {
        if !g.value(v).is_scalar() {
            return Err(Error::Contract(format!(
                "total_loss: components must be scalars, got shape {:?}",
                g.shape(v)
            )));
        }
        if !g.value(v).item().is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { v } else { g.scale(v, F::from_f64(w))? };
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => g.constant(Tensor::scalar(F::zero())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.param(Tensor::from_f64(vec![v.len()], v).unwrap()).unwrap()
    }

    #[test]
    fn equal_logits_give_uniform() {
        for t in [0.5, 1.0, 7.0] {
            let p = softmax_values(&[2.0f64; 4], t).unwrap();
            for v in p {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax_values(&[1.0f64, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.73106).abs() < 1e-5 && (p[1] - 0.26894).abs() < 1e-5);
        // Large-T limit: p0 = 1/2 + tanh(5 / 2000) / 2 = 0.50125.
        let p = softmax_values(&[5.0f64, 0.0], 1000.0).unwrap();
        assert!((p[0] - (0.5 + (0.0025f64).tanh() / 2.0)).abs() < 1e-12);
        assert!((p[0] - 0.5).abs() < 1.3e-3 && (p[1] - 0.5).abs() < 1.3e-3);
        let p = softmax_values(&[3.0f32, -1.0, 0.5], 2.0).unwrap();
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_positive_temperature_is_domain_error() {
        assert!(matches!(softmax_values(&[1.0f64, 2.0], 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_values(&[1.0f64, 2.0], -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let mut g = Graph::new();
        let t = vec_var(&mut g, &[0.3, -1.2, 2.0]);
        let s = vec_var(&mut g, &[0.3, -1.2, 2.0]);
        let kl = kl_distill(&mut g, t, s, 3.0).unwrap();
        assert!(g.value(kl).item().abs() < 1e-15);
    }

    #[test]
    fn kl_matches_closed_form() {
        // P = [0.7, 0.3] from logits [ln 0.7, ln 0.3], Q uniform.
        let expected = 0.7 * 1.4f64.ln() + 0.3 * 0.6f64.ln();
        assert!((expected - 0.08228).abs() < 1e-5);
        let mut g = Graph::new();
        let t = vec_var(&mut g, &[0.7f64.ln(), 0.3f64.ln()]);
        let s = vec_var(&mut g, &[0.0, 0.0]);
        let kl = kl_distill(&mut g, t, s, 1.0).unwrap();
        assert!((g.value(kl).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_length_mismatch_and_detaches_teacher() {
        let mut g = Graph::new();
        let t = vec_var(&mut g, &[0.0, 1.0]);
        let s = vec_var(&mut g, &[0.0, 1.0, 2.0]);
        assert!(matches!(kl_distill(&mut g, t, s, 3.0), Err(Error::ShapeMismatch { .. })));
        let s2 = vec_var(&mut g, &[1.0, -1.0]);
        let kl = kl_distill(&mut g, t, s2, 3.0).unwrap();
        g.backward(kl).unwrap();
        assert!(g.grad(t).is_none());
        assert!(g.grad(s2).is_some());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let z = vec_var(&mut g, &[0.0; 5]);
        let l = cross_entropy(&mut g, z, 2).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
        let z = vec_var(&mut g, &[0.0, 10.0]);
        let l = cross_entropy(&mut g, z, 0).unwrap();
        let expected = -(1.0 / (1.0 + 10f64.exp())).ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        assert!((g.value(l).item() - 10.0000454).abs() < 1e-7);
        let z = vec_var(&mut g, &[200.0, 0.0, 0.0]);
        let l = cross_entropy(&mut g, z, 0).unwrap();
        assert!(g.value(l).item() < 1e-12);
        assert!(matches!(cross_entropy(&mut g, z, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn attention_mse_examples() {
        let mut g = Graph::new();
        let h = g.param(Tensor::<f64>::from_f64(vec![1, 2], &[0.2, 0.8]).unwrap()).unwrap();
        let m = g.constant(Tensor::from_f64(vec![1, 2], &[0.0, 1.0]).unwrap()).unwrap();
        let l = attention_mse(&mut g, h, m).unwrap();
        assert!((g.value(l).item() - 0.04).abs() < 1e-15);

        let ones = g.constant(Tensor::full(vec![3, 3], 1.0)).unwrap();
        let zeros = g.constant(Tensor::zeros(vec![3, 3])).unwrap();
        let l = attention_mse(&mut g, ones, zeros).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let l = attention_mse(&mut g, ones, ones).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        assert!(matches!(attention_mse(&mut g, h, ones), Err(Error::ShapeMismatch { .. })));
        let big = g.constant(Tensor::from_f64(vec![1, 2], &[0.0, 1.5]).unwrap()).unwrap();
        assert!(matches!(attention_mse(&mut g, big, m), Err(Error::Domain(_))));
    }

    #[test]
    fn total_loss_combinations() {
        let mut g = Graph::new();
        let c = |g: &mut Graph<f64>, v: f64| g.param(Tensor::scalar(v)).unwrap();
        let (a, d, k) = (c(&mut g, 1.0), c(&mut g, 2.0), c(&mut g, 3.0));
        let w = LossWeights::default();
        let l = total_loss(&mut g, a, d, k, &w).unwrap();
        assert!((g.value(l).item() - 2.21).abs() < 1e-12);

        let z = c(&mut g, 0.0);
        let l = total_loss(&mut g, z, z, z, &w).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let l = total_loss(&mut g, a, d, k, &LossWeights::classification_only()).unwrap();
        assert_eq!(l, k);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            alpha: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
