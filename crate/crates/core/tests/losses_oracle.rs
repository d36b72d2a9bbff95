use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spatialkd::gradcheck::suite;
use spatialkd::losses::{attention_mse, kl_distill, softmax_values};
use spatialkd::{Graph, Tensor};

/// T^2 * sum_k p_k (ln p_k - ln q_k), written from scratch in plain f64.
fn kl_oracle(teacher: &[f64], student: &[f64], t: f64) -> f64 {
    let soft = |z: &[f64]| {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| ((v - m) / t).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (p, q) = (soft(teacher), soft(student));
    t * t * p.iter().zip(&q).map(|(pk, qk)| pk * (pk.ln() - qk.ln())).sum::<f64>()
}

fn kl(teacher: &[f64], student: &[f64], t: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![teacher.len()], teacher.to_vec()).unwrap()).unwrap();
    let b = g.param(Tensor::new(vec![student.len()], student.to_vec()).unwrap()).unwrap();
    let out = kl_distill(&mut g, a, b, t).unwrap();
    g.value(out).item()
}

fn logits(rng: &mut impl Rng, k: usize, spread: f64) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(-spread..spread)).collect()
}

#[test]
fn kl_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in [1.0, 3.0, 10.0] {
        for _ in 0..100 {
            let k = rng.random_range(2..8);
            let (p, q) = (logits(&mut rng, k, 6.0), logits(&mut rng, k, 6.0));
            let (got, want) = (kl(&p, &q, t), kl_oracle(&p, &q, t));
            assert!((got - want).abs() <= 1e-6, "T={t}: {got} vs {want}");
            assert!(got >= 0.0);
        }
    }
}

#[test]
fn kl_vanishes_for_identical_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in [1.0, 3.0, 10.0] {
        let z = logits(&mut rng, 5, 10.0);
        assert!(kl(&z, &z, t).abs() < 1e-12);
    }
}

#[test]
fn kl_ignores_a_common_logit_shift() {
    let p = [1.0, -2.0, 0.5];
    let q = [0.3, 0.1, -1.0];
    let shifted: Vec<f64> = q.iter().map(|v| v + 7.0).collect();
    assert!((kl(&p, &q, 3.0) - kl(&p, &shifted, 3.0)).abs() < 1e-12);
}

#[test]
fn softmax_entropy_grows_with_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let entropy = |p: &[f64]| -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    for _ in 0..50 {
        let z = logits(&mut rng, 5, 4.0);
        let mut last = 0.0;
        for t in [0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 100.0] {
            let h = entropy(&softmax_values(&z, t).unwrap());
            assert!(h >= last - 1e-12, "entropy fell at T={t}");
            last = h;
        }
        assert!(last <= 5f64.ln() + 1e-12);
    }
}

#[test]
fn attention_gradient_equals_closed_form() {
    let err = suite::attention_closed_form(100).unwrap();
    assert!(err <= suite::CLOSED_FORM_TOLERANCE, "max deviation {err}");
}

#[test]
fn attention_mse_is_mean_squared_error() {
    let a = [0.0, 0.5, 1.0, 0.25];
    let m = [0.0, 1.0, 1.0, 0.0];
    let mut g = Graph::<f64>::new();
    let av = g.param(Tensor::new(vec![2, 2], a.to_vec()).unwrap()).unwrap();
    let mv = g.constant(Tensor::new(vec![2, 2], m.to_vec()).unwrap()).unwrap();
    let loss = attention_mse(&mut g, av, mv).unwrap();
    assert!((g.value(loss).item() - (0.25 + 0.0625) / 4.0).abs() < 1e-15);
}
