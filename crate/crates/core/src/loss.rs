//! Training objective: focal loss plus dice loss on soft heatmaps, each
//! with an analytic gradient.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
            dice_eps: 1.0,
        }
    }
}

fn check(phi: &[f64], label: &[f64], open_phi: bool) -> Result<()> {
    if phi.len() != label.len() {
        return Err(Error::Shape(format!("phi has {} values, label {}", phi.len(), label.len())));
    }
    if phi.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    if let Some(p) = phi
        .iter()
        .find(|&&p| if open_phi { !(p > 0.0 && p < 1.0) } else { !(0.0..=1.0).contains(&p) })
    {
        return Err(Error::Domain(format!(
            "phi value {p} outside {}",
            if open_phi { "(0, 1)" } else { "[0, 1]" }
        )));
    }
    if let Some(y) = label.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return Err(Error::Domain(format!("label value {y} outside [0, 1]")));
    }
    Ok(())
}

/// Mean over points of
/// `−[y·α(1−p)^γ·log p + (1−y)·(1−α)·p^γ·log(1−p)]`, and its gradient.
pub fn focal_loss_grad(phi: &[f64], label: &[f64], gamma: f64, alpha: f64) -> Result<(f64, Vec<f64>)> {
    check(phi, label, true)?;
    let n = phi.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(phi.len());
    for (&p, &y) in phi.iter().zip(label) {
        let q = 1.0 - p;
        let (lp, lq) = (p.ln(), q.ln());
        let pos = alpha * q.powf(gamma);
        let neg = (1.0 - alpha) * p.powf(gamma);
        total -= y * pos * lp + (1.0 - y) * neg * lq;
        // d/dp of the positive and negative terms.
        let dpos = alpha * (q.powf(gamma) / p - if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * lp });
        let dneg = (1.0 - alpha) * ((if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) * lq }) - p.powf(gamma) / q);
        grad.push(-(y * dpos + (1.0 - y) * dneg) / n);
    }
    Ok((total / n, grad))
}

pub fn focal_loss(phi: &[f64], label: &[f64], gamma: f64, alpha: f64) -> Result<f64> {
    focal_loss_grad(phi, label, gamma, alpha).map(|(l, _)| l)
}

/// `1 − (2·Σp·y + ε) / (Σp² + Σy² + ε)` and its gradient.
pub fn dice_loss_grad(phi: &[f64], label: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    check(phi, label, false)?;
    let inter: f64 = phi.iter().zip(label).map(|(p, y)| p * y).sum();
    let pp: f64 = phi.iter().map(|p| p * p).sum();
    let yy: f64 = label.iter().map(|y| y * y).sum();
    let num = 2.0 * inter + eps;
    let den = pp + yy + eps;
    let grad = phi
        .iter()
        .zip(label)
        .map(|(p, y)| -(2.0 * y * den - num * 2.0 * p) / (den * den))
        .collect();
    Ok((1.0 - num / den, grad))
}

pub fn dice_loss(phi: &[f64], label: &[f64], eps: f64) -> Result<f64> {
    dice_loss_grad(phi, label, eps).map(|(l, _)| l)
}

/// Focal plus dice, with the summed gradient.
pub fn total_loss_grad(phi: &[f64], label: &[f64], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let (f, gf) = focal_loss_grad(phi, label, cfg.gamma, cfg.alpha)?;
    let (d, gd) = dice_loss_grad(phi, label, cfg.dice_eps)?;
    Ok((f + d, gf.iter().zip(&gd).map(|(a, b)| a + b).collect()))
}

pub fn total_loss(phi: &[f64], label: &[f64], cfg: &LossConfig) -> Result<f64> {
    total_loss_grad(phi, label, cfg).map(|(l, _)| l)
}

/// Records the total loss of a `[1 × N]` φ node on the tape.
pub fn total_loss_node(tape: &mut Tape, phi: Var, label: &[f64], cfg: &LossConfig) -> Result<Var> {
    let values = tape.value(phi);
    let flat: Vec<f64> = values.iter().copied().collect();
    let (loss, grad) = total_loss_grad(&flat, label, cfg)?;
    let grad = Array2::from_shape_vec(values.dim(), grad).expect("same element count");
    Ok(tape.scalar_fn(phi, loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent scalar recomputation straight from the definition.
    fn focal_oracle(phi: &[f64], y: &[f64], gamma: f64, alpha: f64) -> f64 {
        let mut s = 0.0;
        for i in 0..phi.len() {
            let p = phi[i];
            let term_pos = y[i] * alpha * (1.0 - p).powf(gamma) * p.ln();
            let term_neg = (1.0 - y[i]) * (1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
            s += -(term_pos + term_neg);
        }
        s / phi.len() as f64
    }

    fn random_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let phi = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let y = (0..n).map(|_| if rng.random_bool(0.3) { rng.random_range(0.5..=1.0) } else { 0.0 }).collect();
        (phi, y)
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (phi, y) = random_case(&mut rng, 8);
        let bce: f64 = phi
            .iter()
            .zip(&y)
            .map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / 8.0;
        assert!((focal_loss(&phi, &y, 0.0, 0.5).unwrap() - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (phi, y) = random_case(&mut rng, 8);
            let got = focal_loss(&phi, &y, 2.0, 0.25).unwrap();
            assert!((got - focal_oracle(&phi, &y, 2.0, 0.25)).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let phi: Vec<f64> = y.iter().map(|&v: &f64| v.clamp(1e-7, 1.0 - 1e-7)).collect();
        assert!(focal_loss(&phi, &y, 2.0, 0.25).unwrap() < 1e-5);
        assert!(total_loss(&phi, &y, &LossConfig::default()).unwrap() < 1e-5);
    }

    #[test]
    fn focal_domain_errors() {
        assert!(matches!(focal_loss(&[0.0, 0.5], &[0.0, 1.0], 2.0, 0.25), Err(Error::Domain(_))));
        assert!(matches!(focal_loss(&[1.0], &[1.0], 2.0, 0.25), Err(Error::Domain(_))));
        assert!(matches!(focal_loss(&[0.5], &[1.0, 0.0], 2.0, 0.25), Err(Error::Shape(_))));
    }

    #[test]
    fn dice_limits() {
        let y = [0.0, 0.5, 1.0, 0.25];
        assert!(dice_loss(&y, &y, 1.0).unwrap().abs() < 1e-15);
        let n = 10_000;
        let a: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { 0.0 }).collect();
        let b: Vec<f64> = (0..n).map(|i| if i >= n / 2 { 1.0 } else { 0.0 }).collect();
        assert!(dice_loss(&a, &b, 1.0).unwrap() > 0.999);
        assert_eq!(dice_loss(&[0.0; 5], &[0.0; 5], 1.0).unwrap(), 0.0);
        assert!(matches!(dice_loss(&[0.1], &[0.1, 0.2], 1.0), Err(Error::Shape(_))));
    }

    fn fd_check(phi: &[f64], y: &[f64]) {
        let cfg = LossConfig::default();
        let (_, g) = total_loss_grad(phi, y, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..phi.len() {
            let mut p = phi.to_vec();
            p[i] += h;
            let mut m = phi.to_vec();
            m[i] -= h;
            let num = (total_loss(&p, y, &cfg).unwrap() - total_loss(&m, y, &cfg).unwrap()) / (2.0 * h);
            let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-4, "i={i} analytic {} numeric {num}", g[i]);
        }
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (phi, y) = random_case(&mut rng, 8);
            fd_check(&phi, &y);
        }
    }

    proptest! {
        #[test]
        fn losses_are_bounded(
            case in prop::collection::vec((0.001f64..0.999, 0.0f64..=1.0), 1..64)
        ) {
            let (phi, y): (Vec<f64>, Vec<f64>) = case.into_iter().unzip();
            let cfg = LossConfig::default();
            let d = dice_loss(&phi, &y, cfg.dice_eps).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(total_loss(&phi, &y, &cfg).unwrap() >= 0.0);
        }

        #[test]
        fn loss_falls_towards_binary_label(
            y in prop::collection::vec(prop::bool::ANY, 1..64)
        ) {
            let y: Vec<f64> = y.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
            let cfg = LossConfig::default();
            let at = |t: f64| {
                let phi: Vec<f64> = y.iter().map(|&v| 0.5 + t * (v - 0.5)).collect();
                total_loss(&phi, &y, &cfg).unwrap()
            };
            let mut prev = at(0.0);
            for k in 1..=19 {
                let cur = at(k as f64 * 0.05);
                prop_assert!(cur < prev, "t={} {} !< {}", k as f64 * 0.05, cur, prev);
                prev = cur;
            }
        }
    }
}
