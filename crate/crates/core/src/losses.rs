//! Auxiliary router losses and total-loss composition.
//!
//! Each loss exists twice: a pure `f64` function (the reference) and a
//! tape builder producing a differentiable node. Tests hold the two
//! routes equal; the trainer uses the tape route, reports use the pure
//! route.
//!
//! Load balance: alpha * N * sum_i f_i * P_i, where f_i is the fraction
//! of tokens whose first choice is expert i (a step function of the
//! probabilities, so gradients flow only through P_i) and P_i is the mean
//! router probability of expert i. Both uniform: the sum is 1/N and the
//! loss is alpha, which is why the N factor is there.
//!
//! Router z-loss: mean over tokens of log(sum(exp(logits)))^2. Penalizes
//! logit growth in both directions, pulling the router's operating point
//! toward log-sum-exp zero where narrow formats still resolve gaps.

use crate::graph::{Graph, Var};
use crate::ops;
use crate::routing::argmax;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("{component} is not finite: {value}")]
    NonFinite { component: &'static str, value: f64 },
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error(transparent)]
    Numerics(#[from] ops::NumericsError),
}

/// Coefficients for composing the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the load-balance loss.
    pub balance_coeff: f64,
    /// Weight of the router z-loss.
    pub z_coeff: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            balance_coeff: 1e-2,
            z_coeff: 1e-3,
        }
    }
}

/// Dispatch fractions f: per expert, the share of tokens whose
/// highest-probability expert it is.
pub fn dispatch_fractions(probs: &Tensor) -> Result<Vec<f64>, LossError> {
    let (t, n) = probs.require_matrix()?;
    let mut f = vec![0.0; n];
    for i in 0..t {
        f[argmax(probs.row(i)?)] += 1.0 / t as f64;
    }
    Ok(f)
}

/// Pure load-balance loss over one group's router probabilities.
pub fn load_balance_loss(probs: &Tensor, alpha: f64) -> Result<f64, LossError> {
    let (t, n) = probs.require_matrix()?;
    let f = dispatch_fractions(probs)?;
    let mut acc = 0.0;
    for j in 0..n {
        let mut p_mean = 0.0;
        for i in 0..t {
            p_mean += probs.get2(i, j);
        }
        p_mean /= t as f64;
        acc += f[j] * p_mean;
    }
    Ok(alpha * n as f64 * acc)
}

/// Pure router z-loss over one group's logits.
pub fn router_z_loss(logits: &Tensor) -> Result<f64, LossError> {
    let (t, _n) = logits.require_matrix()?;
    let mut acc = 0.0;
    for i in 0..t {
        let lse = ops::log_sum_exp(logits.row(i)?)?;
        acc += lse * lse;
    }
    Ok(acc / t as f64)
}

/// Pure total loss: ce + balance_coeff * lb + z_coeff * z.
/// Rejects non-finite components by name so divergence reports can say
/// which term blew up.
pub fn total_loss(ce: f64, lb: f64, z: f64, config: &LossConfig) -> Result<f64, LossError> {
    for (component, value) in [("cross_entropy", ce), ("load_balance", lb), ("router_z", z)] {
        if !value.is_finite() {
            return Err(LossError::NonFinite { component, value });
        }
    }
    Ok(ce + config.balance_coeff * lb + config.z_coeff * z)
}

/// Tape version of the load-balance loss. The dispatch fractions are
/// baked in as constants (they are piecewise constant in the inputs), so
/// gradients flow only through the mean probabilities.
pub fn load_balance_node(g: &mut Graph, probs: Var, alpha: f64) -> Var {
    let pv = g.value(probs).clone();
    let (_t, n) = pv.require_matrix().expect("load_balance_node: probs not a matrix");
    let f = dispatch_fractions(&pv).expect("load_balance_node: bad probs");
    let f_const = g.var(Tensor::new(&[1, n], f).unwrap());
    let p_mean = g.mean_rows(probs);
    let prod = g.mul(f_const, p_mean);
    let s = g.sum_all(prod);
    g.scale(s, alpha * n as f64)
}

/// Tape version of the router z-loss.
pub fn router_z_node(g: &mut Graph, logits: Var) -> Var {
    let lse = g.log_sum_exp_rows(logits);
    let sq = g.mul(lse, lse);
    g.mean_all(sq)
}

/// Tape version of the total loss.
pub fn total_loss_node(g: &mut Graph, ce: Var, lb: Var, z: Var, config: &LossConfig) -> Var {
    let lb_term = g.scale(lb, config.balance_coeff);
    let z_term = g.scale(z, config.z_coeff);
    let partial = g.add(ce, lb_term);
    g.add(partial, z_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::finite_difference_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn softmax_rows_of(logit_rows: &[Vec<f64>]) -> Tensor {
        let rows: Vec<Vec<f64>> = logit_rows
            .iter()
            .map(|r| ops::softmax(r).unwrap())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn balance_loss_is_alpha_for_uniform_router() {
        for n in [2, 4, 32] {
            let probs = Tensor::full(&[16, n], 1.0 / n as f64);
            let loss = load_balance_loss(&probs, 1e-2).unwrap();
            assert!((loss - 1e-2).abs() < 1e-12, "n={n}: {loss}");
        }
    }

    #[test]
    fn balance_loss_is_alpha_for_balanced_hard_assignments() {
        // Tokens one-hot, spread perfectly evenly: f and P both uniform.
        let n = 4;
        let mut rows = Vec::new();
        for i in 0..8 {
            let mut r = vec![0.0; n];
            r[i % n] = 1.0;
            rows.push(r);
        }
        let probs = Tensor::from_rows(&rows).unwrap();
        let loss = load_balance_loss(&probs, 0.01).unwrap();
        assert!((loss - 0.01).abs() < 1e-12);
    }

    #[test]
    fn balance_loss_is_alpha_n_under_collapse() {
        for n in [2, 4, 8] {
            let mut rows = Vec::new();
            for _ in 0..10 {
                let mut r = vec![0.0; n];
                r[n - 1] = 1.0;
                rows.push(r);
            }
            let probs = Tensor::from_rows(&rows).unwrap();
            let loss = load_balance_loss(&probs, 1e-2).unwrap();
            assert!((loss - 1e-2 * n as f64).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn balance_loss_at_least_alpha_for_shared_preferences() {
        // When every token shares one gate distribution, the dispatch
        // fraction concentrates on its argmax, so the sum becomes the
        // max probability, which can't be below the mean 1/n. This is
        // the collapse direction the loss exists to penalize, and alpha
        // is a true floor along it.
        let alpha = 1e-2;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            let n = rng.gen_range(2..6);
            let t = rng.gen_range(2..24);
            let scale = [0.01, 0.1, 1.0, 3.0][rng.gen_range(0..4)];
            let shared: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
            let rows: Vec<Vec<f64>> = (0..t).map(|_| shared.clone()).collect();
            let probs = softmax_rows_of(&rows);
            let loss = load_balance_loss(&probs, alpha).unwrap();
            assert!(loss >= alpha - 1e-12, "loss {loss} below alpha");
        }
    }

    #[test]
    fn balance_loss_can_dip_below_alpha_when_wins_are_marginal() {
        // Alpha is not a global floor: an expert can win most argmax
        // counts by a hair while holding little probability mass, which
        // anti-correlates f and P. Pin one such case so nobody
        // "fixes" the loss into a quantity it isn't.
        let probs = Tensor::from_rows(&[
            vec![0.51, 0.49],
            vec![0.51, 0.49],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let alpha = 1e-2;
        let loss = load_balance_loss(&probs, alpha).unwrap();
        // f = (2/3, 1/3), P = (0.34, 0.66): N * sum = 0.89333... < 1.
        assert!((loss - alpha * 2.0 * (2.0 / 3.0 * 0.34 + 1.0 / 3.0 * 0.66)).abs() < 1e-15);
        assert!(loss < alpha);
    }

    #[test]
    fn z_loss_hand_values() {
        // Row [0, 0]: lse = ln 2, contribution (ln 2)^2.
        let logits = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let want = 2.0_f64.ln().powi(2);
        assert!((router_z_loss(&logits).unwrap() - want).abs() < 1e-15);

        // Rows whose exponentials sum to 1 have lse = 0: zero loss.
        let p = [0.3_f64, 0.7_f64];
        let logits = Tensor::from_rows(&[vec![p[0].ln(), p[1].ln()]]).unwrap();
        assert!(router_z_loss(&logits).unwrap().abs() < 1e-24);

        // Mean over rows.
        let logits = Tensor::from_rows(&[vec![0.0, 0.0], vec![p[0].ln(), p[1].ln()]]).unwrap();
        assert!((router_z_loss(&logits).unwrap() - want / 2.0).abs() < 1e-15);
    }

    #[test]
    fn z_loss_is_nonnegative_and_penalizes_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let logits = Tensor::from_rows(&[row.clone()]).unwrap();
            let base = router_z_loss(&logits).unwrap();
            assert!(base >= 0.0);
            // Adding a large constant shift grows the loss.
            let shifted: Vec<f64> = row.iter().map(|x| x + 50.0).collect();
            let logits_s = Tensor::from_rows(&[shifted]).unwrap();
            assert!(router_z_loss(&logits_s).unwrap() > base);
        }
    }

    #[test]
    fn z_loss_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows = 3;
        let cols = 5;
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits = Tensor::new(&[rows, cols], data.clone()).unwrap();

        let mut g = Graph::new();
        let lv = g.var(logits.clone());
        let z = router_z_node(&mut g, lv);
        let grad = &g.gradients_of(z, &[lv]).unwrap()[0];

        let f = |xs: &[f64]| {
            let t = Tensor::new(&[rows, cols], xs.to_vec()).unwrap();
            router_z_loss(&t).unwrap()
        };
        let fd = finite_difference_grad(f, &data, 1e-6);
        for (a, b) in grad.data().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "analytic {a} vs fd {b}");
        }
    }

    #[test]
    fn balance_gradient_matches_finite_difference_between_boundaries() {
        // f is piecewise constant; away from argmax ties the loss is
        // differentiable in the probabilities.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows = 4;
        let cols = 3;
        let logit_data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let logits = Tensor::new(&[rows, cols], logit_data.clone()).unwrap();

        let mut g = Graph::new();
        let lv = g.var(logits.clone());
        let probs = g.softmax_rows(lv);
        let lb = load_balance_node(&mut g, probs, 0.01);
        let grad = &g.gradients_of(lb, &[lv]).unwrap()[0];

        // Finite differences with f frozen at the base assignment, since
        // the analytic gradient treats f as constant.
        let base_probs = ops::softmax_rows(&logits).unwrap();
        let f_frozen = dispatch_fractions(&base_probs).unwrap();
        let eval = |xs: &[f64]| {
            let t = Tensor::new(&[rows, cols], xs.to_vec()).unwrap();
            let p = ops::softmax_rows(&t).unwrap();
            let mut acc = 0.0;
            for j in 0..cols {
                let mut mean = 0.0;
                for i in 0..rows {
                    mean += p.get2(i, j);
                }
                acc += f_frozen[j] * mean / rows as f64;
            }
            0.01 * cols as f64 * acc
        };
        let fd = finite_difference_grad(eval, &logit_data, 1e-6);
        for (a, b) in grad.data().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8, "analytic {a} vs fd {b}");
        }
    }

    #[test]
    fn tape_and_pure_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::new(
            &[6, 4],
            (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let probs = ops::softmax_rows(&logits).unwrap();

        let mut g = Graph::new();
        let lv = g.var(logits.clone());
        let pv = g.softmax_rows(lv);
        let lb = load_balance_node(&mut g, pv, 0.01);
        let z = router_z_node(&mut g, lv);

        assert!(
            (g.value(lb).scalar_value().unwrap() - load_balance_loss(&probs, 0.01).unwrap()).abs()
                < 1e-12
        );
        assert!(
            (g.value(z).scalar_value().unwrap() - router_z_loss(&logits).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn total_loss_applies_each_coefficient_once() {
        let cfg = LossConfig::default();
        let total = total_loss(2.0, 3.0, 5.0, &cfg).unwrap();
        assert!((total - (2.0 + 1e-2 * 3.0 + 1e-3 * 5.0)).abs() < 1e-15);

        let mut g = Graph::new();
        let ce = g.var(Tensor::scalar(2.0));
        let lb = g.var(Tensor::scalar(3.0));
        let z = g.var(Tensor::scalar(5.0));
        let node = total_loss_node(&mut g, ce, lb, z, &cfg);
        assert!((g.value(node).scalar_value().unwrap() - total).abs() < 1e-15);
    }

    #[test]
    fn total_loss_names_non_finite_component() {
        let cfg = LossConfig::default();
        let err = total_loss(1.0, f64::NAN, 0.0, &cfg).unwrap_err();
        assert!(matches!(
            err,
            LossError::NonFinite { component: "load_balance", .. }
        ));
        let err = total_loss(f64::INFINITY, 0.0, 0.0, &cfg).unwrap_err();
        assert!(matches!(
            err,
            LossError::NonFinite { component: "cross_entropy", .. }
        ));
    }
}
