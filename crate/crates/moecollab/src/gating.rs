//! Gating network: a linear map from the encoder representation to a softmax
//! distribution over experts, plus the entropy-regularized routing objective
//! and its exact gradients.
//!
//! The objective decomposes as
//! `total = task + lambda1 * mean_entropy + lambda2 * balance_kl`
//! where `mean_entropy` is the per-example gate entropy averaged over the
//! batch and `balance_kl` is the KL divergence of the batch-mean gate
//! distribution from uniform. Both coefficients may carry either sign.

use crate::error::{Error, Result};
use crate::ndmath::{softmax_rows, softmax_rows_backward, Param, Tensor2};
use serde::{Deserialize, Serialize};

const SIMPLEX_TOL: f64 = 1e-6;

/// Linear gate over experts. Zero-initialized so routing starts uniform.
#[derive(Debug, Clone)]
pub struct GatingNetwork {
    pub w: Param,
    pub b: Param,
}

impl GatingNetwork {
    pub fn init(hidden_dim: usize, num_experts: usize) -> Result<GatingNetwork> {
        if num_experts < 1 {
            return Err(Error::Validation("num_experts must be >= 1".into()));
        }
        if hidden_dim < 1 {
            return Err(Error::Validation("hidden_dim must be >= 1".into()));
        }
        Ok(GatingNetwork {
            w: Param::new(Tensor2::zeros(hidden_dim, num_experts)),
            b: Param::new(Tensor2::zeros(1, num_experts)),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.value.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.w.value.cols()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor2)> {
        vec![("w", &self.w.value), ("b", &self.b.value)]
    }

    pub fn zero_grad(&mut self) {
        self.w.zero_grad();
        self.b.zero_grad();
    }
}

/// Coefficients of the two routing regularizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for GateLossConfig {
    fn default() -> Self {
        GateLossConfig {
            lambda1: 0.01,
            lambda2: 0.1,
        }
    }
}

impl GateLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::NonFinite("gate loss coefficients"));
        }
        Ok(())
    }
}

/// Additive pieces of the routing objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub mean_entropy: f64,
    pub balance_kl: f64,
    pub total: f64,
}

/// weights = softmax_rows(h·W + b); each row lies on the E-simplex.
pub fn gate_forward(h: &Tensor2, gn: &GatingNetwork) -> Result<Tensor2> {
    if h.cols() != gn.hidden_dim() {
        return Err(Error::ShapeMismatch {
            op: "gate_forward",
            lhs: h.shape(),
            rhs: (h.rows(), gn.hidden_dim()),
        });
    }
    softmax_rows(&h.matmul(&gn.w.value)?.add_row(&gn.b.value)?)
}

/// Accumulates gate-parameter gradients given d(total)/d(weights) and returns
/// the gradient with respect to `h` (needed when the encoder is unfrozen).
pub fn gate_backward(
    h: &Tensor2,
    weights: &Tensor2,
    gn: &mut GatingNetwork,
    grad_weights: &Tensor2,
) -> Result<Tensor2> {
    let grad_logits = softmax_rows_backward(weights, grad_weights)?;
    gn.w.accumulate(&h.matmul_at(&grad_logits)?)?;
    gn.b.accumulate(&grad_logits.col_sums())?;
    grad_logits.matmul_bt(&gn.w.value)
}

fn check_simplex(weights: &Tensor2) -> Result<()> {
    for r in 0..weights.rows() {
        let mut sum = 0.0;
        for &v in weights.row(r) {
            if !(0.0..=1.0 + SIMPLEX_TOL).contains(&v) {
                return Err(Error::Validation(format!(
                    "gate weight {v} in row {r} outside [0, 1]"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!(
                "gate row {r} sums to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

/// (1/b) Σ_rows (−Σ_i g_i ln g_i), with 0·ln 0 := 0.
pub fn mean_gate_entropy(weights: &Tensor2) -> Result<f64> {
    check_simplex(weights)?;
    let b = weights.rows() as f64;
    let mut total = 0.0;
    for r in 0..weights.rows() {
        for &g in weights.row(r) {
            if g > 0.0 {
                total -= g * g.ln();
            }
        }
    }
    Ok(total / b)
}

/// KL(batch-mean gate distribution ‖ uniform) = Σ_i p̄_i ln(p̄_i · E).
pub fn balance_kl(weights: &Tensor2) -> Result<f64> {
    check_simplex(weights)?;
    let e = weights.cols() as f64;
    let mut kl = 0.0;
    for p_bar in column_means(weights) {
        if p_bar > 0.0 {
            kl += p_bar * (p_bar * e).ln();
        }
    }
    Ok(kl)
}

fn column_means(weights: &Tensor2) -> Vec<f64> {
    let b = weights.rows() as f64;
    let mut means = vec![0.0; weights.cols()];
    for r in 0..weights.rows() {
        for (m, &v) in means.iter_mut().zip(weights.row(r)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= b;
    }
    means
}

/// Assembles the routing objective from a precomputed task loss.
pub fn gate_loss(task: f64, weights: &Tensor2, cfg: &GateLossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    if !task.is_finite() {
        return Err(Error::NonFinite("task loss"));
    }
    let mean_entropy = mean_gate_entropy(weights)?;
    let kl = balance_kl(weights)?;
    Ok(LossBreakdown {
        task,
        mean_entropy,
        balance_kl: kl,
        total: task + cfg.lambda1 * mean_entropy + cfg.lambda2 * kl,
    })
}

/// d(lambda1·mean_entropy + lambda2·balance_kl)/d(weights).
///
/// Entry (r, i): −λ1 (ln g_ri + 1)/b + λ2 (ln(p̄_i E) + 1)/b. Softmax output
/// is strictly positive, so the logarithms are safe on any gate_forward
/// result.
pub fn regularizer_grad(weights: &Tensor2, cfg: &GateLossConfig) -> Result<Tensor2> {
    check_simplex(weights)?;
    let b = weights.rows() as f64;
    let e = weights.cols() as f64;
    let means = column_means(weights);
    let mut grad = Tensor2::zeros(weights.rows(), weights.cols());
    for r in 0..weights.rows() {
        for i in 0..weights.cols() {
            let g = weights.get(r, i);
            if g <= 0.0 || means[i] <= 0.0 {
                return Err(Error::Validation(
                    "regularizer gradient undefined at the simplex boundary".into(),
                ));
            }
            let d_entropy = -(g.ln() + 1.0) / b;
            let d_kl = ((means[i] * e).ln() + 1.0) / b;
            grad.set(r, i, cfg.lambda1 * d_entropy + cfg.lambda2 * d_kl);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_h(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor2 {
        Tensor2::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
    }

    #[test]
    fn zero_gate_routes_uniformly() {
        let gn = GatingNetwork::init(3, 4).unwrap();
        let h = Tensor2::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.0, 0.0, 1.0]);
        let w = gate_forward(&h, &gn).unwrap();
        for r in 0..2 {
            for i in 0..4 {
                assert!((w.get(r, i) - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_rows_are_on_the_simplex() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut gn = GatingNetwork::init(6, 3).unwrap();
        for v in gn.w.value.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let h = random_h(&mut rng, 10, 6);
        let w = gate_forward(&h, &gn).unwrap();
        for r in 0..w.rows() {
            let sum: f64 = w.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(w.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn hand_computed_gate_weights() {
        // d=1, E=2, W=[[1, 0]], h=[1] -> softmax([1, 0])
        let mut gn = GatingNetwork::init(1, 2).unwrap();
        gn.w.value = Tensor2::from_vec(1, 2, vec![1.0, 0.0]);
        let h = Tensor2::from_vec(1, 1, vec![1.0]);
        let w = gate_forward(&h, &gn).unwrap();
        assert!((w.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((w.get(0, 1) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn entropy_extremes_and_handmade_value() {
        let uniform = Tensor2::from_vec(2, 4, vec![0.25; 8]);
        assert!((mean_gate_entropy(&uniform).unwrap() - 4.0f64.ln()).abs() < 1e-12);

        let one_hot = Tensor2::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(mean_gate_entropy(&one_hot).unwrap(), 0.0);

        let half = Tensor2::from_vec(1, 4, vec![0.5, 0.5, 0.0, 0.0]);
        assert!((mean_gate_entropy(&half).unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_off_simplex_rows() {
        let bad = Tensor2::from_vec(1, 2, vec![0.7, 0.7]);
        assert!(matches!(
            mean_gate_entropy(&bad),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn balance_kl_uniform_zero_and_skew_ln2() {
        let uniform = Tensor2::from_vec(3, 2, vec![0.5; 6]);
        assert!(balance_kl(&uniform).unwrap().abs() < 1e-12);

        // mixed rows whose column means are uniform also give 0
        let mixed = Tensor2::from_vec(2, 2, vec![0.9, 0.1, 0.1, 0.9]);
        assert!(balance_kl(&mixed).unwrap().abs() < 1e-12);

        let skewed = Tensor2::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        assert!((balance_kl(&skewed).unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_and_kl_bounds_on_random_simplex_rows() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let rows = rng.gen_range(1..6);
            let e = rng.gen_range(2..5);
            let mut w = Tensor2::zeros(rows, e);
            for r in 0..rows {
                let raw: Vec<f64> = (0..e).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                for (i, v) in raw.iter().enumerate() {
                    w.set(r, i, v / sum);
                }
            }
            let h = mean_gate_entropy(&w).unwrap();
            assert!(h >= 0.0 && h <= (e as f64).ln() + 1e-12);
            assert!(balance_kl(&w).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn loss_breakdown_decomposition() {
        let mut rng = StdRng::seed_from_u64(23);
        let mut gn = GatingNetwork::init(4, 3).unwrap();
        for v in gn.w.value.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let h = random_h(&mut rng, 5, 4);
        let w = gate_forward(&h, &gn).unwrap();
        let cfg = GateLossConfig::default();
        let bd = gate_loss(1.37, &w, &cfg).unwrap();
        let recomposed = bd.task + cfg.lambda1 * bd.mean_entropy + cfg.lambda2 * bd.balance_kl;
        assert!((bd.total - recomposed).abs() < 1e-12);

        let off = gate_loss(1.37, &w, &GateLossConfig { lambda1: 0.0, lambda2: 0.0 }).unwrap();
        assert_eq!(off.total, off.task);

        let uniform = Tensor2::from_vec(2, 3, vec![1.0 / 3.0; 6]);
        let at_uniform = gate_loss(0.5, &uniform, &cfg).unwrap();
        assert!((at_uniform.total - (0.5 + cfg.lambda1 * 3.0f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        // Gradient of total w.r.t. gate logits, b=3, E=3.
        let mut rng = StdRng::seed_from_u64(31);
        let cfg = GateLossConfig {
            lambda1: 0.05,
            lambda2: 0.3,
        };
        let logits = random_h(&mut rng, 3, 3);
        let loss = |l: &Tensor2| -> f64 {
            let w = softmax_rows(l).unwrap();
            cfg.lambda1 * mean_gate_entropy(&w).unwrap() + cfg.lambda2 * balance_kl(&w).unwrap()
        };
        let w = softmax_rows(&logits).unwrap();
        let analytic = softmax_rows_backward(&w, &regularizer_grad(&w, &cfg).unwrap()).unwrap();
        let step = 1e-5;
        for r in 0..3 {
            for c in 0..3 {
                let mut plus = logits.clone();
                plus.set(r, c, logits.get(r, c) + step);
                let mut minus = logits.clone();
                minus.set(r, c, logits.get(r, c) - step);
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
                let a = analytic.get(r, c);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(rel <= 1e-4, "({r},{c}): analytic {a}, numeric {numeric}");
            }
        }
    }

    #[test]
    fn balance_step_reduces_kl_from_skewed_gate() {
        // One gradient step on λ2·balance_kl alone must strictly lower it.
        let mut rng = StdRng::seed_from_u64(41);
        let mut gn = GatingNetwork::init(3, 3).unwrap();
        for v in gn.w.value.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let h = random_h(&mut rng, 6, 3);
        let cfg = GateLossConfig {
            lambda1: 0.0,
            lambda2: 1.0,
        };
        let w0 = gate_forward(&h, &gn).unwrap();
        let before = balance_kl(&w0).unwrap();
        assert!(before > 1e-4, "gate not skewed enough for the test");

        gn.zero_grad();
        let gw = regularizer_grad(&w0, &cfg).unwrap();
        gate_backward(&h, &w0, &mut gn, &gw).unwrap();
        let lr = 0.1;
        for p in gn.params_mut() {
            let step = p.grad.clone().scale(-lr);
            p.value = p.value.add(&step).unwrap();
        }
        let after = balance_kl(&gate_forward(&h, &gn).unwrap()).unwrap();
        assert!(after < before, "kl before {before}, after {after}");
    }

    #[test]
    fn gate_backward_matches_finite_differences_through_parameters() {
        let mut rng = StdRng::seed_from_u64(53);
        let h = random_h(&mut rng, 4, 5);
        let cfg = GateLossConfig {
            lambda1: 0.02,
            lambda2: 0.2,
        };
        let mut gn = GatingNetwork::init(5, 3).unwrap();
        for v in gn.w.value.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let max_rel = crate::train::grad_check(
            &gn,
            |g: &mut GatingNetwork| {
                g.zero_grad();
                let w = gate_forward(&h, g)?;
                let gw = regularizer_grad(&w, &cfg)?;
                gate_backward(&h, &w, g, &gw).map(|_| ())
            },
            |g: &GatingNetwork| {
                let w = gate_forward(&h, g)?;
                Ok(cfg.lambda1 * mean_gate_entropy(&w)? + cfg.lambda2 * balance_kl(&w)?)
            },
            |g: &mut GatingNetwork| g.params_mut(),
            1e-5,
        )
        .unwrap();
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }
}
