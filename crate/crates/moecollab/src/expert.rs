//! Adapter-based expert: a residual bottleneck (d -> k -> d) on top of the
//! shared encoder representation, followed by a linear classifier head.
//!
//! The up-projection starts at zero, so a freshly initialized expert passes
//! the encoder representation through unchanged and its logits equal those of
//! a plain linear head.

use crate::error::{Error, Result};
use crate::ndmath::{Param, Tensor2};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// One contributed expert: adapter + classifier head plus identifying labels.
#[derive(Debug, Clone)]
pub struct ExpertModule {
    pub id: String,
    pub domain_tag: String,
    /// Ordered class names; logits column i scores `labels[i]`.
    pub labels: Vec<String>,
    pub w_down: Param,
    pub b_down: Param,
    pub w_up: Param,
    pub b_up: Param,
    pub w_out: Param,
    pub b_out: Param,
}

/// Activations kept from [`expert_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ExpertTrace {
    pub h: Tensor2,
    pub a: Tensor2,
    pub h_prime: Tensor2,
    pub y: Tensor2,
}

fn uniform_fan(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor2 {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor2::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

/// Builds an expert with `W_down`/`W_out` uniform in ±sqrt(6/(fan_in+fan_out))
/// and `W_up` plus all biases zero, so the adapter is the identity at init.
pub fn init_expert(
    id: &str,
    domain_tag: &str,
    labels: Vec<String>,
    hidden_dim: usize,
    adapter_dim: usize,
    seed: u64,
) -> Result<ExpertModule> {
    if adapter_dim < 1 {
        return Err(Error::Validation("adapter_dim must be >= 1".into()));
    }
    if labels.len() < 2 {
        return Err(Error::Validation(format!(
            "expert {id} needs at least 2 labels, got {}",
            labels.len()
        )));
    }
    if hidden_dim < 1 {
        return Err(Error::Validation("hidden_dim must be >= 1".into()));
    }
    let c = labels.len();
    let mut rng = StdRng::seed_from_u64(seed);
    Ok(ExpertModule {
        id: id.to_string(),
        domain_tag: domain_tag.to_string(),
        labels,
        w_down: Param::new(uniform_fan(&mut rng, hidden_dim, adapter_dim)),
        b_down: Param::new(Tensor2::zeros(1, adapter_dim)),
        w_up: Param::new(Tensor2::zeros(adapter_dim, hidden_dim)),
        b_up: Param::new(Tensor2::zeros(1, hidden_dim)),
        w_out: Param::new(uniform_fan(&mut rng, hidden_dim, c)),
        b_out: Param::new(Tensor2::zeros(1, c)),
    })
}

impl ExpertModule {
    pub fn hidden_dim(&self) -> usize {
        self.w_down.value.rows()
    }

    pub fn adapter_dim(&self) -> usize {
        self.w_down.value.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Total scalar parameters: d·k + k + k·d + d + d·c + c.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim();
        let k = self.adapter_dim();
        let c = self.num_classes();
        d * k + k + k * d + d + d * c + c
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_down,
            &mut self.b_down,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor2)> {
        vec![
            ("w_down", &self.w_down.value),
            ("b_down", &self.b_down.value),
            ("w_up", &self.w_up.value),
            ("b_up", &self.b_up.value),
            ("w_out", &self.w_out.value),
            ("b_out", &self.b_out.value),
        ]
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// a = relu(h·W_down + b_down); h' = h + a·W_up + b_up; y = h'·W_out + b_out.
pub fn expert_forward(h: &Tensor2, e: &ExpertModule) -> Result<ExpertTrace> {
    if h.cols() != e.hidden_dim() {
        return Err(Error::ShapeMismatch {
            op: "expert_forward",
            lhs: h.shape(),
            rhs: (h.rows(), e.hidden_dim()),
        });
    }
    let a = h
        .matmul(&e.w_down.value)?
        .add_row(&e.b_down.value)?
        .relu();
    let h_prime = h.add(&a.matmul(&e.w_up.value)?.add_row(&e.b_up.value)?)?;
    let y = h_prime.matmul(&e.w_out.value)?.add_row(&e.b_out.value)?;
    Ok(ExpertTrace {
        h: h.clone(),
        a,
        h_prime,
        y,
    })
}

/// Accumulates gradients into the expert's parameters and returns the
/// gradient with respect to `h`, including the residual path.
pub fn expert_backward(
    trace: &ExpertTrace,
    e: &mut ExpertModule,
    grad_y: &Tensor2,
) -> Result<Tensor2> {
    if grad_y.shape() != trace.y.shape() {
        return Err(Error::ShapeMismatch {
            op: "expert_backward",
            lhs: grad_y.shape(),
            rhs: trace.y.shape(),
        });
    }
    // y = h' W_out + b_out
    e.w_out.accumulate(&trace.h_prime.matmul_at(grad_y)?)?;
    e.b_out.accumulate(&grad_y.col_sums())?;
    let dh_prime = grad_y.matmul_bt(&e.w_out.value)?;
    // h' = h + a W_up + b_up
    e.w_up.accumulate(&trace.a.matmul_at(&dh_prime)?)?;
    e.b_up.accumulate(&dh_prime.col_sums())?;
    let da = dh_prime.matmul_bt(&e.w_up.value)?;
    // a = relu(z), z = h W_down + b_down; relu grad gated by a > 0
    let dz = da.hadamard(&trace.a.positive_mask())?;
    e.w_down.accumulate(&trace.h.matmul_at(&dz)?)?;
    e.b_down.accumulate(&dz.col_sums())?;
    // residual path passes dh' straight through; adapter path adds dz·W_downᵀ
    dh_prime.add(&dz.matmul_bt(&e.w_down.value)?)
}
