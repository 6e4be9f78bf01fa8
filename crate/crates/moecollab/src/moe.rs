//! Weighted combination of heterogeneous expert outputs and the routing
//! analytics built on top of it.
//!
//! Experts may classify over different label counts; their logits are
//! right-padded with zero columns to the widest expert before the gate-
//! weighted sum. Padding is only meaningful when every expert's label list is
//! a prefix of the model-level label universe, which [`MoEModel::new`]
//! enforces.

use crate::encoder::{Encoder, TokenBatch};
use crate::error::{Error, Result};
use crate::expert::{expert_backward, expert_forward, ExpertModule, ExpertTrace};
use crate::gating::{gate_backward, gate_forward, GatingNetwork};
use crate::ndmath::Tensor2;
use crate::registry::Violation;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Shared encoder, contributed experts, and the gate that routes between
/// them.
#[derive(Debug, Clone)]
pub struct MoEModel {
    pub encoder: Encoder,
    pub experts: Vec<ExpertModule>,
    pub gating: GatingNetwork,
    label_universe: Vec<String>,
}

impl MoEModel {
    pub fn new(
        encoder: Encoder,
        experts: Vec<ExpertModule>,
        gating: GatingNetwork,
    ) -> Result<MoEModel> {
        let mut violations = Vec::new();
        if gating.num_experts() != experts.len() {
            violations.push(Violation::GateArity {
                gate: gating.num_experts(),
                experts: experts.len(),
            });
        }
        let d = encoder.hidden_dim();
        if gating.hidden_dim() != d {
            violations.push(Violation::HiddenDim {
                expert_id: "<gating>".into(),
                expert_d: gating.hidden_dim(),
                model_d: d,
            });
        }
        let universe = experts
            .iter()
            .max_by_key(|e| e.num_classes())
            .map(|e| e.labels.clone())
            .unwrap_or_default();
        for e in &experts {
            if e.hidden_dim() != d {
                violations.push(Violation::HiddenDim {
                    expert_id: e.id.clone(),
                    expert_d: e.hidden_dim(),
                    model_d: d,
                });
            }
            if e.labels[..] != universe[..e.labels.len().min(universe.len())] {
                violations.push(Violation::LabelPrefix {
                    expert_id: e.id.clone(),
                    labels: e.labels.clone(),
                    universe: universe.clone(),
                });
            }
        }
        if experts.is_empty() {
            return Err(Error::Validation("model needs at least one expert".into()));
        }
        if !violations.is_empty() {
            return Err(Error::Incompatible { violations });
        }
        Ok(MoEModel {
            encoder,
            experts,
            gating,
            label_universe: universe,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Widest expert's class count; the width of combined logits.
    pub fn c_max(&self) -> usize {
        self.label_universe.len()
    }

    pub fn label_universe(&self) -> &[String] {
        &self.label_universe
    }
}

/// Result of one combined forward pass.
#[derive(Debug, Clone)]
pub struct CombinedOutput {
    pub logits: Tensor2,
    pub gate_weights: Tensor2,
    pub per_expert_logits: Vec<Tensor2>,
}

/// Right-pads each expert output with zero columns to the widest width.
/// Originals are unmodified; all outputs must share a batch size.
pub fn pad_outputs(outputs: &[Tensor2]) -> Result<Vec<Tensor2>> {
    let c_max = outputs.iter().map(Tensor2::cols).max().unwrap_or(0);
    let mut padded = Vec::with_capacity(outputs.len());
    for o in outputs {
        if o.rows() != outputs[0].rows() {
            return Err(Error::ShapeMismatch {
                op: "pad_outputs",
                lhs: o.shape(),
                rhs: outputs[0].shape(),
            });
        }
        if o.cols() == c_max {
            padded.push(o.clone());
            continue;
        }
        let mut p = Tensor2::zeros(o.rows(), c_max);
        for r in 0..o.rows() {
            p.row_mut(r)[..o.cols()].copy_from_slice(o.row(r));
        }
        padded.push(p);
    }
    Ok(padded)
}

/// logits[r, c] = Σ_e weights[r, e] · padded[e][r, c].
pub fn combine_outputs(weights: &Tensor2, padded: &[Tensor2]) -> Result<Tensor2> {
    if weights.cols() != padded.len() {
        return Err(Error::ShapeMismatch {
            op: "combine_outputs",
            lhs: weights.shape(),
            rhs: (weights.rows(), padded.len()),
        });
    }
    let c_max = padded.first().map(Tensor2::cols).unwrap_or(0);
    let mut logits = Tensor2::zeros(weights.rows(), c_max);
    for (e, p) in padded.iter().enumerate() {
        if p.shape() != (weights.rows(), c_max) {
            return Err(Error::ShapeMismatch {
                op: "combine_outputs",
                lhs: p.shape(),
                rhs: (weights.rows(), c_max),
            });
        }
        for r in 0..weights.rows() {
            let g = weights.get(r, e);
            let out = logits.row_mut(r);
            for (o, &v) in out.iter_mut().zip(p.row(r)) {
                *o += g * v;
            }
        }
    }
    Ok(logits)
}

/// Full forward pass from token ids: encode, gate, run every expert, combine.
pub fn moe_forward(batch: &TokenBatch, m: &MoEModel) -> Result<CombinedOutput> {
    let h = m.encoder.encode(batch)?;
    Ok(moe_forward_from_h(&h, m)?.0)
}

/// Forward pass from a precomputed representation; also returns the expert
/// traces needed when expert gradients are wanted.
pub fn moe_forward_from_h(
    h: &Tensor2,
    m: &MoEModel,
) -> Result<(CombinedOutput, Vec<ExpertTrace>)> {
    let weights = gate_forward(h, &m.gating)?;
    let mut traces = Vec::with_capacity(m.experts.len());
    for e in &m.experts {
        traces.push(expert_forward(h, e)?);
    }
    let per_expert_logits: Vec<Tensor2> = traces.iter().map(|t| t.y.clone()).collect();
    let padded = pad_outputs(&per_expert_logits)?;
    let logits = combine_outputs(&weights, &padded)?;
    Ok((
        CombinedOutput {
            logits,
            gate_weights: weights,
            per_expert_logits,
        },
        traces,
    ))
}

/// Combine expert outputs that were computed once and cached (gate training
/// with frozen experts): only the gate forward runs per step.
pub fn combine_cached(
    h: &Tensor2,
    padded: &[Tensor2],
    gating: &GatingNetwork,
) -> Result<(Tensor2, Tensor2)> {
    let weights = gate_forward(h, gating)?;
    let logits = combine_outputs(&weights, padded)?;
    Ok((logits, weights))
}

/// Exact gradients through the weighted combination.
///
/// `grad_weights_extra` lets the caller add regularizer gradients w.r.t. the
/// gate weights on top of the task-loss path. When `traces` is `Some`, expert
/// parameters also receive gradients (padding columns contribute none).
/// Returns the gradient w.r.t. `h`.
pub fn moe_backward(
    h: &Tensor2,
    combined: &CombinedOutput,
    m: &mut MoEModel,
    grad_logits: &Tensor2,
    grad_weights_extra: Option<&Tensor2>,
    traces: Option<&[ExpertTrace]>,
) -> Result<Tensor2> {
    let (b, c_max) = combined.logits.shape();
    if grad_logits.shape() != (b, c_max) {
        return Err(Error::ShapeMismatch {
            op: "moe_backward",
            lhs: grad_logits.shape(),
            rhs: (b, c_max),
        });
    }
    // d(total)/d(weights)[r, e] = Σ_c grad_logits[r, c] · padded_e[r, c]
    let mut grad_weights = Tensor2::zeros(b, m.experts.len());
    for (e, y) in combined.per_expert_logits.iter().enumerate() {
        for r in 0..b {
            let dot: f64 = grad_logits.row(r)[..y.cols()]
                .iter()
                .zip(y.row(r))
                .map(|(&g, &v)| g * v)
                .sum();
            grad_weights.set(r, e, dot);
        }
    }
    if let Some(extra) = grad_weights_extra {
        grad_weights = grad_weights.add(extra)?;
    }
    let mut grad_h = gate_backward(h, &combined.gate_weights, &mut m.gating, &grad_weights)?;

    if let Some(traces) = traces {
        for (idx, (e, trace)) in m.experts.iter_mut().zip(traces).enumerate() {
            // slice off padding columns: they are constants with zero gradient
            let c = e.num_classes();
            let mut grad_y = Tensor2::zeros(b, c);
            for r in 0..b {
                let g = combined.gate_weights.get(r, idx);
                for (col, slot) in grad_y.row_mut(r).iter_mut().enumerate() {
                    *slot = g * grad_logits.get(r, col);
                }
            }
            grad_h = grad_h.add(&expert_backward(trace, e, &grad_y)?)?;
        }
    }
    Ok(grad_h)
}

/// Gate-weight mass accumulated per (expert, domain), the basis of the
/// utilization and specialization metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    /// (E × D): summed gate weight from examples of each domain.
    pub weight_mass: Tensor2,
    /// Examples seen per domain.
    pub example_count: Vec<usize>,
    pub domain_names: Vec<String>,
    /// (E × D): how often each expert won the argmax for each domain.
    pub argmax_count: Vec<Vec<u64>>,
}

impl RoutingStats {
    pub fn new(num_experts: usize, domain_names: Vec<String>) -> RoutingStats {
        let d = domain_names.len();
        RoutingStats {
            weight_mass: Tensor2::zeros(num_experts, d),
            example_count: vec![0; d],
            domain_names,
            argmax_count: vec![vec![0; d]; num_experts],
        }
    }

    pub fn num_experts(&self) -> usize {
        self.weight_mass.rows()
    }

    pub fn num_domains(&self) -> usize {
        self.weight_mass.cols()
    }

    /// Per-thread stats combine by addition.
    pub fn merge(&mut self, other: &RoutingStats) -> Result<()> {
        if self.weight_mass.shape() != other.weight_mass.shape() {
            return Err(Error::ShapeMismatch {
                op: "routing_stats_merge",
                lhs: self.weight_mass.shape(),
                rhs: other.weight_mass.shape(),
            });
        }
        self.weight_mass = self.weight_mass.add(&other.weight_mass)?;
        for (a, b) in self.example_count.iter_mut().zip(&other.example_count) {
            *a += b;
        }
        for (ar, br) in self.argmax_count.iter_mut().zip(&other.argmax_count) {
            for (a, b) in ar.iter_mut().zip(br) {
                *a += b;
            }
        }
        Ok(())
    }

    /// CSV with experts as rows and domains as columns (values: weight mass).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "expert")?;
        for name in &self.domain_names {
            write!(out, ",{name}")?;
        }
        writeln!(out)?;
        for e in 0..self.num_experts() {
            write!(out, "{e}")?;
            for d in 0..self.num_domains() {
                write!(out, ",{}", self.weight_mass.get(e, d))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// JSON summary: per-expert utilization and routing entropy.
    pub fn summary(&self) -> Result<RoutingSummary> {
        Ok(RoutingSummary {
            utilization: utilization(self)?,
            routing_entropy: (0..self.num_experts())
                .map(|e| routing_entropy(self, e))
                .collect::<Result<Vec<f64>>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingSummary {
    pub utilization: Vec<f64>,
    pub routing_entropy: Vec<f64>,
}

/// Adds one batch of gate weights to the per-domain mass tallies.
pub fn accumulate_routing(
    stats: &mut RoutingStats,
    weights: &Tensor2,
    domains: &[usize],
) -> Result<()> {
    if weights.cols() != stats.num_experts() {
        return Err(Error::ShapeMismatch {
            op: "accumulate_routing",
            lhs: weights.shape(),
            rhs: (weights.rows(), stats.num_experts()),
        });
    }
    if domains.len() != weights.rows() {
        return Err(Error::Validation(format!(
            "{} domain ids for {} rows",
            domains.len(),
            weights.rows()
        )));
    }
    for (r, &d) in domains.iter().enumerate() {
        if d >= stats.num_domains() {
            return Err(Error::Validation(format!(
                "unknown domain id {d} (have {})",
                stats.num_domains()
            )));
        }
        let row = weights.row(r).to_vec();
        let mut best = 0usize;
        for (e, &w) in row.iter().enumerate() {
            stats.weight_mass.row_mut(e)[d] += w;
            if w > row[best] {
                best = e;
            }
        }
        stats.argmax_count[best][d] += 1;
        stats.example_count[d] += 1;
    }
    Ok(())
}

/// Shannon entropy (natural log) of p(domain | expert); errors if the expert
/// has received no mass.
pub fn routing_entropy(stats: &RoutingStats, expert: usize) -> Result<f64> {
    if expert >= stats.num_experts() {
        return Err(Error::Validation(format!(
            "expert index {expert} out of range"
        )));
    }
    let row = stats.weight_mass.row(expert);
    let total: f64 = row.iter().sum();
    if total <= 0.0 {
        return Err(Error::UndefinedEntropy { expert });
    }
    let mut s = 0.0;
    for &m in row {
        let p = m / total;
        if p > 0.0 {
            s -= p * p.ln();
        }
    }
    Ok(s)
}

/// Each expert's share of total accumulated gate mass; sums to 1.
pub fn utilization(stats: &RoutingStats) -> Result<Vec<f64>> {
    let total: f64 = stats.weight_mass.data().iter().sum();
    if total <= 0.0 {
        return Err(Error::Validation("empty routing stats".into()));
    }
    Ok((0..stats.num_experts())
        .map(|e| stats.weight_mass.row(e).iter().sum::<f64>() / total)
        .collect())
}
