//! Optimizers, the three-phase training procedure (encoder pretrain, expert
//! fine-tune, gate train), evaluation metrics, and the finite-difference
//! gradient oracle.
//!
//! Phases are kept honest by the type system where possible: expert and gate
//! training take the encoder by shared reference, so the compiler enforces
//! that those phases cannot touch its weights. Representations are computed
//! once per phase and reused; during gate training the (frozen) expert
//! outputs are cached too, so each step only re-runs the gate.

use crate::data::{Corpus, Example};
use crate::encoder::{Encoder, TokenBatch, TokenizerConfig};
use crate::error::{Error, Result};
use crate::expert::{expert_backward, expert_forward, ExpertModule};
use crate::gating::{gate_backward, gate_forward, gate_loss, regularizer_grad, GateLossConfig, LossBreakdown};
use crate::moe::{accumulate_routing, combine_outputs, pad_outputs, MoEModel, RoutingStats};
use crate::ndmath::{cross_entropy_logits, Param, Tensor2};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

pub const DEFAULT_BATCH_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Momentum for SGD; beta1 for Adam.
    pub momentum: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            momentum: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            seed,
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum,
            beta2: 0.0,
            epsilon: 1e-8,
            weight_decay: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        for (name, v) in [("momentum", self.momentum), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} {v} outside [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Validation("bad epsilon or weight_decay".into()));
        }
        Ok(())
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First/second-moment state is positional: `step` must always be called
/// with the same parameter list in the same order.
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Optimizer> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            t: 0,
            slots: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Slot {
                    m: vec![0.0; p.value.len()],
                    v: vec![0.0; p.value.len()],
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::Validation(format!(
                "optimizer built for {} parameters, stepped with {}",
                self.slots.len(),
                params.len()
            )));
        }
        self.t += 1;
        let lr = self.cfg.learning_rate;
        for (p, slot) in params.iter_mut().zip(&mut self.slots) {
            if slot.m.len() != p.value.len() {
                return Err(Error::Validation(
                    "parameter size changed between optimizer steps".into(),
                ));
            }
            let grads = p.grad.data().to_vec();
            let values = p.value.data_mut();
            match self.cfg.kind {
                OptimizerKind::SgdMomentum => {
                    for i in 0..values.len() {
                        let g = grads[i] + self.cfg.weight_decay * values[i];
                        slot.m[i] = self.cfg.momentum * slot.m[i] + g;
                        values[i] -= lr * slot.m[i];
                    }
                }
                OptimizerKind::Adam => {
                    let b1 = self.cfg.momentum;
                    let b2 = self.cfg.beta2;
                    let bias1 = 1.0 - b1.powi(self.t as i32);
                    let bias2 = 1.0 - b2.powi(self.t as i32);
                    for i in 0..values.len() {
                        let g = grads[i] + self.cfg.weight_decay * values[i];
                        slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                        slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                        let m_hat = slot.m[i] / bias1;
                        let v_hat = slot.v[i] / bias2;
                        values[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Central-difference gradient verification.
///
/// `backward` must populate analytic gradients on a fresh clone; `loss`
/// evaluates the scalar objective; `params` exposes the checked parameters
/// in a stable order. Returns the maximum relative error
/// |g_a − g_n| / max(|g_a|, |g_n|, 1e-8) over every coordinate.
pub fn grad_check<M, B, L, P>(model: &M, backward: B, loss: L, params: P, step: f64) -> Result<f64>
where
    M: Clone,
    B: Fn(&mut M) -> Result<()>,
    L: Fn(&M) -> Result<f64>,
    P: Fn(&mut M) -> Vec<&mut Param>,
{
    let mut work = model.clone();
    backward(&mut work)?;
    let analytic: Vec<Vec<f64>> = params(&mut work)
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();
    let mut max_rel: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for ci in 0..grads.len() {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut probe = model.clone();
                {
                    let mut ps = params(&mut probe);
                    ps[pi].value.data_mut()[ci] += delta;
                }
                let l = loss(&probe)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite("finite-difference probe loss"));
                }
                Ok(l)
            };
            let numeric = (eval_at(step)? - eval_at(-step)?) / (2.0 * step);
            let a = grads[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Plain linear classifier on the pooled representation; used as the
/// pretraining head and as the no-adapter baseline.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub w: Param,
    pub b: Param,
}

impl LinearHead {
    pub fn init(hidden_dim: usize, num_classes: usize, seed: u64) -> LinearHead {
        let bound = (6.0 / (hidden_dim + num_classes) as f64).sqrt();
        let mut rng = StdRng::seed_from_u64(seed);
        LinearHead {
            w: Param::new(Tensor2::from_vec(
                hidden_dim,
                num_classes,
                (0..hidden_dim * num_classes)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect(),
            )),
            b: Param::new(Tensor2::zeros(1, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w.value.cols()
    }

    pub fn forward(&self, h: &Tensor2) -> Result<Tensor2> {
        h.matmul(&self.w.value)?.add_row(&self.b.value)
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. `h`.
    pub fn backward(&mut self, h: &Tensor2, grad_logits: &Tensor2) -> Result<Tensor2> {
        self.w.accumulate(&h.matmul_at(grad_logits)?)?;
        self.b.accumulate(&grad_logits.col_sums())?;
        grad_logits.matmul_bt(&self.w.value)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn zero_grad(&mut self) {
        self.w.zero_grad();
        self.b.zero_grad();
    }
}

// ---------------------------------------------------------------------------
// metrics

pub fn argmax_rows(logits: &Tensor2) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / preds.len() as f64
}

/// Unweighted mean of per-class F1, with 0/0 := 0 (classes absent from both
/// predictions and labels contribute zero).
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    if num_classes == 0 {
        return 0.0;
    }
    let mut f1_sum = 0.0;
    for c in 0..num_classes {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == c && l == c)
            .count() as f64;
        let fp = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == c && l != c)
            .count() as f64;
        let fn_ = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p != c && l == c)
            .count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
    }
    f1_sum / num_classes as f64
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub wall_time_s: f64,
    pub routing: Option<RoutingStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss.total)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "epoch,total,task,mean_entropy,balance_kl,accuracy,macro_f1,wall_time_s"
        )?;
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch,
                e.loss.total,
                e.loss.task,
                e.loss.mean_entropy,
                e.loss.balance_kl,
                e.accuracy,
                e.macro_f1,
                e.wall_time_s
            )?;
        }
        Ok(())
    }
}

fn task_only(task: f64) -> LossBreakdown {
    LossBreakdown {
        task,
        mean_entropy: 0.0,
        balance_kl: 0.0,
        total: task,
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

fn tokenize_examples(
    examples: &[Example],
    tok: &TokenizerConfig,
) -> Result<(TokenBatch, Vec<usize>, Vec<usize>)> {
    if examples.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    let batch = TokenBatch::from_texts(examples.iter().map(|e| e.text.as_str()), tok)?;
    let labels = examples.iter().map(|e| e.label).collect();
    let domains = examples.iter().map(|e| e.domain).collect();
    Ok((batch, labels, domains))
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    for (row, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                row,
                label: l,
                num_classes,
            });
        }
    }
    Ok(())
}

fn minibatches(n: usize, batch_size: usize, rng: &mut StdRng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Offset of each domain's label block in the flattened (domain, label)
/// product space.
pub fn product_label_offsets(classes_per_domain: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(classes_per_domain.len());
    let mut acc = 0;
    for &c in classes_per_domain {
        offsets.push(acc);
        acc += c;
    }
    offsets
}

// ---------------------------------------------------------------------------
// phase 1: encoder pretraining

/// Trains the encoder plus a throwaway head on the flattened
/// (domain, label) product task, so the pooled representation separates both
/// domains and classes before it is frozen. The head must be sized for the
/// product space (sum of classes_per_domain).
pub fn pretrain_encoder(
    corpus: &Corpus,
    tok: &TokenizerConfig,
    encoder: &mut Encoder,
    head: &mut LinearHead,
    opt: &OptimizerConfig,
    epochs: usize,
    batch_size: usize,
) -> Result<TrainReport> {
    let (batch, labels, domains) = tokenize_examples(&corpus.examples, tok)?;
    let offsets = product_label_offsets(&corpus.classes_per_domain);
    let product_classes: usize = corpus.classes_per_domain.iter().sum();
    if head.num_classes() != product_classes {
        return Err(Error::Validation(format!(
            "pretraining head has {} classes; the (domain, label) product needs {}",
            head.num_classes(),
            product_classes
        )));
    }
    let product: Vec<usize> = labels
        .iter()
        .zip(&domains)
        .map(|(&l, &d)| offsets[d] + l)
        .collect();
    check_labels(&product, product_classes)?;

    let mut optimizer = Optimizer::new(*opt)?;
    let mut rng = StdRng::seed_from_u64(opt.seed);
    let mut report = TrainReport::default();
    for epoch in 1..=epochs {
        let started = Instant::now();
        for idx in minibatches(batch.rows(), batch_size, &mut rng) {
            let sub = batch.select_rows(&idx);
            let sub_labels: Vec<usize> = idx.iter().map(|&i| product[i]).collect();
            encoder.zero_grad();
            head.zero_grad();
            let (h, trace) = encoder.encode_with_trace(&sub)?;
            let logits = head.forward(&h)?;
            let (_, grad_logits) = cross_entropy_logits(&logits, &sub_labels)?;
            let grad_h = head.backward(&h, &grad_logits)?;
            encoder.encode_backward(&sub, &trace, &grad_h)?;
            let mut params = encoder.params_mut();
            params.extend(head.params_mut());
            optimizer.step(&mut params)?;
        }
        // post-epoch metrics over the whole set
        let h = encoder.encode(&batch)?;
        let logits = head.forward(&h)?;
        let (task, _) = cross_entropy_logits(&logits, &product)?;
        let preds = argmax_rows(&logits);
        report.epochs.push(EpochStats {
            epoch,
            loss: task_only(task),
            accuracy: accuracy(&preds, &product),
            macro_f1: macro_f1(&preds, &product, product_classes),
            wall_time_s: started.elapsed().as_secs_f64(),
            routing: None,
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// phase 2: expert training (encoder frozen)

/// Fine-tunes one expert (adapter + head) on its domain slice. The encoder
/// is frozen — representations are computed once up front.
pub fn train_expert(
    examples: &[Example],
    tok: &TokenizerConfig,
    expert: &mut ExpertModule,
    encoder: &Encoder,
    opt: &OptimizerConfig,
    epochs: usize,
    batch_size: usize,
) -> Result<TrainReport> {
    let (batch, labels, _) = tokenize_examples(examples, tok)?;
    check_labels(&labels, expert.num_classes())?;
    let h_all = encoder.encode(&batch)?;

    let mut optimizer = Optimizer::new(*opt)?;
    let mut rng = StdRng::seed_from_u64(opt.seed);
    let mut report = TrainReport::default();
    for epoch in 1..=epochs {
        let started = Instant::now();
        for idx in minibatches(h_all.rows(), batch_size, &mut rng) {
            let h = h_all.select_rows(&idx);
            let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            expert.zero_grad();
            let trace = expert_forward(&h, expert)?;
            let (_, grad_y) = cross_entropy_logits(&trace.y, &sub_labels)?;
            expert_backward(&trace, expert, &grad_y)?;
            optimizer.step(&mut expert.params_mut())?;
        }
        let trace = expert_forward(&h_all, expert)?;
        let (task, _) = cross_entropy_logits(&trace.y, &labels)?;
        let preds = argmax_rows(&trace.y);
        report.epochs.push(EpochStats {
            epoch,
            loss: task_only(task),
            accuracy: accuracy(&preds, &labels),
            macro_f1: macro_f1(&preds, &labels, expert.num_classes()),
            wall_time_s: started.elapsed().as_secs_f64(),
            routing: None,
        });
    }
    Ok(report)
}

/// Trains a plain linear head on the frozen encoder (the no-adapter
/// baseline).
pub fn train_head(
    examples: &[Example],
    tok: &TokenizerConfig,
    head: &mut LinearHead,
    encoder: &Encoder,
    opt: &OptimizerConfig,
    epochs: usize,
    batch_size: usize,
) -> Result<TrainReport> {
    let (batch, labels, _) = tokenize_examples(examples, tok)?;
    check_labels(&labels, head.num_classes())?;
    let h_all = encoder.encode(&batch)?;

    let mut optimizer = Optimizer::new(*opt)?;
    let mut rng = StdRng::seed_from_u64(opt.seed);
    let mut report = TrainReport::default();
    for epoch in 1..=epochs {
        let started = Instant::now();
        for idx in minibatches(h_all.rows(), batch_size, &mut rng) {
            let h = h_all.select_rows(&idx);
            let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            head.zero_grad();
            let logits = head.forward(&h)?;
            let (_, grad_logits) = cross_entropy_logits(&logits, &sub_labels)?;
            head.backward(&h, &grad_logits)?;
            optimizer.step(&mut head.params_mut())?;
        }
        let logits = head.forward(&h_all)?;
        let (task, _) = cross_entropy_logits(&logits, &labels)?;
        let preds = argmax_rows(&logits);
        report.epochs.push(EpochStats {
            epoch,
            loss: task_only(task),
            accuracy: accuracy(&preds, &labels),
            macro_f1: macro_f1(&preds, &labels, head.num_classes()),
            wall_time_s: started.elapsed().as_secs_f64(),
            routing: None,
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// phase 3: gate training (encoder and experts frozen)

/// Trains the gating network on the mixed-domain task under the
/// entropy-regularized objective. Encoder and experts are frozen; their
/// padded outputs are computed once and reused every step. Per-epoch routing
/// stats
/// are recorded for specialization tracking.
pub fn train_gating(
    corpus: &Corpus,
    tok: &TokenizerConfig,
    moe: &mut MoEModel,
    cfg: &GateLossConfig,
    opt: &OptimizerConfig,
    epochs: usize,
    batch_size: usize,
) -> Result<TrainReport> {
    cfg.validate()?;
    let (batch, labels, domains) = tokenize_examples(&corpus.examples, tok)?;
    check_labels(&labels, moe.c_max())?;
    let h_all = moe.encoder.encode(&batch)?;
    let padded_all: Vec<Tensor2> = {
        let outputs: Vec<Tensor2> = moe
            .experts
            .iter()
            .map(|e| expert_forward(&h_all, e).map(|t| t.y))
            .collect::<Result<_>>()?;
        pad_outputs(&outputs)?
    };

    let mut optimizer = Optimizer::new(*opt)?;
    let mut rng = StdRng::seed_from_u64(opt.seed);
    let mut report = TrainReport::default();
    for epoch in 1..=epochs {
        let started = Instant::now();
        for idx in minibatches(h_all.rows(), batch_size, &mut rng) {
            let h = h_all.select_rows(&idx);
            let padded: Vec<Tensor2> = padded_all.iter().map(|p| p.select_rows(&idx)).collect();
            let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            moe.gating.zero_grad();
            let weights = gate_forward(&h, &moe.gating)?;
            let logits = combine_outputs(&weights, &padded)?;
            let (_, grad_logits) = cross_entropy_logits(&logits, &sub_labels)?;
            // d(task)/d(weights) + d(regularizers)/d(weights)
            let mut grad_weights = Tensor2::zeros(weights.rows(), weights.cols());
            for (e, p) in padded.iter().enumerate() {
                for r in 0..weights.rows() {
                    let dot: f64 = grad_logits
                        .row(r)
                        .iter()
                        .zip(p.row(r))
                        .map(|(&g, &v)| g * v)
                        .sum();
                    grad_weights.set(r, e, dot);
                }
            }
            grad_weights = grad_weights.add(&regularizer_grad(&weights, cfg)?)?;
            gate_backward(&h, &weights, &mut moe.gating, &grad_weights)?;
            optimizer.step(&mut moe.gating.params_mut())?;
        }
        // post-epoch objective and routing snapshot over the whole set
        let weights = gate_forward(&h_all, &moe.gating)?;
        let logits = combine_outputs(&weights, &padded_all)?;
        let (task, _) = cross_entropy_logits(&logits, &labels)?;
        let breakdown = gate_loss(task, &weights, cfg)?;
        let preds = argmax_rows(&logits);
        let mut routing = RoutingStats::new(moe.num_experts(), corpus.domain_names.clone());
        accumulate_routing(&mut routing, &weights, &domains)?;
        report.epochs.push(EpochStats {
            epoch,
            loss: breakdown,
            accuracy: accuracy(&preds, &labels),
            macro_f1: macro_f1(&preds, &labels, moe.c_max()),
            wall_time_s: started.elapsed().as_secs_f64(),
            routing: Some(routing),
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// evaluation

/// Metrics for one domain's slice of the corpus. The F1 here is averaged
/// over that domain's own label set, so a domain with fewer classes than the
/// widest expert is not dragged down by labels it cannot contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: String,
    pub examples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Whole-corpus metrics. The headline `macro_f1` averages over the full
/// (padded) class universe, which keeps models of different widths
/// comparable on the same mixed corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_domain: Vec<DomainMetrics>,
    pub routing: Option<RoutingStats>,
}

fn summarize(
    preds: &[usize],
    labels: &[usize],
    domains: &[usize],
    domain_names: &[String],
    classes_per_domain: &[usize],
    num_classes: usize,
    routing: Option<RoutingStats>,
) -> EvalSummary {
    let mut per_domain = Vec::with_capacity(domain_names.len());
    for (d, name) in domain_names.iter().enumerate() {
        let idx: Vec<usize> = domains
            .iter()
            .enumerate()
            .filter(|&(_, &dom)| dom == d)
            .map(|(i, _)| i)
            .collect();
        let dp: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        let dl: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        per_domain.push(DomainMetrics {
            domain: name.clone(),
            examples: idx.len(),
            accuracy: accuracy(&dp, &dl),
            macro_f1: macro_f1(&dp, &dl, classes_per_domain[d]),
        });
    }
    EvalSummary {
        accuracy: accuracy(preds, labels),
        macro_f1: macro_f1(preds, labels, num_classes),
        per_domain,
        routing,
    }
}

/// Evaluates the assembled model on a corpus; includes routing stats.
pub fn evaluate_moe(corpus: &Corpus, tok: &TokenizerConfig, moe: &MoEModel) -> Result<EvalSummary> {
    let (batch, labels, domains) = tokenize_examples(&corpus.examples, tok)?;
    let h = moe.encoder.encode(&batch)?;
    let weights = gate_forward(&h, &moe.gating)?;
    let outputs: Vec<Tensor2> = moe
        .experts
        .iter()
        .map(|e| expert_forward(&h, e).map(|t| t.y))
        .collect::<Result<_>>()?;
    let logits = combine_outputs(&weights, &pad_outputs(&outputs)?)?;
    let preds = argmax_rows(&logits);
    let mut routing = RoutingStats::new(moe.num_experts(), corpus.domain_names.clone());
    accumulate_routing(&mut routing, &weights, &domains)?;
    let num_classes = moe.c_max().max(labels.iter().map(|&l| l + 1).max().unwrap_or(0));
    Ok(summarize(
        &preds,
        &labels,
        &domains,
        &corpus.domain_names,
        &corpus.classes_per_domain,
        num_classes,
        Some(routing),
    ))
}

/// Evaluates one expert on its own (labels it cannot predict simply score
/// zero F1, so narrow experts can be scored on mixed corpora).
pub fn evaluate_expert(
    corpus: &Corpus,
    tok: &TokenizerConfig,
    encoder: &Encoder,
    expert: &ExpertModule,
) -> Result<EvalSummary> {
    let (batch, labels, domains) = tokenize_examples(&corpus.examples, tok)?;
    let h = encoder.encode(&batch)?;
    let trace = expert_forward(&h, expert)?;
    let preds = argmax_rows(&trace.y);
    let num_classes = expert
        .num_classes()
        .max(labels.iter().map(|&l| l + 1).max().unwrap_or(0));
    Ok(summarize(
        &preds,
        &labels,
        &domains,
        &corpus.domain_names,
        &corpus.classes_per_domain,
        num_classes,
        None,
    ))
}

/// Evaluates a plain linear head on the frozen encoder.
pub fn evaluate_head(
    corpus: &Corpus,
    tok: &TokenizerConfig,
    encoder: &Encoder,
    head: &LinearHead,
) -> Result<EvalSummary> {
    let (batch, labels, domains) = tokenize_examples(&corpus.examples, tok)?;
    let h = encoder.encode(&batch)?;
    let logits = head.forward(&h)?;
    let preds = argmax_rows(&logits);
    let num_classes = head
        .num_classes()
        .max(labels.iter().map(|&l| l + 1).max().unwrap_or(0));
    Ok(summarize(
        &preds,
        &labels,
        &domains,
        &corpus.domain_names,
        &corpus.classes_per_domain,
        num_classes,
        None,
    ))
}
