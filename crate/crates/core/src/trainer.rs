//! Training loops: plain language-model pre-training of the toy model,
//! PruLong gate learning, and DuoAttention-style reconstruction training.
//!
//! PruLong minimizes next-token NLL of the gated model plus the Lagrangian
//! sparsity penalty over `log_alpha` (and optionally the weights) while
//! maximizing over the two multipliers. Both sides use Adam; ascent is
//! implemented by feeding Adam the negated multiplier gradients.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Corpus;
use crate::error::{config_err, contract_err};
use crate::gates::{
    expected_sparsity, expected_sparsity_node, lagrangian_penalty_node, sample_gates, target_at, GateParams,
    SparsitySchedule,
};
use crate::model::{bind, forward_sequence, mode_nodes, HeadModes, Model, ModeNode, StreamingSpec};
use crate::tensor::{Array, NodeId, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossMode {
    PlainLm,
    Prulong,
    Duo,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub steps: usize,
    /// Tokens per step; split into sequences of `seq_len`.
    pub batch_tokens: usize,
    pub seq_len: usize,
    pub lr_log_alpha: f64,
    pub lr_lambda: f64,
    /// Zero keeps the model weights frozen.
    pub lr_weights: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_fraction: f64,
    pub final_fraction: f64,
    pub sparsity: SparsitySchedule,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Global-norm clip on descent gradients; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// L1 weight of the Duo objective.
    pub l1_coeff: f64,
}

impl TrainConfig {
    pub fn new(loss_mode: LossMode, steps: usize, seq_len: usize) -> Self {
        Self {
            steps,
            batch_tokens: seq_len,
            seq_len,
            lr_log_alpha: 1.0,
            lr_lambda: 1.0,
            lr_weights: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            warmup_fraction: 0.1,
            final_fraction: 0.01,
            sparsity: SparsitySchedule {
                warmup_steps: 0,
                final_target: 0.0,
                total_steps: steps,
            },
            seed: 0,
            loss_mode,
            grad_clip: Some(1.0),
            l1_coeff: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.batch_tokens < self.seq_len {
            return Err(config_err!("batch of {} tokens holds no sequence of {}", self.batch_tokens, self.seq_len));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("adam betas must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.final_fraction) {
            return Err(config_err!("schedule fractions must lie in [0, 1]"));
        }
        if self.lr_weights < 0.0 || self.lr_log_alpha < 0.0 || self.lr_lambda < 0.0 {
            return Err(config_err!("learning rates must be non-negative"));
        }
        if self.loss_mode == LossMode::PlainLm && self.steps > 0 && self.lr_weights == 0.0 {
            return Err(config_err!("language-model training needs lr_weights > 0"));
        }
        self.sparsity.validate()
    }

    pub fn sequences_per_step(&self) -> usize {
        (self.batch_tokens / self.seq_len).max(1)
    }

    pub fn frozen(&self) -> bool {
        self.lr_weights == 0.0
    }
}

/// Learning-rate multiplier: linear warm-up from 0 to 1, then linear decay
/// to `final_fraction` at the last step.
pub fn lr_at(config: &TrainConfig, step: usize) -> f64 {
    let total = config.steps.max(1);
    let warm = libm::round(config.warmup_fraction * total as f64) as usize;
    if step < warm {
        return step as f64 / warm as f64;
    }
    if total == warm {
        return 1.0;
    }
    let frac = (step.min(total) - warm) as f64 / (total - warm) as f64;
    1.0 - (1.0 - config.final_fraction) * frac
}

/// Mean next-token NLL of `logits` (`[positions, vocab]`) against targets.
pub fn next_token_nll(logits: &Array, targets: &[u32]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant_ref(logits);
    let loss = tape.cross_entropy_mean(l, targets)?;
    tape.value(loss).item()
}

/// Adam with per-parameter moments keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        Self::new(config.beta1, config.beta2, config.adam_eps)
    }

    /// Advances the shared step counter; call once per optimizer step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64) {
        let (m, v) = self
            .moments
            .entry(String::from(name))
            .or_insert_with(|| (alloc::vec![0.0; param.len()], alloc::vec![0.0; param.len()]));
        let t = self.t.max(1) as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            param[i] -= lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + self.eps);
        }
    }
}

/// Scales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Array], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum());
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Per-step training record.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepMetrics {
    pub step: usize,
    pub nll: f64,
    pub expected_sparsity: f64,
    pub target: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// A batch of training sequences, each `seq_len + 1` tokens long.
pub type Batch = Vec<Vec<u32>>;

pub fn sample_batch(corpus: &Corpus, config: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    (0..config.sequences_per_step())
        .map(|_| corpus.sample(config.seq_len, rng))
        .collect()
}

fn split(seq: &[u32]) -> Result<(&[u32], &[u32])> {
    if seq.len() < 2 {
        return Err(contract_err!("training sequence needs at least two tokens"));
    }
    Ok((&seq[..seq.len() - 1], &seq[1..]))
}

/// Adds `NLL(sequence) / batch` for every sequence to one scalar node.
fn batch_nll(
    tape: &mut Tape<'_>,
    model: &Model,
    bound: &crate::model::Bound,
    batch: &Batch,
    modes: &[ModeNode],
    streaming: &StreamingSpec,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(contract_err!("empty batch"));
    }
    let mut total: Option<NodeId> = None;
    for seq in batch {
        let (inputs, targets) = split(seq)?;
        let out = forward_sequence(tape, &model.config, bound, inputs, modes, streaming)?;
        let nll = tape.cross_entropy_mean(out.logits, targets)?;
        total = Some(match total {
            None => nll,
            Some(t) => tape.add(t, nll)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / batch.len() as f64))
}

/// Named weight gradients of a bound model.
fn weight_grads(bound: &crate::model::Bound, grads: &mut crate::tensor::Gradients) -> Vec<(String, Array)> {
    bound
        .named
        .iter()
        .filter_map(|(name, id)| grads.take(*id).map(|g| (name.clone(), g)))
        .collect()
}

fn apply_weight_updates(model: &mut Model, adam: &mut Adam, grads: &[(String, Array)], lr: f64) {
    for (name, g) in grads {
        if let Some(w) = model.weights.get_mut(name) {
            adam.update(name, w.data_mut(), g.data(), lr);
        }
    }
}

/// Optimizer state carried across PruLong steps.
#[derive(Debug, Clone)]
pub struct PruLongState {
    pub descent: Adam,
    pub ascent: Adam,
    pub weights: Adam,
}

impl PruLongState {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            descent: Adam::from_config(config),
            ascent: Adam::from_config(config),
            weights: Adam::from_config(config),
        }
    }
}

/// One PruLong update at `step` (0-based).
///
/// Samples one set of gates, runs the gated model on the batch, and takes a
/// descent step on `log_alpha` (and the weights when unfrozen) and an ascent
/// step on both multipliers.
#[allow(clippy::too_many_arguments)]
pub fn prulong_step(
    model: &mut Model,
    gates: &mut GateParams,
    state: &mut PruLongState,
    batch: &Batch,
    config: &TrainConfig,
    streaming: &StreamingSpec,
    step: usize,
    rng: &mut impl Rng,
) -> Result<StepMetrics> {
    gates.validate()?;
    let cfg = model.config.clone();
    if gates.num_layers() != cfg.num_layers || gates.num_heads() != cfg.num_query_heads {
        return Err(config_err!("gate shape does not match the model"));
    }
    let target = target_at(&config.sparsity, step);
    gates.target = target;
    let lr = lr_at(config, step + 1);
    let trainable = !config.frozen();

    let (nll, mut la_grad, l1_grad, l2_grad, mut wgrads) = {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, model, trainable)?;
        let la = tape.param(gates.log_alpha.clone());
        let l1 = tape.param(Array::scalar(gates.lambda1));
        let l2 = tape.param(Array::scalar(gates.lambda2));
        let z = sample_gates(&mut tape, la, gates, rng)?;
        let modes = gated_modes(&mut tape, z, cfg.num_layers * cfg.num_query_heads)?;
        let nll = batch_nll(&mut tape, model, &bound, batch, &modes, streaming)?;
        let s = expected_sparsity_node(&mut tape, la, gates)?;
        let penalty = lagrangian_penalty_node(&mut tape, s, target, l1, l2)?;
        let loss = tape.add(nll, penalty)?;
        let nll_value = tape.value(nll).item()?;
        if !nll_value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: alloc::format!("nll {nll_value}"),
            });
        }
        let mut grads = tape.backward(loss)?;
        let take = |g: &mut crate::tensor::Gradients, id| g.take(id).ok_or_else(|| contract_err!("missing gradient"));
        let la_grad = take(&mut grads, la)?;
        let l1_grad = take(&mut grads, l1)?.item()?;
        let l2_grad = take(&mut grads, l2)?.item()?;
        let wgrads = if trainable {
            weight_grads(&bound, &mut grads)
        } else {
            Vec::new()
        };
        (nll_value, la_grad, l1_grad, l2_grad, wgrads)
    };

    if let Some(max) = config.grad_clip {
        let mut all: Vec<&mut Array> = Vec::with_capacity(1 + wgrads.len());
        all.push(&mut la_grad);
        all.extend(wgrads.iter_mut().map(|(_, g)| g));
        clip_global_norm(&mut all, max);
    }

    state.descent.tick();
    state
        .descent
        .update("log_alpha", gates.log_alpha.data_mut(), la_grad.data(), config.lr_log_alpha * lr);
    state.ascent.tick();
    let mut lambdas = [gates.lambda1, gates.lambda2];
    state
        .ascent
        .update("lambda", &mut lambdas, &[-l1_grad, -l2_grad], config.lr_lambda * lr);
    gates.lambda1 = lambdas[0];
    gates.lambda2 = lambdas[1];
    if trainable {
        state.weights.tick();
        apply_weight_updates(model, &mut state.weights, &wgrads, config.lr_weights * lr);
    }
    Ok(StepMetrics {
        step,
        nll,
        expected_sparsity: expected_sparsity(gates),
        target,
        lambda1: gates.lambda1,
        lambda2: gates.lambda2,
    })
}

/// Splits an `[L, H]` gate node into per-head scalar mode nodes.
fn gated_modes(tape: &mut Tape<'_>, z: NodeId, n: usize) -> Result<Vec<ModeNode>> {
    let flat = tape.reshape(z, &[n, 1])?;
    (0..n)
        .map(|i| Ok(ModeNode::Gated(tape.gather_rows(flat, &[i])?)))
        .collect()
}

/// Full PruLong run: `config.steps` steps on batches from `corpus`.
///
/// Batches and gate noise come from two independent streams of the seed.
pub fn train_prulong(
    model: &mut Model,
    gates: &mut GateParams,
    corpus: &Corpus,
    config: &TrainConfig,
    streaming: &StreamingSpec,
) -> Result<Vec<StepMetrics>> {
    config.validate()?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut gate_rng = ChaCha8Rng::seed_from_u64(config.seed);
    gate_rng.set_stream(1);
    let mut state = PruLongState::new(config);
    let mut metrics = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sample_batch(corpus, config, &mut data_rng)?;
        metrics.push(prulong_step(
            model,
            gates,
            &mut state,
            &batch,
            config,
            streaming,
            step,
            &mut gate_rng,
        )?);
    }
    Ok(metrics)
}

/// Duo objective on one batch: mean squared error between the final
/// hidden states of the all-full model and the `z`-interpolated model,
/// plus `l1_coeff * sum(z)`. Returns `(loss, gradient wrt z)`.
pub fn duo_loss(
    model: &Model,
    z: &Array,
    batch: &Batch,
    l1_coeff: f64,
    streaming: &StreamingSpec,
) -> Result<(f64, Array)> {
    let cfg = &model.config;
    let n = cfg.num_layers * cfg.num_query_heads;
    if z.numel() != n {
        return Err(config_err!("z holds {} values for {n} heads", z.numel()));
    }
    if batch.is_empty() {
        return Err(contract_err!("empty batch"));
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, model, false)?;
    let zn = tape.param(z.clone());
    let modes = gated_modes(&mut tape, zn, n)?;
    let full = mode_nodes(&HeadModes::all_full(cfg), &mut tape);
    let mut total: Option<NodeId> = None;
    for seq in batch {
        let (inputs, _) = split(seq)?;
        let reference = forward_sequence(&mut tape, cfg, &bound, inputs, &full, streaming)?;
        let reference = tape.value(reference.hidden).clone();
        let reference = tape.constant(reference);
        let gated = forward_sequence(&mut tape, cfg, &bound, inputs, &modes, streaming)?;
        let diff = tape.sub(gated.hidden, reference)?;
        let sq = tape.mul(diff, diff)?;
        let mse = tape.mean(sq);
        total = Some(match total {
            None => mse,
            Some(t) => tape.add(t, mse)?,
        });
    }
    let recon = tape.scale(total.expect("non-empty"), 1.0 / batch.len() as f64);
    let zsum = tape.sum(zn);
    let l1 = tape.scale(zsum, l1_coeff);
    let loss = tape.add(recon, l1)?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let g = grads.take(zn).ok_or_else(|| contract_err!("missing gradient"))?;
    Ok((value, g))
}

/// One Duo update of the continuous gates `z`, clamped to `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn duo_step(
    model: &Model,
    z: &mut Array,
    adam: &mut Adam,
    batch: &Batch,
    config: &TrainConfig,
    streaming: &StreamingSpec,
    step: usize,
) -> Result<f64> {
    let (loss, mut grad) = duo_loss(model, z, batch, config.l1_coeff, streaming)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: alloc::format!("duo loss {loss}"),
        });
    }
    if let Some(max) = config.grad_clip {
        clip_global_norm(&mut [&mut grad], max);
    }
    adam.tick();
    adam.update("z", z.data_mut(), grad.data(), config.lr_log_alpha * lr_at(config, step + 1));
    z.data_mut().iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    Ok(loss)
}

/// Full Duo run from all-ones gates. Returns the final `z` (`[L, H]`) and
/// the loss per step.
pub fn train_duo(model: &Model, corpus: &Corpus, config: &TrainConfig, streaming: &StreamingSpec) -> Result<(Array, Vec<f64>)> {
    config.validate()?;
    let cfg = &model.config;
    let mut z = Array::full(&[cfg.num_layers, cfg.num_query_heads], 1.0);
    let mut adam = Adam::from_config(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sample_batch(corpus, config, &mut rng)?;
        losses.push(duo_step(model, &mut z, &mut adam, &batch, config, streaming, step)?);
    }
    Ok((z, losses))
}

/// Plain language-model step on all weights. Returns the batch NLL before
/// the update.
pub fn lm_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    config: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let streaming = StreamingSpec::default();
    let (nll, mut grads) = {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, model, true)?;
        let modes = mode_nodes(&HeadModes::all_full(&model.config), &mut tape);
        let nll = batch_nll(&mut tape, model, &bound, batch, &modes, &streaming)?;
        let value = tape.value(nll).item()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: alloc::format!("nll {value}"),
            });
        }
        let mut g = tape.backward(nll)?;
        (value, weight_grads(&bound, &mut g))
    };
    if let Some(max) = config.grad_clip {
        let mut all: Vec<&mut Array> = grads.iter_mut().map(|(_, g)| g).collect();
        clip_global_norm(&mut all, max);
    }
    adam.tick();
    apply_weight_updates(model, adam, &grads, config.lr_weights * lr_at(config, step + 1));
    if model.weights.iter().any(|(_, w)| !w.is_finite()) {
        return Err(Error::Divergence {
            step,
            detail: "non-finite weights".into(),
        });
    }
    Ok(nll)
}

/// Pre-trains `model` on `corpus`; zero steps leave it untouched.
pub fn pretrain_lm(model: &mut Model, corpus: &Corpus, config: &TrainConfig) -> Result<Vec<f64>> {
    if config.loss_mode != LossMode::PlainLm {
        return Err(config_err!("pre-training needs loss mode plain_lm"));
    }
    config.validate()?;
    let mut adam = Adam::from_config(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sample_batch(corpus, config, &mut rng)?;
        losses.push(lm_step(model, &mut adam, &batch, config, step)?);
    }
    Ok(losses)
}

/// Mean NLL of `model` (all heads full) over `batch`.
pub fn eval_nll(model: &Model, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, model, false)?;
    let modes = mode_nodes(&HeadModes::all_full(&model.config), &mut tape);
    let nll = batch_nll(&mut tape, model, &bound, batch, &modes, &StreamingSpec::default())?;
    tape.value(nll).item()
}

/// What a finite-difference check of the training loss perturbs.
#[derive(Debug, Clone)]
pub enum GradTarget<'a> {
    /// One named weight tensor, all heads full.
    Weight(&'a str),
    /// The gate `log_alpha`, with gate noise drawn from `seed`, loss
    /// including the Lagrangian penalty.
    LogAlpha { gates: &'a GateParams, seed: u64 },
}

/// Largest relative error between autodiff and central differences of the
/// sequence NLL with respect to `target`.
pub fn nll_gradient_check(
    model: &Model,
    target: GradTarget<'_>,
    seq: &[u32],
    streaming: &StreamingSpec,
    step: f64,
) -> Result<f64> {
    let (inputs, targets) = split(seq)?;
    let cfg = &model.config;
    match target {
        GradTarget::Weight(name) => {
            let point = model.weights.get(name)?.clone();
            crate::tensor::finite_diff_check(
                |tape, leaf| {
                    let bound = crate::model::bind_with(tape, model, false, Some((name, leaf)))?;
                    let modes = mode_nodes(&HeadModes::all_full(cfg), tape);
                    let out = forward_sequence(tape, cfg, &bound, inputs, &modes, streaming)?;
                    tape.cross_entropy_mean(out.logits, targets)
                },
                &point,
                step,
            )
        }
        GradTarget::LogAlpha { gates, seed } => crate::tensor::finite_diff_check(
            |tape, la| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let bound = bind(tape, model, false)?;
                let z = sample_gates(tape, la, gates, &mut rng)?;
                let modes = gated_modes(tape, z, cfg.num_layers * cfg.num_query_heads)?;
                let out = forward_sequence(tape, cfg, &bound, inputs, &modes, streaming)?;
                let nll = tape.cross_entropy_mean(out.logits, targets)?;
                let s = expected_sparsity_node(tape, la, gates)?;
                let l1 = tape.constant(Array::scalar(gates.lambda1));
                let l2 = tape.constant(Array::scalar(gates.lambda2));
                let pen = lagrangian_penalty_node(tape, s, gates.target, l1, l2)?;
                tape.add(nll, pen)
            },
            &gates.log_alpha,
            step,
        ),
    }
}
