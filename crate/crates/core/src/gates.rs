//! Hard-concrete gates over (layer, query head) pairs.
//!
//! Each gate has a trainable `log_alpha`. A sample draws
//! `u ~ Uniform(eps, 1 - eps)`, computes
//! `s = sigmoid((logit(u) + log_alpha) / tau)`, stretches it to
//! `g = l + s (r - l)` and clamps to `[0, 1]`. With `l < 0 < 1 < r` both
//! endpoints carry probability mass, and as `tau -> 0` the gate tends to a
//! Bernoulli variable with success probability `sigmoid(log_alpha)`.
//!
//! The probability that a gate is non-zero has the closed form
//! `sigmoid(log_alpha - tau * ln(-l / r))`, which matches the sampler
//! exactly. Expected sparsity is one minus its mean over gates.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::config_err;
use crate::model::{HeadMode, HeadModes};
use crate::tensor::{sigmoid, Array, NodeId, Tape};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// `[num_layers, num_heads]`.
    pub log_alpha: Array,
    pub temperature: f64,
    pub stretch_left: f64,
    pub stretch_right: f64,
    /// Truncation of the uniform noise to `(eps, 1 - eps)`.
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub target: f64,
}

impl GateParams {
    /// Gates with every `log_alpha` set to `init`, default temperature 1.5,
    /// stretch `[-0.1, 1.1]` and noise truncation `1e-6`.
    pub fn new(num_layers: usize, num_heads: usize, init: f64) -> Self {
        Self {
            log_alpha: Array::full(&[num_layers, num_heads], init),
            temperature: 1.5,
            stretch_left: -0.1,
            stretch_right: 1.1,
            epsilon: 1e-6,
            lambda1: 0.0,
            lambda2: 0.0,
            target: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(config_err!("temperature must be positive"));
        }
        if !(self.stretch_left < 0.0 && self.stretch_right > 1.0) {
            return Err(config_err!(
                "stretch interval [{}, {}] must satisfy l < 0 < 1 < r",
                self.stretch_left,
                self.stretch_right
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(config_err!("epsilon must lie in (0, 1e-3]"));
        }
        if self.log_alpha.rank() != 2 {
            return Err(config_err!("log_alpha must be [layers, heads]"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.log_alpha.shape()[0]
    }

    pub fn num_heads(&self) -> usize {
        self.log_alpha.shape()[1]
    }

    /// `-tau * ln(-l / r)`, the shift between `log_alpha` and the logit of
    /// the probability that a gate is non-zero.
    pub fn active_offset(&self) -> f64 {
        -self.temperature * libm::log(-self.stretch_left / self.stretch_right)
    }
}

/// Gate value for one uniform draw `u`.
pub fn hard_concrete(log_alpha: f64, u: f64, params: &GateParams) -> f64 {
    let s = sigmoid((libm::log(u / (1.0 - u)) + log_alpha) / params.temperature);
    let g = params.stretch_left + s * (params.stretch_right - params.stretch_left);
    g.clamp(0.0, 1.0)
}

fn logistic_noise(params: &GateParams, rng: &mut impl Rng) -> Array {
    let shape = params.log_alpha.shape().to_vec();
    let n = params.log_alpha.numel();
    let eps = params.epsilon;
    let noise = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(eps..1.0 - eps);
            libm::log(u / (1.0 - u))
        })
        .collect();
    Array::new(shape, noise).expect("gate shape")
}

/// Samples gates on a tape; the result is differentiable in `log_alpha`.
pub fn sample_gates(
    tape: &mut Tape<'_>,
    log_alpha: NodeId,
    params: &GateParams,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let noise = tape.constant(logistic_noise(params, rng));
    let pre = tape.add(log_alpha, noise)?;
    let scaled = tape.scale(pre, 1.0 / params.temperature);
    let s = tape.sigmoid(scaled);
    let stretched = tape.scale(s, params.stretch_right - params.stretch_left);
    let left = tape.constant(Array::scalar(params.stretch_left));
    let g = tape.add(stretched, left)?;
    Ok(tape.clamp01(g))
}

/// Samples gate values directly, without a tape.
pub fn sample_gate_values(params: &GateParams, rng: &mut impl Rng) -> Array {
    let eps = params.epsilon;
    let data = params
        .log_alpha
        .data()
        .iter()
        .map(|&la| hard_concrete(la, rng.gen_range(eps..1.0 - eps), params))
        .collect();
    Array::new(params.log_alpha.shape().to_vec(), data).expect("gate shape")
}

/// `P(z > 0)` per gate.
pub fn prob_active(params: &GateParams) -> Array {
    let off = params.active_offset();
    let data = params
        .log_alpha
        .data()
        .iter()
        .map(|&la| sigmoid(la + off))
        .collect();
    Array::new(params.log_alpha.shape().to_vec(), data).expect("gate shape")
}

/// Expected fraction of gates that are exactly zero.
pub fn expected_sparsity(params: &GateParams) -> f64 {
    let p = prob_active(params);
    1.0 - p.data().iter().sum::<f64>() / p.numel().max(1) as f64
}

/// Expected sparsity recorded on a tape.
pub fn expected_sparsity_node(tape: &mut Tape<'_>, log_alpha: NodeId, params: &GateParams) -> Result<NodeId> {
    let off = tape.constant(Array::scalar(params.active_offset()));
    let shifted = tape.add(log_alpha, off)?;
    let p = tape.sigmoid(shifted);
    let mean = tape.mean(p);
    let one = tape.constant(Array::scalar(1.0));
    tape.sub(one, mean)
}

/// `lambda1 (s - t) + lambda2 (s - t)^2`.
pub fn lagrangian_penalty(sparsity: f64, target: f64, lambda1: f64, lambda2: f64) -> f64 {
    let gap = sparsity - target;
    lambda1 * gap + lambda2 * gap * gap
}

/// Lagrangian penalty on a tape, differentiable in the sparsity and both
/// multipliers.
pub fn lagrangian_penalty_node(
    tape: &mut Tape<'_>,
    sparsity: NodeId,
    target: f64,
    lambda1: NodeId,
    lambda2: NodeId,
) -> Result<NodeId> {
    let t = tape.constant(Array::scalar(target));
    let gap = tape.sub(sparsity, t)?;
    let lin = tape.mul(lambda1, gap)?;
    let sq = tape.mul(gap, gap)?;
    let quad = tape.mul(lambda2, sq)?;
    tape.add(lin, quad)
}

/// Linear warm-up of the target sparsity.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SparsitySchedule {
    pub warmup_steps: usize,
    pub final_target: f64,
    pub total_steps: usize,
}

impl SparsitySchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(config_err!("warmup longer than training"));
        }
        if !(0.0..=1.0).contains(&self.final_target) {
            return Err(config_err!("final target outside [0, 1]"));
        }
        Ok(())
    }
}

/// Target sparsity at `step`: `final * min(1, step / warmup)`.
pub fn target_at(schedule: &SparsitySchedule, step: usize) -> f64 {
    if schedule.warmup_steps == 0 || step >= schedule.warmup_steps {
        schedule.final_target
    } else {
        schedule.final_target * step as f64 / schedule.warmup_steps as f64
    }
}

/// Number of streaming heads for a head sparsity over `gates` gates.
pub fn streaming_count(head_sparsity: f64, gates: usize) -> usize {
    // The tolerance absorbs decimal fractions such as 0.29 * 100.
    let raw = libm::floor(head_sparsity.clamp(0.0, 1.0) * gates as f64 + 1e-9) as usize;
    raw.min(gates)
}

/// Marks the `floor(sparsity * L * H)` gates with the smallest `log_alpha`
/// as streaming; ties go to the lower (layer, head) index first.
pub fn discretize(log_alpha: &Array, head_sparsity: f64) -> Result<HeadModes> {
    if log_alpha.rank() != 2 {
        return Err(config_err!("log_alpha must be [layers, heads]"));
    }
    if !(0.0..=1.0).contains(&head_sparsity) {
        return Err(config_err!("head sparsity {head_sparsity} outside [0, 1]"));
    }
    let (layers, heads) = (log_alpha.shape()[0], log_alpha.shape()[1]);
    let n = layers * heads;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| log_alpha.data()[a].total_cmp(&log_alpha.data()[b]).then(a.cmp(&b)));
    let mut modes = alloc::vec![HeadMode::Full; n];
    for &i in order.iter().take(streaming_count(head_sparsity, n)) {
        modes[i] = HeadMode::Streaming;
    }
    HeadModes::from_modes(layers, heads, modes)
}
