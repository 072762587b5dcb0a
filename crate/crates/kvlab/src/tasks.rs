//! Evaluation tasks and the methods compared on them.
//!
//! A method is named by a short id:
//!
//! - `full`: every head full, no eviction.
//! - `prulong`, `duo`, `random`: head masks at a given head sparsity;
//!   streaming heads drop KVs outside sink + window.
//! - `snap`, `pyramid`, `l2key`: chunked eviction at a given retention
//!   fraction. Suffix `_patched` scores with probe queries, `_unpooled`
//!   selects per query head and replicates the group's KVs.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use kvlab_core::data::{gen_passkey, gen_recall_corpus, VocabLayout};
use kvlab_core::eviction::{chunked_prefill, EvictionMethod, EvictionPolicy, StreamingEviction};
use kvlab_core::gates::{discretize, streaming_count};
use kvlab_core::ledger::{FootprintReport, KVLedger, LogRecord};
use kvlab_core::model::{decode_greedy, decode_teacher_forced, HeadMode, HeadModes, KVCache, Model, StreamingSpec};
use kvlab_core::tensor::Array;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    /// Exact match of the decoded key, 0 or 100.
    Passkey,
    /// `100 * exp(-nll)` of a copied span fed teacher-forced after the
    /// prompt, i.e. 100 over its perplexity.
    Lm,
}

pub const SCORE_NOTE: &str =
    "score: passkey = exact-match percentage; lm = 100*exp(-nll) of the copied continuation (100/perplexity)";

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Passkey => "passkey",
            Task::Lm => "lm",
        })
    }
}

impl FromStr for Task {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "passkey" => Ok(Task::Passkey),
            "lm" => Ok(Task::Lm),
            _ => bail!("unknown task {s:?} (expected passkey or lm)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    Prulong,
    Duo,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Full,
    Mask(MaskSource),
    Evict {
        method: EvictionMethod,
        patched: bool,
        pooled: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Method {
    pub name: String,
    pub kind: MethodKind,
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('_');
        let base = parts.next().unwrap_or_default();
        let mut patched = false;
        let mut pooled = true;
        for p in parts {
            match p {
                "patched" if !patched => patched = true,
                "unpooled" if pooled => pooled = false,
                _ => bail!("unknown method suffix {p:?} in {s:?}"),
            }
        }
        let evict = |method| MethodKind::Evict { method, patched, pooled };
        let kind = match base {
            "full" => MethodKind::Full,
            "prulong" => MethodKind::Mask(MaskSource::Prulong),
            "duo" => MethodKind::Mask(MaskSource::Duo),
            "random" => MethodKind::Mask(MaskSource::Random),
            "snap" => evict(EvictionMethod::Snap),
            "pyramid" => evict(EvictionMethod::Pyramid),
            "l2key" => evict(EvictionMethod::L2Key),
            _ => bail!("unknown method {s:?}"),
        };
        if !matches!(kind, MethodKind::Evict { .. }) && (patched || !pooled) {
            bail!("suffixes only apply to eviction methods: {s:?}");
        }
        if let MethodKind::Evict { method: EvictionMethod::L2Key, patched: true, .. } = kind {
            bail!("l2key does not use attention, so it has no patched variant");
        }
        Ok(Method { name: s.to_string(), kind })
    }
}

/// The knob a method is swept over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Setting {
    None,
    Sparsity(f64),
    Retention(f64),
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::None => f.write_str("none"),
            Setting::Sparsity(s) => write!(f, "sparsity={s}"),
            Setting::Retention(r) => write!(f, "retention={r}"),
        }
    }
}

impl FromStr for Setting {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Setting::None);
        }
        let (k, v) = s.split_once('=').with_context(|| format!("bad setting {s:?}"))?;
        let v: f64 = v.parse().with_context(|| format!("bad setting {s:?}"))?;
        match k {
            "sparsity" => Ok(Setting::Sparsity(v)),
            "retention" => Ok(Setting::Retention(v)),
            _ => bail!("bad setting {s:?}"),
        }
    }
}

impl Method {
    /// Grid of settings this method is evaluated at.
    pub fn settings(&self, sparsities: &[f64], retentions: &[f64]) -> Vec<Setting> {
        match self.kind {
            MethodKind::Full => vec![Setting::None],
            MethodKind::Mask(_) => sparsities.iter().map(|&s| Setting::Sparsity(s)).collect(),
            MethodKind::Evict { .. } => retentions.iter().map(|&r| Setting::Retention(r)).collect(),
        }
    }
}

/// Learned gate scores a mask method ranks heads by; lower goes
/// streaming first.
#[derive(Debug, Clone, Default)]
pub struct GateScores {
    pub prulong: Option<Array>,
    pub duo: Option<Array>,
}

#[derive(Debug, Clone)]
pub struct EvictionKnobs {
    pub observation_window: usize,
    pub smoothing_kernel: usize,
    pub pyramid_ratio: f64,
}

/// Head modes and pre-fill policy of one (method, setting).
#[derive(Debug, Clone)]
pub struct Setup {
    pub modes: HeadModes,
    pub policy: EvictionPolicy,
}

/// `floor(sparsity * L * H)` heads chosen uniformly at random.
pub fn random_mask(num_layers: usize, num_heads: usize, sparsity: f64, seed: u64) -> Result<HeadModes> {
    let n = num_layers * num_heads;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut modes = vec![HeadMode::Full; n];
    for &i in order.iter().take(streaming_count(sparsity, n)) {
        modes[i] = HeadMode::Streaming;
    }
    Ok(HeadModes::from_modes(num_layers, num_heads, modes)?)
}

/// Builds the setup; `seed` only matters for random masks.
pub fn realize(model: &Model, method: &Method, setting: Setting, gates: &GateScores, knobs: &EvictionKnobs, seed: u64) -> Result<Setup> {
    let cfg = &model.config;
    let full = HeadModes::all_full(cfg);
    match (method.kind, setting) {
        (MethodKind::Full, Setting::None) => Ok(Setup {
            modes: full,
            policy: EvictionPolicy::none(),
        }),
        (MethodKind::Mask(src), Setting::Sparsity(s)) => {
            let modes = match src {
                MaskSource::Random => random_mask(cfg.num_layers, cfg.num_query_heads, s, seed)?,
                MaskSource::Prulong => discretize(gates.prulong.as_ref().context("prulong needs a gate checkpoint")?, s)?,
                MaskSource::Duo => discretize(gates.duo.as_ref().context("duo needs a gate checkpoint")?, s)?,
            };
            if modes.num_layers() != cfg.num_layers || modes.num_heads() != cfg.num_query_heads {
                bail!("{} gates do not match the model's head grid", method.name);
            }
            Ok(Setup {
                modes,
                policy: EvictionPolicy::none(),
            })
        }
        (MethodKind::Evict { method: m, patched, pooled }, Setting::Retention(r)) => {
            let mut policy = EvictionPolicy::attention(m, r, knobs.observation_window, patched);
            policy.group_pooled = pooled;
            policy.smoothing_kernel = knobs.smoothing_kernel;
            policy.pyramid_ratio = knobs.pyramid_ratio;
            policy.validate()?;
            Ok(Setup { modes: full, policy })
        }
        (_, s) => bail!("setting {s} does not apply to {}", method.name),
    }
}

/// A prompt and what should follow it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct TaskShape {
    pub layout: VocabLayout,
    /// Prompt length.
    pub len: usize,
    pub key_len: usize,
    pub span_len: usize,
    pub num_copies: usize,
}

/// Deterministic instance for (task, seed), shared by every method so
/// comparisons are paired.
pub fn make_instance(task: Task, shape: &TaskShape, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64);
    match task {
        Task::Passkey => {
            let depth = rand::Rng::gen_range(&mut rng, 0.0..=1.0);
            let t = gen_passkey(&shape.layout, shape.len, depth, shape.key_len, &mut rng)?;
            Ok(Instance {
                prompt: t.tokens,
                target: t.answer,
            })
        }
        Task::Lm => {
            // The continuation is the final region's copied span.
            let total = shape.len + shape.span_len;
            let seq = gen_recall_corpus(&shape.layout, total, shape.span_len, shape.num_copies, &mut rng)?;
            let region = total / shape.num_copies.max(1);
            let end = region * shape.num_copies.max(1);
            let start = end - shape.span_len;
            Ok(Instance {
                prompt: seq[..start].to_vec(),
                target: seq[start..end].to_vec(),
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub score: f64,
    pub report: FootprintReport,
    pub events: Vec<LogRecord>,
}

/// Runs chunked pre-fill then decoding and scores the result. Chunk 0
/// means a single pass over the prompt.
pub fn run_task(model: &Model, setup: &Setup, streaming: &StreamingSpec, task: Task, inst: &Instance, chunk: usize) -> Result<TaskOutcome> {
    let cfg = &model.config;
    let mut cache = KVCache::new(cfg);
    let mut ledger = KVLedger::new(cfg.num_layers, cfg.num_kv_heads);
    let n = inst.prompt.len();
    let chunk = if chunk == 0 { n } else { chunk };
    let pre = chunked_prefill(model, &mut cache, &inst.prompt, chunk, &setup.policy, &setup.modes, streaming, &mut ledger)?;
    let mut hook = StreamingEviction {
        head_modes: &setup.modes,
        spec: *streaming,
    };
    let m = inst.target.len();
    let score = match task {
        Task::Passkey => {
            let out = decode_greedy(model, &mut cache, &setup.modes, streaming, &pre.last_logits, m, &mut ledger, &mut hook)?;
            if out == inst.target {
                100.0
            } else {
                0.0
            }
        }
        Task::Lm => {
            let nll = decode_teacher_forced(model, &mut cache, &setup.modes, streaming, &pre.last_logits, &inst.target, &mut ledger, &mut hook)?;
            100.0 * (-nll).exp()
        }
    };
    let report = ledger.report(n, m)?;
    Ok(TaskOutcome {
        score,
        report,
        events: ledger.events().to_vec(),
    })
}
