//! The key-value config file shared by every subcommand.
//!
//! One flat TOML table; every key has a default, unknown keys are
//! rejected, and `key=value` overrides from the command line are applied
//! on top before deserializing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kvlab_core::data::{Corpus, CorpusKind, VocabLayout};
use kvlab_core::gates::{GateParams, SparsitySchedule};
use kvlab_core::model::{ModelConfig, StreamingSpec};
use kvlab_core::trainer::{LossMode, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    // Model.
    pub num_layers: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub num_keys: usize,
    pub max_positions: usize,
    pub init_scale: f64,
    pub sink_size: usize,
    pub window_size: usize,

    // Data.
    pub span_len: usize,
    /// One copied span per this many tokens.
    pub copy_region: usize,
    pub passkey_fraction: f64,
    pub zipf_exponent: f64,
    pub key_len: usize,

    // Training. Pre-training runs `steps` at `seq_len`, then
    // `long_steps` at `long_seq_len`; gate training runs `gate_steps` at
    // `gate_seq_len` on the frozen model.
    pub steps: usize,
    pub seq_len: usize,
    pub long_steps: usize,
    pub long_seq_len: usize,
    pub gate_steps: usize,
    pub gate_seq_len: usize,
    pub batch_tokens: usize,
    pub lr_weights: f64,
    /// Gate learning rate. A rate of 1 saturates gates of a model this
    /// small before the multipliers can act.
    pub lr_log_alpha: f64,
    pub lr_lambda: f64,
    pub warmup_fraction: f64,
    pub final_fraction: f64,
    pub target_sparsity: f64,
    /// Sparsity warm-up length as a fraction of the steps.
    pub sparsity_warmup_fraction: f64,
    pub gate_init: f64,
    pub temperature: f64,
    pub l1_coeff: f64,
    pub grad_clip: f64,
    pub seed: u64,

    // Files.
    pub model: PathBuf,
    pub gates: PathBuf,
    pub duo_gates: PathBuf,
    pub out_dir: PathBuf,

    // Sweep.
    pub methods: Vec<String>,
    pub sparsities: Vec<f64>,
    pub retentions: Vec<f64>,
    /// Pre-fill chunk sizes; 0 means single pass.
    pub chunk_sizes: Vec<usize>,
    pub tasks: Vec<String>,
    pub num_seeds: usize,
    pub seed_offset: u64,
    pub task_len: usize,
    pub threshold: f64,
    pub observation_window: usize,
    pub smoothing_kernel: usize,
    pub pyramid_ratio: f64,
    pub write_events: bool,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 16,
            model_dim: 64,
            vocab_size: 64,
            num_keys: 16,
            max_positions: 1024,
            init_scale: 0.02,
            sink_size: 4,
            window_size: 16,
            span_len: 16,
            copy_region: 32,
            passkey_fraction: 0.5,
            zipf_exponent: 1.0,
            key_len: 1,
            steps: 1500,
            seq_len: 64,
            long_steps: 500,
            long_seq_len: 128,
            gate_steps: 300,
            gate_seq_len: 128,
            batch_tokens: 512,
            lr_weights: 3e-3,
            lr_log_alpha: 0.1,
            lr_lambda: 1.0,
            warmup_fraction: 0.1,
            final_fraction: 0.01,
            target_sparsity: 0.5,
            sparsity_warmup_fraction: 0.8,
            gate_init: 3.0,
            temperature: 1.5,
            l1_coeff: 0.01,
            grad_clip: 1.0,
            seed: 0,
            model: PathBuf::from("out/model.json"),
            gates: PathBuf::from("out/gates.txt"),
            duo_gates: PathBuf::from("out/duo_gates.txt"),
            out_dir: PathBuf::from("out"),
            methods: ["full", "prulong", "duo", "random", "snap", "pyramid", "pyramid_patched", "l2key"]
                .map(String::from)
                .to_vec(),
            sparsities: (1..=9).map(|i| f64::from(i) / 10.0).collect(),
            retentions: (1..=10).map(|i| f64::from(i) / 10.0).collect(),
            chunk_sizes: vec![64, 256],
            tasks: vec!["passkey".into(), "lm".into()],
            num_seeds: 10,
            seed_offset: 0,
            task_len: 512,
            threshold: 0.9,
            observation_window: 16,
            smoothing_kernel: 7,
            pyramid_ratio: 8.0,
            write_events: true,
        }
    }
}

/// Parses one override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl LabConfig {
    /// Parses config text and applies `key=value` overrides.
    pub fn from_str_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("override {o:?} is not key=value");
            };
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: Self = toml::Value::Table(table).try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        Self::from_str_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.layout()?;
        self.streaming()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            bail!("threshold must lie in (0, 1)");
        }
        if self.copy_region <= self.span_len {
            bail!("copy_region must exceed span_len");
        }
        if self.methods.is_empty() || self.tasks.is_empty() || self.num_seeds == 0 {
            bail!("sweep grid is empty");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut c = ModelConfig::new(
            self.num_layers,
            self.num_query_heads,
            self.num_kv_heads,
            self.head_dim,
            self.vocab_size,
            self.max_positions,
        );
        c.model_dim = self.model_dim;
        c.mlp_dim = 2 * self.model_dim;
        c
    }

    pub fn layout(&self) -> Result<VocabLayout> {
        let mut l = VocabLayout::new(self.vocab_size, self.num_keys)?;
        l.zipf_exponent = self.zipf_exponent;
        l.validate()?;
        Ok(l)
    }

    pub fn streaming(&self) -> Result<StreamingSpec> {
        Ok(StreamingSpec::new(self.sink_size, self.window_size)?)
    }

    /// Training corpus for sequences of `len` tokens.
    pub fn corpus(&self, kind: CorpusKind, len: usize) -> Result<Corpus> {
        let mut c = Corpus::new(self.layout()?, kind);
        c.span_len = self.span_len;
        c.num_copies = self.num_copies(len);
        c.key_len = self.key_len;
        Ok(c)
    }

    /// Copied spans in a sequence of `len` tokens.
    pub fn num_copies(&self, len: usize) -> usize {
        len / self.copy_region
    }

    /// Training config of one stage. Pre-training stages are 0 and 1;
    /// gate training ignores `stage`.
    pub fn train_config(&self, mode: LossMode, stage: usize) -> TrainConfig {
        let (steps, len) = match (mode, stage) {
            (LossMode::PlainLm, 0) => (self.steps, self.seq_len),
            (LossMode::PlainLm, _) => (self.long_steps, self.long_seq_len),
            _ => (self.gate_steps, self.gate_seq_len),
        };
        let mut t = TrainConfig::new(mode, steps, len);
        t.batch_tokens = self.batch_tokens;
        t.lr_log_alpha = self.lr_log_alpha;
        t.lr_lambda = self.lr_lambda;
        t.lr_weights = if mode == LossMode::PlainLm { self.lr_weights } else { 0.0 };
        t.warmup_fraction = self.warmup_fraction;
        t.final_fraction = self.final_fraction;
        t.sparsity = SparsitySchedule {
            warmup_steps: (self.sparsity_warmup_fraction * steps as f64).round() as usize,
            final_target: self.target_sparsity,
            total_steps: steps,
        };
        t.seed = self.seed + stage as u64;
        t.grad_clip = (self.grad_clip > 0.0).then_some(self.grad_clip);
        t.l1_coeff = self.l1_coeff;
        t
    }

    pub fn gate_params(&self) -> GateParams {
        let mut g = GateParams::new(self.num_layers, self.num_query_heads, self.gate_init);
        g.temperature = self.temperature;
        g
    }
}
