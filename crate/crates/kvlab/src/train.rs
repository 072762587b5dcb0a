//! Training entry points shared by the CLI and the tests.

use anyhow::{Context, Result};
use kvlab_core::data::CorpusKind;
use kvlab_core::gates::GateParams;
use kvlab_core::model::Model;
use kvlab_core::tensor::Array;
use kvlab_core::trainer::{pretrain_lm, train_duo, train_prulong, LossMode, StepMetrics};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::LabConfig;

/// Fresh model trained in two stages; returns it with the per-step NLL of
/// both stages concatenated.
pub fn pretrain(cfg: &LabConfig) -> Result<(Model, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(cfg.model_config(), cfg.init_scale, &mut rng)?;
    let kind = CorpusKind::Mixed(cfg.passkey_fraction);
    let mut losses = Vec::new();
    for stage in 0..2 {
        let tc = cfg.train_config(LossMode::PlainLm, stage);
        if tc.steps == 0 {
            continue;
        }
        let corpus = cfg.corpus(kind, tc.seq_len)?;
        losses.extend(pretrain_lm(&mut model, &corpus, &tc).with_context(|| format!("pre-training stage {stage}"))?);
    }
    Ok((model, losses))
}

/// PruLong gates on the frozen `model`.
pub fn prulong(cfg: &LabConfig, model: &Model) -> Result<(GateParams, Vec<StepMetrics>)> {
    let mut model = model.clone();
    let mut gates = cfg.gate_params();
    let tc = cfg.train_config(LossMode::Prulong, 0);
    let corpus = cfg.corpus(CorpusKind::Mixed(cfg.passkey_fraction), tc.seq_len)?;
    let metrics = train_prulong(&mut model, &mut gates, &corpus, &tc, &cfg.streaming()?)?;
    Ok((gates, metrics))
}

/// Duo gate values (`[L, H]`, in `[0, 1]`) and the loss per step.
pub fn duo(cfg: &LabConfig, model: &Model) -> Result<(Array, Vec<f64>)> {
    let tc = cfg.train_config(LossMode::Duo, 0);
    let corpus = cfg.corpus(CorpusKind::Mixed(cfg.passkey_fraction), tc.seq_len)?;
    Ok(train_duo(model, &corpus, &tc, &cfg.streaming()?)?)
}
