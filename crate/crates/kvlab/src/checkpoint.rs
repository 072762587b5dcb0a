//! On-disk formats: weight checkpoints, gate files, mask tables, training
//! metrics, event logs and token dumps.
//!
//! Weights: a JSON manifest (`model.json`) with the model config and, per
//! tensor, its name, shape and element offset into a flat little-endian
//! f64 file next to it (`model.bin`).
//!
//! Gates: a text file with `key value` header lines followed by one
//! `layer head value` line per gate:
//!
//! ```text
//! # kvlab gates
//! kind prulong
//! temperature 1.5
//! stretch -0.1 1.1
//! epsilon 0.000001
//! lambda1 0.25
//! lambda2 3.5
//! target 0.5
//! 0 0 2.75
//! 0 1 -1.5
//! ```
//!
//! `kind duo` files hold continuous Duo gate values instead of
//! `log_alpha`.
//!
//! Event logs: one JSON object per line, tagged by `"event"`
//! (`header`, `step`, `create`, `evict`); see `kvlab_core::ledger::LogRecord`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kvlab_core::gates::GateParams;
use kvlab_core::ledger::LogRecord;
use kvlab_core::model::{HeadMode, HeadModes, Model, ModelConfig, Weights};
use kvlab_core::tensor::Array;
use kvlab_core::trainer::StepMetrics;
use serde::{Deserialize, Serialize};

const WEIGHTS_FORMAT: &str = "kvlab-weights-f64le";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    data_file: String,
    tensors: Vec<TensorEntry>,
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn data_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    create_parent(path)?;
    let bin = data_path(path);
    let mut tensors = Vec::new();
    let mut bytes = Vec::with_capacity(model.weights.num_params() * 8);
    let mut offset = 0;
    for (name, a) in model.weights.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: a.shape().to_vec(),
            offset,
        });
        offset += a.numel();
        for x in a.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: WEIGHTS_FORMAT.into(),
        config: model.config.clone(),
        data_file: bin.file_name().expect("file name").to_string_lossy().into_owned(),
        tensors,
    };
    fs::write(&bin, bytes).with_context(|| format!("writing {}", bin.display()))?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).with_context(|| format!("reading model manifest {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if manifest.format != WEIGHTS_FORMAT {
        bail!("{}: unknown weight format {:?}", path.display(), manifest.format);
    }
    let bin = path.with_file_name(&manifest.data_file);
    let bytes = fs::read(&bin).with_context(|| format!("reading {}", bin.display()))?;
    if bytes.len() % 8 != 0 {
        bail!("{}: length is not a multiple of 8", bin.display());
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut map = BTreeMap::new();
    for t in manifest.tensors {
        let n: usize = t.shape.iter().product();
        let Some(data) = flat.get(t.offset..t.offset + n) else {
            bail!("{}: tensor {} out of range", bin.display(), t.name);
        };
        map.insert(t.name, Array::new(t.shape, data.to_vec())?);
    }
    let weights = Weights::from_map(&manifest.config, map)?;
    Ok(Model::new(manifest.config, weights)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    Prulong,
    Duo,
}

/// Writes gates; for `Duo` the `log_alpha` slot holds the gate values.
pub fn save_gates(path: &Path, kind: GateKind, gates: &GateParams) -> Result<()> {
    create_parent(path)?;
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "# kvlab gates")?;
    writeln!(w, "kind {}", if kind == GateKind::Prulong { "prulong" } else { "duo" })?;
    writeln!(w, "temperature {}", gates.temperature)?;
    writeln!(w, "stretch {} {}", gates.stretch_left, gates.stretch_right)?;
    writeln!(w, "epsilon {}", gates.epsilon)?;
    writeln!(w, "lambda1 {}", gates.lambda1)?;
    writeln!(w, "lambda2 {}", gates.lambda2)?;
    writeln!(w, "target {}", gates.target)?;
    let heads = gates.num_heads();
    for (i, v) in gates.log_alpha.data().iter().enumerate() {
        writeln!(w, "{} {} {}", i / heads, i % heads, v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_gates(path: &Path) -> Result<(GateKind, GateParams)> {
    let file = fs::File::open(path).with_context(|| format!("opening gates {}", path.display()))?;
    let mut kind = GateKind::Prulong;
    let mut params = GateParams::new(1, 1, 0.0);
    let mut values: Vec<(usize, usize, f64)> = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let ctx = || format!("{}:{}: {line:?}", path.display(), lineno + 1);
        let num = |s: &str| s.parse::<f64>().with_context(ctx);
        match parts.as_slice() {
            ["kind", "prulong"] => kind = GateKind::Prulong,
            ["kind", "duo"] => kind = GateKind::Duo,
            ["temperature", v] => params.temperature = num(v)?,
            ["stretch", l, r] => {
                params.stretch_left = num(l)?;
                params.stretch_right = num(r)?;
            }
            ["epsilon", v] => params.epsilon = num(v)?,
            ["lambda1", v] => params.lambda1 = num(v)?,
            ["lambda2", v] => params.lambda2 = num(v)?,
            ["target", v] => params.target = num(v)?,
            [l, h, v] => values.push((l.parse().with_context(ctx)?, h.parse().with_context(ctx)?, num(v)?)),
            _ => bail!("unrecognised line {}", ctx()),
        }
    }
    let layers = values.iter().map(|v| v.0 + 1).max().unwrap_or(0);
    let heads = values.iter().map(|v| v.1 + 1).max().unwrap_or(0);
    if values.len() != layers * heads || layers == 0 {
        bail!("{}: gate table is not a full layer x head grid", path.display());
    }
    let mut la = vec![f64::NAN; layers * heads];
    for (l, h, v) in values {
        la[l * heads + h] = v;
    }
    if la.iter().any(|x| x.is_nan()) {
        bail!("{}: duplicate or missing gates", path.display());
    }
    params.log_alpha = Array::new(vec![layers, heads], la)?;
    params.validate()?;
    Ok((kind, params))
}

/// `layer,head,mode` table of a discretized mask.
pub fn save_masks(path: &Path, modes: &HeadModes) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["layer", "head", "mode"])?;
    for l in 0..modes.num_layers() {
        for h in 0..modes.num_heads() {
            let m = match modes.get(l, h) {
                HeadMode::Full => "full",
                HeadMode::Streaming => "streaming",
                HeadMode::Gated(_) => bail!("gated heads cannot be exported"),
            };
            w.write_record([l.to_string(), h.to_string(), m.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_masks(path: &Path) -> Result<HeadModes> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let (l, h): (usize, usize) = (rec[0].parse()?, rec[1].parse()?);
        let mode = match &rec[2] {
            "full" => HeadMode::Full,
            "streaming" => HeadMode::Streaming,
            other => bail!("{}: unknown mode {other:?}", path.display()),
        };
        rows.push((l, h, mode));
    }
    let layers = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let heads = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    let mut modes = vec![HeadMode::Full; layers * heads];
    if rows.len() != modes.len() {
        bail!("{}: mask table is not a full grid", path.display());
    }
    for (l, h, m) in rows {
        modes[l * heads + h] = m;
    }
    Ok(HeadModes::from_modes(layers, heads, modes)?)
}

/// Training curve CSV: `step,nll,expected_sparsity,target,lambda1,lambda2`.
pub fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["step", "nll", "expected_sparsity", "target", "lambda1", "lambda2"])?;
    for m in metrics {
        w.write_record([
            m.step.to_string(),
            m.nll.to_string(),
            m.expected_sparsity.to_string(),
            m.target.to_string(),
            m.lambda1.to_string(),
            m.lambda2.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_event_log(path: &Path, events: &[LogRecord]) -> Result<()> {
    create_parent(path)?;
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_event_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening event log {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// One sequence per line, tokens separated by spaces.
pub fn write_token_lines(path: &Path, seqs: &[Vec<u32>]) -> Result<()> {
    create_parent(path)?;
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for s in seqs {
        let line: Vec<String> = s.iter().map(u32::to_string).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_token_lines`]; a blank line is an empty sequence.
pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(|l| l.split_whitespace().map(|t| Ok(t.parse()?)).collect())
        .collect()
}
