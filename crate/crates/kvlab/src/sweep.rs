//! Grid sweeps: every (method, setting, chunk, task, seed) runs
//! independently, in parallel, and rows come back in grid order.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kvlab_core::model::Model;
use rayon::prelude::*;

use crate::checkpoint::{load_gates, load_model, write_event_log, GateKind};
use crate::config::LabConfig;
use crate::tasks::{make_instance, realize, run_task, EvictionKnobs, GateScores, Method, MethodKind, MaskSource, Setting, Task, TaskShape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub score: f64,
    pub footprint: f64,
    pub peak: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub setting: Setting,
    pub chunk: usize,
    pub task: Task,
    pub seed: u64,
    /// `Err` carries the failure message of an aborted row.
    pub outcome: Result<Metrics, String>,
}

impl ResultRow {
    /// File stem of the row's event log.
    pub fn stem(&self) -> String {
        format!("{}__{}__c{}__{}__s{}", self.method, self.setting, self.chunk, self.task, self.seed)
    }
}

impl fmt::Display for ResultRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} chunk {} {} seed {}: ", self.method, self.setting, self.chunk, self.task, self.seed)?;
        match &self.outcome {
            Ok(m) => write!(f, "score {} footprint {} peak {}", m.score, m.footprint, m.peak),
            Err(e) => write!(f, "error: {e}"),
        }
    }
}

/// Everything a sweep needs besides the config.
pub struct SweepInputs {
    pub model: Model,
    pub gates: GateScores,
}

impl SweepInputs {
    /// Loads the model and whichever gate files the methods need.
    pub fn load(config: &LabConfig) -> Result<Self> {
        let methods = parse_methods(config)?;
        let model = load_model(&config.model)?;
        let mut gates = GateScores::default();
        let needs = |src| methods.iter().any(|m| m.kind == MethodKind::Mask(src));
        if needs(MaskSource::Prulong) {
            gates.prulong = Some(load_kind(&config.gates, GateKind::Prulong)?);
        }
        if needs(MaskSource::Duo) {
            gates.duo = Some(load_kind(&config.duo_gates, GateKind::Duo)?);
        }
        Ok(Self { model, gates })
    }
}

fn load_kind(path: &Path, kind: GateKind) -> Result<kvlab_core::tensor::Array> {
    let (found, params) = load_gates(path)?;
    if found != kind {
        anyhow::bail!("{}: expected {kind:?} gates, found {found:?}", path.display());
    }
    Ok(params.log_alpha)
}

pub fn parse_methods(config: &LabConfig) -> Result<Vec<Method>> {
    config.methods.iter().map(|m| m.parse()).collect()
}

pub fn parse_tasks(config: &LabConfig) -> Result<Vec<Task>> {
    config.tasks.iter().map(|t| t.parse()).collect()
}

#[derive(Debug, Clone)]
struct Point {
    method: usize,
    setting: Setting,
    chunk: usize,
    task: Task,
    seed: u64,
}

fn grid(config: &LabConfig, methods: &[Method], tasks: &[Task]) -> Vec<Point> {
    let mut out = Vec::new();
    for (mi, m) in methods.iter().enumerate() {
        for setting in m.settings(&config.sparsities, &config.retentions) {
            for &chunk in &config.chunk_sizes {
                for &task in tasks {
                    for s in 0..config.num_seeds as u64 {
                        out.push(Point {
                            method: mi,
                            setting,
                            chunk,
                            task,
                            seed: config.seed_offset + s,
                        });
                    }
                }
            }
        }
    }
    out
}

pub fn task_shape(config: &LabConfig) -> Result<TaskShape> {
    Ok(TaskShape {
        layout: config.layout()?,
        len: config.task_len,
        key_len: config.key_len,
        span_len: config.span_len,
        num_copies: config.num_copies(config.task_len + config.span_len),
    })
}

/// Runs the grid. Failed rows carry an error instead of metrics; event
/// logs go to `out_dir/events` when enabled.
pub fn run_sweep(config: &LabConfig, inputs: &SweepInputs) -> Result<Vec<ResultRow>> {
    let methods = parse_methods(config)?;
    let tasks = parse_tasks(config)?;
    let streaming = config.streaming()?;
    let shape = task_shape(config)?;
    let knobs = EvictionKnobs {
        observation_window: config.observation_window,
        smoothing_kernel: config.smoothing_kernel,
        pyramid_ratio: config.pyramid_ratio,
    };
    let events_dir = config.out_dir.join("events");
    if config.write_events {
        std::fs::create_dir_all(&events_dir).with_context(|| format!("creating {}", events_dir.display()))?;
    }
    let points = grid(config, &methods, &tasks);
    let rows = points
        .par_iter()
        .map(|p| {
            let method = &methods[p.method];
            let run = || -> Result<(Metrics, Vec<kvlab_core::ledger::LogRecord>)> {
                let setup = realize(&inputs.model, method, p.setting, &inputs.gates, &knobs, p.seed)?;
                let inst = make_instance(p.task, &shape, p.seed)?;
                let out = run_task(&inputs.model, &setup, &streaming, p.task, &inst, p.chunk)?;
                let m = Metrics {
                    score: out.score,
                    footprint: out.report.footprint,
                    peak: out.report.peak_kv,
                };
                Ok((m, out.events))
            };
            let mut row = ResultRow {
                method: method.name.clone(),
                setting: p.setting,
                chunk: p.chunk,
                task: p.task,
                seed: p.seed,
                outcome: Err(String::new()),
            };
            row.outcome = match run() {
                Ok((m, events)) => {
                    if config.write_events {
                        let path = event_path(&events_dir, &row);
                        write_event_log(&path, &events).map(|_| m).map_err(|e| format!("{e:#}"))
                    } else {
                        Ok(m)
                    }
                }
                Err(e) => Err(format!("{e:#}")),
            };
            row
        })
        .collect();
    Ok(rows)
}

pub fn event_path(dir: &Path, row: &ResultRow) -> PathBuf {
    dir.join(format!("{}.jsonl", row.stem()))
}
