//! Critical-footprint summaries, CSV output and SVG plots.
//!
//! `results.csv` starts with one `#` comment line describing the score
//! scale, then the header `method,setting,chunk,task,seed,score,footprint,peak`.
//! Failed rows hold `error` in the three metric columns.
//!
//! `summary.csv`: `method,task,full_score,threshold,critical_footprint,setting,chunk`,
//! where the last three read `not achieved` / empty when no point reaches
//! the threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kvlab_core::ledger::critical_footprint;

use crate::sweep::{Metrics, ResultRow};
use crate::tasks::{Setting, Task, SCORE_NOTE};

const RESULTS_HEADER: [&str; 8] = ["method", "setting", "chunk", "task", "seed", "score", "footprint", "peak"];
const SUMMARY_HEADER: [&str; 7] = ["method", "task", "full_score", "threshold", "critical_footprint", "setting", "chunk"];
const BASELINE: &str = "full";

/// Seed-averaged point of one (method, setting, chunk, task).
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub method: String,
    pub setting: Setting,
    pub chunk: usize,
    pub task: Task,
    pub footprint: f64,
    pub score: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub task: Task,
    pub full_score: f64,
    pub threshold: f64,
    /// `None` when no setting reaches the threshold.
    pub critical: Option<(f64, Setting, usize)>,
}

/// Averages successful rows over seeds, in first-appearance order.
pub fn curve_points(rows: &[ResultRow]) -> Vec<CurvePoint> {
    let mut order: Vec<(String, String, usize, Task)> = Vec::new();
    let mut acc: BTreeMap<(String, String, usize, Task), (Setting, f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let Ok(m) = &r.outcome else { continue };
        let key = (r.method.clone(), r.setting.to_string(), r.chunk, r.task);
        let e = acc.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (r.setting, 0.0, 0.0, 0)
        });
        e.1 += m.footprint;
        e.2 += m.score;
        e.3 += 1;
    }
    order
        .into_iter()
        .map(|k| {
            let (setting, fp, score, n) = acc[&k];
            CurvePoint {
                method: k.0,
                setting,
                chunk: k.2,
                task: k.3,
                footprint: fp / n as f64,
                score: score / n as f64,
                seeds: n,
            }
        })
        .collect()
}

/// Critical footprint per (method, task) against the `full` baseline,
/// whose score is the mean over all its rows of that task.
pub fn summarize(rows: &[ResultRow], fraction: f64) -> Result<Vec<SummaryRow>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        bail!("threshold fraction {fraction} outside (0, 1)");
    }
    let points = curve_points(rows);
    let mut tasks: Vec<Task> = points.iter().map(|p| p.task).collect();
    tasks.sort();
    tasks.dedup();
    let mut out = Vec::new();
    for task in tasks {
        let base: Vec<f64> = rows
            .iter()
            .filter(|r| r.task == task && r.method == BASELINE)
            .filter_map(|r| r.outcome.as_ref().ok().map(|m| m.score))
            .collect();
        if base.is_empty() {
            bail!("no successful `{BASELINE}` rows for task {task}: the baseline is required");
        }
        let full_score = base.iter().sum::<f64>() / base.len() as f64;
        if !(full_score > 0.0) {
            bail!("`{BASELINE}` scores 0 on {task}, so no threshold can be formed");
        }
        let mut methods: Vec<&str> = Vec::new();
        for p in points.iter().filter(|p| p.task == task) {
            if !methods.contains(&p.method.as_str()) {
                methods.push(&p.method);
            }
        }
        for method in methods {
            let mine: Vec<&CurvePoint> = points.iter().filter(|p| p.task == task && p.method == method).collect();
            let pairs: Vec<(f64, f64)> = mine.iter().map(|p| (p.footprint, p.score)).collect();
            let critical = critical_footprint(&pairs, full_score, fraction).map(|fp| {
                let p = mine.iter().find(|p| p.footprint == fp).expect("critical point exists");
                (fp, p.setting, p.chunk)
            });
            out.push(SummaryRow {
                method: method.to_string(),
                task,
                full_score,
                threshold: fraction * full_score,
                critical,
            });
        }
    }
    Ok(out)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    std::io::Write::write_all(&mut file, format!("# {SCORE_NOTE}\n").as_bytes())?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        let (score, fp, peak) = match &r.outcome {
            Ok(m) => (m.score.to_string(), m.footprint.to_string(), m.peak.to_string()),
            Err(_) => ("error".into(), "error".into(), "error".into()),
        };
        w.write_record([
            r.method.clone(),
            r.setting.to_string(),
            r.chunk.to_string(),
            r.task.to_string(),
            r.seed.to_string(),
            score,
            fp,
            peak,
        ])
        .with_context(|| format!("writing {}", path.display()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a results CSV back; error rows come back without their message.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != RESULTS_HEADER {
        bail!("{}: unexpected header {header:?}", path.display());
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let ctx = || format!("{} row {}", path.display(), i + 1);
        let outcome = if &rec[5] == "error" {
            Err("error".to_string())
        } else {
            Ok(Metrics {
                score: rec[5].parse().with_context(ctx)?,
                footprint: rec[6].parse().with_context(ctx)?,
                peak: rec[7].parse().with_context(ctx)?,
            })
        };
        out.push(ResultRow {
            method: rec[0].to_string(),
            setting: rec[1].parse().with_context(ctx)?,
            chunk: rec[2].parse().with_context(ctx)?,
            task: rec[3].parse().with_context(ctx)?,
            seed: rec[4].parse().with_context(ctx)?,
            outcome,
        });
    }
    Ok(out)
}

pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for s in summary {
        let (crit, setting, chunk) = match &s.critical {
            Some((fp, setting, chunk)) => (fp.to_string(), setting.to_string(), chunk.to_string()),
            None => ("not achieved".into(), String::new(), String::new()),
        };
        w.write_record([
            s.method.clone(),
            s.task.to_string(),
            s.full_score.to_string(),
            s.threshold.to_string(),
            crit,
            setting,
            chunk,
        ])?;
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Score-vs-footprint plot of one task: one polyline per method (and
/// chunk size, when several were swept), sorted by footprint, plus dashed
/// lines at the full score and at `fraction` of it.
pub fn plot_svg(points: &[CurvePoint], task: Task, full_score: Option<f64>, fraction: f64) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 420.0, 60.0, 170.0, 30.0, 50.0);
    let pw = w - ml - mr;
    let ph = h - mt - mb;
    let mine: Vec<&CurvePoint> = points.iter().filter(|p| p.task == task).collect();
    let x_max = mine.iter().map(|p| p.footprint).fold(1.0, f64::max);
    let x = |v: f64| ml + pw * v / x_max;
    let y = |v: f64| mt + ph * (1.0 - v.clamp(0.0, 100.0) / 100.0);

    let mut chunks: Vec<usize> = mine.iter().map(|p| p.chunk).collect();
    chunks.sort_unstable();
    chunks.dedup();
    let mut curves: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for p in &mine {
        let label = if chunks.len() > 1 {
            format!("{} (chunk {})", p.method, p.chunk)
        } else {
            p.method.clone()
        };
        match curves.iter_mut().find(|c| c.0 == label) {
            Some(c) => c.1.push((p.footprint, p.score)),
            None => curves.push((label, vec![(p.footprint, p.score)])),
        }
    }

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{task}: score vs KV footprint</text>"#, ml + pw / 2.0);
    let _ = writeln!(s, r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let ticks = (x_max / 0.2).ceil() as usize;
    for i in 0..=ticks {
        let v = (i as f64 * 0.2).min(x_max);
        let _ = writeln!(s, r#"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="black"/><text x="{0:.2}" y="{3}" text-anchor="middle">{v:.1}</text>"#, x(v), mt + ph, mt + ph + 4.0, mt + ph + 16.0);
    }
    for i in 0..=5 {
        let v = i as f64 * 20.0;
        let _ = writeln!(s, r#"<line x1="{0}" y1="{1:.2}" x2="{2}" y2="{1:.2}" stroke="black"/><text x="{3}" y="{4:.2}" text-anchor="end">{v}</text>"#, ml - 4.0, y(v), ml, ml - 6.0, y(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">KV footprint</text>"#, ml + pw / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">score</text>"#, mt + ph / 2.0);
    if let Some(full) = full_score {
        for (v, label) in [(full, "full".to_string()), (fraction * full, format!("{fraction}x full"))] {
            let _ = writeln!(s, r#"<line x1="{ml}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="gray" stroke-dasharray="4 3"/><text x="{2}" y="{3:.2}" fill="gray">{label}</text>"#, y(v), ml + pw, ml + pw + 4.0, y(v) + 4.0);
        }
    }
    for (i, (label, mut pts)) in curves.into_iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = pts.iter().map(|&(fx, fy)| format!("{:.2},{:.2}", x(fx), y(fy))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" "));
        for &(fx, fy) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, x(fx), y(fy));
        }
        let ly = mt + 14.0 * (i as f64 + 2.0);
        let _ = writeln!(s, r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="2"/><text x="{3}" y="{4}">{label}</text>"#, ml + pw + 4.0, ly, ml + pw + 20.0, ml + pw + 24.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `results.csv`, `summary.csv` and one `plot_<task>.svg` per task.
pub fn emit_report(rows: &[ResultRow], summary: &[SummaryRow], out_dir: &Path, fraction: f64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let results = out_dir.join("results.csv");
    write_results(&results, rows)?;
    let summary_path = out_dir.join("summary.csv");
    write_summary(&summary_path, summary)?;
    let mut files = vec![results, summary_path];
    let points = curve_points(rows);
    let mut tasks: Vec<Task> = points.iter().map(|p| p.task).collect();
    tasks.sort();
    tasks.dedup();
    for task in tasks {
        let full = summary.iter().find(|s| s.task == task).map(|s| s.full_score);
        let path = out_dir.join(format!("plot_{task}.svg"));
        fs::write(&path, plot_svg(&points, task, full, fraction)).with_context(|| format!("writing {}", path.display()))?;
        files.push(path);
    }
    Ok(files)
}
