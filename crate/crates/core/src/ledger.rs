//! Lifecycle accounting of KV entries and the footprint metrics.
//!
//! A run is a sequence of steps, one per forward pass (a pre-fill chunk or
//! one decoded token). During an open step entries are created; when the
//! step closes the ledger snapshots the resident count of every storage
//! slot; evictions then happen between steps and take effect from the next
//! step on. Every query of a step is charged the resident set at step end,
//! since all KVs of a chunk coexist in memory during its forward pass.
//!
//! Resident counts are averaged over `num_layers * kv_heads`, the storage
//! of an uncompressed grouped-query cache, so a method that replicates KVs
//! per query head can exceed a footprint of 1.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::contract_err;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StepKind {
    PrefillChunk,
    Decode,
}

/// Resident and active entry counts of one storage slot at step end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadCount {
    pub layer: usize,
    pub head: usize,
    pub resident: usize,
    /// Entries attended by at least one query of the step.
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub step: usize,
    pub kind: StepKind,
    pub query_positions: Range<usize>,
    pub heads: Vec<HeadCount>,
    pub total_resident: usize,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "event", rename_all = "snake_case"))]
pub enum LogRecord {
    /// Storage geometry used to normalise resident counts.
    Header { num_layers: usize, kv_heads: usize },
    /// Start of a forward pass over `query_start..query_end`.
    Step {
        step: usize,
        kind: StepKind,
        query_start: usize,
        query_end: usize,
    },
    /// Entry resident from step `step` on.
    Create {
        step: usize,
        kind: StepKind,
        layer: usize,
        head: usize,
        entry_id: u64,
        position: usize,
    },
    /// Entry removed after step `step`.
    Evict {
        step: usize,
        kind: StepKind,
        layer: usize,
        head: usize,
        entry_id: u64,
        position: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FootprintReport {
    pub footprint: f64,
    pub peak_kv: f64,
    /// Mean resident entries per (layer, kv head) at the end of each step.
    pub resident_series: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Live {
    step: usize,
    layer: usize,
    head: usize,
    position: usize,
}

/// Incremental ledger of one simulated sequence.
#[derive(Debug, Clone)]
pub struct KVLedger {
    num_layers: usize,
    kv_heads: usize,
    steps: Vec<StepRecord>,
    log: Vec<LogRecord>,
    resident: BTreeMap<(usize, usize), usize>,
    live: BTreeMap<u64, Live>,
    seen: BTreeSet<u64>,
    open: Option<(StepKind, Range<usize>)>,
}

impl KVLedger {
    pub fn new(num_layers: usize, kv_heads: usize) -> Self {
        Self {
            num_layers,
            kv_heads,
            steps: Vec::new(),
            log: vec![LogRecord::Header {
                num_layers,
                kv_heads,
            }],
            resident: BTreeMap::new(),
            live: BTreeMap::new(),
            seen: BTreeSet::new(),
            open: None,
        }
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn events(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn is_open(&self) -> bool {
        self.open.is_some()
    }

    /// Current resident count of one slot.
    pub fn resident(&self, layer: usize, head: usize) -> usize {
        self.resident.get(&(layer, head)).copied().unwrap_or(0)
    }

    pub fn total_resident(&self) -> usize {
        self.resident.values().sum()
    }

    /// Whether `entry_id` was created after the last closed step and is not
    /// resident yet.
    pub fn is_pending(&self, entry_id: u64) -> bool {
        self.live.get(&entry_id).is_some_and(|l| l.step >= self.steps.len())
    }

    fn current_kind(&self) -> StepKind {
        match &self.open {
            Some((kind, _)) => *kind,
            None => self.steps.last().map_or(StepKind::PrefillChunk, |s| s.kind),
        }
    }

    pub fn begin_step(&mut self, kind: StepKind, query_positions: Range<usize>) -> Result<usize> {
        if self.open.is_some() {
            return Err(contract_err!("step {} is still open", self.steps.len()));
        }
        let step = self.steps.len();
        self.log.push(LogRecord::Step {
            step,
            kind,
            query_start: query_positions.start,
            query_end: query_positions.end,
        });
        self.open = Some((kind, query_positions));
        Ok(step)
    }

    /// Records a new entry. Entries created between steps become resident
    /// at the next step.
    pub fn create(&mut self, entry_id: u64, layer: usize, head: usize, position: usize) -> Result<()> {
        if !self.seen.insert(entry_id) {
            return Err(Error::Integrity(alloc::format!("entry {entry_id} created twice")));
        }
        let step = self.steps.len();
        self.log.push(LogRecord::Create {
            step,
            kind: self.current_kind(),
            layer,
            head,
            entry_id,
            position,
        });
        *self.resident.entry((layer, head)).or_default() += 1;
        self.live.insert(
            entry_id,
            Live {
                step,
                layer,
                head,
                position,
            },
        );
        Ok(())
    }

    /// Closes the open step and snapshots resident counts. `active` lists
    /// per-slot active counts; slots missing from it count as fully active.
    pub fn close_step(&mut self, active: &[HeadCount]) -> Result<()> {
        let Some((kind, range)) = self.open.take() else {
            return Err(contract_err!("no open step to close"));
        };
        let heads: Vec<HeadCount> = self
            .resident
            .iter()
            .map(|(&(layer, head), &resident)| {
                let act = active
                    .iter()
                    .find(|a| a.layer == layer && a.head == head)
                    .map_or(resident, |a| a.active.min(resident));
                HeadCount {
                    layer,
                    head,
                    resident,
                    active: act,
                }
            })
            .collect();
        let total_resident = heads.iter().map(|h| h.resident).sum();
        self.steps.push(StepRecord {
            step: self.steps.len(),
            kind,
            query_positions: range,
            heads,
            total_resident,
        });
        Ok(())
    }

    /// Evicts an entry after the most recently closed step.
    pub fn evict(&mut self, entry_id: u64) -> Result<()> {
        if self.open.is_some() {
            return Err(contract_err!("evictions happen between steps"));
        }
        let Some(step) = self.steps.len().checked_sub(1) else {
            return Err(contract_err!("eviction before the first step"));
        };
        match self.live.get(&entry_id) {
            None => {
                return Err(Error::Integrity(alloc::format!("entry {entry_id} is not resident")));
            }
            Some(l) if l.step > step => {
                return Err(contract_err!("entry {entry_id} evicted before it became resident"));
            }
            Some(_) => {}
        }
        let live = self.live.remove(&entry_id).expect("checked above");
        if let Some(c) = self.resident.get_mut(&(live.layer, live.head)) {
            *c -= 1;
        }
        self.log.push(LogRecord::Evict {
            step,
            kind: self.current_kind(),
            layer: live.layer,
            head: live.head,
            entry_id,
            position: live.position,
        });
        Ok(())
    }

    fn heads_norm(&self) -> f64 {
        (self.num_layers * self.kv_heads).max(1) as f64
    }

    /// Checks that the steps cover `n` prompt tokens then `m` decoded ones.
    fn check_complete(&self, n: usize, m: usize) -> Result<()> {
        if self.open.is_some() {
            return Err(contract_err!("ledger has an open step"));
        }
        let mut next = 0;
        let mut decoded = 0;
        for s in &self.steps {
            if s.query_positions.start != next || s.query_positions.end <= s.query_positions.start {
                return Err(contract_err!(
                    "step {} covers {:?}, expected start {}",
                    s.step,
                    s.query_positions,
                    next
                ));
            }
            match s.kind {
                StepKind::PrefillChunk if decoded > 0 => {
                    return Err(contract_err!("pre-fill step {} after decoding", s.step));
                }
                StepKind::PrefillChunk => {}
                StepKind::Decode => {
                    if s.query_positions.len() != 1 || next < n {
                        return Err(contract_err!("malformed decode step {}", s.step));
                    }
                    decoded += 1;
                }
            }
            next = s.query_positions.end;
        }
        if next != n + m || decoded != m {
            return Err(contract_err!(
                "ledger covers {} positions with {} decode steps, expected n={} m={}",
                next,
                decoded,
                n,
                m
            ));
        }
        Ok(())
    }

    /// Footprint and peak KV from the incremental counters.
    pub fn report(&self, n: usize, m: usize) -> Result<FootprintReport> {
        self.check_complete(n, m)?;
        let totals: Vec<(usize, usize)> = self
            .steps
            .iter()
            .map(|s| (s.query_positions.len(), s.total_resident))
            .collect();
        Ok(metrics(&totals, n, m, self.heads_norm()))
    }
}

/// Denominator of the footprint: single-pass pre-fill of `n` tokens, no
/// eviction, then `m` decode steps.
pub fn reference_footprint(n: usize, m: usize) -> u128 {
    let n = n as u128;
    let decode: u128 = (1..=m as u128).map(|i| n + i).sum();
    n * n + decode
}

fn metrics(totals: &[(usize, usize)], n: usize, m: usize, norm: f64) -> FootprintReport {
    let weighted: u128 = totals.iter().map(|&(q, r)| q as u128 * r as u128).sum();
    let peak = totals.iter().map(|&(_, r)| r).max().unwrap_or(0);
    let reference = reference_footprint(n, m);
    let footprint = if reference == 0 {
        0.0
    } else {
        weighted as f64 / norm / reference as f64
    };
    let peak_kv = if n + m == 0 {
        0.0
    } else {
        peak as f64 / norm / (n + m) as f64
    };
    FootprintReport {
        footprint,
        peak_kv,
        resident_series: totals.iter().map(|&(_, r)| r as f64 / norm).collect(),
    }
}

/// KV footprint of a complete run of `n` prompt and `m` decoded tokens.
pub fn kv_footprint(ledger: &KVLedger, n: usize, m: usize) -> Result<f64> {
    ledger.report(n, m).map(|r| r.footprint)
}

/// Peak resident KVs over the run, normalised by sequence length.
pub fn peak_kv(ledger: &KVLedger, n: usize, m: usize) -> Result<f64> {
    ledger.report(n, m).map(|r| r.peak_kv)
}

/// Smallest footprint among `points` whose score reaches `fraction` of
/// `full_score`.
pub fn critical_footprint(points: &[(f64, f64)], full_score: f64, fraction: f64) -> Option<f64> {
    let threshold = fraction * full_score;
    points
        .iter()
        .filter(|&&(_, score)| score >= threshold)
        .map(|&(fp, _)| fp)
        .min_by(f64::total_cmp)
}

/// Recomputes the footprint report of an event log from scratch.
///
/// Independent of the ledger's incremental counters: resident counts are
/// rebuilt by counting creations and evictions per step. The prompt length
/// is the end of the last pre-fill step and the decode length the number of
/// decode steps.
pub fn replay_check(log: &[LogRecord]) -> Result<FootprintReport> {
    let integrity = |msg: alloc::string::String| Err(Error::Integrity(msg));
    let mut norm = None;
    let mut steps: Vec<(StepKind, usize, usize)> = Vec::new();
    let mut created: BTreeMap<u64, usize> = BTreeMap::new();
    let mut evicted: BTreeSet<u64> = BTreeSet::new();
    let mut create_at: Vec<usize> = Vec::new();
    let mut evict_after: Vec<usize> = Vec::new();
    for rec in log {
        match *rec {
            LogRecord::Header {
                num_layers,
                kv_heads,
            } => {
                if norm.is_some() {
                    return integrity("duplicate header".into());
                }
                norm = Some((num_layers * kv_heads).max(1) as f64);
            }
            LogRecord::Step {
                step,
                kind,
                query_start,
                query_end,
            } => {
                if step != steps.len() {
                    return integrity(alloc::format!("step {step} out of order"));
                }
                steps.push((kind, query_start, query_end));
            }
            LogRecord::Create { step, entry_id, .. } => {
                if created.insert(entry_id, step).is_some() {
                    return integrity(alloc::format!("entry {entry_id} created twice"));
                }
                create_at.push(step);
            }
            LogRecord::Evict { step, entry_id, .. } => {
                let Some(&born) = created.get(&entry_id) else {
                    return integrity(alloc::format!("entry {entry_id} evicted before creation"));
                };
                if !evicted.insert(entry_id) {
                    return integrity(alloc::format!("entry {entry_id} evicted twice"));
                }
                if step < born || step >= steps.len() {
                    return integrity(alloc::format!(
                        "entry {entry_id} evicted after step {step} but created at {born}"
                    ));
                }
                evict_after.push(step);
            }
        }
    }
    let norm = match (norm, steps.is_empty()) {
        (Some(n), _) => n,
        (None, true) => 1.0,
        (None, false) => return integrity("missing header".into()),
    };
    let mut births = vec![0usize; steps.len() + 1];
    let mut deaths = vec![0usize; steps.len() + 1];
    for s in create_at {
        births[s.min(steps.len())] += 1;
    }
    for s in evict_after {
        deaths[s + 1] += 1;
    }
    let mut resident: i64 = 0;
    let mut totals = Vec::with_capacity(steps.len());
    for (i, &(_, start, end)) in steps.iter().enumerate() {
        resident += births[i] as i64 - deaths[i] as i64;
        if resident < 0 {
            return integrity(alloc::format!("negative resident count at step {i}"));
        }
        totals.push((end.saturating_sub(start), resident as usize));
    }
    let n = steps
        .iter()
        .filter(|s| s.0 == StepKind::PrefillChunk)
        .map(|s| s.2)
        .max()
        .unwrap_or(0);
    let m = steps.iter().filter(|s| s.0 == StepKind::Decode).count();
    Ok(metrics(&totals, n, m, norm))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Single slot, entries created for every query position of each step.
    fn run_chunks(chunks: &[usize], evict_after: &[(usize, usize)]) -> KVLedger {
        let mut l = KVLedger::new(1, 1);
        let mut pos = 0;
        for (step, &len) in chunks.iter().enumerate() {
            l.begin_step(StepKind::PrefillChunk, pos..pos + len).unwrap();
            for p in pos..pos + len {
                l.create(p as u64, 0, 0, p).unwrap();
            }
            l.close_step(&[]).unwrap();
            for &(s, id) in evict_after {
                if s == step {
                    l.evict(id as u64).unwrap();
                }
            }
            pos += len;
        }
        l
    }

    #[test]
    fn single_pass_no_eviction_is_one() {
        let l = run_chunks(&[7], &[]);
        let r = l.report(7, 0).unwrap();
        assert_eq!(r.footprint, 1.0);
        assert_eq!(r.peak_kv, 1.0);
    }

    #[test]
    fn six_token_reference_denominator() {
        assert_eq!(reference_footprint(6, 0), 36);
        assert_eq!(reference_footprint(4, 2), 16 + 5 + 6);
    }

    #[test]
    fn two_chunks_one_eviction() {
        let l = run_chunks(&[2, 2], &[(0, 0)]);
        assert_eq!(l.report(4, 0).unwrap().footprint, 0.625);
        assert_eq!(replay_check(l.events()).unwrap().footprint, 0.625);
    }

    #[test]
    fn critical_footprint_rule() {
        let pts = [(0.2, 50.0), (0.4, 85.0), (0.6, 92.0), (1.0, 95.0)];
        assert_eq!(critical_footprint(&pts, 95.0, 0.9), Some(0.6));
        assert_eq!(critical_footprint(&pts[..2], 95.0, 0.9), None);
        assert_eq!(critical_footprint(&[(1.0, 95.0)], 95.0, 0.9), Some(1.0));
    }

    #[test]
    fn empty_schedule_replays_to_zero() {
        let r = replay_check(&[]).unwrap();
        assert_eq!(r.footprint, 0.0);
        assert_eq!(r.peak_kv, 0.0);
        assert!(r.resident_series.is_empty());
    }

    #[test]
    fn eviction_before_creation_is_integrity_error() {
        let log = [
            LogRecord::Header {
                num_layers: 1,
                kv_heads: 1,
            },
            LogRecord::Step {
                step: 0,
                kind: StepKind::PrefillChunk,
                query_start: 0,
                query_end: 1,
            },
            LogRecord::Evict {
                step: 0,
                kind: StepKind::PrefillChunk,
                layer: 0,
                head: 0,
                entry_id: 9,
                position: 0,
            },
        ];
        assert!(matches!(replay_check(&log), Err(Error::Integrity(_))));
    }

    #[test]
    fn incomplete_ledger_is_rejected() {
        let l = run_chunks(&[2, 2], &[]);
        assert!(matches!(l.report(6, 0), Err(Error::Contract(_))));
        assert!(matches!(l.report(4, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn evicting_during_open_step_is_rejected() {
        let mut l = KVLedger::new(1, 1);
        l.begin_step(StepKind::PrefillChunk, 0..1).unwrap();
        l.create(0, 0, 0, 0).unwrap();
        assert!(l.evict(0).is_err());
        l.close_step(&[]).unwrap();
        l.evict(0).unwrap();
        assert!(matches!(l.evict(0), Err(Error::Integrity(_))));
    }

    #[test]
    fn creation_between_steps_counts_from_next_step() {
        let mut l = KVLedger::new(1, 1);
        l.begin_step(StepKind::PrefillChunk, 0..2).unwrap();
        l.create(0, 0, 0, 0).unwrap();
        l.create(1, 0, 0, 1).unwrap();
        l.close_step(&[]).unwrap();
        l.evict(0).unwrap();
        l.create(10, 0, 1, 1).unwrap();
        l.begin_step(StepKind::Decode, 2..3).unwrap();
        l.create(2, 0, 0, 2).unwrap();
        l.close_step(&[]).unwrap();
        let inc = l.report(2, 1).unwrap();
        let rep = replay_check(l.events()).unwrap();
        assert_eq!(inc, rep);
        assert_eq!(inc.resident_series, alloc::vec![2.0, 3.0]);
    }
}
