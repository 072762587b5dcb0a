//! Post-fill and chunked KV eviction.
//!
//! Attention-score methods rank cached entries by the attention they
//! receive from a small set of observation queries, smoothed with a moving
//! average along the key axis, and keep the top entries of each layer's
//! budget. SnapKV-style allocation gives every layer the same budget;
//! PyramidKV-style allocation shrinks it linearly with depth. The L2-key
//! method ranks entries by key norm alone.
//!
//! In chunked pre-filling the policy runs after every chunk. The naive
//! variant observes the chunk's own last `k` queries; the patched variant
//! runs the prompt's true last `k` tokens as probes at their real positions
//! against the resident cache and discards the probe KVs.
//!
//! Without group pooling, selection happens per query head, which forces a
//! grouped-query cache to be replicated per query head. Pooled selection
//! averages the scores over each query group and keeps one set per KV head.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, contract_err};
use crate::ledger::{KVLedger, StepKind};
use crate::model::{forward_chunk, probe_forward, DecodeHook, HeadMode, HeadModes, KVCache, Model, StreamingSpec};
use crate::tensor::Array;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EvictionMethod {
    None,
    Snap,
    Pyramid,
    L2Key,
}

impl EvictionMethod {
    pub fn uses_attention(self) -> bool {
        matches!(self, Self::Snap | Self::Pyramid)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvictionPolicy {
    pub method: EvictionMethod,
    /// Fraction of resident entries kept at each eviction point.
    pub retention: f64,
    /// Number of observation queries `k`.
    pub observation_window: usize,
    /// Odd width of the moving average over keys.
    pub smoothing_kernel: usize,
    pub patched: bool,
    pub group_pooled: bool,
    /// Last prompt positions that are never evicted.
    pub protected_tail: usize,
    /// Ratio between the first and the last layer budget.
    pub pyramid_ratio: f64,
}

impl Default for EvictionPolicy {
    fn default() -> Self {
        Self {
            method: EvictionMethod::None,
            retention: 1.0,
            observation_window: 16,
            smoothing_kernel: 7,
            patched: false,
            group_pooled: true,
            protected_tail: 16,
            pyramid_ratio: 8.0,
        }
    }
}

impl EvictionPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    /// Attention-based policy whose protected tail equals its window.
    pub fn attention(method: EvictionMethod, retention: f64, window: usize, patched: bool) -> Self {
        Self {
            method,
            retention,
            observation_window: window,
            protected_tail: window,
            patched,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.retention > 0.0 && self.retention <= 1.0) {
            return Err(config_err!("retention {} outside (0, 1]", self.retention));
        }
        if self.observation_window == 0 {
            return Err(config_err!("observation window must be at least 1"));
        }
        if self.smoothing_kernel == 0 || self.smoothing_kernel % 2 == 0 {
            return Err(config_err!("smoothing kernel must be odd and positive"));
        }
        if !(self.pyramid_ratio >= 1.0) {
            return Err(config_err!("pyramid ratio must be at least 1"));
        }
        Ok(())
    }
}

/// Importance of each entry of a slot, in slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct KVScore(pub Vec<f64>);

/// Centered moving average; windows are truncated at the edges but always
/// divided by the full kernel width.
fn smooth(sums: &[f64], kernel: usize) -> Vec<f64> {
    let half = kernel / 2;
    let n = sums.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            sums[lo..hi].iter().sum::<f64>() / kernel as f64
        })
        .collect()
}

/// Scores entries by the attention they receive from observation queries.
///
/// Each array is `[observation queries, keys]` for one query head. Rows
/// are summed per key and smoothed; with `group_pooled` the heads are
/// averaged into a single score vector, otherwise one vector per head.
pub fn score_attention(attn_by_head: &[&Array], kernel: usize, group_pooled: bool) -> Result<Vec<KVScore>> {
    let Some(first) = attn_by_head.first() else {
        return Err(contract_err!("no heads to score"));
    };
    let keys = first.cols();
    let mut per_head = Vec::with_capacity(attn_by_head.len());
    for a in attn_by_head {
        if a.rank() != 2 || a.rows() == 0 {
            return Err(contract_err!("zero observation queries"));
        }
        if a.cols() != keys {
            return Err(config_err!("heads disagree on key count"));
        }
        let mut sums = vec![0.0; keys];
        for r in 0..a.rows() {
            for (s, p) in sums.iter_mut().zip(a.row(r)) {
                *s += p;
            }
        }
        per_head.push(smooth(&sums, kernel));
    }
    if !group_pooled {
        return Ok(per_head.into_iter().map(KVScore).collect());
    }
    let h = per_head.len() as f64;
    let pooled = (0..keys)
        .map(|j| per_head.iter().map(|s| s[j]).sum::<f64>() / h)
        .collect();
    Ok(vec![KVScore(pooled)])
}

/// Negative key norm: low-norm keys rank as important.
pub fn score_l2_keys<K: AsRef<[f64]>>(keys: &[K]) -> KVScore {
    KVScore(
        keys.iter()
            .map(|k| -libm::sqrt(k.as_ref().iter().map(|x| x * x).sum()))
            .collect(),
    )
}

/// Per-layer keep counts summing to `total_keep`.
///
/// Equal split for SnapKV and L2-key (remainder to the earliest layers);
/// for PyramidKV an arithmetic sequence from `b1` down to `bL` with
/// `b1 / bL == pyramid_ratio`, rounded by largest remainder with every
/// budget at least one.
pub fn allocate_budgets(method: EvictionMethod, total_keep: usize, num_layers: usize, pyramid_ratio: f64) -> Result<Vec<usize>> {
    if num_layers == 0 || total_keep < num_layers {
        return Err(config_err!(
            "cannot give {} layers at least one of {} entries",
            num_layers,
            total_keep
        ));
    }
    if method != EvictionMethod::Pyramid || num_layers == 1 {
        let base = total_keep / num_layers;
        let extra = total_keep % num_layers;
        return Ok((0..num_layers).map(|l| base + usize::from(l < extra)).collect());
    }
    if !(pyramid_ratio >= 1.0) {
        return Err(config_err!("pyramid ratio must be at least 1"));
    }
    let l = num_layers as f64;
    let last = 2.0 * total_keep as f64 / (l * (pyramid_ratio + 1.0));
    let first = pyramid_ratio * last;
    let step = (first - last) / (l - 1.0);
    let exact: Vec<f64> = (0..num_layers).map(|i| first - step * i as f64).collect();
    let mut budgets: Vec<usize> = exact.iter().map(|x| libm::floor(*x + 1e-9) as usize).collect();
    let assigned: usize = budgets.iter().sum();
    let mut order: Vec<usize> = (0..num_layers).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - budgets[a] as f64;
        let rb = exact[b] - budgets[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total_keep.saturating_sub(assigned)) {
        budgets[i] += 1;
    }
    // Floors below one borrow from the largest budget.
    for i in 0..num_layers {
        while budgets[i] == 0 {
            let donor = (0..num_layers).max_by_key(|&j| (budgets[j], usize::MAX - j)).expect("layers");
            budgets[donor] -= 1;
            budgets[i] += 1;
        }
    }
    Ok(budgets)
}

/// Clamps budgets to what each layer holds and hands the excess to the
/// earliest layers with room left.
fn cap_budgets(budgets: &mut [usize], caps: &[usize]) {
    let mut excess = 0;
    for (b, &c) in budgets.iter_mut().zip(caps) {
        if *b > c {
            excess += *b - c;
            *b = c;
        }
    }
    for (b, &c) in budgets.iter_mut().zip(caps) {
        let take = (c - *b).min(excess);
        *b += take;
        excess -= take;
    }
}

/// Indices of the entries to evict from one slot.
///
/// Protected positions are always kept; the remaining budget goes to the
/// highest scores, ties favouring the more recent position. A budget at or
/// above the entry count evicts nothing.
pub fn select_evictions(scores: &[f64], positions: &[usize], keep_budget: usize, protected: &BTreeSet<usize>) -> Result<Vec<usize>> {
    if scores.len() != positions.len() {
        return Err(config_err!("{} scores for {} entries", scores.len(), positions.len()));
    }
    if keep_budget >= scores.len() {
        return Ok(Vec::new());
    }
    let n_protected = positions.iter().filter(|p| protected.contains(p)).count();
    if n_protected > keep_budget {
        return Err(contract_err!(
            "{} protected entries exceed budget {}",
            n_protected,
            keep_budget
        ));
    }
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| !protected.contains(&positions[i])).collect();
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(positions[b].cmp(&positions[a])));
    let mut evict: Vec<usize> = candidates.into_iter().skip(keep_budget - n_protected).collect();
    evict.sort_unstable();
    Ok(evict)
}

/// Evicts entries that no future query of an all-streaming slot can see.
pub fn evict_streaming(
    cache: &mut KVCache,
    head_modes: &HeadModes,
    spec: &StreamingSpec,
    next_query_pos: usize,
    ledger: &mut KVLedger,
) -> Result<usize> {
    let mut removed = 0;
    for l in 0..cache.num_layers() {
        for slot in 0..cache.num_slots(l) {
            let all_streaming = cache.readers(l, slot).all(|h| head_modes.get(l, h) == HeadMode::Streaming);
            if !all_streaming {
                continue;
            }
            let ids: BTreeSet<u64> = cache
                .slot(l, slot)
                .entries()
                .iter()
                .filter(|e| e.position >= spec.sink_size && next_query_pos - e.position >= spec.window_size)
                // Copies made in this gap wait for the next one.
                .filter(|e| !ledger.is_pending(e.entry_id))
                .map(|e| e.entry_id)
                .collect();
            if !ids.is_empty() {
                removed += cache.evict(l, slot, &ids, ledger)?;
            }
        }
    }
    Ok(removed)
}

/// Decode hook applying streaming eviction after every step.
pub struct StreamingEviction<'a> {
    pub head_modes: &'a HeadModes,
    pub spec: StreamingSpec,
}

impl DecodeHook for StreamingEviction<'_> {
    fn after_step(&mut self, cache: &mut KVCache, ledger: &mut KVLedger, next_position: usize) -> Result<()> {
        evict_streaming(cache, self.head_modes, &self.spec, next_position, ledger).map(|_| ())
    }
}

/// What a chunked pre-fill did, for inspection.
#[derive(Debug, Clone)]
pub struct PrefillOutcome {
    /// Logits at the last prompt position.
    pub last_logits: Vec<f64>,
    pub num_chunks: usize,
    /// Probe positions run after each chunk (empty when none ran).
    pub probe_positions: Vec<Vec<usize>>,
    /// Resident entries per layer after each chunk's evictions, taken as
    /// the largest slot of the layer.
    pub resident_after_chunk: Vec<Vec<usize>>,
    /// Keep budget per layer at each eviction point (empty when none).
    pub budgets: Vec<Vec<usize>>,
}

/// Pre-fills `prompt` chunk by chunk, applying `policy` after every chunk
/// and streaming eviction to all-streaming slots.
#[allow(clippy::too_many_arguments)]
pub fn chunked_prefill(
    model: &Model,
    cache: &mut KVCache,
    prompt: &[u32],
    chunk_size: usize,
    policy: &EvictionPolicy,
    head_modes: &HeadModes,
    streaming: &StreamingSpec,
    ledger: &mut KVLedger,
) -> Result<PrefillOutcome> {
    policy.validate()?;
    let n = prompt.len();
    if n == 0 || chunk_size == 0 {
        return Err(config_err!("empty prompt or zero chunk size"));
    }
    if cache.total_entries() != 0 || cache.next_position() != 0 {
        return Err(contract_err!("chunked pre-fill needs an empty cache"));
    }
    let k = policy.observation_window;
    if policy.method.uses_attention() {
        if n < k {
            return Err(contract_err!("prompt of {n} tokens is shorter than the window {k}"));
        }
        if !policy.patched && chunk_size < k && chunk_size < n {
            return Err(contract_err!("naive eviction needs chunks of at least {k} tokens"));
        }
    }
    let num_chunks = n.div_ceil(chunk_size);
    let mut outcome = PrefillOutcome {
        last_logits: Vec::new(),
        num_chunks,
        probe_positions: Vec::new(),
        resident_after_chunk: Vec::new(),
        budgets: Vec::new(),
    };
    let protected: BTreeSet<usize> = (n.saturating_sub(policy.protected_tail)..n).collect();
    for c in 0..num_chunks {
        let start = c * chunk_size;
        let end = (start + chunk_size).min(n);
        let is_final = end == n;
        let positions: Vec<usize> = (start..end).collect();
        let use_probes = policy.method.uses_attention() && policy.patched && !is_final;
        let record = policy.method.uses_attention() && !use_probes;
        let out = forward_chunk(
            model,
            cache,
            &prompt[start..end],
            &positions,
            head_modes,
            streaming,
            record,
            StepKind::PrefillChunk,
            ledger,
        )?;
        outcome.last_logits = out.logits.row(end - start - 1).to_vec();
        let mut ran_probes = Vec::new();
        if policy.method != EvictionMethod::None {
            let observed = if use_probes {
                let probe_pos: Vec<usize> = (n - k..n).filter(|&p| p >= end).collect();
                let tokens: Vec<u32> = probe_pos.iter().map(|&p| prompt[p]).collect();
                let attn = probe_forward(model, cache, &tokens, &probe_pos, head_modes, streaming)?;
                ran_probes = probe_pos;
                Some(resident_columns(cache, attn)?)
            } else if let Some(attn) = out.attention {
                let rows = k.min(end - start);
                Some(last_rows(attn, rows)?)
            } else {
                None
            };
            let budgets = evict_by_policy(cache, observed.as_deref(), policy, &protected, ledger)?;
            outcome.budgets.push(budgets);
        }
        outcome.probe_positions.push(ran_probes);
        evict_streaming(cache, head_modes, streaming, end, ledger)?;
        outcome.resident_after_chunk.push(
            (0..cache.num_layers())
                .map(|l| (0..cache.num_slots(l)).map(|s| cache.slot(l, s).len()).max().unwrap_or(0))
                .collect(),
        );
    }
    Ok(outcome)
}

/// Drops the probe columns, keeping attention over resident entries.
fn resident_columns(cache: &KVCache, attn: Vec<Vec<Array>>) -> Result<Vec<Vec<Array>>> {
    attn.into_iter()
        .enumerate()
        .map(|(l, heads)| {
            heads
                .into_iter()
                .enumerate()
                .map(|(h, a)| {
                    let r = cache.slot(l, cache.slot_for_query_head(l, h)).len();
                    let rows: Vec<Vec<f64>> = (0..a.rows()).map(|i| a.row(i)[..r].to_vec()).collect();
                    Array::new(vec![rows.len(), r], rows.concat())
                })
                .collect()
        })
        .collect()
}

fn last_rows(attn: Vec<Vec<Array>>, rows: usize) -> Result<Vec<Vec<Array>>> {
    attn.into_iter()
        .map(|heads| {
            heads
                .into_iter()
                .map(|a| {
                    let from = a.rows().saturating_sub(rows);
                    let data: Vec<f64> = (from..a.rows()).flat_map(|i| a.row(i).to_vec()).collect();
                    Array::new(vec![a.rows() - from, a.cols()], data)
                })
                .collect()
        })
        .collect()
}

/// One eviction point: budgets from the retention fraction, then per-slot
/// top-k selection. Returns the per-layer budgets used.
fn evict_by_policy(
    cache: &mut KVCache,
    observed: Option<&[Vec<Array>]>,
    policy: &EvictionPolicy,
    protected: &BTreeSet<usize>,
    ledger: &mut KVLedger,
) -> Result<Vec<usize>> {
    let layers = cache.num_layers();
    let caps: Vec<usize> = (0..layers)
        .map(|l| (0..cache.num_slots(l)).map(|s| cache.slot(l, s).len()).max().unwrap_or(0))
        .collect();
    let total: usize = caps.iter().sum();
    if total == 0 {
        return Ok(vec![0; layers]);
    }
    let keep = (libm::round(policy.retention * total as f64) as usize).clamp(layers.min(total), total);
    let mut budgets = if keep >= layers {
        allocate_budgets(policy.method, keep, layers, policy.pyramid_ratio)?
    } else {
        vec![1; layers]
    };
    cap_budgets(&mut budgets, &caps);

    for (l, &budget) in budgets.iter().enumerate() {
        let replicate = policy.method.uses_attention()
            && !policy.group_pooled
            && cache.group_size() > 1
            && !cache.is_per_query_head(l);
        if replicate {
            let attn = observed.ok_or_else(|| contract_err!("attention scores missing"))?;
            let heads = cache.readers(l, 0).len() * cache.num_slots(l);
            let mut keep_lists = Vec::with_capacity(heads);
            for h in 0..heads {
                let slot = cache.slot(l, cache.slot_for_query_head(l, h));
                let positions = slot.positions();
                let scores = score_attention(&[&attn[l][h]], policy.smoothing_kernel, false)?;
                let b = budget.max(protected_count(&positions, protected));
                let evict = select_evictions(&scores[0].0, &positions, b, protected)?;
                let evict: BTreeSet<usize> = evict.into_iter().collect();
                keep_lists.push((0..positions.len()).filter(|i| !evict.contains(i)).collect());
            }
            cache.replicate_per_query_head(l, &keep_lists, ledger)?;
            continue;
        }
        for slot in 0..cache.num_slots(l) {
            let entries = cache.slot(l, slot).entries();
            let positions: Vec<usize> = entries.iter().map(|e| e.position).collect();
            let scores = match policy.method {
                EvictionMethod::None => continue,
                EvictionMethod::L2Key => {
                    let keys: Vec<&[f64]> = entries.iter().map(|e| &e.key[..]).collect();
                    score_l2_keys(&keys)
                }
                EvictionMethod::Snap | EvictionMethod::Pyramid => {
                    let attn = observed.ok_or_else(|| contract_err!("attention scores missing"))?;
                    let heads: Vec<&Array> = cache.readers(l, slot).map(|h| &attn[l][h]).collect();
                    score_attention(&heads, policy.smoothing_kernel, true)?.remove(0)
                }
            };
            let b = budget.max(protected_count(&positions, protected));
            let evict = select_evictions(&scores.0, &positions, b, protected)?;
            let ids: BTreeSet<u64> = evict.iter().map(|&i| entries[i].entry_id).collect();
            if !ids.is_empty() {
                cache.evict(l, slot, &ids, ledger)?;
            }
        }
    }
    Ok(budgets)
}

fn protected_count(positions: &[usize], protected: &BTreeSet<usize>) -> usize {
    positions.iter().filter(|p| protected.contains(p)).count()
}
