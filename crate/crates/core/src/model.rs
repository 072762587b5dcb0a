//! Toy decoder-only transformer with grouped-query attention.
//!
//! Pre-norm blocks (RMS norm, rotary attention, SwiGLU MLP), untied
//! embeddings, and an explicit KV cache stored per layer and storage slot.
//! A slot is a KV head in the shared layout, or a query head once a layer
//! has been replicated for per-query-head eviction. Keys are cached after
//! the rotary rotation at their absolute position, so evicting entries
//! never renumbers the survivors.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, contract_err};
use crate::ledger::{HeadCount, KVLedger, StepKind};
use crate::tensor::{Array, NodeId, Tape};
use crate::Result;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub rope_base: f64,
}

impl ModelConfig {
    /// Config with `model_dim = heads * head_dim` and a 2x MLP. The model
    /// width may be changed afterwards; the output projection maps
    /// `heads * head_dim` back to it.
    pub fn new(
        num_layers: usize,
        num_query_heads: usize,
        num_kv_heads: usize,
        head_dim: usize,
        vocab_size: usize,
        max_positions: usize,
    ) -> Self {
        let model_dim = num_query_heads * head_dim;
        Self {
            num_layers,
            num_query_heads,
            num_kv_heads,
            head_dim,
            model_dim,
            mlp_dim: 2 * model_dim,
            vocab_size,
            max_positions,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_query_heads == 0 || self.num_kv_heads == 0 {
            return Err(config_err!("layers and heads must be positive"));
        }
        if self.num_query_heads % self.num_kv_heads != 0 {
            return Err(config_err!(
                "{} query heads not divisible by {} kv heads",
                self.num_query_heads,
                self.num_kv_heads
            ));
        }
        if self.model_dim == 0 {
            return Err(config_err!("model_dim must be positive"));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(config_err!("head_dim must be even for rotary embeddings"));
        }
        if self.vocab_size == 0 || self.mlp_dim == 0 {
            return Err(config_err!("vocab and mlp sizes must be positive"));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.num_query_heads / self.num_kv_heads
    }

    pub fn num_gates(&self) -> usize {
        self.num_layers * self.num_query_heads
    }
}

/// Sink-plus-window attention pattern of streaming heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StreamingSpec {
    pub sink_size: usize,
    pub window_size: usize,
}

impl StreamingSpec {
    pub fn new(sink_size: usize, window_size: usize) -> Result<Self> {
        if window_size == 0 {
            return Err(config_err!("window_size must be at least 1"));
        }
        Ok(Self {
            sink_size,
            window_size,
        })
    }

    pub fn allows(&self, query_pos: usize, key_pos: usize) -> bool {
        streaming_allowed(query_pos, key_pos, self)
    }
}

impl Default for StreamingSpec {
    fn default() -> Self {
        Self {
            sink_size: 4,
            window_size: 32,
        }
    }
}

/// Whether a streaming head at `query_pos` may attend to `key_pos`.
pub fn streaming_allowed(query_pos: usize, key_pos: usize, spec: &StreamingSpec) -> bool {
    key_pos <= query_pos && (key_pos < spec.sink_size || query_pos - key_pos < spec.window_size)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadMode {
    Full,
    Streaming,
    /// Training-only mix `z * full + (1 - z) * streaming`.
    Gated(f64),
}

/// One mode per (layer, query head), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModes {
    num_layers: usize,
    num_heads: usize,
    modes: Vec<HeadMode>,
}

impl HeadModes {
    pub fn uniform(config: &ModelConfig, mode: HeadMode) -> Self {
        Self {
            num_layers: config.num_layers,
            num_heads: config.num_query_heads,
            modes: vec![mode; config.num_gates()],
        }
    }

    pub fn all_full(config: &ModelConfig) -> Self {
        Self::uniform(config, HeadMode::Full)
    }

    pub fn from_modes(num_layers: usize, num_heads: usize, modes: Vec<HeadMode>) -> Result<Self> {
        if modes.len() != num_layers * num_heads {
            return Err(config_err!(
                "{} modes for {}x{} heads",
                modes.len(),
                num_layers,
                num_heads
            ));
        }
        Ok(Self {
            num_layers,
            num_heads,
            modes,
        })
    }

    pub fn get(&self, layer: usize, head: usize) -> HeadMode {
        self.modes[layer * self.num_heads + head]
    }

    pub fn set(&mut self, layer: usize, head: usize, mode: HeadMode) {
        self.modes[layer * self.num_heads + head] = mode;
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn as_slice(&self) -> &[HeadMode] {
        &self.modes
    }

    pub fn count(&self, mode: HeadMode) -> usize {
        self.modes.iter().filter(|&&m| m == mode).count()
    }

    fn check(&self, config: &ModelConfig, allow_gated: bool) -> Result<()> {
        if self.num_layers != config.num_layers || self.num_heads != config.num_query_heads {
            return Err(config_err!(
                "head modes are {}x{}, model is {}x{}",
                self.num_layers,
                self.num_heads,
                config.num_layers,
                config.num_query_heads
            ));
        }
        for m in &self.modes {
            match m {
                HeadMode::Gated(_) if !allow_gated => {
                    return Err(contract_err!("gated heads are only valid during training"));
                }
                HeadMode::Gated(z) if !(0.0..=1.0).contains(z) => {
                    return Err(contract_err!("gate value {z} outside [0, 1]"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Named weight arrays of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    tensors: BTreeMap<String, Array>,
}

pub(crate) fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

impl Weights {
    /// Expected names and shapes for `config`, in a fixed order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, hd, f, v) = (
            config.model_dim,
            config.head_dim,
            config.mlp_dim,
            config.vocab_size,
        );
        let mut out = vec![(String::from("embed"), vec![v, d])];
        for l in 0..config.num_layers {
            out.push((format!("layers.{l}.attn_norm"), vec![d]));
            for h in 0..config.num_query_heads {
                out.push((format!("layers.{l}.wq.{h}"), vec![d, hd]));
            }
            for g in 0..config.num_kv_heads {
                out.push((format!("layers.{l}.wk.{g}"), vec![d, hd]));
                out.push((format!("layers.{l}.wv.{g}"), vec![d, hd]));
            }
            out.push((format!("layers.{l}.wo"), vec![config.num_query_heads * hd, d]));
            out.push((format!("layers.{l}.mlp_norm"), vec![d]));
            out.push((format!("layers.{l}.w_gate"), vec![d, f]));
            out.push((format!("layers.{l}.w_up"), vec![d, f]));
            out.push((format!("layers.{l}.w_down"), vec![f, d]));
        }
        out.push((String::from("final_norm"), vec![d]));
        out.push((String::from("unembed"), vec![d, v]));
        out
    }

    /// Gaussian init with standard deviation `scale`; norm gains start at 1.
    pub fn init(config: &ModelConfig, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in Self::layout(config) {
            let numel: usize = shape.iter().product();
            let data = if name.ends_with("norm") {
                vec![1.0; numel]
            } else {
                (0..numel).map(|_| scale * normal(rng)).collect()
            };
            tensors.insert(name, Array::new(shape, data)?);
        }
        Ok(Self { tensors })
    }

    /// Builds weights from named arrays, checking them against `config`.
    pub fn from_map(config: &ModelConfig, tensors: BTreeMap<String, Array>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(config);
        if layout.len() != tensors.len() {
            return Err(config_err!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            ));
        }
        for (name, shape) in &layout {
            match tensors.get(name) {
                Some(a) if a.shape() == &shape[..] => {}
                Some(a) => {
                    return Err(config_err!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        a.shape(),
                        shape
                    ))
                }
                None => return Err(config_err!("missing tensor {name}")),
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.tensors
            .get(name)
            .ok_or_else(|| config_err!("missing tensor {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Array::numel).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        let weights = Weights::from_map(&config, weights.tensors)?;
        Ok(Self { config, weights })
    }

    pub fn init(config: ModelConfig, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let weights = Weights::init(&config, scale, rng)?;
        Ok(Self { config, weights })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVEntry {
    pub entry_id: u64,
    pub position: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

/// Entries of one storage slot, ordered by position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadCache {
    entries: Vec<KVEntry>,
}

impl HeadCache {
    pub fn entries(&self) -> &[KVEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn entry_ids(&self) -> BTreeSet<u64> {
        self.entries.iter().map(|e| e.entry_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    slots: Vec<HeadCache>,
    per_query_head: bool,
}

/// Per-layer, per-slot KV storage. Evicted entries are physically removed.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    layers: Vec<LayerCache>,
    group_size: usize,
    num_query_heads: usize,
    next_entry_id: u64,
    next_position: usize,
}

impl KVCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            layers: (0..config.num_layers)
                .map(|_| LayerCache {
                    slots: vec![HeadCache::default(); config.num_kv_heads],
                    per_query_head: false,
                })
                .collect(),
            group_size: config.group_size(),
            num_query_heads: config.num_query_heads,
            next_entry_id: 0,
            next_position: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_slots(&self, layer: usize) -> usize {
        self.layers[layer].slots.len()
    }

    pub fn slot(&self, layer: usize, slot: usize) -> &HeadCache {
        &self.layers[layer].slots[slot]
    }

    pub fn is_per_query_head(&self, layer: usize) -> bool {
        self.layers[layer].per_query_head
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    /// Slot read by `query_head` in `layer`.
    pub fn slot_for_query_head(&self, layer: usize, query_head: usize) -> usize {
        if self.layers[layer].per_query_head {
            query_head
        } else {
            query_head / self.group_size
        }
    }

    /// Query heads reading `slot` in `layer`.
    pub fn readers(&self, layer: usize, slot: usize) -> core::ops::Range<usize> {
        if self.layers[layer].per_query_head {
            slot..slot + 1
        } else {
            slot * self.group_size..(slot + 1) * self.group_size
        }
    }

    /// Position the next committed token must take.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn total_entries(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.slots)
            .map(HeadCache::len)
            .sum()
    }

    /// Every entry id, grouped by (layer, slot).
    pub fn entry_id_sets(&self) -> Vec<Vec<BTreeSet<u64>>> {
        self.layers
            .iter()
            .map(|l| l.slots.iter().map(HeadCache::entry_ids).collect())
            .collect()
    }

    fn alloc_id(&mut self) -> u64 {
        let id = self.next_entry_id;
        self.next_entry_id += 1;
        id
    }

    /// Removes the listed entries from one slot, recording each eviction.
    pub fn evict(
        &mut self,
        layer: usize,
        slot: usize,
        ids: &BTreeSet<u64>,
        ledger: &mut KVLedger,
    ) -> Result<usize> {
        let entries = &mut self.layers[layer].slots[slot].entries;
        let before = entries.len();
        let mut removed = Vec::new();
        entries.retain(|e| {
            let keep = !ids.contains(&e.entry_id);
            if !keep {
                removed.push(e.entry_id);
            }
            keep
        });
        for id in removed {
            ledger.evict(id)?;
        }
        Ok(before - entries.len())
    }

    /// Splits a shared layer into one slot per query head.
    ///
    /// `keep[h]` lists the indices (into the current slot of query head `h`)
    /// retained for that head. Retained entries are copied under fresh ids,
    /// created between steps; every original entry is evicted.
    pub fn replicate_per_query_head(
        &mut self,
        layer: usize,
        keep: &[Vec<usize>],
        ledger: &mut KVLedger,
    ) -> Result<()> {
        if self.layers[layer].per_query_head {
            return Err(contract_err!("layer {layer} is already per query head"));
        }
        if keep.len() != self.num_query_heads {
            return Err(contract_err!(
                "{} keep lists for {} query heads",
                keep.len(),
                self.num_query_heads
            ));
        }
        let old = core::mem::take(&mut self.layers[layer].slots);
        for slot in &old {
            for e in &slot.entries {
                ledger.evict(e.entry_id)?;
            }
        }
        let mut slots = Vec::with_capacity(self.num_query_heads);
        for (h, idx) in keep.iter().enumerate() {
            let src = &old[h / self.group_size].entries;
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            let mut entries = Vec::with_capacity(sorted.len());
            for i in sorted {
                let e = src
                    .get(i)
                    .ok_or_else(|| contract_err!("index {i} out of range"))?;
                let id = self.alloc_id();
                ledger.create(id, layer, h, e.position)?;
                entries.push(KVEntry {
                    entry_id: id,
                    ..e.clone()
                });
            }
            slots.push(HeadCache { entries });
        }
        let lc = &mut self.layers[layer];
        lc.slots = slots;
        lc.per_query_head = true;
        Ok(())
    }
}

/// Mode of one head inside a graph: gates are tape nodes during training.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ModeNode {
    Full,
    Streaming,
    Gated(NodeId),
}

/// Weight leaves bound onto a tape.
pub(crate) struct Bound {
    pub(crate) embed: NodeId,
    pub(crate) layers: Vec<BoundLayer>,
    pub(crate) final_norm: NodeId,
    pub(crate) unembed: NodeId,
    pub(crate) named: Vec<(String, NodeId)>,
}

pub(crate) struct BoundLayer {
    attn_norm: NodeId,
    wq: Vec<NodeId>,
    wk: Vec<NodeId>,
    wv: Vec<NodeId>,
    wo: NodeId,
    mlp_norm: NodeId,
    w_gate: NodeId,
    w_up: NodeId,
    w_down: NodeId,
}

pub(crate) fn bind<'a>(tape: &mut Tape<'a>, model: &'a Model, trainable: bool) -> Result<Bound> {
    bind_with(tape, model, trainable, None)
}

/// Like `bind`, with one named weight replaced by an existing node.
pub(crate) fn bind_with<'a>(
    tape: &mut Tape<'a>,
    model: &'a Model,
    trainable: bool,
    replace: Option<(&str, NodeId)>,
) -> Result<Bound> {
    let mut named = Vec::new();
    let mut leaf = |tape: &mut Tape<'a>, name: String| -> Result<NodeId> {
        if let Some((r, id)) = replace {
            if r == name {
                named.push((name, id));
                return Ok(id);
            }
        }
        let a = model.weights.get(&name)?;
        let id = if trainable {
            tape.param_ref(a)
        } else {
            tape.constant_ref(a)
        };
        named.push((name, id));
        Ok(id)
    };
    let cfg = &model.config;
    let embed = leaf(tape, "embed".into())?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let attn_norm = leaf(tape, format!("layers.{l}.attn_norm"))?;
        let wq = (0..cfg.num_query_heads)
            .map(|h| leaf(tape, format!("layers.{l}.wq.{h}")))
            .collect::<Result<Vec<_>>>()?;
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for g in 0..cfg.num_kv_heads {
            wk.push(leaf(tape, format!("layers.{l}.wk.{g}"))?);
            wv.push(leaf(tape, format!("layers.{l}.wv.{g}"))?);
        }
        layers.push(BoundLayer {
            attn_norm,
            wq,
            wk,
            wv,
            wo: leaf(tape, format!("layers.{l}.wo"))?,
            mlp_norm: leaf(tape, format!("layers.{l}.mlp_norm"))?,
            w_gate: leaf(tape, format!("layers.{l}.w_gate"))?,
            w_up: leaf(tape, format!("layers.{l}.w_up"))?,
            w_down: leaf(tape, format!("layers.{l}.w_down"))?,
        });
    }
    let final_norm = leaf(tape, "final_norm".into())?;
    let unembed = leaf(tape, "unembed".into())?;
    Ok(Bound {
        embed,
        layers,
        final_norm,
        unembed,
        named,
    })
}

pub(crate) struct GraphOutput {
    pub(crate) logits: NodeId,
    /// Final normed hidden states, the input of the output projection.
    pub(crate) hidden: NodeId,
    /// Rotated keys and values of the new tokens per layer and KV head.
    pub(crate) new_kv: Vec<Vec<(NodeId, NodeId)>>,
    /// Attention probabilities per layer and query head over the slot's
    /// cached entries followed by the new tokens. `None` for gated heads.
    pub(crate) attention: Vec<Vec<Option<NodeId>>>,
}

struct Rope {
    cos: NodeId,
    sin: NodeId,
    rotate: NodeId,
}

fn rope_tables(tape: &mut Tape<'_>, cfg: &ModelConfig, positions: &[usize]) -> Result<Rope> {
    let d = cfg.head_dim;
    let half = d / 2;
    let mut cos = Vec::with_capacity(positions.len() * d);
    let mut sin = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        let (mut c_row, mut s_row) = (vec![0.0; d], vec![0.0; d]);
        for i in 0..half {
            let freq = libm::pow(cfg.rope_base, -(2.0 * i as f64) / d as f64);
            let angle = p as f64 * freq;
            c_row[i] = libm::cos(angle);
            c_row[i + half] = c_row[i];
            s_row[i] = libm::sin(angle);
            s_row[i + half] = s_row[i];
        }
        cos.extend(c_row);
        sin.extend(s_row);
    }
    // x . rotate == [-x2, x1]
    let mut r = vec![0.0; d * d];
    for j in 0..half {
        r[(j + half) * d + j] = -1.0;
        r[j * d + j + half] = 1.0;
    }
    let t = positions.len();
    Ok(Rope {
        cos: tape.constant(Array::new(vec![t, d], cos)?),
        sin: tape.constant(Array::new(vec![t, d], sin)?),
        rotate: tape.constant(Array::new(vec![d, d], r)?),
    })
}

fn apply_rope(tape: &mut Tape<'_>, x: NodeId, rope: &Rope) -> Result<NodeId> {
    let a = tape.mul(x, rope.cos)?;
    let rot = tape.matmul(x, rope.rotate)?;
    let b = tape.mul(rot, rope.sin)?;
    tape.add(a, b)
}

fn attention_mask(key_positions: &[usize], query_positions: &[usize], streaming: Option<&StreamingSpec>) -> Array {
    let mut data = Vec::with_capacity(key_positions.len() * query_positions.len());
    for &q in query_positions {
        for &k in key_positions {
            let ok = match streaming {
                Some(spec) => streaming_allowed(q, k, spec),
                None => k <= q,
            };
            data.push(if ok { 0.0 } else { f64::NEG_INFINITY });
        }
    }
    Array::new(vec![query_positions.len(), key_positions.len()], data).expect("mask shape")
}

/// Per-head output of the hybrid attention `z * full + (1 - z) * streaming`.
///
/// Both variants share the same scores and differ only in their mask.
pub(crate) fn hybrid_node(
    tape: &mut Tape<'_>,
    scores: NodeId,
    values: NodeId,
    z: NodeId,
    full_mask: &Array,
    streaming_mask: &Array,
) -> Result<(NodeId, NodeId, NodeId)> {
    let pf = tape.row_softmax_with_additive_mask(scores, full_mask)?;
    let ps = tape.row_softmax_with_additive_mask(scores, streaming_mask)?;
    let of = tape.matmul(pf, values)?;
    let os = tape.matmul(ps, values)?;
    let one = tape.constant(Array::scalar(1.0));
    let one_minus = tape.sub(one, z)?;
    let a = tape.mul(of, z)?;
    let b = tape.mul(os, one_minus)?;
    Ok((tape.add(a, b)?, pf, ps))
}

/// Hybrid attention of one head over explicit `queries`, `keys` and
/// `values` (`[t, d]`, `[s, d]`, `[s, d]`) with their absolute positions.
pub fn hybrid_attend(
    queries: &Array,
    keys: &Array,
    values: &Array,
    query_positions: &[usize],
    key_positions: &[usize],
    z: f64,
    spec: &StreamingSpec,
) -> Result<Array> {
    if keys.rows() == 0 || key_positions.is_empty() {
        return Err(contract_err!("hybrid attention over an empty KV set"));
    }
    if !(0.0..=1.0).contains(&z) {
        return Err(contract_err!("gate value {z} outside [0, 1]"));
    }
    if queries.rank() != 2 || keys.rank() != 2 || queries.cols() != keys.cols() {
        return Err(config_err!("query/key shapes {:?} {:?}", queries.shape(), keys.shape()));
    }
    if query_positions.len() != queries.rows() || key_positions.len() != keys.rows() {
        return Err(config_err!("position counts do not match rows"));
    }
    let mut tape = Tape::new();
    let q = tape.constant_ref(queries);
    let k = tape.constant_ref(keys);
    let v = tape.constant_ref(values);
    let kt = tape.transpose_last2(k)?;
    let raw = tape.matmul(q, kt)?;
    let scores = tape.scale(raw, 1.0 / libm::sqrt(queries.cols() as f64));
    let full = attention_mask(key_positions, query_positions, None);
    let stream = attention_mask(key_positions, query_positions, Some(spec));
    let zn = tape.constant(Array::scalar(z));
    let (out, _, _) = hybrid_node(&mut tape, scores, v, zn, &full, &stream)?;
    Ok(tape.value(out).clone())
}

/// Records the forward pass of `tokens` at `positions` on top of `cache`.
pub(crate) fn forward_graph(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    bound: &Bound,
    cache: &KVCache,
    tokens: &[u32],
    positions: &[usize],
    modes: &[ModeNode],
    streaming: &StreamingSpec,
) -> Result<GraphOutput> {
    let d = cfg.head_dim;
    if let Some(&bad) = tokens.iter().find(|&&tok| tok as usize >= cfg.vocab_size) {
        return Err(config_err!("token {bad} outside vocabulary {}", cfg.vocab_size));
    }
    if positions.iter().any(|&p| p >= cfg.max_positions) {
        return Err(config_err!("position beyond max_positions {}", cfg.max_positions));
    }
    let rope = rope_tables(tape, cfg, positions)?;
    let inv_sqrt_d = 1.0 / libm::sqrt(d as f64);
    let mut x = tape.embedding_lookup(bound.embed, tokens)?;
    let mut new_kv = Vec::with_capacity(cfg.num_layers);
    let mut attention = Vec::with_capacity(cfg.num_layers);
    for (l, bl) in bound.layers.iter().enumerate() {
        let normed = tape.rms_normalize(x, NORM_EPS);
        let h = tape.mul(normed, bl.attn_norm)?;
        let mut kv = Vec::with_capacity(cfg.num_kv_heads);
        for g in 0..cfg.num_kv_heads {
            let k = tape.matmul(h, bl.wk[g])?;
            let k = apply_rope(tape, k, &rope)?;
            let v = tape.matmul(h, bl.wv[g])?;
            kv.push((k, v));
        }
        let mut slot_inputs: BTreeMap<usize, (NodeId, NodeId, Array, Array)> = BTreeMap::new();
        let mut heads = Vec::with_capacity(cfg.num_query_heads);
        let mut layer_attn = Vec::with_capacity(cfg.num_query_heads);
        for qh in 0..cfg.num_query_heads {
            let slot = cache.slot_for_query_head(l, qh);
            if !slot_inputs.contains_key(&slot) {
                let (k_new, v_new) = kv[qh / cfg.group_size()];
                let cached = cache.slot(l, slot);
                let kt_new = tape.transpose_last2(k_new)?;
                let (kt, vals) = if cached.is_empty() {
                    (kt_new, v_new)
                } else {
                    let r = cached.len();
                    let mut kt_c = vec![0.0; d * r];
                    let mut vt_c = vec![0.0; d * r];
                    for (j, e) in cached.entries.iter().enumerate() {
                        for i in 0..d {
                            kt_c[i * r + j] = e.key[i];
                            vt_c[i * r + j] = e.value[i];
                        }
                    }
                    let kt_c = tape.constant(Array::new(vec![d, r], kt_c)?);
                    let vt_c = tape.constant(Array::new(vec![d, r], vt_c)?);
                    let kt = tape.concat_last_axis(&[kt_c, kt_new])?;
                    let vt_new = tape.transpose_last2(v_new)?;
                    let vt = tape.concat_last_axis(&[vt_c, vt_new])?;
                    (kt, tape.transpose_last2(vt)?)
                };
                let mut key_pos = cached.positions();
                key_pos.extend_from_slice(positions);
                let full = attention_mask(&key_pos, positions, None);
                let stream = attention_mask(&key_pos, positions, Some(streaming));
                slot_inputs.insert(slot, (kt, vals, full, stream));
            }
            let (kt, vals, full, stream) = &slot_inputs[&slot];
            let q = tape.matmul(h, bl.wq[qh])?;
            let q = apply_rope(tape, q, &rope)?;
            let raw = tape.matmul(q, *kt)?;
            let scores = tape.scale(raw, inv_sqrt_d);
            let (out, probs) = match modes[l * cfg.num_query_heads + qh] {
                ModeNode::Full => {
                    let p = tape.row_softmax_with_additive_mask(scores, full)?;
                    (tape.matmul(p, *vals)?, Some(p))
                }
                ModeNode::Streaming => {
                    let p = tape.row_softmax_with_additive_mask(scores, stream)?;
                    (tape.matmul(p, *vals)?, Some(p))
                }
                ModeNode::Gated(z) => {
                    let (o, _, _) = hybrid_node(tape, scores, *vals, z, full, stream)?;
                    (o, None)
                }
            };
            heads.push(out);
            layer_attn.push(probs);
        }
        let cat = tape.concat_last_axis(&heads)?;
        let attn_out = tape.matmul(cat, bl.wo)?;
        x = tape.add(x, attn_out)?;
        let normed = tape.rms_normalize(x, NORM_EPS);
        let m = tape.mul(normed, bl.mlp_norm)?;
        let a = tape.matmul(m, bl.w_gate)?;
        let sa = tape.sigmoid(a);
        let silu = tape.mul(a, sa)?;
        let u = tape.matmul(m, bl.w_up)?;
        let act = tape.mul(silu, u)?;
        let down = tape.matmul(act, bl.w_down)?;
        x = tape.add(x, down)?;
        new_kv.push(kv);
        attention.push(layer_attn);
    }
    let normed = tape.rms_normalize(x, NORM_EPS);
    let hidden = tape.mul(normed, bound.final_norm)?;
    let logits = tape.matmul(hidden, bound.unembed)?;
    Ok(GraphOutput {
        logits,
        hidden,
        new_kv,
        attention,
    })
}

pub(crate) fn mode_nodes(modes: &HeadModes, tape: &mut Tape<'_>) -> Vec<ModeNode> {
    modes
        .as_slice()
        .iter()
        .map(|m| match *m {
            HeadMode::Full => ModeNode::Full,
            HeadMode::Streaming => ModeNode::Streaming,
            HeadMode::Gated(z) => ModeNode::Gated(tape.constant(Array::scalar(z))),
        })
        .collect()
}

/// Attention probabilities recorded by a forward pass, indexed
/// `[layer][query_head]`. Columns are the entries of the query head's slot
/// (cached entries first, then the chunk's own tokens when committed).
pub type AttentionRecord = Vec<Vec<Array>>;

#[derive(Debug, Clone)]
pub struct ChunkOutput {
    /// `[tokens, vocab]`.
    pub logits: Array,
    pub attention: Option<AttentionRecord>,
}

fn check_positions(cache: &KVCache, positions: &[usize], tokens: &[u32]) -> Result<()> {
    if positions.len() != tokens.len() {
        return Err(contract_err!(
            "{} positions for {} tokens",
            positions.len(),
            tokens.len()
        ));
    }
    if positions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(contract_err!("positions must be strictly increasing"));
    }
    if let Some(&first) = positions.first() {
        if first < cache.next_position {
            return Err(contract_err!(
                "position {first} collides with cached positions below {}",
                cache.next_position
            ));
        }
    }
    Ok(())
}

/// Runs one forward pass over a chunk, appending its KVs to every slot.
///
/// The pass is one ledger step: new entries are created inside it and the
/// step is closed before returning, so callers may evict afterwards.
#[allow(clippy::too_many_arguments)]
pub fn forward_chunk(
    model: &Model,
    cache: &mut KVCache,
    tokens: &[u32],
    positions: &[usize],
    head_modes: &HeadModes,
    streaming: &StreamingSpec,
    record_attention: bool,
    kind: StepKind,
    ledger: &mut KVLedger,
) -> Result<ChunkOutput> {
    let cfg = &model.config;
    head_modes.check(cfg, false)?;
    check_positions(cache, positions, tokens)?;
    if tokens.is_empty() {
        return Err(contract_err!("empty chunk"));
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, model, false)?;
    let modes = mode_nodes(head_modes, &mut tape);
    let out = forward_graph(&mut tape, cfg, &bound, cache, tokens, positions, &modes, streaming)?;
    let attention = record_attention.then(|| collect_attention(&tape, &out));

    let first = positions[0];
    let last = *positions.last().expect("non-empty");
    ledger.begin_step(kind, first..last + 1)?;
    let mut active = Vec::new();
    for l in 0..cfg.num_layers {
        for slot in 0..cache.num_slots(l) {
            let kv_head = cache.readers(l, slot).start / cfg.group_size();
            let (kn, vn) = out.new_kv[l][kv_head];
            let (keys, vals) = (tape.value(kn), tape.value(vn));
            for (i, &p) in positions.iter().enumerate() {
                let id = cache.alloc_id();
                ledger.create(id, l, slot, p)?;
                cache.layers[l].slots[slot].entries.push(KVEntry {
                    entry_id: id,
                    position: p,
                    key: keys.row(i).to_vec(),
                    value: vals.row(i).to_vec(),
                });
            }
            let readers = cache.readers(l, slot);
            let all_streaming = readers
                .clone()
                .all(|h| head_modes.get(l, h) == HeadMode::Streaming);
            let entries = &cache.layers[l].slots[slot].entries;
            let count = if all_streaming {
                entries
                    .iter()
                    .filter(|e| e.position < streaming.sink_size || e.position >= first || first - e.position < streaming.window_size)
                    .count()
            } else {
                entries.len()
            };
            active.push(HeadCount {
                layer: l,
                head: slot,
                resident: entries.len(),
                active: count,
            });
        }
    }
    ledger.close_step(&active)?;
    cache.next_position = last + 1;
    Ok(ChunkOutput {
        logits: tape.value(out.logits).clone(),
        attention,
    })
}

fn collect_attention(tape: &Tape<'_>, out: &GraphOutput) -> AttentionRecord {
    out.attention
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|p| p.map_or_else(|| Array::zeros(&[0, 0]), |id| tape.value(id).clone()))
                .collect()
        })
        .collect()
}

/// Attention of probe queries at their true positions over the resident
/// cache plus the probes themselves. The cache is left untouched.
pub fn probe_forward(
    model: &Model,
    cache: &KVCache,
    probe_tokens: &[u32],
    probe_positions: &[usize],
    head_modes: &HeadModes,
    streaming: &StreamingSpec,
) -> Result<AttentionRecord> {
    let cfg = &model.config;
    head_modes.check(cfg, false)?;
    check_positions(cache, probe_positions, probe_tokens)?;
    if probe_tokens.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, model, false)?;
    let modes = mode_nodes(head_modes, &mut tape);
    let out = forward_graph(
        &mut tape,
        cfg,
        &bound,
        cache,
        probe_tokens,
        probe_positions,
        &modes,
        streaming,
    )?;
    Ok(collect_attention(&tape, &out))
}

/// Forward pass over a full sequence on a training tape, with no cache.
pub(crate) fn forward_sequence(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    bound: &Bound,
    tokens: &[u32],
    modes: &[ModeNode],
    streaming: &StreamingSpec,
) -> Result<GraphOutput> {
    let cache = KVCache::new(cfg);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    forward_graph(tape, cfg, bound, &cache, tokens, &positions, modes, streaming)
}

/// Full-sequence logits without a cache (single-pass, no ledger).
pub fn sequence_logits(model: &Model, tokens: &[u32], head_modes: &HeadModes, streaming: &StreamingSpec) -> Result<Array> {
    head_modes.check(&model.config, true)?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, model, false)?;
    let modes = mode_nodes(head_modes, &mut tape);
    let out = forward_sequence(&mut tape, &model.config, &bound, tokens, &modes, streaming)?;
    Ok(tape.value(out.logits).clone())
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// Called after every decode step with the position of the next query.
pub trait DecodeHook {
    fn after_step(&mut self, cache: &mut KVCache, ledger: &mut KVLedger, next_position: usize) -> Result<()>;
}

/// Hook that never evicts.
pub struct NoEviction;

impl DecodeHook for NoEviction {
    fn after_step(&mut self, _: &mut KVCache, _: &mut KVLedger, _: usize) -> Result<()> {
        Ok(())
    }
}

/// Greedy decoding of `num_steps` tokens.
///
/// The first token is the argmax of `first_logits` (the last pre-fill
/// position). Each step feeds the pending token through the model, which
/// creates its KVs, then calls the hook.
#[allow(clippy::too_many_arguments)]
pub fn decode_greedy(
    model: &Model,
    cache: &mut KVCache,
    head_modes: &HeadModes,
    streaming: &StreamingSpec,
    first_logits: &[f64],
    num_steps: usize,
    ledger: &mut KVLedger,
    hook: &mut dyn DecodeHook,
) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(num_steps);
    let mut logits = first_logits.to_vec();
    for _ in 0..num_steps {
        let token = argmax(&logits);
        let pos = cache.next_position();
        let chunk = forward_chunk(
            model,
            cache,
            &[token],
            &[pos],
            head_modes,
            streaming,
            false,
            StepKind::Decode,
            ledger,
        )?;
        hook.after_step(cache, ledger, pos + 1)?;
        out.push(token);
        logits = chunk.logits.into_data();
    }
    Ok(out)
}

/// Mean next-token negative log-likelihood of `continuation` when it is
/// fed token by token after the pre-fill, like decoding but with the
/// ground truth as input.
#[allow(clippy::too_many_arguments)]
pub fn decode_teacher_forced(
    model: &Model,
    cache: &mut KVCache,
    head_modes: &HeadModes,
    streaming: &StreamingSpec,
    first_logits: &[f64],
    continuation: &[u32],
    ledger: &mut KVLedger,
    hook: &mut dyn DecodeHook,
) -> Result<f64> {
    if continuation.is_empty() {
        return Err(contract_err!("empty continuation"));
    }
    let mut logits = first_logits.to_vec();
    let mut total = 0.0;
    for &token in continuation {
        total += log_softmax_at(&logits, token as usize);
        let pos = cache.next_position();
        let chunk = forward_chunk(
            model,
            cache,
            &[token],
            &[pos],
            head_modes,
            streaming,
            false,
            StepKind::Decode,
            ledger,
        )?;
        hook.after_step(cache, ledger, pos + 1)?;
        logits = chunk.logits.into_data();
    }
    Ok(-total / continuation.len() as f64)
}

pub(crate) fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|x| libm::exp(x - max)).sum();
    logits[index] - max - libm::log(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Model {
        let cfg = ModelConfig::new(2, 4, 2, 8, 16, 64);
        Model::init(cfg, 0.3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    #[test]
    fn streaming_rule_examples() {
        let s = StreamingSpec::new(2, 3).unwrap();
        assert!(streaming_allowed(10, 10, &s));
        assert!(streaming_allowed(10, 1, &s));
        assert!(!streaming_allowed(10, 5, &s));
        assert!(streaming_allowed(10, 8, &s));
        assert!(!streaming_allowed(10, 7, &s));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(1, 4, 3, 8, 16, 64);
        assert!(cfg.validate().is_err());
        cfg.num_kv_heads = 2;
        cfg.validate().unwrap();
        cfg.model_dim += 1;
        cfg.validate().unwrap();
        cfg.head_dim = 7;
        assert!(cfg.validate().is_err());
        assert!(StreamingSpec::new(0, 0).is_err());
    }

    #[test]
    fn hybrid_extremes_and_midpoint() {
        let q = Array::from_rows(&[[1.0, 0.0]]).unwrap();
        let k = Array::from_rows(&[[2.0, 0.0], [0.0, 1.0]]).unwrap();
        let v = Array::from_rows(&[[1.0, 2.0], [3.0, 5.0]]).unwrap();
        // The key at position 0 is outside a window of 1 with no sink.
        let spec = StreamingSpec::new(0, 1).unwrap();
        let full = hybrid_attend(&q, &k, &v, &[5], &[0, 5], 1.0, &spec).unwrap();
        let stream = hybrid_attend(&q, &k, &v, &[5], &[0, 5], 0.0, &spec).unwrap();
        let half = hybrid_attend(&q, &k, &v, &[5], &[0, 5], 0.5, &spec).unwrap();
        // scores 2/sqrt2 and 0 -> weights e^{sqrt2}, 1
        let w = libm::exp(core::f64::consts::SQRT_2);
        let p0 = w / (w + 1.0);
        let expect_full = [p0 * 1.0 + (1.0 - p0) * 3.0, p0 * 2.0 + (1.0 - p0) * 5.0];
        assert!((full.data()[0] - expect_full[0]).abs() < 1e-14);
        assert!((full.data()[1] - expect_full[1]).abs() < 1e-14);
        assert_eq!(stream.data(), &[3.0, 5.0]);
        for i in 0..2 {
            let mean = 0.5 * (full.data()[i] + stream.data()[i]);
            assert!((half.data()[i] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn hybrid_rejects_empty_kv() {
        let q = Array::zeros(&[1, 2]);
        let e = Array::zeros(&[0, 2]);
        let spec = StreamingSpec::default();
        assert!(hybrid_attend(&q, &e, &e, &[0], &[], 1.0, &spec).is_err());
    }

    #[test]
    fn chunk_appends_entries_and_shapes_logits() {
        let m = tiny();
        let mut cache = KVCache::new(&m.config);
        let mut ledger = KVLedger::new(2, 2);
        let modes = HeadModes::all_full(&m.config);
        let out = forward_chunk(
            &m,
            &mut cache,
            &[1, 2, 3, 4],
            &[0, 1, 2, 3],
            &modes,
            &StreamingSpec::default(),
            false,
            StepKind::PrefillChunk,
            &mut ledger,
        )
        .unwrap();
        assert_eq!(out.logits.shape(), &[4, 16]);
        for l in 0..2 {
            for s in 0..2 {
                assert_eq!(cache.slot(l, s).len(), 4);
            }
        }
        assert_eq!(ledger.total_resident(), 16);
    }

    #[test]
    fn position_collision_is_rejected() {
        let m = tiny();
        let mut cache = KVCache::new(&m.config);
        let mut ledger = KVLedger::new(2, 2);
        let modes = HeadModes::all_full(&m.config);
        let spec = StreamingSpec::default();
        forward_chunk(&m, &mut cache, &[1, 2], &[0, 1], &modes, &spec, false, StepKind::PrefillChunk, &mut ledger).unwrap();
        let err = forward_chunk(&m, &mut cache, &[3], &[1], &modes, &spec, false, StepKind::PrefillChunk, &mut ledger);
        assert!(matches!(err, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn streaming_heads_never_see_old_tokens() {
        let m = tiny();
        let mut cache = KVCache::new(&m.config);
        let mut ledger = KVLedger::new(2, 2);
        let modes = HeadModes::uniform(&m.config, HeadMode::Streaming);
        let spec = StreamingSpec::new(0, 2).unwrap();
        let out = forward_chunk(&m, &mut cache, &[5, 6, 7, 8], &[0, 1, 2, 3], &modes, &spec, true, StepKind::PrefillChunk, &mut ledger).unwrap();
        for layer in out.attention.unwrap() {
            for p in layer {
                assert_eq!(p.row(3)[0], 0.0);
                assert_eq!(p.row(3)[1], 0.0);
                assert!(p.row(3)[2] > 0.0);
            }
        }
    }

    #[test]
    fn gated_modes_rejected_at_inference() {
        let m = tiny();
        let mut cache = KVCache::new(&m.config);
        let mut ledger = KVLedger::new(2, 2);
        let modes = HeadModes::uniform(&m.config, HeadMode::Gated(0.5));
        let r = forward_chunk(&m, &mut cache, &[1], &[0], &modes, &StreamingSpec::default(), false, StepKind::PrefillChunk, &mut ledger);
        assert!(r.is_err());
    }

    #[test]
    fn zero_decode_steps_is_empty() {
        let m = tiny();
        let mut cache = KVCache::new(&m.config);
        let mut ledger = KVLedger::new(2, 2);
        let out = decode_greedy(&m, &mut cache, &HeadModes::all_full(&m.config), &StreamingSpec::default(), &[0.0; 16], 0, &mut ledger, &mut NoEviction).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn zero_probes_is_empty() {
        let m = tiny();
        let cache = KVCache::new(&m.config);
        let r = probe_forward(&m, &cache, &[], &[], &HeadModes::all_full(&m.config), &StreamingSpec::default()).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
