//! Synthetic token streams: Zipf filler, a copy-heavy recall corpus that
//! stands in for natural long-context text, and passkey retrieval tasks.
//!
//! Vocabulary layout: id 0 is the needle marker, id 1 the query marker,
//! then `num_keys` passkey symbols, then filler. Markers never occur as
//! filler, so a passkey prompt holds exactly one needle.
//!
//! A passkey prompt reads `filler NEEDLE key filler ... QUERY NEEDLE` and
//! the answer is `key`. Ending on the needle marker turns retrieval into
//! the induction pattern the recall corpus teaches.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Zipf};

use crate::error::config_err;
use crate::Result;

pub const NEEDLE: u32 = 0;
pub const QUERY: u32 = 1;

/// Tokens after the needle span: the query marker and a repeated needle
/// marker.
pub const QUERY_SUFFIX_LEN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VocabLayout {
    pub vocab_size: usize,
    pub num_keys: usize,
    /// Zipf exponent of the filler.
    pub zipf_exponent: f64,
}

impl VocabLayout {
    pub fn new(vocab_size: usize, num_keys: usize) -> Result<Self> {
        let v = Self {
            vocab_size,
            num_keys,
            zipf_exponent: 1.0,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_keys == 0 || self.vocab_size < self.filler_start() as usize + 1 {
            return Err(config_err!(
                "vocabulary of {} cannot hold 2 markers, {} keys and filler",
                self.vocab_size,
                self.num_keys
            ));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(config_err!("zipf exponent must be positive"));
        }
        Ok(())
    }

    pub fn key(&self, i: usize) -> u32 {
        2 + i as u32
    }

    pub fn is_key(&self, token: u32) -> bool {
        token >= 2 && token < self.filler_start()
    }

    pub fn filler_start(&self) -> u32 {
        2 + self.num_keys as u32
    }

    pub fn num_filler(&self) -> usize {
        self.vocab_size - self.filler_start() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskInstance {
    pub tokens: Vec<u32>,
    pub answer: Vec<u32>,
    /// Half-open span of the needle marker and key.
    pub needle_span: Option<(usize, usize)>,
}

/// I.i.d. Zipf tokens over `0..vocab`, id 0 being the most frequent.
pub fn gen_zipf(seq_len: usize, vocab: usize, exponent: f64, rng: &mut impl Rng) -> Result<Vec<u32>> {
    if vocab == 0 {
        return Err(config_err!("empty vocabulary"));
    }
    if !(exponent > 0.0) {
        return Err(config_err!("zipf exponent must be positive"));
    }
    let dist = Zipf::new(vocab as u64, exponent).map_err(|_| config_err!("zipf exponent must be positive"))?;
    Ok((0..seq_len)
        .map(|_| (dist.sample(rng) as u32 - 1).min(vocab as u32 - 1))
        .collect())
}

/// Filler of the layout, shifted past markers and keys.
pub fn gen_filler(layout: &VocabLayout, seq_len: usize, rng: &mut impl Rng) -> Result<Vec<u32>> {
    let mut t = gen_zipf(seq_len, layout.num_filler(), layout.zipf_exponent, rng)?;
    let off = layout.filler_start();
    t.iter_mut().for_each(|x| *x += off);
    Ok(t)
}

/// Zipf stream over every non-marker token with `num_copies` verbatim
/// repeats of earlier spans.
///
/// The sequence is split into `num_copies` regions; region `c` ends with a
/// copy of a span starting anywhere before it, so copy distances range up
/// to the whole prefix.
pub fn gen_recall_corpus(
    layout: &VocabLayout,
    seq_len: usize,
    span_len: usize,
    num_copies: usize,
    rng: &mut impl Rng,
) -> Result<Vec<u32>> {
    if num_copies > 0 && (span_len == 0 || span_len * num_copies >= seq_len) {
        return Err(config_err!(
            "{num_copies} copies of {span_len} tokens do not fit in {seq_len}"
        ));
    }
    let mut t = gen_zipf(seq_len, layout.vocab_size - 2, layout.zipf_exponent, rng)?;
    t.iter_mut().for_each(|x| *x += 2);
    if num_copies == 0 {
        return Ok(t);
    }
    let region = seq_len / num_copies;
    for c in 0..num_copies {
        let target = (c + 1) * region - span_len;
        if target == 0 {
            continue;
        }
        let source = rng.gen_range(0..=target.saturating_sub(span_len));
        for i in 0..span_len {
            t[target + i] = t[source + i];
        }
    }
    Ok(t)
}

/// Passkey prompt of `seq_len` tokens with the needle at `depth_fraction`
/// of the available range; depth 0 puts it at position 0.
pub fn gen_passkey(
    layout: &VocabLayout,
    seq_len: usize,
    depth_fraction: f64,
    key_len: usize,
    rng: &mut impl Rng,
) -> Result<TaskInstance> {
    if key_len == 0 {
        return Err(config_err!("passkey needs at least one key token"));
    }
    if seq_len <= key_len + 1 + QUERY_SUFFIX_LEN {
        return Err(config_err!("sequence of {seq_len} too short for a key of {key_len}"));
    }
    if !(0.0..=1.0).contains(&depth_fraction) {
        return Err(config_err!("depth {depth_fraction} outside [0, 1]"));
    }
    let mut tokens = gen_filler(layout, seq_len, rng)?;
    let needle_len = 1 + key_len;
    let room = seq_len - QUERY_SUFFIX_LEN - needle_len;
    let start = libm::round(depth_fraction * room as f64) as usize;
    let answer: Vec<u32> = (0..key_len)
        .map(|_| layout.key(rng.gen_range(0..layout.num_keys)))
        .collect();
    tokens[start] = NEEDLE;
    tokens[start + 1..start + needle_len].copy_from_slice(&answer);
    tokens[seq_len - 2] = QUERY;
    tokens[seq_len - 1] = NEEDLE;
    Ok(TaskInstance {
        tokens,
        answer,
        needle_span: Some((start, start + needle_len)),
    })
}

/// Training distribution for the language-model objective.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CorpusKind {
    Recall,
    Passkey,
    /// Passkey sequences with this probability, recall otherwise.
    Mixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Corpus {
    pub layout: VocabLayout,
    pub kind: CorpusKind,
    pub span_len: usize,
    pub num_copies: usize,
    pub key_len: usize,
}

impl Corpus {
    pub fn new(layout: VocabLayout, kind: CorpusKind) -> Self {
        Self {
            layout,
            kind,
            span_len: 8,
            num_copies: 4,
            key_len: 1,
        }
    }

    /// One training sequence of `len + 1` tokens: inputs are the first
    /// `len`, targets the last `len`. Passkey sequences end with their
    /// answer and place the needle at a uniform depth.
    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Result<Vec<u32>> {
        let passkey = match self.kind {
            CorpusKind::Recall => false,
            CorpusKind::Passkey => true,
            CorpusKind::Mixed(p) => rng.gen_bool(p.clamp(0.0, 1.0)),
        };
        if passkey {
            let depth = rng.gen_range(0.0..=1.0);
            let task = gen_passkey(&self.layout, len + 1 - self.key_len, depth, self.key_len, rng)?;
            let mut t = task.tokens;
            t.extend_from_slice(&task.answer);
            Ok(t)
        } else {
            gen_recall_corpus(&self.layout, len + 1, self.span_len, self.num_copies, rng)
        }
    }
}
