//! Toy word-level tokenizer, vocabulary, MLM masking and batch assembly.

pub mod synthetic;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const BOS: u32 = 0;
pub const PAD: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<s>", "<pad>", "<mask>", "<unk>"];
pub const NUM_SPECIAL: u32 = SPECIAL_TOKENS.len() as u32;

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Reads a corpus file: one document per line, blank lines skipped.
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect())
}

/// Deterministic split: the last `fraction` of documents are held out.
pub fn split_held_out(documents: &[String], fraction: f64) -> (Vec<String>, Vec<String>) {
    let held = ((documents.len() as f64) * fraction).round() as usize;
    let cut = documents.len() - held.min(documents.len());
    (documents[..cut].to_vec(), documents[cut..].to_vec())
}

/// Token/id map with the four reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (id, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*special) {
                return Err(Error::Config(format!(
                    "vocabulary line {} must be {special}",
                    id + 1
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Config(format!(
                    "duplicate vocabulary entry {tok:?} on line {}",
                    id + 1
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Builds from documents, keeping the `max_size - 4` most frequent
    /// tokens; ties broken lexicographically.
    pub fn build<S: AsRef<str>>(documents: &[S], max_size: usize) -> Result<Self> {
        if max_size <= SPECIAL_TOKENS.len() {
            return Err(Error::Config(format!(
                "vocabulary max_size must be at least {}, got {max_size}",
                SPECIAL_TOKENS.len() + 1
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for doc in documents {
            for tok in tokenize(doc.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyInput("build_vocab"));
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIAL_TOKENS.len());
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let tokens: Vec<&str> = ids
            .iter()
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]))
            .collect();
        detokenize(&tokens)
    }

    /// One token per line; line number (from 0) is the id.
    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// MLM corruption recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    /// Probability that an eligible position is selected.
    pub rate: f64,
    /// Share of selected positions replaced by `<mask>`.
    pub mask_fraction: f64,
    /// Share replaced by a random non-special id; the rest stay unchanged.
    pub random_fraction: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask_fraction: 0.8,
            random_fraction: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.rate)
            && self.mask_fraction >= 0.0
            && self.random_fraction >= 0.0
            && self.mask_fraction + self.random_fraction <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid masking recipe {self:?}")))
        }
    }
}

/// What happened to a selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random,
    Keep,
}

/// A padded batch of corrupted sequences with its MLM targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// `B x n_max` input ids after corruption; `<pad>` past each length.
    pub token_ids: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
    /// Selected positions per sequence, ascending, within `[1, n_k)`.
    pub mask_sets: Vec<Vec<usize>>,
    /// True ids at the selected positions, parallel to `mask_sets`.
    pub original_ids: Vec<Vec<u32>>,
    pub replacements: Vec<Vec<Replacement>>,
}

impl MaskedBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn n_max(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }

    /// Unpadded input rows.
    pub fn sequences(&self) -> Vec<&[u32]> {
        self.token_ids
            .iter()
            .zip(&self.lengths)
            .map(|(row, &n)| &row[..n])
            .collect()
    }

    pub fn is_valid(&self, row: usize, pos: usize) -> bool {
        pos < self.lengths[row]
    }

    pub fn token_count(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn masked_count(&self) -> usize {
        self.mask_sets.iter().map(Vec::len).sum()
    }

    /// `(true id, packed column)` for every masked position, where columns
    /// number the unpadded tokens of all rows consecutively.
    pub fn targets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.masked_count());
        let mut start = 0;
        for (k, positions) in self.mask_sets.iter().enumerate() {
            for (&pos, &id) in positions.iter().zip(&self.original_ids[k]) {
                out.push((id as usize, start + pos));
            }
            start += self.lengths[k];
        }
        out
    }

    /// The uncorrupted ids of row `k`.
    pub fn original_row(&self, k: usize) -> Vec<u32> {
        let mut row = self.token_ids[k][..self.lengths[k]].to_vec();
        for (&pos, &id) in self.mask_sets[k].iter().zip(&self.original_ids[k]) {
            row[pos] = id;
        }
        row
    }
}

/// Selects and corrupts positions `1..n_k` of each sequence. Random
/// replacements are drawn from the non-special ids below `vocab_size`.
pub fn apply_masking(
    sequences: &[Vec<u32>],
    vocab_size: usize,
    recipe: &MaskingConfig,
    seed: u64,
) -> Result<MaskedBatch> {
    recipe.validate()?;
    let n_max = sequences.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = SplitMix64::new(seed);
    let random_pool = (vocab_size as u64).saturating_sub(NUM_SPECIAL as u64);
    let mut batch = MaskedBatch {
        token_ids: Vec::with_capacity(sequences.len()),
        lengths: Vec::with_capacity(sequences.len()),
        mask_sets: Vec::with_capacity(sequences.len()),
        original_ids: Vec::with_capacity(sequences.len()),
        replacements: Vec::with_capacity(sequences.len()),
    };
    for seq in sequences {
        let mut row = seq.clone();
        let (mut positions, mut originals, mut kinds) = (Vec::new(), Vec::new(), Vec::new());
        for pos in 1..seq.len() {
            if rng.next_f64() >= recipe.rate {
                continue;
            }
            let u = rng.next_f64();
            let kind = if u < recipe.mask_fraction || random_pool == 0 {
                Replacement::Mask
            } else if u < recipe.mask_fraction + recipe.random_fraction {
                Replacement::Random
            } else {
                Replacement::Keep
            };
            match kind {
                Replacement::Mask => row[pos] = MASK,
                Replacement::Random => row[pos] = NUM_SPECIAL + rng.below(random_pool) as u32,
                Replacement::Keep => {}
            }
            positions.push(pos);
            originals.push(seq[pos]);
            kinds.push(kind);
        }
        row.resize(n_max, PAD);
        batch.token_ids.push(row);
        batch.lengths.push(seq.len());
        batch.mask_sets.push(positions);
        batch.original_ids.push(originals);
        batch.replacements.push(kinds);
    }
    Ok(batch)
}

/// Batching parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub batch_size: usize,
    /// Longest sequence including the leading `<s>`.
    pub n_max: usize,
    /// Share of documents held out for evaluation.
    pub held_out_fraction: f64,
    pub masking: MaskingConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            n_max: 64,
            held_out_fraction: 0.1,
            masking: MaskingConfig::default(),
        }
    }
}

/// Tokenizes documents into `<s>`-prefixed id sequences truncated to
/// `n_max`; documents without tokens are dropped.
pub fn prepare_sequences<S: AsRef<str>>(
    documents: &[S],
    vocab: &Vocabulary,
    n_max: usize,
) -> Vec<Vec<u32>> {
    documents
        .iter()
        .filter_map(|doc| {
            let ids = vocab.encode(doc.as_ref());
            if ids.is_empty() {
                return None;
            }
            let mut seq = Vec::with_capacity(n_max.min(ids.len() + 1));
            seq.push(BOS);
            seq.extend(ids.into_iter().take(n_max.saturating_sub(1)));
            Some(seq)
        })
        .collect()
}

/// Endless, seed-determined stream of masked batches. Each epoch visits
/// every sequence once in an order drawn from `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct BatchStream {
    sequences: Vec<Vec<u32>>,
    batch_size: usize,
    vocab_size: usize,
    masking: MaskingConfig,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    issued: u64,
}

/// Attempts at re-drawing a mask before a batch is declared unmaskable.
const MASK_RETRIES: u64 = 64;

impl BatchStream {
    /// `max_len` is the longest sequence the model accepts.
    pub fn new(
        sequences: Vec<Vec<u32>>,
        config: &DataConfig,
        vocab_size: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if config.n_max > max_len {
            return Err(Error::Config(format!(
                "n_max {} exceeds the model's maximum sequence length {max_len}",
                config.n_max
            )));
        }
        if config.n_max < 2 {
            return Err(Error::Config("n_max must be at least 2".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        config.masking.validate()?;
        if sequences.is_empty() {
            return Err(Error::EmptyInput("batch stream"));
        }
        if let Some(seq) = sequences.iter().find(|s| s.len() > config.n_max) {
            return Err(Error::Length {
                len: seq.len(),
                max: config.n_max,
            });
        }
        let mut stream = Self {
            sequences,
            batch_size: config.batch_size,
            vocab_size,
            masking: config.masking,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            issued: 0,
        };
        stream.order = stream.epoch_order(0);
        Ok(stream)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    /// The visiting order of epoch `epoch`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.sequences.len()).collect();
        SplitMix64::derived(self.seed, epoch.wrapping_add(1)).shuffle(&mut order);
        order
    }

    /// Next batch; the final batch of an epoch may be short. Batches where
    /// no position was selected are re-masked with a fresh draw.
    pub fn next_batch(&mut self) -> Result<MaskedBatch> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.order = self.epoch_order(self.epoch);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let rows: Vec<Vec<u32>> = self.order[self.cursor..end]
            .iter()
            .map(|&i| self.sequences[i].clone())
            .collect();
        self.cursor = end;
        let index = self.issued;
        self.issued += 1;
        mask_with_retries(&rows, self.vocab_size, &self.masking, self.seed, index)
    }

    /// All sequences in corpus order, batched and masked deterministically;
    /// used for evaluation.
    pub fn fixed_batches(&self, seed: u64) -> Result<Vec<MaskedBatch>> {
        self.sequences
            .chunks(self.batch_size)
            .enumerate()
            .map(|(i, rows)| mask_with_retries(rows, self.vocab_size, &self.masking, seed, i as u64))
            .collect()
    }
}

fn mask_with_retries(
    rows: &[Vec<u32>],
    vocab_size: usize,
    masking: &MaskingConfig,
    seed: u64,
    index: u64,
) -> Result<MaskedBatch> {
    let base = SplitMix64::derived(seed, 0x6d61_736b).next_u64() ^ index;
    for attempt in 0..MASK_RETRIES {
        let salt = SplitMix64::derived(base, attempt).next_u64();
        let batch = apply_masking(rows, vocab_size, masking, salt)?;
        if batch.masked_count() > 0 {
            return Ok(batch);
        }
    }
    Err(Error::EmptyMask)
}
