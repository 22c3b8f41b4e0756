//! Labeled token-sequence datasets: byte-level text CSV and two synthetic
//! tasks, plus a compact binary cache.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::BYTE_VOCAB;

pub const PAD: u32 = (BYTE_VOCAB - 1) as u32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub n_classes: usize,
    pub len: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, n_classes: usize, len: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in &samples {
            if s.label >= n_classes {
                return Err(Error::BadLabel { label: s.label, n_classes });
            }
            if s.tokens.len() != len {
                return Err(Error::Shape(format!("sequence of length {} in a dataset with L={len}", s.tokens.len())));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= BYTE_VOCAB) {
                return Err(Error::TokenOutOfRange { token: t as usize, vocab: BYTE_VOCAB });
            }
        }
        Ok(Dataset { samples, n_classes, len })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shuffles with `seed` and splits off the first `frac` as the training part.
    pub fn split(mut self, seed: u64, frac: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::Config(format!("split fraction {frac} outside [0, 1]")));
        }
        self.samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = (frac * self.samples.len() as f64).round() as usize;
        let test = self.samples.split_off(cut);
        Ok((
            Dataset::new(self.samples, self.n_classes, self.len)?,
            Dataset::new(test, self.n_classes, self.len)?,
        ))
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }
}

/// Bytes of `text`, head-truncated or right-padded to `len`.
pub fn byte_tokens(text: &str, len: usize) -> Vec<u32> {
    let mut t: Vec<u32> = text.bytes().take(len).map(u32::from).collect();
    t.resize(len, PAD);
    t
}

/// Reads `label,text` rows (an optional `label,text` header is skipped).
pub fn read_text_csv(path: &Path, len: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    parse_text_csv(file, len)
}

pub fn parse_text_csv(input: impl Read, len: usize) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut samples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        if rec.len() != 2 {
            return Err(Error::Parse { row, msg: format!("expected 2 fields, found {}", rec.len()) });
        }
        let label_field = rec[0].trim();
        if row == 1 && label_field == "label" {
            continue;
        }
        let label: usize =
            label_field.parse().map_err(|_| Error::Parse { row, msg: format!("bad label `{label_field}`") })?;
        samples.push(Sample { tokens: byte_tokens(&rec[1], len), label });
    }
    let n_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0).max(2);
    Dataset::new(samples, n_classes, len)
}

/// Loads a text CSV and splits it into train and test parts.
pub fn load_text_csv(path: &Path, len: usize, seed: u64, split_frac: f64) -> Result<(Dataset, Dataset)> {
    read_text_csv(path, len)?.split(seed, split_frac)
}

pub const MAJORITY_ALPHABET: u32 = 16;
pub const MAJORITY_MARKER: u32 = 15;

/// 1 when token 3 occurs more often than token 5 after the first marker,
/// 0 otherwise (including ties and sequences without a marker).
pub fn marked_majority_label(tokens: &[u32]) -> usize {
    let Some(m) = tokens.iter().position(|&t| t == MAJORITY_MARKER) else {
        return 0;
    };
    let after = &tokens[m + 1..];
    let threes = after.iter().filter(|&&t| t == 3).count();
    let fives = after.iter().filter(|&&t| t == 5).count();
    usize::from(threes > fives)
}

/// Sequences over a 16-symbol alphabet with one marker in the first quarter.
/// Before the marker, threes and fives are over-represented as distractors;
/// only the counts after it decide the label.
pub fn gen_marked_majority(n: usize, len: usize, seed: u64) -> Result<Dataset> {
    if len < 8 {
        return Err(Error::Config(format!("marked majority needs L >= 8, got {len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plain = |rng: &mut ChaCha8Rng| rng.random_range(0..MAJORITY_MARKER);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let m = rng.random_range(1..=len / 4);
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..m {
            tokens.push(if rng.random_bool(0.5) { if rng.random_bool(0.5) { 3 } else { 5 } } else { plain(&mut rng) });
        }
        tokens.push(MAJORITY_MARKER);
        while tokens.len() < len {
            tokens.push(plain(&mut rng));
        }
        let label = marked_majority_label(&tokens);
        samples.push(Sample { tokens, label });
    }
    Dataset::new(samples, 2, len)
}

pub const ADDING_LEVELS: u32 = 64;
pub const ADDING_BINS: usize = 10;

/// Bin of `v1 + v2` under the triangular law of a sum of two uniforms, so
/// labels are close to uniform over the bins.
pub fn adding_label(v1: f64, v2: f64) -> usize {
    let s = (v1 + v2).clamp(0.0, 2.0);
    let cdf = if s <= 1.0 { 0.5 * s * s } else { 1.0 - 0.5 * (2.0 - s) * (2.0 - s) };
    ((cdf * ADDING_BINS as f64) as usize).min(ADDING_BINS - 1)
}

/// Value of an adding-problem token (plain `0..64`, marked `64..128`).
pub fn adding_value(token: u32) -> f64 {
    ((token % ADDING_LEVELS) as f64 + 0.5) / ADDING_LEVELS as f64
}

/// Each position carries a quantized value in `[0, 1)`; two positions (one
/// in each half) are marked and the label bins the sum of their values.
pub fn gen_adding_problem(n: usize, len: usize, seed: u64) -> Result<Dataset> {
    if len < 8 {
        return Err(Error::Config(format!("adding problem needs L >= 8, got {len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..ADDING_LEVELS)).collect();
        let a = rng.random_range(0..len / 2);
        let b = rng.random_range(len / 2..len);
        tokens[a] += ADDING_LEVELS;
        tokens[b] += ADDING_LEVELS;
        let label = adding_label(adding_value(tokens[a]), adding_value(tokens[b]));
        samples.push(Sample { tokens, label });
    }
    Dataset::new(samples, ADDING_BINS, len)
}

const CACHE_MAGIC: &[u8; 8] = b"BRSSMDS1";

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn get_varint(buf: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let byte = *buf.get(*pos).ok_or_else(|| Error::Parse { row: 0, msg: "truncated dataset cache".into() })?;
        *pos += 1;
        v |= u64::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::Parse { row: 0, msg: "varint too long in dataset cache".into() })
}

/// Binary layout: the 8-byte magic `BRSSMDS1`, then varints for sample count,
/// sequence length and class count; each sample is its label followed by
/// `(token, run length)` pairs covering the sequence.
pub fn encode_cache(ds: &Dataset) -> Vec<u8> {
    let mut out = CACHE_MAGIC.to_vec();
    put_varint(&mut out, ds.samples.len() as u64);
    put_varint(&mut out, ds.len as u64);
    put_varint(&mut out, ds.n_classes as u64);
    for s in &ds.samples {
        put_varint(&mut out, s.label as u64);
        let mut i = 0;
        while i < s.tokens.len() {
            let t = s.tokens[i];
            let run = s.tokens[i..].iter().take_while(|&&x| x == t).count();
            put_varint(&mut out, u64::from(t));
            put_varint(&mut out, run as u64);
            i += run;
        }
    }
    out
}

pub fn decode_cache(buf: &[u8]) -> Result<Dataset> {
    if buf.len() < CACHE_MAGIC.len() || &buf[..CACHE_MAGIC.len()] != CACHE_MAGIC {
        return Err(Error::Parse { row: 0, msg: "not a dataset cache".into() });
    }
    let mut pos = CACHE_MAGIC.len();
    let n = get_varint(buf, &mut pos)? as usize;
    let len = get_varint(buf, &mut pos)? as usize;
    let n_classes = get_varint(buf, &mut pos)? as usize;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = get_varint(buf, &mut pos)? as usize;
        let mut tokens = Vec::with_capacity(len);
        while tokens.len() < len {
            let t = get_varint(buf, &mut pos)? as u32;
            let run = get_varint(buf, &mut pos)? as usize;
            if run == 0 || tokens.len() + run > len {
                return Err(Error::Parse { row: 0, msg: "bad token run in dataset cache".into() });
            }
            tokens.extend(std::iter::repeat_n(t, run));
        }
        samples.push(Sample { tokens, label });
    }
    if pos != buf.len() {
        return Err(Error::Parse { row: 0, msg: "trailing bytes in dataset cache".into() });
    }
    Dataset::new(samples, n_classes, len)
}

pub fn save_cache(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_cache(ds))?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<Dataset> {
    decode_cache(&std::fs::read(path)?)
}
