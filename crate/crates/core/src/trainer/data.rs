//! Synthetic byte-level tasks whose answer is a deterministic function of
//! the prompt.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;

const BIND: u32 = b'=' as u32;
const SEP: u32 = b';' as u32;
const QUERY: u32 = b'?' as u32;
const PLUS: u32 = b'+' as u32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingExample {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// `BOS (k = v ;)×n  filler×distractor_len  ? k`  →  `v`
    KeyValueRecall,
    /// `BOS filler×distractor_len  a + b =`  →  decimal digits of `(a + b) mod m`
    ModularAddition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub task: Task,
    pub n_pairs: usize,
    pub key_range: RangeInclusive<u32>,
    pub value_range: RangeInclusive<u32>,
    /// Bytes drawn for the distractor span; disjoint from keys and values.
    pub filler_range: RangeInclusive<u32>,
    pub distractor_len: usize,
    pub modulus: u32,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            task: Task::KeyValueRecall,
            n_pairs: 8,
            key_range: b'a' as u32..=b'z' as u32,
            value_range: b'A' as u32..=b'P' as u32,
            filler_range: 128..=255,
            distractor_len: 64,
            modulus: 97,
            seed: 0,
        }
    }
}

fn range_len(r: &RangeInclusive<u32>) -> usize {
    if r.is_empty() {
        0
    } else {
        (r.end() - r.start() + 1) as usize
    }
}

fn overlaps(a: &RangeInclusive<u32>, b: &RangeInclusive<u32>) -> bool {
    !a.is_empty() && !b.is_empty() && a.start() <= b.end() && b.start() <= a.end()
}

impl SyntheticTaskSpec {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let ranges = [("key_range", &self.key_range), ("value_range", &self.value_range), ("filler_range", &self.filler_range)];
        for (name, r) in ranges {
            if r.is_empty() {
                return Err(Error::config(format!("{name} is empty")));
            }
            if *r.start() <= BOS || *r.end() as usize >= vocab_size {
                return Err(Error::config(format!(
                    "{name} {r:?} must avoid PAD/BOS and fit a vocabulary of {vocab_size}"
                )));
            }
        }
        for delim in [BIND, SEP, QUERY, PLUS] {
            if ranges.iter().any(|(_, r)| r.contains(&delim)) {
                return Err(Error::config(format!("token ranges must not contain delimiter {delim}")));
            }
        }
        if overlaps(&self.filler_range, &self.key_range) || overlaps(&self.filler_range, &self.value_range) {
            return Err(Error::config("filler_range must be disjoint from keys and values"));
        }
        match self.task {
            Task::KeyValueRecall => {
                if self.n_pairs == 0 || self.n_pairs > range_len(&self.key_range) {
                    return Err(Error::config(format!(
                        "n_pairs = {} needs that many distinct keys, but key_range holds {}",
                        self.n_pairs,
                        range_len(&self.key_range)
                    )));
                }
            }
            Task::ModularAddition => {
                if self.modulus < 2 {
                    return Err(Error::config("modulus must be at least 2"));
                }
                if (b'0' as usize + 9) >= vocab_size {
                    return Err(Error::config("vocabulary too small for decimal digits"));
                }
            }
        }
        Ok(())
    }

    fn generate(&self, rng: &mut ChaCha8Rng) -> TrainingExample {
        let mut x = vec![BOS];
        let filler = |rng: &mut ChaCha8Rng, x: &mut Vec<u32>| {
            for _ in 0..self.distractor_len {
                x.push(rng.gen_range(self.filler_range.clone()));
            }
        };
        match self.task {
            Task::KeyValueRecall => {
                let keys: Vec<u32> = sample(rng, range_len(&self.key_range), self.n_pairs)
                    .into_iter()
                    .map(|i| self.key_range.start() + i as u32)
                    .collect();
                let values: Vec<u32> = (0..self.n_pairs).map(|_| rng.gen_range(self.value_range.clone())).collect();
                for (&k, &v) in keys.iter().zip(&values) {
                    x.extend_from_slice(&[k, BIND, v, SEP]);
                }
                filler(rng, &mut x);
                let q = rng.gen_range(0..self.n_pairs);
                x.extend_from_slice(&[QUERY, keys[q]]);
                TrainingExample { x, y: vec![values[q]] }
            }
            Task::ModularAddition => {
                let a = rng.gen_range(0..self.modulus);
                let b = rng.gen_range(0..self.modulus);
                filler(rng, &mut x);
                x.extend(digits(a));
                x.push(PLUS);
                x.extend(digits(b));
                x.push(BIND);
                TrainingExample {
                    x,
                    y: digits((a + b) % self.modulus),
                }
            }
        }
    }
}

fn digits(v: u32) -> Vec<u32> {
    v.to_string().bytes().map(u32::from).collect()
}

/// Answer implied by a key-value prompt, or `None` when the query key is
/// not bound in it.
pub fn recall_answer(x: &[u32]) -> Option<u32> {
    let query = *x.last()?;
    x.windows(4)
        .find(|w| w[0] == query && w[1] == BIND && w[3] == SEP)
        .map(|w| w[2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub train: Vec<TrainingExample>,
    pub heldout: Vec<TrainingExample>,
}

/// Train and held-out examples from independent streams of `spec.seed`;
/// held-out prompts that also occur in train are redrawn.
pub fn make_synthetic_dataset(spec: &SyntheticTaskSpec, vocab_size: usize, n_train: usize, n_heldout: usize) -> Result<SyntheticSplit> {
    spec.validate(vocab_size)?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train_rng.set_stream(1);
    let mut held_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    held_rng.set_stream(2);
    let train: Vec<TrainingExample> = (0..n_train).map(|_| spec.generate(&mut train_rng)).collect();
    let seen: HashSet<&[u32]> = train.iter().map(|e| e.x.as_slice()).collect();
    let mut heldout = Vec::with_capacity(n_heldout);
    let mut attempts = 0usize;
    while heldout.len() < n_heldout {
        attempts += 1;
        if attempts > 100 * (n_heldout + 1) {
            return Err(Error::config("task space too small to draw a disjoint held-out set"));
        }
        let e = spec.generate(&mut held_rng);
        if !seen.contains(e.x.as_slice()) {
            heldout.push(e);
        }
    }
    Ok(SyntheticSplit { train, heldout })
}

pub fn write_dataset_jsonl(path: impl AsRef<Path>, examples: &[TrainingExample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_jsonl(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: TrainingExample =
            serde_json::from_str(&line).map_err(|err| Error::contract(format!("dataset line {}: {err}", i + 1)))?;
        if e.x.is_empty() || e.y.is_empty() {
            return Err(Error::contract(format!("dataset line {}: x and y must be non-empty", i + 1)));
        }
        out.push(e);
    }
    Ok(out)
}
