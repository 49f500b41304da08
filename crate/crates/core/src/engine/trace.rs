//! `.trace.jsonl` files: one JSON object per generated step, plus one per
//! consolidation, in the order they happened.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub token: u32,
    pub entropy: f64,
    pub triggered: bool,
    pub wall_ms: f64,
    /// Live cache length after the step's token was appended.
    pub cache_len: usize,
    #[serde(skip)]
    pub per_head_entropy: Vec<f64>,
    #[serde(skip)]
    pub degenerate: bool,
}

impl StepRecord {
    pub fn without_timing(&self) -> StepRecord {
        StepRecord {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerRecord {
    pub step: usize,
    pub entropy: f64,
    pub k: usize,
    pub consolidation_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceRecord {
    Step(StepRecord),
    Trigger(TriggerRecord),
}

/// The serializable part of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceLog {
    pub steps: Vec<StepRecord>,
    pub triggers: Vec<TriggerRecord>,
}

impl TraceLog {
    pub fn entropies(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.entropy).collect()
    }

    pub fn trigger_steps(&self) -> Vec<usize> {
        self.triggers.iter().map(|t| t.step).collect()
    }

    /// Records in emission order: a trigger precedes the step it fired at.
    pub fn records(&self) -> Vec<TraceRecord> {
        let mut out = Vec::with_capacity(self.steps.len() + self.triggers.len());
        let mut triggers = self.triggers.iter().peekable();
        for s in &self.steps {
            while let Some(t) = triggers.next_if(|t| t.step <= s.step) {
                out.push(TraceRecord::Trigger(t.clone()));
            }
            out.push(TraceRecord::Step(s.clone()));
        }
        out.extend(triggers.cloned().map(TraceRecord::Trigger));
        out
    }
}

pub fn write_trace_jsonl(path: impl AsRef<Path>, log: &TraceLog) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for rec in log.records() {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_jsonl(path: impl AsRef<Path>) -> Result<TraceLog> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut log = TraceLog::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::contract(format!("trace line {}: {e}", i + 1)))?;
        match rec {
            TraceRecord::Step(s) => log.steps.push(s),
            TraceRecord::Trigger(t) => log.triggers.push(t),
        }
    }
    Ok(log)
}
