//! Batch transition datasets and their JSONL wire format.
//!
//! One JSON object per line:
//! `{"s":int,"a":int,"cand":[int,...],"r":float,"sp":int,"src":int}`.
//! `src` tags the generating policy; a file may interleave sources, and the
//! reader groups lines back into per-source datasets.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::error::{MoeError, Result};

/// One logged transition with the candidate action set available at `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub cand: Vec<usize>,
    pub r: f64,
    pub sp: usize,
}

#[derive(Serialize, Deserialize)]
struct TransitionLine {
    s: usize,
    a: usize,
    cand: Vec<usize>,
    r: f64,
    sp: usize,
    src: usize,
}

/// Transitions generated by one behavior policy (`source` is its expert index).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDataset {
    pub transitions: Vec<Transition>,
    pub source: usize,
}

impl BatchDataset {
    pub fn new(transitions: Vec<Transition>, source: usize) -> Result<Self> {
        for (k, t) in transitions.iter().enumerate() {
            if !t.cand.contains(&t.a) {
                return Err(MoeError::Config(format!(
                    "transition {k}: action {} not in its candidate set",
                    t.a
                )));
            }
            if !t.r.is_finite() {
                return Err(MoeError::Config(format!("transition {k}: non-finite reward")));
            }
        }
        Ok(Self { transitions, source })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Bound-check all indices against a state/action space.
    pub fn validate_against(&self, n_states: usize, n_actions: usize) -> Result<()> {
        for (k, t) in self.transitions.iter().enumerate() {
            if t.s >= n_states || t.sp >= n_states {
                return Err(MoeError::Config(format!(
                    "transition {k}: state index out of range for {n_states} states"
                )));
            }
            if t.cand.iter().any(|&c| c >= n_actions) {
                return Err(MoeError::Config(format!(
                    "transition {k}: candidate action out of range for {n_actions} actions"
                )));
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.transitions {
            let line = TransitionLine {
                s: t.s,
                a: t.a,
                cand: t.cand.clone(),
                r: t.r,
                sp: t.sp,
                src: self.source,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("jsonl is utf-8")
    }

    /// Read a JSONL stream, grouping lines by `src` (ascending source order).
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<BatchDataset>> {
        let mut by_src: std::collections::BTreeMap<usize, Vec<Transition>> =
            std::collections::BTreeMap::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TransitionLine = serde_json::from_str(&line).map_err(|e| {
                MoeError::Config(format!("batch line {}: {e}", lineno + 1))
            })?;
            by_src.entry(parsed.src).or_default().push(Transition {
                s: parsed.s,
                a: parsed.a,
                cand: parsed.cand,
                r: parsed.r,
                sp: parsed.sp,
            });
        }
        by_src
            .into_iter()
            .map(|(source, transitions)| BatchDataset::new(transitions, source))
            .collect()
    }

    pub fn read_jsonl_file(path: &std::path::Path) -> Result<Vec<BatchDataset>> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_groups_by_source() {
        let b0 = BatchDataset::new(
            vec![Transition { s: 0, a: 1, cand: vec![0, 1], r: 0.5, sp: 1 }],
            0,
        )
        .unwrap();
        let b1 = BatchDataset::new(
            vec![
                Transition { s: 1, a: 0, cand: vec![0, 1], r: -1.0, sp: 0 },
                Transition { s: 0, a: 0, cand: vec![0, 1], r: 0.0, sp: 0 },
            ],
            1,
        )
        .unwrap();
        let mut text = b0.to_jsonl_string();
        text.push_str(&b1.to_jsonl_string());
        let back = BatchDataset::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], b0);
        assert_eq!(back[1], b1);
    }

    #[test]
    fn action_outside_candidates_rejected() {
        let res = BatchDataset::new(
            vec![Transition { s: 0, a: 2, cand: vec![0, 1], r: 0.0, sp: 0 }],
            0,
        );
        assert!(res.is_err());
    }
}
