//! Weighted finite-state machinery for the chain objective: numerator graphs
//! from transcripts, a denominator graph from a pdf-label bigram, log-domain
//! forward-backward, and the LF-MMI loss/gradient.
//!
//! Graphs are immutable after construction and cheap to share; scoring walks
//! are pure functions, so utterances can be processed in parallel.

mod build;
mod fb;
mod text;

pub use build::{build_denominator, build_numerator, build_numerator_with_lm, PdfBigram};
pub use fb::{forward_backward, lfmmi_loss_grad, Posteriors};
pub use text::{graph_from_text, graph_to_text};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("graph validation failed: {0}")]
    Validation(String),
    #[error("graph text line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bigram row {row} sums to {sum}, expected 1")]
    UnnormalizedRow { row: usize, sum: f64 },
    #[error("infeasible alignment: sequence of {seq_len} labels cannot fill {frames} frames")]
    InfeasibleAlignment { seq_len: usize, frames: usize },
    #[error("empty composition: no complete path of length {frames}")]
    EmptyComposition { frames: usize },
    #[error("numerator graph has no complete path over {frames} frames; skip this example")]
    InfeasibleNumerator { frames: usize },
    #[error(transparent)]
    Numeric(#[from] crate::numeric::NumericError),
}

/// One transition: consumes a frame, emits `pdf_label`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub src: usize,
    pub dst: usize,
    pub pdf_label: usize,
    pub log_weight: f64,
}

/// Acyclic-in-time weighted graph over pdf labels. Paths of exactly `T`
/// arcs score a `T x num_pdfs` logit matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainGraph {
    num_states: usize,
    start: usize,
    arcs: Vec<Arc>,
    /// Per-state final log weight; `-inf` marks a non-final state.
    final_log_weights: Vec<f64>,
    num_pdfs: usize,
}

impl ChainGraph {
    /// Build and validate: start in range, arcs in range, labels within
    /// `num_pdfs`, every state accessible from start and co-accessible to
    /// some final state.
    pub fn new(
        num_states: usize,
        start: usize,
        arcs: Vec<Arc>,
        final_log_weights: Vec<f64>,
        num_pdfs: usize,
    ) -> Result<Self, ChainError> {
        let g = ChainGraph {
            num_states,
            start,
            arcs,
            final_log_weights,
            num_pdfs,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<(), ChainError> {
        if self.start >= self.num_states {
            return Err(ChainError::Validation(format!(
                "start state {} out of {} states",
                self.start, self.num_states
            )));
        }
        if self.final_log_weights.len() != self.num_states {
            return Err(ChainError::Validation(format!(
                "{} final weights for {} states",
                self.final_log_weights.len(),
                self.num_states
            )));
        }
        for (i, a) in self.arcs.iter().enumerate() {
            if a.src >= self.num_states || a.dst >= self.num_states {
                return Err(ChainError::Validation(format!(
                    "arc {i} endpoints ({}, {}) out of {} states",
                    a.src, a.dst, self.num_states
                )));
            }
            if a.pdf_label >= self.num_pdfs {
                return Err(ChainError::Validation(format!(
                    "arc {i} label {} out of {} pdf targets",
                    a.pdf_label, self.num_pdfs
                )));
            }
            if a.log_weight.is_nan() || a.log_weight == f64::INFINITY {
                return Err(ChainError::Validation(format!(
                    "arc {i} has weight {}",
                    a.log_weight
                )));
            }
        }
        let acc = self.accessible();
        if let Some(s) = (0..self.num_states).find(|&s| !acc[s]) {
            return Err(ChainError::Validation(format!(
                "state {s} is not accessible from the start state"
            )));
        }
        let coacc = self.co_accessible();
        if let Some(s) = (0..self.num_states).find(|&s| !coacc[s]) {
            return Err(ChainError::Validation(format!(
                "state {s} cannot reach any final state"
            )));
        }
        Ok(())
    }

    fn accessible(&self) -> Vec<bool> {
        let mut seen = vec![false; self.num_states];
        let mut stack = vec![self.start];
        seen[self.start] = true;
        while let Some(s) = stack.pop() {
            for a in &self.arcs {
                if a.src == s && !seen[a.dst] {
                    seen[a.dst] = true;
                    stack.push(a.dst);
                }
            }
        }
        seen
    }

    fn co_accessible(&self) -> Vec<bool> {
        let mut seen: Vec<bool> = self
            .final_log_weights
            .iter()
            .map(|w| *w > f64::NEG_INFINITY)
            .collect();
        let mut stack: Vec<usize> = (0..self.num_states).filter(|&s| seen[s]).collect();
        while let Some(s) = stack.pop() {
            for a in &self.arcs {
                if a.dst == s && !seen[a.src] {
                    seen[a.src] = true;
                    stack.push(a.src);
                }
            }
        }
        seen
    }

    /// Trim to the accessible-and-co-accessible core, renumbering states.
    /// Returns `None` when nothing useful survives.
    pub fn connect(
        num_states: usize,
        start: usize,
        arcs: Vec<Arc>,
        final_log_weights: Vec<f64>,
        num_pdfs: usize,
    ) -> Option<ChainGraph> {
        let probe = ChainGraph {
            num_states,
            start,
            arcs,
            final_log_weights,
            num_pdfs,
        };
        let acc = probe.accessible();
        let coacc = probe.co_accessible();
        let keep: Vec<usize> = (0..num_states).filter(|&s| acc[s] && coacc[s]).collect();
        if keep.is_empty() || !(acc[start] && coacc[start]) {
            return None;
        }
        let mut remap = vec![usize::MAX; num_states];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let arcs: Vec<Arc> = probe
            .arcs
            .into_iter()
            .filter(|a| remap[a.src] != usize::MAX && remap[a.dst] != usize::MAX)
            .map(|a| Arc {
                src: remap[a.src],
                dst: remap[a.dst],
                ..a
            })
            .collect();
        let finals: Vec<f64> = keep.iter().map(|&s| probe.final_log_weights[s]).collect();
        ChainGraph::new(keep.len(), remap[start], arcs, finals, num_pdfs).ok()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn final_log_weights(&self) -> &[f64] {
        &self.final_log_weights
    }

    pub fn num_pdfs(&self) -> usize {
        self.num_pdfs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rejects_unreachable_state() {
        let arcs = vec![Arc {
            src: 0,
            dst: 0,
            pdf_label: 0,
            log_weight: 0.0,
        }];
        let finals = vec![0.0, 0.0];
        let err = ChainGraph::new(2, 0, arcs, finals, 1).unwrap_err();
        assert!(err.to_string().contains("not accessible"));
    }

    #[test]
    fn connect_trims_dead_states() {
        // state 2 is unreachable; state 3 is a dead end.
        let arcs = vec![
            Arc { src: 0, dst: 1, pdf_label: 0, log_weight: -0.1 },
            Arc { src: 2, dst: 1, pdf_label: 0, log_weight: -0.1 },
            Arc { src: 0, dst: 3, pdf_label: 1, log_weight: -0.1 },
        ];
        let finals = vec![f64::NEG_INFINITY, 0.0, 0.0, f64::NEG_INFINITY];
        let g = ChainGraph::connect(4, 0, arcs, finals, 2).unwrap();
        assert_eq!(g.num_states(), 2);
        assert_eq!(g.arcs().len(), 1);
    }
}
