//! Root-cause analysis for multivariate time series built on spatiotemporal
//! pattern networks.
//!
//! The pipeline runs in stages, one module each:
//!
//! * [`synthgen`]: VAR-driven synthetic series with broken-edge and
//!   delayed-node anomalies.
//! * [`stpn`]: symbolization, cross-Markov machines and per-window causality
//!   matrices, binarized into pattern vectors of length `n^2`.
//! * [`rbm`]: a restricted Boltzmann machine over pattern vectors; free energy
//!   and KLD-based detection.
//! * [`s3`]: greedy sequential state switching on the RBM free energy.
//! * [`a3`]: a multi-label MLP trained on artificially flipped nominal vectors.
//! * [`var`]: least-squares VAR fits and the coefficient-difference baseline.
//! * [`eval`]: accuracy metrics, node attribution and report tables.
//! * [`pipeline`]: end-to-end experiments driven by [`config::ExperimentConfig`].

pub mod a3;
pub mod config;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod rbm;
pub mod s3;
pub mod stpn;
pub mod synthgen;
pub mod var;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// A directed pattern `source -> target`. The diagonal (`source == target`) is
/// an atomic pattern; everything else is relational.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Pattern {
    pub source: usize,
    pub target: usize,
}

impl Pattern {
    pub const fn new(source: usize, target: usize) -> Self {
        Pattern { source, target }
    }

    /// Position in the row-major (source-major) flattening of an `n x n` matrix.
    pub const fn index(self, n: usize) -> usize {
        self.source * n + self.target
    }

    pub const fn from_index(index: usize, n: usize) -> Self {
        Pattern {
            source: index / n,
            target: index % n,
        }
    }

    pub const fn is_atomic(self) -> bool {
        self.source == self.target
    }

    pub const fn touches(self, node: usize) -> bool {
        self.source == node || self.target == node
    }
}

impl From<(usize, usize)> for Pattern {
    fn from((source, target): (usize, usize)) -> Self {
        Pattern { source, target }
    }
}

impl From<Pattern> for (usize, usize) {
    fn from(p: Pattern) -> Self {
        (p.source, p.target)
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}->{}", self.source + 1, self.target + 1)
    }
}
