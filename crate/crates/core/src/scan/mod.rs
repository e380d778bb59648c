//! State-space scan kernels and the selective token mixer.

pub mod bench;
mod discretize;
mod kernel;
mod linear;
mod lti;
mod mixer;
mod selective;

use serde::{Deserialize, Serialize};

pub use discretize::{discretize_with, zoh_discretize, DELTA_EPS, SERIES_THRESHOLD};
pub use linear::{scan_parallel, scan_recurrent, worker_pool};
pub use lti::{lti_kernel, lti_kernel_apply};
pub use mixer::{init_mixer, mamba_mixer_forward, mixer_param_count, mixer_param_shapes, MixerConfig};
pub use selective::selective_scan;

/// Rule turning the continuous `(Δ, A, B)` into `(Ā, B̄)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// `B̄ = (exp(Δa) - 1) / a · B`
    #[default]
    ZohExact,
    /// `B̄ = Δ · B`
    Euler,
}

/// How the recurrence is evaluated inside the mixer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScanPath {
    Sequential,
    Chunked { chunk: usize },
}

impl Default for ScanPath {
    fn default() -> Self {
        ScanPath::Chunked { chunk: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanDirection {
    #[default]
    Forward,
    /// Reverse the input, scan forward, reverse the output.
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub discretization: Discretization,
    pub path: ScanPath,
    pub series_threshold: f64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            discretization: Discretization::ZohExact,
            path: ScanPath::default(),
            series_threshold: SERIES_THRESHOLD,
        }
    }
}

#[cfg(test)]
mod tests;
