//! Distractor-view filtering for feed-forward multi-view reconstruction.
//!
//! A backbone's intermediate features and attention already tell which
//! context views depict the anchor's scene. This crate scores every view
//! against an anchor from those tensors, keeps the views above a threshold
//! and evaluates the filtered reconstruction.

// `!(x > 0.0)` is used on purpose so NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod evalmetrics;
pub mod probe;
pub mod protocol;
pub mod rng;
pub mod scoring;
pub mod selection;
pub mod synth;
pub mod tensorstore;

/// Any failure surfaced by the library, with a stable machine-readable kind.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensorstore::TensorError),
    #[error(transparent)]
    Manifest(#[from] tensorstore::ManifestError),
    #[error(transparent)]
    Scoring(#[from] scoring::ScoringError),
    #[error(transparent)]
    Selection(#[from] selection::SelectionError),
    #[error(transparent)]
    Metric(#[from] evalmetrics::MetricError),
    #[error(transparent)]
    Probe(#[from] probe::ProbeError),
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
}

impl Error {
    /// Snake-case code naming the failing component.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Manifest(_) => "manifest",
            Error::Scoring(_) => "scoring",
            Error::Selection(_) => "selection",
            Error::Metric(_) => "metric",
            Error::Probe(_) => "probe",
            Error::Protocol(_) => "protocol",
            Error::Synth(_) => "synth",
        }
    }
}
