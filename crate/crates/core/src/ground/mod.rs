//! Grounding: a learned labelling function plus primitive value functions,
//! both fitted offline from a labelled trajectory dataset.

mod label;
mod pvf;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use label::*;
pub use pvf::*;

#[derive(Debug, Error)]
pub enum GroundError {
    #[error("dataset contains no trajectories")]
    EmptyDataset,
    #[error("atom '{0}' has the same value in every sample; it cannot be learned")]
    DegenerateAtom(String),
    #[error("threshold {0} must lie strictly between 0 and 1")]
    InvalidThreshold(f64),
    #[error("discount {0} must lie strictly between 0 and 1")]
    InvalidGamma(f64),
    #[error("atom '{0}' has no observation channel; linear features are unavailable")]
    UnsupportedAtom(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("malformed grounding artifact: {0}")]
    Format(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything the ground stage produces, stored as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub label_model: LabelModel,
    pub label_report: LabelReport,
    pub pvfs: PvfSet,
}

impl Grounding {
    pub fn new(label_model: LabelModel, label_report: LabelReport, pvfs: PvfSet) -> Result<Self, GroundError> {
        if label_model.vocab() != pvfs.vocab() {
            return Err(GroundError::VocabMismatch(
                "labelling function and value functions were trained on different atoms".into(),
            ));
        }
        Ok(Grounding { label_model, label_report, pvfs })
    }

    pub fn write(&self, out: impl Write) -> Result<(), GroundError> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn read(input: impl Read) -> Result<Self, GroundError> {
        let g: Grounding = serde_json::from_reader(input)?;
        Self::new(g.label_model, g.label_report, g.pvfs)
    }
}
