//! Dense matrices, seeded randomness, and a reverse-mode tape whose linear
//! primitive exposes per-position activations and preactivation gradients.

mod gradcheck;
mod linalg;
mod matrix;
mod optim;
mod rng;
mod tape;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use gradcheck::{finite_diff_coords, finite_diff_grad};
pub use linalg::SpdFactor;
pub use matrix::Matrix;
pub use optim::{clip_global_norm, global_norm, Adam, AdamConfig};
pub use rng::{seeded_rng, RngState, SeededRng};
pub use tape::{
    log_softmax_rows, softmax_rows, Gradients, LayerTrace, LinearRecord, Tape, Var,
};

/// Name of a weight matrix in a model, e.g. `blocks.0.fc_in`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(String);

impl LayerId {
    pub fn new(name: impl Into<String>) -> Self {
        LayerId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LayerId {
    fn from(s: &str) -> Self {
        LayerId(s.to_owned())
    }
}
