//! Meta-learned model editing on a tiny language model.
//!
//! A hypernetwork turns the per-layer `(u, δ)` pairs of a fine-tuning
//! gradient into weight updates. Editors can apply one such update or
//! several successive ones (multiple backpropagation steps), and are
//! meta-trained either with a KL locality loss or with a squared-norm
//! penalty on the weight change.

pub mod editengine;
pub mod error;
pub mod evalprof;
pub mod factsynth;
pub mod harness;
pub mod hypernet;
pub mod metatrain;
pub mod numcore;
pub mod toylm;

pub use error::{Error, Result};
