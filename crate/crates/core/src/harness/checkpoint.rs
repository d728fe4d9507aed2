use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metatrain::TrainerState;
use crate::toylm::ToyModel;

use super::ExperimentConfig;

pub const CHECKPOINT_SCHEMA: &str = "editlab.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A base model and, once meta-training has started, the full trainer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub model: ToyModel,
    pub trainer: Option<TrainerState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    sha256: String,
    bytes: usize,
}

/// Writes a one-line header (schema, version, body digest) followed by the
/// JSON body. The file is written beside the target and renamed into place.
pub fn save_state(path: &Path, ck: &Checkpoint) -> Result<()> {
    let body = serde_json::to_string(ck).map_err(|e| Error::format("checkpoint", e))?;
    let header = Header {
        schema: CHECKPOINT_SCHEMA.into(),
        version: CHECKPOINT_VERSION,
        sha256: hex::encode(Sha256::digest(body.as_bytes())),
        bytes: body.len(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        serde_json::to_writer(&mut f, &header)?;
        f.write_all(b"\n")?;
        f.write_all(body.as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_state(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

fn parse(text: &str) -> Result<Checkpoint> {
    let (head, body) = text
        .split_once('\n')
        .ok_or_else(|| Error::format("checkpoint", "missing header line"))?;
    let header: Header = serde_json::from_str(head).map_err(|e| Error::format("checkpoint header", e))?;
    if header.schema != CHECKPOINT_SCHEMA {
        return Err(Error::format("checkpoint", format!("unexpected schema '{}'", header.schema)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "checkpoint".into(),
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if body.len() != header.bytes || hex::encode(Sha256::digest(body.as_bytes())) != header.sha256 {
        return Err(Error::format("checkpoint", "body does not match its recorded digest"));
    }
    serde_json::from_str(body).map_err(|e| Error::format("checkpoint", e))
}
