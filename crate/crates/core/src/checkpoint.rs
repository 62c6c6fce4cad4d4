//! The MGF1 checkpoint format:
//!
//! ```text
//! MGF1\n
//! <name> <rows>x<cols>\n      one line per tensor, store order
//! \n
//! <payload>                   little-endian f32, manifest order, row-major
//! <config echo>               RunConfig::to_text()
//! ```
//!
//! Saving is canonical, so load → save reproduces the input bytes.

use std::path::Path;

use thiserror::Error;

use crate::autodiff::{ParamStore, Tensor};
use crate::config::{ConfigError, RunConfig};

pub const MAGIC: &str = "MGF1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not an MGF1 checkpoint")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

/// Weights plus the configuration that built them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(config: &RunConfig, store: &ParamStore<f32>) -> Self {
        Checkpoint {
            config: config.clone(),
            tensors: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC}\n").into_bytes();
        for (name, t) in &self.tensors {
            out.extend(format!("{name} {}x{}\n", t.rows(), t.cols()).bytes());
        }
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out.extend(self.config.to_text().bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut pos = 0;
        let mut next_line = |bytes: &[u8]| -> Result<String, CheckpointError> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| CheckpointError::Malformed("unterminated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?
                .to_string();
            pos += end + 1;
            Ok(line)
        };
        if next_line(bytes).ok().as_deref() != Some(MAGIC) {
            return Err(CheckpointError::BadMagic);
        }
        let mut manifest = Vec::new();
        loop {
            let line = next_line(bytes)?;
            if line.is_empty() {
                break;
            }
            let bad = || CheckpointError::Malformed(format!("bad manifest line {line:?}"));
            let (name, shape) = line.rsplit_once(' ').ok_or_else(bad)?;
            let (r, c) = shape.split_once('x').ok_or_else(bad)?;
            let rows: usize = r.parse().map_err(|_| bad())?;
            let cols: usize = c.parse().map_err(|_| bad())?;
            manifest.push((name.to_string(), rows, cols));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, rows, cols) in manifest {
            let len = rows * cols * 4;
            if bytes.len() < pos + len {
                return Err(CheckpointError::Malformed(format!("payload truncated in {name}")));
            }
            let data: Vec<f32> = bytes[pos..pos + len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            pos += len;
            let t = Tensor::from_vec(rows, cols, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        let text = std::str::from_utf8(&bytes[pos..])
            .map_err(|_| CheckpointError::Malformed("config echo is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Copies the weights into `store`, which must have exactly the same
    /// tensor names and shapes in the same order.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<(), CheckpointError> {
        if store.len() != self.tensors.len() {
            return Err(CheckpointError::Mismatch(format!(
                "model has {} tensors, checkpoint has {}",
                store.len(),
                self.tensors.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, (name, t)) in ids.into_iter().zip(&self.tensors) {
            let p = store.get(id);
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "expected {} {:?}, found {name} {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            store.set_value(id, t.clone());
        }
        Ok(())
    }
}
