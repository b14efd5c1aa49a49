//! Checkpoint container (little-endian):
//!
//! ```text
//! b"GRAMCKPT"            8 bytes magic
//! format_version         u32
//! header_len             u64
//! header                 JSON: {kind, config, num_params, noise_seed, steps, trained}
//! params                 num_params x f64
//! checksum               u64 FNV-1a over everything above
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{RegionClassifier, RegionClassifierConfig, SegModel, SegModelConfig};
use crate::error::{GramError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GRAMCKPT";

#[derive(Serialize, Deserialize)]
struct Header<C> {
    kind: String,
    config: C,
    num_params: usize,
    noise_seed: u64,
    steps: u64,
    trained: bool,
}

/// Anything stored as config + flat parameters.
pub trait Checkpointable: Sized {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug;

    fn checkpoint_config(&self) -> &Self::Config;
    fn checkpoint_params(&self) -> &[f64];
    /// `(noise_seed, steps, trained)`.
    fn checkpoint_state(&self) -> (u64, u64, bool);
    fn from_checkpoint(config: Self::Config, params: Vec<f64>, state: (u64, u64, bool)) -> Result<Self>;
}

impl Checkpointable for SegModel {
    const KIND: &'static str = "seg_model";
    type Config = SegModelConfig;

    fn checkpoint_config(&self) -> &SegModelConfig {
        &self.config
    }

    fn checkpoint_params(&self) -> &[f64] {
        &self.params
    }

    fn checkpoint_state(&self) -> (u64, u64, bool) {
        (self.noise_seed, self.steps, true)
    }

    fn from_checkpoint(config: SegModelConfig, params: Vec<f64>, state: (u64, u64, bool)) -> Result<Self> {
        let mut model = SegModel::new(config, state.0)?;
        if model.params.len() != params.len() {
            return Err(GramError::Checkpoint(format!(
                "checkpoint has {} parameters, config implies {}",
                params.len(),
                model.params.len()
            )));
        }
        model.params = params;
        model.steps = state.1;
        Ok(model)
    }
}

impl Checkpointable for RegionClassifier {
    const KIND: &'static str = "region_classifier";
    type Config = RegionClassifierConfig;

    fn checkpoint_config(&self) -> &RegionClassifierConfig {
        &self.config
    }

    fn checkpoint_params(&self) -> &[f64] {
        &self.params
    }

    fn checkpoint_state(&self) -> (u64, u64, bool) {
        (0, 0, self.trained)
    }

    fn from_checkpoint(config: RegionClassifierConfig, params: Vec<f64>, state: (u64, u64, bool)) -> Result<Self> {
        let mut c = RegionClassifier::new(config, 0)?;
        if c.params.len() != params.len() {
            return Err(GramError::Checkpoint(format!(
                "checkpoint has {} parameters, config implies {}",
                params.len(),
                c.params.len()
            )));
        }
        c.params = params;
        c.trained = state.2;
        Ok(c)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn save_checkpoint<M: Checkpointable>(model: &M, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (noise_seed, steps, trained) = model.checkpoint_state();
    let params = model.checkpoint_params();
    let header = serde_json::to_vec(&Header {
        kind: M::KIND.to_string(),
        config: model.checkpoint_config(),
        num_params: params.len(),
        noise_seed,
        steps,
        trained,
    })?;
    let mut buf = Vec::with_capacity(28 + header.len() + 8 * params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in params {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GramError::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| GramError::io(path, e))
}

pub fn load_checkpoint<M: Checkpointable>(path: impl AsRef<Path>) -> Result<M> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(GramError::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| GramError::io(path, e))?;
    let corrupt = |what: &str| GramError::Checkpoint(format!("{}: {what}", path.display()));
    if bytes.len() < 28 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!(
            "format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header<M::Config> =
        serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    if header.kind != M::KIND {
        return Err(corrupt(&format!("holds a {}, expected a {}", header.kind, M::KIND)));
    }
    let data = &body[header_end..];
    if data.len() != 8 * header.num_params {
        return Err(corrupt("parameter block length mismatch"));
    }
    let params = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    M::from_checkpoint(header.config, params, (header.noise_seed, header.steps, header.trained))
}

/// Load and require the stored config to equal `expected`.
pub fn load_checkpoint_expecting<M: Checkpointable>(path: impl AsRef<Path>, expected: &M::Config) -> Result<M> {
    let model: M = load_checkpoint(path)?;
    if model.checkpoint_config() != expected {
        return Err(GramError::ConfigMismatch(format!(
            "checkpoint config {:?} differs from expected {:?}",
            model.checkpoint_config(),
            expected
        )));
    }
    Ok(model)
}
