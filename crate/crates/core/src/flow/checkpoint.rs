//! Binary checkpoint: the magic `FDACKPT1`, a little-endian `u32` length, a
//! TOML manifest of that many bytes, then every parameter as `f32` LE in the
//! block order listed by the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Arch, VelocityModel};
use crate::error::{Error, Result};
use crate::grid::VariableStats;

const MAGIC: &[u8; 8] = b"FDACKPT1";
const FORMAT_VERSION: u32 = 1;

/// Training provenance stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// 0 for an untrained model, 1 after first-stage, 2 after rollout training.
    pub stage: u32,
    pub iterations: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    arch: Arch,
    h: usize,
    w: usize,
    variable_names: Vec<String>,
    mean: Vec<f64>,
    std: Vec<f64>,
    param_count: usize,
    blocks: Vec<(String, usize)>,
    meta: CheckpointMeta,
}

/// Writes `model`; parameters are rounded to `f32`.
pub fn save_checkpoint(model: &VelocityModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let (h, w, _) = model.grid();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch: model.arch().clone(),
        h,
        w,
        variable_names: model.variable_names().to_vec(),
        mean: model.stats().mean().to_vec(),
        std: model.stats().std().to_vec(),
        param_count: model.param_count(),
        blocks: model.param_blocks().into_iter().map(|b| (b.name, b.len)).collect(),
        meta: meta.clone(),
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Format(e.to_string()))?
        .into_bytes();
    let mut buf = Vec::with_capacity(12 + text.len() + 4 * model.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(&text);
    for &p in model.params() {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(VelocityModel, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated manifest"))?;
    let text = std::str::from_utf8(body).map_err(|_| bad("manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| bad(&format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {}", manifest.format_version)));
    }
    let data = &bytes[12 + len..];
    if data.len() != 4 * manifest.param_count {
        return Err(bad(&format!(
            "expected {} parameter bytes, found {}",
            4 * manifest.param_count,
            data.len()
        )));
    }
    let params: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let stats = VariableStats::new(manifest.mean, manifest.std)?;
    let model = VelocityModel::from_parts(
        manifest.arch,
        manifest.h,
        manifest.w,
        manifest.variable_names,
        stats,
        params,
    )?;
    let stored: Vec<(String, usize)> = manifest.blocks;
    let actual: Vec<(String, usize)> = model.param_blocks().into_iter().map(|b| (b.name, b.len)).collect();
    if stored != actual {
        return Err(Error::ArchMismatch(
            "parameter block table does not match the architecture".into(),
        ));
    }
    Ok((model, manifest.meta))
}

/// Loads and checks the stored architecture and grid against expectations.
pub fn load_checkpoint_expecting(
    path: &Path,
    arch: &Arch,
    grid: (usize, usize, usize),
) -> Result<(VelocityModel, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    if model.arch() != arch {
        return Err(Error::ArchMismatch(format!(
            "checkpoint has {:?}, configuration asks for {:?}",
            model.arch(),
            arch
        )));
    }
    if model.grid() != grid {
        return Err(Error::ArchMismatch(format!(
            "checkpoint grid {:?} differs from {:?}",
            model.grid(),
            grid
        )));
    }
    Ok((model, meta))
}
