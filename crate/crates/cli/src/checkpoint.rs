//! Checkpoints: `checkpoint.bin` holds raw little-endian f64 arrays,
//! `checkpoint.json` describes them (names, shapes, offsets), the
//! architecture, optimizer scalars and the config that produced them.

use std::fs;
use std::path::{Path, PathBuf};

use prompt_ttt_core::model::{init_params, Component};
use prompt_ttt_core::optim::OptimizerState;
use prompt_ttt_core::{ArchConfig, ModelParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{read_json, write_json};
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"PTTTCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const BIN_NAME: &str = "checkpoint.bin";
pub const META_NAME: &str = "checkpoint.json";

const SECTIONS: [&str; 3] = ["param", "adam_m", "adam_v"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub section: String,
    pub component: Component,
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f64 elements from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub optimizer_step: u64,
    /// Learning rate as its exact bit pattern, then as a readable number.
    pub optimizer_lr_bits: u64,
    pub optimizer_lr: f64,
    pub payload_sha256: String,
    pub digests: Vec<(Component, String)>,
    pub tensors: Vec<TensorEntry>,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// The resolved experiment config of the run that wrote it.
    pub config: serde_json::Value,
}

fn sections(ck: &Checkpoint) -> [&ModelParams; 3] {
    [&ck.params, &ck.optimizer.m, &ck.optimizer.v]
}

pub fn save(dir: &Path, ck: &Checkpoint) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (section, p) in SECTIONS.iter().zip(sections(ck)) {
        for c in Component::ALL {
            for (name, t) in p.group(&c).named() {
                tensors.push(TensorEntry { section: section.to_string(), component: c.clone(), name, shape: t.shape.clone(), offset });
                offset += t.data.len();
                for v in &t.data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let mut bin = Vec::with_capacity(payload.len() + 12);
    bin.extend_from_slice(MAGIC);
    bin.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bin.extend_from_slice(&payload);
    let bpath = dir.join(BIN_NAME);
    fs::write(&bpath, &bin).map_err(|e| CliError::io(&bpath, e))?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        arch: ck.params.arch.clone(),
        optimizer_step: ck.optimizer.step,
        optimizer_lr_bits: ck.optimizer.lr.to_bits(),
        optimizer_lr: ck.optimizer.lr,
        payload_sha256: hex_sha256(&payload),
        digests: Component::ALL.iter().map(|c| (c.clone(), ck.params.digest(c))).collect(),
        tensors,
        config: ck.config.clone(),
    };
    write_json(&dir.join(META_NAME), &meta)
}

/// Accepts the checkpoint directory or either of its two files.
pub fn checkpoint_dir(path: &Path) -> PathBuf {
    match path.file_name().and_then(|n| n.to_str()) {
        Some(BIN_NAME) | Some(META_NAME) => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        _ => path.to_path_buf(),
    }
}

pub fn load(path: &Path) -> CliResult<Checkpoint> {
    let dir = checkpoint_dir(path);
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let mpath = dir.join(META_NAME);
    let meta: CheckpointMeta = read_json(&mpath)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(CliError::format(&mpath, format!("format_version {} is not supported", meta.format_version)));
    }
    let bpath = dir.join(BIN_NAME);
    let bin = fs::read(&bpath).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::format(&bpath, "file is missing"),
        _ => CliError::io(&bpath, e),
    })?;
    if bin.len() < 12 || &bin[..8] != MAGIC {
        return Err(CliError::format(&bpath, "not a checkpoint payload"));
    }
    let version = u32::from_le_bytes(bin[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CliError::format(&bpath, format!("format_version {version} is not supported")));
    }
    let payload = &bin[12..];
    if payload.len() % 8 != 0 {
        return Err(CliError::format(&bpath, "payload length is not a multiple of 8"));
    }
    if hex_sha256(payload) != meta.payload_sha256 {
        return Err(CliError::format(&bpath, "payload checksum does not match checkpoint.json"));
    }
    let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

    let template = init_params(0, &meta.arch)?;
    let mut parts = [template.clone(), template.clone(), template];
    let mut entries = meta.tensors.iter();
    let mut offset = 0;
    for (section, p) in SECTIONS.iter().zip(parts.iter_mut()) {
        for c in Component::ALL {
            let names: Vec<String> = p.group(&c).named().into_iter().map(|(n, _)| n).collect();
            for (name, t) in names.into_iter().zip(p.group_mut(&c).tensors_mut()) {
                let e = entries
                    .next()
                    .ok_or_else(|| CliError::format(&mpath, format!("tensor list ends before {section}/{}/{name}", c.name())))?;
                if e.section != *section || e.component != c || e.name != name || e.shape != t.shape || e.offset != offset {
                    return Err(CliError::format(
                        &mpath,
                        format!("tensor entry {}/{}/{} does not match the architecture at {section}/{}/{name}", e.section, e.component.name(), e.name, c.name()),
                    ));
                }
                let n = t.data.len();
                let src = values
                    .get(offset..offset + n)
                    .ok_or_else(|| CliError::format(&bpath, format!("payload too short for {section}/{}/{name}", c.name())))?;
                t.data.copy_from_slice(src);
                offset += n;
            }
        }
    }
    if entries.next().is_some() || offset != values.len() {
        return Err(CliError::format(&mpath, "checkpoint holds more tensors than the architecture"));
    }
    let [params, m, v] = parts;
    for (c, d) in &meta.digests {
        if params.digest(c) != *d {
            return Err(CliError::format(&mpath, format!("digest mismatch for {}", c.name())));
        }
    }
    let optimizer = OptimizerState { m, v, step: meta.optimizer_step, lr: f64::from_bits(meta.optimizer_lr_bits) };
    Ok(Checkpoint { params, optimizer, config: meta.config })
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let params = init_params(3, &ArchConfig::default()).unwrap();
        let mut optimizer = OptimizerState::new(&params, 1e-3 * 0.8);
        optimizer.step = 17;
        optimizer.m = init_params(4, &ArchConfig::default()).unwrap();
        optimizer.v = init_params(5, &ArchConfig::default()).unwrap();
        Checkpoint { params, optimizer, config: serde_json::json!({"seed": 3}) }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &ck).unwrap();
        let back = load(&dir.path().join(BIN_NAME)).unwrap();
        assert_eq!(back, ck);
        for c in Component::ALL {
            assert_eq!(back.params.digest(&c), ck.params.digest(&c));
        }
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &sample()).unwrap();
        let p = dir.path().join(BIN_NAME);
        let mut b = fs::read(&p).unwrap();
        b[100] ^= 1;
        fs::write(&p, b).unwrap();
        assert!(matches!(load(dir.path()), Err(CliError::Format { .. })));
    }
}
