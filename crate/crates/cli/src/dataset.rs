//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/videos/<name>/video.json           generator metadata
//! <root>/videos/<name>/frames/000.pgm       8-bit intensities
//! <root>/videos/<name>/labels/000.pgm       label codes 0-12
//! <root>/videos/<name>/masks/01/000.pgm     per-anatomy masks, 0 or 255
//! <root>/target/<name>/...                  shifted copies of test videos
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use prompt_ttt_core::synth::{self, Anatomy, ShiftSpec, Split, VideoMeta, VideoSequence, ANATOMIES};
use prompt_ttt_core::{Error as CoreError, Mask, Plane};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::pgm;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSide {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub name: String,
    /// Relative to the dataset root.
    pub path: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub split: SplitSide,
    /// `present[t][code - 1]`: the anatomy has foreground on frame `t`.
    pub present: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    /// Indices into `source`.
    pub split: Split,
    pub source: Vec<VideoEntry>,
    /// Domain-shifted copies of the test videos, in `split.test` order.
    pub target: Vec<VideoEntry>,
    pub shift: ShiftSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub source: Vec<VideoSequence>,
    pub target: Vec<VideoSequence>,
}

impl Dataset {
    pub fn train_videos(&self) -> Vec<VideoSequence> {
        self.manifest.split.train.iter().map(|&i| self.source[i].clone()).collect()
    }

    pub fn test_videos(&self) -> Vec<VideoSequence> {
        self.manifest.split.test.iter().map(|&i| self.source[i].clone()).collect()
    }
}

fn entry(name: String, path: String, v: &VideoSequence, split: SplitSide) -> VideoEntry {
    let (height, width) = v.frames[0].dims();
    VideoEntry { name, path, frames: v.len(), height, width, seed: v.meta.seed, split, present: v.presence() }
}

/// Source videos, their split and shifted test copies, with a manifest.
pub fn assemble(seed: u64, source: Vec<VideoSequence>, split: Split, shift: &ShiftSpec) -> Dataset {
    let side = |i: usize| if split.train.contains(&i) { SplitSide::Train } else { SplitSide::Test };
    let src_entries: Vec<VideoEntry> = source
        .iter()
        .enumerate()
        .map(|(i, v)| entry(format!("video_{i:03}"), format!("videos/video_{i:03}"), v, side(i)))
        .collect();
    let target: Vec<VideoSequence> = split.test.iter().map(|&i| synth::apply_domain_shift(&source[i], shift)).collect();
    let tgt_entries = split
        .test
        .iter()
        .zip(&target)
        .map(|(&i, v)| entry(format!("video_{i:03}"), format!("target/video_{i:03}"), v, SplitSide::Test))
        .collect();
    Dataset {
        manifest: Manifest { format_version: FORMAT_VERSION, seed, split, source: src_entries, target: tgt_entries, shift: shift.clone() },
        source,
        target,
    }
}

fn mkdir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let s = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::format(path, "file is missing"),
        _ => CliError::io(path, e),
    })?;
    serde_json::from_str(&s).map_err(|e| CliError::format(path, e.to_string()))
}

fn frame_name(t: usize) -> String {
    format!("{t:03}.pgm")
}

pub fn save_video(dir: &Path, v: &VideoSequence) -> CliResult<()> {
    for sub in ["frames", "labels"] {
        mkdir(&dir.join(sub))?;
    }
    for a in ANATOMIES {
        mkdir(&dir.join("masks").join(format!("{:02}", a.code())))?;
    }
    write_json(&dir.join("video.json"), &v.meta)?;
    for t in 0..v.len() {
        pgm::write(&dir.join("frames").join(frame_name(t)), &pgm::from_unit(&v.frames[t]))?;
        pgm::write(&dir.join("labels").join(frame_name(t)), &v.label_maps[t])?;
        for a in ANATOMIES {
            let m = v.mask(t, a);
            let scaled = Plane { height: m.height, width: m.width, data: m.data.iter().map(|&b| b * 255).collect() };
            pgm::write(&dir.join("masks").join(format!("{:02}", a.code())).join(frame_name(t)), &scaled)?;
        }
    }
    Ok(())
}

pub fn load_video(dir: &Path, e: &VideoEntry) -> CliResult<VideoSequence> {
    if !dir.is_dir() {
        return Err(CliError::format(dir, format!("video directory for {} is missing", e.name)));
    }
    let meta: VideoMeta = read_json(&dir.join("video.json"))?;
    let mut v = VideoSequence { frames: Vec::new(), masks: Vec::new(), label_maps: Vec::new(), meta };
    for t in 0..e.frames {
        let fp = dir.join("frames").join(frame_name(t));
        let frame = pgm::read(&fp)?;
        if frame.dims() != (e.height, e.width) {
            return Err(CliError::format(&fp, format!("expected {}x{}, found {}x{}", e.height, e.width, frame.height, frame.width)));
        }
        let lp = dir.join("labels").join(frame_name(t));
        let labels = pgm::read(&lp)?;
        if let Some(&bad) = labels.data.iter().find(|&&c| c as usize > ANATOMIES.len()) {
            return Err(CoreError::Validation(format!("label map {} holds value {bad}, outside 0-12", lp.display())).into());
        }
        let mut stack = Vec::with_capacity(ANATOMIES.len());
        for a in ANATOMIES {
            let mp = dir.join("masks").join(format!("{:02}", a.code())).join(frame_name(t));
            let raw = pgm::read(&mp)?;
            if let Some(&bad) = raw.data.iter().find(|&&b| b != 0 && b != 255) {
                return Err(CoreError::Validation(format!("mask {} holds value {bad}, expected 0 or 255", mp.display())).into());
            }
            if !raw.same_dims(&frame) {
                return Err(CliError::format(&mp, "mask dims differ from frame"));
            }
            let present = e.present.get(t).and_then(|p| p.get(a.index())).copied().unwrap_or(false);
            let m: Mask = Plane { height: raw.height, width: raw.width, data: raw.data.iter().map(|&b| (b != 0) as u8).collect() };
            if present && m.is_empty_mask() {
                return Err(CoreError::Validation(format!("{} is marked present but {} is empty", a.name(), mp.display())).into());
            }
            stack.push(m);
        }
        v.frames.push(pgm::to_unit(&frame));
        v.label_maps.push(labels);
        v.masks.push(stack);
    }
    v.validate()?;
    Ok(v)
}

pub fn save_dataset(root: &Path, d: &Dataset) -> CliResult<()> {
    mkdir(root)?;
    for (e, v) in d.manifest.source.iter().zip(&d.source).chain(d.manifest.target.iter().zip(&d.target)) {
        save_video(&root.join(&e.path), v)?;
    }
    write_json(&root.join("manifest.json"), &d.manifest)
}

pub fn load_dataset(root: &Path) -> CliResult<Dataset> {
    if !root.is_dir() {
        return Err(CliError::Usage(format!("data directory {} does not exist", root.display())));
    }
    let mpath = root.join("manifest.json");
    let manifest: Manifest = read_json(&mpath)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CliError::format(
            &mpath,
            format!("format_version {} is not supported (expected {FORMAT_VERSION})", manifest.format_version),
        ));
    }
    let n = manifest.source.len();
    let mut seen: Vec<usize> = manifest.split.train.iter().chain(&manifest.split.test).copied().collect();
    seen.sort_unstable();
    if seen != (0..n).collect::<Vec<_>>() {
        return Err(CliError::format(&mpath, "split does not partition the source videos"));
    }
    if manifest.target.len() != manifest.split.test.len() {
        return Err(CliError::format(&mpath, "target list does not match the test split"));
    }
    let load_all = |entries: &[VideoEntry]| -> CliResult<Vec<VideoSequence>> {
        entries.iter().map(|e| load_video(&resolve(root, &e.path, &mpath)?, e)).collect()
    };
    let source = load_all(&manifest.source)?;
    let target = load_all(&manifest.target)?;
    Ok(Dataset { manifest, source, target })
}

fn resolve(root: &Path, rel: &str, manifest: &Path) -> CliResult<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(CliError::format(manifest, format!("path {rel:?} must stay inside the dataset")));
    }
    let full = root.join(p);
    if !full.is_dir() {
        return Err(CliError::format(manifest, format!("dangling path {rel:?}")));
    }
    Ok(full)
}

/// Anatomy code directory name, e.g. `02` for the pharynx.
pub fn mask_dir(a: Anatomy) -> String {
    format!("{:02}", a.code())
}
