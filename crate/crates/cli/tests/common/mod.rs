#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prompt_ttt::config::ExperimentConfig;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_prompt-ttt"));
    for (k, _) in std::env::vars() {
        if k.starts_with(prompt_ttt::config::ENV_PREFIX) {
            c.env_remove(k);
        }
    }
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A config small enough for a few seconds per command.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.synth.n_videos = 3;
    c.synth.scene.frames = 2;
    c.synth.scene.height = 64;
    c.synth.scene.width = 64;
    c.trainer.epochs = 1;
    c.ttt.steps_per_frame = 1;
    c.ttt.loops = 2;
    c
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join("input_config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(root, &p, out);
        } else {
            out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
}

/// SHA-256 over sorted relative paths and file contents.
pub fn dir_digest(dir: &Path) -> String {
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    let mut bytes = Vec::new();
    for (name, data) in files {
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&(data.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&data);
    }
    prompt_ttt::checkpoint::hex_sha256(&bytes)
}

/// Contents of every `.csv` below `dir`, keyed by relative path.
pub fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    files.retain(|(n, _)| n.ends_with(".csv"));
    files
}
