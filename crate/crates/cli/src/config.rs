//! Experiment configuration.
//!
//! Resolution order: built-in defaults, then the `--config` JSON file, then
//! environment overrides, then command-line flags. An override variable
//! names a field path below [`ENV_PREFIX`] with `__` separators, e.g.
//! `PROMPT_TTT__TRAINER__EPOCHS=3` or `PROMPT_TTT__SYNTH__SHIFT__GAMMA=0.5`.
//! Values are parsed as JSON when possible and as plain strings otherwise.

use std::path::Path;

use prompt_ttt_core::model::ArchConfig;
use prompt_ttt_core::protocol::{EvalMode, ProtocolConfig};
use prompt_ttt_core::synth::{Anatomy, SceneConfig, ShiftSpec};
use prompt_ttt_core::trainer::TrainConfig;
use prompt_ttt_core::ttt::TttConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::read_json;
use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "PROMPT_TTT__";
pub const ECHO_NAME: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub scene: SceneConfig,
    pub shift: ShiftSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_videos: 10, scene: SceneConfig::default(), shift: ShiftSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Anatomy whose masks supply the test-time point prompts.
    pub prompt_anatomy: Anatomy,
    /// Modes run by `eval` when `--mode` is not given.
    pub modes: Vec<EvalMode>,
    /// Evaluate the shifted copies (`true`) or the untouched test videos.
    pub shifted: bool,
    pub ablation_n_points: Vec<usize>,
}

impl EvalConfig {
    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig { prompt_anatomy: self.prompt_anatomy, threshold: self.threshold }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        Self {
            threshold: p.threshold,
            prompt_anatomy: p.prompt_anatomy,
            modes: vec![EvalMode::None, EvalMode::PromptTtt],
            shifted: true,
            ablation_n_points: vec![1, 3, 5],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Copied into every component seed by [`ExperimentConfig::set_seed`].
    pub seed: u64,
    pub arch: ArchConfig,
    pub synth: SynthConfig,
    pub trainer: TrainConfig,
    pub ttt: TttConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.trainer.seed = seed;
        self.ttt.seed = seed;
        self.synth.shift.seed = seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        self.arch.validate()?;
        self.trainer.validate()?;
        self.ttt.validate()?;
        let s = &self.synth.scene;
        let ds = self.arch.downsample();
        if s.frames == 0 || s.height == 0 || s.width == 0 || s.height % ds != 0 || s.width % ds != 0 {
            return Err(CliError::Usage(format!(
                "synth.scene must have frames > 0 and height/width positive multiples of {ds}, got {}x{} with {} frames",
                s.height, s.width, s.frames
            )));
        }
        if self.synth.n_videos < 2 {
            return Err(CliError::Usage(format!("synth.n_videos must be >= 2, got {}", self.synth.n_videos)));
        }
        let t = self.eval.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(CliError::Usage(format!("eval.threshold must lie in (0, 1), got {t}")));
        }
        if self.eval.modes.is_empty() {
            return Err(CliError::Usage("eval.modes is empty".into()));
        }
        if self.eval.ablation_n_points.is_empty() || self.eval.ablation_n_points.contains(&0) {
            return Err(CliError::Usage("eval.ablation_n_points must be a non-empty list of positive counts".into()));
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Applies `PREFIX__A__B=value` pairs to `base`. Unknown paths are errors.
pub fn apply_overrides(base: &mut Value, vars: impl IntoIterator<Item = (String, String)>) -> CliResult<()> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_ascii_lowercase).collect();
        let mut node = &mut *base;
        for (i, part) in path.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| CliError::Usage(format!("{key}: {} is not a section", path[..i].join("."))))?;
            node = obj.get_mut(part).ok_or_else(|| CliError::Usage(format!("{key}: unknown config field {}", path[..=i].join("."))))?;
        }
        *node = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
    }
    Ok(())
}

/// Defaults, then `file`, then environment overrides, then `seed`.
pub fn resolve(file: Option<&Path>, vars: impl IntoIterator<Item = (String, String)>, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match file {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Usage(format!("config file {} does not exist", p.display())));
            }
            read_json(p)?
        }
        None => ExperimentConfig::default(),
    };
    let mut value = cfg.to_value();
    apply_overrides(&mut value, vars)?;
    cfg = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("environment override: {e}")))?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the resolved config into `dir`.
pub fn echo(dir: &Path, cfg: &ExperimentConfig) -> CliResult<()> {
    crate::dataset::write_json(&dir.join(ECHO_NAME), cfg)
}
