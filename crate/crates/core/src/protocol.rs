//! Evaluation protocol: optional test-time adaptation per video, then
//! box-prompted inference for every visible anatomy of every frame.
//!
//! Each video adapts from the same pristine parameters. One encoder is
//! adapted per video using point prompts from a single configured anatomy
//! and then serves all anatomies. Box prompts are the tight ground-truth
//! boxes, without jitter.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Mask, MaskProb};
use crate::metrics::{self, MetricsRecord, MetricsTable, DEFAULT_THRESHOLD};
use crate::model::{self, Component, ModelParams};
use crate::rng;
use crate::synth::{Anatomy, VideoSequence, ANATOMIES};
use crate::ttt::{adapt_video, Strategy, TttConfig, TttTrace};

/// What happens before inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// The checkpoint as is.
    None,
    PromptTtt,
    RotTtt,
    MaeTtt,
    /// Predictions replaced by the ground truth; checks the plumbing.
    Oracle,
}

impl EvalMode {
    pub const ALL: [EvalMode; 5] = [EvalMode::None, EvalMode::PromptTtt, EvalMode::RotTtt, EvalMode::MaeTtt, EvalMode::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::None => "none",
            EvalMode::PromptTtt => "prompt_ttt",
            EvalMode::RotTtt => "rot_ttt",
            EvalMode::MaeTtt => "mae_ttt",
            EvalMode::Oracle => "oracle",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|m| m.name() == name)
            .copied()
            .ok_or_else(|| Error::Config(alloc::format!("unknown eval mode {name:?} (expected none|prompt_ttt|rot_ttt|mae_ttt|oracle)")))
    }

    pub fn strategy(self) -> Option<Strategy> {
        match self {
            EvalMode::PromptTtt => Some(Strategy::Prompt),
            EvalMode::RotTtt => Some(Strategy::Rotation),
            EvalMode::MaeTtt => Some(Strategy::Mae),
            EvalMode::None | EvalMode::Oracle => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Anatomy whose masks supply test-time point prompts.
    pub prompt_anatomy: Anatomy,
    pub threshold: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { prompt_anatomy: Anatomy::Pharynx, threshold: DEFAULT_THRESHOLD }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoOutcome {
    pub records: Vec<MetricsRecord>,
    pub trace: Option<TttTrace>,
    /// Encoder digest the adaptation started from.
    pub start_encoder: String,
    pub final_encoder: String,
}

/// TTT seed for the `index`-th test video; the same for every mode and
/// prompt count so only the controlled variable differs.
pub fn video_seed(ttt_seed: u64, index: usize) -> u64 {
    rng::derive_path(ttt_seed, &[rng::tags::TTT, index as u64])
}

pub fn evaluate_video(
    video: &VideoSequence,
    index: usize,
    params: &ModelParams,
    mode: EvalMode,
    ttt: &TttConfig,
    proto: &ProtocolConfig,
) -> Result<VideoOutcome> {
    let start_encoder = params.digest(&Component::Encoder);
    let (adapted, trace) = match mode.strategy() {
        Some(strategy) => {
            let cfg = TttConfig { seed: video_seed(ttt.seed, index), ..ttt.clone() };
            let masks: Vec<Mask> = (0..video.len()).map(|t| video.mask(t, proto.prompt_anatomy).clone()).collect();
            let (p, tr) = adapt_video(&video.frames, &masks, params, &cfg, strategy)?;
            (p, Some(tr))
        }
        None => (params.clone(), None),
    };
    let mut records = Vec::new();
    for (t, frame) in video.frames.iter().enumerate() {
        let feat = if mode == EvalMode::Oracle { None } else { Some(model::encode_image(frame, &adapted)?) };
        for a in ANATOMIES {
            let gt = video.mask(t, a);
            let Some(b) = gt.bounding_box() else { continue };
            let prob = match &feat {
                Some(f) => {
                    let emb = model::encode_box(&b, frame.height, frame.width, &adapted)?;
                    model::decode(f, &emb, &adapted.dseg, &adapted.arch)
                }
                None => MaskProb { height: gt.height, width: gt.width, data: gt.data.iter().map(|&v| v as f64).collect() },
            };
            records.push(metrics::evaluate_instance(&prob, gt, proto.threshold, index, t, a.code())?);
        }
    }
    Ok(VideoOutcome { records, trace, start_encoder, final_encoder: adapted.digest(&Component::Encoder) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub records: Vec<MetricsRecord>,
    pub table: MetricsTable,
    pub videos: Vec<VideoOutcome>,
}

/// Evaluates every video from the same `params`.
pub fn run_eval(
    videos: &[VideoSequence],
    params: &ModelParams,
    mode: EvalMode,
    ttt: &TttConfig,
    proto: &ProtocolConfig,
) -> Result<EvalReport> {
    run_eval_with(videos, params, mode, ttt, proto, &mut |_, _| {})
}

/// [`run_eval`] with a callback after each video.
pub fn run_eval_with(
    videos: &[VideoSequence],
    params: &ModelParams,
    mode: EvalMode,
    ttt: &TttConfig,
    proto: &ProtocolConfig,
    on_video: &mut dyn FnMut(usize, &VideoOutcome),
) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(Error::Config(String::from("no test videos to evaluate")));
    }
    let mut outcomes = Vec::with_capacity(videos.len());
    for (i, v) in videos.iter().enumerate() {
        let o = evaluate_video(v, i, params, mode, ttt, proto)?;
        on_video(i, &o);
        outcomes.push(o);
    }
    let records: Vec<MetricsRecord> = outcomes.iter().flat_map(|o| o.records.iter().cloned()).collect();
    let table = metrics::aggregate(&records)?;
    Ok(EvalReport { mode, records, table, videos: outcomes })
}

/// Mean DSC over the records of one anatomy.
pub fn mean_dsc(records: &[MetricsRecord], anatomy: Option<Anatomy>) -> Option<f64> {
    let v: Vec<f64> = records.iter().filter(|r| anatomy.is_none_or(|a| r.anatomy == a.code())).map(|r| r.dsc).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
