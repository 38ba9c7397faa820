//! Test-time adaptation of the encoder.
//!
//! The prompt-guided step renders two augmented views of a frame, clicks
//! each with its own random foreground points of the target instance,
//! decodes both through the frozen auxiliary decoder, maps the masks back to
//! the frame and penalises their disagreement. Only encoder weights move.
//! Videos are processed in `loops` sequential passes; weights, optimizer
//! moments and the saturation schedule all carry across frames and passes.
//!
//! Rotation prediction and masked-patch reconstruction are provided as
//! alternative self-supervised steps under the same budget.

use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentation, apply_geometric, invert_mask, sample_spec, AugmentRanges, AugmentationSpec};
use crate::error::{bail, Error, Result};
use crate::heads;
use crate::image::{BoxPrompt, Image, Mask, MaskProb, Plane, PointPrompt};
use crate::losses::{self, LossValue};
use crate::model::{self, Component, FeatureMap, ModelParams};
use crate::optim::{OptimizerState, Plateau};
use crate::rng::{self, tags};

const ENCODER_ONLY: [Component; 1] = [Component::Encoder];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TttConfig {
    pub learning_rate: f64,
    pub steps_per_frame: usize,
    /// Passes over the video (`K`).
    pub loops: usize,
    /// Point prompts per augmented view.
    pub n_points: usize,
    pub augment: AugmentRanges,
    pub seed: u64,
    pub lr_drop_factor: f64,
    /// Steps without sufficient improvement before the rate drops.
    pub saturation_patience: usize,
    pub saturation_tolerance: f64,
    /// Fraction of patches hidden by the reconstruction baseline.
    pub mae_mask_ratio: f64,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            learning_rate: 6e-5,
            steps_per_frame: 5,
            loops: 3,
            n_points: 1,
            augment: AugmentRanges::default(),
            seed: 0,
            lr_drop_factor: 0.8,
            saturation_patience: 20,
            saturation_tolerance: 1e-3,
            mae_mask_ratio: 0.5,
        }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            bail!(Config, "ttt learning_rate must be >= 0, got {}", self.learning_rate);
        }
        if self.loops == 0 {
            bail!(Config, "ttt loops must be >= 1");
        }
        if self.n_points == 0 {
            bail!(Config, "n_points must be >= 1");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            bail!(Config, "ttt lr_drop_factor must lie in (0, 1]");
        }
        let a = &self.augment;
        if !(a.gamma_min > 0.0 && a.gamma_min <= a.gamma_max && a.gamma_max.is_finite()) {
            bail!(Config, "gamma range [{}, {}] invalid", a.gamma_min, a.gamma_max);
        }
        if !(a.brightness_max >= 0.0) || !(a.noise_sigma_max >= 0.0) {
            bail!(Config, "augmentation ranges must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.mae_mask_ratio) {
            bail!(Config, "mae_mask_ratio must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Self-supervised objective used at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Point-prompt consistency over augmented views.
    Prompt,
    /// Four-way rotation prediction.
    Rotation,
    /// Masked-patch reconstruction.
    Mae,
}

/// `n` distinct foreground pixels of `mask`, uniformly at random.
pub fn sample_point_prompts(mask: &Mask, n: usize, seed: u64) -> Result<Vec<PointPrompt>> {
    let fg = mask.foreground();
    if n == 0 {
        bail!(Sampling, "requested zero point prompts");
    }
    if fg.len() < n {
        bail!(Sampling, "mask has {} foreground pixels, {n} points requested", fg.len());
    }
    let mut g = rng::rng(seed);
    Ok(index::sample(&mut g, fg.len(), n)
        .iter()
        .map(|i| {
            let (x, y) = fg[i];
            PointPrompt::new(x as f64, y as f64)
        })
        .collect())
}

/// One augmented, prompted branch of the consistency objective.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub spec: AugmentationSpec,
    /// Points in the original frame; they are moved with the geometry.
    pub points: Vec<PointPrompt>,
}

/// Draws the two views of a prompt-guided step.
pub fn sample_views(mask: &Mask, config: &TttConfig, step_seed: u64) -> Result<[View; 2]> {
    let mut g = rng::rng(rng::derive(step_seed, tags::AUGMENT));
    let s1 = sample_spec(&config.augment, &mut g);
    let s2 = sample_spec(&config.augment, &mut g);
    let p1 = sample_point_prompts(mask, config.n_points, rng::derive_path(step_seed, &[tags::PROMPT, 1]))?;
    let p2 = sample_point_prompts(mask, config.n_points, rng::derive_path(step_seed, &[tags::PROMPT, 2]))?;
    Ok([View { spec: s1, points: p1 }, View { spec: s2, points: p2 }])
}

struct Branch {
    tape: model::EncoderTape,
    emb: model::PromptEmbedding,
    dec: model::DecoderTape,
    dims: (usize, usize),
    aligned: MaskProb,
}

fn run_branch(image: &Image, view: &View, params: &ModelParams) -> Result<Branch> {
    let (img, pts) = apply_augmentation(image, &view.points, &view.spec)?;
    let (feat, tape) = model::encoder_forward(&params.encoder, &params.arch, &img);
    let emb = model::encode_points(&pts, img.height, img.width, params)?;
    let dec = model::decoder_forward(&params.daux, &params.arch, &feat, &emb);
    let prob = MaskProb { height: img.height, width: img.width, data: dec.prob.clone() };
    let aligned = invert_mask(&prob, &view.spec);
    Ok(Branch { tape, emb, dec, dims: (img.height, img.width), aligned })
}

/// Consistency loss of two given views and its encoder gradient.
pub fn consistency_objective(image: &Image, views: &[View; 2], params: &ModelParams) -> Result<(LossValue, ModelParams)> {
    image.validate_unit()?;
    let sd = params.arch.downsample();
    if image.height % sd != 0 || image.width % sd != 0 {
        bail!(Shape, "image {}x{} not divisible by downsample factor {sd}", image.height, image.width);
    }
    let b1 = run_branch(image, &views[0], params)?;
    let b2 = run_branch(image, &views[1], params)?;
    let loss = losses::consistency_loss(&b1.aligned, &b2.aligned)?;
    let g1 = losses::consistency_grad(&b1.aligned, &b2.aligned);
    let mut grads = params.zeros_like();
    let mut scratch = params.zeros_like();
    for (b, view, sign) in [(&b1, &views[0], 1.0), (&b2, &views[1], -1.0)] {
        let (h, w) = image.dims();
        let ginv = Plane { height: h, width: w, data: g1.iter().map(|g| sign * g).collect::<Vec<f64>>() };
        // The aligned mask is a pure gather of the view's mask, so its
        // gradient scatters back under the forward geometry.
        let gview = apply_geometric(&ginv, &view.spec);
        debug_assert_eq!((gview.height, gview.width), b.dims);
        let (gfeat, _) = model::decoder_backward(&params.daux, &params.arch, &b.dec, &b.emb, &gview.data, &mut scratch.daux);
        model::encoder_backward(&params.encoder, &params.arch, &b.tape, &gfeat, &mut grads.encoder);
    }
    Ok((loss, grads))
}

fn check_finite(loss: f64, grads: &ModelParams, what: &str) -> Result<()> {
    if !loss.is_finite() || !grads.all_finite() {
        bail!(Adaptation, "non-finite {what} loss or gradient ({loss})");
    }
    Ok(())
}

/// Encoder-only Adam step on the consistency of two explicit views.
/// Returns the loss before the update.
pub fn consistency_step_with_views(
    image: &Image,
    views: &[View; 2],
    params: &mut ModelParams,
    opt: &mut OptimizerState,
) -> Result<LossValue> {
    let (loss, grads) = consistency_objective(image, views, params)?;
    check_finite(loss.value, &grads, "consistency")?;
    opt.apply(params, &grads, &ENCODER_ONLY);
    Ok(loss)
}

/// Prompt-guided step: views and prompts drawn from `prompt_source_mask`
/// under `step_seed`.
pub fn ttt_consistency_step(
    image: &Image,
    prompt_source_mask: &Mask,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    config: &TttConfig,
    step_seed: u64,
) -> Result<LossValue> {
    if !prompt_source_mask.same_dims(image) {
        bail!(Shape, "prompt mask dims differ from image");
    }
    let views = sample_views(prompt_source_mask, config, step_seed)?;
    consistency_step_with_views(image, &views, params, opt)
}

/// Rotation-prediction step: the frame is turned by a random right angle
/// and the frozen rotation head must name the angle.
pub fn rotation_ttt_step(
    image: &Image,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    config: &TttConfig,
    step_seed: u64,
) -> Result<LossValue> {
    let _ = config;
    image.validate_unit()?;
    let k = rng::rng(rng::derive(step_seed, tags::AUGMENT)).random_range(0..4u32);
    let rotated = heads::rotate(image, k);
    let arch = &params.arch;
    let sd = arch.downsample();
    if rotated.height % sd != 0 || rotated.width % sd != 0 {
        bail!(Shape, "image not divisible by downsample factor {sd}");
    }
    let (feat, tape) = model::encoder_forward(&params.encoder, arch, &rotated);
    let mut grads = params.zeros_like();
    let (loss, ggrid) = heads::rotation_objective(&params.rot_head, &feat.grid, k as usize, &mut grads.rot_head, 1.0);
    let gfeat = FeatureMap { grid: ggrid, skip: feat.skip.zeros_like() };
    model::encoder_backward(&params.encoder, arch, &tape, &gfeat, &mut grads.encoder);
    check_finite(loss, &grads, "rotation")?;
    opt.apply(params, &grads, &ENCODER_ONLY);
    Ok(LossValue::scalar("rotation", loss))
}

/// Masked-reconstruction step. With nothing hidden the loss is defined as
/// zero and no update is made.
pub fn mae_ttt_step(
    image: &Image,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    config: &TttConfig,
    step_seed: u64,
) -> Result<LossValue> {
    image.validate_unit()?;
    let arch = &params.arch;
    let sd = arch.downsample();
    if image.height % sd != 0 || image.width % sd != 0 {
        bail!(Shape, "image not divisible by downsample factor {sd}");
    }
    let mut g = rng::rng(rng::derive(step_seed, tags::AUGMENT));
    let (masked, hidden) = heads::mask_patches(image, sd, config.mae_mask_ratio, &mut g);
    if !hidden.iter().any(|&h| h) {
        return Ok(LossValue::scalar("reconstruction", 0.0));
    }
    let (feat, tape) = model::encoder_forward(&params.encoder, arch, &masked);
    let mut grads = params.zeros_like();
    let (loss, ggrid) = heads::recon_objective(&params.recon_head, &feat.grid, sd, image, &hidden, &mut grads.recon_head, 1.0);
    let gfeat = FeatureMap { grid: ggrid, skip: feat.skip.zeros_like() };
    model::encoder_backward(&params.encoder, arch, &tape, &gfeat, &mut grads.encoder);
    check_finite(loss, &grads, "reconstruction")?;
    opt.apply(params, &grads, &ENCODER_ONLY);
    Ok(LossValue::scalar("reconstruction", loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub loop_index: usize,
    pub frame: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TttTrace {
    pub entries: Vec<TraceEntry>,
    /// Encoder digest before the first loop and after each loop.
    pub encoder_digests: Vec<String>,
}

impl TttTrace {
    /// Mean loss of one loop, if it has any steps.
    pub fn loop_mean(&self, loop_index: usize) -> Option<f64> {
        let v: Vec<f64> = self.entries.iter().filter(|e| e.loop_index == loop_index).map(|e| e.loss).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn loops(&self) -> usize {
        self.encoder_digests.len().saturating_sub(1)
    }
}

/// Adaptation state carried across frames and loops.
#[derive(Clone, Debug)]
pub struct TttSession {
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub plateau: Plateau,
    pub config: TttConfig,
    pub strategy: Strategy,
    pub trace: TttTrace,
}

impl TttSession {
    pub fn new(params: ModelParams, config: &TttConfig, strategy: Strategy) -> Result<Self> {
        config.validate()?;
        let opt = OptimizerState::new(&params, config.learning_rate);
        let trace = TttTrace { entries: Vec::new(), encoder_digests: alloc::vec![params.digest(&Component::Encoder)] };
        Ok(Self { params, opt, plateau: Plateau::default(), config: config.clone(), strategy, trace })
    }

    /// One pass over the frames. The loop index continues from previous
    /// passes, so the seed stream does too.
    pub fn run_loop(&mut self, frames: &[Image], prompt_masks: &[Mask]) -> Result<()> {
        if frames.is_empty() {
            bail!(Validation, "video has no frames");
        }
        if self.strategy == Strategy::Prompt && prompt_masks.len() != frames.len() {
            bail!(Validation, "{} frames but {} prompt masks", frames.len(), prompt_masks.len());
        }
        let k = self.trace.loops();
        for (t, frame) in frames.iter().enumerate() {
            for step in 0..self.config.steps_per_frame {
                let seed = rng::derive_path(self.config.seed, &[tags::TTT, k as u64, t as u64, step as u64]);
                let lr = self.opt.lr;
                let loss = match self.strategy {
                    Strategy::Prompt => {
                        ttt_consistency_step(frame, &prompt_masks[t], &mut self.params, &mut self.opt, &self.config, seed)
                    }
                    Strategy::Rotation => rotation_ttt_step(frame, &mut self.params, &mut self.opt, &self.config, seed),
                    Strategy::Mae => mae_ttt_step(frame, &mut self.params, &mut self.opt, &self.config, seed),
                }
                .map_err(|e| match e {
                    Error::Adaptation(m) => Error::Adaptation(alloc::format!("loop {k} frame {t} step {step}: {m}")),
                    other => other,
                })?;
                self.trace.entries.push(TraceEntry { loop_index: k, frame: t, step, loss: loss.value, lr });
                if self.plateau.observe(loss.value, self.config.saturation_patience, self.config.saturation_tolerance) {
                    self.opt.lr *= self.config.lr_drop_factor;
                }
            }
        }
        self.trace.encoder_digests.push(self.params.digest(&Component::Encoder));
        Ok(())
    }
}

/// `config.loops` passes of `strategy` over the video.
pub fn adapt_video(
    frames: &[Image],
    prompt_masks: &[Mask],
    params: &ModelParams,
    config: &TttConfig,
    strategy: Strategy,
) -> Result<(ModelParams, TttTrace)> {
    let mut s = TttSession::new(params.clone(), config, strategy)?;
    for _ in 0..config.loops {
        s.run_loop(frames, prompt_masks)?;
    }
    Ok((s.params, s.trace))
}

/// Prompt-guided video adaptation; `prompt_masks[t]` is the target
/// instance's mask on frame `t`.
pub fn ttt_video(frames: &[Image], prompt_masks: &[Mask], params: &ModelParams, config: &TttConfig) -> Result<(ModelParams, TttTrace)> {
    adapt_video(frames, prompt_masks, params, config, Strategy::Prompt)
}

/// Final prediction with the adapted encoder and the frozen main decoder.
pub fn infer_after_ttt(frame: &Image, b: &BoxPrompt, params: &ModelParams) -> Result<MaskProb> {
    model::forward_main(frame, b, params)
}
