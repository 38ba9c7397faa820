//! Source-domain training under the dual-task objective.
//!
//! Every sample contributes the box-prompted main loss through `dseg` and
//! the point-prompted auxiliary loss through `daux`; both gradients flow
//! into the shared encoder and the prompt encoder. When baseline
//! pretraining is on, the rotation and reconstruction heads are fitted on
//! detached encoder features so they do not alter the main objective.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_geometric, AugmentationSpec, Rotation};
use crate::error::{bail, Error, Result};
use crate::heads;
use crate::image::{BoxPrompt, Image, Mask, MaskProb, Plane, PointPrompt};
use crate::losses::{self, LossValue, DEFAULT_LAMBDA};
use crate::model::{self, init_params, ArchConfig, Component, ModelParams};
use crate::optim::{OptimizerState, Plateau};
use crate::rng::{self, tags};
use crate::synth::{VideoSequence, ANATOMIES};

/// Components the dual-task objective updates.
pub const MAIN_COMPONENTS: [Component; 4] = [Component::Encoder, Component::PromptEncoder, Component::Dseg, Component::Daux];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr_drop_factor: f64,
    /// Epochs without sufficient improvement before the rate drops.
    pub saturation_patience: usize,
    /// Minimum relative improvement of the best epoch loss.
    pub saturation_tolerance: f64,
    /// Random crop-resize and horizontal flip per sample.
    pub augment: bool,
    /// Smallest crop side as a fraction of the frame side.
    pub crop_scale_min: f64,
    /// Also rotate each augmented sample by a random right angle.
    pub rotations: bool,
    /// Box edges move by up to this fraction of the box side.
    pub box_jitter: f64,
    /// Fit the rotation and reconstruction heads alongside.
    pub pretrain_baseline_heads: bool,
    pub mae_mask_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            learning_rate: 1e-3,
            batch_size: 2,
            epochs: 20,
            seed: 0,
            lr_drop_factor: 0.8,
            saturation_patience: 20,
            saturation_tolerance: 1e-3,
            augment: true,
            crop_scale_min: 0.75,
            rotations: false,
            box_jitter: 0.05,
            pretrain_baseline_heads: true,
            mae_mask_ratio: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            bail!(Config, "lambda must be >= 0, got {}", self.lambda);
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            bail!(Config, "learning_rate must be > 0, got {}", self.learning_rate);
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be >= 1");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            bail!(Config, "lr_drop_factor must lie in (0, 1), got {}", self.lr_drop_factor);
        }
        if !(self.saturation_tolerance >= 0.0) {
            bail!(Config, "saturation_tolerance must be >= 0");
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            bail!(Config, "crop_scale_min must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.box_jitter) {
            bail!(Config, "box_jitter must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.mae_mask_ratio) {
            bail!(Config, "mae_mask_ratio must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One training example: prompts refer to the same instance as `gt`.
/// `seed` drives the baseline-head draws for this sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Image,
    pub box_prompt: BoxPrompt,
    pub point: PointPrompt,
    pub gt: Mask,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_train: f64,
    pub l_main: f64,
    pub l_aux: f64,
    pub l_rot: Option<f64>,
    pub l_recon: Option<f64>,
    /// Rate in effect during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch indices (0-based) at whose end the rate dropped.
    pub lr_drops: Vec<usize>,
}

/// Batch-mean losses of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// `L_train` with its `main` and `aux` parts.
    pub loss: LossValue,
    pub rot: Option<f64>,
    pub recon: Option<f64>,
}

struct SampleLosses {
    main: f64,
    aux: f64,
    rot: f64,
    recon: f64,
}

fn accumulate_sample(
    s: &TrainSample,
    params: &ModelParams,
    config: &TrainConfig,
    heads_on: bool,
    scale: f64,
    grads: &mut ModelParams,
) -> Result<SampleLosses> {
    let arch = &params.arch;
    let (h, w) = s.image.dims();
    s.image.validate_unit()?;
    s.gt.validate_binary()?;
    if !s.gt.same_dims(&s.image) {
        bail!(Shape, "gt mask dims differ from image");
    }
    let sd = arch.downsample();
    if h % sd != 0 || w % sd != 0 {
        bail!(Shape, "image {h}x{w} not divisible by downsample factor {sd}");
    }
    let d = arch.embed_dim;
    let (feat, tape) = model::encoder_forward(&params.encoder, arch, &s.image);
    let box_emb = model::encode_box(&s.box_prompt, h, w, params)?;
    let pt_emb = model::encode_points(core::slice::from_ref(&s.point), h, w, params)?;

    let tb = model::decoder_forward(&params.dseg, arch, &feat, &box_emb);
    let tp = model::decoder_forward(&params.daux, arch, &feat, &pt_emb);
    let pred_b = MaskProb { height: h, width: w, data: tb.prob.clone() };
    let pred_p = MaskProb { height: h, width: w, data: tp.prob.clone() };
    let main = losses::main_task_loss(&pred_b, &s.gt)?.value;
    let aux = losses::aux_task_loss(&pred_p, &s.gt)?.value;

    let gb: Vec<f64> = losses::main_task_grad(&pred_b, &s.gt).into_iter().map(|g| g * scale).collect();
    let gp: Vec<f64> = losses::bce_grad(&pred_p, &s.gt).into_iter().map(|g| g * scale * config.lambda).collect();
    let (mut gfeat, gtok_b) = model::decoder_backward(&params.dseg, arch, &tb, &box_emb, &gb, &mut grads.dseg);
    let (gfeat_p, gtok_p) = model::decoder_backward(&params.daux, arch, &tp, &pt_emb, &gp, &mut grads.daux);
    model::prompt_backward(&box_emb, &gtok_b, d, &mut grads.prompt_encoder);
    model::prompt_backward(&pt_emb, &gtok_p, d, &mut grads.prompt_encoder);
    gfeat.grid.add_assign(&gfeat_p.grid);
    gfeat.skip.add_assign(&gfeat_p.skip);
    model::encoder_backward(&params.encoder, arch, &tape, &gfeat, &mut grads.encoder);

    let (mut rot, mut recon) = (0.0, 0.0);
    if heads_on {
        let mut g = rng::rng(rng::derive(s.seed, tags::AUGMENT));
        let k = g.random_range(0..4u32);
        let rotated = heads::rotate(&s.image, k);
        let (rf, _) = model::encoder_forward(&params.encoder, arch, &rotated);
        rot = heads::rotation_objective(&params.rot_head, &rf.grid, k as usize, &mut grads.rot_head, scale).0;
        let (masked, hidden) = heads::mask_patches(&s.image, sd, config.mae_mask_ratio, &mut g);
        let (mf, _) = model::encoder_forward(&params.encoder, arch, &masked);
        recon = heads::recon_objective(&params.recon_head, &mf.grid, sd, &s.image, &hidden, &mut grads.recon_head, scale).0;
    }
    Ok(SampleLosses { main, aux, rot, recon })
}

/// Batch-mean `L_train` and its gradient, without touching the parameters.
pub fn loss_and_grad(batch: &[TrainSample], params: &ModelParams, config: &TrainConfig) -> Result<(LossValue, ModelParams)> {
    let (out, grads) = batch_grad(batch, params, config, false)?;
    Ok((out.loss, grads))
}

fn batch_grad(batch: &[TrainSample], params: &ModelParams, config: &TrainConfig, heads_on: bool) -> Result<(StepOutcome, ModelParams)> {
    if batch.is_empty() {
        bail!(Training, "empty batch");
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = params.zeros_like();
    let (mut main, mut aux, mut rot, mut recon) = (0.0, 0.0, 0.0, 0.0);
    for (i, s) in batch.iter().enumerate() {
        let l = accumulate_sample(s, params, config, heads_on, scale, &mut grads)?;
        if !(l.main.is_finite() && l.aux.is_finite() && l.rot.is_finite() && l.recon.is_finite()) {
            bail!(
                Training,
                "non-finite loss on batch sample {i} (seed {}): main {} aux {} rot {} recon {}",
                s.seed,
                l.main,
                l.aux,
                l.rot,
                l.recon
            );
        }
        main += l.main * scale;
        aux += l.aux * scale;
        rot += l.rot * scale;
        recon += l.recon * scale;
    }
    let m = LossValue::scalar("main", main);
    let a = LossValue::scalar("aux", aux);
    let loss = losses::train_loss(&m, &a, config.lambda);
    if !loss.value.is_finite() || !grads.all_finite() {
        bail!(Training, "non-finite loss or gradient in batch (seeds {:?})", batch.iter().map(|s| s.seed).collect::<Vec<_>>());
    }
    let (rot, recon) = if heads_on { (Some(rot), Some(recon)) } else { (None, None) };
    Ok((StepOutcome { loss, rot, recon }, grads))
}

/// One Adam step on the batch-mean objective. Updates encoder, prompt
/// encoder and both decoders, plus the baseline heads when enabled.
pub fn train_step(batch: &[TrainSample], params: &mut ModelParams, opt: &mut OptimizerState, config: &TrainConfig) -> Result<StepOutcome> {
    let heads_on = config.pretrain_baseline_heads;
    let (out, grads) = batch_grad(batch, params, config, heads_on)?;
    let mut comps: Vec<Component> = MAIN_COMPONENTS.to_vec();
    if heads_on {
        comps.extend([Component::RotHead, Component::ReconHead]);
    }
    opt.apply(params, &grads, &comps);
    Ok(out)
}

/// Replays the saturation rule over the recorded epoch losses. If the most
/// recent epoch completes a window of `saturation_patience` epochs without
/// sufficient improvement, the rate is multiplied by `lr_drop_factor`.
/// Returns whether a drop happened.
pub fn update_lr_on_saturation(history: &TrainHistory, opt: &mut OptimizerState, config: &TrainConfig) -> bool {
    let mut plateau = Plateau::default();
    let mut last = false;
    for e in &history.epochs {
        last = plateau.observe(e.l_train, config.saturation_patience, config.saturation_tolerance);
    }
    if last {
        opt.lr *= config.lr_drop_factor;
    }
    last
}

/// Nearest-neighbour crop of the window `(x0, y0, cw, ch)` resized back to
/// `h x w`, optionally mirrored.
fn warp<T: Copy>(p: &Plane<T>, x0: usize, y0: usize, cw: usize, ch: usize, flip: bool) -> Plane<T> {
    let (h, w) = p.dims();
    Plane::from_fn(h, w, |x, y| {
        let x = if flip { w - 1 - x } else { x };
        let sx = x0 + ((2 * x + 1) * cw) / (2 * w);
        let sy = y0 + ((2 * y + 1) * ch) / (2 * h);
        p.get(sx, sy)
    })
}

/// Box around `mask` with each edge moved by up to `jitter` of the side,
/// clamped to the image. Falls back to the tight box if jitter collapses it.
pub fn jittered_box(mask: &Mask, jitter: f64, rng: &mut rng::Rng) -> Option<BoxPrompt> {
    let b = mask.bounding_box()?;
    let (w, h) = (mask.width as f64, mask.height as f64);
    let (bw, bh) = (b.x_max - b.x_min, b.y_max - b.y_min);
    let mut d = || 2.0 * rng.random::<f64>() - 1.0;
    let j = BoxPrompt {
        x_min: (b.x_min + jitter * bw * d()).clamp(0.0, w),
        y_min: (b.y_min + jitter * bh * d()).clamp(0.0, h),
        x_max: (b.x_max + jitter * bw * d()).clamp(0.0, w),
        y_max: (b.y_max + jitter * bh * d()).clamp(0.0, h),
    };
    Some(if j.x_min < j.x_max && j.y_min < j.y_max { j } else { b })
}

/// Uniform foreground pixel of `mask`.
pub fn random_interior_point(mask: &Mask, rng: &mut rng::Rng) -> Option<PointPrompt> {
    let fg = mask.foreground();
    if fg.is_empty() {
        return None;
    }
    let (x, y) = fg[rng.random_range(0..fg.len())];
    Some(PointPrompt::new(x as f64, y as f64))
}

/// Builds the augmented training sample for `frame` of `video`.
pub fn make_sample(video: &VideoSequence, frame: usize, config: &TrainConfig, seed: u64) -> Result<TrainSample> {
    let mut g = rng::rng(seed);
    let img = &video.frames[frame];
    let (h, w) = img.dims();
    let (x0, y0, cw, ch, flip) = if config.augment {
        let scale = config.crop_scale_min + (1.0 - config.crop_scale_min) * g.random::<f64>();
        let cw = (libm::round(scale * w as f64) as usize).clamp(1, w);
        let ch = (libm::round(scale * h as f64) as usize).clamp(1, h);
        (g.random_range(0..=w - cw), g.random_range(0..=h - ch), cw, ch, g.random_bool(0.5))
    } else {
        (0, 0, w, h, false)
    };
    let spec = AugmentationSpec {
        rotation: if config.augment && config.rotations { Rotation::from_quarter_turns(g.random_range(0..4)) } else { Rotation::R0 },
        ..AugmentationSpec::IDENTITY
    };
    let candidates: Vec<Mask> = ANATOMIES
        .iter()
        .map(|a| apply_geometric(&warp(video.mask(frame, *a), x0, y0, cw, ch, flip), &spec))
        .filter(|m| !m.is_empty_mask())
        .collect();
    if candidates.is_empty() {
        bail!(Sampling, "frame {frame} has no visible anatomy after cropping");
    }
    let gt = candidates[g.random_range(0..candidates.len())].clone();
    let box_prompt = jittered_box(&gt, config.box_jitter, &mut g).expect("non-empty mask");
    let point = random_interior_point(&gt, &mut g).expect("non-empty mask");
    Ok(TrainSample { image: apply_geometric(&warp(img, x0, y0, cw, ch, flip), &spec), box_prompt, point, gt, seed: g.random() })
}

/// Trains from `init_params(config.seed, arch)`.
pub fn fit(videos: &[VideoSequence], arch: &ArchConfig, config: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    let f = fit_with(videos, arch, config, &mut |_| {})?;
    Ok((f.params, f.history))
}

/// Everything a training run leaves behind.
#[derive(Clone, Debug, PartialEq)]
pub struct Fitted {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub history: TrainHistory,
}

/// [`fit`] with a callback after every epoch; also returns the optimizer.
pub fn fit_with(
    videos: &[VideoSequence],
    arch: &ArchConfig,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<Fitted> {
    config.validate()?;
    let mut params = init_params(config.seed, arch)?;
    let index: Vec<(usize, usize)> =
        videos.iter().enumerate().flat_map(|(v, vid)| (0..vid.len()).map(move |t| (v, t))).collect();
    if index.is_empty() {
        bail!(Config, "training set is empty");
    }
    let mut opt = OptimizerState::new(&params, config.learning_rate);
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let mut order = index.clone();
        order.shuffle(&mut rng::rng(rng::derive_path(config.seed, &[tags::SHUFFLE, epoch as u64])));
        let lr = opt.lr;
        let (mut sum, mut main, mut aux, mut rot, mut recon, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .enumerate()
                .map(|(i, &(v, t))| {
                    let seed = rng::derive_path(config.seed, &[tags::AUGMENT, epoch as u64, (b * config.batch_size + i) as u64]);
                    make_sample(&videos[v], t, config, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let out = train_step(&batch, &mut params, &mut opt, config)
                .map_err(|e| Error::Training(format!("epoch {epoch} batch {b}: {e}")))?;
            let k = chunk.len() as f64;
            sum += out.loss.value * k;
            main += out.loss.component("main").unwrap_or(0.0) * k;
            aux += out.loss.component("aux").unwrap_or(0.0) * k;
            rot += out.rot.unwrap_or(0.0) * k;
            recon += out.recon.unwrap_or(0.0) * k;
            n += k;
        }
        let heads_on = config.pretrain_baseline_heads;
        let stats = EpochStats {
            epoch,
            l_train: sum / n,
            l_main: main / n,
            l_aux: aux / n,
            l_rot: heads_on.then_some(rot / n),
            l_recon: heads_on.then_some(recon / n),
            lr,
        };
        on_epoch(&stats);
        history.epochs.push(stats);
        if update_lr_on_saturation(&history, &mut opt, config) {
            history.lr_drops.push(epoch);
        }
    }
    Ok(Fitted { params, optimizer: opt, history })
}

/// One scalar parameter, addressed by component, tensor position within
/// the component's fixed order, and flat element index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamIndex {
    pub component: Component,
    pub tensor: usize,
    pub element: usize,
}

impl ParamIndex {
    pub fn get(&self, params: &ModelParams) -> Result<f64> {
        let named = params.group(&self.component).named();
        named
            .get(self.tensor)
            .and_then(|(_, t)| t.data.get(self.element))
            .copied()
            .ok_or_else(|| Error::Oracle(format!("parameter index {self:?} out of range")))
    }

    fn set(&self, params: &mut ModelParams, v: f64) -> Result<()> {
        let mut ts = params.group_mut(&self.component).tensors_mut();
        let slot = ts
            .get_mut(self.tensor)
            .and_then(|t| t.data.get_mut(self.element))
            .ok_or_else(|| Error::Oracle(format!("parameter index {self:?} out of range")))?;
        *slot = v;
        Ok(())
    }

    /// Name of the tensor, e.g. `dseg.wq`.
    pub fn label(&self, params: &ModelParams) -> String {
        let named = params.group(&self.component).named();
        let t = named.get(self.tensor).map(|(n, _)| n.as_str()).unwrap_or("?");
        format!("{}.{}[{}]", self.component.name(), t, self.element)
    }
}

/// `n` coordinates spread evenly over `components`, uniform within each.
pub fn random_coordinates(params: &ModelParams, components: &[Component], n: usize, seed: u64) -> Vec<ParamIndex> {
    let mut g = rng::rng(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let component = components[i % components.len()].clone();
        let sizes: Vec<usize> = params.group(&component).named().iter().map(|(_, t)| t.len()).collect();
        let total: usize = sizes.iter().sum();
        let mut r = g.random_range(0..total);
        let mut tensor = 0;
        while r >= sizes[tensor] {
            r -= sizes[tensor];
            tensor += 1;
        }
        out.push(ParamIndex { component, tensor, element: r });
    }
    out
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` at each coordinate.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&ModelParams) -> Result<f64>,
    params: &ModelParams,
    indices: &[ParamIndex],
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        bail!(Oracle, "epsilon must be positive and finite, got {epsilon}");
    }
    let mut p = params.clone();
    let mut out = Vec::with_capacity(indices.len());
    for idx in indices {
        let orig = idx.get(params)?;
        idx.set(&mut p, orig + epsilon)?;
        let up = f(&p)?;
        idx.set(&mut p, orig - epsilon)?;
        let down = f(&p)?;
        idx.set(&mut p, orig)?;
        if !(up.is_finite() && down.is_finite()) {
            bail!(Oracle, "non-finite evaluation at {idx:?}: {up} / {down}");
        }
        out.push((up - down) / (2.0 * epsilon));
    }
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, floor)`: relative error with a floor so that
/// coordinates whose true gradient is essentially zero are judged absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    libm::fabs(analytic - numeric) / libm::fmax(libm::fmax(libm::fabs(analytic), libm::fabs(numeric)), floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::synth::{generate_video, SceneConfig};

    fn tiny_batch(params: &ModelParams) -> Vec<TrainSample> {
        let cfg = SceneConfig { frames: 2, height: 32, width: 32, ..SceneConfig::default() };
        let v = generate_video(1, &cfg, params.arch.downsample()).unwrap();
        let tc = TrainConfig::default();
        (0..2).map(|t| make_sample(&v, t, &tc, 10 + t as u64).unwrap()).collect()
    }

    #[test]
    fn quadratic_oracle() {
        let p = init_params(0, &ArchConfig::default()).unwrap();
        let idx = ParamIndex { component: Component::Encoder, tensor: 0, element: 0 };
        let mut q = p.clone();
        idx.set(&mut q, 3.0).unwrap();
        let g = finite_difference_gradient(
            &mut |m: &ModelParams| {
                let t = idx.get(m)?;
                Ok(t * t)
            },
            &q,
            core::slice::from_ref(&idx),
            1e-4,
        )
        .unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let err = finite_difference_gradient(&mut |_| Ok(0.0), &q, core::slice::from_ref(&idx), 0.0);
        assert!(matches!(err, Err(Error::Oracle(_))));
        let err = finite_difference_gradient(&mut |_| Ok(f64::NAN), &q, core::slice::from_ref(&idx), 1e-3);
        assert!(matches!(err, Err(Error::Oracle(_))));
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let p = init_params(5, &ArchConfig::default()).unwrap();
        let batch = tiny_batch(&p);
        let cfg = TrainConfig::default();
        let (_, grads) = loss_and_grad(&batch, &p, &cfg).unwrap();
        let idx = random_coordinates(&p, &MAIN_COMPONENTS, 24, 9);
        let fd = finite_difference_gradient(&mut |m: &ModelParams| Ok(loss_and_grad(&batch, m, &cfg)?.0.value), &p, &idx, 3e-4)
            .unwrap();
        for (i, n) in idx.iter().zip(fd) {
            let a = i.get(&grads).unwrap();
            assert!(relative_error(a, n, 1e-6) < 1e-5, "{}: analytic {a} numeric {n}", i.label(&p));
        }
    }

    #[test]
    fn zero_rate_leaves_params_bit_identical() {
        let mut p = init_params(2, &ArchConfig::default()).unwrap();
        let before = p.clone();
        let batch = tiny_batch(&p);
        let mut opt = OptimizerState::new(&p, 0.0);
        train_step(&batch, &mut p, &mut opt, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn one_step_moves_all_four_components() {
        let mut p = init_params(2, &ArchConfig::default()).unwrap();
        let before = p.clone();
        let batch = tiny_batch(&p);
        let cfg = TrainConfig::default();
        let mut opt = OptimizerState::new(&p, cfg.learning_rate);
        let a = train_step(&batch, &mut p, &mut opt, &cfg).unwrap();
        for c in MAIN_COMPONENTS.iter().chain(&[Component::RotHead, Component::ReconHead]) {
            assert_ne!(p.digest(c), before.digest(c), "{c:?} did not move");
        }
        let mut p2 = before.clone();
        let mut opt2 = OptimizerState::new(&p2, cfg.learning_rate);
        let b = train_step(&batch, &mut p2, &mut opt2, &cfg).unwrap();
        assert_eq!(a.loss.value.to_bits(), b.loss.value.to_bits());
        assert_eq!(p, p2);
        assert_eq!(a.loss.value, a.loss.component("main").unwrap() + cfg.lambda * a.loss.component("aux").unwrap());
    }

    #[test]
    fn heads_disabled_stay_frozen() {
        let mut p = init_params(2, &ArchConfig::default()).unwrap();
        let before = p.clone();
        let batch = tiny_batch(&p);
        let cfg = TrainConfig { pretrain_baseline_heads: false, ..TrainConfig::default() };
        let mut opt = OptimizerState::new(&p, cfg.learning_rate);
        let out = train_step(&batch, &mut p, &mut opt, &cfg).unwrap();
        assert!(out.rot.is_none());
        assert_eq!(p.rot_head, before.rot_head);
        assert_eq!(p.recon_head, before.recon_head);
    }

    fn history(losses: &[f64]) -> TrainHistory {
        TrainHistory {
            epochs: losses
                .iter()
                .enumerate()
                .map(|(i, &l)| EpochStats { epoch: i, l_train: l, l_main: l, l_aux: 0.0, l_rot: None, l_recon: None, lr: 1e-3 })
                .collect(),
            lr_drops: vec![],
        }
    }

    #[test]
    fn saturation_schedule() {
        let cfg = TrainConfig::default();
        let p = init_params(0, &ArchConfig::default()).unwrap();

        let mut opt = OptimizerState::new(&p, 1e-3);
        let mut l = 1.0;
        let mut h = history(&[]);
        for _ in 0..21 {
            h = history(&[h.epochs.iter().map(|e| e.l_train).collect::<Vec<_>>(), vec![l]].concat());
            assert!(!update_lr_on_saturation(&h, &mut opt, &cfg));
            l *= 0.95;
        }
        assert_eq!(opt.lr, 1e-3);

        let flat: Vec<f64> = (0..21).map(|i| 1.0 - 1e-5 * i as f64).collect();
        let mut opt = OptimizerState::new(&p, 1e-3);
        assert!(update_lr_on_saturation(&history(&flat), &mut opt, &cfg));
        assert_eq!(opt.lr, 1e-3 * 0.8);

        let mut opt = OptimizerState::new(&p, 1e-3);
        let mut drops = 0;
        for n in 1..=41 {
            drops += update_lr_on_saturation(&history(&vec![1.0; n]), &mut opt, &cfg) as usize;
        }
        assert_eq!(drops, 2);
        assert!((opt.lr - 1e-3 * 0.64).abs() < 1e-18);
    }

    #[test]
    fn fit_zero_epochs_returns_init_and_is_deterministic() {
        let cfg = SceneConfig { frames: 2, height: 32, width: 32, ..SceneConfig::default() };
        let v = vec![generate_video(4, &cfg, 16).unwrap()];
        let arch = ArchConfig::default();
        let tc = TrainConfig { epochs: 0, seed: 3, ..TrainConfig::default() };
        let (p, h) = fit(&v, &arch, &tc).unwrap();
        assert_eq!(p, init_params(3, &arch).unwrap());
        assert!(h.epochs.is_empty());
        let tc = TrainConfig { epochs: 2, seed: 3, ..TrainConfig::default() };
        let (a, ha) = fit(&v, &arch, &tc).unwrap();
        let (b, hb) = fit(&v, &arch, &tc).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        assert!(matches!(fit(&[], &arch, &tc), Err(Error::Config(_))));
    }

    #[test]
    fn jittered_box_stays_near_the_mask() {
        let mut m = Mask::filled(32, 32, 0);
        for y in 10..20 {
            for x in 5..25 {
                m.set(x, y, 1);
            }
        }
        let mut g = rng::rng(0);
        for _ in 0..100 {
            let b = jittered_box(&m, 0.05, &mut g).unwrap();
            b.validate(32, 32).unwrap();
            assert!((b.x_min - 5.0).abs() <= 1.0 && (b.x_max - 25.0).abs() <= 1.0);
            assert!((b.y_min - 10.0).abs() <= 0.5 && (b.y_max - 20.0).abs() <= 0.5);
        }
    }
}
