//! The promptable segmentation network.
//!
//! A small convolutional encoder produces a coarse feature grid (stride
//! `s`) plus a stride-`stem_patch` skip map. Prompts become tokens: points
//! are a fixed sinusoidal encoding of their normalised position plus a
//! learned foreground token, boxes are two such corner tokens. Each of the
//! two decoders gates every feature cell against every prompt token with
//! per-head sigmoid attention, mixes locally, and upsamples twice back to
//! full resolution.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::image::{BoxPrompt, Image, MaskProb, PointPrompt, Prompt};
use crate::nn::{self, sigmoid, silu_grad};
use crate::rng::{self, tags};
use crate::tensor::{Grid, Tensor};

/// Layer sizes. The encoder downsamples by `stem_patch` and then by two
/// stride-2 stages, so the grid stride is `4 * stem_patch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub stem_patch: usize,
    pub stem_channels: usize,
    pub mid_channels: usize,
    pub encoder_blocks: usize,
    pub decoder_heads: usize,
    pub decoder_channels: usize,
    /// Lowest and highest positional-encoding frequency, in multiples of pi
    /// per unit of normalised image coordinate.
    pub pe_min_frequency: f64,
    pub pe_max_frequency: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            stem_patch: 4,
            stem_channels: 16,
            mid_channels: 32,
            encoder_blocks: 2,
            decoder_heads: 4,
            decoder_channels: 16,
            pe_min_frequency: 0.5,
            pe_max_frequency: 16.0,
        }
    }
}

impl ArchConfig {
    pub fn downsample(&self) -> usize {
        self.stem_patch * 4
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.decoder_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        if d == 0 || d % 4 != 0 {
            bail!(Config, "embed_dim must be a positive multiple of 4, got {d}");
        }
        if self.decoder_heads == 0 || d % self.decoder_heads != 0 {
            bail!(Config, "embed_dim {d} not divisible into {} heads", self.decoder_heads);
        }
        if self.stem_patch == 0 || self.stem_channels == 0 || self.mid_channels == 0 || self.decoder_channels == 0 {
            bail!(Config, "layer sizes must be positive: {self:?}");
        }
        let (lo, hi) = (self.pe_min_frequency, self.pe_max_frequency);
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            bail!(Config, "bad positional-encoding band [{lo}, {hi}]");
        }
        Ok(())
    }

    /// Angular frequencies of the `embed_dim / 4` sinusoid pairs.
    fn frequencies(&self) -> Vec<f64> {
        let n = self.embed_dim / 4;
        let ratio = self.pe_max_frequency / self.pe_min_frequency;
        (0..n)
            .map(|f| {
                let t = if n > 1 { f as f64 / (n - 1) as f64 } else { 0.0 };
                core::f64::consts::PI * self.pe_min_frequency * libm::pow(ratio, t)
            })
            .collect()
    }
}

/// Writes the encoding of normalised position `(u, v)` into `out`, laid out
/// as `[sin(wu) | cos(wu) | sin(wv) | cos(wv)]` over all frequencies.
pub fn positional_encoding(freqs: &[f64], u: f64, v: f64, out: &mut [f64]) {
    let n = freqs.len();
    for (f, &w) in freqs.iter().enumerate() {
        out[f] = libm::sin(w * u);
        out[n + f] = libm::cos(w * u);
        out[2 * n + f] = libm::sin(w * v);
        out[3 * n + f] = libm::cos(w * v);
    }
}

// ---------------------------------------------------------------------------
// Parameter containers

/// Named tensors in a fixed order. The order defines digests, checkpoint
/// layout and optimizer state alignment.
pub trait ParamGroup {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Depthwise 3x3 conv followed by a two-layer pointwise MLP, residual.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub dw_w: Tensor,
    pub dw_b: Tensor,
    pub pw1_w: Tensor,
    pub pw1_b: Tensor,
    pub pw2_w: Tensor,
    pub pw2_b: Tensor,
}

impl ConvBlock {
    fn init(d: usize, rng: &mut rng::Rng) -> Self {
        let df = d as f64;
        Self {
            dw_w: Tensor::randn(&[9, d], 1.0 / 3.0, rng),
            dw_b: Tensor::zeros(&[d]),
            pw1_w: Tensor::randn(&[d, d], libm::sqrt(2.0 / df), rng),
            pw1_b: Tensor::zeros(&[d]),
            pw2_w: Tensor::randn(&[d, d], 0.2 / libm::sqrt(df), rng),
            pw2_b: Tensor::zeros(&[d]),
        }
    }

    fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.dw_w"), &self.dw_w));
        out.push((format!("{prefix}.dw_b"), &self.dw_b));
        out.push((format!("{prefix}.pw1_w"), &self.pw1_w));
        out.push((format!("{prefix}.pw1_b"), &self.pw1_b));
        out.push((format!("{prefix}.pw2_w"), &self.pw2_w));
        out.push((format!("{prefix}.pw2_b"), &self.pw2_b));
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.extend([
            &mut self.dw_w,
            &mut self.dw_b,
            &mut self.pw1_w,
            &mut self.pw1_b,
            &mut self.pw2_w,
            &mut self.pw2_b,
        ]);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub stem_w: Tensor,
    pub stem_b: Tensor,
    pub down1_w: Tensor,
    pub down1_b: Tensor,
    pub down2_w: Tensor,
    pub down2_b: Tensor,
    pub blocks: Vec<ConvBlock>,
}

impl ParamGroup for EncoderParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            (String::from("stem_w"), &self.stem_w),
            (String::from("stem_b"), &self.stem_b),
            (String::from("down1_w"), &self.down1_w),
            (String::from("down1_b"), &self.down1_b),
            (String::from("down2_w"), &self.down2_w),
            (String::from("down2_b"), &self.down2_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.push_named(&format!("blocks.{i}"), &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.stem_w,
            &mut self.stem_b,
            &mut self.down1_w,
            &mut self.down1_b,
            &mut self.down2_w,
            &mut self.down2_b,
        ];
        for b in &mut self.blocks {
            b.push_mut(&mut out);
        }
        out
    }
}

/// Learned parts of the prompt encoder. The positional encoding is fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoderParams {
    pub point_token: Tensor,
    pub corner_min_token: Tensor,
    pub corner_max_token: Tensor,
}

impl ParamGroup for PromptEncoderParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            (String::from("point_token"), &self.point_token),
            (String::from("corner_min_token"), &self.corner_min_token),
            (String::from("corner_max_token"), &self.corner_max_token),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.point_token, &mut self.corner_min_token, &mut self.corner_max_token]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub gate_b: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub block: ConvBlock,
    pub up1_w: Tensor,
    pub up1_b: Tensor,
    pub skip_w: Tensor,
    pub skip_b: Tensor,
    pub up2_w: Tensor,
    pub up2_b: Tensor,
}

impl ParamGroup for DecoderParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            (String::from("wq"), &self.wq),
            (String::from("bq"), &self.bq),
            (String::from("wk"), &self.wk),
            (String::from("wv"), &self.wv),
            (String::from("gate_b"), &self.gate_b),
            (String::from("wo"), &self.wo),
            (String::from("bo"), &self.bo),
        ];
        self.block.push_named("block", &mut out);
        out.extend([
            (String::from("up1_w"), &self.up1_w),
            (String::from("up1_b"), &self.up1_b),
            (String::from("skip_w"), &self.skip_w),
            (String::from("skip_b"), &self.skip_b),
            (String::from("up2_w"), &self.up2_w),
            (String::from("up2_b"), &self.up2_b),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.gate_b,
            &mut self.wo,
            &mut self.bo,
        ];
        self.block.push_mut(&mut out);
        out.extend([
            &mut self.up1_w,
            &mut self.up1_b,
            &mut self.skip_w,
            &mut self.skip_b,
            &mut self.up2_w,
            &mut self.up2_b,
        ]);
        out
    }
}

/// A linear head: `w` and `b`. Used for the rotation classifier (pooled
/// features to 4 logits) and the patch reconstructor (cell features to an
/// `s x s` pixel patch).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ParamGroup for HeadParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![(String::from("w"), &self.w), (String::from("b"), &self.b)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Named parameter sets of the whole model.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    PromptEncoder,
    Dseg,
    Daux,
    RotHead,
    ReconHead,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Encoder,
        Component::PromptEncoder,
        Component::Dseg,
        Component::Daux,
        Component::RotHead,
        Component::ReconHead,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::PromptEncoder => "prompt_encoder",
            Component::Dseg => "dseg",
            Component::Daux => "daux",
            Component::RotHead => "rot_head",
            Component::ReconHead => "recon_head",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|c| c.name() == name)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("unknown parameter component {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub encoder: EncoderParams,
    pub prompt_encoder: PromptEncoderParams,
    pub dseg: DecoderParams,
    pub daux: DecoderParams,
    pub rot_head: HeadParams,
    pub recon_head: HeadParams,
}

impl ModelParams {
    pub fn group(&self, c: &Component) -> &dyn ParamGroup {
        match c {
            Component::Encoder => &self.encoder,
            Component::PromptEncoder => &self.prompt_encoder,
            Component::Dseg => &self.dseg,
            Component::Daux => &self.daux,
            Component::RotHead => &self.rot_head,
            Component::ReconHead => &self.recon_head,
        }
    }

    pub fn group_mut(&mut self, c: &Component) -> &mut dyn ParamGroup {
        match c {
            Component::Encoder => &mut self.encoder,
            Component::PromptEncoder => &mut self.prompt_encoder,
            Component::Dseg => &mut self.dseg,
            Component::Daux => &mut self.daux,
            Component::RotHead => &mut self.rot_head,
            Component::ReconHead => &mut self.recon_head,
        }
    }

    /// Same structure with every value zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for c in Component::ALL {
            for t in z.group_mut(&c).tensors_mut() {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        z
    }

    pub fn all_finite(&self) -> bool {
        Component::ALL.iter().all(|c| self.group(c).named().iter().all(|(_, t)| t.all_finite()))
    }

    pub fn num_params(&self) -> usize {
        Component::ALL.iter().map(|c| self.group(c).num_params()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of a component.
    pub fn digest(&self, c: &Component) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.group(c).named() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &s in &t.shape {
                h.update((s as u64).to_le_bytes());
            }
            for &v in &t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Digest of the component named `component`.
pub fn param_digest(params: &ModelParams, component: &str) -> Result<String> {
    Ok(params.digest(&Component::from_name(component)?))
}

/// Deterministic initialisation for `(seed, arch)`.
pub fn init_params(seed: u64, arch: &ArchConfig) -> Result<ModelParams> {
    arch.validate()?;
    let d = arch.embed_dim;
    let (p, c1, c2, cd) = (arch.stem_patch, arch.stem_channels, arch.mid_channels, arch.decoder_channels);
    let s = arch.downsample();
    let r = s / p;
    let base = rng::derive(seed, tags::INIT);
    let he = |fan_in: usize| libm::sqrt(2.0 / fan_in as f64);
    let lecun = |fan_in: usize| libm::sqrt(1.0 / fan_in as f64);

    let mut g = rng::rng(rng::derive(base, 0));
    let encoder = EncoderParams {
        stem_w: Tensor::randn(&[p * p, c1], he(p * p), &mut g),
        stem_b: Tensor::zeros(&[c1]),
        down1_w: Tensor::randn(&[4 * c1, c2], he(4 * c1), &mut g),
        down1_b: Tensor::zeros(&[c2]),
        down2_w: Tensor::randn(&[4 * c2, d], lecun(4 * c2), &mut g),
        down2_b: Tensor::zeros(&[d]),
        blocks: (0..arch.encoder_blocks).map(|_| ConvBlock::init(d, &mut g)).collect(),
    };

    let mut g = rng::rng(rng::derive(base, 1));
    let prompt_encoder = PromptEncoderParams {
        point_token: Tensor::randn(&[d], 0.5, &mut g),
        corner_min_token: Tensor::randn(&[d], 0.5, &mut g),
        corner_max_token: Tensor::randn(&[d], 0.5, &mut g),
    };

    let decoder = |tag: u64| {
        let mut g = rng::rng(rng::derive(base, tag));
        DecoderParams {
            wq: Tensor::randn(&[d, d], lecun(d), &mut g),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(&[d, d], lecun(d), &mut g),
            wv: Tensor::randn(&[d, d], lecun(d), &mut g),
            gate_b: Tensor::zeros(&[arch.decoder_heads]),
            wo: Tensor::randn(&[d, d], 0.5 * lecun(d), &mut g),
            bo: Tensor::zeros(&[d]),
            block: ConvBlock::init(d, &mut g),
            up1_w: Tensor::randn(&[d, r * r * cd], he(d), &mut g),
            up1_b: Tensor::zeros(&[r * r * cd]),
            skip_w: Tensor::randn(&[c1, cd], he(c1), &mut g),
            skip_b: Tensor::zeros(&[cd]),
            up2_w: Tensor::randn(&[cd, p * p], 0.5 * lecun(cd), &mut g),
            up2_b: Tensor::zeros(&[p * p]),
        }
    };
    let dseg = decoder(2);
    let daux = decoder(3);

    let mut g = rng::rng(rng::derive(base, 4));
    let rot_head = HeadParams { w: Tensor::randn(&[d, 4], 0.01, &mut g), b: Tensor::zeros(&[4]) };
    let mut g = rng::rng(rng::derive(base, 5));
    let recon_head = HeadParams { w: Tensor::randn(&[d, s * s], 0.01, &mut g), b: Tensor::zeros(&[s * s]) };

    Ok(ModelParams { arch: arch.clone(), encoder, prompt_encoder, dseg, daux, rot_head, recon_head })
}

// ---------------------------------------------------------------------------
// Encoder

/// Encoder output: the stride-`s` grid `E(x)` and the stride-`stem_patch`
/// skip map the decoders use for boundary detail.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub grid: Grid,
    pub skip: Grid,
}

impl FeatureMap {
    pub fn zeros_like(&self) -> Self {
        Self { grid: self.grid.zeros_like(), skip: self.skip.zeros_like() }
    }
}

struct BlockTape {
    input: Grid,
    dw: Grid,
    pre: Vec<f64>,
    act: Vec<f64>,
}

fn block_forward(b: &ConvBlock, x: Grid) -> (Grid, BlockTape) {
    let n = x.cells();
    let dw = nn::dwconv3_forward(&x, &b.dw_w, &b.dw_b);
    let pre = nn::linear_rows(&dw.data, n, &b.pw1_w, Some(&b.pw1_b));
    let act: Vec<f64> = pre.iter().map(|&v| nn::silu(v)).collect();
    let z = nn::linear_rows(&act, n, &b.pw2_w, Some(&b.pw2_b));
    let mut y = x.clone();
    for (a, v) in y.data.iter_mut().zip(z) {
        *a += v;
    }
    (y, BlockTape { input: x, dw, pre, act })
}

fn block_backward(b: &ConvBlock, t: &BlockTape, gy: Grid, g: &mut ConvBlock) -> Grid {
    let n = t.input.cells();
    let gact = nn::linear_rows_backward(&t.act, n, &b.pw2_w, &gy.data, &mut g.pw2_w, Some(&mut g.pw2_b));
    let gpre: Vec<f64> = gact.iter().zip(&t.pre).map(|(gv, &x)| gv * silu_grad(x)).collect();
    let gdw = nn::linear_rows_backward(&t.dw.data, n, &b.pw1_w, &gpre, &mut g.pw1_w, Some(&mut g.pw1_b));
    let gdw = Grid { data: gdw, ..t.dw.zeros_like() };
    let mut gx = nn::dwconv3_backward(&t.input, &b.dw_w, &gdw, &mut g.dw_w, &mut g.dw_b);
    gx.add_assign(&gy);
    gx
}

pub(crate) struct EncoderTape {
    input: Grid,
    stem_pre: Grid,
    s1: Grid,
    d1_pre: Grid,
    s2: Grid,
    blocks: Vec<BlockTape>,
}

fn check_image(image: &Image, arch: &ArchConfig) -> Result<()> {
    image.validate_unit()?;
    let s = arch.downsample();
    if image.height % s != 0 || image.width % s != 0 {
        bail!(Shape, "image {}x{} not divisible by downsample factor {s}", image.height, image.width);
    }
    Ok(())
}

pub(crate) fn encoder_forward(p: &EncoderParams, arch: &ArchConfig, image: &Image) -> (FeatureMap, EncoderTape) {
    let input = Grid { h: image.height, w: image.width, c: 1, data: image.data.clone() };
    let stem_pre = nn::patch_forward(&input, arch.stem_patch, &p.stem_w, &p.stem_b);
    let s1 = nn::silu_grid(&stem_pre);
    let d1_pre = nn::patch_forward(&s1, 2, &p.down1_w, &p.down1_b);
    let s2 = nn::silu_grid(&d1_pre);
    let mut x = nn::patch_forward(&s2, 2, &p.down2_w, &p.down2_b);
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let (y, t) = block_forward(b, x);
        blocks.push(t);
        x = y;
    }
    let fm = FeatureMap { grid: x, skip: s1.clone() };
    (fm, EncoderTape { input, stem_pre, s1, d1_pre, s2, blocks })
}

pub(crate) fn encoder_backward(
    p: &EncoderParams,
    arch: &ArchConfig,
    t: &EncoderTape,
    g: &FeatureMap,
    grads: &mut EncoderParams,
) {
    let mut gx = g.grid.clone();
    for ((b, bt), gb) in p.blocks.iter().zip(&t.blocks).zip(grads.blocks.iter_mut()).rev() {
        gx = block_backward(b, bt, gx, gb);
    }
    let gs2 = nn::patch_backward(&t.s2, 2, &p.down2_w, &gx, &mut grads.down2_w, &mut grads.down2_b, true).unwrap();
    let gd1 = nn::silu_backward(&t.d1_pre, &gs2);
    let mut gs1 = nn::patch_backward(&t.s1, 2, &p.down1_w, &gd1, &mut grads.down1_w, &mut grads.down1_b, true).unwrap();
    gs1.add_assign(&g.skip);
    let gstem = nn::silu_backward(&t.stem_pre, &gs1);
    nn::patch_backward(&t.input, arch.stem_patch, &p.stem_w, &gstem, &mut grads.stem_w, &mut grads.stem_b, false);
}

/// `E(x)`: validates the image and returns its feature map.
pub fn encode_image(image: &Image, params: &ModelParams) -> Result<FeatureMap> {
    check_image(image, &params.arch)?;
    Ok(encoder_forward(&params.encoder, &params.arch, image).0)
}

// ---------------------------------------------------------------------------
// Prompt encoder

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    Point,
    Box,
}

/// `count` tokens of dimension `embed_dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub kind: PromptKind,
    pub count: usize,
    pub tokens: Vec<f64>,
}

/// Encodes one or more point prompts on an image of the given size.
pub fn encode_points(points: &[PointPrompt], height: usize, width: usize, params: &ModelParams) -> Result<PromptEmbedding> {
    if points.is_empty() {
        bail!(Validation, "at least one point prompt is required");
    }
    let d = params.arch.embed_dim;
    let freqs = params.arch.frequencies();
    let mut tokens = vec![0.0; points.len() * d];
    for (pt, tok) in points.iter().zip(tokens.chunks_mut(d)) {
        pt.validate(height, width)?;
        positional_encoding(&freqs, (pt.x + 0.5) / width as f64, (pt.y + 0.5) / height as f64, tok);
        for (t, &l) in tok.iter_mut().zip(&params.prompt_encoder.point_token.data) {
            *t += l;
        }
    }
    Ok(PromptEmbedding { kind: PromptKind::Point, count: points.len(), tokens })
}

pub fn encode_box(b: &BoxPrompt, height: usize, width: usize, params: &ModelParams) -> Result<PromptEmbedding> {
    b.validate(height, width)?;
    let d = params.arch.embed_dim;
    let freqs = params.arch.frequencies();
    let (w, h) = (width as f64, height as f64);
    let mut tokens = vec![0.0; 2 * d];
    let (lo, hi) = tokens.split_at_mut(d);
    positional_encoding(&freqs, b.x_min / w, b.y_min / h, lo);
    positional_encoding(&freqs, b.x_max / w, b.y_max / h, hi);
    for (t, &l) in lo.iter_mut().zip(&params.prompt_encoder.corner_min_token.data) {
        *t += l;
    }
    for (t, &l) in hi.iter_mut().zip(&params.prompt_encoder.corner_max_token.data) {
        *t += l;
    }
    Ok(PromptEmbedding { kind: PromptKind::Box, count: 2, tokens })
}

/// Encodes a prompt relative to an image of the given size.
pub fn encode_prompt(prompt: &Prompt, height: usize, width: usize, params: &ModelParams) -> Result<PromptEmbedding> {
    match prompt {
        Prompt::Point(p) => encode_points(core::slice::from_ref(p), height, width, params),
        Prompt::Box(b) => encode_box(b, height, width, params),
    }
}

pub(crate) fn prompt_backward(emb: &PromptEmbedding, gtokens: &[f64], d: usize, grads: &mut PromptEncoderParams) {
    match emb.kind {
        PromptKind::Point => {
            for g in gtokens.chunks(d) {
                for (a, v) in grads.point_token.data.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        PromptKind::Box => {
            for (a, v) in grads.corner_min_token.data.iter_mut().zip(&gtokens[..d]) {
                *a += v;
            }
            for (a, v) in grads.corner_max_token.data.iter_mut().zip(&gtokens[d..2 * d]) {
                *a += v;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Mask decoder

pub(crate) struct DecoderTape {
    cells: usize,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    gates: Vec<f64>,
    o: Vec<f64>,
    block: BlockTape,
    h2: Grid,
    up_pre: Grid,
    u: Grid,
    skip: Grid,
    pub(crate) prob: Vec<f64>,
}

fn cell_encodings(arch: &ArchConfig, gh: usize, gw: usize) -> Vec<f64> {
    let d = arch.embed_dim;
    let freqs = arch.frequencies();
    let mut out = vec![0.0; gh * gw * d];
    for i in 0..gh {
        for j in 0..gw {
            let cell = &mut out[(i * gw + j) * d..][..d];
            positional_encoding(&freqs, (j as f64 + 0.5) / gw as f64, (i as f64 + 0.5) / gh as f64, cell);
        }
    }
    out
}

pub(crate) fn decoder_forward(
    p: &DecoderParams,
    arch: &ArchConfig,
    feat: &FeatureMap,
    prompt: &PromptEmbedding,
) -> DecoderTape {
    let d = arch.embed_dim;
    let (heads, hd) = (arch.decoder_heads, arch.head_dim());
    let scale = 1.0 / libm::sqrt(hd as f64);
    let n = prompt.count;
    let inv_n = 1.0 / n as f64;
    let (gh, gw) = (feat.grid.h, feat.grid.w);
    let cells = gh * gw;

    let mut a = cell_encodings(arch, gh, gw);
    for (x, f) in a.iter_mut().zip(&feat.grid.data) {
        *x += f;
    }
    let q = nn::linear_rows(&a, cells, &p.wq, Some(&p.bq));
    let k = nn::linear_rows(&prompt.tokens, n, &p.wk, None);
    let v = nn::linear_rows(&prompt.tokens, n, &p.wv, None);

    let mut gates = vec![0.0; cells * heads * n];
    let mut o = vec![0.0; cells * d];
    for c in 0..cells {
        for h in 0..heads {
            let qh = &q[c * d + h * hd..][..hd];
            for j in 0..n {
                let kh = &k[j * d + h * hd..][..hd];
                let z = qh.iter().zip(kh).map(|(x, y)| x * y).sum::<f64>() * scale + p.gate_b.data[h];
                let g = sigmoid(z);
                gates[(c * heads + h) * n + j] = g;
                let vh = &v[j * d + h * hd..][..hd];
                for (oo, &vv) in o[c * d + h * hd..][..hd].iter_mut().zip(vh) {
                    *oo += g * vv * inv_n;
                }
            }
        }
    }
    let mix = nn::linear_rows(&o, cells, &p.wo, Some(&p.bo));
    let mut h1 = feat.grid.clone();
    for (x, m) in h1.data.iter_mut().zip(mix) {
        *x += m;
    }
    let (h2, block) = block_forward(&p.block, h1);

    let r = arch.downsample() / arch.stem_patch;
    let cd = arch.decoder_channels;
    let mut up_pre = nn::subpixel_forward(&h2, r, cd, &p.up1_w, &p.up1_b);
    let skip_proj = nn::linear_rows(&feat.skip.data, feat.skip.cells(), &p.skip_w, Some(&p.skip_b));
    for (x, s) in up_pre.data.iter_mut().zip(skip_proj) {
        *x += s;
    }
    let u = nn::silu_grid(&up_pre);
    let logits = nn::subpixel_forward(&u, arch.stem_patch, 1, &p.up2_w, &p.up2_b);
    let prob = logits.data.iter().map(|&z| sigmoid(z)).collect();
    DecoderTape { cells, a, q, k, v, gates, o, block, h2, up_pre, u, skip: feat.skip.clone(), prob }
}

/// Backward from `dL/dprob`. Accumulates decoder parameter gradients into
/// `grads` and returns the feature-map and prompt-token gradients.
pub(crate) fn decoder_backward(
    p: &DecoderParams,
    arch: &ArchConfig,
    t: &DecoderTape,
    prompt: &PromptEmbedding,
    gprob: &[f64],
    grads: &mut DecoderParams,
) -> (FeatureMap, Vec<f64>) {
    let d = arch.embed_dim;
    let (heads, hd) = (arch.decoder_heads, arch.head_dim());
    let scale = 1.0 / libm::sqrt(hd as f64);
    let n = prompt.count;
    let inv_n = 1.0 / n as f64;
    let cells = t.cells;
    let sp = arch.stem_patch;

    let glogit: Vec<f64> = gprob.iter().zip(&t.prob).map(|(g, &pr)| g * pr * (1.0 - pr)).collect();
    let glogit = Grid { h: t.u.h * sp, w: t.u.w * sp, c: 1, data: glogit };
    let gu = nn::subpixel_backward(&t.u, sp, &p.up2_w, &glogit, &mut grads.up2_w, &mut grads.up2_b, true).unwrap();
    let gup = nn::silu_backward(&t.up_pre, &gu);
    let gskip = nn::linear_rows_backward(&t.skip.data, t.skip.cells(), &p.skip_w, &gup.data, &mut grads.skip_w, Some(&mut grads.skip_b));
    let r = arch.downsample() / sp;
    let gh2 = nn::subpixel_backward(&t.h2, r, &p.up1_w, &gup, &mut grads.up1_w, &mut grads.up1_b, true).unwrap();
    let gh1 = block_backward(&p.block, &t.block, gh2, &mut grads.block);

    let go = nn::linear_rows_backward(&t.o, cells, &p.wo, &gh1.data, &mut grads.wo, Some(&mut grads.bo));
    let mut gq = vec![0.0; cells * d];
    let mut gk = vec![0.0; n * d];
    let mut gv = vec![0.0; n * d];
    for c in 0..cells {
        for h in 0..heads {
            let goh = &go[c * d + h * hd..][..hd];
            let qh = &t.q[c * d + h * hd..][..hd];
            for j in 0..n {
                let g = t.gates[(c * heads + h) * n + j];
                let vh = &t.v[j * d + h * hd..][..hd];
                let kh = &t.k[j * d + h * hd..][..hd];
                let mut gg = 0.0;
                for i in 0..hd {
                    gv[j * d + h * hd + i] += g * goh[i] * inv_n;
                    gg += goh[i] * vh[i];
                }
                let gz = gg * inv_n * g * (1.0 - g);
                grads.gate_b.data[h] += gz;
                for i in 0..hd {
                    gq[c * d + h * hd + i] += gz * kh[i] * scale;
                    gk[j * d + h * hd + i] += gz * qh[i] * scale;
                }
            }
        }
    }
    let ga = nn::linear_rows_backward(&t.a, cells, &p.wq, &gq, &mut grads.wq, Some(&mut grads.bq));
    let mut gtok = nn::linear_rows_backward(&prompt.tokens, n, &p.wk, &gk, &mut grads.wk, None);
    let gtok_v = nn::linear_rows_backward(&prompt.tokens, n, &p.wv, &gv, &mut grads.wv, None);
    for (a, b) in gtok.iter_mut().zip(gtok_v) {
        *a += b;
    }
    let mut ggrid = gh1;
    for (a, b) in ggrid.data.iter_mut().zip(ga) {
        *a += b;
    }
    let gskip = Grid { data: gskip, ..t.skip.zeros_like() };
    (FeatureMap { grid: ggrid, skip: gskip }, gtok)
}

fn to_mask(tape: &DecoderTape, height: usize, width: usize) -> MaskProb {
    MaskProb { height, width, data: tape.prob.clone() }
}

/// Decodes a mask from precomputed features; `image_dims` is `(h, w)`.
pub fn decode(feat: &FeatureMap, prompt: &PromptEmbedding, decoder: &DecoderParams, arch: &ArchConfig) -> MaskProb {
    let t = decoder_forward(decoder, arch, feat, prompt);
    let s = arch.downsample();
    to_mask(&t, feat.grid.h * s, feat.grid.w * s)
}

/// `D_seg(E(x), p_b)`: the box-prompted main path.
pub fn forward_main(image: &Image, b: &BoxPrompt, params: &ModelParams) -> Result<MaskProb> {
    let feat = encode_image(image, params)?;
    let emb = encode_box(b, image.height, image.width, params)?;
    Ok(decode(&feat, &emb, &params.dseg, &params.arch))
}

/// `D_aux(E(x), p_p)`: the point-prompted auxiliary path.
pub fn forward_aux(image: &Image, point: &PointPrompt, params: &ModelParams) -> Result<MaskProb> {
    forward_aux_points(image, core::slice::from_ref(point), params)
}

/// Auxiliary path conditioned on several clicks of the same object.
pub fn forward_aux_points(image: &Image, points: &[PointPrompt], params: &ModelParams) -> Result<MaskProb> {
    let feat = encode_image(image, params)?;
    let emb = encode_points(points, image.height, image.width, params)?;
    Ok(decode(&feat, &emb, &params.daux, &params.arch))
}

// ---------------------------------------------------------------------------
// Baseline heads

/// Rotation classifier: mean-pooled grid features to 4 logits.
pub(crate) fn rot_logits(head: &HeadParams, grid: &Grid) -> (Vec<f64>, Vec<f64>) {
    let n = grid.cells() as f64;
    let mut pooled = vec![0.0; grid.c];
    for c in 0..grid.cells() {
        for (p, v) in pooled.iter_mut().zip(grid.cell(c)) {
            *p += v / n;
        }
    }
    let logits = nn::linear_rows(&pooled, 1, &head.w, Some(&head.b));
    (pooled, logits)
}

/// Returns the gradient with respect to the grid.
pub(crate) fn rot_backward(head: &HeadParams, grid: &Grid, pooled: &[f64], glogits: &[f64], grads: &mut HeadParams) -> Grid {
    let gp = nn::linear_rows_backward(pooled, 1, &head.w, glogits, &mut grads.w, Some(&mut grads.b));
    let n = grid.cells() as f64;
    let mut g = grid.zeros_like();
    for c in 0..grid.cells() {
        for (x, v) in g.data[c * grid.c..(c + 1) * grid.c].iter_mut().zip(&gp) {
            *x = v / n;
        }
    }
    g
}

/// Patch reconstructor: every grid cell predicts its `s x s` pixel patch.
pub(crate) fn recon_forward(head: &HeadParams, grid: &Grid, s: usize) -> Vec<f64> {
    let pre = nn::subpixel_forward(grid, s, 1, &head.w, &head.b);
    pre.data.iter().map(|&z| sigmoid(z)).collect()
}

pub(crate) fn recon_backward(head: &HeadParams, grid: &Grid, s: usize, out: &[f64], gout: &[f64], grads: &mut HeadParams) -> Grid {
    let g: Vec<f64> = gout.iter().zip(out).map(|(g, &o)| g * o * (1.0 - o)).collect();
    let g = Grid { h: grid.h * s, w: grid.w * s, c: 1, data: g };
    nn::subpixel_backward(grid, s, &head.w, &g, &mut grads.w, &mut grads.b, true).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |x, y| ((x * 7 + y * 3) % 17) as f64 / 16.0)
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let arch = ArchConfig::default();
        let a = init_params(0, &arch).unwrap();
        let b = init_params(0, &arch).unwrap();
        let c = init_params(1, &arch).unwrap();
        for comp in Component::ALL {
            assert_eq!(a.digest(&comp), b.digest(&comp));
        }
        assert_ne!(a.digest(&Component::Encoder), c.digest(&Component::Encoder));
        assert_ne!(a.dseg, a.daux);
        assert!(a.all_finite());
    }

    #[test]
    fn degenerate_arch_is_config_error() {
        let arch = ArchConfig { embed_dim: 0, ..ArchConfig::default() };
        assert!(matches!(init_params(0, &arch), Err(Error::Config(_))));
        let arch = ArchConfig { decoder_heads: 3, ..ArchConfig::default() };
        assert!(matches!(init_params(0, &arch), Err(Error::Config(_))));
    }

    #[test]
    fn feature_map_shape() {
        let params = init_params(0, &ArchConfig::default()).unwrap();
        let f = encode_image(&image(256, 256), &params).unwrap();
        assert_eq!((f.grid.h, f.grid.w, f.grid.c), (16, 16, 64));
        assert_eq!(f, encode_image(&image(256, 256), &params).unwrap());
        assert!(matches!(encode_image(&image(40, 32), &params), Err(Error::Shape(_))));
        let mut bad = image(32, 32);
        bad.data[5] = f64::INFINITY;
        assert!(matches!(encode_image(&bad, &params), Err(Error::Validation(_))));
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let params = init_params(0, &ArchConfig::default()).unwrap();
        let img = image(256, 256);
        let b = BoxPrompt { x_min: 10.0, y_min: 20.0, x_max: 100.0, y_max: 90.0 };
        let m = forward_main(&img, &b, &params).unwrap();
        assert_eq!(m.dims(), (256, 256));
        assert!(m.data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(m, forward_main(&img, &b, &params).unwrap());

        let corner = forward_aux(&img, &PointPrompt::new(0.0, 0.0), &params).unwrap();
        assert_eq!(corner.dims(), (256, 256));
        let other = forward_aux(&img, &PointPrompt::new(200.0, 120.0), &params).unwrap();
        let diff = corner.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn untrained_model_is_not_saturated() {
        let params = init_params(0, &ArchConfig::default()).unwrap();
        let img = Image::filled(256, 256, 0.5);
        let b = BoxPrompt { x_min: 64.0, y_min: 64.0, x_max: 192.0, y_max: 192.0 };
        let mean = forward_main(&img, &b, &params).unwrap().mean();
        assert!(mean > 0.05 && mean < 0.95, "mean {mean}");
    }

    #[test]
    fn prompt_validation_and_determinism() {
        let params = init_params(0, &ArchConfig::default()).unwrap();
        let p = Prompt::Point(PointPrompt::new(10.0, 20.0));
        assert_eq!(encode_prompt(&p, 64, 64, &params).unwrap(), encode_prompt(&p, 64, 64, &params).unwrap());
        let bad = Prompt::Box(BoxPrompt { x_min: 30.0, y_min: 0.0, x_max: 30.0, y_max: 10.0 });
        assert!(matches!(encode_prompt(&bad, 64, 64, &params), Err(Error::Validation(_))));
        let oob = Prompt::Point(PointPrompt::new(64.0, 3.0));
        assert!(matches!(encode_prompt(&oob, 64, 64, &params), Err(Error::Validation(_))));
    }

    #[test]
    fn point_encoding_injective_on_pixel_grid() {
        // Brute force over every pixel of a 64x64 image: no two distinct
        // pixels may share an embedding.
        let params = init_params(3, &ArchConfig::default()).unwrap();
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for y in (0..64).step_by(3) {
            for x in (0..64).step_by(3) {
                let e = encode_points(&[PointPrompt::new(x as f64, y as f64)], 64, 64, &params).unwrap();
                assert!(seen.iter().all(|s| s.iter().zip(&e.tokens).any(|(a, b)| (a - b).abs() > 1e-9)));
                seen.push(e.tokens);
            }
        }
    }

    #[test]
    fn digest_tracks_single_element() {
        let params = init_params(0, &ArchConfig::default()).unwrap();
        let before = param_digest(&params, "dseg").unwrap();
        let mut p2 = params.clone();
        assert_eq!(before, param_digest(&p2, "dseg").unwrap());
        p2.dseg.up2_b.data[3] = f64::from_bits(p2.dseg.up2_b.data[3].to_bits() ^ 1);
        assert_ne!(before, param_digest(&p2, "dseg").unwrap());
        assert!(matches!(param_digest(&params, "decoder_typo"), Err(Error::Validation(_))));
    }
}
