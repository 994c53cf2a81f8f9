//! The full decoder: motion embedding with style and periodic positions,
//! additive audio fusion, three Mamba-family layers on each side of a
//! Transformer layer, and autoregressive generation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, KvCache, TransformerBlock};
use crate::error::{Error, Result};
use crate::mamba::{MambaBlock, MambaConfig, MambaState};
use crate::moe::{MoeConfig, MoeLayer, MoeMambaBlock};
use crate::nn::{Linear, RmsNorm};
use crate::params::{Init, Param, VarBuilder};
use crate::tensor::{no_grad, Tensor};

/// Which kind of layer opens each side of the Transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arrangement {
    #[serde(rename = "M-MoE")]
    MMoe,
    #[serde(rename = "MoE-MoE")]
    MoeMoe,
    #[serde(rename = "M-M")]
    MM,
    #[serde(rename = "MoE-M")]
    MoeM,
}

impl Arrangement {
    pub const ALL: [Arrangement; 4] = [
        Arrangement::MMoe,
        Arrangement::MoeMoe,
        Arrangement::MM,
        Arrangement::MoeM,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Arrangement::MMoe => "M-MoE",
            Arrangement::MoeMoe => "MoE-MoE",
            Arrangement::MM => "M-M",
            Arrangement::MoeM => "MoE-M",
        }
    }

    /// First-layer kinds for the left and right sides.
    pub fn openers(self) -> (LayerKind, LayerKind) {
        use LayerKind::{Mamba, MoeMamba};
        match self {
            Arrangement::MMoe => (Mamba, MoeMamba),
            Arrangement::MoeMoe => (MoeMamba, MoeMamba),
            Arrangement::MM => (Mamba, Mamba),
            Arrangement::MoeM => (MoeMamba, Mamba),
        }
    }

    /// Full layer stack, input side first. Each side starts with its opener
    /// and then alternates.
    pub fn layer_kinds(self, per_side: usize) -> Vec<LayerKind> {
        let (left, right) = self.openers();
        let side = |first: LayerKind| (0..per_side).map(move |i| if i % 2 == 0 { first } else { first.other() });
        side(left)
            .chain(std::iter::once(LayerKind::Transformer))
            .chain(side(right))
            .collect()
    }
}

impl fmt::Display for Arrangement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Arrangement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arrangement::ALL
            .into_iter()
            .find(|a| a.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown arrangement {s:?}; expected one of M-MoE, MoE-MoE, M-M, MoE-M"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Mamba,
    MoeMamba,
    Transformer,
}

impl LayerKind {
    pub fn label(self) -> &'static str {
        match self {
            LayerKind::Mamba => "Mamba",
            LayerKind::MoeMamba => "MoE_Mamba",
            LayerKind::Transformer => "Transformer",
        }
    }

    fn other(self) -> LayerKind {
        match self {
            LayerKind::Mamba => LayerKind::MoeMamba,
            LayerKind::MoeMamba => LayerKind::Mamba,
            LayerKind::Transformer => LayerKind::Transformer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    Add,
    /// Reserved; rejected at build time.
    CrossAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub arrangement: Arrangement,
    pub d_model: usize,
    pub layers_per_side: usize,
    pub ppe: bool,
    pub ppe_period: usize,
    pub n_subjects: usize,
    pub vertex_count: usize,
    pub fusion: Fusion,
    /// `d_model` inside is overridden by the decoder's.
    pub mamba: MambaConfig,
    pub moe: MoeConfig,
    pub attention: AttentionConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            arrangement: Arrangement::MoeMoe,
            d_model: 64,
            layers_per_side: 3,
            ppe: true,
            ppe_period: 30,
            n_subjects: 2,
            vertex_count: 240,
            fusion: Fusion::Add,
            mamba: MambaConfig::default(),
            moe: MoeConfig::default(),
            attention: AttentionConfig::default(),
        }
    }
}

impl DecoderConfig {
    pub fn mamba_config(&self) -> MambaConfig {
        MambaConfig {
            d_model: self.d_model,
            ..self.mamba.clone()
        }
    }

    pub fn motion_dim(&self) -> usize {
        self.vertex_count * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.vertex_count == 0 || self.n_subjects == 0 {
            return Err(Error::Config(
                "d_model, vertex_count and n_subjects must be positive".into(),
            ));
        }
        if self.layers_per_side == 0 {
            return Err(Error::Config("layers_per_side must be positive".into()));
        }
        if self.ppe_period == 0 {
            return Err(Error::Config("ppe_period must be positive".into()));
        }
        if self.fusion != Fusion::Add {
            return Err(Error::Config(
                "cross-attention fusion is reserved and not available".into(),
            ));
        }
        self.mamba_config().validate()?;
        self.moe.validate()?;
        self.attention.validate(self.d_model)
    }
}

/// Sinusoidal encoding of `t mod period`.
pub fn periodic_encoding(t: usize, period: usize, d_model: usize) -> Vec<f64> {
    let phase = (t % period) as f64;
    (0..d_model)
        .map(|j| {
            let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d_model as f64);
            if j % 2 == 0 {
                (phase * freq).sin()
            } else {
                (phase * freq).cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum Layer {
    Mamba(MambaBlock),
    MoeMamba(MoeMambaBlock),
    Transformer(TransformerBlock),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Mamba(_) => LayerKind::Mamba,
            Layer::MoeMamba(_) => LayerKind::MoeMamba,
            Layer::Transformer(_) => LayerKind::Transformer,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        match self {
            Layer::Mamba(b) => b.params(),
            Layer::MoeMamba(b) => b.params(),
            Layer::Transformer(b) => b.params(),
        }
    }

    pub fn moe(&self) -> Option<&MoeLayer> {
        match self {
            Layer::MoeMamba(b) => Some(&b.moe),
            _ => None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Mamba(b) => b.forward(x),
            Layer::MoeMamba(b) => b.forward(x),
            Layer::Transformer(b) => b.forward(x),
        }
    }
}

/// Per-layer decode state.
#[derive(Debug, Clone)]
pub enum LayerState {
    Ssm(MambaState),
    Kv(KvCache),
}

/// Incremental decoding over a fixed audio track. Owns all recurrent state.
#[derive(Debug, Clone)]
pub struct DecodeSession {
    audio: Tensor,
    subjects: Vec<usize>,
    states: Vec<LayerState>,
    prev: Vec<f64>,
    t: usize,
}

impl DecodeSession {
    pub fn position(&self) -> usize {
        self.t
    }

    pub fn remaining(&self) -> usize {
        self.audio.shape()[1] - self.t
    }

    /// Bytes of recurrent SSM state (states plus convolution tails).
    pub fn ssm_bytes(&self) -> usize {
        self.states
            .iter()
            .map(|s| match s {
                LayerState::Ssm(m) => m.bytes(),
                LayerState::Kv(_) => 0,
            })
            .sum()
    }

    pub fn kv_bytes(&self) -> usize {
        self.states
            .iter()
            .map(|s| match s {
                LayerState::Kv(c) => c.bytes(),
                LayerState::Ssm(_) => 0,
            })
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    /// `[V·3] -> [d_model]`, no bias.
    pub motion_embed: Linear,
    /// `[n_subjects, d_model]`
    pub style: Param,
    pub layers: Vec<Layer>,
    pub final_norm: RmsNorm,
    /// `[d_model] -> [V·3]`, zero-initialized.
    pub head: Linear,
}

impl Decoder {
    pub fn new(vb: &VarBuilder, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mcfg = cfg.mamba_config();
        let layers = cfg
            .arrangement
            .layer_kinds(cfg.layers_per_side)
            .into_iter()
            .enumerate()
            .map(|(i, kind)| {
                let lv = vb.pp(format!("layer{i}"));
                Ok(match kind {
                    LayerKind::Mamba => Layer::Mamba(MambaBlock::new(&lv, &mcfg)),
                    LayerKind::MoeMamba => Layer::MoeMamba(MoeMambaBlock::new(&lv, &mcfg, &cfg.moe)),
                    LayerKind::Transformer => Layer::Transformer(TransformerBlock::new(&lv, d, &cfg.attention)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder {
            cfg: cfg.clone(),
            motion_embed: Linear::new(&vb.pp("motion_embed"), cfg.motion_dim(), d, false),
            style: vb.get("style", &[cfg.n_subjects, d], Init::Uniform(0.1)),
            layers,
            final_norm: RmsNorm::new(&vb.pp("final_norm"), d),
            head: Linear::with_init(&vb.pp("head"), d, cfg.motion_dim(), true, Init::Zeros),
        })
    }

    pub fn layer_kinds(&self) -> Vec<&'static str> {
        self.layers.iter().map(|l| l.kind().label()).collect()
    }

    pub fn params(&self) -> Vec<Param> {
        let mut v = self.motion_embed.params();
        v.push(self.style.clone());
        for l in &self.layers {
            v.extend(l.params());
        }
        v.push(self.final_norm.weight.clone());
        v.extend(self.head.params());
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(Param::numel).sum()
    }

    pub fn moe_layers(&self) -> Vec<&MoeLayer> {
        self.layers.iter().filter_map(Layer::moe).collect()
    }

    /// Parameters touched per token: every MoE layer counts its router and
    /// `k` experts only.
    pub fn active_params(&self) -> usize {
        self.num_params()
            - self
                .moe_layers()
                .iter()
                .map(|m| m.total_params() - m.active_params())
                .sum::<usize>()
    }

    fn style_rows(&self, subjects: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = subjects.iter().find(|&&s| s >= self.cfg.n_subjects) {
            return Err(Error::Lookup(format!(
                "subject id {bad} is not among the {} training subjects",
                self.cfg.n_subjects
            )));
        }
        self.style.tensor().index_select(subjects)
    }

    fn ppe_rows(&self, start: usize, steps: usize) -> Tensor {
        let d = self.cfg.d_model;
        let data = if self.cfg.ppe {
            (start..start + steps)
                .flat_map(|t| periodic_encoding(t, self.cfg.ppe_period, d))
                .collect()
        } else {
            vec![0.0; steps * d]
        };
        Tensor::raw(data, vec![steps, d])
    }

    /// Embeds previous frames `[B, T, V·3]` at positions `start..start+T`:
    /// linear motion map plus style row plus periodic encoding.
    pub fn embed_motion(&self, prev: &Tensor, subjects: &[usize], start: usize) -> Result<Tensor> {
        if prev.ndim() != 3 || prev.dim(-1) != self.cfg.motion_dim() {
            return Err(Error::shape("embed_motion", prev.shape(), &[self.cfg.motion_dim()]));
        }
        let (b, t) = (prev.shape()[0], prev.shape()[1]);
        if subjects.len() != b {
            return Err(Error::Contract(format!(
                "{} subject ids for a batch of {b}",
                subjects.len()
            )));
        }
        let style = self.style_rows(subjects)?.reshape(&[b, 1, self.cfg.d_model])?;
        self.motion_embed
            .forward(prev)?
            .add(&style)?
            .add(&self.ppe_rows(start, t))
    }

    /// Frame-aligned addition of audio features `[B, T, d_model]`.
    pub fn fuse_audio(&self, tokens: &Tensor, audio: &Tensor) -> Result<Tensor> {
        if tokens.shape() != audio.shape() {
            return Err(Error::Contract(format!(
                "audio features {:?} are not frame-aligned with motion tokens {:?}",
                audio.shape(),
                tokens.shape()
            )));
        }
        tokens.add(audio)
    }

    /// Runs the layer stack, final norm and output head on fused tokens.
    pub fn forward_tokens(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h)?;
        }
        self.head.forward(&self.final_norm.forward(&h)?)
    }

    /// Next-frame predictions `[B, T, V·3]` given the previous frames
    /// `[B, T, V·3]` (row `t` holds frame `t-1`, row 0 the seed).
    pub fn forward(&self, prev: &Tensor, audio: &Tensor, subjects: &[usize]) -> Result<Tensor> {
        let tokens = self.embed_motion(prev, subjects, 0)?;
        self.forward_tokens(&self.fuse_audio(&tokens, audio)?)
    }

    /// Teacher-forced predictions for ground-truth frames `[B, T, V·3]`.
    pub fn teacher_forced(&self, gt: &Tensor, audio: &Tensor, subjects: &[usize]) -> Result<Tensor> {
        self.forward(&shift_right(gt)?, audio, subjects)
    }

    pub fn session(&self, audio: &Tensor, subjects: &[usize]) -> Result<DecodeSession> {
        if audio.ndim() != 3 || audio.dim(-1) != self.cfg.d_model {
            return Err(Error::shape("decode_session", audio.shape(), &[self.cfg.d_model]));
        }
        let b = audio.shape()[0];
        if subjects.len() != b {
            return Err(Error::Contract(format!(
                "{} subject ids for a batch of {b}",
                subjects.len()
            )));
        }
        self.style_rows(subjects)?;
        let states = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Mamba(m) => LayerState::Ssm(m.zero_state(b)),
                Layer::MoeMamba(m) => LayerState::Ssm(m.mamba.zero_state(b)),
                Layer::Transformer(t) => LayerState::Kv(t.new_cache(b)),
            })
            .collect();
        Ok(DecodeSession {
            audio: audio.detach(),
            subjects: subjects.to_vec(),
            states,
            prev: vec![0.0; b * self.cfg.motion_dim()],
            t: 0,
        })
    }

    /// Predicts one frame `[B, V·3]` and advances every layer state.
    pub fn decode_step(&self, s: &mut DecodeSession) -> Result<Tensor> {
        let (b, steps) = (s.audio.shape()[0], s.audio.shape()[1]);
        if s.t >= steps {
            return Err(Error::EndOfSequence);
        }
        let d = self.cfg.d_model;
        let md = self.cfg.motion_dim();
        no_grad(|| {
            let prev = Tensor::raw(s.prev.clone(), vec![b, 1, md]);
            let tokens = self.embed_motion(&prev, &s.subjects, s.t)?;
            let mut h = self.fuse_audio(&tokens, &s.audio.narrow(1, s.t, 1)?)?;
            for (layer, state) in self.layers.iter().zip(s.states.iter_mut()) {
                h = match (layer, state) {
                    (Layer::Mamba(m), LayerState::Ssm(st)) => {
                        let (y, next) = m.step(&h.reshape(&[b, d])?, st)?;
                        *st = next;
                        y.reshape(&[b, 1, d])?
                    }
                    (Layer::MoeMamba(m), LayerState::Ssm(st)) => {
                        let (y, next) = m.step(&h.reshape(&[b, d])?, st)?;
                        *st = next;
                        y.reshape(&[b, 1, d])?
                    }
                    (Layer::Transformer(tb), LayerState::Kv(cache)) => tb.forward_cached(&h, Some(cache))?,
                    _ => unreachable!("session states are built from the same layer list"),
                };
            }
            let out = self.head.forward(&self.final_norm.forward(&h)?)?;
            s.prev = out.to_vec();
            s.t += 1;
            out.reshape(&[b, md])
        })
    }

    /// Autoregressive generation of `frames` frames, `[B, frames, V·3]`.
    pub fn generate(&self, audio: &Tensor, subjects: &[usize], frames: usize) -> Result<Tensor> {
        if frames == 0 {
            return Err(Error::Contract("generation needs at least one frame".into()));
        }
        let mut s = self.session(audio, subjects)?;
        let mut out = Vec::with_capacity(frames);
        for _ in 0..frames {
            out.push(self.decode_step(&mut s)?);
        }
        let b = audio.shape()[0];
        let data: Vec<f64> = (0..b)
            .flat_map(|bi| {
                out.iter()
                    .flat_map(move |f| f.data()[bi * self.cfg.motion_dim()..(bi + 1) * self.cfg.motion_dim()].to_vec())
            })
            .collect();
        Tensor::new(data, &[b, frames, self.cfg.motion_dim()])
    }
}

/// Prepends the zero seed frame and drops the last frame along axis 1.
pub fn shift_right(x: &Tensor) -> Result<Tensor> {
    let (b, t, w) = (x.shape()[0], x.shape()[1], x.dim(-1));
    let seed = Tensor::zeros(&[b, 1, w]);
    if t == 1 {
        return Ok(seed);
    }
    Tensor::concat(&[seed, x.narrow(1, 0, t - 1)?], 1)
}

#[cfg(test)]
mod tests;
