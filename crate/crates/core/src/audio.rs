//! Trainable speech frontend: strided temporal convolutions, linear
//! interpolation to the motion frame rate, and a projection to `d_model`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, Param, VarBuilder};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioConfig {
    /// Feature width `D` of every convolution layer.
    pub feature_dim: usize,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub sample_rate: u32,
    /// Keep the convolution stack at its initial weights during training.
    pub freeze_tcn: bool,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            feature_dim: 64,
            kernels: vec![10, 4, 4],
            strides: vec![5, 4, 4],
            sample_rate: SAMPLE_RATE,
            freeze_tcn: false,
        }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() || self.kernels.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "{} kernels and {} strides",
                self.kernels.len(),
                self.strides.len()
            )));
        }
        if self.kernels.iter().chain(&self.strides).any(|&v| v == 0) || self.feature_dim == 0 {
            return Err(Error::Config("kernel, stride and feature sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Samples needed to produce one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut field = 1;
        let mut jump = 1;
        for (k, s) in self.kernels.iter().zip(&self.strides) {
            field += (k - 1) * jump;
            jump *= s;
        }
        field
    }

    /// Output frames for a waveform of `len` samples (0 if too short).
    pub fn frames_for(&self, len: usize) -> usize {
        let mut n = len;
        for (k, s) in self.kernels.iter().zip(&self.strides) {
            if n < *k {
                return 0;
            }
            n = (n - k) / s + 1;
        }
        n
    }
}

/// `T' × D` feature matrix with its frame rate.
#[derive(Debug, Clone)]
pub struct SpeechFeatures {
    pub frames: Tensor,
    pub source_rate: f64,
}

impl SpeechFeatures {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sliding windows of `x` `[T, C]`: row `r` concatenates rows
/// `r·stride .. r·stride + kernel`, giving `[T_out, kernel·C]`.
pub fn unfold(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    if x.ndim() != 2 || x.shape()[0] < kernel {
        return Err(Error::Contract(format!(
            "unfold of {:?} with kernel {kernel}",
            x.shape()
        )));
    }
    let (t, c) = (x.shape()[0], x.shape()[1]);
    let rows = (t - kernel) / stride + 1;
    let width = kernel * c;
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        data.extend_from_slice(&x.data()[r * stride * c..(r * stride + kernel) * c]);
    }
    Ok(Tensor::from_op(
        data,
        vec![rows, width],
        vec![x.clone()],
        Box::new(move |ctx| {
            let mut g = vec![0.0; t * c];
            for r in 0..rows {
                let dst = &mut g[r * stride * c..(r * stride + kernel) * c];
                for (d, s) in dst.iter_mut().zip(&ctx.grad_out[r * width..(r + 1) * width]) {
                    *d += s;
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// Strided 1-D convolution layer, weights `[kernel, C_in, C_out]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(vb: &VarBuilder, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Conv1d {
            weight: vb.get("weight", &[kernel, c_in, c_out], Init::FanIn(kernel * c_in)),
            bias: vb.get("bias", &[c_out], Init::Zeros),
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `[T, C_in] -> [T_out, C_out]`, valid positions only.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [k, ci, co] = [self.weight.shape()[0], self.weight.shape()[1], self.weight.shape()[2]];
        let w = self.weight.tensor().reshape(&[k * ci, co])?;
        unfold(x, k, self.stride)?.matmul(&w)?.add(&self.bias.tensor())
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Constant `[target, source]` linear-interpolation matrix. Output frame `j`
/// samples source position `j·(source−1)/(target−1)`.
pub fn interpolation_matrix(source: usize, target: usize) -> Result<Vec<f64>> {
    if source < 2 {
        return Err(Error::Contract(format!(
            "resampling needs at least 2 source frames, got {source}"
        )));
    }
    if target == 0 {
        return Err(Error::Contract("resampling target must be at least 1 frame".into()));
    }
    let mut m = vec![0.0; target * source];
    for j in 0..target {
        let pos = if target == 1 {
            0.0
        } else {
            j as f64 * (source - 1) as f64 / (target - 1) as f64
        };
        let i0 = (pos.floor() as usize).min(source - 2);
        let frac = pos - i0 as f64;
        m[j * source + i0] += 1.0 - frac;
        m[j * source + i0 + 1] += frac;
    }
    Ok(m)
}

/// Per-column linear interpolation of `[T', D]` features to `[target, D]`.
pub fn resample_linear(feats: &Tensor, target: usize) -> Result<Tensor> {
    if feats.ndim() != 2 {
        return Err(Error::Contract(format!(
            "expected [frames, dim] features, got {:?}",
            feats.shape()
        )));
    }
    let source = feats.shape()[0];
    let m = interpolation_matrix(source, target)?;
    Tensor::raw(m, vec![target, source]).matmul(feats)
}

/// Source of speech input for one sequence.
#[derive(Debug, Clone)]
pub enum AudioInput {
    Waveform(Vec<f64>),
    /// Precomputed `[T', D]` features, bypassing the convolution stack.
    Features(Tensor),
}

#[derive(Debug, Clone)]
pub struct AudioFrontend {
    pub cfg: AudioConfig,
    pub convs: Vec<Conv1d>,
    pub proj: Linear,
}

impl AudioFrontend {
    pub fn new(vb: &VarBuilder, cfg: &AudioConfig, d_model: usize) -> Result<Self> {
        cfg.validate()?;
        let convs: Vec<Conv1d> = cfg
            .kernels
            .iter()
            .zip(&cfg.strides)
            .enumerate()
            .map(|(i, (&k, &s))| {
                let c_in = if i == 0 { 1 } else { cfg.feature_dim };
                Conv1d::new(&vb.pp(format!("tcn{i}")), c_in, cfg.feature_dim, k, s)
            })
            .collect();
        if cfg.freeze_tcn {
            for c in &convs {
                for p in c.params() {
                    p.set_trainable(false);
                }
            }
        }
        Ok(AudioFrontend {
            cfg: cfg.clone(),
            convs,
            proj: Linear::new(&vb.pp("proj"), cfg.feature_dim, d_model, true),
        })
    }

    pub fn params(&self) -> Vec<Param> {
        let mut v: Vec<Param> = self.convs.iter().flat_map(Conv1d::params).collect();
        v.extend(self.proj.params());
        v
    }

    /// TCN features of a waveform tensor `[L]`.
    pub fn extract(&self, waveform: &Tensor) -> Result<Tensor> {
        let len = waveform.numel();
        let need = self.cfg.receptive_field();
        if len < need {
            return Err(Error::Contract(format!(
                "waveform of {len} samples is shorter than the receptive field; need at least {need}"
            )));
        }
        let mut h = waveform.reshape(&[len, 1])?;
        for c in &self.convs {
            h = c.forward(&h)?.silu();
        }
        Ok(h)
    }

    pub fn extract_features(&self, waveform: &[f64], sample_rate: u32) -> Result<SpeechFeatures> {
        if sample_rate != self.cfg.sample_rate {
            return Err(Error::Contract(format!(
                "sample rate {sample_rate} Hz; the frontend expects {} Hz",
                self.cfg.sample_rate
            )));
        }
        if waveform.is_empty() {
            return Err(Error::Contract("empty waveform".into()));
        }
        let frames = self.extract(&Tensor::new(waveform.to_vec(), &[waveform.len()])?)?;
        Ok(SpeechFeatures {
            frames,
            source_rate: sample_rate as f64 / self.cfg.total_stride() as f64,
        })
    }

    pub fn project(&self, feats: &Tensor) -> Result<Tensor> {
        self.proj.forward(feats)
    }

    /// Features → `frames` rows → `[frames, d_model]`.
    pub fn encode_features(&self, feats: &Tensor, frames: usize) -> Result<Tensor> {
        self.project(&resample_linear(feats, frames)?)
    }

    /// Waveform tensor `[L]` → `[frames, d_model]`, differentiable throughout.
    pub fn encode_waveform(&self, waveform: &Tensor, frames: usize) -> Result<Tensor> {
        let feats = self.extract(waveform)?;
        if feats.shape()[0] < 2 {
            let min = self.cfg.receptive_field() + self.cfg.total_stride();
            return Err(Error::Contract(format!(
                "waveform of {} samples yields one feature frame; need at least {min} samples",
                waveform.numel()
            )));
        }
        self.encode_features(&feats, frames)
    }

    pub fn encode(&self, input: &AudioInput, frames: usize) -> Result<Tensor> {
        match input {
            AudioInput::Waveform(w) => self.encode_waveform(&Tensor::new(w.clone(), &[w.len()])?, frames),
            AudioInput::Features(f) => {
                if f.ndim() != 2 || f.dim(-1) != self.cfg.feature_dim {
                    return Err(Error::shape("encode_features", f.shape(), &[self.cfg.feature_dim]));
                }
                self.encode_features(f, frames)
            }
        }
    }
}

/// Reads a mono 16 kHz WAV file, PCM16 or float32, as samples in `[-1, 1]`.
pub fn load_wav(path: &Path) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Load(format!(
            "{}: {} channels; only mono audio is accepted",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Load(format!(
            "{}: sample rate {} Hz; only {SAMPLE_RATE} Hz is accepted (no resampling is performed)",
            path.display(),
            spec.sample_rate
        )));
    }
    let bad = |e: hound::Error| Error::Load(format!("{}: {e}", path.display()));
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0).map_err(bad))
            .collect(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from).map_err(bad))
            .collect(),
        (fmt, bits) => Err(Error::Load(format!(
            "{}: {bits}-bit {fmt:?} samples; only 16-bit PCM or 32-bit float is accepted",
            path.display()
        ))),
    }
}

/// Writes mono 16 kHz float32 samples.
pub fn save_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let err = |e: hound::Error| Error::Load(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in samples {
        w.write_sample(s as f32).map_err(err)?;
    }
    w.finalize().map_err(err)
}
