//! Small building blocks shared by the layers.

use crate::error::Result;
use crate::params::{Init, Param, VarBuilder};
use crate::tensor::Tensor;

pub const RMS_EPS: f64 = 1e-6;

/// Affine map over the last axis. Weights are stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(vb: &VarBuilder, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self::with_init(vb, d_in, d_out, bias, Init::FanIn(d_in))
    }

    pub fn with_init(vb: &VarBuilder, d_in: usize, d_out: usize, bias: bool, init: Init) -> Self {
        Linear {
            weight: vb.get("weight", &[d_in, d_out], init),
            bias: bias.then(|| vb.get("bias", &[d_out], Init::Zeros)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.tensor())?;
        match &self.bias {
            Some(b) => y.add(&b.tensor()),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut v = vec![self.weight.clone()];
        v.extend(self.bias.clone());
        v
    }
}

/// Root-mean-square normalization over the last axis (no mean removal).
#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub weight: Param,
}

impl RmsNorm {
    pub fn new(vb: &VarBuilder, dim: usize) -> Self {
        RmsNorm {
            weight: vb.get("weight", &[dim], Init::Ones),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        rms_norm(x, &self.weight.tensor())
    }
}

pub fn rms_norm(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let inv = x.square().mean_axis(-1, true).add_scalar(RMS_EPS).powf(-0.5);
    x.mul(&inv)?.mul(weight)
}

/// Two-layer SiLU feed-forward map `d -> hidden -> d`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(vb: &VarBuilder, d_model: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(&vb.pp("up"), d_model, hidden, true),
            down: Linear::new(&vb.pp("down"), hidden, d_model, true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.silu())
    }

    pub fn params(&self) -> Vec<Param> {
        let mut v = self.up.params();
        v.extend(self.down.params());
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(Param::numel).sum()
    }
}
