//! Central finite-difference checking of reverse-mode gradients.
//!
//! The error measure for every coordinate is
//! `|analytic - numeric| / max(1, |analytic|)` and the checks report the
//! maximum over the coordinates they visit.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionConfig, TransformerBlock};
use crate::audio::{AudioConfig, AudioFrontend};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::mamba::{MambaBlock, MambaConfig};
use crate::moe::{MoeConfig, MoeLayer};
use crate::params::{seeded_rng, Param, VarStore};
use crate::tensor::{no_grad, Tensor};

pub const FD_STEP: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar(t: &Tensor) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Compares the gradient of `f` at `x` against central differences over
/// every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = x.detach().into_leaf();
    let loss = f(&leaf)?;
    scalar(&loss)?;
    loss.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    let base = x.to_vec();
    no_grad(|| -> Result<()> {
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += FD_STEP;
            let mut minus = base.clone();
            minus[i] -= FD_STEP;
            let fp = scalar(&f(&Tensor::new(plus, x.shape())?)?)?;
            let fm = scalar(&f(&Tensor::new(minus, x.shape())?)?)?;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
        Ok(())
    })?;
    Ok(worst)
}

/// Per-parameter summary from [`finite_diff_check_params`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

/// Gradient check of a closure-defined loss with respect to model
/// parameters. With `coords_per_param = Some(n)`, at most `n` coordinates per
/// parameter (drawn with `seed`) are checked; `None` checks all of them.
pub fn finite_diff_check_params<F>(
    loss_fn: F,
    params: &[Param],
    coords_per_param: Option<usize>,
    seed: u64,
) -> Result<Vec<ParamCheck>>
where
    F: Fn() -> Result<Tensor>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = loss_fn()?;
    scalar(&loss)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    drop(loss);

    let mut out = Vec::with_capacity(params.len());
    for (p, grad) in params.iter().zip(&analytic) {
        let n = p.numel();
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < n => {
                let mut rng = seeded_rng(seed, p.name());
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let base = p.to_vec();
        let mut worst = 0.0f64;
        let eval = |data: Vec<f64>| -> Result<f64> {
            p.set_data(data)?;
            let v = no_grad(&loss_fn)?;
            scalar(&v)
        };
        for &i in &coords {
            let mut plus = base.clone();
            plus[i] += FD_STEP;
            let mut minus = base.clone();
            minus[i] -= FD_STEP;
            let fp = eval(plus)?;
            let fm = eval(minus)?;
            worst = worst.max(rel_err(grad[i], (fp - fm) / (2.0 * FD_STEP)));
        }
        p.set_data(base)?;
        out.push(ParamCheck {
            name: p.name().to_string(),
            coords: coords.len(),
            max_rel_err: worst,
        });
    }
    Ok(out)
}

/// Largest error across a set of parameter checks.
pub fn worst(checks: &[ParamCheck]) -> f64 {
    checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
}

/// One row of [`gradient_suite`].
#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub block: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub seconds: f64,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(-scale..scale)).collect(), shape)
}

fn entry<F>(block: &str, loss: F, params: &[Param], input: &Tensor, coords: Option<usize>, seed: u64) -> Result<SuiteEntry>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let started = Instant::now();
    let checks = finite_diff_check_params(|| loss(input), params, coords, seed)?;
    let wrt_input = finite_diff_check(&loss, input)?;
    Ok(SuiteEntry {
        block: block.into(),
        coords: checks.iter().map(|c| c.coords).sum::<usize>() + input.numel(),
        max_rel_err: worst(&checks).max(wrt_input),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Gradient checks of every trainable block on toy shapes: Mamba, MoE,
/// Transformer, audio frontend and the full decoder (V=12, d_model=16,
/// T=4). Each loss is a random projection of the block output, so no
/// gradient path is trivially zero.
pub fn gradient_suite(seed: u64, coords_per_param: Option<usize>) -> Result<Vec<SuiteEntry>> {
    let (d, t) = (16, 4);
    let mut rng = seeded_rng(seed, "gradcheck.inputs");
    let store = VarStore::new(seed);
    let root = store.root();
    let mut out = Vec::new();

    let mamba_cfg = MambaConfig {
        d_model: d,
        state_dim: 4,
        ..MambaConfig::default()
    };
    let mamba = MambaBlock::new(&root.pp("mamba"), &mamba_cfg);
    let x = random(&mut rng, &[1, t, d], 1.0)?;
    let w = random(&mut rng, &[1, t, d], 1.0)?;
    out.push(entry("mamba", |x| Ok(mamba.forward(x)?.mul(&w)?.sum_all()), &mamba.params(), &x, coords_per_param, seed)?);

    let moe = MoeLayer::new(&root.pp("moe"), d, &MoeConfig::default());
    out.push(entry("moe", |x| Ok(moe.forward(x)?.mul(&w)?.sum_all()), &moe.params(), &x, coords_per_param, seed)?);

    let attn = TransformerBlock::new(&root.pp("transformer"), d, &AttentionConfig::default())?;
    out.push(entry("transformer", |x| Ok(attn.forward(x)?.mul(&w)?.sum_all()), &attn.params(), &x, coords_per_param, seed)?);

    let audio_cfg = AudioConfig {
        feature_dim: 6,
        ..AudioConfig::default()
    };
    let frontend = AudioFrontend::new(&root.pp("audio"), &audio_cfg, d)?;
    let wave = random(&mut rng, &[400], 1.0)?;
    let wa = random(&mut rng, &[t, d], 1.0)?;
    out.push(entry(
        "audio_frontend",
        |x| Ok(frontend.encode_waveform(x, t)?.mul(&wa)?.sum_all()),
        &frontend.params(),
        &wave,
        coords_per_param,
        seed,
    )?);

    let dec_cfg = DecoderConfig {
        d_model: d,
        vertex_count: 12,
        mamba: MambaConfig {
            state_dim: 4,
            ..MambaConfig::default()
        },
        ..DecoderConfig::default()
    };
    let dec = Decoder::new(&root.pp("decoder"), &dec_cfg)?;
    for p in dec.head.params() {
        p.set_data((0..p.numel()).map(|_| rng.gen_range(-0.3..0.3)).collect())?;
    }
    let gt = random(&mut rng, &[1, t, dec_cfg.motion_dim()], 1.0)?;
    let audio = random(&mut rng, &[1, t, d], 1.0)?;
    out.push(entry(
        "decoder",
        |a| Ok(dec.teacher_forced(&gt, a, &[1])?.sub(&gt)?.square().mean_all()),
        &dec.params(),
        &audio,
        coords_per_param,
        seed,
    )?);
    Ok(out)
}
