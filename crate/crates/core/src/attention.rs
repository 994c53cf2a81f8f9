//! Rotary position embedding and grouped-query attention.
//!
//! Query heads are split into `n_kv_groups` contiguous groups; every head in
//! a group reads the same key/value head. `n_kv_groups == n_query_heads` is
//! ordinary multi-head attention, `n_kv_groups == 1` is multi-query attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, Linear, RmsNorm};
use crate::params::{Param, VarBuilder};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub n_query_heads: usize,
    pub n_kv_groups: usize,
    pub rope: bool,
    pub rope_base: f64,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// KV cache capacity in positions.
    pub max_positions: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            n_query_heads: 4,
            n_kv_groups: 2,
            rope: true,
            rope_base: 10000.0,
            ffn_mult: 4,
            max_positions: 4096,
        }
    }
}

impl AttentionConfig {
    pub fn head_dim(&self, d_model: usize) -> usize {
        d_model / self.n_query_heads
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.n_query_heads == 0 || d_model % self.n_query_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {} query heads",
                self.n_query_heads
            )));
        }
        if self.n_kv_groups == 0 || self.n_query_heads % self.n_kv_groups != 0 {
            return Err(Error::Config(format!(
                "{} query heads cannot be split into {} groups",
                self.n_query_heads, self.n_kv_groups
            )));
        }
        if self.head_dim(d_model) % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary pairing",
                self.head_dim(d_model)
            )));
        }
        if self.ffn_mult == 0 || self.max_positions == 0 {
            return Err(Error::Config("ffn_mult and max_positions must be positive".into()));
        }
        Ok(())
    }
}

/// `θ_i = base^(-2(i-1)/head_dim)` for `i = 1..=head_dim/2`.
pub fn rope_thetas(head_dim: usize, base: f64) -> Result<Vec<f64>> {
    if head_dim % 2 != 0 || head_dim == 0 {
        return Err(Error::Config(format!("rotary head_dim {head_dim} must be even")));
    }
    Ok((0..head_dim / 2)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect())
}

fn rotate_pairs(x: &[f64], angle_of: impl Fn(usize) -> f64, hd: usize, thetas: &[f64], sign: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, (src, dst)) in x.chunks(hd).zip(out.chunks_mut(hd)).enumerate() {
        let pos = angle_of(r);
        for (i, th) in thetas.iter().enumerate() {
            let (s, c) = (sign * pos * th).sin_cos();
            let (a, b) = (src[2 * i], src[2 * i + 1]);
            dst[2 * i] = a * c - b * s;
            dst[2 * i + 1] = a * s + b * c;
        }
    }
    out
}

fn rope_op(x: &Tensor, thetas: &[f64], pos_of_row: impl Fn(usize) -> f64 + Clone + Send + Sync + 'static) -> Result<Tensor> {
    let hd = x.dim(-1);
    if hd != 2 * thetas.len() {
        return Err(Error::Config(format!(
            "rotary input width {hd} does not match {} frequency pairs",
            thetas.len()
        )));
    }
    let th = thetas.to_vec();
    let data = rotate_pairs(x.data(), pos_of_row.clone(), hd, &th, 1.0);
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |ctx| vec![Some(rotate_pairs(ctx.grad_out, pos_of_row.clone(), hd, &th, -1.0))]),
    ))
}

/// Rotates every consecutive pair of the last axis by `m·θ_i`.
pub fn rope_rotate(x: &Tensor, m: usize, thetas: &[f64]) -> Result<Tensor> {
    let m = m as f64;
    rope_op(x, thetas, move |_| m)
}

/// Rotary embedding for `x` `[..., T, head_dim]` whose row `t` sits at
/// absolute position `start + t`.
pub fn rope_sequence(x: &Tensor, start: usize, thetas: &[f64]) -> Result<Tensor> {
    let steps = x.dim(-2);
    rope_op(x, thetas, move |row| (start + row % steps) as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Whether `<rope(q, m), rope(k, n)> == <rope(q, m+s), rope(k, n+s)>` within
/// `1e-9`.
pub fn rope_relative_property_check(
    q: &[f64],
    k: &[f64],
    m: usize,
    n: usize,
    s: usize,
    thetas: &[f64],
) -> Result<bool> {
    let hd = q.len();
    let as_t = |v: &[f64]| Tensor::new(v.to_vec(), &[1, hd]);
    let lhs = dot(
        rope_rotate(&as_t(q)?, m, thetas)?.data(),
        rope_rotate(&as_t(k)?, n, thetas)?.data(),
    );
    let rhs = dot(
        rope_rotate(&as_t(q)?, m + s, thetas)?.data(),
        rope_rotate(&as_t(k)?, n + s, thetas)?.data(),
    );
    Ok((lhs - rhs).abs() <= 1e-9)
}

/// Mean-pools `[n_heads, head_params]` into `[n_groups, head_params]`,
/// averaging contiguous runs of `n_heads / n_groups` heads.
pub fn mha_to_gqa_pool(kv_heads: &Tensor, n_groups: usize) -> Result<Tensor> {
    if kv_heads.ndim() != 2 {
        return Err(Error::Contract(format!(
            "expected [n_heads, head_params], got {:?}",
            kv_heads.shape()
        )));
    }
    let (nh, width) = (kv_heads.shape()[0], kv_heads.shape()[1]);
    if n_groups == 0 || nh % n_groups != 0 {
        return Err(Error::Config(format!("{nh} heads cannot be pooled into {n_groups} groups")));
    }
    kv_heads.reshape(&[n_groups, nh / n_groups, width])?.mean_axis(1, false).reshape(&[n_groups, width])
}

/// Converts a multi-head key or value projection `[d_model, n_heads·hd]`
/// into its grouped form `[d_model, n_groups·hd]` by mean-pooling heads.
pub fn pool_kv_projection(weight: &Tensor, n_heads: usize, n_groups: usize) -> Result<Tensor> {
    let (d, cols) = (weight.shape()[0], weight.shape()[1]);
    if cols % n_heads != 0 {
        return Err(Error::Config(format!("{cols} columns do not split into {n_heads} heads")));
    }
    let hd = cols / n_heads;
    // [d, H, hd] -> [H, d, hd] -> [H, d*hd]
    let heads = weight.reshape(&[d, n_heads, hd])?.transpose(0, 1).reshape(&[n_heads, d * hd])?;
    let pooled = mha_to_gqa_pool(&heads, n_groups)?;
    Ok(pooled.reshape(&[n_groups, d, hd])?.transpose(0, 1).reshape(&[d, n_groups * hd])?)
}

/// Rotated keys and values for one decode session.
#[derive(Debug, Clone)]
pub struct KvCache {
    batch: usize,
    groups: usize,
    head_dim: usize,
    capacity: usize,
    len: usize,
    /// One growing buffer per (batch, group), `len × head_dim` each.
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new(batch: usize, groups: usize, head_dim: usize, capacity: usize) -> Self {
        KvCache {
            batch,
            groups,
            head_dim,
            capacity,
            len: 0,
            k: vec![Vec::new(); batch * groups],
            v: vec![Vec::new(); batch * groups],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Bytes held by cached keys and values.
    pub fn bytes(&self) -> usize {
        self.k.iter().chain(&self.v).map(Vec::len).sum::<usize>() * std::mem::size_of::<f64>()
    }

    fn as_tensor(buf: &[Vec<f64>], shape: [usize; 4]) -> Tensor {
        Tensor::raw(buf.concat(), shape.to_vec())
    }

    fn append(&mut self, k: &Tensor, v: &Tensor) -> Result<()> {
        // k, v: [B, G, T, hd]
        let steps = k.shape()[2];
        if k.shape()[..2] != [self.batch, self.groups] || k.shape()[3] != self.head_dim {
            return Err(Error::Contract(format!(
                "kv cache built for [{}, {}, _, {}], got {:?}",
                self.batch,
                self.groups,
                self.head_dim,
                k.shape()
            )));
        }
        if self.len + steps > self.capacity {
            return Err(Error::Contract(format!(
                "kv cache overflow: {} + {steps} positions exceeds capacity {}",
                self.len, self.capacity
            )));
        }
        let w = steps * self.head_dim;
        for (i, (kb, vb)) in self.k.iter_mut().zip(self.v.iter_mut()).enumerate() {
            kb.extend_from_slice(&k.data()[i * w..(i + 1) * w]);
            vb.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
        }
        self.len += steps;
        Ok(())
    }
}

/// Pre-norm attention sublayer followed by a pre-norm dense feed-forward
/// sublayer, both residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub cfg: AttentionConfig,
    pub d_model: usize,
    pub attn_norm: RmsNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ffn_norm: RmsNorm,
    pub ffn: FeedForward,
    thetas: Vec<f64>,
}

impl TransformerBlock {
    pub fn new(vb: &VarBuilder, d_model: usize, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate(d_model)?;
        let hd = cfg.head_dim(d_model);
        let attn = vb.pp("attn");
        let ffn = vb.pp("ffn");
        Ok(TransformerBlock {
            cfg: cfg.clone(),
            d_model,
            attn_norm: RmsNorm::new(&attn.pp("norm"), d_model),
            wq: Linear::new(&attn.pp("wq"), d_model, cfg.n_query_heads * hd, false),
            wk: Linear::new(&attn.pp("wk"), d_model, cfg.n_kv_groups * hd, false),
            wv: Linear::new(&attn.pp("wv"), d_model, cfg.n_kv_groups * hd, false),
            wo: Linear::new(&attn.pp("wo"), cfg.n_query_heads * hd, d_model, false),
            ffn_norm: RmsNorm::new(&ffn.pp("norm"), d_model),
            ffn: FeedForward::new(&ffn, d_model, cfg.ffn_mult * d_model),
            thetas: rope_thetas(hd, cfg.rope_base)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.cfg.head_dim(self.d_model)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut v = vec![self.attn_norm.weight.clone()];
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            v.extend(l.params());
        }
        v.push(self.ffn_norm.weight.clone());
        v.extend(self.ffn.params());
        v
    }

    /// Parameters in the key and value projections.
    pub fn kv_params(&self) -> usize {
        self.wk.weight.numel() + self.wv.weight.numel()
    }

    pub fn new_cache(&self, batch: usize) -> KvCache {
        KvCache::new(batch, self.cfg.n_kv_groups, self.head_dim(), self.cfg.max_positions)
    }

    fn heads(&self, x: &Tensor, n: usize, start: usize) -> Result<Tensor> {
        let (b, t) = (x.shape()[0], x.shape()[1]);
        let h = x.reshape(&[b, t, n, self.head_dim()])?.transpose(1, 2);
        if self.cfg.rope {
            rope_sequence(&h, start, &self.thetas)
        } else {
            Ok(h)
        }
    }

    /// Attention probabilities `[B, G, H/G, T, S]` and the attention output
    /// before the output projection `[B, T, H·hd]`.
    fn attend(&self, xn: &Tensor, cache: Option<&mut KvCache>) -> Result<(Tensor, Tensor)> {
        let (b, t) = (xn.shape()[0], xn.shape()[1]);
        let (nh, ng, hd) = (self.cfg.n_query_heads, self.cfg.n_kv_groups, self.head_dim());
        let start = cache.as_ref().map_or(0, |c| c.len());
        let q = self.heads(&self.wq.forward(xn)?, nh, start)?;
        let k = self.heads(&self.wk.forward(xn)?, ng, start)?;
        let v = self.wv.forward(xn)?.reshape(&[b, t, ng, hd])?.transpose(1, 2);
        let (k, v) = match cache {
            Some(c) => {
                let (pk, pv) = (
                    (!c.is_empty()).then(|| KvCache::as_tensor(&c.k, [b, ng, c.len, hd])),
                    (!c.is_empty()).then(|| KvCache::as_tensor(&c.v, [b, ng, c.len, hd])),
                );
                c.append(&k, &v)?;
                match (pk, pv) {
                    (Some(pk), Some(pv)) => (Tensor::concat(&[pk, k], 2)?, Tensor::concat(&[pv, v], 2)?),
                    _ => (k, v),
                }
            }
            None => (k, v),
        };
        let s = k.shape()[2];
        let per = nh / ng;
        let q = q.reshape(&[b, ng, per, t, hd])?;
        let k = k.reshape(&[b, ng, 1, s, hd])?;
        let v = v.reshape(&[b, ng, 1, s, hd])?;
        let scores = q.matmul(&k.transpose(-1, -2))?.scale(1.0 / (hd as f64).sqrt());
        let mut mask = vec![0.0; t * s];
        for i in 0..t {
            for j in 0..s {
                if j > start + i {
                    mask[i * s + j] = f64::NEG_INFINITY;
                }
            }
        }
        let probs = scores.add(&Tensor::raw(mask, vec![t, s]))?.softmax(-1)?;
        let out = probs
            .matmul(&v)?
            .reshape(&[b, nh, t, hd])?
            .transpose(1, 2)
            .reshape(&[b, t, nh * hd])?;
        Ok((probs, out))
    }

    /// Attention weights for inspection, `[B, G, H/G, T, T]`.
    pub fn attention_probs(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.attend(&self.attn_norm.forward(x)?, None)?.0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_cached(x, None)
    }

    /// Forward over `x` `[B, T, d_model]`; with a cache the positions
    /// continue from the cached length and the new keys/values are appended.
    pub fn forward_cached(&self, x: &Tensor, cache: Option<&mut KvCache>) -> Result<Tensor> {
        if x.ndim() != 3 || x.dim(-1) != self.d_model {
            return Err(Error::shape("gqa_attention", x.shape(), &[self.d_model]));
        }
        let (_, attn) = self.attend(&self.attn_norm.forward(x)?, cache)?;
        let x = x.add(&self.wo.forward(&attn)?)?;
        x.add(&self.ffn.forward(&self.ffn_norm.forward(&x)?)?)
    }
}

#[cfg(test)]
mod tests;
