//! Top-k mixture-of-experts feed-forward layer and the MoE_Mamba block.
//!
//! Gate values come from a softmax over *all* experts; the selected top-k
//! gates are used as-is unless `renormalize` is set.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mamba::{MambaBlock, MambaConfig, MambaState};
use crate::nn::{FeedForward, RmsNorm};
use crate::params::{Init, Param, VarBuilder};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    /// Expert hidden width; `0` means `4 * d_model`.
    pub d_ff: usize,
    pub renormalize: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            n_experts: 4,
            top_k: 2,
            d_ff: 0,
            renormalize: false,
        }
    }
}

impl MoeConfig {
    pub fn hidden(&self, d_model: usize) -> usize {
        if self.d_ff == 0 {
            4 * d_model
        } else {
            self.d_ff
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k = {} must lie in 1..={}",
                self.top_k, self.n_experts
            )));
        }
        Ok(())
    }
}

/// Selected experts for one token, in descending gate order.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub indices: Vec<usize>,
    pub gates: Vec<f64>,
}

/// Softmax over all logits, then the `k` largest probabilities (ties go to
/// the lower index).
pub fn route_logits(logits: &[f64], k: usize) -> Result<Route> {
    if k == 0 || k > logits.len() {
        return Err(Error::Config(format!(
            "top_k = {k} with {} experts",
            logits.len()
        )));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("router logits contain NaN".into()));
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|v| v / z).collect();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    order.truncate(k);
    Ok(Route {
        gates: order.iter().map(|&i| p[i]).collect(),
        indices: order,
    })
}

#[derive(Debug, Clone)]
pub struct MoeLayer {
    /// `[d_model, n_experts]`
    pub router: Param,
    pub experts: Vec<FeedForward>,
    pub top_k: usize,
    pub renormalize: bool,
    counts: Arc<Mutex<Vec<u64>>>,
}

impl MoeLayer {
    pub fn new(vb: &VarBuilder, d_model: usize, cfg: &MoeConfig) -> Self {
        let hidden = cfg.hidden(d_model);
        MoeLayer {
            router: vb.get("router", &[d_model, cfg.n_experts], Init::FanIn(d_model)),
            experts: (0..cfg.n_experts)
                .map(|i| FeedForward::new(&vb.pp(format!("expert{i}")), d_model, hidden))
                .collect(),
            top_k: cfg.top_k,
            renormalize: cfg.renormalize,
            counts: Arc::new(Mutex::new(vec![0; cfg.n_experts])),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_model(&self) -> usize {
        self.router.shape()[0]
    }

    pub fn params(&self) -> Vec<Param> {
        let mut v = vec![self.router.clone()];
        for e in &self.experts {
            v.extend(e.params());
        }
        v
    }

    pub fn expert_params(&self) -> usize {
        self.experts[0].num_params()
    }

    pub fn total_params(&self) -> usize {
        self.router.numel() + self.n_experts() * self.expert_params()
    }

    /// Router plus `k` experts: the parameters touched by one token.
    pub fn active_params(&self) -> usize {
        self.router.numel() + self.top_k * self.expert_params()
    }

    /// Routing decision for a single token vector.
    pub fn route(&self, x: &[f64]) -> Result<Route> {
        let d = self.d_model();
        if x.len() != d {
            return Err(Error::shape("route", &[x.len()], &[d]));
        }
        let w = self.router.to_vec();
        let ne = self.n_experts();
        let logits: Vec<f64> = (0..ne)
            .map(|e| (0..d).map(|i| x[i] * w[i * ne + e]).sum())
            .collect();
        route_logits(&logits, self.top_k)
    }

    /// How many tokens each expert has received since the last reset.
    pub fn routing_counts(&self) -> Vec<u64> {
        self.counts.lock().unwrap().clone()
    }

    pub fn reset_counts(&self) {
        self.counts.lock().unwrap().iter_mut().for_each(|c| *c = 0);
    }

    /// Per-token `Σ_{i ∈ top-k} p_i(x) E_i(x)` over the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.d_model();
        if x.dim(-1) != d {
            return Err(Error::shape("moe_forward", x.shape(), &[d]));
        }
        let tokens = x.numel() / d;
        let ne = self.n_experts();
        let flat = x.reshape(&[tokens, d])?;
        let probs = flat.matmul(&self.router.tensor())?.softmax(-1)?;

        let mut mask = vec![0.0; tokens * ne];
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); ne];
        for (tok, p) in probs.data().chunks(ne).enumerate() {
            let mut order: Vec<usize> = (0..ne).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
            for &e in &order[..self.top_k] {
                mask[tok * ne + e] = 1.0;
                rows[e].push(tok);
            }
        }
        {
            let mut counts = self.counts.lock().unwrap();
            for (c, r) in counts.iter_mut().zip(&rows) {
                *c += r.len() as u64;
            }
        }
        let mut gates = probs.mul_const(&mask)?;
        if self.renormalize {
            gates = gates.div(&gates.sum_axis(-1, true))?;
        }

        let mut out: Option<Tensor> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            if rows[e].is_empty() {
                continue;
            }
            let xe = flat.index_select(&rows[e])?;
            let ge = gates.narrow(1, e, 1)?.index_select(&rows[e])?;
            let ye = expert.forward(&xe)?.mul(&ge)?.scatter_rows(&rows[e], tokens)?;
            out = Some(match out {
                Some(acc) => acc.add(&ye)?,
                None => ye,
            });
        }
        out.expect("top_k >= 1 routes every token").reshape(x.shape())
    }
}

/// Mamba block followed by a pre-normalized MoE feed-forward sublayer with a
/// residual connection.
#[derive(Debug, Clone)]
pub struct MoeMambaBlock {
    pub mamba: MambaBlock,
    pub norm: RmsNorm,
    pub moe: MoeLayer,
}

impl MoeMambaBlock {
    pub fn new(vb: &VarBuilder, mamba: &MambaConfig, moe: &MoeConfig) -> Self {
        MoeMambaBlock {
            mamba: MambaBlock::new(vb, mamba),
            norm: RmsNorm::new(&vb.pp("moe_norm"), mamba.d_model),
            moe: MoeLayer::new(&vb.pp("moe"), mamba.d_model, moe),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut v = self.mamba.params();
        v.push(self.norm.weight.clone());
        v.extend(self.moe.params());
        v
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_state(x, None)?.0)
    }

    pub fn forward_with_state(
        &self,
        x: &Tensor,
        state: Option<&MambaState>,
    ) -> Result<(Tensor, MambaState)> {
        let (h, s) = self.mamba.forward_with_state(x, state)?;
        let y = h.add(&self.moe.forward(&self.norm.forward(&h)?)?)?;
        Ok((y, s))
    }

    pub fn step(&self, x_t: &Tensor, state: &MambaState) -> Result<(Tensor, MambaState)> {
        let (b, d) = (x_t.shape()[0], x_t.dim(-1));
        let (y, s) = self.forward_with_state(&x_t.reshape(&[b, 1, d])?, Some(state))?;
        Ok((y.reshape(&[b, d])?, s))
    }
}
