//! Selective state-space layer.
//!
//! Per channel `c` and state lane `n` the layer runs the diagonal recurrence
//!
//! ```text
//! h_t[c,n] = Â_t[c,n] · h_{t-1}[c,n] + B̂_t[c,n] · x_t[c]
//! y_t[c]   = Σ_n C_t[n] · h_t[c,n]
//! ```
//!
//! with `Â = exp(Δa)` and `B̂ = (exp(Δa) - 1) / a · b` (zero-order hold),
//! where `Δ`, `b` and `C` are computed from the input at every step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, RmsNorm};
use crate::params::{Init, Param, VarBuilder};
use crate::tensor::Tensor;

/// Below this `|Δa|` the input matrix uses its series limit `Δ·b`.
pub const SERIES_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MambaConfig {
    pub d_model: usize,
    pub expand: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    pub scan: ScanMode,
    pub scan_chunk: usize,
}

impl Default for MambaConfig {
    fn default() -> Self {
        MambaConfig {
            d_model: 64,
            expand: 2,
            state_dim: 16,
            conv_width: 4,
            dt_min: 1e-3,
            dt_max: 1e-1,
            scan: ScanMode::Sequential,
            scan_chunk: 16,
        }
    }
}

impl MambaConfig {
    pub fn channels(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.expand == 0 || self.state_dim == 0 {
            return Err(Error::Config("mamba dimensions must be positive".into()));
        }
        if self.conv_width < 2 {
            return Err(Error::Config("conv_width must be at least 2".into()));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return Err(Error::Config("need 0 < dt_min <= dt_max".into()));
        }
        if self.scan_chunk == 0 {
            return Err(Error::Config("scan_chunk must be positive".into()));
        }
        Ok(())
    }
}

/// Learned parameters of one selective SSM block.
#[derive(Debug, Clone)]
pub struct SsmParams {
    /// `[channels, N]`; the realized state matrix is `-exp(A_log)`.
    pub a_log: Param,
    pub proj_b: Linear,
    pub proj_c: Linear,
    pub proj_delta: Linear,
    /// Depthwise causal kernel `[channels, K]`.
    pub conv_weight: Param,
    pub conv_bias: Param,
    pub in_proj: Linear,
    pub gate_proj: Linear,
    pub out_proj: Linear,
    pub norm: RmsNorm,
}

impl SsmParams {
    pub fn new(vb: &VarBuilder, cfg: &MambaConfig) -> Self {
        let (d, c, n, k) = (cfg.d_model, cfg.channels(), cfg.state_dim, cfg.conv_width);
        let a_log = vb.get_with("A_log", &[c, n], |_, _| {
            (0..c)
                .flat_map(|_| (1..=n).map(|i| (i as f64).ln()))
                .collect()
        });
        let (dt_min, dt_max) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let proj_delta = Linear::new(&vb.pp("proj_delta"), c, c, true);
        let bias = proj_delta.bias.as_ref().unwrap();
        let mut rng = crate::params::seeded_rng(vb.store().seed(), bias.name());
        let dt_bias: Vec<f64> = (0..c)
            .map(|_| {
                use rand::Rng;
                let dt = rng.gen_range(dt_min..=dt_max).exp();
                // inverse softplus
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        bias.set_data(dt_bias).unwrap();
        SsmParams {
            a_log,
            proj_b: Linear::new(&vb.pp("proj_B"), c, n, false),
            proj_c: Linear::new(&vb.pp("proj_C"), c, n, false),
            proj_delta,
            conv_weight: vb.get("conv.weight", &[c, k], Init::FanIn(k)),
            conv_bias: vb.get("conv.bias", &[c], Init::Zeros),
            in_proj: Linear::new(&vb.pp("in_proj"), d, c, false),
            gate_proj: Linear::new(&vb.pp("gate_proj"), d, c, false),
            out_proj: Linear::new(&vb.pp("out_proj"), c, d, false),
            norm: RmsNorm::new(&vb.pp("norm"), d),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut v = vec![self.a_log.clone()];
        v.extend(self.proj_b.params());
        v.extend(self.proj_c.params());
        v.extend(self.proj_delta.params());
        v.push(self.conv_weight.clone());
        v.push(self.conv_bias.clone());
        v.extend(self.in_proj.params());
        v.extend(self.gate_proj.params());
        v.extend(self.out_proj.params());
        v.push(self.norm.weight.clone());
        v
    }

    /// Realized continuous-time diagonal `A = -exp(A_log)`.
    pub fn a(&self) -> Tensor {
        self.a_log.tensor().exp().neg()
    }
}

/// Input-dependent `(Δ, B_t, C_t)`: `Δ = softplus(W_Δ x + b_Δ)`, `B_t = W_B x`,
/// `C_t = W_C x`, over the last axis of `x`.
pub fn select_params(p: &SsmParams, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let delta = p.proj_delta.forward(x)?.softplus();
    let b = p.proj_b.forward(x)?;
    let c = p.proj_c.forward(x)?;
    Ok((delta, b, c))
}

fn zoh(delta: f64, a: f64) -> (f64, f64, f64, f64, f64) {
    // returns (Â, φ, dÂ/dΔ, dφ/dΔ, dφ/da) with B̂ = φ·b; dÂ/da = Δ·Â
    let z = delta * a;
    let abar = z.exp();
    if z.abs() < SERIES_GUARD {
        (abar, delta, a * abar, 1.0, 0.5 * delta * delta)
    } else {
        let em1 = z.exp_m1();
        let phi = em1 / a;
        let dphi_da = (z * abar - em1) / (a * a);
        (abar, phi, a * abar, abar, dphi_da)
    }
}

/// Zero-order-hold discretization of a diagonal state matrix.
///
/// `a` is `[C, N]`; `b` is `[..., N]` and `delta` is `[..., C]` with the same
/// leading axes. Returns `(Â, B̂)`, both `[..., C, N]`.
pub fn discretize(a: &Tensor, b: &Tensor, delta: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.ndim() != 2 {
        return Err(Error::shape("discretize", a.shape(), delta.shape()));
    }
    let (ch, n) = (a.shape()[0], a.shape()[1]);
    let lead = &delta.shape()[..delta.ndim() - 1];
    if delta.dim(-1) != ch || b.dim(-1) != n || &b.shape()[..b.ndim() - 1] != lead {
        return Err(Error::shape("discretize", b.shape(), delta.shape()));
    }
    if let Some(bad) = delta.data().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::Contract(format!("discretize needs Δ > 0, got {bad}")));
    }
    let rows: usize = lead.iter().product();
    let (ad, bd, dd) = (a.data(), b.data(), delta.data());
    let mut abar = vec![0.0; rows * ch * n];
    let mut bbar = vec![0.0; rows * ch * n];
    for r in 0..rows {
        for c in 0..ch {
            let dl = dd[r * ch + c];
            for i in 0..n {
                let (ab, phi, ..) = zoh(dl, ad[c * n + i]);
                let o = (r * ch + c) * n + i;
                abar[o] = ab;
                bbar[o] = phi * bd[r * n + i];
            }
        }
    }
    let mut shape = lead.to_vec();
    shape.extend([ch, n]);

    let parents = vec![a.clone(), b.clone(), delta.clone()];
    let back = |which: usize| {
        let (a, b, delta) = (a.clone(), b.clone(), delta.clone());
        Box::new(move |ctx: &crate::tensor::BackwardCtx<'_>| {
            let (ad, bd, dd) = (a.data(), b.data(), delta.data());
            let mut ga = ctx.needs[0].then(|| vec![0.0; ch * n]);
            let mut gb = ctx.needs[1].then(|| vec![0.0; rows * n]);
            let mut gd = ctx.needs[2].then(|| vec![0.0; rows * ch]);
            for r in 0..rows {
                for c in 0..ch {
                    let dl = dd[r * ch + c];
                    for i in 0..n {
                        let o = (r * ch + c) * n + i;
                        let g = ctx.grad_out[o];
                        if g == 0.0 {
                            continue;
                        }
                        let av = ad[c * n + i];
                        let (ab, phi, dab_dd, dphi_dd, dphi_da) = zoh(dl, av);
                        let bv = bd[r * n + i];
                        if which == 0 {
                            if let Some(ga) = ga.as_mut() {
                                ga[c * n + i] += g * dl * ab;
                            }
                            if let Some(gd) = gd.as_mut() {
                                gd[r * ch + c] += g * dab_dd;
                            }
                        } else {
                            if let Some(ga) = ga.as_mut() {
                                ga[c * n + i] += g * dphi_da * bv;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[r * n + i] += g * phi;
                            }
                            if let Some(gd) = gd.as_mut() {
                                gd[r * ch + c] += g * dphi_dd * bv;
                            }
                        }
                    }
                }
            }
            vec![ga, gb, gd]
        }) as crate::tensor::BackwardFn
    };
    let abar = Tensor::from_op(abar, shape.clone(), parents.clone(), back(0));
    let bbar = Tensor::from_op(bbar, shape, parents, back(1));
    Ok((abar, bbar))
}

struct ScanDims {
    batch: usize,
    steps: usize,
    ch: usize,
    n: usize,
}

fn scan_sequential(d: &ScanDims, abar: &[f64], bbar: &[f64], x: &[f64], h0: &[f64]) -> Vec<f64> {
    let (cn, tcn) = (d.ch * d.n, d.steps * d.ch * d.n);
    let mut hs = vec![0.0; d.batch * tcn];
    for b in 0..d.batch {
        let mut h = h0[b * cn..(b + 1) * cn].to_vec();
        for t in 0..d.steps {
            let base = b * tcn + t * cn;
            for c in 0..d.ch {
                let xv = x[(b * d.steps + t) * d.ch + c];
                for i in 0..d.n {
                    let k = c * d.n + i;
                    h[k] = abar[base + k] * h[k] + bbar[base + k] * xv;
                }
            }
            hs[base..base + cn].copy_from_slice(&h);
        }
    }
    hs
}

// Two-level associative scan over the pairs (Â_t, B̂_t x_t) under
// (a1, u1) ∘ (a2, u2) = (a1 a2, a2 u1 + u2). Chunks are scanned locally in
// parallel, chunk carries are propagated, then applied in parallel.
fn scan_parallel(
    d: &ScanDims,
    chunk: usize,
    abar: &[f64],
    bbar: &[f64],
    x: &[f64],
    h0: &[f64],
) -> Vec<f64> {
    let (cn, tcn) = (d.ch * d.n, d.steps * d.ch * d.n);
    let nchunks = d.steps.div_ceil(chunk);
    let mut hs = vec![0.0; d.batch * tcn];
    let mut prods = vec![0.0; d.batch * tcn];

    // local scans: every (batch, chunk) owns a disjoint time range
    let jobs: Vec<(usize, usize)> = (0..d.batch)
        .flat_map(|b| (0..nchunks).map(move |k| (b, k)))
        .collect();
    let locals: Vec<(Vec<f64>, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(b, k)| {
            let (t0, t1) = (k * chunk, ((k + 1) * chunk).min(d.steps));
            let len = t1 - t0;
            let mut hl = vec![0.0; len * cn];
            let mut pl = vec![0.0; len * cn];
            for (j, t) in (t0..t1).enumerate() {
                let base = b * tcn + t * cn;
                for c in 0..d.ch {
                    let xv = x[(b * d.steps + t) * d.ch + c];
                    for i in 0..d.n {
                        let kk = c * d.n + i;
                        let (a, u) = (abar[base + kk], bbar[base + kk] * xv);
                        if j == 0 {
                            hl[kk] = u;
                            pl[kk] = a;
                        } else {
                            let prev = (j - 1) * cn + kk;
                            hl[j * cn + kk] = a * hl[prev] + u;
                            pl[j * cn + kk] = a * pl[prev];
                        }
                    }
                }
            }
            (hl, pl)
        })
        .collect();
    for (&(b, k), (hl, pl)) in jobs.iter().zip(&locals) {
        let t0 = k * chunk;
        let off = b * tcn + t0 * cn;
        hs[off..off + hl.len()].copy_from_slice(hl);
        prods[off..off + pl.len()].copy_from_slice(pl);
    }

    // carries entering each chunk
    let mut carries = vec![0.0; d.batch * nchunks * cn];
    for b in 0..d.batch {
        let mut carry = h0[b * cn..(b + 1) * cn].to_vec();
        for k in 0..nchunks {
            carries[(b * nchunks + k) * cn..(b * nchunks + k + 1) * cn].copy_from_slice(&carry);
            let last = ((k + 1) * chunk).min(d.steps) - 1;
            let off = b * tcn + last * cn;
            for kk in 0..cn {
                carry[kk] = hs[off + kk] + prods[off + kk] * carry[kk];
            }
        }
    }

    hs.par_chunks_mut(cn)
        .zip(prods.par_chunks(cn))
        .enumerate()
        .for_each(|(row, (h, p))| {
            let (b, t) = (row / d.steps, row % d.steps);
            let carry = &carries[(b * nchunks + t / chunk) * cn..][..cn];
            for kk in 0..cn {
                h[kk] += p[kk] * carry[kk];
            }
        });
    hs
}

/// Runs the recurrence over `T` steps.
///
/// Shapes: `abar`, `bbar` `[B, T, C, N]`; `c` `[B, T, N]`; `x` `[B, T, C]`;
/// optional `h0` `[B, C, N]` (treated as a constant). Returns `y` `[B, T, C]`
/// and the final state `[B, C, N]` (detached).
pub fn selective_scan(
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
    x: &Tensor,
    h0: Option<&Tensor>,
    mode: ScanMode,
    chunk: usize,
) -> Result<(Tensor, Tensor)> {
    if x.ndim() != 3 || abar.ndim() != 4 {
        return Err(Error::shape("selective_scan", abar.shape(), x.shape()));
    }
    let (batch, steps, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = abar.shape()[3];
    let want = [batch, steps, ch, n];
    if abar.shape() != want || bbar.shape() != want {
        return Err(Error::Contract(format!(
            "per-step tensors disagree: Â {:?}, B̂ {:?}, x {:?}",
            abar.shape(),
            bbar.shape(),
            x.shape()
        )));
    }
    if c.shape() != [batch, steps, n] {
        return Err(Error::Contract(format!(
            "C has shape {:?}, expected {:?}",
            c.shape(),
            [batch, steps, n]
        )));
    }
    let zero;
    let h0d = match h0 {
        Some(h) if h.shape() == [batch, ch, n] => h.data(),
        Some(h) => {
            return Err(Error::Contract(format!(
                "initial state {:?}, expected {:?}",
                h.shape(),
                [batch, ch, n]
            )))
        }
        None => {
            zero = vec![0.0; batch * ch * n];
            &zero
        }
    };
    let dims = ScanDims {
        batch,
        steps,
        ch,
        n,
    };
    let hs = match mode {
        ScanMode::Sequential => scan_sequential(&dims, abar.data(), bbar.data(), x.data(), h0d),
        ScanMode::Parallel => scan_parallel(
            &dims,
            chunk.max(1),
            abar.data(),
            bbar.data(),
            x.data(),
            h0d,
        ),
    };
    let (cn, tcn) = (ch * n, steps * ch * n);
    let cd = c.data();
    let mut y = vec![0.0; batch * steps * ch];
    for b in 0..batch {
        for t in 0..steps {
            let hrow = &hs[b * tcn + t * cn..][..cn];
            let crow = &cd[(b * steps + t) * n..][..n];
            for ci in 0..ch {
                y[(b * steps + t) * ch + ci] = hrow[ci * n..(ci + 1) * n]
                    .iter()
                    .zip(crow)
                    .map(|(h, c)| h * c)
                    .sum();
            }
        }
    }
    let mut h_last = Vec::with_capacity(batch * cn);
    for b in 0..batch {
        h_last.extend_from_slice(&hs[b * tcn + (steps - 1) * cn..][..cn]);
    }
    let h_last = Tensor::raw(h_last, vec![batch, ch, n]);

    let h0v = h0d.to_vec();
    let (ta, tb, tc, tx) = (abar.clone(), bbar.clone(), c.clone(), x.clone());
    let y = Tensor::from_op(
        y,
        vec![batch, steps, ch],
        vec![abar.clone(), bbar.clone(), c.clone(), x.clone()],
        Box::new(move |ctx| {
            let (ad, bd, cd, xd) = (ta.data(), tb.data(), tc.data(), tx.data());
            let dy = ctx.grad_out;
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            let mut gc = vec![0.0; cd.len()];
            let mut gx = vec![0.0; xd.len()];
            for b in 0..batch {
                let mut carry = vec![0.0; cn];
                for t in (0..steps).rev() {
                    let base = b * tcn + t * cn;
                    let crow = &cd[(b * steps + t) * n..][..n];
                    let hprev: &[f64] = if t == 0 {
                        &h0v[b * cn..(b + 1) * cn]
                    } else {
                        &hs[base - cn..base]
                    };
                    for ci in 0..ch {
                        let yi = (b * steps + t) * ch + ci;
                        let (g, xv) = (dy[yi], xd[yi]);
                        let mut gxi = 0.0;
                        for i in 0..n {
                            let k = ci * n + i;
                            gc[(b * steps + t) * n + i] += g * hs[base + k];
                            let dh = g * crow[i] + carry[k];
                            ga[base + k] = dh * hprev[k];
                            gb[base + k] = dh * xv;
                            gxi += dh * bd[base + k];
                            carry[k] = dh * ad[base + k];
                        }
                        gx[yi] = gxi;
                    }
                }
            }
            vec![
                ctx.needs[0].then_some(ga),
                ctx.needs[1].then_some(gb),
                ctx.needs[2].then_some(gc),
                ctx.needs[3].then_some(gx),
            ]
        }),
    );
    Ok((y, h_last))
}

/// Depthwise causal convolution over time.
///
/// `x` `[B, T, C]`, `w` `[C, K]`, `bias` `[C]`; `tail` `[B, K-1, C]` holds the
/// inputs preceding `x` (zeros when absent). Returns the output and the new
/// tail (detached).
pub fn causal_conv1d(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    tail: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    if x.ndim() != 3 || w.ndim() != 2 || w.shape()[0] != x.shape()[2] {
        return Err(Error::shape("causal_conv1d", x.shape(), w.shape()));
    }
    let (batch, steps, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let pad = k - 1;
    let total = steps + pad;
    let mut xp = vec![0.0; batch * total * ch];
    if let Some(tl) = tail {
        if tl.shape() != [batch, pad, ch] {
            return Err(Error::Contract(format!(
                "conv tail {:?}, expected {:?}",
                tl.shape(),
                [batch, pad, ch]
            )));
        }
        for b in 0..batch {
            xp[b * total * ch..][..pad * ch].copy_from_slice(&tl.data()[b * pad * ch..][..pad * ch]);
        }
    }
    for b in 0..batch {
        xp[(b * total + pad) * ch..][..steps * ch]
            .copy_from_slice(&x.data()[b * steps * ch..][..steps * ch]);
    }
    let (wd, bd) = (w.data(), bias.data());
    let mut y = vec![0.0; batch * steps * ch];
    for b in 0..batch {
        for t in 0..steps {
            for c in 0..ch {
                let mut s = bd[c];
                for j in 0..k {
                    s += wd[c * k + j] * xp[(b * total + t + j) * ch + c];
                }
                y[(b * steps + t) * ch + c] = s;
            }
        }
    }
    let mut new_tail = Vec::with_capacity(batch * pad * ch);
    for b in 0..batch {
        new_tail.extend_from_slice(&xp[(b * total + steps) * ch..][..pad * ch]);
    }
    let new_tail = Tensor::raw(new_tail, vec![batch, pad, ch]);

    let tw = w.clone();
    let y = Tensor::from_op(
        y,
        vec![batch, steps, ch],
        vec![x.clone(), w.clone(), bias.clone()],
        Box::new(move |ctx| {
            let wd = tw.data();
            let g = ctx.grad_out;
            let mut gx = vec![0.0; batch * steps * ch];
            let mut gw = vec![0.0; ch * k];
            let mut gbias = vec![0.0; ch];
            for b in 0..batch {
                for t in 0..steps {
                    for c in 0..ch {
                        let gv = g[(b * steps + t) * ch + c];
                        gbias[c] += gv;
                        for j in 0..k {
                            gw[c * k + j] += gv * xp[(b * total + t + j) * ch + c];
                            // padded position t + j maps to x step t + j - pad
                            if t + j >= pad {
                                gx[(b * steps + t + j - pad) * ch + c] += gv * wd[c * k + j];
                            }
                        }
                    }
                }
            }
            vec![
                ctx.needs[0].then_some(gx),
                ctx.needs[1].then_some(gw),
                ctx.needs[2].then_some(gbias),
            ]
        }),
    );
    Ok((y, new_tail))
}

/// Recurrent state carried between incremental decoding steps.
#[derive(Debug, Clone)]
pub struct MambaState {
    /// `[B, C, N]`
    pub h: Tensor,
    /// `[B, K-1, C]`, the last `K-1` convolution inputs.
    pub conv_tail: Tensor,
}

impl MambaState {
    pub fn bytes(&self) -> usize {
        (self.h.numel() + self.conv_tail.numel()) * std::mem::size_of::<f64>()
    }
}

/// Norm → in_proj → causal conv → SiLU → selective scan, gated by
/// `SiLU(gate_proj)`, → out_proj, with a residual connection.
#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub cfg: MambaConfig,
    pub ssm: SsmParams,
}

impl MambaBlock {
    pub fn new(vb: &VarBuilder, cfg: &MambaConfig) -> Self {
        MambaBlock {
            cfg: cfg.clone(),
            ssm: SsmParams::new(&vb.pp("ssm"), cfg),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        self.ssm.params()
    }

    pub fn zero_state(&self, batch: usize) -> MambaState {
        let (c, n, k) = (self.cfg.channels(), self.cfg.state_dim, self.cfg.conv_width);
        MambaState {
            h: Tensor::zeros(&[batch, c, n]),
            conv_tail: Tensor::zeros(&[batch, k - 1, c]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_state(x, None)?.0)
    }

    /// Forward over `x` `[B, T, d_model]` continuing from `state`.
    pub fn forward_with_state(
        &self,
        x: &Tensor,
        state: Option<&MambaState>,
    ) -> Result<(Tensor, MambaState)> {
        if x.ndim() != 3 || x.dim(-1) != self.cfg.d_model {
            return Err(Error::shape("mamba_forward", x.shape(), &[self.cfg.d_model]));
        }
        let batch = x.shape()[0];
        if let Some(s) = state {
            let fresh = self.zero_state(batch);
            if s.h.shape() != fresh.h.shape() || s.conv_tail.shape() != fresh.conv_tail.shape() {
                return Err(Error::Contract(format!(
                    "stale mamba state: h {:?}, tail {:?}; layer expects {:?}, {:?}",
                    s.h.shape(),
                    s.conv_tail.shape(),
                    fresh.h.shape(),
                    fresh.conv_tail.shape()
                )));
            }
        }
        let p = &self.ssm;
        let xn = p.norm.forward(x)?;
        let u = p.in_proj.forward(&xn)?;
        let (u, tail) = causal_conv1d(
            &u,
            &p.conv_weight.tensor(),
            &p.conv_bias.tensor(),
            state.map(|s| &s.conv_tail),
        )?;
        let u = u.silu();
        let (delta, b, c) = select_params(p, &u)?;
        let (abar, bbar) = discretize(&p.a(), &b, &delta)?;
        let (y, h) = selective_scan(
            &abar,
            &bbar,
            &c,
            &u,
            state.map(|s| &s.h),
            self.cfg.scan,
            self.cfg.scan_chunk,
        )?;
        let gate = p.gate_proj.forward(&xn)?.silu();
        let out = p.out_proj.forward(&y.mul(&gate)?)?;
        Ok((x.add(&out)?, MambaState { h, conv_tail: tail }))
    }

    /// One incremental step on `x_t` `[B, d_model]`.
    pub fn step(&self, x_t: &Tensor, state: &MambaState) -> Result<(Tensor, MambaState)> {
        if x_t.ndim() != 2 {
            return Err(Error::shape("mamba_step", x_t.shape(), &[self.cfg.d_model]));
        }
        let (b, d) = (x_t.shape()[0], x_t.shape()[1]);
        let (y, s) = self.forward_with_state(&x_t.reshape(&[b, 1, d])?, Some(state))?;
        Ok((y.reshape(&[b, d])?, s))
    }
}
