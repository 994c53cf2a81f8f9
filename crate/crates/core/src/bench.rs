//! Incremental-decoding throughput and decode-state memory.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, LayerKind};
use crate::error::{Error, Result};
use crate::params::seeded_rng;
use crate::report::render_table;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    pub seconds: f64,
    pub tokens_per_sec: f64,
    /// Recurrent state of all SSM layers after `length` steps.
    pub ssm_bytes: usize,
    /// Key/value cache of all attention layers after `length` steps.
    pub kv_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeCount {
    pub layer: usize,
    pub router: usize,
    pub expert: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub total: usize,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub arrangement: String,
    pub rows: Vec<BenchRow>,
    pub total_params: usize,
    pub active_params: usize,
    pub moe: Vec<MoeCount>,
    /// Largest relative spread of SSM state bytes across lengths.
    pub ssm_variation: f64,
    /// Least-squares slope of KV bytes against length.
    pub kv_bytes_per_token: f64,
    /// `2 · head_dim · n_kv_groups · 8` per attention layer.
    pub kv_bytes_per_token_expected: f64,
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Decodes `length` frames against random audio features and reports the
/// fastest of `repeats` runs.
fn measure(dec: &Decoder, length: usize, repeats: usize, seed: u64) -> Result<BenchRow> {
    let d = dec.cfg.d_model;
    let mut rng = seeded_rng(seed, &format!("bench.audio{length}"));
    let audio = Tensor::new((0..length * d).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[1, length, d])?;
    let mut best = f64::INFINITY;
    let mut bytes = (0, 0);
    for _ in 0..repeats.max(1) {
        let mut s = dec.session(&audio, &[0])?;
        let started = Instant::now();
        no_grad(|| -> Result<()> {
            for _ in 0..length {
                dec.decode_step(&mut s)?;
            }
            Ok(())
        })?;
        best = best.min(started.elapsed().as_secs_f64());
        bytes = (s.ssm_bytes(), s.kv_bytes());
    }
    Ok(BenchRow {
        length,
        seconds: best,
        tokens_per_sec: length as f64 / best.max(f64::MIN_POSITIVE),
        ssm_bytes: bytes.0,
        kv_bytes: bytes.1,
    })
}

pub fn benchmark(dec: &Decoder, lengths: &[usize], repeats: usize, seed: u64) -> Result<BenchReport> {
    let mut distinct = lengths.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 || distinct[0] == 0 {
        return Err(Error::Config(format!(
            "benchmark needs at least two distinct positive lengths, got {lengths:?}"
        )));
    }
    let rows = lengths
        .iter()
        .map(|&l| measure(dec, l, repeats, seed))
        .collect::<Result<Vec<_>>>()?;

    let ssm: Vec<f64> = rows.iter().map(|r| r.ssm_bytes as f64).collect();
    let (lo, hi) = ssm.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    let ssm_variation = if hi > 0.0 { (hi - lo) / hi } else { 0.0 };
    let xs: Vec<f64> = rows.iter().map(|r| r.length as f64).collect();
    let kv: Vec<f64> = rows.iter().map(|r| r.kv_bytes as f64).collect();
    let attn_layers = dec.cfg.arrangement.layer_kinds(dec.cfg.layers_per_side).iter().filter(|k| **k == LayerKind::Transformer).count();
    let a = &dec.cfg.attention;
    let expected = (2 * a.head_dim(dec.cfg.d_model) * a.n_kv_groups * std::mem::size_of::<f64>() * attn_layers) as f64;

    let moe = dec
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.moe().map(|m| (i, m)))
        .map(|(i, m)| MoeCount {
            layer: i,
            router: m.router.numel(),
            expert: m.expert_params(),
            n_experts: m.n_experts(),
            top_k: m.top_k,
            total: m.total_params(),
            active: m.active_params(),
        })
        .collect();
    Ok(BenchReport {
        arrangement: dec.cfg.arrangement.label().into(),
        rows,
        total_params: dec.num_params(),
        active_params: dec.active_params(),
        moe,
        ssm_variation,
        kv_bytes_per_token: slope(&xs, &kv),
        kv_bytes_per_token_expected: expected,
    })
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.length.to_string(),
                    format!("{:.1}", r.tokens_per_sec),
                    r.ssm_bytes.to_string(),
                    r.kv_bytes.to_string(),
                    (r.ssm_bytes + r.kv_bytes).to_string(),
                ]
            })
            .collect();
        let mut out = render_table(&["Length", "Tokens/s", "SSM bytes", "KV bytes", "State bytes"], &rows);
        out.push_str(&format!(
            "decoder {}: {} parameters, {} active per token\n",
            self.arrangement, self.total_params, self.active_params
        ));
        out.push_str(&format!(
            "KV growth {:.1} bytes/token (expected {:.1}); SSM state variation {:.3}%\n",
            self.kv_bytes_per_token,
            self.kv_bytes_per_token_expected,
            self.ssm_variation * 100.0
        ));
        out
    }
}
