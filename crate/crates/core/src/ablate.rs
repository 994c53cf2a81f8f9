//! Four-way comparison of decoder layer arrangements.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::decoder::Arrangement;
use crate::error::Result;
use crate::eval::evaluate;
use crate::metrics::{FDD_SCALE, FDD_UNITS, LVE_SCALE, LVE_UNITS};
use crate::model::JambaTalk;
use crate::report::render_table;
use crate::train::train;

/// Metrics of one finished row, LVE and FDD in reporting units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub lve: f64,
    pub fdd: f64,
    pub epoch_seconds: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arrangement: Arrangement,
    pub label: String,
    pub ppe_period: usize,
    pub result: Option<RowResult>,
    /// Set when the row failed; the other rows are still reported.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub lve_units: String,
    pub fdd_units: String,
    pub rows: Vec<AblationRow>,
}

/// One config per arrangement, identical to `base` in every other field.
pub fn ablation_configs(base: &RunConfig) -> Vec<RunConfig> {
    Arrangement::ALL
        .iter()
        .map(|&a| {
            let mut c = base.clone();
            c.model.decoder.arrangement = a;
            c
        })
        .collect()
}

/// Trains and scores one row from scratch with the config's seed.
pub fn run_row(cfg: &RunConfig, data: &Dataset) -> Result<RowResult> {
    let model = JambaTalk::new(&cfg.model, cfg.seed)?;
    let rep = train(&model, data, &cfg.train, cfg.seed)?;
    let ev = evaluate(&model, data, cfg.eval.split, cfg.eval.mode)?;
    Ok(RowResult {
        lve: ev.mean.lve * LVE_SCALE,
        fdd: ev.mean.fdd * FDD_SCALE,
        epoch_seconds: rep.mean_epoch_seconds(),
        steps: rep.steps,
    })
}

/// Runs every arrangement through `runner`; a failing row is annotated and
/// does not stop the others.
pub fn ablate_with<F>(base: &RunConfig, mut runner: F) -> AblationReport
where
    F: FnMut(&RunConfig) -> Result<RowResult>,
{
    let rows = ablation_configs(base)
        .iter()
        .map(|cfg| {
            let a = cfg.model.decoder.arrangement;
            let (result, error) = match runner(cfg) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            AblationRow {
                arrangement: a,
                label: a.label().to_string(),
                ppe_period: cfg.model.decoder.ppe_period,
                result,
                error,
            }
        })
        .collect();
    AblationReport {
        seed: base.seed,
        lve_units: LVE_UNITS.into(),
        fdd_units: FDD_UNITS.into(),
        rows,
    }
}

pub fn ablate(base: &RunConfig, data: &Dataset) -> AblationReport {
    ablate_with(base, |cfg| run_row(cfg, data))
}

impl AblationReport {
    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.error.is_none())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn table(&self) -> String {
        let lve = format!("LVE ({LVE_UNITS})");
        let fdd = format!("FDD ({FDD_UNITS})");
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let name = format!("JambaTalk_{}", r.label);
                match (&r.result, &r.error) {
                    (Some(m), _) => vec![
                        name,
                        format!("{:.4}", m.lve),
                        format!("{:.4}", m.fdd),
                        format!("{:.2}s", m.epoch_seconds),
                    ],
                    (None, e) => {
                        let msg = format!("failed: {}", e.as_deref().unwrap_or("unknown error"));
                        vec![name, "-".into(), "-".into(), msg]
                    }
                }
            })
            .collect();
        let mut out = render_table(&["Methods", &lve, &fdd, "Training Time (per epoch)"], &rows);
        let periods: Vec<String> = self.rows.iter().map(|r| r.ppe_period.to_string()).collect();
        out.push_str(&format!("period p = {} (seed {})\n", periods.join("/"), self.seed));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn toy_base() -> RunConfig {
        RunConfig::default()
            .with_overrides(&[
                "seed=5",
                "model.decoder.d_model=16",
                "data.synth.n_sentences=2",
                "data.synth.frames=6",
                "data.synth.vertex_count=24",
                "data.synth.feature_dim=6",
                "train.max_steps=2",
            ])
            .unwrap()
    }

    #[test]
    fn configs_differ_only_in_arrangement() {
        let base = toy_base();
        let cfgs = ablation_configs(&base);
        let labels: Vec<&str> = cfgs.iter().map(|c| c.model.decoder.arrangement.label()).collect();
        assert_eq!(labels, ["M-MoE", "MoE-MoE", "M-M", "MoE-M"]);
        for c in &cfgs {
            let mut c = c.clone();
            c.model.decoder.arrangement = base.model.decoder.arrangement;
            assert_eq!(c, base);
        }
    }

    #[test]
    fn shared_weights_start_identical() {
        let base = toy_base();
        let models: Vec<JambaTalk> = ablation_configs(&base)
            .iter()
            .map(|c| JambaTalk::new(&c.model, c.seed).unwrap())
            .collect();
        let shared = ["decoder.motion_embed.weight", "decoder.style", "decoder.layer3.attn.wq.weight", "audio.proj.weight"];
        for name in shared {
            let first = models[0].store.get(name).unwrap_or_else(|| panic!("{name}")).to_vec();
            for m in &models[1..] {
                assert_eq!(m.store.get(name).unwrap().to_vec(), first, "{name}");
            }
        }
    }

    #[test]
    fn failures_are_annotated() {
        let base = toy_base();
        let rep = ablate_with(&base, |c| {
            if c.model.decoder.arrangement == Arrangement::MM {
                Err(Error::Numeric("loss became NaN".into()))
            } else {
                Ok(RowResult { lve: 1.0, fdd: 2.0, epoch_seconds: 0.5, steps: 3 })
            }
        });
        assert!(!rep.is_complete());
        assert_eq!(rep.rows.len(), 4);
        assert!(rep.rows[2].error.as_deref().unwrap().contains("NaN"));
        let table = rep.table();
        assert!(table.contains("JambaTalk_M-M ") && table.contains("failed: numeric failure"));
        assert!(table.contains("0.50s"));
    }

    #[test]
    fn full_run_produces_four_rows() {
        let mut base = toy_base();
        let data = base.load_data().unwrap();
        let rep = ablate(&base, &data);
        assert!(rep.is_complete(), "{rep:?}");
        for r in &rep.rows {
            let m = r.result.unwrap();
            assert!(m.epoch_seconds > 0.0 && m.lve.is_finite() && m.fdd.is_finite());
            assert_eq!(r.ppe_period, 30);
        }
        let again = ablate(&base, &data);
        for (a, b) in rep.rows.iter().zip(&again.rows) {
            let (x, y) = (a.result.unwrap(), b.result.unwrap());
            assert_eq!((x.lve, x.fdd), (y.lve, y.fdd));
        }
    }
}
