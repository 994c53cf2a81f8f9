//! Lip vertex error and upper-face dynamics deviation.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSequence;

/// Reporting scale for LVE (values are multiplied by `1e3`).
pub const LVE_SCALE: f64 = 1e3;
pub const LVE_UNITS: &str = "x1e-3 mm";
/// Reporting scale for FDD (values are multiplied by `1e5`).
pub const FDD_SCALE: f64 = 1e5;
pub const FDD_UNITS: &str = "x1e-5 mm";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VertexMask {
    pub lip: Vec<usize>,
    pub upper: Vec<usize>,
}

fn check_indices(name: &str, idx: &[usize], vertex_count: usize) -> Result<HashSet<usize>> {
    let mut seen = HashSet::with_capacity(idx.len());
    for &i in idx {
        if i >= vertex_count {
            return Err(Error::Config(format!(
                "{name} vertex {i} is out of range for {vertex_count} vertices"
            )));
        }
        if !seen.insert(i) {
            return Err(Error::Config(format!("{name} vertex {i} is listed twice")));
        }
    }
    Ok(seen)
}

impl VertexMask {
    /// Validates uniqueness, range and disjointness against `vertex_count`.
    pub fn new(lip: Vec<usize>, upper: Vec<usize>, vertex_count: usize) -> Result<Self> {
        let l = check_indices("lip", &lip, vertex_count)?;
        let u = check_indices("upper-face", &upper, vertex_count)?;
        if let Some(i) = l.intersection(&u).min() {
            return Err(Error::Config(format!(
                "vertex {i} is in both the lip and upper-face sets"
            )));
        }
        Ok(VertexMask { lip, upper })
    }

    pub fn load(lip: &Path, upper: &Path, vertex_count: usize) -> Result<Self> {
        let read = |p: &Path| -> Result<Vec<usize>> {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Load(format!("{}: {e}", p.display())))?;
            parse_indices(&text).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", p.display())),
                other => other,
            })
        };
        Self::new(read(lip)?, read(upper)?, vertex_count)
    }

    pub fn max_index(&self) -> Option<usize> {
        self.lip.iter().chain(&self.upper).copied().max()
    }
}

/// One index per line; `#` starts a comment; blank lines are ignored.
pub fn parse_indices(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter_map(|(n, line)| {
            let body = line.split('#').next().unwrap_or("").trim();
            (!body.is_empty()).then(|| {
                body.parse::<usize>()
                    .map_err(|_| Error::Format(format!("line {}: {body:?} is not a vertex index", n + 1)))
            })
        })
        .collect()
}

pub fn format_indices(idx: &[usize]) -> String {
    idx.iter().map(|i| format!("{i}\n")).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LveMode {
    #[default]
    Euclidean,
    Squared,
}

fn same_shape(pred: &MotionSequence, gt: &MotionSequence) -> Result<()> {
    if pred.frames() != gt.frames() || pred.vertices() != gt.vertices() {
        return Err(Error::Contract(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.frames(),
            pred.vertices(),
            gt.frames(),
            gt.vertices()
        )));
    }
    Ok(())
}

fn check_mask_range(mask: &VertexMask, vertices: usize) -> Result<()> {
    match mask.max_index() {
        Some(i) if i >= vertices => Err(Error::Contract(format!(
            "mask references vertex {i} but sequences have {vertices} vertices"
        ))),
        _ => Ok(()),
    }
}

/// Mean over frames of the largest lip-vertex deviation.
pub fn lve_with(pred: &MotionSequence, gt: &MotionSequence, mask: &VertexMask, mode: LveMode) -> Result<f64> {
    same_shape(pred, gt)?;
    if mask.lip.is_empty() {
        return Err(Error::Config("lip vertex set is empty".into()));
    }
    check_mask_range(mask, gt.vertices())?;
    let total: f64 = (0..gt.frames())
        .map(|t| {
            mask.lip
                .iter()
                .map(|&v| {
                    let (p, g) = (pred.vertex(t, v), gt.vertex(t, v));
                    let sq: f64 = (0..3).map(|i| (p[i] - g[i]).powi(2)).sum();
                    match mode {
                        LveMode::Euclidean => sq.sqrt(),
                        LveMode::Squared => sq,
                    }
                })
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / gt.frames() as f64)
}

pub fn lve(pred: &MotionSequence, gt: &MotionSequence, mask: &VertexMask) -> Result<f64> {
    lve_with(pred, gt, mask, LveMode::Euclidean)
}

/// Population standard deviation of per-frame L2 norms.
pub fn dynamics(series: &[[f64; 3]]) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    let norms: Vec<f64> = series.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    (norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean over upper-face vertices of `dyn(gt) − dyn(pred)`, signed.
pub fn fdd(pred: &MotionSequence, gt: &MotionSequence, mask: &VertexMask) -> Result<f64> {
    same_shape(pred, gt)?;
    if mask.upper.is_empty() {
        return Err(Error::Config("upper-face vertex set is empty".into()));
    }
    check_mask_range(mask, gt.vertices())?;
    let total: f64 = mask
        .upper
        .iter()
        .map(|&v| dynamics(&gt.track(v)) - dynamics(&pred.track(v)))
        .sum();
    Ok(total / mask.upper.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub units: String,
    pub sequence_id: String,
}

/// Per-sequence metric values in raw millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub lve: f64,
    pub lve_squared: f64,
    pub fdd: f64,
}

pub fn sequence_metrics(pred: &MotionSequence, gt: &MotionSequence, mask: &VertexMask) -> Result<SequenceMetrics> {
    Ok(SequenceMetrics {
        lve: lve(pred, gt, mask)?,
        lve_squared: lve_with(pred, gt, mask, LveMode::Squared)?,
        fdd: fdd(pred, gt, mask)?,
    })
}

impl SequenceMetrics {
    /// Records in reporting units; FDD also reported as a magnitude.
    pub fn records(&self, sequence_id: &str) -> Vec<MetricRecord> {
        let rec = |metric: &str, value: f64, units: &str| MetricRecord {
            metric: metric.into(),
            value,
            units: units.into(),
            sequence_id: sequence_id.into(),
        };
        vec![
            rec("lve", self.lve * LVE_SCALE, LVE_UNITS),
            rec("lve_squared", self.lve_squared * LVE_SCALE, "x1e-3 mm^2"),
            rec("fdd", self.fdd * FDD_SCALE, FDD_UNITS),
            rec("fdd_abs", self.fdd.abs() * FDD_SCALE, FDD_UNITS),
        ]
    }
}
