//! Per-sequence and dataset-mean LVE / FDD reports.

use serde::{Deserialize, Serialize};

use crate::config::EvalMode;
use crate::data::{Dataset, DatasetRecord, Split};
use crate::error::{Error, Result};
use crate::metrics::{sequence_metrics, MetricRecord, SequenceMetrics, VertexMask, FDD_SCALE, FDD_UNITS, LVE_SCALE, LVE_UNITS};
use crate::model::JambaTalk;
use crate::motion::MotionSequence;
use crate::report::render_table;
use crate::tensor::no_grad;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub sequence_id: String,
    pub subject: String,
    pub frames: usize,
    pub metrics: SequenceMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub mode: EvalMode,
    pub split: Option<Split>,
    pub lve_units: String,
    pub fdd_units: String,
    pub sequences: Vec<SequenceResult>,
    /// Unweighted mean over sequences, in millimetres.
    pub mean: SequenceMetrics,
}

impl EvalReport {
    /// Builds a report from per-sequence metrics; the mean is taken over
    /// sequences.
    pub fn from_sequences(method: &str, mode: EvalMode, split: Option<Split>, sequences: Vec<SequenceResult>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Contract("no sequences to evaluate".into()));
        }
        let n = sequences.len() as f64;
        let mean = SequenceMetrics {
            lve: sequences.iter().map(|s| s.metrics.lve).sum::<f64>() / n,
            lve_squared: sequences.iter().map(|s| s.metrics.lve_squared).sum::<f64>() / n,
            fdd: sequences.iter().map(|s| s.metrics.fdd).sum::<f64>() / n,
        };
        Ok(EvalReport {
            method: method.into(),
            mode,
            split,
            lve_units: LVE_UNITS.into(),
            fdd_units: FDD_UNITS.into(),
            sequences,
            mean,
        })
    }

    /// Flat metric records in reporting units, one set per sequence plus
    /// one set with `sequence_id = "mean"`.
    pub fn records(&self) -> Vec<MetricRecord> {
        self.sequences
            .iter()
            .flat_map(|s| s.metrics.records(&s.sequence_id))
            .chain(self.mean.records("mean"))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Json<'a> {
            #[serde(flatten)]
            report: &'a EvalReport,
            records: Vec<MetricRecord>,
        }
        Ok(serde_json::to_string_pretty(&Json {
            report: self,
            records: self.records(),
        })?)
    }

    /// Per-sequence rows followed by the dataset mean under the method name.
    pub fn table(&self) -> String {
        let lve = format!("LVE ({LVE_UNITS})");
        let fdd = format!("FDD ({FDD_UNITS})");
        let row = |name: &str, m: &SequenceMetrics| {
            vec![
                name.to_string(),
                format!("{:.4}", m.lve * LVE_SCALE),
                format!("{:.4}", m.fdd * FDD_SCALE),
            ]
        };
        let mut rows: Vec<Vec<String>> = self.sequences.iter().map(|s| row(&s.sequence_id, &s.metrics)).collect();
        rows.push(row(&self.method, &self.mean));
        render_table(&["Methods", &lve, &fdd], &rows)
    }
}

fn dataset_mask(data: &Dataset) -> Result<&VertexMask> {
    let mask = data
        .mask
        .as_ref()
        .ok_or_else(|| Error::Config("dataset has no lip / upper-face vertex masks".into()))?;
    if let Some(i) = mask.max_index().filter(|&i| i >= data.vertex_count) {
        return Err(Error::Contract(format!(
            "mask references vertex {i} but the dataset has {} vertices",
            data.vertex_count
        )));
    }
    Ok(mask)
}

/// Prediction for one record in the given mode.
pub fn predict(model: &JambaTalk, r: &DatasetRecord, mode: EvalMode) -> Result<MotionSequence> {
    match mode {
        EvalMode::Autoregressive => model.generate_for(r),
        EvalMode::TeacherForced => {
            let out = no_grad(|| model.predict_teacher_forced(r))?;
            MotionSequence::from_tensor(&out, r.motion.fps)
        }
    }
}

fn selected(data: &Dataset, split: Option<Split>) -> Result<Vec<&DatasetRecord>> {
    let recs: Vec<&DatasetRecord> = match split {
        Some(s) => data.split(s),
        None => data.records.iter().collect(),
    };
    if recs.is_empty() {
        return Err(Error::Contract(match split {
            Some(s) => format!("the {s} split is empty"),
            None => "the dataset is empty".into(),
        }));
    }
    Ok(recs)
}

/// Scores an arbitrary predictor over a split (all records if `None`).
pub fn evaluate_with<F>(data: &Dataset, split: Option<Split>, method: &str, mode: EvalMode, mut predictor: F) -> Result<EvalReport>
where
    F: FnMut(&DatasetRecord) -> Result<MotionSequence>,
{
    let mask = dataset_mask(data)?;
    let mut sequences = Vec::new();
    for r in selected(data, split)? {
        let pred = predictor(r)?;
        sequences.push(SequenceResult {
            sequence_id: r.sentence_id.clone(),
            subject: data.subjects.get(r.subject_id).cloned().unwrap_or_default(),
            frames: r.motion.frames(),
            metrics: sequence_metrics(&pred, &r.motion, mask)?,
        });
    }
    EvalReport::from_sequences(method, mode, split, sequences)
}

/// Scores a model. Never modifies its parameters.
pub fn evaluate(model: &JambaTalk, data: &Dataset, split: Option<Split>, mode: EvalMode) -> Result<EvalReport> {
    if model.cfg.decoder.vertex_count != data.vertex_count {
        return Err(Error::Contract(format!(
            "model predicts {} vertices but the dataset has {}",
            model.cfg.decoder.vertex_count, data.vertex_count
        )));
    }
    let method = format!("JambaTalk ({})", model.cfg.decoder.arrangement);
    evaluate_with(data, split, &method, mode, |r| predict(model, r, mode))
}
