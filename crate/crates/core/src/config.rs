//! Run configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dir, load_vocaset_layout, synth_dataset, Dataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::VertexMask;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synth,
    /// Any directory in the layout written by `Dataset::save_dir`.
    Dir,
    /// Same layout, with the vertex count pinned to 5023.
    Vocaset,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Override the dataset's own `masks/lip.txt` and `masks/upper.txt`.
    pub lip_mask: Option<PathBuf>,
    pub upper_mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Each frame is conditioned on the model's own previous output.
    #[default]
    Autoregressive,
    /// Each frame is conditioned on the ground-truth previous frame.
    TeacherForced,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// Unset scores every sequence.
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    /// Timed repetitions per length; the fastest is reported.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![32, 64, 128, 256],
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Applies `section.key=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Table::try_from(self).map_err(config_err)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one item");
            let mut table = &mut root;
            for (i, part) in parents.iter().enumerate() {
                table = match table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                {
                    toml::Value::Table(t) => t,
                    _ => {
                        return Err(Error::Config(format!(
                            "override {key}: {} is not a section",
                            parents[..=i].join(".")
                        )))
                    }
                };
            }
            table.insert(last.to_string(), parse_value(raw.trim()));
        }
        toml::Value::Table(root)
            .try_into()
            .map_err(|e| Error::Config(format!("after overrides: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.decoder.validate()?;
        self.model.audio.validate()?;
        self.train.validate()?;
        if self.data.source == DataSource::Synth {
            self.data.synth.validate()?;
        }
        Ok(())
    }

    /// Loads or generates the dataset and aligns the model shape with it:
    /// vertex count, subject count and (for synthetic data) feature width.
    pub fn load_data(&mut self) -> Result<Dataset> {
        let mut data = match self.data.source {
            DataSource::Synth => {
                self.data.synth.validate()?;
                synth_dataset(&self.data.synth, self.seed)?
            }
            DataSource::Dir | DataSource::Vocaset => {
                let path = self
                    .data
                    .path
                    .as_deref()
                    .ok_or_else(|| Error::Config("data.path is required for directory datasets".into()))?;
                if self.data.source == DataSource::Vocaset {
                    load_vocaset_layout(path)?
                } else {
                    load_dir(path, None)?
                }
            }
        };
        match (&self.data.lip_mask, &self.data.upper_mask) {
            (Some(l), Some(u)) => data.mask = Some(VertexMask::load(l, u, data.vertex_count)?),
            (None, None) => {}
            _ => return Err(Error::Config("lip_mask and upper_mask must be given together".into())),
        }
        self.model.decoder.vertex_count = data.vertex_count;
        self.model.decoder.n_subjects = data.subjects.len().max(1);
        if self.data.source == DataSource::Synth {
            self.model.audio.feature_dim = self.data.synth.feature_dim;
        }
        self.validate()?;
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Arrangement;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[train]\nlr = 0.001\n[model.decoder]\narrangement = \"M-M\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.epochs, 200);
        assert_eq!(cfg.model.decoder.arrangement, Arrangement::MM);
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "train.max_steps=12",
                "model.decoder.arrangement=MoE-M",
                "data.source=dir",
                "data.path=/tmp/x",
                "bench.lengths=[8, 16]",
                "eval.mode=teacher_forced",
                "eval.split=val",
            ])
            .unwrap();
        assert_eq!(cfg.train.max_steps, 12);
        assert_eq!(cfg.model.decoder.arrangement, Arrangement::MoeM);
        assert_eq!(cfg.data.source, DataSource::Dir);
        assert_eq!(cfg.data.path.as_deref(), Some(Path::new("/tmp/x")));
        assert_eq!(cfg.bench.lengths, [8, 16]);
        assert_eq!(cfg.eval.mode, EvalMode::TeacherForced);
        assert_eq!(cfg.eval.split, Some(Split::Val));
    }

    #[test]
    fn bad_config_is_config_error() {
        let cases: [&[&str]; 4] = [&["train.lrr=1"], &["train.lr"], &["seed.x=1"], &["model.decoder.arrangement=X-Y"]];
        for o in cases {
            assert!(matches!(RunConfig::default().with_overrides(o), Err(Error::Config(_))), "{o:?}");
        }
        assert!(matches!(RunConfig::from_toml("[train]\nepochs = \"many\""), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_data_syncs_model_shape() {
        let mut cfg = RunConfig::default()
            .with_overrides(&["data.synth.vertex_count=30", "data.synth.n_subjects=3", "data.synth.feature_dim=5"])
            .unwrap();
        let data = cfg.load_data().unwrap();
        assert_eq!(data.records.len(), 24);
        assert_eq!(cfg.model.decoder.vertex_count, 30);
        assert_eq!(cfg.model.decoder.n_subjects, 3);
        assert_eq!(cfg.model.audio.feature_dim, 5);
        let mut missing = RunConfig::default().with_overrides(&["data.source=dir"]).unwrap();
        assert!(matches!(missing.load_data(), Err(Error::Config(_))));
    }
}
