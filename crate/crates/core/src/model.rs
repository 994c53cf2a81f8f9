//! Audio frontend and decoder bundled with their parameter store.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{AudioConfig, AudioFrontend, AudioInput};
use crate::checkpoint::Checkpoint;
use crate::data::DatasetRecord;
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::params::{Param, VarStore};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub audio: AudioConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    seed: u64,
    model: ModelConfig,
}

#[derive(Debug, Clone)]
pub struct JambaTalk {
    pub cfg: ModelConfig,
    pub store: VarStore,
    pub frontend: AudioFrontend,
    pub decoder: Decoder,
}

impl JambaTalk {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let store = VarStore::new(seed);
        let root = store.root();
        Ok(JambaTalk {
            cfg: cfg.clone(),
            frontend: AudioFrontend::new(&root.pp("audio"), &cfg.audio, cfg.decoder.d_model)?,
            decoder: Decoder::new(&root.pp("decoder"), &cfg.decoder)?,
            store,
        })
    }

    pub fn params(&self) -> Vec<Param> {
        self.store.params()
    }

    pub fn trainable_params(&self) -> Vec<Param> {
        self.params().into_iter().filter(Param::trainable).collect()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Audio as `[1, frames, d_model]`.
    pub fn encode_audio(&self, audio: &AudioInput, frames: usize) -> Result<Tensor> {
        let enc = self.frontend.encode(audio, frames)?;
        enc.reshape(&[1, frames, self.cfg.decoder.d_model])
    }

    fn check_record(&self, r: &DatasetRecord) -> Result<()> {
        if r.motion.vertices() != self.cfg.decoder.vertex_count {
            return Err(Error::Contract(format!(
                "sequence {} has {} vertices; the model predicts {}",
                r.sentence_id,
                r.motion.vertices(),
                self.cfg.decoder.vertex_count
            )));
        }
        Ok(())
    }

    /// Teacher-forced predictions `[1, T, V·3]`.
    pub fn predict_teacher_forced(&self, r: &DatasetRecord) -> Result<Tensor> {
        self.check_record(r)?;
        let t = r.motion.frames();
        let gt = r.motion.to_tensor().reshape(&[1, t, self.cfg.decoder.motion_dim()])?;
        let audio = self.encode_audio(&r.audio, t)?;
        self.decoder.teacher_forced(&gt, &audio, &[r.subject_id])
    }

    /// Mean squared vertex error under teacher forcing.
    pub fn loss(&self, r: &DatasetRecord) -> Result<Tensor> {
        let pred = self.predict_teacher_forced(r)?;
        let gt = r.motion.to_tensor().reshape(pred.shape())?;
        Ok(pred.sub(&gt)?.square().mean_all())
    }

    /// Autoregressive generation of `frames` frames.
    pub fn generate(&self, audio: &AudioInput, subject: usize, frames: usize, fps: f32) -> Result<MotionSequence> {
        if frames == 0 {
            return Err(Error::Contract("generation needs at least one frame".into()));
        }
        let out = no_grad(|| -> Result<Tensor> {
            let enc = self.encode_audio(audio, frames)?;
            self.decoder.generate(&enc, &[subject], frames)
        })?;
        MotionSequence::from_tensor(&out, fps)
    }

    pub fn generate_for(&self, r: &DatasetRecord) -> Result<MotionSequence> {
        self.check_record(r)?;
        self.generate(&r.audio, r.subject_id, r.motion.frames(), r.motion.fps)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            seed: self.store.seed(),
            model: self.cfg.clone(),
        };
        Ok(Checkpoint {
            meta: serde_json::to_string(&meta)?,
            tensors: self.store.to_map(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let model = JambaTalk::new(&meta.model, meta.seed)?;
        model.store.load_map(&ck.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};

    fn toy() -> (JambaTalk, crate::data::Dataset) {
        let data = synth_dataset(
            &SynthConfig {
                n_sentences: 2,
                frames: 8,
                vertex_count: 12,
                feature_dim: 6,
                ..SynthConfig::default()
            },
            0,
        )
        .unwrap();
        let cfg = ModelConfig {
            decoder: DecoderConfig {
                d_model: 16,
                vertex_count: 12,
                ..DecoderConfig::default()
            },
            audio: AudioConfig {
                feature_dim: 6,
                ..AudioConfig::default()
            },
        };
        (JambaTalk::new(&cfg, 3).unwrap(), data)
    }

    #[test]
    fn zero_head_predicts_zero_motion() {
        let (m, data) = toy();
        let r = &data.records[0];
        let loss = m.loss(r).unwrap().item();
        let mean_sq = r.motion.data().iter().map(|v| v * v).sum::<f64>() / r.motion.data().len() as f64;
        assert!((loss - mean_sq).abs() < 1e-12);
        let g = m.generate_for(r).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, data) = toy();
        for p in m.decoder.head.params() {
            p.set_data((0..p.numel()).map(|i| (i as f64 * 0.37).sin() * 0.1).collect()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = JambaTalk::load(&path).unwrap();
        assert_eq!(back.cfg, m.cfg);
        let a = m.generate_for(&data.records[1]).unwrap();
        let b = back.generate_for(&data.records[1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vertex_mismatch_is_contract_error() {
        let (m, _) = toy();
        let other = synth_dataset(
            &SynthConfig {
                n_sentences: 1,
                frames: 4,
                vertex_count: 20,
                feature_dim: 6,
                ..SynthConfig::default()
            },
            0,
        )
        .unwrap();
        assert!(matches!(m.loss(&other.records[0]), Err(Error::Contract(_))));
    }
}
