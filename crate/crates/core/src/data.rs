//! Datasets: a procedural generator and a directory loader for
//! VOCASET-shaped data.
//!
//! Directory layout:
//!
//! ```text
//! manifest.tsv            sequence_id <TAB> subject <TAB> train|val|test
//! templates/<subject>.obj neutral mesh ("v x y z" lines)
//! meshes/<sequence>.motion absolute vertex positions (motion file format)
//! wav/<sequence>.wav      16 kHz mono audio, or
//! features/<sequence>.feat precomputed features (checkpoint format)
//! masks/lip.txt, masks/upper.txt (optional)
//! ```

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, AudioInput};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{format_indices, VertexMask};
use crate::motion::MotionSequence;
use crate::params::seeded_rng;
use crate::tensor::Tensor;

pub const VOCASET_VERTICES: usize = 5023;
pub const VOCASET_FPS: f32 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub sentence_id: String,
    pub subject_id: usize,
    pub audio: AudioInput,
    pub motion: MotionSequence,
    /// Neutral mesh, `V·3` values.
    pub template: Vec<f64>,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub subjects: Vec<String>,
    pub vertex_count: usize,
    pub fps: f32,
    pub mask: Option<VertexMask>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&DatasetRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes the dataset in the directory layout read by [`load_dir`].
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        for sub in ["templates", "meshes", "wav", "features", "masks"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let mut manifest = String::from("# sequence_id\tsubject\tsplit\n");
        let mut written = vec![false; self.subjects.len()];
        for r in &self.records {
            let subject = &self.subjects[r.subject_id];
            manifest.push_str(&format!("{}\t{subject}\t{}\n", r.sentence_id, r.split));
            if !written[r.subject_id] {
                written[r.subject_id] = true;
                std::fs::write(dir.join("templates").join(format!("{subject}.obj")), obj_vertices(&r.template))?;
            }
            let absolute: Vec<f64> = r
                .motion
                .data()
                .chunks(r.template.len())
                .flat_map(|f| f.iter().zip(&r.template).map(|(o, t)| o + t))
                .collect();
            MotionSequence::new(absolute, r.motion.frames(), r.motion.vertices(), r.motion.fps)?
                .save(&dir.join("meshes").join(format!("{}.motion", r.sentence_id)))?;
            match &r.audio {
                AudioInput::Waveform(w) => {
                    crate::audio::save_wav(&dir.join("wav").join(format!("{}.wav", r.sentence_id)), w)?
                }
                AudioInput::Features(f) => save_features(&dir.join("features").join(format!("{}.feat", r.sentence_id)), f)?,
            }
        }
        std::fs::write(dir.join("manifest.tsv"), manifest)?;
        if let Some(m) = &self.mask {
            std::fs::write(dir.join("masks/lip.txt"), format_indices(&m.lip))?;
            std::fs::write(dir.join("masks/upper.txt"), format_indices(&m.upper))?;
        }
        Ok(())
    }
}

fn obj_vertices(v: &[f64]) -> String {
    v.chunks(3).map(|p| format!("v {} {} {}\n", p[0], p[1], p[2])).collect()
}

/// Vertex positions from `v x y z` lines of an `.obj` file.
pub fn parse_obj_vertices(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("v") {
            continue;
        }
        let coords: Vec<f64> = parts
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("line {}: bad vertex {line:?}", n + 1)))?;
        if coords.len() != 3 {
            return Err(Error::Format(format!("line {}: vertex needs 3 coordinates", n + 1)));
        }
        out.extend(coords);
    }
    Ok(out)
}

pub fn save_features(path: &Path, feats: &Tensor) -> Result<()> {
    let mut tensors = BTreeMap::new();
    tensors.insert("features".to_string(), (feats.shape().to_vec(), feats.to_vec()));
    Checkpoint {
        meta: "speech-features".into(),
        tensors,
    }
    .save(path)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let ck = Checkpoint::load(path)?;
    let (shape, data) = ck
        .tensors
        .get("features")
        .ok_or_else(|| Error::Load(format!("{}: no features tensor", path.display())))?;
    if shape.len() != 2 {
        return Err(Error::Load(format!("{}: features must be 2-D, got {shape:?}", path.display())));
    }
    Tensor::new(data.clone(), shape)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_sentences: usize,
    pub frames: usize,
    pub vertex_count: usize,
    pub fps: f32,
    pub feature_dim: usize,
    pub feature_rate: f64,
    /// Latent tracks driving both audio features and motion.
    pub n_tracks: usize,
    /// Peak displacement scale in mm.
    pub amplitude: f64,
    /// Trailing sentences per subject held out as validation and test.
    pub val_sentences: usize,
    pub test_sentences: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 2,
            n_sentences: 8,
            frames: 60,
            vertex_count: 240,
            fps: 30.0,
            feature_dim: 64,
            feature_rate: 50.0,
            n_tracks: 4,
            amplitude: 1.0,
            val_sentences: 0,
            test_sentences: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_subjects,
            self.n_sentences,
            self.frames,
            self.vertex_count,
            self.feature_dim,
            self.n_tracks,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("synthetic dataset counts must all be at least 1".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("synthetic sequences need at least 2 frames".into()));
        }
        if self.val_sentences + self.test_sentences >= self.n_sentences {
            return Err(Error::Config(format!(
                "{} val + {} test sentences leave no training sentences out of {}",
                self.val_sentences, self.test_sentences, self.n_sentences
            )));
        }
        if !(self.fps > 0.0 && self.feature_rate > 0.0) {
            return Err(Error::Config("fps and feature_rate must be positive".into()));
        }
        Ok(())
    }

    /// Audio feature frames for one sequence.
    pub fn feature_frames(&self) -> usize {
        ((self.frames as f64 * self.feature_rate / self.fps as f64).round() as usize).max(2)
    }
}

/// Grid coordinates in `[-1, 1]²` for vertex `i`.
fn grid_xy(i: usize, v: usize) -> (f64, f64) {
    let cols = (v as f64).sqrt().ceil() as usize;
    let rows = v.div_ceil(cols);
    let norm = |k: usize, n: usize| if n <= 1 { 0.0 } else { 2.0 * k as f64 / (n - 1) as f64 - 1.0 };
    (norm(i % cols, cols), norm(i / cols, rows))
}

/// Neutral face-like grid in mm.
pub fn synthetic_template(v: usize) -> Vec<f64> {
    (0..v)
        .flat_map(|i| {
            let (x, y) = grid_xy(i, v);
            [80.0 * x, 100.0 * y, 30.0 * (1.0 - x * x) * (1.0 - 0.5 * y * y)]
        })
        .collect()
}

/// Lip band (lower centre) and upper-face band (top rows) of the grid.
pub fn synthetic_mask(v: usize) -> Result<VertexMask> {
    let mut lip = Vec::new();
    let mut upper = Vec::new();
    for i in 0..v {
        let (x, y) = grid_xy(i, v);
        if y < -0.3 && x.abs() < 0.6 {
            lip.push(i);
        } else if y > 0.3 {
            upper.push(i);
        }
    }
    VertexMask::new(lip, upper, v)
}

/// Spatial displacement fields `[n_tracks][V·3]`.
fn basis_fields(v: usize, n_tracks: usize) -> Vec<Vec<f64>> {
    (0..n_tracks)
        .map(|k| {
            (0..v)
                .flat_map(|i| {
                    let (x, y) = grid_xy(i, v);
                    let lip = (-((x / 0.5).powi(2) + ((y + 0.6) / 0.4).powi(2))).exp();
                    let brow = (-((y - 0.7) / 0.35).powi(2)).exp();
                    let jaw = (-y).max(0.0);
                    match k % 4 {
                        0 => [0.0, -lip, 0.3 * lip],
                        1 => [x * lip, 0.0, 0.0],
                        2 => [0.0, 0.6 * brow, 0.2 * brow],
                        _ => [0.0, -0.3 * jaw, 0.5 * jaw],
                    }
                })
                .collect()
        })
        .collect()
}

/// Smooth sum of sinusoids for one latent track, normalized to peak ~1.
struct Track {
    parts: Vec<(f64, f64, f64)>,
}

impl Track {
    fn random(rng: &mut impl Rng, slow: bool) -> Self {
        let (lo, hi) = if slow { (0.2, 0.8) } else { (0.5, 3.0) };
        let parts: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (rng.gen_range(0.3..1.0), rng.gen_range(lo..hi), rng.gen_range(0.0..2.0 * PI)))
            .collect();
        let total: f64 = parts.iter().map(|p| p.0).sum();
        Track {
            parts: parts.into_iter().map(|(a, f, p)| (a / total, f, p)).collect(),
        }
    }

    fn at(&self, seconds: f64) -> f64 {
        self.parts.iter().map(|(a, f, p)| a * (2.0 * PI * f * seconds + p).sin()).sum()
    }
}

/// Deterministic procedural dataset. Motion is a subject-specific linear
/// function of latent tracks that the audio features encode linearly, so the
/// mapping from audio to motion is learnable.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let v = cfg.vertex_count;
    let k = cfg.n_tracks;
    let template = synthetic_template(v);
    let fields = basis_fields(v, k);

    let mut mix_rng = seeded_rng(seed, "synth.feature_mix");
    let mix: Vec<f64> = (0..cfg.feature_dim * k)
        .map(|_| mix_rng.gen_range(-1.0..1.0) * (3.0 / k as f64).sqrt())
        .collect();
    let styles: Vec<Vec<f64>> = (0..cfg.n_subjects)
        .map(|s| {
            let mut rng = seeded_rng(seed, &format!("synth.style{s}"));
            (0..k * k)
                .map(|ij| {
                    let diag = if ij / k == ij % k { rng.gen_range(0.7..1.3) } else { 0.0 };
                    diag + 0.25 * rng.gen_range(-1.0..1.0)
                })
                .collect()
        })
        .collect();

    let duration = (cfg.frames - 1) as f64 / cfg.fps as f64;
    let tf = cfg.feature_frames();
    let mut records = Vec::with_capacity(cfg.n_subjects * cfg.n_sentences);
    for sent in 0..cfg.n_sentences {
        let mut rng = seeded_rng(seed, &format!("synth.sentence{sent}"));
        let tracks: Vec<Track> = (0..k).map(|j| Track::random(&mut rng, j % 4 == 2)).collect();
        let feats: Vec<f64> = (0..tf)
            .flat_map(|i| {
                let sec = i as f64 * duration / (tf - 1) as f64;
                let f: Vec<f64> = tracks.iter().map(|t| t.at(sec)).collect();
                let mix = &mix;
                (0..cfg.feature_dim).map(move |d| (0..k).map(|j| mix[d * k + j] * f[j]).sum::<f64>())
            })
            .collect();
        let feats = Tensor::new(feats, &[tf, cfg.feature_dim])?;
        let split = if sent + cfg.test_sentences >= cfg.n_sentences {
            Split::Test
        } else if sent + cfg.test_sentences + cfg.val_sentences >= cfg.n_sentences {
            Split::Val
        } else {
            Split::Train
        };
        for (s, style) in styles.iter().enumerate() {
            let mut motion = vec![0.0; cfg.frames * v * 3];
            for t in 0..cfg.frames {
                let sec = t as f64 / cfg.fps as f64;
                let f: Vec<f64> = tracks.iter().map(|tr| tr.at(sec)).collect();
                let out = &mut motion[t * v * 3..(t + 1) * v * 3];
                for (b, field) in fields.iter().enumerate() {
                    let w: f64 = (0..k).map(|j| f[j] * style[j * k + b]).sum::<f64>() * cfg.amplitude;
                    for (o, &fv) in out.iter_mut().zip(field) {
                        *o += w * fv;
                    }
                }
            }
            records.push(DatasetRecord {
                sentence_id: format!("S{s}_sent{sent:02}"),
                subject_id: s,
                audio: AudioInput::Features(feats.clone()),
                motion: MotionSequence::new(motion, cfg.frames, v, cfg.fps)?,
                template: template.clone(),
                split,
            });
        }
    }
    Ok(Dataset {
        records,
        subjects: (0..cfg.n_subjects).map(|s| format!("S{s}")).collect(),
        vertex_count: v,
        fps: cfg.fps,
        mask: Some(synthetic_mask(v)?),
    })
}

fn load_err(path: &Path, msg: impl fmt::Display) -> Error {
    Error::Load(format!("{}: {msg}", path.display()))
}

/// Loads the directory layout; with `expected_vertices` every template and
/// mesh sequence must have exactly that many vertices.
pub fn load_dir(dir: &Path, expected_vertices: Option<usize>) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.tsv");
    let manifest = std::fs::read_to_string(&manifest_path).map_err(|e| load_err(&manifest_path, e))?;
    let mut subjects: Vec<String> = Vec::new();
    let mut templates: Vec<Vec<f64>> = Vec::new();
    let mut records = Vec::new();
    let mut vertex_count = expected_vertices.unwrap_or(0);
    let mut fps = VOCASET_FPS;

    for (n, line) in manifest.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let cols: Vec<&str> = body.split_whitespace().collect();
        if cols.len() != 3 {
            return Err(load_err(&manifest_path, format!("line {}: expected 3 columns", n + 1)));
        }
        let (seq, subject, split) = (cols[0], cols[1], cols[2].parse::<Split>()?);

        let subject_id = match subjects.iter().position(|s| s == subject) {
            Some(i) => i,
            None => {
                let tpath = dir.join("templates").join(format!("{subject}.obj"));
                let text = std::fs::read_to_string(&tpath)
                    .map_err(|_| load_err(&tpath, format!("missing template for subject {subject}")))?;
                let tmpl = parse_obj_vertices(&text).map_err(|e| load_err(&tpath, e))?;
                let tv = tmpl.len() / 3;
                if vertex_count == 0 {
                    vertex_count = tv;
                }
                if tv != vertex_count {
                    return Err(load_err(&tpath, format!("template has {tv} vertices, expected {vertex_count}")));
                }
                subjects.push(subject.to_string());
                templates.push(tmpl);
                subjects.len() - 1
            }
        };

        let mpath = dir.join("meshes").join(format!("{seq}.motion"));
        let mesh = MotionSequence::load(&mpath).map_err(|e| load_err(&mpath, e))?;
        if mesh.vertices() != vertex_count {
            return Err(load_err(
                &mpath,
                format!("{} vertices per frame, expected {vertex_count}", mesh.vertices()),
            ));
        }
        fps = mesh.fps;
        let template = &templates[subject_id];
        let offsets: Vec<f64> = mesh
            .data()
            .chunks(template.len())
            .flat_map(|f| f.iter().zip(template).map(|(p, t)| p - t))
            .collect();
        let motion = MotionSequence::new(offsets, mesh.frames(), mesh.vertices(), mesh.fps)?;

        let wav = dir.join("wav").join(format!("{seq}.wav"));
        let feat = dir.join("features").join(format!("{seq}.feat"));
        let audio = if wav.exists() {
            AudioInput::Waveform(load_wav(&wav)?)
        } else if feat.exists() {
            AudioInput::Features(load_features(&feat)?)
        } else {
            return Err(load_err(dir, format!("no audio (wav/{seq}.wav or features/{seq}.feat)")));
        };
        records.push(DatasetRecord {
            sentence_id: seq.to_string(),
            subject_id,
            audio,
            motion,
            template: template.clone(),
            split,
        });
    }

    let (lip, upper) = (dir.join("masks/lip.txt"), dir.join("masks/upper.txt"));
    let mask = if lip.exists() && upper.exists() && vertex_count > 0 {
        Some(VertexMask::load(&lip, &upper, vertex_count)?)
    } else {
        None
    };
    Ok(Dataset {
        records,
        subjects,
        vertex_count,
        fps,
        mask,
    })
}

/// VOCASET-shaped directory: 5023 vertices per mesh.
pub fn load_vocaset_layout(dir: &Path) -> Result<Dataset> {
    load_dir(dir, Some(VOCASET_VERTICES))
}
