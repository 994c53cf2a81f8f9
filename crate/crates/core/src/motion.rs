//! Vertex-offset sequences and their binary / `.obj` serialization.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"JTMOTION";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4;

/// `T × V × 3` vertex offsets (mm) sampled at `fps`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: usize,
    vertices: usize,
    pub fps: f32,
    data: Vec<f64>,
}

impl MotionSequence {
    pub fn new(data: Vec<f64>, frames: usize, vertices: usize, fps: f32) -> Result<Self> {
        if frames == 0 || vertices == 0 {
            return Err(Error::Contract("motion needs at least one frame and one vertex".into()));
        }
        if data.len() != frames * vertices * 3 {
            return Err(Error::Contract(format!(
                "{} values for {frames} frames of {vertices} vertices",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite motion value at frame {}, vertex {}",
                i / (vertices * 3),
                i / 3 % vertices
            )));
        }
        Ok(MotionSequence {
            frames,
            vertices,
            fps,
            data,
        })
    }

    pub fn zeros(frames: usize, vertices: usize, fps: f32) -> Result<Self> {
        Self::new(vec![0.0; frames * vertices * 3], frames, vertices, fps)
    }

    /// From a `[T, V·3]` or `[1, T, V·3]` tensor.
    pub fn from_tensor(t: &Tensor, fps: f32) -> Result<Self> {
        let (frames, width) = match t.shape() {
            [f, w] | [1, f, w] => (*f, *w),
            s => return Err(Error::shape("motion_from_tensor", s, &[0, 0])),
        };
        if width % 3 != 0 {
            return Err(Error::shape("motion_from_tensor", t.shape(), &[frames, width / 3 * 3]));
        }
        Self::new(t.to_vec(), frames, width / 3, fps)
    }

    /// `[T, V·3]` tensor without gradient tracking.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &[self.frames, self.vertices * 3]).expect("valid by construction")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.vertices * 3;
        &self.data[t * w..(t + 1) * w]
    }

    pub fn vertex(&self, t: usize, v: usize) -> [f64; 3] {
        let i = (t * self.vertices + v) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Per-frame positions of one vertex.
    pub fn track(&self, v: usize) -> Vec<[f64; 3]> {
        (0..self.frames).map(|t| self.vertex(t, v)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.vertices as u32).to_le_bytes());
        out.extend_from_slice(&self.fps.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a motion file (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        if word(0) != VERSION {
            return Err(Error::Format(format!("unsupported motion version {}", word(0))));
        }
        let (frames, vertices) = (word(1) as usize, word(2) as usize);
        let fps = f32::from_bits(word(3));
        let body = &bytes[HEADER_LEN..];
        let expected = frames * vertices * 3 * 4;
        if body.len() != expected {
            return Err(Error::Format(format!(
                "motion body has {} bytes; header promises {expected}",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(data, frames, vertices, fps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// One `.obj` per frame, `{prefix}_{t:05}.obj`, with `template + offset`
    /// vertex positions and optional triangle faces (0-based indices).
    pub fn write_obj_frames(
        &self,
        dir: &Path,
        prefix: &str,
        template: Option<&[f64]>,
        faces: &[[usize; 3]],
    ) -> Result<Vec<std::path::PathBuf>> {
        if let Some(t) = template {
            if t.len() != self.vertices * 3 {
                return Err(Error::Contract(format!(
                    "template has {} values for {} vertices",
                    t.len(),
                    self.vertices
                )));
            }
        }
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let mut s = String::new();
            for (v, off) in self.frame(t).chunks(3).enumerate() {
                let base = template.map_or([0.0; 3], |tp| [tp[3 * v], tp[3 * v + 1], tp[3 * v + 2]]);
                writeln!(s, "v {} {} {}", base[0] + off[0], base[1] + off[1], base[2] + off[2]).unwrap();
            }
            for f in faces {
                writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
            }
            let p = dir.join(format!("{prefix}_{t:05}.obj"));
            std::fs::write(&p, s)?;
            paths.push(p);
        }
        Ok(paths)
    }
}
