//! Checkpoint container:
//!
//! ```text
//! b"GANDACKP" | u32 version | (u64 len, bytes) × 4
//! ```
//!
//! The four sections are the network-spec JSON, the tensor directory JSON (name,
//! shape, byte offset, element count, plus the SHA-256 of the blob), the
//! metadata JSON, and the raw little-endian `f32` weight blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{Buffer, Param};
use super::tensor::Real;
use super::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use crate::error::{GandaError, Result};
use crate::slide_io::SourceMode;
use crate::training::{LossRecord, TrainConfig};

const MAGIC: &[u8; 8] = b"GANDACKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    fn from_param<T: Real>(p: &Param<T>) -> Self {
        NamedTensor {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: p.value.iter().map(|v| v.f64() as f32).collect(),
        }
    }

    fn from_buffer<T: Real>(b: &Buffer<T>) -> Self {
        NamedTensor {
            name: b.name.clone(),
            shape: vec![b.value.len()],
            data: b.value.iter().map(|v| v.f64() as f32).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: u32,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub source_mode: Option<SourceMode>,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub is_final: bool,
    #[serde(default)]
    pub loss_history: Vec<LossRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub generator_spec: GeneratorSpec,
    pub discriminator_spec: DiscriminatorSpec,
    pub tensors: Vec<NamedTensor>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct SpecDoc {
    generator: GeneratorSpec,
    discriminator: DiscriminatorSpec,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Directory {
    blob_sha256: String,
    tensors: Vec<DirEntry>,
}

/// SHA-256 over the canonical JSON of both specs.
pub fn config_hash(generator: &GeneratorSpec, discriminator: &DiscriminatorSpec) -> String {
    let doc = SpecDoc {
        generator: generator.clone(),
        discriminator: discriminator.clone(),
    };
    let json = serde_json::to_vec(&doc).expect("spec serializes");
    hex::encode(Sha256::digest(&json))
}

impl Checkpoint {
    /// Snapshots both networks; `extra` tensors (e.g. optimizer moments) are
    /// appended after the model weights.
    pub fn capture<T: Real>(
        generator: &Generator<T>,
        discriminator: &Discriminator<T>,
        extra: Vec<NamedTensor>,
        mut meta: TrainingMeta,
    ) -> Self {
        let mut tensors: Vec<NamedTensor> = generator.params().into_iter().map(NamedTensor::from_param).collect();
        tensors.extend(generator.buffers().into_iter().map(NamedTensor::from_buffer));
        tensors.extend(discriminator.params().into_iter().map(NamedTensor::from_param));
        tensors.extend(discriminator.buffers().into_iter().map(NamedTensor::from_buffer));
        tensors.extend(extra);
        meta.config_hash = config_hash(generator.spec(), discriminator.spec());
        Checkpoint {
            generator_spec: generator.spec().clone(),
            discriminator_spec: discriminator.spec().clone(),
            tensors,
            meta,
        }
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.generator_spec, &self.discriminator_spec)
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn fill<T: Real>(&self, name: &str, dst: &mut [T]) -> Result<()> {
        let t = self
            .tensor(name)
            .ok_or_else(|| GandaError::InvalidSpec(format!("checkpoint lacks tensor {name}")))?;
        if t.data.len() != dst.len() {
            return Err(GandaError::InvalidSpec(format!(
                "tensor {name} has {} values, model expects {}",
                t.data.len(),
                dst.len()
            )));
        }
        dst.iter_mut().zip(&t.data).for_each(|(d, &v)| *d = T::of(v as f64));
        Ok(())
    }

    /// Loads generator weights; the model must have been built from the
    /// same spec.
    pub fn restore_generator<T: Real>(&self, generator: &mut Generator<T>) -> Result<()> {
        if generator.spec() != &self.generator_spec {
            return Err(GandaError::InvalidSpec("generator spec differs from checkpoint".into()));
        }
        for p in generator.params_mut() {
            self.fill(&p.name.clone(), &mut p.value)?;
        }
        for b in generator.buffers_mut() {
            self.fill(&b.name.clone(), &mut b.value)?;
        }
        Ok(())
    }

    pub fn restore_discriminator<T: Real>(&self, discriminator: &mut Discriminator<T>) -> Result<()> {
        if discriminator.spec() != &self.discriminator_spec {
            return Err(GandaError::InvalidSpec("discriminator spec differs from checkpoint".into()));
        }
        for p in discriminator.params_mut() {
            self.fill(&p.name.clone(), &mut p.value)?;
        }
        for b in discriminator.buffers_mut() {
            self.fill(&b.name.clone(), &mut b.value)?;
        }
        Ok(())
    }

    pub fn build_generator<T: Real>(&self) -> Result<Generator<T>> {
        let mut g = Generator::new(&self.generator_spec, 0)?;
        self.restore_generator(&mut g)?;
        Ok(g)
    }

    pub fn build_discriminator<T: Real>(&self) -> Result<Discriminator<T>> {
        let mut d = Discriminator::new(&self.discriminator_spec, 0)?;
        self.restore_discriminator(&mut d)?;
        Ok(d)
    }

    /// Little-endian `f32` concatenation of every tensor, in order.
    pub fn weight_blob(&self) -> Vec<u8> {
        let n: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut blob = Vec::with_capacity(n * 4);
        for t in &self.tensors {
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        blob
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let spec = serde_json::to_vec_pretty(&SpecDoc {
            generator: self.generator_spec.clone(),
            discriminator: self.discriminator_spec.clone(),
        })?;
        let blob = self.weight_blob();
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = DirEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                    len: t.data.len(),
                };
                offset += t.data.len() * 4;
                e
            })
            .collect();
        let directory = serde_json::to_vec_pretty(&Directory {
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            tensors,
        })?;
        let meta = serde_json::to_vec_pretty(&self.meta)?;
        let mut out = Vec::with_capacity(blob.len() + spec.len() + directory.len() + meta.len() + 48);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for section in [&spec, &directory, &meta, &blob] {
            out.extend_from_slice(&(section.len() as u64).to_le_bytes());
            out.extend_from_slice(section);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| GandaError::CorruptCheckpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let mut pos = 12;
        let mut sections = Vec::with_capacity(4);
        for _ in 0..4 {
            let len_bytes = bytes.get(pos..pos + 8).ok_or_else(|| corrupt("truncated"))?;
            let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
            pos += 8;
            let end = pos.checked_add(len).ok_or_else(|| corrupt("section length overflow"))?;
            sections.push(bytes.get(pos..end).ok_or_else(|| corrupt("truncated"))?);
            pos = end;
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        let spec: SpecDoc = serde_json::from_slice(sections[0]).map_err(|e| corrupt(&e.to_string()))?;
        let directory: Directory = serde_json::from_slice(sections[1]).map_err(|e| corrupt(&e.to_string()))?;
        let meta: TrainingMeta = serde_json::from_slice(sections[2]).map_err(|e| corrupt(&e.to_string()))?;
        let blob = sections[3];
        if hex::encode(Sha256::digest(blob)) != directory.blob_sha256 {
            return Err(corrupt("weight blob hash mismatch"));
        }
        let hash = config_hash(&spec.generator, &spec.discriminator);
        if hash != meta.config_hash {
            return Err(corrupt("config hash does not match specs"));
        }
        let tensors = directory
            .tensors
            .into_iter()
            .map(|e| {
                let raw = blob
                    .get(e.offset..e.offset + e.len * 4)
                    .ok_or_else(|| corrupt(&format!("tensor {} outside blob", e.name)))?;
                if e.shape.iter().product::<usize>() != e.len {
                    return Err(corrupt(&format!("tensor {} shape/len mismatch", e.name)));
                }
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Ok(NamedTensor {
                    name: e.name,
                    shape: e.shape,
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            generator_spec: spec.generator,
            discriminator_spec: spec.discriminator,
            tensors,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| GandaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(GandaError::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| GandaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Saves a checkpoint to `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

/// Loads and verifies a checkpoint from `path`.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
