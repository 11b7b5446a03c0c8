//! Model bundle container.
//!
//! Layout (little endian): magic `BAEBNDL\0`, `u32` version, `u64` header
//! length, UTF-8 JSON header, `u32` block count, then per block a `u32`
//! name length, the name, a `u32` rank, `rank` `u64` dimensions and the
//! row-major `f64` payload.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::diffcore::{ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::models::{ArchConfig, Autoencoder, Classifier, ClassifierSpec, Decoder, Discriminator, Encoder};
use crate::objectives::PriorSpec;
use crate::preprocess::{NormStats, SlopeThresholds};
use crate::reconstruct::{ReconNet, ReconNetSpec};
use crate::trainer::{TrainedClassifier, TrainedModel, TrainingLog};
use crate::Prng;

pub const BUNDLE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"BAEBNDL\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSpec {
    Autoencoder(ArchConfig),
    Classifier(ClassifierSpec),
    Recon(ReconNetSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub version: u32,
    pub model: ModelSpec,
    pub norm: Option<NormStats>,
    pub thresholds: Option<SlopeThresholds>,
    pub prior: Option<PriorSpec>,
    pub seed: u64,
    /// Path of the training log written next to the bundle, if any.
    pub training_log: Option<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub header: BundleHeader,
    /// `(network/parameter name, value)` pairs.
    pub blocks: Vec<(String, Tensor)>,
}

fn push_set(blocks: &mut Vec<(String, Tensor)>, net: &str, set: &ParameterSet) {
    blocks.extend(set.iter().map(|p| (format!("{net}/{}", p.name), p.value.clone())));
}

fn fill_set(blocks: &[(String, Tensor)], net: &str, set: &mut ParameterSet) -> Result<()> {
    let map: BTreeMap<&str, &Tensor> = blocks.iter().map(|(k, v)| (k.as_str(), v)).collect();
    for p in set.iter_mut() {
        let key = format!("{net}/{}", p.name);
        let t = map.get(key.as_str()).ok_or_else(|| Error::Corrupt(format!("missing parameter block {key}")))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Corrupt(format!(
                "block {key} has shape {:?}, expected {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = (*t).clone();
    }
    Ok(())
}

impl ModelBundle {
    fn header(model: ModelSpec, seed: u64) -> BundleHeader {
        BundleHeader {
            version: BUNDLE_VERSION,
            model,
            norm: None,
            thresholds: None,
            prior: None,
            seed,
            training_log: None,
            notes: BTreeMap::new(),
        }
    }

    pub fn from_trained(t: &TrainedModel) -> Self {
        let mut blocks = Vec::new();
        push_set(&mut blocks, "encoder", &t.model.encoder.params);
        push_set(&mut blocks, "decoder", &t.model.decoder.params);
        if let Some(d) = &t.model.discriminator {
            push_set(&mut blocks, "discriminator", &d.params);
        }
        let mut header = Self::header(ModelSpec::Autoencoder(t.model.arch.clone()), t.seed);
        header.norm = Some(t.norm);
        header.prior = Some(t.prior.clone());
        Self { header, blocks }
    }

    pub fn from_classifier(t: &TrainedClassifier) -> Self {
        let mut blocks = Vec::new();
        push_set(&mut blocks, "classifier", &t.classifier.params);
        let mut header = Self::header(ModelSpec::Classifier(t.classifier.spec.clone()), t.seed);
        header.norm = Some(t.norm);
        Self { header, blocks }
    }

    pub fn from_recon(net: &ReconNet, seed: u64) -> Self {
        let mut blocks = Vec::new();
        push_set(&mut blocks, "recon", &net.params);
        Self { header: Self::header(ModelSpec::Recon(net.spec.clone()), seed), blocks }
    }

    fn require_norm(&self) -> Result<NormStats> {
        self.header.norm.ok_or_else(|| Error::Corrupt("bundle lacks normalization statistics".into()))
    }

    /// Rebuilds the autoencoder; parameter values come from the bundle, so
    /// inference is bit-identical to the saved model.
    pub fn to_trained(&self) -> Result<TrainedModel> {
        let ModelSpec::Autoencoder(arch) = &self.header.model else {
            return Err(Error::Config("bundle does not hold an autoencoder".into()));
        };
        let mut rng = <Prng as rand::SeedableRng>::seed_from_u64(0);
        let mut encoder = Encoder::build(arch, &mut rng)?;
        let mut decoder = Decoder::build(arch, &mut rng)?;
        fill_set(&self.blocks, "encoder", &mut encoder.params)?;
        fill_set(&self.blocks, "decoder", &mut decoder.params)?;
        let discriminator = if arch.variant.uses_noise() {
            let mut d = Discriminator::for_arch(arch, &mut rng)?;
            fill_set(&self.blocks, "discriminator", &mut d.params)?;
            Some(d)
        } else {
            None
        };
        let prior = self
            .header
            .prior
            .clone()
            .ok_or_else(|| Error::Corrupt("bundle lacks a prior".into()))?;
        Ok(TrainedModel {
            model: Autoencoder { arch: arch.clone(), encoder, decoder, discriminator },
            norm: self.require_norm()?,
            prior,
            log: TrainingLog::default(),
            seed: self.header.seed,
        })
    }

    pub fn to_classifier(&self) -> Result<TrainedClassifier> {
        let ModelSpec::Classifier(spec) = &self.header.model else {
            return Err(Error::Config("bundle does not hold a classifier".into()));
        };
        let mut rng = <Prng as rand::SeedableRng>::seed_from_u64(0);
        let mut classifier = Classifier::build(spec, &mut rng)?;
        fill_set(&self.blocks, "classifier", &mut classifier.params)?;
        Ok(TrainedClassifier { classifier, norm: self.require_norm()?, log: TrainingLog::default(), seed: self.header.seed })
    }

    pub fn to_recon(&self) -> Result<ReconNet> {
        let ModelSpec::Recon(spec) = &self.header.model else {
            return Err(Error::Config("bundle does not hold a reconstruction network".into()));
        };
        let mut rng = <Prng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = ReconNet::build(spec, &mut rng)?;
        fill_set(&self.blocks, "recon", &mut net.params)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut b = vec![0u8; n];
            r.read_exact(&mut b).map_err(|_| Error::Corrupt("bundle truncated".into()))?;
            Ok(b)
        };
        if take(8)? != MAGIC {
            return Err(Error::Format("not a model bundle".into()));
        }
        let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let u64_at = |b: Vec<u8>| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let version = u32_at(take(4)?);
        if version != BUNDLE_VERSION {
            return Err(Error::Version { found: version, expected: BUNDLE_VERSION });
        }
        let hlen = u64_at(take(8)?) as usize;
        if hlen > bytes.len() {
            return Err(Error::Corrupt("header length exceeds file".into()));
        }
        let header: BundleHeader =
            serde_json::from_slice(&take(hlen)?).map_err(|e| Error::Corrupt(format!("bundle header: {e}")))?;
        if header.version != version {
            return Err(Error::Corrupt("header and container versions differ".into()));
        }
        let count = u32_at(take(4)?) as usize;
        let mut blocks = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = u32_at(take(4)?) as usize;
            if nlen > bytes.len() {
                return Err(Error::Corrupt("block name length exceeds file".into()));
            }
            let name = String::from_utf8(take(nlen)?).map_err(|_| Error::Corrupt("block name is not utf-8".into()))?;
            let rank = u32_at(take(4)?) as usize;
            if rank > 8 {
                return Err(Error::Corrupt(format!("block {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| Ok(u64_at(take(8)?) as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            if len.saturating_mul(8) > bytes.len() {
                return Err(Error::Corrupt(format!("block {name} larger than file")));
            }
            let raw = take(8 * len)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            blocks.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes after the last block", r.len())));
        }
        Ok(Self { header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
