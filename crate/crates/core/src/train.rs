//! Seeded, resumable training with Adam and a binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LossValues, ModelConfig, UniBevFusion};
use crate::nn::{Adam, Graph, Tensor};
use crate::seed::rng_for;
use crate::synth::Frame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    /// Frames per optimizer step; gradients are averaged.
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    /// Drives the per-epoch frame order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 1, lr: 1e-3, clip_norm: Some(10.0), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }

    /// Digest of everything except the step budget, so a run can be extended.
    pub fn resume_hash(&self) -> String {
        let key = serde_json::json!({ "batch_size": self.batch_size, "lr": self.lr, "clip_norm": self.clip_norm, "seed": self.seed });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    /// 1-based optimizer step.
    pub step: u64,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
    pub depth: f64,
}

#[derive(Debug)]
pub struct Trainer {
    pub model: UniBevFusion,
    pub config: TrainConfig,
    /// Free-form provenance written into checkpoints, such as an experiment hash.
    pub label: Option<String>,
    adam: Adam,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(model: UniBevFusion, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut adam = Adam::new(&model.store, config.lr);
        adam.clip_norm = config.clip_norm;
        Ok(Self { model, config, label: None, adam, order: None })
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Frame index of sample `k` of step `step` (0-based). Every epoch is a
    /// fresh permutation seeded by `(seed, epoch)`.
    fn sample_index(&mut self, step: u64, k: usize, n: usize) -> usize {
        let pos = step * self.config.batch_size as u64 + k as u64;
        let epoch = pos / n as u64;
        if !matches!(&self.order, Some((e, p)) if *e == epoch && p.len() == n) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng_for(self.config.seed, &[epoch]));
            self.order = Some((epoch, perm));
        }
        self.order.as_ref().expect("order set").1[(pos % n as u64) as usize]
    }

    /// One optimizer step over the next batch of `frames`.
    pub fn train_step(&mut self, frames: &[Frame]) -> Result<StepLoss> {
        if frames.is_empty() {
            return Err(Error::InvalidInput("no training frames".into()));
        }
        let step = self.adam.step;
        let idx: Vec<usize> = (0..self.config.batch_size).map(|k| self.sample_index(step, k, frames.len())).collect();
        let model = &self.model;
        let results: Vec<(Vec<Option<Tensor>>, LossValues)> = idx
            .par_iter()
            .map(|&i| {
                let mut g = Graph::new(&model.store);
                let (total, values) = model.loss(&mut g, &frames[i])?;
                let grads = g.backward(total);
                let mut flat: Vec<Option<Tensor>> = vec![None; model.store.len()];
                for (id, t) in grads.params() {
                    flat[id.index()] = Some(t.clone());
                }
                Ok((flat, values))
            })
            .collect::<Result<_>>()?;

        // Fixed-order reduction keeps the result independent of thread count.
        let b = results.len() as f64;
        let mut sum: Vec<Option<Tensor>> = vec![None; model.store.len()];
        let mut loss = LossValues::default();
        for (grads, v) in results {
            for (acc, g) in sum.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
            loss.total += v.total / b;
            loss.cls += v.cls / b;
            loss.reg += v.reg / b;
            loss.dir += v.dir / b;
            loss.depth += v.depth / b;
        }
        if !loss.total.is_finite() {
            return Err(Error::Contract(format!("non-finite loss at step {}", step + 1)));
        }
        for t in sum.iter_mut().flatten() {
            t.scale_in_place(1.0 / b);
        }
        self.adam.update(&mut self.model.store, &sum);
        Ok(StepLoss { step: self.adam.step, total: loss.total, cls: loss.cls, reg: loss.reg, dir: loss.dir, depth: loss.depth })
    }

    /// Train until `config.steps` optimizer steps have been taken.
    pub fn train(&mut self, frames: &[Frame], mut on_step: impl FnMut(&StepLoss)) -> Result<Vec<StepLoss>> {
        let mut out = Vec::new();
        while self.adam.step < self.config.steps {
            let s = self.train_step(frames)?;
            on_step(&s);
            out.push(s);
        }
        Ok(out)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path.as_ref(), &self.model, Some((&self.config, &self.adam)), self.label.clone())
    }

    /// Restore a training run. Refuses if the model or training configuration
    /// differs from the one the checkpoint was written with, apart from `steps`.
    pub fn resume(path: impl AsRef<Path>, model_config: &ModelConfig, config: TrainConfig) -> Result<Self> {
        let ck = Checkpoint::read(path.as_ref())?;
        ck.check_model(model_config)?;
        let saved = ck.header.train.as_ref().ok_or_else(|| Error::Incompatible("checkpoint holds no optimizer state".into()))?;
        if saved.resume_hash() != config.resume_hash() {
            return Err(Error::Incompatible(format!(
                "training config differs from the checkpoint's (saved {saved:?}, requested {config:?}); only `steps` may change on resume"
            )));
        }
        let mut model = UniBevFusion::new(model_config.clone())?;
        let (params, m, v) = ck.split(&model)?;
        model.store.load_values(params).map_err(Error::Incompatible)?;
        let mut trainer = Self::new(model, config)?;
        trainer.label = ck.header.label.clone();
        trainer.adam.set_moments(m, v).map_err(Error::Incompatible)?;
        trainer.adam.step = ck.header.step;
        Ok(trainer)
    }
}

const MAGIC: &[u8; 4] = b"UBCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub config_hash: String,
    pub train: Option<TrainConfig>,
    pub step: u64,
    /// `(name, shape)` in blob order.
    pub params: Vec<(String, Vec<usize>)>,
    /// Whether Adam moments follow the parameters.
    pub has_moments: bool,
    #[serde(default)]
    pub label: Option<String>,
}

/// Parsed checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    values: Vec<f64>,
}

/// Layout: `UBCK`, u32 version, u64 header length, JSON header, then the
/// parameters as little-endian f64 in header order, followed by Adam's first
/// and second moments when present.
fn save_checkpoint(path: &Path, model: &UniBevFusion, train: Option<(&TrainConfig, &Adam)>, label: Option<String>) -> Result<()> {
    let params: Vec<(String, Vec<usize>)> = model.store.named_values().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        config_hash: model.config.hash(),
        train: train.map(|(c, _)| c.clone()),
        step: train.map_or(0, |(_, a)| a.step),
        params,
        has_moments: train.is_some(),
        label,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * 3 * model.store.num_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in model.store.named_values() {
        t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    }
    if let Some((_, adam)) = train {
        let (m, v) = adam.moments();
        for vec in m.iter().chain(v) {
            vec.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Write model weights only.
pub fn save_weights(path: impl AsRef<Path>, model: &UniBevFusion) -> Result<()> {
    save_checkpoint(path.as_ref(), model, None, None)
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        let bad = |d: &str| Error::InvalidInput(format!("{}: {d}", path.display()));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!("checkpoint format version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).filter(|b| b.len() >= hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        let blob = &body[hlen..];
        let n: usize = header.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let want = if header.has_moments { 3 * n } else { n };
        if blob.len() != 8 * want {
            return Err(bad(&format!("expected {want} values, found {} bytes", blob.len())));
        }
        let values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { header, values })
    }

    /// Refuse unless the checkpoint was written for exactly `config`.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        let want = config.hash();
        if self.header.config_hash != want || self.header.model.hash() != want {
            return Err(Error::Incompatible(format!(
                "checkpoint config hash {} does not match the requested config {want}",
                self.header.config_hash
            )));
        }
        Ok(())
    }

    /// Named parameter tensors plus Adam moments (zero when absent).
    #[allow(clippy::type_complexity)]
    fn split(&self, model: &UniBevFusion) -> Result<(Vec<(String, Tensor)>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let n: usize = self.header.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let mut off = 0;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, shape) in &self.header.params {
            let len: usize = shape.iter().product();
            params.push((name.clone(), Tensor::from_vec(shape, self.values[off..off + len].to_vec())));
            if self.header.has_moments {
                m.push(self.values[n + off..n + off + len].to_vec());
                v.push(self.values[2 * n + off..2 * n + off + len].to_vec());
            } else {
                m.push(vec![0.0; len]);
                v.push(vec![0.0; len]);
            }
            off += len;
        }
        if params.len() != model.store.len() {
            return Err(Error::Incompatible(format!("checkpoint has {} parameters, model has {}", params.len(), model.store.len())));
        }
        Ok((params, m, v))
    }

    /// Build the model stored in this checkpoint after checking it against `config`.
    pub fn into_model(self, config: &ModelConfig) -> Result<UniBevFusion> {
        self.check_model(config)?;
        let mut model = UniBevFusion::new(config.clone())?;
        let (params, _, _) = self.split(&model)?;
        model.store.load_values(params).map_err(Error::Incompatible)?;
        Ok(model)
    }
}

/// Load model weights for inference from any checkpoint written for `config`.
pub fn load_model(path: impl AsRef<Path>, config: &ModelConfig) -> Result<UniBevFusion> {
    Checkpoint::read(path.as_ref())?.into_model(config)
}
