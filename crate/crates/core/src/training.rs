//! The optimization loop: Adam with step-decayed learning rate, per-epoch
//! patch resampling, checkpointing with bitwise resume, and PSNR/SSIM
//! evaluation.
//!
//! Training runs in single precision; checkpoints store the f32 parameters
//! verbatim, which is what makes save, load, and resume reproduce the
//! interrupted run bit for bit. Every random decision inside an epoch is
//! derived from `(seed, epoch, item)` rather than drawn from a long-lived
//! stream, so a resumed epoch sees exactly the patches and shuffle order the
//! uninterrupted run would have seen.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};

use crate::data::{extract_patches, RainPair};
use crate::error::{Error, Result};
use crate::losses::{
    hybrid_loss_var, psnr_value, ssim_value, FeatureExtractor, LossConfig, SsimParams,
};
use crate::network::{DerainNet, NetworkConfig};
use crate::nn::{Graph, Mode, ParamId, ParamStore};
use crate::util::{atomic_write, DeterministicRng, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub patches_per_image: usize,
    pub patch_size: usize,
    pub eval_every_epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.001,
            decay_factor: 0.2,
            decay_every_epochs: 30,
            batch_size: 14,
            epochs: 100,
            patches_per_image: 15,
            patch_size: 100,
            eval_every_epochs: 10,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must sit in (0, 1], got {}",
                self.decay_factor
            )));
        }
        for (name, v) in [
            ("decay_every_epochs", self.decay_every_epochs),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("patches_per_image", self.patches_per_image),
            ("patch_size", self.patch_size),
            ("eval_every_epochs", self.eval_every_epochs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.loss.validate()
    }
}

/// Step-decay schedule: the initial rate multiplied by the decay factor once
/// per completed `decay_every_epochs` block. Repeated multiplication keeps
/// the decimal boundary values exact (0.001 -> 0.0002 -> 0.00004).
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = epoch / cfg.decay_every_epochs;
    let mut lr = cfg.initial_lr;
    for _ in 0..drops {
        lr *= cfg.decay_factor;
    }
    lr
}

/// Adam moment buffers, stored alongside the step counter in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Array4<f32>>,
    pub v: Vec<Array4<f32>>,
}

/// Adam with the usual constants (beta1 0.9, beta2 0.999, eps 1e-8), no
/// weight decay, no gradient clipping. Parameter order is the store's
/// trainable registration order and never changes.
pub struct Adam {
    order: Vec<ParamId>,
    state: AdamState,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let order = store.trainable_ids();
        let m = order
            .iter()
            .map(|&id| Array4::zeros(store.get(id).dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            order,
            state: AdamState { t: 0, m, v },
        }
    }

    /// Rebuild from checkpointed moments; shapes must match the store.
    pub fn from_state(store: &ParamStore<f32>, state: AdamState) -> Result<Self> {
        let order = store.trainable_ids();
        if state.m.len() != order.len() || state.v.len() != order.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state covers {} parameters, the network has {}",
                state.m.len(),
                order.len()
            )));
        }
        for (i, &id) in order.iter().enumerate() {
            let want = store.get(id).dim();
            if state.m[i].dim() != want || state.v[i].dim() != want {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment {i} has shape {:?}, parameter {} needs {want:?}",
                    state.m[i].dim(),
                    store.name(id)
                )));
            }
        }
        Ok(Self { order, state })
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// One update step. `grads` must be the store's trainable parameters in
    /// registration order, as produced by `Graph::param_grads`.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &[(ParamId, Array4<f32>)],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.order.len()
            || grads.iter().zip(self.order.iter()).any(|((g, _), o)| g != o)
        {
            return Err(Error::Config(
                "gradient list does not match the optimizer's parameter order".into(),
            ));
        }
        self.state.t += 1;
        let t = self.state.t as i32;
        let b1 = ADAM_BETA1 as f32;
        let b2 = ADAM_BETA2 as f32;
        let corr1 = 1.0 / (1.0 - ADAM_BETA1.powi(t)) as f32;
        let corr2 = 1.0 / (1.0 - ADAM_BETA2.powi(t)) as f32;
        let lr = lr as f32;
        let eps = ADAM_EPS as f32;
        for (i, (id, g)) in grads.iter().enumerate() {
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let mut p = store.get(*id).clone();
            ndarray::Zip::from(&mut p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p -= lr * (m * corr1) / ((v * corr2).sqrt() + eps);
                });
            store.set(*id, p);
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MHDNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything a checkpoint holds; enough to rebuild the network, the
/// optimizer, and the epoch position exactly.
#[derive(Debug)]
pub struct CheckpointData {
    pub epoch: usize,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub rng: RngState,
    pub params: Vec<(String, bool, Array4<f32>)>,
    pub adam: AdamState,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(out: &mut Vec<u8>, a: &Array4<f32>) {
    for &v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn dims(&mut self) -> Result<(usize, usize, usize, usize)> {
        let mut d = [0usize; 4];
        for v in &mut d {
            let x = self.u32()? as usize;
            if x == 0 || x > 1 << 20 {
                return Err(Error::Checkpoint(format!("implausible dimension {x}")));
            }
            *v = x;
        }
        Ok((d[0], d[1], d[2], d[3]))
    }

    fn tensor(&mut self, dims: (usize, usize, usize, usize)) -> Result<Array4<f32>> {
        let len = dims.0 * dims.1 * dims.2 * dims.3;
        if len > 256 << 20 {
            return Err(Error::Checkpoint(format!("tensor too large ({len})")));
        }
        let raw = self.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Array4::from_shape_vec(dims, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Serialize the complete training state and write it atomically, so a
/// failed write never corrupts the previous checkpoint.
pub fn save_checkpoint(
    path: &Path,
    net: &DerainNet<f32>,
    train: &TrainConfig,
    epoch: usize,
    adam: &Adam,
    rng: &RngState,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut out, CHECKPOINT_VERSION);
    push_u32(&mut out, epoch as u32);

    let net_json = serde_json::to_vec(net.config())
        .map_err(|e| Error::Checkpoint(format!("network config serialization: {e}")))?;
    let train_json = serde_json::to_vec(train)
        .map_err(|e| Error::Checkpoint(format!("train config serialization: {e}")))?;
    push_u32(&mut out, net_json.len() as u32);
    out.extend_from_slice(&net_json);
    push_u32(&mut out, train_json.len() as u32);
    out.extend_from_slice(&train_json);

    out.extend_from_slice(&rng.seed);
    out.extend_from_slice(&rng.word_pos.to_le_bytes());

    let store = net.store();
    let ids: Vec<ParamId> = store.ids().collect();
    push_u32(&mut out, ids.len() as u32);
    for &id in &ids {
        let name = store.name(id);
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(store.trainable(id) as u8);
        let tensor = store.get(id);
        let (n, c, h, w) = tensor.dim();
        for d in [n, c, h, w] {
            push_u32(&mut out, d as u32);
        }
        push_f32s(&mut out, tensor);
    }

    let state = adam.state();
    out.extend_from_slice(&state.t.to_le_bytes());
    push_u32(&mut out, state.m.len() as u32);
    for (m, v) in state.m.iter().zip(state.v.iter()) {
        push_f32s(&mut out, m);
        push_f32s(&mut out, v);
    }

    atomic_write(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let epoch = cur.u32()? as usize;
    let net_len = cur.u32()? as usize;
    let network: NetworkConfig = serde_json::from_slice(cur.take(net_len)?)
        .map_err(|e| Error::Checkpoint(format!("network config: {e}")))?;
    let train_len = cur.u32()? as usize;
    let train: TrainConfig = serde_json::from_slice(cur.take(train_len)?)
        .map_err(|e| Error::Checkpoint(format!("train config: {e}")))?;

    let mut seed = [0u8; 32];
    seed.copy_from_slice(cur.take(32)?);
    let word_pos = u128::from_le_bytes(cur.take(16)?.try_into().unwrap());
    let rng = RngState { seed, word_pos };

    let param_count = cur.u32()? as usize;
    if param_count > 1 << 20 {
        return Err(Error::Checkpoint(format!(
            "implausible parameter count {param_count}"
        )));
    }
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let name_len = cur.u32()? as usize;
        if name_len == 0 || name_len > 256 {
            return Err(Error::Checkpoint(format!(
                "implausible name length {name_len}"
            )));
        }
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let trainable = cur.take(1)?[0] != 0;
        let dims = cur.dims()?;
        let tensor = cur.tensor(dims)?;
        params.push((name, trainable, tensor));
    }

    let t = cur.u64()?;
    let moment_count = cur.u32()? as usize;
    let trainable_dims: Vec<_> = params
        .iter()
        .filter(|(_, tr, _)| *tr)
        .map(|(_, _, a)| a.dim())
        .collect();
    if moment_count != trainable_dims.len() {
        return Err(Error::Checkpoint(format!(
            "optimizer covers {moment_count} parameters, checkpoint has {} trainable",
            trainable_dims.len()
        )));
    }
    let mut m = Vec::with_capacity(moment_count);
    let mut v = Vec::with_capacity(moment_count);
    for &dims in &trainable_dims {
        m.push(cur.tensor(dims)?);
        v.push(cur.tensor(dims)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - cur.pos
        )));
    }

    Ok(CheckpointData {
        epoch,
        network,
        train,
        rng,
        params,
        adam: AdamState { t, m, v },
    })
}

fn value_diff(a: &serde_json::Value, b: &serde_json::Value, path: &str, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
            for (k, va) in ma {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match mb.get(k) {
                    Some(vb) => value_diff(va, vb, &sub, out),
                    None => out.push(format!("{sub}: {va} vs (absent)")),
                }
            }
            for (k, vb) in mb {
                if !ma.contains_key(k) {
                    let sub = if path.is_empty() {
                        k.clone()
                    } else {
                        format!("{path}.{k}")
                    };
                    out.push(format!("{sub}: (absent) vs {vb}"));
                }
            }
        }
        _ if a != b => out.push(format!("{path}: {a} vs {b}")),
        _ => {}
    }
}

impl CheckpointData {
    /// Refuse to pair this checkpoint with a different architecture; the
    /// error lists every differing field.
    pub fn check_network_config(&self, expected: &NetworkConfig) -> Result<()> {
        if &self.network == expected {
            return Ok(());
        }
        let a = serde_json::to_value(&self.network).unwrap_or(serde_json::Value::Null);
        let b = serde_json::to_value(expected).unwrap_or(serde_json::Value::Null);
        let mut diffs = Vec::new();
        value_diff(&a, &b, "", &mut diffs);
        Err(Error::Checkpoint(format!(
            "network config mismatch (checkpoint vs requested): {}",
            diffs.join("; ")
        )))
    }

    /// Copy every stored tensor into the network by name.
    pub fn restore_params(&self, net: &mut DerainNet<f32>) -> Result<()> {
        self.check_network_config(net.config())?;
        if self.params.len() != net.store().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {} tensors, the network has {}",
                self.params.len(),
                net.store().len()
            )));
        }
        for (name, trainable, tensor) in &self.params {
            let id = net.store().lookup(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint tensor {name} has no counterpart"))
            })?;
            if net.store().trainable(id) != *trainable {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} trainability differs from the checkpoint"
                )));
            }
            if net.store().get(id).dim() != tensor.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?} in the checkpoint, {:?} in the network",
                    tensor.dim(),
                    net.store().get(id).dim()
                )));
            }
            net.store_mut().set(id, tensor.clone());
        }
        Ok(())
    }

    /// Build a network from the stored config and parameters.
    pub fn build_network(&self) -> Result<DerainNet<f32>> {
        let mut net = DerainNet::build(self.network.clone(), 0)?;
        self.restore_params(&mut net)?;
        Ok(net)
    }
}

/// One history line: `epoch,lr,mean_loss,mean_ssim_val,mean_psnr_val`.
/// Validation columns are NaN on epochs without an evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_ssim_val: f64,
    pub mean_psnr_val: f64,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.lr, self.mean_loss, self.mean_ssim_val, self.mean_psnr_val
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Data(format!(
                "history line needs 5 fields, got {}: {line:?}",
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Data(format!("bad number {s:?} in history line")))
        };
        Ok(Self {
            epoch: fields[0]
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("bad epoch {:?} in history line", fields[0])))?,
            lr: num(fields[1])?,
            mean_loss: num(fields[2])?,
            mean_ssim_val: num(fields[3])?,
            mean_psnr_val: num(fields[4])?,
        })
    }
}

/// Deterministic 90/10 train/validation split by identifier hash, so the
/// same image always lands on the same side regardless of dataset order.
pub fn split_by_id_hash<TPair: Clone>(pairs: &[(String, TPair)]) -> (Vec<TPair>, Vec<TPair>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (id, p) in pairs {
        if id_hash(id) % 10 == 0 {
            val.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    (train, val)
}

/// FNV-1a; stable across platforms and runs.
pub fn id_hash(id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn split_pairs(pairs: &[RainPair<f32>]) -> (Vec<RainPair<f32>>, Vec<RainPair<f32>>) {
    let keyed: Vec<(String, RainPair<f32>)> = pairs
        .iter()
        .map(|p| (p.id.clone(), p.clone()))
        .collect();
    split_by_id_hash(&keyed)
}

fn stack_batch(patches: &[&RainPair<f32>]) -> (Array4<f32>, Array4<f32>) {
    let (_, c, h, w) = patches[0].rainy.dim();
    let mut x = Array4::<f32>::zeros((patches.len(), c, h, w));
    let mut b = Array4::<f32>::zeros((patches.len(), c, h, w));
    for (k, p) in patches.iter().enumerate() {
        x.slice_mut(s![k..k + 1, .., .., ..])
            .assign(p.rainy.array());
        b.slice_mut(s![k..k + 1, .., .., ..])
            .assign(p.ground_truth.array());
    }
    (x, b)
}

/// Per-epoch, per-item seed; a pure function of its inputs so interrupted
/// and uninterrupted runs agree.
fn derived_seed(base: u64, tag: &str, epoch: usize, item: usize) -> u64 {
    DeterministicRng::derive(base, tag, ((epoch as u64) << 32) | item as u64).next_u64()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
}

/// Run the training loop, appending one history line per epoch and writing
/// an atomic checkpoint after each. `resume` continues a previous run from
/// its recorded epoch; the caller must have restored the parameters (see
/// [`CheckpointData::restore_params`] / [`CheckpointData::build_network`]).
pub fn train(
    net: &mut DerainNet<f32>,
    pairs: &[RainPair<f32>],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&CheckpointData>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint_path = out_dir.join("checkpoint.bin");
    let history_path = out_dir.join("history.txt");

    let extractor = if cfg.loss.loss_kind.uses_perceptual() {
        Some(FeatureExtractor::<f32>::from_config(&cfg.loss.perceptual)?)
    } else {
        None
    };

    let (train_pairs, val_pairs) = split_pairs(pairs);
    let train_pairs = if train_pairs.is_empty() {
        log::warn!("identifier hash split left no training images; training on all pairs");
        pairs.to_vec()
    } else {
        train_pairs
    };
    if val_pairs.is_empty() {
        log::warn!("identifier hash split left no validation images; history will carry NaN");
    }

    let start_epoch = match resume {
        Some(ckpt) => {
            ckpt.check_network_config(net.config())?;
            ckpt.epoch
        }
        None => 0,
    };
    if start_epoch >= cfg.epochs {
        return Err(Error::Config(format!(
            "checkpoint is already at epoch {start_epoch} of {}",
            cfg.epochs
        )));
    }
    let mut adam = match resume {
        Some(ckpt) => Adam::from_state(net.store(), ckpt.adam.clone())?,
        None => Adam::new(net.store()),
    };
    let session_rng = match resume {
        Some(ckpt) => DeterministicRng::from_state(&ckpt.rng),
        None => DeterministicRng::derive(cfg.seed, "train", 0),
    };

    let mut history = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&history_path)
        .map_err(|e| Error::io(&history_path, e))?;

    let mut records = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);

        let mut patches = Vec::new();
        for (i, pair) in train_pairs.iter().enumerate() {
            let seed = derived_seed(cfg.seed, "patches", epoch, i);
            patches.extend(extract_patches(
                pair,
                cfg.patches_per_image,
                cfg.patch_size,
                seed,
            )?);
        }
        let mut shuffle_rng =
            DeterministicRng::derive(cfg.seed, "shuffle", epoch as u64);
        shuffle_rng.shuffle(&mut patches);

        let mut loss_sum = 0.0f64;
        let mut sample_count = 0usize;
        for (batch_index, batch) in patches.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&RainPair<f32>> = batch.iter().collect();
            let (x, b) = stack_batch(&refs);
            let (loss_value, grads, updates) = {
                let mut g = Graph::new(net.store(), Mode::Train);
                let xv = g.input(x, false);
                let bv = g.input(b, false);
                let fwd = net.forward(&mut g, xv)?;
                let loss =
                    hybrid_loss_var(&mut g, fwd.refined, bv, &cfg.loss, extractor.as_ref())?;
                let loss_value = g.scalar(loss) as f64;
                if !loss_value.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        batch: batch_index,
                        detail: format!(
                            "{} loss {loss_value} at lr {lr}",
                            cfg.loss.loss_kind
                        ),
                    });
                }
                g.backward(loss)?;
                let grads = g.param_grads();
                let updates = std::mem::take(&mut g.buffer_updates);
                (loss_value, grads, updates)
            };
            adam.step(net.store_mut(), &grads, lr)?;
            for (id, value) in updates {
                net.store_mut().set(id, value);
            }
            loss_sum += loss_value * batch.len() as f64;
            sample_count += batch.len();
        }
        let mean_loss = loss_sum / sample_count as f64;

        let evaluate_now =
            (epoch + 1) % cfg.eval_every_epochs == 0 || epoch + 1 == cfg.epochs;
        let (mean_ssim_val, mean_psnr_val) = if evaluate_now && !val_pairs.is_empty() {
            let report = evaluate(net, &val_pairs, &cfg.loss.ssim)?;
            (report.mean_ssim, report.mean_psnr)
        } else {
            (f64::NAN, f64::NAN)
        };

        let record = EpochRecord {
            epoch,
            lr,
            mean_loss,
            mean_ssim_val,
            mean_psnr_val,
        };
        log::info!("{}", record.line());
        writeln!(history, "{}", record.line()).map_err(|e| Error::io(&history_path, e))?;
        history.flush().map_err(|e| Error::io(&history_path, e))?;
        records.push(record);

        save_checkpoint(
            &checkpoint_path,
            net,
            cfg,
            epoch + 1,
            &adam,
            &session_rng.state(),
        )?;
    }

    Ok(TrainOutcome {
        records,
        checkpoint_path,
        history_path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image metrics plus their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub mean_psnr: f64,
    pub stddev_psnr: f64,
    pub mean_ssim: f64,
    pub stddev_ssim: f64,
    pub ssim_params: SsimParams,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<MetricRow>, ssim_params: SsimParams) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("metrics report needs at least one row".into()));
        }
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&MetricRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        let mean_psnr = mean(&|r| r.psnr_db);
        let mean_ssim = mean(&|r| r.ssim);
        let var = |f: &dyn Fn(&MetricRow) -> f64, m: f64| {
            rows.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n
        };
        Ok(Self {
            stddev_psnr: var(&|r| r.psnr_db, mean_psnr).sqrt(),
            stddev_ssim: var(&|r| r.ssim, mean_ssim).sqrt(),
            rows,
            mean_psnr,
            mean_ssim,
            ssim_params,
        })
    }

    /// The `psnr/ssim` convention used in results tables, e.g. `30.76/0.915`.
    pub fn summary(&self) -> String {
        format!("{:.2}/{:.3}", self.mean_psnr, self.mean_ssim)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_db,ssim\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{}\n", row.id, row.psnr_db, row.ssim));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_csv().as_bytes())
    }
}

/// Derain every image whole (no patching), clamp, and score against its
/// ground truth.
pub fn evaluate(
    net: &DerainNet<f32>,
    pairs: &[RainPair<f32>],
    ssim_params: &SsimParams,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let out = net.derain(pair.rainy.array())?;
        let truth = pair.ground_truth.array();
        rows.push(MetricRow {
            id: pair.id.clone(),
            psnr_db: psnr_value(&out.derained, truth)?,
            ssim: ssim_value(&out.derained, truth, ssim_params)?,
        });
    }
    MetricsReport::from_rows(rows, *ssim_params)
}
