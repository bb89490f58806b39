//! Training loop: Adam at lr 0.001 with plateau decay (x0.1 after 5
//! non-improving epochs on validation PSNR), per-epoch validation, and
//! best/last checkpointing.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use autograd::Tape;
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{decode_tensor_map, encode_tensor_map, save_checkpoint};
use crate::config::NetworkConfig;
use crate::data::{PairedDataset, PairedItem};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{loss_tape, mse, psnr, ssim, Metrics};
use crate::network::build_forward;
use crate::nn::Mode;
use crate::params::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValPsnr,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub monitor: Monitor,
    pub seed: u64,
    /// Where checkpoints and the report land; `None` trains in memory only.
    pub checkpoint_dir: Option<PathBuf>,
    /// Validate every n-th epoch (the final epoch is always validated).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 4,
            lr: 1e-3,
            plateau_factor: 0.1,
            plateau_patience: 5,
            monitor: Monitor::ValPsnr,
            seed: 0,
            checkpoint_dir: None,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Train("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Train("batch_size must be >= 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Train("eval_every must be >= 1".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Train(format!(
                "plateau_factor {} outside (0, 1)",
                self.plateau_factor
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction; state is serializable for checkpoint resume.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f32>>,
    v: BTreeMap<String, ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update; returns the L2 norm of the applied deltas.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &BTreeMap<String, ArrayD<f32>>,
    ) -> Result<f64> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut norm2 = 0.0f64;
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let mut param = store.get(name).to_owned();
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            let gs = grad.as_slice().unwrap();
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            let ps = param.as_slice_mut().unwrap();
            for i in 0..gs.len() {
                let g = gs[i];
                ms[i] = b1 * ms[i] + (1.0 - b1) * g;
                vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
                let mhat = ms[i] as f64 / bc1;
                let vhat = vs[i] as f64 / bc2;
                let delta = self.lr * mhat / (vhat.sqrt() + self.eps);
                ps[i] -= delta as f32;
                norm2 += delta * delta;
            }
            store.set(name, param)?;
        }
        Ok(norm2.sqrt())
    }

    /// Opaque state blob: step counter, learning rate, moment tensors.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&self.lr.to_le_bytes());
        let m = encode_tensor_map(&self.m);
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        out.extend_from_slice(&m);
        let v = encode_tensor_map(&self.v);
        out.extend_from_slice(&(v.len() as u64).to_le_bytes());
        out.extend_from_slice(&v);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let need = |n: usize, at: usize| -> Result<()> {
            if at + n > bytes.len() {
                return Err(Error::Checkpoint("optimizer state truncated".into()));
            }
            Ok(())
        };
        need(16, 0)?;
        let t = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let lr = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let mut pos = 16usize;
        let read_map = |pos: &mut usize| -> Result<BTreeMap<String, ArrayD<f32>>> {
            need(8, *pos)?;
            let len = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap()) as usize;
            *pos += 8;
            need(len, *pos)?;
            let map = decode_tensor_map(&bytes[*pos..*pos + len])?;
            *pos += len;
            Ok(map)
        };
        let m = read_map(&mut pos)?;
        let v = read_map(&mut pos)?;
        let mut adam = Adam::new(lr);
        adam.t = t;
        adam.m = m;
        adam.v = v;
        Ok(adam)
    }
}

/// Learning-rate schedule: multiply by `factor` once the monitored metric
/// has failed to improve for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    streak: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauSchedule {
            lr,
            factor,
            patience,
            best: f64::NEG_INFINITY,
            streak: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record one epoch's monitored metric; returns the learning rate to use
    /// from the next epoch on.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric > self.best {
            self.best = metric;
            self.streak = 0;
        } else {
            self.streak += 1;
            if self.streak >= self.patience {
                self.lr *= self.factor;
                self.streak = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
    /// Validation metrics; `None` on epochs skipped by `eval_every`.
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Per-step training losses across all epochs, in order.
    pub step_losses: Vec<f32>,
    pub best_epoch: usize,
    pub best_val_psnr: f64,
    pub total_seconds: f64,
}

fn batch_tensor(items: &[&PairedItem], input: bool) -> ArrayD<f32> {
    let n = items.len();
    let (h, w) = (items[0].input.height(), items[0].input.width());
    let mut out = ArrayD::zeros(ndarray::IxDyn(&[n, 3, h, w]));
    for (i, item) in items.iter().enumerate() {
        let src = if input { &item.input } else { &item.gt };
        for ((c, y, x), &v) in src.data().indexed_iter() {
            out[[i, c, y, x]] = v;
        }
    }
    out
}

/// Train a freshly initialized network on `train_ds` with per-epoch
/// validation on `val_ds`. Returns the trained parameters and the report.
pub fn train(
    net_cfg: &NetworkConfig,
    tcfg: &TrainConfig,
    train_ds: &PairedDataset,
    val_ds: &PairedDataset,
) -> Result<(ParameterStore, TrainReport)> {
    tcfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Train("datasets must be non-empty".into()));
    }
    let (h, w) = train_ds.target;
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Train(format!("image size {h}x{w} not divisible by 16")));
    }

    let mut store = ParameterStore::init(net_cfg);
    let mut adam = Adam::new(tcfg.lr);
    let mut plateau = PlateauSchedule::new(tcfg.lr, tcfg.plateau_factor, tcfg.plateau_patience);
    let mut report = TrainReport {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        best_val_psnr: f64::NEG_INFINITY,
        total_seconds: 0.0,
    };
    let started = Instant::now();

    if let Some(dir) = &tcfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.clone(), e))?;
    }

    for epoch in 1..=tcfg.epochs {
        let epoch_started = Instant::now();
        let lr_in_effect = plateau.lr();
        adam.lr = lr_in_effect;

        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        rng.set_stream(epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let items: Vec<&PairedItem> = chunk.iter().map(|&i| &train_ds.items[i]).collect();
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(batch_tensor(&items, true), false);
            let graph = build_forward(&mut tape, x, &store, net_cfg, Mode::Train, true)?;
            let gt = tape.leaf(batch_tensor(&items, false), false);
            let loss = loss_tape(&mut tape, gt, graph.y_pre, net_cfg.loss_mode);
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss {loss_val} at epoch {epoch}, batch {batch_idx}"
                )));
            }
            let grads = tape.backward(loss);
            let mut grad_map = BTreeMap::new();
            for (name, var) in &graph.registry.entries {
                if let Some(g) = grads.get(*var) {
                    grad_map.insert(name.clone(), g.clone());
                }
            }
            adam.step(&mut store, &grad_map)?;
            for (name, mean, var) in &graph.updates.updates {
                store.set_buffer(&format!("{name}.running_mean"), mean.clone().into_dyn())?;
                store.set_buffer(&format!("{name}.running_var"), var.clone().into_dyn())?;
            }
            report.step_losses.push(loss_val);
            epoch_loss += loss_val as f64;
            batches += 1;
        }

        let validate_now = epoch % tcfg.eval_every == 0 || epoch == tcfg.epochs;
        let metrics = if validate_now {
            Some(evaluate(&store, net_cfg, val_ds)?)
        } else {
            None
        };
        let improved = metrics.map(|m| m.psnr > report.best_val_psnr).unwrap_or(false);
        if let Some(m) = metrics {
            if improved {
                report.best_val_psnr = m.psnr;
                report.best_epoch = epoch;
            }
        }
        if let Some(dir) = &tcfg.checkpoint_dir {
            let opt = adam.encode();
            save_checkpoint(net_cfg, &store, &opt, epoch as u32, dir.join(format!("epoch_{epoch}.ckpt")))?;
            save_checkpoint(net_cfg, &store, &opt, epoch as u32, dir.join("last.ckpt"))?;
            if improved {
                save_checkpoint(net_cfg, &store, &opt, epoch as u32, dir.join("best.ckpt"))?;
            }
        }
        if let Some(m) = metrics {
            let monitored = match tcfg.monitor {
                Monitor::ValPsnr => m.psnr,
            };
            plateau.observe(monitored);
        }

        report.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            lr: lr_in_effect,
            val_psnr: metrics.map(|m| m.psnr),
            val_ssim: metrics.map(|m| m.ssim),
            seconds: epoch_started.elapsed().as_secs_f64(),
        });
    }
    report.total_seconds = started.elapsed().as_secs_f64();

    if let Some(dir) = &tcfg.checkpoint_dir {
        let path = dir.join("report.json");
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok((store, report))
}

/// Mean PSNR/SSIM/MSE of clamped restorations against ground truth.
/// Items are batched for speed; eval-mode batch norm has no cross-sample
/// coupling, so this matches per-item forwards exactly.
pub fn evaluate(store: &ParameterStore, cfg: &NetworkConfig, ds: &PairedDataset) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::Train("evaluation dataset is empty".into()));
    }
    let (mut p_acc, mut s_acc, mut m_acc) = (0.0f64, 0.0f64, 0.0f64);
    for chunk in ds.items.chunks(8) {
        let items: Vec<&PairedItem> = chunk.iter().collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(batch_tensor(&items, true), false);
        let graph = build_forward(&mut tape, x, store, cfg, Mode::Eval, false)?;
        let y = tape.value(graph.y_pre);
        for (i, item) in chunk.iter().enumerate() {
            let pre: ndarray::Array3<f32> = y
                .index_axis(ndarray::Axis(0), i)
                .to_owned()
                .into_dimensionality()
                .expect("sample is [3,H,W]");
            let restored = Image::from_unclamped(pre)?;
            p_acc += psnr(&restored, &item.gt)?;
            s_acc += ssim(&restored, &item.gt)?;
            m_acc += mse(&restored, &item.gt)?;
        }
    }
    let n = ds.len() as f64;
    Ok(Metrics {
        psnr: p_acc / n,
        ssim: s_acc / n,
        mse: m_acc / n,
        count: ds.len(),
    })
}

/// Mean PSNR/SSIM of the raw inputs against ground truth (the no-op
/// baseline every restoration must beat).
pub fn input_metrics(ds: &PairedDataset) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::Train("dataset is empty".into()));
    }
    let (mut p_acc, mut s_acc, mut m_acc) = (0.0f64, 0.0f64, 0.0f64);
    for item in &ds.items {
        p_acc += psnr(&item.input, &item.gt)?;
        s_acc += ssim(&item.input, &item.gt)?;
        m_acc += mse(&item.input, &item.gt)?;
    }
    let n = ds.len() as f64;
    Ok(Metrics {
        psnr: p_acc / n,
        ssim: s_acc / n,
        mse: m_acc / n,
        count: ds.len(),
    })
}
