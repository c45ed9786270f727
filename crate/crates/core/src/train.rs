//! Training loop: shuffled epochs, noise-prediction loss, AdamW with cosine
//! decay, periodic checkpoints and a `step,loss,lr` log.
//!
//! Every random draw is keyed by `(seed, epoch)` or `(seed, step)`, so a run
//! split across a resume produces the same bytes as an uninterrupted one.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::{build_schedule, training_loss};
use crate::error::{Error, Result};
use crate::grid::{normalize_state, Dims};
use crate::net::checkpoint::{Checkpoint, CheckpointHeader, LossSummary, TrainRecord};
use crate::net::optim::{adamw_update, AdamState, AdamWConfig};
use crate::net::{Denoiser, NetConfig};
use crate::rng::{stream, Domain};
use crate::synth::Dataset;
use crate::tensor::Tensor;

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn default_batch() -> usize {
    8
}
fn default_total() -> u64 {
    2000
}
fn default_every() -> u64 {
    500
}
fn default_s() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    /// Network; `None` picks the desk network for the dataset grid.
    #[serde(default)]
    pub net: Option<NetConfig>,
    #[serde(rename = "S", default = "default_s")]
    pub n_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_total")]
    pub total_steps: u64,
    /// Intermediate checkpoint period in updates; 0 writes only the final one.
    #[serde(default = "default_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

impl TrainConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        TrainConfig {
            manifest: manifest.into(),
            net: None,
            n_steps: default_s(),
            batch_size: default_batch(),
            total_steps: default_total(),
            checkpoint_every: default_every(),
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        if self.n_steps < 2 {
            return Err(Error::config("S", "must be at least 2"));
        }
        if let Some(net) = &self.net {
            net.validate()?;
        }
        Ok(())
    }

    /// The network actually trained on a grid of `dims`.
    pub fn resolve_net(&self, dims: Dims) -> Result<NetConfig> {
        let net = match &self.net {
            Some(n) => n.clone(),
            None => {
                let proto = NetConfig::desk(dims.z, 0, 0);
                let m = 1usize << proto.stages();
                NetConfig::desk(dims.z, dims.w.div_ceil(m) * m, dims.h.div_ceil(m) * m)
            }
        };
        net.validate()?;
        if net.in_channels != 2 * dims.z {
            return Err(Error::Mismatch(format!(
                "network has {} input channels, dataset has {} levels",
                net.in_channels, dims.z
            )));
        }
        if net.padded_w < dims.w || net.padded_h < dims.h {
            return Err(Error::Mismatch(format!(
                "padded grid {}x{} is smaller than the dataset grid {dims}",
                net.padded_w, net.padded_h
            )));
        }
        Ok(net)
    }

    fn record(&self) -> TrainRecord {
        TrainRecord {
            manifest: self.manifest.display().to_string(),
            n_steps: self.n_steps,
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            seed: self.seed,
            optimizer: self.optimizer.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub step: u64,
    /// Rows produced by this call (not those inherited from a resumed run).
    pub losses: Vec<LossRow>,
}

struct Session {
    cfg: TrainConfig,
    net: Denoiser<f32>,
    adam: AdamState<f32>,
    data: Vec<Tensor<f32>>,
    dims: Dims,
    norm_stats_path: String,
    first: Vec<f64>,
    window: Vec<f64>,
    log: Vec<LossRow>,
}

fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Vec<Tensor<f32>>, Dims, NetConfig)> {
    let ds = Dataset::open(&cfg.manifest)?;
    let stats = ds.norm_stats()?;
    let states = ds.load_states()?;
    let dims = states
        .first()
        .map(|s| s.dims)
        .ok_or_else(|| Error::Validation("dataset has no states".into()))?;
    let net = cfg.resolve_net(dims)?;
    let data = states
        .iter()
        .map(|s| {
            let n = normalize_state(s, &stats)?;
            debug_assert!(n.normalized);
            n.to_tensor().pad_replicate(net.padded_w, net.padded_h)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ds, data, dims, net))
}

/// Dataset indices of the batch used by update `step` (0-based).
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n_data: usize) -> Vec<usize> {
    let mut cache: HashMap<u64, Vec<usize>> = HashMap::new();
    (0..batch_size as u64)
        .map(|b| {
            let pos = step * batch_size as u64 + b;
            let epoch = pos / n_data as u64;
            let perm = cache.entry(epoch).or_insert_with(|| {
                let mut p: Vec<usize> = (0..n_data).collect();
                p.shuffle(&mut stream(seed, Domain::Epoch, epoch));
                p
            });
            perm[(pos % n_data as u64) as usize]
        })
        .collect()
}

impl Session {
    fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            net: self.net.config().clone(),
            data_dims: self.dims,
            train: self.cfg.record(),
            step: self.adam.step,
            loss: LossSummary { first: self.first.clone(), last: self.window.clone() },
            norm_stats_path: self.norm_stats_path.clone(),
            param_count: 0,
            has_optimizer_state: true,
            blob_sha256: String::new(),
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::capture(self.header(), &self.net, Some(&self.adam)).save(path)
    }

    fn run(
        &mut self,
        out_dir: &Path,
        stop_at: u64,
        progress: &mut dyn FnMut(&LossRow),
    ) -> Result<TrainOutcome> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let sched = build_schedule(self.cfg.n_steps)?;
        let stop_at = stop_at.min(self.cfg.total_steps);
        let mut produced = Vec::new();
        while self.adam.step < stop_at {
            let step = self.adam.step;
            let idx = batch_indices(self.cfg.seed, step, self.cfg.batch_size, self.data.len());
            let batch: Vec<Tensor<f32>> = idx.iter().map(|&i| self.data[i].clone()).collect();
            let mut rng = stream(self.cfg.seed, Domain::TrainStep, step);
            let out = training_loss(&self.net, &batch, &sched, &mut rng).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("step {}: {msg}", step + 1)),
                other => other,
            })?;
            let lr = self.cfg.optimizer.cosine_lr(step, self.cfg.total_steps);
            adamw_update(self.net.params_mut(), &out.grads, &mut self.adam, &self.cfg.optimizer, lr)?;
            if self.net.params().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite parameters after step {}", step + 1)));
            }
            let row = LossRow { step: self.adam.step, loss: out.loss, lr };
            if self.first.len() < LossSummary::WINDOW {
                self.first.push(out.loss);
            }
            self.window.push(out.loss);
            if self.window.len() > LossSummary::WINDOW {
                self.window.remove(0);
            }
            progress(&row);
            self.log.push(row.clone());
            produced.push(row);
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.adam.step % every == 0 && self.adam.step < self.cfg.total_steps {
                self.save(&out_dir.join(format!("ckpt_{:06}.ckpt", self.adam.step)))?;
            }
        }
        let name = if self.adam.step >= self.cfg.total_steps {
            FINAL_CHECKPOINT.to_string()
        } else {
            format!("ckpt_{:06}.ckpt", self.adam.step)
        };
        let path = out_dir.join(name);
        self.save(&path)?;
        write_loss_log(&out_dir.join(LOSS_LOG), &self.log)?;
        Ok(TrainOutcome { checkpoint: path, step: self.adam.step, losses: produced })
    }
}

pub fn write_loss_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    crate::physics::write_csv(std::io::BufWriter::new(f), rows)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    crate::physics::read_csv(f)
}

/// Trains from scratch until `cfg.total_steps`.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    train_until(cfg, out_dir, cfg.total_steps, &mut |_| {})
}

/// Trains from scratch, stopping after `stop_at` updates of the `cfg.total_steps` schedule.
pub fn train_until(
    cfg: &TrainConfig,
    out_dir: &Path,
    stop_at: u64,
    progress: &mut dyn FnMut(&LossRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (ds, data, dims, net_cfg) = load_data(cfg)?;
    let net = Denoiser::<f32>::new(net_cfg, cfg.seed)?;
    let adam = AdamState::new(net.n_params());
    let mut session = Session {
        cfg: cfg.clone(),
        net,
        adam,
        data,
        dims,
        norm_stats_path: ds.norm_stats_path().display().to_string(),
        first: Vec::new(),
        window: Vec::new(),
        log: Vec::new(),
    };
    session.run(out_dir, stop_at, progress)
}

/// Continues a run from `checkpoint` until `cfg.total_steps`.
pub fn resume(
    checkpoint: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
    progress: &mut dyn FnMut(&LossRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let (ds, data, dims, net_cfg) = load_data(cfg)?;
    if ck.header.net != net_cfg {
        return Err(Error::Mismatch(format!(
            "checkpoint network {:?} differs from configured {:?}",
            ck.header.net, net_cfg
        )));
    }
    if ck.header.data_dims != dims {
        return Err(Error::Mismatch(format!(
            "checkpoint was trained on {}, dataset is {dims}",
            ck.header.data_dims
        )));
    }
    let want = cfg.record();
    let have = &ck.header.train;
    let fields = [
        ("batch_size", have.batch_size.to_string(), want.batch_size.to_string()),
        ("S", have.n_steps.to_string(), want.n_steps.to_string()),
        ("total_steps", have.total_steps.to_string(), want.total_steps.to_string()),
        ("seed", have.seed.to_string(), want.seed.to_string()),
        ("optimizer", format!("{:?}", have.optimizer), format!("{:?}", want.optimizer)),
    ];
    for (name, a, b) in fields {
        if a != b {
            return Err(Error::Mismatch(format!("resume {name}: checkpoint has {a}, config has {b}")));
        }
    }
    let adam = ck
        .adam_state::<f32>()
        .ok_or_else(|| Error::Validation("checkpoint carries no optimizer state".into()))?;
    let net = ck.denoiser::<f32>()?;
    let log_path = out_dir.join(LOSS_LOG);
    let mut log = if log_path.exists() { read_loss_log(&log_path)? } else { Vec::new() };
    log.retain(|r| r.step <= adam.step);
    let mut session = Session {
        cfg: cfg.clone(),
        net,
        adam,
        data,
        dims,
        norm_stats_path: ds.norm_stats_path().display().to_string(),
        first: ck.header.loss.first.clone(),
        window: ck.header.loss.last.clone(),
        log,
    };
    session.run(out_dir, cfg.total_steps, progress)
}
