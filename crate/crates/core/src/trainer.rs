//! Stochastic minimization of the variational objective.
//!
//! One epoch is one Adam step on a fresh latent batch. The batch for epoch
//! `e` is drawn from its own ChaCha stream, so a resumed run sees exactly the
//! batches an uninterrupted run would.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{latent_from_rng, FlowModel};
use crate::io;
use crate::objective::{ElboTerms, Objective};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// TV weight.
    pub lambda: f64,
    pub seed: u64,
    /// Global l2 gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Full-size schedule: 2e4 epochs, lr 5e-6, batch 64.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            epochs: 20_000,
            learning_rate: 5e-6,
            batch_size: 64,
            ..Self::desk_scale(seed)
        }
    }

    /// Schedule sized for a desktop CPU: 2000 epochs, lr 1e-4, batch 16.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            epochs: 2000,
            learning_rate: 1e-4,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 0.01,
            seed,
            clip_norm: Some(100.0),
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "training needs learning_rate >= 0, batch_size >= 1, epochs >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("Adam moments must be in [0,1) and eps > 0".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidConfig("clip norm must be positive".into()));
        }
        Ok(())
    }

    /// Latent batch used at `epoch`.
    pub fn latent_batch(&self, epoch: usize, dim: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        latent_from_rng(self.batch_size, dim, &mut rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates of the adaptive-moment optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn moment_update(theta: &mut [f64], grad: &[f64], state: &mut AdamState, hp: AdamHyper) {
    assert_eq!(theta.len(), grad.len());
    assert_eq!(theta.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((p, &g), m), v) in theta
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        *p -= hp.lr * (*m / c1) / ((*v / c2).sqrt() + hp.eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch sum of the objective.
    pub objective: f64,
    pub misfit: f64,
    pub tv: f64,
    pub logdet: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub seconds: f64,
    pub clipped: bool,
}

impl EpochRecord {
    fn from_terms(epoch: usize, terms: &ElboTerms, grad_norm: f64, seconds: f64, clipped: bool) -> Self {
        Self {
            epoch,
            objective: terms.total(),
            misfit: terms.mean_misfit(),
            tv: terms.mean_tv(),
            logdet: terms.mean_logdet(),
            grad_norm,
            seconds,
            clipped,
        }
    }

    /// Every field except wall time.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.objective.to_bits() == other.objective.to_bits()
            && self.misfit.to_bits() == other.misfit.to_bits()
            && self.tv.to_bits() == other.tv.to_bits()
            && self.logdet.to_bits() == other.logdet.to_bits()
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: [&str; 7] = ["epoch", "objective", "misfit", "tv", "logdet", "grad_norm", "seconds"];

impl TrainLog {
    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }

    /// Trailing moving average of the objective over `window` epochs.
    pub fn smoothed_objective(&self, window: usize) -> Vec<f64> {
        let obj = self.objectives();
        let window = window.max(1);
        let mut out = Vec::with_capacity(obj.len());
        let mut acc = 0.0;
        for i in 0..obj.len() {
            acc += obj[i];
            if i >= window {
                acc -= obj[i - window];
            }
            out.push(acc / (i + 1).min(window) as f64);
        }
        out
    }

    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.same_trajectory(b))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| {
                vec![
                    r.epoch.to_string(),
                    io::fmt_f64(r.objective),
                    io::fmt_f64(r.misfit),
                    io::fmt_f64(r.tv),
                    io::fmt_f64(r.logdet),
                    io::fmt_f64(r.grad_norm),
                    format!("{:.6}", r.seconds),
                ]
            })
            .collect();
        io::write_csv(path, &TRAIN_LOG_HEADER, &rows)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (header, rows) = io::read_csv(path)?;
        if header != TRAIN_LOG_HEADER {
            return Err(Error::format(path, "unexpected training-log header"));
        }
        let parse =
            |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::format(path, format!("bad number {s:?}"))) };
        let records = rows
            .iter()
            .map(|r| {
                Ok(EpochRecord {
                    epoch: parse(&r[0])? as usize,
                    objective: parse(&r[1])?,
                    misfit: parse(&r[2])?,
                    tv: parse(&r[3])?,
                    logdet: parse(&r[4])?,
                    grad_norm: parse(&r[5])?,
                    seconds: parse(&r[6])?,
                    clipped: false,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// Model plus optimizer state: everything needed to resume bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub optimizer: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainState {
    epoch: usize,
    step: u64,
}

impl Checkpoint {
    /// Atomically replaces `dir` with this checkpoint.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_dir_atomic(dir, |tmp| {
            self.model.save(tmp)?;
            io::write_npy(tmp.join("adam_m.npy"), &Array1::from(self.optimizer.m.clone()))?;
            io::write_npy(tmp.join("adam_v.npy"), &Array1::from(self.optimizer.v.clone()))?;
            io::write_json(
                tmp.join("train_state.json"),
                &TrainState {
                    epoch: self.epoch,
                    step: self.optimizer.step,
                },
            )
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = FlowModel::load(dir)?;
        let state: TrainState = io::read_json(dir.join("train_state.json"))?;
        let m: Array1<f64> = io::read_npy(dir.join("adam_m.npy"))?;
        let v: Array1<f64> = io::read_npy(dir.join("adam_v.npy"))?;
        if m.len() != model.num_params() || v.len() != model.num_params() {
            return Err(Error::format(dir, "optimizer state does not match the model"));
        }
        Ok(Self {
            model,
            optimizer: AdamState {
                m: m.to_vec(),
                v: v.to_vec(),
                step: state.step,
            },
            epoch: state.epoch,
        })
    }
}

/// Owns the model and optimizer state during training.
#[derive(Debug)]
pub struct Trainer<'a> {
    objective: &'a Objective,
    config: TrainConfig,
    checkpoint: Checkpoint,
    log: TrainLog,
}

impl<'a> Trainer<'a> {
    pub fn new(objective: &'a Objective, model: FlowModel, config: TrainConfig) -> Result<Self> {
        let optimizer = AdamState::new(model.num_params());
        Self::resume(
            objective,
            Checkpoint {
                model,
                optimizer,
                epoch: 0,
            },
            config,
        )
    }

    pub fn resume(objective: &'a Objective, checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut objective_config = *objective.config();
        objective_config.lambda = config.lambda;
        if objective_config != *objective.config() {
            return Err(Error::InvalidConfig(format!(
                "objective lambda {} differs from training lambda {}",
                objective.config().lambda,
                config.lambda
            )));
        }
        Ok(Self {
            objective,
            config,
            checkpoint,
            log: TrainLog::default(),
        })
    }

    pub fn model(&self) -> &FlowModel {
        &self.checkpoint.model
    }

    pub fn epoch(&self) -> usize {
        self.checkpoint.epoch
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn into_parts(self) -> (Checkpoint, TrainLog) {
        (self.checkpoint, self.log)
    }

    /// One optimizer step. On a numerical failure the state is left as it was
    /// before the step.
    pub fn step(&mut self) -> Result<&EpochRecord> {
        let start = Instant::now();
        let epoch = self.checkpoint.epoch;
        let w = self.config.latent_batch(epoch, self.checkpoint.model.dim());
        let mut model = self.checkpoint.model.clone();
        if !model.actnorm_initialized() {
            model.initialize_actnorm(w.view())?;
        }
        let (terms, mut grad, tape) = self.objective.gradient_with_tape(&model, w.view())?;
        if !terms.total().is_finite() {
            return Err(Error::NonFinite(format!("objective at epoch {epoch}")));
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut clipped = false;
        if let Some(limit) = self.config.clip_norm {
            if grad_norm > limit {
                let scale = limit / grad_norm;
                grad.iter_mut().for_each(|g| *g *= scale);
                clipped = true;
                log::debug!("epoch {epoch}: gradient norm {grad_norm:.3e} clipped to {limit}");
            }
        }
        let hp = AdamHyper {
            lr: self.config.learning_rate,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.adam_eps,
        };
        moment_update(model.theta_mut(), &grad, &mut self.checkpoint.optimizer, hp);
        model.commit_batch_stats(&tape);
        self.checkpoint.model = model;
        self.checkpoint.epoch += 1;
        let record = EpochRecord::from_terms(epoch, &terms, grad_norm, start.elapsed().as_secs_f64(), clipped);
        self.log.records.push(record);
        Ok(self.log.records.last().expect("just pushed"))
    }

    /// Steps until `config.epochs` epochs have completed, calling `on_epoch` after each.
    pub fn run_with(&mut self, mut on_epoch: impl FnMut(&Trainer<'a>) -> Result<()>) -> Result<()> {
        while self.checkpoint.epoch < self.config.epochs {
            self.step()?;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| Ok(()))
    }
}

/// Trains `model` from scratch for `config.epochs` epochs.
pub fn train(objective: &Objective, model: FlowModel, config: TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    let mut trainer = Trainer::new(objective, model, config)?;
    trainer.run()?;
    Ok(trainer.into_parts())
}
