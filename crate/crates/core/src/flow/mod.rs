//! Invertible generative network mapping latent Gaussian samples to objects.
//!
//! A model is `K` blocks; each block applies a fixed permutation of all
//! coordinates, then twice (actnorm, affine coupling). All trainable values
//! live in one flat vector `theta` indexed by a [`ParamLayout`].

mod checkpoint;
pub mod layers;
pub mod params;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::ModelMeta;
pub use layers::{ActNorm, BatchStats, Coupling, CouplingCache, NormSource};
pub use params::{ParamLayout, Slot};

use crate::error::{Error, Result};

/// Architecture and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Latent (and output) dimension; must be even.
    pub dim: usize,
    /// Width of both hidden layers in every scale/shift net.
    pub hidden: usize,
    pub blocks: usize,
    /// Log-scale clamp bound `c`.
    pub clamp: f64,
    /// Seeds the permutations and the weight initialization.
    pub seed: u64,
    pub leaky_slope: f64,
    /// Weight kept on the old running statistics at each update.
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl FlowConfig {
    /// Configuration for an `n x n` complex object: `dim = 2n^2`, hidden width `n^2/4`.
    pub fn for_object(n: usize, blocks: usize, seed: u64) -> Self {
        let n2 = n * n;
        Self {
            dim: 2 * n2,
            hidden: (n2 / 4).max(1),
            blocks,
            clamp: 2.0,
            seed,
            leaky_slope: 0.01,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "flow dimension {} must be even and positive",
                self.dim
            )));
        }
        if self.hidden == 0 || self.blocks == 0 {
            return Err(Error::InvalidConfig(
                "hidden width and block count must be positive".into(),
            ));
        }
        if !(self.clamp > 0.0) {
            return Err(Error::InvalidConfig("clamp bound must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::InvalidConfig(
                "batch-norm momentum must be in [0,1) and eps > 0".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form number of trainable parameters.
    pub fn num_params(&self) -> usize {
        let d = self.dim;
        let h = d / 2;
        let w = self.hidden;
        let subnet = (h * w + w) + (w * w + w) + (w * h + h) + 4 * w;
        self.blocks * (2 * 2 * d + 2 * 4 * subnet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm layers normalize with the current batch's statistics.
    Train,
    /// Batch-norm layers use running statistics; required for inversion.
    Eval,
}

#[derive(Debug, Clone)]
struct Block {
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    actnorm: [ActNorm; 2],
    coupling: [Coupling; 2],
}

/// Record of a training-mode forward pass, replayed in reverse by [`FlowModel::backward`].
#[derive(Debug, Clone)]
pub struct FlowTape {
    blocks: Vec<BlockTape>,
}

#[derive(Debug, Clone)]
struct BlockTape {
    actnorm_in: [Array2<f64>; 2],
    coupling: [CouplingCache; 2],
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    config: FlowConfig,
    layout: ParamLayout,
    theta: Vec<f64>,
    blocks: Vec<Block>,
    running: Vec<BatchStats>,
    stats_initialized: bool,
    actnorm_initialized: bool,
}

impl FlowModel {
    pub fn new(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut layout = ParamLayout::default();
        let mut bn_count = 0;
        let mut perm_rng = ChaCha8Rng::seed_from_u64(config.seed);
        perm_rng.set_stream(1);
        let blocks: Vec<Block> = (0..config.blocks)
            .map(|b| {
                let mut perm: Vec<usize> = (0..d).collect();
                perm.shuffle(&mut perm_rng);
                let mut inv_perm = vec![0; d];
                for (i, &p) in perm.iter().enumerate() {
                    inv_perm[p] = i;
                }
                let mut unit = |c: usize| {
                    let an = ActNorm::new(&mut layout, &format!("block{b}.actnorm{c}"), d);
                    let cp = Coupling::new(
                        &mut layout,
                        &format!("block{b}.coupling{c}"),
                        d / 2,
                        config.hidden,
                        config.clamp,
                        &mut bn_count,
                        config.leaky_slope,
                        config.bn_eps,
                    );
                    (an, cp)
                };
                let (an0, cp0) = unit(0);
                let (an1, cp1) = unit(1);
                Block {
                    perm,
                    inv_perm,
                    actnorm: [an0, an1],
                    coupling: [cp0, cp1],
                }
            })
            .collect();

        let mut theta = vec![0.0; layout.len()];
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(2);
        for block in &blocks {
            for c in 0..2 {
                block.actnorm[c].init_identity(&mut theta);
                for net in block.coupling[c].nets() {
                    net.init(&mut theta, &mut init_rng);
                }
            }
        }
        let running = (0..bn_count)
            .map(|_| BatchStats {
                mean: Array1::zeros(config.hidden),
                var: Array1::ones(config.hidden),
            })
            .collect();
        Ok(Self {
            config,
            layout,
            theta,
            blocks,
            running,
            stats_initialized: false,
            actnorm_initialized: false,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn permutation(&self, block: usize) -> &[usize] {
        &self.blocks[block].perm
    }

    pub fn running_stats(&self) -> &[BatchStats] {
        &self.running
    }

    pub fn stats_initialized(&self) -> bool {
        self.stats_initialized
    }

    pub fn actnorm_initialized(&self) -> bool {
        self.actnorm_initialized
    }

    /// Actnorm layer `unit` (0 or 1) of block `block`.
    pub fn actnorm(&self, block: usize, unit: usize) -> &ActNorm {
        &self.blocks[block].actnorm[unit]
    }

    pub fn coupling(&self, block: usize, unit: usize) -> &Coupling {
        &self.blocks[block].coupling[unit]
    }

    fn check_input(&self, w: ArrayView2<f64>) -> Result<()> {
        if w.ncols() != self.config.dim || w.nrows() == 0 {
            return Err(Error::shape(&[w.nrows().max(1), self.config.dim], w.shape()));
        }
        Ok(())
    }

    fn norm_source(&self, mode: Mode) -> Result<NormSource<'_>> {
        match mode {
            Mode::Train => Ok(NormSource::Batch),
            Mode::Eval if self.stats_initialized => Ok(NormSource::Running(&self.running)),
            Mode::Eval => Err(Error::UninitializedStats),
        }
    }

    /// Maps a batch of latents (one per row) to raw outputs and per-sample log-determinants.
    pub fn forward(&self, w: ArrayView2<f64>, mode: Mode) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_input(w)?;
        let norm = self.norm_source(mode)?;
        let mut x = w.to_owned();
        let mut logdet = Array1::zeros(w.nrows());
        for block in &self.blocks {
            x = x.select(Axis(1), &block.perm);
            for c in 0..2 {
                let (y, ld) = block.actnorm[c].forward(&self.theta, x.view())?;
                logdet += ld;
                let (y, ld) = block.coupling[c].forward(&self.theta, y.view(), norm)?;
                logdet += &ld;
                x = y;
            }
        }
        Ok((x, logdet))
    }

    pub fn forward_one(&self, w: ArrayView1<f64>, mode: Mode) -> Result<(Array1<f64>, f64)> {
        let (z, ld) = self.forward(w.insert_axis(Axis(0)), mode)?;
        Ok((z.row(0).to_owned(), ld[0]))
    }

    /// Training-mode forward pass that records everything the backward pass needs.
    pub fn forward_tape(&self, w: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>, FlowTape)> {
        self.check_input(w)?;
        let mut x = w.to_owned();
        let mut logdet = Array1::zeros(w.nrows());
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = x.select(Axis(1), &block.perm);
            let (a0, c0, x1) = self.unit_tape(block, 0, x, &mut logdet)?;
            let (a1, c1, x2) = self.unit_tape(block, 1, x1, &mut logdet)?;
            x = x2;
            tapes.push(BlockTape {
                actnorm_in: [a0, a1],
                coupling: [c0, c1],
            });
        }
        Ok((x, logdet, FlowTape { blocks: tapes }))
    }

    fn unit_tape(
        &self,
        block: &Block,
        c: usize,
        x: Array2<f64>,
        logdet: &mut Array1<f64>,
    ) -> Result<(Array2<f64>, CouplingCache, Array2<f64>)> {
        let (y, ld) = block.actnorm[c].forward(&self.theta, x.view())?;
        *logdet += ld;
        let (out, ld, cache) = block.coupling[c].forward_train(&self.theta, y.view())?;
        *logdet += &ld;
        Ok((x, cache, out))
    }

    /// Accumulates `d(objective)/d(theta)` into `grad` and returns the latent gradient.
    ///
    /// `g_out` is the gradient w.r.t. the flow output and `g_logdet[k]` the
    /// gradient w.r.t. sample `k`'s log-determinant.
    pub fn backward(
        &self,
        tape: &FlowTape,
        g_out: ArrayView2<f64>,
        g_logdet: ArrayView1<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        assert_eq!(grad.len(), self.theta.len(), "gradient buffer size");
        let gl_total = g_logdet.sum();
        let mut g = g_out.to_owned();
        for (block, bt) in self.blocks.iter().zip(&tape.blocks).rev() {
            for c in (0..2).rev() {
                g = block.coupling[c].backward(&self.theta, &bt.coupling[c], g.view(), g_logdet, grad);
                g = block.actnorm[c].backward(&self.theta, bt.actnorm_in[c].view(), g.view(), gl_total, grad);
            }
            g = g.select(Axis(1), &block.inv_perm);
        }
        g
    }

    /// Exact inverse in eval mode.
    pub fn inverse(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(z)?;
        if !self.stats_initialized {
            return Err(Error::UninitializedStats);
        }
        let mut x = z.to_owned();
        for block in self.blocks.iter().rev() {
            for c in (0..2).rev() {
                x = block.coupling[c].inverse(&self.theta, x.view(), &self.running)?;
                x = block.actnorm[c].inverse(&self.theta, x.view())?;
            }
            x = x.select(Axis(1), &block.inv_perm);
        }
        Ok(x)
    }

    /// Folds a tape's batch statistics into the running averages.
    ///
    /// The first call copies the statistics directly.
    pub fn commit_batch_stats(&mut self, tape: &FlowTape) {
        let momentum = self.config.bn_momentum;
        let first = !self.stats_initialized;
        for (block, bt) in self.blocks.iter().zip(&tape.blocks) {
            for c in 0..2 {
                for (idx, stats) in block.coupling[c].batch_stats(&bt.coupling[c]) {
                    let run = &mut self.running[idx];
                    if first {
                        run.mean.assign(&stats.mean);
                        run.var.assign(&stats.var);
                    } else {
                        run.mean = &run.mean * momentum + &(&stats.mean * (1.0 - momentum));
                        run.var = &run.var * momentum + &(&stats.var * (1.0 - momentum));
                    }
                }
            }
        }
        self.stats_initialized = true;
    }

    /// Runs one training-mode pass over `w` and records its batch statistics.
    pub fn calibrate(&mut self, w: ArrayView2<f64>) -> Result<()> {
        let (_, _, tape) = self.forward_tape(w)?;
        self.commit_batch_stats(&tape);
        Ok(())
    }

    /// Data-dependent actnorm initialization: each actnorm is fitted, in order,
    /// to the activations `w` produces at its input.
    pub fn initialize_actnorm(&mut self, w: ArrayView2<f64>) -> Result<()> {
        self.check_input(w)?;
        let mut x = w.to_owned();
        for b in 0..self.blocks.len() {
            x = x.select(Axis(1), &self.blocks[b].perm);
            for c in 0..2 {
                let an = self.blocks[b].actnorm[c].clone();
                an.init_from_data(&mut self.theta, x.view());
                let (y, _) = an.forward(&self.theta, x.view())?;
                let (y, _) = self.blocks[b].coupling[c].forward(&self.theta, y.view(), NormSource::Batch)?;
                x = y;
            }
        }
        self.actnorm_initialized = true;
        Ok(())
    }

    pub(crate) fn set_state(
        &mut self,
        theta: Vec<f64>,
        running: Vec<BatchStats>,
        stats_initialized: bool,
        actnorm_initialized: bool,
    ) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::shape(&[self.theta.len()], &[theta.len()]));
        }
        if running.len() != self.running.len()
            || running
                .iter()
                .any(|r| r.mean.len() != self.config.hidden || r.var.len() != self.config.hidden)
        {
            return Err(Error::InvalidConfig(
                "batch-norm statistics do not match the architecture".into(),
            ));
        }
        self.theta = theta;
        self.running = running;
        self.stats_initialized = stats_initialized;
        self.actnorm_initialized = actnorm_initialized;
        Ok(())
    }
}

/// `batch` i.i.d. standard normal latents of dimension `dim`, deterministic per seed.
pub fn sample_latent(batch: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    latent_from_rng(batch, dim, &mut rng)
}

pub(crate) fn latent_from_rng(batch: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((batch, dim), || StandardNormal.sample(rng))
}
