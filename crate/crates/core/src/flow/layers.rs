//! Differentiable building blocks of the flow.
//!
//! Every layer reads its parameters from the flat vector `theta` through
//! [`Slot`]s, records what its backward pass needs in a cache, and
//! accumulates parameter gradients into a buffer laid out like `theta`.
//! Inputs are batches: one sample per row.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamLayout, Slot};
use crate::error::{Error, Result};

/// Fully connected layer `y = x W + b` with `W` stored `inputs x outputs`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Slot,
    pub bias: Slot,
}

impl Dense {
    pub fn new(layout: &mut ParamLayout, name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: layout.alloc(format!("{name}.weight"), inputs, outputs),
            bias: layout.alloc(format!("{name}.bias"), 1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols
    }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights and zero bias, or all zeros.
    pub fn init(&self, theta: &mut [f64], rng: &mut impl Rng, zero: bool) {
        let bound = 1.0 / (self.inputs() as f64).sqrt();
        for w in &mut theta[self.weight.range()] {
            *w = if zero { 0.0 } else { rng.random_range(-bound..bound) };
        }
        theta[self.bias.range()].fill(0.0);
    }

    pub fn forward(&self, theta: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.matrix(theta));
        y += &self.bias.vector(theta);
        y
    }

    pub fn backward(&self, theta: &[f64], x: ArrayView2<f64>, gy: ArrayView2<f64>, grad: &mut [f64]) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), &gy, 1.0, &mut self.weight.matrix_mut(grad));
        self.bias.vector_mut(grad).scaled_add(1.0, &gy.sum_axis(Axis(0)));
        gy.dot(&self.weight.matrix(theta).t())
    }
}

/// Per-feature mean and (population) variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    pub stats: BatchStats,
}

/// Batch normalization with learned scale (`gamma`) and shift (`beta`).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Slot,
    pub beta: Slot,
    /// Position of this layer's running statistics in the model state.
    pub index: usize,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, features: usize, index: usize, eps: f64) -> Self {
        Self {
            gamma: layout.alloc(format!("{name}.gamma"), 1, features),
            beta: layout.alloc(format!("{name}.beta"), 1, features),
            index,
            eps,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.cols
    }

    pub fn init(&self, theta: &mut [f64]) {
        theta[self.gamma.range()].fill(1.0);
        theta[self.beta.range()].fill(0.0);
    }

    pub fn forward_train(&self, theta: &[f64], x: ArrayView2<f64>) -> (Array2<f64>, BatchNormCache) {
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = centered * &inv_std;
        let y = &xhat * &self.gamma.vector(theta) + &self.beta.vector(theta);
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                stats: BatchStats { mean, var },
            },
        )
    }

    pub fn forward_eval(&self, theta: &[f64], x: ArrayView2<f64>, running: &BatchStats) -> Array2<f64> {
        let inv_std = running.var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let scale = &inv_std * &self.gamma.vector(theta);
        let shift = &self.beta.vector(theta) - &(&running.mean * &scale);
        &x * &scale + &shift
    }

    pub fn backward(
        &self,
        theta: &[f64],
        cache: &BatchNormCache,
        gy: ArrayView2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let b = gy.nrows() as f64;
        self.gamma
            .vector_mut(grad)
            .scaled_add(1.0, &(&gy * &cache.xhat).sum_axis(Axis(0)));
        self.beta.vector_mut(grad).scaled_add(1.0, &gy.sum_axis(Axis(0)));
        let gxhat = &gy * &self.gamma.vector(theta);
        let sum_g = gxhat.sum_axis(Axis(0));
        let sum_gx = (&gxhat * &cache.xhat).sum_axis(Axis(0));
        let inner = gxhat * b - &sum_g - &(&cache.xhat * &sum_gx);
        inner * &(&cache.inv_std / b)
    }
}

pub fn leaky_relu(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Array2<f64>, gy: &Array2<f64>, slope: f64) -> Array2<f64> {
    ndarray::Zip::from(x)
        .and(gy)
        .map_collect(|&v, &g| if v > 0.0 { g } else { slope * g })
}

/// Soft clamp `c * tanh(s / c)`, bounding log-scales to `(-c, c)`.
pub fn clamp_scale(s: &Array2<f64>, c: f64) -> Array2<f64> {
    s.mapv(|v| c * (v / c).tanh())
}

pub fn clamp_scale_backward(s: &Array2<f64>, gy: &Array2<f64>, c: f64) -> Array2<f64> {
    ndarray::Zip::from(s).and(gy).map_collect(|&v, &g| {
        let t = (v / c).tanh();
        g * (1.0 - t * t)
    })
}

/// Scale/shift network: dense -> BN -> leaky ReLU -> dense -> BN -> leaky ReLU -> dense.
#[derive(Debug, Clone)]
pub struct SubNet {
    pub hidden1: Dense,
    pub norm1: BatchNorm,
    pub hidden2: Dense,
    pub norm2: BatchNorm,
    pub output: Dense,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct SubNetCache {
    x: Array2<f64>,
    norm1: BatchNormCache,
    y1: Array2<f64>,
    a1: Array2<f64>,
    norm2: BatchNormCache,
    y2: Array2<f64>,
    a2: Array2<f64>,
}

impl SubNet {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        width: usize,
        hidden: usize,
        bn_index: &mut usize,
        slope: f64,
        eps: f64,
    ) -> Self {
        let mut next_bn = || {
            *bn_index += 1;
            *bn_index - 1
        };
        let hidden1 = Dense::new(layout, &format!("{name}.dense0"), width, hidden);
        let norm1 = BatchNorm::new(layout, &format!("{name}.bn0"), hidden, next_bn(), eps);
        let hidden2 = Dense::new(layout, &format!("{name}.dense1"), hidden, hidden);
        let norm2 = BatchNorm::new(layout, &format!("{name}.bn1"), hidden, next_bn(), eps);
        let output = Dense::new(layout, &format!("{name}.dense2"), hidden, width);
        Self {
            hidden1,
            norm1,
            hidden2,
            norm2,
            output,
            slope,
        }
    }

    /// Output layer starts at zero so the net initially outputs 0.
    pub fn init(&self, theta: &mut [f64], rng: &mut impl Rng) {
        self.hidden1.init(theta, rng, false);
        self.norm1.init(theta);
        self.hidden2.init(theta, rng, false);
        self.norm2.init(theta);
        self.output.init(theta, rng, true);
    }

    pub fn forward_train(&self, theta: &[f64], x: ArrayView2<f64>) -> (Array2<f64>, SubNetCache) {
        let h1 = self.hidden1.forward(theta, x);
        let (y1, norm1) = self.norm1.forward_train(theta, h1.view());
        let a1 = leaky_relu(&y1, self.slope);
        let h2 = self.hidden2.forward(theta, a1.view());
        let (y2, norm2) = self.norm2.forward_train(theta, h2.view());
        let a2 = leaky_relu(&y2, self.slope);
        let out = self.output.forward(theta, a2.view());
        let cache = SubNetCache {
            x: x.to_owned(),
            norm1,
            y1,
            a1,
            norm2,
            y2,
            a2,
        };
        (out, cache)
    }

    pub fn forward_eval(&self, theta: &[f64], x: ArrayView2<f64>, running: &[BatchStats]) -> Array2<f64> {
        let h1 = self.hidden1.forward(theta, x);
        let y1 = self.norm1.forward_eval(theta, h1.view(), &running[self.norm1.index]);
        let a1 = leaky_relu(&y1, self.slope);
        let h2 = self.hidden2.forward(theta, a1.view());
        let y2 = self.norm2.forward_eval(theta, h2.view(), &running[self.norm2.index]);
        let a2 = leaky_relu(&y2, self.slope);
        self.output.forward(theta, a2.view())
    }

    pub fn backward(&self, theta: &[f64], cache: &SubNetCache, gy: ArrayView2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let g_a2 = self.output.backward(theta, cache.a2.view(), gy, grad);
        let g_y2 = leaky_relu_backward(&cache.y2, &g_a2, self.slope);
        let g_h2 = self.norm2.backward(theta, &cache.norm2, g_y2.view(), grad);
        let g_a1 = self.hidden2.backward(theta, cache.a1.view(), g_h2.view(), grad);
        let g_y1 = leaky_relu_backward(&cache.y1, &g_a1, self.slope);
        let g_h1 = self.norm1.backward(theta, &cache.norm1, g_y1.view(), grad);
        self.hidden1.backward(theta, cache.x.view(), g_h1.view(), grad)
    }

    pub fn batch_stats<'a>(&self, cache: &'a SubNetCache) -> [(usize, &'a BatchStats); 2] {
        [
            (self.norm1.index, &cache.norm1.stats),
            (self.norm2.index, &cache.norm2.stats),
        ]
    }
}

/// Per-dimension affine map `v = scale * u + bias` with data-dependent initialization.
#[derive(Debug, Clone)]
pub struct ActNorm {
    pub scale: Slot,
    pub bias: Slot,
}

impl ActNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        Self {
            scale: layout.alloc(format!("{name}.scale"), 1, dim),
            bias: layout.alloc(format!("{name}.bias"), 1, dim),
        }
    }

    pub fn init_identity(&self, theta: &mut [f64]) {
        theta[self.scale.range()].fill(1.0);
        theta[self.bias.range()].fill(0.0);
    }

    /// Sets scale and bias so that `u` maps to zero mean, unit variance per dimension.
    pub fn init_from_data(&self, theta: &mut [f64], u: ArrayView2<f64>) {
        let mean = u.mean_axis(Axis(0)).expect("non-empty batch");
        let std = u.var_axis(Axis(0), 0.0).mapv(f64::sqrt);
        for (i, (&mu, &sd)) in mean.iter().zip(std.iter()).enumerate() {
            let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
            theta[self.scale.offset + i] = scale;
            theta[self.bias.offset + i] = -mu * scale;
        }
    }

    /// Log-determinant contribution, identical for every sample.
    pub fn logdet(&self, theta: &[f64]) -> Result<f64> {
        let scale = self.scale.vector(theta);
        if scale.iter().any(|&s| s == 0.0) {
            return Err(Error::Degenerate("actnorm scale is zero".into()));
        }
        Ok(scale.iter().map(|s| s.abs().ln()).sum())
    }

    pub fn forward(&self, theta: &[f64], u: ArrayView2<f64>) -> Result<(Array2<f64>, f64)> {
        let logdet = self.logdet(theta)?;
        Ok((&u * &self.scale.vector(theta) + &self.bias.vector(theta), logdet))
    }

    pub fn inverse(&self, theta: &[f64], v: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.logdet(theta)?;
        Ok((&v - &self.bias.vector(theta)) / &self.scale.vector(theta))
    }

    /// `glogdet_total` is the summed upstream gradient of every sample's logdet.
    pub fn backward(
        &self,
        theta: &[f64],
        u: ArrayView2<f64>,
        gv: ArrayView2<f64>,
        glogdet_total: f64,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let scale = self.scale.vector(theta);
        let gscale = (&gv * &u).sum_axis(Axis(0)) + &scale.mapv(|s| glogdet_total / s);
        self.scale.vector_mut(grad).scaled_add(1.0, &gscale);
        self.bias.vector_mut(grad).scaled_add(1.0, &gv.sum_axis(Axis(0)));
        &gv * &scale
    }
}

/// Two-sided affine coupling unit.
///
/// With `u = (u1, u2)`:
/// `v1 = u2 * exp(s1(u1)) + t1(u1)`, then `v2 = u1 * exp(s2(v1)) + t2(v1)`;
/// the output is `(v1, v2)` and `log|det J| = sum s1(u1) + sum s2(v1)`
/// where each `s` is soft-clamped.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub s1: SubNet,
    pub t1: SubNet,
    pub s2: SubNet,
    pub t2: SubNet,
    pub half: usize,
    pub clamp: f64,
}

#[derive(Debug, Clone)]
pub struct CouplingCache {
    u1: Array2<f64>,
    u2: Array2<f64>,
    s1_raw: Array2<f64>,
    e1: Array2<f64>,
    s2_raw: Array2<f64>,
    e2: Array2<f64>,
    s1: SubNetCache,
    t1: SubNetCache,
    s2: SubNetCache,
    t2: SubNetCache,
}

/// Where a coupling's subnets take their batch-norm statistics from.
#[derive(Debug, Clone, Copy)]
pub enum NormSource<'a> {
    Batch,
    Running(&'a [BatchStats]),
}

impl Coupling {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        half: usize,
        hidden: usize,
        clamp: f64,
        bn_index: &mut usize,
        slope: f64,
        eps: f64,
    ) -> Self {
        let mut net = |tag: &str| SubNet::new(layout, &format!("{name}.{tag}"), half, hidden, bn_index, slope, eps);
        Self {
            s1: net("s1"),
            t1: net("t1"),
            s2: net("s2"),
            t2: net("t2"),
            half,
            clamp,
        }
    }

    pub fn nets(&self) -> [&SubNet; 4] {
        [&self.s1, &self.t1, &self.s2, &self.t2]
    }

    fn split(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.ncols() != 2 * self.half {
            return Err(Error::shape(&[x.nrows(), 2 * self.half], x.shape()));
        }
        Ok((
            x.slice(s![.., ..self.half]).to_owned(),
            x.slice(s![.., self.half..]).to_owned(),
        ))
    }

    fn eval_net(&self, net: &SubNet, theta: &[f64], x: ArrayView2<f64>, norm: NormSource) -> Array2<f64> {
        match norm {
            NormSource::Batch => net.forward_train(theta, x).0,
            NormSource::Running(r) => net.forward_eval(theta, x, r),
        }
    }

    /// Forward pass without recording; returns `(v, logdet per sample)`.
    pub fn forward(&self, theta: &[f64], u: ArrayView2<f64>, norm: NormSource) -> Result<(Array2<f64>, Array1<f64>)> {
        let (u1, u2) = self.split(u)?;
        let s1 = clamp_scale(&self.eval_net(&self.s1, theta, u1.view(), norm), self.clamp);
        let v1 = &u2 * &s1.mapv(f64::exp) + &self.eval_net(&self.t1, theta, u1.view(), norm);
        let s2 = clamp_scale(&self.eval_net(&self.s2, theta, v1.view(), norm), self.clamp);
        let v2 = &u1 * &s2.mapv(f64::exp) + &self.eval_net(&self.t2, theta, v1.view(), norm);
        let logdet = s1.sum_axis(Axis(1)) + s2.sum_axis(Axis(1));
        Ok((concatenate![Axis(1), v1, v2], logdet))
    }

    pub fn forward_train(
        &self,
        theta: &[f64],
        u: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>, CouplingCache)> {
        let (u1, u2) = self.split(u)?;
        let (s1_raw, s1_cache) = self.s1.forward_train(theta, u1.view());
        let (t1_out, t1_cache) = self.t1.forward_train(theta, u1.view());
        let s1_hat = clamp_scale(&s1_raw, self.clamp);
        let e1 = s1_hat.mapv(f64::exp);
        let v1 = &u2 * &e1 + &t1_out;
        let (s2_raw, s2_cache) = self.s2.forward_train(theta, v1.view());
        let (t2_out, t2_cache) = self.t2.forward_train(theta, v1.view());
        let s2_hat = clamp_scale(&s2_raw, self.clamp);
        let e2 = s2_hat.mapv(f64::exp);
        let v2 = &u1 * &e2 + &t2_out;
        let logdet = s1_hat.sum_axis(Axis(1)) + s2_hat.sum_axis(Axis(1));
        let v = concatenate![Axis(1), v1, v2];
        let cache = CouplingCache {
            u1,
            u2,
            s1_raw,
            e1,
            s2_raw,
            e2,
            s1: s1_cache,
            t1: t1_cache,
            s2: s2_cache,
            t2: t2_cache,
        };
        Ok((v, logdet, cache))
    }

    pub fn inverse(&self, theta: &[f64], v: ArrayView2<f64>, running: &[BatchStats]) -> Result<Array2<f64>> {
        let (v1, v2) = self.split(v)?;
        let s2 = clamp_scale(&self.s2.forward_eval(theta, v1.view(), running), self.clamp);
        let u1 = (&v2 - &self.t2.forward_eval(theta, v1.view(), running)) * &s2.mapv(|x| (-x).exp());
        let s1 = clamp_scale(&self.s1.forward_eval(theta, u1.view(), running), self.clamp);
        let u2 = (&v1 - &self.t1.forward_eval(theta, u1.view(), running)) * &s1.mapv(|x| (-x).exp());
        Ok(concatenate![Axis(1), u1, u2])
    }

    /// `glogdet[k]` is the upstream gradient of sample `k`'s logdet.
    pub fn backward(
        &self,
        theta: &[f64],
        cache: &CouplingCache,
        gv: ArrayView2<f64>,
        glogdet: ArrayView1<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let h = self.half;
        let gl = glogdet.insert_axis(Axis(1));
        let mut gv1 = gv.slice(s![.., ..h]).to_owned();
        let gv2 = gv.slice(s![.., h..]).to_owned();

        // v2 = u1 * e2 + t2(v1)
        let mut gu1 = &gv2 * &cache.e2;
        let g_s2_hat = &gv2 * &cache.u1 * &cache.e2 + &gl;
        let g_s2_raw = clamp_scale_backward(&cache.s2_raw, &g_s2_hat, self.clamp);
        gv1 += &self.s2.backward(theta, &cache.s2, g_s2_raw.view(), grad);
        gv1 += &self.t2.backward(theta, &cache.t2, gv2.view(), grad);

        // v1 = u2 * e1 + t1(u1)
        let gu2 = &gv1 * &cache.e1;
        let g_s1_hat = &gv1 * &cache.u2 * &cache.e1 + &gl;
        let g_s1_raw = clamp_scale_backward(&cache.s1_raw, &g_s1_hat, self.clamp);
        gu1 += &self.s1.backward(theta, &cache.s1, g_s1_raw.view(), grad);
        gu1 += &self.t1.backward(theta, &cache.t1, gv1.view(), grad);

        concatenate![Axis(1), gu1, gu2]
    }

    pub fn batch_stats<'a>(&self, cache: &'a CouplingCache) -> Vec<(usize, &'a BatchStats)> {
        let mut out = Vec::with_capacity(8);
        out.extend(self.s1.batch_stats(&cache.s1));
        out.extend(self.t1.batch_stats(&cache.t1));
        out.extend(self.s2.batch_stats(&cache.s2));
        out.extend(self.t2.batch_stats(&cache.t2));
        out
    }
}
