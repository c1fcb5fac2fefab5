//! Variational objective: amplitude misfit, total-variation prior and the
//! flow's log-determinant, with exact reverse-mode gradients.
//!
//! For a latent batch `{w_k}` the objective is
//!
//! ```text
//! sum_k  L(d | f(z_k)) + lambda * R(z_k) - log|det dG/dw|(w_k),   z_k = normalize(G(w_k))
//! ```
//!
//! where `L` is the amplitude misfit, `R` the smoothed anisotropic TV of the
//! real and imaginary channels, and `normalize` divides by the largest pixel
//! magnitude.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{FlowModel, Mode};
use crate::geometry::Probe;
use crate::physics::{ComplexField, DiffractionData, ForwardModel};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObjectiveConfig {
    /// Weight of the TV prior.
    pub lambda: f64,
    /// Noise scale in the misfit denominator `2 sigma^2`.
    pub sigma: f64,
    /// TV smoothing.
    pub tv_eps: f64,
}

impl ObjectiveConfig {
    pub const DEFAULT_LAMBDA: f64 = 0.01;
    pub const DEFAULT_TV_EPS: f64 = 1e-3;

    /// Uses the data's recorded noise level (1 for clean data).
    pub fn for_data(data: &DiffractionData, lambda: f64) -> Self {
        Self {
            lambda,
            sigma: data.misfit_sigma(),
            tv_eps: Self::DEFAULT_TV_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.sigma > 0.0) || !(self.tv_eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "objective needs lambda >= 0, sigma > 0, eps > 0 (got {:?})",
                self
            )));
        }
        Ok(())
    }
}

/// A flow output reshaped into a complex object and scaled to unit peak magnitude.
#[derive(Debug, Clone)]
pub struct NormalizedObject {
    pub object: ComplexField,
    pub raw: ComplexField,
    /// Row-major index of the first pixel attaining the peak magnitude.
    pub peak_index: usize,
    pub peak: f64,
}

/// Splits a raw `2n^2` vector into real (first half) and imaginary (second
/// half) parts of an `n x n` object and divides by the peak magnitude.
pub fn object_from_raw(raw: ArrayView1<f64>, n: usize) -> Result<NormalizedObject> {
    let n2 = n * n;
    if raw.len() != 2 * n2 {
        return Err(Error::shape(&[2 * n2], &[raw.len()]));
    }
    let raw = Array2::from_shape_fn((n, n), |(r, c)| Complex64::new(raw[r * n + c], raw[n2 + r * n + c]));
    let mut peak = 0.0;
    let mut peak_index = 0;
    for (i, v) in raw.iter().enumerate() {
        let m = v.norm();
        if m > peak {
            peak = m;
            peak_index = i;
        }
    }
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::Degenerate(
            "flow output is zero or non-finite; cannot normalize".into(),
        ));
    }
    Ok(NormalizedObject {
        object: raw.mapv(|v| v / peak),
        raw,
        peak_index,
        peak,
    })
}

/// Pulls a gradient w.r.t. the normalized object back to the raw `2n^2` vector.
pub fn normalize_backward(norm: &NormalizedObject, g_object: &ComplexField) -> Array1<f64> {
    let n = norm.raw.nrows();
    let n2 = n * n;
    let m = norm.peak;
    let mut g_raw = g_object.mapv(|g| g / m);
    let inner: f64 = g_object
        .iter()
        .zip(norm.raw.iter())
        .map(|(g, z)| g.re * z.re + g.im * z.im)
        .sum();
    let (pr, pc) = (norm.peak_index / n, norm.peak_index % n);
    g_raw[[pr, pc]] -= norm.raw[[pr, pc]] * (inner / (m * m * m));
    let mut out = Array1::zeros(2 * n2);
    for (i, g) in g_raw.iter().enumerate() {
        out[i] = g.re;
        out[n2 + i] = g.im;
    }
    out
}

/// Pushes the latent `w` through the flow (eval mode) and normalizes the result.
pub fn latent_to_object(model: &FlowModel, w: ArrayView1<f64>, n: usize) -> Result<ComplexField> {
    let (raw, _) = model.forward_one(w, Mode::Eval)?;
    Ok(object_from_raw(raw.view(), n)?.object)
}

fn amplitude_residuals(
    forward: &ForwardModel,
    sqrt_data: &Array3<f64>,
    object: ArrayView2<Complex64>,
    j: usize,
) -> Result<(ComplexField, Array2<f64>)> {
    let far = forward.far_field(object, j)?;
    let resid = ndarray::Zip::from(&far)
        .and(sqrt_data.index_axis(Axis(0), j))
        .map_collect(|psi, &a| psi.norm() - a);
    Ok((far, resid))
}

/// `sum_j 1/(2 sigma^2) || |F(P_j z)| - sqrt(d_j) ||^2`.
pub fn amplitude_misfit(
    object: ArrayView2<Complex64>,
    forward: &ForwardModel,
    sqrt_data: &Array3<f64>,
    sigma: f64,
) -> Result<f64> {
    forward.check_object(object)?;
    let mut total = 0.0;
    for j in 0..forward.geometry().num_scans() {
        let (_, resid) = amplitude_residuals(forward, sqrt_data, object, j)?;
        total += resid.iter().map(|r| r * r).sum::<f64>();
    }
    Ok(total / (2.0 * sigma * sigma))
}

/// Misfit value and its gradient w.r.t. the object (as `dL/dRe + i dL/dIm`).
///
/// The modulus gradient is taken as zero wherever `|F(P_j z)| = 0`.
pub fn amplitude_misfit_grad(
    object: ArrayView2<Complex64>,
    forward: &ForwardModel,
    sqrt_data: &Array3<f64>,
    sigma: f64,
) -> Result<(f64, ComplexField)> {
    forward.check_object(object)?;
    let g = forward.geometry();
    let m = g.probe_size();
    let inv_var = 1.0 / (sigma * sigma);
    let probe_conj = forward.probe().values().mapv(|p| p.conj());
    let mut total = 0.0;
    let mut grad = ComplexField::zeros(object.dim());
    for (j, &(r, c)) in g.positions().iter().enumerate() {
        let (far, resid) = amplitude_residuals(forward, sqrt_data, object, j)?;
        total += resid.iter().map(|x| x * x).sum::<f64>();
        let mut g_far = ndarray::Zip::from(&far).and(&resid).map_collect(|psi, &res| {
            let a = psi.norm();
            if a > 0.0 {
                psi * (res * inv_var / a)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        forward.fft().inverse(&mut g_far);
        let g_patch = g_far * &probe_conj;
        let mut window = grad.slice_mut(s![r..r + m, c..c + m]);
        window += &g_patch;
    }
    Ok((total * inv_var / 2.0, grad))
}

fn tv_channel(x: &Array2<f64>, eps: f64, grad: Option<&mut Array2<f64>>) -> f64 {
    let (rows, cols) = x.dim();
    let mut total = 0.0;
    let mut g = grad;
    let mut visit = |a: (usize, usize), b: (usize, usize), total: &mut f64| {
        let d = x[b] - x[a];
        let root = (d * d + eps * eps).sqrt();
        *total += root - eps;
        if let Some(g) = g.as_deref_mut() {
            let q = if root > 0.0 { d / root } else { 0.0 };
            g[b] += q;
            g[a] -= q;
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                visit((r, c), (r, c + 1), &mut total);
            }
            if r + 1 < rows {
                visit((r, c), (r + 1, c), &mut total);
            }
        }
    }
    total
}

/// Smoothed anisotropic TV over the real and imaginary channels:
/// `sum sqrt(dx^2 + eps^2) - eps` over horizontal and vertical neighbour pairs.
pub fn tv_regularizer(object: ArrayView2<Complex64>, eps: f64) -> f64 {
    tv_channel(&object.mapv(|v| v.re), eps, None) + tv_channel(&object.mapv(|v| v.im), eps, None)
}

pub fn tv_regularizer_grad(object: ArrayView2<Complex64>, eps: f64) -> (f64, ComplexField) {
    let mut g_re = Array2::zeros(object.dim());
    let mut g_im = Array2::zeros(object.dim());
    let value = tv_channel(&object.mapv(|v| v.re), eps, Some(&mut g_re))
        + tv_channel(&object.mapv(|v| v.im), eps, Some(&mut g_im));
    let grad = ndarray::Zip::from(&g_re)
        .and(&g_im)
        .map_collect(|&a, &b| Complex64::new(a, b));
    (value, grad)
}

/// Per-sample decomposition of the objective for one latent batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboTerms {
    pub misfit: Vec<f64>,
    pub tv: Vec<f64>,
    pub logdet: Vec<f64>,
    pub lambda: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.misfit
            .iter()
            .zip(&self.tv)
            .zip(&self.logdet)
            .map(|((l, r), ld)| l + self.lambda * r - ld)
            .sum()
    }

    pub fn batch_size(&self) -> usize {
        self.misfit.len()
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn mean_misfit(&self) -> f64 {
        Self::mean(&self.misfit)
    }

    pub fn mean_tv(&self) -> f64 {
        Self::mean(&self.tv)
    }

    pub fn mean_logdet(&self) -> f64 {
        Self::mean(&self.logdet)
    }
}

/// The objective for a fixed dataset, probe and geometry.
#[derive(Debug, Clone)]
pub struct Objective {
    forward: ForwardModel,
    sqrt_data: Array3<f64>,
    config: ObjectiveConfig,
}

struct SampleGrad {
    misfit: f64,
    tv: f64,
    g_raw: Array1<f64>,
}

impl Objective {
    pub fn new(data: &DiffractionData, probe: &Probe, config: ObjectiveConfig) -> Result<Self> {
        config.validate()?;
        if let Some(&value) = data.patterns.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::NegativeIntensity { value });
        }
        Ok(Self {
            forward: ForwardModel::new(data.geometry.clone(), probe.clone())?,
            sqrt_data: data.patterns.mapv(f64::sqrt),
            config,
        })
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.config
    }

    pub fn forward_model(&self) -> &ForwardModel {
        &self.forward
    }

    pub fn fov_size(&self) -> usize {
        self.forward.geometry().fov_size()
    }

    pub fn misfit(&self, object: ArrayView2<Complex64>) -> Result<f64> {
        amplitude_misfit(object, &self.forward, &self.sqrt_data, self.config.sigma)
    }

    pub fn misfit_grad(&self, object: ArrayView2<Complex64>) -> Result<(f64, ComplexField)> {
        amplitude_misfit_grad(object, &self.forward, &self.sqrt_data, self.config.sigma)
    }

    fn check_dim(&self, model: &FlowModel) -> Result<()> {
        let n = self.fov_size();
        if model.dim() != 2 * n * n {
            return Err(Error::shape(&[2 * n * n], &[model.dim()]));
        }
        Ok(())
    }

    fn sample_values(&self, raw: ArrayView1<f64>) -> Result<(f64, f64)> {
        let norm = object_from_raw(raw, self.fov_size())?;
        let misfit = self.misfit(norm.object.view())?;
        let tv = tv_regularizer(norm.object.view(), self.config.tv_eps);
        Ok((misfit, tv))
    }

    fn sample_grad(&self, raw: ArrayView1<f64>) -> Result<SampleGrad> {
        let norm = object_from_raw(raw, self.fov_size())?;
        let (misfit, g_misfit) = self.misfit_grad(norm.object.view())?;
        ensure_finite(g_misfit.iter().flat_map(|c| [c.re, c.im]), "amplitude misfit")?;
        let (tv, g_tv) = tv_regularizer_grad(norm.object.view(), self.config.tv_eps);
        ensure_finite(g_tv.iter().flat_map(|c| [c.re, c.im]), "total variation")?;
        let g_object = g_misfit + &g_tv.mapv(|g| g * self.config.lambda);
        let g_raw = normalize_backward(&norm, &g_object);
        ensure_finite(g_raw.iter().copied(), "max-magnitude normalization")?;
        Ok(SampleGrad { misfit, tv, g_raw })
    }

    /// Objective terms for a latent batch, batch norm in training mode.
    pub fn evaluate(&self, model: &FlowModel, w: ArrayView2<f64>) -> Result<ElboTerms> {
        self.check_dim(model)?;
        let (raw, logdet) = model.forward(w, Mode::Train)?;
        let per_sample: Vec<(f64, f64)> = (0..raw.nrows())
            .into_par_iter()
            .map(|k| self.sample_values(raw.row(k)))
            .collect::<Result<_>>()?;
        Ok(ElboTerms {
            misfit: per_sample.iter().map(|p| p.0).collect(),
            tv: per_sample.iter().map(|p| p.1).collect(),
            logdet: logdet.to_vec(),
            lambda: self.config.lambda,
        })
    }

    /// Objective terms and the gradient w.r.t. every entry of `theta`.
    pub fn gradient(&self, model: &FlowModel, w: ArrayView2<f64>) -> Result<(ElboTerms, Vec<f64>)> {
        let (terms, grad, _) = self.gradient_with_tape(model, w)?;
        Ok((terms, grad))
    }

    /// As [`Objective::gradient`], also returning the tape so the caller can
    /// commit its batch statistics.
    pub fn gradient_with_tape(
        &self,
        model: &FlowModel,
        w: ArrayView2<f64>,
    ) -> Result<(ElboTerms, Vec<f64>, crate::flow::FlowTape)> {
        self.check_dim(model)?;
        let (raw, logdet, tape) = model.forward_tape(w)?;
        let samples: Vec<SampleGrad> = (0..raw.nrows())
            .into_par_iter()
            .map(|k| self.sample_grad(raw.row(k)))
            .collect::<Result<_>>()?;
        let mut g_raw = Array2::zeros(raw.dim());
        for (k, s) in samples.iter().enumerate() {
            g_raw.row_mut(k).assign(&s.g_raw);
        }
        // The objective subtracts each sample's log-determinant.
        let g_logdet = Array1::from_elem(raw.nrows(), -1.0);
        let mut grad = vec![0.0; model.num_params()];
        model.backward(&tape, g_raw.view(), g_logdet.view(), &mut grad);
        ensure_finite(grad.iter().copied(), "flow backward")?;
        let terms = ElboTerms {
            misfit: samples.iter().map(|s| s.misfit).collect(),
            tv: samples.iter().map(|s| s.tv).collect(),
            logdet: logdet.to_vec(),
            lambda: self.config.lambda,
        };
        Ok((terms, grad, tape))
    }
}

/// Negative evidence lower bound (up to the constant latent log-density).
pub fn negative_elbo(objective: &Objective, model: &FlowModel, w: ArrayView2<f64>) -> Result<f64> {
    Ok(objective.evaluate(model, w)?.total())
}

fn ensure_finite(mut values: impl Iterator<Item = f64>, primitive: &str) -> Result<()> {
    if values.all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(primitive.to_owned()))
    }
}
