//! Posterior sampling and the statistics built on it: mean/SD maps, mode
//! discovery, per-mode misfits and image-quality metrics.

mod metrics;
mod modes;

pub use metrics::{
    gaussian_window, map_phase, phase_map_and_ssim, psnr, ssim, PhaseSsim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use modes::{
    embed_and_cluster, kmeans, mode_misfit_histogram, pca, select_k, silhouette, KMeans, ModeMisfits, ModeReport, Pca,
    DEFAULT_RESTARTS,
};

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{sample_latent, FlowModel};
use crate::geometry::ScanGeometry;
use crate::objective::latent_to_object;
use crate::physics::ComplexField;

/// Phase in (-pi, pi].
pub fn wrapped_phase(z: num_complex::Complex64) -> f64 {
    let p = z.arg();
    if p == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        p
    }
}

/// Pixelwise mean and population standard deviation of magnitude and phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub mean_magnitude: Array2<f64>,
    pub sd_magnitude: Array2<f64>,
    pub mean_phase: Array2<f64>,
    pub sd_phase: Array2<f64>,
}

/// Object samples drawn from a trained flow.
#[derive(Debug, Clone)]
pub struct PosteriorEnsemble {
    samples: Vec<ComplexField>,
    source: String,
}

impl PosteriorEnsemble {
    pub fn from_samples(samples: Vec<ComplexField>, source: impl Into<String>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidConfig("an ensemble needs at least one sample".into()))?;
        let (rows, cols) = first.dim();
        if rows != cols {
            return Err(Error::shape(&[rows, rows], first.shape()));
        }
        if let Some(bad) = samples.iter().find(|z| z.dim() != (rows, cols)) {
            return Err(Error::shape(first.shape(), bad.shape()));
        }
        Ok(Self {
            samples,
            source: source.into(),
        })
    }

    /// Pushes `count` latents drawn from `seed` through the flow in eval mode.
    pub fn draw(model: &FlowModel, count: usize, seed: u64, source: impl Into<String>) -> Result<Self> {
        if count < 2 {
            return Err(Error::InvalidConfig(
                "posterior ensembles need at least 2 samples".into(),
            ));
        }
        let n = ((model.dim() / 2) as f64).sqrt().round() as usize;
        if 2 * n * n != model.dim() {
            return Err(Error::InvalidConfig(format!(
                "flow dimension {} is not 2n^2",
                model.dim()
            )));
        }
        let w = sample_latent(count, model.dim(), seed);
        let samples = (0..count)
            .into_par_iter()
            .map(|i| latent_to_object(model, w.row(i), n))
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(samples, source)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn size(&self) -> usize {
        self.samples[0].nrows()
    }

    pub fn samples(&self) -> &[ComplexField] {
        &self.samples
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Samples whose entry in `labels` equals `label`.
    pub fn subset(&self, labels: &[usize], label: usize) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::shape(&[self.len()], &[labels.len()]));
        }
        let picked = self
            .samples
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == label)
            .map(|(z, _)| z.clone())
            .collect();
        Self::from_samples(picked, format!("{} mode {label}", self.source))
    }

    /// Samples flattened to real rows `(re || im)`.
    pub fn flattened(&self) -> Array2<f64> {
        let n2 = self.size() * self.size();
        let mut out = Array2::zeros((self.len(), 2 * n2));
        for (mut row, z) in out.outer_iter_mut().zip(&self.samples) {
            for (i, v) in z.iter().enumerate() {
                row[i] = v.re;
                row[n2 + i] = v.im;
            }
        }
        out
    }

    /// Mean and SD maps; needs at least two samples.
    pub fn stats(&self) -> Result<EnsembleStats> {
        if self.len() < 2 {
            return Err(Error::InvalidConfig("SD maps need at least 2 samples".into()));
        }
        let mags: Vec<Array2<f64>> = self.samples.iter().map(|z| z.mapv(|v| v.norm())).collect();
        let phases: Vec<Array2<f64>> = self.samples.iter().map(|z| z.mapv(wrapped_phase)).collect();
        let (mean_magnitude, sd_magnitude) = mean_and_sd(&mags);
        let (mean_phase, sd_phase) = mean_and_sd(&phases);
        Ok(EnsembleStats {
            mean_magnitude,
            sd_magnitude,
            mean_phase,
            sd_phase,
        })
    }
}

/// Pixelwise mean and population SD, accumulated in sample order.
pub fn mean_and_sd(maps: &[Array2<f64>]) -> (Array2<f64>, Array2<f64>) {
    let count = maps.len() as f64;
    let dim = maps[0].dim();
    let mut mean = Array2::zeros(dim);
    for m in maps {
        mean += m;
    }
    mean /= count;
    let mut var = Array2::<f64>::zeros(dim);
    for m in maps {
        ndarray::Zip::from(&mut var)
            .and(m)
            .and(&mean)
            .for_each(|v, &x, &mu| *v += (x - mu) * (x - mu));
    }
    (mean, var.mapv(|v| (v / count).sqrt()))
}

/// Mean over the width-`border` frame divided by the mean over the rest.
pub fn boundary_interior_ratio(sd: &Array2<f64>, border: usize) -> Result<f64> {
    let (rows, cols) = sd.dim();
    if border == 0 || 2 * border >= rows.min(cols) {
        return Err(Error::InvalidConfig(format!(
            "border width {border} must be in [1, {})",
            rows.min(cols).div_ceil(2)
        )));
    }
    let (mut edge, mut edge_count, mut inner, mut inner_count) = (0.0, 0usize, 0.0, 0usize);
    for ((r, c), &v) in sd.indexed_iter() {
        if r < border || c < border || r >= rows - border || c >= cols - border {
            edge += v;
            edge_count += 1;
        } else {
            inner += v;
            inner_count += 1;
        }
    }
    let inner_mean = inner / inner_count as f64;
    if inner_mean == 0.0 {
        return Err(Error::Degenerate("interior SD is zero".into()));
    }
    Ok((edge / edge_count as f64) / inner_mean)
}

/// Largest common centered square of several SD maps.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonRegion {
    pub side: usize,
    pub crops: Vec<Array2<f64>>,
    pub means: Vec<f64>,
}

/// Crops each map to the centered `min n` square and reports its mean.
pub fn common_region_sd(maps: &[Array2<f64>], geometries: &[ScanGeometry]) -> Result<CommonRegion> {
    if maps.is_empty() || maps.len() != geometries.len() {
        return Err(Error::InvalidConfig("need one geometry per SD map".into()));
    }
    let scans = geometries[0].num_scans();
    if geometries.iter().any(|g| g.num_scans() != scans) {
        return Err(Error::InvalidConfig("settings have different scan counts".into()));
    }
    for (map, g) in maps.iter().zip(geometries) {
        let n = g.fov_size();
        if map.dim() != (n, n) {
            return Err(Error::shape(&[n, n], map.shape()));
        }
    }
    let side = geometries.iter().map(|g| g.fov_size()).min().expect("non-empty");
    let crops: Vec<Array2<f64>> = maps
        .iter()
        .map(|m| {
            let o = (m.nrows() - side) / 2;
            m.slice(s![o..o + side, o..o + side]).to_owned()
        })
        .collect();
    let means = crops.iter().map(|c| c.mean().expect("non-empty crop")).collect();
    Ok(CommonRegion { side, crops, means })
}
