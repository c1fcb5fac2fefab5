//! Regularized ptychographic iterative engine with a fixed probe.

use ndarray::{s, Array2, Array3, Axis};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Probe;
use crate::physics::{exit_wave, extract_patch, ComplexField, DiffractionData, ForwardModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpieInit {
    /// Magnitude 0.5, phase 0 everywhere.
    #[default]
    Flat,
    /// Magnitude uniform in [0.25, 0.75], phase uniform in [-0.2, 0.2].
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpieConfig {
    pub iterations: usize,
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub init: RpieInit,
}

impl RpieConfig {
    pub const DEFAULT_ALPHA: f64 = 0.05;

    pub fn new(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            alpha: Self::DEFAULT_ALPHA,
            seed,
            init: RpieInit::Flat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rPIE alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RpieResult {
    pub estimate: ComplexField,
    /// Mean relative amplitude residual after each sweep.
    pub residuals: Vec<f64>,
}

/// Starting object for a reconstruction.
pub fn initial_object(n: usize, init: RpieInit, seed: u64) -> ComplexField {
    match init {
        RpieInit::Flat => Array2::from_elem((n, n), Complex64::new(0.5, 0.0)),
        RpieInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            Array2::from_shape_simple_fn((n, n), || {
                Complex64::from_polar(rng.random_range(0.25..0.75), rng.random_range(-0.2..0.2))
            })
        }
    }
}

/// One pass over the scans in `order`, updating `object` in place.
pub fn rpie_sweep(
    object: &mut ComplexField,
    patterns: &Array3<f64>,
    forward: &ForwardModel,
    alpha: f64,
    order: &[usize],
) -> Result<()> {
    forward.check_object(object.view())?;
    let geometry = forward.geometry();
    let m = geometry.probe_size();
    if patterns.dim() != (geometry.num_scans(), m, m) {
        return Err(Error::shape(&[geometry.num_scans(), m, m], patterns.shape()));
    }
    let probe = forward.probe();
    let max_power = probe.max_intensity();
    if max_power == 0.0 {
        return Err(Error::Degenerate("probe is identically zero".into()));
    }
    let weight = probe
        .values()
        .mapv(|p| p.conj() / ((1.0 - alpha) * p.norm_sqr() + alpha * max_power));
    for &j in order {
        let pos = geometry.positions()[j];
        let patch = extract_patch(object.view(), pos, m)?;
        let psi = exit_wave(&patch, probe)?;
        let mut wave = psi.clone();
        forward.fft().forward(&mut wave);
        for (w, &d) in wave.iter_mut().zip(patterns.index_axis(Axis(0), j).iter()) {
            let amp = d.max(0.0).sqrt();
            let norm = w.norm();
            *w = if norm > 0.0 {
                *w * (amp / norm)
            } else {
                Complex64::new(amp, 0.0)
            };
        }
        forward.fft().inverse(&mut wave);
        let mut window = object.slice_mut(s![pos.0..pos.0 + m, pos.1..pos.1 + m]);
        ndarray::Zip::from(&mut window)
            .and(&weight)
            .and(&wave)
            .and(&psi)
            .for_each(|o, &w, &new, &old| *o += w * (new - old));
    }
    Ok(())
}

/// Runs `config.iterations` sweeps with a freshly shuffled scan order each sweep.
pub fn rpie_reconstruct(data: &DiffractionData, probe: &Probe, config: &RpieConfig) -> Result<RpieResult> {
    config.validate()?;
    let forward = ForwardModel::new(data.geometry.clone(), probe.clone())?;
    let n = data.geometry.fov_size();
    let mut estimate = initial_object(n, config.init, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.geometry.num_scans()).collect();
    let mut residuals = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        order.shuffle(&mut rng);
        rpie_sweep(&mut estimate, &data.patterns, &forward, config.alpha, &order)?;
        residuals.push(forward.relative_amplitude_residual(estimate.view(), &data.patterns)?);
    }
    if estimate.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rPIE estimate".into()));
    }
    Ok(RpieResult { estimate, residuals })
}
