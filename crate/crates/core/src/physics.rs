//! Far-field ptychographic forward model and noisy data simulation.
//!
//! Scan `j` produces the intensity pattern `|F(P_j z)|^2`, where `P_j` crops the
//! `m x m` window at the j-th scan position and multiplies it by the probe,
//! and `F` is the unitary 2-D DFT.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Probe, ScanGeometry};
use crate::io;

/// Row-major complex image: objects, probes, exit waves and far fields.
pub type ComplexField = Array2<Complex64>;

/// Crops the `m x m` window whose top-left corner is `position`.
pub fn extract_patch(object: ArrayView2<Complex64>, position: (usize, usize), m: usize) -> Result<ComplexField> {
    let (rows, cols) = object.dim();
    let (r, c) = position;
    if r + m > rows || c + m > cols {
        return Err(Error::OutOfBounds {
            row: r,
            col: c,
            size: m,
            rows,
            cols,
        });
    }
    Ok(object.slice(s![r..r + m, c..c + m]).to_owned())
}

/// Elementwise `probe * patch`.
pub fn exit_wave(patch: &ComplexField, probe: &Probe) -> Result<ComplexField> {
    let p = probe.values();
    if patch.dim() != p.dim() {
        return Err(Error::shape(p.shape(), patch.shape()));
    }
    Ok(patch * p)
}

/// Elementwise squared modulus.
pub fn intensity(field: &ComplexField) -> Array2<f64> {
    field.mapv(|v| v.norm_sqr())
}

/// Cached plans for the orthonormal 2-D DFT of a fixed shape.
///
/// Both directions are scaled by `1/sqrt(rows*cols)`, so the transform is
/// unitary and its adjoint is the inverse.
#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
            scale: 1.0 / ((rows * cols) as f64).sqrt(),
        }
    }

    pub fn forward(&self, field: &mut ComplexField) {
        self.apply(field, &self.row_fwd, &self.col_fwd);
    }

    pub fn inverse(&self, field: &mut ComplexField) {
        self.apply(field, &self.row_inv, &self.col_inv);
    }

    fn apply(&self, field: &mut ComplexField, row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        assert_eq!(field.dim(), (self.rows, self.cols), "FFT plan shape mismatch");
        if !field.is_standard_layout() {
            *field = field.as_standard_layout().into_owned();
        }
        let data = field.as_slice_mut().expect("standard layout");
        row.process(data);
        let mut transposed = vec![Complex64::new(0.0, 0.0); data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                transposed[c * self.rows + r] = data[r * self.cols + c];
            }
        }
        col.process(&mut transposed);
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[r * self.cols + c] = transposed[c * self.rows + r] * self.scale;
            }
        }
    }
}

/// Unitary 2-D DFT of a square field.
pub fn fft2_unitary(field: &ComplexField) -> ComplexField {
    let mut out = field.clone();
    Fft2::new(field.nrows(), field.ncols()).forward(&mut out);
    out
}

/// Inverse of [`fft2_unitary`].
pub fn ifft2_unitary(field: &ComplexField) -> ComplexField {
    let mut out = field.clone();
    Fft2::new(field.nrows(), field.ncols()).inverse(&mut out);
    out
}

/// Probe, geometry and FFT plan bundled for repeated evaluation.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    geometry: ScanGeometry,
    probe: Probe,
    fft: Fft2,
}

impl ForwardModel {
    pub fn new(geometry: ScanGeometry, probe: Probe) -> Result<Self> {
        let m = geometry.probe_size();
        if probe.size() != m {
            return Err(Error::shape(&[m, m], &[probe.size(), probe.size()]));
        }
        Ok(Self {
            geometry,
            probe,
            fft: Fft2::new(m, m),
        })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn probe(&self) -> &Probe {
        &self.probe
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    pub(crate) fn check_object(&self, object: ArrayView2<Complex64>) -> Result<()> {
        let n = self.geometry.fov_size();
        if object.dim() != (n, n) {
            return Err(Error::shape(&[n, n], object.shape()));
        }
        Ok(())
    }

    /// Far-field wave `F(P_j z)` for scan `j`.
    pub fn far_field(&self, object: ArrayView2<Complex64>, j: usize) -> Result<ComplexField> {
        let patch = extract_patch(object, self.geometry.positions()[j], self.geometry.probe_size())?;
        let mut wave = exit_wave(&patch, &self.probe)?;
        self.fft.forward(&mut wave);
        Ok(wave)
    }

    /// Clean intensity stack `f(z)` with shape `N x m x m`.
    pub fn forward_all(&self, object: ArrayView2<Complex64>) -> Result<Array3<f64>> {
        self.check_object(object)?;
        let m = self.geometry.probe_size();
        let mut out = Array3::zeros((self.geometry.num_scans(), m, m));
        for (j, mut slot) in out.axis_iter_mut(Axis(0)).enumerate() {
            slot.assign(&intensity(&self.far_field(object, j)?));
        }
        Ok(out)
    }

    /// Mean over scans of `|| |F(P_j z)| - sqrt(d_j) || / || sqrt(d_j) ||`.
    pub fn relative_amplitude_residual(&self, object: ArrayView2<Complex64>, patterns: &Array3<f64>) -> Result<f64> {
        self.check_object(object)?;
        let mut total = 0.0;
        for j in 0..self.geometry.num_scans() {
            let far = self.far_field(object, j)?;
            let (mut num, mut den) = (0.0, 0.0);
            for (psi, &d) in far.iter().zip(patterns.index_axis(Axis(0), j).iter()) {
                let a = d.sqrt();
                num += (psi.norm() - a).powi(2);
                den += a * a;
            }
            total += if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
        }
        Ok(total / self.geometry.num_scans() as f64)
    }
}

/// Stack of measured intensity patterns with their noise metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffractionData {
    pub patterns: Array3<f64>,
    /// Standard deviation of the additive noise (0 for clean data).
    pub sigma: f64,
    pub noise_percent: f64,
    pub seed: u64,
    pub geometry: ScanGeometry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DataSidecar {
    m: usize,
    a: usize,
    s: usize,
    n: usize,
    sigma: f64,
    seed: u64,
    noise_percent: f64,
}

impl DiffractionData {
    pub fn new(patterns: Array3<f64>, sigma: f64, geometry: ScanGeometry) -> Result<Self> {
        let m = geometry.probe_size();
        let expected = [geometry.num_scans(), m, m];
        if patterns.shape() != expected {
            return Err(Error::shape(&expected, patterns.shape()));
        }
        if let Some(&value) = patterns.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::NegativeIntensity { value });
        }
        Ok(Self {
            patterns,
            sigma,
            noise_percent: 0.0,
            seed: 0,
            geometry,
        })
    }

    /// Noise scale used in the amplitude misfit; clean data falls back to 1.
    pub fn misfit_sigma(&self) -> f64 {
        if self.sigma > 0.0 {
            self.sigma
        } else {
            1.0
        }
    }

    /// Writes `<stem>.npy` (f64, N x m x m) and the `<stem>.json` sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        io::write_npy(dir.join(format!("{stem}.npy")), &self.patterns)?;
        let g = &self.geometry;
        io::write_json(
            dir.join(format!("{stem}.json")),
            &DataSidecar {
                m: g.probe_size(),
                a: g.scans_per_axis(),
                s: g.stride(),
                n: g.fov_size(),
                sigma: self.sigma,
                seed: self.seed,
                noise_percent: self.noise_percent,
            },
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let side_path = dir.join(format!("{stem}.json"));
        let side: DataSidecar = io::read_json(&side_path)?;
        let geometry = ScanGeometry::new(side.m, side.a, side.s)?;
        if geometry.fov_size() != side.n {
            return Err(Error::format(&side_path, format!("inconsistent fov n={}", side.n)));
        }
        let patterns = io::read_npy(dir.join(format!("{stem}.npy")))?;
        let mut data = Self::new(patterns, side.sigma, geometry)?;
        data.noise_percent = side.noise_percent;
        data.seed = side.seed;
        Ok(data)
    }
}

/// `len` i.i.d. draws from `N(0, sigma^2)`, generated sequentially from `seed`.
pub fn gaussian_noise(len: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            sigma * e
        })
        .collect()
}

/// Simulates noisy measurements `d_j = max(f_j(z) + eps_j, 0)`.
///
/// `sigma = noise_percent/100 * mean(clean intensities)`, shared by all scans.
pub fn simulate(
    object: ArrayView2<Complex64>,
    probe: &Probe,
    geometry: &ScanGeometry,
    noise_percent: f64,
    seed: u64,
) -> Result<DiffractionData> {
    if !(noise_percent >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise percent must be non-negative, got {noise_percent}"
        )));
    }
    let model = ForwardModel::new(geometry.clone(), probe.clone())?;
    let clean = model.forward_all(object)?;
    let sigma = noise_percent / 100.0 * clean.mean().unwrap_or(0.0);
    let patterns = if sigma > 0.0 {
        let noise = gaussian_noise(clean.len(), sigma, seed);
        let mut noisy = clean;
        for (d, e) in noisy.iter_mut().zip(noise) {
            *d = (*d + e).max(0.0);
        }
        noisy
    } else {
        clean
    };
    let mut data = DiffractionData::new(patterns, sigma, geometry.clone())?;
    data.noise_percent = noise_percent;
    data.seed = seed;
    Ok(data)
}
