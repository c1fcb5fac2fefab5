//! Raster scan geometry, synthetic ground-truth objects and illumination probes.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::ComplexField;

/// Magnitudes of generated objects are rescaled into this interval.
pub const MAGNITUDE_RANGE: (f64, f64) = (0.05, 1.0);
/// Phases of generated objects are rescaled into this interval (radians).
pub const PHASE_RANGE: (f64, f64) = (0.0, 0.4);

/// A square raster of `a x a` overlapping probe positions.
///
/// The field of view is derived from the stride: `n = s*(a-1) + m`.
/// Positions are top-left patch offsets in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanGeometry {
    probe_size: usize,
    scans_per_axis: usize,
    stride: usize,
    fov_size: usize,
    positions: Vec<(usize, usize)>,
}

impl ScanGeometry {
    pub fn new(probe_size: usize, scans_per_axis: usize, stride: usize) -> Result<Self> {
        if probe_size == 0 {
            return Err(Error::InvalidGeometry("probe size must be positive".into()));
        }
        if scans_per_axis < 2 {
            return Err(Error::InvalidGeometry(format!(
                "need at least 2 scans per axis, got {scans_per_axis}"
            )));
        }
        if stride == 0 || stride >= probe_size {
            return Err(Error::InvalidGeometry(format!(
                "stride {stride} must satisfy 0 < s < m = {probe_size} so patches overlap"
            )));
        }
        let fov_size = stride * (scans_per_axis - 1) + probe_size;
        let positions = (0..scans_per_axis * scans_per_axis)
            .map(|k| (stride * (k / scans_per_axis), stride * (k % scans_per_axis)))
            .collect();
        Ok(Self {
            probe_size,
            scans_per_axis,
            stride,
            fov_size,
            positions,
        })
    }

    pub fn probe_size(&self) -> usize {
        self.probe_size
    }

    pub fn scans_per_axis(&self) -> usize {
        self.scans_per_axis
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Side length `n` of the square field of view.
    pub fn fov_size(&self) -> usize {
        self.fov_size
    }

    pub fn num_scans(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    /// Linear overlap between neighbouring patches, `1 - s/m`.
    pub fn overlap_ratio(&self) -> f64 {
        1.0 - self.stride as f64 / self.probe_size as f64
    }

    /// Number of patches covering each pixel of the field of view.
    pub fn coverage(&self) -> Array2<usize> {
        let n = self.fov_size;
        let m = self.probe_size;
        let mut counts = Array2::zeros((n, n));
        for &(r, c) in &self.positions {
            counts
                .slice_mut(ndarray::s![r..r + m, c..c + m])
                .mapv_inplace(|v| v + 1);
        }
        counts
    }
}

/// Where the magnitude and phase textures of a ground-truth object come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GroundTruthSource {
    /// Band-limited noise plus simple shapes, generated from the seed.
    Procedural,
    /// 8-bit grayscale PNGs, resampled to the field of view.
    Images { magnitude: PathBuf, phase: PathBuf },
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub magnitude: Array2<f64>,
    pub phase: Array2<f64>,
    pub object: ComplexField,
}

impl GroundTruth {
    pub fn from_parts(magnitude: Array2<f64>, phase: Array2<f64>) -> Result<Self> {
        if magnitude.dim() != phase.dim() {
            let (a, b) = (magnitude.dim(), phase.dim());
            return Err(Error::shape(&[a.0, a.1], &[b.0, b.1]));
        }
        let object = ndarray::Zip::from(&magnitude)
            .and(&phase)
            .map_collect(|&r, &p| Complex64::from_polar(r, p));
        Ok(Self {
            magnitude,
            phase,
            object,
        })
    }

    pub fn size(&self) -> usize {
        self.magnitude.nrows()
    }
}

/// Builds an `n x n` object with magnitude in [0.05, 1] and phase in [0, 0.4].
pub fn make_ground_truth(n: usize, source: &GroundTruthSource, seed: u64) -> Result<GroundTruth> {
    if n == 0 {
        return Err(Error::InvalidGeometry("field of view must be non-empty".into()));
    }
    let (mag_raw, phase_raw) = match source {
        GroundTruthSource::Procedural => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (procedural_texture(n, &mut rng), procedural_texture(n, &mut rng))
        }
        GroundTruthSource::Images { magnitude, phase } => (load_grayscale(magnitude, n)?, load_grayscale(phase, n)?),
    };
    let magnitude = rescale(&mag_raw, MAGNITUDE_RANGE);
    let phase = rescale(&phase_raw, PHASE_RANGE);
    GroundTruth::from_parts(magnitude, phase)
}

/// Min-max rescale into `range`; a constant input maps to the midpoint.
pub fn rescale(values: &Array2<f64>, range: (f64, f64)) -> Array2<f64> {
    let (lo, hi) = range;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Array2::from_elem(values.dim(), 0.5 * (lo + hi));
    }
    values.mapv(|v| (lo + (v - min) / (max - min) * (hi - lo)).clamp(lo, hi))
}

fn procedural_texture(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    // Low-frequency cosines give band-limited noise.
    let max_freq = (n as f64 / 6.0).max(1.0);
    let waves: Vec<(f64, f64, f64, f64)> = (0..8)
        .map(|_| {
            let fx = rng.random_range(-max_freq..=max_freq);
            let fy = rng.random_range(-max_freq..=max_freq);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.3..1.0);
            (fx, fy, phase, amp)
        })
        .collect();
    let nf = n as f64;
    let disk_center = (rng.random_range(0.25..0.75) * nf, rng.random_range(0.25..0.75) * nf);
    let disk_radius = rng.random_range(0.12..0.22) * nf;
    let rect_lo = (rng.random_range(0.05..0.4) * nf, rng.random_range(0.05..0.4) * nf);
    let rect_hi = (
        rect_lo.0 + rng.random_range(0.2..0.45) * nf,
        rect_lo.1 + rng.random_range(0.2..0.45) * nf,
    );

    Array2::from_shape_fn((n, n), |(r, c)| {
        let (y, x) = (r as f64, c as f64);
        let noise: f64 = waves
            .iter()
            .map(|&(fx, fy, ph, a)| a * (2.0 * PI * (fx * x + fy * y) / nf + ph).cos())
            .sum::<f64>()
            / 8.0;
        let mut shapes = 0.0;
        if (y - disk_center.0).powi(2) + (x - disk_center.1).powi(2) <= disk_radius.powi(2) {
            shapes += 0.6;
        }
        if y >= rect_lo.0 && y < rect_hi.0 && x >= rect_lo.1 && x < rect_hi.1 {
            shapes -= 0.4;
        }
        noise + shapes
    })
}

fn load_grayscale(path: &Path, n: usize) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::format(
                path,
                format!("expected 8-bit grayscale PNG, found {:?}", other.color()),
            ))
        }
    };
    if gray.width() == 0 || gray.height() == 0 {
        return Err(Error::format(path, "empty image"));
    }
    let resized = image::imageops::resize(&gray, n as u32, n as u32, image::imageops::FilterType::Triangle);
    Ok(Array2::from_shape_fn((n, n), |(r, c)| {
        resized.get_pixel(c as u32, r as u32).0[0] as f64 / 255.0
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProbeKind {
    /// Uniform disk of radius `0.4 m` with a quadratic phase curvature.
    Disk,
    /// Gaussian amplitude with `sigma = m/4` and flat phase.
    Gaussian,
    /// An `m x m` complex128 NPY array on disk.
    File { path: PathBuf },
}

impl Default for ProbeKind {
    fn default() -> Self {
        ProbeKind::Gaussian
    }
}

/// Illumination field, normalized so its largest pixel magnitude is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    values: ComplexField,
}

impl Probe {
    pub fn new(m: usize, kind: &ProbeKind) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidGeometry("probe size must be positive".into()));
        }
        let center = (m as f64 - 1.0) / 2.0;
        let r2 = |r: usize, c: usize| (r as f64 - center).powi(2) + (c as f64 - center).powi(2);
        let values = match kind {
            ProbeKind::Gaussian => {
                let sigma = m as f64 / 4.0;
                Array2::from_shape_fn((m, m), |(r, c)| {
                    Complex64::new((-r2(r, c) / (2.0 * sigma * sigma)).exp(), 0.0)
                })
            }
            ProbeKind::Disk => {
                let radius = 0.4 * m as f64;
                Array2::from_shape_fn((m, m), |(r, c)| {
                    let d2 = r2(r, c);
                    if d2 <= radius * radius {
                        Complex64::from_polar(1.0, 0.5 * PI * d2 / (radius * radius))
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })
            }
            ProbeKind::File { path } => {
                let values: ComplexField = crate::io::read_npy(path)?;
                if values.dim() != (m, m) {
                    let (a, b) = values.dim();
                    return Err(Error::shape(&[m, m], &[a, b]));
                }
                values
            }
        };
        Self::from_values(values)
    }

    /// Wraps arbitrary probe values, rescaling to unit peak magnitude.
    pub fn from_values(values: ComplexField) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::shape(&[values.nrows(), values.nrows()], values.shape()));
        }
        let peak = values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if !(peak > 0.0) || !peak.is_finite() {
            return Err(Error::Degenerate("probe is identically zero or non-finite".into()));
        }
        Ok(Self {
            values: values.mapv(|v| v / peak),
        })
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &ComplexField {
        &self.values
    }

    pub fn max_intensity(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max)
    }
}
