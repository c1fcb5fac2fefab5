//! Image-quality metrics for reconstructed magnitude and phase.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::PHASE_RANGE;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(b.shape(), a.shape()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for data range 1; identical images give `+inf`.
pub fn psnr(recon: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    check_same_shape(recon, truth)?;
    let mse = recon
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / recon.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable "valid" correlation with `taps` along both axes.
fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let w = taps.len();
    let (rows, cols) = x.dim();
    let rows_out = rows - w + 1;
    let cols_out = cols - w + 1;
    let horiz: Array2<f64> = Array2::from_shape_fn((rows, cols_out), |(r, c)| {
        (0..w).map(|k| taps[k] * x[[r, c + k]]).sum::<f64>()
    });
    Array2::from_shape_fn((rows_out, cols_out), |(r, c)| {
        (0..w).map(|k| taps[k] * horiz[[r + k, c]]).sum()
    })
}

/// Mean structural similarity over all fully contained Gaussian windows.
///
/// Images smaller than the 11-pixel window use the largest odd window that fits.
pub fn ssim(x: &Array2<f64>, y: &Array2<f64>, data_range: f64) -> Result<f64> {
    check_same_shape(x, y)?;
    let short = x.nrows().min(x.ncols());
    if short == 0 {
        return Err(Error::InvalidConfig("SSIM of an empty image".into()));
    }
    let mut win = SSIM_WINDOW;
    if short < win {
        win = if short % 2 == 1 { short } else { short - 1 };
        log::warn!("image is {short} pixels across; SSIM window reduced to {win}");
    }
    let taps = gaussian_window(win, SSIM_SIGMA);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mx = filter_valid(x, &taps);
    let my = filter_valid(y, &taps);
    let sxx = filter_valid(&(x * x), &taps);
    let syy = filter_valid(&(y * y), &taps);
    let sxy = filter_valid(&(x * y), &taps);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx.as_slice().unwrap()[i], my.as_slice().unwrap()[i]);
        let vx = sxx.as_slice().unwrap()[i] - a * a;
        let vy = syy.as_slice().unwrap()[i] - b * b;
        let cov = sxy.as_slice().unwrap()[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Min-max maps `phase` onto `range`; a constant input maps to the midpoint
/// and sets the returned flag.
pub fn map_phase(phase: &Array2<f64>, range: (f64, f64)) -> (Array2<f64>, bool) {
    let lo = phase.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = phase.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        let scale = (range.1 - range.0) / (hi - lo);
        (phase.mapv(|p| range.0 + (p - lo) * scale), false)
    } else {
        (Array2::from_elem(phase.dim(), 0.5 * (range.0 + range.1)), true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSsim {
    pub ssim: f64,
    pub mapped: Array2<f64>,
    /// Set when the reconstructed phase was constant.
    pub constant_phase: bool,
}

/// Maps the reconstructed phase onto the ground-truth range and scores it by SSIM.
pub fn phase_map_and_ssim(recon_phase: &Array2<f64>, truth_phase: &Array2<f64>) -> Result<PhaseSsim> {
    check_same_shape(recon_phase, truth_phase)?;
    let (mapped, constant_phase) = map_phase(recon_phase, PHASE_RANGE);
    if constant_phase {
        log::warn!("reconstructed phase is constant; mapped to the range midpoint");
    }
    let ssim = ssim(&mapped, truth_phase, PHASE_RANGE.1 - PHASE_RANGE.0)?;
    Ok(PhaseSsim {
        ssim,
        mapped,
        constant_phase,
    })
}
