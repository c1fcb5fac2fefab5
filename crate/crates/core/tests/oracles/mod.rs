//! Independent reference implementations used to check the library.
//!
//! Nothing here calls into the code paths it is used to verify: the forward
//! model is rebuilt from explicit dense matrices, DFTs are evaluated as
//! direct sums, and derivatives come from central differences.
#![allow(dead_code)]

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type C = Complex64;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_field(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<C> {
    Array2::from_shape_fn((rows, cols), |_| {
        C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
}

/// Dense `m^2 x m^2` unitary DFT matrix acting on row-major vectorized images.
pub fn dense_dft(m: usize) -> Vec<Vec<C>> {
    let mm = m * m;
    let scale = 1.0 / m as f64;
    let mut mat = vec![vec![C::new(0.0, 0.0); mm]; mm];
    for (k, row) in mat.iter_mut().enumerate() {
        let (ku, kv) = (k / m, k % m);
        for (p, entry) in row.iter_mut().enumerate() {
            let (pu, pv) = (p / m, p % m);
            let angle = -2.0 * PI * ((ku * pu) as f64 + (kv * pv) as f64) / m as f64;
            *entry = C::from_polar(scale, angle);
        }
    }
    mat
}

/// Dense `m^2 x n^2` illumination operator: crop at `pos` then multiply by the probe.
pub fn dense_probe_operator(probe: &Array2<C>, pos: (usize, usize), n: usize) -> Vec<Vec<C>> {
    let m = probe.nrows();
    let mut mat = vec![vec![C::new(0.0, 0.0); n * n]; m * m];
    for r in 0..m {
        for c in 0..m {
            mat[r * m + c][(pos.0 + r) * n + pos.1 + c] = probe[[r, c]];
        }
    }
    mat
}

pub fn matvec(mat: &[Vec<C>], x: &[C]) -> Vec<C> {
    mat.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `|F P_j z|^2` for every position, via dense matrices.
pub fn dense_forward(object: &Array2<C>, probe: &Array2<C>, positions: &[(usize, usize)]) -> Array3<f64> {
    let n = object.nrows();
    let m = probe.nrows();
    let z: Vec<C> = object.iter().copied().collect();
    let dft = dense_dft(m);
    let mut out = Array3::zeros((positions.len(), m, m));
    for (j, &pos) in positions.iter().enumerate() {
        let exit = matvec(&dense_probe_operator(probe, pos, n), &z);
        let far = matvec(&dft, &exit);
        for (k, v) in far.iter().enumerate() {
            out[[j, k / m, k % m]] = v.norm_sqr();
        }
    }
    out
}

/// Amplitude misfit written out directly from its definition.
pub fn scripted_misfit(
    object: &Array2<C>,
    probe: &Array2<C>,
    positions: &[(usize, usize)],
    patterns: &Array3<f64>,
    sigma: f64,
) -> f64 {
    let model = dense_forward(object, probe, positions);
    let mut total = 0.0;
    for (a, d) in model.iter().zip(patterns.iter()) {
        total += (a.sqrt() - d.sqrt()).powi(2);
    }
    total / (2.0 * sigma * sigma)
}

/// Central difference of `f` along `dir` at `x`.
pub fn directional_fd(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], dir: &[f64], h: f64) -> f64 {
    let plus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + h * d).collect();
    let minus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a - h * d).collect();
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub fn unit_direction(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Numerical Jacobian of `f: R^d -> R^d` by central differences.
pub fn fd_jacobian(f: &mut impl FnMut(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let d = x.len();
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let (fp, fm) = (f(&plus), f(&minus));
        for i in 0..d {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// `log|det A|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let d = a.len();
    let mut acc = 0.0;
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        acc += p.abs().ln();
        for row in col + 1..d {
            let factor = a[row][col] / p;
            for k in col..d {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    acc
}

/// SSIM computed window by window with explicit Gaussian weights ("valid" windows only).
pub fn scripted_ssim(x: &Array2<f64>, y: &Array2<f64>, win: usize, sigma: f64, range: f64) -> f64 {
    let half = (win / 2) as isize;
    let mut weights = vec![vec![0.0; win]; win];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            let (di, dj) = (i as isize - half, j as isize - half);
            *w = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
            total += *w;
        }
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let (rows, cols) = x.dim();
    let mut sum = 0.0;
    let mut count = 0;
    for r0 in 0..=rows - win {
        for c0 in 0..=cols - win {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let w = weights[i][j] / total;
                    let (a, b) = (x[[r0 + i, c0 + j]], y[[r0 + i, c0 + j]]);
                    mx += w * a;
                    my += w * b;
                    sxx += w * a * a;
                    syy += w * b * b;
                    sxy += w * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

pub fn scripted_psnr(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let mse = x.iter().zip(y.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// Straight-line bias-corrected Adam, one scalar at a time.
pub fn scripted_adam(theta0: &[f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let mut theta = theta0.to_vec();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / (1.0 - b1.powi(t));
            let vhat = v[i] / (1.0 - b2.powi(t));
            theta[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    theta
}
