//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance suite. Each check returns the worst relative error over a set
//! of random directions.
#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2};
use num_complex::Complex64;
use rand::Rng;

use ptychoflow::flow::layers::{ActNorm, BatchNorm, Coupling, Dense, NormSource};
use ptychoflow::flow::{sample_latent, FlowConfig, FlowModel, Mode, ParamLayout};
use ptychoflow::geometry::{make_ground_truth, GroundTruthSource, Probe, ProbeKind, ScanGeometry};
use ptychoflow::objective::{
    normalize_backward, object_from_raw, tv_regularizer, tv_regularizer_grad, Objective, ObjectiveConfig,
};
use ptychoflow::physics::simulate;

use crate::oracles::{directional_fd, dot, rel_err, rng, unit_direction};

pub const FD_STEP: f64 = 1e-6;

/// Checks `grad` of a scalar function `f` along `dirs` random directions.
pub fn check_directions(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], grad: &[f64], dirs: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..dirs)
        .map(|_| {
            let d = unit_direction(x.len(), &mut r);
            rel_err(dot(grad, &d), directional_fd(&mut f, x, &d, FD_STEP))
        })
        .fold(0.0, f64::max)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

pub fn random_vec(len: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len).map(|_| scale * r.random_range(-1.0..1.0)).collect()
}

/// Joins parameters and a batch input into one vector so both are checked together.
fn pack(theta: &[f64], x: &Array2<f64>) -> Vec<f64> {
    theta.iter().chain(x.iter()).copied().collect()
}

fn unpack(v: &[f64], n_theta: usize, shape: (usize, usize)) -> (Vec<f64>, Array2<f64>) {
    (
        v[..n_theta].to_vec(),
        Array2::from_shape_vec(shape, v[n_theta..].to_vec()).unwrap(),
    )
}

fn weighted(y: &Array2<f64>, c: &Array2<f64>) -> f64 {
    (y * c).sum()
}

pub fn dense_check() -> f64 {
    let mut layout = ParamLayout::default();
    let layer = Dense::new(&mut layout, "d", 5, 3);
    let theta = random_vec(layout.len(), 1, 1.0);
    let x = random_matrix(4, 5, 2);
    let c = random_matrix(4, 3, 3);
    let mut grad = vec![0.0; theta.len()];
    let gx = layer.backward(&theta, x.view(), c.view(), &mut grad);
    let n = theta.len();
    let f = |v: &[f64]| {
        let (t, x) = unpack(v, n, (4, 5));
        weighted(&layer.forward(&t, x.view()), &c)
    };
    check_directions(f, &pack(&theta, &x), &pack(&grad, &gx), 10, 4)
}

pub fn batch_norm_check() -> f64 {
    let mut layout = ParamLayout::default();
    let layer = BatchNorm::new(&mut layout, "bn", 4, 0, 1e-5);
    let theta: Vec<f64> = random_vec(layout.len(), 5, 1.0).iter().map(|v| v + 0.5).collect();
    let x = random_matrix(6, 4, 6);
    let c = random_matrix(6, 4, 7);
    let (_, cache) = layer.forward_train(&theta, x.view());
    let mut grad = vec![0.0; theta.len()];
    let gx = layer.backward(&theta, &cache, c.view(), &mut grad);
    let n = theta.len();
    let f = |v: &[f64]| {
        let (t, x) = unpack(v, n, (6, 4));
        weighted(&layer.forward_train(&t, x.view()).0, &c)
    };
    check_directions(f, &pack(&theta, &x), &pack(&grad, &gx), 10, 8)
}

pub fn leaky_relu_check() -> f64 {
    use ptychoflow::flow::layers::{leaky_relu, leaky_relu_backward};
    let x = random_matrix(5, 5, 9);
    let c = random_matrix(5, 5, 10);
    let gx = leaky_relu_backward(&x, &c, 0.01);
    let f = |v: &[f64]| {
        weighted(
            &leaky_relu(&Array2::from_shape_vec((5, 5), v.to_vec()).unwrap(), 0.01),
            &c,
        )
    };
    check_directions(f, x.as_slice().unwrap(), gx.as_slice().unwrap(), 10, 11)
}

pub fn clamp_check() -> f64 {
    use ptychoflow::flow::layers::{clamp_scale, clamp_scale_backward};
    let x = random_matrix(5, 5, 12).mapv(|v| 4.0 * v);
    let c = random_matrix(5, 5, 13);
    let gx = clamp_scale_backward(&x, &c, 2.0);
    let f = |v: &[f64]| {
        weighted(
            &clamp_scale(&Array2::from_shape_vec((5, 5), v.to_vec()).unwrap(), 2.0),
            &c,
        )
    };
    check_directions(f, x.as_slice().unwrap(), gx.as_slice().unwrap(), 10, 14)
}

pub fn actnorm_check() -> f64 {
    let mut layout = ParamLayout::default();
    let layer = ActNorm::new(&mut layout, "a", 6);
    let mut theta = random_vec(layout.len(), 15, 1.0);
    for s in &mut theta[layer.scale.range()] {
        *s += s.signum() * 0.5;
    }
    let x = random_matrix(3, 6, 16);
    let c = random_matrix(3, 6, 17);
    let beta = 0.7;
    let mut grad = vec![0.0; theta.len()];
    let gx = layer.backward(&theta, x.view(), c.view(), beta * 3.0, &mut grad);
    let n = theta.len();
    let f = |v: &[f64]| {
        let (t, x) = unpack(v, n, (3, 6));
        let (y, ld) = layer.forward(&t, x.view()).unwrap();
        weighted(&y, &c) + beta * 3.0 * ld
    };
    check_directions(f, &pack(&theta, &x), &pack(&grad, &gx), 10, 18)
}

/// Coupling layer with every subnet weight randomized so all paths are active.
pub fn coupling_check() -> f64 {
    let mut layout = ParamLayout::default();
    let mut bn = 0;
    let layer = Coupling::new(&mut layout, "c", 4, 5, 2.0, &mut bn, 0.01, 1e-5);
    let mut theta = random_vec(layout.len(), 19, 0.5);
    for net in layer.nets() {
        for norm in [&net.norm1, &net.norm2] {
            for g in &mut theta[norm.gamma.range()] {
                *g += 1.0;
            }
        }
    }
    let x = random_matrix(5, 8, 20);
    let c = random_matrix(5, 8, 21);
    let gl = Array1::from(random_vec(5, 22, 1.0));
    let (_, _, cache) = layer.forward_train(&theta, x.view()).unwrap();
    let mut grad = vec![0.0; theta.len()];
    let gx = layer.backward(&theta, &cache, c.view(), gl.view(), &mut grad);
    let n = theta.len();
    let f = |v: &[f64]| {
        let (t, x) = unpack(v, n, (5, 8));
        let (y, ld) = layer.forward(&t, x.view(), NormSource::Batch).unwrap();
        weighted(&y, &c) + ld.dot(&gl)
    };
    check_directions(f, &pack(&theta, &x), &pack(&grad, &gx), 10, 23)
}

/// Randomizes a fresh model so no subnet is trivially zero.
pub fn perturbed_model(cfg: FlowConfig, seed: u64, scale: f64) -> FlowModel {
    let mut model = FlowModel::new(cfg).unwrap();
    let mut r = rng(seed);
    for t in model.theta_mut() {
        *t += scale * r.random_range(-1.0..1.0);
    }
    model
}

pub fn flow_check() -> f64 {
    let mut cfg = FlowConfig::for_object(2, 2, 3);
    cfg.hidden = 4;
    let model = perturbed_model(cfg, 24, 0.2);
    let w = sample_latent(3, model.dim(), 25);
    let c = random_matrix(3, model.dim(), 26);
    let gl = Array1::from(random_vec(3, 27, 1.0));
    let (_, _, tape) = model.forward_tape(w.view()).unwrap();
    let mut grad = vec![0.0; model.num_params()];
    let gw = model.backward(&tape, c.view(), gl.view(), &mut grad);
    let n = model.num_params();
    let shape = w.dim();
    let mut probe_model = model.clone();
    let f = |v: &[f64]| {
        let (t, w) = unpack(v, n, shape);
        probe_model.theta_mut().copy_from_slice(&t);
        let (y, ld) = probe_model.forward(w.view(), Mode::Train).unwrap();
        weighted(&y, &c) + ld.dot(&gl)
    };
    check_directions(f, &pack(model.theta(), &w), &pack(&grad, &gw), 10, 28)
}

/// Small noisy problem with `n = 8` (m = 4, a = 3, s = 2).
pub fn tiny_problem(noise_percent: f64) -> (Objective, ScanGeometry, Probe) {
    let geometry = ScanGeometry::new(4, 3, 2).unwrap();
    let probe = Probe::new(4, &ProbeKind::Gaussian).unwrap();
    let gt = make_ground_truth(geometry.fov_size(), &GroundTruthSource::Procedural, 5).unwrap();
    let data = simulate(gt.object.view(), &probe, &geometry, noise_percent, 6).unwrap();
    let objective = Objective::new(&data, &probe, ObjectiveConfig::for_data(&data, 0.01)).unwrap();
    (objective, geometry, probe)
}

fn complex_to_vec(z: &Array2<Complex64>) -> Vec<f64> {
    z.iter().flat_map(|c| [c.re, c.im]).collect()
}

fn vec_to_complex(v: &[f64], n: usize) -> Array2<Complex64> {
    Array2::from_shape_fn((n, n), |(r, c)| {
        let i = 2 * (r * n + c);
        Complex64::new(v[i], v[i + 1])
    })
}

pub fn misfit_check() -> f64 {
    let (objective, geometry, _) = tiny_problem(1.0);
    let n = geometry.fov_size();
    let mut r = rng(29);
    let z = Array2::from_shape_fn((n, n), |_| {
        Complex64::from_polar(r.random_range(0.2..1.0), r.random_range(-1.0..1.0))
    });
    let (_, g) = objective.misfit_grad(z.view()).unwrap();
    let f = |v: &[f64]| objective.misfit(vec_to_complex(v, n).view()).unwrap();
    check_directions(f, &complex_to_vec(&z), &complex_to_vec(&g), 10, 30)
}

pub fn tv_check() -> f64 {
    let n = 7;
    let mut r = rng(31);
    // Smooth field: sum of two low-frequency waves.
    let (a, b) = (r.random_range(0.5..1.5), r.random_range(0.5..1.5));
    let z = Array2::from_shape_fn((n, n), |(i, j)| {
        let (x, y) = (i as f64 / n as f64, j as f64 / n as f64);
        Complex64::new((a * x + 0.3 * y).sin(), (b * y - 0.2 * x).cos())
    });
    let eps = 1e-3;
    let (_, g) = tv_regularizer_grad(z.view(), eps);
    let f = |v: &[f64]| tv_regularizer(vec_to_complex(v, n).view(), eps);
    check_directions(f, &complex_to_vec(&z), &complex_to_vec(&g), 10, 32)
}

pub fn normalization_check() -> f64 {
    let n = 4;
    let raw = Array1::from(random_vec(2 * n * n, 33, 1.0));
    let mut r = rng(34);
    let c = Array2::from_shape_fn((n, n), |_| {
        Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))
    });
    let norm = object_from_raw(raw.view(), n).unwrap();
    let g = normalize_backward(&norm, &c);
    let f = |v: &[f64]| {
        let z = object_from_raw(ArrayView2::from_shape((1, v.len()), v).unwrap().row(0), n).unwrap();
        z.object
            .iter()
            .zip(c.iter())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    };
    check_directions(f, raw.as_slice().unwrap(), g.as_slice().unwrap(), 10, 35)
}

/// Every primitive's gradient check, by name.
pub fn primitive_checks() -> Vec<(&'static str, f64)> {
    vec![
        ("dense", dense_check()),
        ("batch_norm", batch_norm_check()),
        ("leaky_relu", leaky_relu_check()),
        ("scale_clamp", clamp_check()),
        ("actnorm", actnorm_check()),
        ("coupling", coupling_check()),
        ("flow", flow_check()),
        ("amplitude_misfit", misfit_check()),
        ("total_variation", tv_check()),
        ("max_normalization", normalization_check()),
    ]
}

/// Composed objective on `n = 8`, `K = 2`, `B = 2`: relative errors of 20 directional derivatives.
pub fn composed_objective_errors(noise_percent: f64) -> Vec<f64> {
    let (objective, geometry, _) = tiny_problem(noise_percent);
    let cfg = FlowConfig::for_object(geometry.fov_size(), 2, 36);
    let model = perturbed_model(cfg, 37, 0.05);
    let w = sample_latent(2, model.dim(), 38);
    let (_, grad) = objective.gradient(&model, w.view()).unwrap();
    let mut probe_model = model.clone();
    let mut f = |t: &[f64]| {
        probe_model.theta_mut().copy_from_slice(t);
        objective.evaluate(&probe_model, w.view()).unwrap().total()
    };
    let mut r = rng(39);
    (0..20)
        .map(|_| {
            let d = unit_direction(model.num_params(), &mut r);
            rel_err(dot(&grad, &d), directional_fd(&mut f, model.theta(), &d, FD_STEP))
        })
        .collect()
}
