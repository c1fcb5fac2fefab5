mod checks;
mod criteria;
mod oracles;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use ptychoflow::flow::layers::{BatchStats, Coupling, NormSource};
use ptychoflow::flow::{sample_latent, FlowConfig, Mode, ParamLayout};

use checks::{perturbed_model, random_matrix, random_vec};
use oracles::{fd_jacobian, log_abs_det};

#[test]
fn flow_round_trips_in_eval_mode() {
    let err = criteria::invertibility_error(50);
    assert!(err <= 1e-6, "max round-trip error {err:e}");
}

#[test]
fn flow_logdet_matches_numerical_jacobian() {
    let err = criteria::logdet_error();
    assert!(err <= 1e-3, "relative determinant error {err:e}");
}

/// A coupling layer with randomized subnets and running statistics taken from one batch.
fn random_coupling(half: usize, weight_scale: f64, seed: u64) -> (Coupling, Vec<f64>, Vec<BatchStats>) {
    let mut layout = ParamLayout::default();
    let mut bn = 0;
    let layer = Coupling::new(&mut layout, "c", half, 5, 2.0, &mut bn, 0.01, 1e-5);
    let mut theta = random_vec(layout.len(), seed, weight_scale);
    for net in layer.nets() {
        for norm in [&net.norm1, &net.norm2] {
            for g in &mut theta[norm.gamma.range()] {
                *g += 1.0;
            }
        }
    }
    let x = random_matrix(16, 2 * half, seed + 1);
    let (_, _, cache) = layer.forward_train(&theta, x.view()).unwrap();
    let mut running = vec![
        BatchStats {
            mean: Default::default(),
            var: Default::default()
        };
        bn
    ];
    for (idx, stats) in layer.batch_stats(&cache) {
        running[idx] = stats.clone();
    }
    (layer, theta, running)
}

fn coupling_map<'a>(
    layer: &'a Coupling,
    theta: &[f64],
    running: &[BatchStats],
) -> impl Fn(&[f64]) -> (Vec<f64>, f64) + 'a {
    let running = running.to_vec();
    let theta = theta.to_vec();
    move |x: &[f64]| {
        let u = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let (v, ld) = layer.forward(&theta, u, NormSource::Running(&running)).unwrap();
        (v.row(0).to_vec(), ld[0])
    }
}

#[test]
fn coupling_logdet_matches_numerical_jacobian() {
    for (half, seed) in [(1usize, 1u64), (2, 2), (3, 3), (4, 4)] {
        let (layer, theta, running) = random_coupling(half, 0.5, 10 * seed);
        let f = coupling_map(&layer, &theta, &running);
        let x = random_vec(2 * half, 10 * seed + 5, 1.0);
        let (_, ld) = f(&x);
        let jac = fd_jacobian(&mut |v: &[f64]| f(v).0, &x, 1e-5);
        let numeric = log_abs_det(jac);
        assert!(
            (ld - numeric).abs() <= 1e-4 * ld.abs().max(1.0),
            "half {half}: {ld} vs {numeric}"
        );
    }
}

#[test]
fn first_half_update_is_triangular() {
    // v1 depends on u2 only through the elementwise product, so d v1 / d u2 is diagonal.
    let half = 4;
    let (layer, theta, running) = random_coupling(half, 0.5, 77);
    let f = coupling_map(&layer, &theta, &running);
    let x = random_vec(2 * half, 78, 1.0);
    let jac = fd_jacobian(&mut |v: &[f64]| f(v).0, &x, 1e-6);
    for i in 0..half {
        for j in 0..half {
            let d = jac[i][half + j];
            if i == j {
                assert!(d.abs() > 1e-3);
            } else {
                assert!(d.abs() < 1e-8, "dv1[{i}]/du2[{j}] = {d:e}");
            }
        }
    }
}

#[test]
fn saturated_scales_still_invert() {
    let (layer, theta, running) = random_coupling(4, 4.0, 90);
    let u = random_matrix(20, 8, 91) * 3.0;
    let norm = NormSource::Running(&running);
    let (v, ld) = layer.forward(&theta, u.view(), norm).unwrap();
    // Most samples sit near the clamp bound.
    assert!(ld.iter().any(|l| l.abs() > 6.0), "scales not saturated: {ld}");
    let back = layer.inverse(&theta, v.view(), &running).unwrap();
    let err = (&back - &u).iter().map(|d| d.abs()).fold(0.0, f64::max);
    assert!(err <= 1e-6, "round-trip error {err:e}");

    let mut cfg = FlowConfig::for_object(2, 2, 92);
    cfg.hidden = 4;
    let mut model = perturbed_model(cfg, 93, 3.0);
    model.calibrate(sample_latent(16, 8, 94).view()).unwrap();
    let w = sample_latent(50, 8, 95);
    let (z, _) = model.forward(w.view(), Mode::Eval).unwrap();
    let err = (&model.inverse(z.view()).unwrap() - &w)
        .iter()
        .map(|d| d.abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-6, "model round-trip error {err:e}");
}

#[test]
fn tiny_model_logdet_is_exact() {
    let mut cfg = FlowConfig::for_object(2, 2, 5);
    cfg.hidden = 3;
    let model = criteria::eval_ready_model(cfg, 6);
    let w = sample_latent(4, 8, 7);
    for row in w.rows() {
        let (_, ld) = model.forward_one(row, Mode::Eval).unwrap();
        let mut f = |x: &[f64]| model.forward_one(ArrayView1::from(x), Mode::Eval).unwrap().0.to_vec();
        let numeric = log_abs_det(fd_jacobian(&mut f, row.as_slice().unwrap(), 1e-5));
        assert!((ld - numeric).abs() <= 1e-3 * ld.abs().max(1e-3), "{ld} vs {numeric}");
    }
}

#[test]
fn latent_draws_are_standard_normal() {
    let w = sample_latent(10_000, 16, 123);
    for col in w.columns() {
        let mean = col.mean().unwrap();
        let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert!(mean.abs() <= 0.05, "mean {mean}");
        assert!((0.9..=1.1).contains(&var), "var {var}");
    }
    assert_eq!(w, sample_latent(10_000, 16, 123));
    assert_ne!(w.slice(s![..10, ..]), sample_latent(10, 16, 124));
}

#[test]
fn train_mode_logdet_matches_eval_mode_after_calibration_on_the_same_batch() {
    // With running statistics copied from this exact batch, the two modes agree.
    let cfg = FlowConfig::for_object(2, 2, 8);
    let mut model = perturbed_model(cfg, 9, 0.1);
    let w = sample_latent(12, model.dim(), 10);
    model.calibrate(w.view()).unwrap();
    let (zt, lt) = model.forward(w.view(), Mode::Train).unwrap();
    let (ze, le) = model.forward(w.view(), Mode::Eval).unwrap();
    let dz: Array2<f64> = &zt - &ze;
    assert!(dz.iter().all(|d| d.abs() < 1e-9));
    assert!((&lt - &le).iter().all(|d| d.abs() < 1e-9));
}
