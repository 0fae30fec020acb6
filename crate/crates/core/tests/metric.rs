mod common;

use common::{lift, random_binary, random_field, small_spec};
use rand_distr::{Distribution, StandardNormal};
use rhvae::autodiff::{grad_check, linalg, Tape, Tensor};
use rhvae::metric::{
    freeze_metric, metric_logdet, momentum_log_density, pullback_metric, reduce_field, sample_momentum, FieldVars,
    MetricField, LOG_2PI,
};
use rhvae::nn::{init_params, ModelKind};

fn row(v: &[f64]) -> Tensor {
    Tensor::new([1, v.len()], v.to_vec()).unwrap()
}

fn metric_at(field: &MetricField, z: &[f64]) -> Vec<f64> {
    let d = field.dim();
    let inv = Tensor::new([d, d], field.inverse_metric_at(z)).unwrap();
    linalg::inverse_spd(&inv).unwrap().data().to_vec()
}

fn draw_momenta(field: &MetricField, z: &[f64], n: usize, seed: u64) -> Vec<f64> {
    let d = field.dim();
    let mut r = common::rng(seed);
    let u: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
    let tape = Tape::new();
    let f = field.bind(&tape);
    let zs = tape.constant(Tensor::new([n, d], z.repeat(n)).unwrap());
    let rho = sample_momentum(&f, &zs, &tape.constant(Tensor::new([n, d], u).unwrap())).unwrap();
    rho.value().data().to_vec()
}

#[test]
fn momentum_covariance_matches_metric() {
    let field = random_field(2, 3, 17, 0.8, 1e-2);
    let n = 200_000;
    for z in [[0.0, 0.0], [0.5, -0.4], [-1.2, 0.9]] {
        let rho = draw_momenta(&field, &z, n, 3);
        let g = metric_at(&field, &z);
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for a in 0..2 {
            for b in 0..2 {
                let c: f64 = rho.chunks(2).map(|r| r[a] * r[b]).sum::<f64>() / n as f64;
                assert!((c - g[a * 2 + b]).abs() < 0.05 * scale, "z={z:?} ({a},{b}): {c} vs {}", g[a * 2 + b]);
            }
        }
    }
}

#[test]
fn momentum_density_normalized_and_matches_entropy() {
    let field = random_field(2, 3, 18, 0.8, 0.05);
    let z = [0.3, 0.1];
    let d = 2;
    let g = metric_at(&field, &z);
    let s = 3.0 * g.iter().fold(0.0f64, |m, v| m.max(v.abs())).sqrt();
    let n = 100_000;
    let mut r = common::rng(5);
    let proposal: Vec<f64> = (0..n * d).map(|_| { let e: f64 = StandardNormal.sample(&mut r); s * e }).collect();
    let tape = Tape::new();
    let f = field.bind(&tape);
    let zs = tape.constant(Tensor::new([n, d], z.repeat(n)).unwrap());
    let lq = momentum_log_density(&f, &zs, &tape.constant(Tensor::new([n, d], proposal.clone()).unwrap())).unwrap();
    let ratios: Vec<f64> = lq
        .value()
        .data()
        .iter()
        .zip(proposal.chunks(d))
        .map(|(l, p)| {
            let lr = -0.5 * p.iter().map(|v| v * v).sum::<f64>() / (s * s) - d as f64 * s.ln() - 0.5 * d as f64 * LOG_2PI;
            (l - lr).exp()
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / n as f64;
    let se = (ratios.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * se, "{mean} ± {se}");

    let rho = draw_momenta(&field, &z, n, 6);
    let lq = momentum_log_density(&f, &zs, &tape.constant(Tensor::new([n, d], rho).unwrap())).unwrap();
    let v = lq.value();
    let neg_mean = -v.data().iter().sum::<f64>() / n as f64;
    let det_g = g[0] * g[3] - g[1] * g[2];
    let entropy = 0.5 * (d as f64 * (1.0 + LOG_2PI) + det_g.ln());
    let sd = (v.data().iter().map(|x| (-x - neg_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!((neg_mean - entropy).abs() < 4.0 * sd / (n as f64).sqrt());

    let tape = Tape::new();
    let f = field.bind(&tape);
    let zv = tape.constant(row(&z));
    let a = momentum_log_density(&f, &zv, &tape.constant(row(&[0.4, -0.9]))).unwrap().item().unwrap();
    let b = momentum_log_density(&f, &zv, &tape.constant(row(&[-0.4, 0.9]))).unwrap().item().unwrap();
    assert_eq!(a, b);
}

#[test]
fn inverse_metric_bounded_below_by_lambda() {
    let lambda = 0.02;
    let field = random_field(3, 5, 19, 0.7, lambda);
    let mut r = common::rng(7);
    for _ in 0..200 {
        let z = common::uniform(&mut r, 3, -3.0, 3.0);
        let g = field.inverse_metric_at(&z);
        let ev = linalg::symmetric_eigenvalues(&g, 3);
        assert!(ev[0] >= lambda * (1.0 - 1e-12));
        let v = common::uniform(&mut r, 3, -1.0, 1.0);
        let quad: f64 = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| v[i] * g[i * 3 + j] * v[j]).sum();
        let norm: f64 = v.iter().map(|x| x * x).sum();
        assert!(quad >= lambda * norm * (1.0 - 1e-12));
    }
}

#[test]
fn inverse_metric_far_field_and_logdet_identity() {
    let field = random_field(2, 4, 20, 0.5, 1e-2);
    let far = field.inverse_metric_at(&[50.0, 0.0]);
    assert!((far[0] - 1e-2).abs() < 1e-10 && far[1].abs() < 1e-10 && (far[3] - 1e-2).abs() < 1e-10);
    let z = [0.2, -0.1];
    let inv = Tensor::new([2, 2], field.inverse_metric_at(&z)).unwrap();
    let sum = field.metric_logdet_at(&z).unwrap() + linalg::logdet_spd(&inv).unwrap().item().unwrap();
    assert_eq!(sum, 0.0);
}

#[test]
fn field_gradients_match_finite_differences() {
    let field = random_field(2, 3, 21, 0.8, 1e-2);
    let n = field.len();
    let factors = field.factors.clone();
    let report = grad_check(
        |tape, v| {
            let m = v[2].reshape(&[n, 2, 2])?;
            let sym = m.add(&m.transpose()?)?.scale(0.5).reshape(&[n, 4])?;
            let f = FieldVars {
                centroids: v[1].clone(),
                factors: sym,
                inv_t2: tape.scalar(1.0 / 0.64),
                lambda: tape.scalar(1e-2),
            };
            let g = lift(f.inverse_metric(&v[0]))?;
            let ld = lift(metric_logdet(&f, &v[0]))?;
            g.square().sum()?.add(&ld.sum()?)
        },
        &[row(&[0.3, -0.2]), field.centroids.clone(), factors],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{:e}", report.max_rel_error);
}

#[test]
fn momentum_sampler_differentiable() {
    let field = random_field(2, 2, 22, 0.8, 1e-2);
    let report = grad_check(
        |tape, v| {
            let f = field.bind(tape);
            let u = tape.constant(row(&[0.7, -1.3]));
            let rho = lift(sample_momentum(&f, &v[0], &u))?;
            let lq = lift(momentum_log_density(&f, &v[0], &rho))?;
            rho.square().sum()?.add(&lq.sum()?)
        },
        &[row(&[0.1, 0.4])],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5);
}

#[test]
fn frozen_field_has_one_centroid_per_datum() {
    let data = random_binary(120, 3, 3, 8);
    let spec = small_spec(ModelKind::Rhvae, 9);
    let params = init_params(&spec, 2).unwrap();
    let field = freeze_metric(&params, &spec, &data.all(), None).unwrap();
    assert_eq!(field.len(), 120);
    assert_eq!(field.centroids, params.encode_means(&data.all()).unwrap());

    let full = reduce_field(&field, 120).unwrap();
    let mut a: Vec<Vec<u64>> = field.centroids.data().chunks(2).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
    let mut b: Vec<Vec<u64>> = full.centroids.data().chunks(2).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);

    let ten = freeze_metric(&params, &spec, &data.all(), Some(10)).unwrap();
    assert_eq!(ten.len(), 10);
    assert!(freeze_metric(&params, &spec, &data.all(), Some(121)).is_err());

    let vae = small_spec(ModelKind::Vae, 9);
    assert!(freeze_metric(&init_params(&vae, 2).unwrap(), &vae, &data.all(), None).is_err());
}

#[test]
fn pullback_step_sizes_agree() {
    let spec = small_spec(ModelKind::Vae, 16);
    let params = init_params(&spec, 31).unwrap();
    let decode = |z: &[f64]| params.decode_values(&row(z)).unwrap().into_data();
    let z = [0.31, -0.52];
    let a = pullback_metric(decode, &z, 1e-4);
    let b = pullback_metric(decode, &z, 1e-5);
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-5 * scale, "{x} vs {y}");
    }
    assert_eq!(a[1], a[2]);
}
