//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.
//!
//! Set `RHVAE_ACCEPTANCE_CACHE=<dir>` to reuse trained shapes models across
//! runs; models are retrained when the directory has no matching checkpoint.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::phase::{generalized_step, jacobian_det, max_diff, riemann_energy, row, Anharmonic};
use common::{lift, random_field, small_spec};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rhvae::autodiff::{grad_check, linalg, Tape, Tensor, Var};
use rhvae::checkpoint::{load_checkpoint, save_checkpoint, BLOB_FILE, MANIFEST_FILE};
use rhvae::cluster::{clustering_experiment, f1_score, k_medoids, DistanceMatrix};
use rhvae::data::{make_shapes, split, Dataset, SplitSpec};
use rhvae::eval::{is_log_likelihood, reconstruction_error, relative_error};
use rhvae::flow::{
    elbo_value, hamiltonian_riemann, leapfrog_euclidean, leapfrog_generalized, objective, potential,
    temperature_schedule, DecoderPotential, FieldSource, Noise, PhaseState, Potential,
};
use rhvae::geometry::{optimize_geodesic, GeodesicConfig, GridMetric, LatentGrid};
use rhvae::metric::{sample_momentum, MetricField};
use rhvae::nn::{init_params, ModelKind};
use rhvae::rng::{stream, tag};
use rhvae::train::{train, ModelBundle, TrainConfig};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Line {
    id: usize,
    pass: bool,
    text: String,
}

fn report(lines: &mut Vec<Line>, id: usize, name: &str, start: Instant, limit_s: Option<f64>, o: Outcome) {
    let secs = start.elapsed().as_secs_f64();
    let pass = o.pass && limit_s.is_none_or(|l| secs < l);
    let limit = limit_s.map_or(String::new(), |l| format!(" < {l:.0} s"));
    let text = format!(
        "criterion {id:>2} {} {name}: {} [{secs:.1} s{limit}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail
    );
    eprintln!("{text}");
    lines.push(Line { id, pass, text });
}

fn c1_integrator() -> Outcome {
    let field = random_field(2, 2, 101, 0.8, 1e-2);
    let (z0, r0) = ([0.2, -0.3], [0.5, 1.1]);
    let (z1, r1) = generalized_step(&field, &z0, &r0, 1e-2, 10);
    let (z2, r2) = generalized_step(&field, &z1, &r1, -1e-2, 10);
    let rev = max_diff(&z2, &z0).max(max_diff(&r2, &r0));
    let det = jacobian_det(|z, r| generalized_step(&field, z, r, 1e-2, 10), [0.1, 0.25, -0.4, 0.7], 1e-5);
    let h0 = riemann_energy(&field, &z0, &r0);
    let drift = |eps: f64, steps: usize| {
        let (mut z, mut r) = (z0.to_vec(), r0.to_vec());
        for _ in 0..steps {
            (z, r) = generalized_step(&field, &z, &r, eps, 10);
        }
        (riemann_energy(&field, &z, &r) - h0).abs()
    };
    let ratio = drift(1e-2, 50) / drift(5e-3, 100);
    outcome(
        rev < 1e-8 && (det - 1.0).abs() < 1e-5 && (3.0..=5.0).contains(&ratio),
        format!("reversibility {rev:.1e} (< 1e-8), |det-1| {:.1e} (< 1e-5), drift ratio {ratio:.3} (in [3,5])", (det - 1.0).abs()),
    )
}

fn c2_flat_reduction() -> Outcome {
    let data = common::random_binary(5, 3, 1, 2);
    let rh = small_spec(ModelKind::Rhvae, 9);
    let hv = small_spec(ModelKind::Hvae, 9);
    let prh = init_params(&rh, 4).unwrap();
    let phv = init_params(&hv, 4).unwrap();
    let noise = Noise::draw(&mut stream(1, tag::TRAIN_NOISE, 0), 5, 2);
    let flat = MetricField::flat(2, 1.0);
    let a = elbo_value(&prh, &rh, &data.all(), &noise, FieldSource::Frozen(&flat)).unwrap();
    let b = elbo_value(&phv, &hv, &data.all(), &noise, FieldSource::Batch).unwrap();
    let elbo_gap = (a - b).abs();

    let tape = Tape::new();
    let s = PhaseState {
        z: tape.constant(row(&[0.4, -0.7])),
        rho: tape.constant(row(&[0.3, 0.9])),
    };
    let eps = tape.scalar(0.05);
    let sv = leapfrog_euclidean(&Anharmonic, &s, &eps).unwrap();
    let gl = leapfrog_generalized(&Anharmonic, &flat.bind(&tape), &s, &eps, 3).unwrap();
    let step_gap = max_diff(sv.z.value().data(), gl.z.value().data())
        .max(max_diff(sv.rho.value().data(), gl.rho.value().data()));
    outcome(
        elbo_gap < 1e-10 && step_gap < 1e-12,
        format!("|ELBO_rhvae - ELBO_hvae| {elbo_gap:.1e} (< 1e-10), |GL - SV| {step_gap:.1e} (< 1e-12)"),
    )
}

fn c3_gradients() -> Outcome {
    let mut spec = small_spec(ModelKind::Rhvae, 5);
    spec.hidden = 4;
    spec.metric.hidden = 3;
    spec.flow.n_lf = 1;
    let params = init_params(&spec, 21).unwrap();
    let tensors: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let x = Tensor::new([1, 5], vec![1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let noise = Noise {
        eps_z: Tensor::new([1, 2], vec![0.4, -1.1]).unwrap(),
        u: Tensor::new([1, 2], vec![-0.3, 0.8]).unwrap(),
    };
    let fd = grad_check(
        |tape, vars| {
            let m = params.rebuild(vars.to_vec());
            lift(objective(&m, &spec, &tape.constant(x.clone()), &noise, FieldSource::Batch))?.sum()
        },
        &tensors,
        1e-5,
    )
    .unwrap()
    .max_rel_error;

    // Explicit ∂H/∂z with finite-difference ∂G/∂z_i against autodiff.
    let spec = small_spec(ModelKind::Rhvae, 6);
    let params = init_params(&spec, 3).unwrap();
    let field = random_field(2, 4, 8, 0.9, 1e-2);
    let x = Tensor::new([1, 6], vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let (z, rho) = ([0.15, -0.35], [0.7, -0.4]);
    let tape = Tape::new();
    let m = params.bind_constants(&tape);
    let pot = DecoderPotential {
        decoder: &m.decoder,
        x: tape.constant(x),
    };
    let zv = tape.leaf(row(&z));
    let s = PhaseState {
        z: zv.clone(),
        rho: tape.constant(row(&rho)),
    };
    let h = hamiltonian_riemann(&pot, &field.bind(&tape), &s).unwrap().sum().unwrap();
    let auto = tape.grad_values(&h, &[&zv]).unwrap().remove(0);
    let metric = |z: &[f64]| {
        let inv = Tensor::new([2, 2], field.inverse_metric_at(z)).unwrap();
        linalg::inverse_spd(&inv).unwrap().data().to_vec()
    };
    let energy = |z: &[f64]| potential(&m.decoder, &pot.x, &tape.constant(row(z))).unwrap().item().unwrap();
    let ginv = field.inverse_metric_at(&z);
    let v = [ginv[0] * rho[0] + ginv[1] * rho[1], ginv[2] * rho[0] + ginv[3] * rho[1]];
    let step = 1e-6;
    let mut explicit_err: f64 = 0.0;
    for i in 0..2 {
        let (mut zp, mut zm) = (z, z);
        zp[i] += step;
        zm[i] -= step;
        let (gp, gm) = (metric(&zp), metric(&zm));
        let dg: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * step)).collect();
        let du = (energy(&zp) - energy(&zm)) / (2.0 * step);
        let trace: f64 = (0..2).flat_map(|a| (0..2).map(move |b| (a, b))).map(|(a, b)| ginv[a * 2 + b] * dg[b * 2 + a]).sum();
        let quad: f64 = (0..2).flat_map(|a| (0..2).map(move |b| (a, b))).map(|(a, b)| v[a] * dg[a * 2 + b] * v[b]).sum();
        let explicit = du + 0.5 * trace - 0.5 * quad;
        let a = auto.data()[i];
        explicit_err = explicit_err.max((explicit - a).abs() / a.abs().max(1.0));
    }
    outcome(
        fd < 1e-4 && explicit_err < 1e-4,
        format!("objective grad rel err {fd:.1e} (< 1e-4), explicit dH/dz rel err {explicit_err:.1e} (< 1e-4)"),
    )
}

fn c4_schedule() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut last_exact = true;
    for b0 in [0.3, 0.5, 0.9] {
        for k in [1, 3, 5, 10, 15] {
            let s = temperature_schedule(b0, k);
            last_exact &= s.sqrt_beta[k] == 1.0;
            // log|det| of the initial 1/√β₀ scaling plus each α_k scaling in d = 2.
            let total = -2.0 * b0.ln() + s.alpha.iter().map(|a| 2.0 * a.ln()).sum::<f64>();
            worst = worst.max(total.abs());
        }
    }
    let b1 = temperature_schedule(0.3, 3).sqrt_beta[1];
    outcome(
        worst < 1e-12 && last_exact && (b1 - 0.325301).abs() < 1e-6,
        format!("max |log det sum| {worst:.1e} (< 1e-12), sqrt(beta_K) == 1: {last_exact}, sqrt(beta_1) {b1:.7} (0.325301 +- 1e-6)"),
    )
}

fn c5_momentum(field: &MetricField) -> Outcome {
    let d = 2;
    let n = 200_000;
    let c = field.centroids.data();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in c.chunks(2) {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mut r = common::rng(55);
    let mut worst: f64 = 0.0;
    for t in 0..3 {
        let z: Vec<f64> = (0..2).map(|k| r.random_range(lo[k]..hi[k])).collect();
        let mut g = stream(5, tag::VAL_NOISE, t);
        let u: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut g)).collect();
        let tape = Tape::new();
        let f = field.bind(&tape);
        let zs = tape.constant(Tensor::new([n, d], z.repeat(n)).unwrap());
        let rho = sample_momentum(&f, &zs, &tape.constant(Tensor::new([n, d], u).unwrap())).unwrap();
        let rho = rho.value();
        let inv = Tensor::new([2, 2], field.inverse_metric_at(&z)).unwrap();
        let gm = linalg::inverse_spd(&inv).unwrap();
        let scale = gm.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for a in 0..2 {
            for b in 0..2 {
                let cov: f64 = rho.data().chunks(2).map(|p| p[a] * p[b]).sum::<f64>() / n as f64;
                worst = worst.max((cov - gm.data()[a * 2 + b]).abs() / scale);
            }
        }
    }
    outcome(worst < 0.05, format!("max |cov - G| / max|G| over 3 points {:.2}% (< 5%)", 100.0 * worst))
}

struct ShapesRun {
    seed: u64,
    full: Dataset,
    test: Dataset,
    rhvae: ModelBundle,
    vae: ModelBundle,
}

fn shapes_config(kind: ModelKind, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.model.kind = kind;
    cfg.model.metric.hidden = 400;
    cfg
}

fn cached_train(train_set: &Dataset, val: &Dataset, cfg: &TrainConfig, name: &str) -> (ModelBundle, bool) {
    let cache = std::env::var_os("RHVAE_ACCEPTANCE_CACHE").map(PathBuf::from);
    if let Some(dir) = &cache {
        if let Ok(b) = load_checkpoint(&dir.join(name)) {
            let mut want = cfg.clone();
            want.model.data_dim = train_set.dim();
            if b.config == want {
                return (b, true);
            }
        }
    }
    let b = train(train_set, val, cfg).expect("training");
    if let Some(dir) = &cache {
        save_checkpoint(&b, &dir.join(name)).expect("cache checkpoint");
    }
    (b, false)
}

/// Trains RHVAE and VAE on the 160/40 shapes split for each seed. The 40
/// held-out images serve for early stopping and as the test set.
fn train_shapes() -> (Vec<ShapesRun>, usize) {
    let mut cached = 0;
    let runs = SEEDS
        .iter()
        .map(|&seed| {
            let full = make_shapes(100, 100, 32, seed).unwrap();
            let (tr, te) = split(&full, &SplitSpec { seed, ..SplitSpec::default() }).unwrap();
            let (rhvae, a) = cached_train(&tr, &te, &shapes_config(ModelKind::Rhvae, seed), &format!("rhvae_{seed}"));
            let (vae, b) = cached_train(&tr, &te, &shapes_config(ModelKind::Vae, seed), &format!("vae_{seed}"));
            cached += a as usize + b as usize;
            ShapesRun {
                seed,
                full,
                test: te,
                rhvae,
                vae,
            }
        })
        .collect();
    (runs, cached)
}

fn c6_log_likelihood(runs: &[ShapesRun], cached: usize) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    let mut improved = true;
    for r in runs {
        let a = is_log_likelihood(&r.rhvae.params, 2, &r.test, 200, 5, r.seed).unwrap();
        let b = is_log_likelihood(&r.vae.params, 2, &r.test, 200, 5, r.seed).unwrap();
        wins += (a.mean >= b.mean) as usize;
        for m in [&r.rhvae, &r.vae] {
            improved &= m.best_val_obj() >= m.initial_val_obj;
        }
        parts.push(format!("seed {}: {:.2} vs {:.2}", r.seed, a.mean, b.mean));
    }
    let note = if cached > 0 { format!(", {cached} models from cache") } else { String::new() };
    outcome(
        wins >= 2 && improved,
        format!(
            "RHVAE vs VAE test log p(x) {} ; RHVAE >= VAE in {wins}/3 (need 2); best val >= initial: {improved}{note}",
            parts.join(", ")
        ),
    )
}

fn c7_reconstruction(runs: &[ShapesRun]) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for r in runs {
        let a = reconstruction_error(&r.rhvae.params, &r.test).unwrap();
        let b = reconstruction_error(&r.vae.params, &r.test).unwrap();
        wins += (a <= b) as usize;
        parts.push(format!("seed {}: {a:.4} vs {b:.4}", r.seed));
    }
    let x = [1.0, 0.0, 0.5, 1.0];
    let endpoints = relative_error(&x, &x).unwrap() == 0.0 && relative_error(&x, &[0.0; 4]).unwrap() == 1.0;
    outcome(
        wins >= 2 && endpoints,
        format!(
            "RHVAE vs VAE test error {} ; RHVAE <= VAE in {wins}/3 (need 2); endpoints exact: {endpoints}",
            parts.join(", ")
        ),
    )
}

fn c8_geodesic() -> Outcome {
    let field = MetricField::flat(2, 0.01);
    let (z1, z2) = ([0.1, -0.2], [0.7, 0.6]);
    let cfg = GeodesicConfig::default();
    let (net, len) = optimize_geodesic(&field, &z1, &z2, &cfg, 0).unwrap();
    let pts = net.points(cfg.n).unwrap();
    let dev = (0..=cfg.n)
        .map(|i| {
            let t = i as f64 / cfg.n as f64;
            let p = pts.row(i);
            (0..2).map(|k| (p[k] - (z1[k] + t * (z2[k] - z1[k]))).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let rel = (len / 10.0 - 1.0).abs();
    outcome(
        dev < 1e-2 && rel < 0.01,
        format!("chord deviation {dev:.1e} (< 1e-2), length {len:.4} vs 10 ({:.3}%, < 1%)", 100.0 * rel),
    )
}

fn c9_dijkstra() -> Outcome {
    let lambda: f64 = 0.01;
    let res = 101;
    let grid = LatentGrid::new([0.0, 0.0], [1.0, 1.0], res).unwrap();
    let m = GridMetric::new(&MetricField::flat(2, lambda), grid).unwrap();
    let s = 1.0 / lambda.sqrt();
    let h = 0.01;
    let center = 50 * res + 50;
    let d0 = m.distances_from_node(center);
    let singles = [
        (center + 1, h * s),
        (center + res, h * s),
        (center + res + 1, h * s * 2f64.sqrt()),
        (center - res + 1, h * s * 2f64.sqrt()),
    ];
    let single_err = singles.iter().map(|&(k, e)| (d0[k] - e).abs()).fold(0.0, f64::max);
    let mut r = common::rng(9);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    while pairs < 100 {
        let (a, b) = (r.random_range(0..res * res), r.random_range(0..res * res));
        if a == b {
            continue;
        }
        let (pa, pb) = (m.grid.node(a), m.grid.node(b));
        let exact = s * ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
        worst = worst.max((m.distances_from_node(a)[b] / exact - 1.0).abs());
        pairs += 1;
    }
    outcome(
        worst < 0.09 && single_err < 1e-12,
        format!("max relative deviation over 100 pairs {:.2}% (< 9%), single-edge error {single_err:.1e}", 100.0 * worst),
    )
}

fn c10_clustering(run: &ShapesRun) -> Outcome {
    let table = clustering_experiment(&run.rhvae, &run.full, &SEEDS, 200, 100).unwrap();
    let rows: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("seed {}: {:.2}/{:.2}", r.seed, r.geodesic, r.euclidean))
        .collect();

    let mut g = common::rng(3);
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for i in 0..60 {
        let off = if i % 2 == 0 { -5.0 } else { 5.0 };
        pts.extend([off + g.random_range(-1.0..1.0), g.random_range(-1.0..1.0)]);
        labels.push(i % 2);
    }
    let km = k_medoids(&DistanceMatrix::euclidean(&pts, 2), 2, 0, 100).unwrap();
    let sanity = f1_score(&km.assignments, &labels).unwrap();
    outcome(
        table.mean_geodesic >= table.mean_euclidean && sanity == 100.0,
        format!(
            "model seed {}, geodesic/euclidean macro-F1 {}; mean {:.2} vs {:.2} (geodesic >= euclidean); separable clouds {sanity:.1}",
            run.seed,
            rows.join(", "),
            table.mean_geodesic,
            table.mean_euclidean
        ),
    )
}

/// `U(z) = ½ (z − μ)ᵀ P (z − μ)` with a 2×2 precision `P`.
struct Gaussian {
    mu: [f64; 2],
    p: [f64; 3],
}

impl Potential for Gaussian {
    fn energy(&self, z: &Var) -> rhvae::Result<Var> {
        let a = z.slice(1, 0, 1)?.offset(-self.mu[0]);
        let b = z.slice(1, 1, 1)?.offset(-self.mu[1]);
        let q = a
            .square()
            .scale(self.p[0])
            .add(&a.mul(&b)?.scale(2.0 * self.p[1]))?
            .add(&b.square().scale(self.p[2]))?;
        Ok(q.sum_axis(1, false)?.scale(0.5))
    }
}

fn c11_rhmc() -> Outcome {
    let mu = [1.0, -0.5];
    let cov = [1.0, 0.6, 0.6, 2.0];
    let det = cov[0] * cov[3] - cov[1] * cov[2];
    let target = Gaussian {
        mu,
        p: [cov[3] / det, -cov[1] / det, cov[0] / det],
    };
    // Constant metric: one centroid with a vanishing kernel gradient.
    let l = Tensor::new([1, 2, 2], vec![0.9, 0.0, 0.5, 1.2]).unwrap();
    let field = MetricField::from_cholesky(Tensor::zeros([1, 2]).unwrap(), &l, 1e8, 0.05).unwrap();
    let n = 20_000;
    let burn = 500;
    let steps = 8;
    let mut r = common::rng(11);
    let mut z = vec![0.0, 0.0];
    let mut samples = Vec::with_capacity(2 * n);
    let mut accepted = 0;
    for it in 0..n + burn {
        let tape = Tape::new();
        let f = field.bind(&tape);
        let zv = tape.constant(row(&z));
        let u: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut r)).collect();
        let rho = sample_momentum(&f, &zv, &tape.constant(row(&u))).unwrap();
        let mut s = PhaseState { z: zv, rho };
        let h0 = hamiltonian_riemann(&target, &f, &s).unwrap().item().unwrap();
        let eps = tape.scalar(r.random_range(0.25..0.45));
        for _ in 0..steps {
            s = leapfrog_generalized(&target, &f, &s, &eps, 5).unwrap();
        }
        let h1 = hamiltonian_riemann(&target, &f, &s).unwrap().item().unwrap();
        if r.random::<f64>() < (h0 - h1).exp() {
            z = s.z.value().data().to_vec();
            accepted += (it >= burn) as usize;
        }
        if it >= burn {
            samples.extend_from_slice(&z);
        }
    }
    // Batch means for Monte Carlo standard errors.
    let batches = 50;
    let per = n / batches;
    let mut worst_z: f64 = 0.0;
    let mut means = [0.0; 2];
    for k in 0..2 {
        let xs: Vec<f64> = samples.chunks(2).map(|p| p[k]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let bm: Vec<f64> = xs.chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect();
        let var_b = bm.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
        let se = (var_b / batches as f64).sqrt();
        worst_z = worst_z.max((m - mu[k]).abs() / se);
        means[k] = m;
    }
    let mut worst_c: f64 = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let c = samples.chunks(2).map(|p| (p[a] - means[a]) * (p[b] - means[b])).sum::<f64>() / (n - 1) as f64;
            worst_c = worst_c.max((c / cov[a * 2 + b] - 1.0).abs());
        }
    }
    outcome(
        worst_z < 3.0 && worst_c < 0.1,
        format!(
            "mean error {worst_z:.2} MC SE (< 3), max covariance relative error {:.2}% (< 10%), acceptance {:.2}, {n} samples",
            100.0 * worst_c,
            accepted as f64 / n as f64
        ),
    )
}

fn bits(b: &ModelBundle) -> Vec<u64> {
    let mut out: Vec<u64> = b
        .params
        .named()
        .into_iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect();
    if let Some(f) = &b.field {
        out.extend(f.centroids.data().iter().chain(f.factors.data()).map(|v| v.to_bits()));
        out.extend([f.temperature.to_bits(), f.lambda.to_bits()]);
    }
    out
}

fn c12_persistence(bundle: &ModelBundle) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(bundle, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    let exact = bits(&back) == bits(bundle) && back.history == bundle.history && back.config == bundle.config;

    let blob = dir.path().join(BLOB_FILE);
    let mut bytes = std::fs::read(&blob).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&blob, &bytes).unwrap();
    let corrupt = load_checkpoint(dir.path()).is_err();

    let data = make_shapes(20, 20, 16, 7).unwrap();
    let (tr, te) = split(&data, &SplitSpec::default()).unwrap();
    let mut cfg = TrainConfig {
        epochs_max: 6,
        batch_size: 8,
        seed: 7,
        ..TrainConfig::default()
    };
    cfg.model = small_spec(ModelKind::Rhvae, 0);
    let run = || {
        let b = train(&tr, &te, &cfg).unwrap();
        let d = tempfile::tempdir().unwrap();
        save_checkpoint(&b, d.path()).unwrap();
        (b.history_csv(), std::fs::read(d.path().join(MANIFEST_FILE)).unwrap())
    };
    let (h1, m1) = run();
    let (h2, m2) = run();
    let reproducible = h1 == h2 && m1 == m2;
    outcome(
        exact && corrupt && reproducible,
        format!("bit-exact round trip: {exact}, corrupted blob rejected: {corrupt}, history reproducible: {reproducible}"),
    )
}

fn main() -> ExitCode {
    let mut lines = Vec::new();
    let l = &mut lines;
    let t = Instant::now();
    report(l, 1, "integrator properties", t, Some(10.0), c1_integrator());
    let t = Instant::now();
    report(l, 2, "flat-metric reduction", t, Some(5.0), c2_flat_reduction());
    let t = Instant::now();
    report(l, 3, "gradient integrity", t, Some(60.0), c3_gradients());
    let t = Instant::now();
    report(l, 4, "flow determinant identity", t, None, c4_schedule());
    let t = Instant::now();
    report(l, 8, "geodesic oracle", t, Some(60.0), c8_geodesic());
    let t = Instant::now();
    report(l, 9, "Dijkstra oracle", t, Some(30.0), c9_dijkstra());
    let t = Instant::now();
    report(l, 11, "RHMC on a Gaussian", t, Some(60.0), c11_rhmc());

    let t = Instant::now();
    let (runs, cached) = train_shapes();
    report(l, 6, "log-likelihood, RHVAE vs VAE", t, Some(1800.0), c6_log_likelihood(&runs, cached));
    let t = Instant::now();
    report(l, 7, "reconstruction, RHVAE vs VAE", t, None, c7_reconstruction(&runs));
    let t = Instant::now();
    report(l, 5, "momentum sampler", t, Some(30.0), c5_momentum(runs[0].rhvae.field.as_ref().unwrap()));
    let t = Instant::now();
    report(l, 10, "geodesic vs euclidean clustering", t, Some(600.0), c10_clustering(&runs[0]));
    let t = Instant::now();
    report(l, 12, "persistence", t, None, c12_persistence(&runs[0].rhvae));

    lines.sort_by_key(|x| x.id);
    println!();
    for x in &lines {
        println!("{}", x.text);
    }
    let passed = lines.iter().filter(|x| x.pass).count();
    println!("acceptance: {passed}/{} criteria passed", lines.len());
    if passed == lines.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
