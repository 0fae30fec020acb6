use rhvae::autodiff::{Tape, Tensor, Var};
use rhvae::flow::{hamiltonian_riemann, leapfrog_euclidean, leapfrog_generalized, PhaseState, Potential};
use rhvae::metric::MetricField;

/// `U(z) = ½‖z‖² + ¼ (z₀ z₁)² + 0.3 z₀`
pub struct Anharmonic;

impl Potential for Anharmonic {
    fn energy(&self, z: &Var) -> rhvae::Result<Var> {
        let a = z.slice(1, 0, 1)?;
        let b = z.slice(1, 1, 1)?;
        let cross = a.mul(&b)?.square().scale(0.25).add(&a.scale(0.3))?.sum_axis(1, false)?;
        Ok(z.square().sum_axis(1, false)?.scale(0.5).add(&cross)?)
    }
}

pub fn row(v: &[f64]) -> Tensor {
    Tensor::new([1, v.len()], v.to_vec()).unwrap()
}

pub fn generalized_step(field: &MetricField, z: &[f64], rho: &[f64], eps: f64, fp: usize) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let f = field.bind(&tape);
    let s = PhaseState {
        z: tape.constant(row(z)),
        rho: tape.constant(row(rho)),
    };
    let out = leapfrog_generalized(&Anharmonic, &f, &s, &tape.scalar(eps), fp).unwrap();
    (out.z.value().data().to_vec(), out.rho.value().data().to_vec())
}

pub fn euclidean_step(z: &[f64], rho: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let s = PhaseState {
        z: tape.constant(row(z)),
        rho: tape.constant(row(rho)),
    };
    let out = leapfrog_euclidean(&Anharmonic, &s, &tape.scalar(eps)).unwrap();
    (out.z.value().data().to_vec(), out.rho.value().data().to_vec())
}

pub fn riemann_energy(field: &MetricField, z: &[f64], rho: &[f64]) -> f64 {
    let tape = Tape::new();
    let f = field.bind(&tape);
    let s = PhaseState {
        z: tape.constant(row(z)),
        rho: tape.constant(row(rho)),
    };
    hamiltonian_riemann(&Anharmonic, &f, &s).unwrap().item().unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn det(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        if p != c {
            m.swap(p, c);
            det = -det;
        }
        det *= m[c][c];
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    det
}

/// Central-difference Jacobian determinant of a phase-space map on `R^4`.
pub fn jacobian_det(map: impl Fn(&[f64], &[f64]) -> (Vec<f64>, Vec<f64>), x: [f64; 4], h: f64) -> f64 {
    let eval = |v: &[f64; 4]| {
        let (z, r) = map(&v[..2], &v[2..]);
        [z[0], z[1], r[0], r[1]]
    };
    let mut cols = vec![vec![0.0; 4]; 4];
    for k in 0..4 {
        let (mut p, mut m) = (x, x);
        p[k] += h;
        m[k] -= h;
        let (fp, fm) = (eval(&p), eval(&m));
        for i in 0..4 {
            cols[i][k] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    det(cols)
}
