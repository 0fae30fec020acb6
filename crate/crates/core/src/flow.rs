//! Hamiltonians, the Störmer–Verlet and generalized leapfrog integrators,
//! tempering, and the VAE / HVAE / RHVAE objectives.
//!
//! All integrators act on batches: `z` and `ρ` are `(B, d)` and every
//! energy is returned per row. Gradients `∇_z` are taken by reverse-mode
//! differentiation on a fresh alias of `z`, which yields the partial
//! derivative with the momentum held fixed, and they are recorded on the
//! tape so that the objective can be differentiated through the flow.

use autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{momentum_log_density, quad_form, sample_momentum, FieldVars, MetricField, LOG_2PI};
use crate::nn::{bernoulli_log_lik, Decoder, Model, ModelKind, ModelSpec};
use crate::rng::{normal_tensor, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub n_lf: usize,
    pub eps: f64,
    pub learn_eps: bool,
    pub sqrt_beta0: f64,
    pub fp_iters: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_lf: 3,
            eps: 1e-2,
            learn_eps: false,
            sqrt_beta0: 0.3,
            fp_iters: 3,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lf == 0 {
            return Err(Error::Config("n_lf must be at least 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("leapfrog step {} must be positive", self.eps)));
        }
        if !(self.sqrt_beta0 > 0.0 && self.sqrt_beta0 <= 1.0) {
            return Err(Error::Config(format!("sqrt_beta0 {} outside (0, 1]", self.sqrt_beta0)));
        }
        if self.fp_iters == 0 {
            return Err(Error::Config("fp_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// A potential energy `U(z)`, evaluated per row of a `(B, d)` batch.
pub trait Potential {
    fn energy(&self, z: &Var) -> Result<Var>;
}

/// `U_x(z) = −log p_θ(x | z) − log N(z; 0, I)` for a Bernoulli decoder.
pub struct DecoderPotential<'a> {
    pub decoder: &'a Decoder<Var>,
    pub x: Var,
}

impl Potential for DecoderPotential<'_> {
    fn energy(&self, z: &Var) -> Result<Var> {
        let probs = self.decoder.decode(z)?;
        let ll = bernoulli_log_lik(&self.x, &probs)?;
        let d = z.shape()[1] as f64;
        let prior = z.square().sum_axis(1, false)?.scale(0.5).offset(0.5 * d * LOG_2PI);
        Ok(prior.sub(&ll)?)
    }
}

pub fn potential(decoder: &Decoder<Var>, x: &Var, z: &Var) -> Result<Var> {
    DecoderPotential {
        decoder,
        x: x.clone(),
    }
    .energy(z)
}

#[derive(Clone, Debug)]
pub struct PhaseState {
    pub z: Var,
    pub rho: Var,
}

fn half_sq_norm(v: &Var) -> Result<Var> {
    Ok(v.square().sum_axis(1, false)?.scale(0.5))
}

/// `U(z) + ½‖ρ‖² + (d/2) log 2π`
pub fn hamiltonian_euclidean(pot: &impl Potential, state: &PhaseState) -> Result<Var> {
    let d = state.z.shape()[1] as f64;
    Ok(pot
        .energy(&state.z)?
        .add(&half_sq_norm(&state.rho)?)?
        .offset(0.5 * d * LOG_2PI))
}

/// `U(z) + ½ log((2π)^d det G(z)) + ½ ρᵀ G⁻¹(z) ρ`
pub fn hamiltonian_riemann(pot: &impl Potential, field: &FieldVars, state: &PhaseState) -> Result<Var> {
    let d = state.z.shape()[1] as f64;
    let ginv = field.inverse_metric(&state.z)?;
    let kinetic = quad_form(&ginv, &state.rho)?.sub(&ginv.logdet_spd()?)?.scale(0.5);
    Ok(pot
        .energy(&state.z)?
        .add(&kinetic)?
        .offset(0.5 * d * LOG_2PI))
}

/// Gradient of `Σ_rows f(alias)` with respect to a fresh alias of `z`.
fn partial_z(z: &Var, f: impl FnOnce(&Var) -> Result<Var>) -> Result<Var> {
    let alias = z.identity();
    let root = f(&alias)?.sum()?;
    Ok(z.tape().grad_graph(&root, &[&alias])?.remove(0))
}

fn check(v: &Var, step: usize, what: &'static str) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, what })
    }
}

/// `A v` for `A` `(B, d, d)` and `v` `(B, d)`.
fn matvec(a: &Var, v: &Var) -> Result<Var> {
    let s = v.shape();
    Ok(a.matmul(&v.reshape(&[s[0], s[1], 1])?)?.reshape(&s)?)
}

fn euclidean_step(pot: &impl Potential, state: &PhaseState, eps: &Var, step: usize) -> Result<PhaseState> {
    let half = eps.scale(0.5);
    let g0 = partial_z(&state.z, |a| pot.energy(a))?;
    let rho_half = state.rho.sub(&g0.mul(&half)?)?;
    check(&rho_half, step, "momentum")?;
    let z = state.z.add(&rho_half.mul(eps)?)?;
    check(&z, step, "position")?;
    let g1 = partial_z(&z, |a| pot.energy(a))?;
    let rho = rho_half.sub(&g1.mul(&half)?)?;
    check(&rho, step, "momentum")?;
    Ok(PhaseState { z, rho })
}

/// One Störmer–Verlet step with identity mass matrix.
pub fn leapfrog_euclidean(pot: &impl Potential, state: &PhaseState, eps: &Var) -> Result<PhaseState> {
    euclidean_step(pot, state, eps, 1)
}

/// The generalized leapfrog for `hamiltonian_riemann`.
///
/// `∇_z H` is split into the position part `U − ½ log det G⁻¹`, which does
/// not involve `ρ` and is differentiated once per position, and the kinetic
/// part `½ ρᵀ G⁻¹ ρ`, differentiated at every fixed-point pass.
struct Generalized<'a, P> {
    pot: &'a P,
    field: &'a FieldVars,
    fp_iters: usize,
}

impl<P: Potential> Generalized<'_, P> {
    fn grad_position(&self, z: &Var) -> Result<Var> {
        partial_z(z, |a| {
            let ginv = self.field.inverse_metric(a)?;
            Ok(self.pot.energy(a)?.sub(&ginv.logdet_spd()?.scale(0.5))?)
        })
    }

    fn grad_kinetic(&self, z: &Var, rho: &Var) -> Result<Var> {
        partial_z(z, |a| {
            let ginv = self.field.inverse_metric(a)?;
            Ok(quad_form(&ginv, rho)?.scale(0.5))
        })
    }

    /// Returns the new state and the position gradient at the new `z`.
    fn step(
        &self,
        state: &PhaseState,
        eps: &Var,
        grad_pos: Option<Var>,
        step: usize,
    ) -> Result<(PhaseState, Var)> {
        let half = eps.scale(0.5);
        let gp = match grad_pos {
            Some(g) => g,
            None => self.grad_position(&state.z)?,
        };
        let mut rho_bar = state.rho.clone();
        for _ in 0..self.fp_iters {
            let g = gp.add(&self.grad_kinetic(&state.z, &rho_bar)?)?;
            rho_bar = state.rho.sub(&g.mul(&half)?)?;
            check(&rho_bar, step, "momentum")?;
        }
        let v0 = matvec(&self.field.inverse_metric(&state.z)?, &rho_bar)?;
        let mut z = state.z.clone();
        for _ in 0..self.fp_iters {
            let v1 = matvec(&self.field.inverse_metric(&z)?, &rho_bar)?;
            z = state.z.add(&v0.add(&v1)?.mul(&half)?)?;
            check(&z, step, "position")?;
        }
        let gp_new = self.grad_position(&z)?;
        let g = gp_new.add(&self.grad_kinetic(&z, &rho_bar)?)?;
        let rho = rho_bar.sub(&g.mul(&half)?)?;
        check(&rho, step, "momentum")?;
        Ok((PhaseState { z, rho }, gp_new))
    }
}

/// One generalized leapfrog step with `fp_iters` fixed-point passes for
/// both implicit updates.
pub fn leapfrog_generalized(
    pot: &impl Potential,
    field: &FieldVars,
    state: &PhaseState,
    eps: &Var,
    fp_iters: usize,
) -> Result<PhaseState> {
    if fp_iters == 0 {
        return Err(Error::Config("fp_iters must be at least 1".into()));
    }
    let g = Generalized { pot, field, fp_iters };
    Ok(g.step(state, eps, None, 1)?.0)
}

/// Inverse-temperature schedule: `√β_k` for `k = 0..=K` and the momentum
/// factors `α_k = √β_{k−1} / √β_k` for `k = 1..=K`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub sqrt_beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn temperature_schedule(sqrt_beta0: f64, k: usize) -> Schedule {
    let inv0 = 1.0 / sqrt_beta0;
    let kk = (k * k) as f64;
    let mut sqrt_beta: Vec<f64> = (0..=k)
        .map(|i| 1.0 / ((1.0 - inv0) * (i * i) as f64 / kk + inv0))
        .collect();
    sqrt_beta[0] = sqrt_beta0;
    sqrt_beta[k] = 1.0;
    let alpha = sqrt_beta.windows(2).map(|w| w[0] / w[1]).collect();
    Schedule { sqrt_beta, alpha }
}

/// End state of a flow and its log-Jacobian determinant.
#[derive(Clone, Debug)]
pub struct FlowOutput {
    pub z: Var,
    pub rho: Var,
    pub log_det: f64,
}

fn tempered_flow(
    z0: &Var,
    rho0: &Var,
    cfg: &FlowConfig,
    mut step: impl FnMut(&PhaseState, usize) -> Result<PhaseState>,
) -> Result<FlowOutput> {
    cfg.validate()?;
    let d = z0.shape()[1] as f64;
    let sched = temperature_schedule(cfg.sqrt_beta0, cfg.n_lf);
    let mut state = PhaseState {
        z: z0.clone(),
        rho: rho0.scale(1.0 / cfg.sqrt_beta0),
    };
    let mut log_det = -d * cfg.sqrt_beta0.ln();
    for (k, &alpha) in sched.alpha.iter().enumerate() {
        let next = step(&state, k + 1)?;
        state = PhaseState {
            z: next.z,
            rho: next.rho.scale(alpha),
        };
        log_det += d * alpha.ln();
    }
    Ok(FlowOutput {
        z: state.z,
        rho: state.rho,
        log_det,
    })
}

/// Tempered Störmer–Verlet flow.
pub fn hvae_flow(pot: &impl Potential, z0: &Var, rho0: &Var, cfg: &FlowConfig, eps: &Var) -> Result<FlowOutput> {
    tempered_flow(z0, rho0, cfg, |s, k| euclidean_step(pot, s, eps, k))
}

/// Tempered generalized-leapfrog flow.
pub fn rhvae_flow(
    pot: &impl Potential,
    field: &FieldVars,
    z0: &Var,
    rho0: &Var,
    cfg: &FlowConfig,
    eps: &Var,
) -> Result<FlowOutput> {
    let g = Generalized {
        pot,
        field,
        fp_iters: cfg.fp_iters,
    };
    let mut cached: Option<Var> = None;
    tempered_flow(z0, rho0, cfg, |s, k| {
        let (next, gp) = g.step(s, eps, cached.take(), k)?;
        // The cached gradient belongs to the untempered position, which
        // tempering leaves unchanged.
        cached = Some(gp);
        Ok(next)
    })
}

/// Standard normal draws for one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    /// Reparametrization noise for `z0`, `(B, d)`.
    pub eps_z: Tensor,
    /// Momentum noise, `(B, d)`.
    pub u: Tensor,
}

impl Noise {
    pub fn draw(rng: &mut Rng, batch: usize, d: usize) -> Self {
        let eps_z = normal_tensor(rng, &[batch, d]);
        let u = normal_tensor(rng, &[batch, d]);
        Self { eps_z, u }
    }
}

/// `log N(z; μ, diag σ²)` at `z = μ + σ ε`, per row.
pub fn log_q_z(log_var: &Var, eps: &Var) -> Result<Var> {
    let d = log_var.shape()[1] as f64;
    Ok(log_var
        .add(&eps.square())?
        .sum_axis(1, false)?
        .scale(-0.5)
        .offset(-0.5 * d * LOG_2PI))
}

/// Source of the metric in the RHVAE objective.
#[derive(Clone, Copy, Debug)]
pub enum FieldSource<'a> {
    /// Centroids and factors from the current batch (training).
    Batch,
    Frozen(&'a MetricField),
}

/// Per-datum objective of `spec.kind`, shape `(B)`. Its batch mean is the
/// ELBO estimate.
pub fn objective(
    model: &Model<Var>,
    spec: &ModelSpec,
    x: &Var,
    noise: &Noise,
    source: FieldSource<'_>,
) -> Result<Var> {
    let tape = x.tape().clone();
    let (mean, log_var) = model.encoder.encode(x)?;
    let eps_z = tape.constant(noise.eps_z.clone());
    let z0 = mean.add(&log_var.scale(0.5).exp().mul(&eps_z)?)?;
    let lq_z = log_q_z(&log_var, &eps_z)?;
    let pot = DecoderPotential {
        decoder: &model.decoder,
        x: x.clone(),
    };
    match spec.kind {
        ModelKind::Vae => Ok(pot.energy(&z0)?.neg().sub(&lq_z)?),
        ModelKind::Hvae => {
            let u = tape.constant(noise.u.clone());
            let eps = model.eps(spec, &tape);
            let out = hvae_flow(&pot, &z0, &u, &spec.flow, &eps)?;
            let end = PhaseState { z: out.z, rho: out.rho };
            let lq_rho = half_sq_norm(&u)?.neg().offset(-0.5 * z0.shape()[1] as f64 * LOG_2PI);
            Ok(hamiltonian_euclidean(&pot, &end)?
                .neg()
                .sub(&lq_z)?
                .sub(&lq_rho)?
                .offset(out.log_det))
        }
        ModelKind::Rhvae => {
            let field = match source {
                FieldSource::Frozen(f) => f.bind(&tape),
                FieldSource::Batch => {
                    let net = model
                        .metric
                        .as_ref()
                        .ok_or_else(|| Error::Unsupported("rhvae model without metric network".into()))?;
                    let l = net.factors(x)?;
                    FieldVars::from_batch(&mean, &l, &model.temperature(spec, &tape), &model.lambda(spec, &tape))?
                }
            };
            let u = tape.constant(noise.u.clone());
            let rho0 = sample_momentum(&field, &z0, &u)?;
            let lq_rho = momentum_log_density(&field, &z0, &rho0)?;
            let eps = model.eps(spec, &tape);
            let out = rhvae_flow(&pot, &field, &z0, &rho0, &spec.flow, &eps)?;
            let end = PhaseState { z: out.z, rho: out.rho };
            Ok(hamiltonian_riemann(&pot, &field, &end)?
                .neg()
                .sub(&lq_z)?
                .sub(&lq_rho)?
                .offset(out.log_det))
        }
    }
}

/// Batch-mean ELBO estimate.
pub fn elbo(model: &Model<Var>, spec: &ModelSpec, x: &Var, noise: &Noise, source: FieldSource<'_>) -> Result<Var> {
    Ok(objective(model, spec, x, noise, source)?.mean()?)
}

/// ELBO of a value-level model on `x` without recording gradients.
pub fn elbo_value(
    model: &Model<Tensor>,
    spec: &ModelSpec,
    x: &Tensor,
    noise: &Noise,
    source: FieldSource<'_>,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.bind_constants(&tape);
    let v = elbo(&bound, spec, &tape.constant(x.clone()), noise, source)?.item()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("objective".into()))
    }
}
