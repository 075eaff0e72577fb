//! Seeded numerical self-checks behind the `verify` subcommand.
//!
//! Each check returns the worst residual over its samples next to the tolerance it is held to.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::controller::{clf_qp_control, solve_care, Clf};
use crate::error::{Error, Result};
use crate::flatness::{
    auxiliary_decomposition, brunovsky_matrices, flat_outputs_from_state, inputs_from_flat, state_from_flat,
    FlatSignal,
};
use crate::mechanism::{coriolis_matrix, energies, mass_matrix_partials, mass_matrix_rate, AMParams};
use crate::oracle::{full_from_reduced, full_lagrangian_accel, reduced_accel_in_full, relative_error};
use crate::reduced::{
    advect, extended_dynamics, state_derivative_at, AdvectedPair, ControlInput, ExtendedInput, ExtendedState,
    ReducedState, Snapshot,
};
use crate::sim::integrator::rk4_step;
use crate::sim::reference::ReferenceSpec;
use crate::spatial::{rotation_from_euler, EulerAngles};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    All,
    Oracle,
    Flatness,
    Controller,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "oracle" => Ok(Self::Oracle),
            "flatness" => Ok(Self::Flatness),
            "controller" => Ok(Self::Controller),
            _ => Err(Error::Config(format!("unknown suite '{s}'"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::All => "all",
            Self::Oracle => "oracle",
            Self::Flatness => "flatness",
            Self::Controller => "controller",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub samples: usize,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(suite: Suite, name: &str, samples: usize, residual: f64, tolerance: f64) -> Self {
        Self { suite, name: name.into(), samples, residual, tolerance, passed: residual < tolerance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<10} {:<32} samples={:<5} residual={:.3e} tol={:.0e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.suite,
                c.name,
                c.samples,
                c.residual,
                c.tolerance
            )?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {failed} failed (seed {})", self.checks.len(), self.seed)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, a: f64) -> f64 {
    rng.random_range(-a..a)
}

/// Random state away from the Euler and thrust singularities.
pub fn sample_reduced_state(rng: &mut ChaCha8Rng, k: usize) -> ReducedState {
    ReducedState {
        p: Vector3::from_fn(|_, _| uniform(rng, 2.0)),
        l: Vector3::from_fn(|_, _| uniform(rng, 0.2)),
        xi: EulerAngles::new(uniform(rng, 0.8), uniform(rng, 0.8), uniform(rng, 3.0)),
        eta: DVector::from_fn(k, |_, _| uniform(rng, 3.0)),
        eta_dot: DVector::from_fn(k, |_, _| uniform(rng, 1.5)),
    }
}

pub fn sample_extended_state(rng: &mut ChaCha8Rng, params: &AMParams) -> ExtendedState {
    let weight = params.total_mass() * params.gravity;
    let q = sample_reduced_state(rng, params.k());
    ExtendedState { q, thrust: weight * (1.0 + uniform(rng, 0.35)), thrust_rate: uniform(rng, 10.0) }
}

pub fn sample_extended_input(rng: &mut ChaCha8Rng, k: usize) -> ExtendedInput {
    ExtendedInput {
        joint_torques: DVector::from_fn(k, |_, _| uniform(rng, 2.0)),
        thrust_accel: uniform(rng, 50.0),
        body_torques: Vector3::from_fn(|_, _| uniform(rng, 0.5)),
    }
}

pub fn sample_control_input(rng: &mut ChaCha8Rng, params: &AMParams) -> ControlInput {
    let weight = params.total_mass() * params.gravity;
    ControlInput {
        joint_torques: DVector::from_fn(params.k(), |_, _| uniform(rng, 2.0)),
        thrust: weight * (1.0 + uniform(rng, 0.35)),
        body_torques: Vector3::from_fn(|_, _| uniform(rng, 0.5)),
    }
}

/// Worst relative gap between reduced and oracle accelerations.
pub fn oracle_equivalence(params: &AMParams, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let state = sample_reduced_state(&mut rng, params.k());
        let input = sample_control_input(&mut rng, params);
        let s_eb = Vector3::from_fn(|_, _| uniform(&mut rng, 5.0));
        let full = full_from_reduced(params, &state, s_eb)?;
        let oracle = full_lagrangian_accel(params, &full, &input)?;
        worst = worst.max(relative_error(&reduced_accel_in_full(params, &state, &input)?, &oracle));
    }
    Ok(worst)
}

/// Worst `|x_dot^T (M' - 2C) x_dot|`.
pub fn passivity(params: &AMParams, samples: usize, seed: u64) -> f64 {
    let mut rng = rng_for(seed, 2);
    let k = params.k();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let eta = DVector::from_fn(k, |_, _| uniform(&mut rng, 3.0));
        let x_dot = DVector::from_fn(6 + k, |_, _| uniform(&mut rng, 2.0));
        let partials = mass_matrix_partials(params, &eta);
        let eta_dot = x_dot.rows(6, k).into_owned();
        let n = mass_matrix_rate(&partials, &eta_dot) - coriolis_matrix(&partials, &x_dot) * 2.0;
        worst = worst.max(x_dot.dot(&(n * &x_dot)).abs());
    }
    worst
}

/// Plant state with the advected base position, for zero-input rollouts.
fn free_derivative(params: &AMParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    let k = params.k();
    let n = ReducedState::dim(k);
    let q = ReducedState::from_slice(k, &x.as_slice()[..n])?;
    let snap = Snapshot::new(params, &q)?;
    let mut out = DVector::zeros(n + 3);
    out.rows_mut(0, n).copy_from(&state_derivative_at(&snap, &q, &ControlInput::zeros(k))?);
    let zeta = x.fixed_rows::<3>(n).into_owned();
    let (_, zeta_dot) = advect(&snap.omega_b, &snap.s_dot_b, &AdvectedPair { gamma: snap.gamma, zeta });
    out.fixed_rows_mut::<3>(n).copy_from(&zeta_dot);
    Ok(out)
}

fn total_energy(params: &AMParams, x: &DVector<f64>) -> Result<f64> {
    let k = params.k();
    let n = ReducedState::dim(k);
    let q = ReducedState::from_slice(k, &x.as_slice()[..n])?;
    let snap = Snapshot::new(params, &q)?;
    let zeta = x.fixed_rows::<3>(n).into_owned();
    Ok(energies(params, &q.eta, &snap.x_dot, &snap.gamma, &zeta).total())
}

/// `(R p, R l + s_eb x R p)`: linear and angular momentum in `E` about its origin.
fn spatial_momentum(params: &AMParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    let k = params.k();
    let n = ReducedState::dim(k);
    let q = ReducedState::from_slice(k, &x.as_slice()[..n])?;
    let r = rotation_from_euler(q.xi);
    let s = r * x.fixed_rows::<3>(n);
    let lin = r * q.p;
    let ang = r * q.l + s.cross(&lin);
    Ok(DVector::from_iterator(6, lin.iter().chain(ang.iter()).copied()))
}

fn free_rollout<F>(params: &AMParams, state: &ReducedState, duration: f64, dt: f64, mut watch: F) -> Result<()>
where
    F: FnMut(&DVector<f64>) -> Result<()>,
{
    let n = ReducedState::dim(params.k());
    let mut x = DVector::zeros(n + 3);
    x.rows_mut(0, n).copy_from(&state.to_vector());
    x.fixed_rows_mut::<3>(n).copy_from(&Vector3::new(0.3, -0.2, 1.0));
    watch(&x)?;
    let steps = (duration / dt).round() as usize;
    for i in 0..steps {
        x = rk4_step(|_, x| free_derivative(params, x), i as f64 * dt, &x, dt)?;
        watch(&x)?;
    }
    Ok(())
}

/// Worst `|E(t) - E(0)| / max(E(0), 1)` over unforced rollouts.
pub fn energy_drift(params: &AMParams, samples: usize, duration: f64, dt: f64, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let state = sample_reduced_state(&mut rng, params.k());
        let mut e0 = None;
        free_rollout(params, &state, duration, dt, |x| {
            let e = total_energy(params, x)?;
            let e0 = *e0.get_or_insert(e);
            worst = worst.max((e - e0).abs() / e0.abs().max(1.0));
            Ok(())
        })?;
    }
    Ok(worst)
}

/// Worst drift of spatial linear and angular momentum with gravity switched off.
pub fn momentum_drift(params: &AMParams, samples: usize, duration: f64, dt: f64, seed: u64) -> Result<f64> {
    let mut weightless = params.clone();
    weightless.gravity = 0.0;
    let mut rng = rng_for(seed, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let state = sample_reduced_state(&mut rng, params.k());
        let mut m0 = None;
        free_rollout(&weightless, &state, duration, dt, |x| {
            let m = spatial_momentum(&weightless, x)?;
            let m0 = m0.get_or_insert_with(|| m.clone());
            worst = worst.max((&m - &*m0).amax());
            Ok(())
        })?;
    }
    Ok(worst)
}

/// Worst state error of `state_from_flat(flat_outputs_from_state(q))`.
pub fn flat_round_trip(params: &AMParams, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 5);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let q = sample_extended_state(&mut rng, params);
        let u = sample_extended_input(&mut rng, params.k());
        let sigma = flat_outputs_from_state(params, &q, &u)?;
        let back = state_from_flat(params, &sigma)?;
        worst = worst.max((back.to_vector() - q.to_vector()).amax());
    }
    Ok(worst)
}

/// Worst input error of `inputs_from_flat(flat_outputs_from_state(q, u))`.
pub fn input_round_trip(params: &AMParams, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 6);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let q = sample_extended_state(&mut rng, params);
        let u = sample_extended_input(&mut rng, params.k());
        let sigma = flat_outputs_from_state(params, &q, &u)?;
        let (back, _) = inputs_from_flat(params, &sigma)?;
        worst = worst.max((back.to_vector() - u.to_vector()).amax());
    }
    Ok(worst)
}

/// Worst dependence of `(p_e, p_e', p_e'', psi', eta')` on the input.
pub fn relative_degree(params: &AMParams, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 7);
    let k = params.k();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let q = sample_extended_state(&mut rng, params);
        let a = flat_outputs_from_state(params, &q, &sample_extended_input(&mut rng, k))?;
        let b = flat_outputs_from_state(params, &q, &sample_extended_input(&mut rng, k))?;
        for i in 0..3 {
            worst = worst.max((a.p_e[i] - b.p_e[i]).amax());
        }
        for i in 0..2 {
            worst = worst.max((a.psi[i] - b.psi[i]).abs());
            worst = worst.max((&a.eta[i] - &b.eta[i]).amax());
        }
    }
    Ok(worst)
}

/// Largest condition number of `G_v` over a grid of attitudes and joint angles.
pub fn decoupling_condition_grid(params: &AMParams, per_axis: usize) -> Result<f64> {
    let k = params.k();
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        (0..per_axis).map(|i| lo + (hi - lo) * i as f64 / (per_axis - 1).max(1) as f64).collect()
    };
    let tilt = axis(-0.8, 0.8);
    let joints = axis(-3.0, 3.0);
    let weight = params.total_mass() * params.gravity;
    let mut worst: f64 = 0.0;
    for &phi in &tilt {
        for &theta in &tilt {
            for idx in 0..joints.len().pow(k as u32) {
                let eta = DVector::from_fn(k, |j, _| joints[(idx / joints.len().pow(j as u32)) % joints.len()]);
                let q = ExtendedState {
                    q: ReducedState::at_rest(EulerAngles::new(phi, theta, 0.4), eta),
                    thrust: weight,
                    thrust_rate: 0.0,
                };
                worst = worst.max(auxiliary_decomposition(params, &q)?.condition_number());
            }
        }
    }
    Ok(worst)
}

/// Worst flat-output error when the feedforward of `reference` is played open loop.
pub fn open_loop_consistency(params: &AMParams, reference: &ReferenceSpec, t0: f64, duration: f64, dt: f64) -> Result<f64> {
    let k = params.k();
    let sigma0 = reference.at(t0)?;
    let mut q = state_from_flat(params, &sigma0)?;
    let steps = (duration / dt).round() as usize;
    let mut worst: f64 = 0.0;
    let f = |t: f64, x: &DVector<f64>| -> Result<DVector<f64>> {
        let q = ExtendedState::from_slice(k, x.as_slice())?;
        let (u, _) = inputs_from_flat(params, &reference.at(t)?)?;
        extended_dynamics(params, &q, &u)
    };
    for i in 0..steps {
        let t = t0 + i as f64 * dt;
        let x = rk4_step(f, t, &q.to_vector(), dt)?;
        q = ExtendedState::from_slice(k, x.as_slice())?;
        let target = reference.at(t + dt)?;
        let (u, _) = inputs_from_flat(params, &target)?;
        let actual: FlatSignal = flat_outputs_from_state(params, &q, &u)?;
        worst = worst.max((actual.sigma() - target.sigma()).amax());
    }
    Ok(worst)
}

/// CARE residual and smallest eigenvalue of `P` for `Q = I`.
pub fn care_identity(k: usize) -> Result<(f64, f64)> {
    let clf = Clf::identity(k)?;
    Ok((clf.residual(), clf.p_eigen_range().0))
}

/// Distance of the double-integrator solution from `[[sqrt 3, 1], [1, sqrt 3]]`.
pub fn care_double_integrator() -> Result<f64> {
    let f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let g = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let p = solve_care(&f, &g, &DMatrix::identity(2, 2))?;
    let s3 = 3f64.sqrt();
    Ok((p - DMatrix::from_row_slice(2, 2, &[s3, 1.0, 1.0, s3])).amax())
}

/// Worst KKT residual of the CLF-QP over perturbed reference-consistent states, and the
/// worst model-predicted `V' + lambda V` scaled by `max(V, 1)`.
pub fn clf_qp_kkt(params: &AMParams, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = rng_for(seed, 8);
    let k = params.k();
    let clf = Clf::identity(k)?;
    let (mut kkt, mut decrease): (f64, f64) = (0.0, 0.0);
    for _ in 0..samples {
        let q_ref = sample_extended_state(&mut rng, params);
        let reference = flat_outputs_from_state(params, &q_ref, &sample_extended_input(&mut rng, k))?;
        let mut q = q_ref.clone();
        q.q.p += Vector3::from_fn(|_, _| uniform(&mut rng, 0.3));
        q.q.eta += DVector::from_fn(k, |_, _| uniform(&mut rng, 0.2));
        q.thrust_rate += uniform(&mut rng, 1.0);
        let sol = clf_qp_control(params, &q, &reference, &clf, None)?;
        kkt = kkt.max(sol.kkt.stationarity).max(sol.kkt.complementarity);
        decrease = decrease.max((sol.value_rate + sol.lambda * sol.value) / sol.value.max(1.0));
    }
    Ok((kkt, decrease))
}

/// Sample counts used by [`run`].
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    pub oracle: usize,
    pub passivity: usize,
    pub rollouts: usize,
    pub round_trip: usize,
    pub probes: usize,
    pub grid: usize,
    pub qp: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self { oracle: 100, passivity: 1000, rollouts: 3, round_trip: 1000, probes: 200, grid: 5, qp: 200 }
    }
}

/// Runs the selected suite on `params`.
pub fn run(params: &AMParams, suite: Suite, seed: u64, budget: Budget) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let want = |s: Suite| suite == Suite::All || suite == s;
    let k = params.k();
    if want(Suite::Oracle) {
        let s = Suite::Oracle;
        checks.push(Check::new(s, "reduced_vs_lagrangian_accel", budget.oracle, oracle_equivalence(params, budget.oracle, seed)?, 1e-6));
        checks.push(Check::new(s, "passivity_mdot_minus_2c", budget.passivity, passivity(params, budget.passivity, seed), 1e-8));
        checks.push(Check::new(s, "energy_drift_1s", budget.rollouts, energy_drift(params, budget.rollouts, 1.0, 1e-3, seed)?, 1e-5));
        checks.push(Check::new(s, "momentum_drift_zero_g_1s", budget.rollouts, momentum_drift(params, budget.rollouts, 1.0, 1e-3, seed)?, 1e-6));
    }
    if want(Suite::Flatness) {
        let s = Suite::Flatness;
        checks.push(Check::new(s, "state_round_trip", budget.round_trip, flat_round_trip(params, budget.round_trip, seed)?, 1e-8));
        checks.push(Check::new(s, "input_round_trip", budget.round_trip, input_round_trip(params, budget.round_trip, seed)?, 1e-7));
        checks.push(Check::new(s, "lower_derivatives_input_free", budget.probes, relative_degree(params, budget.probes, seed)?, 1e-12));
        let cells = budget.grid.pow(2 + k as u32);
        checks.push(Check::new(s, "decoupling_condition_grid", cells, decoupling_condition_grid(params, budget.grid)?, 1e8));
    }
    if want(Suite::Controller) {
        let s = Suite::Controller;
        let (res, p_min) = care_identity(k)?;
        let n = brunovsky_matrices(k).f.nrows();
        checks.push(Check::new(s, &format!("care_residual_q_identity_{n}"), 1, res, 1e-8));
        checks.push(Check::new(s, "care_p_positive_definite", 1, if p_min > 0.0 { 0.0 } else { -p_min }, f64::MIN_POSITIVE));
        checks.push(Check::new(s, "care_double_integrator", 1, care_double_integrator()?, 1e-9));
        let (kkt, decrease) = clf_qp_kkt(params, budget.qp, seed)?;
        checks.push(Check::new(s, "clf_qp_kkt", budget.qp, kkt, 1e-8));
        checks.push(Check::new(s, "clf_qp_model_decrease", budget.qp, decrease.max(0.0), 1e-9));
    }
    Ok(VerifyReport { seed, checks })
}
