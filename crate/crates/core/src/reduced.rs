//! Reduced equations of motion in momentum form.
//!
//! State `q = (p, l, xi, eta, eta_dot)` where `p, l` are the generalized linear and
//! angular momenta conjugate to the body velocities `(s_dot_b, omega_b)`. The group
//! velocities are reconstructed through the connection
//! `(s_dot_b, omega_b) = M_s^-1 ((p, l) - M_sl eta_dot)` at every evaluation, and the
//! gravity direction `gamma` is always recomputed from `xi`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::{
    coriolis_matrix, gravity_terms_from_com, manipulator_com, mass_matrix, mass_matrix_partials, AMParams,
    GravityTerms, ManipCoM, MassMatrix,
};
use crate::spatial::{euler_rate_matrix_inverse, gravity_direction, EulerAngles};

/// Guard on `|cos theta|` below which `Xi(xi)` is treated as singular.
pub const EULER_SINGULARITY_TOL: f64 = 1e-6;
/// Largest accepted condition number of `M_s`.
pub const MS_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    /// Generalized linear momentum in `B` (kg m/s).
    pub p: Vector3<f64>,
    /// Generalized angular momentum in `B` (kg m^2/s).
    pub l: Vector3<f64>,
    pub xi: EulerAngles,
    pub eta: DVector<f64>,
    pub eta_dot: DVector<f64>,
}

impl ReducedState {
    pub fn dim(k: usize) -> usize {
        9 + 2 * k
    }

    pub fn k(&self) -> usize {
        self.eta.len()
    }

    /// At rest with the given attitude and joint angles.
    pub fn at_rest(xi: EulerAngles, eta: DVector<f64>) -> Self {
        let k = eta.len();
        Self { p: Vector3::zeros(), l: Vector3::zeros(), xi, eta, eta_dot: DVector::zeros(k) }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let k = self.k();
        let mut v = DVector::zeros(Self::dim(k));
        v.fixed_rows_mut::<3>(0).copy_from(&self.p);
        v.fixed_rows_mut::<3>(3).copy_from(&self.l);
        v.fixed_rows_mut::<3>(6).copy_from(&self.xi.to_vector());
        v.rows_mut(9, k).copy_from(&self.eta);
        v.rows_mut(9 + k, k).copy_from(&self.eta_dot);
        v
    }

    pub fn from_slice(k: usize, v: &[f64]) -> Result<Self> {
        if v.len() != Self::dim(k) {
            return Err(Error::Dimension(format!("reduced state needs {} entries, got {}", Self::dim(k), v.len())));
        }
        Ok(Self {
            p: Vector3::from_column_slice(&v[0..3]),
            l: Vector3::from_column_slice(&v[3..6]),
            xi: EulerAngles::new(v[6], v[7], v[8]),
            eta: DVector::from_column_slice(&v[9..9 + k]),
            eta_dot: DVector::from_column_slice(&v[9 + k..9 + 2 * k]),
        })
    }
}

/// `u = (tau_L, T, tau_phi, tau_theta, tau_psi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub joint_torques: DVector<f64>,
    pub thrust: f64,
    pub body_torques: Vector3<f64>,
}

impl ControlInput {
    pub fn zeros(k: usize) -> Self {
        Self { joint_torques: DVector::zeros(k), thrust: 0.0, body_torques: Vector3::zeros() }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let k = self.joint_torques.len();
        let mut v = DVector::zeros(4 + k);
        v.rows_mut(0, k).copy_from(&self.joint_torques);
        v[k] = self.thrust;
        v.fixed_rows_mut::<3>(k + 1).copy_from(&self.body_torques);
        v
    }

    pub fn from_slice(k: usize, v: &[f64]) -> Result<Self> {
        if v.len() != 4 + k {
            return Err(Error::Dimension(format!("control input needs {} entries, got {}", 4 + k, v.len())));
        }
        Ok(Self {
            joint_torques: DVector::from_column_slice(&v[..k]),
            thrust: v[k],
            body_torques: Vector3::from_column_slice(&v[k + 1..k + 4]),
        })
    }

    /// Input stacked along the velocity coordinates: `(0, 0, T, tau, tau_L)`.
    pub fn generalized_force(&self) -> DVector<f64> {
        let k = self.joint_torques.len();
        let mut f = DVector::zeros(6 + k);
        f[2] = self.thrust;
        f.fixed_rows_mut::<3>(3).copy_from(&self.body_torques);
        f.rows_mut(6, k).copy_from(&self.joint_torques);
        f
    }
}

/// Reduced state extended by the thrust and its rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedState {
    pub q: ReducedState,
    pub thrust: f64,
    pub thrust_rate: f64,
}

impl ExtendedState {
    pub fn dim(k: usize) -> usize {
        11 + 2 * k
    }

    pub fn k(&self) -> usize {
        self.q.k()
    }

    /// Stationary hover: zero momenta, level attitude with yaw `psi`, thrust balancing weight.
    pub fn hover(params: &AMParams, psi: f64, eta: DVector<f64>) -> Self {
        Self {
            q: ReducedState::at_rest(EulerAngles::new(0.0, 0.0, psi), eta),
            thrust: params.total_mass() * params.gravity,
            thrust_rate: 0.0,
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let k = self.k();
        let mut v = DVector::zeros(Self::dim(k));
        v.rows_mut(0, 9 + 2 * k).copy_from(&self.q.to_vector());
        v[9 + 2 * k] = self.thrust;
        v[10 + 2 * k] = self.thrust_rate;
        v
    }

    pub fn from_slice(k: usize, v: &[f64]) -> Result<Self> {
        if v.len() != Self::dim(k) {
            return Err(Error::Dimension(format!("extended state needs {} entries, got {}", Self::dim(k), v.len())));
        }
        Ok(Self {
            q: ReducedState::from_slice(k, &v[..9 + 2 * k])?,
            thrust: v[9 + 2 * k],
            thrust_rate: v[10 + 2 * k],
        })
    }
}

/// `u_de = (tau_L, T_ddot, tau_phi, tau_theta, tau_psi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedInput {
    pub joint_torques: DVector<f64>,
    pub thrust_accel: f64,
    pub body_torques: Vector3<f64>,
}

impl ExtendedInput {
    pub fn zeros(k: usize) -> Self {
        Self { joint_torques: DVector::zeros(k), thrust_accel: 0.0, body_torques: Vector3::zeros() }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        ControlInput {
            joint_torques: self.joint_torques.clone(),
            thrust: self.thrust_accel,
            body_torques: self.body_torques,
        }
        .to_vector()
    }

    pub fn from_slice(k: usize, v: &[f64]) -> Result<Self> {
        let u = ControlInput::from_slice(k, v)?;
        Ok(Self { joint_torques: u.joint_torques, thrust_accel: u.thrust, body_torques: u.body_torques })
    }

    /// The original input once the thrust is read from the extended state.
    pub fn with_thrust(&self, thrust: f64) -> ControlInput {
        ControlInput { joint_torques: self.joint_torques.clone(), thrust, body_torques: self.body_torques }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentumPair {
    pub p: Vector3<f64>,
    pub l: Vector3<f64>,
}

/// Body-frame gravity direction and position, `gamma = R^T e3`, `zeta = R^T s_eb`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvectedPair {
    pub gamma: Vector3<f64>,
    pub zeta: Vector3<f64>,
}

fn stack6(a: &Vector3<f64>, b: &Vector3<f64>) -> DVector<f64> {
    DVector::from_column_slice(&[a.x, a.y, a.z, b.x, b.y, b.z])
}

/// `(p, l) = M_s (s_dot_b, omega_b) + M_sl eta_dot`.
pub fn momenta_from_velocities(
    params: &AMParams,
    eta: &DVector<f64>,
    s_dot_b: &Vector3<f64>,
    omega_b: &Vector3<f64>,
    eta_dot: &DVector<f64>,
) -> MomentumPair {
    momenta_with_mass(&mass_matrix(params, eta), s_dot_b, omega_b, eta_dot)
}

fn momenta_with_mass(m: &MassMatrix, s_dot_b: &Vector3<f64>, omega_b: &Vector3<f64>, eta_dot: &DVector<f64>) -> MomentumPair {
    let pl = m.m_s() * stack6(s_dot_b, omega_b) + m.m_sl() * eta_dot;
    MomentumPair { p: pl.fixed_rows::<3>(0).into_owned(), l: pl.fixed_rows::<3>(3).into_owned() }
}

/// Connection: `(s_dot_b, omega_b) = M_s^-1 ((p, l) - M_sl eta_dot)`.
pub fn velocities_from_momenta(
    params: &AMParams,
    eta: &DVector<f64>,
    p: &Vector3<f64>,
    l: &Vector3<f64>,
    eta_dot: &DVector<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    connection(&mass_matrix(params, eta), p, l, eta_dot)
}

fn connection(
    m: &MassMatrix,
    p: &Vector3<f64>,
    l: &Vector3<f64>,
    eta_dot: &DVector<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let ms = m.m_s();
    let eig = ms.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= MS_CONDITION_LIMIT) {
        return Err(Error::IllConditioned { what: "group mass block M_s", cond });
    }
    let rhs = stack6(p, l) - m.m_sl() * eta_dot;
    let v = ms
        .cholesky()
        .ok_or(Error::IllConditioned { what: "group mass block M_s", cond })?
        .solve(&rhs);
    Ok((v.fixed_rows::<3>(0).into_owned(), v.fixed_rows::<3>(3).into_owned()))
}

/// Every configuration-dependent quantity needed by the reduced dynamics at one state.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub mass: MassMatrix,
    pub partials: Vec<DMatrix<f64>>,
    pub com: ManipCoM,
    pub gamma: Vector3<f64>,
    pub gravity: GravityTerms,
    pub p: Vector3<f64>,
    pub l: Vector3<f64>,
    pub s_dot_b: Vector3<f64>,
    pub omega_b: Vector3<f64>,
    /// `x_dot = (s_dot_b, omega_b, eta_dot)`.
    pub x_dot: DVector<f64>,
    pub coriolis: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Snapshot {
    pub fn new(params: &AMParams, state: &ReducedState) -> Result<Self> {
        Self::with_gamma(params, state, &gravity_direction(state.xi))
    }

    pub fn with_gamma(params: &AMParams, state: &ReducedState, gamma: &Vector3<f64>) -> Result<Self> {
        let k = params.k();
        if state.k() != k || state.eta_dot.len() != k {
            return Err(Error::Dimension(format!("state has {} joints, params {}", state.k(), k)));
        }
        let mass = mass_matrix(params, &state.eta);
        let partials = mass_matrix_partials(params, &state.eta);
        let com = manipulator_com(params, &state.eta);
        let gravity = gravity_terms_from_com(params, &com, gamma)?;
        let (s_dot_b, omega_b) = connection(&mass, &state.p, &state.l, &state.eta_dot)?;
        let mut x_dot = DVector::zeros(6 + k);
        x_dot.fixed_rows_mut::<3>(0).copy_from(&s_dot_b);
        x_dot.fixed_rows_mut::<3>(3).copy_from(&omega_b);
        x_dot.rows_mut(6, k).copy_from(&state.eta_dot);
        let coriolis = coriolis_matrix(&partials, &x_dot);
        let chol = mass
            .full
            .clone()
            .cholesky()
            .ok_or(Error::IllConditioned { what: "mass matrix", cond: f64::INFINITY })?;
        Ok(Self {
            mass,
            partials,
            com,
            gamma: *gamma,
            gravity,
            p: state.p,
            l: state.l,
            s_dot_b,
            omega_b,
            x_dot,
            coriolis,
            chol,
        })
    }

    pub fn k(&self) -> usize {
        self.x_dot.len() - 6
    }

    /// Momentum equation with gravity, thrust along `e3` and body torques.
    pub fn momentum_dot(&self, input: &ControlInput) -> (Vector3<f64>, Vector3<f64>) {
        let p_dot = self.p.cross(&self.omega_b) + self.gravity.tau_p + Vector3::z() * input.thrust;
        let l_dot = self.p.cross(&self.s_dot_b) + self.l.cross(&self.omega_b) + self.gravity.tau_l + input.body_torques;
        (p_dot, l_dot)
    }

    /// Generalized bias `D` along the velocity coordinates.
    ///
    /// Joint rows hold `dV/deta`. Group rows hold minus the gravity wrench and the
    /// momentum-transport terms `p x omega`, `p x s_dot + l x omega`, which the quasi-velocity
    /// Christoffel matrix does not carry.
    pub fn bias(&self) -> DVector<f64> {
        let k = self.k();
        let mut d = DVector::zeros(6 + k);
        let force = -(self.p.cross(&self.omega_b) + self.gravity.tau_p);
        let moment = -(self.p.cross(&self.s_dot_b) + self.l.cross(&self.omega_b) + self.gravity.tau_l);
        d.fixed_rows_mut::<3>(0).copy_from(&force);
        d.fixed_rows_mut::<3>(3).copy_from(&moment);
        d.rows_mut(6, k).copy_from(&self.gravity.dv_deta);
        d
    }

    /// `x_ddot = M^-1 (-C x_dot - D + f_u)`.
    pub fn accelerations(&self, input: &ControlInput) -> DVector<f64> {
        let rhs = -(&self.coriolis * &self.x_dot) - self.bias() + input.generalized_force();
        self.chol.solve(&rhs)
    }

    /// `M^-1 b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn x_ddot_shape(&self, input: &ControlInput) -> DVector<f64> {
        let k = self.k();
        self.accelerations(input).rows(6, k).into_owned()
    }
}

pub fn momentum_dot(
    params: &AMParams,
    state: &ReducedState,
    gamma: &Vector3<f64>,
    input: &ControlInput,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    Ok(Snapshot::with_gamma(params, state, gamma)?.momentum_dot(input))
}

/// `eta_ddot = [0 I] M^-1 (-C x_dot - D + (0, 0, T, tau, tau_L))`.
pub fn shape_ddot(
    params: &AMParams,
    state: &ReducedState,
    gamma: &Vector3<f64>,
    input: &ControlInput,
) -> Result<DVector<f64>> {
    Ok(Snapshot::with_gamma(params, state, gamma)?.x_ddot_shape(input))
}

/// Advection of `gamma` and `zeta` under the body motion.
pub fn advect(omega_b: &Vector3<f64>, s_dot_b: &Vector3<f64>, pair: &AdvectedPair) -> (Vector3<f64>, Vector3<f64>) {
    (-omega_b.cross(&pair.gamma), -omega_b.cross(&pair.zeta) + s_dot_b)
}

fn xi_rates(xi: EulerAngles, omega_b: &Vector3<f64>) -> Result<Vector3<f64>> {
    euler_rate_matrix_inverse(xi, EULER_SINGULARITY_TOL)
        .map(|inv| inv * omega_b)
        .ok_or(Error::EulerSingularity { cos_theta: xi.theta.cos() })
}

/// `q_dot = f(q) + G(q) u` evaluated directly.
pub fn state_derivative(params: &AMParams, q: &ReducedState, u: &ControlInput) -> Result<DVector<f64>> {
    let snap = Snapshot::new(params, q)?;
    state_derivative_at(&snap, q, u)
}

pub fn state_derivative_at(snap: &Snapshot, q: &ReducedState, u: &ControlInput) -> Result<DVector<f64>> {
    let k = q.k();
    let (p_dot, l_dot) = snap.momentum_dot(u);
    let xi_dot = xi_rates(q.xi, &snap.omega_b)?;
    let eta_ddot = snap.x_ddot_shape(u);
    let mut out = DVector::zeros(ReducedState::dim(k));
    out.fixed_rows_mut::<3>(0).copy_from(&p_dot);
    out.fixed_rows_mut::<3>(3).copy_from(&l_dot);
    out.fixed_rows_mut::<3>(6).copy_from(&xi_dot);
    out.rows_mut(9, k).copy_from(&q.eta_dot);
    out.rows_mut(9 + k, k).copy_from(&eta_ddot);
    Ok(out)
}

/// Drift `f(q)` and actuation matrix `G(q)` of the control-affine form.
pub fn drift_and_actuation(params: &AMParams, q: &ReducedState) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = params.k();
    let snap = Snapshot::new(params, q)?;
    let f = state_derivative_at(&snap, q, &ControlInput::zeros(k))?;
    let n = ReducedState::dim(k);
    let mut g = DMatrix::zeros(n, 4 + k);
    // Projection X = [0 I] M^-1 applied to a unit generalized force along coordinate `c`.
    let shape_response = |c: usize| {
        let mut e = DVector::zeros(6 + k);
        e[c] = 1.0;
        snap.solve(&e).rows(6, k).into_owned()
    };
    for j in 0..k {
        g.view_mut((9 + k, j), (k, 1)).copy_from(&shape_response(6 + j));
    }
    g[(2, k)] = 1.0;
    g.view_mut((9 + k, k), (k, 1)).copy_from(&shape_response(2));
    for a in 0..3 {
        g[(3 + a, k + 1 + a)] = 1.0;
        g.view_mut((9 + k, k + 1 + a), (k, 1)).copy_from(&shape_response(3 + a));
    }
    Ok((f, g))
}

/// Dynamics with the thrust promoted to a doubly-integrated state.
pub fn extended_dynamics(params: &AMParams, q_de: &ExtendedState, u_de: &ExtendedInput) -> Result<DVector<f64>> {
    let snap = Snapshot::new(params, &q_de.q)?;
    extended_dynamics_at(&snap, q_de, u_de)
}

pub fn extended_dynamics_at(snap: &Snapshot, q_de: &ExtendedState, u_de: &ExtendedInput) -> Result<DVector<f64>> {
    let k = q_de.k();
    let base = state_derivative_at(snap, &q_de.q, &u_de.with_thrust(q_de.thrust))?;
    let mut out = DVector::zeros(ExtendedState::dim(k));
    out.rows_mut(0, 9 + 2 * k).copy_from(&base);
    out[9 + 2 * k] = q_de.thrust_rate;
    out[10 + 2 * k] = u_de.thrust_accel;
    Ok(out)
}
