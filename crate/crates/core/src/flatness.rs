//! Differential flatness of the aerial manipulator.
//!
//! The flat output is `sigma = (p_e, psi, eta)` with `p_e = R_eb p` the generalized
//! linear momentum expressed in `E`. States and inputs are recovered algebraically from
//! `(p_e .. p_e''', psi .. psi'', eta .. eta'')`. The vector relative degree with the
//! thrust dynamically extended is 3 for each `p_e` component and 2 for `psi` and `eta`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::{mass_matrix, mass_matrix_rate, AMParams};
use crate::reduced::{
    ControlInput, ExtendedInput, ExtendedState, ReducedState, Snapshot, EULER_SINGULARITY_TOL,
};
use crate::spatial::{euler_rate_matrix, euler_rate_matrix_dot, euler_rate_matrix_inverse, rotation_from_euler, EulerAngles};

/// Thrust guard as a fraction of the hover thrust `m_t g`.
pub const THRUST_GUARD_FRACTION: f64 = 1e-3;
/// Slack tolerated on the roll `asin` argument before it is a domain error.
pub const ASIN_SLACK: f64 = 1e-9;
/// Minimum distance of roll and pitch from `+-pi/2`.
pub const ATTITUDE_GUARD: f64 = 1e-6;
/// Largest accepted condition number of the decoupling matrix `G_v`.
pub const DECOUPLING_COND_LIMIT: f64 = 1e10;

/// Flat output with the time derivatives the inverse maps consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatSignal {
    /// `p_e` and its first three derivatives.
    pub p_e: [Vector3<f64>; 4],
    /// `psi` and its first two derivatives.
    pub psi: [f64; 3],
    /// `eta` and its first two derivatives.
    pub eta: [DVector<f64>; 3],
}

impl FlatSignal {
    /// Signal frozen at a value, every derivative zero.
    pub fn constant(p_e: Vector3<f64>, psi: f64, eta: DVector<f64>) -> Self {
        let k = eta.len();
        Self {
            p_e: [p_e, Vector3::zeros(), Vector3::zeros(), Vector3::zeros()],
            psi: [psi, 0.0, 0.0],
            eta: [eta, DVector::zeros(k), DVector::zeros(k)],
        }
    }

    pub fn k(&self) -> usize {
        self.eta[0].len()
    }

    /// `sigma = (p_e, psi, eta)`.
    pub fn sigma(&self) -> DVector<f64> {
        self.stack(0, 0)
    }

    /// Highest derivatives `(p_e''', psi'', eta'')`, the auxiliary input ordering.
    pub fn top(&self) -> DVector<f64> {
        self.stack(3, 2)
    }

    /// `(p_e^(i), psi^(j), eta^(j))` stacked.
    pub fn stack(&self, i: usize, j: usize) -> DVector<f64> {
        let k = self.k();
        let mut v = DVector::zeros(4 + k);
        v.fixed_rows_mut::<3>(0).copy_from(&self.p_e[i]);
        v[3] = self.psi[j];
        v.rows_mut(4, k).copy_from(&self.eta[j]);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.p_e.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.psi.iter().all(|x| x.is_finite())
            && self.eta.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// `v = f_v + G_v u_de` with `v = (p_e''', psi'', eta'')`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryDecomposition {
    pub f_v: DVector<f64>,
    pub g_v: DMatrix<f64>,
}

impl AuxiliaryDecomposition {
    pub fn apply(&self, u_de: &DVector<f64>) -> DVector<f64> {
        &self.f_v + &self.g_v * u_de
    }

    pub fn condition_number(&self) -> f64 {
        condition_number(&self.g_v)
    }

    /// `u_de = G_v^-1 (v - f_v)`, with one step of iterative refinement.
    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let singular = || Error::SingularDecoupling { cond: self.condition_number() };
        let lu = self.g_v.clone().lu();
        let rhs = v - &self.f_v;
        let mut u = lu.solve(&rhs).ok_or_else(singular)?;
        let r = &rhs - &self.g_v * &u;
        u += lu.solve(&r).ok_or_else(singular)?;
        Ok(u)
    }
}

pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = m.singular_values();
    let lo = s.min();
    if lo > 0.0 {
        s.max() / lo
    } else {
        f64::INFINITY
    }
}

/// Chain-of-integrators pair acting on `h = (e1, e2, e1', e2', e1'')`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrunovskyForm {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

/// Brunovsky pair for a `k`-joint arm.
///
/// The input is `w = (psi'', eta'', p_e''')`, ordered as the rows of `h'` it drives.
pub fn brunovsky_matrices(k: usize) -> BrunovskyForm {
    let n = 11 + 2 * k;
    let m = 4 + k;
    let mut f = DMatrix::zeros(n, n);
    f.view_mut((0, m), (7 + k, 7 + k)).fill_with_identity();
    let mut g = DMatrix::zeros(n, m);
    g.view_mut((n - m, 0), (m, m)).fill_with_identity();
    BrunovskyForm { f, g }
}

/// Reorders `v = (p_e''', psi'', eta'')` into the Brunovsky input `w = (psi'', eta'', p_e''')`.
pub fn v_to_w(v: &DVector<f64>) -> DVector<f64> {
    let m = v.len();
    let mut w = DVector::zeros(m);
    w.rows_mut(0, m - 3).copy_from(&v.rows(3, m - 3));
    w.rows_mut(m - 3, 3).copy_from(&v.rows(0, 3));
    w
}

pub fn w_to_v(w: &DVector<f64>) -> DVector<f64> {
    let m = w.len();
    let mut v = DVector::zeros(m);
    v.rows_mut(0, 3).copy_from(&w.rows(m - 3, 3));
    v.rows_mut(3, m - 3).copy_from(&w.rows(0, m - 3));
    v
}

pub fn thrust_guard(params: &AMParams) -> f64 {
    THRUST_GUARD_FRACTION * params.total_mass() * params.gravity
}

/// `T = |p_e' + m_t g e3|`.
pub fn thrust_from_flat(p_e_dot: &Vector3<f64>, total_mass: f64, gravity: f64) -> Result<f64> {
    let thrust = (p_e_dot + Vector3::z() * (total_mass * gravity)).norm();
    let min = THRUST_GUARD_FRACTION * total_mass * gravity;
    if !(thrust > min) {
        return Err(Error::FreeFallSingularity { thrust, min });
    }
    Ok(thrust)
}

/// Roll and pitch that align the body `z` axis with `p_e' + weight e3`.
pub fn attitude_from_flat(p_e_dot: &Vector3<f64>, psi: f64, thrust: f64, weight: f64) -> Result<(f64, f64)> {
    let (sy, cy) = psi.sin_cos();
    let arg = (p_e_dot.x * sy - p_e_dot.y * cy) / thrust;
    if !(arg.abs() <= 1.0 + ASIN_SLACK) {
        return Err(Error::Domain(arg));
    }
    let phi = arg.clamp(-1.0, 1.0).asin();
    let num = p_e_dot.x * cy + p_e_dot.y * sy;
    let den = p_e_dot.z + weight;
    if !(den > 0.0) {
        return Err(Error::AttitudeSingularity { phi, theta: num.atan2(den) });
    }
    let theta = num.atan2(den);
    if phi.abs() >= FRAC_PI_2 - ATTITUDE_GUARD || theta.abs() >= FRAC_PI_2 - ATTITUDE_GUARD {
        return Err(Error::AttitudeSingularity { phi, theta });
    }
    Ok((phi, theta))
}

fn xi_inverse(xi: EulerAngles) -> Result<Matrix3<f64>> {
    euler_rate_matrix_inverse(xi, EULER_SINGULARITY_TOL).ok_or(Error::EulerSingularity { cos_theta: xi.theta.cos() })
}

/// Flat outputs and their derivatives along the extended dynamics at `(q_de, u_de)`.
pub fn flat_outputs_from_state(params: &AMParams, q_de: &ExtendedState, u_de: &ExtendedInput) -> Result<FlatSignal> {
    let snap = Snapshot::new(params, &q_de.q)?;
    flat_outputs_at(params, &snap, q_de, u_de)
}

/// As [`flat_outputs_from_state`] with the configuration terms already evaluated.
///
/// With `a = p' + omega x p` the momentum rate seen from `E`, `p_e^(n) = R (omega x . + d/dt)^n`
/// applied to `p`; `a` and its derivatives come from the momentum equation and the advection
/// of `gamma`.
pub fn flat_outputs_at(
    params: &AMParams,
    snap: &Snapshot,
    q_de: &ExtendedState,
    u_de: &ExtendedInput,
) -> Result<FlatSignal> {
    let q = &q_de.q;
    let k = q.k();
    let r = rotation_from_euler(q.xi);
    let xi_inv = xi_inverse(q.xi)?;
    let w = snap.omega_b;
    let input = u_de.with_thrust(q_de.thrust);
    let x_ddot = snap.accelerations(&input);
    let w_dot: Vector3<f64> = x_ddot.fixed_rows::<3>(3).into_owned();
    let (p_dot, _) = snap.momentum_dot(&input);

    let weight = params.total_mass() * params.gravity;
    let gamma = snap.gamma;
    let gamma_dot = -w.cross(&gamma);
    let gamma_ddot = -w_dot.cross(&gamma) - w.cross(&gamma_dot);
    let a = p_dot + w.cross(&q.p);
    let a_dot = -gamma_dot * weight + Vector3::z() * q_de.thrust_rate;
    let a_ddot = -gamma_ddot * weight + Vector3::z() * u_de.thrust_accel;
    let b = w.cross(&a) + a_dot;
    let b_dot = w_dot.cross(&a) + w.cross(&a_dot) + a_ddot;
    let c = w.cross(&b) + b_dot;

    let xi_dot = xi_inv * w;
    let xi_ddot = xi_inv * (w_dot - euler_rate_matrix_dot(q.xi, &xi_dot) * xi_dot);

    Ok(FlatSignal {
        p_e: [r * q.p, r * a, r * b, r * c],
        psi: [q.xi.psi, xi_dot.z, xi_ddot.z],
        eta: [q.eta.clone(), q.eta_dot.clone(), x_ddot.rows(6, k).into_owned()],
    })
}

/// Kinematic quantities recovered from the flat output up to `(p_e'', psi', eta')`.
struct Recovered {
    q_de: ExtendedState,
    rotation: Matrix3<f64>,
    force: Vector3<f64>,
    omega: Vector3<f64>,
    xi_dot: Vector3<f64>,
}

fn recover(params: &AMParams, sigma: &FlatSignal) -> Result<Recovered> {
    let k = params.k();
    if sigma.k() != k {
        return Err(Error::Dimension(format!("flat signal has {} joints, params {}", sigma.k(), k)));
    }
    let m_t = params.total_mass();
    let weight = m_t * params.gravity;
    let [p_e, p_e1, p_e2, _] = &sigma.p_e;
    let psi = sigma.psi[0];
    let psi_dot = sigma.psi[1];

    let thrust = thrust_from_flat(p_e1, m_t, params.gravity)?;
    let force = p_e1 + Vector3::z() * weight;
    let (phi, theta) = attitude_from_flat(p_e1, psi, thrust, weight)?;
    let xi = EulerAngles::new(phi, theta, psi);
    let r = rotation_from_euler(xi);
    let thrust_rate = force.dot(p_e2) / thrust;

    // R^T p_e'' = T_dot e3 + T omega x e3 fixes the tilt rates.
    let body = r.transpose() * p_e2;
    let (wx, wy) = (-body.y / thrust, body.x / thrust);
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let theta_dot = (wy - sp * ct * psi_dot) / cp;
    let phi_dot = wx + st * psi_dot;
    let xi_dot = Vector3::new(phi_dot, theta_dot, psi_dot);
    let omega = euler_rate_matrix(xi) * xi_dot;

    let eta = sigma.eta[0].clone();
    let eta_dot = sigma.eta[1].clone();
    let m = mass_matrix(params, &eta);
    let p = r.transpose() * p_e;
    let s_dot = (p - m.m_pw() * omega - m.m_pl() * &eta_dot) / m_t;
    let l = m.m_pw().transpose() * s_dot + m.m_w() * omega + m.m_wl() * &eta_dot;

    Ok(Recovered {
        q_de: ExtendedState { q: ReducedState { p, l, xi, eta, eta_dot }, thrust, thrust_rate },
        rotation: r,
        force,
        omega,
        xi_dot,
    })
}

/// Extended state `(p, l, xi, eta, eta_dot, T, T_dot)` from the flat output.
pub fn state_from_flat(params: &AMParams, sigma: &FlatSignal) -> Result<ExtendedState> {
    recover(params, sigma).map(|r| r.q_de)
}

/// Inputs realizing the flat output's top derivatives.
///
/// Returns the extended input `(tau_L, T_ddot, tau)` and the original input `(tau_L, T, tau)`.
pub fn inputs_from_flat(params: &AMParams, sigma: &FlatSignal) -> Result<(ExtendedInput, ControlInput)> {
    let rec = recover(params, sigma)?;
    let q_de = &rec.q_de;
    let q = &q_de.q;
    let k = q.k();
    let snap = Snapshot::new(params, q)?;
    let (thrust, thrust_rate) = (q_de.thrust, q_de.thrust_rate);
    let (p_e2, p_e3) = (&sigma.p_e[2], &sigma.p_e[3]);
    let f = rec.force;
    let f_dot = f.dot(p_e2);
    let thrust_accel = (p_e2.norm_squared() + f.dot(p_e3)) / thrust - f_dot * f_dot / thrust.powi(3);

    let w = rec.omega;
    let e3 = Vector3::z();
    let we3 = w.cross(&e3);
    let rem = rec.rotation.transpose() * p_e3 - e3 * thrust_accel - we3 * (2.0 * thrust_rate) - w.cross(&we3) * thrust;
    let (wx_dot, wy_dot) = (-rem.y / thrust, rem.x / thrust);

    // Yaw acceleration closes omega_dot = Xi_dot xi_dot + Xi xi_ddot.
    let xi = q.xi;
    let drift = euler_rate_matrix_dot(xi, &rec.xi_dot) * rec.xi_dot;
    let psi_ddot = sigma.psi[2];
    let (sp, cp) = xi.phi.sin_cos();
    let ct = xi.theta.cos();
    let theta_ddot = (wy_dot - drift.y - sp * ct * psi_ddot) / cp;
    let wz_dot = drift.z - sp * theta_ddot + cp * ct * psi_ddot;
    let w_dot = Vector3::new(wx_dot, wy_dot, wz_dot);

    let eta_ddot = &sigma.eta[2];
    let m = &snap.mass;
    let m_dot = mass_matrix_rate(&snap.partials, &q.eta_dot);
    let m_dot_x = &m_dot * &snap.x_dot;
    let p_dot = q.p.cross(&w) + snap.gravity.tau_p + e3 * thrust;
    let s_ddot = (p_dot - m_dot_x.fixed_rows::<3>(0) - m.m_pw() * w_dot - m.m_pl() * eta_ddot) / params.total_mass();

    let mut x_ddot = DVector::zeros(6 + k);
    x_ddot.fixed_rows_mut::<3>(0).copy_from(&s_ddot);
    x_ddot.fixed_rows_mut::<3>(3).copy_from(&w_dot);
    x_ddot.rows_mut(6, k).copy_from(eta_ddot);

    let m_x_ddot = &m.full * &x_ddot;
    let l_dot: Vector3<f64> = (m_x_ddot.fixed_rows::<3>(3) + m_dot_x.fixed_rows::<3>(3)).into_owned();
    let body_torques = l_dot - q.l.cross(&snap.omega_b) - snap.gravity.tau_l - q.p.cross(&snap.s_dot_b);
    let shape = m_x_ddot.rows(6, k) + (&snap.coriolis * &snap.x_dot).rows(6, k) + &snap.gravity.dv_deta;

    let u_de = ExtendedInput { joint_torques: shape.clone_owned(), thrust_accel, body_torques };
    let u = u_de.with_thrust(thrust);
    Ok((u_de, u))
}

/// Affine map `u_de -> v` probed numerically at `q_de`.
pub fn auxiliary_decomposition(params: &AMParams, q_de: &ExtendedState) -> Result<AuxiliaryDecomposition> {
    let snap = Snapshot::new(params, &q_de.q)?;
    auxiliary_decomposition_at(params, &snap, q_de)
}

pub fn auxiliary_decomposition_at(params: &AMParams, snap: &Snapshot, q_de: &ExtendedState) -> Result<AuxiliaryDecomposition> {
    let k = q_de.k();
    let m = 4 + k;
    let v_of = |u: &DVector<f64>| -> Result<DVector<f64>> {
        let u_de = ExtendedInput::from_slice(k, u.as_slice())?;
        Ok(flat_outputs_at(params, snap, q_de, &u_de)?.top())
    };
    let f_v = v_of(&DVector::zeros(m))?;
    let mut g_v = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut e = DVector::zeros(m);
        e[j] = 1.0;
        g_v.set_column(j, &(v_of(&e)? - &f_v));
    }
    let cond = condition_number(&g_v);
    if !(cond <= DECOUPLING_COND_LIMIT) {
        return Err(Error::SingularDecoupling { cond });
    }
    Ok(AuxiliaryDecomposition { f_v, g_v })
}

/// Distance to each flatness singularity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingularityMargins {
    /// `min(pi/2 - |phi|, pi/2 - |theta|)`.
    pub attitude: f64,
    /// `T - T_min`.
    pub thrust: f64,
    /// `|cos phi cos theta|`.
    pub tilt: f64,
}

impl SingularityMargins {
    pub fn from_attitude(phi: f64, theta: f64, thrust: f64, thrust_min: f64) -> Self {
        Self {
            attitude: (FRAC_PI_2 - phi.abs()).min(FRAC_PI_2 - theta.abs()),
            thrust: thrust - thrust_min,
            tilt: (phi.cos() * theta.cos()).abs(),
        }
    }

    pub fn flagged(&self) -> bool {
        !(self.attitude >= ATTITUDE_GUARD && self.thrust > 0.0)
    }
}

pub fn singularity_check(params: &AMParams, q_de: &ExtendedState) -> SingularityMargins {
    let xi = q_de.q.xi;
    SingularityMargins::from_attitude(xi.phi, xi.theta, q_de.thrust, thrust_guard(params))
}

pub fn singularity_check_flat(params: &AMParams, sigma: &FlatSignal) -> SingularityMargins {
    let weight = params.total_mass() * params.gravity;
    let f = sigma.p_e[1] + Vector3::z() * weight;
    let thrust = f.norm();
    if thrust == 0.0 {
        return SingularityMargins { attitude: 0.0, thrust: -thrust_guard(params), tilt: 0.0 };
    }
    let (sy, cy) = sigma.psi[0].sin_cos();
    let phi = ((f.x * sy - f.y * cy) / thrust).clamp(-1.0, 1.0).asin();
    let theta = (f.x * cy + f.y * sy).atan2(f.z);
    SingularityMargins::from_attitude(phi, theta, thrust, thrust_guard(params))
}
