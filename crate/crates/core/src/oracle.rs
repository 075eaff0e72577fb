//! Brute-force reference dynamics in unreduced coordinates.
//!
//! Generalized coordinates are `q = (s_eb, xi, eta)` with `s_eb` the base position in `E`.
//! The Euler-Lagrange equations are formed from nothing but evaluations of the scalar
//! Lagrangian `L(q, q_dot) = K - V`: the inertia matrix, velocity-product terms and
//! potential forces all come from central finite differences.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::mechanism::{mass_matrix, manipulator_com, AMParams};
use crate::reduced::{momenta_from_velocities, ControlInput, ReducedState, Snapshot, EULER_SINGULARITY_TOL};
use crate::spatial::{euler_rate_matrix, euler_rate_matrix_dot, euler_rate_matrix_inverse, rotation_from_euler, EulerAngles};

/// Step for derivatives with respect to configuration.
pub const CONFIG_STEP: f64 = 1e-6;
/// Step for derivatives with respect to velocity; central differences are exact on a quadratic.
pub const VELOCITY_STEP: f64 = 1.0;
const ORACLE_COND_LIMIT: f64 = 1e12;

/// Positions `(s_eb, xi, eta)` and their rates.
#[derive(Debug, Clone, PartialEq)]
pub struct FullCoordinates {
    pub q: DVector<f64>,
    pub q_dot: DVector<f64>,
}

impl FullCoordinates {
    pub fn k(&self) -> usize {
        self.q.len() - 6
    }

    pub fn s_eb(&self) -> Vector3<f64> {
        self.q.fixed_rows::<3>(0).into_owned()
    }

    pub fn xi(&self) -> EulerAngles {
        EulerAngles::new(self.q[3], self.q[4], self.q[5])
    }

    pub fn eta(&self) -> DVector<f64> {
        self.q.rows(6, self.k()).into_owned()
    }
}

fn split(q: &DVector<f64>) -> (Vector3<f64>, EulerAngles, DVector<f64>) {
    let k = q.len() - 6;
    (q.fixed_rows::<3>(0).into_owned(), EulerAngles::new(q[3], q[4], q[5]), q.rows(6, k).into_owned())
}

/// `L = K - V` for the whole vehicle.
pub fn lagrangian(params: &AMParams, q: &DVector<f64>, q_dot: &DVector<f64>) -> f64 {
    let k = params.k();
    let (s, xi, eta) = split(q);
    let r = rotation_from_euler(xi);
    let mut x_dot = DVector::zeros(6 + k);
    x_dot.fixed_rows_mut::<3>(0).copy_from(&(r.transpose() * q_dot.fixed_rows::<3>(0)));
    x_dot.fixed_rows_mut::<3>(3).copy_from(&(euler_rate_matrix(xi) * q_dot.fixed_rows::<3>(3)));
    x_dot.rows_mut(6, k).copy_from(&q_dot.rows(6, k));
    let kinetic = 0.5 * x_dot.dot(&(mass_matrix(params, &eta).full * &x_dot));
    let delta = manipulator_com(params, &eta).delta;
    let potential = params.gravity * (params.total_mass() * s.z + (r * delta).z);
    kinetic - potential
}

/// Central-difference Jacobian of `f` at `x`.
pub fn finite_difference_jacobian<F>(f: F, x: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut xp = x.clone();
    for j in 0..n {
        xp[j] = x[j] + step;
        let fp = f(&xp);
        xp[j] = x[j] - step;
        let fm = f(&xp);
        xp[j] = x[j];
        cols.push((fp - fm) / (2.0 * step));
    }
    let m = cols.first().map_or(0, |c| c.len());
    DMatrix::from_fn(m, n, |i, j| cols[j][i])
}

fn gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, step: f64) -> DVector<f64> {
    let mut xp = x.clone();
    DVector::from_fn(x.len(), |j, _| {
        xp[j] = x[j] + step;
        let fp = f(&xp);
        xp[j] = x[j] - step;
        let fm = f(&xp);
        xp[j] = x[j];
        (fp - fm) / (2.0 * step)
    })
}

fn hessian<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, step: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut y = x.clone();
    let f0 = f(x);
    for i in 0..n {
        y[i] = x[i] + 2.0 * step;
        let fp = f(&y);
        y[i] = x[i] - 2.0 * step;
        let fm = f(&y);
        y[i] = x[i];
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (4.0 * step * step);
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                y[i] = x[i] + si * step;
                y[j] = x[j] + sj * step;
                let v = f(&y);
                y[i] = x[i];
                y[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * step * step);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// Generalized forces of thrust, body torques and joint torques.
pub fn generalized_input(xi: EulerAngles, input: &ControlInput) -> DVector<f64> {
    let k = input.joint_torques.len();
    let mut f = DVector::zeros(6 + k);
    f.fixed_rows_mut::<3>(0).copy_from(&(rotation_from_euler(xi) * Vector3::z() * input.thrust));
    f.fixed_rows_mut::<3>(3).copy_from(&(euler_rate_matrix(xi).transpose() * input.body_torques));
    f.rows_mut(6, k).copy_from(&input.joint_torques);
    f
}

/// `q_ddot` from `M(q) q_ddot = Q_nc + dL/dq - (d^2 L / dq_dot dq) q_dot`.
pub fn full_lagrangian_accel(params: &AMParams, full: &FullCoordinates, input: &ControlInput) -> Result<DVector<f64>> {
    let k = params.k();
    if full.q.len() != 6 + k || full.q_dot.len() != 6 + k || input.joint_torques.len() != k {
        return Err(Error::Dimension(format!("oracle expects {} coordinates", 6 + k)));
    }
    let (q, q_dot) = (&full.q, &full.q_dot);
    let m = hessian(|v| lagrangian(params, q, v), q_dot, VELOCITY_STEP);
    let dl_dq = gradient(|x| lagrangian(params, x, q_dot), q, CONFIG_STEP);
    let momentum = |x: &DVector<f64>| gradient(|v| lagrangian(params, x, v), q_dot, VELOCITY_STEP);
    let mixed = (momentum(&(q + q_dot * CONFIG_STEP)) - momentum(&(q - q_dot * CONFIG_STEP))) / (2.0 * CONFIG_STEP);

    let eig = m.clone().symmetric_eigenvalues();
    let cond = if eig.min() > 0.0 { eig.max() / eig.min() } else { f64::INFINITY };
    if !(cond <= ORACLE_COND_LIMIT) {
        return Err(Error::IllConditioned { what: "oracle inertia matrix", cond });
    }
    let rhs = generalized_input(full.xi(), input) + dl_dq - mixed;
    m.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or(Error::IllConditioned { what: "oracle inertia matrix", cond })
}

/// Full coordinates of a reduced state with base position `s_eb`.
pub fn full_from_reduced(params: &AMParams, state: &ReducedState, s_eb: Vector3<f64>) -> Result<FullCoordinates> {
    let snap = Snapshot::new(params, state)?;
    let xi = state.xi;
    let xi_inv = euler_rate_matrix_inverse(xi, EULER_SINGULARITY_TOL).ok_or(Error::EulerSingularity { cos_theta: xi.theta.cos() })?;
    let k = state.k();
    let mut q = DVector::zeros(6 + k);
    q.fixed_rows_mut::<3>(0).copy_from(&s_eb);
    q.fixed_rows_mut::<3>(3).copy_from(&xi.to_vector());
    q.rows_mut(6, k).copy_from(&state.eta);
    let mut q_dot = DVector::zeros(6 + k);
    q_dot.fixed_rows_mut::<3>(0).copy_from(&(rotation_from_euler(xi) * snap.s_dot_b));
    q_dot.fixed_rows_mut::<3>(3).copy_from(&(xi_inv * snap.omega_b));
    q_dot.rows_mut(6, k).copy_from(&state.eta_dot);
    Ok(FullCoordinates { q, q_dot })
}

/// Reduced state of full coordinates; the base position is dropped.
pub fn reduced_from_full(params: &AMParams, full: &FullCoordinates) -> ReducedState {
    let (_, xi, eta) = split(&full.q);
    let k = full.k();
    let r = rotation_from_euler(xi);
    let s_dot_b = r.transpose() * full.q_dot.fixed_rows::<3>(0);
    let omega_b = euler_rate_matrix(xi) * full.q_dot.fixed_rows::<3>(3);
    let eta_dot = full.q_dot.rows(6, k).into_owned();
    let m = momenta_from_velocities(params, &eta, &s_dot_b, &omega_b, &eta_dot);
    ReducedState { p: m.p, l: m.l, xi, eta, eta_dot }
}

/// Reduced-model accelerations expressed in full coordinates.
pub fn reduced_accel_in_full(params: &AMParams, state: &ReducedState, input: &ControlInput) -> Result<DVector<f64>> {
    let snap = Snapshot::new(params, state)?;
    let x_ddot = snap.accelerations(input);
    let k = state.k();
    let xi = state.xi;
    let xi_inv = euler_rate_matrix_inverse(xi, EULER_SINGULARITY_TOL).ok_or(Error::EulerSingularity { cos_theta: xi.theta.cos() })?;
    let xi_dot = xi_inv * snap.omega_b;
    let s_ddot_b: Vector3<f64> = x_ddot.fixed_rows::<3>(0).into_owned();
    let omega_dot: Vector3<f64> = x_ddot.fixed_rows::<3>(3).into_owned();
    let mut out = DVector::zeros(6 + k);
    out.fixed_rows_mut::<3>(0).copy_from(&(rotation_from_euler(xi) * (s_ddot_b + snap.omega_b.cross(&snap.s_dot_b))));
    out.fixed_rows_mut::<3>(3).copy_from(&(xi_inv * (omega_dot - euler_rate_matrix_dot(xi, &xi_dot) * xi_dot)));
    out.rows_mut(6, k).copy_from(&x_ddot.rows(6, k));
    Ok(out)
}

/// `|a - b| / max(|b|, 1)`.
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> AMParams {
        AMParams::planar_two_link()
    }

    #[test]
    fn linear_map_jacobian_is_exact() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 4.0]);
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let j = finite_difference_jacobian(|x| &a * x, &x, 1e-3);
        assert!((j - a).amax() < 1e-10);
    }

    #[test]
    fn sine_derivative_at_origin() {
        let j = finite_difference_jacobian(|x| x.map(f64::sin), &DVector::from_element(1, 0.0), 1e-5);
        assert!((j[(0, 0)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn central_differences_are_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let c: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let poly = |x: f64| c.iter().rev().fold(0.0, |acc, a| acc * x + a);
            let dpoly = |x: f64| c.iter().enumerate().skip(1).map(|(i, a)| i as f64 * a * x.powi(i as i32 - 1)).sum::<f64>();
            let x0 = rng.random_range(-1.0..1.0);
            let err = |h: f64| {
                let j = finite_difference_jacobian(|x| x.map(poly), &DVector::from_element(1, x0), h);
                (j[(0, 0)] - dpoly(x0)).abs()
            };
            let ratio = err(0.02) / err(0.01);
            assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn hover_has_zero_accelerations() {
        let p = params();
        let eta = DVector::from_vec(vec![-std::f64::consts::FRAC_PI_2, 0.0]);
        let state = ReducedState::at_rest(EulerAngles::new(0.0, 0.0, 0.3), eta);
        let full = full_from_reduced(&p, &state, Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let u = ControlInput { joint_torques: DVector::zeros(2), thrust: p.total_mass() * p.gravity, body_torques: Vector3::zeros() };
        let a = full_lagrangian_accel(&p, &full, &u).unwrap();
        assert!(a.amax() < 1e-7, "{a}");
    }

    #[test]
    fn massless_arm_falls_ballistically() {
        let mut p = params();
        // A featherweight arm keeps the oracle inertia matrix invertible.
        for l in &mut p.links {
            l.mass = 1e-6;
            l.inertia = nalgebra::Matrix3::identity() * 1e-8;
        }
        let state = ReducedState::at_rest(EulerAngles::new(0.2, -0.1, 0.5), DVector::from_vec(vec![0.3, 0.4]));
        let full = full_from_reduced(&p, &state, Vector3::zeros()).unwrap();
        let a = full_lagrangian_accel(&p, &full, &ControlInput::zeros(2)).unwrap();
        assert!((a.fixed_rows::<3>(0) - Vector3::new(0.0, 0.0, -p.gravity)).amax() < 1e-6);
        assert!(a.fixed_rows::<3>(3).amax() < 1e-5);
    }

    #[test]
    fn reduced_full_round_trip() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let state = ReducedState {
                p: Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                l: Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
                xi: EulerAngles::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0)),
                eta: DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0)),
                eta_dot: DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)),
            };
            let full = full_from_reduced(&p, &state, Vector3::zeros()).unwrap();
            let back = reduced_from_full(&p, &full);
            assert!((back.to_vector() - state.to_vector()).amax() < 1e-10);
        }
    }

    /// Base made immovable: the arm follows the textbook planar two-link equations.
    #[test]
    fn frozen_base_matches_planar_two_link() {
        let mut p = params();
        p.base_mass *= 1e9;
        p.base_inertia *= 1e9;
        let (m1, m2, l1, l2) = (0.5, 1.0, 0.25, 0.2);
        let (lc1, lc2) = (l1 / 2.0, l2 / 2.0);
        let (i1, i2) = (m1 * l1 * l1 / 12.0, m2 * l2 * l2 / 12.0);
        let g = p.gravity;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (q1, q2) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let (d1, d2) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let (t1, t2) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let full = FullCoordinates {
                q: DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, q1, q2]),
                q_dot: DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, d1, d2]),
            };
            let u = ControlInput {
                joint_torques: DVector::from_vec(vec![t1, t2]),
                thrust: p.total_mass() * g,
                body_torques: Vector3::zeros(),
            };
            let a = full_lagrangian_accel(&p, &full, &u).unwrap();

            let (c2, s2) = (q2.cos(), q2.sin());
            let m11 = i1 + i2 + m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * c2);
            let m12 = i2 + m2 * (lc2 * lc2 + l1 * lc2 * c2);
            let m22 = i2 + m2 * lc2 * lc2;
            let hh = m2 * l1 * lc2 * s2;
            let c = [-hh * (2.0 * d1 * d2 + d2 * d2), hh * d1 * d1];
            let gv = [
                (m1 * lc1 + m2 * l1) * g * q1.cos() + m2 * lc2 * g * (q1 + q2).cos(),
                m2 * lc2 * g * (q1 + q2).cos(),
            ];
            let mm = nalgebra::Matrix2::new(m11, m12, m12, m22);
            let rhs = nalgebra::Vector2::new(t1 - c[0] - gv[0], t2 - c[1] - gv[1]);
            let expected = mm.try_inverse().unwrap() * rhs;
            assert_relative_eq!(a[6], expected.x, max_relative = 1e-5, epsilon = 1e-6);
            assert_relative_eq!(a[7], expected.y, max_relative = 1e-5, epsilon = 1e-6);
        }
    }

    #[test]
    fn reduced_and_oracle_accelerations_agree() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let state = ReducedState {
                p: Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                l: Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
                xi: EulerAngles::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0)),
                eta: DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0)),
                eta_dot: DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)),
            };
            let u = ControlInput {
                joint_torques: DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)),
                thrust: rng.random_range(20.0..60.0),
                body_torques: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            };
            let full = full_from_reduced(&p, &state, Vector3::new(0.5, -1.0, 2.0)).unwrap();
            let oracle = full_lagrangian_accel(&p, &full, &u).unwrap();
            let reduced = reduced_accel_in_full(&p, &state, &u).unwrap();
            let err = relative_error(&reduced, &oracle);
            assert!(err < 1e-6, "relative error {err}");
        }
    }
}
