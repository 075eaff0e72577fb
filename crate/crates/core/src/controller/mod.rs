//! Tracking controller: a quadratic CLF on the Brunovsky error coordinates and the
//! min-norm CLF-QP that picks the auxiliary input closest to the reference feedforward.

mod care;

pub use care::{care_residual, solve_care};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flatness::{
    auxiliary_decomposition_at, brunovsky_matrices, flat_outputs_at, v_to_w, w_to_v, AuxiliaryDecomposition,
    BrunovskyForm, FlatSignal,
};
use crate::mechanism::AMParams;
use crate::reduced::{ExtendedInput, ExtendedState, Snapshot};

/// Quadratic control Lyapunov function `V = h^T P h`.
#[derive(Debug, Clone)]
pub struct Clf {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Required decay rate in `V' <= -lambda V`.
    pub lambda: f64,
    pub brunovsky: BrunovskyForm,
    ftp_pf: DMatrix<f64>,
    pg: DMatrix<f64>,
}

impl Clf {
    /// Solves the Riccati equation for weight `q`; `lambda` defaults to `lambda_min(Q) / lambda_max(P)`.
    pub fn new(k: usize, q: DMatrix<f64>, lambda: Option<f64>) -> Result<Self> {
        let brunovsky = brunovsky_matrices(k);
        let n = brunovsky.f.nrows();
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::Dimension(format!("CLF weight must be {n}x{n}, got {}x{}", q.nrows(), q.ncols())));
        }
        let p = solve_care(&brunovsky.f, &brunovsky.g, &q)?;
        let natural = q.clone().symmetric_eigenvalues().min() / p.clone().symmetric_eigenvalues().max();
        let lambda = lambda.unwrap_or(natural);
        if !(lambda > 0.0) {
            return Err(Error::InvalidParams(format!("CLF decay rate must be positive, got {lambda}")));
        }
        let ftp_pf = brunovsky.f.transpose() * &p + &p * &brunovsky.f;
        let pg = &p * &brunovsky.g;
        Ok(Self { p, q, lambda, brunovsky, ftp_pf, pg })
    }

    pub fn identity(k: usize) -> Result<Self> {
        let n = 11 + 2 * k;
        Self::new(k, DMatrix::identity(n, n), None)
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn residual(&self) -> f64 {
        care_residual(&self.brunovsky.f, &self.brunovsky.g, &self.q, &self.p)
    }

    /// `(lambda_min(P), lambda_max(P))`.
    pub fn p_eigen_range(&self) -> (f64, f64) {
        let e = self.p.clone().symmetric_eigenvalues();
        (e.min(), e.max())
    }

    /// `sqrt(lambda_max(P) / lambda_min(P))`, the overshoot factor of the exponential envelope.
    pub fn envelope_gain(&self) -> f64 {
        let (lo, hi) = self.p_eigen_range();
        (hi / lo).sqrt()
    }

    pub fn value(&self, h: &DVector<f64>) -> f64 {
        h.dot(&(&self.p * h))
    }

    /// `L_F V = h^T (F^T P + P F) h`.
    pub fn lf(&self, h: &DVector<f64>) -> f64 {
        h.dot(&(&self.ftp_pf * h))
    }

    /// `L_G V = 2 h^T P G`, in Brunovsky input ordering.
    pub fn lg(&self, h: &DVector<f64>) -> DVector<f64> {
        self.pg.tr_mul(h) * 2.0
    }
}

/// `(V, V')` along `h' = F h + G w`, with `w` in Brunovsky ordering `(psi'', eta'', p_e''')`.
pub fn clf_value_and_derivative(h: &DVector<f64>, clf: &Clf, w: &DVector<f64>) -> (f64, f64) {
    (clf.value(h), clf.lf(h) + clf.lg(h).dot(w))
}

/// `h = (e1, e2, e1', e2', e1'')` with `e1` the `p_e` error and `e2` the `(psi, eta)` error.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingError {
    pub h: DVector<f64>,
}

impl TrackingError {
    pub fn k(&self) -> usize {
        (self.h.len() - 11) / 2
    }

    pub fn e1(&self) -> DVector<f64> {
        self.h.rows(0, 3).into_owned()
    }

    pub fn e2(&self) -> DVector<f64> {
        self.h.rows(3, 1 + self.k()).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.h.norm()
    }
}

pub(crate) fn assemble_error(actual: &FlatSignal, reference: &FlatSignal) -> Result<TrackingError> {
    let k = actual.k();
    if reference.k() != k {
        return Err(Error::Dimension(format!("reference has {} joints, state {}", reference.k(), k)));
    }
    let m = 4 + k;
    let mut h = DVector::zeros(11 + 2 * k);
    h.rows_mut(0, m).copy_from(&(actual.stack(0, 0) - reference.stack(0, 0)));
    h.rows_mut(m, m).copy_from(&(actual.stack(1, 1) - reference.stack(1, 1)));
    h.rows_mut(2 * m, 3).copy_from(&(actual.p_e[2] - reference.p_e[2]));
    Ok(TrackingError { h })
}

pub fn tracking_error(params: &AMParams, q_de: &ExtendedState, reference: &FlatSignal) -> Result<TrackingError> {
    let snap = Snapshot::new(params, &q_de.q)?;
    let actual = flat_outputs_at(params, &snap, q_de, &ExtendedInput::zeros(q_de.k()))?;
    assemble_error(&actual, reference)
}

/// Optional box on `u_de = (tau_L, T_ddot, tau)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBounds {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.lower.len() != 4 + k || self.upper.len() != 4 + k {
            return Err(Error::Config(format!("input bounds need {} entries each", 4 + k)));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::Config("input bounds need lower <= upper".into()));
        }
        Ok(())
    }

    fn clip(&self, u: &mut DVector<f64>) -> bool {
        let mut clipped = false;
        for (i, x) in u.iter_mut().enumerate() {
            let c = x.clamp(self.lower[i], self.upper[i]);
            clipped |= c != *x;
            *x = c;
        }
        clipped
    }
}

/// Optimality residuals of the single-constraint QP.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct KktReport {
    /// `|2 mu + nu b|`.
    pub stationarity: f64,
    /// `|nu (a + b . mu)|`.
    pub complementarity: f64,
    /// `a + b . mu`, non-positive when feasible.
    pub constraint: f64,
    pub multiplier: f64,
}

#[derive(Debug, Clone)]
pub struct ClfQpSolution {
    pub u_de: ExtendedInput,
    /// Commanded auxiliary input `v = f_v + G_v u_de`.
    pub v: DVector<f64>,
    /// Deviation `v - sigma_d^(r)` selected by the QP.
    pub mu: DVector<f64>,
    pub error: TrackingError,
    pub value: f64,
    /// `V'` predicted by the Brunovsky model for the returned input.
    pub value_rate: f64,
    pub lambda: f64,
    pub active: bool,
    pub kkt: KktReport,
    pub clipped: bool,
    /// `L_G V = 0` while the constraint was violated.
    pub degenerate: bool,
    pub decomposition: AuxiliaryDecomposition,
}

/// Min-norm CLF-QP in closed form.
///
/// Minimizes `|G_v u_de + f_v - sigma_d^(r)|^2` subject to
/// `L_F V + L_G V (v - sigma_d^(r)) <= -lambda V`.
pub fn clf_qp_control(
    params: &AMParams,
    q_de: &ExtendedState,
    reference: &FlatSignal,
    clf: &Clf,
    bounds: Option<&InputBounds>,
) -> Result<ClfQpSolution> {
    let k = q_de.k();
    if clf.dim() != 11 + 2 * k {
        return Err(Error::Dimension(format!("CLF is for dimension {}, state needs {}", clf.dim(), 11 + 2 * k)));
    }
    let snap = Snapshot::new(params, &q_de.q)?;
    let aux = auxiliary_decomposition_at(params, &snap, q_de)?;
    let actual = flat_outputs_at(params, &snap, q_de, &ExtendedInput::zeros(k))?;
    let error = assemble_error(&actual, reference)?;
    let h = &error.h;

    let value = clf.value(h);
    let lf = clf.lf(h);
    let b = w_to_v(&clf.lg(h));
    let a = lf + clf.lambda * value;
    let bb = b.norm_squared();
    let m = 4 + k;

    let (mu, active, multiplier, degenerate) = if a <= 0.0 {
        (DVector::zeros(m), false, 0.0, false)
    } else if bb > 0.0 {
        (&b * (-a / bb), true, 2.0 * a / bb, false)
    } else {
        warn!("CLF constraint violated with L_G V = 0 (V = {value:e}); using the feedforward input");
        (DVector::zeros(m), false, 0.0, true)
    };

    let target = reference.top();
    let mut u = aux.solve(&(&mu + &target))?;
    let mut clipped = false;
    if let Some(bounds) = bounds {
        bounds.validate(k)?;
        clipped = bounds.clip(&mut u);
        if clipped {
            let slack = a + b.dot(&(aux.apply(&u) - &target));
            if slack > 0.0 {
                warn!("input bounds make the CLF constraint infeasible (violation {slack:e})");
            }
        }
    }

    // Residuals are evaluated for the returned input, in the deviation variable `mu`
    // (a bijective change of variables from `u_de`).
    let mu = aux.apply(&u) - &target;
    let constraint = a + b.dot(&mu);
    let kkt = KktReport {
        stationarity: (&mu * 2.0 + &b * multiplier).norm(),
        complementarity: (multiplier * constraint).abs(),
        constraint,
        multiplier,
    };
    let value_rate = lf + b.dot(&mu);
    Ok(ClfQpSolution {
        u_de: ExtendedInput::from_slice(k, u.as_slice())?,
        v: aux.apply(&u),
        mu,
        error,
        value,
        value_rate,
        lambda: clf.lambda,
        active,
        kkt,
        clipped,
        degenerate,
        decomposition: aux,
    })
}

/// Brunovsky input `w` for a given auxiliary input and reference.
pub fn brunovsky_input(v: &DVector<f64>, reference: &FlatSignal) -> DVector<f64> {
    v_to_w(&(v - reference.top()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flatness::{flat_outputs_from_state, inputs_from_flat, state_from_flat};
    use crate::reduced::ReducedState;
    use crate::spatial::EulerAngles;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> AMParams {
        AMParams::planar_two_link()
    }

    fn moving_reference(rng: &mut ChaCha8Rng) -> FlatSignal {
        let mut v = |a: f64| rng.random_range(-a..a);
        FlatSignal {
            p_e: [
                Vector3::new(v(1.0), v(1.0), v(1.0)),
                Vector3::new(v(3.0), v(3.0), v(3.0)),
                Vector3::new(v(5.0), v(5.0), v(5.0)),
                Vector3::new(v(20.0), v(20.0), v(20.0)),
            ],
            psi: [v(1.0), v(0.5), v(0.5)],
            eta: [
                DVector::from_fn(2, |_, _| v(2.0)),
                DVector::from_fn(2, |_, _| v(1.0)),
                DVector::from_fn(2, |_, _| v(2.0)),
            ],
        }
    }

    #[test]
    fn zero_error_has_zero_value() {
        let clf = Clf::identity(2).unwrap();
        let h = DVector::zeros(15);
        assert_eq!(clf_value_and_derivative(&h, &clf, &DVector::from_element(6, 3.0)), (0.0, 0.0));
    }

    #[test]
    fn decay_rate_and_eigenvalues_of_reference_clf() {
        let clf = Clf::identity(2).unwrap();
        assert!(clf.residual() < 1e-8);
        let (lo, hi) = clf.p_eigen_range();
        assert!(lo > 0.0);
        assert!((clf.lambda - 1.0 / hi).abs() < 1e-15);
    }

    #[test]
    fn lqr_input_meets_decay_bound() {
        let clf = Clf::identity(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let h = DVector::from_fn(15, |_, _| rng.random_range(-1.0..1.0));
            let w = -(clf.brunovsky.g.transpose() * &clf.p * &h);
            let (v, vdot) = clf_value_and_derivative(&h, &clf, &w);
            let bound = -h.dot(&(&clf.q * &h)) - w.norm_squared();
            assert!(vdot <= bound + 1e-10);
            assert!(vdot <= -clf.lambda * v + 1e-10);
        }
    }

    #[test]
    fn value_rate_matches_finite_difference() {
        let clf = Clf::identity(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let h = DVector::from_fn(15, |_, _| rng.random_range(-1.0..1.0));
            let w = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let h_dot = &clf.brunovsky.f * &h + &clf.brunovsky.g * &w;
            let step = 1e-6;
            let fd = (clf.value(&(&h + &h_dot * step)) - clf.value(&(&h - &h_dot * step))) / (2.0 * step);
            let (_, vdot) = clf_value_and_derivative(&h, &clf, &w);
            assert!((fd - vdot).abs() < 1e-6 * vdot.abs().max(1.0));
        }
    }

    #[test]
    fn on_reference_returns_feedforward() {
        let p = params();
        let clf = Clf::identity(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let reference = moving_reference(&mut rng);
            let q = state_from_flat(&p, &reference).unwrap();
            let sol = clf_qp_control(&p, &q, &reference, &clf, None).unwrap();
            assert!(sol.error.norm() < 1e-9, "{}", sol.error.norm());
            let (ff, _) = inputs_from_flat(&p, &reference).unwrap();
            assert!((sol.u_de.to_vector() - ff.to_vector()).amax() < 1e-7);
        }
    }

    #[test]
    fn hover_offset_shows_only_in_position_error() {
        let p = params();
        let eta = DVector::from_vec(vec![-1.0, 0.5]);
        let reference = FlatSignal::constant(Vector3::zeros(), 0.0, eta.clone());
        let mut q = ExtendedState::hover(&p, 0.0, eta);
        let delta = Vector3::new(0.1, -0.2, 0.05);
        q.q.p += delta;
        // Shift the angular momentum so that only the linear velocity changes.
        let snap_ref = Snapshot::new(&p, &ExtendedState::hover(&p, 0.0, q.q.eta.clone()).q).unwrap();
        let m = &snap_ref.mass;
        q.q.l += m.m_pw().transpose() * delta / p.total_mass();
        let e = tracking_error(&p, &q, &reference).unwrap();
        assert!((e.e1() - DVector::from_column_slice(delta.as_slice())).amax() < 1e-12);
        assert!(e.h.rows(3, 12).amax() < 1e-12, "{}", e.h);
    }

    #[test]
    fn inactive_constraint_gives_feedback_linearizing_input() {
        let p = params();
        let mut clf = Clf::identity(2).unwrap();
        clf.lambda = 1e-9;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for _ in 0..200 {
            let reference = moving_reference(&mut rng);
            // Joint error decaying along its own chain keeps L_F V negative.
            let mut sample = reference.clone();
            let d = rng.random_range(-1e-2..1e-2);
            sample.eta[0][1] += d;
            sample.eta[1][1] -= d;
            let q = state_from_flat(&p, &sample).unwrap();
            let sol = clf_qp_control(&p, &q, &reference, &clf, None).unwrap();
            if sol.active {
                continue;
            }
            let exact = sol.decomposition.solve(&reference.top()).unwrap();
            assert!((sol.u_de.to_vector() - exact).amax() < 1e-9);
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn active_constraint_holds_with_equality_and_kkt() {
        let p = params();
        let clf = Clf::identity(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut active = 0;
        for _ in 0..100 {
            let reference = moving_reference(&mut rng);
            let mut sample = flat_outputs_from_state(&p, &state_from_flat(&p, &reference).unwrap(), &ExtendedInput::zeros(2)).unwrap();
            sample.p_e[0] += Vector3::new(0.2, 0.0, -0.1);
            sample.eta[1][0] += 0.3;
            let q = state_from_flat(&p, &sample).unwrap();
            let sol = clf_qp_control(&p, &q, &reference, &clf, None).unwrap();
            if !sol.active {
                continue;
            }
            active += 1;
            assert!(sol.kkt.constraint.abs() < 1e-9 * sol.value.max(1.0), "{:?}", sol.kkt);
            assert!(sol.kkt.stationarity < 1e-8, "{:?}", sol.kkt);
            assert!(sol.kkt.complementarity < 1e-8, "{:?}", sol.kkt);
            assert!((sol.value_rate + clf.lambda * sol.value).abs() < 1e-8 * sol.value.max(1.0));
        }
        assert!(active > 10);
    }

    #[test]
    fn bounds_clip_the_input() {
        let p = params();
        let clf = Clf::identity(2).unwrap();
        let eta = DVector::from_vec(vec![0.4, 0.4]);
        let reference = FlatSignal::constant(Vector3::zeros(), 0.0, eta.clone());
        let mut q = ExtendedState::hover(&p, 0.0, eta);
        q.q.p.x += 0.5;
        let bounds = InputBounds { lower: vec![-0.1; 6], upper: vec![0.1; 6] };
        let sol = clf_qp_control(&p, &q, &reference, &clf, Some(&bounds)).unwrap();
        assert!(sol.clipped);
        assert!(sol.u_de.to_vector().amax() <= 0.1);
        assert!(InputBounds { lower: vec![0.0; 3], upper: vec![1.0; 3] }.validate(2).is_err());
    }

    #[test]
    fn brunovsky_consistency_along_short_rollout() {
        // h' from finite differences of h along the extended dynamics equals F h + G w.
        let p = params();
        let clf = Clf::identity(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let reference = moving_reference(&mut rng);
            let q = ExtendedState {
                q: ReducedState {
                    p: Vector3::new(0.3, -0.2, 0.1),
                    l: Vector3::new(0.01, 0.02, -0.01),
                    xi: EulerAngles::new(0.1, -0.2, 0.3),
                    eta: DVector::from_vec(vec![0.5, -0.3]),
                    eta_dot: DVector::from_vec(vec![0.2, 0.1]),
                },
                thrust: 45.0,
                thrust_rate: 2.0,
            };
            let u = ExtendedInput {
                joint_torques: DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
                thrust_accel: rng.random_range(-5.0..5.0),
                body_torques: Vector3::new(0.1, -0.1, 0.05),
            };
            let h_at = |q: &ExtendedState, t: f64| {
                let mut r = reference.clone();
                // Reference advanced along its own Taylor expansion.
                r.p_e[0] += reference.p_e[1] * t + reference.p_e[2] * (t * t / 2.0) + reference.p_e[3] * (t * t * t / 6.0);
                r.p_e[1] += reference.p_e[2] * t + reference.p_e[3] * (t * t / 2.0);
                r.p_e[2] += reference.p_e[3] * t;
                r.psi[0] += reference.psi[1] * t + reference.psi[2] * (t * t / 2.0);
                r.psi[1] += reference.psi[2] * t;
                r.eta[0] += &reference.eta[1] * t + &reference.eta[2] * (t * t / 2.0);
                r.eta[1] += &reference.eta[2] * t;
                tracking_error(&p, q, &r).unwrap().h
            };
            let d = crate::reduced::extended_dynamics(&p, &q, &u).unwrap();
            let step = 1e-5;
            let shift = |s: f64| ExtendedState::from_slice(2, (q.to_vector() + &d * s).as_slice()).unwrap();
            let fd = (h_at(&shift(step), step) - h_at(&shift(-step), -step)) / (2.0 * step);
            let v = flat_outputs_from_state(&p, &q, &u).unwrap().top();
            let w = brunovsky_input(&v, &reference);
            let h = h_at(&q, 0.0);
            let predicted = &clf.brunovsky.f * &h + &clf.brunovsky.g * &w;
            assert!((&fd - &predicted).amax() < 1e-4 * predicted.amax().max(1.0), "{}", (fd - predicted).amax());
        }
    }
}
