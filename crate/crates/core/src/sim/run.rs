use log::{info, warn};
use nalgebra::{DVector, Vector3};
use serde::Serialize;

use crate::controller::{
    assemble_error, brunovsky_input, clf_qp_control, clf_value_and_derivative, tracking_error, Clf, ClfQpSolution,
};
use crate::error::{Error, Result};
use crate::flatness::{flat_outputs_at, singularity_check, state_from_flat, SingularityMargins};
use crate::mechanism::{energies, AMParams};
use crate::reduced::{
    advect, extended_dynamics_at, momenta_from_velocities, AdvectedPair, ExtendedInput, ExtendedState, Snapshot,
};
use crate::spatial::rotation_from_euler;

use super::integrator::rk4_step;
use super::scenario::{PayloadEvent, Scenario, TransferModel};

/// One physics-rate sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub t: f64,
    pub q_de: Vec<f64>,
    pub u_de: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_d: Vec<f64>,
    pub value: f64,
    pub value_rate: f64,
    pub margins: SingularityMargins,
    pub kinetic: f64,
    pub potential: f64,
    /// Base position in `E`.
    pub position: [f64; 3],
    pub h_norm: f64,
}

/// One controller update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlRecord {
    pub t: f64,
    pub value: f64,
    /// `V'` predicted by the Brunovsky model at the update.
    pub value_rate_model: f64,
    /// `(V(t + period) - V(t)) / period` across the held input, before any event.
    pub value_rate_measured: f64,
    pub lambda: f64,
    pub active: bool,
    pub stationarity: f64,
    pub complementarity: f64,
    pub constraint: f64,
    pub clipped: bool,
    pub degenerate: bool,
    pub decoupling_cond: f64,
    pub h_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeReport {
    pub horizon: f64,
    pub gain: f64,
    pub lambda: f64,
    pub h0: f64,
    /// Largest `|h(t)| / (gain |h(0)| exp(-lambda t / 2))` over the horizon.
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub completed: bool,
    pub abort: Option<String>,
    pub t_final: f64,
    pub physics_steps: usize,
    pub control_steps: usize,
    pub final_h_norm: f64,
    pub final_sigma_error: Vec<f64>,
    /// Largest `V' + lambda V` from the model at control updates.
    pub max_model_decrease_violation: f64,
    /// Largest `(V'_measured + lambda V) / period` over control steps; the ZOH constant `c`.
    pub zoh_constant: f64,
    pub max_stationarity: f64,
    pub max_complementarity: f64,
    pub active_steps: usize,
    pub clipped_steps: usize,
    pub degenerate_steps: usize,
    pub events_applied: usize,
    pub min_attitude_margin: f64,
    pub min_thrust_margin: f64,
    pub envelope: EnvelopeReport,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub k: usize,
    pub records: Vec<Record>,
    pub control_log: Vec<ControlRecord>,
    pub summary: Summary,
}

/// Mutable simulation state: vehicle parameters may change at events.
struct Plant {
    params: AMParams,
    q_de: ExtendedState,
    zeta: Vector3<f64>,
}

impl Plant {
    fn vector(&self) -> DVector<f64> {
        let k = self.q_de.k();
        let mut x = DVector::zeros(ExtendedState::dim(k) + 3);
        x.rows_mut(0, ExtendedState::dim(k)).copy_from(&self.q_de.to_vector());
        x.fixed_rows_mut::<3>(ExtendedState::dim(k)).copy_from(&self.zeta);
        x
    }

    fn set_vector(&mut self, x: &DVector<f64>) -> Result<()> {
        let n = ExtendedState::dim(self.q_de.k());
        self.q_de = ExtendedState::from_slice(self.q_de.k(), &x.as_slice()[..n])?;
        self.zeta = x.fixed_rows::<3>(n).into_owned();
        Ok(())
    }

    fn apply_event(&mut self, event: &PayloadEvent) -> Result<()> {
        let before = Snapshot::new(&self.params, &self.q_de.q)?;
        event.apply_to(&mut self.params)?;
        if event.transfer == TransferModel::PreserveVelocity {
            let q = &mut self.q_de.q;
            let m = momenta_from_velocities(&self.params, &q.eta, &before.s_dot_b, &before.omega_b, &q.eta_dot);
            q.p = m.p;
            q.l = m.l;
        }
        Ok(())
    }
}

fn derivative(params: &AMParams, x: &DVector<f64>, u: &ExtendedInput, k: usize) -> Result<DVector<f64>> {
    let n = ExtendedState::dim(k);
    let q_de = ExtendedState::from_slice(k, &x.as_slice()[..n])?;
    let snap = Snapshot::new(params, &q_de.q)?;
    let zeta = x.fixed_rows::<3>(n).into_owned();
    let mut out = DVector::zeros(n + 3);
    out.rows_mut(0, n).copy_from(&extended_dynamics_at(&snap, &q_de, u)?);
    let (_, zeta_dot) = advect(&snap.omega_b, &snap.s_dot_b, &AdvectedPair { gamma: snap.gamma, zeta });
    out.fixed_rows_mut::<3>(n).copy_from(&zeta_dot);
    Ok(out)
}

/// Per-sample channels that need the dynamics at the current state.
struct Probe {
    record: Record,
    h: DVector<f64>,
}

fn probe(plant: &Plant, scenario: &Scenario, clf: &Clf, t: f64, u: &ExtendedInput) -> Result<Probe> {
    let params = &plant.params;
    let q_de = &plant.q_de;
    let reference = scenario.reference.at(t)?;
    let snap = Snapshot::new(params, &q_de.q)?;
    let actual = flat_outputs_at(params, &snap, q_de, u)?;
    let h = assemble_error(&actual, &reference)?.h;
    let w = brunovsky_input(&actual.top(), &reference);
    let (value, value_rate) = clf_value_and_derivative(&h, clf, &w);
    let e = energies(params, &q_de.q.eta, &snap.x_dot, &snap.gamma, &plant.zeta);
    let position = rotation_from_euler(q_de.q.xi) * plant.zeta;
    let record = Record {
        t,
        q_de: q_de.to_vector().as_slice().to_vec(),
        u_de: u.to_vector().as_slice().to_vec(),
        sigma: actual.sigma().as_slice().to_vec(),
        sigma_d: reference.sigma().as_slice().to_vec(),
        value,
        value_rate,
        margins: singularity_check(params, q_de),
        kinetic: e.kinetic,
        potential: e.potential,
        position: [position.x, position.y, position.z],
        h_norm: h.norm(),
    };
    Ok(Probe { record, h })
}

fn initial_state(scenario: &Scenario) -> Result<ExtendedState> {
    let sigma0 = scenario.reference.at(0.0)?;
    let mut q = state_from_flat(&scenario.params, &sigma0)?;
    scenario.disturbance.apply(&mut q)?;
    Ok(q)
}

/// Builds the CLF for the scenario's controller settings.
pub fn scenario_clf(scenario: &Scenario) -> Result<Clf> {
    let k = scenario.params.k();
    Clf::new(k, scenario.controller.weight(k)?, scenario.controller.lambda)
}

/// Fixed-step closed loop with the controller held between updates.
///
/// Singularity trips and non-finite states end the rollout early; the partial trajectory is
/// returned with the diagnostic in `summary.abort`.
pub fn simulate_closed_loop(scenario: &Scenario) -> Result<Trajectory> {
    scenario.validate()?;
    let k = scenario.params.k();
    let clf = scenario_clf(scenario)?;
    let substeps = scenario.timing.substeps()?;
    let control_steps = scenario.timing.control_steps()?;
    let period = scenario.timing.control_period;
    let dt = period / substeps as f64;
    let decimate = scenario.output.decimate;
    let bounds = scenario.controller.bounds.as_ref();
    let horizon = scenario.analysis.envelope_horizon;

    let mut plant = Plant { params: scenario.params.clone(), q_de: initial_state(scenario)?, zeta: Vector3::zeros() };
    let mut events: Vec<&PayloadEvent> = scenario.events.iter().collect();
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut next_event = 0;

    let mut records = Vec::new();
    let mut control_log = Vec::with_capacity(control_steps);
    let mut abort = None;
    let mut physics_steps = 0usize;
    let mut t = 0.0;
    let mut h0 = f64::NAN;
    let mut max_ratio: f64 = 0.0;
    let mut last_h = DVector::zeros(11 + 2 * k);
    let mut last_sigma_error = vec![0.0; 4 + k];
    let (mut min_att, mut min_thrust) = (f64::INFINITY, f64::INFINITY);
    let mut events_applied = 0;
    let mut held = ExtendedInput::zeros(k);

    let fail = |e: Error, t: f64| -> Result<String> {
        if e.is_singularity() || matches!(e, Error::NonFinite { .. } | Error::IllConditioned { .. }) {
            warn!("rollout stopped at t = {t:.4}: {e}");
            Ok(format!("t = {t}: {e}"))
        } else {
            Err(e)
        }
    };

    'outer: for step in 0..control_steps {
        let t_ctrl = step as f64 * period;
        while next_event < events.len() && events[next_event].time <= t_ctrl + 1e-12 {
            let event = events[next_event];
            info!("t = {t_ctrl:.4}: link {} mass {:+} kg", event.link, event.mass_delta);
            if let Err(e) = plant.apply_event(event) {
                abort = Some(fail(e, t_ctrl)?);
                break 'outer;
            }
            next_event += 1;
            events_applied += 1;
        }

        let reference = scenario.reference.at(t_ctrl)?;
        let sol: ClfQpSolution = match clf_qp_control(&plant.params, &plant.q_de, &reference, &clf, bounds) {
            Ok(s) => s,
            Err(e) => {
                abort = Some(fail(e, t_ctrl)?);
                break;
            }
        };
        let u = sol.u_de.clone();
        held = u.clone();

        for sub in 0..substeps {
            t = t_ctrl + sub as f64 * dt;
            let pr = match probe(&plant, scenario, &clf, t, &u) {
                Ok(p) => p,
                Err(e) => {
                    abort = Some(fail(e, t)?);
                    break 'outer;
                }
            };
            if h0.is_nan() {
                h0 = pr.h.norm();
            }
            if t <= horizon + 1e-12 {
                let bound = clf.envelope_gain() * h0 * (-clf.lambda * t / 2.0).exp();
                if bound > 0.0 {
                    max_ratio = max_ratio.max(pr.h.norm() / bound);
                } else if pr.h.norm() > 0.0 {
                    max_ratio = f64::INFINITY;
                }
            }
            min_att = min_att.min(pr.record.margins.attitude);
            min_thrust = min_thrust.min(pr.record.margins.thrust);
            last_h = pr.h;
            last_sigma_error = pr.record.sigma.iter().zip(&pr.record.sigma_d).map(|(a, b)| a - b).collect();
            if pr.record.margins.flagged() {
                abort = Some(format!("t = {t}: singularity margin below guard {:?}", pr.record.margins));
                if physics_steps.is_multiple_of(decimate) {
                    records.push(pr.record);
                }
                break 'outer;
            }
            if physics_steps.is_multiple_of(decimate) {
                records.push(pr.record);
            }

            let x = plant.vector();
            let params = plant.params.clone();
            match rk4_step(|_, x| derivative(&params, x, &u, k), t, &x, dt).and_then(|next| plant.set_vector(&next)) {
                Ok(()) => {}
                Err(e) => {
                    abort = Some(fail(e, t)?);
                    break 'outer;
                }
            }
            physics_steps += 1;
        }
        t = t_ctrl + period;

        let end_reference = scenario.reference.at(t)?;
        let measured = match tracking_error(&plant.params, &plant.q_de, &end_reference) {
            Ok(e) => (clf.value(&e.h) - sol.value) / period,
            Err(e) => {
                abort = Some(fail(e, t)?);
                f64::NAN
            }
        };
        control_log.push(ControlRecord {
            t: t_ctrl,
            value: sol.value,
            value_rate_model: sol.value_rate,
            value_rate_measured: measured,
            lambda: sol.lambda,
            active: sol.active,
            stationarity: sol.kkt.stationarity,
            complementarity: sol.kkt.complementarity,
            constraint: sol.kkt.constraint,
            clipped: sol.clipped,
            degenerate: sol.degenerate,
            decoupling_cond: sol.decomposition.condition_number(),
            h_norm: sol.error.norm(),
        });
        if abort.is_some() {
            break;
        }
    }

    if abort.is_none() {
        // Final sample at the end time.
        match probe(&plant, scenario, &clf, t, &held) {
            Ok(pr) => {
                last_h = pr.h;
                last_sigma_error = pr.record.sigma.iter().zip(&pr.record.sigma_d).map(|(a, b)| a - b).collect();
                if physics_steps.is_multiple_of(decimate) {
                    records.push(pr.record);
                }
            }
            Err(e) => abort = Some(fail(e, t)?),
        }
    }

    let max_of = |f: &dyn Fn(&ControlRecord) -> f64| control_log.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let summary = Summary {
        name: scenario.name.clone(),
        completed: abort.is_none(),
        abort,
        t_final: t,
        physics_steps,
        control_steps: control_log.len(),
        final_h_norm: last_h.norm(),
        final_sigma_error: last_sigma_error,
        max_model_decrease_violation: max_of(&|c| c.value_rate_model + c.lambda * c.value),
        zoh_constant: max_of(&|c| (c.value_rate_measured + c.lambda * c.value) / period).max(0.0),
        max_stationarity: max_of(&|c| c.stationarity),
        max_complementarity: max_of(&|c| c.complementarity),
        active_steps: control_log.iter().filter(|c| c.active).count(),
        clipped_steps: control_log.iter().filter(|c| c.clipped).count(),
        degenerate_steps: control_log.iter().filter(|c| c.degenerate).count(),
        events_applied,
        min_attitude_margin: min_att,
        min_thrust_margin: min_thrust,
        envelope: EnvelopeReport { horizon, gain: clf.envelope_gain(), lambda: clf.lambda, h0, max_ratio },
    };
    Ok(Trajectory { k, records, control_log, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::reference::{PolySegment, ReferenceSpec};
    use crate::sim::scenario::{AnalysisConfig, ControllerConfig, Disturbance, OutputConfig, TimingConfig};

    fn hover(duration: f64) -> Scenario {
        let params = AMParams::planar_two_link();
        let eta = [-std::f64::consts::FRAC_PI_2, 0.3];
        Scenario {
            name: "hover".into(),
            params,
            timing: TimingConfig { dt_physics: 1e-4, control_period: 1e-3, duration },
            reference: ReferenceSpec { segments: vec![PolySegment::hold(0.0, duration, Vector3::zeros(), 0.2, &eta)] },
            disturbance: Disturbance::default(),
            controller: ControllerConfig::default(),
            events: vec![],
            output: OutputConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }

    #[test]
    fn hover_reference_is_held_exactly() {
        let traj = simulate_closed_loop(&hover(0.2)).unwrap();
        assert!(traj.summary.completed);
        let worst = traj.records.iter().map(|r| r.h_norm).fold(0.0, f64::max);
        assert!(worst < 1e-9, "max |h| = {worst:e}");
        assert_eq!(traj.records.len(), 2001);
    }

    #[test]
    fn input_is_piecewise_constant() {
        let mut s = hover(0.05);
        s.disturbance.p = Some([0.05, -0.02, 0.01]);
        let traj = simulate_closed_loop(&s).unwrap();
        for block in traj.records[..traj.records.len() - 1].chunks(10) {
            assert!(block.iter().all(|r| r.u_de == block[0].u_de));
        }
        let times: Vec<f64> = traj.records.iter().map(|r| r.t).collect();
        assert!(times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn payload_event_keeps_velocities() {
        let mut s = hover(0.02);
        s.events.push(PayloadEvent { time: 0.01, link: 2, mass_delta: -0.5, transfer: TransferModel::PreserveVelocity });
        let traj = simulate_closed_loop(&s).unwrap();
        assert_eq!(traj.summary.events_applied, 1);
        assert!(traj.records.iter().all(|r| r.q_de.iter().all(|v| v.is_finite())));
        // The held thrust now exceeds the lighter weight by |dm| g; the loop then removes it.
        let after = traj.records.iter().find(|r| r.t >= 0.01).unwrap();
        assert!((after.h_norm - 0.5 * 9.81).abs() < 1e-2, "{}", after.h_norm);
        assert!(traj.records.last().unwrap().value < after.value);
    }
}
