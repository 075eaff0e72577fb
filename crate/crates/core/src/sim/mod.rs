//! Closed-loop simulation: references, scenarios, the integrator and output writers.

pub mod integrator;
pub mod output;
pub mod reference;
mod run;
pub mod scenario;

pub use integrator::rk4_step;
pub use output::{
    channel_names, conversion_names, flat_sample_names, read_flat_samples, write_csv, write_flat_conversion, write_json,
};
pub use reference::{reference_trajectory, PolySegment, ReferenceSpec};
pub use run::{
    scenario_clf, simulate_closed_loop, ControlRecord, EnvelopeReport, Record, Summary, Trajectory,
};
pub use scenario::{bundled_scenario, PayloadEvent, Scenario, ScenarioConfig, TimingConfig, TransferModel};
