use std::io::{Read, Write};

use nalgebra::{DVector, Vector3};
use serde::Serialize;

use super::run::{ControlRecord, Summary, Trajectory};
use crate::error::{Error, Result};
use crate::flatness::{inputs_from_flat, singularity_check, state_from_flat, FlatSignal};
use crate::mechanism::AMParams;

fn joints(prefix: &str, k: usize) -> impl Iterator<Item = String> + '_ {
    (1..=k).map(move |i| format!("{prefix}_{i}"))
}

/// Names of the extended state components.
pub fn state_names(k: usize) -> Vec<String> {
    let mut c: Vec<String> = ["p_x", "p_y", "p_z", "l_x", "l_y", "l_z", "phi", "theta", "psi"].map(String::from).into();
    c.extend(joints("eta", k));
    c.extend(joints("eta_dot", k));
    c.extend(["T", "T_dot"].map(String::from));
    c
}

/// Names of the extended input components.
pub fn input_names(k: usize) -> Vec<String> {
    let mut c: Vec<String> = joints("tau_L", k).collect();
    c.extend(["T_ddot", "tau_phi", "tau_theta", "tau_psi"].map(String::from));
    c
}

/// Column names of the time-series CSV for `k` joints.
pub fn channel_names(k: usize) -> Vec<String> {
    let mut c = vec!["t".to_string()];
    c.extend(state_names(k));
    c.extend(input_names(k));
    for tag in ["sigma", "sigma_d"] {
        c.extend(["p_e_x", "p_e_y", "p_e_z", "psi"].map(|n| format!("{tag}_{n}")));
        c.extend(joints(&format!("{tag}_eta"), k));
    }
    c.extend(
        ["V", "Vdot", "margin_attitude", "margin_thrust", "margin_tilt", "K", "V_AM", "s_x", "s_y", "s_z", "h_norm"]
            .map(String::from),
    );
    c
}

/// One row per recorded physics step.
pub fn write_csv<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(channel_names(traj.k))?;
    for r in &traj.records {
        let m = &r.margins;
        let row = std::iter::once(r.t)
            .chain(r.q_de.iter().copied())
            .chain(r.u_de.iter().copied())
            .chain(r.sigma.iter().copied())
            .chain(r.sigma_d.iter().copied())
            .chain([r.value, r.value_rate, m.attitude, m.thrust, m.tilt, r.kinetic, r.potential])
            .chain(r.position)
            .chain([r.h_norm]);
        w.write_record(row.map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Report<'a> {
    summary: &'a Summary,
    control_log: &'a [ControlRecord],
}

/// Summary and per-update controller log.
pub fn write_json<W: Write>(traj: &Trajectory, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, &Report { summary: &traj.summary, control_log: &traj.control_log })?;
    Ok(())
}

/// Columns of a sampled flat trajectory: values and derivatives up to the order the maps need.
pub fn flat_sample_names(k: usize) -> Vec<String> {
    let mut c = vec!["t".to_string()];
    for axis in ["x", "y", "z"] {
        c.push(format!("p_e_{axis}"));
        c.extend((1..=3).map(|d| format!("p_e_{axis}_d{d}")));
    }
    c.push("psi".into());
    c.extend((1..=2).map(|d| format!("psi_d{d}")));
    for i in 1..=k {
        c.push(format!("eta_{i}"));
        c.extend((1..=2).map(|d| format!("eta_{i}_d{d}")));
    }
    c
}

/// Reads `(t, sigma)` rows; columns are matched by name, in any order.
pub fn read_flat_samples<R: Read>(input: R, k: usize) -> Result<Vec<(f64, FlatSignal)>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let index: Vec<usize> = flat_sample_names(k)
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h.trim() == n)
                .ok_or_else(|| Error::Config(format!("flat trajectory is missing column '{n}'")))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let vals: Vec<f64> = index
            .iter()
            .map(|&i| {
                let cell = row.get(i).unwrap_or("").trim();
                cell.parse::<f64>().map_err(|_| Error::Config(format!("row {}: '{cell}' is not a number", line + 2)))
            })
            .collect::<Result<_>>()?;
        let p = |d: usize| Vector3::new(vals[1 + d], vals[5 + d], vals[9 + d]);
        let eta = |d: usize| DVector::from_fn(k, |i, _| vals[16 + 3 * i + d]);
        let sigma = FlatSignal { p_e: [p(0), p(1), p(2), p(3)], psi: [vals[13], vals[14], vals[15]], eta: [eta(0), eta(1), eta(2)] };
        out.push((vals[0], sigma));
    }
    Ok(out)
}

/// Column names written by [`write_flat_conversion`].
pub fn conversion_names(k: usize) -> Vec<String> {
    let mut c = vec!["t".to_string()];
    c.extend(state_names(k));
    c.extend(input_names(k));
    c.extend(joints("u_tau_L", k));
    c.extend(["u_T", "u_tau_phi", "u_tau_theta", "u_tau_psi", "margin_attitude", "margin_thrust", "margin_tilt"].map(String::from));
    c
}

/// States and inputs recovered from each flat sample.
pub fn write_flat_conversion<W: Write>(params: &AMParams, samples: &[(f64, FlatSignal)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(conversion_names(params.k()))?;
    for (t, sigma) in samples {
        let q = state_from_flat(params, sigma)?;
        let (u_de, u) = inputs_from_flat(params, sigma)?;
        let m = singularity_check(params, &q);
        let row = std::iter::once(*t)
            .chain(q.to_vector().iter().copied().collect::<Vec<_>>())
            .chain(u_de.to_vector().iter().copied().collect::<Vec<_>>())
            .chain(u.to_vector().iter().copied().collect::<Vec<_>>())
            .chain([m.attitude, m.thrust, m.tilt]);
        w.write_record(row.map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::reference::{bump, quintic_rest_to_rest, PolySegment, ReferenceSpec};

    #[test]
    fn channel_count_matches_record_width() {
        let k = 2;
        let width = 1 + (11 + 2 * k) + (4 + k) + 2 * (4 + k) + 7 + 3 + 1;
        let names = channel_names(k);
        assert_eq!(names.len(), width);
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len());
    }

    fn sample_file(spec: &ReferenceSpec, times: &[f64]) -> String {
        let k = spec.k();
        let mut text = flat_sample_names(k).join(",") + "\n";
        for &t in times {
            let s = spec.at(t).unwrap();
            let mut row = vec![t];
            for a in 0..3 {
                row.extend((0..4).map(|d| s.p_e[d][a]));
            }
            row.extend(s.psi);
            for i in 0..k {
                row.extend((0..3).map(|d| s.eta[d][i]));
            }
            text += &(row.iter().map(f64::to_string).collect::<Vec<_>>().join(",") + "\n");
        }
        text
    }

    #[test]
    fn flat_file_round_trip() {
        let spec = ReferenceSpec {
            segments: vec![PolySegment {
                start: 0.0,
                end: 2.0,
                p_e: [bump(1.0, 2.0), vec![0.0], bump(0.3, 2.0)],
                psi: quintic_rest_to_rest(0.0, 0.5, 2.0),
                eta: vec![quintic_rest_to_rest(-1.0, 0.0, 2.0), vec![0.3]],
            }],
        };
        let times = [0.0, 0.4, 1.0, 1.7];
        let samples = read_flat_samples(sample_file(&spec, &times).as_bytes(), 2).unwrap();
        assert_eq!(samples.len(), 4);
        for ((t, s), &want) in samples.iter().zip(&times) {
            assert_eq!(*t, want);
            assert!(crate::sim::reference::joint_mismatch(s, &spec.at(want).unwrap()) == 0.0);
        }
        let p = AMParams::planar_two_link();
        let mut out = Vec::new();
        write_flat_conversion(&p, &samples, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), conversion_names(2).len());
        let hover: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        // At t = 0 the reference is at rest: hover thrust, zero momenta.
        assert!((hover[1 + 13] - 41.202).abs() < 1e-9);
        assert!(hover[1..7].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn missing_column_is_reported() {
        let err = read_flat_samples("t,p_e_x\n0,0\n".as_bytes(), 1).unwrap_err();
        assert!(err.to_string().contains("p_e_x_d1"));
    }
}
