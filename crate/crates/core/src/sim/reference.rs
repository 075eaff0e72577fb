//! Piecewise-polynomial flat-output references.
//!
//! Each segment stores coefficients in ascending powers of the local time `t - start`.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flatness::FlatSignal;

/// Largest tolerated derivative mismatch where two segments meet.
pub const JOINT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolySegment {
    pub start: f64,
    pub end: f64,
    /// Coefficients of `p_e` x, y and z.
    pub p_e: [Vec<f64>; 3],
    pub psi: Vec<f64>,
    /// One coefficient list per joint.
    pub eta: Vec<Vec<f64>>,
}

/// `d^n/dt^n` of the polynomial with ascending coefficients `c` at `t`.
pub fn poly_derivative(c: &[f64], n: usize, t: f64) -> f64 {
    let mut acc = 0.0;
    for (i, a) in c.iter().enumerate().skip(n).rev() {
        let falling: f64 = ((i - n + 1)..=i).map(|j| j as f64).product();
        acc = acc * t + a * falling;
    }
    acc
}

impl PolySegment {
    /// Segment holding constant values.
    pub fn hold(start: f64, end: f64, p_e: Vector3<f64>, psi: f64, eta: &[f64]) -> Self {
        Self {
            start,
            end,
            p_e: [vec![p_e.x], vec![p_e.y], vec![p_e.z]],
            psi: vec![psi],
            eta: eta.iter().map(|&e| vec![e]).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.eta.len()
    }

    pub fn eval(&self, t: f64) -> FlatSignal {
        let tau = t - self.start;
        let p = |n: usize| Vector3::new(
            poly_derivative(&self.p_e[0], n, tau),
            poly_derivative(&self.p_e[1], n, tau),
            poly_derivative(&self.p_e[2], n, tau),
        );
        let e = |n: usize| DVector::from_iterator(self.k(), self.eta.iter().map(|c| poly_derivative(c, n, tau)));
        FlatSignal {
            p_e: [p(0), p(1), p(2), p(3)],
            psi: [0, 1, 2].map(|n| poly_derivative(&self.psi, n, tau)),
            eta: [e(0), e(1), e(2)],
        }
    }
}

/// Quintic with zero velocity and acceleration at both ends, over duration `d`.
pub fn quintic_rest_to_rest(from: f64, to: f64, d: f64) -> Vec<f64> {
    let delta = to - from;
    vec![from, 0.0, 0.0, 10.0 * delta / d.powi(3), -15.0 * delta / d.powi(4), 6.0 * delta / d.powi(5)]
}

/// `peak * 256 s^4 (1 - s)^4` with `s = tau / d`: zero with three derivatives at both ends.
pub fn bump(peak: f64, d: f64) -> Vec<f64> {
    // (1 - s)^4 = 1 - 4s + 6s^2 - 4s^3 + s^4
    let binom = [1.0, -4.0, 6.0, -4.0, 1.0];
    let mut c = vec![0.0; 9];
    for (i, b) in binom.iter().enumerate() {
        c[4 + i] = 256.0 * peak * b / d.powi(4 + i as i32);
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub segments: Vec<PolySegment>,
}

impl ReferenceSpec {
    pub fn k(&self) -> usize {
        self.segments.first().map_or(0, PolySegment::k)
    }

    pub fn start(&self) -> f64 {
        self.segments.first().map_or(0.0, |s| s.start)
    }

    pub fn end(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.end)
    }

    /// Contiguity, dimensions and smoothness at the joints.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.segments.is_empty() {
            return Err(Error::Config("reference needs at least one segment".into()));
        }
        for s in &self.segments {
            if !(s.end > s.start) {
                return Err(Error::Config(format!("segment [{}, {}] is empty", s.start, s.end)));
            }
            if s.k() != k {
                return Err(Error::Config("all segments need the same number of joints".into()));
            }
            let empty = s.p_e.iter().any(Vec::is_empty) || s.psi.is_empty() || s.eta.iter().any(Vec::is_empty);
            if empty {
                return Err(Error::Config("segment coefficient lists must be non-empty".into()));
            }
        }
        for pair in self.segments.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if (a.end - b.start).abs() > 1e-12 {
                return Err(Error::Config(format!("segments are not contiguous at {} / {}", a.end, b.start)));
            }
            let (l, r) = (a.eval(a.end), b.eval(b.start));
            let mismatch = joint_mismatch(&l, &r);
            if mismatch > JOINT_TOL {
                return Err(Error::Config(format!("reference not smooth at t = {}: mismatch {mismatch:e}", a.end)));
            }
        }
        Ok(())
    }

    /// Flat output and derivatives at `t`.
    pub fn at(&self, t: f64) -> Result<FlatSignal> {
        let (start, end) = (self.start(), self.end());
        if !(t >= start - 1e-12 && t <= end + 1e-12) {
            return Err(Error::OutOfRange { t, start, end });
        }
        let seg = self
            .segments
            .iter()
            .find(|s| t < s.end)
            .unwrap_or_else(|| self.segments.last().expect("validated non-empty"));
        Ok(seg.eval(t))
    }
}

/// Largest difference over `p_e` orders 0..=3 and `psi`, `eta` orders 0..=2.
pub fn joint_mismatch(a: &FlatSignal, b: &FlatSignal) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..4 {
        m = m.max((a.p_e[i] - b.p_e[i]).amax());
    }
    for i in 0..3 {
        m = m.max((a.psi[i] - b.psi[i]).abs());
        m = m.max((&a.eta[i] - &b.eta[i]).amax());
    }
    m
}

pub fn reference_trajectory(spec: &ReferenceSpec, t: f64) -> Result<FlatSignal> {
    spec.at(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_segment() -> ReferenceSpec {
        let d = 2.0;
        ReferenceSpec {
            segments: vec![
                PolySegment {
                    start: 0.0,
                    end: d,
                    p_e: [bump(1.5, d), vec![0.0], bump(-0.5, d)],
                    psi: quintic_rest_to_rest(0.0, 0.4, d),
                    eta: vec![vec![-1.0], vec![0.2]],
                },
                PolySegment {
                    start: d,
                    end: 2.0 * d,
                    p_e: [vec![0.0], bump(0.7, d), vec![0.0]],
                    psi: vec![0.4],
                    eta: vec![quintic_rest_to_rest(-1.0, 0.0, d), quintic_rest_to_rest(0.2, 0.9, d)],
                },
            ],
        }
    }

    #[test]
    fn constant_spec_has_zero_derivatives() {
        let spec = ReferenceSpec { segments: vec![PolySegment::hold(0.0, 1.0, Vector3::new(1.0, 2.0, 3.0), 0.5, &[0.1, 0.2])] };
        let s = spec.at(0.3).unwrap();
        assert_eq!(s.p_e[0], Vector3::new(1.0, 2.0, 3.0));
        assert!(s.p_e[1..].iter().all(|v| v.norm() == 0.0));
        assert_eq!(s.psi, [0.5, 0.0, 0.0]);
        assert!(s.eta[1].amax() == 0.0 && s.eta[2].amax() == 0.0);
    }

    #[test]
    fn quintic_endpoints() {
        let c = quintic_rest_to_rest(0.3, 1.1, 2.5);
        assert!((poly_derivative(&c, 0, 0.0) - 0.3).abs() < 1e-15);
        assert!((poly_derivative(&c, 0, 2.5) - 1.1).abs() < 1e-13);
        for n in 1..3 {
            assert!(poly_derivative(&c, n, 0.0).abs() < 1e-15);
            assert!(poly_derivative(&c, n, 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn bump_peak_and_flat_ends() {
        let c = bump(2.0, 5.0);
        assert!((poly_derivative(&c, 0, 2.5) - 2.0).abs() < 1e-12);
        for n in 0..4 {
            assert!(poly_derivative(&c, n, 0.0).abs() < 1e-15);
            assert!(poly_derivative(&c, n, 5.0).abs() < 1e-9, "order {n}");
        }
    }

    #[test]
    fn segments_join_smoothly() {
        two_segment().validate().unwrap();
        let mut bad = two_segment();
        bad.segments[1].psi = vec![0.5];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn derivative_channels_match_finite_differences() {
        let spec = two_segment();
        let h = 1e-5;
        for &t in &[0.3, 1.1, 1.9, 2.5, 3.7] {
            let (a, b, s) = (spec.at(t - h).unwrap(), spec.at(t + h).unwrap(), spec.at(t).unwrap());
            for i in 0..3 {
                assert!(((b.p_e[i] - a.p_e[i]) / (2.0 * h) - s.p_e[i + 1]).amax() < 1e-6);
            }
            for i in 0..2 {
                assert!(((b.psi[i] - a.psi[i]) / (2.0 * h) - s.psi[i + 1]).abs() < 1e-6);
                assert!(((&b.eta[i] - &a.eta[i]) / (2.0 * h) - &s.eta[i + 1]).amax() < 1e-6);
            }
        }
    }

    #[test]
    fn out_of_range_is_an_error() {
        assert!(matches!(two_segment().at(4.5), Err(Error::OutOfRange { .. })));
        assert!(two_segment().at(4.0).is_ok());
    }
}
