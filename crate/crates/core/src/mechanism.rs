//! Kinematics and energetics of a multi-rotor base carrying a `k`-link revolute arm.
//!
//! The velocity stack is `x_dot = (s_dot_b, omega_b, eta_dot)`, all expressed in the
//! body frame `B`. The kinetic energy is `K = 1/2 x_dot^T M(eta) x_dot`, where `M` is
//! assembled from per-body Jacobians (base CoM at the body origin).

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{rot_x, rot_z, rotation_from_euler, skew, EulerAngles};

/// Step used for central differences of `M(eta)`.
pub const MASS_MATRIX_FD_STEP: f64 = 1e-6;

/// Standard Denavit-Hartenberg row: `Rz(theta0 + eta) Tz(d) Tx(a) Rx(alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

impl DhRow {
    /// Midpoint of the link body expressed in the link's own (distal) DH frame.
    pub fn midpoint_in_link_frame(&self) -> Vector3<f64> {
        let (sa, ca) = self.alpha.sin_cos();
        Vector3::new(-0.5 * self.a, -0.5 * self.d * sa, -0.5 * self.d * ca)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub dh: DhRow,
    pub mass: f64,
    /// CoM offset in the link frame `L_i`.
    pub com: Vector3<f64>,
    /// Inertia about the link CoM, in `L_i`.
    pub inertia: Matrix3<f64>,
}

impl Link {
    /// Slender rod along the DH `a` length, CoM at its midpoint.
    pub fn rod(dh: DhRow, mass: f64) -> Self {
        let length = (dh.a * dh.a + dh.d * dh.d).sqrt();
        let i = mass * length * length / 12.0;
        let axis = if length > 0.0 {
            let (sa, ca) = dh.alpha.sin_cos();
            Vector3::new(dh.a, dh.d * sa, dh.d * ca) / length
        } else {
            Vector3::x()
        };
        Self {
            dh,
            mass,
            com: dh.midpoint_in_link_frame(),
            inertia: i * (Matrix3::identity() - axis * axis.transpose()),
        }
    }
}

/// How `dM/deta` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialsMode {
    #[default]
    FiniteDifference,
    Analytic,
}

/// Physical description of an aerial manipulator.
#[derive(Debug, Clone, PartialEq)]
pub struct AMParams {
    pub base_mass: f64,
    pub base_inertia: Matrix3<f64>,
    /// Orientation of the arm's DH frame 0 relative to `B`.
    pub mount_rotation: Matrix3<f64>,
    /// Origin of the arm's DH frame 0 in `B`.
    pub mount_offset: Vector3<f64>,
    pub links: Vec<Link>,
    pub gravity: f64,
    pub partials: PartialsMode,
}

impl AMParams {
    /// Two-link planar arm moving in the `x_b - z_b` plane: base 2.7 kg,
    /// links 0.5 kg / 1.0 kg with lengths 0.25 m / 0.2 m.
    pub fn planar_two_link() -> Self {
        let links = vec![
            Link::rod(DhRow { a: 0.25, alpha: 0.0, d: 0.0, theta_offset: 0.0 }, 0.5),
            Link::rod(DhRow { a: 0.2, alpha: 0.0, d: 0.0, theta_offset: 0.0 }, 1.0),
        ];
        Self {
            base_mass: 2.7,
            base_inertia: Matrix3::from_diagonal(&Vector3::new(0.03, 0.03, 0.05)),
            mount_rotation: rot_x(FRAC_PI_2),
            mount_offset: Vector3::zeros(),
            links,
            gravity: 9.81,
            partials: PartialsMode::FiniteDifference,
        }
    }

    pub fn k(&self) -> usize {
        self.links.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.base_mass + self.links.iter().map(|l| l.mass).sum::<f64>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(self.base_mass > 0.0 && self.base_mass.is_finite()) {
            return bad(format!("base mass must be positive, got {}", self.base_mass));
        }
        if self.links.is_empty() {
            return bad("at least one link is required".into());
        }
        if !(self.gravity > 0.0 && self.gravity.is_finite()) {
            return bad(format!("gravity must be positive, got {}", self.gravity));
        }
        check_inertia("base inertia", &self.base_inertia)?;
        let orth = self.mount_rotation.transpose() * self.mount_rotation - Matrix3::identity();
        if orth.norm() > 1e-9 || (self.mount_rotation.determinant() - 1.0).abs() > 1e-9 {
            return bad("mount rotation is not a proper rotation".into());
        }
        for (i, link) in self.links.iter().enumerate() {
            if !(link.mass >= 0.0 && link.mass.is_finite()) {
                return bad(format!("link {i} mass must be non-negative, got {}", link.mass));
            }
            check_inertia("link inertia", &link.inertia)?;
            let dh = &link.dh;
            if ![dh.a, dh.alpha, dh.d, dh.theta_offset].iter().all(|v| v.is_finite())
                || !link.com.iter().all(|v| v.is_finite())
            {
                return bad(format!("link {i} has non-finite geometry"));
            }
        }
        Ok(())
    }

    pub fn from_config(cfg: &ParamsConfig) -> Result<Self> {
        let base_inertia = cfg.base.inertia.to_matrix();
        let mount_rotation = cfg
            .base
            .mount_rpy
            .map(|[r, p, y]| rotation_from_euler(EulerAngles::new(r, p, y)))
            .unwrap_or_else(Matrix3::identity);
        let mount_offset = cfg.base.mount_offset.map(Vector3::from).unwrap_or_else(Vector3::zeros);
        let links = cfg
            .links
            .iter()
            .map(|l| {
                let [a, alpha, d, theta_offset] = l.dh;
                let dh = DhRow { a, alpha, d, theta_offset };
                let mut link = Link::rod(dh, l.mass);
                if let Some(com) = l.com {
                    link.com = Vector3::from(com);
                }
                if let Some(inertia) = &l.inertia {
                    link.inertia = inertia.to_matrix();
                }
                link
            })
            .collect();
        let params = Self {
            base_mass: cfg.base.mass,
            base_inertia,
            mount_rotation,
            mount_offset,
            links,
            gravity: cfg.gravity,
            partials: cfg.partials.unwrap_or_default(),
        };
        params.validate()?;
        Ok(params)
    }

    /// Loads a TOML (or `.json`) parameter document.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ParamsConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        Self::from_config(&cfg)
    }
}

fn check_inertia(what: &str, m: &Matrix3<f64>) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) || (m - m.transpose()).norm() > 1e-9 * (1.0 + m.norm()) {
        return Err(Error::InvalidParams(format!("{what} must be finite and symmetric")));
    }
    let min = m.symmetric_eigenvalues().min();
    if min < -1e-12 * (1.0 + m.norm()) {
        return Err(Error::InvalidParams(format!("{what} is not positive semidefinite (min eigenvalue {min})")));
    }
    Ok(())
}

/// Inertia given either as a diagonal or as a full 3x3 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InertiaConfig {
    Diagonal([f64; 3]),
    Full([[f64; 3]; 3]),
}

impl InertiaConfig {
    pub fn to_matrix(&self) -> Matrix3<f64> {
        match self {
            InertiaConfig::Diagonal(d) => Matrix3::from_diagonal(&Vector3::from(*d)),
            InertiaConfig::Full(rows) => Matrix3::from_fn(|r, c| rows[r][c]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub mass: f64,
    pub inertia: InertiaConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mount_rpy: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mount_offset: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    /// `[a, alpha, d, theta0]`
    pub dh: [f64; 4],
    pub mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub com: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia: Option<InertiaConfig>,
}

/// Structured-text form of [`AMParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub base: BaseConfig,
    pub links: Vec<LinkConfig>,
    pub gravity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partials: Option<PartialsMode>,
}

/// Pose of one link, expressed in `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkFrame {
    /// Origin of the link's DH frame.
    pub origin: Vector3<f64>,
    /// Orientation of the link's DH frame.
    pub rotation: Matrix3<f64>,
    /// Link CoM.
    pub com: Vector3<f64>,
    /// Axis of the joint driving this link (z of the previous DH frame).
    pub joint_axis: Vector3<f64>,
    /// A point on that axis (origin of the previous DH frame).
    pub joint_origin: Vector3<f64>,
}

/// Composes the DH chain; frame `i` depends on `eta[0..=i]` only.
pub fn forward_kinematics(params: &AMParams, eta: &DVector<f64>) -> Vec<LinkFrame> {
    assert_eq!(eta.len(), params.k(), "joint vector length");
    let mut rotation = params.mount_rotation;
    let mut origin = params.mount_offset;
    let mut frames = Vec::with_capacity(params.k());
    for (link, &q) in params.links.iter().zip(eta.iter()) {
        let dh = &link.dh;
        let joint_axis = rotation.column(2).into_owned();
        let joint_origin = origin;
        let turn = rot_z(dh.theta_offset + q);
        origin += rotation * (turn * Vector3::new(dh.a, 0.0, 0.0) + Vector3::new(0.0, 0.0, dh.d));
        rotation = rotation * turn * rot_x(dh.alpha);
        frames.push(LinkFrame {
            origin,
            rotation,
            com: origin + rotation * link.com,
            joint_axis,
            joint_origin,
        });
    }
    frames
}

/// Per-link velocity Jacobians in `B`: CoM linear (`3 x k`) and angular (`3 x k`).
fn link_jacobians(frames: &[LinkFrame], i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = frames.len();
    let mut jc = DMatrix::zeros(3, k);
    let mut jw = DMatrix::zeros(3, k);
    for j in 0..=i {
        let axis = frames[j].joint_axis;
        let col = axis.cross(&(frames[i].com - frames[j].joint_origin));
        jc.fixed_view_mut::<3, 1>(0, j).copy_from(&col);
        jw.fixed_view_mut::<3, 1>(0, j).copy_from(&axis);
    }
    (jc, jw)
}

/// First mass moment of the arm in `B` and its joint Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct ManipCoM {
    pub delta: Vector3<f64>,
    /// `d delta / d eta`, `3 x k`.
    pub jacobian: DMatrix<f64>,
}

pub fn manipulator_com(params: &AMParams, eta: &DVector<f64>) -> ManipCoM {
    let frames = forward_kinematics(params, eta);
    manipulator_com_from_frames(params, &frames)
}

fn manipulator_com_from_frames(params: &AMParams, frames: &[LinkFrame]) -> ManipCoM {
    let mut delta = Vector3::zeros();
    let mut jacobian = DMatrix::zeros(3, params.k());
    for (i, link) in params.links.iter().enumerate() {
        delta += link.mass * frames[i].com;
        let (jc, _) = link_jacobians(frames, i);
        jacobian += link.mass * jc;
    }
    ManipCoM { delta, jacobian }
}

/// `(6+k) x (6+k)` mass matrix with named blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMatrix {
    pub full: DMatrix<f64>,
}

impl MassMatrix {
    pub fn k(&self) -> usize {
        self.full.nrows() - 6
    }
    pub fn m_p(&self) -> Matrix3<f64> {
        self.full.fixed_view::<3, 3>(0, 0).into_owned()
    }
    pub fn m_pw(&self) -> Matrix3<f64> {
        self.full.fixed_view::<3, 3>(0, 3).into_owned()
    }
    pub fn m_w(&self) -> Matrix3<f64> {
        self.full.fixed_view::<3, 3>(3, 3).into_owned()
    }
    pub fn m_pl(&self) -> DMatrix<f64> {
        self.full.view((0, 6), (3, self.k())).into_owned()
    }
    pub fn m_wl(&self) -> DMatrix<f64> {
        self.full.view((3, 6), (3, self.k())).into_owned()
    }
    pub fn m_l(&self) -> DMatrix<f64> {
        let k = self.k();
        self.full.view((6, 6), (k, k)).into_owned()
    }
    /// Group block `M_s` (6 x 6).
    pub fn m_s(&self) -> DMatrix<f64> {
        self.full.view((0, 0), (6, 6)).into_owned()
    }
    /// Coupling block `M_sl` (6 x k).
    pub fn m_sl(&self) -> DMatrix<f64> {
        self.full.view((0, 6), (6, self.k())).into_owned()
    }
}

/// Row map `A_i = [I, -S(c_i), J_ci]` from `x_dot` to the CoM velocity of link `i` in `B`.
fn linear_map(com: &Vector3<f64>, jc: &DMatrix<f64>) -> DMatrix<f64> {
    let k = jc.ncols();
    let mut a = DMatrix::zeros(3, 6 + k);
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(com)));
    a.view_mut((0, 6), (3, k)).copy_from(jc);
    a
}

/// Row map `B_i = [0, I, J_wi]` from `x_dot` to the angular velocity of link `i` in `B`.
fn angular_map(jw: &DMatrix<f64>) -> DMatrix<f64> {
    let k = jw.ncols();
    let mut b = DMatrix::zeros(3, 6 + k);
    b.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    b.view_mut((0, 6), (3, k)).copy_from(jw);
    b
}

pub fn mass_matrix(params: &AMParams, eta: &DVector<f64>) -> MassMatrix {
    let k = params.k();
    let n = 6 + k;
    let frames = forward_kinematics(params, eta);
    let mut full = DMatrix::zeros(n, n);
    for d in 0..3 {
        full[(d, d)] = params.base_mass;
    }
    full.fixed_view_mut::<3, 3>(3, 3).copy_from(&params.base_inertia);
    for (i, link) in params.links.iter().enumerate() {
        let (jc, jw) = link_jacobians(&frames, i);
        let a = linear_map(&frames[i].com, &jc);
        let b = angular_map(&jw);
        let r = &frames[i].rotation;
        let inertia_b = DMatrix::from_column_slice(3, 3, (r * link.inertia * r.transpose()).as_slice());
        full += link.mass * a.transpose() * &a + b.transpose() * inertia_b * &b;
    }
    // Exact symmetry.
    let full = (&full + full.transpose()) * 0.5;
    MassMatrix { full }
}

/// `dM/deta_j` for each joint, using the mode stored in `params`.
pub fn mass_matrix_partials(params: &AMParams, eta: &DVector<f64>) -> Vec<DMatrix<f64>> {
    match params.partials {
        PartialsMode::FiniteDifference => mass_matrix_partials_fd(params, eta, MASS_MATRIX_FD_STEP),
        PartialsMode::Analytic => mass_matrix_partials_analytic(params, eta),
    }
}

pub fn mass_matrix_partials_fd(params: &AMParams, eta: &DVector<f64>, step: f64) -> Vec<DMatrix<f64>> {
    (0..params.k())
        .map(|j| {
            let mut plus = eta.clone();
            let mut minus = eta.clone();
            plus[j] += step;
            minus[j] -= step;
            (mass_matrix(params, &plus).full - mass_matrix(params, &minus).full) / (2.0 * step)
        })
        .collect()
}

/// Closed-form `dM/deta_j` from derivatives of the joint screws.
pub fn mass_matrix_partials_analytic(params: &AMParams, eta: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let k = params.k();
    let n = 6 + k;
    let frames = forward_kinematics(params, eta);
    let mut partials = vec![DMatrix::zeros(n, n); k];
    for (i, link) in params.links.iter().enumerate() {
        let (jc, jw) = link_jacobians(&frames, i);
        let a = linear_map(&frames[i].com, &jc);
        let b = angular_map(&jw);
        let r = &frames[i].rotation;
        let inertia_b = r * link.inertia * r.transpose();
        for (j, partial) in partials.iter_mut().enumerate().take(i + 1) {
            let aj = frames[j].joint_axis;
            let dcom = aj.cross(&(frames[i].com - frames[j].joint_origin));
            // d J_ci[:, l] / d eta_j and d J_wi[:, l] / d eta_j
            let mut djc = DMatrix::zeros(3, k);
            let mut djw = DMatrix::zeros(3, k);
            for l in 0..=i {
                let al = frames[l].joint_axis;
                let col = if j < l {
                    aj.cross(&al.cross(&(frames[i].com - frames[l].joint_origin)))
                } else {
                    al.cross(&dcom)
                };
                djc.fixed_view_mut::<3, 1>(0, l).copy_from(&col);
                if j < l {
                    djw.fixed_view_mut::<3, 1>(0, l).copy_from(&aj.cross(&al));
                }
            }
            let mut da = DMatrix::zeros(3, n);
            da.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&dcom)));
            da.view_mut((0, 6), (3, k)).copy_from(&djc);
            let mut db = DMatrix::zeros(3, n);
            db.view_mut((0, 6), (3, k)).copy_from(&djw);
            let s = skew(&aj);
            let di = s * inertia_b - inertia_b * s;
            let ib = DMatrix::from_column_slice(3, 3, inertia_b.as_slice());
            let di = DMatrix::from_column_slice(3, 3, di.as_slice());
            let lin = da.transpose() * &a;
            let ang = db.transpose() * &ib * &b;
            *partial += link.mass * (&lin + lin.transpose()) + &ang + ang.transpose() + b.transpose() * di * &b;
        }
    }
    partials
}

/// `M_dot = sum_j dM/deta_j * eta_dot_j`.
pub fn mass_matrix_rate(partials: &[DMatrix<f64>], eta_dot: &DVector<f64>) -> DMatrix<f64> {
    let n = partials.first().map_or(0, |p| p.nrows());
    partials
        .iter()
        .zip(eta_dot.iter())
        .fold(DMatrix::zeros(n, n), |acc, (p, &r)| acc + p * r)
}

/// Christoffel-symbol Coriolis matrix over the `6+k` velocity coordinates.
///
/// `M` depends on `eta` only, so the only non-zero coordinate partials are the
/// `k` joint directions. `M_dot - 2C` is skew-symmetric and `C` is linear in `x_dot`.
pub fn coriolis_matrix(partials: &[DMatrix<f64>], x_dot: &DVector<f64>) -> DMatrix<f64> {
    let n = x_dot.len();
    let k = partials.len();
    assert_eq!(n, 6 + k, "velocity stack length");
    let eta_dot = x_dot.rows(6, k).into_owned();
    let mut c = mass_matrix_rate(partials, &eta_dot) * 0.5;
    for (m, dm) in partials.iter().enumerate() {
        let dm_x = dm * x_dot;
        // + 1/2 sum_i dM_{p,i}/dx_j x_dot_i for joint column j
        for p in 0..n {
            c[(p, 6 + m)] += 0.5 * dm_x[p];
        }
        // - 1/2 sum_i dM_{i,j}/dx_p x_dot_i for joint row p
        for j in 0..n {
            c[(6 + m, j)] -= 0.5 * dm_x[j];
        }
    }
    c
}

/// Convenience wrapper evaluating the partials from `params`.
pub fn coriolis_matrix_at(params: &AMParams, eta: &DVector<f64>, x_dot: &DVector<f64>) -> DMatrix<f64> {
    coriolis_matrix(&mass_matrix_partials(params, eta), x_dot)
}

/// Gravity wrench on the momenta and potential gradient on the joints.
#[derive(Debug, Clone, PartialEq)]
pub struct GravityTerms {
    /// Force along the linear momentum directions (N).
    pub tau_p: Vector3<f64>,
    /// Moment about the body origin (N m).
    pub tau_l: Vector3<f64>,
    /// `dV/deta` (N m).
    pub dv_deta: DVector<f64>,
}

pub const GAMMA_UNIT_TOL: f64 = 1e-6;

pub fn gravity_terms(params: &AMParams, eta: &DVector<f64>, gamma: &Vector3<f64>) -> Result<GravityTerms> {
    gravity_terms_from_com(params, &manipulator_com(params, eta), gamma)
}

pub fn gravity_terms_from_com(params: &AMParams, com: &ManipCoM, gamma: &Vector3<f64>) -> Result<GravityTerms> {
    let norm = gamma.norm();
    if !((norm - 1.0).abs() <= GAMMA_UNIT_TOL) {
        return Err(Error::NonUnitGravity { norm });
    }
    let g = params.gravity;
    Ok(GravityTerms {
        tau_p: -g * params.total_mass() * gamma,
        // -g * S(delta) * gamma: moment of the arm weight about O_b.
        tau_l: g * gamma.cross(&com.delta),
        dv_deta: g * com.jacobian.transpose() * gamma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Energies {
    pub kinetic: f64,
    pub potential: f64,
}

impl Energies {
    pub fn total(&self) -> f64 {
        self.kinetic + self.potential
    }
}

/// `K = 1/2 x_dot^T M x_dot`, `V = g (m_t <gamma, zeta> + <gamma, delta>)`.
pub fn energies(
    params: &AMParams,
    eta: &DVector<f64>,
    x_dot: &DVector<f64>,
    gamma: &Vector3<f64>,
    zeta: &Vector3<f64>,
) -> Energies {
    let m = mass_matrix(params, eta);
    let delta = manipulator_com(params, eta).delta;
    Energies {
        kinetic: 0.5 * x_dot.dot(&(&m.full * x_dot)),
        potential: params.gravity * (params.total_mass() * gamma.dot(zeta) + gamma.dot(&delta)),
    }
}
