//! Planar five-link biped: kinematics, constrained Lagrangian dynamics and
//! the plastic impact map.
//!
//! Generalized coordinates are `q = [x, y, q1, q2, q3, q4, q5]`: hip position,
//! stance/swing femur angles relative to the torso, stance/swing knee angles,
//! and the absolute torso angle. Absolute link angles are linear in `q`, so
//! every point on the robot is the hip plus a weighted sum of unit directions
//! `d(phi) = (-sin phi, -cos phi)`. Positive angles rotate clockwise, which
//! makes the stance leg angle grow as the hip passes over the stance foot.

use nalgebra::{SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec7 = SVector<f64, 7>;
pub type Vec4 = SVector<f64, 4>;
pub type Mat7 = SMatrix<f64, 7, 7>;
pub type Mat4 = SMatrix<f64, 4, 4>;
pub type Mat2x7 = SMatrix<f64, 2, 7>;
pub type Mat7x4 = SMatrix<f64, 7, 4>;
type Mat9 = SMatrix<f64, 9, 9>;
type Vec9 = SVector<f64, 9>;

pub const NQ: usize = 7;
pub const IX: usize = 0;
pub const IY: usize = 1;
pub const IQ1: usize = 2;
pub const IQ2: usize = 3;
pub const IQ3: usize = 4;
pub const IQ4: usize = 5;
pub const IQ5: usize = 6;

/// Largest swing-foot height accepted by [`impact_map`].
pub const GUARD_TOL: f64 = 1e-6;
/// Reciprocal condition below which the contact system is treated as singular.
pub const RCOND_MIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub mass: f64,
    pub length: f64,
    pub inertia: f64,
    /// Distance of the center of mass from the proximal joint.
    pub com: f64,
}

/// Physical identity of the robot. Masses and inertias are multiplied by
/// `scale` wherever they enter the dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamFile", into = "ParamFile")]
pub struct RobotParams {
    pub torso: LinkParams,
    pub femur: LinkParams,
    pub tibia: LinkParams,
    pub gravity: f64,
    pub scale: f64,
}

impl Default for RobotParams {
    /// RABBIT values as published by its designers.
    fn default() -> Self {
        Self {
            torso: LinkParams { mass: 12.0, length: 0.625, inertia: 1.33, com: 0.24 },
            femur: LinkParams { mass: 6.8, length: 0.4, inertia: 0.47, com: 0.11 },
            tibia: LinkParams { mass: 3.2, length: 0.4, inertia: 0.20, com: 0.24 },
            gravity: 9.81,
            scale: 1.0,
        }
    }
}

impl RobotParams {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("torso", &self.torso), ("femur", &self.femur), ("tibia", &self.tibia)] {
            let ok = [l.mass, l.length, l.inertia, l.com].iter().all(|v| v.is_finite() && *v > 0.0);
            if !ok {
                return Err(Error::Domain(format!("{name} parameters must be finite and positive")));
            }
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Domain(format!("scale must be positive, got {}", self.scale)));
        }
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            return Err(Error::Domain("gravity must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.scale * (self.torso.mass + 2.0 * (self.femur.mass + self.tibia.mass))
    }

    /// Hip height with both legs straight and vertical.
    pub fn leg_length(&self) -> f64 {
        self.femur.length + self.tibia.length
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("robot params serialize")
    }
}

/// Multiply all masses and inertias by `scale`, leaving geometry unchanged.
pub fn scale_params(params: &RobotParams, scale: f64) -> Result<RobotParams> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Domain(format!("scale must be positive, got {scale}")));
    }
    Ok(RobotParams { scale: params.scale * scale, ..*params })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct PerLink {
    torso: f64,
    femur: f64,
    tibia: f64,
}

/// On-disk layout: `mass.torso`, `length.femur`, ... plus `gravity` and `scale`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct ParamFile {
    mass: PerLink,
    length: PerLink,
    inertia: PerLink,
    com: PerLink,
    gravity: f64,
    #[serde(default = "one")]
    scale: f64,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<ParamFile> for RobotParams {
    type Error = Error;

    fn try_from(f: ParamFile) -> Result<Self> {
        let link = |pick: fn(&PerLink) -> f64| LinkParams {
            mass: pick(&f.mass),
            length: pick(&f.length),
            inertia: pick(&f.inertia),
            com: pick(&f.com),
        };
        let p = RobotParams {
            torso: link(|l| l.torso),
            femur: link(|l| l.femur),
            tibia: link(|l| l.tibia),
            gravity: f.gravity,
            scale: f.scale,
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<RobotParams> for ParamFile {
    fn from(p: RobotParams) -> Self {
        let per = |pick: fn(&LinkParams) -> f64| PerLink {
            torso: pick(&p.torso),
            femur: pick(&p.femur),
            tibia: pick(&p.tibia),
        };
        ParamFile {
            mass: per(|l| l.mass),
            length: per(|l| l.length),
            inertia: per(|l| l.inertia),
            com: per(|l| l.com),
            gravity: p.gravity,
            scale: p.scale,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub q: Vec7,
    pub dq: Vec7,
}

impl RobotState {
    pub fn new(q: Vec7, dq: Vec7) -> Self {
        Self { q, dq }
    }

    pub fn zeros() -> Self {
        Self { q: Vec7::zeros(), dq: Vec7::zeros() }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.dq.iter()).all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidState("non-finite coordinate".into()))
        }
    }

    /// Build a state from joint angles and rates with the stance foot pinned
    /// at the origin and at rest.
    pub fn with_stance_foot_at_origin(params: &RobotParams, angles: [f64; 5], rates: [f64; 5]) -> Self {
        let mut q = Vec7::zeros();
        let mut dq = Vec7::zeros();
        for i in 0..5 {
            q[IQ1 + i] = angles[i];
            dq[IQ1 + i] = rates[i];
        }
        let kin = Kin::new(&q);
        let foot = kin.position(&stance_foot_terms(params));
        q[IX] = -foot.x;
        q[IY] = -foot.y;
        // J = [I2 | J_ang]; J dq = 0 fixes the hip velocity.
        let j = kin.jacobian(&stance_foot_terms(params));
        let hip_v = -(j * dq);
        dq[IX] = hip_v.x;
        dq[IY] = hip_v.y;
        Self { q, dq }
    }

    pub fn to_vector(&self) -> SVector<f64, 14> {
        let mut x = SVector::<f64, 14>::zeros();
        x.fixed_rows_mut::<7>(0).copy_from(&self.q);
        x.fixed_rows_mut::<7>(7).copy_from(&self.dq);
        x
    }

    pub fn from_vector(x: &SVector<f64, 14>) -> Self {
        Self { q: x.fixed_rows::<7>(0).into_owned(), dq: x.fixed_rows::<7>(7).into_owned() }
    }
}

/// Swap stance and swing legs: `q1 <-> q2`, `q3 <-> q4`.
pub fn relabel(state: &RobotState) -> RobotState {
    let mut s = *state;
    s.q.swap_rows(IQ1, IQ2);
    s.q.swap_rows(IQ3, IQ4);
    s.dq.swap_rows(IQ1, IQ2);
    s.dq.swap_rows(IQ3, IQ4);
    s
}

// Absolute-angle selectors: torso, stance femur, stance tibia, swing femur, swing tibia.
const ANGLE_SEL: [[f64; 7]; 5] = [
    [0., 0., 0., 0., 0., 0., 1.],
    [0., 0., 1., 0., 0., 0., 1.],
    [0., 0., 1., 0., 1., 0., 1.],
    [0., 0., 0., 1., 0., 0., 1.],
    [0., 0., 0., 1., 0., 1., 1.],
];

/// A point on the robot: hip + sum of `weight * d(phi[link])`.
#[derive(Clone, Copy, Debug)]
struct PointTerms {
    terms: [(f64, usize); 2],
    len: usize,
}

impl PointTerms {
    fn one(w: f64, k: usize) -> Self {
        Self { terms: [(w, k), (0.0, 0)], len: 1 }
    }

    fn two(w0: f64, k0: usize, w1: f64, k1: usize) -> Self {
        Self { terms: [(w0, k0), (w1, k1)], len: 2 }
    }

    fn iter(&self) -> impl Iterator<Item = &(f64, usize)> {
        self.terms[..self.len].iter()
    }
}

fn stance_foot_terms(p: &RobotParams) -> PointTerms {
    PointTerms::two(p.femur.length, 1, p.tibia.length, 2)
}

fn swing_foot_terms(p: &RobotParams) -> PointTerms {
    PointTerms::two(p.femur.length, 3, p.tibia.length, 4)
}

struct Body {
    mass: f64,
    inertia: f64,
    angle: usize,
    com: PointTerms,
}

fn bodies(p: &RobotParams) -> [Body; 5] {
    let s = p.scale;
    let (t, f, b) = (&p.torso, &p.femur, &p.tibia);
    [
        // The torso points up, i.e. along -d(q5).
        Body { mass: s * t.mass, inertia: s * t.inertia, angle: 0, com: PointTerms::one(-t.com, 0) },
        Body { mass: s * f.mass, inertia: s * f.inertia, angle: 1, com: PointTerms::one(f.com, 1) },
        Body { mass: s * b.mass, inertia: s * b.inertia, angle: 2, com: PointTerms::two(f.length, 1, b.com, 2) },
        Body { mass: s * f.mass, inertia: s * f.inertia, angle: 3, com: PointTerms::one(f.com, 3) },
        Body { mass: s * b.mass, inertia: s * b.inertia, angle: 4, com: PointTerms::two(f.length, 3, b.com, 4) },
    ]
}

fn selector(k: usize) -> SMatrix<f64, 1, 7> {
    SMatrix::<f64, 1, 7>::from_row_slice(&ANGLE_SEL[k])
}

/// Trigonometry of the five absolute link angles at one configuration.
struct Kin {
    hip: Vector2<f64>,
    sin: [f64; 5],
    cos: [f64; 5],
}

impl Kin {
    fn new(q: &Vec7) -> Self {
        let mut sin = [0.0; 5];
        let mut cos = [0.0; 5];
        for k in 0..5 {
            let phi: f64 = (0..7).map(|i| ANGLE_SEL[k][i] * q[i]).sum();
            sin[k] = phi.sin();
            cos[k] = phi.cos();
        }
        Self { hip: Vector2::new(q[IX], q[IY]), sin, cos }
    }

    fn d(&self, k: usize) -> Vector2<f64> {
        Vector2::new(-self.sin[k], -self.cos[k])
    }

    fn d1(&self, k: usize) -> Vector2<f64> {
        Vector2::new(-self.cos[k], self.sin[k])
    }

    fn d2(&self, k: usize) -> Vector2<f64> {
        Vector2::new(self.sin[k], self.cos[k])
    }

    fn position(&self, p: &PointTerms) -> Vector2<f64> {
        p.iter().fold(self.hip, |acc, &(w, k)| acc + w * self.d(k))
    }

    fn jacobian(&self, p: &PointTerms) -> Mat2x7 {
        let mut j = Mat2x7::zeros();
        j[(0, IX)] = 1.0;
        j[(1, IY)] = 1.0;
        for &(w, k) in p.iter() {
            j += (w * self.d1(k)) * selector(k);
        }
        j
    }

    /// Partial derivative of the Jacobian with respect to `q[i]`.
    fn jacobian_partial(&self, p: &PointTerms, i: usize) -> Mat2x7 {
        let mut dj = Mat2x7::zeros();
        for &(w, k) in p.iter() {
            let a = ANGLE_SEL[k][i];
            if a != 0.0 {
                dj += (w * a * self.d2(k)) * selector(k);
            }
        }
        dj
    }

    fn jacobian_dot(&self, p: &PointTerms, dq: &Vec7) -> Mat2x7 {
        let mut jd = Mat2x7::zeros();
        for &(w, k) in p.iter() {
            let rate = (selector(k) * dq)[0];
            jd += (w * rate * self.d2(k)) * selector(k);
        }
        jd
    }
}

/// Terms of the manipulator equation `D q'' + C q' + G = B u + J^T lambda`.
#[derive(Clone, Debug)]
pub struct DynamicsTerms {
    pub d: Mat7,
    pub c: Mat7,
    pub g: Vec7,
    pub b: Mat7x4,
    pub j: Mat2x7,
    pub jdot: Mat2x7,
}

pub fn torque_map() -> Mat7x4 {
    let mut b = Mat7x4::zeros();
    for i in 0..4 {
        b[(IQ1 + i, i)] = 1.0;
    }
    b
}

pub fn mass_matrix(params: &RobotParams, q: &Vec7) -> Mat7 {
    let kin = Kin::new(q);
    let mut d = Mat7::zeros();
    for body in bodies(params) {
        let j = kin.jacobian(&body.com);
        let a = selector(body.angle);
        d += body.mass * j.transpose() * j + body.inertia * a.transpose() * a;
    }
    d
}

/// `dD/dq_i` for every coordinate (entries for x and y are zero).
fn mass_matrix_partials(params: &RobotParams, kin: &Kin) -> [Mat7; 7] {
    let mut out = [Mat7::zeros(); 7];
    for body in bodies(params) {
        let j = kin.jacobian(&body.com);
        for (i, dd) in out.iter_mut().enumerate().skip(IQ1) {
            let dj = kin.jacobian_partial(&body.com, i);
            let m = dj.transpose() * j;
            *dd += body.mass * (m + m.transpose());
        }
    }
    out
}

pub fn potential_energy(params: &RobotParams, q: &Vec7) -> f64 {
    let kin = Kin::new(q);
    bodies(params).iter().map(|b| b.mass * params.gravity * kin.position(&b.com).y).sum()
}

pub fn kinetic_energy(params: &RobotParams, state: &RobotState) -> f64 {
    0.5 * state.dq.dot(&(mass_matrix(params, &state.q) * state.dq))
}

pub fn total_energy(params: &RobotParams, state: &RobotState) -> f64 {
    kinetic_energy(params, state) + potential_energy(params, &state.q)
}

pub fn dynamics_terms(params: &RobotParams, state: &RobotState) -> Result<DynamicsTerms> {
    state.validate()?;
    let kin = Kin::new(&state.q);
    let mut d = Mat7::zeros();
    let mut g = Vec7::zeros();
    for body in bodies(params) {
        let j = kin.jacobian(&body.com);
        let a = selector(body.angle);
        d += body.mass * j.transpose() * j + body.inertia * a.transpose() * a;
        g += body.mass * params.gravity * j.row(1).transpose();
    }
    let dd = mass_matrix_partials(params, &kin);
    // Christoffel symbols of the first kind:
    // C[k][j] = sum_i 1/2 (dD_kj/dq_i + dD_ki/dq_j - dD_ij/dq_k) dq_i
    let dq = &state.dq;
    let mut c = Mat7::zeros();
    for k in 0..NQ {
        for jj in 0..NQ {
            let mut acc = 0.0;
            for i in 0..NQ {
                let gamma = dd[i][(k, jj)] + dd[jj][(k, i)] - dd[k][(i, jj)];
                acc += gamma * dq[i];
            }
            c[(k, jj)] = 0.5 * acc;
        }
    }
    let foot = stance_foot_terms(params);
    Ok(DynamicsTerms {
        d,
        c,
        g,
        b: torque_map(),
        j: kin.jacobian(&foot),
        jdot: kin.jacobian_dot(&foot, dq),
    })
}

/// The contact system `[D, -J^T; J, 0]` factored at one state. Accelerations
/// are affine in the torque, so one factorization serves every `u`.
#[derive(Clone, Debug)]
pub struct ContactDynamics {
    pub terms: DynamicsTerms,
    kkt_inv: Mat9,
    dq: Vec7,
    pub rcond: f64,
}

impl ContactDynamics {
    pub fn new(params: &RobotParams, state: &RobotState) -> Result<Self> {
        let terms = dynamics_terms(params, state)?;
        let mut k = Mat9::zeros();
        k.fixed_view_mut::<7, 7>(0, 0).copy_from(&terms.d);
        k.fixed_view_mut::<7, 2>(0, 7).copy_from(&(-terms.j.transpose()));
        k.fixed_view_mut::<2, 7>(7, 0).copy_from(&terms.j);
        let kkt_inv = k.lu().try_inverse().ok_or(Error::Singular { rcond: 0.0 })?;
        let rcond = 1.0 / (norm1(&k) * norm1(&kkt_inv));
        if !(rcond >= RCOND_MIN) {
            return Err(Error::Singular { rcond });
        }
        Ok(Self { terms, kkt_inv, dq: state.dq, rcond })
    }

    fn solve(&self, u: &Vec4) -> Vec9 {
        let t = &self.terms;
        let mut rhs = Vec9::zeros();
        rhs.fixed_rows_mut::<7>(0).copy_from(&(t.b * u - t.c * self.dq - t.g));
        rhs.fixed_rows_mut::<2>(7).copy_from(&(-t.jdot * self.dq));
        self.kkt_inv * rhs
    }

    /// `(q'', lambda)` for torque `u`.
    pub fn accel(&self, u: &Vec4) -> (Vec7, Vector2<f64>) {
        let sol = self.solve(u);
        (sol.fixed_rows::<7>(0).into_owned(), sol.fixed_rows::<2>(7).into_owned())
    }

    /// Linear map from torque to generalized acceleration.
    pub fn accel_per_torque(&self) -> Mat7x4 {
        self.kkt_inv.fixed_view::<7, 7>(0, 0) * self.terms.b
    }
}

fn norm1<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> f64 {
    m.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max)
}

pub fn constrained_accel(params: &RobotParams, state: &RobotState, u: &Vec4) -> Result<(Vec7, Vector2<f64>)> {
    Ok(ContactDynamics::new(params, state)?.accel(u))
}

/// Accelerations with no ground contact at all.
pub fn free_accel(params: &RobotParams, state: &RobotState, u: &Vec4) -> Result<Vec7> {
    let t = dynamics_terms(params, state)?;
    let rhs = t.b * u - t.c * state.dq - t.g;
    t.d.cholesky()
        .map(|ch| ch.solve(&rhs))
        .ok_or_else(|| Error::InvalidState("mass matrix not positive definite".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Kinematics {
    pub stance_foot: Vector2<f64>,
    pub swing_foot: Vector2<f64>,
    pub stance_knee: Vector2<f64>,
    pub swing_knee: Vector2<f64>,
    pub hip: Vector2<f64>,
    pub torso_top: Vector2<f64>,
    pub com: Vector2<f64>,
}

pub fn forward_kinematics(params: &RobotParams, q: &Vec7) -> Kinematics {
    let kin = Kin::new(q);
    let bs = bodies(params);
    let mass: f64 = bs.iter().map(|b| b.mass).sum();
    let com = bs.iter().fold(Vector2::zeros(), |acc, b| acc + b.mass * kin.position(&b.com)) / mass;
    Kinematics {
        stance_foot: kin.position(&stance_foot_terms(params)),
        swing_foot: kin.position(&swing_foot_terms(params)),
        stance_knee: kin.position(&PointTerms::one(params.femur.length, 1)),
        swing_knee: kin.position(&PointTerms::one(params.femur.length, 3)),
        hip: kin.hip,
        torso_top: kin.position(&PointTerms::one(-params.torso.length, 0)),
        com,
    }
}

/// Angular momentum about `point`, counter-clockwise positive.
pub fn angular_momentum(params: &RobotParams, state: &RobotState, point: &Vector2<f64>) -> f64 {
    let kin = Kin::new(&state.q);
    bodies(params)
        .iter()
        .map(|b| {
            let r = kin.position(&b.com) - point;
            let v = kin.jacobian(&b.com) * state.dq;
            // Link angles are clockwise positive.
            let omega = -(selector(b.angle) * state.dq)[0];
            b.mass * (r.x * v.y - r.y * v.x) + b.inertia * omega
        })
        .sum()
}

pub fn stance_foot_jacobian(params: &RobotParams, q: &Vec7) -> Mat2x7 {
    Kin::new(q).jacobian(&stance_foot_terms(params))
}

pub fn swing_foot_jacobian(params: &RobotParams, q: &Vec7) -> Mat2x7 {
    Kin::new(q).jacobian(&swing_foot_terms(params))
}

pub fn swing_foot_velocity(params: &RobotParams, state: &RobotState) -> Vector2<f64> {
    swing_foot_jacobian(params, &state.q) * state.dq
}

/// Swing-foot height above the ground.
pub fn guard_value(params: &RobotParams, state: &RobotState) -> f64 {
    Kin::new(&state.q).position(&swing_foot_terms(params)).y
}

/// Result of a foot strike.
#[derive(Clone, Copy, Debug)]
pub struct ImpactOutcome {
    pub state: RobotState,
    /// Impulse delivered at the striking foot, before relabeling.
    pub impulse: Vector2<f64>,
    /// Swing-foot position at the strike, in the pre-impact frame.
    pub strike_point: Vector2<f64>,
}

pub fn impact(params: &RobotParams, pre: &RobotState) -> Result<ImpactOutcome> {
    pre.validate()?;
    let kin = Kin::new(&pre.q);
    let sw = swing_foot_terms(params);
    let foot = kin.position(&sw);
    let j_sw = kin.jacobian(&sw);
    let foot_v = j_sw * pre.dq;
    if foot.y.abs() > GUARD_TOL {
        return Err(Error::Precondition(format!("swing foot height {:.3e} m", foot.y)));
    }
    if foot_v.y >= 0.0 {
        return Err(Error::Precondition(format!("swing foot not descending (vy = {:.3e})", foot_v.y)));
    }
    let d = mass_matrix(params, &pre.q);
    let mut k = Mat9::zeros();
    k.fixed_view_mut::<7, 7>(0, 0).copy_from(&d);
    k.fixed_view_mut::<7, 2>(0, 7).copy_from(&(-j_sw.transpose()));
    k.fixed_view_mut::<2, 7>(7, 0).copy_from(&j_sw);
    let mut rhs = Vec9::zeros();
    rhs.fixed_rows_mut::<7>(0).copy_from(&(d * pre.dq));
    let lu = k.lu();
    let sol = lu.solve(&rhs).ok_or(Error::Singular { rcond: 0.0 })?;
    let post = RobotState { q: pre.q, dq: sol.fixed_rows::<7>(0).into_owned() };
    let mut state = relabel(&post);
    // Re-anchor the world frame at the new stance foot.
    state.q[IX] -= foot.x;
    state.q[IY] -= foot.y;
    Ok(ImpactOutcome { state, impulse: sol.fixed_rows::<2>(7).into_owned(), strike_point: foot })
}

/// Plastic foot strike followed by leg relabeling. The returned state is
/// expressed in a frame whose origin is the new stance foot.
pub fn impact_map(params: &RobotParams, pre: &RobotState) -> Result<RobotState> {
    impact(params, pre).map(|o| o.state)
}
