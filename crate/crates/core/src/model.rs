//! Planar pusher–box scene: geometry, signed distance to the pushed face,
//! contact kinematics, the line-contact spring–damper and ground friction.
//!
//! The box is pinned at the origin and rotates about `z`. Contact is only
//! resolved against the face whose outward normal is `-x` at `theta = 0`.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;

/// Standard gravity used for the ground normal load.
pub const GRAVITY: f64 = 9.81;

/// Pusher points closer than this are treated as coincident.
pub const DIRECTION_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParameter { key: String, reason: String },
    #[error("state has {found} pusher points but the contact model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("line-contact points coincide (separation {separation:e} m)")]
    DegenerateDirection { separation: f64 },
}

fn invalid(key: &str, reason: impl Into<String>) -> ModelError {
    ModelError::InvalidParameter {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Physical constants of the pusher–box scene (SI units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    /// Pusher–object friction coefficient.
    pub mu_p: f64,
    /// Object–surface friction coefficient.
    pub mu_s: f64,
    pub mass_box: f64,
    /// Box side length `a`.
    pub side_len: f64,
    /// Line pusher width, the nominal separation of the two line-contact points.
    pub pusher_sep: f64,
    pub pusher_radius: f64,
    /// Mass of each pusher point.
    pub pusher_mass: f64,
    /// Rotational inertia of the box about `z`.
    pub box_inertia: f64,
    /// Accept a `box_inertia` different from the uniform square plate value.
    #[serde(default)]
    pub custom_inertia: bool,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self::box_rotation()
    }
}

impl SystemParams {
    /// The simulation parameters of the box-rotation study.
    pub fn box_rotation() -> Self {
        let mass_box = 1.0;
        let side_len = 0.02;
        Self {
            mu_p: 0.5,
            mu_s: 1.0,
            mass_box,
            side_len,
            pusher_sep: 0.005,
            pusher_radius: 0.0025,
            pusher_mass: 0.1,
            box_inertia: plate_inertia(mass_box, side_len),
            custom_inertia: false,
        }
    }

    pub fn half_side(&self) -> f64 {
        0.5 * self.side_len
    }

    /// Weight of the box, the default ground normal load.
    pub fn box_weight(&self) -> f64 {
        self.mass_box * GRAVITY
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let finite = [
            ("mu_p", self.mu_p),
            ("mu_s", self.mu_s),
            ("mass_box", self.mass_box),
            ("side_len", self.side_len),
            ("pusher_sep", self.pusher_sep),
            ("pusher_radius", self.pusher_radius),
            ("pusher_mass", self.pusher_mass),
            ("box_inertia", self.box_inertia),
        ];
        for (key, v) in finite {
            if !v.is_finite() {
                return Err(invalid(key, "must be finite"));
            }
        }
        if self.mu_p < 0.0 {
            return Err(invalid("mu_p", "must be >= 0"));
        }
        if self.mu_s < 0.0 {
            return Err(invalid("mu_s", "must be >= 0"));
        }
        for (key, v) in [
            ("mass_box", self.mass_box),
            ("side_len", self.side_len),
            ("pusher_sep", self.pusher_sep),
            ("pusher_radius", self.pusher_radius),
            ("pusher_mass", self.pusher_mass),
            ("box_inertia", self.box_inertia),
        ] {
            if v <= 0.0 {
                return Err(invalid(key, "must be > 0"));
            }
        }
        let plate = plate_inertia(self.mass_box, self.side_len);
        if !self.custom_inertia && (self.box_inertia - plate).abs() > 1e-9 * plate {
            return Err(invalid(
                "box_inertia",
                format!("expected mass_box*side_len^2/6 = {plate:e} (set custom_inertia to override)"),
            ));
        }
        Ok(())
    }
}

/// Inertia of a uniform square plate of side `a` about its center.
pub fn plate_inertia(mass: f64, side: f64) -> f64 {
    mass * side * side / 6.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContactKind {
    Point,
    Fdlc,
}

impl ContactKind {
    pub fn name(self) -> &'static str {
        match self {
            ContactKind::Point => "point",
            ContactKind::Fdlc => "fdlc",
        }
    }
}

impl std::fmt::Display for ContactKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ContactKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "point" => Ok(ContactKind::Point),
            "fdlc" | "line" => Ok(ContactKind::Fdlc),
            other => Err(format!("unknown contact model `{other}` (expected point|fdlc)")),
        }
    }
}

/// Point contact (one pusher point) or force-distributed line contact (two
/// pusher points joined by a spring–damper).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactModel {
    pub kind: ContactKind,
    /// Spring stiffness `k` (N/m), line contact only.
    #[serde(default)]
    pub stiffness: f64,
    /// Damping `c` (N·s/m), line contact only.
    #[serde(default)]
    pub damping: f64,
    /// Spring rest length `L` (m), line contact only.
    #[serde(default)]
    pub rest_length: f64,
}

impl ContactModel {
    pub fn point() -> Self {
        Self {
            kind: ContactKind::Point,
            stiffness: 0.0,
            damping: 0.0,
            rest_length: 0.0,
        }
    }

    pub fn fdlc(stiffness: f64, damping: f64, rest_length: f64) -> Self {
        Self {
            kind: ContactKind::Fdlc,
            stiffness,
            damping,
            rest_length,
        }
    }

    /// Line contact with `k = 1000 N/m`, critical damping for the pusher
    /// mass and rest length equal to the pusher width.
    pub fn fdlc_default(params: &SystemParams) -> Self {
        let k = 1000.0;
        Self::fdlc(k, 2.0 * (k * params.pusher_mass).sqrt(), params.pusher_sep)
    }

    pub fn default_for(kind: ContactKind, params: &SystemParams) -> Self {
        match kind {
            ContactKind::Point => Self::point(),
            ContactKind::Fdlc => Self::fdlc_default(params),
        }
    }

    pub fn n_points(&self) -> usize {
        match self.kind {
            ContactKind::Point => 1,
            ContactKind::Fdlc => 2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.kind == ContactKind::Fdlc {
            if !(self.stiffness.is_finite() && self.stiffness > 0.0) {
                return Err(invalid("stiffness", "must be > 0 for line contact"));
            }
            if !(self.damping.is_finite() && self.damping >= 0.0) {
                return Err(invalid("damping", "must be >= 0 for line contact"));
            }
            if !(self.rest_length.is_finite() && self.rest_length > 0.0) {
                return Err(invalid("rest_length", "must be > 0 for line contact"));
            }
        }
        Ok(())
    }
}

/// Box orientation, box angular velocity and the pusher points.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub theta_box: f64,
    pub omega_box: f64,
    pub pusher_pos: Vec<Vec2>,
    pub pusher_vel: Vec<Vec2>,
}

impl State {
    pub fn at_rest(theta_box: f64, pusher_pos: Vec<Vec2>) -> Self {
        let n = pusher_pos.len();
        Self {
            theta_box,
            omega_box: 0.0,
            pusher_pos,
            pusher_vel: vec![Vec2::zeros(); n],
        }
    }

    pub fn n_points(&self) -> usize {
        self.pusher_pos.len()
    }

    /// Length of the flat state vector, `2 * (1 + 2 * n_points)`.
    pub fn dim(n_points: usize) -> usize {
        2 * (1 + 2 * n_points)
    }

    /// Flat layout: `[theta, p_1, .., p_N, omega, v_1, .., v_N]`, positions
    /// first so the leading block matches the positional state.
    pub fn to_vec(&self) -> Vec<f64> {
        let n = self.n_points();
        let mut x = Vec::with_capacity(Self::dim(n));
        x.push(self.theta_box);
        for p in &self.pusher_pos {
            x.extend_from_slice(&[p.x, p.y]);
        }
        x.push(self.omega_box);
        for v in &self.pusher_vel {
            x.extend_from_slice(&[v.x, v.y]);
        }
        x
    }

    pub fn from_slice(x: &[f64], n_points: usize) -> Result<Self, ModelError> {
        if x.len() != Self::dim(n_points) {
            return Err(ModelError::DimensionMismatch {
                expected: Self::dim(n_points),
                found: x.len(),
            });
        }
        let pos = (0..n_points)
            .map(|i| Vec2::new(x[1 + 2 * i], x[2 + 2 * i]))
            .collect();
        let vel = (0..n_points)
            .map(|i| Vec2::new(x[2 + 2 * n_points + 2 * i], x[3 + 2 * n_points + 2 * i]))
            .collect();
        Ok(Self {
            theta_box: x[0],
            omega_box: x[1 + 2 * n_points],
            pusher_pos: pos,
            pusher_vel: vel,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.theta_box.is_finite()
            && self.omega_box.is_finite()
            && self.pusher_pos.iter().all(|p| p.iter().all(|c| c.is_finite()))
            && self.pusher_vel.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }

    pub fn check(&self, model: &ContactModel) -> Result<(), ModelError> {
        let expected = model.n_points();
        if self.pusher_pos.len() != expected || self.pusher_vel.len() != expected {
            return Err(ModelError::DimensionMismatch {
                expected,
                found: self.pusher_pos.len().max(self.pusher_vel.len()),
            });
        }
        Ok(())
    }
}

/// Pusher forces, one planar vector per pusher point.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub forces: Vec<Vec2>,
}

impl Control {
    pub fn zeros(n_points: usize) -> Self {
        Self {
            forces: vec![Vec2::zeros(); n_points],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.forces.iter().flat_map(|f| [f.x, f.y]).collect()
    }

    pub fn from_slice(u: &[f64], n_points: usize) -> Result<Self, ModelError> {
        if u.len() != 2 * n_points {
            return Err(ModelError::DimensionMismatch {
                expected: 2 * n_points,
                found: u.len(),
            });
        }
        Ok(Self {
            forces: u.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactId {
    A,
    B,
    C,
}

impl ContactId {
    pub fn for_point(kind: ContactKind, index: usize) -> Self {
        match (kind, index) {
            (ContactKind::Point, _) => ContactId::A,
            (ContactKind::Fdlc, 0) => ContactId::B,
            (ContactKind::Fdlc, _) => ContactId::C,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactFrame {
    /// Projection of the pusher center onto the face plane, world frame.
    pub point: Vec2,
    /// Outward face normal.
    pub normal: Vec2,
    /// Normal rotated by +90 degrees.
    pub tangent: Vec2,
    /// Signed distance between pusher surface and face.
    pub gap: f64,
    pub contact_id: ContactId,
}

/// Outward normal of the pushed face at box angle `theta`.
#[inline]
pub fn face_normal(theta: f64) -> Vec2 {
    let (s, c) = theta.sin_cos();
    Vec2::new(-c, -s)
}

#[inline]
pub fn face_tangent(theta: f64) -> Vec2 {
    let (s, c) = theta.sin_cos();
    Vec2::new(s, -c)
}

/// Gap between a pusher circle centered at `p` and the pushed face.
#[inline]
pub fn gap(p: &Vec2, theta: f64, params: &SystemParams) -> f64 {
    face_normal(theta).dot(p) - params.half_side() - params.pusher_radius
}

pub fn signed_distance(
    state: &State,
    params: &SystemParams,
    model: &ContactModel,
) -> Vec<ContactFrame> {
    debug_assert_eq!(state.n_points(), model.n_points());
    let normal = face_normal(state.theta_box);
    let tangent = face_tangent(state.theta_box);
    state
        .pusher_pos
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let dist = normal.dot(p) - params.half_side();
            ContactFrame {
                point: p - dist * normal,
                normal,
                tangent,
                gap: dist - params.pusher_radius,
                contact_id: ContactId::for_point(model.kind, i),
            }
        })
        .collect()
}

/// Spring–damper pair between the two line-contact points.
///
/// `f_12` is the force point 1 exerts on point 2 and `f_21 = -f_12` acts on
/// point 1, so a stretched spring pulls the points together.
pub fn spring_damper_force(state: &State, model: &ContactModel) -> Result<(Vec2, Vec2), ModelError> {
    assert_eq!(model.kind, ContactKind::Fdlc, "spring force requires line contact");
    state.check(model)?;
    let r = state.pusher_pos[1] - state.pusher_pos[0];
    let d = r.norm();
    if d <= DIRECTION_EPS {
        return Err(ModelError::DegenerateDirection { separation: d });
    }
    let e = r / d;
    let dv = state.pusher_vel[1] - state.pusher_vel[0];
    let f12 = -(model.stiffness * (d - model.rest_length) + model.damping * dv.dot(&e)) * e;
    Ok((f12, -f12))
}

/// Ground friction acting on the box rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerFriction {
    /// Largest friction torque the ground can supply.
    pub max_torque: f64,
    /// Smooth approximation `-max_torque * omega / sqrt(omega^2 + eps^2)`.
    pub smoothed_torque: f64,
}

/// Smoothing width used for [`CornerFriction::smoothed_torque`].
pub const CORNER_FRICTION_SMOOTHING: f64 = 1e-3;

/// Friction of the four box corners, each carrying a quarter of the load and
/// resisting rotation at its lever arm.
pub fn corner_friction_torque(omega_box: f64, normal_load: f64, params: &SystemParams) -> CornerFriction {
    let h = params.half_side();
    let corners = [Vec2::new(h, h), Vec2::new(-h, h), Vec2::new(-h, -h), Vec2::new(h, -h)];
    let share = params.mu_s * normal_load.max(0.0) / corners.len() as f64;
    let max_torque: f64 = corners.iter().map(|c| share * c.norm()).sum();
    let eps = CORNER_FRICTION_SMOOTHING;
    CornerFriction {
        max_torque,
        smoothed_torque: -max_torque * omega_box / (omega_box * omega_box + eps * eps).sqrt(),
    }
}

/// Map from `(omega_box, pusher velocity)` to the relative normal and
/// tangential velocity at one contact, and its transpose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactJacobian {
    /// `[d v_n / d omega, d v_n / d v_x, d v_n / d v_y]`
    pub normal_row: [f64; 3],
    pub tangent_row: [f64; 3],
}

impl ContactJacobian {
    pub fn relative_velocity(&self, omega: f64, v: &Vec2) -> (f64, f64) {
        let dot = |row: &[f64; 3]| row[0] * omega + row[1] * v.x + row[2] * v.y;
        (dot(&self.normal_row), dot(&self.tangent_row))
    }

    /// Box torque and pusher force produced by a normal/tangential contact
    /// force acting on the pusher (the box receives the reaction).
    pub fn generalized_force(&self, f_n: f64, f_t: f64) -> (f64, Vec2) {
        let g = |j: usize| self.normal_row[j] * f_n + self.tangent_row[j] * f_t;
        (g(0), Vec2::new(g(1), g(2)))
    }
}

pub fn contact_jacobians(state: &State, frames: &[ContactFrame], _params: &SystemParams) -> Vec<ContactJacobian> {
    debug_assert_eq!(state.n_points(), frames.len());
    frames
        .iter()
        .map(|f| {
            // Relative velocity of the pusher w.r.t. the box material point at
            // the contact: v - omega x c.
            let c = f.point;
            ContactJacobian {
                normal_row: [f.tangent.dot(&c), f.normal.x, f.normal.y],
                tangent_row: [-f.normal.dot(&c), f.tangent.x, f.tangent.y],
            }
        })
        .collect()
}

/// 2D cross product `a x b`.
#[inline]
pub fn cross(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Rotate `v` by `angle` radians.
#[inline]
pub fn rotate(v: &Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn point_state(theta: f64, p: Vec2) -> State {
        State::at_rest(theta, vec![p])
    }

    #[test]
    fn gap_on_face_plane_is_minus_radius() {
        let params = SystemParams::box_rotation();
        let theta = 0.3;
        let on_plane = face_normal(theta) * params.half_side() + face_tangent(theta) * 0.004;
        let frames = signed_distance(&point_state(theta, on_plane), &params, &ContactModel::point());
        assert_relative_eq!(frames[0].gap, -params.pusher_radius, epsilon = 1e-15);
    }

    #[test]
    fn axis_aligned_gap() {
        let params = SystemParams {
            pusher_radius: 0.005,
            ..SystemParams::box_rotation()
        };
        let frames = signed_distance(&point_state(0.0, Vec2::new(-0.02, 0.0)), &params, &ContactModel::point());
        assert_relative_eq!(frames[0].gap, 0.005, epsilon = 1e-15);
        assert_eq!(frames[0].contact_id, ContactId::A);
        assert_relative_eq!(frames[0].point, Vec2::new(-0.01, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn rotated_gap_matches_body_frame_oracle() {
        let params = SystemParams::box_rotation();
        let theta = 30f64.to_radians();
        let mut seed = 7u64;
        for _ in 0..50 {
            let mut next = || {
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            };
            let p = Vec2::new(next() * 0.1, next() * 0.1);
            // oracle: express p in the box frame, distance to the plane x = -a/2
            let (s, c) = theta.sin_cos();
            let body_x = c * p.x + s * p.y;
            let expected = (-params.half_side() - body_x) - params.pusher_radius;
            let frames = signed_distance(&point_state(theta, p), &params, &ContactModel::point());
            assert_relative_eq!(frames[0].gap, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn spring_at_rest_length_is_silent() {
        let model = ContactModel::fdlc(1000.0, 20.0, 0.005);
        let mut s = State::at_rest(0.0, vec![Vec2::new(0.0, 0.0), Vec2::new(0.0, 0.005)]);
        // tangential relative motion only
        s.pusher_vel = vec![Vec2::zeros(), Vec2::new(0.3, 0.0)];
        let (f12, f21) = spring_damper_force(&s, &model).unwrap();
        assert_relative_eq!(f12, Vec2::zeros(), epsilon = 1e-12);
        assert_relative_eq!(f21, Vec2::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn stretched_spring_restores() {
        let model = ContactModel::fdlc(1000.0, 0.0, 0.005);
        let s = State::at_rest(0.0, vec![Vec2::new(0.0, 0.0), Vec2::new(0.007, 0.0)]);
        let (f12, f21) = spring_damper_force(&s, &model).unwrap();
        // scalar spring: extension 0.002 m, k = 1000 N/m, pulls point 2 back toward point 1
        let scalar = -1000.0 * (0.007 - 0.005);
        assert_relative_eq!(f12, Vec2::new(scalar, 0.0), epsilon = 1e-12);
        assert_relative_eq!(f21, Vec2::new(-scalar, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let model = ContactModel::fdlc(1000.0, 0.0, 0.005);
        let s = State::at_rest(0.0, vec![Vec2::new(0.01, 0.0), Vec2::new(0.01, 0.0)]);
        assert!(matches!(
            spring_damper_force(&s, &model),
            Err(ModelError::DegenerateDirection { .. })
        ));
    }

    #[test]
    fn corner_friction_values() {
        let params = SystemParams::box_rotation();
        let f = corner_friction_torque(0.0, GRAVITY, &params);
        // per-corner sum: 4 * mu * (W / 4) * (a * sqrt(2) / 2)
        let per_corner: f64 = (0..4).map(|_| 1.0 * (GRAVITY / 4.0) * (0.02 * 2f64.sqrt() / 2.0)).sum();
        assert_relative_eq!(f.max_torque, per_corner, epsilon = 1e-15);
        assert_relative_eq!(f.max_torque, 0.138734, epsilon = 1e-6);
        assert_eq!(f.smoothed_torque, 0.0);
        let frictionless = SystemParams { mu_s: 0.0, ..params.clone() };
        assert_eq!(corner_friction_torque(1.0, GRAVITY, &frictionless).max_torque, 0.0);
        assert_eq!(corner_friction_torque(1.0, 0.0, &params).max_torque, 0.0);
        assert!(corner_friction_torque(2.0, GRAVITY, &params).smoothed_torque < 0.0);
    }

    #[test]
    fn params_validation_names_the_key() {
        let bad = SystemParams { mu_p: -1.0, ..SystemParams::box_rotation() };
        match bad.validate() {
            Err(ModelError::InvalidParameter { key, .. }) => assert_eq!(key, "mu_p"),
            other => panic!("unexpected {other:?}"),
        }
        let odd = SystemParams { box_inertia: 1.0, ..SystemParams::box_rotation() };
        assert!(odd.validate().is_err());
        assert!(SystemParams { custom_inertia: true, ..odd }.validate().is_ok());
    }

    #[test]
    fn torque_arm_at_pivot_is_zero() {
        let params = SystemParams::box_rotation();
        let frame = ContactFrame {
            point: Vec2::zeros(),
            normal: face_normal(0.0),
            tangent: face_tangent(0.0),
            gap: 0.0,
            contact_id: ContactId::A,
        };
        let s = point_state(0.0, Vec2::zeros());
        let j = contact_jacobians(&s, &[frame], &params)[0];
        assert_eq!(j.normal_row[0], 0.0);
        assert_eq!(j.tangent_row[0], 0.0);
    }

    #[test]
    fn normal_force_torque_by_hand() {
        let params = SystemParams::box_rotation();
        let b = 0.004;
        let p = Vec2::new(-params.half_side() - params.pusher_radius, b);
        let s = point_state(0.0, p);
        let frames = signed_distance(&s, &params, &ContactModel::point());
        let j = contact_jacobians(&s, &frames, &params)[0];
        let f_n = 3.0;
        let (torque, force) = j.generalized_force(f_n, 0.0);
        // reaction on the box is +x at (-a/2, b): torque = (-a/2, b) x (f_n, 0) = -b f_n
        assert_relative_eq!(torque, -b * f_n, epsilon = 1e-15);
        assert_relative_eq!(torque, cross(&frames[0].point, &(-force)), epsilon = 1e-15);
        // finite difference of the contact-point velocity map: d(v_n)/d(omega)
        let eps = 1e-7;
        let gap_at = |th: f64| gap(&p, th, &params);
        let fd = (gap_at(eps) - gap_at(-eps)) / (2.0 * eps);
        assert_relative_eq!(j.normal_row[0], fd, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn frames_are_orthonormal(theta in -3.0f64..3.0, x in -0.1f64..0.1, y in -0.1f64..0.1) {
            let params = SystemParams::box_rotation();
            let f = signed_distance(&point_state(theta, Vec2::new(x, y)), &params, &ContactModel::point())[0];
            prop_assert!((f.normal.norm() - 1.0).abs() < 1e-12);
            prop_assert!((f.tangent.norm() - 1.0).abs() < 1e-12);
            prop_assert!(f.normal.dot(&f.tangent).abs() < 1e-12);
            prop_assert!((rotate(&f.normal, std::f64::consts::FRAC_PI_2) - f.tangent).norm() < 1e-12);
        }

        #[test]
        fn gap_is_rotation_consistent(alpha in -1.0f64..1.0, x in -0.05f64..0.0, y in -0.02f64..0.02) {
            let params = SystemParams::box_rotation();
            let model = ContactModel::fdlc_default(&params);
            let p = vec![Vec2::new(x, y), Vec2::new(x, y + 0.005)];
            let rotated: Vec<Vec2> = p.iter().map(|q| rotate(q, alpha)).collect();
            let g0 = signed_distance(&State::at_rest(0.0, p), &params, &model);
            let g1 = signed_distance(&State::at_rest(alpha, rotated), &params, &model);
            for (a, b) in g0.iter().zip(&g1) {
                prop_assert!((a.gap - b.gap).abs() < 1e-12);
            }
        }

        #[test]
        fn jacobian_transpose_power_balance(
            theta in -1.0f64..1.0, x in -0.05f64..0.0, y in -0.02f64..0.02,
            omega in -5.0f64..5.0, vx in -1.0f64..1.0, vy in -1.0f64..1.0,
            f_n in 0.0f64..10.0, f_t in -5.0f64..5.0,
        ) {
            let params = SystemParams::box_rotation();
            let s = point_state(theta, Vec2::new(x, y));
            let frames = signed_distance(&s, &params, &ContactModel::point());
            let j = contact_jacobians(&s, &frames, &params)[0];
            let v = Vec2::new(vx, vy);
            let (vn, vt) = j.relative_velocity(omega, &v);
            let (tau, f) = j.generalized_force(f_n, f_t);
            let lhs = vn * f_n + vt * f_t;
            let rhs = tau * omega + f.dot(&v);
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn spring_pair_laws(
            x1 in -0.05f64..0.05, y1 in -0.05f64..0.05, dx in -0.02f64..0.02, dy in -0.02f64..0.02,
            v1x in -1.0f64..1.0, v1y in -1.0f64..1.0, v2x in -1.0f64..1.0, v2y in -1.0f64..1.0,
            shift_x in -1.0f64..1.0, shift_y in -1.0f64..1.0, angle in -3.0f64..3.0,
        ) {
            prop_assume!((dx * dx + dy * dy).sqrt() > 1e-4);
            let model = ContactModel::fdlc(1000.0, 20.0, 0.005);
            let p1 = Vec2::new(x1, y1);
            let p2 = p1 + Vec2::new(dx, dy);
            let mut s = State::at_rest(0.0, vec![p1, p2]);
            s.pusher_vel = vec![Vec2::new(v1x, v1y), Vec2::new(v2x, v2y)];
            let (f12, f21) = spring_damper_force(&s, &model).unwrap();
            prop_assert_eq!(f12 + f21, Vec2::zeros());

            let shift = Vec2::new(shift_x, shift_y);
            let mut moved = s.clone();
            moved.pusher_pos = vec![p1 + shift, p2 + shift];
            let (g12, _) = spring_damper_force(&moved, &model).unwrap();
            prop_assert!((g12 - f12).norm() <= 1e-12 * (1.0 + f12.norm()));

            let mut turned = s.clone();
            turned.pusher_pos = s.pusher_pos.iter().map(|p| rotate(p, angle)).collect();
            turned.pusher_vel = s.pusher_vel.iter().map(|v| rotate(v, angle)).collect();
            let (r12, _) = spring_damper_force(&turned, &model).unwrap();
            prop_assert!((r12 - rotate(&f12, angle)).norm() <= 1e-12 * (1.0 + f12.norm()));
        }
    }
}
