//! The five parameterized motion primitives and their kinematic execution.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::env::{
    is_grasped, point_in_polygon, polygon_chord, reset_gripper, settle, settle_in, Aabb,
    BinGeometry, EnvState, Grasp, GripperPose, Observation,
};
use crate::error::{Error, Result};
use crate::geometry::{plane_normal, Label, NeighborIndex, Point3, RigidTransform};

/// Largest motion-parameter vector of any primitive.
pub const MAX_PARAMS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PrimitiveType {
    Poke,
    Grasp,
    MoveTo,
    MoveDelta,
    OpenGripper,
}

impl PrimitiveType {
    /// Fixed order used for action indexing.
    pub const ALL: [PrimitiveType; 5] = [
        PrimitiveType::Poke,
        PrimitiveType::Grasp,
        PrimitiveType::MoveTo,
        PrimitiveType::MoveDelta,
        PrimitiveType::OpenGripper,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Option<Self> {
        Self::ALL.get(k).copied()
    }

    pub fn param_dim(self) -> usize {
        match self {
            PrimitiveType::Grasp => 2,
            PrimitiveType::OpenGripper => 0,
            _ => 5,
        }
    }

    /// Point segment the location must come from, if any.
    pub fn domain(self) -> Option<Label> {
        match self {
            PrimitiveType::Poke | PrimitiveType::Grasp => Some(Label::Object),
            PrimitiveType::MoveTo | PrimitiveType::MoveDelta => Some(Label::Background),
            PrimitiveType::OpenGripper => None,
        }
    }

    /// Whether the primitive may run given the grasp status.
    pub fn allowed(self, grasped: bool) -> bool {
        match self {
            PrimitiveType::Poke | PrimitiveType::Grasp => !grasped,
            PrimitiveType::MoveTo | PrimitiveType::MoveDelta => grasped,
            PrimitiveType::OpenGripper => true,
        }
    }

    /// Location and grasp status together.
    pub fn valid_at(self, label: Label, grasped: bool) -> bool {
        self.allowed(grasped) && self.domain().is_none_or(|d| d == label)
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveType::Poke => "poke",
            PrimitiveType::Grasp => "grasp",
            PrimitiveType::MoveTo => "move-to",
            PrimitiveType::MoveDelta => "move-delta",
            PrimitiveType::OpenGripper => "open-gripper",
        }
    }
}

impl fmt::Display for PrimitiveType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown primitive {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveConstants {
    /// Poke pre-contact offset along the surface normal.
    pub pre_contact: f64,
    /// Height above the grasp point where the approach starts.
    pub approach_height: f64,
    /// Lift after a successful grasp.
    pub lift_height: f64,
    /// Meters per unit of translation parameter (Poke, MoveDelta).
    pub delta_scale: f64,
    /// Yaw change per unit of push torque (rad per m²).
    pub rotation_gain: f64,
    pub max_aperture: f64,
    /// A poke farther than this from the surface touches nothing.
    pub contact_tolerance: f64,
    /// Neighbors used to estimate the poke normal.
    pub normal_neighbors: usize,
    /// Whether MoveTo and MoveDelta apply the decoded yaw.
    pub rotate_on_move: bool,
}

impl Default for PrimitiveConstants {
    fn default() -> Self {
        Self {
            pre_contact: 0.04,
            approach_height: 0.10,
            lift_height: 0.15,
            delta_scale: 0.06,
            rotation_gain: 100.0,
            max_aperture: 0.08,
            contact_tolerance: 0.02,
            normal_neighbors: 10,
            rotate_on_move: true,
        }
    }
}

impl PrimitiveConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.pre_contact,
            self.approach_height,
            self.lift_height,
            self.delta_scale,
            self.max_aperture,
            self.contact_tolerance,
        ];
        if positive.iter().any(|v| !(*v > 0.0))
            || self.rotation_gain < 0.0
            || self.normal_neighbors < 3
        {
            return Err(Error::InvalidArgument(
                "primitive constants must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveAction {
    pub primitive: PrimitiveType,
    pub location: Point3,
    /// Observation point the location was selected from; `None` for
    /// regressed locations.
    pub location_index: Option<usize>,
    pub params: Vec<f64>,
}

impl PrimitiveAction {
    /// Action grounded on observation point `index`.
    pub fn at_point(
        primitive: PrimitiveType,
        obs: &Observation,
        index: usize,
        params: &[f64],
    ) -> Self {
        Self {
            primitive,
            location: obs.point(index),
            location_index: Some(index),
            params: params[..primitive.param_dim()].to_vec(),
        }
    }

    pub fn translation(&self) -> Vector3<f64> {
        if self.params.len() >= 3 {
            Vector3::new(self.params[0], self.params[1], self.params[2])
        } else {
            Vector3::zeros()
        }
    }

    pub fn yaw(&self) -> f64 {
        let n = self.params.len();
        if n >= 2 {
            decode_orientation(self.params[n - 2], self.params[n - 1])
        } else {
            0.0
        }
    }
}

/// Named point of the low-level motion, for traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub name: String,
    pub position: [f64; 3],
}

fn waypoint(name: &str, p: &Point3) -> Waypoint {
    Waypoint {
        name: name.to_string(),
        position: [p.x, p.y, p.z],
    }
}

/// Gripper yaw from the two orientation parameters; `(0, 0)` maps to 0.
pub fn decode_orientation(theta_x: f64, theta_y: f64) -> f64 {
    if theta_x == 0.0 && theta_y == 0.0 {
        return 0.0;
    }
    let a = theta_x.atan2(theta_y);
    // atan2 returns -π for (-0, -y); fold into (-π, π]
    if a <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        a
    }
}

pub fn admissible(primitive: PrimitiveType, state: &EnvState, bins: &BinGeometry) -> bool {
    primitive.allowed(is_grasped(state, bins))
}

fn check_action(action: &PrimitiveAction, obs: &Observation) -> Result<()> {
    let dim = action.primitive.param_dim();
    if action.params.len() != dim {
        return Err(Error::ShapeMismatch(format!(
            "{} takes {dim} parameters, got {}",
            action.primitive,
            action.params.len()
        )));
    }
    if action
        .params
        .iter()
        .any(|v| !v.is_finite() || v.abs() > 1.0)
    {
        return Err(Error::InvalidArgument(
            "motion parameters must lie in [-1, 1]".into(),
        ));
    }
    if !action.location.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("location".into()));
    }
    if let Some(i) = action.location_index {
        if i >= obs.len() || (obs.point(i) - action.location).norm() > 1e-9 {
            return Err(Error::InvalidGrounding);
        }
        if let Some(domain) = action.primitive.domain() {
            if obs.label(i) != domain {
                return Err(Error::InvalidGrounding);
            }
        }
    }
    Ok(())
}

/// Runs one primitive. Returns the next state and the motion waypoints.
pub fn execute(
    state: &EnvState,
    action: &PrimitiveAction,
    obs: &Observation,
    constants: &PrimitiveConstants,
    bins: &BinGeometry,
) -> Result<(EnvState, Vec<Waypoint>)> {
    if !admissible(action.primitive, state, bins) {
        return Err(Error::Inadmissible);
    }
    check_action(action, obs)?;
    match action.primitive {
        PrimitiveType::Poke => Ok(poke(state, action, obs, constants, bins)),
        PrimitiveType::Grasp => Ok(grasp(state, action, constants, bins)),
        PrimitiveType::MoveTo => {
            let target = action.location + action.translation() * state.shape.max_dimension();
            Ok(move_gripper(
                state,
                target,
                action.yaw(),
                constants,
                bins,
                "target",
            ))
        }
        PrimitiveType::MoveDelta => {
            let target = state.gripper.position + action.translation() * constants.delta_scale;
            Ok(move_gripper(
                state,
                target,
                action.yaw(),
                constants,
                bins,
                "target",
            ))
        }
        PrimitiveType::OpenGripper => {
            let mut next = state.clone();
            next.grasp = None;
            let next = settle(&next, bins);
            let at = next.gripper.position;
            Ok((next, vec![waypoint("release", &at)]))
        }
    }
}

/// Surface normal at `loc` estimated from the observed object points,
/// pointing away from their centroid.
pub fn estimate_contact_normal(obs: &Observation, loc: &Point3, k: usize) -> Vector3<f64> {
    let object: Vec<Point3> = (0..obs.len())
        .filter(|&i| obs.label(i) == Label::Object)
        .map(|i| obs.point(i))
        .collect();
    let fallback = Vector3::z();
    if object.len() < 3 {
        return fallback;
    }
    let index = NeighborIndex::new(&object);
    let near: Vec<Point3> = index
        .k_nearest(loc, k)
        .into_iter()
        .map(|(i, _)| object[i])
        .collect();
    let Some(n) = plane_normal(&near) else {
        return fallback;
    };
    let centroid = object.iter().sum::<Point3>() / object.len() as f64;
    if n.dot(&(loc - centroid)) < 0.0 {
        -n
    } else {
        n
    }
}

fn poke(
    state: &EnvState,
    action: &PrimitiveAction,
    obs: &Observation,
    c: &PrimitiveConstants,
    bins: &BinGeometry,
) -> (EnvState, Vec<Waypoint>) {
    let loc = action.location;
    let normal = estimate_contact_normal(obs, &loc, c.normal_neighbors);
    let pre = loc + normal * c.pre_contact;
    let delta = action.translation() * c.delta_scale;
    let shape = &state.shape;
    let local = state.object.inverse().apply(&loc);
    let contact_local = shape.closest_surface_point(&local).unwrap_or(local);
    let contact = state.object.apply(&contact_local);
    let reset = reset_gripper(bins);
    let waypoints = vec![
        waypoint("pre_contact", &pre),
        waypoint("contact", &loc),
        waypoint("push_end", &(loc + delta)),
        waypoint("reset", &reset.position),
    ];
    let mut next = state.clone();
    next.gripper = reset;
    if (contact - loc).norm() > c.contact_tolerance {
        return (next, waypoints);
    }
    let bin = bins.nearest_bin(&state.object.translation.xy());
    let faces = shape.faces();
    let face = (0..faces.len())
        .min_by(|&a, &b| {
            let da = (faces[a].normal.dot(&contact_local) - faces[a].offset).abs();
            let db = (faces[b].normal.dot(&contact_local) - faces[b].offset).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(0);
    let n = state.object.apply_vector(&faces[face].normal);
    let push_h = Vector2::new(delta.x, delta.y);
    let n_h = Vector2::new(n.x, n.y);
    let center = state.object.translation;
    let side = n.z.abs() < 0.5;

    if side && delta.z < 0.0 && delta.z.abs() > 2.0 * push_h.norm() && contact.z > center.z {
        // tip over the bottom edge on the contact side
        let dir = Vector3::new(n_h.x, n_h.y, 0.0).normalize();
        let reach = state
            .world_vertices()
            .iter()
            .map(|v| (v - center).dot(&dir))
            .fold(f64::NEG_INFINITY, f64::max);
        let pivot = Vector3::new(center.x, center.y, bins.floor_z) + dir * reach;
        let tip = RigidTransform::from_axis_angle(
            &dir.cross(&-Vector3::z()),
            std::f64::consts::FRAC_PI_2,
        );
        next.object = RigidTransform::about_point(tip.rotation, &pivot).compose(&state.object);
        return (settle_in(&next, bins, bin), waypoints);
    }
    if side && push_h.dot(&n_h) < 0.0 {
        let r = contact.xy() - center.xy();
        let torque = r.x * push_h.y - r.y * push_h.x;
        let spin = RigidTransform::about_point(
            RigidTransform::from_yaw(c.rotation_gain * torque).rotation,
            &center,
        );
        let mut moved = spin.compose(&state.object);
        moved.translation += Vector3::new(push_h.x, push_h.y, 0.0);
        next.object = moved;
        return (settle_in(&next, bins, bin), waypoints);
    }
    (next, waypoints)
}

fn grasp(
    state: &EnvState,
    action: &PrimitiveAction,
    c: &PrimitiveConstants,
    bins: &BinGeometry,
) -> (EnvState, Vec<Waypoint>) {
    let loc = action.location;
    let yaw = action.yaw();
    let above = loc + Vector3::z() * c.approach_height;
    let lifted = loc + Vector3::z() * c.lift_height;
    let waypoints = vec![
        waypoint("pre_grasp", &above),
        waypoint("grasp", &loc),
        waypoint("lift", &lifted),
    ];

    let footprint = state.footprint();
    let closing = [-yaw.sin(), yaw.cos()];
    let inside = point_in_polygon(&footprint, [loc.x, loc.y], 2e-3);
    let in_height = loc.z >= state.bottom_z() - 1e-6 && loc.z <= state.top_z() + 1e-6;
    let width = polygon_chord(&footprint, [loc.x, loc.y], closing);
    let mut next = state.clone();
    if inside && in_height && width > 0.0 && width <= c.max_aperture {
        let at_loc = GripperPose { position: loc, yaw };
        next.grasp = Some(Grasp {
            gripper_from_object: at_loc.transform().inverse().compose(&state.object),
            contacts: true,
        });
        next.gripper = GripperPose {
            position: lifted,
            yaw,
        };
        attach(&mut next);
    } else {
        next.gripper = reset_gripper(bins);
    }
    (next, waypoints)
}

/// Places the held object according to the gripper pose.
fn attach(state: &mut EnvState) {
    if let Some(g) = &state.grasp {
        state.object = state.gripper.transform().compose(&g.gripper_from_object);
    }
}

fn move_gripper(
    state: &EnvState,
    target: Point3,
    yaw: f64,
    c: &PrimitiveConstants,
    bins: &BinGeometry,
    label: &str,
) -> (EnvState, Vec<Waypoint>) {
    let workspace = bins.workspace();
    let mut next = state.clone();
    let yaw = if c.rotate_on_move {
        yaw
    } else {
        state.gripper.yaw
    };
    next.gripper = GripperPose {
        position: workspace.clamp(&target),
        yaw,
    };
    attach(&mut next);
    // keep the held object above the floor
    let sink = bins.floor_z - next.bottom_z();
    if sink > 0.0 {
        next.gripper.position.z = (next.gripper.position.z + sink).min(workspace.max.z);
        attach(&mut next);
    }
    let at = next.gripper.position;
    (next, vec![waypoint(label, &at)])
}

/// Affine map of a raw location in (-1, 1)³ onto the area of interest:
/// the object box for Poke and Grasp, the workspace otherwise.
pub fn map_regressed_location(
    raw: &Vector3<f64>,
    primitive: PrimitiveType,
    object_box: &Aabb,
    workspace: &Aabb,
) -> Point3 {
    let area = match primitive {
        PrimitiveType::Poke | PrimitiveType::Grasp => object_box,
        _ => workspace,
    };
    // (1 - t)·min + t·max lands exactly on the corners at t = 0 and 1
    Vector3::from_fn(|a, _| {
        let t = (raw[a] + 1.0) / 2.0;
        (1.0 - t) * area.min[a] + t * area.max[a]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn orientation_examples() {
        assert_eq!(decode_orientation(0.0, 1.0), 0.0);
        assert!((decode_orientation(1.0, 0.0) - FRAC_PI_2).abs() < 1e-15);
        assert!((decode_orientation(-1.0, 1.0) + FRAC_PI_4).abs() < 1e-15);
        assert_eq!(decode_orientation(0.0, 0.0), 0.0);
        assert_eq!(decode_orientation(-0.0, -1.0), std::f64::consts::PI);
    }

    #[test]
    fn admissibility_table() {
        for p in PrimitiveType::ALL {
            assert_eq!(
                p.allowed(false),
                matches!(
                    p,
                    PrimitiveType::Poke | PrimitiveType::Grasp | PrimitiveType::OpenGripper
                )
            );
            assert_eq!(
                p.allowed(true),
                !matches!(p, PrimitiveType::Poke | PrimitiveType::Grasp)
            );
        }
    }

    #[test]
    fn aoi_corners_and_center() {
        let b = Aabb {
            min: Vector3::zeros(),
            max: Vector3::repeat(0.1),
        };
        let w = Aabb {
            min: Vector3::repeat(-1.0),
            max: Vector3::repeat(1.0),
        };
        let p = map_regressed_location(&Vector3::zeros(), PrimitiveType::Poke, &b, &w);
        assert!((p - Vector3::repeat(0.05)).norm() < 1e-15);
        let q = map_regressed_location(&Vector3::repeat(1.0), PrimitiveType::Grasp, &b, &w);
        assert!((q - b.max).norm() < 1e-15);
        let m = map_regressed_location(&Vector3::new(0.5, 0.0, 0.0), PrimitiveType::MoveTo, &b, &w);
        assert!((m - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn param_dims() {
        let dims: Vec<usize> = PrimitiveType::ALL.iter().map(|p| p.param_dim()).collect();
        assert_eq!(dims, vec![5, 2, 5, 5, 0]);
        assert_eq!(
            "move-delta".parse::<PrimitiveType>().unwrap(),
            PrimitiveType::MoveDelta
        );
    }
}
