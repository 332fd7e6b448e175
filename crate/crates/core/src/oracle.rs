//! Geometric stand-in for a physical pick-up trial.
//!
//! The hand is a palm disc with three two-link fingers. Fingers 1 and 2 sit
//! side by side opposite finger 3 and swing about their knuckles with the
//! lateral spread: at spread 0 all three close in parallel planes like a
//! jaw gripper, at spread pi/2 fingers 1 and 2 face each other. A grasp
//! succeeds when two fingers end on the same primitive with contact normals
//! inside a friction-cone antipodal tolerance.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::scene::{Primitive, Scene};

#[derive(Debug, Clone, PartialEq)]
pub struct HandModel {
    pub palm_radius: f64,
    /// Half thickness of the palm slab (swept radius around the disc).
    pub palm_half_thickness: f64,
    pub finger_radius: f64,
    pub proximal_length: f64,
    pub distal_length: f64,
    /// Distal joint angle as a fraction of the proximal joint angle.
    pub distal_ratio: f64,
    /// Lateral offset of the finger 1/2 knuckles from the palm center line.
    pub knuckle_lateral: f64,
    /// Offset of the finger 1/2 knuckles toward the back of the palm.
    pub knuckle_back: f64,
    /// Offset of the finger 3 knuckle toward the front of the palm.
    pub thumb_offset: f64,
    /// Outward splay of a finger at joint angle 0.
    pub open_angle: f64,
    pub spread_limit: f64,
    pub closing_limit: f64,
    pub pregrasp_limit: f64,
    pub approach_offset: f64,
}

impl Default for HandModel {
    fn default() -> Self {
        Self {
            palm_radius: 0.045,
            palm_half_thickness: 0.01,
            finger_radius: 0.009,
            proximal_length: 0.05,
            distal_length: 0.04,
            distal_ratio: 0.33,
            knuckle_lateral: 0.025,
            knuckle_back: 0.025,
            thumb_offset: 0.025,
            open_angle: 0.9,
            spread_limit: FRAC_PI_2,
            closing_limit: 2.44,
            pregrasp_limit: 0.61,
            approach_offset: 0.05,
        }
    }
}

impl HandModel {
    pub fn validate(&self) -> crate::Result<()> {
        let lengths = [
            ("palm_radius", self.palm_radius),
            ("palm_half_thickness", self.palm_half_thickness),
            ("finger_radius", self.finger_radius),
            ("proximal_length", self.proximal_length),
            ("distal_length", self.distal_length),
            ("approach_offset", self.approach_offset),
        ];
        for (k, v) in lengths {
            if !(v > 0.0) {
                return Err(crate::Error::config(k, "must be > 0"));
            }
        }
        if !(self.pregrasp_limit > 0.0 && self.pregrasp_limit <= self.closing_limit) {
            return Err(crate::Error::config("pregrasp_limit", "need 0 < pregrasp_limit <= closing_limit"));
        }
        Ok(())
    }

    /// Span between finger 3 and finger 1 tips with the hand fully open.
    pub fn max_aperture(&self) -> f64 {
        let reach = (self.proximal_length + self.distal_length) * self.open_angle.sin().max(0.0);
        self.thumb_offset + self.knuckle_back + 2.0 * reach + 2.0 * self.finger_radius
    }

    fn reach(&self) -> f64 {
        let knuckle = self
            .thumb_offset
            .max((self.knuckle_back.powi(2) + self.knuckle_lateral.powi(2)).sqrt());
        knuckle.max(self.palm_radius) + self.proximal_length + self.distal_length + self.finger_radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub friction: f64,
    pub close_step: f64,
    pub surface_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            friction: 0.5,
            close_step: 0.01,
            surface_tol: 1e-4,
        }
    }
}

impl OracleConfig {
    /// Smallest angle between two contact normals that counts as antipodal.
    pub fn antipodal_angle(&self) -> f64 {
        PI - 2.0 * self.friction.atan()
    }
}

/// Hand placement target: the surface point to grasp, end-effector
/// orientation, and pre-grasp joints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    pub position: Vec3,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub spread: f64,
    pub fingers: [f64; 3],
}

impl GraspPose {
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw)
    }

    /// Direction the palm faces: the rotated unit x axis.
    pub fn approach(&self) -> Vec3 {
        self.rotation() * Vector3::x()
    }

    pub fn is_valid(&self, hand: &HandModel) -> bool {
        let eps = 1e-12;
        (-eps..=PI + eps).contains(&self.pitch)
            && (-PI - eps..=PI + eps).contains(&self.roll)
            && (-PI - eps..=PI + eps).contains(&self.yaw)
            && (-eps..=hand.spread_limit + eps).contains(&self.spread)
            && self
                .fingers
                .iter()
                .all(|f| (-eps..=hand.pregrasp_limit + eps).contains(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspCode {
    Success,
    Collision,
    NoContact,
    SingleContact,
    NonAntipodal,
    Aperture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub primitive: u32,
    pub point: Vec3,
    pub normal: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerResult {
    pub final_angle: f64,
    pub contact: Option<Contact>,
    pub hit_table: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspDiagnostics {
    pub code: GraspCode,
    /// Body that collided at pre-grasp, e.g. `palm/table` or `finger2/7`.
    pub collision: Option<String>,
    pub fingers: Vec<FingerResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspOutcome {
    pub success: bool,
    pub diagnostics: GraspDiagnostics,
}

/// World-frame hand geometry for one pose.
struct HandFrame {
    palm: Vec3,
    approach: Vec3,
    bases: [Vec3; 3],
    outward: [Vec3; 3],
}

impl HandFrame {
    fn new(hand: &HandModel, g: &GraspPose) -> Self {
        let rot = g.rotation();
        let approach = rot * Vector3::x();
        let lateral = rot * Vector3::y();
        let front = rot * Vector3::z();
        let palm = g.position - approach * hand.approach_offset;
        let at = |x: f64, y: f64| palm + front * x + lateral * y;
        let (s, c) = g.spread.sin_cos();
        let closing = [(c, -s), (c, s), (-1.0, 0.0)];
        let bases = [
            at(-hand.knuckle_back, hand.knuckle_lateral),
            at(-hand.knuckle_back, -hand.knuckle_lateral),
            at(hand.thumb_offset, 0.0),
        ];
        let outward = closing.map(|(x, y)| -(front * x + lateral * y));
        Self {
            palm,
            approach,
            bases,
            outward,
        }
    }

    /// Knuckle, middle joint and tip of finger `i` at joint angle `q`.
    fn finger(&self, hand: &HandModel, i: usize, q: f64) -> [Vec3; 3] {
        let dir = |alpha: f64| self.approach * alpha.cos() + self.outward[i] * alpha.sin();
        let alpha = hand.open_angle - q;
        let base = self.bases[i];
        let joint = base + dir(alpha) * hand.proximal_length;
        let tip = joint + dir(alpha - hand.distal_ratio * q) * hand.distal_length;
        [base, joint, tip]
    }
}

/// Distance from a capsule to a primitive surface. Returns a Lipschitz
/// lower bound when it already exceeds `cutoff`.
fn capsule_distance(p: &Primitive, a: &Vec3, b: &Vec3, radius: f64, cutoff: f64) -> (f64, Vec3) {
    let mid = (a + b) * 0.5;
    let lb = p.sdf(&mid) - (b - a).norm() * 0.5 - radius;
    if lb > cutoff {
        return (lb, mid);
    }
    let (d, at) = p.segment_min(a, b);
    (d - radius, at)
}

#[derive(Clone, Copy)]
enum Obstacle {
    Table,
    Primitive(usize),
}

struct Probe<'a> {
    hand: &'a HandModel,
    frame: HandFrame,
    nearby: Vec<&'a Primitive>,
}

impl<'a> Probe<'a> {
    fn new(scene: &'a Scene, hand: &'a HandModel, g: &GraspPose) -> Self {
        let frame = HandFrame::new(hand, g);
        let reach = hand.reach() + 0.01;
        let nearby = scene
            .primitives
            .iter()
            .filter(|p| (p.position - frame.palm).norm() <= reach + p.bounding_radius())
            .collect();
        Self { hand, frame, nearby }
    }

    /// Smallest clearance between finger `i` at angle `q` and any obstacle.
    fn finger_clearance(&self, i: usize, q: f64, cutoff: f64) -> (f64, Obstacle, Vec3) {
        let pts = self.frame.finger(self.hand, i, q);
        let rho = self.hand.finger_radius;
        let table = pts.iter().map(|p| p.z).fold(f64::INFINITY, f64::min) - rho;
        let mut best = (table, Obstacle::Table, pts[2]);
        for (k, p) in self.nearby.iter().enumerate() {
            for seg in [(0, 1), (1, 2)] {
                let (d, at) = capsule_distance(p, &pts[seg.0], &pts[seg.1], rho, cutoff);
                if d < best.0 {
                    best = (d, Obstacle::Primitive(k), at);
                }
            }
        }
        best
    }

    fn palm_collision(&self) -> Option<String> {
        let f = &self.frame;
        let h = self.hand;
        let tilt = (1.0 - f.approach.z * f.approach.z).max(0.0).sqrt();
        if f.palm.z - h.palm_radius * tilt - h.palm_half_thickness < 0.0 {
            return Some("palm/table".into());
        }
        for p in &self.nearby {
            if p.sdf(&f.palm) - h.palm_radius - h.palm_half_thickness > 0.0 {
                continue;
            }
            let (d, _) = p.disc_min(&f.palm, &f.approach, h.palm_radius);
            if d < h.palm_half_thickness {
                return Some(format!("palm/{}", p.id));
            }
        }
        None
    }

    fn describe(&self, o: Obstacle) -> String {
        match o {
            Obstacle::Table => "table".into(),
            Obstacle::Primitive(k) => self.nearby[k].id.to_string(),
        }
    }
}

/// Sweeps all fingers closed from their pre-grasp angles at a common joint
/// velocity; each finger freezes at first contact or at the closing limit.
pub fn close_fingers(hand: &HandModel, g: &GraspPose, scene: &Scene, cfg: &OracleConfig) -> Vec<FingerResult> {
    let probe = Probe::new(scene, hand, g);
    close_with(&probe, g, cfg)
}

fn close_with(probe: &Probe, g: &GraspPose, cfg: &OracleConfig) -> Vec<FingerResult> {
    let hand = probe.hand;
    let mut results = Vec::with_capacity(3);
    for (i, &q0) in g.fingers.iter().enumerate() {
        let mut lo = q0;
        let mut out = FingerResult {
            final_angle: hand.closing_limit,
            contact: None,
            hit_table: false,
        };
        while lo < hand.closing_limit {
            let hi = (lo + cfg.close_step).min(hand.closing_limit);
            let (d, _, _) = probe.finger_clearance(i, hi, 0.0);
            if d >= 0.0 {
                lo = hi;
                continue;
            }
            // Refine the first penetrating step down to the surface tolerance.
            let (mut a, mut b) = (lo, hi);
            let mut q = a;
            for _ in 0..80 {
                let mid = 0.5 * (a + b);
                let (dm, _, _) = probe.finger_clearance(i, mid, cfg.surface_tol);
                if dm < 0.0 {
                    b = mid;
                } else {
                    a = mid;
                    q = mid;
                    if dm <= cfg.surface_tol {
                        break;
                    }
                }
            }
            let (_, obstacle, at) = probe.finger_clearance(i, q, f64::INFINITY);
            out.final_angle = q;
            match obstacle {
                Obstacle::Table => out.hit_table = true,
                Obstacle::Primitive(k) => {
                    let p = probe.nearby[k];
                    let (sd, normal) = p.sdf_grad(&at);
                    out.contact = Some(Contact {
                        primitive: p.id,
                        point: at - normal * sd,
                        normal,
                    });
                }
            }
            break;
        }
        results.push(out);
    }
    results
}

fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos()
}

pub fn evaluate_grasp(scene: &Scene, hand: &HandModel, g: &GraspPose, cfg: &OracleConfig) -> GraspOutcome {
    let probe = Probe::new(scene, hand, g);
    let fail = |code, collision, fingers| GraspOutcome {
        success: false,
        diagnostics: GraspDiagnostics {
            code,
            collision,
            fingers,
        },
    };

    if let Some(what) = probe.palm_collision() {
        return fail(GraspCode::Collision, Some(what), Vec::new());
    }
    for (i, q) in g.fingers.iter().enumerate() {
        let (d, o, _) = probe.finger_clearance(i, *q, 0.0);
        if d < 0.0 {
            return fail(
                GraspCode::Collision,
                Some(format!("finger{}/{}", i + 1, probe.describe(o))),
                Vec::new(),
            );
        }
    }

    let fingers = close_with(&probe, g, cfg);
    let contacts: Vec<&Contact> = fingers.iter().filter_map(|f| f.contact.as_ref()).collect();
    if contacts.is_empty() {
        return fail(GraspCode::NoContact, None, fingers);
    }
    let cone = cfg.antipodal_angle();
    let aperture = hand.max_aperture();
    let mut paired = false;
    let mut antipodal = false;
    for (a, ca) in contacts.iter().enumerate() {
        for cb in &contacts[a + 1..] {
            if ca.primitive != cb.primitive {
                continue;
            }
            paired = true;
            if angle_between(&ca.normal, &cb.normal) >= cone {
                antipodal = true;
                if (ca.point - cb.point).norm() <= aperture {
                    return GraspOutcome {
                        success: true,
                        diagnostics: GraspDiagnostics {
                            code: GraspCode::Success,
                            collision: None,
                            fingers,
                        },
                    };
                }
            }
        }
    }
    let code = match (paired, antipodal) {
        (false, _) => GraspCode::SingleContact,
        (true, false) => GraspCode::NonAntipodal,
        (true, true) => GraspCode::Aperture,
    };
    fail(code, None, fingers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Shape;

    fn lone_sphere(r: f64) -> Scene {
        Scene::with_primitives(
            vec![Primitive {
                id: 0,
                shape: Shape::Sphere { radius: r },
                position: Vector3::new(0.0, 0.0, r),
                yaw: 0.0,
            }],
            0.25,
        )
    }

    fn top_down(position: Vec3, spread: f64, fingers: f64) -> GraspPose {
        GraspPose {
            position,
            roll: 0.0,
            pitch: FRAC_PI_2,
            yaw: 0.0,
            spread,
            fingers: [fingers; 3],
        }
    }

    #[test]
    fn top_down_approach_points_down() {
        let g = top_down(Vector3::zeros(), 0.0, 0.0);
        let a = g.approach();
        assert!((a - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn grasp_far_above_has_no_contact() {
        let scene = lone_sphere(0.03);
        let g = top_down(Vector3::new(0.0, 0.0, 0.56), 0.3, 0.3);
        let out = evaluate_grasp(&scene, &HandModel::default(), &g, &OracleConfig::default());
        assert!(!out.success);
        assert_eq!(out.diagnostics.code, GraspCode::NoContact);
    }

    #[test]
    fn palm_at_table_height_collides() {
        let scene = Scene::empty(0.25);
        let hand = HandModel::default();
        // Pushed back along the approach, the palm center lands at z = 0.
        let g = top_down(Vector3::new(0.1, 0.1, -hand.approach_offset), 0.0, 0.0);
        let out = evaluate_grasp(&scene, &hand, &g, &OracleConfig::default());
        assert_eq!(out.diagnostics.code, GraspCode::Collision);
        assert_eq!(out.diagnostics.collision.as_deref(), Some("palm/table"));
    }

    #[test]
    fn centered_pinch_on_sphere_succeeds() {
        let scene = lone_sphere(0.03);
        let g = top_down(Vector3::new(0.0, 0.0, 0.06), 0.0, 0.3);
        let out = evaluate_grasp(&scene, &HandModel::default(), &g, &OracleConfig::default());
        assert!(out.success, "{:?}", out.diagnostics);
    }

    #[test]
    fn empty_scene_fingers_close_fully() {
        let scene = Scene::empty(0.25);
        let g = top_down(Vector3::new(0.0, 0.0, 0.3), 0.4, 0.2);
        let res = close_fingers(&HandModel::default(), &g, &scene, &OracleConfig::default());
        for f in res {
            assert_eq!(f.final_angle, 2.44);
            assert!(f.contact.is_none() && !f.hit_table);
        }
    }

    #[test]
    fn symmetric_fingers_close_symmetrically() {
        let scene = lone_sphere(0.03);
        let g = top_down(Vector3::new(0.0, 0.0, 0.06), 0.7, 0.3);
        let res = close_fingers(&HandModel::default(), &g, &scene, &OracleConfig::default());
        assert!(res[0].contact.is_some() && res[1].contact.is_some());
        assert!((res[0].final_angle - res[1].final_angle).abs() < 0.02);
    }

    #[test]
    fn contact_points_lie_on_surface() {
        let scene = lone_sphere(0.04);
        let g = top_down(Vector3::new(0.005, -0.003, 0.08), 0.5, 0.2);
        let res = close_fingers(&HandModel::default(), &g, &scene, &OracleConfig::default());
        let p = &scene.primitives[0];
        let mut n = 0;
        for f in &res {
            if let Some(c) = &f.contact {
                assert!(p.sdf(&c.point).abs() < 1e-4);
                n += 1;
            }
        }
        assert!(n >= 2);
    }
}
