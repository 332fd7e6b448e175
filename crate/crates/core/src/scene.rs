//! Procedural tabletop scenes built from boxes, spheres and upright cylinders.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Box,
    Sphere,
    Cylinder,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Box => "box",
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cylinder => "cylinder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "box" => Some(ShapeKind::Box),
            "sphere" => Some(ShapeKind::Sphere),
            "cylinder" => Some(ShapeKind::Cylinder),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Box { hx: f64, hy: f64, hz: f64 },
    Sphere { radius: f64 },
    /// Upright cylinder; `height` is the full height.
    Cylinder { radius: f64, height: f64 },
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Box { .. } => ShapeKind::Box,
            Shape::Sphere { .. } => ShapeKind::Sphere,
            Shape::Cylinder { .. } => ShapeKind::Cylinder,
        }
    }

    /// Height of the primitive's center above its resting plane.
    pub fn rest_height(&self) -> f64 {
        match *self {
            Shape::Box { hz, .. } => hz,
            Shape::Sphere { radius } => radius,
            Shape::Cylinder { height, .. } => height / 2.0,
        }
    }
}

/// A primitive resting on the table. `position` is the shape's center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub id: u32,
    pub shape: Shape,
    pub position: Vector3<f64>,
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SceneMode {
    Single,
    Cluttered,
}

impl SceneMode {
    pub fn name(self) -> &'static str {
        match self {
            SceneMode::Single => "single",
            SceneMode::Cluttered => "cluttered",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub shapes: Vec<ShapeKind>,
    pub radius_min: f64,
    pub radius_max: f64,
    pub height_min: f64,
    pub height_max: f64,
    pub table_extent: f64,
    pub overlap_tol: f64,
    pub placement_retries: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            shapes: vec![ShapeKind::Box, ShapeKind::Sphere, ShapeKind::Cylinder],
            radius_min: 0.015,
            radius_max: 0.05,
            height_min: 0.03,
            height_max: 0.12,
            table_extent: 0.25,
            overlap_tol: 0.001,
            placement_retries: 1000,
            min_objects: 2,
            max_objects: 30,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::config("shapes", "at least one shape kind required"));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::config("radius_min", "need 0 < radius_min <= radius_max"));
        }
        if !(self.height_min > 0.0 && self.height_min <= self.height_max) {
            return Err(Error::config("height_min", "need 0 < height_min <= height_max"));
        }
        if self.table_extent <= self.radius_max {
            return Err(Error::config("table_extent", "table smaller than largest object"));
        }
        if !(1 <= self.min_objects && self.min_objects <= self.max_objects && self.max_objects <= 30) {
            return Err(Error::config("max_objects", "need 1 <= min_objects <= max_objects <= 30"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub table_extent: f64,
    pub rng_seed: u64,
    /// Number of primitives requested before placement.
    pub requested: usize,
    /// Set when rejection sampling ran out of retries.
    pub placement_failed: bool,
}

impl Scene {
    pub fn empty(table_extent: f64) -> Self {
        Self {
            primitives: Vec::new(),
            table_extent,
            rng_seed: 0,
            requested: 0,
            placement_failed: false,
        }
    }

    pub fn with_primitives(primitives: Vec<Primitive>, table_extent: f64) -> Self {
        let requested = primitives.len();
        Self {
            primitives,
            table_extent,
            rng_seed: 0,
            requested,
            placement_failed: false,
        }
    }

    pub fn get(&self, id: u32) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.id == id)
    }

    /// Line-oriented text form: a header, then one primitive per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# pixgrasp scene v1");
        let _ = writeln!(out, "table_extent {:?}", self.table_extent);
        let _ = writeln!(out, "seed {}", self.rng_seed);
        let _ = writeln!(out, "requested {}", self.requested);
        let _ = writeln!(out, "placement_failed {}", self.placement_failed);
        for p in &self.primitives {
            let dims = match p.shape {
                Shape::Box { hx, hy, hz } => format!("hx={hx:?} hy={hy:?} hz={hz:?}"),
                Shape::Sphere { radius } => format!("r={radius:?}"),
                Shape::Cylinder { radius, height } => format!("r={radius:?} h={height:?}"),
            };
            let _ = writeln!(
                out,
                "{} id={} {} x={:?} y={:?} z={:?} yaw={:?}",
                p.shape.kind().name(),
                p.id,
                dims,
                p.position.x,
                p.position.y,
                p.position.z,
                p.yaw
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut scene = Scene::empty(0.25);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("scene line {}: {what}", lineno + 1));
            let mut toks = line.split_whitespace();
            let head = toks.next().unwrap_or_default();
            match head {
                "table_extent" | "seed" | "requested" | "placement_failed" => {
                    let v = toks.next().ok_or_else(|| bad("missing value"))?;
                    match head {
                        "table_extent" => scene.table_extent = v.parse().map_err(|_| bad("table_extent"))?,
                        "seed" => scene.rng_seed = v.parse().map_err(|_| bad("seed"))?,
                        "requested" => scene.requested = v.parse().map_err(|_| bad("requested"))?,
                        _ => scene.placement_failed = v.parse().map_err(|_| bad("placement_failed"))?,
                    }
                }
                shape => {
                    let kind = ShapeKind::parse(shape).ok_or_else(|| bad("unknown shape"))?;
                    let mut kv = std::collections::HashMap::new();
                    for t in toks {
                        let (k, v) = t.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                        kv.insert(k, v);
                    }
                    let num = |k: &str| -> Result<f64> {
                        kv.get(k)
                            .ok_or_else(|| bad(&format!("missing {k}")))?
                            .parse::<f64>()
                            .map_err(|_| bad(&format!("bad {k}")))
                    };
                    let shape = match kind {
                        ShapeKind::Box => Shape::Box {
                            hx: num("hx")?,
                            hy: num("hy")?,
                            hz: num("hz")?,
                        },
                        ShapeKind::Sphere => Shape::Sphere { radius: num("r")? },
                        ShapeKind::Cylinder => Shape::Cylinder {
                            radius: num("r")?,
                            height: num("h")?,
                        },
                    };
                    let id = kv
                        .get("id")
                        .ok_or_else(|| bad("missing id"))?
                        .parse()
                        .map_err(|_| bad("bad id"))?;
                    scene.primitives.push(Primitive {
                        id,
                        shape,
                        position: Vector3::new(num("x")?, num("y")?, num("z")?),
                        yaw: num("yaw")?,
                    });
                }
            }
        }
        Ok(scene)
    }
}

/// Draws the scene mode for one episode: single or cluttered with equal
/// probability.
pub fn sample_mode(seed: u64) -> SceneMode {
    let mut rng = rng::from_seed(rng::derive(seed, rng::stream::MODE));
    if rng.gen_bool(0.5) {
        SceneMode::Single
    } else {
        SceneMode::Cluttered
    }
}

fn sample_shape(rng: &mut Rng, cfg: &SceneConfig) -> Shape {
    let kind = cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
    let mut dim = |lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    match kind {
        ShapeKind::Box => Shape::Box {
            hx: dim(cfg.radius_min, cfg.radius_max),
            hy: dim(cfg.radius_min, cfg.radius_max),
            hz: dim(cfg.height_min, cfg.height_max) / 2.0,
        },
        ShapeKind::Sphere => Shape::Sphere {
            radius: dim(cfg.radius_min, cfg.radius_max),
        },
        ShapeKind::Cylinder => Shape::Cylinder {
            radius: dim(cfg.radius_min, cfg.radius_max),
            height: dim(cfg.height_min, cfg.height_max),
        },
    }
}

/// Generates a scene as a pure function of `(seed, mode, cfg)`.
///
/// Placement is rejection sampling with `cfg.placement_retries` attempts per
/// primitive; when the budget runs out the scene keeps what was placed and
/// sets `placement_failed`.
pub fn generate_scene(seed: u64, mode: SceneMode, cfg: &SceneConfig) -> Scene {
    let mut rng = rng::from_seed(rng::derive(seed, rng::stream::SCENE));
    let count = match mode {
        SceneMode::Single => 1,
        SceneMode::Cluttered => rng.gen_range(cfg.min_objects.max(2)..=cfg.max_objects.max(2)),
    };
    let mut primitives: Vec<Primitive> = Vec::with_capacity(count);
    let mut placement_failed = false;
    'objects: for id in 0..count {
        let shape = sample_shape(&mut rng, cfg);
        for _ in 0..cfg.placement_retries.max(1) {
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let ext = cfg.table_extent;
            let candidate = Primitive {
                id: id as u32,
                shape,
                position: Vector3::new(rng.gen_range(-ext..ext), rng.gen_range(-ext..ext), shape.rest_height()),
                yaw,
            };
            if !candidate.footprint().inside_square(ext) {
                continue;
            }
            let clear = primitives
                .iter()
                .all(|p| p.footprint().signed_distance(&candidate.footprint()) >= -cfg.overlap_tol);
            if clear {
                primitives.push(candidate);
                continue 'objects;
            }
        }
        placement_failed = true;
        break;
    }
    Scene {
        primitives,
        table_extent: cfg.table_extent,
        rng_seed: seed,
        requested: count,
        placement_failed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_mode_has_one_primitive() {
        let s = generate_scene(7, SceneMode::Single, &SceneConfig::default());
        assert_eq!(s.primitives.len(), 1);
        assert!(!s.placement_failed);
    }

    #[test]
    fn cluttered_count_in_range_and_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(7, SceneMode::Cluttered, &cfg);
        let b = generate_scene(7, SceneMode::Cluttered, &cfg);
        assert!((2..=30).contains(&a.primitives.len()));
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn primitives_rest_on_table_and_inside_extent() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let s = generate_scene(seed, SceneMode::Cluttered, &cfg);
            for p in &s.primitives {
                assert!((p.position.z - p.shape.rest_height()).abs() < 1e-15);
                assert!(p.footprint().inside_square(cfg.table_extent));
            }
        }
    }

    #[test]
    fn impossible_density_degrades() {
        let cfg = SceneConfig {
            table_extent: 0.06,
            radius_min: 0.05,
            radius_max: 0.05,
            min_objects: 30,
            max_objects: 30,
            placement_retries: 50,
            ..SceneConfig::default()
        };
        let s = generate_scene(3, SceneMode::Cluttered, &cfg);
        assert!(s.placement_failed);
        assert_eq!(s.requested, 30);
        assert!(s.primitives.len() < 30);
    }

    #[test]
    fn text_round_trip() {
        let s = generate_scene(11, SceneMode::Cluttered, &SceneConfig::default());
        let back = Scene::from_text(&s.to_text()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn text_rejects_unknown_shape() {
        assert!(Scene::from_text("torus id=0 r=0.1 x=0 y=0 z=0 yaw=0").is_err());
    }

    #[test]
    fn sample_mode_fixed_seed_fixed_mode() {
        assert_eq!(sample_mode(5), sample_mode(5));
    }
}
