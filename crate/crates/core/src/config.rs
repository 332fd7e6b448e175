//! Flat `key = value` run configuration covering every module default.

use std::fmt::Display;
use std::str::FromStr;

use crate::episode::{Ablation, EpisodeConfig, Setup};
use crate::heads::HeadConfig;
use crate::nn::Descriptor;
use crate::oracle::{HandModel, OracleConfig};
use crate::ppo::{AdvantageMode, PpoConfig, ScenePolicy};
use crate::render::{CameraConfig, CameraModel};
use crate::scene::{SceneConfig, ShapeKind};
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub hand: HandModel,
    pub oracle: OracleConfig,
    pub heads: HeadConfig,
    pub episode: EpisodeConfig,
    pub ppo: PpoConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            camera: CameraConfig::default(),
            hand: HandModel::default(),
            oracle: OracleConfig::default(),
            heads: HeadConfig::default(),
            episode: EpisodeConfig::default(),
            ppo: PpoConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn shapes_text(s: &[ShapeKind]) -> String {
    s.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        fn s<T: Display>(v: T) -> String {
            v.to_string()
        }
        let (sc, c, h, o, hd, e, p, t) = (&self.scene, &self.camera, &self.hand, &self.oracle, &self.heads, &self.episode, &self.ppo, &self.train);
        vec![
            ("seed", s(self.seed)),
            ("scene.shapes", shapes_text(&sc.shapes)),
            ("scene.radius_min", s(sc.radius_min)),
            ("scene.radius_max", s(sc.radius_max)),
            ("scene.height_min", s(sc.height_min)),
            ("scene.height_max", s(sc.height_max)),
            ("scene.table_extent", s(sc.table_extent)),
            ("scene.overlap_tol", s(sc.overlap_tol)),
            ("scene.placement_retries", s(sc.placement_retries)),
            ("scene.min_objects", s(sc.min_objects)),
            ("scene.max_objects", s(sc.max_objects)),
            ("camera.rows", s(c.rows)),
            ("camera.cols", s(c.cols)),
            ("camera.distance", s(c.distance)),
            ("camera.tilt_deg", s(c.tilt_deg)),
            ("camera.view_extent", s(c.view_extent)),
            ("camera.far_clip", s(c.far_clip)),
            ("hand.palm_radius", s(h.palm_radius)),
            ("hand.palm_half_thickness", s(h.palm_half_thickness)),
            ("hand.finger_radius", s(h.finger_radius)),
            ("hand.proximal_length", s(h.proximal_length)),
            ("hand.distal_length", s(h.distal_length)),
            ("hand.distal_ratio", s(h.distal_ratio)),
            ("hand.knuckle_lateral", s(h.knuckle_lateral)),
            ("hand.knuckle_back", s(h.knuckle_back)),
            ("hand.thumb_offset", s(h.thumb_offset)),
            ("hand.open_angle", s(h.open_angle)),
            ("hand.spread_limit", s(h.spread_limit)),
            ("hand.closing_limit", s(h.closing_limit)),
            ("hand.pregrasp_limit", s(h.pregrasp_limit)),
            ("hand.approach_offset", s(h.approach_offset)),
            ("oracle.friction", s(o.friction)),
            ("oracle.close_step", s(o.close_step)),
            ("oracle.surface_tol", s(o.surface_tol)),
            ("heads.sigma_min", s(hd.sigma_min)),
            ("heads.sigma_max", s(hd.sigma_max)),
            ("heads.scale_min", s(hd.scale_min)),
            ("heads.scale_max", s(hd.scale_max)),
            ("episode.max_zoom_steps", s(e.max_zoom_steps)),
            ("episode.scale_floor_px", s(e.scale_floor_px)),
            ("episode.depth_ref", s(e.depth_ref)),
            ("episode.depth_scale", s(e.depth_scale)),
            ("episode.ablation", e.ablation.name().to_string()),
            ("ppo.lr", s(p.lr)),
            ("ppo.epochs", s(p.epochs)),
            ("ppo.actors", s(p.actors)),
            ("ppo.batch_size", s(p.batch_size)),
            ("ppo.minibatch", s(p.minibatch)),
            ("ppo.gamma", s(p.gamma)),
            ("ppo.lambda", s(p.lambda)),
            ("ppo.clip", s(p.clip)),
            ("ppo.grad_clip", s(p.grad_clip)),
            ("ppo.entropy_coef", s(p.entropy_coef)),
            ("ppo.value_coef", s(p.value_coef)),
            ("ppo.adam_beta1", s(p.adam_beta1)),
            ("ppo.adam_beta2", s(p.adam_beta2)),
            ("ppo.adam_eps", s(p.adam_eps)),
            ("ppo.advantage", match p.advantage {
                AdvantageMode::ReturnToGo => "rtg".to_string(),
                AdvantageMode::Gae => "gae".to_string(),
            }),
            ("ppo.normalize_advantages", s(p.normalize_advantages)),
            ("train.net", t.desc.name.clone()),
            ("train.batches", s(t.batches)),
            ("train.scenes", t.scenes.name().to_string()),
            ("train.eval_every", s(t.eval_every)),
            ("train.eval_episodes", s(t.eval_episodes)),
            ("train.target_success", t.target_success.map(s).unwrap_or_else(|| "none".into())),
            ("train.checkpoint_every", s(t.checkpoint_every)),
            ("train.head_gain", s(t.head_gain)),
            ("train.metrics_wall_clock", s(t.wall_clock)),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "seed" => self.seed = parse(k, v)?,
            "scene.shapes" => {
                let mut out = Vec::new();
                for name in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    out.push(ShapeKind::parse(name).ok_or_else(|| Error::config(k, format!("unknown shape `{name}`")))?);
                }
                self.scene.shapes = out;
            }
            "scene.radius_min" => self.scene.radius_min = parse(k, v)?,
            "scene.radius_max" => self.scene.radius_max = parse(k, v)?,
            "scene.height_min" => self.scene.height_min = parse(k, v)?,
            "scene.height_max" => self.scene.height_max = parse(k, v)?,
            "scene.table_extent" => self.scene.table_extent = parse(k, v)?,
            "scene.overlap_tol" => self.scene.overlap_tol = parse(k, v)?,
            "scene.placement_retries" => self.scene.placement_retries = parse(k, v)?,
            "scene.min_objects" => self.scene.min_objects = parse(k, v)?,
            "scene.max_objects" => self.scene.max_objects = parse(k, v)?,
            "camera.rows" => self.camera.rows = parse(k, v)?,
            "camera.cols" => self.camera.cols = parse(k, v)?,
            "camera.distance" => self.camera.distance = parse(k, v)?,
            "camera.tilt_deg" => self.camera.tilt_deg = parse(k, v)?,
            "camera.view_extent" => self.camera.view_extent = parse(k, v)?,
            "camera.far_clip" => self.camera.far_clip = parse(k, v)?,
            "hand.palm_radius" => self.hand.palm_radius = parse(k, v)?,
            "hand.palm_half_thickness" => self.hand.palm_half_thickness = parse(k, v)?,
            "hand.finger_radius" => self.hand.finger_radius = parse(k, v)?,
            "hand.proximal_length" => self.hand.proximal_length = parse(k, v)?,
            "hand.distal_length" => self.hand.distal_length = parse(k, v)?,
            "hand.distal_ratio" => self.hand.distal_ratio = parse(k, v)?,
            "hand.knuckle_lateral" => self.hand.knuckle_lateral = parse(k, v)?,
            "hand.knuckle_back" => self.hand.knuckle_back = parse(k, v)?,
            "hand.thumb_offset" => self.hand.thumb_offset = parse(k, v)?,
            "hand.open_angle" => self.hand.open_angle = parse(k, v)?,
            "hand.spread_limit" => self.hand.spread_limit = parse(k, v)?,
            "hand.closing_limit" => self.hand.closing_limit = parse(k, v)?,
            "hand.pregrasp_limit" => self.hand.pregrasp_limit = parse(k, v)?,
            "hand.approach_offset" => self.hand.approach_offset = parse(k, v)?,
            "oracle.friction" => self.oracle.friction = parse(k, v)?,
            "oracle.close_step" => self.oracle.close_step = parse(k, v)?,
            "oracle.surface_tol" => self.oracle.surface_tol = parse(k, v)?,
            "heads.sigma_min" => self.heads.sigma_min = parse(k, v)?,
            "heads.sigma_max" => self.heads.sigma_max = parse(k, v)?,
            "heads.scale_min" => self.heads.scale_min = parse(k, v)?,
            "heads.scale_max" => self.heads.scale_max = parse(k, v)?,
            "episode.max_zoom_steps" => self.episode.max_zoom_steps = parse(k, v)?,
            "episode.scale_floor_px" => self.episode.scale_floor_px = parse(k, v)?,
            "episode.depth_ref" => self.episode.depth_ref = parse(k, v)?,
            "episode.depth_scale" => self.episode.depth_scale = parse(k, v)?,
            "episode.ablation" => {
                self.episode.ablation = Ablation::parse(v).ok_or_else(|| Error::config(k, format!("unknown ablation `{v}`")))?
            }
            "ppo.lr" => self.ppo.lr = parse(k, v)?,
            "ppo.epochs" => self.ppo.epochs = parse(k, v)?,
            "ppo.actors" => self.ppo.actors = parse(k, v)?,
            "ppo.batch_size" => self.ppo.batch_size = parse(k, v)?,
            "ppo.minibatch" => self.ppo.minibatch = parse(k, v)?,
            "ppo.gamma" => {
                self.ppo.gamma = parse(k, v)?;
                self.episode.gamma = self.ppo.gamma;
            }
            "ppo.lambda" => self.ppo.lambda = parse(k, v)?,
            "ppo.clip" => self.ppo.clip = parse(k, v)?,
            "ppo.grad_clip" => self.ppo.grad_clip = parse(k, v)?,
            "ppo.entropy_coef" => self.ppo.entropy_coef = parse(k, v)?,
            "ppo.value_coef" => self.ppo.value_coef = parse(k, v)?,
            "ppo.adam_beta1" => self.ppo.adam_beta1 = parse(k, v)?,
            "ppo.adam_beta2" => self.ppo.adam_beta2 = parse(k, v)?,
            "ppo.adam_eps" => self.ppo.adam_eps = parse(k, v)?,
            "ppo.advantage" => {
                self.ppo.advantage = match v {
                    "rtg" => AdvantageMode::ReturnToGo,
                    "gae" => AdvantageMode::Gae,
                    _ => return Err(Error::config(k, format!("expected rtg or gae, got `{v}`"))),
                }
            }
            "ppo.normalize_advantages" => self.ppo.normalize_advantages = parse(k, v)?,
            "train.net" => self.train.desc = Descriptor::preset(v).map_err(|_| Error::config(k, format!("unknown preset `{v}`")))?,
            "train.batches" => self.train.batches = parse(k, v)?,
            "train.scenes" => {
                self.train.scenes = ScenePolicy::parse(v).ok_or_else(|| Error::config(k, format!("unknown scene policy `{v}`")))?
            }
            "train.eval_every" => self.train.eval_every = parse(k, v)?,
            "train.eval_episodes" => self.train.eval_episodes = parse(k, v)?,
            "train.target_success" => {
                self.train.target_success = if v == "none" { None } else { Some(parse(k, v)?) }
            }
            "train.checkpoint_every" => self.train.checkpoint_every = parse(k, v)?,
            "train.head_gain" => self.train.head_gain = parse(k, v)?,
            "train.metrics_wall_clock" => self.train.wall_clock = parse(k, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.hand.validate()?;
        self.heads.validate()?;
        self.episode.validate()?;
        self.ppo.validate()?;
        self.train.desc.validate()?;
        CameraModel::from_config(&self.camera)?;
        Ok(())
    }

    pub fn setup(&self) -> Result<Setup> {
        Ok(Setup {
            cam: CameraModel::from_config(&self.camera)?,
            hand: self.hand.clone(),
            oracle: self.oracle.clone(),
            heads: self.heads.clone(),
            episode: self.episode.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("ppo.advantage", "gae").unwrap();
        cfg.set("scene.shapes", "sphere").unwrap();
        cfg.set("train.target_success", "0.7").unwrap();
        cfg.set("camera.tilt_deg", "60").unwrap();
        let back = RunConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_echoed_key_is_settable() {
        let cfg = RunConfig::default();
        let mut other = RunConfig::default();
        for (k, v) in cfg.entries() {
            other.set(k, &v).unwrap();
        }
        assert_eq!(other, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse_text("ppo.lr = 1e-3\nppo.bogus = 2\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "ppo.bogus"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn bad_value_is_named() {
        let err = RunConfig::parse_text("ppo.epochs = ten").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "ppo.epochs"));
    }
}
