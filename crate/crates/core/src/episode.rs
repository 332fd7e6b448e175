//! One grasp attempt: zoom in repeatedly, then grasp and score.

use serde::{Deserialize, Serialize};

use crate::heads::{self, ActionMaps, GraspAction, HeadConfig, Pins, G_PITCH, G_SPREAD, N_GAUSS};
use crate::nn::{Network, Observation, Scalar};
use crate::oracle::{evaluate_grasp, GraspDiagnostics, GraspPose, HandModel, OracleConfig};
use crate::render::{self, CameraModel, CropWindow, DepthImage};
use crate::rng::{self, Rng};
use crate::scene::Scene;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    NoAttention,
    TopDown,
    Parallel,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "no_attention" => Some(Self::NoAttention),
            "top_down" => Some(Self::TopDown),
            "parallel" => Some(Self::Parallel),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::NoAttention => "no_attention",
            Self::TopDown => "top_down",
            Self::Parallel => "parallel",
        }
    }

    pub fn pins(self) -> Pins {
        let mut p = Pins::none();
        match self {
            Self::None => {}
            Self::NoAttention => p.zoom = Some(false),
            // Raw 0.5 maps to pitch pi/2; raw 0 maps to spread 0.
            Self::TopDown => p.raw[G_PITCH] = Some(0.5),
            Self::Parallel => p.raw[G_SPREAD] = Some(0.0),
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub max_zoom_steps: usize,
    /// Smallest allowed window side, in native pixels.
    pub scale_floor_px: f64,
    pub gamma: f64,
    /// Network input is `(depth_ref - depth) / depth_scale`.
    pub depth_ref: f64,
    pub depth_scale: f64,
    pub ablation: Ablation,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_zoom_steps: 5,
            scale_floor_px: 24.0,
            gamma: 0.99,
            depth_ref: 0.6,
            depth_scale: 0.1,
            ablation: Ablation::None,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_floor_px > 0.0) {
            return Err(Error::config("scale_floor_px", "must be > 0"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma", "must be in (0, 1]"));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::config("depth_scale", "must be > 0"));
        }
        Ok(())
    }

    pub fn observe(&self, img: &DepthImage) -> Observation {
        Observation {
            res: img.rows,
            plane: img.data.iter().map(|d| (self.depth_ref - d) / self.depth_scale).collect(),
            scale: img.window.composed_scale,
        }
    }
}

/// Anything that turns an observation into action maps.
pub trait Policy {
    fn res(&self) -> usize;
    fn maps(&self, obs: &Observation) -> Result<ActionMaps>;
    fn log_std(&self) -> [f64; N_GAUSS];
}

impl<T: Scalar> Policy for Network<T> {
    fn res(&self) -> usize {
        self.desc.res
    }

    fn maps(&self, obs: &Observation) -> Result<ActionMaps> {
        Ok(self.forward(obs)?.0)
    }

    fn log_std(&self) -> [f64; N_GAUSS] {
        Network::log_std(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    #[serde(skip)]
    pub obs: Option<Observation>,
    pub action: GraspAction,
    pub reward: f64,
    pub done: bool,
    pub window: CropWindow,
    /// Per-step scale actually applied after the floor clamp (zoom steps).
    pub applied_scale: Option<f64>,
    pub forced_stop: bool,
    pub grasp: Option<GraspPose>,
    pub diagnostics: Option<GraspDiagnostics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub transitions: Vec<Transition>,
    /// Native frame and per-step images, kept only when asked for.
    pub images: Vec<DepthImage>,
    pub native: Option<DepthImage>,
}

impl Episode {
    pub fn success(&self) -> bool {
        self.transitions.last().map(|t| t.reward > 0.0).unwrap_or(false)
    }

    pub fn zoom_depth(&self) -> usize {
        self.transitions.len().saturating_sub(1)
    }

    pub fn forced_stop(&self) -> bool {
        self.transitions.last().map(|t| t.forced_stop).unwrap_or(false)
    }
}

/// Everything fixed across episodes.
#[derive(Debug, Clone)]
pub struct Setup {
    pub cam: CameraModel,
    pub hand: HandModel,
    pub oracle: OracleConfig,
    pub heads: HeadConfig,
    pub episode: EpisodeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Stochastic,
    Greedy,
}

pub struct RunOptions {
    pub sampling: Sampling,
    pub keep_obs: bool,
    pub keep_images: bool,
}

impl RunOptions {
    pub fn training() -> Self {
        Self {
            sampling: Sampling::Stochastic,
            keep_obs: true,
            keep_images: false,
        }
    }

    pub fn eval() -> Self {
        Self {
            sampling: Sampling::Greedy,
            keep_obs: false,
            keep_images: false,
        }
    }
}

pub fn run_episode(scene: &Scene, setup: &Setup, policy: &dyn Policy, rng: &mut Rng, opts: &RunOptions) -> Result<Episode> {
    let cfg = &setup.episode;
    let cam = &setup.cam;
    let res = (policy.res(), policy.res());
    let native = render::render_depth(scene, cam);
    let mut img = render::resample(&native, &cam.full_window(), res);
    let base_pins = cfg.ablation.pins();
    let cap = if cfg.ablation == Ablation::NoAttention { 0 } else { cfg.max_zoom_steps };
    let short_side = cam.rows.min(cam.cols) as f64;
    let log_std = policy.log_std();

    let mut transitions = Vec::new();
    let mut images = Vec::new();
    loop {
        let obs = cfg.observe(&img);
        let maps = policy.maps(&obs)?;
        let at_cap = transitions.len() >= cap;
        let mut pins = base_pins;
        if at_cap {
            pins.zoom = Some(false);
        }
        let action = match opts.sampling {
            Sampling::Stochastic => heads::sample_action(&maps, &log_std, &setup.heads, &pins, rng),
            Sampling::Greedy => heads::greedy_action(&maps, &log_std, &setup.heads, &pins),
        };
        // A zoom the cap overrode: what the unpinned policy would have done.
        let forced_stop = at_cap
            && base_pins.zoom.is_none()
            && match opts.sampling {
                Sampling::Stochastic => rng.gen_bool_logit(maps.at(heads::CH_ZOOM, action.pixel)),
                Sampling::Greedy => maps.at(heads::CH_ZOOM, action.pixel) > 0.0,
            };
        let window = img.window;
        if opts.keep_images {
            images.push(img.clone());
        }
        let keep = if opts.keep_obs { Some(obs) } else { None };

        if action.zoom {
            let floor = cfg.scale_floor_px / (window.composed_scale * short_side);
            let applied = action.scale.max(floor).min(1.0);
            img = render::crop_resize(&native, &img, action.pixel, applied, res);
            transitions.push(Transition {
                obs: keep,
                action,
                reward: 0.0,
                done: false,
                window,
                applied_scale: Some(applied),
                forced_stop: false,
                grasp: None,
                diagnostics: None,
            });
            continue;
        }

        let depth = img.data[action.pixel.0 * res.1 + action.pixel.1];
        let position = render::deproject(action.pixel, depth, cam, &window, res)?;
        let pose = GraspPose {
            position,
            roll: action.roll,
            pitch: action.pitch,
            yaw: action.yaw,
            spread: action.spread,
            fingers: action.fingers,
        };
        let out = evaluate_grasp(scene, &setup.hand, &pose, &setup.oracle);
        transitions.push(Transition {
            obs: keep,
            action,
            reward: if out.success { 1.0 } else { 0.0 },
            done: true,
            window,
            applied_scale: None,
            forced_stop,
            grasp: Some(pose),
            diagnostics: Some(out.diagnostics),
        });
        break;
    }
    Ok(Episode {
        seed: scene.rng_seed,
        transitions,
        images,
        native: if opts.keep_images { Some(native) } else { None },
    })
}

trait LogitCoin {
    fn gen_bool_logit(&mut self, logit: f64) -> bool;
}

impl LogitCoin for Rng {
    fn gen_bool_logit(&mut self, logit: f64) -> bool {
        use rand::Rng as _;
        self.gen::<f64>() < heads::sigmoid(logit)
    }
}

/// Seed for the policy stream of episode `index` under `seed`.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    rng::derive(seed, index)
}

pub fn policy_rng(episode_seed: u64) -> Rng {
    rng::from_seed(rng::derive(episode_seed, rng::stream::POLICY))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{CH_GAUSS, CH_POSITION, CH_ZOOM, G_SCALE};
    use crate::render::CameraConfig;
    use crate::scene::{generate_scene, SceneConfig, SceneMode};

    struct Fixed {
        maps: ActionMaps,
    }

    impl Policy for Fixed {
        fn res(&self) -> usize {
            self.maps.res
        }
        fn maps(&self, _: &Observation) -> Result<ActionMaps> {
            Ok(self.maps.clone())
        }
        fn log_std(&self) -> [f64; N_GAUSS] {
            [-6.0; N_GAUSS]
        }
    }

    fn setup() -> Setup {
        Setup {
            cam: CameraModel::from_config(&CameraConfig::default()).unwrap(),
            hand: HandModel::default(),
            oracle: OracleConfig::default(),
            heads: HeadConfig::default(),
            episode: EpisodeConfig::default(),
        }
    }

    fn fixed(zoom_logit: f64, scale_raw: f64) -> Fixed {
        let mut maps = ActionMaps::zeros(16);
        maps.channel_mut(CH_ZOOM).fill(zoom_logit);
        maps.channel_mut(CH_GAUSS + G_SCALE).fill(scale_raw);
        let i = maps.index(CH_POSITION, (8, 8));
        maps.data[i] = 40.0;
        Fixed { maps }
    }

    fn scene() -> Scene {
        generate_scene(3, SceneMode::Cluttered, &SceneConfig::default())
    }

    #[test]
    fn immediate_grasp_is_one_step() {
        let mut rng = rng::from_seed(1);
        let ep = run_episode(&scene(), &setup(), &fixed(-40.0, 0.0), &mut rng, &RunOptions::training()).unwrap();
        assert_eq!(ep.transitions.len(), 1);
        let t = &ep.transitions[0];
        assert!(t.done && t.window == setup().cam.full_window());
    }

    #[test]
    fn zoom_cap_forces_grasp() {
        let mut rng = rng::from_seed(2);
        let ep = run_episode(&scene(), &setup(), &fixed(40.0, 0.0), &mut rng, &RunOptions::training()).unwrap();
        assert_eq!(ep.transitions.len(), 6);
        assert!(ep.forced_stop());
        let last = ep.transitions.last().unwrap();
        assert!(last.done && !last.action.zoom && last.action.logp.zoom == Some(0.0));
        assert_eq!(ep.transitions.iter().filter(|t| t.done).count(), 1);
    }

    #[test]
    fn scale_floor_clamps_upward() {
        let mut rng = rng::from_seed(3);
        // Raw scale mean sigmoid(-40) ~ 0 clamps to 0.3 and then hits the floor.
        let ep = run_episode(&scene(), &setup(), &fixed(40.0, -40.0), &mut rng, &RunOptions::training()).unwrap();
        for t in &ep.transitions {
            assert!(t.window.size_rows >= 24.0 - 1e-9);
        }
        let last = ep.transitions.last().unwrap().window;
        assert!((last.size_rows - 24.0).abs() < 1e-9);
    }

    #[test]
    fn no_attention_never_zooms() {
        let mut s = setup();
        s.episode.ablation = Ablation::NoAttention;
        let mut rng = rng::from_seed(4);
        let ep = run_episode(&scene(), &s, &fixed(40.0, 0.0), &mut rng, &RunOptions::training()).unwrap();
        assert_eq!(ep.transitions.len(), 1);
        assert!(!ep.forced_stop());
    }

    #[test]
    fn grasp_point_is_on_rendered_surface() {
        let s = setup();
        let mut rng = rng::from_seed(5);
        let sc = scene();
        let ep = run_episode(&sc, &s, &fixed(0.0, 0.0), &mut rng, &RunOptions::training()).unwrap();
        let last = ep.transitions.last().unwrap();
        let p = last.grasp.unwrap().position;
        let depth = s.cam.world_to_camera(&p).z;
        let native = render::render_depth(&sc, &s.cam);
        let img = render::resample(&native, &last.window, (16, 16));
        let d = img.data[last.action.pixel.0 * 16 + last.action.pixel.1];
        assert!((depth - d).abs() < 1e-9);
    }
}
