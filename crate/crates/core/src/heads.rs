//! Action heads: spatial softmax over pixels, Bernoulli zoom, and Gaussian
//! heads for crop scale, orientation and finger joints.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

pub const CHANNELS: usize = 10;
pub const CH_POSITION: usize = 0;
pub const CH_ZOOM: usize = 1;
/// First Gaussian channel; Gaussian component `k` reads channel `CH_GAUSS + k`.
pub const CH_GAUSS: usize = 2;

pub const N_GAUSS: usize = 8;
pub const G_SCALE: usize = 0;
pub const G_ROLL: usize = 1;
pub const G_PITCH: usize = 2;
pub const G_YAW: usize = 3;
pub const G_SPREAD: usize = 4;
pub const G_FINGER: usize = 5;

pub const GAUSS_NAMES: [&str; N_GAUSS] = ["scale", "roll", "pitch", "yaw", "spread", "finger1", "finger2", "finger3"];

pub const SPREAD_RANGE: f64 = FRAC_PI_2;
pub const FINGER_RANGE: f64 = 0.61;
pub const LOG_STD_INIT: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Act {
    Sigmoid,
    Tanh,
}

const ACTS: [Act; N_GAUSS] = [
    Act::Sigmoid,
    Act::Tanh,
    Act::Sigmoid,
    Act::Tanh,
    Act::Sigmoid,
    Act::Sigmoid,
    Act::Sigmoid,
    Act::Sigmoid,
];

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// (value, derivative) of the activation at `x`.
fn activate(a: Act, x: f64) -> (f64, f64) {
    match a {
        Act::Sigmoid => {
            let s = sigmoid(x);
            (s, s * (1.0 - s))
        }
        Act::Tanh => {
            let t = x.tanh();
            (t, 1.0 - t * t)
        }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.01,
            sigma_max: 1.0,
            scale_min: 0.3,
            scale_max: 0.95,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(Error::config("sigma_min", "need 0 < sigma_min <= sigma_max"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::config("scale_min", "need 0 < scale_min <= scale_max <= 1"));
        }
        Ok(())
    }

    /// Clamped sigma and whether the clamp was inactive (gradient flows).
    pub fn sigma(&self, log_std: f64) -> (f64, bool) {
        let s = log_std.exp();
        if s < self.sigma_min {
            (self.sigma_min, false)
        } else if s > self.sigma_max {
            (self.sigma_max, false)
        } else {
            (s, true)
        }
    }
}

/// Ten pre-activation maps at policy resolution, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionMaps {
    pub res: usize,
    pub data: Vec<f64>,
}

impl ActionMaps {
    pub fn zeros(res: usize) -> Self {
        Self {
            res,
            data: vec![0.0; CHANNELS * res * res],
        }
    }

    pub fn from_vec(res: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * res * res {
            return Err(Error::Shape(format!(
                "action maps need {} values, got {}",
                CHANNELS * res * res,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("action map value {i}")));
        }
        Ok(Self { res, data })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.res * self.res;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.res * self.res;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, p: Pixel) -> f64 {
        self.data[self.index(c, p)]
    }

    pub fn index(&self, c: usize, p: Pixel) -> usize {
        (c * self.res + p.0) * self.res + p.1
    }
}

pub type Pixel = (usize, usize);

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn position_logp(maps: &ActionMaps, p: Pixel) -> f64 {
    let l = maps.channel(CH_POSITION);
    l[p.0 * maps.res + p.1] - logsumexp(l)
}

pub fn sample_position(maps: &ActionMaps, rng: &mut Rng) -> (Pixel, f64) {
    let l = maps.channel(CH_POSITION);
    let lse = logsumexp(l);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut pick = l.len() - 1;
    for (i, v) in l.iter().enumerate() {
        acc += (v - lse).exp();
        if u < acc {
            pick = i;
            break;
        }
    }
    let p = (pick / maps.res, pick % maps.res);
    (p, l[pick] - lse)
}

pub fn zoom_logp(logit: f64, bit: bool) -> f64 {
    if bit {
        -softplus(-logit)
    } else {
        -softplus(logit)
    }
}

pub fn sample_zoom(maps: &ActionMaps, p: Pixel, rng: &mut Rng) -> (bool, f64) {
    let logit = maps.at(CH_ZOOM, p);
    let bit = rng.gen::<f64>() < sigmoid(logit);
    (bit, zoom_logp(logit, bit))
}

pub fn gauss_logp(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln()
}

fn gauss_mean(maps: &ActionMaps, p: Pixel, k: usize) -> f64 {
    activate(ACTS[k], maps.at(CH_GAUSS + k, p)).0
}

fn draw_gauss(maps: &ActionMaps, p: Pixel, k: usize, log_std: &[f64; N_GAUSS], cfg: &HeadConfig, rng: &mut Rng) -> (f64, f64) {
    let mean = gauss_mean(maps, p, k);
    let (sigma, _) = cfg.sigma(log_std[k]);
    let z: f64 = StandardNormal.sample(rng);
    let x = mean + sigma * z;
    (x, gauss_logp(x, mean, sigma))
}

pub fn sample_scale(maps: &ActionMaps, p: Pixel, log_std: &[f64; N_GAUSS], cfg: &HeadConfig, rng: &mut Rng) -> (f64, f64, f64) {
    let (x, lp) = draw_gauss(maps, p, G_SCALE, log_std, cfg, rng);
    (emit(G_SCALE, x, cfg), lp, x)
}

/// Maps a raw normalized draw of Gaussian component `k` onto the executed value.
pub fn emit(k: usize, x: f64, cfg: &HeadConfig) -> f64 {
    match k {
        G_SCALE => x.clamp(cfg.scale_min, cfg.scale_max),
        G_ROLL | G_YAW => wrap_angle(x * PI),
        G_PITCH => x.clamp(0.0, 1.0) * PI,
        G_SPREAD => (x * SPREAD_RANGE).clamp(0.0, SPREAD_RANGE),
        _ => (x * FINGER_RANGE).clamp(0.0, FINGER_RANGE),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LogpComponents {
    pub position: Option<f64>,
    pub zoom: Option<f64>,
    pub dof: [Option<f64>; N_GAUSS],
}

/// Masked sum: the scale term counts only on zoom steps, the seven grasp
/// terms only on grasp steps.
pub fn compose_logp(c: &LogpComponents, zoom: bool) -> Result<f64> {
    let pos = c.position.ok_or(Error::MissingComponent("position"))?;
    let z = c.zoom.ok_or(Error::MissingComponent("zoom"))?;
    let mut total = pos + z;
    if zoom {
        total += c.dof[G_SCALE].ok_or(Error::MissingComponent("scale"))?;
    } else {
        for k in 1..N_GAUSS {
            total += c.dof[k].ok_or(Error::MissingComponent(GAUSS_NAMES[k]))?;
        }
    }
    Ok(total)
}

/// Components that are fixed instead of sampled. A pinned component
/// contributes log-probability 0 and no gradient.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pins {
    pub zoom: Option<bool>,
    /// Raw normalized values for pinned Gaussian components.
    pub raw: [Option<f64>; N_GAUSS],
}

impl Pins {
    pub fn none() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspAction {
    pub pixel: Pixel,
    pub zoom: bool,
    pub scale: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub spread: f64,
    pub fingers: [f64; 3],
    pub logp: LogpComponents,
    pub logp_total: f64,
    pub raw_samples: Option<[f64; N_GAUSS]>,
    pub zoom_pinned: bool,
    pub pinned: [bool; N_GAUSS],
}

impl GraspAction {
    fn from_raw(pixel: Pixel, zoom: bool, raw: [f64; N_GAUSS], cfg: &HeadConfig) -> Self {
        let e = |k| emit(k, raw[k], cfg);
        Self {
            pixel,
            zoom,
            scale: e(G_SCALE),
            roll: e(G_ROLL),
            pitch: e(G_PITCH),
            yaw: e(G_YAW),
            spread: e(G_SPREAD),
            fingers: [e(G_FINGER), e(G_FINGER + 1), e(G_FINGER + 2)],
            logp: LogpComponents::default(),
            logp_total: 0.0,
            raw_samples: Some(raw),
            zoom_pinned: false,
            pinned: [false; N_GAUSS],
        }
    }
}

pub fn sample_action(maps: &ActionMaps, log_std: &[f64; N_GAUSS], cfg: &HeadConfig, pins: &Pins, rng: &mut Rng) -> GraspAction {
    let (pixel, lp_pos) = sample_position(maps, rng);
    let (zoom, lp_zoom) = match pins.zoom {
        Some(b) => (b, 0.0),
        None => sample_zoom(maps, pixel, rng),
    };
    let mut raw = [0.0; N_GAUSS];
    let mut lps = [Some(0.0); N_GAUSS];
    for k in 0..N_GAUSS {
        match pins.raw[k] {
            Some(v) => raw[k] = v,
            None => {
                let (x, lp) = draw_gauss(maps, pixel, k, log_std, cfg, rng);
                raw[k] = x;
                lps[k] = Some(lp);
            }
        }
    }
    let mut a = GraspAction::from_raw(pixel, zoom, raw, cfg);
    a.zoom_pinned = pins.zoom.is_some();
    a.pinned = pins.raw.map(|v| v.is_some());
    a.logp = LogpComponents {
        position: Some(lp_pos),
        zoom: Some(lp_zoom),
        dof: lps,
    };
    a.logp_total = compose_logp(&a.logp, zoom).expect("all components present");
    a
}

/// Deterministic action: most likely pixel, zoom iff p > 0.5, Gaussian means.
pub fn greedy_action(maps: &ActionMaps, log_std: &[f64; N_GAUSS], cfg: &HeadConfig, pins: &Pins) -> GraspAction {
    let l = maps.channel(CH_POSITION);
    let mut best = 0;
    for (i, v) in l.iter().enumerate() {
        if *v > l[best] {
            best = i;
        }
    }
    let pixel = (best / maps.res, best % maps.res);
    let zoom = pins.zoom.unwrap_or(maps.at(CH_ZOOM, pixel) > 0.0);
    let mut raw = [0.0; N_GAUSS];
    for k in 0..N_GAUSS {
        raw[k] = pins.raw[k].unwrap_or_else(|| gauss_mean(maps, pixel, k));
    }
    let mut a = GraspAction::from_raw(pixel, zoom, raw, cfg);
    a.zoom_pinned = pins.zoom.is_some();
    a.pinned = pins.raw.map(|v| v.is_some());
    a.logp = components_of(maps, log_std, cfg, &a, &raw);
    a.logp_total = compose_logp(&a.logp, zoom).expect("all components present");
    a
}

fn components_of(maps: &ActionMaps, log_std: &[f64; N_GAUSS], cfg: &HeadConfig, a: &GraspAction, raw: &[f64; N_GAUSS]) -> LogpComponents {
    let mut dof = [Some(0.0); N_GAUSS];
    for k in 0..N_GAUSS {
        if !a.pinned[k] {
            let (sigma, _) = cfg.sigma(log_std[k]);
            dof[k] = Some(gauss_logp(raw[k], gauss_mean(maps, a.pixel, k), sigma));
        }
    }
    LogpComponents {
        position: Some(position_logp(maps, a.pixel)),
        zoom: Some(if a.zoom_pinned { 0.0 } else { zoom_logp(maps.at(CH_ZOOM, a.pixel), a.zoom) }),
        dof,
    }
}

/// Log-probability of a stored action under the given parameters.
pub fn logp_of(maps: &ActionMaps, log_std: &[f64; N_GAUSS], cfg: &HeadConfig, a: &GraspAction) -> Result<f64> {
    let raw = a.raw_samples.ok_or(Error::MissingRawSamples)?;
    compose_logp(&components_of(maps, log_std, cfg, a, &raw), a.zoom)
}

/// Adds `weight * d logp_total / d maps` into `grad_maps` and the same for
/// `grad_log_std`; returns logp_total.
pub fn logp_grad(
    maps: &ActionMaps,
    log_std: &[f64; N_GAUSS],
    cfg: &HeadConfig,
    a: &GraspAction,
    weight: f64,
    grad_maps: &mut [f64],
    grad_log_std: &mut [f64; N_GAUSS],
) -> Result<f64> {
    let raw = a.raw_samples.ok_or(Error::MissingRawSamples)?;
    let n = maps.res * maps.res;
    let l = maps.channel(CH_POSITION);
    let lse = logsumexp(l);
    let pi = a.pixel.0 * maps.res + a.pixel.1;
    for (i, v) in l.iter().enumerate() {
        grad_maps[i] -= weight * (v - lse).exp();
    }
    grad_maps[pi] += weight;

    if !a.zoom_pinned {
        let z = maps.at(CH_ZOOM, a.pixel);
        let b = if a.zoom { 1.0 } else { 0.0 };
        grad_maps[CH_ZOOM * n + pi] += weight * (b - sigmoid(z));
    }

    let active = |k: usize| if a.zoom { k == G_SCALE } else { k != G_SCALE };
    for k in (0..N_GAUSS).filter(|&k| active(k) && !a.pinned[k]) {
        let idx = maps.index(CH_GAUSS + k, a.pixel);
        let (mean, dmean) = activate(ACTS[k], maps.data[idx]);
        let (sigma, free) = cfg.sigma(log_std[k]);
        let z = (raw[k] - mean) / sigma;
        grad_maps[idx] += weight * z / sigma * dmean;
        if free {
            grad_log_std[k] += weight * (z * z - 1.0);
        }
    }
    logp_of(maps, log_std, cfg, a)
}

/// Policy entropy at a pixel: full position entropy plus the zoom and
/// Gaussian entropies there. Logged only.
pub fn entropy(maps: &ActionMaps, log_std: &[f64; N_GAUSS], cfg: &HeadConfig, p: Pixel) -> f64 {
    let l = maps.channel(CH_POSITION);
    let lse = logsumexp(l);
    let h_pos: f64 = l.iter().map(|v| -(v - lse).exp() * (v - lse)).sum();
    let z = maps.at(CH_ZOOM, p);
    let q = sigmoid(z);
    let h_zoom = -(q * zoom_logp(z, true) + (1.0 - q) * zoom_logp(z, false));
    let h_gauss: f64 = log_std
        .iter()
        .map(|s| 0.5 * (2.0 * PI * std::f64::consts::E).ln() + cfg.sigma(*s).0.ln())
        .sum();
    h_pos + h_zoom + h_gauss
}
