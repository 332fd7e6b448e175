//! Central-difference checks of the full network + heads backward pass.

use std::collections::BTreeMap;

use super::{Descriptor, Network, Observation, Scalar};
use crate::heads::{self, ActionMaps, GraspAction, HeadConfig, Pins, N_GAUSS};
use crate::rng::from_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: String,
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates where the probe flipped a ReLU and the difference is
    /// not a derivative.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub layers: Vec<LayerReport>,
    pub tol: f64,
}

impl Report {
    pub fn max_rel(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.max_rel < self.tol && l.checked > 0)
    }
}

/// Denominator floor: below it the error is effectively absolute.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn layer_type(name: &str) -> &'static str {
    if name == "log_std" {
        "log_std"
    } else if name.starts_with("enc") {
        if name.ends_with(".b") { "conv_bias" } else { "conv" }
    } else if name.starts_with("lat") {
        "pyramid_1x1"
    } else if name.contains(".up.") {
        "conv_transpose"
    } else if name.contains(".conv.") {
        if name.ends_with(".b") { "conv_bias" } else { "branch_conv" }
    } else if name.starts_with("value") {
        "value_linear"
    } else {
        "other"
    }
}

struct Fixture {
    obs: Observation,
    actions: Vec<(GraspAction, f64)>,
    value_weight: f64,
}

fn loss<T: Scalar>(net: &Network<T>, fx: &Fixture, cfg: &HeadConfig) -> (f64, Vec<bool>) {
    let (maps, cache) = net.forward(&fx.obs).expect("forward");
    let ls = net.log_std();
    let mut l = 0.0;
    for (a, w) in &fx.actions {
        l += w * heads::logp_of(&maps, &ls, cfg, a).expect("raw samples");
    }
    if let Some(v) = cache.value {
        l += fx.value_weight * v.f64();
    }
    (l, cache.relu_pattern())
}

fn analytic<T: Scalar>(net: &Network<T>, fx: &Fixture, cfg: &HeadConfig) -> (Vec<f64>, Vec<f64>, f64) {
    let (maps, cache) = net.forward(&fx.obs).expect("forward");
    let ls = net.log_std();
    let mut dmaps = vec![0.0; maps.data.len()];
    let mut dls = [0.0; N_GAUSS];
    for (a, w) in &fx.actions {
        heads::logp_grad(&maps, &ls, cfg, a, *w, &mut dmaps, &mut dls).expect("raw samples");
    }
    let up: Vec<T> = dmaps.iter().map(|v| T::of(*v)).collect();
    let g = net.backward(&cache, &up, T::of(fx.value_weight)).expect("backward");
    let mut params: Vec<f64> = g.params.iter().map(|v| v.f64()).collect();
    let off = net.log_std_offset();
    for k in 0..N_GAUSS {
        params[off + k] += dls[k];
    }
    (params, g.input.iter().map(|v| v.f64()).collect(), g.scale.f64())
}

fn fixture(net: &Network<f64>, seed: u64, cfg: &HeadConfig) -> Fixture {
    use rand::Rng as _;
    let mut rng = from_seed(seed);
    let r = net.desc.res;
    let obs = Observation {
        res: r,
        plane: (0..r * r).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        scale: 0.6,
    };
    let (maps, _) = net.forward(&obs).expect("forward");
    let ls = net.log_std();
    let mut actions = Vec::new();
    for i in 0..6 {
        let mut a = heads::sample_action(&maps, &ls, cfg, &Pins::none(), &mut rng);
        // Alternate branches so both sides of the zoom mask are exercised.
        a.zoom = i % 2 == 0;
        actions.push((a, rng.gen_range(-1.0..1.0)));
    }
    Fixture { obs, actions, value_weight: 0.7 }
}

/// Checks every parameter (and the input plane and scale) of a network in
/// precision `T` against central differences with step `h`.
pub fn run<T: Scalar>(desc: &Descriptor, seed: u64, h: f64, tol: f64) -> Report {
    let cfg = HeadConfig::default();
    let mut base: Network<f64> = Network::init(desc, seed, 1.0).expect("descriptor");
    // Spread log_std away from -1 so each Gaussian has its own sigma.
    let off = base.log_std_offset();
    for k in 0..N_GAUSS {
        base.params[off + k] = -1.4 + 0.1 * k as f64;
    }
    let fx = fixture(&base, seed ^ 0x5eed, &cfg);
    let mut net: Network<T> = base.cast();
    let (_, pattern0) = loss(&net, &fx, &cfg);
    let (ga, gin, gscale) = analytic(&net, &fx, &cfg);

    let mut acc: BTreeMap<String, LayerReport> = BTreeMap::new();
    let mut record = |layer: &str, rel: Option<f64>| {
        let e = acc.entry(layer.to_string()).or_insert_with(|| LayerReport {
            layer: layer.to_string(),
            max_rel: 0.0,
            checked: 0,
            skipped: 0,
        });
        match rel {
            Some(r) => {
                e.checked += 1;
                e.max_rel = e.max_rel.max(r);
            }
            None => e.skipped += 1,
        }
    };

    let specs = net.specs.clone();
    for spec in &specs {
        let layer = layer_type(&spec.name);
        for i in spec.range() {
            let orig = net.params[i];
            net.params[i] = T::of(orig.f64() + h);
            let (lp, pp) = loss(&net, &fx, &cfg);
            net.params[i] = T::of(orig.f64() - h);
            let (lm, pm) = loss(&net, &fx, &cfg);
            net.params[i] = orig;
            if pp != pattern0 || pm != pattern0 {
                record(layer, None);
                continue;
            }
            let step = (T::of(orig.f64() + h).f64() - T::of(orig.f64() - h).f64()).max(f64::MIN_POSITIVE);
            record(layer, Some(rel_err(ga[i], (lp - lm) / step)));
        }
    }

    let mut probe = |f: &dyn Fn(&mut Fixture, f64), analytic: f64, layer: &str, fx: &mut Fixture| {
        f(fx, h);
        let (lp, pp) = loss(&net, fx, &cfg);
        f(fx, -2.0 * h);
        let (lm, pm) = loss(&net, fx, &cfg);
        f(fx, h);
        if pp != pattern0 || pm != pattern0 {
            record(layer, None);
        } else {
            record(layer, Some(rel_err(analytic, (lp - lm) / (2.0 * h))));
        }
    };
    let mut fx = fx;
    for (j, g) in gin.iter().enumerate().step_by(7) {
        probe(&|fx: &mut Fixture, d| fx.obs.plane[j] += d, *g, "input", &mut fx);
    }
    probe(&|fx: &mut Fixture, d| fx.obs.scale += d, gscale, "scale_plane", &mut fx);

    Report {
        layers: acc.into_values().collect(),
        tol,
    }
}

/// Finite-difference check of the heads alone: gradient of a weighted sum of
/// logps with respect to every map value and log_std.
pub fn heads_check(res: usize, seed: u64, h: f64) -> f64 {
    use rand::Rng as _;
    let cfg = HeadConfig::default();
    let mut rng = from_seed(seed);
    let mut maps = ActionMaps::from_vec(res, (0..heads::CHANNELS * res * res).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let mut ls: [f64; N_GAUSS] = std::array::from_fn(|_| rng.gen_range(-2.0..-0.2));
    let actions: Vec<(GraspAction, f64)> = (0..8)
        .map(|_| (heads::sample_action(&maps, &ls, &cfg, &Pins::none(), &mut rng), rng.gen_range(-1.0..1.0)))
        .collect();
    let total = |m: &ActionMaps, s: &[f64; N_GAUSS]| -> f64 {
        actions.iter().map(|(a, w)| w * heads::logp_of(m, s, &cfg, a).unwrap()).sum()
    };
    let mut gm = vec![0.0; maps.data.len()];
    let mut gs = [0.0; N_GAUSS];
    for (a, w) in &actions {
        heads::logp_grad(&maps, &ls, &cfg, a, *w, &mut gm, &mut gs).unwrap();
    }
    let mut worst: f64 = 0.0;
    for i in 0..maps.data.len() {
        let o = maps.data[i];
        maps.data[i] = o + h;
        let lp = total(&maps, &ls);
        maps.data[i] = o - h;
        let lm = total(&maps, &ls);
        maps.data[i] = o;
        worst = worst.max(rel_err(gm[i], (lp - lm) / (2.0 * h)));
    }
    for k in 0..N_GAUSS {
        let o = ls[k];
        ls[k] = o + h;
        let lp = total(&maps, &ls);
        ls[k] = o - h;
        let lm = total(&maps, &ls);
        ls[k] = o;
        worst = worst.max(rel_err(gs[k], (lp - lm) / (2.0 * h)));
    }
    worst
}
