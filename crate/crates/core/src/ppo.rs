//! Rollout collection, return estimation and the clipped PPO update.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{self, Episode, Policy, RunOptions, Setup, Transition};
use crate::heads::{self, ActionMaps, N_GAUSS};
use crate::nn::{Network, Observation, Scalar};
use crate::rng::{self, Rng};
use crate::scene::{generate_scene, sample_mode, SceneConfig, SceneMode};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Discounted return-to-go, no baseline.
    ReturnToGo,
    /// GAE over a learned value head.
    Gae,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub lr: f64,
    pub epochs: usize,
    pub actors: usize,
    pub batch_size: usize,
    pub minibatch: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub grad_clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub advantage: AdvantageMode,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 10,
            actors: 14,
            batch_size: 500,
            minibatch: 96,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            grad_clip: 20.0,
            entropy_coef: 0.0,
            value_coef: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            advantage: AdvantageMode::ReturnToGo,
            normalize_advantages: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch == 0 || self.minibatch > self.batch_size {
            return Err(Error::config("minibatch", "need 0 < minibatch <= batch_size"));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config("clip", "must be in (0, 1)"));
        }
        if self.actors == 0 {
            return Err(Error::config("actors", "must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("lr", "lr and grad_clip must be > 0"));
        }
        Ok(())
    }
}

/// Where training scenes come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePolicy {
    Single,
    Cluttered,
    Mixed,
}

impl ScenePolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" => Some(Self::Single),
            "cluttered" => Some(Self::Cluttered),
            "mixed" => Some(Self::Mixed),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Single => "single",
            Self::Cluttered => "cluttered",
            Self::Mixed => "mixed",
        }
    }

    pub fn mode(self, seed: u64) -> SceneMode {
        match self {
            Self::Single => SceneMode::Single,
            Self::Cluttered => SceneMode::Cluttered,
            Self::Mixed => sample_mode(seed),
        }
    }
}

/// Runs episode `index` of the stream rooted at `seed`.
pub fn run_indexed(policy: &(dyn Policy + Sync), setup: &Setup, scenes: &SceneConfig, which: ScenePolicy, seed: u64, index: u64, opts: &RunOptions) -> Result<Episode> {
    let ep_seed = episode::episode_seed(seed, index);
    let scene = generate_scene(ep_seed, which.mode(ep_seed), scenes);
    let mut rng = episode::policy_rng(ep_seed);
    episode::run_episode(&scene, setup, policy, &mut rng, opts)
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub episodes: Vec<Episode>,
    /// Index of the first episode the next batch should use.
    pub next_index: u64,
}

impl Batch {
    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(|e| e.transitions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Whole episodes in index order until at least `batch_size` transitions.
/// Episodes run in waves of `actors`; the result does not depend on the
/// actor count.
#[allow(clippy::too_many_arguments)]
pub fn collect_batch(
    policy: &(dyn Policy + Sync),
    setup: &Setup,
    scenes: &SceneConfig,
    which: ScenePolicy,
    seed: u64,
    first_index: u64,
    cfg: &PpoConfig,
    pool: &rayon::ThreadPool,
) -> Result<Batch> {
    let mut episodes = Vec::new();
    let mut total = 0;
    let mut next = first_index;
    let opts = RunOptions::training();
    while total < cfg.batch_size {
        let wave: Vec<u64> = (next..next + cfg.actors as u64).collect();
        let results: Vec<Result<Episode>> = pool.install(|| {
            wave.par_iter()
                .map(|&i| run_indexed(policy, setup, scenes, which, seed, i, &opts))
                .collect()
        });
        for r in results {
            if total >= cfg.batch_size {
                break;
            }
            let ep = r?;
            total += ep.transitions.len();
            episodes.push(ep);
            next += 1;
        }
    }
    Ok(Batch { episodes, next_index: next })
}

/// Per-transition (return, advantage) for one complete episode.
pub fn episode_returns(ep: &[Transition], values: Option<&[f64]>, cfg: &PpoConfig) -> Result<Vec<(f64, f64)>> {
    if ep.last().map(|t| !t.done).unwrap_or(true) || ep[..ep.len() - 1].iter().any(|t| t.done) {
        return Err(Error::IncompleteEpisode);
    }
    let n = ep.len();
    let mut out = vec![(0.0, 0.0); n];
    match (cfg.advantage, values) {
        (AdvantageMode::Gae, Some(v)) => {
            let mut adv = 0.0;
            for t in (0..n).rev() {
                let next_v = if t + 1 < n { v[t + 1] } else { 0.0 };
                let delta = ep[t].reward + cfg.gamma * next_v - v[t];
                adv = delta + cfg.gamma * cfg.lambda * adv;
                out[t] = (adv + v[t], adv);
            }
        }
        (AdvantageMode::Gae, None) => return Err(Error::MissingComponent("value")),
        (AdvantageMode::ReturnToGo, _) => {
            let mut g = 0.0;
            for t in (0..n).rev() {
                g = ep[t].reward + cfg.gamma * g;
                out[t] = (g, g);
            }
        }
    }
    Ok(out)
}

/// One flattened training sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub obs: Observation,
    pub action: heads::GraspAction,
    pub old_logp: f64,
    pub ret: f64,
    pub adv: f64,
}

/// Flattens a batch into samples with returns and advantages. `values`
/// maps an observation to the value head output (GAE mode only).
pub fn compute_returns(batch: &Batch, cfg: &PpoConfig, values: Option<&dyn Fn(&Observation) -> Result<f64>>) -> Result<Vec<Sample>> {
    let mut samples = Vec::with_capacity(batch.len());
    for ep in &batch.episodes {
        let obs: Vec<&Observation> = ep
            .transitions
            .iter()
            .map(|t| t.obs.as_ref().ok_or(Error::MissingComponent("observation")))
            .collect::<Result<_>>()?;
        let v = match (cfg.advantage, values) {
            (AdvantageMode::Gae, Some(f)) => Some(obs.iter().map(|o| f(o)).collect::<Result<Vec<_>>>()?),
            _ => None,
        };
        let ra = episode_returns(&ep.transitions, v.as_deref(), cfg)?;
        for ((t, o), (ret, adv)) in ep.transitions.iter().zip(obs).zip(ra) {
            samples.push(Sample {
                obs: o.clone(),
                action: t.action.clone(),
                old_logp: t.action.logp_total,
                ret,
                adv,
            });
        }
    }
    if cfg.normalize_advantages && samples.len() > 1 {
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s.adv).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s.adv - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-8);
        for s in &mut samples {
            s.adv = (s.adv - mean) / std;
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f64], cfg: &PpoConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let step = cfg.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_eps);
            params[i] = (params[i] as f64 - step) as f32;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean clipped-surrogate loss over all minibatches.
    pub surrogate: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    /// Mean pre-clip global gradient norm.
    pub grad_norm: f64,
    pub max_post_clip_norm: f64,
    pub entropy: f64,
    pub value_loss: f64,
    /// Ratios seen in the first minibatch of the first epoch.
    pub first_ratios: Vec<f64>,
    pub first_surrogate: f64,
    pub minibatches: usize,
}

/// Loss, gradient and bookkeeping of one minibatch at the current params.
pub struct MinibatchEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub ratios: Vec<f64>,
    pub clipped: usize,
    pub kl: f64,
    pub entropy: f64,
    pub value_loss: f64,
}

struct SampleGrad {
    grad: Vec<f64>,
    loss: f64,
    ratio: f64,
    kl: f64,
    entropy: f64,
    value_loss: f64,
}

fn sample_grad<T: Scalar>(net: &Network<T>, s: &Sample, m: f64, cfg: &PpoConfig, setup: &Setup) -> Result<SampleGrad> {
    let (maps, cache) = net.forward(&s.obs)?;
    let ls = net.log_std();
    let hc = &setup.heads;
    let logp = heads::logp_of(&maps, &ls, hc, &s.action)?;
    let ratio = (logp - s.old_logp).exp();
    let lo = 1.0 - cfg.clip;
    let hi = 1.0 + cfg.clip;
    let unclipped = ratio * s.adv;
    let clipped = ratio.clamp(lo, hi) * s.adv;
    let loss = -unclipped.min(clipped) / m;
    // The min picks the unclipped branch: gradient flows through the ratio.
    let w = if unclipped <= clipped { -ratio * s.adv / m } else { 0.0 };

    let mut dmaps = vec![0.0; maps.data.len()];
    let mut dls = [0.0; N_GAUSS];
    if w != 0.0 {
        heads::logp_grad(&maps, &ls, hc, &s.action, w, &mut dmaps, &mut dls)?;
    }
    let entropy = heads::entropy(&maps, &ls, hc, s.action.pixel);
    let mut dvalue = 0.0;
    let mut value_loss = 0.0;
    if cfg.advantage == AdvantageMode::Gae {
        let v = cache.value.ok_or(Error::MissingComponent("value head"))?.f64();
        value_loss = 0.5 * (v - s.ret).powi(2);
        dvalue = cfg.value_coef * (v - s.ret) / m;
    }
    let mut grad = vec![0.0; net.len()];
    if w != 0.0 || dvalue != 0.0 {
        let up: Vec<T> = dmaps.iter().map(|v| T::of(*v)).collect();
        let g = net.backward(&cache, &up, T::of(dvalue))?;
        for (a, b) in grad.iter_mut().zip(&g.params) {
            *a = b.f64();
        }
    }
    let off = net.log_std_offset();
    for k in 0..N_GAUSS {
        grad[off + k] += dls[k];
    }
    Ok(SampleGrad {
        grad,
        loss: loss + cfg.value_coef * value_loss / m,
        ratio,
        kl: s.old_logp - logp,
        entropy,
        value_loss,
    })
}

pub fn eval_minibatch<T: Scalar>(net: &Network<T>, samples: &[&Sample], cfg: &PpoConfig, setup: &Setup, pool: &rayon::ThreadPool) -> Result<MinibatchEval> {
    let m = samples.len() as f64;
    let parts: Vec<Result<SampleGrad>> = pool.install(|| samples.par_iter().map(|s| sample_grad(net, s, m, cfg, setup)).collect());
    let mut out = MinibatchEval {
        loss: 0.0,
        grad: vec![0.0; net.len()],
        ratios: Vec::with_capacity(samples.len()),
        clipped: 0,
        kl: 0.0,
        entropy: 0.0,
        value_loss: 0.0,
    };
    // Fixed-order reduction keeps results independent of the thread count.
    for p in parts {
        let p = p?;
        out.loss += p.loss;
        for (a, b) in out.grad.iter_mut().zip(&p.grad) {
            *a += b;
        }
        if (p.ratio - 1.0).abs() > cfg.clip {
            out.clipped += 1;
        }
        out.ratios.push(p.ratio);
        out.kl += p.kl / m;
        out.entropy += p.entropy / m;
        out.value_loss += p.value_loss / m;
    }
    Ok(out)
}

pub fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `g` in place so its global norm is at most `max`; returns the
/// norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max: f64) -> f64 {
    let n = global_norm(g);
    if n > max {
        let s = max / n;
        for v in g.iter_mut() {
            *v *= s;
        }
    }
    n
}

/// Epochs of shuffled minibatch Adam steps on the clipped surrogate.
/// A non-finite loss or gradient restores the pre-update parameters and
/// optimizer state and returns an error.
pub fn ppo_update(
    net: &mut Network<f32>,
    adam: &mut Adam,
    samples: &[Sample],
    cfg: &PpoConfig,
    setup: &Setup,
    rng: &mut Rng,
    pool: &rayon::ThreadPool,
) -> Result<UpdateStats> {
    let snapshot = (net.params.clone(), adam.clone());
    match update_inner(net, adam, samples, cfg, setup, rng, pool) {
        Ok(s) => Ok(s),
        Err(e) => {
            net.params = snapshot.0;
            *adam = snapshot.1;
            Err(e)
        }
    }
}

fn update_inner(
    net: &mut Network<f32>,
    adam: &mut Adam,
    samples: &[Sample],
    cfg: &PpoConfig,
    setup: &Setup,
    rng: &mut Rng,
    pool: &rayon::ThreadPool,
) -> Result<UpdateStats> {
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut seen = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (mi, chunk) in order.chunks(cfg.minibatch).enumerate() {
            let mb: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut ev = eval_minibatch(net, &mb, cfg, setup, pool)?;
            if !ev.loss.is_finite() || ev.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("ppo loss at epoch {epoch}, minibatch {mi}")));
            }
            if epoch == 0 && mi == 0 {
                stats.first_ratios = ev.ratios.clone();
                stats.first_surrogate = ev.loss;
            }
            let norm = clip_global_norm(&mut ev.grad, cfg.grad_clip);
            stats.max_post_clip_norm = stats.max_post_clip_norm.max(global_norm(&ev.grad));
            adam.step(&mut net.params, &ev.grad, cfg);
            if net.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite("parameters after adam step".into()));
            }
            stats.surrogate += ev.loss;
            stats.grad_norm += norm;
            stats.approx_kl += ev.kl;
            stats.entropy += ev.entropy;
            stats.value_loss += ev.value_loss;
            stats.clip_frac += ev.clipped as f64;
            seen += mb.len();
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches.max(1) as f64;
    stats.surrogate /= k;
    stats.grad_norm /= k;
    stats.approx_kl /= k;
    stats.entropy /= k;
    stats.value_loss /= k;
    stats.clip_frac /= seen.max(1) as f64;
    Ok(stats)
}

/// Policy view used only to evaluate the value head during return computation.
pub fn value_of(net: &Network<f32>, obs: &Observation) -> Result<f64> {
    let (_, cache) = net.forward(obs)?;
    cache.value.map(|v| v as f64).ok_or(Error::MissingComponent("value head"))
}

/// Greedy success over `n` evaluation episodes.
pub fn evaluate(
    policy: &(dyn Policy + Sync),
    setup: &Setup,
    scenes: &SceneConfig,
    which: ScenePolicy,
    seed: u64,
    n: usize,
    pool: &rayon::ThreadPool,
) -> Result<Vec<Episode>> {
    let eval_seed = rng::derive(seed, rng::stream::EVAL);
    let opts = RunOptions::eval();
    let results: Vec<Result<Episode>> = pool.install(|| {
        (0..n as u64)
            .into_par_iter()
            .map(|i| run_indexed(policy, setup, scenes, which, eval_seed, i, &opts))
            .collect()
    });
    results.into_iter().collect()
}

/// Normal-approximation 95% interval for a binomial rate, clipped to [0, 1].
pub fn binomial_ci(successes: usize, n: usize) -> (f64, f64, f64) {
    if n == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = successes as f64 / n as f64;
    let half = 1.96 * (p * (1.0 - p) / n as f64).sqrt();
    (p, (p - half).max(0.0), (p + half).min(1.0))
}

pub fn maps_of(net: &Network<f32>, obs: &Observation) -> Result<ActionMaps> {
    Ok(net.forward(obs)?.0)
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Parse(format!("thread pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(rewards: &[f64]) -> Vec<Transition> {
        use crate::heads::{greedy_action, HeadConfig, Pins};
        let maps = ActionMaps::zeros(2);
        let a = greedy_action(&maps, &[0.0; N_GAUSS], &HeadConfig::default(), &Pins::none());
        rewards
            .iter()
            .enumerate()
            .map(|(i, r)| Transition {
                obs: None,
                action: a.clone(),
                reward: *r,
                done: i + 1 == rewards.len(),
                window: crate::render::CropWindow::full(4, 4),
                applied_scale: None,
                forced_stop: false,
                grasp: None,
                diagnostics: None,
            })
            .collect()
    }

    #[test]
    fn return_to_go_discounts() {
        let cfg = PpoConfig::default();
        let r = episode_returns(&ep(&[0.0, 0.0, 1.0]), None, &cfg).unwrap();
        let g: Vec<f64> = r.iter().map(|x| x.0).collect();
        assert!((g[0] - 0.9801).abs() < 1e-12 && (g[1] - 0.99).abs() < 1e-12 && g[2] == 1.0);
        let z = episode_returns(&ep(&[0.0, 0.0]), None, &cfg).unwrap();
        assert!(z.iter().all(|x| x.0 == 0.0 && x.1 == 0.0));
    }

    #[test]
    fn gae_with_unit_lambda_and_zero_values_is_rtg() {
        let mut cfg = PpoConfig::default();
        cfg.advantage = AdvantageMode::Gae;
        cfg.lambda = 1.0;
        let e = ep(&[0.0, 0.0, 0.0, 1.0]);
        let a = episode_returns(&e, Some(&[0.0; 4]), &cfg).unwrap();
        cfg.advantage = AdvantageMode::ReturnToGo;
        let b = episode_returns(&e, None, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.1 - y.1).abs() < 1e-12);
        }
    }

    #[test]
    fn incomplete_episode_is_error() {
        let mut e = ep(&[0.0, 1.0]);
        e[1].done = false;
        assert!(matches!(episode_returns(&e, None, &PpoConfig::default()), Err(Error::IncompleteEpisode)));
    }

    #[test]
    fn clip_bounds_norm() {
        let mut g = vec![30.0, 40.0];
        let n = clip_global_norm(&mut g, 20.0);
        assert_eq!(n, 50.0);
        assert!((global_norm(&g) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn binomial_interval() {
        let (p, lo, hi) = binomial_ci(50, 100);
        assert_eq!(p, 0.5);
        assert!((hi - lo - 2.0 * 1.96 * 0.05).abs() < 1e-12);
        assert_eq!(binomial_ci(0, 0), (0.0, 0.0, 0.0));
    }
}
