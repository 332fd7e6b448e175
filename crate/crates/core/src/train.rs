//! Training driver: collect, update, log, checkpoint and resume.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::episode::Setup;
use crate::nn::{checkpoint, Descriptor, Network};
use crate::ppo::{self, Adam, AdvantageMode, PpoConfig, ScenePolicy, UpdateStats};
use crate::rng;
use crate::scene::SceneConfig;
use crate::{Error, Result};

pub const METRICS_HEADER: &str =
    "batch,env_steps,success_rate,mean_ep_len,mean_zoom_depth,forced_stop_rate,surrogate,clip_frac,approx_kl,grad_norm,wall_s";
pub const EVAL_HEADER: &str = "batch,episodes,success_rate,ci_low,ci_high";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub desc: Descriptor,
    pub batches: usize,
    pub scenes: ScenePolicy,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Stop once a greedy evaluation reaches this success rate.
    pub target_success: Option<f64>,
    pub checkpoint_every: usize,
    pub head_gain: f64,
    /// Write real elapsed seconds to `wall_s` (breaks byte-identical logs).
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            desc: Descriptor::default64(),
            batches: 300,
            scenes: ScenePolicy::Single,
            eval_every: 10,
            eval_episodes: 500,
            target_success: None,
            checkpoint_every: 10,
            head_gain: 0.1,
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub batch: usize,
    pub episodes: usize,
    pub success_rate: f64,
    pub ci: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub batches_run: usize,
    pub env_steps: u64,
    pub evals: Vec<EvalRow>,
    pub last_stats: Option<UpdateStats>,
    pub stopped_early: bool,
    pub diverged: bool,
}

pub struct Trainer<'a> {
    pub setup: &'a Setup,
    pub scenes: &'a SceneConfig,
    pub ppo: &'a PpoConfig,
    pub train: &'a TrainConfig,
    pub seed: u64,
    pub threads: usize,
}

struct State {
    net: Network<f32>,
    adam: Adam,
    batch: usize,
    next_episode: u64,
    env_steps: u64,
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

pub fn latest_checkpoint(run_dir: &Path) -> PathBuf {
    checkpoint_dir(run_dir).join("latest.pxgr")
}

fn save_state(run_dir: &Path, st: &State, tag: Option<usize>) -> Result<()> {
    let extra = vec![
        ("train.batch", vec![st.batch as f32]),
        ("train.next_episode", split_u64(st.next_episode)),
        ("train.env_steps", split_u64(st.env_steps)),
        ("adam.t", split_u64(st.adam.t)),
        ("adam.m", st.adam.m.iter().map(|v| *v as f32).collect()),
        ("adam.v", st.adam.v.iter().map(|v| *v as f32).collect()),
    ];
    let dir = checkpoint_dir(run_dir);
    fs::create_dir_all(&dir)?;
    checkpoint::save(&st.net, &extra, &latest_checkpoint(run_dir))?;
    if let Some(b) = tag {
        checkpoint::save(&st.net, &extra, &dir.join(format!("batch_{b:05}.pxgr")))?;
    }
    Ok(())
}

/// u64 counters stored exactly as two 32-bit halves.
fn split_u64(v: u64) -> Vec<f32> {
    vec![f32::from_bits((v >> 32) as u32), f32::from_bits(v as u32)]
}

fn join_u64(v: &[f32]) -> Result<u64> {
    match v {
        [hi, lo] => Ok(((hi.to_bits() as u64) << 32) | lo.to_bits() as u64),
        _ => Err(Error::CorruptCheckpoint("counter".into())),
    }
}

fn load_state(path: &Path) -> Result<State> {
    let loaded = checkpoint::load::<f32>(path)?;
    let get = |name: &str| -> Result<&Vec<f32>> {
        loaded
            .extra
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing {name}")))
    };
    let n = loaded.net.len();
    let m: Vec<f64> = get("adam.m")?.iter().map(|v| *v as f64).collect();
    let v: Vec<f64> = get("adam.v")?.iter().map(|v| *v as f64).collect();
    if m.len() != n || v.len() != n {
        return Err(Error::CorruptCheckpoint("adam state size".into()));
    }
    Ok(State {
        batch: get("train.batch")?[0] as usize,
        next_episode: join_u64(get("train.next_episode")?)?,
        env_steps: join_u64(get("train.env_steps")?)?,
        adam: Adam {
            m,
            v,
            t: join_u64(get("adam.t")?)?,
        },
        net: loaded.net,
    })
}

fn append(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}

/// Drops metric rows past `batch` so a resumed run does not duplicate them.
fn truncate_rows(path: &Path, keep_through: Option<usize>) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || match (line.split(',').next().and_then(|b| b.parse::<usize>().ok()), keep_through) {
                (Some(b), Some(k)) => b <= k,
                _ => false,
            };
        if keep {
            let _ = writeln!(out, "{line}");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

impl Trainer<'_> {
    pub fn run(&self, run_dir: &Path, resume: bool) -> Result<TrainSummary> {
        fs::create_dir_all(run_dir)?;
        let pool = ppo::thread_pool(self.threads)?;
        let metrics = run_dir.join("metrics.csv");
        let evals_path = run_dir.join("eval.csv");
        let latest = latest_checkpoint(run_dir);

        let mut st = if resume && latest.exists() {
            let st = load_state(&latest)?;
            if st.net.desc != self.initial_network()?.desc {
                return Err(Error::CorruptCheckpoint("descriptor differs from config".into()));
            }
            let done = st.batch.checked_sub(1);
            truncate_rows(&metrics, done)?;
            truncate_rows(&evals_path, done)?;
            st
        } else {
            for p in [&metrics, &evals_path] {
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
            let net = self.initial_network()?;
            let n = net.len();
            State {
                net,
                adam: Adam::new(n),
                batch: 0,
                next_episode: 0,
                env_steps: 0,
            }
        };

        let started = Instant::now();
        let mut summary = TrainSummary {
            batches_run: 0,
            env_steps: st.env_steps,
            evals: Vec::new(),
            last_stats: None,
            stopped_early: false,
            diverged: false,
        };
        let train_seed = rng::derive(self.seed, 0x7261_696e);
        while st.batch < self.train.batches {
            let b = st.batch;
            if self.train.eval_every > 0 && b % self.train.eval_every == 0 {
                let row = self.evaluate(&st.net, b, &pool)?;
                append(
                    &evals_path,
                    EVAL_HEADER,
                    &format!("{},{},{:.6},{:.6},{:.6}", row.batch, row.episodes, row.success_rate, row.ci.0, row.ci.1),
                )?;
                let hit = self.train.target_success.map(|t| row.success_rate >= t).unwrap_or(false);
                summary.evals.push(row);
                if hit {
                    summary.stopped_early = true;
                    break;
                }
            }

            let batch = ppo::collect_batch(&st.net, self.setup, self.scenes, self.train.scenes, train_seed, st.next_episode, self.ppo, &pool)?;
            let value_fn = |o: &crate::nn::Observation| ppo::value_of(&st.net, o);
            let values: Option<&dyn Fn(&crate::nn::Observation) -> Result<f64>> =
                if self.ppo.advantage == AdvantageMode::Gae { Some(&value_fn) } else { None };
            let samples = ppo::compute_returns(&batch, self.ppo, values)?;
            let mut shuffle = rng::from_seed(rng::derive(rng::derive(self.seed, rng::stream::SHUFFLE), b as u64));
            let stats = match ppo::ppo_update(&mut st.net, &mut st.adam, &samples, self.ppo, self.setup, &mut shuffle, &pool) {
                Ok(s) => s,
                Err(Error::NonFinite(msg)) => {
                    // Parameters were restored; keep the last good checkpoint.
                    summary.diverged = true;
                    save_state(run_dir, &st, None)?;
                    return Err(Error::NonFinite(msg));
                }
                Err(e) => return Err(e),
            };

            let n_ep = batch.episodes.len() as f64;
            let steps = batch.len() as u64;
            st.env_steps += steps;
            st.next_episode = batch.next_index;
            let succ = batch.episodes.iter().filter(|e| e.success()).count() as f64 / n_ep;
            let zoom = batch.episodes.iter().map(|e| e.zoom_depth() as f64).sum::<f64>() / n_ep;
            let forced = batch.episodes.iter().filter(|e| e.forced_stop()).count() as f64 / n_ep;
            let wall = if self.train.wall_clock { started.elapsed().as_secs_f64() } else { 0.0 };
            append(
                &metrics,
                METRICS_HEADER,
                &format!(
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.8},{:.6},{:.8},{:.6},{:.3}",
                    b,
                    st.env_steps,
                    succ,
                    steps as f64 / n_ep,
                    zoom,
                    forced,
                    stats.surrogate,
                    stats.clip_frac,
                    stats.approx_kl,
                    stats.grad_norm,
                    wall
                ),
            )?;
            st.batch += 1;
            summary.batches_run += 1;
            summary.env_steps = st.env_steps;
            summary.last_stats = Some(stats);
            let tag = (self.train.checkpoint_every > 0 && st.batch % self.train.checkpoint_every == 0).then_some(st.batch);
            save_state(run_dir, &st, tag)?;
        }

        if !summary.stopped_early && self.train.eval_every > 0 && st.batch == self.train.batches {
            let already = summary.evals.last().map(|r| r.batch == st.batch).unwrap_or(false);
            if !already {
                let row = self.evaluate(&st.net, st.batch, &pool)?;
                append(
                    &evals_path,
                    EVAL_HEADER,
                    &format!("{},{},{:.6},{:.6},{:.6}", row.batch, row.episodes, row.success_rate, row.ci.0, row.ci.1),
                )?;
                summary.evals.push(row);
            }
        }
        save_state(run_dir, &st, None)?;
        Ok(summary)
    }

    /// The untrained network a fresh run starts from.
    pub fn initial_network(&self) -> Result<Network<f32>> {
        let mut desc = self.train.desc.clone();
        desc.value_head = self.ppo.advantage == AdvantageMode::Gae;
        Network::init(&desc, self.seed, self.train.head_gain)
    }

    fn evaluate(&self, net: &Network<f32>, batch: usize, pool: &rayon::ThreadPool) -> Result<EvalRow> {
        let eps = ppo::evaluate(net, self.setup, self.scenes, self.train.scenes, self.seed, self.train.eval_episodes, pool)?;
        let s = eps.iter().filter(|e| e.success()).count();
        let (p, lo, hi) = ppo::binomial_ci(s, eps.len());
        Ok(EvalRow {
            batch,
            episodes: eps.len(),
            success_rate: p,
            ci: (lo, hi),
        })
    }
}
