use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand, ValueEnum};

use pixgrasp::config::RunConfig;
use pixgrasp::episode::{Ablation, RunOptions, Sampling};
use pixgrasp::nn::{checkpoint, gradcheck, Descriptor, Network};
use pixgrasp::ppo::{self, ScenePolicy};
use pixgrasp::render::{self, CameraModel};
use pixgrasp::scene::{generate_scene, SceneMode};
use pixgrasp::train::Trainer;

#[derive(Parser)]
#[command(name = "pixgrasp", version, about = "Attention-zoom grasping with PPO on synthetic depth scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AblationArg {
    None,
    NoAttention,
    TopDown,
    Parallel,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Cluttered,
}

#[derive(Clone, Copy, ValueEnum)]
enum SizeArg {
    Toy,
    Default,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy; artifacts go under --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        #[arg(long)]
        resume: bool,
    },
    /// Greedy evaluation of a checkpoint on fresh scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        #[arg(long, value_enum, default_value = "single")]
        mode: ModeArg,
        #[arg(long)]
        camera_tilt: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-episode log; defaults to `<checkpoint>.eval.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// One stochastic episode dumped step by step.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, value_enum, default_value = "single")]
        mode: ModeArg,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of the network and action heads.
    Gradcheck {
        #[arg(long, value_enum, default_value = "toy")]
        size: SizeArg,
        #[arg(long, value_enum, default_value = "f64")]
        precision: PrecisionArg,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Render a seeded scene to a depth image and scene file.
    Render {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "single")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
    Verify(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<pixgrasp::Error>() {
            Some(pixgrasp::Error::Config { .. }) | Some(pixgrasp::Error::Parse(_)) => Failure::Usage(format!("{e:#}")),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<pixgrasp::Error> for Failure {
    fn from(e: pixgrasp::Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Verify(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Train { config, out, seed, ablation, resume } => train(config, &out, seed, ablation, resume),
        Cmd::Eval { checkpoint, episodes, mode, camera_tilt, seed, config, log } => {
            eval(&checkpoint, episodes, mode, camera_tilt, seed, config, log)
        }
        Cmd::Rollout { checkpoint, seed, dump, mode, config } => rollout(&checkpoint, seed, &dump, mode, config),
        Cmd::Gradcheck { size, precision, tol } => grad_check(size, precision, tol),
        Cmd::Render { seed, mode, out, config } => render_cmd(seed, mode, &out, config),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("reading config {}: {e}", p.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Ok(v) = std::env::var("PIXGRASP_THREADS") {
        cfg.set("ppo.actors", &v).map_err(|_| Failure::Usage(format!("PIXGRASP_THREADS: cannot parse `{v}`")))?;
        cfg.validate()?;
    }
    Ok(cfg)
}

/// Config for commands that read a checkpoint: explicit file, else the
/// run directory's echoed config, else defaults.
fn checkpoint_config(config: Option<PathBuf>, ckpt: &Path) -> Result<RunConfig, Failure> {
    if config.is_some() {
        return load_config(config.as_deref());
    }
    let echoed = ckpt.parent().and_then(|d| d.parent()).map(|d| d.join("config.txt"));
    match echoed {
        Some(p) if p.exists() => load_config(Some(&p)),
        _ => load_config(None),
    }
}

fn scene_mode(m: ModeArg) -> (SceneMode, ScenePolicy) {
    match m {
        ModeArg::Single => (SceneMode::Single, ScenePolicy::Single),
        ModeArg::Cluttered => (SceneMode::Cluttered, ScenePolicy::Cluttered),
    }
}

fn train(config: Option<PathBuf>, out: &Path, seed: Option<u64>, ablation: Option<AblationArg>, resume: bool) -> Result<(), Failure> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(a) = ablation {
        cfg.episode.ablation = match a {
            AblationArg::None => Ablation::None,
            AblationArg::NoAttention => Ablation::NoAttention,
            AblationArg::TopDown => Ablation::TopDown,
            AblationArg::Parallel => Ablation::Parallel,
        };
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.to_text()).context("writing config echo")?;
    let setup = cfg.setup()?;
    let trainer = Trainer {
        setup: &setup,
        scenes: &cfg.scene,
        ppo: &cfg.ppo,
        train: &cfg.train,
        seed: cfg.seed,
        threads: cfg.ppo.actors,
    };
    let summary = trainer.run(out, resume)?;
    for e in &summary.evals {
        println!(
            "eval batch={} episodes={} success_rate={:.4} ci95=[{:.4}, {:.4}]",
            e.batch, e.episodes, e.success_rate, e.ci.0, e.ci.1
        );
    }
    println!(
        "trained batches={} env_steps={} stopped_early={}",
        summary.batches_run, summary.env_steps, summary.stopped_early
    );
    Ok(())
}

fn load_net(path: &Path) -> Result<Network<f32>, Failure> {
    let loaded = checkpoint::load::<f32>(path).map_err(|e| Failure::Runtime(anyhow::Error::from(e).context(format!("loading {}", path.display()))))?;
    Ok(loaded.net)
}

fn eval(ckpt: &Path, episodes: usize, mode: ModeArg, tilt: Option<f64>, seed: u64, config: Option<PathBuf>, log: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = checkpoint_config(config, ckpt)?;
    if let Some(t) = tilt {
        cfg.camera.tilt_deg = t;
    }
    let net = load_net(ckpt)?;
    let setup = cfg.setup()?;
    let pool = ppo::thread_pool(cfg.ppo.actors)?;
    let (_, which) = scene_mode(mode);
    let eps = ppo::evaluate(&net, &setup, &cfg.scene, which, seed, episodes, &pool)?;
    let log = log.unwrap_or_else(|| ckpt.with_extension("eval.jsonl"));
    let mut f = std::io::BufWriter::new(fs::File::create(&log).with_context(|| format!("creating {}", log.display()))?);
    for (i, ep) in eps.iter().enumerate() {
        let last = ep.transitions.last().expect("episodes are non-empty");
        let rec = serde_json::json!({
            "episode": i,
            "scene_seed": ep.seed,
            "success": ep.success(),
            "length": ep.transitions.len(),
            "forced_stop": ep.forced_stop(),
            "grasp": last.grasp,
            "code": last.diagnostics.as_ref().map(|d| d.code),
        });
        writeln!(f, "{rec}").context("writing eval log")?;
    }
    f.flush().context("writing eval log")?;
    let s = eps.iter().filter(|e| e.success()).count();
    let (p, lo, hi) = ppo::binomial_ci(s, eps.len());
    println!("episodes={} successes={} success_rate={:.6} ci95=[{:.6}, {:.6}]", eps.len(), s, p, lo, hi);
    Ok(())
}

fn rollout(ckpt: &Path, seed: u64, dump: &Path, mode: ModeArg, config: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = checkpoint_config(config, ckpt)?;
    let net = load_net(ckpt)?;
    let setup = cfg.setup()?;
    let (_, which) = scene_mode(mode);
    let opts = RunOptions {
        sampling: Sampling::Stochastic,
        keep_obs: false,
        keep_images: true,
    };
    let ep = ppo::run_indexed(&net, &setup, &cfg.scene, which, seed, 0, &opts)?;
    fs::create_dir_all(dump).with_context(|| format!("creating {}", dump.display()))?;
    let mut f = std::io::BufWriter::new(fs::File::create(dump.join("steps.jsonl")).context("creating steps.jsonl")?);
    for (i, (t, img)) in ep.transitions.iter().zip(&ep.images).enumerate() {
        render::write_pgm16(&dump.join(format!("step_{i:02}.pgm")), img.rows, img.cols, &img.to_mm()).context("writing step image")?;
        let rec = serde_json::json!({ "step": i, "transition": t });
        writeln!(f, "{rec}").context("writing steps.jsonl")?;
    }
    f.flush().context("writing steps.jsonl")?;
    let native = ep.native.as_ref().expect("images were kept");
    let mut px = native.to_mm();
    for t in &ep.transitions {
        render::draw_window(&mut px, native.rows, native.cols, &t.window, u16::MAX);
    }
    render::write_pgm16(&dump.join("native.pgm"), native.rows, native.cols, &px).context("writing native frame")?;
    println!("steps={} success={}", ep.transitions.len(), ep.success());
    Ok(())
}

fn grad_check(size: SizeArg, precision: PrecisionArg, tol: f64) -> Result<(), Failure> {
    let desc = match size {
        SizeArg::Toy => {
            let mut d = Descriptor::toy16();
            d.value_head = true;
            d
        }
        SizeArg::Default => Descriptor::default64(),
    };
    let report = match precision {
        PrecisionArg::F64 => gradcheck::run::<f64>(&desc, 1, 1e-5, tol),
        PrecisionArg::F32 => gradcheck::run::<f32>(&desc, 1, 1e-3, tol),
    };
    println!("{:<16} {:>12} {:>8} {:>8}", "layer", "max_rel", "checked", "skipped");
    for l in &report.layers {
        println!("{:<16} {:>12.3e} {:>8} {:>8}", l.layer, l.max_rel, l.checked, l.skipped);
    }
    let heads = gradcheck::heads_check(8, 1, 1e-5);
    println!("{:<16} {:>12.3e}", "heads", heads);
    let ok = report.passed() && heads < tol;
    println!("max_rel={:.3e} tol={:e} {}", report.max_rel().max(heads), tol, if ok { "PASS" } else { "FAIL" });
    if ok {
        Ok(())
    } else {
        Err(Failure::Verify(format!("max relative error {:.3e} >= {tol:e}", report.max_rel().max(heads))))
    }
}

fn render_cmd(seed: u64, mode: ModeArg, out: &Path, config: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_config(config.as_deref())?;
    let (m, _) = scene_mode(mode);
    let scene = generate_scene(seed, m, &cfg.scene);
    let cam = CameraModel::from_config(&cfg.camera)?;
    let img = render::render_depth(&scene, &cam);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    render::write_pgm16(&out.join("depth.pgm"), img.rows, img.cols, &img.to_mm()).context("writing depth.pgm")?;
    fs::write(out.join("scene.txt"), scene.to_text()).context("writing scene.txt")?;
    println!("objects={} checksum={:016x}", scene.primitives.len(), img.checksum());
    Ok(())
}
