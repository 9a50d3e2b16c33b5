use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use vidiff::data::Dataset;
use vidiff::diffusion::{Conditioning, TrainState};
use vidiff::experiments::{
    self, check_table, experiment_config, labeled_experiment_config, run_chains, ExperimentSpec, OracleCheck,
};
use vidiff::gradcheck;
use vidiff::persist::{
    eval_report, export_frames, read_video, read_video_dir, write_atomic, write_labels, write_video, Checkpoint,
    RunConfig,
};
use vidiff::pipelines::{cascade, extend_autoregressive, spatial_superres, temporal_interpolate};
use vidiff::rng::{derive_seed, rng_for};
use vidiff::sampler::{sample, CondMethod};
use vidiff::train::train;
use vidiff::unet::{UNet, UNetDenoiser};
use vidiff::{Error, Result, Tensor};

const BUILD_ID: &str = env!("VIDIFF_BUILD_ID");

#[derive(Parser, Debug)]
#[command(name = "vidiff", version, about = "Video diffusion: data, training, sampling and checks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// override one config key, e.g. --set sampler.steps=64 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// master seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct SampleArgs {
    /// checkpoint written by `train`
    #[arg(long)]
    ckpt: PathBuf,
    /// class label to condition on
    #[arg(long)]
    label: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a shape-video dataset: clip_NNNNN.vdt plus labels.txt
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// number of clips (defaults to data.num_videos)
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a U-Net and write a checkpoint
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// total optimizer steps (overrides train.steps)
        #[arg(long)]
        steps: Option<u64>,
        /// continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// also write the loss log here
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint into a directory
    Sample {
        #[command(flatten)]
        s: SampleArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Autoregressively extend to plan.total frames
    Extend {
        #[command(flatten)]
        s: SampleArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        total: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        /// replacement | reconstruction_guidance | none
        #[arg(long)]
        method: Option<String>,
    },
    /// Fill in frames between coarse frames taken at a frameskip
    Interp {
        #[command(flatten)]
        s: SampleArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Guided 2x (or integer factor) spatial super-resolution
    Superres {
        #[command(flatten)]
        s: SampleArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Low-resolution extension followed by guided high-resolution extension
    Cascade {
        #[arg(long)]
        ckpt_lo: PathBuf,
        #[arg(long)]
        ckpt_hi: PathBuf,
        /// frameskip of the low-resolution model
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        label: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Proxy Frechet and coherence report between two video directories
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// coherence block length (defaults to half the frame count)
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo moment checks of the samplers against the Gaussian oracle
    OracleCheck {
        #[arg(long, default_value_t = 0.9)]
        rho: f64,
        #[arg(long, default_value_t = 10_000)]
        chains: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// skip the conditional (replacement vs guidance) rows
        #[arg(long)]
        unconditional_only: bool,
    },
    /// Finite-difference checks of every autodiff op (and the toy U-Net)
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// include the full toy U-Net input gradient
        #[arg(long)]
        unet: bool,
    },
    /// Desk-scale ablations: joint, cfg, conditioning
    Experiments {
        /// joint | cfg | conditioning
        #[arg(long)]
        name: String,
        /// oracle | trained (conditioning only)
        #[arg(long, default_value = "trained")]
        mode: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// comma-separated replicate seeds
        #[arg(long, default_value = "1,2,3")]
        replicates: String,
        #[arg(long, default_value_t = 64)]
        eval_videos: usize,
        /// AR(1) correlation for the oracle mode
        #[arg(long, default_value_t = 0.9)]
        rho: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export every frame of a video container as binary PPM
    ExportFrames {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::AtStep { source, .. } => exit_code(source),
        _ => 2,
    }
}

/// stdout writes that end the process quietly when the reader goes away
macro_rules! out_raw {
    ($($t:tt)*) => {{
        use std::io::Write;
        if let Err(e) = write!(std::io::stdout(), $($t)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
        }
    }};
}

macro_rules! out {
    ($($t:tt)*) => {{
        out_raw!($($t)*);
        out_raw!("\n");
    }};
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(std::env::args_os()) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn header(cmd: &str, seed: Option<u64>, cfg: Option<&RunConfig>) {
    out!("# vidiff {cmd} build={BUILD_ID}");
    if let (Some(s), None) = (seed, cfg) {
        out!("# seed={s}");
    }
    if let Some(c) = cfg {
        for line in c.to_text().lines() {
            out!("# {line}");
        }
    }
}

fn apply_sets(cfg: &mut RunConfig, sets: &[String]) -> Result<()> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got '{s}'")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(())
}

fn resolve(args: &ConfigArgs, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => base,
    };
    apply_sets(&mut cfg, &args.set)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Loaded {
    cfg: RunConfig,
    model: UNetDenoiser<f32>,
}

fn load_model(s: &SampleArgs) -> Result<Loaded> {
    let ck = Checkpoint::load(&s.ckpt)?;
    let trained = ck.run_config()?;
    if s.cfg.config.is_some() {
        return Err(Error::Usage("the config comes from the checkpoint; use --set to override".into()));
    }
    let cfg = resolve(&s.cfg, trained.clone())?;
    if cfg.unet != trained.unet {
        return Err(Error::Usage("unet.* keys are fixed by the checkpoint".into()));
    }
    let state: TrainState<f32> = ck.to_state()?;
    let model = UNetDenoiser::new(UNet::new(cfg.unet.clone())?, state.ema)?;
    Ok(Loaded { cfg, model })
}

fn conditioning(cfg: &RunConfig, label: Option<usize>) -> Result<Conditioning> {
    match label {
        None => Ok(Conditioning::none()),
        Some(l) if l < cfg.unet.num_classes => Ok(Conditioning::label(l)),
        Some(l) => Err(Error::Usage(format!(
            "label {l} out of range for {} classes",
            cfg.unet.num_classes
        ))),
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    // FNV-1a
    bytes
        .iter()
        .fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn write_output(path: &Path, video: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_video(path, video)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { cfg, out, count } => {
            let cfg = resolve(&cfg, RunConfig::default())?;
            header("gen-data", Some(cfg.seed), Some(&cfg));
            if cfg.unet.in_channels != 1 {
                return Err(Error::Usage("shape data is single-channel; set unet.in_channels=1".into()));
            }
            let n = count.unwrap_or(cfg.num_videos);
            let data = experiments::dataset_for(&RunConfig { num_videos: n, ..cfg })?;
            fs::create_dir_all(&out)?;
            for (i, v) in data.videos.iter().enumerate() {
                write_video(&out.join(format!("clip_{i:05}.vdt")), v)?;
            }
            write_labels(&out.join("labels.txt"), &data.labels)?;
            out!("wrote {n} clips to {}", out.display());
        }
        Cmd::Train { cfg, out, steps, resume, log } => {
            let (mut rc, mut state) = match &resume {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    let rc = resolve(&ConfigArgs { config: None, ..cfg.clone() }, ck.run_config()?)?;
                    (rc, ck.to_state::<f32>()?)
                }
                None => {
                    let rc = resolve(&cfg, RunConfig::default())?;
                    let net = UNet::new(rc.unet.clone())?;
                    let state = TrainState::new(net.init_params(derive_seed(rc.seed, "init", 0)));
                    (rc, state)
                }
            };
            if let Some(s) = steps {
                rc.train.steps = s;
            }
            header("train", Some(rc.seed), Some(&rc));
            if rc.unet.in_channels != 1 {
                return Err(Error::Usage("shape data is single-channel; set unet.in_channels=1".into()));
            }
            let net = UNet::new(rc.unet.clone())?;
            net.check_params(&state.params)?;
            let data: Dataset = experiments::dataset_for(&rc)?;
            let schedule = rc.schedule()?;
            let t0 = Instant::now();
            let mut lines = String::new();
            let mut last = f64::NAN;
            let every = rc.log_every;
            train(&net, &schedule, &rc.train, &data, &mut state, rc.seed, rc.train.steps, |step, loss| {
                last = loss;
                if step % every == 0 || step == rc.train.steps {
                    let l = format!("step={step} loss={loss:.6}");
                    out!("{l}");
                    lines.push_str(&l);
                    lines.push('\n');
                }
            })?;
            if let Some(p) = log {
                write_atomic(&p, lines.as_bytes())?;
            }
            Checkpoint::from_state(&rc.to_text(), &state).save(&out)?;
            out!(
                "trained to step {} (last loss {last:.6}) in {:.1}s; checkpoint {}",
                state.step,
                t0.elapsed().as_secs_f64(),
                out.display()
            );
        }
        Cmd::Sample { s, out, count } => {
            let m = load_model(&s)?;
            header("sample", Some(m.cfg.seed), Some(&m.cfg));
            let cond = conditioning(&m.cfg, s.label)?;
            let schedule = m.cfg.schedule()?;
            let sampler = vidiff::sampler::SamplerConfig {
                conditioning: CondMethod::None,
                ..m.cfg.sampler.clone()
            };
            let videos = run_chains(count, m.cfg.seed, "cli-sample", |_, rng| {
                sample(&schedule, &m.model, &sampler, &cond, None, rng)
            })?;
            fs::create_dir_all(&out)?;
            let mut h = 0u64;
            for (i, v) in videos.iter().enumerate() {
                let p = out.join(format!("sample_{i:04}.vdt"));
                write_video(&p, v)?;
                h ^= checksum(&fs::read(&p)?).rotate_left(i as u32);
            }
            out!("wrote {count} samples to {} checksum={h:016x}", out.display());
        }
        Cmd::Extend { mut s, out, total, overlap, method } => {
            if let Some(t) = total {
                s.cfg.set.push(format!("plan.total={t}"));
            }
            if let Some(k) = overlap {
                s.cfg.set.push(format!("plan.overlap={k}"));
            }
            if let Some(m) = method {
                s.cfg.set.push(format!("sampler.conditioning={m}"));
            }
            let mut m = load_model(&s)?;
            if m.cfg.sampler.conditioning == CondMethod::None && !s.cfg.set.iter().any(|x| x.starts_with("sampler.conditioning")) {
                m.cfg.sampler.conditioning = CondMethod::ReconstructionGuidance;
            }
            header("extend", Some(m.cfg.seed), Some(&m.cfg));
            let plan = m.cfg.plan()?;
            let schedule = m.cfg.schedule()?;
            let cond = conditioning(&m.cfg, s.label)?;
            let mut rng = rng_for(m.cfg.seed, "cli-extend", 0);
            let video = extend_autoregressive(&schedule, &m.model, &plan, &cond, &mut rng)?;
            write_output(&out, &video)?;
            out!("wrote {} frames in {} blocks to {}", video.frames(), plan.blocks(), out.display());
        }
        Cmd::Interp { s, input, stride, out } => {
            let mut m = load_model(&s)?;
            if m.cfg.sampler.conditioning == CondMethod::None {
                m.cfg.sampler.conditioning = CondMethod::ReconstructionGuidance;
            }
            header("interp", Some(m.cfg.seed), Some(&m.cfg));
            let coarse = read_video(&input)?.to_f64();
            let schedule = m.cfg.schedule()?;
            let cond = conditioning(&m.cfg, s.label)?;
            let mut rng = rng_for(m.cfg.seed, "cli-interp", 0);
            let video = temporal_interpolate(&schedule, &m.model, &coarse, stride, &m.cfg.sampler, &cond, &mut rng)?;
            write_output(&out, &video)?;
            out!("interpolated {} -> {} frames into {}", coarse.frames(), video.frames(), out.display());
        }
        Cmd::Superres { s, input, out } => {
            let m = load_model(&s)?;
            header("superres", Some(m.cfg.seed), Some(&m.cfg));
            let low = read_video(&input)?.to_f64();
            let schedule = m.cfg.schedule()?;
            let cond = conditioning(&m.cfg, s.label)?;
            let mut rng = rng_for(m.cfg.seed, "cli-superres", 0);
            let video = spatial_superres(&schedule, &m.model, &low, &m.cfg.sampler, &cond, &mut rng)?;
            write_output(&out, &video)?;
            out!("upsampled {:?} -> {:?} into {}", low.dims(), video.dims(), out.display());
        }
        Cmd::Cascade { ckpt_lo, ckpt_hi, stride, out, label, seed } => {
            let args = |p: PathBuf| SampleArgs {
                ckpt: p,
                label,
                cfg: ConfigArgs { seed, ..Default::default() },
            };
            let lo = load_model(&args(ckpt_lo))?;
            let hi = load_model(&args(ckpt_hi))?;
            header("cascade", Some(lo.cfg.seed), Some(&lo.cfg));
            for line in hi.cfg.to_text().lines() {
                out!("# hi.{line}");
            }
            let schedule = lo.cfg.schedule()?;
            let cond = conditioning(&lo.cfg, label)?;
            let mut plan_lo = lo.cfg.plan()?;
            let mut plan_hi = hi.cfg.plan()?;
            for p in [&mut plan_lo, &mut plan_hi] {
                if p.sampler.conditioning == CondMethod::None {
                    p.sampler.conditioning = CondMethod::ReconstructionGuidance;
                }
            }
            let mut rng = rng_for(lo.cfg.seed, "cli-cascade", 0);
            let video = cascade(&schedule, &lo.model, &hi.model, &cond, &plan_lo, &plan_hi, stride, &mut rng)?;
            write_output(&out, &video)?;
            out!("cascade wrote {:?} to {}", video.dims(), out.display());
        }
        Cmd::Eval { samples, reference, block, out } => {
            header("eval", None, None);
            let a = read_video_dir(&samples)?;
            let b = read_video_dir(&reference)?;
            let block = block.unwrap_or_else(|| a.first().map_or(1, |v| (v.frames() / 2).max(1)));
            let report = eval_report(&a, &b, block)?;
            let text = report.to_text();
            out_raw!("{text}");
            if let Some(p) = out {
                write_atomic(&p, text.as_bytes())?;
            }
            out!("frechet_proxy={:.6e} over {} vs {} videos", report.frechet, a.len(), b.len());
        }
        Cmd::OracleCheck { rho, chains, frames, size, seed, unconditional_only } => {
            header("oracle-check", Some(seed), None);
            out!("# rho={rho} chains={chains} dims=[{frames},{size},{size},1]");
            let check = OracleCheck {
                rho,
                chains,
                dims: [frames, size, size, 1],
                seed,
                ..Default::default()
            };
            let mut rows = check.unconditional()?;
            if !unconditional_only {
                rows.extend(check.conditional()?);
            }
            out_raw!("{}", check_table(&rows));
            let failed = rows.iter().filter(|r| !r.passed()).count();
            out!("oracle-check: {} of {} checks passed", rows.len() - failed, rows.len());
            if failed > 0 {
                return Err(Error::Training(format!("{failed} oracle checks outside tolerance")));
            }
        }
        Cmd::GradCheck { seed, unet } => {
            header("grad-check", Some(seed), None);
            let mut reports = gradcheck::op_suite(seed, gradcheck::DEFAULT_STEP)?;
            if unet {
                let cfg = vidiff::unet::UNetConfig::toy();
                reports.push(gradcheck::unet_input_check(&cfg, seed, gradcheck::DEFAULT_STEP)?);
            }
            for r in &reports {
                out!(
                    "{:<32} entries={:<6} max_rel_err={:.3e} {}",
                    r.name,
                    r.entries,
                    r.max_rel_err,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
            }
            let failed = reports.iter().filter(|r| !r.passed()).count();
            out!("grad-check: {} of {} passed (tolerance {:e})", reports.len() - failed, reports.len(), gradcheck::TOLERANCE);
            if failed > 0 {
                return Err(Error::Training(format!("{failed} gradient checks failed")));
            }
        }
        Cmd::Experiments { name, mode, cfg, replicates, eval_videos, rho, out } => {
            let replicates: Vec<u64> = replicates
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Usage(format!("bad replicate seed '{s}'"))))
                .collect::<Result<_>>()?;
            let default = if name == "cfg" { labeled_experiment_config() } else { experiment_config() };
            let base = resolve(&cfg, default)?;
            header("experiments", None, Some(&base));
            out!("# experiment={name} mode={mode} replicates={replicates:?}");
            let progress = |s: &str| out!("{s}");
            let mk = |f: fn(RunConfig) -> ExperimentSpec| ExperimentSpec {
                replicates: replicates.clone(),
                eval_videos,
                ..f(base.clone())
            };
            let text = match (name.as_str(), mode.as_str()) {
                ("joint", _) => experiments::run_joint_training_ablation(&mk(ExperimentSpec::joint_ablation), progress)?.to_text(),
                ("cfg", _) => experiments::run_cfg_sweep(&mk(ExperimentSpec::cfg_sweep), progress)?.to_text(),
                ("conditioning", "trained") => {
                    experiments::run_conditioning_comparison_trained(&mk(ExperimentSpec::conditioning), progress)?.to_text()
                }
                ("conditioning", "oracle") => {
                    experiments::run_conditioning_comparison_oracle(&mk(ExperimentSpec::conditioning), rho, 2000, progress)?
                        .to_text()
                }
                _ => return Err(Error::Usage(format!("unknown experiment '{name}' (mode '{mode}')"))),
            };
            out_raw!("{text}");
            if let Some(p) = out {
                write_atomic(&p, text.as_bytes())?;
            }
        }
        Cmd::ExportFrames { input, out } => {
            header("export-frames", None, None);
            let v = read_video(&input)?.to_f64();
            let files = export_frames(&v, &out)?;
            out!("exported {} frames to {}", files.len(), out.display());
        }
    }
    Ok(())
}
