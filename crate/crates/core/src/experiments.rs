//! Desk-scale ablations and the Monte-Carlo oracle checks.
//!
//! Each experiment sweeps one [`RunConfig`] key over a list of values and
//! repeats the sweep for every replicate seed.  Reports carry every raw
//! number; directional summaries are majority votes over replicates.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::data::{label_of, Dataset, ShapeKind, ShapeVideoSpec};
use crate::diffusion::{Conditioning, FramePartition, TrainState};
use crate::error::{config_err, Error, Result};
use crate::oracle::{ar1_kernel, GaussianVideoPrior};
use crate::persist::{frechet_distance, video_features, RunConfig};
use crate::pipelines::{coherence_at, extend_autoregressive, ExtensionPlan};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::sampler::{sample, CondMethod, Method, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::train::train;
use crate::unet::{UNet, UNetDenoiser};

// ---------------------------------------------------------------------------
// parallel chains

/// Run `n` independent jobs; job `i` gets `rng_for(seed, tag, i)`.  Results
/// do not depend on the thread count.
pub fn run_chains<F>(n: usize, seed: u64, tag: &str, job: F) -> Result<Vec<Tensor>>
where
    F: Fn(usize, &mut Rng) -> Result<Tensor> + Sync,
{
    let threads = std::thread::available_parallelism().map_or(1, |t| t.get()).min(n.max(1));
    let chunk = n.div_ceil(threads.max(1)).max(1);
    let job = &job;
    let parts: Vec<Result<Vec<Tensor>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                s.spawn(move || {
                    (start..(start + chunk).min(n))
                        .map(|i| job(i, &mut rng_for(seed, tag, i as u64)))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// oracle moment checks

/// AR(1) prior whose mean is constant within each frame, so every pixel
/// column is an iid draw of the same `F`-dimensional Gaussian and moments
/// pool exactly over columns.
pub fn oracle_prior(dims: [usize; 4], rho: f64) -> Result<GaussianVideoPrior> {
    let per_frame = dims[1] * dims[2] * dims[3];
    let f = dims[0] as f64;
    let mu = Tensor::from_fn(&dims, |i| 0.5 * ((i / per_frame) as f64 + 0.5) / f - 0.25);
    GaussianVideoPrior::ar1(dims, mu, rho)
}

/// Per-frame mean and `F x F` temporal covariance, treating every pixel
/// column of every video as one draw.
pub fn pooled_moments(videos: &[Tensor]) -> (Vec<f64>, DMatrix<f64>) {
    let f = videos[0].frames();
    let p = videos[0].len() / f;
    let n = (videos.len() * p) as f64;
    let mut mean = vec![0.0; f];
    for v in videos {
        for (i, x) in v.data().iter().enumerate() {
            mean[i / p] += x / n;
        }
    }
    let mut cov = DMatrix::zeros(f, f);
    for v in videos {
        let d = v.data();
        for px in 0..p {
            for i in 0..f {
                let di = d[i * p + px] - mean[i];
                for j in 0..=i {
                    cov[(i, j)] += di * (d[j * p + px] - mean[j]);
                }
            }
        }
    }
    cov /= n - 1.0;
    for i in 0..f {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    (mean, cov)
}

fn max_abs(a: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().fold(0.0, |m, x| if x.abs() > m || x.is_nan() { x.abs() } else { m })
}

fn frame_means(prior: &GaussianVideoPrior) -> Vec<f64> {
    let mu = prior.mean();
    (0..mu.frames()).map(|f| mu.frame(f).mean()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentErrors {
    /// max |pooled sample mean − prior mean| over frames
    pub mean_err: f64,
    /// max |pooled covariance − prior temporal covariance| over entries
    pub cov_err: f64,
}

/// Mean and covariance error of `chains` unconditional samples.
pub fn unconditional_moment_errors(
    prior: &GaussianVideoPrior,
    rho: f64,
    cfg: &SamplerConfig,
    chains: usize,
    seed: u64,
) -> Result<MomentErrors> {
    let schedule = NoiseSchedule::cosine(-20.0, 20.0)?;
    let xs = run_chains(chains, seed, "oracle-chain", |_, rng| {
        sample(&schedule, prior, cfg, &Conditioning::none(), None, rng)
    })?;
    let (mean, cov) = pooled_moments(&xs);
    let k = ar1_kernel(prior.video_dims()[0], rho);
    Ok(MomentErrors {
        mean_err: max_abs(mean.iter().zip(frame_means(prior)).map(|(a, b)| a - b)),
        cov_err: max_abs((cov - k).iter().copied()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionalErrors {
    /// max |pooled mean of (x^b − E[x^b | x^a])| over b frames
    pub mean_err: f64,
    /// max |pooled Cov(x^b − E[x^b | x^a]) − Cov(x^b | x^a)|
    pub cov_err: f64,
    /// max |pooled Cov(x^a, x^b) − Σ_ab|
    pub cross_err: f64,
}

/// Conditional sampling with `x^a` redrawn from the prior for every chain.
/// Exact conditioning reproduces the prior jointly, so the residual
/// `x^b − E[x^b | x^a]` has zero mean and the exact conditional covariance,
/// and the a/b cross-covariance matches the prior's.
pub fn conditional_moment_errors(
    prior: &GaussianVideoPrior,
    rho: f64,
    a_frames: &[usize],
    cfg: &SamplerConfig,
    chains: usize,
    seed: u64,
) -> Result<ConditionalErrors> {
    if cfg.conditioning == CondMethod::None {
        return Err(Error::Usage("conditional check needs a conditioning method".into()));
    }
    let schedule = NoiseSchedule::cosine(-20.0, 20.0)?;
    let f = prior.video_dims()[0];
    let part = FramePartition::new(f, a_frames)?;
    let pairs = run_chains(chains, seed, "oracle-cond-chain", |_, rng| {
        let x_a = prior.sample(rng);
        let x = sample(&schedule, prior, cfg, &Conditioning::none(), Some((&part, &x_a)), rng)?;
        let exact = prior.exact_conditional(&x_a, &part)?;
        let resid = x.select_frames(&part.b)?;
        let r: Vec<f64> = resid.data().iter().zip(&exact.mean).map(|(x, m)| x - m).collect();
        // stack [x (all frames) ; residual b-frames]
        let mut d = x.dims().to_vec();
        d[0] = f + part.b.len();
        let mut data = x.data().to_vec();
        data.extend(r);
        Tensor::new(d, data)
    })?;
    let nb = part.b.len();
    let xs: Vec<Tensor> = pairs.iter().map(|t| t.select_frames(&(0..f).collect::<Vec<_>>())).collect::<Result<_>>()?;
    let rs: Vec<Tensor> = pairs
        .iter()
        .map(|t| t.select_frames(&(f..f + nb).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let k = ar1_kernel(f, rho);
    let (_, cov_x) = pooled_moments(&xs);
    let (mean_r, cov_r) = pooled_moments(&rs);
    let exact = prior.exact_conditional(&xs[0], &part)?;
    let cond_cov = if exact.per_column {
        exact.cov.clone()
    } else {
        return Err(Error::Usage("conditional check expects an AR(1) prior".into()));
    };
    let mut cross = Vec::new();
    for &i in &part.a {
        for &j in &part.b {
            cross.push(cov_x[(i, j)] - k[(i, j)]);
        }
    }
    Ok(ConditionalErrors {
        mean_err: max_abs(mean_r),
        cov_err: max_abs((cov_r - cond_cov).iter().copied()),
        cross_err: max_abs(cross),
    })
}

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    /// `value < tolerance` passes when true, `value >= tolerance` otherwise
    pub below: bool,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        if self.below {
            self.value < self.tolerance
        } else {
            self.value >= self.tolerance
        }
    }
}

/// Settings of the oracle moment table.
#[derive(Clone, Debug)]
pub struct OracleCheck {
    pub rho: f64,
    pub dims: [usize; 4],
    pub chains: usize,
    pub ancestral_steps: usize,
    pub pc_steps: usize,
    pub cond_steps: usize,
    pub a_frames: Vec<usize>,
    pub seed: u64,
}

impl Default for OracleCheck {
    fn default() -> Self {
        OracleCheck {
            rho: 0.9,
            dims: [4, 4, 4, 1],
            chains: 10_000,
            ancestral_steps: 1024,
            pc_steps: 256,
            cond_steps: 256,
            a_frames: vec![0],
            seed: 0,
        }
    }
}

pub const MEAN_TOL: f64 = 0.02;
pub const COV_TOL: f64 = 0.05;
pub const COND_TOL: f64 = 0.05;
pub const CROSS_RATIO: f64 = 5.0;

impl OracleCheck {
    pub fn unconditional(&self) -> Result<Vec<CheckRow>> {
        let prior = oracle_prior(self.dims, self.rho)?;
        let anc = SamplerConfig {
            steps: self.ancestral_steps,
            gamma: 0.0,
            ..Default::default()
        };
        let pc = SamplerConfig {
            steps: self.pc_steps,
            gamma: 0.0,
            delta: 0.1,
            correctors: 1,
            method: Method::PredictorCorrector,
            ..Default::default()
        };
        let mut rows = Vec::new();
        for (name, cfg) in [("ancestral", anc), ("predictor_corrector", pc)] {
            let e = unconditional_moment_errors(&prior, self.rho, &cfg, self.chains, self.seed)?;
            rows.push(CheckRow { name: format!("{name}.mean_err"), value: e.mean_err, tolerance: MEAN_TOL, below: true });
            rows.push(CheckRow { name: format!("{name}.cov_err"), value: e.cov_err, tolerance: COV_TOL, below: true });
        }
        Ok(rows)
    }

    pub fn conditional(&self) -> Result<Vec<CheckRow>> {
        let prior = oracle_prior(self.dims, self.rho)?;
        let base = SamplerConfig {
            steps: self.cond_steps,
            gamma: 0.0,
            delta: 0.1,
            correctors: 1,
            recon_weight: 1.0,
            method: Method::PredictorCorrector,
            ..Default::default()
        };
        let guided = conditional_moment_errors(
            &prior,
            self.rho,
            &self.a_frames,
            &SamplerConfig { conditioning: CondMethod::ReconstructionGuidance, ..base.clone() },
            self.chains,
            self.seed,
        )?;
        let replaced = conditional_moment_errors(
            &prior,
            self.rho,
            &self.a_frames,
            &SamplerConfig { conditioning: CondMethod::Replacement, ..base },
            self.chains,
            self.seed,
        )?;
        Ok(vec![
            CheckRow { name: "guidance.mean_err".into(), value: guided.mean_err, tolerance: COND_TOL, below: true },
            CheckRow { name: "guidance.cov_err".into(), value: guided.cov_err, tolerance: COND_TOL, below: true },
            CheckRow { name: "guidance.cross_err".into(), value: guided.cross_err, tolerance: COND_TOL, below: true },
            CheckRow { name: "replacement.mean_err".into(), value: replaced.mean_err, tolerance: f64::INFINITY, below: true },
            CheckRow { name: "replacement.cov_err".into(), value: replaced.cov_err, tolerance: f64::INFINITY, below: true },
            CheckRow { name: "replacement.cross_err".into(), value: replaced.cross_err, tolerance: f64::INFINITY, below: true },
            CheckRow {
                name: "cross_err_ratio".into(),
                value: replaced.cross_err / guided.cross_err,
                tolerance: CROSS_RATIO,
                below: false,
            },
        ])
    }
}

pub fn check_table(rows: &[CheckRow]) -> String {
    let mut s = String::from("check                          value        tolerance    status\n");
    for r in rows {
        let op = if r.below { "<" } else { ">=" };
        let _ = writeln!(
            s,
            "{:<30} {:<12.6} {op}{:<11} {}",
            r.name,
            r.value,
            if r.tolerance.is_finite() { format!("{}", r.tolerance) } else { "-".into() },
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    s
}

// ---------------------------------------------------------------------------
// pixel-statistic label classifier

/// Guess the label of a shape video: velocity quadrant from the centroid
/// shift between the first two frames, kind by rendering a square and a disc
/// of the measured area at the frame-0 centroid and keeping the closer one.
pub fn classify_label(video: &Tensor, foreground: f64, background: f64) -> usize {
    let d = video.dims();
    let (h, w) = (d[1], d[2]);
    let frame0 = video.frame(0);
    let weights = |fr: &Tensor| -> Vec<f64> {
        fr.data()
            .chunks_exact(d[3])
            .map(|px| ((px[0] - background) / (foreground - background)).clamp(0.0, 1.0))
            .collect()
    };
    // centroid in continuous coordinates (pixel j covers [j, j + 1))
    let centroid = |wt: &[f64]| -> (f64, f64, f64) {
        let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let v = wt[y * w + x];
                s += v;
                sx += v * (x as f64 + 0.5);
                sy += v * (y as f64 + 0.5);
            }
        }
        if s == 0.0 {
            (w as f64 / 2.0, h as f64 / 2.0, 0.0)
        } else {
            (sx / s, sy / s, s)
        }
    };
    let (x0, y0, mass) = centroid(&weights(&frame0));
    let (x1, y1, _) = if d[0] > 1 { centroid(&weights(&video.frame(1))) } else { (x0, y0, 0.0) };
    let gray: Vec<f64> = frame0.data().chunks_exact(d[3]).map(|px| px[0]).collect();
    let fit = |kind: ShapeKind| -> f64 {
        let side = match kind {
            ShapeKind::Square => mass.sqrt(),
            ShapeKind::Circle => (4.0 * mass / std::f64::consts::PI).sqrt(),
        }
        .clamp(0.5, h.min(w) as f64);
        let spec = ShapeVideoSpec {
            frames: 1,
            height: h,
            width: w,
            kind,
            size: side,
            pos: (
                (x0 - side / 2.0).clamp(0.0, w as f64 - side),
                (y0 - side / 2.0).clamp(0.0, h as f64 - side),
            ),
            velocity: (0.0, 0.0),
            foreground,
            background,
        };
        match spec.render() {
            Ok(t) => t.data().iter().zip(&gray).map(|(a, b)| (a - b).powi(2)).sum(),
            Err(_) => f64::INFINITY,
        }
    };
    let kind = if fit(ShapeKind::Circle) < fit(ShapeKind::Square) {
        ShapeKind::Circle
    } else {
        ShapeKind::Square
    };
    label_of(kind, x1 - x0, y1 - y0)
}

// ---------------------------------------------------------------------------
// experiment specs

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub name: String,
    pub base: RunConfig,
    /// swept [`RunConfig`] key
    pub field: String,
    pub values: Vec<String>,
    pub replicates: Vec<u64>,
    /// samples and reference clips per evaluation
    pub eval_videos: usize,
}

impl ExperimentSpec {
    pub fn joint_ablation(base: RunConfig) -> Self {
        ExperimentSpec {
            name: "joint_training".into(),
            base,
            field: "train.independent_images".into(),
            values: vec!["0".into(), "4".into(), "8".into()],
            replicates: vec![1, 2, 3],
            eval_videos: 64,
        }
    }

    pub fn cfg_sweep(base: RunConfig) -> Self {
        ExperimentSpec {
            name: "cfg_sweep".into(),
            base,
            field: "sampler.cfg_weight".into(),
            values: ["0", "1", "2", "5"].map(String::from).to_vec(),
            replicates: vec![1, 2, 3],
            eval_videos: 64,
        }
    }

    pub fn conditioning(base: RunConfig) -> Self {
        ExperimentSpec {
            name: "conditioning".into(),
            base,
            field: "sampler.conditioning".into(),
            values: vec!["replacement".into(), "reconstruction_guidance".into()],
            replicates: vec![1, 2, 3],
            eval_videos: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !RunConfig::keys().contains(&self.field.as_str()) {
            return Err(config_err!("unknown swept key '{}'", self.field));
        }
        if self.values.is_empty() {
            return Err(config_err!("experiment '{}' has no sweep values", self.name));
        }
        for (i, v) in self.values.iter().enumerate() {
            if self.values[..i].contains(v) {
                return Err(config_err!("duplicate sweep value '{v}'"));
            }
            if let Ok(x) = v.trim().parse::<f64>() {
                if !x.is_finite() {
                    return Err(config_err!("sweep value '{v}' is not finite"));
                }
            }
            self.arm(v, self.replicates.first().copied().unwrap_or(0))?;
        }
        let mut seeds = self.replicates.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() < 2 || seeds.len() != self.replicates.len() {
            return Err(config_err!("need at least 2 distinct replicate seeds"));
        }
        if self.eval_videos < crate::persist::MIN_EVAL_VIDEOS {
            return Err(config_err!(
                "eval_videos {} below {}",
                self.eval_videos,
                crate::persist::MIN_EVAL_VIDEOS
            ));
        }
        Ok(())
    }

    /// Base config with the swept key set and the replicate seed applied.
    pub fn arm(&self, value: &str, seed: u64) -> Result<RunConfig> {
        let mut c = self.base.clone();
        c.set(&self.field, value)?;
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

// ---------------------------------------------------------------------------
// shared training / evaluation helpers

pub struct TrainedModel {
    pub net: UNet,
    pub state: TrainState<f32>,
    pub losses: Vec<f64>,
}

impl TrainedModel {
    pub fn denoiser(&self) -> Result<UNetDenoiser<f32>> {
        UNetDenoiser::new(self.net.clone(), self.state.ema.clone())
    }

    pub fn final_loss(&self) -> f64 {
        let n = self.losses.len().clamp(1, 50);
        self.losses.iter().rev().take(n).sum::<f64>() / n as f64
    }
}

pub fn train_model(cfg: &RunConfig, data: &Dataset) -> Result<TrainedModel> {
    let net = UNet::new(cfg.unet.clone())?;
    let schedule = cfg.schedule()?;
    let mut state = TrainState::new(net.init_params(derive_seed(cfg.seed, "init", 0)));
    let mut losses = Vec::new();
    train(&net, &schedule, &cfg.train, data, &mut state, cfg.seed, cfg.train.steps, |_, l| losses.push(l))?;
    Ok(TrainedModel { net, state, losses })
}

pub fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::generate(&cfg.data_config(), cfg.num_videos, derive_seed(cfg.seed, "dataset", 0))
}

/// Held-out clips (a stream disjoint from the training set).
pub fn reference_set(cfg: &RunConfig, n: usize) -> Result<Dataset> {
    Dataset::generate(&cfg.data_config(), n, derive_seed(cfg.seed, "reference", 0))
}

fn frechet_vs(samples: &[Tensor], reference: &Dataset) -> Result<f64> {
    let a: Vec<Vec<f64>> = samples.iter().map(video_features).collect();
    let b: Vec<Vec<f64>> = reference.videos.iter().map(video_features).collect();
    frechet_distance(&a, &b)
}

fn labeled(cfg: &RunConfig, i: usize) -> Conditioning {
    if cfg.unet.num_classes > 0 {
        Conditioning::label(i % cfg.unet.num_classes)
    } else {
        Conditioning::none()
    }
}

fn majority(votes: &[bool]) -> bool {
    2 * votes.iter().filter(|&&v| v).count() > votes.len()
}

// ---------------------------------------------------------------------------
// joint training

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub seed: u64,
    pub value: String,
    pub frechet: f64,
    pub coherence: f64,
    pub final_loss: f64,
    /// set when training or sampling failed; metrics are NaN then
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct JointAblation {
    pub arms: Vec<ArmResult>,
}

impl JointAblation {
    fn get(&self, seed: u64, value: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.seed == seed && a.value == value)
    }

    /// Per replicate: proxy Fréchet of `hi` ≤ that of `lo`.
    pub fn votes(&self, lo: &str, hi: &str) -> Vec<bool> {
        let mut seeds: Vec<u64> = self.arms.iter().map(|a| a.seed).collect();
        seeds.dedup();
        seeds
            .iter()
            .map(|&s| match (self.get(s, lo), self.get(s, hi)) {
                (Some(a), Some(b)) => b.frechet <= a.frechet,
                _ => false,
            })
            .collect()
    }

    pub fn majority(&self, lo: &str, hi: &str) -> bool {
        majority(&self.votes(lo, hi))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# joint training ablation (independent image frames J)\n");
        s.push_str("seed J frechet_proxy coherence final_loss status\n");
        for a in &self.arms {
            let _ = writeln!(
                s,
                "{} {} {:.6e} {:.6} {:.6} {}",
                a.seed,
                a.value,
                a.frechet,
                a.coherence,
                a.final_loss,
                a.failure.as_deref().unwrap_or("ok")
            );
        }
        let v = self.votes("0", "8");
        let _ = writeln!(s, "J=8 <= J=0 votes: {:?} majority={}", v, majority(&v));
        s
    }
}

/// Within-clip coherence at the middle seam.
fn clip_coherence(v: &Tensor) -> Result<f64> {
    coherence_at(v, &[v.frames() / 2])
}

/// Train one model per (replicate, J) and evaluate unconditional samples.
/// Arms of a replicate share the dataset, initialisation and the video
/// portion of every batch.
pub fn run_joint_training_ablation(spec: &ExperimentSpec, mut progress: impl FnMut(&str)) -> Result<JointAblation> {
    spec.validate()?;
    let mut arms = Vec::new();
    for &seed in &spec.replicates {
        let base = spec.arm(&spec.values[0], seed)?;
        let data = dataset_for(&base)?;
        let reference = reference_set(&base, spec.eval_videos)?;
        for v in &spec.values {
            let cfg = spec.arm(v, seed)?;
            let res = (|| -> Result<(f64, f64, f64)> {
                let m = train_model(&cfg, &data)?;
                let den = m.denoiser()?;
                let schedule = cfg.schedule()?;
                let sampler = SamplerConfig { conditioning: CondMethod::None, ..cfg.sampler.clone() };
                let xs = run_chains(spec.eval_videos, seed, "joint-eval", |i, rng| {
                    sample(&schedule, &den, &sampler, &labeled(&cfg, i), None, rng)
                })?;
                let coh = xs.iter().map(clip_coherence).sum::<Result<f64>>()? / xs.len() as f64;
                Ok((frechet_vs(&xs, &reference)?, coh, m.final_loss()))
            })();
            let arm = match res {
                Ok((frechet, coherence, final_loss)) => ArmResult {
                    seed,
                    value: v.clone(),
                    frechet,
                    coherence,
                    final_loss,
                    failure: None,
                },
                Err(e) => ArmResult {
                    seed,
                    value: v.clone(),
                    frechet: f64::NAN,
                    coherence: f64::NAN,
                    final_loss: f64::NAN,
                    failure: Some(e.to_string()),
                },
            };
            progress(&format!(
                "joint seed={seed} J={v} frechet={:.4e} coherence={:.4} loss={:.4}",
                arm.frechet, arm.coherence, arm.final_loss
            ));
            arms.push(arm);
        }
    }
    Ok(JointAblation { arms })
}

// ---------------------------------------------------------------------------
// classifier-free guidance sweep

#[derive(Clone, Debug)]
pub struct CfgRow {
    pub seed: u64,
    pub weight: f64,
    pub label_consistency: f64,
    pub frechet: f64,
}

#[derive(Clone, Debug)]
pub struct CfgSweep {
    pub rows: Vec<CfgRow>,
    /// classifier accuracy on held-out data clips, per replicate
    pub data_consistency: Vec<(u64, f64)>,
}

impl CfgSweep {
    fn at(&self, seed: u64, w: f64) -> Option<&CfgRow> {
        self.rows.iter().find(|r| r.seed == seed && r.weight == w)
    }

    fn seeds(&self) -> Vec<u64> {
        self.data_consistency.iter().map(|d| d.0).collect()
    }

    /// label consistency at w=2 ≥ w=0, per replicate
    pub fn consistency_votes(&self) -> Vec<bool> {
        self.seeds()
            .iter()
            .map(|&s| match (self.at(s, 0.0), self.at(s, 2.0)) {
                (Some(a), Some(b)) => b.label_consistency >= a.label_consistency,
                _ => false,
            })
            .collect()
    }

    /// proxy Fréchet at w=5 > w=2, per replicate
    pub fn degradation_votes(&self) -> Vec<bool> {
        self.seeds()
            .iter()
            .map(|&s| match (self.at(s, 2.0), self.at(s, 5.0)) {
                (Some(a), Some(b)) => b.frechet > a.frechet,
                _ => false,
            })
            .collect()
    }

    pub fn direction_holds(&self) -> bool {
        majority(&self.consistency_votes()) && majority(&self.degradation_votes())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# classifier-free guidance sweep\nseed w label_consistency frechet_proxy\n");
        for r in &self.rows {
            let _ = writeln!(s, "{} {} {:.4} {:.6e}", r.seed, r.weight, r.label_consistency, r.frechet);
        }
        for (seed, c) in &self.data_consistency {
            let _ = writeln!(s, "{seed} data {c:.4} -");
        }
        let _ = writeln!(
            s,
            "consistency w2>=w0 votes: {:?}\nfrechet w5>w2 votes: {:?}\ndirection={}",
            self.consistency_votes(),
            self.degradation_votes(),
            self.direction_holds()
        );
        s
    }
}

/// One conditional model per replicate (labels dropped with the configured
/// rate), sampled at every swept guidance weight.
pub fn run_cfg_sweep(spec: &ExperimentSpec, mut progress: impl FnMut(&str)) -> Result<CfgSweep> {
    spec.validate()?;
    if spec.base.unet.num_classes == 0 || spec.base.train.cond_dropout <= 0.0 {
        return Err(config_err!("guidance sweep needs labels and conditioning dropout > 0"));
    }
    let mut rows = Vec::new();
    let mut data_consistency = Vec::new();
    for &seed in &spec.replicates {
        let base = spec.arm(&spec.values[0], seed)?;
        let data = dataset_for(&base)?;
        let reference = reference_set(&base, spec.eval_videos)?;
        let (fg, bg) = (base.foreground, base.background);
        let hits = reference.iter().filter(|(v, l)| classify_label(v, fg, bg) == *l).count();
        data_consistency.push((seed, hits as f64 / reference.len() as f64));
        let m = train_model(&base, &data)?;
        let den = m.denoiser()?;
        let schedule = base.schedule()?;
        for v in &spec.values {
            let cfg = spec.arm(v, seed)?;
            let sampler = SamplerConfig { conditioning: CondMethod::None, ..cfg.sampler.clone() };
            let xs = run_chains(spec.eval_videos, seed, "cfg-eval", |i, rng| {
                sample(&schedule, &den, &sampler, &labeled(&cfg, i), None, rng)
            })?;
            let hits = xs
                .iter()
                .enumerate()
                .filter(|(i, x)| classify_label(x, fg, bg) == i % cfg.unet.num_classes)
                .count();
            let row = CfgRow {
                seed,
                weight: cfg.sampler.cfg_weight,
                label_consistency: hits as f64 / xs.len() as f64,
                frechet: frechet_vs(&xs, &reference)?,
            };
            progress(&format!(
                "cfg seed={seed} w={} consistency={:.4} frechet={:.4e}",
                row.weight, row.label_consistency, row.frechet
            ));
            rows.push(row);
        }
    }
    Ok(CfgSweep { rows, data_consistency })
}

// ---------------------------------------------------------------------------
// replacement vs reconstruction guidance

#[derive(Clone, Debug)]
pub struct ConditioningRow {
    pub seed: u64,
    pub method: CondMethod,
    pub coherence: f64,
}

#[derive(Clone, Debug)]
pub struct ConditioningComparison {
    pub mode: &'static str,
    pub rows: Vec<ConditioningRow>,
    /// ground-truth coherence at the same seams (prior or data clips)
    pub reference_coherence: f64,
    /// first blocks agree bit-for-bit across methods at every seed
    pub first_blocks_identical: bool,
    /// oracle mode only: conditional moment errors per method
    pub moments: Vec<(CondMethod, ConditionalErrors)>,
}

impl ConditioningComparison {
    pub fn votes(&self) -> Vec<bool> {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
            .iter()
            .map(|&s| {
                let get = |m| self.rows.iter().find(|r| r.seed == s && r.method == m).map(|r| r.coherence);
                match (get(CondMethod::Replacement), get(CondMethod::ReconstructionGuidance)) {
                    (Some(r), Some(g)) => g > r,
                    _ => false,
                }
            })
            .collect()
    }

    pub fn guidance_wins(&self) -> bool {
        majority(&self.votes())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# conditioning comparison ({} mode)\nseed method coherence\n", self.mode);
        for r in &self.rows {
            let _ = writeln!(s, "{} {} {:.6}", r.seed, r.method.name(), r.coherence);
        }
        let _ = writeln!(s, "reference_coherence={:.6}", self.reference_coherence);
        let _ = writeln!(s, "first_blocks_identical={}", self.first_blocks_identical);
        for (m, e) in &self.moments {
            let _ = writeln!(
                s,
                "{} mean_err={:.6} cov_err={:.6} cross_err={:.6}",
                m.name(),
                e.mean_err,
                e.cov_err,
                e.cross_err
            );
        }
        let _ = writeln!(s, "guidance>replacement votes: {:?} majority={}", self.votes(), self.guidance_wins());
        s
    }
}

fn method_of(v: &str) -> Result<CondMethod> {
    CondMethod::parse(v)
}

fn compare_with(
    spec: &ExperimentSpec,
    mode: &'static str,
    model: &(dyn crate::diffusion::Denoiser + Sync),
    cfg_of: impl Fn(&str, u64) -> Result<RunConfig>,
    reference_coherence: f64,
    progress: &mut dyn FnMut(&str),
) -> Result<ConditioningComparison> {
    let mut rows = Vec::new();
    let mut identical = true;
    for &seed in &spec.replicates {
        let mut firsts: Vec<Vec<Tensor>> = Vec::new();
        for v in &spec.values {
            let cfg = cfg_of(v, seed)?;
            let plan: ExtensionPlan = cfg.plan()?;
            let schedule = cfg.schedule()?;
            let videos = run_chains(spec.eval_videos, seed, "cond-eval", |i, rng| {
                extend_autoregressive(&schedule, model, &plan, &labeled(&cfg, i), rng)
            })?;
            let seams = plan.seams();
            let coh = videos.iter().map(|v| coherence_at(v, &seams)).sum::<Result<f64>>()? / videos.len() as f64;
            let first: Vec<usize> = (0..plan.block).collect();
            firsts.push(videos.iter().map(|v| v.select_frames(&first)).collect::<Result<_>>()?);
            progress(&format!("conditioning[{mode}] seed={seed} {v} coherence={coh:.4}"));
            rows.push(ConditioningRow { seed, method: method_of(v)?, coherence: coh });
        }
        identical &= firsts.windows(2).all(|w| w[0] == w[1]);
    }
    Ok(ConditioningComparison {
        mode,
        rows,
        reference_coherence,
        first_blocks_identical: identical,
        moments: Vec::new(),
    })
}

/// Oracle mode: the AR(1) Gaussian denoiser with temporal correlation `rho`
/// at the base config's block size and resolution.
pub fn run_conditioning_comparison_oracle(
    spec: &ExperimentSpec,
    rho: f64,
    moment_chains: usize,
    mut progress: impl FnMut(&str),
) -> Result<ConditioningComparison> {
    spec.validate()?;
    let u = &spec.base.unet;
    let dims = [u.frames, u.spatial_size, u.spatial_size, u.in_channels];
    let prior = oracle_prior(dims, rho)?;
    let mut out = compare_with(spec, "oracle", &prior, |v, s| spec.arm(v, s), rho, &mut progress)?;
    if moment_chains > 0 {
        let a: Vec<usize> = (0..spec.base.plan_overlap).collect();
        for v in &spec.values {
            let cfg = spec.arm(v, spec.replicates[0])?;
            let e = conditional_moment_errors(&prior, rho, &a, &cfg.sampler, moment_chains, cfg.seed)?;
            out.moments.push((cfg.sampler.conditioning, e));
        }
    }
    Ok(out)
}

/// Trained mode: one unconditional model per replicate, extended with each
/// method from the same seeds.
pub fn run_conditioning_comparison_trained(
    spec: &ExperimentSpec,
    mut progress: impl FnMut(&str),
) -> Result<ConditioningComparison> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut identical = true;
    let mut ref_coh = Vec::new();
    for &seed in &spec.replicates {
        let base = spec.arm(&spec.values[0], seed)?;
        let data = dataset_for(&base)?;
        let m = train_model(&base, &data)?;
        let den = m.denoiser()?;
        let sub = ExperimentSpec { replicates: vec![seed], ..spec.clone() };
        let part = compare_with(&sub, "trained", &den, |v, s| spec.arm(v, s), f64::NAN, &mut progress)?;
        identical &= part.first_blocks_identical;
        rows.extend(part.rows);
        // ground truth: one long clip per reference video
        let long = RunConfig {
            unet: crate::unet::UNetConfig { frames: base.plan_total, ..base.unet.clone() },
            ..base.clone()
        };
        let plan = base.plan()?;
        let refs = Dataset::generate(&long.data_config(), spec.eval_videos, derive_seed(seed, "reference-long", 0))?;
        for v in &refs.videos {
            ref_coh.push(coherence_at(v, &plan.seams())?);
        }
    }
    Ok(ConditioningComparison {
        mode: "trained",
        rows,
        reference_coherence: ref_coh.iter().sum::<f64>() / ref_coh.len().max(1) as f64,
        first_blocks_identical: identical,
        moments: Vec::new(),
    })
}

/// Small model and data used by the experiment drivers: 4 frames of 8x8.
pub fn experiment_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.unet = crate::unet::UNetConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        blocks_per_resolution: 1,
        attention_resolutions: vec![4],
        head_dim: 8,
        cond_embedding_dim: 32,
        cond_mlp_layers: 2,
        frames: 4,
        spatial_size: 8,
        in_channels: 1,
        out_channels: 1,
        num_classes: 0,
        norm_groups: 4,
        prediction: crate::diffusion::PredKind::Epsilon,
    };
    c.size_range = (3.0, 4.5);
    c.speed_range = (0.5, 1.0);
    c.num_videos = 512;
    c.plan_overlap = 1;
    c.plan_total = 10;
    c.sampler = SamplerConfig { steps: 64, clip_denoised: true, ..Default::default() };
    c.train.steps = 1000;
    c.train.cond_dropout = 0.1;
    c
}

/// [`experiment_config`] with the eight shape labels, for the guidance sweep.
pub fn labeled_experiment_config() -> RunConfig {
    let mut c = experiment_config();
    c.unet.num_classes = crate::data::NUM_LABELS;
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_video, DataConfig};

    #[test]
    fn chains_do_not_depend_on_threading() {
        let a = run_chains(5, 3, "t", |i, rng| {
            let v = crate::rng::normal_vec(rng, 2);
            Tensor::new(vec![1, 1, 2, 1], vec![v[0] + i as f64, v[1]])
        })
        .unwrap();
        let b: Vec<Tensor> = (0..5)
            .map(|i| {
                let mut rng = rng_for(3, "t", i as u64);
                let v = crate::rng::normal_vec(&mut rng, 2);
                Tensor::new(vec![1, 1, 2, 1], vec![v[0] + i as f64, v[1]]).unwrap()
            })
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn pooled_moments_of_prior_draws() {
        let p = oracle_prior([3, 2, 2, 1], 0.7).unwrap();
        let mut rng = rng_for(0, "pm", 0);
        let xs: Vec<Tensor> = (0..20000).map(|_| p.sample(&mut rng)).collect();
        let (mean, cov) = pooled_moments(&xs);
        let k = ar1_kernel(3, 0.7);
        assert!(max_abs((cov - k).iter().copied()) < 0.02);
        assert!(max_abs(mean.iter().zip(frame_means(&p)).map(|(a, b)| a - b)) < 0.01);
        assert!(max_abs(frame_means(&p).iter().map(|m| m - p.mean().data()[0])) > 0.1);
    }

    #[test]
    fn classifier_reads_clean_data() {
        let cfg = DataConfig {
            frames: 4,
            height: 16,
            width: 16,
            size_range: (5.0, 8.0),
            ..DataConfig::default()
        };
        let mut rng = rng_for(0, "cls", 0);
        let n = 400;
        let hits = (0..n)
            .filter(|_| {
                let (v, l) = generate_video(&cfg, &mut rng).unwrap();
                classify_label(&v, 1.0, -1.0) == l
            })
            .count();
        assert!(hits as f64 / n as f64 > 0.7, "{hits}/{n}");
    }

    #[test]
    fn spec_validation() {
        let base = experiment_config();
        ExperimentSpec::joint_ablation(base.clone()).validate().unwrap();
        ExperimentSpec::conditioning(base.clone()).validate().unwrap();
        let mut s = ExperimentSpec::cfg_sweep(base.clone());
        s.values.push("1".into());
        assert!(s.validate().is_err());
        let mut s = ExperimentSpec::cfg_sweep(base.clone());
        s.replicates = vec![4];
        assert!(s.validate().is_err());
        let mut s = ExperimentSpec::cfg_sweep(base.clone());
        s.values = vec!["inf".into()];
        assert!(s.validate().is_err());
        let mut s = ExperimentSpec::cfg_sweep(base);
        s.field = "nope".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn cfg_sweep_requires_unconditional_path() {
        let mut base = experiment_config();
        base.unet.num_classes = 8;
        base.train.cond_dropout = 0.0;
        assert!(run_cfg_sweep(&ExperimentSpec::cfg_sweep(base), |_| {}).is_err());
    }

    #[test]
    fn oracle_comparison_shares_first_blocks() {
        let mut base = experiment_config();
        base.sampler.steps = 16;
        let spec = ExperimentSpec {
            eval_videos: 64,
            replicates: vec![1, 2],
            ..ExperimentSpec::conditioning(base)
        };
        let r = run_conditioning_comparison_oracle(&spec, 0.9, 0, |_| {}).unwrap();
        assert!(r.first_blocks_identical);
        assert_eq!(r.rows.len(), 4);
        assert!(r.to_text().contains("reconstruction_guidance"));
    }
}
