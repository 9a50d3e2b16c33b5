//! Reverse-process samplers and guidance.
//!
//! A step from `t` to `s < t` forms a (possibly guided) estimate `x̃` of the
//! clean video, moves with the ancestral rule
//! `z_s = μ̃(z_t, x̃) + sqrt((σ̃²)^{1−γ} (σ²_{t|s})^γ) ε`, then optionally
//! replaces conditioning frames and runs Langevin correction at `s`.
//!
//! Guidance order when several mechanisms are active: classifier-free
//! guidance first (in x-space, which is the same affine combination as in
//! ε-space), then all reconstruction terms through one vector-Jacobian
//! product of the combined prediction.

use crate::diffusion::{x_hat_vjp, Conditioning, Denoiser, FramePartition, PredKind, Prediction};
use crate::error::{config_err, shape_err, Error, Result};
use crate::resample::Downsample;
use crate::rng::{normal_vec, Rng};
use crate::schedule::{time_grid, NoiseSchedule};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ancestral,
    PredictorCorrector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondMethod {
    None,
    Replacement,
    ReconstructionGuidance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReplaceMode {
    /// `z^a_s ~ q(z_s | x^a)`
    Marginal,
    /// `z^a_s ~ q(z_s | z^a_t, x^a)`
    Conditional,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(Method::Ancestral),
            "predictor_corrector" | "pc" => Ok(Method::PredictorCorrector),
            _ => Err(config_err!("unknown sampler method '{s}'")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Ancestral => "ancestral",
            Method::PredictorCorrector => "predictor_corrector",
        }
    }
}

impl CondMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CondMethod::None),
            "replacement" => Ok(CondMethod::Replacement),
            "reconstruction_guidance" | "guidance" => Ok(CondMethod::ReconstructionGuidance),
            _ => Err(config_err!("unknown conditioning method '{s}'")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CondMethod::None => "none",
            CondMethod::Replacement => "replacement",
            CondMethod::ReconstructionGuidance => "reconstruction_guidance",
        }
    }
}

impl ReplaceMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "marginal" => Ok(ReplaceMode::Marginal),
            "conditional" => Ok(ReplaceMode::Conditional),
            _ => Err(config_err!("unknown replacement mode '{s}'")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReplaceMode::Marginal => "marginal",
            ReplaceMode::Conditional => "conditional",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub gamma: f64,
    pub delta: f64,
    /// Langevin corrections after each predictor step (predictor-corrector only).
    pub correctors: usize,
    pub cfg_weight: f64,
    pub recon_weight: f64,
    pub method: Method,
    pub conditioning: CondMethod,
    pub replace_mode: ReplaceMode,
    /// clamp each step's `x̂` to the data range `[-1, 1]` (off for the
    /// Gaussian oracle, whose samples are unbounded); the returned `z_0` is
    /// never clipped
    pub clip_denoised: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 128,
            gamma: 0.1,
            delta: 0.1,
            correctors: 1,
            cfg_weight: 0.0,
            recon_weight: 1.0,
            method: Method::Ancestral,
            conditioning: CondMethod::None,
            replace_mode: ReplaceMode::Marginal,
            clip_denoised: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_err!("sampler.steps must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(config_err!("sampler.gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(config_err!("sampler.delta {} must be >= 0", self.delta));
        }
        if !(self.cfg_weight >= 0.0 && self.cfg_weight.is_finite()) {
            return Err(config_err!("sampler.cfg_weight {} must be >= 0", self.cfg_weight));
        }
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return Err(config_err!("sampler.recon_weight {} must be >= 0", self.recon_weight));
        }
        Ok(())
    }
}

/// `(σ̃²_{s|t})^{1−γ} (σ²_{t|s})^γ`.
pub fn ancestral_variance(schedule: &NoiseSchedule, s: f64, t: f64, gamma: f64) -> Result<f64> {
    let post = schedule.posterior(s, t)?.var;
    let trans = schedule.transition_variance(s, t)?;
    Ok(((1.0 - gamma) * post.ln() + gamma * trans.ln()).exp())
}

fn noise_like(z: &Tensor, rng: &mut Rng) -> Tensor {
    Tensor::new(z.dims().to_vec(), normal_vec(rng, z.len())).expect("dims of z")
}

/// Ancestral move from `t` to `s` given a clean estimate `x̂`.  At `s = 0`
/// the posterior mean is returned without noise.
pub fn ancestral_from_x(
    schedule: &NoiseSchedule,
    z: &Tensor,
    x_hat: &Tensor,
    s: f64,
    t: f64,
    gamma: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let (mean, _) = schedule.posterior_mean_var(z, x_hat, s, t)?;
    if s == 0.0 {
        return Ok(mean);
    }
    let var = ancestral_variance(schedule, s, t, gamma)?;
    mean.lincomb(1.0, &noise_like(z, rng), var.sqrt())
}

#[allow(clippy::too_many_arguments)]
pub fn ancestral_step(
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    z: &Tensor,
    s: f64,
    t: f64,
    gamma: f64,
    cond: &Conditioning,
    rng: &mut Rng,
) -> Result<Tensor> {
    if s >= t {
        return Err(Error::Order { s, t });
    }
    let lambda = schedule.log_snr(t)?;
    let x = model.predict(z, lambda, cond)?.x(z, lambda)?;
    ancestral_from_x(schedule, z, &x, s, t, gamma, rng)
}

/// `z ← z − ½ δ σ_s ε̂ + √δ σ_s ε'`.
pub fn langevin_from_eps(
    schedule: &NoiseSchedule,
    z: &Tensor,
    eps: &Tensor,
    s: f64,
    delta: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    if delta == 0.0 {
        return Ok(z.clone());
    }
    let sigma = schedule.eval(s)?.sigma;
    let drift = z.lincomb(1.0, eps, -0.5 * delta * sigma)?;
    drift.lincomb(1.0, &noise_like(z, rng), delta.sqrt() * sigma)
}

pub fn langevin_correct(
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    z: &Tensor,
    s: f64,
    delta: f64,
    cond: &Conditioning,
    rng: &mut Rng,
) -> Result<Tensor> {
    if delta == 0.0 {
        return Ok(z.clone());
    }
    let lambda = schedule.log_snr(s)?;
    let eps = model.predict(z, lambda, cond)?.eps(z, lambda)?;
    langevin_from_eps(schedule, z, &eps, s, delta, rng)
}

/// `ε̃ = (1+w) ε_c − w ε_u`, with `ε_u` the prediction at `c = 0`.
pub fn cfg_combine(eps_c: &Tensor, eps_u: &Tensor, w: f64) -> Result<Tensor> {
    eps_c.lincomb(1.0 + w, eps_u, -w)
}

pub fn cfg_predict(
    model: &dyn Denoiser,
    z: &Tensor,
    lambda: f64,
    cond: &Conditioning,
    w: f64,
) -> Result<Prediction> {
    let eps_c = model.predict(z, lambda, cond)?.eps(z, lambda)?;
    if w == 0.0 {
        return Ok(Prediction::new(PredKind::Epsilon, eps_c));
    }
    let eps_u = model.predict(z, lambda, &cond.unconditional())?.eps(z, lambda)?;
    Ok(Prediction::new(PredKind::Epsilon, cfg_combine(&eps_c, &eps_u, w)?))
}

/// Replace the a-frames of `z_s`; at `s = 0` they become `x^a` exactly.
#[allow(clippy::too_many_arguments)]
pub fn replacement_condition(
    schedule: &NoiseSchedule,
    z_s: &Tensor,
    z_t: Option<&Tensor>,
    x_a: &Tensor,
    part: &FramePartition,
    s: f64,
    t: f64,
    mode: ReplaceMode,
    rng: &mut Rng,
) -> Result<Tensor> {
    if part.a.is_empty() {
        return Err(Error::Usage("replacement needs at least one a-frame".into()));
    }
    if x_a.dims() != z_s.dims() {
        return Err(shape_err!("x_a {:?} vs z {:?}", x_a.dims(), z_s.dims()));
    }
    let xa = x_a.select_frames(&part.a)?;
    if s == 0.0 {
        return z_s.with_frames(&part.a, &xa);
    }
    let noise = noise_like(&xa, rng);
    let za = match mode {
        ReplaceMode::Marginal => {
            let ev = schedule.eval(s)?;
            xa.lincomb(ev.alpha, &noise, ev.sigma)?
        }
        ReplaceMode::Conditional => {
            let zt = z_t.ok_or_else(|| Error::Usage("conditional replacement needs z_t".into()))?;
            let zta = zt.select_frames(&part.a)?;
            let (mean, var) = schedule.posterior_mean_var(&zta, &xa, s, t)?;
            mean.lincomb(1.0, &noise, var.sqrt())?
        }
    };
    z_s.with_frames(&part.a, &za)
}

/// `w ‖x^a − D(x̂)^a‖²` on a set of frames; `D` is the identity when
/// `downsample` is `None`.
#[derive(Clone, Debug)]
pub struct GuidanceTerm {
    pub frames: Vec<usize>,
    /// full-length video at the term's resolution; only `frames` are read
    pub target: Tensor,
    pub downsample: Option<Downsample>,
    pub weight: f64,
}

impl GuidanceTerm {
    /// Gradient of the term with respect to `x̂`.
    fn cotangent(&self, x_hat: &Tensor) -> Result<Tensor> {
        let pred = match self.downsample {
            Some(d) => d.apply(x_hat)?,
            None => x_hat.clone(),
        };
        if pred.dims() != self.target.dims() {
            return Err(shape_err!(
                "guidance target {:?} vs prediction {:?}",
                self.target.dims(),
                pred.dims()
            ));
        }
        let pa = pred.select_frames(&self.frames)?;
        let ta = self.target.select_frames(&self.frames)?;
        // ∂/∂x̂ ‖x^a − x̂^a‖² = −2 (x^a − x̂^a)
        let r = ta.lincomb(-2.0 * self.weight, &pa, 2.0 * self.weight)?;
        let low = Tensor::zeros(pred.dims()).with_frames(&self.frames, &r)?;
        match self.downsample {
            Some(d) => d.adjoint(&low),
            None => Ok(low),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Replacement {
    pub part: FramePartition,
    pub x_a: Tensor,
    pub mode: ReplaceMode,
}

/// Everything that steers a chain besides the model itself.
#[derive(Clone, Debug, Default)]
pub struct Guide {
    pub cfg_weight: f64,
    pub replace: Option<Replacement>,
    pub terms: Vec<GuidanceTerm>,
}

impl Guide {
    pub fn from_config(
        cfg: &SamplerConfig,
        part: Option<&FramePartition>,
        x_a: Option<&Tensor>,
    ) -> Result<Guide> {
        let mut g = Guide {
            cfg_weight: cfg.cfg_weight,
            ..Default::default()
        };
        if cfg.conditioning == CondMethod::None {
            return Ok(g);
        }
        let (part, x_a) = match (part, x_a) {
            (Some(p), Some(x)) => (p, x),
            _ => {
                return Err(Error::Usage(format!(
                    "{} sampling needs a frame partition and x_a",
                    cfg.conditioning.name()
                )))
            }
        };
        if part.a.is_empty() {
            return Err(Error::Usage("conditioning needs at least one a-frame".into()));
        }
        g.replace = Some(Replacement {
            part: part.clone(),
            x_a: x_a.clone(),
            mode: cfg.replace_mode,
        });
        if cfg.conditioning == CondMethod::ReconstructionGuidance {
            g.terms.push(GuidanceTerm {
                frames: part.a.clone(),
                target: x_a.clone(),
                downsample: None,
                weight: cfg.recon_weight,
            });
        }
        Ok(g)
    }
}

/// `x̃` at `(z, λ)`: conditional or CFG-combined prediction, then the
/// reconstruction adjustment `x̃ = x̂ − (α/2) (∂x̂/∂z)ᵀ Σ_k w_k ∇_x̂ ‖·‖²`.
pub fn guided_x(
    model: &dyn Denoiser,
    z: &Tensor,
    lambda: f64,
    cond: &Conditioning,
    guide: &Guide,
) -> Result<Tensor> {
    let w = guide.cfg_weight;
    let use_cfg = w != 0.0 && cond.label.is_some();
    if guide.terms.is_empty() {
        let x_c = model.predict(z, lambda, cond)?.x(z, lambda)?;
        if !use_cfg {
            return Ok(x_c);
        }
        let x_u = model.predict(z, lambda, &cond.unconditional())?.x(z, lambda)?;
        return x_c.lincomb(1.0 + w, &x_u, -w);
    }
    let x0 = if use_cfg {
        let x_c = model.predict(z, lambda, cond)?.x(z, lambda)?;
        let x_u = model.predict(z, lambda, &cond.unconditional())?.x(z, lambda)?;
        x_c.lincomb(1.0 + w, &x_u, -w)?
    } else {
        model.predict(z, lambda, cond)?.x(z, lambda)?
    };
    let mut cot = Tensor::zeros(z.dims());
    for term in &guide.terms {
        cot = cot.add(&term.cotangent(&x0)?)?;
    }
    let grad = if use_cfg {
        let (_, g_c) = x_hat_vjp(model, z, lambda, cond, &cot)?;
        let (_, g_u) = x_hat_vjp(model, z, lambda, &cond.unconditional(), &cot)?;
        g_c.lincomb(1.0 + w, &g_u, -w)?
    } else {
        x_hat_vjp(model, z, lambda, cond, &cot)?.1
    };
    let alpha = crate::schedule::alpha_sigma(lambda).0;
    x0.lincomb(1.0, &grad, -alpha / 2.0)
}

/// Reconstruction-guided clean estimate on the b-frames; a-frames carry
/// the unadjusted prediction.
pub fn reconstruction_guided_predict(
    model: &dyn Denoiser,
    z: &Tensor,
    x_a: &Tensor,
    part: &FramePartition,
    w_r: f64,
    lambda: f64,
    cond: &Conditioning,
) -> Result<Prediction> {
    let guide = Guide {
        terms: vec![GuidanceTerm {
            frames: part.a.clone(),
            target: x_a.clone(),
            downsample: None,
            weight: w_r,
        }],
        ..Default::default()
    };
    let xt = guided_x(model, z, lambda, cond, &guide)?;
    let x0 = model.predict(z, lambda, cond)?.x(z, lambda)?;
    let xb = xt.select_frames(&part.b)?;
    Ok(Prediction::new(PredKind::X, x0.with_frames(&part.b, &xb)?))
}

/// `x̃ = x̂ − (w_r α/2) ∇_z ‖x^a − D x̂‖²` over all frames.
pub fn superres_guided_predict(
    model_hi: &dyn Denoiser,
    z: &Tensor,
    x_low: &Tensor,
    downsample: Downsample,
    w_r: f64,
    lambda: f64,
    cond: &Conditioning,
) -> Result<Prediction> {
    let want = downsample.out_dims(z.dims())?;
    if x_low.dims() != want {
        return Err(shape_err!(
            "low-resolution input {:?}, expected {:?}",
            x_low.dims(),
            want
        ));
    }
    let guide = Guide {
        terms: vec![GuidanceTerm {
            frames: (0..z.dims()[0]).collect(),
            target: x_low.clone(),
            downsample: Some(downsample),
            weight: w_r,
        }],
        ..Default::default()
    };
    Ok(Prediction::new(PredKind::X, guided_x(model_hi, z, lambda, cond, &guide)?))
}

fn eps_from_x(z: &Tensor, x: &Tensor, lambda: f64) -> Result<Tensor> {
    Prediction::new(PredKind::X, x.clone()).eps(z, lambda)
}

/// Run a chain from `z_1 ~ N(0, I)` under an explicit guide.
pub fn sample_guided(
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    cfg: &SamplerConfig,
    cond: &Conditioning,
    guide: &Guide,
    rng: &mut Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let dims = model.dims();
    let mut z = Tensor::new(dims.to_vec(), normal_vec(rng, dims.iter().product()))?;
    sample_from(schedule, model, cfg, cond, guide, &mut z, rng)?;
    Ok(z)
}

fn clip(cfg: &SamplerConfig, x: Tensor) -> Tensor {
    if cfg.clip_denoised {
        x.map(|v| v.clamp(-1.0, 1.0))
    } else {
        x
    }
}

fn sample_from(
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    cfg: &SamplerConfig,
    cond: &Conditioning,
    guide: &Guide,
    z: &mut Tensor,
    rng: &mut Rng,
) -> Result<()> {
    let grid = time_grid(cfg.steps);
    for i in 0..cfg.steps {
        let (t, s) = (grid[i], grid[i + 1]);
        let lt = schedule.log_snr(t).map_err(|e| e.at_step(i))?;
        let x = clip(cfg, guided_x(model, z, lt, cond, guide).map_err(|e| e.at_step(i))?);
        let mut zs = ancestral_from_x(schedule, z, &x, s, t, cfg.gamma, rng).map_err(|e| e.at_step(i))?;
        if let Some(r) = &guide.replace {
            zs = replacement_condition(schedule, &zs, Some(z), &r.x_a, &r.part, s, t, r.mode, rng)
                .map_err(|e| e.at_step(i))?;
        }
        if cfg.method == Method::PredictorCorrector && s > 0.0 {
            let ls = schedule.log_snr(s)?;
            for _ in 0..cfg.correctors {
                let xs = clip(cfg, guided_x(model, &zs, ls, cond, guide).map_err(|e| e.at_step(i))?);
                let eps = eps_from_x(&zs, &xs, ls)?;
                let zc = langevin_from_eps(schedule, &zs, &eps, s, cfg.delta, rng).map_err(|e| e.at_step(i))?;
                // a-frames keep their replaced values through the corrector
                zs = match &guide.replace {
                    Some(r) => zc.with_frames(&r.part.a, &zs.select_frames(&r.part.a)?)?,
                    None => zc,
                };
            }
        }
        *z = zs;
    }
    Ok(())
}

/// Sample with the configured conditioning; `partition` and `x_a` are
/// required for replacement and reconstruction guidance.
pub fn sample(
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    cfg: &SamplerConfig,
    cond: &Conditioning,
    partition: Option<(&FramePartition, &Tensor)>,
    rng: &mut Rng,
) -> Result<Tensor> {
    let guide = Guide::from_config(cfg, partition.map(|p| p.0), partition.map(|p| p.1))?;
    sample_guided(schedule, model, cfg, cond, &guide, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::GaussianVideoPrior;
    use crate::rng::rng_for;

    fn prior(dims: [usize; 4], rho: f64) -> GaussianVideoPrior {
        let mu = Tensor::from_fn(&dims, |i| 0.1 * ((i % 5) as f64 - 2.0));
        GaussianVideoPrior::ar1(dims, mu, rho).unwrap()
    }

    /// Fixed ε outputs regardless of input; no gradient.
    struct ConstEps(Tensor, Tensor);

    impl Denoiser for ConstEps {
        fn kind(&self) -> PredKind {
            PredKind::Epsilon
        }
        fn dims(&self) -> [usize; 4] {
            let d = self.0.dims();
            [d[0], d[1], d[2], d[3]]
        }
        fn predict(&self, _z: &Tensor, _l: f64, c: &Conditioning) -> Result<Prediction> {
            let v = if c.label.is_some() { &self.0 } else { &self.1 };
            Ok(Prediction::new(PredKind::Epsilon, v.clone()))
        }
    }

    #[test]
    fn variance_interpolation_endpoints_and_formula() {
        let sc = NoiseSchedule::default();
        let mut rng = rng_for(1, "st", 0);
        use rand::Rng as _;
        for _ in 0..20 {
            let t: f64 = rng.random_range(0.05..1.0);
            let s: f64 = rng.random_range(0.0..t);
            let post = sc.posterior(s, t).unwrap().var;
            let trans = sc.transition_variance(s, t).unwrap();
            assert_eq!(ancestral_variance(&sc, s, t, 0.0).unwrap(), post.ln().exp());
            for g in [0.0, 0.1, 0.3, 1.0] {
                let want = post.powf(1.0 - g) * trans.powf(g);
                let got = ancestral_variance(&sc, s, t, g).unwrap();
                assert!((got - want).abs() <= 1e-12 * want);
            }
            assert!((ancestral_variance(&sc, s, t, 1.0).unwrap() - trans).abs() <= 1e-12 * trans);
        }
        assert!(matches!(ancestral_variance(&sc, 0.5, 0.4, 0.0), Err(Error::Order { .. })));
    }

    #[test]
    fn final_step_is_posterior_mean() {
        let sc = NoiseSchedule::default();
        let p = prior([2, 2, 2, 1], 0.5);
        let z = Tensor::from_fn(&[2, 2, 2, 1], |i| (i as f64 * 0.37).sin());
        let mut rng = rng_for(2, "fs", 0);
        let t = 0.01;
        let zs = ancestral_step(&sc, &p, &z, 0.0, t, 0.3, &Conditioning::none(), &mut rng).unwrap();
        let x = p.denoise(&z, sc.log_snr(t).unwrap()).unwrap();
        assert!(zs.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn langevin_zero_score_and_zero_step() {
        let sc = NoiseSchedule::default();
        let dims = [1, 1, 1, 1];
        let m = ConstEps(Tensor::zeros(&dims), Tensor::zeros(&dims));
        let z = Tensor::zeros(&dims);
        let mut rng = rng_for(3, "lz", 0);
        let s = 0.5;
        let sig = sc.eval(s).unwrap().sigma;
        let mut acc = 0.0;
        let n = 20000;
        for _ in 0..n {
            let x = langevin_correct(&sc, &m, &z, s, 0.1, &Conditioning::none(), &mut rng).unwrap();
            acc += x.item() * x.item();
        }
        let want = 0.1 * sig * sig;
        assert!((acc / n as f64 - want).abs() < 0.05 * want);
        let z1 = Tensor::full(&dims, 0.7);
        assert_eq!(
            langevin_correct(&sc, &m, &z1, s, 0.0, &Conditioning::none(), &mut rng).unwrap(),
            z1
        );
    }

    #[test]
    fn cfg_algebra() {
        let dims = [1, 1, 1, 1];
        let m = ConstEps(Tensor::full(&dims, 1.0), Tensor::full(&dims, 0.0));
        let z = Tensor::zeros(&dims);
        let c = Conditioning::label(1);
        let e = cfg_predict(&m, &z, 0.0, &c, 2.0).unwrap();
        assert_eq!(e.value.item(), 3.0);
        assert_eq!(cfg_predict(&m, &z, 0.0, &c, 0.0).unwrap().value.item(), 1.0);
        let same = ConstEps(Tensor::full(&dims, 0.4), Tensor::full(&dims, 0.4));
        for w in [0.5, 1.0, 5.0] {
            assert!((cfg_predict(&same, &z, 0.0, &c, w).unwrap().value.item() - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn replacement_contracts() {
        let sc = NoiseSchedule::default();
        let dims = [3, 2, 1, 1];
        let part = FramePartition::new(3, &[1]).unwrap();
        let z = Tensor::from_fn(&dims, |i| i as f64);
        let mut xa = Tensor::full(&dims, f64::NAN).to_vec();
        xa[2] = 0.5;
        xa[3] = -0.5;
        let xa = Tensor::new(dims.to_vec(), xa).unwrap();
        let mut rng = rng_for(4, "rp", 0);
        for mode in [ReplaceMode::Marginal, ReplaceMode::Conditional] {
            let out = replacement_condition(&sc, &z, Some(&z), &xa, &part, 0.3, 0.4, mode, &mut rng).unwrap();
            assert_eq!(out.frame(0), z.frame(0));
            assert_eq!(out.frame(2), z.frame(2));
            assert!(out.all_finite());
        }
        let end = replacement_condition(&sc, &z, Some(&z), &xa, &part, 0.0, 0.1, ReplaceMode::Marginal, &mut rng).unwrap();
        assert_eq!(end.frame(1).data(), &[0.5, -0.5]);
        let empty = FramePartition::unconditional(3);
        assert!(replacement_condition(&sc, &z, None, &xa, &empty, 0.3, 0.4, ReplaceMode::Marginal, &mut rng).is_err());
    }

    #[test]
    fn replaced_frames_have_marginal_moments() {
        let sc = NoiseSchedule::default();
        let dims = [2, 1, 1, 1];
        let part = FramePartition::new(2, &[0]).unwrap();
        let xa = Tensor::from_f64(&dims, &[0.6, 0.0]).unwrap();
        let z = Tensor::zeros(&dims);
        let s = 0.45;
        let ev = sc.eval(s).unwrap();
        let mut rng = rng_for(5, "mm", 0);
        let n = 100_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let v = replacement_condition(&sc, &z, None, &xa, &part, s, 0.5, ReplaceMode::Marginal, &mut rng)
                .unwrap()
                .data()[0];
            m1 += v;
            m2 += v * v;
        }
        let mean = m1 / n as f64;
        let var = m2 / n as f64 - mean * mean;
        let se_m = ev.sigma / (n as f64).sqrt();
        let se_v = ev.sigma.powi(2) * (2.0 / n as f64).sqrt();
        assert!((mean - ev.alpha * 0.6).abs() < 3.0 * se_m);
        assert!((var - ev.sigma.powi(2)).abs() < 3.0 * se_v);
    }

    #[test]
    fn guidance_without_gradient_is_usage_error() {
        let dims = [2, 1, 1, 1];
        let m = ConstEps(Tensor::zeros(&dims), Tensor::zeros(&dims));
        let part = FramePartition::new(2, &[0]).unwrap();
        let z = Tensor::zeros(&dims);
        let r = reconstruction_guided_predict(&m, &z, &z, &part, 1.0, 0.0, &Conditioning::none());
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn zero_weight_guidance_matches_plain_prediction() {
        let dims = [4, 2, 1, 1];
        let p = prior(dims, 0.9);
        let part = FramePartition::new(4, &[0, 1]).unwrap();
        let z = Tensor::from_fn(&dims, |i| (i as f64).cos());
        let xa = Tensor::from_fn(&dims, |i| 0.3 - 0.1 * i as f64);
        let g = reconstruction_guided_predict(&p, &z, &xa, &part, 0.0, 1.0, &Conditioning::none()).unwrap();
        assert_eq!(g.value, p.denoise(&z, 1.0).unwrap());
    }

    #[test]
    fn guidance_gradient_matches_finite_differences() {
        let dims = [4, 2, 1, 1];
        let p = prior(dims, 0.9);
        let part = FramePartition::new(4, &[0]).unwrap();
        let xa = Tensor::from_fn(&dims, |i| 0.5 - 0.2 * i as f64);
        let z = Tensor::from_fn(&dims, |i| (1.3 * i as f64).sin());
        let lambda = 0.8;
        let loss = |z: &Tensor| {
            let x = p.denoise(z, lambda).unwrap();
            let d = xa.select_frames(&part.a).unwrap().sub(&x.select_frames(&part.a).unwrap()).unwrap();
            d.sum_squares()
        };
        let x0 = p.denoise(&z, lambda).unwrap();
        let term = GuidanceTerm {
            frames: part.a.clone(),
            target: xa.clone(),
            downsample: None,
            weight: 1.0,
        };
        let cot = term.cotangent(&x0).unwrap();
        let (_, grad) = x_hat_vjp(&p, &z, lambda, &Conditioning::none(), &cot).unwrap();
        let h = 1e-6;
        for &f in &part.b {
            for k in 0..2 {
                let i = f * 2 + k;
                let mut zp = z.to_vec();
                let mut zm = z.to_vec();
                zp[i] += h;
                zm[i] -= h;
                let fd = (loss(&Tensor::new(dims.to_vec(), zp).unwrap()) - loss(&Tensor::new(dims.to_vec(), zm).unwrap())) / (2.0 * h);
                let rel = (fd - grad.data()[i]).abs() / fd.abs().max(grad.data()[i].abs()).max(1e-8);
                assert!(rel < 1e-4, "{fd} vs {}", grad.data()[i]);
            }
        }
    }

    #[test]
    fn missing_term_closes_gap_at_small_t() {
        let sc = NoiseSchedule::default();
        let dims = [4, 2, 2, 1];
        let p = prior(dims, 0.9);
        let part = FramePartition::new(4, &[0, 1]).unwrap();
        let mut rng = rng_for(6, "gap", 0);
        let mut ratios = Vec::new();
        for t in [0.1, 0.05, 0.02] {
            let (mut gap_rep, mut gap_rg) = (0.0, 0.0);
            for _ in 0..20 {
                let x = p.sample(&mut rng);
                let ev = sc.eval(t).unwrap();
                let z = x.lincomb(ev.alpha, &noise_like(&x, &mut rng), ev.sigma).unwrap();
                let exact = p.conditional_denoise(&z, ev.lambda, &x, &part).unwrap();
                let rep = p.denoise(&z, ev.lambda).unwrap();
                let rg = reconstruction_guided_predict(&p, &z, &x, &part, 1.0, ev.lambda, &Conditioning::none())
                    .unwrap()
                    .value;
                let b = |v: &Tensor| v.select_frames(&part.b).unwrap();
                gap_rep += b(&rep).sub(&b(&exact)).unwrap().sum_squares();
                gap_rg += b(&rg).sub(&b(&exact)).unwrap().sum_squares();
            }
            ratios.push((gap_rep / gap_rg).sqrt());
        }
        // the approximation is first order in σ²/α², so the gain grows as t → 0
        assert!(ratios[1] >= 10.0, "gap reduction at t=0.05 only {}", ratios[1]);
        assert!(ratios[0] < ratios[1] && ratios[1] < ratios[2], "{ratios:?}");
    }

    #[test]
    fn superres_zero_residual_and_mismatch() {
        let dims = [2, 4, 4, 1];
        let p = prior(dims, 0.5);
        let z = Tensor::from_fn(&dims, |i| (0.2 * i as f64).sin());
        let d = Downsample::new(2);
        let x = p.denoise(&z, 1.0).unwrap();
        let low = d.apply(&x).unwrap();
        let g = superres_guided_predict(&p, &z, &low, d, 10.0, 1.0, &Conditioning::none()).unwrap();
        assert!(g.value.max_abs_diff(&x) < 1e-14);
        let bad = Tensor::zeros(&[2, 3, 2, 1]);
        assert!(superres_guided_predict(&p, &z, &bad, d, 1.0, 1.0, &Conditioning::none()).is_err());
    }

    #[test]
    fn single_step_collapses_to_prior_mean() {
        let sc = NoiseSchedule::default();
        let dims = [2, 2, 2, 1];
        let p = prior(dims, 0.9);
        let cfg = SamplerConfig {
            steps: 1,
            ..Default::default()
        };
        let mut rng = rng_for(7, "one", 0);
        let out = sample(&sc, &p, &cfg, &Conditioning::none(), None, &mut rng).unwrap();
        assert!(out.max_abs_diff(p.mean()) < 1e-4);
    }

    #[test]
    fn determinism_and_wr_zero_reduction() {
        let sc = NoiseSchedule::default();
        let dims = [4, 2, 1, 1];
        let p = prior(dims, 0.9);
        let part = FramePartition::new(4, &[0]).unwrap();
        let mut xa = vec![f64::NAN; 8];
        xa[0] = 0.4;
        xa[1] = -0.1;
        let xa = Tensor::new(dims.to_vec(), xa).unwrap();
        for method in [Method::Ancestral, Method::PredictorCorrector] {
            let mut cfg = SamplerConfig {
                steps: 16,
                method,
                conditioning: CondMethod::Replacement,
                ..Default::default()
            };
            let run = |cfg: &SamplerConfig| {
                let mut rng = rng_for(8, "chain", 0);
                sample(&sc, &p, cfg, &Conditioning::none(), Some((&part, &xa)), &mut rng).unwrap()
            };
            let rep = run(&cfg);
            assert!(rep.all_finite());
            assert_eq!(rep, run(&cfg));
            assert_eq!(rep.frame(0).data(), &[0.4, -0.1]);
            cfg.conditioning = CondMethod::ReconstructionGuidance;
            cfg.recon_weight = 0.0;
            assert_eq!(run(&cfg), rep);
            cfg.recon_weight = 1.0;
            assert_ne!(run(&cfg), rep);
        }
    }

    #[test]
    fn conditioning_without_partition_is_rejected() {
        let sc = NoiseSchedule::default();
        let p = prior([2, 1, 1, 1], 0.5);
        let cfg = SamplerConfig {
            conditioning: CondMethod::Replacement,
            ..Default::default()
        };
        let mut rng = rng_for(9, "x", 0);
        assert!(matches!(
            sample(&sc, &p, &cfg, &Conditioning::none(), None, &mut rng),
            Err(Error::Usage(_))
        ));
        let bad = SamplerConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(matches!(sample(&sc, &p, &bad, &Conditioning::none(), None, &mut rng), Err(Error::Config(_))));
    }
}
