//! Long-video and super-resolution compositions of the guided sampler.

use crate::diffusion::{Conditioning, Denoiser, FramePartition};
use crate::error::{config_err, shape_err, Error, Result};
use crate::resample::Downsample;
use crate::rng::Rng;
use crate::sampler::{sample_guided, CondMethod, Guide, GuidanceTerm, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Blocks of `block` frames; each block after the first reuses the last
/// `overlap` frames of the previous one as its conditioning frames.
#[derive(Clone, Debug)]
pub struct ExtensionPlan {
    pub block: usize,
    pub overlap: usize,
    pub total: usize,
    pub sampler: SamplerConfig,
}

impl ExtensionPlan {
    /// Overlap defaults to `block / 4` (at least 1).
    pub fn new(block: usize, total: usize, sampler: SamplerConfig) -> Result<Self> {
        let plan = ExtensionPlan {
            block,
            overlap: (block / 4).max(1),
            total,
            sampler,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_overlap(mut self, overlap: usize) -> Result<Self> {
        self.overlap = overlap;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (f, k, t) = (self.block, self.overlap, self.total);
        if k == 0 || k >= f {
            return Err(config_err!("overlap {k} must satisfy 1 <= k < block {f}"));
        }
        if t < f || (t - f) % (f - k) != 0 {
            return Err(config_err!(
                "total {t} frames unreachable from block {f} with overlap {k}"
            ));
        }
        self.sampler.validate()
    }

    pub fn blocks(&self) -> usize {
        1 + (self.total - self.block) / (self.block - self.overlap)
    }

    /// First frame index of block `b` in the output.
    pub fn block_start(&self, b: usize) -> usize {
        b * (self.block - self.overlap)
    }

    /// Output frames where newly generated content begins after a block
    /// boundary: `block + i·(block − overlap)`.
    pub fn seams(&self) -> Vec<usize> {
        (1..self.blocks())
            .map(|b| self.block_start(b) + self.overlap)
            .collect()
    }
}

fn check_frames(model: &dyn Denoiser, frames: usize) -> Result<[usize; 4]> {
    let d = model.dims();
    if d[0] != frames {
        return Err(shape_err!("model generates {} frames, plan block is {frames}", d[0]));
    }
    Ok(d)
}

/// Conditioning frames `0..k` of a `block`-frame video taken from the last
/// `k` frames of `prev`.
fn overlap_target(prev: &Tensor, block: usize, k: usize) -> Result<(FramePartition, Tensor)> {
    let f = prev.frames();
    let tail: Vec<usize> = (f - k..f).collect();
    let src = prev.select_frames(&tail)?;
    let mut dims = prev.dims().to_vec();
    dims[0] = block;
    let x_a = Tensor::zeros(&dims).with_frames(&(0..k).collect::<Vec<_>>(), &src)?;
    Ok((FramePartition::new(block, &(0..k).collect::<Vec<_>>())?, x_a))
}

/// Sample a `plan.total`-frame video block by block.  Overlap frames in
/// the output are always those of the earlier block.
pub fn extend_autoregressive(
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    plan: &ExtensionPlan,
    cond: &Conditioning,
    rng: &mut Rng,
) -> Result<Tensor> {
    plan.validate()?;
    check_frames(model, plan.block)?;
    extend_with(schedule, model, plan, cond, rng, |_, _| Ok(Vec::new()))
}

/// Shared block loop; `extra(b, start)` adds guidance terms for block `b`.
fn extend_with(
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    plan: &ExtensionPlan,
    cond: &Conditioning,
    rng: &mut Rng,
    extra: impl Fn(usize, usize) -> Result<Vec<GuidanceTerm>>,
) -> Result<Tensor> {
    let (f, k) = (plan.block, plan.overlap);
    let mut first = Guide::from_config(
        &SamplerConfig {
            conditioning: CondMethod::None,
            ..plan.sampler.clone()
        },
        None,
        None,
    )?;
    first.terms = extra(0, 0)?;
    let mut prev = sample_guided(schedule, model, &plan.sampler, cond, &first, rng)?;
    let mut parts = vec![prev.clone()];
    for b in 1..plan.blocks() {
        let (part, x_a) = overlap_target(&prev, f, k)?;
        let mut guide = if plan.sampler.conditioning == CondMethod::None {
            Guide::from_config(&plan.sampler, None, None)?
        } else {
            Guide::from_config(&plan.sampler, Some(&part), Some(&x_a))?
        };
        guide.terms.extend(extra(b, plan.block_start(b))?);
        let block = sample_guided(schedule, model, &plan.sampler, cond, &guide, rng)?;
        parts.push(block.select_frames(&(k..f).collect::<Vec<_>>())?);
        prev = block;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::cat_frames(&refs)
}

/// Fill in the frames between coarse frames taken at frameskip `n`.
///
/// Coarse frame `i` becomes output frame `i·n`; the model must generate
/// exactly `coarse.frames()·n` frames.
pub fn temporal_interpolate(
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    coarse: &Tensor,
    n: usize,
    cfg: &SamplerConfig,
    cond: &Conditioning,
    rng: &mut Rng,
) -> Result<Tensor> {
    if n == 0 {
        return Err(config_err!("frameskip must be positive"));
    }
    if n == 1 {
        return Ok(coarse.clone());
    }
    let fc = coarse.frames();
    let d = check_frames(model, fc * n).map_err(|_| {
        shape_err!(
            "{fc} coarse frames at stride {n} need a {}-frame model, got {}",
            fc * n,
            model.dims()[0]
        )
    })?;
    if coarse.dims()[1..] != d[1..] {
        return Err(shape_err!("coarse frames {:?} vs model {:?}", coarse.dims(), d));
    }
    if cfg.conditioning == CondMethod::None {
        return Err(Error::Usage("interpolation needs a conditioning method".into()));
    }
    let a: Vec<usize> = (0..fc).map(|i| i * n).collect();
    let part = FramePartition::new(fc * n, &a)?;
    let x_a = Tensor::zeros(&d).with_frames(&a, coarse)?;
    let guide = Guide::from_config(cfg, Some(&part), Some(&x_a))?;
    let out = sample_guided(schedule, model, cfg, cond, &guide, rng)?;
    out.with_frames(&a, coarse)
}

fn superres_factor(low: &[usize], high: &[usize; 4]) -> Result<Downsample> {
    if low.len() != 4 || low[0] != high[0] || low[3] != high[3] {
        return Err(shape_err!("low {low:?} vs high {high:?}"));
    }
    if low[1] == 0 || !high[1].is_multiple_of(low[1]) || !high[2].is_multiple_of(low[2]) || high[1] / low[1] != high[2] / low[2] {
        return Err(shape_err!(
            "high resolution {}x{} is not an integer multiple of {}x{}",
            high[1],
            high[2],
            low[1],
            low[2]
        ));
    }
    Ok(Downsample::new(high[1] / low[1]))
}

/// High-resolution sample whose downsampling is guided toward `low`
/// with weight `cfg.recon_weight`.
pub fn spatial_superres(
    schedule: &NoiseSchedule,
    model_hi: &dyn Denoiser,
    low: &Tensor,
    cfg: &SamplerConfig,
    cond: &Conditioning,
    rng: &mut Rng,
) -> Result<Tensor> {
    let d = superres_factor(low.dims(), &model_hi.dims())?;
    let guide = Guide {
        cfg_weight: cfg.cfg_weight,
        replace: None,
        terms: vec![GuidanceTerm {
            frames: (0..low.frames()).collect(),
            target: low.clone(),
            downsample: Some(d),
            weight: cfg.recon_weight,
        }],
    };
    sample_guided(schedule, model_hi, cfg, cond, &guide, rng)
}

/// Two-stage generation: a low-resolution, frameskip-`n` video from
/// `model_lo`, then a high-resolution frameskip-1 extension where every
/// block is guided both by its overlap frames and by the low-resolution
/// frames falling inside it (output frame `i·n` ↔ low frame `i`).
///
/// With equal resolutions and `n = 1` the second stage has nothing to add
/// and the stage-1 video is returned.
#[allow(clippy::too_many_arguments)]
pub fn cascade(
    schedule: &NoiseSchedule,
    model_lo: &dyn Denoiser,
    model_hi: &dyn Denoiser,
    cond: &Conditioning,
    plan_lo: &ExtensionPlan,
    plan_hi: &ExtensionPlan,
    n: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let low = extend_autoregressive(schedule, model_lo, plan_lo, cond, rng)?;
    let (dl, dh) = (model_lo.dims(), model_hi.dims());
    if n == 0 {
        return Err(config_err!("frameskip must be positive"));
    }
    if n == 1 && dl[1..] == dh[1..] {
        return Ok(low);
    }
    plan_hi.validate()?;
    check_frames(model_hi, plan_hi.block)?;
    if plan_hi.total != plan_lo.total * n {
        return Err(config_err!(
            "stage 2 total {} must be stage 1 total {} times frameskip {n}",
            plan_hi.total,
            plan_lo.total
        ));
    }
    let mut lo_dims = dl;
    lo_dims[0] = plan_hi.block;
    let down = superres_factor(&lo_dims, &dh)?;
    let weight = plan_hi.sampler.recon_weight;
    let f = plan_hi.block;
    extend_with(schedule, model_hi, plan_hi, cond, rng, |_, start| {
        let local: Vec<usize> = (0..f).filter(|j| (start + j) % n == 0).collect();
        if local.is_empty() {
            return Ok(Vec::new());
        }
        let src: Vec<usize> = local.iter().map(|j| (start + j) / n).collect();
        let target = Tensor::zeros(&lo_dims).with_frames(&local, &low.select_frames(&src)?)?;
        Ok(vec![GuidanceTerm {
            frames: local,
            target,
            downsample: Some(down),
            weight,
        }])
    })
}

/// Pearson correlation over pixels.  Two constant frames correlate 1 if
/// equal and 0 otherwise; one constant frame gives 0.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return if saa == 0.0 && sbb == 0.0 && a == b { 1.0 } else { 0.0 };
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Mean correlation between frame `s − 1` and frame `s` over `seams`.
pub fn coherence_at(video: &Tensor, seams: &[usize]) -> Result<f64> {
    if seams.is_empty() {
        return Err(shape_err!("no seams to measure"));
    }
    let mut total = 0.0;
    for &s in seams {
        if s == 0 || s >= video.frames() {
            return Err(shape_err!("seam {s} outside {} frames", video.frames()));
        }
        total += pearson(video.frame(s - 1).data(), video.frame(s).data());
    }
    Ok(total / seams.len() as f64)
}

/// Mean correlation between the last frame of each `block`-frame block and
/// the first frame of the next.
pub fn coherence_metric(video: &Tensor, block: usize) -> Result<f64> {
    let t = video.frames();
    if block == 0 || t < 2 * block {
        return Err(shape_err!("{t} frames is too short for blocks of {block}"));
    }
    let seams: Vec<usize> = (1..t / block).map(|b| b * block).collect();
    coherence_at(video, &seams)
}
