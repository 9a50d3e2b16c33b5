//! Run configuration, on-disk formats and the evaluation report.
//!
//! Formats (all little-endian):
//!
//! * video container: `"VDT1"`, u32 ndims (= 4), 4 x u32 dims, u8 dtype
//!   code (0 = f32, 1 = f64), then row-major values;
//! * checkpoint: `"VDCK"`, u32 + UTF-8 config text, u64 step, u32 entry
//!   count, then per entry (sorted by name) u32 + UTF-8 name, u32 ndims,
//!   u32 dims, u8 dtype code, values;
//! * frames: binary PPM (P6, maxval 255), `v → round((v + 1)·127.5)`
//!   clamped to `[0, 255]`.
//!
//! Every file write goes to a temporary sibling and is then renamed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::DataConfig;
use crate::diffusion::{ParamMap, PredKind, TrainState};
use crate::error::{config_err, shape_err, Error, Result};
use crate::pipelines::{coherence_metric, pearson, ExtensionPlan};
use crate::sampler::{CondMethod, Method, ReplaceMode, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::{DType, Real, Tensor};
use crate::train::TrainConfig;
use crate::unet::UNetConfig;

pub const VIDEO_MAGIC: &[u8; 4] = b"VDT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VDCK";

// ---------------------------------------------------------------------------
// config

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub unet: UNetConfig,
    pub sampler: SamplerConfig,
    pub num_videos: usize,
    pub size_range: (f64, f64),
    pub speed_range: (f64, f64),
    pub foreground: f64,
    pub background: f64,
    pub plan_overlap: usize,
    pub plan_total: usize,
    pub train: TrainConfig,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let unet = UNetConfig::toy();
        RunConfig {
            seed: 0,
            lambda_min: -20.0,
            lambda_max: 20.0,
            plan_overlap: (unet.frames / 4).max(1),
            plan_total: 10,
            unet,
            sampler: SamplerConfig {
                clip_denoised: true,
                ..SamplerConfig::default()
            },
            num_videos: 512,
            size_range: (4.0, 7.0),
            speed_range: (0.5, 1.5),
            foreground: 1.0,
            background: -1.0,
            train: TrainConfig::default(),
            log_every: 50,
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.trim()
        .parse()
        .map_err(|_| config_err!("bad value '{v}' for key '{key}'"))
}

impl RunConfig {
    /// Canonical `key=value` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let u = &self.unet;
        let s = &self.sampler;
        let t = &self.train;
        vec![
            ("seed", self.seed.to_string()),
            ("schedule.lambda_min", self.lambda_min.to_string()),
            ("schedule.lambda_max", self.lambda_max.to_string()),
            ("unet.base_channels", u.base_channels.to_string()),
            ("unet.channel_multipliers", list(&u.channel_multipliers)),
            ("unet.blocks_per_resolution", u.blocks_per_resolution.to_string()),
            ("unet.attention_resolutions", list(&u.attention_resolutions)),
            ("unet.head_dim", u.head_dim.to_string()),
            ("unet.cond_embedding_dim", u.cond_embedding_dim.to_string()),
            ("unet.cond_mlp_layers", u.cond_mlp_layers.to_string()),
            ("unet.frames", u.frames.to_string()),
            ("unet.spatial_size", u.spatial_size.to_string()),
            ("unet.in_channels", u.in_channels.to_string()),
            ("unet.out_channels", u.out_channels.to_string()),
            ("unet.num_classes", u.num_classes.to_string()),
            ("unet.norm_groups", u.norm_groups.to_string()),
            ("loss.target", u.prediction.name().to_string()),
            ("sampler.steps", s.steps.to_string()),
            ("sampler.gamma", s.gamma.to_string()),
            ("sampler.delta", s.delta.to_string()),
            ("sampler.correctors", s.correctors.to_string()),
            ("sampler.cfg_weight", s.cfg_weight.to_string()),
            ("sampler.recon_weight", s.recon_weight.to_string()),
            ("sampler.method", s.method.name().to_string()),
            ("sampler.conditioning", s.conditioning.name().to_string()),
            ("sampler.replace_mode", s.replace_mode.name().to_string()),
            ("sampler.clip_denoised", s.clip_denoised.to_string()),
            ("data.num_videos", self.num_videos.to_string()),
            ("data.size_min", self.size_range.0.to_string()),
            ("data.size_max", self.size_range.1.to_string()),
            ("data.speed_min", self.speed_range.0.to_string()),
            ("data.speed_max", self.speed_range.1.to_string()),
            ("data.foreground", self.foreground.to_string()),
            ("data.background", self.background.to_string()),
            ("plan.overlap", self.plan_overlap.to_string()),
            ("plan.total", self.plan_total.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.ema_decay", t.ema_decay.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.independent_images", t.independent_images.to_string()),
            ("train.cond_dropout", t.cond_dropout.to_string()),
            ("train.log_every", self.log_every.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Set one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let u = &mut self.unet;
        let s = &mut self.sampler;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "schedule.lambda_min" => self.lambda_min = parse_num(key, v)?,
            "schedule.lambda_max" => self.lambda_max = parse_num(key, v)?,
            "unet.base_channels" => u.base_channels = parse_num(key, v)?,
            "unet.channel_multipliers" => u.channel_multipliers = parse_list(key, v)?,
            "unet.blocks_per_resolution" => u.blocks_per_resolution = parse_num(key, v)?,
            "unet.attention_resolutions" => u.attention_resolutions = parse_list(key, v)?,
            "unet.head_dim" => u.head_dim = parse_num(key, v)?,
            "unet.cond_embedding_dim" => u.cond_embedding_dim = parse_num(key, v)?,
            "unet.cond_mlp_layers" => u.cond_mlp_layers = parse_num(key, v)?,
            "unet.frames" => u.frames = parse_num(key, v)?,
            "unet.spatial_size" => u.spatial_size = parse_num(key, v)?,
            "unet.in_channels" => u.in_channels = parse_num(key, v)?,
            "unet.out_channels" => u.out_channels = parse_num(key, v)?,
            "unet.num_classes" => u.num_classes = parse_num(key, v)?,
            "unet.norm_groups" => u.norm_groups = parse_num(key, v)?,
            "loss.target" => u.prediction = PredKind::parse(v)?,
            "sampler.steps" => s.steps = parse_num(key, v)?,
            "sampler.gamma" => s.gamma = parse_num(key, v)?,
            "sampler.delta" => s.delta = parse_num(key, v)?,
            "sampler.correctors" => s.correctors = parse_num(key, v)?,
            "sampler.cfg_weight" => s.cfg_weight = parse_num(key, v)?,
            "sampler.recon_weight" => s.recon_weight = parse_num(key, v)?,
            "sampler.method" => s.method = Method::parse(v)?,
            "sampler.conditioning" => s.conditioning = CondMethod::parse(v)?,
            "sampler.replace_mode" => s.replace_mode = ReplaceMode::parse(v)?,
            "sampler.clip_denoised" => s.clip_denoised = parse_num(key, v)?,
            "data.num_videos" => self.num_videos = parse_num(key, v)?,
            "data.size_min" => self.size_range.0 = parse_num(key, v)?,
            "data.size_max" => self.size_range.1 = parse_num(key, v)?,
            "data.speed_min" => self.speed_range.0 = parse_num(key, v)?,
            "data.speed_max" => self.speed_range.1 = parse_num(key, v)?,
            "data.foreground" => self.foreground = parse_num(key, v)?,
            "data.background" => self.background = parse_num(key, v)?,
            "plan.overlap" => self.plan_overlap = parse_num(key, v)?,
            "plan.total" => self.plan_total = parse_num(key, v)?,
            "train.lr" => t.lr = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.steps" => t.steps = parse_num(key, v)?,
            "train.ema_decay" => t.ema_decay = parse_num(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_num(key, v)?,
            "train.independent_images" => t.independent_images = parse_num(key, v)?,
            "train.cond_dropout" => t.cond_dropout = parse_num(key, v)?,
            "train.log_every" => self.log_every = parse_num(key, v)?,
            _ => return Err(config_err!("unknown config key '{key}'")),
        }
        Ok(())
    }

    /// Parse `key=value` lines over the defaults; `#` starts a comment.
    /// Duplicate keys are rejected.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key=value, got '{raw}'", n + 1))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(config_err!("line {}: duplicate key '{k}'", n + 1));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.unet.validate()?;
        if self.unet.in_channels != self.unet.out_channels {
            return Err(config_err!(
                "unet.in_channels {} must equal unet.out_channels {}",
                self.unet.in_channels,
                self.unet.out_channels
            ));
        }
        if self.unet.prediction == PredKind::X {
            return Err(config_err!("loss.target must be epsilon or v"));
        }
        self.sampler.validate()?;
        self.data_config().validate()?;
        for v in [self.foreground, self.background] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(config_err!("gray level {v} outside [-1, 1]"));
            }
        }
        if self.num_videos == 0 {
            return Err(config_err!("data.num_videos must be >= 1"));
        }
        self.plan()?;
        self.train.validate()?;
        if self.log_every == 0 {
            return Err(config_err!("train.log_every must be >= 1"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.lambda_min, self.lambda_max)
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            frames: self.unet.frames,
            height: self.unet.spatial_size,
            width: self.unet.spatial_size,
            size_range: self.size_range,
            speed_range: self.speed_range,
            foreground: self.foreground,
            background: self.background,
        }
    }

    pub fn plan(&self) -> Result<ExtensionPlan> {
        let p = ExtensionPlan {
            block: self.unet.frames,
            overlap: self.plan_overlap,
            total: self.plan_total,
            sampler: self.sampler.clone(),
        };
        p.validate()?;
        Ok(p)
    }
}

// ---------------------------------------------------------------------------
// atomic files

/// Write `bytes` to a temporary sibling of `path`, then rename over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// tensors of either dtype

#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn to_f64(&self) -> Tensor {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.clone(),
        }
    }

    /// Exact when the stored dtype is `T`; a format error otherwise.
    pub fn into_typed<T: Real>(self) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::Format(format!(
                "stored {:?} tensor, expected {:?}",
                self.dtype(),
                T::DTYPE
            )));
        }
        Ok(match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) -> Result<()> {
    put_u32(out, t.dims().len())?;
    for &d in t.dims() {
        put_u32(out, d)?;
    }
    out.push(T::DTYPE as u8);
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

fn put_any(out: &mut Vec<u8>, t: &AnyTensor) -> Result<()> {
    match t {
        AnyTensor::F32(t) => put_tensor(out, t),
        AnyTensor::F64(t) => put_tensor(out, t),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<AnyTensor> {
        let nd = self.u32()?;
        let mut dims = Vec::with_capacity(nd.min(16));
        for _ in 0..nd {
            dims.push(self.u32()?);
        }
        let dtype = DType::from_code(self.u8()?)?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("dims overflow".into()))?;
        let bytes = self.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        fn decode<T: Real>(dims: Vec<usize>, bytes: &[u8]) -> Result<Tensor<T>> {
            let data = bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
            Tensor::new(dims, data)
        }
        Ok(match dtype {
            DType::F32 => AnyTensor::F32(decode(dims, bytes)?),
            DType::F64 => AnyTensor::F64(decode(dims, bytes)?),
        })
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != m {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(m)
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// video container

pub fn encode_video<T: Real>(video: &Tensor<T>) -> Result<Vec<u8>> {
    if video.dims().len() != 4 {
        return Err(shape_err!("video container needs 4 dims, got {:?}", video.dims()));
    }
    let mut out = Vec::with_capacity(25 + video.len() * T::DTYPE.size());
    out.extend_from_slice(VIDEO_MAGIC);
    put_tensor(&mut out, video)?;
    Ok(out)
}

pub fn decode_video(bytes: &[u8]) -> Result<AnyTensor> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(VIDEO_MAGIC)?;
    let t = r.tensor()?;
    if t.dims().len() != 4 {
        return Err(Error::Format(format!("video with {} dims", t.dims().len())));
    }
    r.finish()?;
    Ok(t)
}

pub fn write_video<T: Real>(path: &Path, video: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode_video(video)?)
}

pub fn read_video(path: &Path) -> Result<AnyTensor> {
    decode_video(&fs::read(path)?)
}

/// `*.vdt` files of a directory in name order.
pub fn list_videos(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "vdt"))
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_video_dir(dir: &Path) -> Result<Vec<Tensor>> {
    list_videos(dir)?
        .iter()
        .map(|p| read_video(p).map(|t| t.to_f64()))
        .collect()
}

/// One integer per line.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    write_atomic(path, text.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad label line '{l}'")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// checkpoint

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub tensors: BTreeMap<String, AnyTensor>,
}

const GROUPS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

fn wrap<T: Real>(t: &Tensor<T>) -> AnyTensor {
    match T::DTYPE {
        DType::F32 => AnyTensor::F32(t.cast()),
        DType::F64 => AnyTensor::F64(t.cast()),
    }
}

impl Checkpoint {
    pub fn from_state<T: Real>(config: &str, state: &TrainState<T>) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (group, map) in GROUPS.iter().zip([&state.params, &state.ema, &state.adam_m, &state.adam_v]) {
            for (name, t) in map {
                tensors.insert(format!("{group}/{name}"), wrap(t));
            }
        }
        Checkpoint {
            config: config.to_string(),
            step: state.step,
            tensors,
        }
    }

    pub fn to_state<T: Real>(&self) -> Result<TrainState<T>> {
        let mut maps: Vec<ParamMap<T>> = vec![BTreeMap::new(); 4];
        for (full, t) in &self.tensors {
            let (group, name) = full
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("tensor '{full}' has no group prefix")))?;
            let gi = GROUPS
                .iter()
                .position(|g| *g == group)
                .ok_or_else(|| Error::Format(format!("unknown tensor group '{group}'")))?;
            maps[gi].insert(name.to_string(), t.clone().into_typed()?);
        }
        let [params, ema, adam_m, adam_v]: [ParamMap<T>; 4] = maps.try_into().unwrap();
        let shapes = |m: &ParamMap<T>| m.iter().map(|(k, v)| (k.clone(), v.dims().to_vec())).collect::<Vec<_>>();
        let want = shapes(&params);
        for (g, m) in GROUPS.iter().zip([&ema, &adam_m, &adam_v]) {
            if shapes(m) != want {
                return Err(Error::Format(format!("'{g}' tensors do not match 'params'")));
            }
        }
        Ok(TrainState {
            params,
            ema,
            adam_m,
            adam_v,
            step: self.step,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, self.config.len())?;
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_any(&mut out, t)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        r.magic(CHECKPOINT_MAGIC)?;
        let config = r.string()?;
        let step = r.u64()?;
        let n = r.u32()?;
        let mut tensors = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..n {
            let name = r.string()?;
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(Error::Format(format!("tensor table not sorted/unique at '{name}'")));
            }
            let t = r.tensor()?;
            last = Some(name.clone());
            tensors.insert(name, t);
        }
        r.finish()?;
        Ok(Checkpoint { config, step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&fs::read(path)?)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config)
    }
}

// ---------------------------------------------------------------------------
// frames

pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// P6 image of frame `f`; grayscale is replicated to three channels.
pub fn encode_ppm(video: &Tensor, f: usize) -> Result<Vec<u8>> {
    let d = video.dims();
    if d.len() != 4 || !(d[3] == 1 || d[3] == 3) {
        return Err(shape_err!("PPM export needs [F, H, W, 1|3], got {d:?}"));
    }
    if f >= d[0] {
        return Err(shape_err!("frame {f} of {}", d[0]));
    }
    let (h, w, c) = (d[1], d[2], d[3]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let frame = video.frame(f);
    for px in frame.data().chunks_exact(c) {
        if c == 1 {
            out.extend_from_slice(&[to_byte(px[0]); 3]);
        } else {
            out.extend(px.iter().map(|&v| to_byte(v)));
        }
    }
    Ok(out)
}

/// Parse a P6 file into a `[1, H, W, 3]` tensor in `[-1, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::Format(format!("unsupported PPM header {fields:?}")));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM size '{s}'")));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| Error::Format("truncated PPM body".into()))?;
    Tensor::new(vec![1, h, w, 3], body.iter().map(|&b| from_byte(b)).collect())
}

/// One PPM per frame, `frame_0000.ppm`, ….
pub fn export_frames(video: &Tensor, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    (0..video.frames())
        .map(|f| {
            let p = dir.join(format!("frame_{f:04}.ppm"));
            write_atomic(&p, &encode_ppm(video, f)?)?;
            Ok(p)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// evaluation

pub const MIN_EVAL_VIDEOS: usize = 64;

/// Per-frame means, per-frame variances, then lag-1 correlations between
/// consecutive frames.
pub fn video_features(video: &Tensor) -> Vec<f64> {
    let f = video.frames();
    let frames: Vec<Tensor> = (0..f).map(|i| video.frame(i)).collect();
    let mut out = Vec::with_capacity(3 * f - 1);
    let means: Vec<f64> = frames.iter().map(|t| t.mean()).collect();
    out.extend(&means);
    for (t, m) in frames.iter().zip(&means) {
        out.push(t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.len() as f64);
    }
    for i in 1..f {
        out.push(pearson(frames[i - 1].data(), frames[i].data()));
    }
    out
}

fn gaussian_fit(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.len();
    let d = feats[0].len();
    let mut mu = DVector::zeros(d);
    for f in feats {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        let x = DVector::from_column_slice(f) - &mu;
        cov += &x * x.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 || a[0].len() != b[0].len() {
        return Err(shape_err!("feature sets of {} and {} vectors", a.len(), b.len()));
    }
    let (m1, s1) = gaussian_fit(a);
    let (m2, s2) = gaussian_fit(b);
    let r1 = psd_sqrt(&s1);
    let cross = psd_sqrt(&(&r1 * &s2 * &r1));
    let d = (m1 - m2).norm_squared() + (s1 + s2 - cross * 2.0).trace();
    Ok(d.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_samples: usize,
    pub n_reference: usize,
    pub frechet: f64,
    pub block: usize,
    pub coherence_samples: f64,
    pub coherence_reference: f64,
}

/// Proxy Fréchet distance between feature fits, plus coherence at `block`
/// (only when the videos have at least `2·block` frames).
pub fn eval_report(samples: &[Tensor], reference: &[Tensor], block: usize) -> Result<EvalReport> {
    for (name, set) in [("samples", samples), ("reference", reference)] {
        if set.len() < MIN_EVAL_VIDEOS {
            return Err(Error::Usage(format!(
                "{name}: {} videos, need at least {MIN_EVAL_VIDEOS}",
                set.len()
            )));
        }
    }
    let fa: Vec<Vec<f64>> = samples.iter().map(video_features).collect();
    let fb: Vec<Vec<f64>> = reference.iter().map(video_features).collect();
    if fa.iter().chain(&fb).any(|f| f.len() != fa[0].len()) {
        return Err(shape_err!("videos of different frame counts"));
    }
    let frechet = frechet_distance(&fa, &fb)?;
    let coh = |set: &[Tensor]| -> Result<f64> {
        if block == 0 || set[0].frames() < 2 * block {
            return Ok(f64::NAN);
        }
        let mut s = 0.0;
        for v in set {
            s += coherence_metric(v, block)?;
        }
        Ok(s / set.len() as f64)
    };
    Ok(EvalReport {
        n_samples: samples.len(),
        n_reference: reference.len(),
        frechet,
        block,
        coherence_samples: coh(samples)?,
        coherence_reference: coh(reference)?,
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "# proxy metric: Frechet distance of Gaussian fits to per-frame mean/variance/lag-1 \
             correlation features; not comparable to FVD/FID/IS\n\
             n_samples={}\nn_reference={}\nfrechet_proxy={:.9e}\ncoherence_block={}\n\
             coherence_samples={:.9e}\ncoherence_reference={:.9e}\n",
            self.n_samples,
            self.n_reference,
            self.frechet,
            self.block,
            self.coherence_samples,
            self.coherence_reference
        )
    }
}
