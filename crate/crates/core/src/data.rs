//! Procedural moving-shape videos and joint video/image batches.
//!
//! A shape (square or circle) moves with constant velocity and bounces off
//! the frame edges.  Pixel value is `background + coverage·(foreground −
//! background)`, where coverage is the fraction of a 4x4 grid of subpixel
//! sample points (at offsets `(k + 0.5)/4`) that fall inside the shape.
//! Labels are `kind·4 + quadrant` of the initial velocity, 8 classes.

use rand::Rng as _;

use crate::diffusion::Batch;
use crate::error::{config_err, Error, Result};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::tensor::Tensor;

pub const SUPERSAMPLE: usize = 4;
pub const NUM_LABELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
}

impl ShapeKind {
    pub fn index(self) -> usize {
        match self {
            ShapeKind::Square => 0,
            ShapeKind::Circle => 1,
        }
    }
}

/// Quadrant of a velocity: bit 0 set for `dx < 0`, bit 1 for `dy < 0`.
pub fn quadrant(dx: f64, dy: f64) -> usize {
    (dx < 0.0) as usize + 2 * (dy < 0.0) as usize
}

pub fn label_of(kind: ShapeKind, dx: f64, dy: f64) -> usize {
    kind.index() * 4 + quadrant(dx, dy)
}

/// One fully determined clip.  `pos` is the top-left corner of the shape's
/// bounding box at frame 0, `(x, y)` in pixels; `size` is its side length.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeVideoSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub kind: ShapeKind,
    pub size: f64,
    pub pos: (f64, f64),
    pub velocity: (f64, f64),
    pub foreground: f64,
    pub background: f64,
}

/// Reflect `p` into `[0, span]`.
fn bounce(p: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * span;
    let m = p.rem_euclid(period);
    if m <= span {
        m
    } else {
        period - m
    }
}

impl ShapeVideoSpec {
    pub fn label(&self) -> usize {
        label_of(self.kind, self.velocity.0, self.velocity.1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(config_err!("video dims must be positive"));
        }
        if !(self.size > 0.0) || self.size > self.height as f64 || self.size > self.width as f64 {
            return Err(config_err!(
                "shape size {} does not fit a {}x{} frame",
                self.size,
                self.height,
                self.width
            ));
        }
        let (x, y) = self.pos;
        if x < 0.0 || y < 0.0 || x + self.size > self.width as f64 || y + self.size > self.height as f64 {
            return Err(config_err!("shape at {:?} not inside the frame", self.pos));
        }
        for v in [self.foreground, self.background] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(config_err!("gray level {v} outside [-1, 1]"));
            }
        }
        if !self.velocity.0.is_finite() || !self.velocity.1.is_finite() {
            return Err(config_err!("non-finite velocity"));
        }
        Ok(())
    }

    /// Top-left corner at frame `f`, after bouncing.
    pub fn position(&self, f: usize) -> (f64, f64) {
        let t = f as f64;
        (
            bounce(self.pos.0 + self.velocity.0 * t, self.width as f64 - self.size),
            bounce(self.pos.1 + self.velocity.1 * t, self.height as f64 - self.size),
        )
    }

    fn inside(&self, px: f64, py: f64, corner: (f64, f64)) -> bool {
        let (x0, y0) = corner;
        match self.kind {
            ShapeKind::Square => px >= x0 && px < x0 + self.size && py >= y0 && py < y0 + self.size,
            ShapeKind::Circle => {
                let r = self.size / 2.0;
                let (cx, cy) = (x0 + r, y0 + r);
                (px - cx).powi(2) + (py - cy).powi(2) < r * r
            }
        }
    }

    pub fn render(&self) -> Result<Tensor> {
        self.validate()?;
        let (h, w) = (self.height, self.width);
        let n = SUPERSAMPLE;
        let inv = 1.0 / (n * n) as f64;
        let mut data = Vec::with_capacity(self.frames * h * w);
        for f in 0..self.frames {
            let corner = self.position(f);
            for i in 0..h {
                for j in 0..w {
                    let mut hits = 0;
                    for si in 0..n {
                        for sj in 0..n {
                            let py = i as f64 + (si as f64 + 0.5) / n as f64;
                            let px = j as f64 + (sj as f64 + 0.5) / n as f64;
                            hits += self.inside(px, py, corner) as usize;
                        }
                    }
                    let cov = hits as f64 * inv;
                    data.push(self.background + cov * (self.foreground - self.background));
                }
            }
        }
        Tensor::new(vec![self.frames, h, w, 1], data)
    }
}

/// Distribution over clips.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub size_range: (f64, f64),
    pub speed_range: (f64, f64),
    pub foreground: f64,
    pub background: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            frames: 8,
            height: 32,
            width: 32,
            size_range: (6.0, 12.0),
            speed_range: (0.5, 2.0),
            foreground: 1.0,
            background: -1.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(config_err!("bad size range {:?}", self.size_range));
        }
        if hi > self.height.min(self.width) as f64 {
            return Err(config_err!(
                "shape size up to {hi} does not fit a {}x{} frame",
                self.height,
                self.width
            ));
        }
        let (slo, shi) = self.speed_range;
        if !(slo >= 0.0 && slo <= shi && shi.is_finite()) {
            return Err(config_err!("bad speed range {:?}", self.speed_range));
        }
        if self.frames == 0 {
            return Err(config_err!("frames must be positive"));
        }
        Ok(())
    }

    /// Draw a clip: kind and velocity quadrant uniform, so labels are too.
    pub fn sample_spec(&self, rng: &mut Rng) -> Result<ShapeVideoSpec> {
        self.validate()?;
        let kind = if rng.random::<bool>() {
            ShapeKind::Circle
        } else {
            ShapeKind::Square
        };
        let (lo, hi) = self.size_range;
        let size = if lo == hi { lo } else { rng.random_range(lo..hi) };
        let x = rng.random::<f64>() * (self.width as f64 - size);
        let y = rng.random::<f64>() * (self.height as f64 - size);
        let (slo, shi) = self.speed_range;
        let speed = if slo == shi { slo } else { rng.random_range(slo..shi) };
        let q = rng.random_range(0..4usize);
        // strictly inside the quadrant so the label is unambiguous
        let theta = (q as f64 + rng.random_range(0.05..0.95)) * std::f64::consts::FRAC_PI_2;
        let (dx, dy) = (speed * theta.cos(), speed * theta.sin());
        // angular quadrants run (+,+), (−,+), (−,−), (+,−)
        debug_assert!(speed == 0.0 || quadrant(dx, dy) == [0, 1, 3, 2][q]);
        Ok(ShapeVideoSpec {
            frames: self.frames,
            height: self.height,
            width: self.width,
            kind,
            size,
            pos: (x, y),
            velocity: (dx, dy),
            foreground: self.foreground,
            background: self.background,
        })
    }
}

pub fn generate_video(cfg: &DataConfig, rng: &mut Rng) -> Result<(Tensor, usize)> {
    let spec = cfg.sample_spec(rng)?;
    Ok((spec.render()?, spec.label()))
}

/// In-memory clips with labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub videos: Vec<Tensor>,
    pub labels: Vec<usize>,
}

/// Clip `index` of the stream seeded by `master`.
pub fn video_at(cfg: &DataConfig, master: u64, index: usize) -> Result<(Tensor, usize)> {
    let mut rng = rng_for(derive_seed(master, "video", index as u64), "shape", 0);
    generate_video(cfg, &mut rng)
}

/// Endless deterministic stream; item `i` equals `video_at(cfg, master, i)`.
pub fn stream(cfg: &DataConfig, master: u64) -> impl Iterator<Item = Result<(Tensor, usize)>> + '_ {
    (0..).map(move |i| video_at(cfg, master, i))
}

impl Dataset {
    /// Materialize `n` clips, generated in parallel with per-index seeds.
    pub fn generate(cfg: &DataConfig, n: usize, master: u64) -> Result<Dataset> {
        cfg.validate()?;
        let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(n.max(1));
        let chunk = n.div_ceil(workers.max(1)).max(1);
        let parts: Vec<Result<Vec<(Tensor, usize)>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|start| {
                    s.spawn(move || (start..(start + chunk).min(n)).map(|i| video_at(cfg, master, i)).collect())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("generator thread")).collect()
        });
        let mut videos = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for part in parts {
            for (v, l) in part? {
                videos.push(v);
                labels.push(l);
            }
        }
        Ok(Dataset { videos, labels })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor, usize)> {
        self.videos.iter().zip(self.labels.iter().copied())
    }
}

/// A training batch with `J` trailing independent image frames per video.
#[derive(Clone, Debug)]
pub struct JointBatch {
    pub batch: Batch,
    /// index of each host video in the dataset
    pub hosts: Vec<usize>,
    /// `(video index, frame index)` of each appended image
    pub image_sources: Vec<Vec<(usize, usize)>>,
    pub image_labels: Vec<Vec<usize>>,
}

/// Sample `batch_size` host clips and append `images` frames drawn from
/// other random clips.  All hosts are drawn before any image, so under the
/// same `rng` state the host clips do not depend on `images`.
pub fn build_joint_batch(data: &Dataset, batch_size: usize, images: usize, rng: &mut Rng) -> Result<JointBatch> {
    if data.is_empty() {
        return Err(Error::Usage("empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(config_err!("batch size must be positive"));
    }
    let n = data.len();
    let frames = data.videos[0].frames();
    let mut videos = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    let mut image_sources = Vec::with_capacity(batch_size);
    let mut image_labels = Vec::with_capacity(batch_size);
    // hosts first: the video portion is the same for every J under one seed
    let hosts: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
    for &host in &hosts {
        let mut srcs = Vec::with_capacity(images);
        for _ in 0..images {
            let v = if n > 1 {
                // uniform over the other clips
                let r = rng.random_range(0..n - 1);
                if r >= host {
                    r + 1
                } else {
                    r
                }
            } else {
                host
            };
            let f = rng.random_range(0..data.videos[v].frames());
            srcs.push((v, f));
        }
        let mut parts = vec![data.videos[host].clone()];
        parts.extend(srcs.iter().map(|&(v, f)| data.videos[v].frame(f)));
        let video = if images == 0 {
            parts.pop().unwrap()
        } else {
            Tensor::cat_frames(&parts.iter().collect::<Vec<_>>())?
        };
        videos.push(video);
        labels.push(Some(data.labels[host]));
        image_labels.push(srcs.iter().map(|&(v, _)| data.labels[v]).collect());
        image_sources.push(srcs);
    }
    let frame_mask = if images == 0 {
        Vec::new()
    } else {
        (0..frames + images).map(|i| i >= frames).collect()
    };
    Ok(JointBatch {
        batch: Batch {
            videos,
            labels,
            frame_mask,
        },
        hosts,
        image_sources,
        image_labels,
    })
}

/// Fraction of pixels closer to the foreground level than the background.
pub fn foreground_fraction(video: &Tensor, foreground: f64, background: f64) -> f64 {
    let mid = 0.5 * (foreground + background);
    let above = foreground > background;
    let n = video.data().iter().filter(|&&v| (v > mid) == above).count();
    n as f64 / video.len() as f64
}
