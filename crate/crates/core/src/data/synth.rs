//! Moving-shape clips whose motion pattern is the action class, rendered
//! into a shared clean appearance and then pushed through a per-domain
//! photometric transform (bright source, dark target).

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::VideoSet;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

pub const MOTION_NAMES: [&str; 6] = [
    "translate_up",
    "translate_down",
    "translate_left",
    "translate_right",
    "expand",
    "rotate",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Photometric parameters of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainStyle {
    pub brightness: f64,
    pub contrast: f64,
    pub noise_std: f64,
    pub gamma: f64,
    /// Each clip's brightness is drawn from `brightness·[1 − jitter, 1]`.
    #[serde(default)]
    pub brightness_jitter: f64,
}

impl DomainStyle {
    pub fn bright() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            noise_std: 0.01,
            gamma: 0.75,
            brightness_jitter: 0.6,
        }
    }

    pub fn dark() -> Self {
        Self {
            brightness: 0.25,
            contrast: 1.4,
            noise_std: 0.06,
            gamma: 1.0,
            brightness_jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Clip extents `[C, T, H, W]`; `C` must be 3.
    pub shape: [usize; 4],
    pub source: DomainStyle,
    pub target: DomainStyle,
    /// Number of static distractor blobs painted into each background.
    pub distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            train_per_class: 60,
            val_per_class: 24,
            shape: [3, 8, 32, 32],
            source: DomainStyle::bright(),
            target: DomainStyle::dark(),
            distractors: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MOTION_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::usage(format!(
                "num_classes must be in 2..={}, got {}",
                MOTION_NAMES.len(),
                self.num_classes
            )));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 {
            return Err(Error::usage(
                "every split needs at least one clip per class",
            ));
        }
        let [c, t, h, w] = self.shape;
        if c != 3 || t < 2 || h < 16 || w < 16 {
            return Err(Error::usage(format!(
                "clip shape {:?} must be 3×T×H×W with T >= 2, H, W >= 16",
                self.shape
            )));
        }
        for (name, s) in [("source", &self.source), ("target", &self.target)] {
            if !(s.brightness > 0.0 && s.brightness <= 1.0)
                || s.contrast < 0.0
                || s.noise_std < 0.0
                || !(s.gamma > 0.0)
                || !(0.0..1.0).contains(&s.brightness_jitter)
            {
                return Err(Error::usage(format!(
                    "invalid {name} photometric params {s:?}"
                )));
            }
        }
        if self.target.brightness >= self.source.brightness {
            return Err(Error::usage(
                "dark target must have lower brightness than the source",
            ));
        }
        Ok(())
    }

    pub fn style(&self, domain: Domain) -> &DomainStyle {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
        }
    }
}

/// Pixelwise `b·(c·(v^γ − 0.5) + 0.5) + noise`, clipped to `[0, 1]`.
pub fn illumination_shift(
    v: &Tensor,
    brightness: f64,
    contrast: f64,
    noise_std: f64,
    gamma: f64,
    seed: u64,
) -> Result<Tensor> {
    if noise_std < 0.0 {
        return Err(Error::usage(format!(
            "noise std must be >= 0, got {noise_std}"
        )));
    }
    let mut rng = rng_for(seed, "illumination", 0);
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let identity = gamma == 1.0 && contrast == 1.0 && brightness == 1.0;
    let data = v
        .data()
        .iter()
        .map(|&x| {
            let shaped = if identity {
                x
            } else {
                brightness * (contrast * (x.powf(gamma) - 0.5) + 0.5)
            };
            let n = if noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (shaped + n).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(v.dims().to_vec(), data)
}

/// Rotated rectangle with half-extents `(a, b)` centred at `(row, col)`.
#[derive(Clone, Copy, Debug)]
struct Pose {
    row: f64,
    col: f64,
    half_long: f64,
    half_short: f64,
    angle: f64,
}

impl Pose {
    fn covers(&self, r: f64, c: f64) -> bool {
        let (dr, dc) = (r - self.row, c - self.col);
        let (s, co) = self.angle.sin_cos();
        let u = dc * co + dr * s;
        let v = -dc * s + dr * co;
        u.abs() <= self.half_long && v.abs() <= self.half_short
    }
}

fn trajectory(class: usize, frames: usize, h: f64, w: f64, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let half_long = rng.random_range(3.0..4.5);
    let half_short = rng.random_range(1.5..2.2);
    let angle = rng.random_range(0.0..PI);
    let steps = (frames - 1) as f64;
    let margin = half_long + 1.5;
    match class {
        0..=3 => {
            let speed = rng.random_range(1.2..1.8);
            let travel = speed * steps;
            let (dr, dc) = [(-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0)][class];
            // start so the whole path stays inside the frame
            let span_r = (margin, h - margin - if dr != 0.0 { travel } else { 0.0 });
            let span_c = (margin, w - margin - if dc != 0.0 { travel } else { 0.0 });
            let mut row = rng.random_range(span_r.0..span_r.1.max(span_r.0 + 1e-9));
            let mut col = rng.random_range(span_c.0..span_c.1.max(span_c.0 + 1e-9));
            if dr < 0.0 {
                row += travel;
            }
            if dc < 0.0 {
                col += travel;
            }
            (0..frames)
                .map(|t| Pose {
                    row: row + dr * speed * t as f64,
                    col: col + dc * speed * t as f64,
                    half_long,
                    half_short,
                    angle,
                })
                .collect()
        }
        4 => {
            let growth: f64 = rng.random_range(1.12..1.2);
            let start = rng.random_range(0.3..0.42);
            let end_scale = start * growth.powf(steps);
            let reach = half_long * end_scale + 1.5;
            let row = rng.random_range(reach..(h - reach).max(reach + 1e-9));
            let col = rng.random_range(reach..(w - reach).max(reach + 1e-9));
            (0..frames)
                .map(|t| {
                    let s = start * growth.powi(t as i32);
                    Pose {
                        row,
                        col,
                        half_long: half_long * s,
                        half_short: half_short * s,
                        angle,
                    }
                })
                .collect()
        }
        _ => {
            let omega = rng.random_range(0.25..0.4) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let reach = half_long + 1.5;
            let row = rng.random_range(reach..h - reach);
            let col = rng.random_range(reach..w - reach);
            (0..frames)
                .map(|t| Pose {
                    row,
                    col,
                    half_long,
                    half_short,
                    angle: angle + omega * t as f64,
                })
                .collect()
        }
    }
}

/// Renders a clean clip in `[0, 1]` for `class`.
pub fn render_clip(
    class: usize,
    shape: [usize; 4],
    distractors: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let [channels, frames, h, w] = shape;
    let poses = trajectory(class, frames, h as f64, w as f64, rng);

    // static background: channel-tinted base level plus a smooth gradient
    let base = rng.random_range(0.3..0.42);
    let tint = [1.08, 0.97, 0.9];
    let (gr, gc) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let blobs: Vec<(f64, f64, f64, f64)> = (0..distractors)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(2.0..4.0),
                rng.random_range(-0.12..0.12),
            )
        })
        .collect();
    let color: Vec<f64> = (0..channels).map(|_| rng.random_range(0.75..1.0)).collect();

    let mut data = vec![0.0; channels * frames * h * w];
    let offsets = [0.25, 0.75];
    for t in 0..frames {
        let pose = poses[t];
        for r in 0..h {
            for c in 0..w {
                let (rf, cf) = (r as f64 / h as f64 - 0.5, c as f64 / w as f64 - 0.5);
                let mut bg = base + gr * rf + gc * cf;
                for &(br, bc, rad, amp) in &blobs {
                    let d2 = (r as f64 - br).powi(2) + (c as f64 - bc).powi(2);
                    bg += amp * (-d2 / (2.0 * rad * rad)).exp();
                }
                let mut cover = 0.0;
                for &dy in &offsets {
                    for &dx in &offsets {
                        if pose.covers(r as f64 + dy, c as f64 + dx) {
                            cover += 0.25;
                        }
                    }
                }
                for ch in 0..channels {
                    let bgc = (bg * tint[ch % 3]).clamp(0.0, 1.0);
                    let v = bgc * (1.0 - cover) + color[ch] * cover;
                    data[((ch * frames + t) * h + r) * w + c] = v;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), data).expect("clip buffer")
}

/// One clip of the benchmark, a pure function of its coordinates.
pub fn generate_clip(
    cfg: &SynthConfig,
    seed: u64,
    domain: Domain,
    split: Split,
    index: usize,
) -> Result<(Tensor, usize)> {
    let class = index % cfg.num_classes;
    let tag = format!("synth/{}/{}", domain.name(), split.name());
    let mut rng = rng_for(seed, &tag, index as u64);
    let clean = render_clip(class, cfg.shape, cfg.distractors, &mut rng);
    let s = cfg.style(domain);
    let b = s.brightness * (1.0 - s.brightness_jitter * rng.random::<f64>());
    let shifted = illumination_shift(
        &clean,
        b,
        s.contrast,
        s.noise_std,
        s.gamma,
        derive_seed(seed, &tag, index as u64),
    )?;
    Ok((shifted, class))
}

pub fn generate_split(
    cfg: &SynthConfig,
    seed: u64,
    domain: Domain,
    split: Split,
) -> Result<VideoSet> {
    cfg.validate()?;
    let n = cfg.per_class(split) * cfg.num_classes;
    let mut videos = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (v, l) = generate_clip(cfg, seed, domain, split, i)?;
        videos.push(v);
        labels.push(l);
    }
    VideoSet::new(videos, labels, cfg.num_classes)
}

/// The four splits of the bright→dark benchmark.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub source_train: VideoSet,
    pub source_val: VideoSet,
    pub target_train: VideoSet,
    pub target_val: VideoSet,
}

pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    Ok(SynthDataset {
        source_train: generate_split(cfg, seed, Domain::Source, Split::Train)?,
        source_val: generate_split(cfg, seed, Domain::Source, Split::Val)?,
        target_train: generate_split(cfg, seed, Domain::Target, Split::Train)?,
        target_val: generate_split(cfg, seed, Domain::Target, Split::Val)?,
    })
}

/// Intensity-weighted centroid `(row, col)` of frame `t`, measured on the
/// pixels brighter than the frame mean in every channel-averaged plane.
pub fn foreground_centroid(v: &Tensor, t: usize) -> (f64, f64) {
    let [c, frames, h, w] = <[usize; 4]>::try_from(v.dims()).expect("C×T×H×W clip");
    let plane: Vec<f64> = (0..h * w)
        .map(|p| {
            (0..c)
                .map(|ch| v.data()[(ch * frames + t) * h * w + p])
                .sum::<f64>()
                / c as f64
        })
        .collect();
    let mut sorted = plane.clone();
    sorted.sort_by(f64::total_cmp);
    // shapes cover well under a fifth of the frame
    let threshold = sorted[(sorted.len() * 9) / 10];
    let (mut sr, mut sc, mut mass) = (0.0, 0.0, 0.0);
    for (p, &val) in plane.iter().enumerate() {
        if val > threshold {
            let wgt = val - threshold;
            sr += wgt * (p / w) as f64;
            sc += wgt * (p % w) as f64;
            mass += wgt;
        }
    }
    (sr / mass, sc / mass)
}
