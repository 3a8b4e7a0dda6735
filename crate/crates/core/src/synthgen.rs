//! Deterministic synthetic tracking videos and tracking metrics.
//!
//! A scene is a static textured background, one target that drifts in hue
//! and scale while moving, a few same-shaped distractors whose hues sit
//! 0.12 to 0.3 away from the target's first hue and, optionally, an opaque
//! occluder that sits on the target for scripted frame intervals.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;
use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::imaging::{load_png, save_png, Frame};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub canvas: usize,
    pub shape: Shape,
    /// Hue change per frame (fraction of the color wheel).
    pub hue_drift: f64,
    /// Relative size change per frame.
    pub scale_drift: f64,
    /// Pixels per frame of the constant velocity.
    pub speed: f64,
    /// Standard deviation of the per-frame velocity jitter, pixels.
    pub motion_noise: f64,
    pub distractors: usize,
    /// Inclusive frame ranges during which the occluder covers the target.
    pub occlusions: Vec<(usize, usize)>,
    pub min_size: f64,
    pub max_size: f64,
}

impl SceneSpec {
    pub fn simple(seed: u64, frames: usize) -> Self {
        Self {
            seed,
            frames,
            canvas: 128,
            shape: Shape::Rectangle,
            hue_drift: 0.0,
            scale_drift: 0.0,
            speed: 2.0,
            motion_noise: 0.3,
            distractors: 0,
            occlusions: Vec::new(),
            min_size: 26.0,
            max_size: 40.0,
        }
    }

    pub fn occluded(&self, frame: usize) -> bool {
        self.occlusions.iter().any(|&(a, b)| (a..=b).contains(&frame))
    }
}

/// A rendered scene with per-frame ground truth.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub spec: SceneSpec,
    pub frames: Vec<Frame>,
    pub boxes: Vec<BBox>,
    /// IoU between the visible target pixels and the ground-truth box.
    pub visibility: Vec<f64>,
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

#[derive(Clone, Debug)]
struct Mover {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
}

impl Mover {
    fn spawn(rng: &mut ChaCha8Rng, canvas: f64, spec: &SceneSpec) -> Self {
        let w = rng.random_range(spec.min_size..=spec.max_size);
        let h = rng.random_range(spec.min_size..=spec.max_size);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        Self {
            x: rng.random_range(0.0..canvas - w),
            y: rng.random_range(0.0..canvas - h),
            vx: spec.speed * angle.cos(),
            vy: spec.speed * angle.sin(),
            w,
            h,
        }
    }

    /// Advance one frame, reflecting off the canvas border.
    fn step(&mut self, rng: &mut ChaCha8Rng, canvas: f64, noise: f64) {
        self.vx += noise * (rng.random::<f64>() - 0.5) * 2.0;
        self.vy += noise * (rng.random::<f64>() - 0.5) * 2.0;
        self.x += self.vx;
        self.y += self.vy;
        if self.x < 0.0 {
            self.x = -self.x;
            self.vx = self.vx.abs();
        }
        if self.y < 0.0 {
            self.y = -self.y;
            self.vy = self.vy.abs();
        }
        if self.x + self.w > canvas {
            self.x = 2.0 * (canvas - self.w) - self.x;
            self.vx = -self.vx.abs();
        }
        if self.y + self.h > canvas {
            self.y = 2.0 * (canvas - self.h) - self.y;
            self.vy = -self.vy.abs();
        }
        self.x = self.x.clamp(0.0, canvas - self.w);
        self.y = self.y.clamp(0.0, canvas - self.h);
    }

    /// Integer pixel rectangle `(x, y, w, h)` at size factor `scale`,
    /// centered on the unscaled box and kept inside the canvas.
    fn pixel_rect(&self, scale: f64, canvas: usize) -> (usize, usize, usize, usize) {
        let c = canvas as f64;
        let w = (self.w * scale).round().clamp(4.0, c);
        let h = (self.h * scale).round().clamp(4.0, c);
        let x = (self.x + self.w / 2.0 - w / 2.0).round().clamp(0.0, c - w);
        let y = (self.y + self.h / 2.0 - h / 2.0).round().clamp(0.0, c - h);
        (x as usize, y as usize, w as usize, h as usize)
    }
}

fn inside(shape: Shape, px: usize, py: usize, rect: (usize, usize, usize, usize)) -> bool {
    let (x, y, w, h) = rect;
    if px < x || py < y || px >= x + w || py >= y + h {
        return false;
    }
    match shape {
        Shape::Rectangle => true,
        Shape::Ellipse => {
            let u = (px as f64 + 0.5 - x as f64) / w as f64 * 2.0 - 1.0;
            let v = (py as f64 + 0.5 - y as f64) / h as f64 * 2.0 - 1.0;
            u * u + v * v <= 1.0
        }
    }
}

/// Paint a two-tone object: the middle third of its height is darker.
fn paint(frame: &mut [f32], canvas: usize, shape: Shape, rect: (usize, usize, usize, usize), color: [f32; 3]) -> Vec<usize> {
    let (x, y, w, h) = rect;
    let mut covered = Vec::new();
    for py in y..(y + h).min(canvas) {
        let band = (py - y) * 3 >= h && (py - y) * 3 < 2 * h;
        for px in x..(x + w).min(canvas) {
            if !inside(shape, px, py, rect) {
                continue;
            }
            for (c, v) in color.iter().enumerate() {
                frame[(c * canvas + py) * canvas + px] = if band { v * 0.55 } else { *v };
            }
            covered.push(py * canvas + px);
        }
    }
    covered
}

fn background(rng: &mut ChaCha8Rng, canvas: usize) -> Vec<f32> {
    let cells = 8;
    let coarse: Vec<[f32; 3]> = (0..(cells + 1) * (cells + 1))
        .map(|_| {
            let v = rng.random_range(0.2..0.6);
            let tint = rng.random_range(-0.08..0.08);
            [v + tint, v, v - tint]
        })
        .collect();
    let mut out = vec![0.0f32; 3 * canvas * canvas];
    let step = canvas as f32 / cells as f32;
    for y in 0..canvas {
        for x in 0..canvas {
            let (fx, fy) = (x as f32 / step, y as f32 / step);
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f32, fy - iy as f32);
            let at = |i: usize, j: usize| coarse[j * (cells + 1) + i];
            let grain: f32 = rng.random_range(-0.06..0.06);
            for c in 0..3 {
                let top = at(ix, iy)[c] * (1.0 - tx) + at(ix + 1, iy)[c] * tx;
                let bot = at(ix, iy + 1)[c] * (1.0 - tx) + at(ix + 1, iy + 1)[c] * tx;
                out[(c * canvas + y) * canvas + x] = (top * (1.0 - ty) + bot * ty + grain).clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn gen_sequence(spec: &SceneSpec) -> Sequence {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.canvas;
    let c = n as f64;
    let bg = background(&mut rng, n);
    let hue0 = rng.random::<f64>();
    let hue_sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let scale_sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut target = Mover::spawn(&mut rng, c, spec);
    let mut distractors: Vec<(Mover, f64)> = (0..spec.distractors)
        .map(|_| {
            // same shape and size range as the target, clearly different hue
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (Mover::spawn(&mut rng, c, spec), hue0 + side * rng.random_range(0.12..0.3))
        })
        .collect();
    let occluder_tone = rng.random_range(0.05..0.15) as f32;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut boxes = Vec::with_capacity(spec.frames);
    let mut visibility = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        if t > 0 {
            target.step(&mut rng, c, spec.motion_noise);
            for (d, _) in &mut distractors {
                d.step(&mut rng, c, spec.motion_noise);
            }
        }
        let mut data = bg.clone();
        for (d, hue) in &distractors {
            paint(&mut data, n, spec.shape, d.pixel_rect(1.0, n), hsv_to_rgb(*hue, 0.85, 0.9));
        }
        let scale = (1.0 + scale_sign * spec.scale_drift).powi(t as i32);
        let rect = target.pixel_rect(scale, n);
        let color = hsv_to_rgb(hue0 + hue_sign * spec.hue_drift * t as f64, 0.85, 0.9);
        let mut visible = paint(&mut data, n, spec.shape, rect, color);
        if spec.occluded(t) {
            // opaque patch a little larger than the target, drawn last
            let (x, y, w, h) = rect;
            let (ox, oy) = (x.saturating_sub(2), y.saturating_sub(2));
            let (ow, oh) = ((w + 4).min(n - ox), (h + 4).min(n - oy));
            for py in oy..oy + oh {
                for px in ox..ox + ow {
                    let check = ((px / 3 + py / 3) % 2) as f32 * 0.08;
                    for ch in 0..3 {
                        data[(ch * n + py) * n + px] = occluder_tone + check;
                    }
                }
            }
            visible.retain(|&i| !(oy..oy + oh).contains(&(i / n)) || !(ox..ox + ow).contains(&(i % n)));
        }
        let (x, y, w, h) = rect;
        let area = (w * h) as f64;
        let inter = visible.len() as f64;
        visibility.push(inter / area);
        boxes.push(BBox::from_pixels(x as f64, y as f64, w as f64, h as f64, n));
        frames.push(Tensor::new(vec![3, n, n], data).expect("frame shape"));
    }
    Sequence { spec: spec.clone(), frames, boxes, visibility }
}

/// Which synthetic split to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Randomized scene for sequence `index` of a split.
pub fn scene_for(cfg: &DataConfig, split: Split, index: usize, frames: usize, canvas: usize) -> SceneSpec {
    let base = match split {
        Split::Train => cfg.seed,
        Split::Test => cfg.seed.wrapping_add(1_000_003),
    };
    let seed = base.wrapping_add(index as u64 * 7919);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = if rng.random::<bool>() { Shape::Rectangle } else { Shape::Ellipse };
    let mut occlusions = Vec::new();
    if frames > 12 && rng.random::<f64>() < cfg.occlusion_rate {
        let len = rng.random_range(4..=8usize).min(frames / 4);
        let start = rng.random_range(6..frames - len);
        occlusions.push((start, start + len - 1));
    }
    SceneSpec {
        seed,
        frames,
        canvas,
        shape,
        hue_drift: cfg.hue_drift,
        scale_drift: cfg.scale_drift,
        speed: cfg.speed,
        motion_noise: 0.3,
        distractors: cfg.distractors,
        occlusions,
        min_size: cfg.min_size,
        max_size: cfg.max_size,
    }
}

pub fn dataset(cfg: &DataConfig, split: Split, count: usize, frames: usize, canvas: usize) -> Vec<Sequence> {
    (0..count).map(|i| gen_sequence(&scene_for(cfg, split, i, frames, canvas))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mean_iou: f64,
    pub auc: f64,
    pub precision: f64,
}

/// Frames at or above this IoU count as a success at every threshold,
/// including 1.0. The slack absorbs the six-decimal rounding of results files.
pub const PERFECT_IOU: f64 = 1.0 - 1e-4;

/// IoU thresholds of the success curve.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// Mean IoU, success AUC and precision at `precision_px`.
///
/// The success curve is the fraction of frames with IoU above each
/// threshold; a perfect frame counts as a success at every threshold.
pub fn eval_metrics(pred: &[BBox], gt: &[BBox], canvas: usize, precision_px: f64) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(Error::dim("eval_metrics", &[gt.len()], &[pred.len()]));
    }
    if gt.is_empty() {
        return Err(Error::Contract("no frames to evaluate".into()));
    }
    let n = gt.len() as f64;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let mean_iou = ious.iter().sum::<f64>() / n;
    let taus = success_thresholds();
    let auc = taus
        .iter()
        .map(|&t| ious.iter().filter(|&&v| v > t || v >= PERFECT_IOU).count() as f64 / n)
        .sum::<f64>()
        / taus.len() as f64;
    let precision = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| p.center_error_px(g, canvas) < precision_px)
        .count() as f64
        / n;
    Ok(Metrics { mean_iou, auc, precision })
}

pub const ANNOTATION_FILE: &str = "groundtruth.txt";

pub fn frame_file(index: usize) -> String {
    format!("{index:05}.png")
}

/// Write frames as PNG plus `frame_index x y w h` pixel annotations.
pub fn export_sequence(dir: &Path, frames: &[Frame], boxes: &[BBox]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let canvas = frames.first().map(|f| f.shape()[2]).unwrap_or(0);
    for (i, f) in frames.iter().enumerate() {
        save_png(&dir.join(frame_file(i)), f)?;
    }
    let mut out = fs::File::create(dir.join(ANNOTATION_FILE))?;
    for (i, b) in boxes.iter().enumerate() {
        let (x, y, w, h) = b.to_pixels(canvas);
        writeln!(out, "{i} {x:.6} {y:.6} {w:.6} {h:.6}")?;
    }
    Ok(())
}

/// Parse `frame_index x y w h` lines; blank lines and `#` comments skipped.
pub fn parse_annotations(text: &str, canvas: usize) -> Result<Vec<(usize, BBox)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Config(format!("annotation line {}: expected `frame_index x y w h`", ln + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let idx: usize = f[0].parse().map_err(|_| bad())?;
        let v: Vec<f64> = f[1..].iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        out.push((idx, BBox::from_pixels(v[0], v[1], v[2], v[3], canvas)));
    }
    Ok(out)
}

/// Load an exported sequence: frames in index order and its annotations.
pub fn load_sequence(dir: &Path) -> Result<(Vec<Frame>, Vec<(usize, BBox)>)> {
    let mut frames = Vec::new();
    loop {
        let p = dir.join(frame_file(frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(load_png(&p)?);
    }
    if frames.is_empty() {
        return Err(Error::Image(format!("no frames in {}", dir.display())));
    }
    let canvas = frames[0].shape()[2];
    let text = fs::read_to_string(dir.join(ANNOTATION_FILE))?;
    Ok((frames, parse_annotations(&text, canvas)?))
}
