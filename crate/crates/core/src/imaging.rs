//! RGB frames as `[3, H, W]` tensors in `[0, 1]`, cropping and resizing.

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub type Frame = Tensor<f32>;

/// Square crop around `box` with side `context * sqrt(w * h)` (pixels),
/// bilinearly resampled to `out x out`.
///
/// Samples falling outside the frame take the nearest edge pixel; the second
/// return value reports whether that happened.
pub fn context_crop(frame: &Frame, bbox: &BBox, context: f64, out: usize) -> (Frame, bool) {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let canvas = w.max(h) as f64;
    let side = context * ((bbox.w * canvas) * (bbox.h * canvas)).max(1.0).sqrt();
    crop_square(frame, bbox.cx * canvas, bbox.cy * canvas, side, out)
}

pub fn crop_square(frame: &Frame, cx: f64, cy: f64, side: f64, out: usize) -> (Frame, bool) {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let x0 = cx - side / 2.0;
    let y0 = cy - side / 2.0;
    let step = side / out as f64;
    let clipped = x0 < 0.0 || y0 < 0.0 || x0 + side > w as f64 || y0 + side > h as f64;
    let src = frame.data();
    let mut data = vec![0.0f32; 3 * out * out];
    for oy in 0..out {
        let sy = y0 + (oy as f64 + 0.5) * step - 0.5;
        let (ya, yb, fy) = taps(sy, h);
        for ox in 0..out {
            let sx = x0 + (ox as f64 + 0.5) * step - 0.5;
            let (xa, xb, fx) = taps(sx, w);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src[(c * h + yy) * w + xx] as f64;
                let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
                let bot = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
                data[(c * out + oy) * out + ox] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    (Tensor::new(vec![3, out, out], data).expect("crop shape"), clipped)
}

/// Neighbouring indices and blend weight for a sample position, edge-clamped.
fn taps(s: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let s = s.clamp(0.0, max);
    let a = s.floor();
    let b = (a + 1.0).min(max);
    (a as usize, b as usize, s - a)
}

pub fn to_rgb8(frame: &Frame) -> Vec<u8> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let src = frame.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((src[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Frame> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Image(format!(
            "expected {} bytes for {width}x{height} RGB, got {}",
            width * height * 3,
            rgb.len()
        )));
    }
    let mut data = vec![0.0f32; 3 * width * height];
    for (i, px) in rgb.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * width * height + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

pub fn save_png(path: &std::path::Path, frame: &Frame) -> Result<()> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    image::save_buffer(path, &to_rgb8(frame), w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn load_png(path: &std::path::Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}

/// Draw a one-pixel rectangle outline in place.
pub fn draw_box(frame: &mut Frame, bbox: &BBox, color: [f32; 3]) {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let (x, y, bw, bh) = bbox.to_pixels(w.max(h));
    let x1 = x.round().clamp(0.0, (w - 1) as f64) as usize;
    let y1 = y.round().clamp(0.0, (h - 1) as f64) as usize;
    let x2 = (x + bw).round().clamp(0.0, (w - 1) as f64) as usize;
    let y2 = (y + bh).round().clamp(0.0, (h - 1) as f64) as usize;
    let data = frame.data_mut();
    let mut put = |xx: usize, yy: usize| {
        for (c, v) in color.iter().enumerate() {
            data[(c * h + yy) * w + xx] = *v;
        }
    };
    for xx in x1..=x2 {
        put(xx, y1);
        put(xx, y2);
    }
    for yy in y1..=y2 {
        put(x1, yy);
        put(x2, yy);
    }
}
