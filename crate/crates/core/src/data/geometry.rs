//! Frame sampling, face cropping and detector downscaling.

use afw_tensor::{Real, Tensor};
use image::RgbImage;

use super::manifest::BBox;
use crate::error::{CoreError, Result};

/// Indices `0, stride, 2·stride, … < total_frames`.
pub fn sample_frames(total_frames: usize, stride: usize) -> Vec<usize> {
    assert!(total_frames >= 1 && stride >= 1, "sample_frames needs positive arguments");
    (0..total_frames).step_by(stride).collect()
}

/// Square RGB patch, channel-major (`[3, side, side]`), 8-bit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patch {
    side: usize,
    data: Vec<u8>,
}

impl Patch {
    pub fn new(side: usize, data: Vec<u8>) -> Result<Self> {
        if side == 0 || data.len() != 3 * side * side {
            return Err(CoreError::data(format!("patch of side {side} needs {} values, got {}", 3 * side * side, data.len())));
        }
        Ok(Patch { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.side + y) * self.side + x]
    }

    pub fn flipped(&self) -> Patch {
        let s = self.side;
        let mut data = self.data.clone();
        for row in data.chunks_mut(s) {
            row.reverse();
        }
        Patch { side: s, data }
    }

    /// Appends the values scaled to `[0,1]`.
    pub fn extend_normalized<T: Real>(&self, out: &mut Vec<T>) {
        out.extend(self.data.iter().map(|&v| T::of(v as f64 / 255.0)));
    }
}

/// Stacks patches into an `[N,3,S,S]` tensor with values in `[0,1]`.
pub fn patches_to_tensor<'a, T: Real>(patches: impl IntoIterator<Item = &'a Patch>) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut side = None;
    let mut n = 0;
    for p in patches {
        if *side.get_or_insert(p.side) != p.side {
            return Err(CoreError::data("patches of different sizes in one batch"));
        }
        p.extend_normalized(&mut data);
        n += 1;
    }
    let side = side.ok_or_else(|| CoreError::data("no patches to stack"))?;
    Ok(Tensor::new(&[n, 3, side, side], data)?)
}

/// `bbox` grown by `margin` on every side and clipped to the frame.
pub fn crop_region(bbox: &BBox, margin: f64, width: u32, height: u32) -> Result<BBox> {
    let (w, h) = (width as f64, height as f64);
    if !bbox.is_valid() || bbox.x >= w || bbox.y >= h || bbox.x + bbox.w <= 0.0 || bbox.y + bbox.h <= 0.0 {
        return Err(CoreError::data(format!(
            "box ({}, {}, {}, {}) does not overlap the {width}×{height} frame",
            bbox.x, bbox.y, bbox.w, bbox.h
        )));
    }
    let x0 = (bbox.x - margin).max(0.0);
    let y0 = (bbox.y - margin).max(0.0);
    let x1 = (bbox.x + bbox.w + margin).min(w);
    let y1 = (bbox.y + bbox.h + margin).min(h);
    Ok(BBox::new(x0, y0, x1 - x0, y1 - y0))
}

/// Crops the margin-expanded box and resizes it bilinearly to
/// `out_side × out_side` (pixel centres at half-integers).
pub fn crop_face(frame: &RgbImage, bbox: &BBox, margin: f64, out_side: usize) -> Result<Patch> {
    if out_side == 0 {
        return Err(CoreError::data("output side must be positive"));
    }
    let (fw, fh) = frame.dimensions();
    let r = crop_region(bbox, margin, fw, fh)?;
    let (x0, y0) = (r.x, r.y);
    let (sx, sy) = (r.w / out_side as f64, r.h / out_side as f64);
    let raw = frame.as_raw();
    let at = |x: usize, y: usize, c: usize| raw[(y * fw as usize + x) * 3 + c] as f64;
    let taps = |pos: f64, limit: u32| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (limit - 1) as f64);
        let i = p.floor() as usize;
        let j = (i + 1).min(limit as usize - 1);
        (i, j, p - i as f64)
    };
    let mut data = vec![0u8; 3 * out_side * out_side];
    for oy in 0..out_side {
        let (ya, yb, fy) = taps(y0 + (oy as f64 + 0.5) * sy - 0.5, fh);
        for ox in 0..out_side {
            let (xa, xb, fx) = taps(x0 + (ox as f64 + 0.5) * sx - 0.5, fw);
            for c in 0..3 {
                let top = at(xa, ya, c) * (1.0 - fx) + at(xb, ya, c) * fx;
                let bot = at(xa, yb, c) * (1.0 - fx) + at(xb, yb, c) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                data[(c * out_side + oy) * out_side + ox] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Patch::new(out_side, data)
}

/// Area-averages `factor × factor` blocks; dimensions are divided by
/// `factor` and rounded down.
pub fn downscale_for_detection(frame: &RgbImage, factor: u32) -> Result<RgbImage> {
    if factor == 0 {
        return Err(CoreError::data("downscale factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(frame.clone());
    }
    let (w, h) = (frame.width() / factor, frame.height() / factor);
    if w == 0 || h == 0 {
        return Err(CoreError::data(format!("{}×{} frame downscaled by {factor} is empty", frame.width(), frame.height())));
    }
    let area = factor * factor;
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let mut acc = [0u32; 3];
        for dy in 0..factor {
            for dx in 0..factor {
                let p = frame.get_pixel(x * factor + dx, y * factor + dy);
                for c in 0..3 {
                    acc[c] += p[c] as u32;
                }
            }
        }
        image::Rgb(acc.map(|s| ((s + area / 2) / area) as u8))
    }))
}

/// Maps a box found on a downscaled frame back to original coordinates.
pub fn rescale_box(bbox: &BBox, factor: u32) -> BBox {
    bbox.scaled(factor as f64)
}
