//! Square crops around a box, resampled bilinearly to a fixed resolution.

use grm_core::head::BBox;
use grm_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrackerError};

/// Crop side lengths as multiples of the box's geometric-mean side `sqrt(w*h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub template_factor: f64,
    pub search_factor: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            template_factor: 2.0,
            search_factor: 4.0,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("template_factor", self.template_factor), ("search_factor", self.search_factor)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrackerError::Config(format!("crop.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Affine map between frame pixels and normalized crop coordinates.
///
/// Crop coordinate `(0, 0)` is the top-left corner of the square window,
/// `(1, 1)` its bottom-right corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub size: usize,
}

impl CropRecord {
    pub fn centered(cx: f64, cy: f64, side: f64, size: usize) -> Self {
        Self {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            side,
            size,
        }
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.cx - self.x0) / self.side,
            (b.cy - self.y0) / self.side,
            b.w / self.side,
            b.h / self.side,
        )
    }

    pub fn to_frame(&self, b: &BBox) -> BBox {
        BBox::new(
            self.x0 + b.cx * self.side,
            self.y0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }
}

/// Rejects boxes with non-positive or non-finite extent.
pub fn check_box(b: &BBox) -> Result<()> {
    if b.is_finite() && b.w > 0.0 && b.h > 0.0 {
        Ok(())
    } else {
        Err(TrackerError::InvalidBox(format!("{b:?} has no area")))
    }
}

fn check_inside(b: &BBox, height: usize, width: usize) -> Result<()> {
    if (0.0..=width as f64).contains(&b.cx) && (0.0..=height as f64).contains(&b.cy) {
        Ok(())
    } else {
        Err(TrackerError::InvalidBox(format!(
            "{b:?} is centered outside the {width}x{height} frame"
        )))
    }
}

/// Resamples the square window of `record` from a `3×H×W` image.
///
/// Output pixel `(v, u)` samples the frame at pixel-center coordinates
/// `x0 + (u + 0.5)·side/size − 0.5`; reads outside the image clamp to the
/// nearest edge pixel.
pub fn resample(image: &Tensor, record: &CropRecord) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let n = record.size;
    let step = record.side / n as f64;
    let axis = |origin: f64, len: usize| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|i| {
                let x = origin + (i as f64 + 0.5) * step - 0.5;
                let lo = x.floor();
                let frac = x - lo;
                let clamp = |v: f64| v.max(0.0).min((len - 1) as f64) as usize;
                (clamp(lo), clamp(lo + 1.0), frac)
            })
            .collect()
    };
    let xs = axis(record.x0, w);
    let ys = axis(record.y0, h);
    let src = image.data();
    let mut out = vec![0.0; c * n * n];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (v, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (u, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * n + v) * n + u] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(Tensor::new([c, n, n], out)?)
}

/// Crop of side `factor·sqrt(w·h)` centered on `b`, resized to `size×size`.
pub fn crop_around(image: &Tensor, b: &BBox, factor: f64, size: usize) -> Result<(Tensor, CropRecord)> {
    check_box(b)?;
    let (_, h, w) = image.dims3()?;
    check_inside(b, h, w)?;
    let side = factor * (b.w * b.h).sqrt();
    let record = CropRecord::centered(b.cx, b.cy, side, size);
    Ok((resample(image, &record)?, record))
}

pub fn crop_template(image: &Tensor, b: &BBox, cfg: &CropConfig, size: usize) -> Result<(Tensor, CropRecord)> {
    crop_around(image, b, cfg.template_factor, size)
}

pub fn crop_search(image: &Tensor, prev: &BBox, cfg: &CropConfig, size: usize) -> Result<(Tensor, CropRecord)> {
    crop_around(image, prev, cfg.search_factor, size)
}
