//! BOGO and inverse-BOGO crop-window samplers.
//!
//! Both are plain rejection samplers over integer top-left offsets of the
//! (possibly downsampled) frame. Only window geometry is produced; no pixels
//! are touched.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_SIZE: u32 = 224;
pub const DEFAULT_MARGIN: f64 = 8.0;
pub const DEFAULT_MAX_TRIES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidConfig(format!("degenerate bounding box {b:?}")));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    /// Top-left corner in pixels of the image downsampled by `scale`.
    pub x: u32,
    pub y: u32,
    pub size: u32,
    /// Downsampling factor applied before cropping; always `2^-k`.
    pub scale: f64,
}

impl CropWindow {
    /// Closed-rectangle test: points on the window edge count as inside.
    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        let (x0, y0) = (self.x as f64, self.y as f64);
        let s = self.size as f64;
        px >= x0 && px <= x0 + s && py >= y0 && py <= y0 + s
    }

    pub fn contains_rect(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
        self.contains_point(x0, y0) && self.contains_point(x1, y1)
    }
}

/// Pixel dimensions of the image downsampled by `scale`.
pub fn scaled_frame(img_w: u32, img_h: u32, scale: f64) -> (f64, f64) {
    ((img_w as f64 * scale).floor(), (img_h as f64 * scale).floor())
}

/// The region a BOGO window must cover at `scale`: the scaled box grown by
/// `margin` on every side, clipped to the scaled frame.
pub fn margin_region(img_w: u32, img_h: u32, bbox: &BBox, margin: f64, scale: f64) -> [f64; 4] {
    let (sw, sh) = scaled_frame(img_w, img_h, scale);
    [
        (bbox.x_min * scale - margin).max(0.0),
        (bbox.y_min * scale - margin).max(0.0),
        (bbox.x_max * scale + margin).min(sw),
        (bbox.y_max * scale + margin).min(sh),
    ]
}

/// Inclusive range of integer offsets `o` in `[0, max_offset]` such that
/// `[o, o + size]` covers `[lo, hi]`.
fn covering_offsets(lo: f64, hi: f64, size: u32, max_offset: i64) -> Option<(i64, i64)> {
    let first = ((hi - size as f64).ceil() as i64).max(0);
    let last = (lo.floor() as i64).min(max_offset);
    (first <= last).then_some((first, last))
}

/// Samples a window containing the runway box plus `margin`, downsampling the
/// image by successive powers of two until the region fits.
pub fn bogo_crop(
    img_w: u32,
    img_h: u32,
    bbox: &BBox,
    margin: f64,
    size: u32,
    rng_seed: u64,
    max_tries: usize,
) -> Result<CropWindow> {
    if size == 0 || max_tries == 0 || !(margin >= 0.0) {
        return Err(Error::InvalidConfig(
            "size and max_tries must be positive, margin non-negative".into(),
        ));
    }
    if bbox.x_max > img_w as f64 || bbox.y_max > img_h as f64 {
        return Err(Error::InvalidConfig(format!(
            "bounding box {bbox:?} exceeds the {img_w}x{img_h} frame"
        )));
    }

    let mut scale = 1.0f64;
    let placement = loop {
        let (sw, sh) = scaled_frame(img_w, img_h, scale);
        if sw < size as f64 || sh < size as f64 {
            return Err(Error::Unsatisfiable(format!(
                "box plus margin {margin} does not fit a {size}px window at any scale"
            )));
        }
        let max_x = (sw - size as f64).floor() as i64;
        let max_y = (sh - size as f64).floor() as i64;
        let [x0, y0, x1, y1] = margin_region(img_w, img_h, bbox, margin, scale);
        if covering_offsets(x0, x1, size, max_x).is_some() && covering_offsets(y0, y1, size, max_y).is_some() {
            break (max_x, max_y, [x0, y0, x1, y1]);
        }
        scale *= 0.5;
    };

    let (max_x, max_y, [x0, y0, x1, y1]) = placement;
    let mut rng = rng::seeded(rng_seed);
    for _ in 0..max_tries {
        let window = CropWindow {
            x: rng.random_range(0..=max_x) as u32,
            y: rng.random_range(0..=max_y) as u32,
            size,
            scale,
        };
        if window.contains_rect(x0, y0, x1, y1) {
            return Ok(window);
        }
    }
    Err(Error::TriesExhausted(max_tries))
}

/// Whether some integer placement excludes every corner. The inside/outside
/// pattern of each corner only changes at a handful of offsets, so checking
/// those offsets (and their neighbours) on each axis is exhaustive.
fn exclusion_possible(corners: &[(f64, f64); 4], size: u32, max_x: i64, max_y: i64) -> bool {
    let candidates = |coord: fn(&(f64, f64)) -> f64, max: i64| -> Vec<i64> {
        let mut c = vec![0, max];
        for p in corners {
            let v = coord(p);
            let first = (v - size as f64).ceil() as i64;
            let last = v.floor() as i64;
            c.extend([first - 1, first, last, last + 1]);
        }
        c.retain(|&o| (0..=max).contains(&o));
        c.sort_unstable();
        c.dedup();
        c
    };
    let xs = candidates(|p| p.0, max_x);
    let ys = candidates(|p| p.1, max_y);
    xs.iter().any(|&x| {
        ys.iter().any(|&y| {
            let w = CropWindow {
                x: x as u32,
                y: y as u32,
                size,
                scale: 1.0,
            };
            corners.iter().all(|&(px, py)| !w.contains_point(px, py))
        })
    })
}

/// Samples a full-resolution window that contains none of the four runway
/// corners.
pub fn inverse_bogo_crop(
    img_w: u32,
    img_h: u32,
    corners: &[(f64, f64); 4],
    size: u32,
    rng_seed: u64,
    max_tries: usize,
) -> Result<CropWindow> {
    if size == 0 || max_tries == 0 {
        return Err(Error::InvalidConfig("size and max_tries must be positive".into()));
    }
    if corners.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidConfig("corners must be finite".into()));
    }
    if img_w < size || img_h < size {
        return Err(Error::Unsatisfiable(format!(
            "{img_w}x{img_h} frame is smaller than a {size}px window"
        )));
    }
    let max_x = (img_w - size) as i64;
    let max_y = (img_h - size) as i64;
    if !exclusion_possible(corners, size, max_x, max_y) {
        return Err(Error::Unsatisfiable(
            "every window placement contains a runway corner".into(),
        ));
    }
    let mut rng = rng::seeded(rng_seed);
    for _ in 0..max_tries {
        let window = CropWindow {
            x: rng.random_range(0..=max_x) as u32,
            y: rng.random_range(0..=max_y) as u32,
            size,
            scale: 1.0,
        };
        if corners.iter().all(|&(px, py)| !window.contains_point(px, py)) {
            return Ok(window);
        }
    }
    Err(Error::TriesExhausted(max_tries))
}
