//! Face detection adapter, detector prescaling policy and margin-padded
//! face cropping.
//!
//! Detection runs on a rescaled copy of the frame so that faces come out at
//! roughly the size of a 340×340 source video; the returned boxes are always
//! in the coordinates of the frame that was passed in.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use image::Rgb;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{longest_side, resample_region, resize_bilinear, RgbImage};

/// Default fraction of the box size added on each side when cropping.
pub const DEFAULT_CROP_MARGIN: f64 = 0.20;

#[derive(Debug, Error)]
pub enum FaceError {
    #[error("image dimension must be positive")]
    NonPositiveDimension,
    #[error("image is empty")]
    EmptyImage,
    #[error("detector `{backend}` failed: {message}")]
    Backend { backend: String, message: String },
    #[error("unknown detector backend `{0}`")]
    UnknownBackend(String),
    #[error("face box lies outside the image")]
    BoxOutside,
    #[error("invalid crop parameters: {0}")]
    InvalidCrop(String),
}

/// Resize factor applied to a frame before it is handed to the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScaleFactor {
    Double,
    Unit,
    Half,
    Third,
}

impl ScaleFactor {
    pub fn value(self) -> f64 {
        match self {
            ScaleFactor::Double => 2.0,
            ScaleFactor::Unit => 1.0,
            ScaleFactor::Half => 0.5,
            ScaleFactor::Third => 0.33,
        }
    }
}

impl fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x", self.value())
    }
}

/// Prescale policy on the frame's longest side `L`:
/// `L < 100` → 2, `100 ≤ L ≤ 1000` → 1, `1000 < L ≤ 1900` → 0.5,
/// `L > 1900` → 0.33.
pub fn scale_factor(longest_side_px: u32) -> Result<ScaleFactor, FaceError> {
    Ok(match longest_side_px {
        0 => return Err(FaceError::NonPositiveDimension),
        1..=99 => ScaleFactor::Double,
        100..=1000 => ScaleFactor::Unit,
        1001..=1900 => ScaleFactor::Half,
        _ => ScaleFactor::Third,
    })
}

/// A detected face in original-frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
    pub applied_scale: f64,
}

impl FaceBox {
    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }
}

/// A raw detection in the coordinates of the raster the backend was given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

/// Anything that finds faces in an RGB raster.
///
/// Implementations must be deterministic for a fixed image and
/// configuration. Backends whose internals are not thread-safe wrap them in
/// a lock so they can be shared across request handlers and ingest workers.
pub trait FaceDetector: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>, String>;
}

/// Runs `backend` on the prescaled frame and maps boxes back to the frame's
/// own coordinates, sorted by descending confidence.
pub fn detect_faces(image: &RgbImage, backend: &dyn FaceDetector) -> Result<Vec<FaceBox>, FaceError> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(FaceError::EmptyImage);
    }
    let scale = scale_factor(longest_side(image))?.value();
    let scaled;
    let target = if scale == 1.0 {
        image
    } else {
        let sw = ((w as f64 * scale).round() as u32).max(1);
        let sh = ((h as f64 * scale).round() as u32).max(1);
        scaled = resize_bilinear(image, sw, sh);
        &scaled
    };

    let raw = backend.detect(target).map_err(|message| FaceError::Backend {
        backend: backend.name().to_string(),
        message,
    })?;

    let (fw, fh) = (w as f64, h as f64);
    let mut boxes: Vec<FaceBox> = raw
        .into_iter()
        .filter_map(|d| {
            let x0 = (d.x / scale).clamp(0.0, fw);
            let y0 = (d.y / scale).clamp(0.0, fh);
            let x1 = ((d.x + d.w) / scale).clamp(0.0, fw);
            let y1 = ((d.y + d.h) / scale).clamp(0.0, fh);
            (x1 > x0 && y1 > y0).then(|| FaceBox {
                x: x0,
                y: y0,
                w: x1 - x0,
                h: y1 - y0,
                confidence: if d.confidence.is_nan() { 0.0 } else { d.confidence.clamp(0.0, 1.0) },
                applied_scale: scale,
            })
        })
        .collect();
    boxes.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    Ok(boxes)
}

/// Crops `face` expanded by `margin × size` on every side, clamped to the
/// image, and resamples the region to `out_size × out_size`.
pub fn crop_face(image: &RgbImage, face: &FaceBox, margin: f64, out_size: u32) -> Result<RgbImage, FaceError> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(FaceError::InvalidCrop(format!("margin must be a non-negative number, got {margin}")));
    }
    if out_size == 0 {
        return Err(FaceError::InvalidCrop("output size must be at least 1".into()));
    }
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(FaceError::EmptyImage);
    }
    let (fw, fh) = (w as f64, h as f64);
    if !(face.w > 0.0 && face.h > 0.0)
        || face.x >= fw
        || face.y >= fh
        || face.right() <= 0.0
        || face.bottom() <= 0.0
    {
        return Err(FaceError::BoxOutside);
    }
    let x0 = (face.x - margin * face.w).clamp(0.0, fw).floor();
    let y0 = (face.y - margin * face.h).clamp(0.0, fh).floor();
    let x1 = (face.right() + margin * face.w).clamp(0.0, fw).ceil();
    let y1 = (face.bottom() + margin * face.h).clamp(0.0, fh).ceil();
    Ok(resample_region(image, x0, y0, x1, y1, out_size, out_size))
}

type DetectorFactory = Arc<dyn Fn() -> Result<Arc<dyn FaceDetector>, FaceError> + Send + Sync>;

/// Name → detector factory, resolved from the `faces.backend` setting.
#[derive(Clone)]
pub struct DetectorRegistry {
    factories: HashMap<String, DetectorFactory>,
}

impl Default for DetectorRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: HashMap::new(),
        };
        r.register(StubDetector::NAME, || Ok(Arc::new(StubDetector::default())));
        r
    }
}

impl DetectorRegistry {
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn() -> Result<Arc<dyn FaceDetector>, FaceError> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Arc::new(factory));
    }

    pub fn create(&self, name: &str) -> Result<Arc<dyn FaceDetector>, FaceError> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| FaceError::UnknownBackend(name.to_string()))?;
        factory()
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.factories.keys().cloned().collect();
        names.sort();
        names
    }
}

/// Colour of the synthetic face marker the stub backend looks for.
pub const MARKER_RGB: [u8; 3] = [255, 0, 255];

/// Deterministic detector for hermetic runs: every connected blob of marker
/// coloured pixels whose bounding box is at least `min_side` pixels on both
/// axes is reported as one face. Confidence is the fraction of the bounding
/// box outline covered by marker pixels, so a drawn frame scores ≈ 1.
#[derive(Debug, Clone)]
pub struct StubDetector {
    pub min_side: u32,
}

impl Default for StubDetector {
    fn default() -> Self {
        Self { min_side: 8 }
    }
}

impl StubDetector {
    pub const NAME: &'static str = "stub";

    fn is_marker(p: &Rgb<u8>) -> bool {
        let [r, g, b] = p.0;
        r >= 160 && b >= 160 && g <= 110 && r.abs_diff(b) <= 60
    }
}

impl FaceDetector for StubDetector {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>, String> {
        let (w, h) = image.dimensions();
        let mut mask: Vec<bool> = image.pixels().map(Self::is_marker).collect();
        let mut found = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..mask.len() {
            if !mask[start] {
                continue;
            }
            mask[start] = false;
            queue.push_back(start);
            let mut component = Vec::new();
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
            while let Some(i) = queue.pop_front() {
                let (x, y) = ((i as u32) % w, (i as u32) / w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                component.push((x, y));
                let mut visit = |nx: u32, ny: u32| {
                    let j = (ny * w + nx) as usize;
                    if mask[j] {
                        mask[j] = false;
                        queue.push_back(j);
                    }
                };
                if x > 0 {
                    visit(x - 1, y);
                }
                if x + 1 < w {
                    visit(x + 1, y);
                }
                if y > 0 {
                    visit(x, y - 1);
                }
                if y + 1 < h {
                    visit(x, y + 1);
                }
            }
            let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
            if bw < self.min_side || bh < self.min_side {
                continue;
            }
            let outline = if bw == 1 || bh == 1 { bw * bh } else { 2 * (bw + bh) - 4 };
            let on_outline = component
                .iter()
                .filter(|&&(x, y)| x == x0 || x == x1 || y == y0 || y == y1)
                .count() as f64;
            found.push(Detection {
                x: x0 as f64,
                y: y0 as f64,
                w: bw as f64,
                h: bh as f64,
                confidence: (on_outline / outline as f64).min(1.0),
            });
        }
        Ok(found)
    }
}

/// Draws a marker outline of the given stroke `thickness` whose outer edge
/// is the rectangle `(x, y, w, h)`; pixels outside the image are skipped.
pub fn draw_marker(image: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, thickness: u32) {
    let (iw, ih) = image.dimensions();
    for py in y..(y + h).min(ih) {
        for px in x..(x + w).min(iw) {
            let edge = px < x + thickness || py < y + thickness || px >= x + w - thickness || py >= y + h - thickness;
            if edge {
                image.put_pixel(px, py, Rgb(MARKER_RGB));
            }
        }
    }
}
