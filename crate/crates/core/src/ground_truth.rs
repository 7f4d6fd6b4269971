//! Ground-truth density maps built from dot annotations.
//!
//! Every annotated head contributes one isotropic 2-D Gaussian of a fixed
//! scale, evaluated at pixel centers. Kernels are truncated to a
//! `(2 * ceil(3 sigma) + 1)^2` window around the head's pixel and clipped to
//! the image, so heads near the border lose part of their mass unless
//! [`GroundTruthConfig::renormalize_truncated`] is set.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A head center in pixels: origin top-left, `x` rightward, `y` downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// The dot annotations of one image. May be empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HeadAnnotations {
    points: Vec<Point>,
}

impl HeadAnnotations {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks `0 <= x < width` and `0 <= y < height` for every head.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for (index, p) in self.points.iter().enumerate() {
            let inside = p.x.is_finite()
                && p.y.is_finite()
                && p.x >= 0.0
                && p.y >= 0.0
                && p.x < width as f64
                && p.y < height as f64;
            if !inside {
                return Err(Error::HeadOutOfBounds {
                    index,
                    x: p.x,
                    y: p.y,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }
}

impl FromIterator<Point> for HeadAnnotations {
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthConfig {
    /// Gaussian scale in pixels.
    pub sigma: f64,
    /// Rescale each clipped kernel to unit mass.
    #[serde(default = "default_renormalize")]
    pub renormalize_truncated: bool,
}

fn default_renormalize() -> bool {
    true
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            sigma: 4.0,
            renormalize_truncated: true,
        }
    }
}

impl GroundTruthConfig {
    pub fn new(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "sigma must be positive and finite, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Half-width of the truncation window.
    pub fn radius(&self) -> usize {
        Float::ceil(3.0 * self.sigma) as usize
    }
}

/// A `height x width` grid of persons per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    /// Wraps row-major values. Fails on a length mismatch or non-finite
    /// entries; negative entries are allowed because network outputs are
    /// not clamped.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Input(format!(
                "density map of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "density value at row {}, column {} is not finite",
                i / width.max(1),
                i % width.max(1)
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Left-right mirror image.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width.max(1)) {
            data.extend(row.iter().rev());
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// The `height x width` window whose top-left corner is at `(top, left)`.
    pub fn window(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            let start = y * self.width + left;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Zero-extends to a larger grid anchored at the top-left corner.
    pub fn zero_pad_to(&self, height: usize, width: usize) -> Self {
        assert!(height >= self.height && width >= self.width);
        let mut out = Self::zeros(height, width);
        for y in 0..self.height {
            out.data[y * width..y * width + self.width]
                .copy_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        out
    }
}

/// Renders the ground-truth density of `heads` on an `image_size = (height, width)` grid.
pub fn generate_density_map(
    image_size: (usize, usize),
    heads: &HeadAnnotations,
    cfg: &GroundTruthConfig,
) -> Result<DensityMap> {
    let (height, width) = image_size;
    if height == 0 || width == 0 {
        return Err(Error::Input(format!(
            "image size must be positive, got {height}x{width}"
        )));
    }
    cfg.validate()?;
    heads.validate(height, width)?;

    let mut map = DensityMap::zeros(height, width);
    let radius = cfg.radius() as isize;
    let two_var = 2.0 * cfg.sigma * cfg.sigma;
    let norm = 1.0 / (PI * two_var);
    let side = (2 * radius + 1) as usize;
    let mut kernel = vec![0.0; side * side];

    for p in heads.points() {
        let cx = Float::floor(p.x) as isize;
        let cy = Float::floor(p.y) as isize;
        let y0 = (cy - radius).max(0);
        let y1 = (cy + radius).min(height as isize - 1);
        let x0 = (cx - radius).max(0);
        let x1 = (cx + radius).min(width as isize - 1);
        let (rows, cols) = ((y1 - y0 + 1) as usize, (x1 - x0 + 1) as usize);

        // Offsets are taken relative to the head's own pixel so that the
        // kernel is identical for heads at the same sub-pixel position.
        let fx = cx as f64 + 0.5 - p.x;
        let fy = cy as f64 + 0.5 - p.y;
        let mut mass = 0.0;
        for (r, y) in (y0..=y1).enumerate() {
            let dy = (y - cy) as f64 + fy;
            for (c, x) in (x0..=x1).enumerate() {
                let dx = (x - cx) as f64 + fx;
                let v = norm * Float::exp(-(dx * dx + dy * dy) / two_var);
                kernel[r * cols + c] = v;
                mass += v;
            }
        }
        let scale = if cfg.renormalize_truncated && mass > 0.0 {
            1.0 / mass
        } else {
            1.0
        };
        for r in 0..rows {
            let row = (y0 as usize + r) * width + x0 as usize;
            for c in 0..cols {
                map.data[row + c] += kernel[r * cols + c] * scale;
            }
        }
    }
    Ok(map)
}

/// Total mass of the map, i.e. the count it encodes.
pub fn count_from_density(map: &DensityMap) -> f64 {
    map.data.iter().sum()
}

/// Block-sum pooling by `factor` in both dimensions; preserves total mass.
pub fn downsample_density(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor == 0 || map.height % factor != 0 || map.width % factor != 0 {
        return Err(Error::Input(format!(
            "downsampling factor {factor} must be positive and divide {}x{}",
            map.height, map.width
        )));
    }
    let (h, w) = (map.height / factor, map.width / factor);
    let mut out = DensityMap::zeros(h, w);
    for y in 0..map.height {
        for x in 0..map.width {
            out.data[(y / factor) * w + x / factor] += map.data[y * map.width + x];
        }
    }
    Ok(out)
}
