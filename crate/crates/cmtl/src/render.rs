//! False-color PNG rendering of density maps.
//!
//! Values are divided by the map maximum and looked up in a fixed 256-entry
//! table interpolated linearly between five anchors: black, deep purple,
//! red, orange and pale yellow. Negative values render as black, and a map
//! whose maximum is not positive renders all black.

use std::path::{Path, PathBuf};

use cmtl_core::DensityMap;
use image::{Rgb, RgbImage};

use crate::dmap::write_dmap;
use crate::{Error, Result};

const ANCHORS: [[f64; 3]; 5] = [
    [0.0, 0.0, 0.0],
    [80.0, 18.0, 123.0],
    [196.0, 40.0, 70.0],
    [248.0, 142.0, 30.0],
    [252.0, 253.0, 191.0],
];

pub fn colormap() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    for (i, entry) in lut.iter_mut().enumerate() {
        let t = i as f64 / 255.0 * (ANCHORS.len() - 1) as f64;
        let k = (t.floor() as usize).min(ANCHORS.len() - 2);
        let f = t - k as f64;
        for c in 0..3 {
            entry[c] = (ANCHORS[k][c] * (1.0 - f) + ANCHORS[k + 1][c] * f).round() as u8;
        }
    }
    lut
}

pub fn to_rgb(map: &DensityMap) -> RgbImage {
    let lut = colormap();
    let max = map.data().iter().copied().fold(0.0, f64::max);
    let mut img = RgbImage::new(map.width() as u32, map.height() as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let v = if max > 0.0 { (map.data()[i] / max).clamp(0.0, 1.0) } else { 0.0 };
        *px = Rgb(lut[(v * 255.0).round() as usize]);
    }
    img
}

/// Writes `out_path` as a PNG and the raw map next to it with a `.dmap`
/// extension; returns the sidecar path.
pub fn render_density(map: &DensityMap, out_path: &Path) -> Result<PathBuf> {
    to_rgb(map)
        .save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|e| Error::format(out_path, e.to_string()))?;
    let sidecar = out_path.with_extension("dmap");
    write_dmap(&sidecar, map)?;
    Ok(sidecar)
}
