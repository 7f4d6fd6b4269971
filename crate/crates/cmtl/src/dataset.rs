//! Dataset manifests: a JSON list of `{"id", "image", "heads"}` objects where
//! `image` is a PNG path relative to the manifest and `heads` holds `[x, y]`
//! pixel coordinates (origin top-left, y downward).

use std::fs;
use std::path::{Path, PathBuf};

use cmtl_core::data::{DotAnnotatedImage, GrayImage};
use cmtl_core::{HeadAnnotations, Point};
use image::{GrayImage as PngGray, ImageReader};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub heads: Vec<[f64; 2]>,
}

/// Reads any PNG as grayscale with values in `[0, 1]`.
pub fn read_gray_png(path: &Path) -> Result<GrayImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?
        .into_luma16();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f32 / u16::MAX as f32).collect();
    Ok(GrayImage::new(h as usize, w as usize, pixels).map_err(|e| Error::format(path, e.to_string()))?)
}

/// Writes an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, image: &GrayImage) -> Result<()> {
    let bytes = image.pixels().iter().map(|&v| (v * 255.0).round() as u8).collect();
    let png = PngGray::from_raw(image.width() as u32, image.height() as u32, bytes).expect("buffer matches dims");
    png.save(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_manifest(path: &Path) -> Result<Vec<DotAnnotatedImage>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    let root = path.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let image = read_gray_png(&root.join(&e.image))?;
            let heads = HeadAnnotations::new(e.heads.iter().map(|&[x, y]| Point::new(x, y)).collect());
            DotAnnotatedImage::new(e.id, image, heads).map_err(|err| Error::format(path, err.to_string()))
        })
        .collect()
}

/// Writes `images/<id>.png` for every image and a `manifest.json` under
/// `dir`, returning the manifest path.
pub fn write_manifest(dir: &Path, images: &[DotAnnotatedImage]) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut entries = Vec::with_capacity(images.len());
    for img in images {
        let rel = PathBuf::from("images").join(format!("{}.png", img.id()));
        write_gray_png(&dir.join(&rel), img.image())?;
        entries.push(ManifestEntry {
            id: img.id().into(),
            image: rel,
            heads: img.heads().points().iter().map(|p| [p.x, p.y]).collect(),
        });
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
