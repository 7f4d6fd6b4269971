//! IO, file formats and the command line around [`cmtl_core`].
//!
//! * [`dmap`]: raw density map files.
//! * [`checkpoint`]: versioned model archives.
//! * [`dataset`]: JSON manifests of PNG images with head annotations.
//! * [`render`]: false-color PNG views of density maps.
//! * [`reports`]: training configs, loss histories and evaluation reports.
//! * [`cli`]: the `cmtl` command.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod dmap;
mod error;
pub mod render;
pub mod reports;

pub use error::{Error, Result};

use cmtl_core::data::DotAnnotatedImage;
use cmtl_core::model::{predict_density, ModelParameters};
use cmtl_core::train::{EvaluationReport, ImageCount};
use rayon::prelude::*;

/// Same metrics as [`cmtl_core::train::evaluate`], with images counted in
/// parallel on the current rayon pool.
pub fn evaluate_parallel(model: &ModelParameters<f32>, images: &[DotAnnotatedImage]) -> Result<EvaluationReport> {
    let per_image = images
        .par_iter()
        .map(|img| {
            let out = predict_density(model, img.image())
                .map_err(|e| cmtl_core::Error::Input(format!("image `{}`: {e}", img.id())))?;
            Ok(ImageCount {
                id: img.id().into(),
                true_count: img.count() as f64,
                estimated_count: out.count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport::from_counts(per_image)?)
}
