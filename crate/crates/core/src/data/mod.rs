//! Annotated images, count-group labels and the patch augmentation recipe.

mod groups;
mod patches;
mod synth;

pub use groups::{
    compute_class_weights, fit_group_boundaries, quantize_count, uniform_group_boundaries,
    ClassWeights, CountGroupLabel, GroupBoundaries, DEFAULT_GROUPS,
};
pub use patches::{
    make_patches, patch_counts, sample_crops, Augmentation, CropWindow, PatchConfig,
    TrainingPatch,
};
pub use synth::synthesize_dataset;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ground_truth::HeadAnnotations;
use crate::tensor::{Real, Tensor};

/// Smallest side accepted for a dataset image.
pub const MIN_IMAGE_SIDE: usize = 16;

/// A single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Input(format!(
                "image of {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input(format!(
                "pixel {} at row {}, column {} is outside [0, 1]",
                pixels[i],
                i / width,
                i % width
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width) {
            pixels.extend(row.iter().rev());
        }
        Self {
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    pub fn window(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut pixels = Vec::with_capacity(height * width);
        for y in top..top + height {
            let start = y * self.width + left;
            pixels.extend_from_slice(&self.pixels[start..start + width]);
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    /// One-channel network input.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            1,
            self.height,
            self.width,
            self.pixels.iter().map(|&p| T::of(p as f64)).collect(),
        )
    }
}

/// An image together with its head annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct DotAnnotatedImage {
    id: String,
    image: GrayImage,
    heads: HeadAnnotations,
}

impl DotAnnotatedImage {
    pub fn new(id: impl Into<String>, image: GrayImage, heads: HeadAnnotations) -> Result<Self> {
        let id = id.into();
        if image.height < MIN_IMAGE_SIDE || image.width < MIN_IMAGE_SIDE {
            return Err(Error::Input(format!(
                "image `{id}` is {}x{}, below the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum",
                image.height, image.width
            )));
        }
        heads
            .validate(image.height, image.width)
            .map_err(|e| Error::Input(format!("image `{id}`: {e}")))?;
        Ok(Self { id, image, heads })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn image(&self) -> &GrayImage {
        &self.image
    }

    pub fn heads(&self) -> &HeadAnnotations {
        &self.heads
    }

    /// Ground-truth crowd count.
    pub fn count(&self) -> usize {
        self.heads.len()
    }
}

/// Derives an independent seed for sub-stream `stream` of `seed` (splitmix64).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ground_truth::Point;
    use alloc::vec;

    fn blank(h: usize, w: usize) -> GrayImage {
        GrayImage::new(h, w, vec![0.5; h * w]).unwrap()
    }

    #[test]
    fn image_rejects_out_of_range_pixels() {
        assert!(GrayImage::new(1, 2, vec![0.0, 1.01]).is_err());
        assert!(GrayImage::new(1, 2, vec![0.0]).is_err());
        assert!(GrayImage::new(1, 2, vec![f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn annotated_image_validates_size_and_heads() {
        assert!(DotAnnotatedImage::new("small", blank(15, 20), HeadAnnotations::default()).is_err());
        let heads = HeadAnnotations::new(vec![Point::new(21.0, 10.0)]);
        let err = DotAnnotatedImage::new("img-7", blank(16, 16), heads).unwrap_err();
        assert!(format!("{err}").contains("img-7"));
    }

    #[test]
    fn flip_is_an_involution() {
        let img = GrayImage::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.flip_horizontal().pixels(), &[0.3, 0.2, 0.1, 0.6, 0.5, 0.4]);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
