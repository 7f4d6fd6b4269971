//! The per-image training patch recipe: random quarter-area crops, plus one
//! mirrored and one noisy copy of every crop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::groups::{quantize_count, CountGroupLabel, GroupBoundaries};
use super::{DotAnnotatedImage, GrayImage};
use crate::error::{Error, Result};
use crate::ground_truth::{
    count_from_density, generate_density_map, DensityMap, GroundTruthConfig, HeadAnnotations,
    Point,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    None,
    Hflip,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Random crops per image; as many flipped and noisy copies are added.
    pub crops: usize,
    /// Crop side length as a fraction of the image side (0.5 = quarter area).
    pub crop_fraction: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise_std: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            crops: 100,
            crop_fraction: 0.5,
            noise_std: 0.01,
        }
    }
}

impl PatchConfig {
    pub fn patches_per_image(&self) -> usize {
        3 * self.crops
    }

    fn validate(&self) -> Result<()> {
        if self.crops == 0 {
            return Err(Error::Config("at least one crop per image is required".into()));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "crop fraction must lie in (0, 1], got {}",
                self.crop_fraction
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise standard deviation must be non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    fn crop_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (
            Float::floor(height as f64 * self.crop_fraction) as usize,
            Float::floor(width as f64 * self.crop_fraction) as usize,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropWindow {
    fn contains(&self, p: &Point) -> bool {
        p.x >= self.left as f64
            && p.x < (self.left + self.width) as f64
            && p.y >= self.top as f64
            && p.y < (self.top + self.height) as f64
    }

    /// Heads inside the window, in window coordinates.
    fn rebase(&self, heads: &HeadAnnotations) -> HeadAnnotations {
        heads
            .points()
            .iter()
            .filter(|p| self.contains(p))
            .map(|p| Point::new(p.x - self.left as f64, p.y - self.top as f64))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPatch {
    pub image: GrayImage,
    pub density: DensityMap,
    pub group_label: CountGroupLabel,
    pub source_id: String,
    pub augmentation: Augmentation,
}

impl TrainingPatch {
    /// Crowd count carried by the patch's density, rounded to whole persons.
    pub fn count(&self) -> f64 {
        patch_count(&self.density)
    }
}

fn patch_count(density: &DensityMap) -> f64 {
    Float::round(count_from_density(density))
}

/// Uniformly placed crop windows; the first draws from `rng`.
pub fn sample_crops<R: Rng>(
    height: usize,
    width: usize,
    cfg: &PatchConfig,
    rng: &mut R,
) -> Result<Vec<CropWindow>> {
    cfg.validate()?;
    let (ch, cw) = cfg.crop_dims(height, width);
    if ch == 0 || cw == 0 {
        return Err(Error::Input(format!(
            "a {height}x{width} image is too small for crops of fraction {}",
            cfg.crop_fraction
        )));
    }
    Ok((0..cfg.crops)
        .map(|_| CropWindow {
            top: rng.gen_range(0..=height - ch),
            left: rng.gen_range(0..=width - cw),
            height: ch,
            width: cw,
        })
        .collect())
}

fn check_size(img: &DotAnnotatedImage) -> Result<()> {
    if img.image().height() < 4 || img.image().width() < 4 {
        return Err(Error::Input(format!(
            "image `{}` is {}x{}; patches need at least 4x4",
            img.id(),
            img.image().height(),
            img.image().width()
        )));
    }
    Ok(())
}

/// Rounded counts of all patches [`make_patches`] would emit for the same
/// arguments, in the same order, without rendering the images.
pub fn patch_counts(
    img: &DotAnnotatedImage,
    gt: &GroundTruthConfig,
    cfg: &PatchConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    check_size(img)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crops = sample_crops(img.image().height(), img.image().width(), cfg, &mut rng)?;
    let mut counts = Vec::with_capacity(3 * crops.len());
    for w in &crops {
        let density = generate_density_map((w.height, w.width), &w.rebase(img.heads()), gt)?;
        counts.push(patch_count(&density));
    }
    // Flipped and noisy copies carry the same density mass.
    let n = counts.len();
    counts.extend_from_within(..n);
    counts.extend_from_within(..n);
    Ok(counts)
}

/// Builds `3 * cfg.crops` patches: the crops (`None`), their mirror images
/// (`Hflip`) and noisy copies (`Noise`), in that order. Each patch's density
/// is rendered from the heads inside its crop only.
pub fn make_patches(
    img: &DotAnnotatedImage,
    gt: &GroundTruthConfig,
    cfg: &PatchConfig,
    boundaries: &GroupBoundaries,
    seed: u64,
) -> Result<Vec<TrainingPatch>> {
    check_size(img)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crops = sample_crops(img.image().height(), img.image().width(), cfg, &mut rng)?;

    let mut plain = Vec::with_capacity(crops.len());
    for w in &crops {
        let density = generate_density_map((w.height, w.width), &w.rebase(img.heads()), gt)?;
        let group_label = quantize_count(patch_count(&density), boundaries);
        plain.push(TrainingPatch {
            image: img.image().window(w.top, w.left, w.height, w.width),
            density,
            group_label,
            source_id: img.id().into(),
            augmentation: Augmentation::None,
        });
    }

    let flipped: Vec<TrainingPatch> = plain
        .iter()
        .map(|p| TrainingPatch {
            image: p.image.flip_horizontal(),
            density: p.density.flip_horizontal(),
            augmentation: Augmentation::Hflip,
            ..p.clone()
        })
        .collect();

    let noise = Normal::new(0.0f64, cfg.noise_std)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let mut noisy = Vec::with_capacity(plain.len());
    for p in &plain {
        let pixels = p
            .image
            .pixels()
            .iter()
            .map(|&v| (v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
            .collect();
        noisy.push(TrainingPatch {
            image: GrayImage::new(p.image.height(), p.image.width(), pixels)?,
            augmentation: Augmentation::Noise,
            ..p.clone()
        });
    }

    let mut out = plain;
    out.extend(flipped);
    out.extend(noisy);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::groups::fit_group_boundaries;
    use alloc::vec;

    fn image_with(heads: Vec<Point>) -> DotAnnotatedImage {
        let (h, w) = (40, 36);
        let pixels = (0..h * w).map(|i| ((i * 7) % 11) as f32 / 10.0).collect();
        DotAnnotatedImage::new("img", GrayImage::new(h, w, pixels).unwrap(), HeadAnnotations::new(heads)).unwrap()
    }

    fn scattered_heads() -> Vec<Point> {
        (0..25)
            .map(|i| Point::new((i * 13 % 36) as f64 + 0.3, (i * 7 % 40) as f64 + 0.6))
            .collect()
    }

    fn bounds() -> GroupBoundaries {
        GroupBoundaries::new((1..10).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn emits_three_hundred_patches_in_equal_thirds() {
        let patches = make_patches(&image_with(scattered_heads()), &GroundTruthConfig::new(2.0), &PatchConfig::default(), &bounds(), 3).unwrap();
        assert_eq!(patches.len(), 300);
        for (kind, range) in [(Augmentation::None, 0..100), (Augmentation::Hflip, 100..200), (Augmentation::Noise, 200..300)] {
            assert!(patches[range].iter().all(|p| p.augmentation == kind));
        }
        for p in &patches {
            assert_eq!((p.image.height(), p.image.width()), (20, 18));
            assert_eq!(p.density.dims(), (20, 18));
            assert!(p.group_label.class_index < 10);
        }
    }

    #[test]
    fn flipped_density_is_the_exact_mirror() {
        let patches = make_patches(&image_with(scattered_heads()), &GroundTruthConfig::new(2.0), &PatchConfig::default(), &bounds(), 9).unwrap();
        for i in 0..100 {
            let (orig, flip) = (&patches[i].density, &patches[100 + i].density);
            for y in 0..orig.height() {
                for x in 0..orig.width() {
                    assert_eq!(flip.get(y, orig.width() - 1 - x), orig.get(y, x));
                }
            }
            assert_eq!(patches[200 + i].density, *orig);
        }
    }

    #[test]
    fn zero_head_image_gives_empty_class_zero_patches() {
        let patches = make_patches(&image_with(vec![]), &GroundTruthConfig::new(2.0), &PatchConfig::default(), &bounds(), 1).unwrap();
        assert_eq!(patches.len(), 300);
        assert!(patches.iter().all(|p| count_from_density(&p.density) == 0.0 && p.group_label.class_index == 0));
    }

    #[test]
    fn same_seed_same_patches() {
        let img = image_with(scattered_heads());
        let gt = GroundTruthConfig::new(2.0);
        let a = make_patches(&img, &gt, &PatchConfig::default(), &bounds(), 5).unwrap();
        let b = make_patches(&img, &gt, &PatchConfig::default(), &bounds(), 5).unwrap();
        assert_eq!(a, b);
        let c = make_patches(&img, &gt, &PatchConfig::default(), &bounds(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_agree_with_density_mass_and_fitted_boundaries() {
        let img = image_with(scattered_heads());
        let gt = GroundTruthConfig::new(2.0);
        let cfg = PatchConfig::default();
        let counts = patch_counts(&img, &gt, &cfg, 11).unwrap();
        let b = fit_group_boundaries(&counts, 10).unwrap();
        let patches = make_patches(&img, &gt, &cfg, &b, 11).unwrap();
        assert_eq!(counts.len(), patches.len());
        for (p, c) in patches.iter().zip(&counts) {
            assert_eq!(p.count(), *c);
            assert_eq!(quantize_count(count_from_density(&p.density).round(), &b), p.group_label);
        }
    }

    #[test]
    fn noise_keeps_pixels_in_range() {
        let cfg = PatchConfig { noise_std: 0.5, ..PatchConfig::default() };
        let patches = make_patches(&image_with(vec![]), &GroundTruthConfig::new(2.0), &cfg, &bounds(), 2).unwrap();
        assert!(patches[200..].iter().all(|p| p.image.pixels().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(patches[200].image, patches[0].image);
    }

    #[test]
    fn crops_exclude_outside_heads() {
        let w = CropWindow { top: 2, left: 3, height: 4, width: 4 };
        let heads = HeadAnnotations::new(vec![Point::new(3.0, 2.0), Point::new(7.0, 3.0), Point::new(6.9, 5.9)]);
        let inside = w.rebase(&heads);
        assert_eq!(inside.points(), &[Point::new(0.0, 0.0), Point::new(3.9000000000000004, 3.9000000000000004)]);
    }

    #[test]
    fn tiny_crops_are_rejected() {
        let cfg = PatchConfig { crop_fraction: 0.01, ..PatchConfig::default() };
        let err = make_patches(&image_with(vec![]), &GroundTruthConfig::new(2.0), &cfg, &bounds(), 0);
        assert!(matches!(err, Err(Error::Input(_))));
    }
}
