//! Synthetic dot-annotated crowds for desk-scale experiments.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, DotAnnotatedImage, GrayImage, MIN_IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::ground_truth::{HeadAnnotations, Point};

const PLACEMENT_ATTEMPTS: usize = 2000;
const BLOB_PEAK: f64 = 0.6;

/// Renders `n_images` images of `size = (height, width)`, each holding a
/// uniformly drawn number of heads in `count_range`.
///
/// Heads are Gaussian-intensity discs of `blob_radius` pixels on a smooth
/// striped background with pixel noise. Centers keep at least `blob_radius`
/// from each other and half a pixel from the border.
pub fn synthesize_dataset(
    n_images: usize,
    size: (usize, usize),
    count_range: (usize, usize),
    blob_radius: f64,
    rng_seed: u64,
) -> Result<Vec<DotAnnotatedImage>> {
    let (height, width) = size;
    let (lo, hi) = count_range;
    if hi < lo {
        return Err(Error::Config(format!("count range {lo}:{hi} is empty")));
    }
    if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
        return Err(Error::Config(format!(
            "synthetic images must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {height}x{width}"
        )));
    }
    if !(blob_radius > 0.0 && blob_radius.is_finite()) {
        return Err(Error::Config(format!("blob radius must be positive, got {blob_radius}")));
    }
    (0..n_images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, i as u64));
            let k = rng.gen_range(lo..=hi);
            let heads = place_heads(&mut rng, height, width, k, blob_radius)
                .map_err(|e| Error::Generation(format!("image {i}: {e}")))?;
            let image = render(&mut rng, height, width, &heads, blob_radius)?;
            DotAnnotatedImage::new(format!("synth-{i:05}"), image, heads)
        })
        .collect()
}

fn place_heads<R: Rng>(
    rng: &mut R,
    height: usize,
    width: usize,
    k: usize,
    min_gap: f64,
) -> Result<HeadAnnotations> {
    let mut points: Vec<Point> = Vec::with_capacity(k);
    for n in 0..k {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let p = Point::new(
                rng.gen_range(0.5..width as f64 - 0.5),
                rng.gen_range(0.5..height as f64 - 0.5),
            );
            let clear = points.iter().all(|q| {
                let (dx, dy) = (p.x - q.x, p.y - q.y);
                dx * dx + dy * dy >= min_gap * min_gap
            });
            if clear {
                points.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place head {} of {k} with spacing {min_gap} in {height}x{width}",
                n + 1
            )));
        }
    }
    Ok(HeadAnnotations::new(points))
}

fn render<R: Rng>(
    rng: &mut R,
    height: usize,
    width: usize,
    heads: &HeadAnnotations,
    radius: f64,
) -> Result<GrayImage> {
    // A few random plane waves give a structured but head-free texture.
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..TAU);
            let freq = rng.gen_range(0.05..0.3);
            (freq * Float::cos(angle), freq * Float::sin(angle), rng.gen_range(0.0..TAU))
        })
        .collect();
    let mut pixels: Vec<f64> = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let mut v = 0.2 + rng.gen_range(-0.02..0.02);
            for &(fx, fy, phase) in &waves {
                v += 0.04 * Float::sin(fx * x as f64 + fy * y as f64 + phase);
            }
            pixels.push(v);
        }
    }

    let spread = radius / 2.0;
    let reach = Float::ceil(radius) as isize;
    for p in heads.points() {
        let (cx, cy) = (Float::floor(p.x) as isize, Float::floor(p.y) as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(height as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(width as isize - 1) {
                let dx = x as f64 + 0.5 - p.x;
                let dy = y as f64 + 0.5 - p.y;
                let d2 = dx * dx + dy * dy;
                if d2 <= radius * radius {
                    pixels[y as usize * width + x as usize] +=
                        BLOB_PEAK * Float::exp(-d2 / (2.0 * spread * spread));
                }
            }
        }
    }
    GrayImage::new(
        height,
        width,
        pixels.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )
}
