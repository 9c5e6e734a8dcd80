//! Patch extraction and label-aware augmentation.
//!
//! Each annotated nucleus becomes a patch centered at its centroid; training
//! replicates the patch under random translation, rotation, reflection,
//! scaling, and color/contrast transforms. Scaling by `s` multiplies the
//! nuclear area by exactly `s²`, so the class label is re-derived from the
//! scaled area — this is also how class balancing works: the scale is chosen
//! to steer the area into a uniformly drawn target bin.
//!
//! Pools are virtual: each sample is a pure function of `(seed, nucleus tag,
//! replicate)` through its own derived RNG stream, so samples can be
//! materialized lazily in any order (and in parallel) with identical results.
//! At full scale the 1.4-million-sample pool never exists in memory at once.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::binning::AreaBinning;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::rng::{derive_rng, stream};
use crate::tensor::Tensor;

/// A manually annotated (here: synthetically ground-truthed) nucleus.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedNucleus {
    pub nucleus_id: u64,
    pub cx_px: f64,
    pub cy_px: f64,
    pub area_um2: f64,
}

/// One training sample: pixels plus class label; `area_um2` is `None` for
/// background samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub area_um2: Option<f64>,
}

/// Augmentation transform ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub patch_px: usize,
    /// Content translation, uniform in ±translation_px per axis.
    pub translation_px: f64,
    /// Scale factor range (area scales by s²).
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-channel multiplicative gain range.
    pub color_gain_min: f64,
    pub color_gain_max: f64,
    /// Per-channel additive offset, uniform in ±color_offset.
    pub color_offset: f64,
    /// Contrast gain range (applied about mid-gray 0.5).
    pub contrast_min: f64,
    pub contrast_max: f64,
    /// Replicates per nucleus in the training pool.
    pub replicates: usize,
}

impl AugmentConfig {
    pub fn new(patch_px: usize) -> Self {
        AugmentConfig {
            patch_px,
            translation_px: 6.0,
            scale_min: 0.75,
            scale_max: 1.3,
            color_gain_min: 0.9,
            color_gain_max: 1.1,
            color_offset: 0.05,
            contrast_min: 0.9,
            contrast_max: 1.1,
            replicates: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_px == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] invalid",
                self.scale_min, self.scale_max
            )));
        }
        if self.translation_px < 0.0 || self.translation_px >= self.patch_px as f64 / 4.0 {
            return Err(Error::Config(format!(
                "translation ±{} px too large for a {} px patch",
                self.translation_px, self.patch_px
            )));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// A concrete draw of all augmentation randomness. Applying the same draw is
/// fully deterministic, which is what makes the virtual pool and the area
/// transform law (`area · s²`) directly testable.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub dx: f64,
    pub dy: f64,
    pub rotation_rad: f64,
    pub flip_x: bool,
    pub flip_y: bool,
    pub scale: f64,
    pub color_gain: [f64; 3],
    pub color_offset: [f64; 3],
    pub contrast: f64,
}

impl AugmentDraw {
    /// The identity transform.
    pub fn identity() -> Self {
        AugmentDraw {
            dx: 0.0,
            dy: 0.0,
            rotation_rad: 0.0,
            flip_x: false,
            flip_y: false,
            scale: 1.0,
            color_gain: [1.0; 3],
            color_offset: [0.0; 3],
            contrast: 1.0,
        }
    }
}

/// Extracts a `patch_px`-sized patch centered at `(cx, cy)`; out-of-bounds
/// pixels are filled by mirror reflection about the image edges. The rounded
/// center lands at patch position `(patch_px/2, patch_px/2)`.
pub fn extract_patch(image: &RgbImage, cx: f64, cy: f64, patch_px: usize) -> Result<Tensor<f32>> {
    if cx < 0.0 || cy < 0.0 || cx >= image.width() as f64 || cy >= image.height() as f64 {
        return Err(Error::Data(format!(
            "patch center ({cx}, {cy}) outside {}x{} image",
            image.width(),
            image.height()
        )));
    }
    let p = patch_px;
    let x0 = cx.round() as i64 - (p / 2) as i64;
    let y0 = cy.round() as i64 - (p / 2) as i64;
    let mut data = vec![0.0f32; 3 * p * p];
    for iy in 0..p {
        for ix in 0..p {
            let rgb = image.get_mirrored(x0 + ix as i64, y0 + iy as i64);
            for c in 0..3 {
                data[(c * p + iy) * p + ix] = rgb[c];
            }
        }
    }
    Tensor::from_vec(&[3, p, p], data)
}

/// Bilinear lookup in a `[3, p, p]` patch with mirror-reflected coordinates.
#[inline]
fn sample_bilinear(src: &[f32], p: usize, c: usize, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let tx = (x - x0) as f32;
    let ty = (y - y0) as f32;
    let xi = |v: f64| RgbImage::mirror_index(v as i64, p);
    let (x0i, x1i) = (xi(x0), xi(x0 + 1.0));
    let (y0i, y1i) = (xi(y0), xi(y0 + 1.0));
    let at = |yy: usize, xx: usize| src[(c * p + yy) * p + xx];
    at(y0i, x0i) * (1.0 - tx) * (1.0 - ty)
        + at(y0i, x1i) * tx * (1.0 - ty)
        + at(y1i, x0i) * (1.0 - tx) * ty
        + at(y1i, x1i) * tx * ty
}

/// Applies a draw's geometric and color transforms to patch pixels.
///
/// Geometry is inverse-mapped with bilinear resampling and mirror padding:
/// the content is scaled by `s`, rotated, optionally flipped, and shifted by
/// `(dx, dy)` about the patch center. Color applies per-channel gain and
/// offset followed by a contrast gain about mid-gray; results clamp to
/// [0, 1].
pub fn apply_augment(pixels: &Tensor<f32>, draw: &AugmentDraw) -> Result<Tensor<f32>> {
    let shape = pixels.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(Error::Shape(format!(
            "patch must be [3, p, p], got {shape:?}"
        )));
    }
    let p = shape[1];
    let c0 = (p as f64 - 1.0) / 2.0;
    let (sin_r, cos_r) = draw.rotation_rad.sin_cos();
    let src = pixels.as_slice();
    let mut out = Tensor::zeros(shape);

    let identity_geometry = draw.dx == 0.0
        && draw.dy == 0.0
        && draw.rotation_rad == 0.0
        && !draw.flip_x
        && !draw.flip_y
        && draw.scale == 1.0;

    if identity_geometry {
        out.as_mut_slice().copy_from_slice(src);
    } else {
        let dst = out.as_mut_slice();
        for iy in 0..p {
            for ix in 0..p {
                // Invert the forward map (flip → scale → rotate → translate).
                let vx = ix as f64 - c0 - draw.dx;
                let vy = iy as f64 - c0 - draw.dy;
                let mut rx = (vx * cos_r + vy * sin_r) / draw.scale;
                let mut ry = (-vx * sin_r + vy * cos_r) / draw.scale;
                if draw.flip_x {
                    rx = -rx;
                }
                if draw.flip_y {
                    ry = -ry;
                }
                let sx = c0 + rx;
                let sy = c0 + ry;
                for c in 0..3 {
                    dst[(c * p + iy) * p + ix] = sample_bilinear(src, p, c, sx, sy);
                }
            }
        }
    }

    let identity_color =
        draw.color_gain == [1.0; 3] && draw.color_offset == [0.0; 3] && draw.contrast == 1.0;
    if !identity_color {
        let dst = out.as_mut_slice();
        for c in 0..3 {
            let gain = draw.color_gain[c] as f32;
            let offset = draw.color_offset[c] as f32;
            let contrast = draw.contrast as f32;
            for v in &mut dst[c * p * p..(c + 1) * p * p] {
                let colored = *v * gain + offset;
                *v = (contrast * (colored - 0.5) + 0.5).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Draws unconstrained augmentation randomness for a nucleus of the given
/// area. The scale is redrawn (up to 10 attempts) while the scaled area
/// leaves the binning range; after that it falls back to 1.
pub fn draw_augment(
    rng: &mut ChaCha8Rng,
    config: &AugmentConfig,
    area_um2: f64,
    binning: &AreaBinning,
) -> AugmentDraw {
    let mut draw = draw_common(rng, config);
    draw.scale = 1.0;
    for _ in 0..10 {
        let s = rng.random_range(config.scale_min..=config.scale_max);
        let scaled = area_um2 * s * s;
        if scaled >= binning.a_min() && scaled <= binning.a_max() {
            draw.scale = s;
            break;
        }
    }
    finish_draw(rng, config, draw)
}

/// Draws augmentation randomness with the scale steered toward a uniformly
/// chosen reachable target bin (class balancing). The target area is drawn
/// uniformly within the target bin's intersection with the reachable area
/// interval, and `s = sqrt(target/area)`.
pub fn draw_balanced_augment(
    rng: &mut ChaCha8Rng,
    config: &AugmentConfig,
    area_um2: f64,
    binning: &AreaBinning,
) -> AugmentDraw {
    let mut draw = draw_common(rng, config);
    let lo_area = (area_um2 * config.scale_min * config.scale_min).max(binning.a_min());
    let hi_area = (area_um2 * config.scale_max * config.scale_max).min(binning.a_max());
    if lo_area >= hi_area {
        // No bin reachable within range; keep the original size.
        draw.scale = 1.0;
        return finish_draw(rng, config, draw);
    }
    let bin_lo = binning.quantize(lo_area).unwrap_or(0);
    let bin_hi = binning.quantize(hi_area).unwrap_or(binning.n_bins() - 1);
    let target_bin = rng.random_range(bin_lo..=bin_hi);
    let bin_start = binning.a_min() + binning.width() * target_bin as f64;
    let lo = bin_start.max(lo_area);
    let hi = (bin_start + binning.width()).min(hi_area);
    let target_area = if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    draw.scale = (target_area / area_um2).sqrt();
    finish_draw(rng, config, draw)
}

/// Draws everything except the scale, in fixed order.
fn draw_common(rng: &mut ChaCha8Rng, config: &AugmentConfig) -> AugmentDraw {
    let mut draw = AugmentDraw::identity();
    draw.dx = rng.random_range(-config.translation_px..=config.translation_px);
    draw.dy = rng.random_range(-config.translation_px..=config.translation_px);
    draw.rotation_rad = rng.random_range(0.0..std::f64::consts::TAU);
    draw.flip_x = rng.random::<f64>() < 0.5;
    draw.flip_y = rng.random::<f64>() < 0.5;
    draw
}

fn finish_draw(rng: &mut ChaCha8Rng, config: &AugmentConfig, mut draw: AugmentDraw) -> AugmentDraw {
    for c in 0..3 {
        draw.color_gain[c] = rng.random_range(config.color_gain_min..=config.color_gain_max);
    }
    for c in 0..3 {
        draw.color_offset[c] = rng.random_range(-config.color_offset..=config.color_offset);
    }
    draw.contrast = rng.random_range(config.contrast_min..=config.contrast_max);
    draw
}

/// Augments a foreground sample with the given draw: pixels transformed, the
/// area scaled by `s²`, and the label re-derived from the new area.
pub fn augment_with_draw(
    sample: &PatchSample,
    draw: &AugmentDraw,
    binning: &AreaBinning,
) -> Result<PatchSample> {
    let area = sample.area_um2.ok_or_else(|| {
        Error::Data("cannot augment a background sample (no area to relabel)".into())
    })?;
    let pixels = apply_augment(&sample.pixels, draw)?;
    let new_area = area * draw.scale * draw.scale;
    Ok(PatchSample {
        pixels,
        label: binning.quantize(new_area)?,
        area_um2: Some(new_area),
    })
}

/// Augments a foreground sample with fresh randomness from `rng`.
pub fn augment(
    sample: &PatchSample,
    rng: &mut ChaCha8Rng,
    config: &AugmentConfig,
    binning: &AreaBinning,
) -> Result<PatchSample> {
    let area = sample.area_um2.ok_or_else(|| {
        Error::Data("cannot augment a background sample (no area to relabel)".into())
    })?;
    let draw = draw_augment(rng, config, area, binning);
    augment_with_draw(sample, &draw, binning)
}

// ---------------------------------------------------------------------------
// Virtual pools
// ---------------------------------------------------------------------------

/// Base material for one nucleus: its extracted patch and area. `tag` is the
/// stable identifier used to derive per-replicate RNG streams.
#[derive(Debug, Clone)]
struct BaseSample {
    tag: u64,
    pixels: Tensor<f32>,
    area_um2: f64,
}

/// Lazily materialized pool of augmented nucleus patches.
///
/// Sample `i` (0-based) is replicate `i % replicates` of nucleus
/// `i / replicates` and is generated from
/// `derive_rng(seed, [AUGMENT, tag, replicate])` — a pure function, so any
/// evaluation order (or thread schedule) yields identical samples.
#[derive(Debug, Clone)]
pub struct AugmentPool {
    base: Vec<BaseSample>,
    config: AugmentConfig,
    binning: AreaBinning,
    seed: u64,
    balanced: bool,
}

impl AugmentPool {
    /// Builds a pool from annotated nuclei and their source image. `tags`
    /// must be stable across runs; nucleus ids are offset by `tag_offset` so
    /// pools from several regions can be concatenated without collisions.
    pub fn new(
        image: &RgbImage,
        nuclei: &[AnnotatedNucleus],
        tag_offset: u64,
        config: AugmentConfig,
        binning: AreaBinning,
        seed: u64,
        balanced: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut base = Vec::with_capacity(nuclei.len());
        for nucleus in nuclei {
            base.push(BaseSample {
                tag: tag_offset + nucleus.nucleus_id,
                pixels: extract_patch(image, nucleus.cx_px, nucleus.cy_px, config.patch_px)?,
                area_um2: nucleus.area_um2,
            });
        }
        Ok(AugmentPool {
            base,
            config,
            binning,
            seed,
            balanced,
        })
    }

    /// Merges pools (same config/seed) into one index space.
    pub fn concat(mut self, other: AugmentPool) -> AugmentPool {
        self.base.extend(other.base);
        self
    }

    pub fn len(&self) -> usize {
        self.base.len() * self.config.replicates
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// Materializes sample `index`.
    pub fn materialize(&self, index: usize) -> Result<PatchSample> {
        let reps = self.config.replicates;
        let nucleus = index / reps;
        let replicate = (index % reps) as u64;
        let base = self.base.get(nucleus).ok_or_else(|| {
            Error::Data(format!("pool index {index} out of range {}", self.len()))
        })?;
        let mut rng = derive_rng(self.seed, &[stream::AUGMENT, base.tag, replicate]);
        let draw = if self.balanced {
            draw_balanced_augment(&mut rng, &self.config, base.area_um2, &self.binning)
        } else {
            draw_augment(&mut rng, &self.config, base.area_um2, &self.binning)
        };
        let sample = PatchSample {
            pixels: base.pixels.clone(),
            label: self.binning.quantize(base.area_um2)?,
            area_um2: Some(base.area_um2),
        };
        augment_with_draw(&sample, &draw, &self.binning)
    }
}

/// Replicates and augments every nucleus, balancing the class histogram by
/// steering scales toward uniformly drawn target bins. Returns
/// `replicates · |nuclei|` samples; sample order is nucleus-major.
pub fn balance_replicate(
    image: &RgbImage,
    nuclei: &[AnnotatedNucleus],
    config: &AugmentConfig,
    binning: &AreaBinning,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    if nuclei.is_empty() {
        return Err(Error::Data(
            "balance_replicate needs at least one nucleus".into(),
        ));
    }
    let pool = AugmentPool::new(
        image,
        nuclei,
        0,
        config.clone(),
        binning.clone(),
        seed,
        true,
    )?;
    (0..pool.len()).map(|i| pool.materialize(i)).collect()
}

/// Lazily materialized pool of background patches.
///
/// Sample `k` rejection-samples its own center from
/// `derive_rng(seed, [BACKGROUND, image_tag, k])`: centers are uniform over
/// the image but farther than `exclusion_radius` from every nucleus centroid.
#[derive(Debug, Clone)]
pub struct BackgroundPool {
    image: RgbImage,
    centroids: Vec<(f64, f64)>,
    image_tag: u64,
    patch_px: usize,
    count: usize,
    exclusion_radius: f64,
    background_label: usize,
    seed: u64,
}

impl BackgroundPool {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image: RgbImage,
        centroids: Vec<(f64, f64)>,
        image_tag: u64,
        patch_px: usize,
        count: usize,
        exclusion_radius: f64,
        binning: &AreaBinning,
        seed: u64,
    ) -> Result<Self> {
        if exclusion_radius < 0.0 {
            return Err(Error::Config("exclusion radius must be ≥ 0".into()));
        }
        let pool = BackgroundPool {
            image,
            centroids,
            image_tag,
            patch_px,
            count,
            exclusion_radius,
            background_label: binning.background_class(),
            seed,
        };
        if count > 0 {
            // Fail fast if the feasible region is (practically) empty.
            pool.materialize(0)?;
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn materialize(&self, index: usize) -> Result<PatchSample> {
        if index >= self.count {
            return Err(Error::Data(format!(
                "background index {index} out of range {}",
                self.count
            )));
        }
        let mut rng = derive_rng(
            self.seed,
            &[stream::BACKGROUND, self.image_tag, index as u64],
        );
        let r2 = self.exclusion_radius * self.exclusion_radius;
        for _ in 0..10_000 {
            let x = rng.random_range(0.0..self.image.width() as f64);
            let y = rng.random_range(0.0..self.image.height() as f64);
            let clear = self
                .centroids
                .iter()
                .all(|&(cx, cy)| (x - cx).powi(2) + (y - cy).powi(2) > r2);
            if clear {
                return Ok(PatchSample {
                    pixels: extract_patch(&self.image, x, y, self.patch_px)?,
                    label: self.background_label,
                    area_um2: None,
                });
            }
        }
        Err(Error::Data(format!(
            "background sampling: no feasible center found for exclusion radius {}",
            self.exclusion_radius
        )))
    }
}

/// Samples `n` background patches eagerly.
pub fn sample_background(
    image: &RgbImage,
    centroids: &[(f64, f64)],
    n: usize,
    exclusion_radius: f64,
    patch_px: usize,
    binning: &AreaBinning,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    let pool = BackgroundPool::new(
        image.clone(),
        centroids.to_vec(),
        0,
        patch_px,
        n,
        exclusion_radius,
        binning,
        seed,
    )?;
    (0..n).map(|i| pool.materialize(i)).collect()
}
