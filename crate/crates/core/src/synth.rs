//! Synthetic histology-like regions with exact ground truth.
//!
//! Each region is an eosin-pink background with low-frequency color noise
//! plus non-overlapping hematoxylin-dark elliptical nuclei. Nucleus areas are
//! drawn log-normally (median ≈ 55 µm², σ_log ≈ 0.45) and clipped to the
//! measurement range; ellipses are rasterized with 4×4 supersampled
//! anti-aliasing so the rasterized pixel count converges to the analytic
//! area. The cohort mirrors the 14/7/18 split into training (A1), validation
//! (A2), and test (B) subsets, with ~100 nuclei per region marked by
//! systematic random sampling.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::binning::UM2_PER_PX;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::rng::{derive_rng, stream};

/// Parameters of one generated region.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRegionSpec {
    /// Square image side in pixels.
    pub image_px: usize,
    /// Number of nuclei to place.
    pub nucleus_count: usize,
    /// Median of the log-normal area distribution, µm².
    pub area_median_um2: f64,
    /// σ of log(area).
    pub area_sigma_log: f64,
    /// Draws are clipped into [area_min_um2, area_max_um2].
    pub area_min_um2: f64,
    pub area_max_um2: f64,
    /// Ellipse axis ratio (major/minor) range.
    pub ecc_min: f64,
    pub ecc_max: f64,
    /// Minimum boundary separation between nuclei, px.
    pub min_gap_px: f64,
    /// Hematoxylin-like nucleus color and per-nucleus per-channel jitter.
    pub nucleus_color: [f32; 3],
    pub nucleus_jitter: f64,
    /// Eosin-like background color, its low-frequency noise amplitude, and
    /// the noise lattice spacing in pixels.
    pub background_color: [f32; 3],
    pub background_noise: f64,
    pub background_noise_cell_px: usize,
}

impl Default for SyntheticRegionSpec {
    fn default() -> Self {
        SyntheticRegionSpec {
            image_px: 1024,
            nucleus_count: 250,
            area_median_um2: 55.0,
            area_sigma_log: 0.45,
            area_min_um2: 16.6,
            area_max_um2: 151.8,
            ecc_min: 1.0,
            ecc_max: 2.0,
            min_gap_px: 3.0,
            nucleus_color: [0.26, 0.18, 0.45],
            nucleus_jitter: 0.05,
            background_color: [0.93, 0.72, 0.78],
            background_noise: 0.05,
            background_noise_cell_px: 64,
        }
    }
}

impl SyntheticRegionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_px < 32 {
            return Err(Error::Config(format!(
                "region image size {} too small",
                self.image_px
            )));
        }
        if !(self.area_min_um2 > 0.0 && self.area_min_um2 < self.area_max_um2) {
            return Err(Error::Config("bad area clip range".into()));
        }
        if !(self.ecc_min >= 1.0 && self.ecc_min <= self.ecc_max) {
            return Err(Error::Config(format!(
                "eccentricity range [{}, {}] invalid",
                self.ecc_min, self.ecc_max
            )));
        }
        if self.min_gap_px < 0.0 {
            return Err(Error::Config("negative inter-nucleus gap".into()));
        }
        Ok(())
    }
}

/// One placed nucleus with its exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Nucleus {
    pub id: u64,
    pub cx_px: f64,
    pub cy_px: f64,
    /// Analytic ellipse area, µm².
    pub area_um2: f64,
    /// Anti-aliased rasterized coverage, px (fractional).
    pub area_px: f64,
    /// Marked by systematic random sampling.
    pub sampled: bool,
    pub semi_major_px: f64,
    pub semi_minor_px: f64,
    pub orientation_rad: f64,
}

/// Ground truth of one region.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub nuclei: Vec<Nucleus>,
}

impl GroundTruth {
    /// Mean analytic nuclear area.
    pub fn mna_um2(&self) -> Result<f64> {
        if self.nuclei.is_empty() {
            return Err(Error::Data("ground truth has no nuclei".into()));
        }
        Ok(self.nuclei.iter().map(|n| n.area_um2).sum::<f64>() / self.nuclei.len() as f64)
    }

    /// MNA over the sampled subset only.
    pub fn sampled_mna_um2(&self) -> Result<f64> {
        let sampled: Vec<f64> = self
            .nuclei
            .iter()
            .filter(|n| n.sampled)
            .map(|n| n.area_um2)
            .collect();
        if sampled.is_empty() {
            return Err(Error::Data("no sampled nuclei".into()));
        }
        Ok(sampled.iter().sum::<f64>() / sampled.len() as f64)
    }
}

/// Axis-aligned-frame ellipse membership test.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Self {
        Ellipse {
            cx,
            cy,
            a,
            b,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
        }
    }

    /// Same center/orientation with both semi-axes grown by `d`.
    fn dilated(&self, d: f64) -> Ellipse {
        Ellipse {
            a: self.a + d,
            b: self.b + d,
            ..*self
        }
    }

    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.a;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.b;
        u * u + v * v <= 1.0
    }

    /// Pixel-index bounding box, clamped to the image.
    fn bbox(&self, image_px: usize) -> (usize, usize, usize, usize) {
        let r = self.a.max(self.b) + 1.0;
        let x0 = ((self.cx - r).floor().max(0.0)) as usize;
        let y0 = ((self.cy - r).floor().max(0.0)) as usize;
        let x1 = ((self.cx + r).ceil() as usize).min(image_px - 1);
        let y1 = ((self.cy + r).ceil() as usize).min(image_px - 1);
        (x0, y0, x1, y1)
    }

    /// Fraction of the pixel covered, estimated on a 4×4 subsample grid.
    #[inline]
    fn coverage(&self, px: usize, py: usize) -> f64 {
        let mut hits = 0u32;
        for sy in 0..4 {
            let y = py as f64 + (sy as f64 + 0.5) / 4.0;
            for sx in 0..4 {
                let x = px as f64 + (sx as f64 + 0.5) / 4.0;
                if self.contains(x, y) {
                    hits += 1;
                }
            }
        }
        hits as f64 / 16.0
    }
}

/// Low-frequency value noise: a coarse random lattice interpolated
/// bilinearly.
fn background_image(spec: &SyntheticRegionSpec, rng: &mut ChaCha8Rng) -> RgbImage {
    let n = spec.image_px;
    let cell = spec.background_noise_cell_px.max(2);
    let lat = n / cell + 2;
    let mut lattice = vec![[0.0f64; 3]; lat * lat];
    for point in lattice.iter_mut() {
        for ch in point.iter_mut() {
            *ch = rng.random_range(-spec.background_noise..spec.background_noise);
        }
    }
    let mut img = RgbImage::new(n, n);
    for y in 0..n {
        let fy = y as f64 / cell as f64;
        let iy = fy as usize;
        let ty = fy - iy as f64;
        for x in 0..n {
            let fx = x as f64 / cell as f64;
            let ix = fx as usize;
            let tx = fx - ix as f64;
            let mut rgb = [0.0f32; 3];
            for c in 0..3 {
                let p00 = lattice[iy * lat + ix][c];
                let p01 = lattice[iy * lat + ix + 1][c];
                let p10 = lattice[(iy + 1) * lat + ix][c];
                let p11 = lattice[(iy + 1) * lat + ix + 1][c];
                let noise = p00 * (1.0 - tx) * (1.0 - ty)
                    + p01 * tx * (1.0 - ty)
                    + p10 * (1.0 - tx) * ty
                    + p11 * tx * ty;
                rgb[c] = (spec.background_color[c] as f64 + noise).clamp(0.0, 1.0) as f32;
            }
            img.set(x, y, rgb);
        }
    }
    img
}

/// Generates one region: background, placed nuclei, exact ground truth.
///
/// Placement draws centers uniformly and rejects any candidate whose
/// gap-dilated footprint touches an already-claimed pixel; the total
/// rejection budget is `10 · nucleus_count`, after which the requested
/// density is deemed unsatisfiable.
pub fn generate_region(
    spec: &SyntheticRegionSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(RgbImage, GroundTruth)> {
    spec.validate()?;
    let n = spec.image_px;
    let mut image = background_image(spec, rng);
    let mut truth = GroundTruth::default();
    if spec.nucleus_count == 0 {
        return Ok((image, truth));
    }

    let area_dist = LogNormal::new(spec.area_median_um2.ln(), spec.area_sigma_log)
        .map_err(|e| Error::Config(format!("area distribution: {e}")))?;
    // Claimed-pixel mask; conservative dilation covers the inter-nucleus gap
    // plus half a pixel diagonal so subsampled rasters can never touch.
    let mut claimed = vec![false; n * n];
    let safety = spec.min_gap_px / 2.0 + 0.71;
    let mut attempts_left = 10 * spec.nucleus_count;

    for id in 0..spec.nucleus_count as u64 {
        // Draw the shape first so every placement attempt retries only the
        // position; the area stream stays aligned across retries.
        let area_um2 = area_dist
            .sample(rng)
            .clamp(spec.area_min_um2, spec.area_max_um2);
        let area_px = area_um2 / UM2_PER_PX;
        let ecc = rng.random_range(spec.ecc_min..=spec.ecc_max);
        let a = (area_px * ecc / std::f64::consts::PI).sqrt();
        let b = a / ecc;
        let theta = rng.random_range(0.0..std::f64::consts::PI);

        let margin = a + safety + 1.0;
        if 2.0 * margin >= n as f64 {
            return Err(Error::Config(format!(
                "nucleus of {area_um2:.1} µm² cannot fit a {n} px region"
            )));
        }
        let placed = loop {
            if attempts_left == 0 {
                return Err(Error::Data(format!(
                    "nucleus placement failed: placed {id} of {} within {} attempts",
                    spec.nucleus_count,
                    10 * spec.nucleus_count
                )));
            }
            attempts_left -= 1;
            let cx = rng.random_range(margin..n as f64 - margin);
            let cy = rng.random_range(margin..n as f64 - margin);
            let ell = Ellipse::new(cx, cy, a, b, theta);
            let guard = ell.dilated(safety);
            let (x0, y0, x1, y1) = guard.bbox(n);
            let mut free = true;
            'scan: for py in y0..=y1 {
                for px in x0..=x1 {
                    if guard.contains(px as f64 + 0.5, py as f64 + 0.5) && claimed[py * n + px] {
                        free = false;
                        break 'scan;
                    }
                }
            }
            if free {
                for py in y0..=y1 {
                    for px in x0..=x1 {
                        if guard.contains(px as f64 + 0.5, py as f64 + 0.5) {
                            claimed[py * n + px] = true;
                        }
                    }
                }
                break ell;
            }
        };

        // Render with anti-aliasing and accumulate the rasterized area.
        let mut color = [0.0f32; 3];
        for (out, &base) in color.iter_mut().zip(&spec.nucleus_color) {
            *out = (base as f64 + rng.random_range(-spec.nucleus_jitter..=spec.nucleus_jitter))
                .clamp(0.0, 1.0) as f32;
        }
        let (x0, y0, x1, y1) = placed.bbox(n);
        let mut raster_px = 0.0f64;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let c = placed.coverage(px, py);
                if c > 0.0 {
                    raster_px += c;
                    let bg = image.get(px, py);
                    let mut rgb = [0.0f32; 3];
                    for ch in 0..3 {
                        rgb[ch] = bg[ch] * (1.0 - c as f32) + color[ch] * c as f32;
                    }
                    image.set(px, py, rgb);
                }
            }
        }

        truth.nuclei.push(Nucleus {
            id,
            cx_px: placed.cx,
            cy_px: placed.cy,
            area_um2,
            area_px: raster_px,
            sampled: false,
            semi_major_px: a,
            semi_minor_px: b,
            orientation_rad: theta,
        });
    }
    Ok((image, truth))
}

/// Marks `n` nuclei by systematic random sampling: the image is partitioned
/// into ⌈√n⌉² equal cells on a torus with one random global offset; each
/// round selects, per non-exhausted cell in row-major order, the unselected
/// nucleus nearest the cell center, until `n` are marked.
pub fn systematic_random_sample(
    truth: &mut GroundTruth,
    image_px: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if n > truth.nuclei.len() {
        return Err(Error::Data(format!(
            "cannot sample {n} of {} nuclei",
            truth.nuclei.len()
        )));
    }
    for nucleus in truth.nuclei.iter_mut() {
        nucleus.sampled = false;
    }
    if n == 0 {
        return Ok(());
    }
    let g = (n as f64).sqrt().ceil() as usize;
    let cell = image_px as f64 / g as f64;
    let ox = rng.random_range(0.0..cell);
    let oy = rng.random_range(0.0..cell);
    let span = image_px as f64;

    // Cell index on the torus.
    let cell_of = |x: f64, y: f64| -> usize {
        let cx = (((x - ox).rem_euclid(span)) / cell) as usize;
        let cy = (((y - oy).rem_euclid(span)) / cell) as usize;
        cy.min(g - 1) * g + cx.min(g - 1)
    };
    // Toroidal distance to the center of a cell.
    let dist2_to_center = |x: f64, y: f64, idx: usize| -> f64 {
        let ccx = (ox + ((idx % g) as f64 + 0.5) * cell).rem_euclid(span);
        let ccy = (oy + ((idx / g) as f64 + 0.5) * cell).rem_euclid(span);
        let dx = (x - ccx).abs().min(span - (x - ccx).abs());
        let dy = (y - ccy).abs().min(span - (y - ccy).abs());
        dx * dx + dy * dy
    };

    let mut by_cell: Vec<Vec<usize>> = vec![Vec::new(); g * g];
    for (i, nucleus) in truth.nuclei.iter().enumerate() {
        by_cell[cell_of(nucleus.cx_px, nucleus.cy_px)].push(i);
    }
    // Within each cell, order by distance to the cell center (ties by id).
    for (idx, members) in by_cell.iter_mut().enumerate() {
        members.sort_by(|&a, &b| {
            let da = dist2_to_center(truth.nuclei[a].cx_px, truth.nuclei[a].cy_px, idx);
            let db = dist2_to_center(truth.nuclei[b].cx_px, truth.nuclei[b].cy_px, idx);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
    }
    let mut selected = 0usize;
    let mut round = 0usize;
    while selected < n {
        let mut any = false;
        for members in &by_cell {
            if let Some(&idx) = members.get(round) {
                truth.nuclei[idx].sampled = true;
                selected += 1;
                any = true;
                if selected == n {
                    return Ok(());
                }
            }
        }
        debug_assert!(any, "ran out of nuclei before reaching n");
        if !any {
            break;
        }
        round += 1;
    }
    Ok(())
}

/// Cohort subsets: training, validation, test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    A1,
    A2,
    B,
}

impl Subset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Subset::A1 => "A1",
            Subset::A2 => "A2",
            Subset::B => "B",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A1" => Ok(Subset::A1),
            "A2" => Ok(Subset::A2),
            "B" => Ok(Subset::B),
            other => Err(Error::Data(format!("unknown subset '{other}'"))),
        }
    }
}

/// Subset sizes after scaling the 14/7/18 split by `factor`.
///
/// The total is `round(39·factor)`; each subset gets the floor of its scaled
/// quota and leftover regions go to the largest fractional remainders
/// (ties resolved in A1, A2, B order). Factor 1 gives exactly 14/7/18.
pub fn split_sizes(factor: f64) -> Result<[usize; 3]> {
    if !factor.is_finite() || factor <= 0.0 {
        return Err(Error::Config(format!(
            "cohort factor must be > 0, got {factor}"
        )));
    }
    let quotas = [14.0 * factor, 7.0 * factor, 18.0 * factor];
    let total = (39.0 * factor).round() as usize;
    let mut sizes = [0usize; 3];
    let mut rema: Vec<(f64, usize)> = Vec::with_capacity(3);
    for (i, q) in quotas.iter().enumerate() {
        sizes[i] = q.floor() as usize;
        rema.push((q - q.floor(), i));
    }
    let assigned: usize = sizes.iter().sum();
    if total < assigned {
        return Err(Error::Config(format!("cohort factor {factor} too small")));
    }
    // Largest remainder first; ties keep A1 < A2 < B order.
    rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in 0..(total - assigned) {
        sizes[rema[k % 3].1] += 1;
    }
    if sizes.contains(&0) {
        return Err(Error::Config(format!(
            "cohort factor {factor} leaves an empty subset ({sizes:?})"
        )));
    }
    Ok(sizes)
}

/// One planned region: identity, subset, and the seed that generates it.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPlan {
    pub region_id: String,
    pub subset: Subset,
    pub seed: u64,
}

/// Plans a cohort: region ids, subsets, and per-region seeds derived from the
/// global seed. Generation itself is per-region via [`generate_region`] so
/// callers control memory.
pub fn plan_cohort(factor: f64, global_seed: u64) -> Result<Vec<RegionPlan>> {
    let sizes = split_sizes(factor)?;
    let mut plans = Vec::new();
    let mut index = 0u64;
    for (subset, &count) in [Subset::A1, Subset::A2, Subset::B].iter().zip(&sizes) {
        for k in 0..count {
            let seed = {
                use rand::RngCore;
                derive_rng(global_seed, &[stream::SYNTH, index]).next_u64()
            };
            plans.push(RegionPlan {
                region_id: format!("{}-{:02}", subset.as_str(), k + 1),
                subset: *subset,
                seed,
            });
            index += 1;
        }
    }
    Ok(plans)
}

/// A fully generated cohort region.
#[derive(Debug, Clone)]
pub struct CohortRegion {
    pub plan: RegionPlan,
    pub image: RgbImage,
    pub truth: GroundTruth,
}

/// Generates one planned region, including its systematic sample of
/// `sample_n` nuclei.
pub fn generate_planned_region(
    plan: &RegionPlan,
    spec: &SyntheticRegionSpec,
    sample_n: usize,
) -> Result<CohortRegion> {
    let mut gen_rng = derive_rng(plan.seed, &[stream::SYNTH]);
    let (image, mut truth) = generate_region(spec, &mut gen_rng)?;
    let mut sample_rng = derive_rng(plan.seed, &[stream::SAMPLING]);
    systematic_random_sample(&mut truth, spec.image_px, sample_n, &mut sample_rng)?;
    Ok(CohortRegion {
        plan: plan.clone(),
        image,
        truth,
    })
}

/// Generates an entire cohort in memory (suitable for scaled-down profiles;
/// full-scale callers should iterate [`plan_cohort`] themselves).
pub fn build_cohort(
    spec: &SyntheticRegionSpec,
    factor: f64,
    sample_n: usize,
    global_seed: u64,
) -> Result<Vec<CohortRegion>> {
    plan_cohort(factor, global_seed)?
        .iter()
        .map(|plan| generate_planned_region(plan, spec, sample_n))
        .collect()
}

// ---------------------------------------------------------------------------
// CSV interfaces
// ---------------------------------------------------------------------------

/// Writes the ground-truth annotation CSV:
/// `region_id, nucleus_id, x_px, y_px, area_um2, area_px, sampled`.
pub fn write_truth_csv(path: &Path, region_id: &str, truth: &GroundTruth) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        file,
        "region_id,nucleus_id,x_px,y_px,area_um2,area_px,sampled"
    )?;
    for nuc in &truth.nuclei {
        writeln!(
            file,
            "{},{},{:.3},{:.3},{:.6},{:.3},{}",
            region_id, nuc.id, nuc.cx_px, nuc.cy_px, nuc.area_um2, nuc.area_px, nuc.sampled as u8
        )?;
    }
    file.flush()?;
    Ok(())
}

/// Reads an annotation CSV back into a [`GroundTruth`].
pub fn read_truth_csv(path: &Path) -> Result<(String, GroundTruth)> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut truth = GroundTruth::default();
    let mut region_id = String::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        if record.len() < 7 {
            return Err(Error::Data(format!(
                "{}: expected 7 columns, got {}",
                path.display(),
                record.len()
            )));
        }
        region_id = record[0].to_string();
        truth.nuclei.push(Nucleus {
            id: parse_field(&record[1], path)?,
            cx_px: parse_field(&record[2], path)?,
            cy_px: parse_field(&record[3], path)?,
            area_um2: parse_field(&record[4], path)?,
            area_px: parse_field(&record[5], path)?,
            sampled: &record[6] == "1",
            semi_major_px: 0.0,
            semi_minor_px: 0.0,
            orientation_rad: 0.0,
        });
    }
    Ok((region_id, truth))
}

/// Writes the cohort manifest CSV: `region_id, subset, seed`.
pub fn write_cohort_manifest(path: &Path, plans: &[RegionPlan]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "region_id,subset,seed")?;
    for plan in plans {
        writeln!(
            file,
            "{},{},{}",
            plan.region_id,
            plan.subset.as_str(),
            plan.seed
        )?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a cohort manifest CSV.
pub fn read_cohort_manifest(path: &Path) -> Result<Vec<RegionPlan>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut plans = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        if record.len() < 3 {
            return Err(Error::Data(format!(
                "{}: expected 3 columns, got {}",
                path.display(),
                record.len()
            )));
        }
        plans.push(RegionPlan {
            region_id: record[0].to_string(),
            subset: Subset::parse(&record[1])?,
            seed: parse_field(&record[2], path)?,
        });
    }
    Ok(plans)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

fn parse_field<T: std::str::FromStr>(s: &str, path: &Path) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Data(format!("{}: bad field '{s}'", path.display())))
}
