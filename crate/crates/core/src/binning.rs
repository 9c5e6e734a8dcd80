//! Area-histogram quantization and probability-weighted reconstruction.
//!
//! Nuclear areas are mapped to one of `n_bins` equal-width histogram bins
//! over [16.6, 151.8] µm²; the classifier predicts a distribution over these
//! bins and the continuous area is reconstructed as the probability-weighted
//! average of the bin centroids. The combined detection model appends one
//! extra background class after the area bins.

use crate::error::{Error, Result};

/// Pixel area of one image pixel at 0.25 µm/pixel resolution.
pub const UM2_PER_PX: f64 = 0.0625;

/// Equal-width histogram binning of nuclear areas.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaBinning {
    a_min: f64,
    a_max: f64,
    n_bins: usize,
}

impl Default for AreaBinning {
    /// The 20-bin quantization over [16.6, 151.8] µm² (bin width 6.76).
    fn default() -> Self {
        AreaBinning::new(16.6, 151.8, 20).unwrap()
    }
}

impl AreaBinning {
    pub fn new(a_min: f64, a_max: f64, n_bins: usize) -> Result<Self> {
        if !(a_min.is_finite() && a_max.is_finite()) || a_min >= a_max {
            return Err(Error::Config(format!(
                "binning range [{a_min}, {a_max}] must be finite with a_min < a_max"
            )));
        }
        if n_bins < 2 {
            return Err(Error::Config(format!(
                "binning needs at least 2 bins, got {n_bins}"
            )));
        }
        Ok(AreaBinning {
            a_min,
            a_max,
            n_bins,
        })
    }

    pub fn a_min(&self) -> f64 {
        self.a_min
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Bin width Δ = (a_max − a_min) / n_bins.
    pub fn width(&self) -> f64 {
        (self.a_max - self.a_min) / self.n_bins as f64
    }

    /// Class index of the background class in the combined model: the area
    /// bins occupy `0..n_bins` and background follows them.
    pub fn background_class(&self) -> usize {
        self.n_bins
    }

    /// Quantizes an area to its bin: `clamp(floor((a − a_min)/Δ), 0, n−1)`.
    ///
    /// Bins are half-open `[lo, hi)` with the final bin closed; out-of-range
    /// areas clamp to the edge bins, making the map total on (0, ∞).
    pub fn quantize(&self, area_um2: f64) -> Result<usize> {
        if !area_um2.is_finite() || area_um2 <= 0.0 {
            return Err(Error::Data(format!(
                "area must be positive and finite, got {area_um2}"
            )));
        }
        let raw = ((area_um2 - self.a_min) / self.width()).floor();
        Ok(raw.clamp(0.0, (self.n_bins - 1) as f64) as usize)
    }

    /// Centroid of bin `i`: `a_min + Δ·(i + 0.5)`.
    pub fn centroid(&self, index: usize) -> Result<f64> {
        if index >= self.n_bins {
            return Err(Error::Data(format!(
                "bin index {index} out of range for {} bins",
                self.n_bins
            )));
        }
        Ok(self.a_min + self.width() * (index as f64 + 0.5))
    }

    /// Reconstructs a continuous area as the probability-weighted average of
    /// bin centroids: `Σ p_i · c_i`.
    ///
    /// `probs` must cover exactly the area bins (length `n_bins`) and sum to
    /// 1 within 1e-6; for the combined model use
    /// [`AreaBinning::reconstruct_area_foreground`] instead.
    pub fn reconstruct_area(&self, probs: &[f64]) -> Result<f64> {
        if probs.len() != self.n_bins {
            return Err(Error::Shape(format!(
                "expected {} bin probabilities, got {}",
                self.n_bins,
                probs.len()
            )));
        }
        let sum: f64 = probs.iter().sum();
        if sum.is_nan() || sum <= 0.0 || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!(
                "bin probabilities must sum to 1 within 1e-6, got {sum}"
            )));
        }
        let mut area = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            area += p * self.centroid(i)?;
        }
        Ok(area)
    }

    /// Combined-model reconstruction: drops the trailing background
    /// probability, renormalizes the `n_bins` foreground probabilities, and
    /// reconstructs from those.
    pub fn reconstruct_area_foreground(&self, probs: &[f64]) -> Result<f64> {
        if probs.len() != self.n_bins + 1 {
            return Err(Error::Shape(format!(
                "expected {} class probabilities (bins + background), got {}",
                self.n_bins + 1,
                probs.len()
            )));
        }
        let fg = &probs[..self.n_bins];
        let sum: f64 = fg.iter().sum();
        if sum.is_nan() || sum <= 0.0 {
            return Err(Error::Numeric(format!(
                "foreground probability mass must be positive, got {sum}"
            )));
        }
        let mut area = 0.0;
        for (i, &p) in fg.iter().enumerate() {
            area += (p / sum) * self.centroid(i)?;
        }
        Ok(area)
    }
}

/// Converts a pixel count to µm² at 0.25 µm/pixel.
pub fn px_to_um2(area_px: f64) -> f64 {
    area_px * UM2_PER_PX
}

/// Where a measurement came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementSource {
    Manual,
    Model,
}

/// One measured nucleus.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaMeasurement {
    pub nucleus_id: u64,
    pub x_px: f64,
    pub y_px: f64,
    pub area_um2: f64,
    pub source: MeasurementSource,
}

/// Per-region summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionStats {
    pub region_id: String,
    pub count: usize,
    pub mna_um2: f64,
}

/// Mean nuclear area over a region's measurements.
pub fn mean_nuclear_area(region_id: &str, measurements: &[AreaMeasurement]) -> Result<RegionStats> {
    if measurements.is_empty() {
        return Err(Error::Data(format!(
            "region {region_id}: cannot compute MNA of zero nuclei"
        )));
    }
    let sum: f64 = measurements.iter().map(|m| m.area_um2).sum();
    Ok(RegionStats {
        region_id: region_id.to_string(),
        count: measurements.len(),
        mna_um2: sum / measurements.len() as f64,
    })
}
