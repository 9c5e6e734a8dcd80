//! Dense model application, nucleus detection, and operating-point search.
//!
//! The fully convolutional network natively yields one output per 16 px
//! (four poolings). Finer strides (8 or 4 px) are realized by shift-and-
//! stitch: the network runs on copies of the image shifted by every offset
//! in `{0..16/s−1}² · s` and the outputs interleave into one grid. Nuclei
//! are thresholded local minima of the background-probability channel;
//! their areas come from the renormalized foreground probabilities.

use std::path::Path;

use crate::binning::AreaBinning;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkParams};
use crate::tensor::{Scalar, Tensor};
use crate::weights;

/// Minimum foreground probability mass required to measure a detection.
const MIN_FOREGROUND_MASS: f64 = 1e-6;

/// Per-location class probabilities on a regular grid over a source image.
/// Channel `num_classes − 1` is the background class. Grid position
/// `(row, col)` corresponds to image pixel
/// `(col · stride + origin, row · stride + origin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap<T: Scalar> {
    probs: Tensor<T>,
    stride_px: usize,
    origin_px: usize,
}

impl<T: Scalar> ProbabilityMap<T> {
    pub fn new(probs: Tensor<T>, stride_px: usize, origin_px: usize) -> Result<Self> {
        if probs.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "probability map must be [K, gh, gw], got {:?}",
                probs.shape()
            )));
        }
        if stride_px == 0 {
            return Err(Error::Config("map stride must be positive".into()));
        }
        Ok(ProbabilityMap {
            probs,
            stride_px,
            origin_px,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn grid_height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn grid_width(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn stride_px(&self) -> usize {
        self.stride_px
    }

    pub fn origin_px(&self) -> usize {
        self.origin_px
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.probs
    }

    /// Image-pixel coordinates of a grid position, `(x, y)`.
    pub fn center_px(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col * self.stride_px + self.origin_px) as f64,
            (row * self.stride_px + self.origin_px) as f64,
        )
    }

    /// The full probability vector at a grid position.
    pub fn vector(&self, row: usize, col: usize) -> Vec<f64> {
        let (k, gh, gw) = self.dims();
        debug_assert!(row < gh && col < gw);
        let n = gh * gw;
        let data = self.probs.as_slice();
        (0..k)
            .map(|c| data[c * n + row * gw + col].to_f64())
            .collect()
    }

    /// Background probability at a grid position.
    pub fn background(&self, row: usize, col: usize) -> f64 {
        let (k, gh, gw) = self.dims();
        debug_assert!(row < gh && col < gw);
        self.probs.as_slice()[(k - 1) * gh * gw + row * gw + col].to_f64()
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.probs.shape();
        (s[0], s[1], s[2])
    }

    /// Checks that every probability vector sums to 1 within 1e-5.
    pub fn validate(&self) -> Result<()> {
        let (_, gh, gw) = self.dims();
        for row in 0..gh {
            for col in 0..gw {
                let sum: f64 = self.vector(row, col).iter().sum();
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(Error::Numeric(format!(
                        "probability vector at ({row}, {col}) sums to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Detector operating point: background-probability threshold and minimum
/// separation between accepted detections.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub tau: f64,
    pub d_min_px: f64,
}

impl OperatingPoint {
    pub fn new(tau: f64, d_min_px: f64) -> Result<Self> {
        if tau.is_nan() || tau <= 0.0 || tau >= 1.0 {
            return Err(Error::Config(format!("threshold {tau} must be in (0, 1)")));
        }
        if d_min_px.is_nan() || d_min_px <= 0.0 {
            return Err(Error::Config(format!(
                "minimum separation {d_min_px} must be positive"
            )));
        }
        Ok(OperatingPoint { tau, d_min_px })
    }
}

/// Default minimum separation: the radius of the smallest in-range nucleus
/// (√(16.6/0.0625/π) ≈ 9.2 px), rounded down.
pub const DEFAULT_D_MIN_PX: f64 = 9.0;

/// Default threshold sweep grid: 0.05 to 0.95 in steps of 0.05.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

/// A detection still on the map grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDetection {
    pub row: usize,
    pub col: usize,
    pub p_background: f64,
}

/// A measured detection in image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub x_px: f64,
    pub y_px: f64,
    pub area_um2: f64,
    pub p_background: f64,
}

/// Measurement outcome: measured detections plus the number dropped for
/// having practically no foreground probability mass.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredDetections {
    pub detections: Vec<Detection>,
    pub dropped_low_foreground: usize,
}

/// Extracts a `[3, h, w]` crop of a `[3, H, W]` tensor at `(y0, x0)`.
fn crop3<T: Scalar>(image: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let shape = image.shape();
    let (ch, full_h, full_w) = (shape[0], shape[1], shape[2]);
    debug_assert!(y0 + h <= full_h && x0 + w <= full_w);
    let src = image.as_slice();
    let mut data = Vec::with_capacity(ch * h * w);
    for c in 0..ch {
        for y in 0..h {
            let start = (c * full_h + y0 + y) * full_w + x0;
            data.extend_from_slice(&src[start..start + w]);
        }
    }
    Tensor::from_vec(&[ch, h, w], data).unwrap()
}

/// Runs the fully convolutional model densely over an image at the requested
/// stride (16, 8, or 4 px).
///
/// The pooled architecture's native output stride is 16; finer grids
/// interleave the shifted sub-lattices (shift-and-stitch with offsets in
/// `{0..16/stride−1}² · stride`). Each grid vector is produced by evaluating
/// the converted network on that position's own patch-sized crop: the patch
/// model's convolutions zero-pad at the crop border, so evaluating crops
/// individually — rather than convolving the whole image once, which would
/// substitute real neighboring pixels for that padding — is what keeps every
/// grid vector exactly equal to the patch model at the corresponding center.
pub fn dense_inference<T: Scalar>(
    network: &Network,
    dense_params: &NetworkParams<T>,
    image: &Tensor<T>,
    stride_px: usize,
) -> Result<ProbabilityMap<T>> {
    if !matches!(stride_px, 16 | 8 | 4) {
        return Err(Error::Config(format!(
            "stride {stride_px} not in {{16, 8, 4}}"
        )));
    }
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!(
            "dense input must be [3, H, W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let p = network.config().patch_px;
    if h < p || w < p {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than patch size {p}"
        )));
    }
    network.validate_dense_params(dense_params)?;

    let k = network.config().num_classes;
    let gh = (h - p) / stride_px + 1;
    let gw = (w - p) / stride_px + 1;

    use rayon::prelude::*;
    let rows: Vec<Result<Vec<T>>> = (0..gh)
        .into_par_iter()
        .map(|row| {
            let mut line = vec![T::ZERO; k * gw];
            for col in 0..gw {
                let crop = crop3(image, row * stride_px, col * stride_px, p, p);
                let probs = network.fcn_forward(dense_params, &crop)?;
                debug_assert_eq!(probs.shape(), [k, 1, 1]);
                for c in 0..k {
                    line[c * gw + col] = probs.as_slice()[c];
                }
            }
            Ok(line)
        })
        .collect();

    let mut out = Tensor::zeros(&[k, gh, gw]);
    let dst = out.as_mut_slice();
    for (row, line) in rows.into_iter().enumerate() {
        let line = line?;
        for c in 0..k {
            for col in 0..gw {
                dst[(c * gh + row) * gw + col] = line[c * gw + col];
            }
        }
    }

    ProbabilityMap::new(out, stride_px, p / 2)
}

/// Finds nuclei as local minima of the background probability below `τ`.
///
/// Candidates are grid points whose background probability is below `τ` and
/// no greater than any of their existing 8-neighbors. They are processed in
/// ascending background probability (ties by row, then column); a candidate
/// within `d_min` px of an already accepted one is suppressed.
pub fn detect_nuclei<T: Scalar>(
    map: &ProbabilityMap<T>,
    op: &OperatingPoint,
) -> Vec<GridDetection> {
    let (gh, gw) = (map.grid_height(), map.grid_width());
    let mut candidates = Vec::new();
    for row in 0..gh {
        for col in 0..gw {
            let bg = map.background(row, col);
            if bg >= op.tau {
                continue;
            }
            let mut is_minimum = true;
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (row as i64 + dr, col as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= gh as i64 || nc >= gw as i64 {
                        continue;
                    }
                    if bg > map.background(nr as usize, nc as usize) {
                        is_minimum = false;
                        break 'scan;
                    }
                }
            }
            if is_minimum {
                candidates.push(GridDetection {
                    row,
                    col,
                    p_background: bg,
                });
            }
        }
    }

    candidates.sort_by(|a, b| {
        a.p_background
            .total_cmp(&b.p_background)
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });

    let d2 = op.d_min_px * op.d_min_px;
    let mut accepted: Vec<GridDetection> = Vec::new();
    for cand in candidates {
        let (x, y) = map.center_px(cand.row, cand.col);
        let clear = accepted.iter().all(|a| {
            let (ax, ay) = map.center_px(a.row, a.col);
            (x - ax).powi(2) + (y - ay).powi(2) >= d2
        });
        if clear {
            accepted.push(cand);
        }
    }
    accepted
}

/// Measures the nuclear area at each detection: the background class is
/// removed, the remaining bin probabilities renormalized, and the area
/// reconstructed from them. Detections with foreground mass below 1e-6 are
/// dropped and counted.
pub fn measure_at_detections<T: Scalar>(
    map: &ProbabilityMap<T>,
    detections: &[GridDetection],
    binning: &AreaBinning,
) -> Result<MeasuredDetections> {
    if map.num_classes() != binning.n_bins() + 1 {
        return Err(Error::Shape(format!(
            "{}-class map incompatible with {} bins + background",
            map.num_classes(),
            binning.n_bins()
        )));
    }
    let mut measured = Vec::with_capacity(detections.len());
    let mut dropped = 0usize;
    for det in detections {
        let probs = map.vector(det.row, det.col);
        let fg_mass: f64 = probs[..binning.n_bins()].iter().sum();
        if fg_mass < MIN_FOREGROUND_MASS {
            dropped += 1;
            continue;
        }
        let area_um2 = binning.reconstruct_area_foreground(&probs)?;
        let (x_px, y_px) = map.center_px(det.row, det.col);
        measured.push(Detection {
            x_px,
            y_px,
            area_um2,
            p_background: det.p_background,
        });
    }
    Ok(MeasuredDetections {
        detections: measured,
        dropped_low_foreground: dropped,
    })
}

/// One row of the threshold sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub mean_abs_error_um2: f64,
}

/// Result of the operating-point sweep: the chosen point plus the full
/// sweep curve.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub operating_point: OperatingPoint,
    pub sweep: Vec<SweepRow>,
}

/// Chooses the threshold minimizing the mean absolute MNA error over
/// validation regions, given each region's probability map and reference
/// MNA. Regions with zero measurable detections contribute a penalty equal
/// to their reference MNA; ties break toward the smaller threshold.
pub fn optimize_operating_point<T: Scalar>(
    regions: &[(ProbabilityMap<T>, f64)],
    tau_grid: &[f64],
    d_min_px: f64,
    binning: &AreaBinning,
) -> Result<SweepOutcome> {
    if regions.is_empty() {
        return Err(Error::Data("operating-point sweep needs ≥ 1 region".into()));
    }
    if tau_grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    let mut taus = tau_grid.to_vec();
    taus.sort_by(f64::total_cmp);

    let mut sweep = Vec::with_capacity(taus.len());
    let mut best: Option<(f64, f64)> = None; // (tau, error)
    let mut any_detection = false;
    for &tau in &taus {
        let op = OperatingPoint::new(tau, d_min_px)?;
        let mut total_err = 0.0f64;
        for (map, reference_mna) in regions {
            let grid_dets = detect_nuclei(map, &op);
            let measured = measure_at_detections(map, &grid_dets, binning)?;
            if measured.detections.is_empty() {
                total_err += reference_mna;
            } else {
                any_detection = true;
                let mna: f64 = measured.detections.iter().map(|d| d.area_um2).sum::<f64>()
                    / measured.detections.len() as f64;
                total_err += (mna - reference_mna).abs();
            }
        }
        let mean_err = total_err / regions.len() as f64;
        sweep.push(SweepRow {
            tau,
            mean_abs_error_um2: mean_err,
        });
        // Strict comparison on an ascending grid keeps the smallest tau.
        if best.is_none_or(|(_, e)| mean_err < e) {
            best = Some((tau, mean_err));
        }
    }
    if !any_detection {
        return Err(Error::Data(
            "no threshold in the grid produced any detection in any region".into(),
        ));
    }
    let (tau, _) = best.unwrap();
    Ok(SweepOutcome {
        operating_point: OperatingPoint::new(tau, d_min_px)?,
        sweep,
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const MAP_TENSOR_NAME: &str = "probabilities";
const GEOMETRY_TENSOR_NAME: &str = "geometry";

/// Saves a probability map in the tensor container, with a geometry record
/// holding `[stride_px, origin_px]`.
pub fn save_probability_map(path: &Path, map: &ProbabilityMap<f32>) -> Result<()> {
    let geometry = Tensor::from_vec(&[2], vec![map.stride_px() as f32, map.origin_px() as f32])?;
    weights::save_tensors(
        path,
        &[
            (MAP_TENSOR_NAME.to_string(), map.probs.clone()),
            (GEOMETRY_TENSOR_NAME.to_string(), geometry),
        ],
    )
}

/// Loads a probability map saved by [`save_probability_map`].
pub fn load_probability_map(path: &Path) -> Result<ProbabilityMap<f32>> {
    let tensors = weights::load_tensors(path)?;
    let mut probs = None;
    let mut geometry = None;
    for (name, tensor) in tensors {
        match name.as_str() {
            MAP_TENSOR_NAME => probs = Some(tensor),
            GEOMETRY_TENSOR_NAME => geometry = Some(tensor),
            other => {
                return Err(Error::WeightsShapeMismatch(format!(
                    "unexpected record {other:?} in probability map file"
                )))
            }
        }
    }
    let probs = probs.ok_or_else(|| {
        Error::WeightsShapeMismatch("probability map file lacks a probabilities record".into())
    })?;
    let geometry = geometry.ok_or_else(|| {
        Error::WeightsShapeMismatch("probability map file lacks a geometry record".into())
    })?;
    if geometry.shape() != [2] {
        return Err(Error::WeightsShapeMismatch(format!(
            "geometry record must have shape [2], got {:?}",
            geometry.shape()
        )));
    }
    let stride = geometry.as_slice()[0];
    let origin = geometry.as_slice()[1];
    if stride <= 0.0 || stride.fract() != 0.0 || origin < 0.0 || origin.fract() != 0.0 {
        return Err(Error::WeightsShapeMismatch(format!(
            "geometry record [{stride}, {origin}] is not a valid stride/origin pair"
        )));
    }
    ProbabilityMap::new(probs, stride as usize, origin as usize)
}

// ---------------------------------------------------------------------------
// Detections CSV
// ---------------------------------------------------------------------------

/// One row of a detections CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRow {
    pub region_id: String,
    pub x_px: f64,
    pub y_px: f64,
    pub area_um2: f64,
    pub p_background: f64,
}

/// Writes detections as CSV (`region_id,x_px,y_px,area_um2,p_background`).
pub fn write_detections_csv(path: &Path, rows: &[DetectionRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
    writer
        .write_record(["region_id", "x_px", "y_px", "area_um2", "p_background"])
        .map_err(csv_error)?;
    for row in rows {
        writer
            .write_record([
                row.region_id.clone(),
                format!("{}", row.x_px),
                format!("{}", row.y_px),
                format!("{}", row.area_um2),
                format!("{}", row.p_background),
            ])
            .map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a detections CSV back.
pub fn read_detections_csv(path: &Path) -> Result<Vec<DetectionRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        if record.len() != 5 {
            return Err(Error::Data(format!(
                "detection row has {} fields, expected 5",
                record.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("bad detection field {:?}: {e}", &record[i])))
        };
        rows.push(DetectionRow {
            region_id: record[0].to_string(),
            x_px: num(1)?,
            y_px: num(2)?,
            area_um2: num(3)?,
            p_background: num(4)?,
        });
    }
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}
