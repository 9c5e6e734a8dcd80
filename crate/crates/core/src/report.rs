//! Agreement statistics (Bland-Altman, coefficient of determination) and
//! report emission as CSV and SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Agreement between paired manual and automatic measurements: the bias
/// `b = mean(automatic − manual)`, the sample standard deviation of the
/// differences, the limits-of-agreement half-width `1.96·sd`, and the r² of
/// an ordinary least-squares fit of automatic on manual.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementStats {
    pub n: usize,
    pub bias_um2: f64,
    pub sd_um2: f64,
    pub half_width_um2: f64,
    pub r_squared: f64,
}

/// Bland-Altman agreement of paired measurements: differences
/// `d_i = automatic_i − manual_i`, bias = mean(d), sd with the n−1
/// denominator, half-width = 1.96·sd. Returns `(bias, sd, half_width)`.
pub fn bland_altman(manual: &[f64], automatic: &[f64]) -> Result<(f64, f64, f64)> {
    check_pairs(manual, automatic, 2)?;
    let n = manual.len();
    let diffs: Vec<f64> = automatic.iter().zip(manual).map(|(a, m)| a - m).collect();
    let bias = diffs.iter().sum::<f64>() / n as f64;
    let ss: f64 = diffs.iter().map(|d| (d - bias).powi(2)).sum();
    let sd = (ss / (n - 1) as f64).sqrt();
    Ok((bias, sd, 1.96 * sd))
}

/// Coefficient of determination of an ordinary least-squares fit of
/// `automatic` on `manual`: r² = 1 − SS_res/SS_tot.
pub fn r_squared(manual: &[f64], automatic: &[f64]) -> Result<f64> {
    check_pairs(manual, automatic, 3)?;
    let n = manual.len() as f64;
    let mean_m = manual.iter().sum::<f64>() / n;
    let mean_a = automatic.iter().sum::<f64>() / n;
    let mut var_m = 0.0;
    let mut cov = 0.0;
    let mut ss_tot = 0.0;
    for (&m, &a) in manual.iter().zip(automatic) {
        var_m += (m - mean_m).powi(2);
        cov += (m - mean_m) * (a - mean_a);
        ss_tot += (a - mean_a).powi(2);
    }
    if var_m <= 0.0 {
        return Err(Error::Data(
            "degenerate fit: manual values are all equal".into(),
        ));
    }
    if ss_tot <= 0.0 {
        return Err(Error::Data(
            "degenerate fit: automatic values are all equal".into(),
        ));
    }
    let slope = cov / var_m;
    let intercept = mean_a - slope * mean_m;
    let ss_res: f64 = manual
        .iter()
        .zip(automatic)
        .map(|(&m, &a)| (a - (intercept + slope * m)).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Computes the full agreement record for one experiment.
pub fn agreement_stats(manual: &[f64], automatic: &[f64]) -> Result<AgreementStats> {
    let (bias, sd, half_width) = bland_altman(manual, automatic)?;
    let r2 = r_squared(manual, automatic)?;
    Ok(AgreementStats {
        n: manual.len(),
        bias_um2: bias,
        sd_um2: sd,
        half_width_um2: half_width,
        r_squared: r2,
    })
}

fn check_pairs(manual: &[f64], automatic: &[f64], min_n: usize) -> Result<()> {
    if manual.len() != automatic.len() {
        return Err(Error::Data(format!(
            "{} manual vs {} automatic measurements",
            manual.len(),
            automatic.len()
        )));
    }
    if manual.len() < min_n {
        return Err(Error::Data(format!(
            "need at least {min_n} pairs, got {}",
            manual.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Published reference results
// ---------------------------------------------------------------------------

/// Label attached to every published-reference row in reports.
pub const REFERENCE_LABEL: &str = "paper reference (not reproducible without clinical data)";

/// One published reference result (bias ± limits-of-agreement half-width,
/// and r², all µm²).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub name: &'static str,
    pub bias_um2: f64,
    pub half_width_um2: f64,
    pub r_squared: f64,
}

/// The published results, fixed for side-by-side reporting.
pub const PAPER_REFERENCE: [ReferenceEntry; 4] = [
    ReferenceEntry {
        name: "reference-individual-nuclei",
        bias_um2: -2.19,
        half_width_um2: 18.85,
        r_squared: 0.87,
    },
    ReferenceEntry {
        name: "reference-known-location-mna",
        bias_um2: -2.18,
        half_width_um2: 3.32,
        r_squared: 0.99,
    },
    ReferenceEntry {
        name: "reference-combined-mna",
        bias_um2: -2.98,
        half_width_um2: 9.26,
        r_squared: 0.89,
    },
    ReferenceEntry {
        name: "reference-segmentation-mna",
        bias_um2: -1.20,
        half_width_um2: 13.50,
        r_squared: 0.77,
    },
];

// ---------------------------------------------------------------------------
// Agreement CSV
// ---------------------------------------------------------------------------

/// One row of the agreement report. Reference rows have no `n`/`sd` (the
/// publication does not break them out) and carry the reference label.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub n: Option<usize>,
    pub bias_um2: f64,
    pub sd_um2: Option<f64>,
    pub half_width_um2: f64,
    pub r_squared: f64,
    pub reference: bool,
    pub note: String,
}

/// Writes the agreement report: one row per experiment followed by the
/// published reference rows flagged `reference=1`.
pub fn emit_agreement_report(experiments: &[(String, AgreementStats)], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
    writer
        .write_record([
            "name",
            "n",
            "bias_um2",
            "sd_um2",
            "half_width_um2",
            "r2",
            "reference",
            "note",
        ])
        .map_err(csv_error)?;
    for (name, stats) in experiments {
        writer
            .write_record([
                name.clone(),
                stats.n.to_string(),
                format!("{}", stats.bias_um2),
                format!("{}", stats.sd_um2),
                format!("{}", stats.half_width_um2),
                format!("{}", stats.r_squared),
                "0".into(),
                String::new(),
            ])
            .map_err(csv_error)?;
    }
    for entry in &PAPER_REFERENCE {
        writer
            .write_record([
                entry.name.to_string(),
                String::new(),
                format!("{}", entry.bias_um2),
                String::new(),
                format!("{}", entry.half_width_um2),
                format!("{}", entry.r_squared),
                "1".into(),
                REFERENCE_LABEL.to_string(),
            ])
            .map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads an agreement report back.
pub fn read_agreement_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        if record.len() != 8 {
            return Err(Error::Data(format!(
                "agreement row has {} fields, expected 8",
                record.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("bad agreement field {:?}: {e}", &record[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if record[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        rows.push(ReportRow {
            name: record[0].to_string(),
            n: if record[1].is_empty() {
                None
            } else {
                Some(
                    record[1]
                        .parse::<usize>()
                        .map_err(|e| Error::Data(format!("bad n field {:?}: {e}", &record[1])))?,
                )
            },
            bias_um2: num(2)?,
            sd_um2: opt(3)?,
            half_width_um2: num(4)?,
            r_squared: num(5)?,
            reference: &record[6] == "1",
            note: record[7].to_string(),
        });
    }
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

// ---------------------------------------------------------------------------
// SVG plots
// ---------------------------------------------------------------------------

const SVG_WIDTH: f64 = 640.0;
const SVG_HEIGHT: f64 = 480.0;
const PLOT_LEFT: f64 = 70.0;
const PLOT_RIGHT: f64 = 620.0;
const PLOT_TOP: f64 = 20.0;
const PLOT_BOTTOM: f64 = 420.0;

/// A linear data→pixel axis mapping, declared in the SVG root so tests (and
/// tools) can invert it.
#[derive(Debug, Clone, Copy)]
struct Axis {
    min: f64,
    max: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    /// Range padded by 5%, widened to unit span when degenerate.
    fn padded(values: impl Iterator<Item = f64>, px_lo: f64, px_hi: f64) -> Axis {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        let span = hi - lo;
        let pad = if span > 1e-9 { span * 0.05 } else { 0.5 };
        Axis {
            min: lo - pad,
            max: hi + pad,
            px_lo,
            px_hi,
        }
    }

    fn to_px(self, v: f64) -> f64 {
        self.px_lo + (v - self.min) / (self.max - self.min) * (self.px_hi - self.px_lo)
    }
}

fn svg_open(x: Axis, y: Axis, title: &str) -> String {
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\" \
         viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\" font-family=\"sans-serif\" font-size=\"13\" \
         data-x-min=\"{}\" data-x-max=\"{}\" data-x-px-lo=\"{}\" data-x-px-hi=\"{}\" \
         data-y-min=\"{}\" data-y-max=\"{}\" data-y-px-lo=\"{}\" data-y-px-hi=\"{}\">",
        x.min, x.max, x.px_lo, x.px_hi, y.min, y.max, y.px_lo, y.px_hi
    );
    let _ = writeln!(
        s,
        "<rect x=\"{PLOT_LEFT}\" y=\"{PLOT_TOP}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        PLOT_RIGHT - PLOT_LEFT,
        PLOT_BOTTOM - PLOT_TOP
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"14\" text-anchor=\"middle\">{title}</text>",
        (PLOT_LEFT + PLOT_RIGHT) / 2.0
    );
    s
}

fn svg_axes(s: &mut String, x: Axis, y: Axis, x_label: &str, y_label: &str) {
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = x.min + t * (x.max - x.min);
        let xp = x.to_px(xv);
        let _ = writeln!(
            s,
            "<line x1=\"{xp}\" y1=\"{PLOT_BOTTOM}\" x2=\"{xp}\" y2=\"{}\" stroke=\"black\"/>",
            PLOT_BOTTOM + 5.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{xp}\" y=\"{}\" text-anchor=\"middle\">{xv:.1}</text>",
            PLOT_BOTTOM + 20.0
        );
        let yv = y.min + t * (y.max - y.min);
        let yp = y.to_px(yv);
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{yp}\" x2=\"{PLOT_LEFT}\" y2=\"{yp}\" stroke=\"black\"/>",
            PLOT_LEFT - 5.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{yv:.1}</text>",
            PLOT_LEFT - 8.0,
            yp + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>",
        (PLOT_LEFT + PLOT_RIGHT) / 2.0,
        PLOT_BOTTOM + 45.0
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>",
        (PLOT_TOP + PLOT_BOTTOM) / 2.0,
        (PLOT_TOP + PLOT_BOTTOM) / 2.0
    );
}

/// Emits a scatter plot (`<prefix>_scatter.svg`) with the red identity line
/// and a Bland-Altman plot (`<prefix>_bland_altman.svg`) with horizontal
/// lines at the bias and at bias ± half-width. `pairs` are
/// `(manual, automatic)` in µm². Returns the two file paths.
pub fn emit_plots(
    pairs: &[(f64, f64)],
    stats: &AgreementStats,
    prefix: &Path,
) -> Result<(PathBuf, PathBuf)> {
    if pairs.len() < 2 {
        return Err(Error::Data(format!(
            "plots need at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let scatter_path = suffixed(prefix, "_scatter.svg");
    let ba_path = suffixed(prefix, "_bland_altman.svg");

    // Scatter: shared range on both axes so the identity line is a diagonal.
    let axis_vals = pairs.iter().flat_map(|&(m, a)| [m, a]);
    let x = Axis::padded(axis_vals.clone(), PLOT_LEFT, PLOT_RIGHT);
    let y = Axis {
        min: x.min,
        max: x.max,
        px_lo: PLOT_BOTTOM,
        px_hi: PLOT_TOP,
    };
    let mut s = svg_open(x, y, "manual vs automatic measurement");
    svg_axes(&mut s, x, y, "manual area (µm²)", "automatic area (µm²)");
    let _ = writeln!(
        s,
        "<line data-role=\"identity\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"red\"/>",
        x.to_px(x.min),
        y.to_px(x.min),
        x.to_px(x.max),
        y.to_px(x.max)
    );
    for &(m, a) in pairs {
        let _ = writeln!(
            s,
            "<circle data-manual=\"{m}\" data-auto=\"{a}\" cx=\"{}\" cy=\"{}\" r=\"3\" \
             fill=\"steelblue\" fill-opacity=\"0.7\"/>",
            x.to_px(m),
            y.to_px(a)
        );
    }
    s.push_str("</svg>\n");
    std::fs::write(&scatter_path, s)?;

    // Bland-Altman: mean of methods vs difference.
    let means: Vec<f64> = pairs.iter().map(|&(m, a)| (m + a) / 2.0).collect();
    let diffs: Vec<f64> = pairs.iter().map(|&(m, a)| a - m).collect();
    let upper = stats.bias_um2 + stats.half_width_um2;
    let lower = stats.bias_um2 - stats.half_width_um2;
    let x = Axis::padded(means.iter().copied(), PLOT_LEFT, PLOT_RIGHT);
    let y = Axis::padded(
        diffs.iter().copied().chain([lower, upper]),
        PLOT_BOTTOM,
        PLOT_TOP,
    );
    let mut s = svg_open(x, y, "Bland-Altman agreement");
    svg_axes(
        &mut s,
        x,
        y,
        "mean of methods (µm²)",
        "automatic − manual (µm²)",
    );
    for (role, level, dash) in [
        ("bias", stats.bias_um2, "none"),
        ("upper-limit", upper, "6 4"),
        ("lower-limit", lower, "6 4"),
    ] {
        let yp = y.to_px(level);
        let _ = writeln!(
            s,
            "<line data-role=\"{role}\" data-level=\"{level}\" x1=\"{PLOT_LEFT}\" y1=\"{yp}\" \
             x2=\"{PLOT_RIGHT}\" y2=\"{yp}\" stroke=\"black\" stroke-dasharray=\"{dash}\"/>"
        );
    }
    for (&mean, &diff) in means.iter().zip(&diffs) {
        let _ = writeln!(
            s,
            "<circle data-mean=\"{mean}\" data-diff=\"{diff}\" cx=\"{}\" cy=\"{}\" r=\"3\" \
             fill=\"steelblue\" fill-opacity=\"0.7\"/>",
            x.to_px(mean),
            y.to_px(diff)
        );
    }
    s.push_str("</svg>\n");
    std::fs::write(&ba_path, s)?;

    Ok((scatter_path, ba_path))
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(suffix);
    prefix.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, stream};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn identical_lists_have_zero_bias_and_width() {
        let data = [10.0, 25.0, 47.5, 60.0];
        let (b, sd, hw) = bland_altman(&data, &data).unwrap();
        assert_eq!(b, 0.0);
        assert_eq!(sd, 0.0);
        assert_eq!(hw, 0.0);
    }

    #[test]
    fn bland_altman_hand_oracle() {
        let (b, sd, hw) = bland_altman(&[10.0, 20.0, 30.0], &[12.0, 18.0, 33.0]).unwrap();
        assert!((b - 1.0).abs() < 1e-12);
        assert!((sd - 7f64.sqrt()).abs() < 1e-12);
        assert!((hw - 1.96 * 7f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn negating_differences_negates_bias_only() {
        let manual = [10.0, 20.0, 30.0];
        let auto = [12.0, 18.0, 33.0];
        let flipped: Vec<f64> = manual.iter().zip(&auto).map(|(m, a)| m - (a - m)).collect();
        let (b1, sd1, hw1) = bland_altman(&manual, &auto).unwrap();
        let (b2, sd2, hw2) = bland_altman(&manual, &flipped).unwrap();
        assert!((b1 + b2).abs() < 1e-12);
        assert!((sd1 - sd2).abs() < 1e-12);
        assert!((hw1 - hw2).abs() < 1e-12);
    }

    #[test]
    fn pair_preconditions_enforced() {
        assert!(bland_altman(&[1.0], &[1.0]).is_err());
        assert!(bland_altman(&[1.0, 2.0], &[1.0]).is_err());
        assert!(r_squared(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(r_squared(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn perfect_affine_fit_has_unit_r2() {
        let manual = [1.0, 2.0, 3.0, 4.0];
        let auto: Vec<f64> = manual.iter().map(|m| 2.0 * m + 1.0).collect();
        assert!((r_squared(&manual, &auto).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn r_squared_hand_oracle() {
        let r2 = r_squared(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((r2 - 0.25).abs() < 1e-12);
    }

    fn random_pairs(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = derive_rng(seed, &[stream::VALIDATION]);
        let manual: Vec<f64> = (0..n).map(|_| rng.random_range(20.0..120.0)).collect();
        let auto: Vec<f64> = manual
            .iter()
            .map(|m| m * rng.random_range(0.8..1.2) + rng.random_range(-5.0..5.0))
            .collect();
        (manual, auto)
    }

    /// Independent formulation via raw moment sums.
    fn oracle_stats(manual: &[f64], auto: &[f64]) -> (f64, f64, f64) {
        let n = manual.len() as f64;
        let sum_d: f64 = auto.iter().zip(manual).map(|(a, m)| a - m).sum();
        let sum_d2: f64 = auto.iter().zip(manual).map(|(a, m)| (a - m).powi(2)).sum();
        let b = sum_d / n;
        let sd = ((sum_d2 - n * b * b) / (n - 1.0)).sqrt();
        // r² of OLS equals the squared Pearson correlation.
        let (sm, sa): (f64, f64) = (manual.iter().sum(), auto.iter().sum());
        let smm: f64 = manual.iter().map(|m| m * m).sum();
        let saa: f64 = auto.iter().map(|a| a * a).sum();
        let sma: f64 = manual.iter().zip(auto).map(|(m, a)| m * a).sum();
        let r = (n * sma - sm * sa) / ((n * smm - sm * sm).sqrt() * (n * saa - sa * sa).sqrt());
        (b, sd, r * r)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn agrees_with_independent_formulation(seed in 0u64..10_000) {
            let (manual, auto) = random_pairs(seed, 40);
            let stats = agreement_stats(&manual, &auto).unwrap();
            let (b, sd, r2) = oracle_stats(&manual, &auto);
            prop_assert!((stats.bias_um2 - b).abs() < 1e-9);
            prop_assert!((stats.sd_um2 - sd).abs() < 1e-9);
            prop_assert!((stats.half_width_um2 - 1.96 * sd).abs() < 1e-9);
            prop_assert!((stats.r_squared - r2).abs() < 1e-9);
        }

        #[test]
        fn unit_change_scales_bias_not_r2(seed in 0u64..10_000) {
            // µm² → px² multiplies all areas by 16.
            let (manual, auto) = random_pairs(seed, 25);
            let manual_px: Vec<f64> = manual.iter().map(|v| v * 16.0).collect();
            let auto_px: Vec<f64> = auto.iter().map(|v| v * 16.0).collect();
            let um = agreement_stats(&manual, &auto).unwrap();
            let px = agreement_stats(&manual_px, &auto_px).unwrap();
            prop_assert!((px.bias_um2 - 16.0 * um.bias_um2).abs() < 1e-8);
            prop_assert!((px.sd_um2 - 16.0 * um.sd_um2).abs() < 1e-8);
            prop_assert!((px.half_width_um2 - 16.0 * um.half_width_um2).abs() < 1e-8);
            prop_assert!((px.r_squared - um.r_squared).abs() < 1e-12);
        }

        #[test]
        fn r2_invariant_under_affine_rescaling(seed in 0u64..10_000) {
            let (manual, auto) = random_pairs(seed, 25);
            let r2 = r_squared(&manual, &auto).unwrap();
            let manual2: Vec<f64> = manual.iter().map(|v| 3.5 * v - 40.0).collect();
            let auto2: Vec<f64> = auto.iter().map(|v| 0.25 * v + 11.0).collect();
            prop_assert!((r_squared(&manual2, &auto).unwrap() - r2).abs() < 1e-9);
            prop_assert!((r_squared(&manual, &auto2).unwrap() - r2).abs() < 1e-9);
        }
    }

    #[test]
    fn report_includes_reference_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agreement.csv");
        emit_agreement_report(&[], &path).unwrap();
        let rows = read_agreement_report(&path).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.reference));
        assert!(rows.iter().all(|r| r.note == REFERENCE_LABEL));
        let known = rows
            .iter()
            .find(|r| r.name == "reference-known-location-mna")
            .unwrap();
        assert_eq!(known.bias_um2, -2.18);
        assert_eq!(known.half_width_um2, 3.32);
        assert_eq!(known.r_squared, 0.99);
    }

    #[test]
    fn report_round_trips_experiment_stats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agreement.csv");
        let (manual, auto) = random_pairs(17, 30);
        let stats = agreement_stats(&manual, &auto).unwrap();
        emit_agreement_report(&[("known-location-mna".into(), stats.clone())], &path).unwrap();
        let rows = read_agreement_report(&path).unwrap();
        assert_eq!(rows.len(), 5);
        let row = &rows[0];
        assert_eq!(row.name, "known-location-mna");
        assert_eq!(row.n, Some(30));
        assert_eq!(row.bias_um2, stats.bias_um2);
        assert_eq!(row.sd_um2, Some(stats.sd_um2));
        assert_eq!(row.half_width_um2, stats.half_width_um2);
        assert_eq!(row.r_squared, stats.r_squared);
        assert!(!row.reference);
    }

    /// Extracts the value of `name="..."` in the first tag containing
    /// `marker`.
    fn attr_in(svg: &str, marker: &str, name: &str) -> Option<f64> {
        let start = svg.find(marker)?;
        let tag_end = svg[start..].find('>')? + start;
        let tag = &svg[start..tag_end];
        let key = format!("{name}=\"");
        let vs = tag.find(&key)? + key.len();
        let ve = tag[vs..].find('"')? + vs;
        tag[vs..ve].parse().ok()
    }

    #[test]
    fn plots_emit_markers_and_consistent_lines() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = [(30.0, 35.0), (60.0, 58.0)];
        let manual: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let auto: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let stats = AgreementStats {
            n: 2,
            bias_um2: bland_altman(&manual, &auto).unwrap().0,
            sd_um2: bland_altman(&manual, &auto).unwrap().1,
            half_width_um2: bland_altman(&manual, &auto).unwrap().2,
            r_squared: 0.0,
        };
        let (scatter, ba) = emit_plots(&pairs, &stats, &dir.path().join("demo")).unwrap();
        for path in [&scatter, &ba] {
            let svg = std::fs::read_to_string(path).unwrap();
            assert!(svg.starts_with("<?xml"));
            assert!(svg.trim_end().ends_with("</svg>"));
            assert_eq!(svg.matches("<circle").count(), 2);
        }
        let scatter_svg = std::fs::read_to_string(&scatter).unwrap();
        assert!(scatter_svg.contains("data-role=\"identity\""));

        // Parse-back oracle: the bias line's pixel position must match the
        // declared y-axis transform applied to the bias.
        let ba_svg = std::fs::read_to_string(&ba).unwrap();
        let y_min = attr_in(&ba_svg, "<svg", "data-y-min").unwrap();
        let y_max = attr_in(&ba_svg, "<svg", "data-y-max").unwrap();
        let py_lo = attr_in(&ba_svg, "<svg", "data-y-px-lo").unwrap();
        let py_hi = attr_in(&ba_svg, "<svg", "data-y-px-hi").unwrap();
        for (marker, level) in [
            ("data-role=\"bias\"", stats.bias_um2),
            (
                "data-role=\"upper-limit\"",
                stats.bias_um2 + stats.half_width_um2,
            ),
            (
                "data-role=\"lower-limit\"",
                stats.bias_um2 - stats.half_width_um2,
            ),
        ] {
            let y1 = attr_in(&ba_svg, marker, "y1").unwrap();
            let expect = py_lo + (level - y_min) / (y_max - y_min) * (py_hi - py_lo);
            assert!((y1 - expect).abs() < 1e-6, "{marker}: {y1} vs {expect}");
        }
    }

    #[test]
    fn identity_data_collapses_limit_lines() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = [(30.0, 30.0), (60.0, 60.0), (90.0, 90.0)];
        let stats = AgreementStats {
            n: 3,
            bias_um2: 0.0,
            sd_um2: 0.0,
            half_width_um2: 0.0,
            r_squared: 1.0,
        };
        let (_, ba) = emit_plots(&pairs, &stats, &dir.path().join("identity")).unwrap();
        let svg = std::fs::read_to_string(&ba).unwrap();
        let bias_y = attr_in(&svg, "data-role=\"bias\"", "y1").unwrap();
        let up_y = attr_in(&svg, "data-role=\"upper-limit\"", "y1").unwrap();
        let lo_y = attr_in(&svg, "data-role=\"lower-limit\"", "y1").unwrap();
        assert_eq!(bias_y, up_y);
        assert_eq!(bias_y, lo_y);
    }
}
