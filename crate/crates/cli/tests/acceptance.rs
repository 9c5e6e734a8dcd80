//! Acceptance gate: nine pass/fail checks covering gradient correctness,
//! dense-inference equivalence, the binning and augmentation laws, the
//! statistics oracles, the desk-profile end-to-end experiments, output
//! determinism, and dense-inference throughput.
//!
//! One line per criterion is written to stderr. Wall-clock budgets are
//! defined for a 4-core machine and scaled up proportionally on smaller
//! ones; quantitative tolerances are pinned inline.

use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use karyo::augment::{augment_with_draw, draw_augment, extract_patch, AugmentConfig, PatchSample};
use karyo::detect::dense_inference;
use karyo::network::{ArchitectureConfig, Network};
use karyo::ops::{
    conv2d_backward, conv2d_forward, fully_connected_backward, fully_connected_forward,
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, softmax_cross_entropy,
    softmax_cross_entropy_backward,
};
use karyo::report::{bland_altman, r_squared};
use karyo::rng::{derive_rng, stream};
use karyo::synth::{generate_region, Subset, SyntheticRegionSpec};
use karyo::tensor::Tensor;
use karyo::{AreaBinning, Mode};
use karyo_cli::commands::{
    cmd_detect, cmd_measure, cmd_synth, cmd_train, load_cohort, load_params, read_measurements_csv,
    read_mna_csv, TrainMode,
};
use karyo_cli::config::{Profile, RunConfig};
use rand::Rng;

/// Budget multiplier: targets are stated for 4 CPU cores.
fn budget_scale() -> f64 {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    4.0 / (cores.min(4) as f64)
}

/// Writes directly to the stderr file descriptor, bypassing libtest capture
/// so the per-criterion lines are always visible.
fn announce(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn check(&mut self, number: usize, name: &str, outcome: Result<(), String>) {
        match outcome {
            Ok(()) => announce(&format!("criterion {number} ({name}): PASS")),
            Err(reason) => {
                announce(&format!("criterion {number} ({name}): FAIL — {reason}"));
                self.failures.push(format!("criterion {number}: {reason}"));
            }
        }
    }
}

#[test]
fn acceptance_criteria() {
    let mut gate = Gate {
        failures: Vec::new(),
    };

    gate.check(1, "gradient correctness", criterion_gradients());
    gate.check(2, "fcn equivalence", criterion_fcn_equivalence());
    gate.check(3, "binning oracles", criterion_binning());
    gate.check(4, "augmentation law", criterion_augmentation());
    gate.check(5, "statistics oracles", criterion_statistics());

    let pipeline = Pipeline::run();
    gate.check(
        6,
        "known-location measurement",
        pipeline.criterion_measurement(),
    );
    gate.check(7, "combined detection", pipeline.criterion_detection());
    gate.check(8, "determinism", pipeline.criterion_determinism());
    gate.check(9, "dense throughput", pipeline.criterion_throughput());

    assert!(
        gate.failures.is_empty(),
        "acceptance failures:\n{}",
        gate.failures.join("\n")
    );
}

// ---------------------------------------------------------------------------
// criterion 1: finite-difference gradient checks, runtime < 1 min
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(got.abs()).max(1e-6)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = derive_rng(seed, &[stream::INIT]);
    let data = (0..shape.iter().product())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn criterion_gradients() -> Result<(), String> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;

    // Convolution: weighted-sum loss makes dL/doutput the weight map.
    {
        let mut input = random_tensor(&[2, 4, 4], 11);
        let weights = random_tensor(&[3, 2, 3, 3], 12);
        let bias = vec![0.1, -0.2, 0.3];
        let upstream = random_tensor(&[3, 4, 4], 13);
        let (gi, gw, gb) =
            conv2d_backward(&input, &weights, &bias, 1, &upstream).map_err(|e| e.to_string())?;
        let loss = |inp: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]| -> f64 {
            conv2d_forward(inp, w, b, 1)
                .unwrap()
                .as_slice()
                .iter()
                .zip(upstream.as_slice())
                .map(|(o, u)| o * u)
                .sum()
        };
        for idx in 0..input.len() {
            let orig = input.as_slice()[idx];
            input.as_mut_slice()[idx] = orig + FD_STEP;
            let hi = loss(&input, &weights, &bias);
            input.as_mut_slice()[idx] = orig - FD_STEP;
            let lo = loss(&input, &weights, &bias);
            input.as_mut_slice()[idx] = orig;
            worst = worst.max(rel_err(gi.as_slice()[idx], (hi - lo) / (2.0 * FD_STEP)));
        }
        let mut weights = weights;
        for idx in 0..weights.len() {
            let orig = weights.as_slice()[idx];
            weights.as_mut_slice()[idx] = orig + FD_STEP;
            let hi = loss(&input, &weights, &bias);
            weights.as_mut_slice()[idx] = orig - FD_STEP;
            let lo = loss(&input, &weights, &bias);
            weights.as_mut_slice()[idx] = orig;
            worst = worst.max(rel_err(gw.as_slice()[idx], (hi - lo) / (2.0 * FD_STEP)));
        }
        for idx in 0..bias.len() {
            let mut b = bias.clone();
            b[idx] += FD_STEP;
            let hi = loss(&input, &weights, &b);
            b[idx] = bias[idx] - FD_STEP;
            let lo = loss(&input, &weights, &b);
            worst = worst.max(rel_err(gb[idx], (hi - lo) / (2.0 * FD_STEP)));
        }
    }

    // Max-pooling.
    {
        let mut input = random_tensor(&[2, 4, 4], 14);
        let upstream = random_tensor(&[2, 2, 2], 15);
        let (_, argmax) = maxpool2_forward(&input).map_err(|e| e.to_string())?;
        let grad = maxpool2_backward(&[2, 4, 4], &argmax, &upstream).map_err(|e| e.to_string())?;
        for idx in 0..input.len() {
            let orig = input.as_slice()[idx];
            let mut probe = |v: f64| {
                input.as_mut_slice()[idx] = v;
                let (out, _) = maxpool2_forward(&input).unwrap();
                out.as_slice()
                    .iter()
                    .zip(upstream.as_slice())
                    .map(|(o, u)| o * u)
                    .sum::<f64>()
            };
            let hi = probe(orig + FD_STEP);
            let lo = probe(orig - FD_STEP);
            input.as_mut_slice()[idx] = orig;
            worst = worst.max(rel_err(grad.as_slice()[idx], (hi - lo) / (2.0 * FD_STEP)));
        }
    }

    // ReLU (sample points pushed away from the kink).
    {
        let mut input = random_tensor(&[32], 16);
        for v in input.as_mut_slice() {
            if v.abs() < 10.0 * FD_STEP {
                *v = 0.1;
            }
        }
        let upstream = random_tensor(&[32], 17);
        let grad = relu_backward(&input, &upstream).map_err(|e| e.to_string())?;
        for idx in 0..input.len() {
            let orig = input.as_slice()[idx];
            let mut probe = |v: f64| {
                input.as_mut_slice()[idx] = v;
                relu_forward(&input)
                    .as_slice()
                    .iter()
                    .zip(upstream.as_slice())
                    .map(|(o, u)| o * u)
                    .sum::<f64>()
            };
            let hi = probe(orig + FD_STEP);
            let lo = probe(orig - FD_STEP);
            input.as_mut_slice()[idx] = orig;
            worst = worst.max(rel_err(grad.as_slice()[idx], (hi - lo) / (2.0 * FD_STEP)));
        }
    }

    // Fully connected.
    {
        let input: Vec<f64> = random_tensor(&[7], 18).as_slice().to_vec();
        let mut weights = random_tensor(&[5, 7], 19);
        let bias: Vec<f64> = random_tensor(&[5], 20).as_slice().to_vec();
        let upstream: Vec<f64> = random_tensor(&[5], 21).as_slice().to_vec();
        let (gi, gw, _) =
            fully_connected_backward(&input, &weights, &upstream).map_err(|e| e.to_string())?;
        let loss = |x: &[f64], w: &Tensor<f64>| -> f64 {
            fully_connected_forward(x, w, &bias)
                .unwrap()
                .iter()
                .zip(&upstream)
                .map(|(o, u)| o * u)
                .sum()
        };
        for idx in 0..input.len() {
            let mut x = input.clone();
            x[idx] += FD_STEP;
            let hi = loss(&x, &weights);
            x[idx] = input[idx] - FD_STEP;
            let lo = loss(&x, &weights);
            worst = worst.max(rel_err(gi[idx], (hi - lo) / (2.0 * FD_STEP)));
        }
        for idx in 0..weights.len() {
            let orig = weights.as_slice()[idx];
            weights.as_mut_slice()[idx] = orig + FD_STEP;
            let hi = loss(&input, &weights);
            weights.as_mut_slice()[idx] = orig - FD_STEP;
            let lo = loss(&input, &weights);
            weights.as_mut_slice()[idx] = orig;
            worst = worst.max(rel_err(gw.as_slice()[idx], (hi - lo) / (2.0 * FD_STEP)));
        }
    }

    // Softmax cross-entropy.
    {
        let logits: Vec<f64> = random_tensor(&[8], 22).as_slice().to_vec();
        let label = 3;
        let (probs, _) = softmax_cross_entropy(&logits, label).map_err(|e| e.to_string())?;
        let grad = softmax_cross_entropy_backward(&probs, label).map_err(|e| e.to_string())?;
        for idx in 0..logits.len() {
            let mut l = logits.clone();
            l[idx] += FD_STEP;
            let hi = softmax_cross_entropy(&l, label).unwrap().1;
            l[idx] = logits[idx] - FD_STEP;
            let lo = softmax_cross_entropy(&l, label).unwrap().1;
            worst = worst.max(rel_err(grad[idx], (hi - lo) / (2.0 * FD_STEP)));
        }
    }

    // End-to-end micro network, dropout disabled, sampled coordinates.
    {
        let mut config = ArchitectureConfig::micro();
        config.dropout_pool = 0.0;
        config.dropout_fc = 0.0;
        let net = Network::new(config).map_err(|e| e.to_string())?;
        let mut params = net.init_params::<f64>(&mut derive_rng(7, &[stream::INIT]));
        let patch = random_tensor(&[3, 16, 16], 23);
        let label = 1usize;
        let cache = net
            .forward_train(&params, &patch, label, &mut derive_rng(0, &[]))
            .map_err(|e| e.to_string())?;
        let grads = net.backward(&params, &cache).map_err(|e| e.to_string())?;
        for (entry_idx, grad) in grads.iter().enumerate() {
            let len = params.entries()[entry_idx].values.len();
            let step = (len / 8).max(1);
            for idx in (0..len).step_by(step) {
                let orig = params.entries()[entry_idx].values.as_slice()[idx];
                let mut probe = |v: f64| {
                    params.entries_mut()[entry_idx].values.as_mut_slice()[idx] = v;
                    net.forward_train(&params, &patch, label, &mut derive_rng(0, &[]))
                        .unwrap()
                        .loss
                };
                let hi = probe(orig + FD_STEP);
                let lo = probe(orig - FD_STEP);
                params.entries_mut()[entry_idx].values.as_mut_slice()[idx] = orig;
                worst = worst.max(rel_err(grad.as_slice()[idx], (hi - lo) / (2.0 * FD_STEP)));
            }
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    if worst >= GRAD_TOL {
        return Err(format!(
            "max relative gradient error {worst:.2e} ≥ {GRAD_TOL:.0e}"
        ));
    }
    if elapsed >= 60.0 {
        return Err(format!("gradient checks took {elapsed:.1} s (≥ 60 s)"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// criterion 2: dense/patch equivalence on a fixed-seed 128×128 image
// ---------------------------------------------------------------------------

fn criterion_fcn_equivalence() -> Result<(), String> {
    let spec = SyntheticRegionSpec {
        image_px: 128,
        nucleus_count: 6,
        ..SyntheticRegionSpec::default()
    };
    let (image, _) = generate_region(&spec, &mut derive_rng(2024, &[stream::SYNTH]))
        .map_err(|e| e.to_string())?;
    let image = image.to_tensor();

    let net = Network::new(ArchitectureConfig::full(21, 96)).map_err(|e| e.to_string())?;
    let params = net.init_params::<f32>(&mut derive_rng(2024, &[stream::INIT]));
    let dense = net
        .convert_to_fully_convolutional(&params)
        .map_err(|e| e.to_string())?;

    let coarse = dense_inference(&net, &dense, &image, 16).map_err(|e| e.to_string())?;
    let mut rng = derive_rng(0, &[]);
    let src = image.as_slice();
    for row in 0..coarse.grid_height() {
        for col in 0..coarse.grid_width() {
            let mut crop = vec![0.0f32; 3 * 96 * 96];
            for c in 0..3 {
                for y in 0..96 {
                    for x in 0..96 {
                        crop[(c * 96 + y) * 96 + x] =
                            src[(c * 128 + row * 16 + y) * 128 + col * 16 + x];
                    }
                }
            }
            let patch = Tensor::from_vec(&[3, 96, 96], crop).unwrap();
            let probs = net
                .forward(&params, &patch, Mode::Inference, &mut rng)
                .map_err(|e| e.to_string())?;
            let dense_probs = coarse.vector(row, col);
            for (k, (p, d)) in probs.iter().zip(&dense_probs).enumerate() {
                let diff = (*p as f64 - d).abs();
                if diff >= 1e-5 {
                    return Err(format!(
                        "class {k} at ({row},{col}): patch/dense differ by {diff:.2e}"
                    ));
                }
            }
        }
    }

    let fine = dense_inference(&net, &dense, &image, 8).map_err(|e| e.to_string())?;
    let k = coarse.num_classes();
    let (cn, fine_n) = (
        coarse.grid_height() * coarse.grid_width(),
        fine.grid_height() * fine.grid_width(),
    );
    let (cdata, fdata) = (coarse.tensor().as_slice(), fine.tensor().as_slice());
    for row in 0..coarse.grid_height() {
        for col in 0..coarse.grid_width() {
            for class in 0..k {
                let c = cdata[class * cn + row * coarse.grid_width() + col];
                let f = fdata[class * fine_n + 2 * row * fine.grid_width() + 2 * col];
                if c.to_bits() != f.to_bits() {
                    return Err(format!(
                        "stride-8 map not bit-identical to stride-16 at ({row},{col}) class {class}"
                    ));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// criterion 3: binning oracles
// ---------------------------------------------------------------------------

fn criterion_binning() -> Result<(), String> {
    let binning = AreaBinning::default();
    for bin in 0..binning.n_bins() {
        let centroid = binning.centroid(bin).map_err(|e| e.to_string())?;
        let back = binning.quantize(centroid).map_err(|e| e.to_string())?;
        if back != bin {
            return Err(format!("quantize(centroid({bin})) = {back}"));
        }
        let mut one_hot = vec![0.0f64; binning.n_bins()];
        one_hot[bin] = 1.0;
        let reconstructed = binning
            .reconstruct_area(&one_hot)
            .map_err(|e| e.to_string())?;
        if reconstructed != centroid {
            return Err(format!(
                "one-hot bin {bin} reconstructs {reconstructed}, expected {centroid}"
            ));
        }
    }
    let uniform = vec![1.0 / 20.0; 20];
    let mean = binning
        .reconstruct_area(&uniform)
        .map_err(|e| e.to_string())?;
    if (mean - 84.2).abs() >= 1e-9 {
        return Err(format!("uniform reconstruction {mean} ≠ 84.2 within 1e-9"));
    }
    let width_one_decimal = (binning.width() * 10.0).round() / 10.0;
    if width_one_decimal != 6.8 {
        return Err(format!(
            "bin width {} rounds to {width_one_decimal}, expected 6.8",
            binning.width()
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// criterion 4: augmentation label law over 10⁴ draws
// ---------------------------------------------------------------------------

fn criterion_augmentation() -> Result<(), String> {
    let binning = AreaBinning::default();
    let config = AugmentConfig::new(96);
    let spec = SyntheticRegionSpec {
        image_px: 256,
        nucleus_count: 12,
        ..SyntheticRegionSpec::default()
    };
    let (image, truth) = generate_region(&spec, &mut derive_rng(404, &[stream::SYNTH]))
        .map_err(|e| e.to_string())?;
    let samples: Vec<PatchSample> = truth
        .nuclei
        .iter()
        .map(|n| {
            Ok(PatchSample {
                pixels: extract_patch(&image, n.cx_px, n.cy_px, 96)?,
                label: binning.quantize(n.area_um2)?,
                area_um2: Some(n.area_um2),
            })
        })
        .collect::<karyo::Result<_>>()
        .map_err(|e| e.to_string())?;

    let mut rng = derive_rng(405, &[stream::AUGMENT]);
    for i in 0..10_000usize {
        let sample = &samples[i % samples.len()];
        let area = sample.area_um2.unwrap();
        let mut draw = draw_augment(&mut rng, &config, area, &binning);
        if i % 2 == 1 {
            // Area-preserving transform: geometry and color vary, scale is 1.
            draw.scale = 1.0;
        }
        let augmented = augment_with_draw(sample, &draw, &binning).map_err(|e| e.to_string())?;
        let expected = binning
            .quantize(area * draw.scale * draw.scale)
            .map_err(|e| e.to_string())?;
        if augmented.label != expected {
            return Err(format!(
                "draw {i}: label {} ≠ quantize(area·s²) = {expected}",
                augmented.label
            ));
        }
        if draw.scale == 1.0 && augmented.label != sample.label {
            return Err(format!(
                "draw {i}: area-preserving transform changed label {} → {}",
                sample.label, augmented.label
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// criterion 5: statistics oracles
// ---------------------------------------------------------------------------

fn criterion_statistics() -> Result<(), String> {
    let (b, _, hw) =
        bland_altman(&[10.0, 20.0, 30.0], &[12.0, 18.0, 33.0]).map_err(|e| e.to_string())?;
    if (b - 1.0).abs() >= 1e-9 {
        return Err(format!("bland_altman bias {b} ≠ 1.0"));
    }
    if (hw - 1.96 * 7f64.sqrt()).abs() >= 1e-9 {
        return Err(format!("bland_altman half-width {hw} ≠ 1.96·√7"));
    }
    let r2 = r_squared(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).map_err(|e| e.to_string())?;
    if (r2 - 0.25).abs() >= 1e-9 {
        return Err(format!("r_squared {r2} ≠ 0.25"));
    }

    // Independent two-pass oracle on 100 random datasets.
    for case in 0..100u64 {
        let mut rng = derive_rng(case, &[stream::VALIDATION]);
        let n = rng.random_range(5..40);
        let manual: Vec<f64> = (0..n).map(|_| rng.random_range(20.0..120.0)).collect();
        let auto: Vec<f64> = manual
            .iter()
            .map(|m| m * rng.random_range(0.8..1.2) + rng.random_range(-5.0..5.0))
            .collect();

        // Pass 1: means. Pass 2: central moments.
        let nf = n as f64;
        let mean_d = manual.iter().zip(&auto).map(|(m, a)| a - m).sum::<f64>() / nf;
        let ss_d = manual
            .iter()
            .zip(&auto)
            .map(|(m, a)| ((a - m) - mean_d).powi(2))
            .sum::<f64>();
        let oracle_sd = (ss_d / (nf - 1.0)).sqrt();
        let mean_m = manual.iter().sum::<f64>() / nf;
        let mean_a = auto.iter().sum::<f64>() / nf;
        let (mut cov, mut var_m, mut var_a) = (0.0, 0.0, 0.0);
        for (m, a) in manual.iter().zip(&auto) {
            cov += (m - mean_m) * (a - mean_a);
            var_m += (m - mean_m).powi(2);
            var_a += (a - mean_a).powi(2);
        }
        let oracle_r2 = cov * cov / (var_m * var_a);

        let (got_b, got_sd, _) = bland_altman(&manual, &auto).map_err(|e| e.to_string())?;
        let got_r2 = r_squared(&manual, &auto).map_err(|e| e.to_string())?;
        if (got_b - mean_d).abs() >= 1e-9
            || (got_sd - oracle_sd).abs() >= 1e-9
            || (got_r2 - oracle_r2).abs() >= 1e-9
        {
            return Err(format!(
                "case {case}: ({got_b}, {got_sd}, {got_r2}) vs oracle ({mean_d}, {oracle_sd}, {oracle_r2})"
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// criteria 6–9: desk-profile pipeline
// ---------------------------------------------------------------------------

struct Pipeline {
    _dir: tempfile::TempDir,
    config: RunConfig,
    cohort: PathBuf,
    measure_out: PathBuf,
    detect_out: PathBuf,
    area_weights: PathBuf,
    combined_weights: PathBuf,
    measurement_elapsed_s: f64,
    synth_trained_measured: Result<(), String>,
    detected: Result<(), String>,
}

impl Pipeline {
    fn run() -> Pipeline {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        let config = RunConfig::defaults(Profile::Desk);
        let cohort = root.join("cohort");
        let area_out = root.join("train-area");
        let combined_out = root.join("train-combined");
        let measure_out = root.join("measure");
        let detect_out = root.join("detect");

        let start = Instant::now();
        let synth_trained_measured = (|| -> Result<(), String> {
            cmd_synth(&config, &cohort, false).map_err(|e| format!("synth: {e}"))?;
            cmd_train(&config, TrainMode::Area, &cohort, &area_out, false)
                .map_err(|e| format!("train area: {e}"))?;
            cmd_measure(
                &config,
                &area_out.join("weights.nnw1"),
                &cohort,
                &measure_out,
                false,
            )
            .map_err(|e| format!("measure: {e}"))?;
            Ok(())
        })();
        let measurement_elapsed_s = start.elapsed().as_secs_f64();

        let detected = synth_trained_measured.clone().and_then(|()| {
            cmd_train(&config, TrainMode::Combined, &cohort, &combined_out, false)
                .map_err(|e| format!("train combined: {e}"))?;
            cmd_detect(
                &config,
                &combined_out.join("weights.nnw1"),
                &cohort,
                &detect_out,
                false,
                false,
            )
            .map_err(|e| format!("detect: {e}"))?;
            Ok(())
        });

        Pipeline {
            config,
            cohort,
            measure_out,
            detect_out,
            area_weights: area_out.join("weights.nnw1"),
            combined_weights: combined_out.join("weights.nnw1"),
            measurement_elapsed_s,
            synth_trained_measured,
            detected,
            _dir: dir,
        }
    }

    fn criterion_measurement(&self) -> Result<(), String> {
        self.synth_trained_measured.clone()?;
        let rows = read_measurements_csv(&self.measure_out.join("measurements.csv"))
            .map_err(|e| e.to_string())?;
        let manual: Vec<f64> = rows.iter().map(|r| r.manual_um2).collect();
        let model: Vec<f64> = rows.iter().map(|r| r.model_um2).collect();
        let r2 = r_squared(&manual, &model).map_err(|e| e.to_string())?;
        if r2 < 0.8 {
            return Err(format!(
                "per-nucleus r² {r2:.4} < 0.8 over {} nuclei",
                rows.len()
            ));
        }
        for mna in read_mna_csv(&self.measure_out.join("mna.csv")).map_err(|e| e.to_string())? {
            let model_mna = mna.model_mna_um2.ok_or("region without model MNA")?;
            let bias = model_mna - mna.manual_mna_um2;
            if bias.abs() > 5.0 {
                return Err(format!(
                    "region {} MNA bias {bias:.2} µm² exceeds ±5",
                    mna.region_id
                ));
            }
        }
        let budget = 1800.0 * budget_scale();
        if self.measurement_elapsed_s > budget {
            return Err(format!(
                "synth+train+measure took {:.0} s > budget {budget:.0} s",
                self.measurement_elapsed_s
            ));
        }
        announce(&format!(
            "  (measurement: r² {r2:.4}, elapsed {:.0} s, budget {budget:.0} s)",
            self.measurement_elapsed_s
        ));
        Ok(())
    }

    fn criterion_detection(&self) -> Result<(), String> {
        self.detected.clone()?;
        let detections =
            karyo::detect::read_detections_csv(&self.detect_out.join("detections.csv"))
                .map_err(|e| e.to_string())?;
        let regions = load_cohort(&self.cohort).map_err(|e| e.to_string())?;

        // Greedy one-to-one matching by ascending center distance at 8 px
        // tolerance, against all ground-truth nuclei of subset B.
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for region in regions.iter().filter(|r| r.plan.subset == Subset::B) {
            let id = &region.plan.region_id;
            let preds: Vec<(f64, f64)> = detections
                .iter()
                .filter(|d| &d.region_id == id)
                .map(|d| (d.x_px, d.y_px))
                .collect();
            let truths: Vec<(f64, f64)> = region
                .truth
                .nuclei
                .iter()
                .map(|n| (n.cx_px, n.cy_px))
                .collect();
            let mut pairs = Vec::new();
            for (pi, p) in preds.iter().enumerate() {
                for (ti, t) in truths.iter().enumerate() {
                    let d = ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)).sqrt();
                    if d <= 8.0 {
                        pairs.push((d, pi, ti));
                    }
                }
            }
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut pred_used = vec![false; preds.len()];
            let mut truth_used = vec![false; truths.len()];
            let mut matched = 0usize;
            for (_, pi, ti) in pairs {
                if !pred_used[pi] && !truth_used[ti] {
                    pred_used[pi] = true;
                    truth_used[ti] = true;
                    matched += 1;
                }
            }
            tp += matched;
            fp += preds.len() - matched;
            fn_ += truths.len() - matched;
        }
        let f1 = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64);
        if f1 < 0.8 {
            return Err(format!(
                "detection F1 {f1:.4} < 0.8 (tp {tp}, fp {fp}, fn {fn_})"
            ));
        }

        // MNA bias over the B regions.
        let mna_rows = read_mna_csv(&self.detect_out.join("mna.csv")).map_err(|e| e.to_string())?;
        let mut bias_sum = 0.0;
        for row in &mna_rows {
            bias_sum += row.model_mna_um2.ok_or("region without model MNA")? - row.manual_mna_um2;
        }
        let bias = bias_sum / mna_rows.len() as f64;
        if bias.abs() > 8.0 {
            return Err(format!("combined MNA bias {bias:.2} µm² exceeds ±8"));
        }

        // The chosen τ is the exhaustive-sweep argmin (smallest τ on ties).
        let manifest = std::fs::read_to_string(self.detect_out.join("manifest.txt"))
            .map_err(|e| e.to_string())?;
        let tau_line = manifest
            .lines()
            .find(|l| l.starts_with("tau = "))
            .ok_or("manifest lacks tau")?;
        let tau: f64 = tau_line["tau = ".len()..]
            .parse()
            .map_err(|_| format!("unparseable {tau_line}"))?;
        let sweep = std::fs::read_to_string(self.detect_out.join("sweep.csv"))
            .map_err(|e| e.to_string())?;
        let mut best: Option<(f64, f64)> = None;
        for line in sweep.lines().skip(1) {
            let (t, err) = line.split_once(',').ok_or("bad sweep row")?;
            let (t, err): (f64, f64) = (
                t.parse().map_err(|_| "bad sweep τ")?,
                err.parse().map_err(|_| "bad sweep error")?,
            );
            if best.is_none() || err < best.unwrap().1 {
                best = Some((t, err));
            }
        }
        let argmin = best.ok_or("empty sweep")?.0;
        if (tau - argmin).abs() > 1e-12 {
            return Err(format!("chosen τ {tau} ≠ sweep argmin {argmin}"));
        }
        announce(&format!(
            "  (detection: F1 {f1:.4}, MNA bias {bias:.2} µm², τ {tau})"
        ));
        Ok(())
    }

    fn criterion_determinism(&self) -> Result<(), String> {
        self.detected.clone()?;
        let root = self._dir.path();
        let rerun_measure = root.join("measure-rerun");
        let rerun_detect = root.join("detect-rerun");
        // Reruns execute in a single-threaded pool — exactly what the CLI's
        // --deterministic flag sets up — and are compared against the
        // default-pool first run.
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| e.to_string())?;
        pool.install(|| -> Result<(), String> {
            cmd_measure(
                &self.config,
                &self.area_weights,
                &self.cohort,
                &rerun_measure,
                false,
            )
            .map_err(|e| format!("measure rerun: {e}"))?;
            cmd_detect(
                &self.config,
                &self.combined_weights,
                &self.cohort,
                &rerun_detect,
                false,
                false,
            )
            .map_err(|e| format!("detect rerun: {e}"))
        })?;
        for (a, b, name) in [
            (&self.measure_out, &rerun_measure, "measurements.csv"),
            (&self.measure_out, &rerun_measure, "mna.csv"),
            (&self.detect_out, &rerun_detect, "detections.csv"),
            (&self.detect_out, &rerun_detect, "mna.csv"),
        ] {
            let first = std::fs::read(a.join(name)).map_err(|e| e.to_string())?;
            let second = std::fs::read(b.join(name)).map_err(|e| e.to_string())?;
            if first != second {
                return Err(format!("{name} differs between reruns"));
            }
        }
        Ok(())
    }

    fn criterion_throughput(&self) -> Result<(), String> {
        self.detected.clone()?;
        // Dense stride-4 inference over a full 512×512 region image.
        let regions = load_cohort(&self.cohort).map_err(|e| e.to_string())?;
        let region = regions
            .iter()
            .find(|r| r.plan.subset == Subset::B)
            .ok_or("no B region")?;
        let params = load_params(&self.combined_weights).map_err(|e| e.to_string())?;
        let arch = karyo_cli::commands::infer_architecture(&params).map_err(|e| e.to_string())?;
        let net = Network::new(arch).map_err(|e| e.to_string())?;
        let dense = net
            .convert_to_fully_convolutional(&params)
            .map_err(|e| e.to_string())?;
        let image = region.image.to_tensor();
        if image.shape()[1] != 512 {
            return Err(format!(
                "expected a 512 px desk image, got {:?}",
                image.shape()
            ));
        }
        let start = Instant::now();
        let map = dense_inference(&net, &dense, &image, 4).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed().as_secs_f64();
        let budget = 300.0 * budget_scale();
        if elapsed > budget {
            return Err(format!(
                "stride-4 dense inference took {elapsed:.1} s > budget {budget:.0} s"
            ));
        }
        announce(&format!(
            "  (throughput: {}×{} grid in {elapsed:.1} s, budget {budget:.0} s)",
            map.grid_height(),
            map.grid_width()
        ));
        Ok(())
    }
}
