//! The pipeline commands: synth → train → measure/detect → evaluate, plus
//! the fully-convolutional weights conversion.
//!
//! Every command resolves its inputs, writes its primary artifacts and a
//! manifest (resolved config, input hashes, outcome values) into `--out`,
//! and is deterministic for a fixed seed.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use karyo::augment::{
    extract_patch, sample_background, AnnotatedNucleus, AugmentConfig, AugmentPool, BackgroundPool,
    PatchSample,
};
use karyo::binning::{mean_nuclear_area, AreaMeasurement, MeasurementSource};
use karyo::detect::{
    default_tau_grid, dense_inference, detect_nuclei, measure_at_detections,
    optimize_operating_point, save_probability_map, write_detections_csv, DetectionRow,
    SweepOutcome,
};
use karyo::image::RgbImage;
use karyo::network::Param;
use karyo::report::{agreement_stats, emit_agreement_report, emit_plots};
use karyo::rng::{derive_rng, stream};
use karyo::synth::{
    generate_planned_region, plan_cohort, read_cohort_manifest, read_truth_csv,
    write_cohort_manifest, write_truth_csv, GroundTruth, RegionPlan, Subset, SyntheticRegionSpec,
};
use karyo::train::{
    train_loop, write_history_csv, ConcatSource, MemPool, PatchSource, TrainConfig,
};
use karyo::weights::{load_tensors, save_tensors};
use karyo::{ArchitectureConfig, AreaBinning, Error, Mode, Network, NetworkParams, Result, Tensor};
use rand::RngCore;

use crate::config::RunConfig;
use crate::manifest::Manifest;

/// Which classifier a training run produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// 20 area classes, nuclei-centered patches only.
    Area,
    /// 21 classes: area bins plus background.
    Combined,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Area => "area",
            TrainMode::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "area" => Ok(TrainMode::Area),
            "combined" => Ok(TrainMode::Combined),
            other => Err(Error::Config(format!(
                "unknown training mode '{other}' (expected area or combined)"
            ))),
        }
    }
}

/// Creates the output directory, refusing to reuse a non-empty one unless
/// `force` is set.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if std::fs::read_dir(out)?.next().is_some() && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to reuse it)",
                out.display()
            )));
        }
    } else {
        std::fs::create_dir_all(out)?;
    }
    Ok(())
}

fn region_spec(config: &RunConfig) -> SyntheticRegionSpec {
    SyntheticRegionSpec {
        image_px: config.image_px,
        nucleus_count: config.nuclei_per_region,
        ..SyntheticRegionSpec::default()
    }
}

fn augment_config(config: &RunConfig) -> AugmentConfig {
    AugmentConfig {
        translation_px: config.translation_px,
        replicates: config.replicates,
        ..AugmentConfig::new(config.patch_px)
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Generates the synthetic cohort: one PPM image and one annotation CSV per
/// region, plus the cohort manifest.
pub fn cmd_synth(config: &RunConfig, out: &Path, force: bool) -> Result<()> {
    prepare_out_dir(out, force)?;
    let plans = plan_cohort(config.cohort_factor, config.seed)?;
    let spec = region_spec(config);
    spec.validate()?;

    let cohort_csv = out.join("cohort.csv");
    write_cohort_manifest(&cohort_csv, &plans)?;

    let mut manifest = Manifest::new("synth", config);
    manifest.push("regions", plans.len());
    manifest.output_file("cohort.csv", &cohort_csv)?;
    for plan in &plans {
        let region = generate_planned_region(plan, &spec, config.sample_n)?;
        let image_name = format!("{}.ppm", plan.region_id);
        let truth_name = format!("{}_truth.csv", plan.region_id);
        region.image.write_ppm(&out.join(&image_name))?;
        write_truth_csv(&out.join(&truth_name), &plan.region_id, &region.truth)?;
        manifest.output_file(&image_name, &out.join(&image_name))?;
        manifest.output_file(&truth_name, &out.join(&truth_name))?;
        progress(format!(
            "synth: {} ({} nuclei)",
            plan.region_id,
            region.truth.nuclei.len()
        ));
    }
    manifest.write(&out.join("manifest.txt"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// cohort loading
// ---------------------------------------------------------------------------

/// One cohort region loaded back from disk.
pub struct LoadedRegion {
    pub plan: RegionPlan,
    pub image: RgbImage,
    pub truth: GroundTruth,
}

/// Loads a cohort produced by [`cmd_synth`].
pub fn load_cohort(dir: &Path) -> Result<Vec<LoadedRegion>> {
    let cohort_csv = dir.join("cohort.csv");
    if !cohort_csv.exists() {
        return Err(Error::Data(format!(
            "no cohort at {} (run synth first)",
            dir.display()
        )));
    }
    let plans = read_cohort_manifest(&cohort_csv)?;
    plans
        .into_iter()
        .map(|plan| {
            let image = RgbImage::read_ppm(&dir.join(format!("{}.ppm", plan.region_id)))?;
            let (region_id, truth) =
                read_truth_csv(&dir.join(format!("{}_truth.csv", plan.region_id)))?;
            if region_id != plan.region_id {
                return Err(Error::Data(format!(
                    "annotation file for {} claims region '{region_id}'",
                    plan.region_id
                )));
            }
            Ok(LoadedRegion { plan, image, truth })
        })
        .collect()
}

fn hash_cohort_inputs(manifest: &mut Manifest, dir: &Path, regions: &[LoadedRegion]) -> Result<()> {
    manifest.input_file("cohort.csv", &dir.join("cohort.csv"))?;
    for region in regions {
        let id = &region.plan.region_id;
        manifest.input_file(&format!("{id}.ppm"), &dir.join(format!("{id}.ppm")))?;
        manifest.input_file(
            &format!("{id}_truth.csv"),
            &dir.join(format!("{id}_truth.csv")),
        )?;
    }
    Ok(())
}

fn annotated(truth: &GroundTruth, sampled_only: bool) -> Vec<AnnotatedNucleus> {
    truth
        .nuclei
        .iter()
        .filter(|n| !sampled_only || n.sampled)
        .map(|n| AnnotatedNucleus {
            nucleus_id: n.id,
            cx_px: n.cx_px,
            cy_px: n.cy_px,
            area_um2: n.area_um2,
        })
        .collect()
}

fn centroids(truth: &GroundTruth) -> Vec<(f64, f64)> {
    truth.nuclei.iter().map(|n| (n.cx_px, n.cy_px)).collect()
}

/// Progress lines go straight to stderr (unbuffered relative to stdout
/// artifacts, and visible under test harness capture).
fn progress(line: String) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

// ---------------------------------------------------------------------------
// weights plumbing
// ---------------------------------------------------------------------------

/// Saves network parameters in the NNW1 container.
pub fn save_params(path: &Path, params: &NetworkParams<f32>) -> Result<()> {
    let entries: Vec<(String, Tensor<f32>)> = params
        .entries()
        .iter()
        .map(|p| (p.name.clone(), p.values.clone()))
        .collect();
    save_tensors(path, &entries)
}

/// Loads network parameters from the NNW1 container.
pub fn load_params(path: &Path) -> Result<NetworkParams<f32>> {
    let entries = load_tensors(path)?
        .into_iter()
        .map(|(name, values)| Param { name, values })
        .collect();
    Ok(NetworkParams::from_entries(entries))
}

/// Recovers the architecture from trained (fully connected) weights: the
/// first convolution gives the base width, `fc2.bias` the class count, and
/// the `fc1.weight` column count the patch size.
pub fn infer_architecture(params: &NetworkParams<f32>) -> Result<ArchitectureConfig> {
    let tensor = |name: &str| {
        params
            .get(name)
            .ok_or_else(|| Error::WeightsShapeMismatch(format!("missing tensor '{name}'")))
    };
    let conv1 = tensor("conv1.weight")?;
    if conv1.shape().len() != 4 {
        return Err(Error::WeightsShapeMismatch(format!(
            "conv1.weight must be 4-D, got {:?}",
            conv1.shape()
        )));
    }
    let base_width = conv1.shape()[0];
    let num_classes = tensor("fc2.bias")?.len();
    let fc1 = tensor("fc1.weight")?;
    if fc1.shape().len() != 2 {
        return Err(Error::WeightsShapeMismatch(format!(
            "fc1.weight must be the fully connected [out, in] form, got {:?}",
            fc1.shape()
        )));
    }
    let features = 2 * base_width;
    let cols = fc1.shape()[1];
    if cols % features != 0 {
        return Err(Error::WeightsShapeMismatch(format!(
            "fc1.weight has {cols} inputs, not a multiple of {features} feature maps"
        )));
    }
    let spatial = cols / features;
    let side = (spatial as f64).sqrt().round() as usize;
    if side * side != spatial {
        return Err(Error::WeightsShapeMismatch(format!(
            "fc1.weight implies a non-square {spatial}-pixel feature grid"
        )));
    }
    let config = ArchitectureConfig {
        base_width,
        ..ArchitectureConfig::full(num_classes, 16 * side)
    };
    config.validate()?;
    Ok(config)
}

/// Loads weights and builds the matching network, checking the class count.
fn load_model(
    path: &Path,
    expect_classes: usize,
    purpose: &str,
) -> Result<(Network, NetworkParams<f32>)> {
    let params = load_params(path)?;
    let arch = infer_architecture(&params)?;
    if arch.num_classes != expect_classes {
        return Err(Error::Config(format!(
            "{} declares {} classes; {purpose} needs the {expect_classes}-class model",
            path.display(),
            arch.num_classes
        )));
    }
    let network = Network::new(arch)?;
    network.validate_params(&params)?;
    Ok((network, params))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Lazily chained background pools, one per training region.
struct ChainedBackground {
    pools: Vec<BackgroundPool>,
}

impl PatchSource for ChainedBackground {
    fn len(&self) -> usize {
        self.pools.iter().map(|p| p.len()).sum()
    }

    fn get(&self, index: usize) -> Result<PatchSample> {
        let mut offset = index;
        for pool in &self.pools {
            if offset < pool.len() {
                return pool.materialize(offset);
            }
            offset -= pool.len();
        }
        Err(Error::Data(format!(
            "background sample index {index} out of range"
        )))
    }
}

/// Trains the area (20-class) or combined (21-class) model on subset A1 with
/// A2 validation, writing the best-validation weights and the training
/// history.
pub fn cmd_train(
    config: &RunConfig,
    mode: TrainMode,
    cohort_dir: &Path,
    out: &Path,
    force: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    let regions = load_cohort(cohort_dir)?;
    let binning = AreaBinning::default();
    let aug = augment_config(config);

    // Training pool: balanced label-aware augmentation over every A1 nucleus.
    let mut train_pool: Option<AugmentPool> = None;
    let mut a1_count = 0usize;
    for (idx, region) in regions.iter().enumerate() {
        if region.plan.subset != Subset::A1 {
            continue;
        }
        a1_count += 1;
        let pool = AugmentPool::new(
            &region.image,
            &annotated(&region.truth, false),
            idx as u64 * 1_000_000,
            aug.clone(),
            binning.clone(),
            config.seed,
            true,
        )?;
        train_pool = Some(match train_pool {
            Some(existing) => existing.concat(pool),
            None => pool,
        });
    }
    let train_pool = train_pool.ok_or_else(|| {
        Error::Data(format!(
            "cohort at {} has no A1 regions",
            cohort_dir.display()
        ))
    })?;

    // Validation pool: untransformed patches at every A2 nucleus, plus (in
    // combined mode) `sample_n` background patches per A2 region.
    let mut validation = Vec::new();
    for (idx, region) in regions.iter().enumerate() {
        if region.plan.subset != Subset::A2 {
            continue;
        }
        for nucleus in &region.truth.nuclei {
            validation.push(PatchSample {
                pixels: extract_patch(
                    &region.image,
                    nucleus.cx_px,
                    nucleus.cy_px,
                    config.patch_px,
                )?,
                label: binning.quantize(nucleus.area_um2)?,
                area_um2: Some(nucleus.area_um2),
            });
        }
        if mode == TrainMode::Combined {
            let seed = derive_rng(config.seed, &[stream::BACKGROUND, idx as u64]).next_u64();
            validation.extend(sample_background(
                &region.image,
                &centroids(&region.truth),
                config.sample_n,
                config.background_exclusion_px,
                config.patch_px,
                &binning,
                seed,
            )?);
        }
    }
    if validation.is_empty() {
        return Err(Error::Data(format!(
            "cohort at {} has no A2 regions",
            cohort_dir.display()
        )));
    }
    let validation = MemPool(validation);

    // Background training pools (combined mode only), lazy like the
    // augmentation pool.
    let background = match mode {
        TrainMode::Area => None,
        TrainMode::Combined => {
            let mut pools = Vec::new();
            for (idx, region) in regions.iter().enumerate() {
                if region.plan.subset != Subset::A1 {
                    continue;
                }
                pools.push(BackgroundPool::new(
                    region.image.clone(),
                    centroids(&region.truth),
                    idx as u64,
                    config.patch_px,
                    config.background_per_region,
                    config.background_exclusion_px,
                    &binning,
                    config.seed,
                )?);
            }
            Some(ChainedBackground { pools })
        }
    };

    let num_classes = match mode {
        TrainMode::Area => binning.n_bins(),
        TrainMode::Combined => binning.n_bins() + 1,
    };
    let arch = ArchitectureConfig {
        base_width: config.base_width,
        ..ArchitectureConfig::full(num_classes, config.patch_px)
    };
    let network = Network::new(arch)?;
    let init = network.init_params::<f32>(&mut derive_rng(config.seed, &[stream::INIT]));

    let train_config = TrainConfig {
        batch_size: config.batch_size,
        momentum: config.momentum,
        base_lr: config.base_lr,
        lr_step: config.lr_step,
        lr_factor: config.lr_factor,
        weight_decay: config.weight_decay,
        max_iterations: match mode {
            TrainMode::Area => config.iterations_area,
            TrainMode::Combined => config.iterations_combined,
        },
        patience_evals: config.patience_evals,
        eval_interval: config.eval_interval,
        seed: config.seed,
    };

    let mode_str = mode.as_str();
    let on_eval = |row: &karyo::train::HistoryRow| {
        progress(format!(
            "train[{mode_str}]: iteration {} lr {:.6} train {:.4} val {:.4}",
            row.iteration, row.lr, row.train_loss, row.val_loss
        ));
    };
    let outcome = match &background {
        None => train_loop(
            &network,
            init,
            &train_pool,
            &validation,
            &train_config,
            on_eval,
        )?,
        Some(bg) => {
            let source = ConcatSource {
                a: &train_pool,
                b: bg,
            };
            train_loop(&network, init, &source, &validation, &train_config, on_eval)?
        }
    };

    let weights_path = out.join("weights.nnw1");
    let history_path = out.join("history.csv");
    save_params(&weights_path, &outcome.params)?;
    write_history_csv(&history_path, &outcome.history)?;

    let mut manifest = Manifest::new("train", config);
    manifest.push("mode", mode_str);
    manifest.push("num_classes", num_classes);
    manifest.push("train_samples", {
        let bg_len = background.as_ref().map_or(0, |b| b.len());
        train_pool.len() + bg_len
    });
    manifest.push("validation_samples", validation.len());
    manifest.push("a1_regions", a1_count);
    manifest.push("iterations_run", outcome.iterations_run);
    manifest.push("best_iteration", outcome.best_iteration);
    manifest.push("best_val_loss", format!("{:.6}", outcome.best_val_loss));
    hash_cohort_inputs(&mut manifest, cohort_dir, &regions)?;
    manifest.output_file("weights.nnw1", &weights_path)?;
    manifest.output_file("history.csv", &history_path)?;
    manifest.write(&out.join("manifest.txt"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// measurement CSVs (shared by measure, detect, evaluate)
// ---------------------------------------------------------------------------

/// One per-nucleus measurement row.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRow {
    pub region_id: String,
    pub nucleus_id: u64,
    pub x_px: f64,
    pub y_px: f64,
    pub manual_um2: f64,
    pub model_um2: f64,
}

pub fn write_measurements_csv(path: &Path, rows: &[MeasurementRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
    writer
        .write_record([
            "region_id",
            "nucleus_id",
            "x_px",
            "y_px",
            "manual_um2",
            "model_um2",
        ])
        .map_err(csv_error)?;
    for row in rows {
        writer
            .write_record([
                row.region_id.clone(),
                row.nucleus_id.to_string(),
                format!("{}", row.x_px),
                format!("{}", row.y_px),
                format!("{}", row.manual_um2),
                format!("{}", row.model_um2),
            ])
            .map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_measurements_csv(path: &Path) -> Result<Vec<MeasurementRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        if record.len() != 6 {
            return Err(Error::Data(format!(
                "{}: measurement row has {} fields, expected 6",
                path.display(),
                record.len()
            )));
        }
        rows.push(MeasurementRow {
            region_id: record[0].to_string(),
            nucleus_id: parse_num(&record[1], path)?,
            x_px: parse_num(&record[2], path)?,
            y_px: parse_num(&record[3], path)?,
            manual_um2: parse_num(&record[4], path)?,
            model_um2: parse_num(&record[5], path)?,
        });
    }
    Ok(rows)
}

/// One per-region mean-nuclear-area row. `model_mna_um2` is absent when the
/// region produced no measurable output (no pairing possible).
#[derive(Debug, Clone, PartialEq)]
pub struct MnaRow {
    pub region_id: String,
    pub n: usize,
    pub manual_mna_um2: f64,
    pub model_mna_um2: Option<f64>,
}

pub fn write_mna_csv(path: &Path, rows: &[MnaRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
    writer
        .write_record(["region_id", "n", "manual_mna_um2", "model_mna_um2"])
        .map_err(csv_error)?;
    for row in rows {
        writer
            .write_record([
                row.region_id.clone(),
                row.n.to_string(),
                format!("{}", row.manual_mna_um2),
                row.model_mna_um2.map_or(String::new(), |v| format!("{v}")),
            ])
            .map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_mna_csv(path: &Path) -> Result<Vec<MnaRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        if record.len() != 4 {
            return Err(Error::Data(format!(
                "{}: MNA row has {} fields, expected 4",
                path.display(),
                record.len()
            )));
        }
        rows.push(MnaRow {
            region_id: record[0].to_string(),
            n: parse_num(&record[1], path)?,
            manual_mna_um2: parse_num(&record[2], path)?,
            model_mna_um2: if record[3].is_empty() {
                None
            } else {
                Some(parse_num(&record[3], path)?)
            },
        });
    }
    Ok(rows)
}

fn parse_num<T: std::str::FromStr>(s: &str, path: &Path) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Data(format!("{}: bad field '{s}'", path.display())))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

// ---------------------------------------------------------------------------
// measure
// ---------------------------------------------------------------------------

/// Measures nuclear areas with the 20-class model at the annotated (sampled)
/// nucleus locations of subset B.
pub fn cmd_measure(
    config: &RunConfig,
    weights: &Path,
    cohort_dir: &Path,
    out: &Path,
    force: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    let binning = AreaBinning::default();
    let (network, params) = load_model(weights, binning.n_bins(), "measurement")?;
    let patch_px = network.config().patch_px;
    let regions = load_cohort(cohort_dir)?;

    let mut rows = Vec::new();
    let mut mna_rows = Vec::new();
    let mut rng = derive_rng(0, &[]);
    for region in regions.iter().filter(|r| r.plan.subset == Subset::B) {
        let mut manual = Vec::new();
        let mut model = Vec::new();
        for nucleus in region.truth.nuclei.iter().filter(|n| n.sampled) {
            let patch = extract_patch(&region.image, nucleus.cx_px, nucleus.cy_px, patch_px)?;
            let probs = network.forward(&params, &patch, Mode::Inference, &mut rng)?;
            let probs: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
            let model_um2 = binning.reconstruct_area(&probs)?;
            rows.push(MeasurementRow {
                region_id: region.plan.region_id.clone(),
                nucleus_id: nucleus.id,
                x_px: nucleus.cx_px,
                y_px: nucleus.cy_px,
                manual_um2: nucleus.area_um2,
                model_um2,
            });
            let base = AreaMeasurement {
                nucleus_id: nucleus.id,
                x_px: nucleus.cx_px,
                y_px: nucleus.cy_px,
                area_um2: nucleus.area_um2,
                source: MeasurementSource::Manual,
            };
            manual.push(base.clone());
            model.push(AreaMeasurement {
                area_um2: model_um2,
                source: MeasurementSource::Model,
                ..base
            });
        }
        if manual.is_empty() {
            return Err(Error::Data(format!(
                "region {} has no sampled nuclei",
                region.plan.region_id
            )));
        }
        let id = &region.plan.region_id;
        mna_rows.push(MnaRow {
            region_id: id.clone(),
            n: manual.len(),
            manual_mna_um2: mean_nuclear_area(id, &manual)?.mna_um2,
            model_mna_um2: Some(mean_nuclear_area(id, &model)?.mna_um2),
        });
        progress(format!("measure: {} ({} nuclei)", id, manual.len()));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "cohort at {} has no B regions",
            cohort_dir.display()
        )));
    }

    let measurements_path = out.join("measurements.csv");
    let mna_path = out.join("mna.csv");
    write_measurements_csv(&measurements_path, &rows)?;
    write_mna_csv(&mna_path, &mna_rows)?;

    let mut manifest = Manifest::new("measure", config);
    manifest.push("nuclei_measured", rows.len());
    manifest.push("regions_measured", mna_rows.len());
    manifest.input_file("weights.nnw1", weights)?;
    hash_cohort_inputs(&mut manifest, cohort_dir, &regions)?;
    manifest.output_file("measurements.csv", &measurements_path)?;
    manifest.output_file("mna.csv", &mna_path)?;
    manifest.write(&out.join("manifest.txt"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// detect
// ---------------------------------------------------------------------------

/// Runs combined detection + measurement: optimizes the background threshold
/// on subset A2, then detects and measures nuclei over subset B.
pub fn cmd_detect(
    config: &RunConfig,
    weights: &Path,
    cohort_dir: &Path,
    out: &Path,
    force: bool,
    dump_maps: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    let binning = AreaBinning::default();
    let (network, params) = load_model(weights, binning.n_bins() + 1, "detection")?;
    let dense = network.convert_to_fully_convolutional(&params)?;
    let regions = load_cohort(cohort_dir)?;

    // Operating point: exhaustive τ sweep over the validation regions.
    let mut sweep_inputs = Vec::new();
    for region in regions.iter().filter(|r| r.plan.subset == Subset::A2) {
        let map = dense_inference(
            &network,
            &dense,
            &region.image.to_tensor(),
            config.detect_stride,
        )?;
        if dump_maps {
            let map_name = format!("{}_probmap.nnw1", region.plan.region_id);
            save_probability_map(&out.join(map_name), &map)?;
        }
        progress(format!(
            "detect: swept {} ({}×{} grid)",
            region.plan.region_id,
            map.grid_height(),
            map.grid_width()
        ));
        sweep_inputs.push((map, region.truth.mna_um2()?));
    }
    if sweep_inputs.is_empty() {
        return Err(Error::Data(format!(
            "cohort at {} has no A2 regions",
            cohort_dir.display()
        )));
    }
    let SweepOutcome {
        operating_point,
        sweep,
    } = optimize_operating_point(
        &sweep_inputs,
        &default_tau_grid(),
        config.d_min_px,
        &binning,
    )?;
    drop(sweep_inputs);
    progress(format!(
        "detect: operating point tau {} (d_min {} px)",
        operating_point.tau, operating_point.d_min_px
    ));

    let sweep_path = out.join("sweep.csv");
    write_sweep_csv(&sweep_path, &sweep)?;

    // Apply to the test regions.
    let mut det_rows = Vec::new();
    let mut mna_rows = Vec::new();
    let mut dropped_total = 0usize;
    for region in regions.iter().filter(|r| r.plan.subset == Subset::B) {
        let id = &region.plan.region_id;
        let map = dense_inference(
            &network,
            &dense,
            &region.image.to_tensor(),
            config.detect_stride,
        )?;
        if dump_maps {
            save_probability_map(&out.join(format!("{id}_probmap.nnw1")), &map)?;
        }
        let detections = detect_nuclei(&map, &operating_point);
        let measured = measure_at_detections(&map, &detections, &binning)?;
        dropped_total += measured.dropped_low_foreground;
        let n = measured.detections.len();
        let model_mna = if n == 0 {
            None
        } else {
            Some(measured.detections.iter().map(|d| d.area_um2).sum::<f64>() / n as f64)
        };
        for det in &measured.detections {
            det_rows.push(DetectionRow {
                region_id: id.clone(),
                x_px: det.x_px,
                y_px: det.y_px,
                area_um2: det.area_um2,
                p_background: det.p_background,
            });
        }
        mna_rows.push(MnaRow {
            region_id: id.clone(),
            n,
            manual_mna_um2: region.truth.mna_um2()?,
            model_mna_um2: model_mna,
        });
        progress(format!("detect: {id} → {n} nuclei"));
    }
    if mna_rows.is_empty() {
        return Err(Error::Data(format!(
            "cohort at {} has no B regions",
            cohort_dir.display()
        )));
    }

    let detections_path = out.join("detections.csv");
    let mna_path = out.join("mna.csv");
    write_detections_csv(&detections_path, &det_rows)?;
    write_mna_csv(&mna_path, &mna_rows)?;

    let mut manifest = Manifest::new("detect", config);
    manifest.push("tau", operating_point.tau);
    manifest.push("d_min_px", operating_point.d_min_px);
    manifest.push("stride_px", config.detect_stride);
    manifest.push("detections", det_rows.len());
    manifest.push("dropped_low_foreground", dropped_total);
    manifest.input_file("weights.nnw1", weights)?;
    hash_cohort_inputs(&mut manifest, cohort_dir, &regions)?;
    manifest.output_file("detections.csv", &detections_path)?;
    manifest.output_file("mna.csv", &mna_path)?;
    manifest.output_file("sweep.csv", &sweep_path)?;
    manifest.write(&out.join("manifest.txt"))?;
    Ok(())
}

fn write_sweep_csv(path: &Path, rows: &[karyo::detect::SweepRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
    writer
        .write_record(["tau", "mean_abs_error_um2"])
        .map_err(csv_error)?;
    for row in rows {
        writer
            .write_record([
                format!("{}", row.tau),
                format!("{}", row.mean_abs_error_um2),
            ])
            .map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Computes agreement statistics and plots for the available experiments:
/// per-nucleus areas and known-location MNA (from a measure run) and
/// combined-detection MNA (from a detect run).
pub fn cmd_evaluate(
    config: &RunConfig,
    measure_dir: Option<&Path>,
    detect_dir: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<()> {
    if measure_dir.is_none() && detect_dir.is_none() {
        return Err(Error::Config(
            "evaluate needs --measure and/or --detect".into(),
        ));
    }
    prepare_out_dir(out, force)?;

    let mut experiments: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    if let Some(dir) = measure_dir {
        let measurements = read_measurements_csv(&dir.join("measurements.csv"))?;
        let pairs: Vec<(f64, f64)> = measurements
            .iter()
            .map(|r| (r.manual_um2, r.model_um2))
            .collect();
        experiments.push(("individual-nuclei".into(), pairs));
        experiments.push((
            "known-location-mna".into(),
            mna_pairs(&dir.join("mna.csv"))?,
        ));
        inputs.push(("measurements.csv".into(), dir.join("measurements.csv")));
        inputs.push(("measure-mna.csv".into(), dir.join("mna.csv")));
    }
    if let Some(dir) = detect_dir {
        experiments.push(("combined-mna".into(), mna_pairs(&dir.join("mna.csv"))?));
        inputs.push(("detect-mna.csv".into(), dir.join("mna.csv")));
    }

    let mut manifest = Manifest::new("evaluate", config);
    manifest.push(
        "half_width_interpretation",
        "limits of agreement at 1.96·sd",
    );
    let mut stats_rows = Vec::new();
    let mut panel_count = 0usize;
    for (name, pairs) in &experiments {
        let manual: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let auto: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let stats = agreement_stats(&manual, &auto)?;
        let (scatter, ba) = emit_plots(pairs, &stats, &out.join(name))?;
        panel_count += 2;
        manifest.push(&format!("experiment.{name}.n"), stats.n);
        manifest.push(&format!("experiment.{name}.bias_um2"), stats.bias_um2);
        manifest.push(
            &format!("experiment.{name}.half_width_um2"),
            stats.half_width_um2,
        );
        manifest.push(&format!("experiment.{name}.r2"), stats.r_squared);
        manifest.output_file(scatter.file_name().unwrap().to_str().unwrap(), &scatter)?;
        manifest.output_file(ba.file_name().unwrap().to_str().unwrap(), &ba)?;
        progress(format!(
            "evaluate: {name} n {} bias {:.3} half-width {:.3} r2 {:.4}",
            stats.n, stats.bias_um2, stats.half_width_um2, stats.r_squared
        ));
        stats_rows.push((name.clone(), stats));
    }
    manifest.push("panels", panel_count);

    let agreement_path = out.join("agreement.csv");
    emit_agreement_report(&stats_rows, &agreement_path)?;
    for (label, path) in &inputs {
        manifest.input_file(label, path)?;
    }
    manifest.output_file("agreement.csv", &agreement_path)?;
    manifest.write(&out.join("manifest.txt"))?;
    Ok(())
}

/// Extracts `(manual, model)` MNA pairs, rejecting rows that cannot be
/// paired (no model value) and duplicated regions.
fn mna_pairs(path: &Path) -> Result<Vec<(f64, f64)>> {
    let rows = read_mna_csv(path)?;
    let unpaired: Vec<&str> = rows
        .iter()
        .filter(|r| r.model_mna_um2.is_none())
        .map(|r| r.region_id.as_str())
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::Data(format!(
            "{}: unpaired regions (no model MNA): {}",
            path.display(),
            unpaired.join(", ")
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for row in &rows {
        if !seen.insert(row.region_id.as_str()) {
            return Err(Error::Data(format!(
                "{}: duplicate region '{}'",
                path.display(),
                row.region_id
            )));
        }
    }
    Ok(rows
        .iter()
        .map(|r| (r.manual_mna_um2, r.model_mna_um2.unwrap()))
        .collect())
}

// ---------------------------------------------------------------------------
// fcn-convert
// ---------------------------------------------------------------------------

/// Converts trained weights to the fully convolutional form and writes them
/// as `weights_dense.nnw1`.
pub fn cmd_fcn_convert(config: &RunConfig, weights: &Path, out: &Path, force: bool) -> Result<()> {
    prepare_out_dir(out, force)?;
    let params = load_params(weights)?;
    let arch = infer_architecture(&params)?;
    let network = Network::new(arch)?;
    network.validate_params(&params)?;
    let dense = network.convert_to_fully_convolutional(&params)?;

    let dense_path = out.join("weights_dense.nnw1");
    save_params(&dense_path, &dense)?;

    let fc1 = dense.get("fc1.weight").unwrap();
    progress(format!(
        "fcn-convert: fc1.weight {:?} → dense convolution",
        fc1.shape()
    ));
    let mut manifest = Manifest::new("fcn-convert", config);
    manifest.push("num_classes", network.config().num_classes);
    manifest.push("patch_px", network.config().patch_px);
    manifest.input_file("weights.nnw1", weights)?;
    manifest.output_file("weights_dense.nnw1", &dense_path)?;
    manifest.write(&out.join("manifest.txt"))?;
    Ok(())
}
