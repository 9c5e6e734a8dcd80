//! Run configuration: profile defaults, config-file parsing, and overrides.
//!
//! Every tunable is a flat `key = value` entry. A run starts from the
//! selected profile's defaults; entries in the config file and the `--seed`
//! flag override them, and every override is recorded so manifests show
//! exactly what produced an artifact.

use std::path::Path;

use karyo::{Error, Result};

/// Experiment scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Full-scale constants matching the published experiments.
    Paper,
    /// Scaled-down constants that run end to end on a desktop CPU.
    Desk,
}

impl Profile {
    pub fn as_str(&self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!(
                "unknown profile '{other}' (expected paper or desk)"
            ))),
        }
    }
}

/// Resolved configuration for one command invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,

    // Synthetic cohort.
    pub cohort_factor: f64,
    pub image_px: usize,
    pub nuclei_per_region: usize,
    pub sample_n: usize,

    // Architecture.
    pub patch_px: usize,
    pub base_width: usize,

    // Augmentation and background sampling.
    pub replicates: usize,
    pub translation_px: f64,
    pub background_per_region: usize,
    pub background_exclusion_px: f64,

    // Training.
    pub batch_size: usize,
    pub iterations_area: usize,
    pub iterations_combined: usize,
    pub base_lr: f64,
    pub lr_step: usize,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eval_interval: usize,
    pub patience_evals: usize,

    // Detection.
    pub detect_stride: usize,
    pub d_min_px: f64,

    /// Applied overrides (config-file entries and flags), in order.
    pub overrides: Vec<(String, String)>,
}

impl RunConfig {
    /// Profile defaults. Paper values are the published constants; desk
    /// values scale the experiment down to minutes on a CPU while keeping
    /// the 96 px patch architecture unchanged.
    pub fn defaults(profile: Profile) -> Self {
        let common = RunConfig {
            profile,
            seed: 20,
            cohort_factor: 1.0,
            image_px: 1024,
            nuclei_per_region: 250,
            sample_n: 100,
            patch_px: 96,
            base_width: 32,
            replicates: 1000,
            translation_px: 6.0,
            background_per_region: 10_000,
            background_exclusion_px: 10.0,
            batch_size: 256,
            iterations_area: 25_000,
            iterations_combined: 40_000,
            base_lr: 0.01,
            lr_step: 2000,
            lr_factor: 0.9,
            momentum: 0.9,
            weight_decay: 0.001,
            eval_interval: 500,
            patience_evals: 10,
            detect_stride: 4,
            d_min_px: karyo::detect::DEFAULT_D_MIN_PX,
            overrides: Vec::new(),
        };
        match profile {
            Profile::Paper => common,
            Profile::Desk => RunConfig {
                cohort_factor: 1.0 / 7.0, // 6 regions (2/1/3)
                image_px: 512,
                nuclei_per_region: 60,
                sample_n: 50,
                replicates: 200,
                background_per_region: 3000,
                batch_size: 64,
                iterations_area: 2000,
                iterations_combined: 3000,
                detect_stride: 8,
                ..common
            },
        }
    }

    /// Loads a configuration: profile defaults, then config-file entries,
    /// then the seed flag. Each step is recorded in `overrides`.
    pub fn load(profile: Profile, config_path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut config = RunConfig::defaults(profile);
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path)?;
            for (line_no, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{}: expected key = value, got '{raw}'",
                        path.display(),
                        line_no + 1
                    ))
                })?;
                config.set(key.trim(), value.trim())?;
            }
        }
        if let Some(seed) = seed {
            config.set("seed", &seed.to_string())?;
        }
        Ok(config)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "cohort_factor" => self.cohort_factor = parse(key, value)?,
            "image_px" => self.image_px = parse(key, value)?,
            "nuclei_per_region" => self.nuclei_per_region = parse(key, value)?,
            "sample_n" => self.sample_n = parse(key, value)?,
            "patch_px" => self.patch_px = parse(key, value)?,
            "base_width" => self.base_width = parse(key, value)?,
            "replicates" => self.replicates = parse(key, value)?,
            "translation_px" => self.translation_px = parse(key, value)?,
            "background_per_region" => self.background_per_region = parse(key, value)?,
            "background_exclusion_px" => self.background_exclusion_px = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "iterations_area" => self.iterations_area = parse(key, value)?,
            "iterations_combined" => self.iterations_combined = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "lr_step" => self.lr_step = parse(key, value)?,
            "lr_factor" => self.lr_factor = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "patience_evals" => self.patience_evals = parse(key, value)?,
            "detect_stride" => self.detect_stride = parse(key, value)?,
            "d_min_px" => self.d_min_px = parse(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        self.overrides.push((key.to_string(), value.to_string()));
        Ok(())
    }

    /// All resolved settings as `(key, value)` pairs, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let f = |v: f64| format!("{v}");
        vec![
            ("profile".into(), self.profile.as_str().into()),
            ("seed".into(), self.seed.to_string()),
            ("cohort_factor".into(), f(self.cohort_factor)),
            ("image_px".into(), self.image_px.to_string()),
            (
                "nuclei_per_region".into(),
                self.nuclei_per_region.to_string(),
            ),
            ("sample_n".into(), self.sample_n.to_string()),
            ("patch_px".into(), self.patch_px.to_string()),
            ("base_width".into(), self.base_width.to_string()),
            ("replicates".into(), self.replicates.to_string()),
            ("translation_px".into(), f(self.translation_px)),
            (
                "background_per_region".into(),
                self.background_per_region.to_string(),
            ),
            (
                "background_exclusion_px".into(),
                f(self.background_exclusion_px),
            ),
            ("batch_size".into(), self.batch_size.to_string()),
            ("iterations_area".into(), self.iterations_area.to_string()),
            (
                "iterations_combined".into(),
                self.iterations_combined.to_string(),
            ),
            ("base_lr".into(), f(self.base_lr)),
            ("lr_step".into(), self.lr_step.to_string()),
            ("lr_factor".into(), f(self.lr_factor)),
            ("momentum".into(), f(self.momentum)),
            ("weight_decay".into(), f(self.weight_decay)),
            ("eval_interval".into(), self.eval_interval.to_string()),
            ("patience_evals".into(), self.patience_evals.to_string()),
            ("detect_stride".into(), self.detect_stride.to_string()),
            ("d_min_px".into(), f(self.d_min_px)),
        ]
    }
}
