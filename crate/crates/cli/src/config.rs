//! The run description read from a flat TOML file.

use std::path::PathBuf;

use epitoken::backbone::{BackboneConfig, BackboneMode};
use epitoken::epidata::{DatasetOptions, Normalization, SirParams, SplitSpec};
use epitoken::model::{ModelConfig, Variant};
use epitoken::trainer::{LossForm, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every key is optional; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `date,region_id,new_cases` file; the synthetic generator is used when unset.
    pub cases_path: Option<PathBuf>,
    /// `date,src_region,dst_region,weight` file.
    pub mobility_path: Option<PathBuf>,
    /// Label used in reports; matched against the bundled reference table.
    pub dataset_name: String,

    pub synth_regions: usize,
    pub synth_days: usize,
    pub synth_beta: f64,
    pub synth_gamma: f64,
    pub synth_seed_region: usize,
    pub synth_population: u64,
    pub synth_initial_infected: u64,

    pub window: usize,
    pub horizon: usize,
    /// Derived from `horizon / window` when unset.
    pub steps: Option<usize>,
    pub test_len: Option<usize>,
    pub val_len: Option<usize>,
    pub epsilon: f64,
    pub normalize: Normalization,

    pub backbone: BackboneMode,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub max_positions: usize,
    pub backbone_seed: u64,
    /// Stem of a `.bin` + `.json` weight file replacing the seeded backbone.
    pub backbone_weights: Option<PathBuf>,
    pub mob_hidden: Option<usize>,
    pub variant: Variant,
    /// Variants run by `ablate`; all of them when empty.
    pub variants: Vec<Variant>,

    pub lambda: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss_form: LossForm,

    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Stem of the model checkpoint; `<out_dir>/model` when unset.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sir = SirParams::default();
        let train = TrainConfig::default();
        let backbone = BackboneConfig::default();
        Self {
            cases_path: None,
            mobility_path: None,
            dataset_name: "synthetic".into(),
            synth_regions: 10,
            synth_days: 60,
            synth_beta: sir.beta,
            synth_gamma: sir.gamma,
            synth_seed_region: sir.seed_region,
            synth_population: sir.population,
            synth_initial_infected: sir.initial_infected,
            window: 3,
            horizon: 3,
            steps: None,
            test_len: None,
            val_len: None,
            epsilon: 0.0,
            normalize: Normalization::PerRegionMax,
            backbone: backbone.mode,
            width: backbone.width,
            heads: backbone.heads,
            depth: backbone.depth,
            max_positions: backbone.max_positions,
            backbone_seed: backbone.seed,
            backbone_weights: None,
            mob_hidden: None,
            variant: Variant::Full,
            variants: Vec::new(),
            lambda: train.lambda,
            lr: train.lr,
            max_epochs: train.max_epochs,
            patience: train.patience,
            loss_form: train.loss_form,
            seed: 0,
            out_dir: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Fills derived keys and checks cross-key rules.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        if self.window == 0 {
            return Err(CliError::Config("window must be at least 1".into()));
        }
        if self.horizon == 0 || !self.horizon.is_multiple_of(self.window) {
            return Err(CliError::Config(format!(
                "horizon {} is not a positive multiple of window {}",
                self.horizon, self.window
            )));
        }
        let steps = self.horizon / self.window;
        match self.steps {
            Some(s) if s != steps => {
                return Err(CliError::Config(format!(
                    "steps = {s} contradicts horizon {} / window {} = {steps}",
                    self.horizon, self.window
                )))
            }
            _ => self.steps = Some(steps),
        }
        self.test_len.get_or_insert(self.horizon);
        self.val_len.get_or_insert(self.window);
        self.mob_hidden.get_or_insert(self.width);
        if self.test_len < Some(self.horizon) {
            return Err(CliError::Config(format!(
                "test_len {} is shorter than the horizon {}",
                self.test_len.unwrap_or(0),
                self.horizon
            )));
        }
        match (&self.cases_path, &self.mobility_path) {
            (Some(c), Some(m)) => {
                for p in [c, m] {
                    if !p.exists() {
                        return Err(CliError::Io {
                            path: p.clone(),
                            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
                        });
                    }
                }
            }
            (None, None) => {}
            _ => return Err(CliError::Config("cases_path and mobility_path must be given together".into())),
        }
        self.model_config().validate()?;
        self.train_config().validate()?;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.steps.unwrap_or(self.horizon / self.window)
    }

    pub fn sir_params(&self) -> SirParams {
        SirParams {
            beta: self.synth_beta,
            gamma: self.synth_gamma,
            seed_region: self.synth_seed_region,
            population: self.synth_population,
            initial_infected: self.synth_initial_infected,
        }
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            window: self.window,
            epsilon: self.epsilon,
            normalize: self.normalize,
            scale_days: None,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec::new(self.test_len.unwrap_or(self.horizon), self.val_len.unwrap_or(self.window))
    }

    /// Model config for `self.variant`; the region count is filled once data is loaded.
    pub fn model_config(&self) -> ModelConfig {
        self.model_config_for(self.regions_hint(), self.variant)
    }

    pub fn model_config_for(&self, regions: usize, variant: Variant) -> ModelConfig {
        let backbone = BackboneConfig {
            mode: self.backbone,
            depth: self.depth,
            width: self.width,
            heads: self.heads,
            max_positions: self.max_positions,
            seed: self.backbone_seed,
        };
        let mut cfg = ModelConfig::new(regions, self.window, backbone, self.seed);
        cfg.mob_hidden = self.mob_hidden.unwrap_or(self.width);
        variant.apply(&cfg)
    }

    fn regions_hint(&self) -> usize {
        self.synth_regions.max(1)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            lr: self.lr,
            max_epochs: self.max_epochs,
            patience: self.patience,
            loss_form: self.loss_form,
        }
    }

    pub fn ablation_variants(&self) -> Vec<Variant> {
        if self.variants.is_empty() {
            Variant::ALL.to_vec()
        } else {
            self.variants.clone()
        }
    }
}
