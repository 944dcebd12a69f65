//! Experiment settings: named profiles overlaid by an optional TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{GenConfig, SplitSpec};
use crate::error::{Error, Result};
use crate::federated::FlConfig;
use crate::neural::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Sized to finish on a laptop in minutes.
    Desk,
    /// Full-size corpus and round budget.
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::invalid(format!("unknown profile `{s}` (known: desk, paper)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub split: SplitSpec,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub fl: FlConfig,
}

impl ExperimentConfig {
    pub fn profile(p: Profile) -> Self {
        let (split, rounds) = match p {
            Profile::Desk => (SplitSpec::desk(), 30),
            Profile::Paper => (SplitSpec::paper(), 100),
        };
        Self {
            seed: 7,
            split,
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            fl: FlConfig {
                rounds,
                ..FlConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.gen.validate()?;
        self.train.validate()?;
        self.fl.validate()
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = o.$src.clone() { $dst = v; })*
            };
        }
        set! {
            seed => self.seed,
            n_train => self.split.n_train,
            n_val => self.split.n_val,
            val_subsets => self.split.val_subsets,
            attack_fraction => self.split.attack_fraction,
            sigma => self.gen.sigma,
            load_variation => self.gen.variation,
            attack_model => self.gen.attack_model,
            attack_magnitude => self.gen.attack.magnitude,
            max_sparsity => self.gen.attack.max_sparsity,
            gross_sigma_mult => self.gen.attack.gross_sigma_mult,
            unstructured_share => self.gen.unstructured_share,
            hidden => self.train.hidden,
            lr => self.train.lr,
            l2 => self.train.l2,
            dropout => self.train.dropout_p,
            batch => self.train.batch_size,
            plateau_factor => self.train.plateau_factor,
            plateau_patience => self.train.plateau_patience,
            clients => self.fl.clients,
            rounds => self.fl.rounds,
            local_epochs => self.fl.local_epochs,
            partition => self.fl.partition,
            label_skew => self.fl.partition_params.label_skew,
            server_update => self.fl.server_update,
            threshold => self.fl.threshold,
            reset_optimizer => self.fl.reset_optimizer,
        }
        if o.stop_f1.is_some() {
            self.fl.stop_f1 = o.stop_f1;
        }
        if o.stop_patience.is_some() {
            self.fl.stop_patience = o.stop_patience;
        }
        self.gen.attack.noise_sigma = self.gen.sigma;
    }
}

/// Every field is optional; unset fields leave the profile value alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_train: Option<usize>,
    pub n_val: Option<usize>,
    pub val_subsets: Option<usize>,
    pub attack_fraction: Option<f64>,
    pub sigma: Option<f64>,
    pub load_variation: Option<f64>,
    pub attack_model: Option<String>,
    pub attack_magnitude: Option<f64>,
    pub max_sparsity: Option<usize>,
    pub gross_sigma_mult: Option<f64>,
    pub unstructured_share: Option<f64>,
    pub hidden: Option<Vec<usize>>,
    pub lr: Option<f64>,
    pub l2: Option<f64>,
    pub dropout: Option<f64>,
    pub batch: Option<usize>,
    pub plateau_factor: Option<f64>,
    pub plateau_patience: Option<usize>,
    pub clients: Option<usize>,
    pub rounds: Option<usize>,
    pub local_epochs: Option<usize>,
    pub partition: Option<String>,
    pub label_skew: Option<f64>,
    pub server_update: Option<String>,
    pub threshold: Option<f64>,
    pub stop_f1: Option<f64>,
    pub stop_patience: Option<usize>,
    pub reset_optimizer: Option<bool>,
}

pub fn parse_overrides(text: &str) -> Result<Overrides> {
    toml::from_str(text).map_err(|e| Error::invalid(format!("config: {}", e.message())))
}

pub fn load_overrides(path: impl AsRef<Path>) -> Result<Overrides> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_overrides(&text)
}
