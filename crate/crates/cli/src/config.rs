//! Experiment documents, one per command. Unknown keys are rejected and
//! schema errors carry the JSON path of the offending field.

use std::fmt;
use std::path::PathBuf;

use dfr_core::analysis::ExperimentGrid;
use dfr_core::dfr::DfrConfig;
use dfr_core::io::EmbeddingFormat;
use dfr_core::mlp::TrainConfig;
use dfr_core::synth::SpuriousSpec;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Overrides the master seed of every command.
pub const SEED_ENV: &str = "DFR_SEED";

/// A config that failed to deserialize.
#[derive(Debug)]
pub struct SchemaError {
    /// JSON path of the offending field, `.` for the document root.
    pub path: String,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "schema violation at {}: {}", self.path, self.message)
    }
}

impl std::error::Error for SchemaError {}

/// Deserializes `text`, reporting the path of the first bad field.
pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T, SchemaError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| SchemaError {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn parse_value<T: DeserializeOwned>(value: serde_json::Value) -> Result<T, SchemaError> {
    serde_path_to_error::deserialize(value).map_err(|e| SchemaError {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// The named synthetic families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    ColorMnist,
    Dominoes,
    WaterbirdsLike,
}

impl Preset {
    pub fn spec(self, p_corr: f64) -> SpuriousSpec {
        match self {
            Self::ColorMnist => SpuriousSpec::color_mnist(p_corr),
            Self::Dominoes => SpuriousSpec::dominoes(p_corr),
            Self::WaterbirdsLike => SpuriousSpec {
                p_corr,
                ..SpuriousSpec::waterbirds_like()
            },
        }
    }
}

/// A synthetic family, either named or spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Preset {
        name: Preset,
        #[serde(default = "default_p_corr")]
        p_corr: f64,
    },
    Custom(SpuriousSpec),
}

fn default_p_corr() -> f64 {
    0.95
}

impl DatasetSource {
    pub fn spec(&self) -> SpuriousSpec {
        match self {
            Self::Preset { name, p_corr } => name.spec(*p_corr),
            Self::Custom(spec) => spec.clone(),
        }
    }

    /// The family with its correlation strength replaced by `p_corr`.
    pub fn at(&self, p_corr: f64) -> SpuriousSpec {
        SpuriousSpec {
            p_corr,
            ..self.spec()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_format")]
    pub format: EmbeddingFormat,
    #[serde(default)]
    pub seed: u64,
}

fn default_format() -> EmbeddingFormat {
    EmbeddingFormat::Binary
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainErmConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractConfig {
    pub model: PathBuf,
    pub inputs: Vec<PathBuf>,
    #[serde(default = "default_format")]
    pub format: EmbeddingFormat,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfrCommandConfig {
    /// Extractor training embeddings; the head data for the train variants.
    pub train: PathBuf,
    /// Held-out reweighting embeddings (usually validation).
    pub reweight: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub dfr: DfrConfig,
    #[serde(default)]
    pub seed: u64,
}

/// What to score: a full extractor or a retrained head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Predictor {
    Model(PathBuf),
    Head(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub predictor: Predictor,
    pub data: PathBuf,
    /// Source of training group counts for the weighted mean; defaults to
    /// `data` itself.
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Suite {
    /// ERM and DFR worst-group accuracy across correlation strengths.
    PCorr {
        dataset: DatasetSource,
        #[serde(default)]
        grid: ExperimentGrid,
    },
    /// One extractor, many DFR seeds per retrain count.
    Retrains {
        dataset: DatasetSource,
        #[serde(default = "default_retrain_grid")]
        n_retrains: Vec<usize>,
        #[serde(default = "default_outer")]
        n_dfr_seeds: usize,
    },
    /// Tuned ℓ1 against no penalty on raw synthetic features.
    L1 {
        dataset: DatasetSource,
        #[serde(default = "default_outer")]
        n_outer_seeds: usize,
    },
    /// DFR variants against the last-layer baselines.
    Methods {
        dataset: DatasetSource,
        #[serde(default = "default_outer")]
        n_outer_seeds: usize,
    },
}

fn default_retrain_grid() -> Vec<usize> {
    dfr_core::analysis::DEFAULT_RETRAIN_GRID.to_vec()
}

fn default_outer() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub suite: Suite,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub dfr: DfrConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Criterion numbers to run; all when absent.
    #[serde(default)]
    pub criteria: Option<Vec<u32>>,
    #[serde(default)]
    pub seed: u64,
}

/// Behaviour shared by every command document.
pub trait Document {
    fn seed_mut(&mut self) -> &mut u64;
    /// Files the command reads, in a fixed order.
    fn inputs(&self) -> Vec<PathBuf>;
}

macro_rules! document {
    ($t:ty, |$c:ident| $inputs:expr) => {
        impl Document for $t {
            fn seed_mut(&mut self) -> &mut u64 {
                &mut self.seed
            }
            fn inputs(&self) -> Vec<PathBuf> {
                let $c = self;
                $inputs
            }
        }
    };
}

document!(GenerateConfig, |_c| Vec::new());
document!(TrainErmConfig, |c| vec![c.train.clone()]);
document!(ExtractConfig, |c| std::iter::once(c.model.clone()).chain(c.inputs.iter().cloned()).collect());
document!(DfrCommandConfig, |c| vec![c.train.clone(), c.reweight.clone(), c.test.clone()]);
document!(EvaluateConfig, |c| {
    let predictor = match &c.predictor {
        Predictor::Model(p) | Predictor::Head(p) => p.clone(),
    };
    std::iter::once(predictor).chain(std::iter::once(c.data.clone())).chain(c.train.clone()).collect()
});
document!(SweepConfig, |_c| Vec::new());
document!(VerifyConfig, |_c| Vec::new());

/// Master seed precedence: environment, then flag, then the document.
pub fn resolve_seed(config_seed: u64, flag: Option<u64>) -> anyhow::Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("{SEED_ENV} must be an unsigned integer, got {v:?}")),
        Err(_) => Ok(flag.unwrap_or(config_seed)),
    }
}
