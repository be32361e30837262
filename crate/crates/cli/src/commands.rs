//! The seven commands. Each reads a validated document, writes artifacts under
//! the output directory and returns; [`execute`] adds the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use dfr_core::analysis::{
    ablation_l1, ablation_retrains, compare_methods, erm_run, head_metrics, median, model_metrics, pcorr_sweep,
    run_seeds, ExperimentGrid, L1Pair, MethodComparison, RetrainsTable, Summary,
};
use dfr_core::data::{EmbeddingDataset, GroupSchema};
use dfr_core::dfr::{run_dfr, DfrConfig};
use dfr_core::io::{load_embeddings, save_embeddings, EmbeddingFormat};
use dfr_core::mlp::{extract_features, train_erm, MlpModel, TrainConfig};
use dfr_core::solver::LinearHead;
use dfr_core::synth::generate;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{
    self, DfrCommandConfig, Document, EvaluateConfig, ExtractConfig, GenerateConfig, Predictor, Suite, SweepConfig,
    TrainErmConfig, VerifyConfig,
};
use crate::manifest::{digest, Artifacts, Manifest, Versions, MANIFEST_FILE};
use crate::verify;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    TrainErm,
    Extract,
    Dfr,
    Evaluate,
    Sweep,
    Verify,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Self::Generate,
        Self::TrainErm,
        Self::Extract,
        Self::Dfr,
        Self::Evaluate,
        Self::Sweep,
        Self::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Generate => "generate",
            Self::TrainErm => "train-erm",
            Self::Extract => "extract",
            Self::Dfr => "dfr",
            Self::Evaluate => "evaluate",
            Self::Sweep => "sweep",
            Self::Verify => "verify",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Where a command's document comes from.
#[derive(Debug, Clone)]
pub enum Source {
    Config(PathBuf),
    Manifest(PathBuf),
    /// Only `verify` has a meaningful empty document.
    Default,
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub source: Source,
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
}

/// What a finished command reports back to the caller.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: Manifest,
    /// False when `verify` saw a hard failure.
    pub passed: bool,
}

/// Loads and validates the document, runs the command, writes the manifest.
pub fn execute(inv: &Invocation) -> Result<Outcome> {
    let value = load_document(inv)?;
    match inv.command {
        Command::Generate => run_typed::<GenerateConfig>(inv, value, cmd_generate),
        Command::TrainErm => run_typed::<TrainErmConfig>(inv, value, cmd_train_erm),
        Command::Extract => run_typed::<ExtractConfig>(inv, value, cmd_extract),
        Command::Dfr => run_typed::<DfrCommandConfig>(inv, value, cmd_dfr),
        Command::Evaluate => run_typed::<EvaluateConfig>(inv, value, cmd_evaluate),
        Command::Sweep => run_typed::<SweepConfig>(inv, value, cmd_sweep),
        Command::Verify => run_typed::<VerifyConfig>(inv, value, cmd_verify),
    }
}

fn load_document(inv: &Invocation) -> Result<serde_json::Value> {
    match &inv.source {
        Source::Config(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| {
                config::SchemaError {
                    path: ".".into(),
                    message: e.to_string(),
                }
                .into()
            })
        }
        Source::Manifest(path) => {
            let manifest = Manifest::load(path)?;
            if manifest.command != inv.command.name() {
                bail!(
                    "manifest {} records command {:?}, not {:?}",
                    path.display(),
                    manifest.command,
                    inv.command.name()
                );
            }
            manifest.check_inputs()?;
            Ok(manifest.config)
        }
        Source::Default if inv.command == Command::Verify => Ok(serde_json::json!({})),
        Source::Default => bail!("{} needs --config or --manifest", inv.command.name()),
    }
}

fn run_typed<T>(
    inv: &Invocation,
    value: serde_json::Value,
    run: fn(&T, &mut Artifacts) -> Result<bool>,
) -> Result<Outcome>
where
    T: DeserializeOwned + Serialize + Document,
{
    let mut doc: T = config::parse_value(value)?;
    let seed = config::resolve_seed(*doc.seed_mut(), inv.seed)?;
    *doc.seed_mut() = seed;
    let inputs = doc
        .inputs()
        .iter()
        .map(|p| digest(p))
        .collect::<Result<Vec<_>>>()?;
    let mut artifacts = Artifacts::new(&inv.output_dir)?;
    let passed = run(&doc, &mut artifacts)?;
    let manifest = Manifest {
        command: inv.command.name().to_string(),
        versions: Versions::current(),
        seed,
        config: serde_json::to_value(&doc)?,
        inputs,
        outputs: artifacts.digests()?,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = inv.output_dir.join(MANIFEST_FILE);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(Outcome { manifest, passed })
}

fn load(path: &Path) -> Result<EmbeddingDataset> {
    load_embeddings(path, EmbeddingFormat::from_path(path)).with_context(|| format!("loading {}", path.display()))
}

fn load_model(path: &Path) -> Result<MlpModel> {
    let bytes = fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    MlpModel::decode(&bytes).with_context(|| format!("decoding model {}", path.display()))
}

fn load_head(path: &Path) -> Result<LinearHead> {
    let bytes = fs::read(path).with_context(|| format!("reading head {}", path.display()))?;
    LinearHead::decode(&bytes).with_context(|| format!("decoding head {}", path.display()))
}

fn save(artifacts: &mut Artifacts, stem: &str, data: &EmbeddingDataset, format: EmbeddingFormat) -> Result<()> {
    let path = artifacts.path(&format!("{stem}.{}", format.extension()))?;
    save_embeddings(data, &path, format).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct Blocks {
    core_dim: usize,
    spurious_dim: usize,
    n_attributes: usize,
    spec: dfr_core::synth::SpuriousSpec,
}

/// Synthetic train/val/test splits plus their block layout.
pub fn cmd_generate(cfg: &GenerateConfig, out: &mut Artifacts) -> Result<bool> {
    let spec = cfg.dataset.spec();
    let (train, val, test) = generate(&spec, cfg.seed)?;
    for (stem, raw) in [("train", &train), ("val", &val), ("test", &test)] {
        save(out, stem, &raw.data, cfg.format)?;
    }
    out.write_json(
        "blocks.json",
        &Blocks {
            core_dim: train.core_dim,
            spurious_dim: train.data.dim() - train.core_dim,
            n_attributes: train.n_attributes,
            spec,
        },
    )?;
    Ok(true)
}

#[derive(Serialize)]
struct TrainingLog {
    layer_sizes: Vec<usize>,
    n_params: usize,
    epoch_losses: Vec<f64>,
}

pub fn cmd_train_erm(cfg: &TrainErmConfig, out: &mut Artifacts) -> Result<bool> {
    let train = load(&cfg.train)?;
    let config = TrainConfig {
        seed: cfg.seed,
        ..cfg.training.clone()
    };
    let outcome = train_erm(&train, &config)?;
    out.write("model.dfrm", &outcome.model.encode())?;
    out.write_json(
        "training.json",
        &TrainingLog {
            layer_sizes: outcome.model.sizes(),
            n_params: outcome.model.n_params(),
            epoch_losses: outcome.epoch_losses,
        },
    )?;
    Ok(true)
}

/// Penultimate-layer features of each input, named `<stem>.features.<ext>`.
pub fn cmd_extract(cfg: &ExtractConfig, out: &mut Artifacts) -> Result<bool> {
    let model = load_model(&cfg.model)?;
    for input in &cfg.inputs {
        let data = load(input)?;
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("input {} has no file name", input.display()))?;
        let feats = extract_features(&model, &data)?;
        save(out, &format!("{stem}.features"), &feats, cfg.format)?;
    }
    Ok(true)
}

pub fn cmd_dfr(cfg: &DfrCommandConfig, out: &mut Artifacts) -> Result<bool> {
    let train = load(&cfg.train)?;
    let reweight = load(&cfg.reweight)?;
    let test = load(&cfg.test)?;
    let schema = GroupSchema::infer(&train, &[&reweight, &test])?;
    let config = DfrConfig {
        seed: cfg.seed,
        ..cfg.dfr.clone()
    };
    let result = run_dfr(&train, &reweight, &test, &schema, &config)?;
    out.write_json("dfr_result.json", &result)?;
    out.write("head.dfrh", &result.head.encode())?;
    Ok(true)
}

pub fn cmd_evaluate(cfg: &EvaluateConfig, out: &mut Artifacts) -> Result<bool> {
    let data = load(&cfg.data)?;
    let schema = match &cfg.train {
        Some(path) => GroupSchema::infer(&load(path)?, &[&data])?,
        None => GroupSchema::infer(&data, &[])?,
    };
    let metrics = match &cfg.predictor {
        Predictor::Model(path) => model_metrics(&load_model(path)?, &data, &schema)?,
        Predictor::Head(path) => head_metrics(&load_head(path)?, &data, &schema)?,
    };
    out.write_json("metrics.json", &metrics)?;
    Ok(true)
}

#[derive(Serialize)]
struct L1Report {
    with_l1: Summary,
    without_penalty: Summary,
    pairs: Vec<L1Pair>,
}

#[derive(Serialize)]
struct MethodsReport {
    median: MethodMedians,
    runs: Vec<MethodComparison>,
}

#[derive(Serialize)]
struct MethodMedians {
    dfr_val: f64,
    dfr_train: f64,
    group_sampling_train: f64,
    group_sampling_val: f64,
    crt_train: f64,
    lws_train: f64,
}

fn outer_seeds(first: u64, n: usize) -> Vec<u64> {
    (first..first + n as u64).collect()
}

/// Runs one analysis suite; outer seeds start at the master seed.
pub fn cmd_sweep(cfg: &SweepConfig, out: &mut Artifacts) -> Result<bool> {
    match &cfg.suite {
        Suite::PCorr { dataset, grid } => {
            let grid = ExperimentGrid {
                first_seed: cfg.seed,
                ..grid.clone()
            };
            let report = pcorr_sweep(&grid, |p| dataset.at(p), &cfg.training, &cfg.dfr)?;
            out.write_json("report.json", &report)?;
            out.write("report.csv", report.to_csv().as_bytes())?;
        }
        Suite::Retrains {
            dataset,
            n_retrains,
            n_dfr_seeds,
        } => {
            let run = erm_run(&dataset.spec(), &cfg.training, cfg.seed)?;
            let feats = |d: &EmbeddingDataset| extract_features(&run.model, d);
            let (train, val, test) = (feats(&run.train.data)?, feats(&run.val.data)?, feats(&run.test.data)?);
            let seeds: Vec<u64> = outer_seeds(cfg.seed, *n_dfr_seeds)
                .into_iter()
                .map(|s| run_seeds(s).2)
                .collect();
            let table: RetrainsTable = ablation_retrains(&train, &val, &test, &run.schema, &cfg.dfr, n_retrains, &seeds)?;
            out.write_json("report.json", &table)?;
            out.write("report.csv", table.to_csv().as_bytes())?;
        }
        Suite::L1 { dataset, n_outer_seeds } => {
            let spec = dataset.spec();
            let pairs = outer_seeds(cfg.seed, *n_outer_seeds)
                .into_iter()
                .map(|s| l1_pair(&spec, &cfg.dfr, s))
                .collect::<Result<Vec<_>>>()?;
            let mut csv = String::from("seed,with_l1,without_penalty,chosen_C\n");
            for p in &pairs {
                csv.push_str(&format!("{},{},{},{}\n", p.seed, p.with_l1, p.without_penalty, p.chosen_c));
            }
            let report = L1Report {
                with_l1: Summary::of(&pairs.iter().map(|p| p.with_l1).collect::<Vec<_>>()),
                without_penalty: Summary::of(&pairs.iter().map(|p| p.without_penalty).collect::<Vec<_>>()),
                pairs,
            };
            out.write_json("report.json", &report)?;
            out.write("report.csv", csv.as_bytes())?;
        }
        Suite::Methods { dataset, n_outer_seeds } => {
            let spec = dataset.spec();
            let runs = outer_seeds(cfg.seed, *n_outer_seeds)
                .into_iter()
                .map(|s| compare_methods(&spec, &cfg.training, &cfg.dfr, s))
                .collect::<dfr_core::Result<Vec<_>>>()?;
            let mut csv = format!("{}\n", MethodComparison::CSV_HEADER);
            for r in &runs {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            let report = MethodsReport {
                median: method_medians(&runs),
                runs,
            };
            out.write_json("report.json", &report)?;
            out.write("report.csv", csv.as_bytes())?;
        }
    }
    Ok(true)
}

/// Tuned ℓ1 against no penalty with the raw synthetic inputs as features.
pub fn l1_pair(spec: &dfr_core::synth::SpuriousSpec, dfr: &DfrConfig, seed: u64) -> Result<L1Pair> {
    let (data_seed, _, dfr_seed) = run_seeds(seed);
    let (train, val, test) = generate(spec, data_seed)?;
    let schema = GroupSchema::infer(&train.data, &[&val.data, &test.data])?;
    let config = DfrConfig {
        seed: dfr_seed,
        ..dfr.clone()
    };
    let mut pair = ablation_l1(&train.data, &val.data, &test.data, &schema, &config)?;
    pair.seed = seed;
    Ok(pair)
}

fn method_medians(runs: &[MethodComparison]) -> MethodMedians {
    let m = |f: fn(&MethodComparison) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    MethodMedians {
        dfr_val: m(|r| r.dfr_val),
        dfr_train: m(|r| r.dfr_train),
        group_sampling_train: m(|r| r.group_sampling_train),
        group_sampling_val: m(|r| r.group_sampling_val),
        crt_train: m(|r| r.crt_train),
        lws_train: m(|r| r.lws_train),
    }
}

/// Runs the acceptance criteria; `false` when a hard check failed.
pub fn cmd_verify(cfg: &VerifyConfig, out: &mut Artifacts) -> Result<bool> {
    let quiet = verify::nested();
    let report = verify::run(cfg.criteria.as_deref(), cfg.seed, &mut |line| {
        if !quiet {
            println!("{line}")
        }
    })?;
    out.write_json("verify.json", &report)?;
    Ok(report.passed())
}
