//! Run configuration: JSON file merged with command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use hetsae::eval::Estimator;
use hetsae::gibbs::Hyperparameters;
use hetsae::models::{ModelKind, ResponseScale};
use hetsae::survey::{DesignKind, GenerationSpec, MeanForm, SizeStandardization};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Fit,
    Simulate,
    Summarize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Direct vs model RMSE per area, from a simulation directory.
    RmseScatter,
    /// Estimate and log posterior sd per area, from a fit directory.
    EstimateMap,
    /// Recompute summary.csv from a fit directory's chains.csv.
    Summary,
}

/// Small area estimation with heteroscedastic variance models.
///
/// Every flag overrides the corresponding field of the JSON file given by
/// `--config`.
#[derive(Debug, Parser)]
#[command(name = "hetsae", version)]
pub struct Flags {
    #[arg(long, value_enum)]
    pub command: Option<Command>,
    /// fh, halm, shalm, pl_bulm or hulm.
    #[arg(long)]
    pub model: Option<String>,
    /// Area or unit CSV for fit; artifact directory for summarize.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Population CSV (unit-level fit prediction, or simulation population).
    #[arg(long)]
    pub population: Option<PathBuf>,
    /// Edge list with an `n=<count>` header.
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long = "burn-in")]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "k-replicates")]
    pub k_replicates: Option<usize>,
    /// stratified_srs or poisson_pps.
    #[arg(long)]
    pub design: Option<String>,
    /// Comma-separated estimator names, e.g. `direct,halm,shalm`.
    #[arg(long)]
    pub estimators: Option<String>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "plot-kind", value_enum)]
    pub plot_kind: Option<PlotKind>,
    /// Comma-separated estimators kept in plot data; an empty string keeps none.
    #[arg(long = "estimator-filter")]
    pub estimator_filter: Option<String>,
}

/// JSON configuration file. Every field is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub command: Option<Command>,
    pub model: Option<String>,
    pub input: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub seed: Option<u64>,
    pub hyper: Option<Hyperparameters>,
    pub icar_jitter: Option<f64>,
    pub constrain_eta2_zero: Option<bool>,
    pub proposal_sd: Option<f64>,
    pub response_scale: Option<ResponseScale>,
    pub level: Option<f64>,
    pub k_replicates: Option<usize>,
    pub design: Option<String>,
    pub n_per_area: Option<usize>,
    pub expected_n: Option<f64>,
    pub size_standardization: Option<SizeStandardization>,
    pub mean_form: Option<MeanForm>,
    pub estimators: Option<Vec<String>>,
    pub parallelism: Option<usize>,
    pub generation: Option<GenerationSpec>,
    pub plot_kind: Option<PlotKind>,
    pub estimator_filter: Option<Vec<String>>,
}

/// Fully merged and checked configuration.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub model: Option<ModelKind>,
    pub input: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub output: PathBuf,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub hyper: Hyperparameters,
    pub icar_jitter: Option<f64>,
    pub constrain_eta2_zero: Option<bool>,
    pub proposal_sd: f64,
    pub response_scale: ResponseScale,
    pub level: f64,
    pub k_replicates: usize,
    pub design: DesignKind,
    pub n_per_area: usize,
    pub expected_n: f64,
    pub size_standardization: SizeStandardization,
    pub mean_form: MeanForm,
    pub estimators: Vec<Estimator>,
    pub parallelism: usize,
    pub generation: GenerationSpec,
    pub plot_kind: Option<PlotKind>,
    pub estimator_filter: Option<Vec<Estimator>>,
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

fn parse_estimators(names: &[String]) -> Result<Vec<Estimator>, CliError> {
    names
        .iter()
        .map(|n| n.parse::<Estimator>().map_err(|e| CliError::validation(format!("--estimators: {e}"))))
        .collect()
}

fn require_file(path: &Option<PathBuf>, flag: &str) -> Result<(), CliError> {
    match path {
        Some(p) if !p.is_file() => Err(CliError::validation(format!("{flag}: file not found: {}", p.display()))),
        _ => Ok(()),
    }
}

fn require_dir(path: &Path, flag: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::validation(format!("{flag}: directory not found: {}", path.display())))
    }
}

impl RunConfig {
    pub fn from_flags(flags: Flags) -> Result<Self, CliError> {
        let file: FileConfig = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::validation(format!("--config {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::validation(format!("--config {}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };

        let command = flags
            .command
            .or(file.command)
            .ok_or_else(|| CliError::validation("--command is required (fit, simulate or summarize)"))?;
        let model = flags
            .model
            .or(file.model)
            .map(|m| m.parse::<ModelKind>().map_err(|e| CliError::validation(format!("--model: {e}"))))
            .transpose()?;
        let design = flags
            .design
            .or(file.design)
            .map(|d| d.parse::<DesignKind>().map_err(|e| CliError::validation(format!("--design: {e}"))))
            .transpose()?
            .unwrap_or(DesignKind::StratifiedSrs);
        let estimators = match (flags.estimators, file.estimators) {
            (Some(s), _) => parse_estimators(&split_list(&s))?,
            (None, Some(v)) => parse_estimators(&v)?,
            (None, None) => vec![Estimator::Direct, Estimator::Model(ModelKind::Halm)],
        };
        let estimator_filter = match (flags.estimator_filter, file.estimator_filter) {
            (Some(s), _) => Some(parse_estimators(&split_list(&s))?),
            (None, Some(v)) => Some(parse_estimators(&v)?),
            (None, None) => None,
        };
        let output = flags
            .output
            .or(file.output)
            .ok_or_else(|| CliError::validation("--output is required"))?;

        let cfg = Self {
            command,
            model,
            input: flags.input.or(file.input),
            population: flags.population.or(file.population),
            adjacency: flags.adjacency.or(file.adjacency),
            output,
            iterations: flags.iterations.or(file.iterations).unwrap_or(3000),
            burn_in: flags.burn_in.or(file.burn_in).unwrap_or(1000),
            thin: flags.thin.or(file.thin).unwrap_or(1),
            seed: flags.seed.or(file.seed).unwrap_or(0),
            hyper: file.hyper.unwrap_or_default(),
            icar_jitter: file.icar_jitter,
            constrain_eta2_zero: file.constrain_eta2_zero,
            proposal_sd: file.proposal_sd.unwrap_or(0.1),
            response_scale: file.response_scale.unwrap_or_default(),
            level: file.level.unwrap_or(0.95),
            k_replicates: flags.k_replicates.or(file.k_replicates).unwrap_or(50),
            design,
            n_per_area: file.n_per_area.unwrap_or(5),
            expected_n: file.expected_n.unwrap_or(1000.0),
            size_standardization: file.size_standardization.unwrap_or_default(),
            mean_form: file.mean_form.unwrap_or_default(),
            estimators,
            parallelism: flags.parallelism.or(file.parallelism).unwrap_or(1),
            generation: file.generation.unwrap_or_default(),
            plot_kind: flags.plot_kind.or(file.plot_kind),
            estimator_filter,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        require_file(&self.input, "--input").or_else(|e| match self.command {
            Command::Summarize => Ok(()),
            _ => Err(e),
        })?;
        require_file(&self.population, "--population")?;
        require_file(&self.adjacency, "--adjacency")?;
        if self.burn_in >= self.iterations {
            return Err(CliError::validation(format!(
                "--burn-in ({}) must be smaller than --iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(CliError::validation("--thin must be at least 1"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CliError::validation("level must be in (0, 1)"));
        }
        self.hyper.validate().map_err(|e| CliError::validation(e.to_string()))?;
        match self.command {
            Command::Fit => {
                let model = self.model.ok_or_else(|| CliError::validation("fit needs --model"))?;
                if self.input.is_none() {
                    return Err(CliError::validation("fit needs --input"));
                }
                if model == ModelKind::Shalm && self.adjacency.is_none() {
                    return Err(CliError::validation("SHALM needs --adjacency"));
                }
                if model.is_unit_level() && self.population.is_none() {
                    return Err(CliError::validation(format!("{model} needs --population for prediction")));
                }
            }
            Command::Simulate => {
                if self.k_replicates == 0 {
                    return Err(CliError::validation("--k-replicates must be at least 1"));
                }
                if self.parallelism == 0 {
                    return Err(CliError::validation("--parallelism must be at least 1"));
                }
                if self.estimators.is_empty() {
                    return Err(CliError::validation("--estimators is empty"));
                }
                self.generation.validate().map_err(|e| CliError::validation(e.to_string()))?;
            }
            Command::Summarize => {
                let input = self.input.as_ref().ok_or_else(|| CliError::validation("summarize needs --input"))?;
                require_dir(input, "--input")?;
                if self.plot_kind.is_none() {
                    return Err(CliError::validation("summarize needs --plot-kind"));
                }
            }
        }
        Ok(())
    }
}
