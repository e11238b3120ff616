//! The fit, simulate and summarize commands.
//!
//! Each command first loads and checks every input, then creates the output
//! directory and writes artifacts, so validation failures leave no files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use hetsae::eval::{run_replication_study, DesignSpec, Estimator, StudyConfig};
use hetsae::models::{fit, summarize_area_draws, AreaScale, FitConfig, FitData, ModelKind, PosteriorDraws};
use hetsae::rng::stream;
use hetsae::stats::effective_sample_size;
use hetsae::survey::{generate_population, SyntheticPopulation, TrueParameters};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{Command, PlotKind, RunConfig};
use crate::io::{fmt_f64, read_adjacency, read_area_dataset, read_unit_dataset, with_intercept, write_csv, Table};
use crate::CliError;

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    match cfg.command {
        Command::Fit => run_fit(cfg),
        Command::Simulate => run_simulate(cfg),
        Command::Summarize => run_summarize(cfg),
    }
}

fn create_output(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EssEntry {
    pub parameter: String,
    pub index: usize,
    pub ess: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub model: ModelKind,
    pub seed: u64,
    pub retained: usize,
    pub acceptance_rate: Option<f64>,
    pub final_proposal_sd: f64,
    pub clamp_count: u64,
    pub area_parameter: String,
    pub area_ids: Vec<String>,
    pub level: f64,
    pub ess: Vec<EssEntry>,
    pub config: serde_json::Value,
}

fn fit_config(cfg: &RunConfig, model: ModelKind) -> FitConfig {
    let mut fc = FitConfig::new(model);
    fc.iterations = cfg.iterations;
    fc.burn_in = cfg.burn_in;
    fc.thin = cfg.thin;
    fc.seed = cfg.seed;
    fc.hyper = cfg.hyper;
    fc.icar_jitter = cfg.icar_jitter;
    fc.constrain_eta2_zero = cfg.constrain_eta2_zero.unwrap_or(false);
    fc.proposal_sd = cfg.proposal_sd;
    fc
}

fn run_fit(cfg: &RunConfig) -> Result<(), CliError> {
    let model = cfg.model.expect("validated");
    let input = cfg.input.as_deref().expect("validated");
    let mut fc = fit_config(cfg, model);

    enum Loaded {
        Area(hetsae::models::AreaDataset),
        Unit(hetsae::models::UnitDataset),
    }
    let data = if model.is_unit_level() {
        let pop = cfg.population.as_deref().expect("validated");
        Loaded::Unit(read_unit_dataset(input, pop, cfg.response_scale)?)
    } else {
        let area = read_area_dataset(input)?;
        if model == ModelKind::Shalm {
            let path = cfg.adjacency.as_deref().expect("validated");
            fc.graph = Some(read_adjacency(path, Some(area.d()))?);
        }
        Loaded::Area(area)
    };
    fc.validate().map_err(CliError::from_core_validation)?;

    create_output(&cfg.output)?;
    let draws = match &data {
        Loaded::Area(a) => fit(FitData::Area(a), &fc),
        Loaded::Unit(u) => fit(FitData::Unit(u), &fc),
    }
    .map_err(CliError::from_core_runtime)?;
    write_fit_artifacts(cfg, &draws)
}

fn write_fit_artifacts(cfg: &RunConfig, draws: &PosteriorDraws) -> Result<(), CliError> {
    let series = draws.series();
    let mut rows = Vec::with_capacity(series.len() * draws.retained());
    for (t, &it) in draws.iterations.iter().enumerate() {
        for s in &series {
            rows.push(vec![it.to_string(), s.name.to_string(), s.index.to_string(), fmt_f64(s.values[t])]);
        }
    }
    write_csv(&cfg.output.join("chains.csv"), &["iteration", "parameter", "index", "value"], rows)?;

    let summary = hetsae::models::summarize_posterior(draws, cfg.level).map_err(CliError::from_core_runtime)?;
    write_summary(&cfg.output.join("summary.csv"), &summary)?;

    let diagnostics = FitDiagnostics {
        model: draws.model,
        seed: cfg.seed,
        retained: draws.retained(),
        acceptance_rate: draws.acceptance_rate,
        final_proposal_sd: draws.proposal_sd,
        clamp_count: draws.clamp_count,
        area_parameter: draws.area_parameter().to_string(),
        area_ids: draws.area_ids.clone(),
        level: cfg.level,
        ess: series
            .iter()
            .map(|s| EssEntry { parameter: s.name.to_string(), index: s.index, ess: effective_sample_size(&s.values) })
            .collect(),
        config: serde_json::to_value(cfg).map_err(|e| CliError::runtime(e.to_string()))?,
    };
    write_json(&cfg.output.join("diagnostics.json"), &diagnostics)
}

fn write_summary(path: &Path, summary: &[hetsae::models::AreaSummary]) -> Result<(), CliError> {
    write_csv(
        path,
        &["area_id", "estimate", "lower", "upper", "sd"],
        summary.iter().map(|s| {
            vec![s.area_id.clone(), fmt_f64(s.estimate), fmt_f64(s.lower), fmt_f64(s.upper), fmt_f64(s.sd)]
        }),
    )
}

/// Population CSV: `area_id, y, w`, then covariates. `y` is the positive
/// response whose area means are the estimation targets.
fn read_population(path: &Path) -> Result<SyntheticPopulation, CliError> {
    let t = Table::read(path)?;
    let cols: Vec<usize> = ["area_id", "y", "w"].iter().map(|c| t.column(c)).collect::<Result<_, _>>()?;
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut area_index = Vec::with_capacity(t.rows.len());
    let (mut y, mut w) = (Vec::new(), Vec::new());
    for r in 0..t.rows.len() {
        let next = lookup.len();
        area_index.push(*lookup.entry(t.str_at(r, cols[0]).to_string()).or_insert(next));
        let v = t.f64_at(r, cols[1])?;
        let wt = t.f64_at(r, cols[2])?;
        if v <= 0.0 || wt <= 0.0 {
            return Err(CliError::validation(format!(
                "{}: row {}: y and w must be positive",
                path.display(),
                r + 2
            )));
        }
        y.push(v);
        w.push(wt);
    }
    let d = lookup.len();
    let mut cov = t.covariate_columns(&["area_id", "y", "w"]);
    cov.sort_unstable();
    let mut x = DMatrix::zeros(t.rows.len(), cov.len());
    for r in 0..t.rows.len() {
        for (c, &j) in cov.iter().enumerate() {
            x[(r, c)] = t.f64_at(r, j)?;
        }
    }
    let x = with_intercept(x);
    let mut sizes = vec![0usize; d];
    let mut sums = vec![0.0; d];
    for (&k, &v) in area_index.iter().zip(&y) {
        sizes[k] += 1;
        sums[k] += v;
    }
    let area_means = sums.iter().zip(&sizes).map(|(s, &n)| s / n as f64).collect();
    Ok(SyntheticPopulation {
        n_areas: d,
        area_index,
        x,
        base_weight: w,
        y_income: y,
        area_sizes: sizes,
        graph: None,
        truth: TrueParameters {
            beta_mean: DVector::zeros(0),
            beta_var: DVector::zeros(0),
            u: DVector::zeros(0),
            v: DVector::zeros(0),
            area_means,
        },
    })
}

#[derive(Debug, Serialize)]
struct SimulationReport<'a> {
    replicates_requested: usize,
    replicates_used: usize,
    failures: &'a [hetsae::eval::ReplicateFailure],
    area_ids: Vec<String>,
    truth: &'a [f64],
    config: serde_json::Value,
}

fn run_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let mut pop = match &cfg.population {
        Some(path) => read_population(path)?,
        None => generate_population(&cfg.generation, &mut stream(cfg.seed, u64::MAX))
            .map_err(CliError::from_core_validation)?,
    };
    if let Some(path) = &cfg.adjacency {
        pop.graph = Some(read_adjacency(path, Some(pop.n_areas))?);
    }
    if cfg.estimators.contains(&Estimator::Model(ModelKind::Shalm)) && pop.graph.is_none() {
        return Err(CliError::validation("SHALM needs --adjacency with a population file"));
    }
    let mut fit_template = fit_config(cfg, ModelKind::Halm);
    fit_template.constrain_eta2_zero = cfg.constrain_eta2_zero.unwrap_or(true);
    let study = StudyConfig {
        design: DesignSpec {
            kind: cfg.design,
            n_per_area: cfg.n_per_area,
            expected_n: cfg.expected_n,
            size_standardization: cfg.size_standardization,
            mean_form: cfg.mean_form,
        },
        estimators: cfg.estimators.clone(),
        k: cfg.k_replicates,
        base_seed: cfg.seed,
        parallelism: cfg.parallelism,
        fit: fit_template,
        level: cfg.level,
    };
    study.validate().map_err(CliError::from_core_validation)?;

    create_output(&cfg.output)?;
    let out = run_replication_study(&pop, &study).map_err(CliError::from_core_runtime)?;
    let table = &out.table;
    let area_ids = pop.area_ids_or_labels();

    let requested = |e: &Estimator| cfg.estimators.contains(e);
    write_csv(
        &cfg.output.join("metrics.csv"),
        &["estimator", "rel_rmse", "abs_bias", "cov_rate", "int_score"],
        table.estimators.iter().filter(|m| requested(&m.estimator)).map(|m| {
            vec![m.estimator.to_string(), fmt_f64(m.rel_rmse), fmt_f64(m.abs_bias), fmt_f64(m.cov_rate), fmt_f64(m.int_score)]
        }),
    )?;
    write_csv(
        &cfg.output.join("per_area_rmse.csv"),
        &["area_id", "direct_rmse", "estimator", "model_rmse"],
        table.per_area.iter().filter(|a| requested(&a.estimator)).map(|a| {
            vec![a.area_id.clone(), fmt_f64(a.direct_rmse), a.estimator.to_string(), fmt_f64(a.rmse)]
        }),
    )?;
    let mut rows = Vec::new();
    for rep in &out.replicates {
        let all = std::iter::once((Estimator::Direct, &rep.direct)).chain(rep.estimates.iter().map(|(e, a)| (*e, a)));
        for (est, iv) in all {
            for j in 0..area_ids.len() {
                rows.push(vec![
                    rep.k.to_string(),
                    area_ids[j].clone(),
                    est.to_string(),
                    fmt_f64(iv.point[j]),
                    fmt_f64(iv.lower[j]),
                    fmt_f64(iv.upper[j]),
                    fmt_f64(rep.truth[j]),
                ]);
            }
        }
    }
    write_csv(
        &cfg.output.join("replicates.csv"),
        &["replicate", "area_id", "estimator", "point", "lower", "upper", "truth"],
        rows,
    )?;
    write_json(
        &cfg.output.join("simulation.json"),
        &SimulationReport {
            replicates_requested: cfg.k_replicates,
            replicates_used: table.replicates_used,
            failures: &table.failures,
            area_ids,
            truth: &pop.truth.area_means,
            config: serde_json::to_value(cfg).map_err(|e| CliError::runtime(e.to_string()))?,
        },
    )
}

trait AreaLabels {
    fn area_ids_or_labels(&self) -> Vec<String>;
}

impl AreaLabels for SyntheticPopulation {
    fn area_ids_or_labels(&self) -> Vec<String> {
        self.area_ids()
    }
}

fn run_summarize(cfg: &RunConfig) -> Result<(), CliError> {
    let input = cfg.input.as_deref().expect("validated");
    let kind = cfg.plot_kind.expect("validated");
    let keep = |name: &str| -> bool {
        match &cfg.estimator_filter {
            None => true,
            Some(list) => list.iter().any(|e| e.name() == name),
        }
    };
    match kind {
        PlotKind::RmseScatter => {
            let t = Table::read(&input.join("per_area_rmse.csv"))?;
            let (a, x, e, y) =
                (t.column("area_id")?, t.column("direct_rmse")?, t.column("estimator")?, t.column("model_rmse")?);
            let mut rows = Vec::new();
            for r in 0..t.rows.len() {
                if keep(t.str_at(r, e)) {
                    rows.push(vec![
                        t.str_at(r, a).to_string(),
                        t.str_at(r, x).to_string(),
                        t.str_at(r, y).to_string(),
                        t.str_at(r, e).to_string(),
                    ]);
                }
            }
            create_output(&cfg.output)?;
            write_csv(&cfg.output.join("rmse_scatter.csv"), &["area_id", "x", "y", "estimator"], rows)
        }
        PlotKind::EstimateMap => {
            let t = Table::read(&input.join("summary.csv"))?;
            let (a, est, sd) = (t.column("area_id")?, t.column("estimate")?, t.column("sd")?);
            let mut rows = Vec::new();
            for r in 0..t.rows.len() {
                rows.push(vec![t.str_at(r, a).to_string(), t.str_at(r, est).to_string(), fmt_f64(t.f64_at(r, sd)?.ln())]);
            }
            create_output(&cfg.output)?;
            write_csv(&cfg.output.join("estimate_map.csv"), &["area_id", "estimate", "log_se"], rows)
        }
        PlotKind::Summary => {
            let path = input.join("diagnostics.json");
            let text = fs::read_to_string(&path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
            let diag: FitDiagnostics =
                serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
            let t = Table::read(&input.join("chains.csv"))?;
            let (p, i, v) = (t.column("parameter")?, t.column("index")?, t.column("value")?);
            let d = diag.area_ids.len();
            let mut cols: Vec<Vec<f64>> = vec![Vec::new(); d];
            for r in 0..t.rows.len() {
                if t.str_at(r, p) == diag.area_parameter {
                    let j = t.usize_at(r, i)?;
                    if j >= d {
                        return Err(CliError::validation(format!("chains.csv row {}: area index {j} out of range", r + 2)));
                    }
                    cols[j].push(t.str_at(r, v).parse().map_err(|_| CliError::validation("bad value in chains.csv"))?);
                }
            }
            let s = cols.first().map_or(0, Vec::len);
            if cols.iter().any(|c| c.len() != s) {
                return Err(CliError::validation("chains.csv has ragged area series"));
            }
            let area = DMatrix::from_fn(s, d, |r, j| cols[j][r]);
            let scale = if diag.area_parameter == "theta" { AreaScale::Log } else { AreaScale::Original };
            let summary = summarize_area_draws(&area, scale, &diag.area_ids, diag.level).map_err(CliError::from_core_validation)?;
            create_output(&cfg.output)?;
            write_summary(&cfg.output.join("summary.csv"), &summary)
        }
    }
}
