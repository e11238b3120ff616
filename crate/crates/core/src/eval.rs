//! Scoring metrics and the replication harness.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    fit, summarize_posterior, AreaDataset, FitConfig, FitData, ModelKind, PopulationTable, ResponseScale,
    UnitDataset,
};
use crate::rng::stream;
use crate::survey::{
    compute_size_variable_with, direct_estimates, DirectEstimates, draw_poisson_pps, draw_stratified_srs, DesignKind, MeanForm,
    SampleDraw, SizeStandardization, SyntheticPopulation,
};

/// Normal quantile for the direct estimator's 95% interval.
pub const DIRECT_Z: f64 = 1.96;

/// `(u - l) + (2/alpha)(l - truth)[truth < l] + (2/alpha)(truth - u)[truth > u]`.
pub fn interval_score(lower: f64, upper: f64, truth: f64, alpha: f64) -> Result<f64> {
    if lower > upper {
        return Err(Error::invalid(format!("interval lower {lower} exceeds upper {upper}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let mut score = upper - lower;
    if truth < lower {
        score += 2.0 / alpha * (lower - truth);
    }
    if truth > upper {
        score += 2.0 / alpha * (truth - upper);
    }
    Ok(score)
}

/// Per-area and area-averaged error metrics. `NaN` entries in either matrix
/// mark replicates where an area was not estimated; they are skipped
/// pairwise.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseMetrics {
    pub rmse: Vec<f64>,
    pub direct_rmse: Vec<f64>,
    /// `rmse / direct_rmse`; `NaN` where the direct RMSE is zero.
    pub rel_rmse: Vec<f64>,
    pub abs_bias: Vec<f64>,
    pub direct_abs_bias: Vec<f64>,
    pub mean_rmse: f64,
    pub mean_rel_rmse: f64,
    pub mean_abs_bias: f64,
    pub mean_direct_abs_bias: f64,
}

fn nan_mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().filter(|x| x.is_finite()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn rmse_metrics(estimates: &DMatrix<f64>, truth: &[f64], direct: &DMatrix<f64>) -> Result<RmseMetrics> {
    let (k, d) = estimates.shape();
    if k == 0 {
        return Err(Error::invalid("need at least one replicate"));
    }
    if direct.shape() != (k, d) || truth.len() != d {
        return Err(Error::DimensionMismatch { context: "rmse inputs", expected: d, actual: truth.len() });
    }
    let mut m = RmseMetrics {
        rmse: vec![f64::NAN; d],
        direct_rmse: vec![f64::NAN; d],
        rel_rmse: vec![f64::NAN; d],
        abs_bias: vec![f64::NAN; d],
        direct_abs_bias: vec![f64::NAN; d],
        mean_rmse: f64::NAN,
        mean_rel_rmse: f64::NAN,
        mean_abs_bias: f64::NAN,
        mean_direct_abs_bias: f64::NAN,
    };
    for j in 0..d {
        let pairs: Vec<(f64, f64)> = (0..k)
            .map(|r| (estimates[(r, j)], direct[(r, j)]))
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let n = pairs.len() as f64;
        let t = truth[j];
        let mse = pairs.iter().map(|(a, _)| (a - t).powi(2)).sum::<f64>() / n;
        let dmse = pairs.iter().map(|(_, b)| (b - t).powi(2)).sum::<f64>() / n;
        m.rmse[j] = mse.sqrt();
        m.direct_rmse[j] = dmse.sqrt();
        m.abs_bias[j] = (pairs.iter().map(|(a, _)| a).sum::<f64>() / n - t).abs();
        m.direct_abs_bias[j] = (pairs.iter().map(|(_, b)| b).sum::<f64>() / n - t).abs();
        if m.direct_rmse[j] > 0.0 {
            m.rel_rmse[j] = m.rmse[j] / m.direct_rmse[j];
        } else {
            log::warn!("area {j} has zero direct RMSE; excluded from relative RMSE");
        }
    }
    m.mean_rmse = nan_mean(m.rmse.iter().copied());
    m.mean_rel_rmse = nan_mean(m.rel_rmse.iter().copied());
    m.mean_abs_bias = nan_mean(m.abs_bias.iter().copied());
    m.mean_direct_abs_bias = nan_mean(m.direct_abs_bias.iter().copied());
    Ok(m)
}

/// Fraction of replicates with `lower <= truth <= upper`, per area and
/// averaged. `NaN` bounds are skipped.
pub fn coverage_rate(lower: &DMatrix<f64>, upper: &DMatrix<f64>, truth: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (k, d) = lower.shape();
    if upper.shape() != (k, d) || truth.len() != d {
        return Err(Error::DimensionMismatch { context: "coverage inputs", expected: d, actual: truth.len() });
    }
    let per_area: Vec<f64> = (0..d)
        .map(|j| {
            let (hits, n) = (0..k)
                .filter(|&r| lower[(r, j)].is_finite() && upper[(r, j)].is_finite())
                .fold((0usize, 0usize), |(h, n), r| {
                    (h + (lower[(r, j)] <= truth[j] && truth[j] <= upper[(r, j)]) as usize, n + 1)
                });
            if n == 0 {
                f64::NAN
            } else {
                hits as f64 / n as f64
            }
        })
        .collect();
    let mean = nan_mean(per_area.iter().copied());
    Ok((per_area, mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Direct,
    #[serde(untagged)]
    Model(ModelKind),
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Model(m) => m.name(),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("direct") {
            Ok(Self::Direct)
        } else {
            s.parse().map(Self::Model)
        }
    }
}

/// Per-area point estimates and interval bounds; `NaN` marks areas that were
/// not estimated in a replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaIntervals {
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl AreaIntervals {
    fn missing(d: usize) -> Self {
        Self { point: vec![f64::NAN; d], lower: vec![f64::NAN; d], upper: vec![f64::NAN; d] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub k: usize,
    pub truth: Vec<f64>,
    pub direct: AreaIntervals,
    pub estimates: Vec<(Estimator, AreaIntervals)>,
    pub failures: Vec<ReplicateFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignSpec {
    pub kind: DesignKind,
    /// Units per area under stratified SRS.
    pub n_per_area: usize,
    /// Expected total sample size under Poisson PPS.
    pub expected_n: f64,
    pub size_standardization: SizeStandardization,
    pub mean_form: MeanForm,
}

impl Default for DesignSpec {
    fn default() -> Self {
        Self {
            kind: DesignKind::StratifiedSrs,
            n_per_area: 5,
            expected_n: 1000.0,
            size_standardization: SizeStandardization::ZScore,
            mean_form: MeanForm::Hajek,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub design: DesignSpec,
    pub estimators: Vec<Estimator>,
    pub k: usize,
    pub base_seed: u64,
    pub parallelism: usize,
    /// Template for every model fit; `model` and `seed` are overwritten.
    pub fit: FitConfig,
    pub level: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            design: DesignSpec::default(),
            estimators: vec![Estimator::Model(ModelKind::Halm)],
            k: 50,
            base_seed: 1,
            parallelism: 1,
            // Unit-level variance model without area effects, as in the
            // reference study.
            fit: FitConfig { constrain_eta2_zero: true, ..FitConfig::default() },
            level: 0.95,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("need at least one replicate".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config("credible level must be in (0, 1)".into()));
        }
        if self.design.n_per_area == 0 {
            return Err(Error::Config("n_per_area must be positive".into()));
        }
        if !(self.design.expected_n.is_finite() && self.design.expected_n > 0.0) {
            return Err(Error::Config("expected_n must be positive".into()));
        }
        // The graph comes from the population, so check the template as HALM.
        let probe = FitConfig { model: ModelKind::Halm, ..self.fit.clone() };
        probe.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub estimator: Estimator,
    pub rel_rmse: f64,
    pub abs_bias: f64,
    pub cov_rate: f64,
    pub int_score: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaMetrics {
    pub area_id: String,
    pub estimator: Estimator,
    pub rmse: f64,
    pub direct_rmse: f64,
    pub rel_rmse: f64,
    pub abs_bias: f64,
    pub cov_rate: f64,
    pub int_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub k: usize,
    pub estimator: Estimator,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    /// Direct estimator first, then models in the requested order.
    pub estimators: Vec<EstimatorMetrics>,
    pub per_area: Vec<AreaMetrics>,
    pub replicates_used: usize,
    /// Sampling failures (whole replicate skipped) and per-estimator fit
    /// failures (that estimator missing in that replicate).
    pub failures: Vec<ReplicateFailure>,
}

impl MetricsTable {
    pub fn get(&self, e: Estimator) -> Option<&EstimatorMetrics> {
        self.estimators.iter().find(|m| m.estimator == e)
    }
}

/// Output of [`run_replication_study`]: the table plus every replicate's raw
/// intervals, sorted by replicate index.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    pub table: MetricsTable,
    pub replicates: Vec<ReplicateResult>,
}

fn draw_sample(pop: &SyntheticPopulation, design: &DesignSpec, size: Option<&[f64]>, rng: &mut impl rand::Rng) -> Result<SampleDraw> {
    match design.kind {
        DesignKind::StratifiedSrs => draw_stratified_srs(pop, design.n_per_area, rng),
        DesignKind::PoissonPps => draw_poisson_pps(pop, design.expected_n, size.expect("size computed for PPS"), rng),
    }
}

/// Runs one replicate: sample, direct estimates, then every model.
///
/// A sampling failure fails the whole replicate. A model failure is
/// recorded in [`ReplicateResult::failures`] and leaves that estimator's
/// intervals missing for this replicate only.
pub fn run_replicate(
    pop: &SyntheticPopulation,
    config: &StudyConfig,
    size: Option<&[f64]>,
    area_x: &DMatrix<f64>,
    k: usize,
) -> std::result::Result<ReplicateResult, ReplicateFailure> {
    let d = pop.n_areas;
    let mut rng = stream(config.base_seed, 2 * k as u64);
    let mut seeds = stream(config.base_seed, 2 * k as u64 + 1);
    let sample = draw_sample(pop, &config.design, size, &mut rng).map_err(|e| ReplicateFailure {
        k,
        estimator: Estimator::Direct,
        message: e.to_string(),
    })?;
    let de = direct_estimates(pop, &sample, config.design.mean_form);

    // Areas are scored only where a direct interval exists.
    let usable: Vec<usize> = (0..d).filter(|&j| de.variance[j].is_finite() && de.mean[j] > 0.0).collect();
    let mut direct = AreaIntervals::missing(d);
    for &j in &usable {
        let se = de.variance[j].sqrt();
        direct.point[j] = de.mean[j];
        direct.lower[j] = de.mean[j] - DIRECT_Z * se;
        direct.upper[j] = de.mean[j] + DIRECT_Z * se;
    }

    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for &est in &config.estimators {
        let seed = seeds.next_u64();
        let Estimator::Model(model) = est else { continue };
        let mut fc = config.fit.clone();
        fc.model = model;
        fc.seed = seed;
        let intervals = estimate_model(pop, &sample, &de, &usable, area_x, fc, config.level).unwrap_or_else(|e| {
            log::warn!("replicate {k}: {est} failed: {e}");
            failures.push(ReplicateFailure { k, estimator: est, message: e.to_string() });
            AreaIntervals::missing(d)
        });
        estimates.push((est, intervals));
    }
    Ok(ReplicateResult { k, truth: pop.truth.area_means.clone(), direct, estimates, failures })
}

fn estimate_model(
    pop: &SyntheticPopulation,
    sample: &SampleDraw,
    de: &DirectEstimates,
    usable: &[usize],
    area_x: &DMatrix<f64>,
    mut fc: FitConfig,
    level: f64,
) -> Result<AreaIntervals> {
    let d = pop.n_areas;
    let area_ids = pop.area_ids();
    let mut out = AreaIntervals::missing(d);
    if fc.model.is_unit_level() {
        let n = sample.len();
        let y = DVector::from_iterator(n, sample.units.iter().map(|&u| pop.y_income[u].ln()));
        let data = UnitDataset::new(
            y,
            pop.x.select_rows(&sample.units),
            sample.units.iter().map(|&u| pop.area_index[u]).collect(),
            &sample.design_weight,
            area_ids,
            PopulationTable { x: pop.x.clone(), area_index: pop.area_index.clone() },
            ResponseScale::Log,
        )?;
        let summary = summarize_posterior(&fit(FitData::Unit(&data), &fc)?, level)?;
        for &j in usable {
            out.point[j] = summary[j].estimate;
            out.lower[j] = summary[j].lower;
            out.upper[j] = summary[j].upper;
        }
    } else {
        let pick = |v: &[f64]| usable.iter().map(|&j| v[j]).collect::<Vec<_>>();
        let data = AreaDataset::from_direct(
            &usable.iter().map(|&j| area_ids[j].clone()).collect::<Vec<_>>(),
            &pick(&de.mean),
            &pick(&de.variance),
            &usable.iter().map(|&j| de.n_samp[j]).collect::<Vec<_>>(),
            &area_x.select_rows(usable),
        )?;
        if fc.model == ModelKind::Shalm {
            let graph = pop.graph.as_ref().ok_or_else(|| Error::Config("population has no adjacency graph".into()))?;
            fc.graph = Some(graph.induced(usable)?);
        }
        let summary = summarize_posterior(&fit(FitData::Area(&data), &fc)?, level)?;
        for (i, &j) in usable.iter().enumerate() {
            out.point[j] = summary[i].estimate;
            out.lower[j] = summary[i].lower;
            out.upper[j] = summary[i].upper;
        }
    }
    // Overflowing back-transforms would otherwise poison the averages silently.
    if let Some(&j) = usable
        .iter()
        .find(|&&j| ![out.point[j], out.lower[j], out.upper[j]].iter().all(|v| v.is_finite()))
    {
        return Err(Error::Divergence(format!("non-finite area estimate for {}", pop.area_ids()[j])));
    }
    Ok(out)
}

/// Repeats sampling, estimation and scoring `config.k` times.
///
/// Replicate `k` draws its sample from stream `2k` and its fit seeds from
/// stream `2k + 1` of `base_seed`, so results do not depend on
/// `parallelism`.
pub fn run_replication_study(pop: &SyntheticPopulation, config: &StudyConfig) -> Result<StudyOutput> {
    config.validate()?;
    let size = match config.design.kind {
        DesignKind::PoissonPps => {
            Some(compute_size_variable_with(&pop.base_weight, &pop.y_income, config.design.size_standardization)?)
        }
        DesignKind::StratifiedSrs => None,
    };
    let area_x = pop.area_covariates();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut results: Vec<_> = pool.install(|| {
        (0..config.k)
            .into_par_iter()
            .map(|k| run_replicate(pop, config, size.as_deref(), &area_x, k))
            .collect()
    });
    results.sort_by_key(|r| match r {
        Ok(r) => r.k,
        Err(f) => f.k,
    });
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(r) => {
                failures.extend(r.failures.iter().cloned());
                replicates.push(r);
            }
            Err(f) => {
                log::warn!("replicate {} skipped: {}", f.k, f.message);
                failures.push(f);
            }
        }
    }
    if replicates.is_empty() {
        return Err(Error::Divergence(format!("all {} replicates failed", config.k)));
    }
    let table = score_replicates(&replicates, &pop.area_ids(), config.level, failures)?;
    Ok(StudyOutput { table, replicates })
}

/// Aggregates replicate intervals into a [`MetricsTable`].
pub fn score_replicates(
    replicates: &[ReplicateResult],
    area_ids: &[String],
    level: f64,
    failures: Vec<ReplicateFailure>,
) -> Result<MetricsTable> {
    let k = replicates.len();
    let d = area_ids.len();
    let alpha = 1.0 - level;
    let truth = &replicates[0].truth;
    let stack = |f: &dyn Fn(&ReplicateResult) -> &Vec<f64>| DMatrix::from_fn(k, d, |r, j| f(&replicates[r])[j]);
    let direct_point = stack(&|r| &r.direct.point);

    let mut all: Vec<(Estimator, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> =
        vec![(Estimator::Direct, direct_point.clone(), stack(&|r| &r.direct.lower), stack(&|r| &r.direct.upper))];
    for (i, (est, _)) in replicates[0].estimates.iter().enumerate() {
        all.push((
            *est,
            stack(&|r| &r.estimates[i].1.point),
            stack(&|r| &r.estimates[i].1.lower),
            stack(&|r| &r.estimates[i].1.upper),
        ));
    }

    let mut estimators = Vec::new();
    let mut per_area = Vec::new();
    for (est, point, lower, upper) in &all {
        let rm = rmse_metrics(point, truth, &direct_point)?;
        let (cov, cov_mean) = coverage_rate(lower, upper, truth)?;
        let mut score = vec![f64::NAN; d];
        for j in 0..d {
            let s: Vec<f64> = (0..k)
                .filter(|&r| lower[(r, j)].is_finite() && upper[(r, j)].is_finite())
                .map(|r| interval_score(lower[(r, j)], upper[(r, j)].max(lower[(r, j)]), truth[j], alpha))
                .collect::<Result<_>>()?;
            score[j] = nan_mean(s);
        }
        estimators.push(EstimatorMetrics {
            estimator: *est,
            rel_rmse: rm.mean_rel_rmse,
            abs_bias: rm.mean_abs_bias,
            cov_rate: cov_mean,
            int_score: nan_mean(score.iter().copied()),
            rmse: rm.mean_rmse,
        });
        for j in 0..d {
            per_area.push(AreaMetrics {
                area_id: area_ids[j].clone(),
                estimator: *est,
                rmse: rm.rmse[j],
                direct_rmse: rm.direct_rmse[j],
                rel_rmse: rm.rel_rmse[j],
                abs_bias: rm.abs_bias[j],
                cov_rate: cov[j],
                int_score: score[j],
            });
        }
    }
    Ok(MetricsTable { estimators, per_area, replicates_used: k, failures })
}
