//! Model assembly and fit orchestration for FH, HALM, SHALM, PL-BULM and HULM.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{
    build_variance_cmlg, sample_ig_posterior, sample_iid_random_effect_variance, update_gaussian_coefficients,
    update_random_effect_variance_ig, update_random_effects, update_sigma_eta2_mh, update_theta,
    update_variance_coefficients, variances_from_linear, ChainState, Hyperparameters, ModelDesign,
    RandomEffectPrior, VarianceBlock,
};
use crate::rng::stream;
use crate::spatial::{build_icar, AdjacencyGraph, IcarStructure};
use crate::stats;
use crate::survey::scale_to_sample_size;

/// Floor applied to zero design variances after the delta method.
pub const S2_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fh,
    Halm,
    Shalm,
    PlBulm,
    Hulm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [Self::Fh, Self::Halm, Self::Shalm, Self::PlBulm, Self::Hulm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fh => "fh",
            Self::Halm => "halm",
            Self::Shalm => "shalm",
            Self::PlBulm => "pl_bulm",
            Self::Hulm => "hulm",
        }
    }

    pub fn is_unit_level(self) -> bool {
        matches!(self, Self::PlBulm | Self::Hulm)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "fh" => Ok(Self::Fh),
            "halm" => Ok(Self::Halm),
            "shalm" => Ok(Self::Shalm),
            "pl_bulm" | "plbulm" => Ok(Self::PlBulm),
            "hulm" => Ok(Self::Hulm),
            other => Err(Error::Config(format!("unknown model {other:?}"))),
        }
    }
}

/// Log-scale direct estimates and delta-method variances.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedArea {
    pub y: DVector<f64>,
    pub s2: DVector<f64>,
    pub n_samp: Vec<usize>,
}

/// `y = log(mean)`, `s2 = var / mean^2`. Zero variances are floored at
/// [`S2_FLOOR`].
pub fn prepare_area_inputs(direct_mean: &[f64], direct_var: &[f64], n_samp: &[usize]) -> Result<PreparedArea> {
    let d = direct_mean.len();
    if direct_var.len() != d || n_samp.len() != d {
        return Err(Error::DimensionMismatch {
            context: "direct estimates",
            expected: d,
            actual: direct_var.len().min(n_samp.len()),
        });
    }
    let mut y = DVector::zeros(d);
    let mut s2 = DVector::zeros(d);
    for i in 0..d {
        let (m, v) = (direct_mean[i], direct_var[i]);
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::Data(format!("direct mean {m} in area {i} must be positive")));
        }
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Data(format!("direct variance {v} in area {i} must be nonnegative")));
        }
        y[i] = m.ln();
        let rel = v / (m * m);
        s2[i] = if rel > 0.0 {
            rel
        } else {
            log::warn!("area {i} has zero direct variance; flooring at {S2_FLOOR}");
            S2_FLOOR
        };
    }
    Ok(PreparedArea { y, s2, n_samp: n_samp.to_vec() })
}

/// Area-level model input on the log scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaDataset {
    pub area_ids: Vec<String>,
    pub y: DVector<f64>,
    pub s2: DVector<f64>,
    pub n_samp: Vec<usize>,
    /// `d x p` covariates including the intercept column.
    pub x: DMatrix<f64>,
}

impl AreaDataset {
    pub fn new(
        area_ids: Vec<String>,
        y: DVector<f64>,
        s2: DVector<f64>,
        n_samp: Vec<usize>,
        x: DMatrix<f64>,
    ) -> Result<Self> {
        let d = y.len();
        for (context, len) in [
            ("area ids", area_ids.len()),
            ("s2", s2.len()),
            ("sample sizes", n_samp.len()),
            ("covariate rows", x.nrows()),
        ] {
            if len != d {
                return Err(Error::DimensionMismatch { context, expected: d, actual: len });
            }
        }
        if d == 0 {
            return Err(Error::Data("area dataset is empty".into()));
        }
        for i in 0..d {
            if !y[i].is_finite() {
                return Err(Error::Data(format!("area {}: non-finite direct estimate", area_ids[i])));
            }
            if !(s2[i].is_finite() && s2[i] > 0.0) {
                return Err(Error::Data(format!("area {}: s2 must be positive", area_ids[i])));
            }
            if n_samp[i] < 2 {
                return Err(Error::Data(format!("area {}: needs at least 2 sampled units", area_ids[i])));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("covariates must be finite".into()));
        }
        Ok(Self { area_ids, y, s2, n_samp, x })
    }

    /// Builds the dataset from income-scale direct estimates. Areas with a
    /// missing estimate or fewer than two sampled units are dropped with a
    /// warning.
    pub fn from_direct(
        area_ids: &[String],
        direct_mean: &[f64],
        direct_var: &[f64],
        n_samp: &[usize],
        x: &DMatrix<f64>,
    ) -> Result<Self> {
        let keep: Vec<usize> = (0..direct_mean.len())
            .filter(|&i| {
                let ok = direct_mean[i].is_finite() && direct_var[i].is_finite() && n_samp[i] >= 2;
                if !ok {
                    log::warn!("area {} excluded: no usable direct estimate", area_ids[i]);
                }
                ok
            })
            .collect();
        let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let n: Vec<usize> = keep.iter().map(|&i| n_samp[i]).collect();
        let prepared = prepare_area_inputs(&pick(direct_mean), &pick(direct_var), &n)?;
        let xs = DMatrix::from_fn(keep.len(), x.ncols(), |r, c| x[(keep[r], c)]);
        Self::new(
            keep.iter().map(|&i| area_ids[i].clone()).collect(),
            prepared.y,
            prepared.s2,
            prepared.n_samp,
            xs,
        )
    }

    pub fn d(&self) -> usize {
        self.y.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseScale {
    /// `y` is the log of the quantity of interest.
    #[default]
    Log,
    Identity,
}

/// Covariates of every population unit, used for prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTable {
    pub x: DMatrix<f64>,
    pub area_index: Vec<usize>,
}

/// Unit-level survey records.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitDataset {
    pub y: DVector<f64>,
    /// `n x p` unit covariates including the intercept column.
    pub x: DMatrix<f64>,
    pub area_index: Vec<usize>,
    /// Weights scaled to sum to the number of records.
    pub w_scaled: DVector<f64>,
    pub area_ids: Vec<String>,
    pub population: PopulationTable,
    pub response_scale: ResponseScale,
}

impl UnitDataset {
    /// `area_ids` names every area, sampled or not; area indices refer to it.
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        area_index: Vec<usize>,
        base_weights: &[f64],
        area_ids: Vec<String>,
        population: PopulationTable,
        response_scale: ResponseScale,
    ) -> Result<Self> {
        let n = y.len();
        for (context, len) in [
            ("unit covariate rows", x.nrows()),
            ("unit area indices", area_index.len()),
            ("unit weights", base_weights.len()),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch { context, expected: n, actual: len });
            }
        }
        if n == 0 {
            return Err(Error::Data("unit dataset is empty".into()));
        }
        let d = area_ids.len();
        if let Some(&k) = area_index.iter().chain(&population.area_index).find(|&&k| k >= d) {
            return Err(Error::Data(format!("area index {k} out of range for {d} areas")));
        }
        if population.x.ncols() != x.ncols() || population.x.nrows() != population.area_index.len() {
            return Err(Error::DimensionMismatch {
                context: "population covariates",
                expected: x.ncols(),
                actual: population.x.ncols(),
            });
        }
        if y.iter().chain(x.iter()).chain(population.x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("unit data must be finite".into()));
        }
        if base_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Data("unit weights must be positive".into()));
        }
        let w_scaled = DVector::from_vec(scale_to_sample_size(base_weights));
        Ok(Self {
            y,
            x,
            area_index,
            w_scaled,
            area_ids,
            population,
            response_scale,
        })
    }

    pub fn n_areas(&self) -> usize {
        self.area_ids.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum FitData<'a> {
    Area(&'a AreaDataset),
    Unit(&'a UnitDataset),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub model: ModelKind,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub hyper: Hyperparameters,
    /// Required for SHALM.
    #[serde(skip)]
    pub graph: Option<AdjacencyGraph>,
    /// ICAR jitter; `None` uses `1e-6 * mean degree`.
    pub icar_jitter: Option<f64>,
    /// HULM only: hold `eta2` at zero.
    pub constrain_eta2_zero: bool,
    /// Random-walk scale for `sigma_eta2`.
    pub proposal_sd: f64,
    /// Tune `proposal_sd` toward 40% acceptance during burn-in.
    pub adapt_proposal: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Halm,
            iterations: 3000,
            burn_in: 1000,
            thin: 1,
            seed: 0,
            hyper: Hyperparameters::default(),
            graph: None,
            icar_jitter: None,
            constrain_eta2_zero: false,
            proposal_sd: 0.1,
            adapt_proposal: true,
        }
    }
}

impl FitConfig {
    pub fn new(model: ModelKind) -> Self {
        Self { model, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.retained() == 0 {
            return Err(Error::Config("no draws retained after burn-in and thinning".into()));
        }
        if !(self.proposal_sd.is_finite() && self.proposal_sd > 0.0) {
            return Err(Error::Config("proposal_sd must be positive".into()));
        }
        if self.model == ModelKind::Shalm && self.graph.is_none() {
            return Err(Error::Config("SHALM requires an adjacency graph".into()));
        }
        self.hyper.validate()
    }

    pub fn retained(&self) -> usize {
        (self.iterations.saturating_sub(self.burn_in)) / self.thin.max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaScale {
    /// Area draws are `theta` on the log scale.
    Log,
    /// Area draws are already on the reporting scale.
    Original,
}

/// Retained draws. Blocks a model does not sample have zero columns (or are
/// empty vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub model: ModelKind,
    pub area_ids: Vec<String>,
    /// Zero-based sweep index of each retained draw.
    pub iterations: Vec<usize>,
    pub beta1: DMatrix<f64>,
    pub beta2: DMatrix<f64>,
    pub eta1: DMatrix<f64>,
    pub eta2: DMatrix<f64>,
    pub sigma2_eta1: Vec<f64>,
    pub sigma_eta2: Vec<f64>,
    /// Single unit-level variance (PL-BULM).
    pub sigma2: Vec<f64>,
    /// Per-area quantity: `theta` for area-level models, predicted area
    /// means for unit-level models.
    pub area: DMatrix<f64>,
    pub area_scale: AreaScale,
    pub acceptance_rate: Option<f64>,
    pub proposal_sd: f64,
    pub clamp_count: u64,
}

/// One named scalar chain, as written to `chains.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSeries {
    pub name: &'static str,
    pub index: usize,
    pub values: Vec<f64>,
}

impl PosteriorDraws {
    pub fn retained(&self) -> usize {
        self.iterations.len()
    }

    /// Name of the per-area quantity.
    pub fn area_parameter(&self) -> &'static str {
        match self.area_scale {
            AreaScale::Log => "theta",
            AreaScale::Original => "area_mean",
        }
    }

    /// Every stored scalar chain in a fixed order.
    pub fn series(&self) -> Vec<ParamSeries> {
        let mut out = Vec::new();
        let mut matrix = |name: &'static str, m: &DMatrix<f64>| {
            for j in 0..m.ncols() {
                out.push(ParamSeries { name, index: j, values: m.column(j).iter().copied().collect() });
            }
        };
        matrix("beta1", &self.beta1);
        matrix("beta2", &self.beta2);
        matrix("eta1", &self.eta1);
        matrix("eta2", &self.eta2);
        for (name, v) in [
            ("sigma2_eta1", &self.sigma2_eta1),
            ("sigma_eta2", &self.sigma_eta2),
            ("sigma2", &self.sigma2),
        ] {
            if !v.is_empty() {
                out.push(ParamSeries { name, index: 0, values: v.clone() });
            }
        }
        let name = self.area_parameter();
        for j in 0..self.area.ncols() {
            out.push(ParamSeries { name, index: j, values: self.area.column(j).iter().copied().collect() });
        }
        out
    }
}

/// Per-area posterior summary on the reporting scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaSummary {
    pub area_id: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub sd: f64,
}

/// Posterior mean, equal-tailed interval and sd of each area quantity.
/// Log-scale draws are exponentiated draw by draw first.
pub fn summarize_posterior(draws: &PosteriorDraws, level: f64) -> Result<Vec<AreaSummary>> {
    summarize_area_draws(&draws.area, draws.area_scale, &draws.area_ids, level)
}

pub fn summarize_area_draws(
    area: &DMatrix<f64>,
    scale: AreaScale,
    area_ids: &[String],
    level: f64,
) -> Result<Vec<AreaSummary>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("credible level must be in (0, 1), got {level}")));
    }
    if area.nrows() == 0 {
        return Err(Error::invalid("no retained draws to summarize"));
    }
    if area_ids.len() != area.ncols() {
        return Err(Error::DimensionMismatch {
            context: "area ids",
            expected: area.ncols(),
            actual: area_ids.len(),
        });
    }
    let tail = (1.0 - level) / 2.0;
    Ok((0..area.ncols())
        .map(|j| {
            let mut v: Vec<f64> = area.column(j).iter().copied().collect();
            if scale == AreaScale::Log {
                v.iter_mut().for_each(|x| *x = x.exp());
            }
            let estimate = stats::mean(&v);
            let sd = stats::sd(&v);
            v.sort_by(f64::total_cmp);
            AreaSummary {
                area_id: area_ids[j].clone(),
                estimate,
                lower: stats::quantile_sorted(&v, tail),
                upper: stats::quantile_sorted(&v, 1.0 - tail),
                sd,
            }
        })
        .collect())
}

/// Per-draw area means from a unit-level fit.
///
/// Each population unit contributes `x'beta1 + eta1[area]`, or on the log
/// scale the lognormal mean `exp(x'beta1 + eta1[area] + sigma2_unit / 2)`.
/// Areas beyond the fitted random effects get `eta1` (and `eta2`) drawn from
/// their priors.
pub fn predict_unit_level_area_means<R: Rng + ?Sized>(
    draws: &PosteriorDraws,
    population: &PopulationTable,
    n_areas: usize,
    log_scale_response: bool,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let s = draws.beta1.nrows();
    let p = draws.beta1.ncols();
    if population.x.ncols() != p {
        return Err(Error::DimensionMismatch {
            context: "population covariates",
            expected: p,
            actual: population.x.ncols(),
        });
    }
    let mut counts = vec![0usize; n_areas];
    for &k in &population.area_index {
        if k >= n_areas {
            return Err(Error::Data(format!("population area {k} out of range")));
        }
        counts[k] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("population has no units in area {k}")));
    }
    let fitted_areas = draws.eta1.ncols();
    let has_beta2 = draws.beta2.ncols() > 0;
    let has_eta2 = draws.eta2.ncols() > 0;
    if has_beta2 && draws.beta2.ncols() != p {
        return Err(Error::DimensionMismatch {
            context: "variance coefficients",
            expected: p,
            actual: draws.beta2.ncols(),
        });
    }

    let mut out = DMatrix::zeros(s, n_areas);
    let mut eta1 = vec![0.0; n_areas];
    let mut eta2 = vec![0.0; n_areas];
    for t in 0..s {
        for k in 0..n_areas {
            eta1[k] = if k < fitted_areas {
                draws.eta1[(t, k)]
            } else {
                let z: f64 = StandardNormal.sample(rng);
                z * draws.sigma2_eta1[t].sqrt()
            };
            eta2[k] = if has_eta2 && k < draws.eta2.ncols() {
                draws.eta2[(t, k)]
            } else if has_eta2 {
                let z: f64 = StandardNormal.sample(rng);
                z * draws.sigma_eta2[t]
            } else {
                0.0
            };
        }
        let beta1 = draws.beta1.row(t).transpose();
        let mean = &population.x * &beta1;
        let var_lin = if has_beta2 {
            Some(&population.x * draws.beta2.row(t).transpose())
        } else {
            None
        };
        let single = draws.sigma2.get(t).copied();
        let mut sums = vec![0.0; n_areas];
        for (u, &k) in population.area_index.iter().enumerate() {
            let mu = mean[u] + eta1[k];
            let value = if log_scale_response {
                let s2 = match (&var_lin, single) {
                    (Some(lin), _) => (-(lin[u] + eta2[k])).min(crate::mlg::EXP_CLAMP).exp(),
                    (None, Some(s2)) => s2,
                    (None, None) => 0.0,
                };
                (mu + 0.5 * s2).exp()
            } else {
                mu
            };
            sums[k] += value;
        }
        for k in 0..n_areas {
            out[(t, k)] = sums[k] / counts[k] as f64;
        }
    }
    Ok(out)
}

/// Runs the Gibbs sampler for the configured model.
pub fn fit(data: FitData<'_>, config: &FitConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    match (data, config.model) {
        (FitData::Area(d), ModelKind::Fh | ModelKind::Halm | ModelKind::Shalm) => fit_area(d, config),
        (FitData::Unit(u), ModelKind::PlBulm | ModelKind::Hulm) => fit_unit(u, config),
        (FitData::Area(_), m) => Err(Error::Config(format!("{m} needs unit-level data"))),
        (FitData::Unit(_), m) => Err(Error::Config(format!("{m} needs area-level data"))),
    }
}

fn intercept_column(x: &DMatrix<f64>) -> Option<usize> {
    (0..x.ncols()).find(|&j| x.column(j).iter().all(|&v| v == 1.0))
}

fn drop_column(x: &DMatrix<f64>, col: usize) -> DMatrix<f64> {
    x.clone().remove_column(col)
}

fn fit_area(data: &AreaDataset, config: &FitConfig) -> Result<PosteriorDraws> {
    let d = data.d();
    let icar = match config.model {
        ModelKind::Shalm => {
            let graph = config.graph.as_ref().expect("validated");
            if graph.n_areas() != d {
                return Err(Error::Config(format!(
                    "adjacency graph has {} areas but the data has {d}",
                    graph.n_areas()
                )));
            }
            Some(Arc::new(build_icar(graph, config.icar_jitter)?))
        }
        _ => None,
    };
    let x_var = match (config.model, intercept_column(&data.x)) {
        (ModelKind::Shalm, Some(c)) => drop_column(&data.x, c),
        _ => data.x.clone(),
    };
    let design = ModelDesign {
        x_mean: data.x.clone(),
        x_var,
        area_index: (0..d).collect(),
        n_areas: d,
        hyper: config.hyper,
        obs_weight: DVector::from_element(d, 1.0),
        gamma_shape: DVector::from_iterator(d, data.n_samp.iter().map(|&n| (n as f64 - 1.0) / 2.0)),
        prior: icar.map_or(RandomEffectPrior::Iid, RandomEffectPrior::Icar),
    };
    design.validate()?;
    let mode = match config.model {
        ModelKind::Fh => VarianceMode::Fixed(data.s2.clone()),
        _ => VarianceMode::Regression {
            s2: Some(data.s2.clone()),
            update_beta2: true,
            update_eta2: true,
        },
    };
    let chain = Chain { design, y: data.y.clone(), mode, config };
    let out = chain.run()?;
    Ok(out.into_draws(config.model, data.area_ids.clone(), AreaScale::Log, None))
}

fn fit_unit(data: &UnitDataset, config: &FitConfig) -> Result<PosteriorDraws> {
    let n = data.y.len();
    let d = data.n_areas();
    let (x_var, mode) = match config.model {
        ModelKind::PlBulm => (DMatrix::zeros(n, 0), VarianceMode::Single),
        _ => (
            data.x.clone(),
            VarianceMode::Regression {
                s2: None,
                update_beta2: true,
                update_eta2: !config.constrain_eta2_zero,
            },
        ),
    };
    let design = ModelDesign {
        x_mean: data.x.clone(),
        x_var,
        area_index: data.area_index.clone(),
        n_areas: d,
        hyper: config.hyper,
        obs_weight: data.w_scaled.clone(),
        gamma_shape: DVector::zeros(n),
        prior: RandomEffectPrior::Iid,
    };
    design.validate()?;
    let chain = Chain { design, y: data.y.clone(), mode, config };
    let out = chain.run()?;
    let mut draws = out.into_draws(config.model, data.area_ids.clone(), AreaScale::Original, None);
    let mut rng = stream(config.seed, 1);
    draws.area = predict_unit_level_area_means(
        &draws,
        &data.population,
        d,
        data.response_scale == ResponseScale::Log,
        &mut rng,
    )?;
    Ok(draws)
}

enum VarianceMode {
    /// Known variances (FH).
    Fixed(DVector<f64>),
    /// One common variance with a conjugate inverse-gamma update (PL-BULM).
    Single,
    /// Log-linear variance regression with cMLG updates.
    Regression {
        s2: Option<DVector<f64>>,
        update_beta2: bool,
        update_eta2: bool,
    },
}

struct Chain<'a> {
    design: ModelDesign,
    y: DVector<f64>,
    mode: VarianceMode,
    config: &'a FitConfig,
}

struct ChainOutput {
    iterations: Vec<usize>,
    beta1: DMatrix<f64>,
    beta2: DMatrix<f64>,
    eta1: DMatrix<f64>,
    eta2: DMatrix<f64>,
    sigma2_eta1: Vec<f64>,
    sigma_eta2: Vec<f64>,
    sigma2: Vec<f64>,
    theta: DMatrix<f64>,
    acceptance_rate: Option<f64>,
    proposal_sd: f64,
    clamp_count: u64,
}

impl ChainOutput {
    fn into_draws(
        self,
        model: ModelKind,
        area_ids: Vec<String>,
        area_scale: AreaScale,
        area: Option<DMatrix<f64>>,
    ) -> PosteriorDraws {
        PosteriorDraws {
            model,
            area_ids,
            iterations: self.iterations,
            beta1: self.beta1,
            beta2: self.beta2,
            eta1: self.eta1,
            eta2: self.eta2,
            sigma2_eta1: self.sigma2_eta1,
            sigma_eta2: self.sigma_eta2,
            sigma2: self.sigma2,
            area: area.unwrap_or(self.theta),
            area_scale,
            acceptance_rate: self.acceptance_rate,
            proposal_sd: self.proposal_sd,
            clamp_count: self.clamp_count,
        }
    }
}

const ADAPT_WINDOW: usize = 10;
const ADAPT_TARGET: f64 = 0.4;

impl Chain<'_> {
    fn icar(&self) -> Option<&IcarStructure> {
        match &self.design.prior {
            RandomEffectPrior::Icar(icar) => Some(icar),
            RandomEffectPrior::Iid => None,
        }
    }

    fn initial_state(&self) -> Result<(ChainState, DVector<f64>, f64)> {
        let design = &self.design;
        let hyper = &design.hyper;
        let n = design.n_obs();
        let p = design.x_mean.ncols();
        let w = &design.obs_weight;
        let prior = DMatrix::identity(p, p) * (1e-6 / hyper.sigma2_beta1);
        let beta1 = weighted_least_squares(&design.x_mean, &self.y, w, &prior)?;
        let theta = &design.x_mean * &beta1;
        let resid = &self.y - &theta;
        let wsum: f64 = w.sum();
        let mse = (resid.component_mul(&resid).dot(w) / wsum).max(1e-8);

        // Target for -log sigma2 used to start the variance regression.
        let target = match &self.mode {
            VarianceMode::Fixed(v) => v.map(|s| -s.ln()),
            VarianceMode::Regression { s2: Some(s2), .. } => s2.map(|s| -s.ln()),
            _ => DVector::from_element(n, -mse.ln()),
        };
        let p_v = design.x_var.ncols();
        let mut eta2 = DVector::zeros(design.n_areas);
        let beta2 = if p_v == 0 {
            eta2.fill(target.mean());
            DVector::zeros(0)
        } else if intercept_column(&design.x_var).is_some() {
            weighted_least_squares(&design.x_var, &target, &DVector::from_element(n, 1.0), &(DMatrix::identity(p_v, p_v) * 1e-8))?
        } else {
            let centred = target.add_scalar(-target.mean());
            eta2.fill(target.mean());
            weighted_least_squares(&design.x_var, &centred, &DVector::from_element(n, 1.0), &(DMatrix::identity(p_v, p_v) * 1e-8))?
        };
        if let VarianceMode::Regression { update_eta2: false, .. } = self.mode {
            eta2.fill(0.0);
        }
        let state = ChainState {
            beta1,
            beta2,
            eta1: DVector::zeros(design.n_areas),
            eta2,
            sigma2_eta1: (resid.norm_squared() / n as f64).max(1e-4),
            sigma_eta2: 0.5,
            theta,
            clamp_count: 0,
        };
        let sigma2_obs = match &self.mode {
            VarianceMode::Fixed(v) => v.clone(),
            VarianceMode::Single => DVector::from_element(n, mse),
            VarianceMode::Regression { .. } => {
                let (v, _) = variances_from_linear(&design.variance_linear(&state.beta2, &state.eta2));
                v
            }
        };
        Ok((state, sigma2_obs, mse))
    }

    fn run(&self) -> Result<ChainOutput> {
        let config = self.config;
        let design = &self.design;
        let hyper = design.hyper;
        let n = design.n_obs();
        let p = design.x_mean.ncols();
        let r = design.n_areas;
        let mut rng: ChaCha8Rng = stream(config.seed, 0);

        let (mut st, mut sigma2_obs, mut sigma2_single) = self.initial_state()?;
        let beta1_prior = DMatrix::identity(p, p) / hyper.sigma2_beta1;

        let (track_beta2, track_eta2, track_single) = match &self.mode {
            VarianceMode::Fixed(_) => (false, false, false),
            VarianceMode::Single => (false, false, true),
            VarianceMode::Regression { update_eta2, .. } => (design.x_var.ncols() > 0, *update_eta2, false),
        };
        let keep = config.retained();
        let mut out = ChainOutput {
            iterations: Vec::with_capacity(keep),
            beta1: DMatrix::zeros(keep, p),
            beta2: DMatrix::zeros(keep, if track_beta2 { design.x_var.ncols() } else { 0 }),
            eta1: DMatrix::zeros(keep, r),
            eta2: DMatrix::zeros(keep, if track_eta2 { r } else { 0 }),
            sigma2_eta1: Vec::with_capacity(keep),
            sigma_eta2: Vec::with_capacity(if track_eta2 { keep } else { 0 }),
            sigma2: Vec::with_capacity(if track_single { keep } else { 0 }),
            theta: DMatrix::zeros(keep, n),
            acceptance_rate: None,
            proposal_sd: config.proposal_sd,
            clamp_count: 0,
        };

        let mut proposal_sd = config.proposal_sd;
        let (mut window_accepts, mut accepts, mut proposals) = (0usize, 0usize, 0usize);
        let mut slot = 0;

        for it in 0..config.iterations {
            let diverged = |e: Error| Error::Divergence(format!("sweep {it}: {e}"));
            // Mean model.
            let resid_precision = design.obs_weight.component_div(&sigma2_obs);
            let y_adj = &self.y - design.expand(&st.eta1);
            st.beta1 = update_gaussian_coefficients(&y_adj, &design.x_mean, &resid_precision, &beta1_prior, &mut rng).map_err(diverged)?;
            let y_adj = &self.y - &design.x_mean * &st.beta1;
            st.eta1 = update_random_effects(&y_adj, design, &resid_precision, st.sigma2_eta1, &mut rng).map_err(diverged)?;
            if let Some(icar) = self.icar() {
                icar.recenter(&mut st.eta1);
            }
            st.theta = update_theta(&st, design);

            st.sigma2_eta1 = match self.icar() {
                None => update_random_effect_variance_ig(&st.eta1, hyper.a, hyper.b, &mut rng),
                Some(icar) => {
                    let quad = st.eta1.dot(&(icar.regularized_precision() * &st.eta1));
                    sample_ig_posterior(hyper.a, hyper.b, icar.rank() as f64, quad, &mut rng)
                }
            };

            // Variance model.
            let resid = &self.y - &st.theta;
            let resid_sq = resid.component_mul(&resid);
            match &self.mode {
                VarianceMode::Fixed(_) => {}
                VarianceMode::Single => {
                    let wsum = design.obs_weight.sum();
                    let wss = resid_sq.dot(&design.obs_weight);
                    sigma2_single = sample_ig_posterior(hyper.a, hyper.b, wsum, wss, &mut rng);
                    sigma2_obs.fill(sigma2_single);
                }
                VarianceMode::Regression { s2, update_beta2, update_eta2 } => {
                    let s2 = s2.as_ref();
                    if *update_beta2 && design.x_var.ncols() > 0 {
                        let cond = build_variance_cmlg(VarianceBlock::Coefficients, &st, design, &resid_sq, s2).map_err(diverged)?;
                        st.clamp_count += cond.clamp_events;
                        st.beta2 = update_variance_coefficients(&cond.params, &mut rng);
                    }
                    if *update_eta2 {
                        match &design.prior {
                            RandomEffectPrior::Iid => {
                                let (eta2, clamps) =
                                    sample_iid_random_effect_variance(&st, design, &resid_sq, s2, &mut rng).map_err(diverged)?;
                                st.eta2 = eta2;
                                st.clamp_count += clamps;
                            }
                            RandomEffectPrior::Icar(_) => {
                                let cond =
                                    build_variance_cmlg(VarianceBlock::RandomEffects, &st, design, &resid_sq, s2).map_err(diverged)?;
                                st.clamp_count += cond.clamp_events;
                                st.eta2 = update_variance_coefficients(&cond.params, &mut rng);
                            }
                        }
                        let (sigma, accepted) = update_sigma_eta2_mh(&st, design, &mut rng, proposal_sd);
                        st.sigma_eta2 = sigma;
                        if it >= config.burn_in {
                            proposals += 1;
                            accepts += accepted as usize;
                        } else {
                            window_accepts += accepted as usize;
                            if config.adapt_proposal && (it + 1) % ADAPT_WINDOW == 0 {
                                let rate = window_accepts as f64 / ADAPT_WINDOW as f64;
                                proposal_sd *= if rate > ADAPT_TARGET { 1.1 } else { 0.9 };
                                window_accepts = 0;
                            }
                        }
                    }
                    let (v, clamps) = variances_from_linear(&design.variance_linear(&st.beta2, &st.eta2));
                    sigma2_obs = v;
                    st.clamp_count += clamps;
                }
            }

            if !st.is_finite() || sigma2_obs.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite chain state at sweep {it}")));
            }

            if it >= config.burn_in && (it - config.burn_in + 1).is_multiple_of(config.thin) && slot < keep {
                out.iterations.push(it);
                out.beta1.row_mut(slot).copy_from(&st.beta1.transpose());
                if track_beta2 {
                    out.beta2.row_mut(slot).copy_from(&st.beta2.transpose());
                }
                out.eta1.row_mut(slot).copy_from(&st.eta1.transpose());
                if track_eta2 {
                    out.eta2.row_mut(slot).copy_from(&st.eta2.transpose());
                    out.sigma_eta2.push(st.sigma_eta2);
                }
                out.sigma2_eta1.push(st.sigma2_eta1);
                if track_single {
                    out.sigma2.push(sigma2_single);
                }
                out.theta.row_mut(slot).copy_from(&st.theta.transpose());
                slot += 1;
            }
        }
        out.acceptance_rate = (proposals > 0).then(|| accepts as f64 / proposals as f64);
        out.proposal_sd = proposal_sd;
        out.clamp_count = st.clamp_count;
        Ok(out)
    }
}

/// Ridge-stabilized weighted least squares.
fn weighted_least_squares(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    ridge: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let mut wx = x.clone();
    for (i, mut row) in wx.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let a = wx.tr_mul(x) + ridge;
    let b = wx.tr_mul(y);
    a.cholesky()
        .map(|c| c.solve(&b))
        .ok_or(Error::NotPositiveDefinite("least-squares start"))
}
