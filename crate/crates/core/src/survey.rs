//! Synthetic populations, the two sampling designs, weight scaling and
//! direct estimation.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{build_icar, AdjacencyGraph};

/// Column names of the unit design matrix produced by [`generate_population`].
pub const COVARIATE_NAMES: [&str; 6] = ["intercept", "age", "sex", "race_b", "race_c", "log_pop"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSpec {
    pub n_areas: usize,
    pub min_area_size: usize,
    pub max_area_size: usize,
    /// Mean-model coefficients, one per entry of [`COVARIATE_NAMES`].
    pub beta_mean: Vec<f64>,
    /// Coefficients of `-log sigma2` for the unit errors.
    pub beta_var: Vec<f64>,
    pub sd_mean_effect: f64,
    pub sd_var_effect: f64,
    /// Area effects drawn from an ICAR prior on `graph` rather than iid.
    pub spatial: bool,
    /// When off, unit variances are `exp(-beta_var[0])` everywhere.
    pub heteroscedastic: bool,
    /// Correlation between log base weight and standardized log income.
    pub weight_income_corr: f64,
    pub weight_log_sd: f64,
    /// Adjacency used for spatial effects; `None` lays areas on a near-square grid.
    pub graph: Option<AdjacencyGraph>,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        Self {
            n_areas: 30,
            min_area_size: 300,
            max_area_size: 600,
            beta_mean: vec![10.0, 0.15, 0.1, -0.15, 0.1, 0.1],
            beta_var: vec![0.8, -0.25, 0.15, 0.2, -0.15, 0.1],
            sd_mean_effect: 0.3,
            sd_var_effect: 0.5,
            spatial: true,
            heteroscedastic: true,
            weight_income_corr: 0.5,
            weight_log_sd: 0.5,
            graph: None,
        }
    }
}

impl GenerationSpec {
    pub fn validate(&self) -> Result<()> {
        let p = COVARIATE_NAMES.len();
        if self.n_areas < 2 {
            return Err(Error::Config("need at least two areas".into()));
        }
        if self.min_area_size == 0 || self.min_area_size > self.max_area_size {
            return Err(Error::Config("area size range must be nonempty and positive".into()));
        }
        if self.beta_mean.len() != p || self.beta_var.len() != p {
            return Err(Error::Config(format!("coefficient vectors need {p} entries")));
        }
        if [self.sd_mean_effect, self.sd_var_effect, self.weight_log_sd].iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("standard deviations must be nonnegative".into()));
        }
        if !(-1.0..=1.0).contains(&self.weight_income_corr) {
            return Err(Error::Config("weight_income_corr must lie in [-1, 1]".into()));
        }
        if let Some(g) = &self.graph {
            if g.n_areas() != self.n_areas {
                return Err(Error::Config("graph size differs from n_areas".into()));
            }
        }
        Ok(())
    }
}

/// Data-generating parameters kept for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueParameters {
    pub beta_mean: DVector<f64>,
    pub beta_var: DVector<f64>,
    /// Area effects in the mean model.
    pub u: DVector<f64>,
    /// Area effects in `-log sigma2`.
    pub v: DVector<f64>,
    /// Finite-population mean income per area.
    pub area_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPopulation {
    pub n_areas: usize,
    pub area_index: Vec<usize>,
    /// `N x p` unit covariates, intercept first.
    pub x: DMatrix<f64>,
    pub base_weight: Vec<f64>,
    pub y_income: Vec<f64>,
    pub area_sizes: Vec<usize>,
    pub graph: Option<AdjacencyGraph>,
    pub truth: TrueParameters,
}

impl SyntheticPopulation {
    pub fn n_units(&self) -> usize {
        self.y_income.len()
    }

    pub fn area_ids(&self) -> Vec<String> {
        (0..self.n_areas).map(|k| format!("area{k:03}")).collect()
    }

    /// Population area means of the unit covariates (`d x p`).
    pub fn area_covariates(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_areas, self.x.ncols());
        for (u, &k) in self.area_index.iter().enumerate() {
            for j in 0..self.x.ncols() {
                out[(k, j)] += self.x[(u, j)];
            }
        }
        for k in 0..self.n_areas {
            let n = self.area_sizes[k] as f64;
            out.row_mut(k).iter_mut().for_each(|v| *v /= n);
        }
        out
    }

    /// Units belonging to each area, in population order.
    pub fn area_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.n_areas];
        for (u, &k) in self.area_index.iter().enumerate() {
            members[k].push(u);
        }
        members
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Area effects with marginal sd roughly `sd`: iid normal, or ICAR draws
/// centred per component and scaled by the geometric-mean marginal variance.
fn area_effects<R: Rng + ?Sized>(graph: Option<&AdjacencyGraph>, d: usize, sd: f64, rng: &mut R) -> Result<DVector<f64>> {
    let Some(graph) = graph else {
        return Ok(DVector::from_fn(d, |_, _| sd * standard_normal(rng)));
    };
    let icar = build_icar(graph, None)?;
    let mut centred_root = icar.inv_root().clone();
    for mut col in centred_root.column_iter_mut() {
        let mut c = col.clone_owned();
        icar.recenter(&mut c);
        col.copy_from(&c);
    }
    let marginal: Vec<f64> = centred_root.row_iter().map(|r| r.norm_squared()).collect();
    let geo_mean = (marginal.iter().map(|v| v.max(1e-300).ln()).sum::<f64>() / d as f64).exp();
    let z = DVector::from_fn(d, |_, _| standard_normal(rng));
    Ok(centred_root * z * (sd / geo_mean.sqrt()))
}

/// Generates a finite population with log-normal, heteroscedastic income.
pub fn generate_population<R: Rng + ?Sized>(spec: &GenerationSpec, rng: &mut R) -> Result<SyntheticPopulation> {
    spec.validate()?;
    let d = spec.n_areas;
    let p = COVARIATE_NAMES.len();
    let graph = match (&spec.graph, spec.spatial) {
        (Some(g), _) => Some(g.clone()),
        (None, true) => Some(AdjacencyGraph::near_square(d)?),
        (None, false) => None,
    };
    let effect_graph = graph.as_ref().filter(|_| spec.spatial);

    let area_sizes: Vec<usize> = (0..d).map(|_| rng.random_range(spec.min_area_size..=spec.max_area_size)).collect();
    let log_n: Vec<f64> = area_sizes.iter().map(|&n| (n as f64).ln()).collect();
    let (ln_mean, ln_sd) = (mean(&log_n), sd_population(&log_n));
    let age_centre: Vec<f64> = (0..d).map(|_| 0.5 * standard_normal(rng)).collect();
    let race_probs: Vec<[f64; 3]> = (0..d)
        .map(|_| {
            let e = [0.0, 0.7 * standard_normal(rng) - 0.5, 0.7 * standard_normal(rng) - 1.0].map(f64::exp);
            let s: f64 = e.iter().sum();
            e.map(|v| v / s)
        })
        .collect();

    let u = area_effects(effect_graph, d, spec.sd_mean_effect, rng)?;
    let v = if spec.heteroscedastic {
        area_effects(effect_graph, d, spec.sd_var_effect, rng)?
    } else {
        DVector::zeros(d)
    };
    let beta_mean = DVector::from_column_slice(&spec.beta_mean);
    let mut beta_var = DVector::from_column_slice(&spec.beta_var);
    if !spec.heteroscedastic {
        beta_var.rows_mut(1, p - 1).fill(0.0);
    }

    let n_total: usize = area_sizes.iter().sum();
    let mut x = DMatrix::zeros(n_total, p);
    let mut area_index = Vec::with_capacity(n_total);
    let mut log_y = Vec::with_capacity(n_total);
    let sex = Bernoulli::new(0.5).expect("valid probability");
    let mut row = 0;
    for k in 0..d {
        let log_pop = if ln_sd > 0.0 { (log_n[k] - ln_mean) / ln_sd } else { 0.0 };
        for _ in 0..area_sizes[k] {
            let race: f64 = rng.random();
            let covs = [
                1.0,
                age_centre[k] + standard_normal(rng),
                sex.sample(rng) as u8 as f64,
                (race >= race_probs[k][0] && race < race_probs[k][0] + race_probs[k][1]) as u8 as f64,
                (race >= race_probs[k][0] + race_probs[k][1]) as u8 as f64,
                log_pop,
            ];
            for (j, c) in covs.into_iter().enumerate() {
                x[(row, j)] = c;
            }
            let xr = x.row(row);
            let mu = xr.dot(&beta_mean.transpose()) + u[k];
            let sigma2 = (-(xr.dot(&beta_var.transpose()) + v[k])).exp();
            log_y.push(mu + sigma2.sqrt() * standard_normal(rng));
            area_index.push(k);
            row += 1;
        }
    }

    let (ly_mean, ly_sd) = (mean(&log_y), sd_population(&log_y));
    let rho = spec.weight_income_corr;
    let base_weight: Vec<f64> = log_y
        .iter()
        .map(|&ly| {
            let z = if ly_sd > 0.0 { (ly - ly_mean) / ly_sd } else { 0.0 };
            let e = rho * z + (1.0 - rho * rho).sqrt() * standard_normal(rng);
            (3.0 + spec.weight_log_sd * e).exp()
        })
        .collect();
    let y_income: Vec<f64> = log_y.iter().map(|l| l.exp()).collect();
    let mut sums = vec![0.0; d];
    for (&k, &y) in area_index.iter().zip(&y_income) {
        sums[k] += y;
    }
    let area_means = sums.iter().zip(&area_sizes).map(|(s, &n)| s / n as f64).collect();

    Ok(SyntheticPopulation {
        n_areas: d,
        area_index,
        x,
        base_weight,
        y_income,
        area_sizes,
        graph,
        truth: TrueParameters { beta_mean, beta_var, u, v, area_means },
    })
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sd_population(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    StratifiedSrs,
    PoissonPps,
}

impl std::str::FromStr for DesignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "stratified_srs" | "srs" => Ok(Self::StratifiedSrs),
            "poisson_pps" | "pps" => Ok(Self::PoissonPps),
            other => Err(Error::Config(format!("unknown design {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraw {
    /// Selected population units, ascending.
    pub units: Vec<usize>,
    pub inclusion_prob: Vec<f64>,
    pub design_weight: Vec<f64>,
    pub scaled_weight: Vec<f64>,
    pub design_kind: DesignKind,
    pub area_counts: Vec<usize>,
}

impl SampleDraw {
    fn from_selection(
        units: Vec<usize>,
        inclusion_prob: Vec<f64>,
        design_kind: DesignKind,
        area_index: &[usize],
        n_areas: usize,
    ) -> Self {
        let design_weight: Vec<f64> = inclusion_prob.iter().map(|p| 1.0 / p).collect();
        let scaled_weight = scale_to_sample_size(&design_weight);
        let mut area_counts = vec![0; n_areas];
        for &u in &units {
            area_counts[area_index[u]] += 1;
        }
        Self { units, inclusion_prob, design_weight, scaled_weight, design_kind, area_counts }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Stratified simple random sampling without replacement, `n_per_area` per area.
pub fn draw_stratified_srs<R: Rng + ?Sized>(
    pop: &SyntheticPopulation,
    n_per_area: usize,
    rng: &mut R,
) -> Result<SampleDraw> {
    if n_per_area == 0 {
        return Err(Error::Config("n_per_area must be positive".into()));
    }
    if let Some(k) = pop.area_sizes.iter().position(|&n| n < n_per_area) {
        return Err(Error::Data(format!(
            "area {k} has {} units, fewer than the {n_per_area} requested",
            pop.area_sizes[k]
        )));
    }
    let mut units = Vec::with_capacity(n_per_area * pop.n_areas);
    let mut probs = Vec::with_capacity(units.capacity());
    for (k, members) in pop.area_members().iter().enumerate() {
        let pi = n_per_area as f64 / pop.area_sizes[k] as f64;
        let mut chosen: Vec<usize> = index::sample(rng, members.len(), n_per_area).into_iter().map(|i| members[i]).collect();
        chosen.sort_unstable();
        probs.extend(std::iter::repeat_n(pi, chosen.len()));
        units.extend(chosen);
    }
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by_key(|&i| units[i]);
    let units: Vec<usize> = order.iter().map(|&i| units[i]).collect();
    let probs: Vec<f64> = order.iter().map(|&i| probs[i]).collect();
    Ok(SampleDraw::from_selection(units, probs, DesignKind::StratifiedSrs, &pop.area_index, pop.n_areas))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeStandardization {
    /// Population z-scores of the base weight and income.
    #[default]
    ZScore,
    /// Values divided by their population mean, minus one.
    MeanRatio,
}

/// `exp(2 + 0.3 w~ + 0.3 y~)` with z-scored base weight and income.
pub fn compute_size_variable(pop: &SyntheticPopulation) -> Result<Vec<f64>> {
    compute_size_variable_with(&pop.base_weight, &pop.y_income, SizeStandardization::ZScore)
}

pub fn compute_size_variable_with(weight: &[f64], income: &[f64], how: SizeStandardization) -> Result<Vec<f64>> {
    if weight.is_empty() || weight.len() != income.len() {
        return Err(Error::Data("size variable needs equal-length, nonempty columns".into()));
    }
    let standardize = |x: &[f64], name: &str| -> Result<Vec<f64>> {
        let m = mean(x);
        match how {
            SizeStandardization::ZScore => {
                let s = sd_population(x);
                if !(s > 0.0) {
                    return Err(Error::Data(format!("{name} has zero variance")));
                }
                Ok(x.iter().map(|v| (v - m) / s).collect())
            }
            SizeStandardization::MeanRatio => {
                if !(m > 0.0) {
                    return Err(Error::Data(format!("{name} has nonpositive mean")));
                }
                Ok(x.iter().map(|v| v / m - 1.0).collect())
            }
        }
    };
    let w = standardize(weight, "base weight")?;
    let y = standardize(income, "income")?;
    Ok(w.iter().zip(&y).map(|(a, b)| (2.0 + 0.3 * a + 0.3 * b).exp()).collect())
}

/// `pi_u = min(1, expected_n size_u / sum(size))`.
pub fn pps_inclusion_probabilities(size: &[f64], expected_n: f64) -> Result<Vec<f64>> {
    if !(expected_n.is_finite() && expected_n > 0.0) {
        return Err(Error::Config(format!("expected sample size must be positive, got {expected_n}")));
    }
    if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Data("size variable must be positive".into()));
    }
    let total: f64 = size.iter().sum();
    Ok(size.iter().map(|s| (expected_n * s / total).min(1.0)).collect())
}

/// Poisson sampling with probabilities proportional to `size`.
pub fn draw_poisson_pps<R: Rng + ?Sized>(
    pop: &SyntheticPopulation,
    expected_n: f64,
    size: &[f64],
    rng: &mut R,
) -> Result<SampleDraw> {
    if size.len() != pop.n_units() {
        return Err(Error::DimensionMismatch { context: "size variable", expected: pop.n_units(), actual: size.len() });
    }
    let pi = pps_inclusion_probabilities(size, expected_n)?;
    let mut units = Vec::new();
    let mut probs = Vec::new();
    for (u, &p) in pi.iter().enumerate() {
        // One uniform per unit keeps the stream aligned whatever the outcome.
        let draw: f64 = rng.random();
        if p >= 1.0 || draw < p {
            units.push(u);
            probs.push(p);
        }
    }
    if units.is_empty() {
        return Err(Error::Data("Poisson sample selected no units".into()));
    }
    Ok(SampleDraw::from_selection(units, probs, DesignKind::PoissonPps, &pop.area_index, pop.n_areas))
}

/// Rescales weights to sum to their count. Exactly equal weights map to 1.
pub fn scale_to_sample_size(w: &[f64]) -> Vec<f64> {
    if w.is_empty() {
        return Vec::new();
    }
    if w.iter().all(|&v| v == w[0]) {
        return vec![1.0; w.len()];
    }
    let factor = w.len() as f64 / w.iter().sum::<f64>();
    w.iter().map(|v| v * factor).collect()
}

pub fn scale_weights(sample: &SampleDraw) -> SampleDraw {
    SampleDraw { scaled_weight: scale_to_sample_size(&sample.design_weight), ..sample.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanForm {
    /// Weighted mean `sum(w y) / sum(w)`.
    #[default]
    Hajek,
    /// `sum(w y) / N_area`.
    HorvitzThompson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectEstimates {
    /// `NaN` where the area has no sampled units.
    pub mean: Vec<f64>,
    /// `NaN` where fewer than two units were sampled.
    pub variance: Vec<f64>,
    pub n_samp: Vec<usize>,
}

impl DirectEstimates {
    /// Areas without a usable variance estimate.
    pub fn flagged(&self) -> Vec<bool> {
        self.n_samp.iter().map(|&n| n < 2).collect()
    }

    pub fn n_areas(&self) -> usize {
        self.mean.len()
    }
}

/// Per-area direct estimates of the mean of `pop.y_income`.
pub fn direct_estimates(pop: &SyntheticPopulation, sample: &SampleDraw, form: MeanForm) -> DirectEstimates {
    let area: Vec<usize> = sample.units.iter().map(|&u| pop.area_index[u]).collect();
    let y: Vec<f64> = sample.units.iter().map(|&u| pop.y_income[u]).collect();
    direct_estimates_from(&pop.area_sizes, &area, &y, &sample.design_weight, sample.design_kind, form)
}

/// Direct estimates from sampled `(area, y, design weight)` triples.
///
/// Stratified SRS uses `(1 - n/N) s^2 / n`; Poisson PPS uses the linearized
/// `sum w (w - 1) (y - mean)^2 / (sum w)^2`, or with the HT form
/// `sum w (w - 1) y^2 / N^2`.
pub fn direct_estimates_from(
    area_sizes: &[usize],
    area: &[usize],
    y: &[f64],
    w: &[f64],
    design: DesignKind,
    form: MeanForm,
) -> DirectEstimates {
    let d = area_sizes.len();
    let mut groups: Vec<Vec<(f64, f64)>> = vec![Vec::new(); d];
    for ((&k, &yv), &wv) in area.iter().zip(y).zip(w) {
        groups[k].push((yv, wv));
    }
    let mut out = DirectEstimates { mean: vec![f64::NAN; d], variance: vec![f64::NAN; d], n_samp: vec![0; d] };
    for (k, g) in groups.iter().enumerate() {
        let n = g.len();
        out.n_samp[k] = n;
        if n == 0 {
            continue;
        }
        let big_n = area_sizes[k] as f64;
        let sw: f64 = g.iter().map(|(_, w)| w).sum();
        let swy: f64 = g.iter().map(|(y, w)| w * y).sum();
        let m = match form {
            MeanForm::Hajek => swy / sw,
            MeanForm::HorvitzThompson => swy / big_n,
        };
        out.mean[k] = m;
        if n < 2 {
            continue;
        }
        out.variance[k] = match design {
            DesignKind::StratifiedSrs => {
                let nf = n as f64;
                let ybar = g.iter().map(|(y, _)| y).sum::<f64>() / nf;
                let s2 = g.iter().map(|(y, _)| (y - ybar).powi(2)).sum::<f64>() / (nf - 1.0);
                (1.0 - nf / big_n) * s2 / nf
            }
            DesignKind::PoissonPps => match form {
                MeanForm::Hajek => g.iter().map(|(y, w)| w * (w - 1.0) * (y - m).powi(2)).sum::<f64>() / (sw * sw),
                MeanForm::HorvitzThompson => {
                    g.iter().map(|(y, w)| w * (w - 1.0) * y * y).sum::<f64>() / (big_n * big_n)
                }
            },
        }
        .max(0.0);
    }
    out
}
