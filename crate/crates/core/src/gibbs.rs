//! Full-conditional update kernels shared by every model fitter.
//!
//! Mean-model blocks (`beta1`, `eta1`) are conjugate Gaussian. Variance-model
//! blocks (`beta2`, `eta2`) are cMLG under the negative log link
//! `-log sigma2_i = x_i' beta2 + eta2[area(i)]`. `sigma2_eta1` is inverse
//! gamma and `sigma_eta2` takes one random-walk Metropolis-Hastings step.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::mlg::{clamped_exp, sample_log_gamma, CmlgParams};
use crate::spatial::IcarStructure;

/// Floor applied to cMLG rates built from squared residuals.
pub const RATE_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    /// Prior variance of each mean coefficient.
    pub sigma2_beta1: f64,
    /// Gaussian-limit prior variance of each variance coefficient.
    pub sigma2_beta2: f64,
    /// Inverse-gamma shape for `sigma2_eta1`.
    pub a: f64,
    /// Inverse-gamma scale for `sigma2_eta1`.
    pub b: f64,
    /// Variance of the half-normal prior on `sigma_eta2`.
    pub c: f64,
    /// MLG shape controlling closeness to the Gaussian limit.
    pub alpha_mlg: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            sigma2_beta1: 1000.0,
            sigma2_beta2: 1000.0,
            a: 0.5,
            b: 0.5,
            c: 5.0,
            alpha_mlg: 1000.0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("sigma2_beta1", self.sigma2_beta1),
            ("sigma2_beta2", self.sigma2_beta2),
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("alpha_mlg", self.alpha_mlg),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("hyperparameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Scale of the MLG prior rows for `beta2`: `alpha^-1/2 / sigma_beta2`.
    pub fn beta2_prior_row_scale(&self) -> f64 {
        1.0 / (self.alpha_mlg.sqrt() * self.sigma2_beta2.sqrt())
    }
}

/// Prior structure of the area random effects.
#[derive(Debug, Clone, Default)]
pub enum RandomEffectPrior {
    #[default]
    Iid,
    Icar(Arc<IcarStructure>),
}

/// Everything about a model that stays fixed while the chain runs.
#[derive(Debug, Clone)]
pub struct ModelDesign {
    /// `n x p` mean-model design.
    pub x_mean: DMatrix<f64>,
    /// `n x p_v` variance-model design; `p_v` may be zero.
    pub x_var: DMatrix<f64>,
    /// Row `i` of the incidence matrix has its single 1 in column `area_index[i]`.
    pub area_index: Vec<usize>,
    pub n_areas: usize,
    pub hyper: Hyperparameters,
    /// Pseudo-likelihood exponent per observation; all ones for area-level data.
    pub obs_weight: DVector<f64>,
    /// `(n_i - 1) / 2` for each row carrying an `s2` observation, else 0.
    pub gamma_shape: DVector<f64>,
    pub prior: RandomEffectPrior,
}

impl ModelDesign {
    pub fn validate(&self) -> Result<()> {
        let n = self.x_mean.nrows();
        let check = |context: &'static str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { context, expected: n, actual: len })
            }
        };
        check("variance design rows", self.x_var.nrows())?;
        check("incidence rows", self.area_index.len())?;
        check("observation weights", self.obs_weight.len())?;
        check("gamma shapes", self.gamma_shape.len())?;
        if let Some(&k) = self.area_index.iter().find(|&&k| k >= self.n_areas) {
            return Err(Error::Data(format!("area index {k} out of range for {} areas", self.n_areas)));
        }
        if self.obs_weight.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Data("observation weights must be positive".into()));
        }
        if self.gamma_shape.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Data("gamma shapes must be nonnegative".into()));
        }
        if let RandomEffectPrior::Icar(icar) = &self.prior {
            if icar.n_areas() != self.n_areas {
                return Err(Error::DimensionMismatch {
                    context: "ICAR areas",
                    expected: self.n_areas,
                    actual: icar.n_areas(),
                });
            }
        }
        self.hyper.validate()
    }

    pub fn n_obs(&self) -> usize {
        self.x_mean.nrows()
    }

    /// Dense incidence matrix `Psi`.
    pub fn psi(&self) -> DMatrix<f64> {
        let mut psi = DMatrix::zeros(self.n_obs(), self.n_areas);
        for (i, &k) in self.area_index.iter().enumerate() {
            psi[(i, k)] = 1.0;
        }
        psi
    }

    /// `Psi eta`.
    pub fn expand(&self, eta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n_obs(), self.area_index.iter().map(|&k| eta[k]))
    }

    /// `Psi' v`.
    pub fn aggregate(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_areas);
        for (i, &k) in self.area_index.iter().enumerate() {
            out[k] += v[i];
        }
        out
    }

    /// Linear predictor of `-log sigma2`: `X_var beta2 + Psi eta2`.
    pub fn variance_linear(&self, beta2: &DVector<f64>, eta2: &DVector<f64>) -> DVector<f64> {
        let mut lin = self.expand(eta2);
        if self.x_var.ncols() > 0 {
            lin += &self.x_var * beta2;
        }
        lin
    }
}

/// One state of the Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub beta1: DVector<f64>,
    pub beta2: DVector<f64>,
    pub eta1: DVector<f64>,
    pub eta2: DVector<f64>,
    pub sigma2_eta1: f64,
    pub sigma_eta2: f64,
    pub theta: DVector<f64>,
    pub clamp_count: u64,
}

impl ChainState {
    pub fn is_finite(&self) -> bool {
        [&self.beta1, &self.beta2, &self.eta1, &self.eta2, &self.theta]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
            && self.sigma2_eta1.is_finite()
            && self.sigma2_eta1 > 0.0
            && self.sigma_eta2.is_finite()
            && self.sigma_eta2 > 0.0
    }
}

/// Draws `N(A^-1 Z' W y, A^-1)` with `A = Z' W Z + P` and `W = diag(resid_precision)`.
pub fn update_gaussian_coefficients<R: Rng + ?Sized>(
    y_adj: &DVector<f64>,
    z: &DMatrix<f64>,
    resid_precision: &DVector<f64>,
    prior_precision: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let eps = standard_normals(z.ncols(), rng);
    gaussian_coefficients_from_normals(y_adj, z, resid_precision, prior_precision, &eps)
}

/// The deterministic part of [`update_gaussian_coefficients`]: returns
/// `mean + L^-T eps` where `L L' = A`.
pub fn gaussian_coefficients_from_normals(
    y_adj: &DVector<f64>,
    z: &DMatrix<f64>,
    resid_precision: &DVector<f64>,
    prior_precision: &DMatrix<f64>,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (n, p) = z.shape();
    if y_adj.len() != n || resid_precision.len() != n {
        return Err(Error::DimensionMismatch {
            context: "Gaussian update data",
            expected: n,
            actual: y_adj.len().min(resid_precision.len()),
        });
    }
    if prior_precision.shape() != (p, p) || eps.len() != p {
        return Err(Error::DimensionMismatch {
            context: "Gaussian update prior",
            expected: p,
            actual: prior_precision.nrows(),
        });
    }
    let mut wz = z.clone();
    for (i, mut row) in wz.row_iter_mut().enumerate() {
        row *= resid_precision[i];
    }
    let precision = wz.tr_mul(z) + prior_precision;
    let rhs = wz.tr_mul(y_adj);
    draw_from_precision(precision, &rhs, eps)
}

fn draw_from_precision(precision: DMatrix<f64>, rhs: &DVector<f64>, eps: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = precision
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("Gaussian full-conditional precision"))?;
    let mean = chol.solve(rhs);
    let noise = chol
        .l()
        .tr_solve_lower_triangular(eps)
        .ok_or(Error::NotPositiveDefinite("Gaussian full-conditional precision"))?;
    let draw = mean + noise;
    if draw.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence("non-finite Gaussian draw".into()));
    }
    Ok(draw)
}

/// Gaussian update of area random effects `eta` with incidence design.
///
/// With an iid prior (`prior_precision` = `1/sigma2`) the areas decouple and
/// are drawn independently; an ICAR prior uses the dense precision
/// `Psi' W Psi + (Q + jitter I) / sigma2`. Both consume one standard normal
/// per area, in area order.
pub fn update_random_effects<R: Rng + ?Sized>(
    y_adj: &DVector<f64>,
    design: &ModelDesign,
    resid_precision: &DVector<f64>,
    sigma2: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let r = design.n_areas;
    let eps = standard_normals(r, rng);
    let data_precision = design.aggregate(resid_precision);
    let rhs = design.aggregate(&y_adj.component_mul(resid_precision));
    match &design.prior {
        RandomEffectPrior::Iid => {
            let tau = 1.0 / sigma2;
            Ok(DVector::from_fn(r, |k, _| {
                let prec = data_precision[k] + tau;
                rhs[k] / prec + eps[k] / prec.sqrt()
            }))
        }
        RandomEffectPrior::Icar(icar) => {
            let mut precision = icar.regularized_precision() / sigma2;
            for k in 0..r {
                precision[(k, k)] += data_precision[k];
            }
            draw_from_precision(precision, &rhs, &eps)
        }
    }
}

fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// `theta = X_mean beta1 + Psi eta1`.
pub fn update_theta(state: &ChainState, design: &ModelDesign) -> DVector<f64> {
    &design.x_mean * &state.beta1 + design.expand(&state.eta1)
}

/// Which variance-model block a cMLG conditional is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceBlock {
    Coefficients,
    RandomEffects,
}

/// A cMLG full conditional and the number of clamped exponentials met while
/// building it.
#[derive(Debug, Clone)]
pub struct VarianceConditional {
    pub params: CmlgParams,
    pub clamp_events: u64,
}

/// Shape and rate of the data rows, followed by the `s2` rows when present.
struct DataRows {
    shape: Vec<f64>,
    rate: Vec<f64>,
    with_s2: bool,
    clamps: u64,
}

fn variance_data_rows(
    offset: &DVector<f64>,
    design: &ModelDesign,
    residuals_sq: &DVector<f64>,
    s2: Option<&DVector<f64>>,
) -> Result<DataRows> {
    let n = design.n_obs();
    if residuals_sq.len() != n {
        return Err(Error::DimensionMismatch {
            context: "squared residuals",
            expected: n,
            actual: residuals_sq.len(),
        });
    }
    if let Some(s2) = s2 {
        if s2.len() != n {
            return Err(Error::DimensionMismatch { context: "s2", expected: n, actual: s2.len() });
        }
        if design.gamma_shape.iter().any(|g| *g <= 0.0) {
            return Err(Error::Data("s2 rows need positive gamma shapes (n_i >= 2)".into()));
        }
    }
    let rows = if s2.is_some() { 2 * n } else { n };
    let mut shape = Vec::with_capacity(rows);
    let mut rate = Vec::with_capacity(rows);
    let mut clamps = 0u64;
    let mut scale = Vec::with_capacity(n);
    for &o in offset.iter() {
        let (e, hit) = clamped_exp(o);
        clamps += hit as u64;
        scale.push(e);
    }
    let mut push = |a: f64, k: f64, clamps: &mut u64| {
        shape.push(a);
        if k >= RATE_FLOOR && k.is_finite() {
            rate.push(k);
        } else {
            *clamps += 1;
            rate.push(if k.is_finite() { RATE_FLOOR } else { f64::MAX });
        }
    };
    for i in 0..n {
        let w = design.obs_weight[i];
        push(0.5 * w, 0.5 * w * residuals_sq[i] * scale[i], &mut clamps);
    }
    if let Some(s2) = s2 {
        for i in 0..n {
            let g = design.gamma_shape[i];
            push(g, s2[i] * g * scale[i], &mut clamps);
        }
    }
    Ok(DataRows { shape, rate, with_s2: s2.is_some(), clamps })
}

/// Builds the cMLG full conditional of `beta2` or `eta2`.
///
/// `H` stacks the data rows (`X_var` or `Psi`), the same rows again for the
/// `s2` observations when `s2` is given, and the prior rows
/// `alpha^-1/2 / sigma * S` where `S` is the identity or, for `eta2` under an
/// ICAR prior, the symmetric root of `Q + jitter I`. Data rows have shape
/// `w_i / 2` and rate `w_i (y_i - theta_i)^2 / 2 * exp(other)`, the `s2`
/// rows have shape `(n_i - 1)/2` and rate `s2_i (n_i - 1)/2 * exp(other)`,
/// and the prior rows have shape and rate `alpha`.
pub fn build_variance_cmlg(
    which: VarianceBlock,
    state: &ChainState,
    design: &ModelDesign,
    residuals_sq: &DVector<f64>,
    s2: Option<&DVector<f64>>,
) -> Result<VarianceConditional> {
    let alpha = design.hyper.alpha_mlg;
    let (data_h, offset, prior_block) = match which {
        VarianceBlock::Coefficients => {
            let p = design.x_var.ncols();
            if p == 0 {
                return Err(Error::invalid("variance design has no columns"));
            }
            let scale = design.hyper.beta2_prior_row_scale();
            (
                design.x_var.clone(),
                design.expand(&state.eta2),
                DMatrix::identity(p, p) * scale,
            )
        }
        VarianceBlock::RandomEffects => {
            if !(state.sigma_eta2.is_finite() && state.sigma_eta2 > 0.0) {
                return Err(Error::invalid(format!(
                    "sigma_eta2 must be positive, got {}",
                    state.sigma_eta2
                )));
            }
            let scale = 1.0 / (alpha.sqrt() * state.sigma_eta2);
            let block = match &design.prior {
                RandomEffectPrior::Iid => DMatrix::identity(design.n_areas, design.n_areas) * scale,
                RandomEffectPrior::Icar(icar) => icar.root() * scale,
            };
            let offset = if design.x_var.ncols() > 0 {
                &design.x_var * &state.beta2
            } else {
                DVector::zeros(design.n_obs())
            };
            (design.psi(), offset, block)
        }
    };

    let rows = variance_data_rows(&offset, design, residuals_sq, s2)?;
    let n = design.n_obs();
    let cols = data_h.ncols();
    let n_prior = prior_block.nrows();
    let data_blocks = if rows.with_s2 { 2 } else { 1 };
    let total = data_blocks * n + n_prior;
    let mut h = DMatrix::zeros(total, cols);
    for b in 0..data_blocks {
        h.view_mut((b * n, 0), (n, cols)).copy_from(&data_h);
    }
    h.view_mut((data_blocks * n, 0), (n_prior, cols)).copy_from(&prior_block);
    let mut shape = rows.shape;
    let mut rate = rows.rate;
    shape.extend(std::iter::repeat_n(alpha, n_prior));
    rate.extend(std::iter::repeat_n(alpha, n_prior));
    let params = CmlgParams::new(h, DVector::from_vec(shape), DVector::from_vec(rate))?;
    Ok(VarianceConditional { params, clamp_events: rows.clamps })
}

/// Projection draw from a cMLG conditional built by [`build_variance_cmlg`].
pub fn update_variance_coefficients<R: Rng + ?Sized>(params: &CmlgParams, rng: &mut R) -> DVector<f64> {
    params.sample(rng)
}

/// Same draw as `build_variance_cmlg(RandomEffects, ..)` followed by
/// [`update_variance_coefficients`] under an iid prior, on the identical
/// stream, without materializing `H`.
///
/// With `H = [Psi; Psi; c I]`, `H'H` is diagonal with entries
/// `m_k + c^2` (`m_k` = data rows in area `k`), so the projection is a
/// per-area weighted sum.
pub fn sample_iid_random_effect_variance<R: Rng + ?Sized>(
    state: &ChainState,
    design: &ModelDesign,
    residuals_sq: &DVector<f64>,
    s2: Option<&DVector<f64>>,
    rng: &mut R,
) -> Result<(DVector<f64>, u64)> {
    if !matches!(design.prior, RandomEffectPrior::Iid) {
        return Err(Error::invalid("diagonal projection requires an iid random-effect prior"));
    }
    if !(state.sigma_eta2.is_finite() && state.sigma_eta2 > 0.0) {
        return Err(Error::invalid(format!("sigma_eta2 must be positive, got {}", state.sigma_eta2)));
    }
    let alpha = design.hyper.alpha_mlg;
    let c = 1.0 / (alpha.sqrt() * state.sigma_eta2);
    let offset = if design.x_var.ncols() > 0 {
        &design.x_var * &state.beta2
    } else {
        DVector::zeros(design.n_obs())
    };
    let rows = variance_data_rows(&offset, design, residuals_sq, s2)?;
    let n = design.n_obs();
    let r = design.n_areas;
    let mut sums = vec![0.0; r];
    let mut counts = vec![0.0; r];
    for (row, (&a, &k)) in rows.shape.iter().zip(rows.rate.iter()).enumerate() {
        let y = sample_log_gamma(a, k, rng);
        let area = design.area_index[row % n];
        sums[area] += y;
        counts[area] += 1.0;
    }
    let c2 = c * c;
    let mut out = DVector::zeros(r);
    for k in 0..r {
        let y = sample_log_gamma(alpha, alpha, rng);
        out[k] = (sums[k] + c * y) / (counts[k] + c2);
    }
    Ok((out, rows.clamps))
}

/// `sigma2_i = exp(-lin_i)` with the exponent clamped; returns the clamp count.
pub fn variances_from_linear(lin: &DVector<f64>) -> (DVector<f64>, u64) {
    let mut clamps = 0;
    let v = lin.map(|l| {
        let (e, hit) = clamped_exp(-l);
        clamps += hit as u64;
        e.max(f64::MIN_POSITIVE)
    });
    (v, clamps)
}

/// Draws `IG(shape, scale)` as `scale / Gamma(shape, 1)`.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
    scale / g
}

/// Conjugate draw `IG(a + count/2, b + sum_sq/2)`.
pub fn sample_ig_posterior<R: Rng + ?Sized>(a: f64, b: f64, count: f64, sum_sq: f64, rng: &mut R) -> f64 {
    sample_inverse_gamma(a + 0.5 * count, b + 0.5 * sum_sq, rng)
}

/// `sigma2_eta1 | . ~ IG(a + r/2, b + eta1'eta1/2)`.
pub fn update_random_effect_variance_ig<R: Rng + ?Sized>(
    eta1: &DVector<f64>,
    a: f64,
    b: f64,
    rng: &mut R,
) -> f64 {
    sample_ig_posterior(a, b, eta1.len() as f64, eta1.norm_squared(), rng)
}

/// Half-normal prior on `sigma_eta2` plus the `sigma`-dependent part of the
/// MLG prior density of `eta2` at scale `sigma`.
pub fn sigma_eta2_log_target(sigma: f64, eta2: &DVector<f64>, design: &ModelDesign) -> f64 {
    if !(sigma.is_finite() && sigma > 0.0) {
        return f64::NEG_INFINITY;
    }
    let alpha = design.hyper.alpha_mlg;
    let r = eta2.len() as f64;
    let s_eta = match &design.prior {
        RandomEffectPrior::Iid => eta2.clone(),
        RandomEffectPrior::Icar(icar) => icar.root() * eta2,
    };
    let scale = 1.0 / (alpha.sqrt() * sigma);
    let mlg: f64 = s_eta
        .iter()
        .map(|&e| {
            let z = e * scale;
            alpha * z - alpha * clamped_exp(z).0
        })
        .sum();
    -r * sigma.ln() + mlg - sigma * sigma / (2.0 * design.hyper.c)
}

/// `log Phi(x)`.
fn log_std_normal_cdf(x: f64) -> f64 {
    (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
}

/// Log acceptance ratio of a move `current -> proposed` under the
/// zero-truncated normal random walk, Hastings correction included.
pub fn sigma_eta2_log_acceptance(
    current: f64,
    proposed: f64,
    eta2: &DVector<f64>,
    design: &ModelDesign,
    proposal_sd: f64,
) -> f64 {
    if proposed <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if proposed == current {
        return 0.0;
    }
    sigma_eta2_log_target(proposed, eta2, design) - sigma_eta2_log_target(current, eta2, design)
        + log_std_normal_cdf(current / proposal_sd)
        - log_std_normal_cdf(proposed / proposal_sd)
}

/// One Metropolis-Hastings step for `sigma_eta2`. Returns the new value and
/// whether the proposal was accepted.
pub fn update_sigma_eta2_mh<R: Rng + ?Sized>(
    state: &ChainState,
    design: &ModelDesign,
    rng: &mut R,
    proposal_sd: f64,
) -> (f64, bool) {
    let current = state.sigma_eta2;
    let proposed = loop {
        let z: f64 = StandardNormal.sample(rng);
        let x = current + proposal_sd * z;
        if x > 0.0 {
            break x;
        }
    };
    let log_ratio = sigma_eta2_log_acceptance(current, proposed, &state.eta2, design, proposal_sd);
    let u: f64 = rng.random();
    if u.ln() < log_ratio {
        (proposed, true)
    } else {
        (current, false)
    }
}
