//! Multivariate log-Gamma (MLG) family.
//!
//! `MLG(mu, V, alpha, kappa)` is the law of `V g* + mu` where `g*` holds the
//! logs of independent `Gamma(alpha_i, rate kappa_i)` variates. Its
//! conditional form (cMLG) has kernel `exp{alpha' H x - kappa' exp(H x)}` and
//! is simulated here by least-squares projection of an `MLG(0, I, alpha,
//! kappa)` draw onto the column space of `H`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Open01};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Upper bound applied to arguments of `exp` inside the variance kernels.
pub const EXP_CLAMP: f64 = 700.0;

/// Relative tolerance on the diagonal of `R` used for rank decisions.
pub const RANK_TOL: f64 = 1e-10;

/// `exp(min(x, EXP_CLAMP))`, plus whether the clamp fired.
#[inline]
pub fn clamped_exp(x: f64) -> (f64, bool) {
    if x > EXP_CLAMP {
        (EXP_CLAMP.exp(), true)
    } else {
        (x.exp(), false)
    }
}

/// Draws `log(g)` for `g ~ Gamma(shape, rate)`.
///
/// Shapes below one are boosted: `g = g1 * U^(1/shape)` with
/// `g1 ~ Gamma(shape + 1)`. The product is formed on the log scale so that
/// tiny shapes (small survey weights) cannot underflow to `log(0)`.
pub fn sample_log_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0 && rate > 0.0);
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0)
            .expect("shape validated positive")
            .sample(rng);
        g.ln() - rate.ln()
    } else {
        let g: f64 = Gamma::new(shape + 1.0, 1.0)
            .expect("shape validated positive")
            .sample(rng);
        let u: f64 = Open01.sample(rng);
        g.ln() + u.ln() / shape - rate.ln()
    }
}

fn check_positive(name: &str, v: &DVector<f64>) -> Result<()> {
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::invalid(format!("{name}[{i}] = {x} must be finite and > 0")));
    }
    Ok(())
}

/// Parameters of `MLG(mu, V, alpha, kappa)`.
#[derive(Debug, Clone)]
pub struct MlgParams {
    mu: DVector<f64>,
    v: DMatrix<f64>,
    v_inv: DMatrix<f64>,
    log_abs_det_v_inv: f64,
    alpha: DVector<f64>,
    kappa: DVector<f64>,
}

impl MlgParams {
    pub fn new(
        mu: DVector<f64>,
        v: DMatrix<f64>,
        alpha: DVector<f64>,
        kappa: DVector<f64>,
    ) -> Result<Self> {
        let n = mu.len();
        if !v.is_square() || v.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "MLG structure matrix",
                expected: n,
                actual: v.nrows().max(v.ncols()),
            });
        }
        for (name, x) in [("alpha", &alpha), ("kappa", &kappa)] {
            if x.len() != n {
                return Err(Error::DimensionMismatch {
                    context: if name == "alpha" { "MLG shape" } else { "MLG rate" },
                    expected: n,
                    actual: x.len(),
                });
            }
        }
        check_positive("alpha", &alpha)?;
        check_positive("kappa", &kappa)?;

        let lu = v.clone().lu();
        let u = lu.u();
        let pivots = u.diagonal();
        let max_pivot = pivots.iter().fold(0.0_f64, |m, p| m.max(p.abs()));
        let min_pivot = pivots.iter().fold(f64::INFINITY, |m, p| m.min(p.abs()));
        if !(max_pivot > 0.0) || min_pivot <= max_pivot * f64::EPSILON * n as f64 {
            return Err(Error::SingularMatrix("MLG structure matrix V"));
        }
        let v_inv = lu.try_inverse().ok_or(Error::SingularMatrix("MLG structure matrix V"))?;
        if v_inv.iter().any(|x| !x.is_finite()) {
            return Err(Error::SingularMatrix("MLG structure matrix V"));
        }
        let log_abs_det_v_inv = -pivots.iter().map(|p| p.abs().ln()).sum::<f64>();

        Ok(Self {
            mu,
            v,
            v_inv,
            log_abs_det_v_inv,
            alpha,
            kappa,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn v_inv(&self) -> &DMatrix<f64> {
        &self.v_inv
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn kappa(&self) -> &DVector<f64> {
        &self.kappa
    }

    /// Log density at `y`.
    ///
    /// `|det V^-1|` is used so that structure matrices with negative
    /// determinant still give a proper density.
    pub fn log_density(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "MLG density argument",
                expected: self.dim(),
                actual: y.len(),
            });
        }
        let z = &self.v_inv * (y - &self.mu);
        let mut total = self.log_abs_det_v_inv;
        for i in 0..self.dim() {
            let (a, k) = (self.alpha[i], self.kappa[i]);
            total += a * k.ln() - ln_gamma(a);
            total += a * z[i] - k * clamped_exp(z[i]).0;
        }
        Ok(total)
    }

    /// Maps independent gamma variates `g` to `V log(g) + mu`.
    pub fn transform_gammas(&self, g: &DVector<f64>) -> DVector<f64> {
        self.transform_log_gammas(&g.map(f64::ln))
    }

    pub fn transform_log_gammas(&self, log_g: &DVector<f64>) -> DVector<f64> {
        &self.v * log_g + &self.mu
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let log_g = DVector::from_fn(self.dim(), |i, _| {
            sample_log_gamma(self.alpha[i], self.kappa[i], rng)
        });
        self.transform_log_gammas(&log_g)
    }
}

pub fn mlg_log_density(params: &MlgParams, y: &DVector<f64>) -> Result<f64> {
    params.log_density(y)
}

pub fn sample_mlg<R: Rng + ?Sized>(params: &MlgParams, rng: &mut R) -> DVector<f64> {
    params.sample(rng)
}

/// `MLG(c, sqrt(alpha) V, alpha 1, alpha 1)`, which tends to `N(c, V V')`
/// as `alpha` grows.
pub fn gaussian_approx_params(c: &DVector<f64>, v: &DMatrix<f64>, alpha: f64) -> Result<MlgParams> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let n = c.len();
    MlgParams::new(
        c.clone(),
        v * alpha.sqrt(),
        DVector::from_element(n, alpha),
        DVector::from_element(n, alpha),
    )
}

/// Parameters of the conditional MLG with kernel
/// `exp{alpha' H x - kappa' exp(H x)}`.
///
/// A centering vector `mu*` in `exp(H x - mu*)` is folded into the rate as
/// `kappa * exp(-mu*)`, so it never needs to be stored.
#[derive(Debug, Clone)]
pub struct CmlgParams {
    h: DMatrix<f64>,
    alpha: DVector<f64>,
    kappa: DVector<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl CmlgParams {
    pub fn new(h: DMatrix<f64>, alpha: DVector<f64>, kappa: DVector<f64>) -> Result<Self> {
        let (n, cols) = h.shape();
        if alpha.len() != n {
            return Err(Error::DimensionMismatch {
                context: "cMLG shape",
                expected: n,
                actual: alpha.len(),
            });
        }
        if kappa.len() != n {
            return Err(Error::DimensionMismatch {
                context: "cMLG rate",
                expected: n,
                actual: kappa.len(),
            });
        }
        check_positive("alpha", &alpha)?;
        check_positive("kappa", &kappa)?;
        if cols == 0 || n < cols {
            return Err(Error::RankDeficient { rank: n.min(cols), cols });
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("cMLG matrix H has non-finite entries"));
        }

        let qr = h.clone().qr();
        let r = qr.r();
        let diag = r.diagonal();
        let max_diag = diag.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let rank = diag.iter().filter(|x| x.abs() > RANK_TOL * max_diag).count();
        if rank < cols || max_diag == 0.0 {
            return Err(Error::RankDeficient { rank, cols });
        }
        let q = qr.q();
        Ok(Self { h, alpha, kappa, q, r })
    }

    /// Builds the parameters for the kernel `exp{alpha' H x - kappa' exp(H x - mu_star)}`.
    pub fn with_centering(
        h: DMatrix<f64>,
        alpha: DVector<f64>,
        kappa: DVector<f64>,
        mu_star: &DVector<f64>,
    ) -> Result<Self> {
        if mu_star.len() != kappa.len() {
            return Err(Error::DimensionMismatch {
                context: "cMLG centering",
                expected: kappa.len(),
                actual: mu_star.len(),
            });
        }
        let adjusted = kappa.zip_map(mu_star, |k, m| k * (-m).exp());
        Self::new(h, alpha, adjusted)
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn kappa(&self) -> &DVector<f64> {
        &self.kappa
    }

    /// Number of rows of `H` (the length of the underlying MLG vector).
    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    /// Dimension of the conditioned block.
    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    /// `(H'H)^-1 H' y`, evaluated through the QR factors of `H`.
    pub fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        let qty = self.q.tr_mul(y);
        self.r
            .solve_upper_triangular(&qty)
            .expect("R has a nonzero diagonal after the rank check")
    }

    /// Unnormalized log kernel `alpha' H x - kappa' exp(H x)`.
    pub fn log_kernel(&self, x: &DVector<f64>) -> f64 {
        let hx = &self.h * x;
        hx.iter()
            .zip(self.alpha.iter().zip(self.kappa.iter()))
            .map(|(&e, (&a, &k))| a * e - k * clamped_exp(e).0)
            .sum()
    }

    /// Draws `Y ~ MLG(0, I, alpha, kappa)`; the input to [`Self::project`].
    pub fn sample_underlying<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.rows(), |i, _| {
            sample_log_gamma(self.alpha[i], self.kappa[i], rng)
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let y = self.sample_underlying(rng);
        self.project(&y)
    }
}

pub fn sample_cmlg<R: Rng + ?Sized>(params: &CmlgParams, rng: &mut R) -> DVector<f64> {
    params.sample(rng)
}
