//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p hetsae-validation --test acceptance -- 2 5` runs only the
//! listed criteria. The process exits non-zero if any selected criterion
//! fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use hetsae::eval::{coverage_rate, interval_score, rmse_metrics, run_replication_study, Estimator, StudyConfig};
use hetsae::gibbs::*;
use hetsae::mlg::{gaussian_approx_params, mlg_log_density, sample_log_gamma, sample_mlg, MlgParams};
use hetsae::models::{fit, AreaDataset, FitConfig, FitData, ModelKind};
use hetsae::rng::stream;
use hetsae::survey::*;
use hetsae_validation::{chi_square_uniform, rank_histogram, Criterion};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let all: [(usize, fn() -> bool); 7] = [
        (1, criterion_mlg),
        (2, criterion_kernels),
        (3, criterion_sbc),
        (4, criterion_replication),
        (5, criterion_exact_metrics),
        (6, criterion_determinism),
        (7, criterion_performance),
    ];
    let mut failed = Vec::new();
    for (id, run) in all {
        if (selected.is_empty() || selected.contains(&id)) && !run() {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}

fn timed(c: &mut Criterion, start: Instant, limit: Duration) -> Duration {
    let elapsed = start.elapsed();
    c.check(elapsed < limit, format!("runtime {:.1} s < {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()));
    elapsed
}

// ---------------------------------------------------------------- 1

fn scalar_mlg(mu: f64, v: f64, a: f64, k: f64) -> MlgParams {
    MlgParams::new(
        DVector::from_element(1, mu),
        DMatrix::from_element(1, 1, v),
        DVector::from_element(1, a),
        DVector::from_element(1, k),
    )
    .unwrap()
}

fn criterion_mlg() -> bool {
    let start = Instant::now();
    let mut c = Criterion::new(1, "MLG density, moments and Gaussian limit");

    for (mu, v, a, k) in [(0.0, 1.0, 1.0, 1.0), (0.3, 2.0, 0.5, 3.0), (-1.0, -0.7, 4.0, 0.25)] {
        let p = scalar_mlg(mu, v, a, k);
        let f = |y: f64| mlg_log_density(&p, &DVector::from_element(1, y)).unwrap().exp();
        let total = integrate(&f, -250.0, 40.0, 1e-11);
        c.check((total - 1.0).abs() < 1e-6, format!("density (v={v}, alpha={a}, kappa={k}) integrates to {total:.10}"));
    }

    let p = scalar_mlg(0.0, 1.0, 1.0, 1.0);
    let mut rng = stream(1, 0);
    let x: Vec<f64> = (0..1_000_000).map(|_| sample_mlg(&p, &mut rng)[0]).collect();
    let (m, v) = (mean(&x), variance(&x));
    let (m0, v0) = (digamma(1.0), trigamma(1.0));
    c.check(((m - m0) / m0).abs() < 0.01, format!("unit log-gamma mean {m:.5} vs psi(1) = {m0:.5}"));
    c.check(((v - v0) / v0).abs() < 0.01, format!("unit log-gamma variance {v:.5} vs psi'(1) = {v0:.5}"));

    let alpha = 1000.0;
    let centre = DVector::from_vec(vec![0.5, -1.0]);
    let root = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
    let p = gaussian_approx_params(&centre, &root, alpha).unwrap();
    let mut rng = stream(2, 0);
    let draws: Vec<DVector<f64>> = (0..1_000_000).map(|_| sample_mlg(&p, &mut rng)).collect();
    let target_cov = &root * root.transpose();
    let bias = alpha.sqrt() * (digamma(alpha) - alpha.ln());
    for j in 0..2 {
        let col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
        let dev = mean(&col) - centre[j];
        let row_sum: f64 = root.row(j).sum();
        c.check(
            dev.abs() < 0.01,
            format!(
                "Gaussian-limit mean[{j}] off by {dev:.5} (exact finite-shape offset {:.5})",
                bias * row_sum
            ),
        );
    }
    for (i, j) in [(0, 0), (1, 1), (0, 1)] {
        let (ci, cj): (Vec<f64>, Vec<f64>) = draws.iter().map(|d| (d[i], d[j])).unzip();
        let (mi, mj) = (mean(&ci), mean(&cj));
        let cov = ci.iter().zip(&cj).map(|(a, b)| (a - mi) * (b - mj)).sum::<f64>() / (ci.len() - 1) as f64;
        let t = target_cov[(i, j)];
        c.check(((cov - t) / t).abs() < 0.02, format!("Gaussian-limit covariance[{i},{j}] {cov:.4} vs {t:.4}"));
    }
    let elapsed = timed(&mut c, start, Duration::from_secs(30));
    c.finish(elapsed)
}

// ---------------------------------------------------------------- 2

/// Three areas, two mean and variance covariates.
struct Fixture {
    design: ModelDesign,
    state: ChainState,
    y: DVector<f64>,
    s2: DVector<f64>,
}

fn fixture() -> Fixture {
    let x = DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 1.0, 0.5, 1.0, 1.5]);
    let design = ModelDesign {
        x_mean: x.clone(),
        x_var: x,
        area_index: vec![0, 1, 2],
        n_areas: 3,
        hyper: Hyperparameters { sigma2_beta1: 4.0, sigma2_beta2: 4.0, a: 2.0, b: 1.0, c: 1.0, alpha_mlg: 1000.0 },
        obs_weight: DVector::from_element(3, 1.0),
        gamma_shape: DVector::from_vec(vec![2.5, 1.5, 4.0]),
        prior: RandomEffectPrior::Iid,
    };
    let mut state = ChainState {
        beta1: DVector::from_vec(vec![0.2, 0.3]),
        beta2: DVector::from_vec(vec![0.1, -0.2]),
        eta1: DVector::from_vec(vec![0.1, -0.1, 0.2]),
        eta2: DVector::from_vec(vec![0.3, -0.2, 0.1]),
        sigma2_eta1: 0.5,
        sigma_eta2: 0.6,
        theta: DVector::zeros(3),
        clamp_count: 0,
    };
    state.theta = update_theta(&state, &design);
    Fixture { design, state, y: DVector::from_vec(vec![0.3, -0.5, 1.1]), s2: DVector::from_vec(vec![0.4, 0.9, 0.25]) }
}

#[derive(Clone, Copy, Debug)]
enum Block {
    Beta1,
    Eta1,
    Sigma2Eta1,
    Beta2,
    Eta2,
    SigmaEta2,
}

impl Block {
    const ALL: [Block; 6] = [Block::Beta1, Block::Eta1, Block::Sigma2Eta1, Block::Beta2, Block::Eta2, Block::SigmaEta2];

    fn get(self, s: &ChainState) -> Vec<f64> {
        match self {
            Block::Beta1 => s.beta1.iter().copied().collect(),
            Block::Eta1 => s.eta1.iter().copied().collect(),
            Block::Sigma2Eta1 => vec![s.sigma2_eta1],
            Block::Beta2 => s.beta2.iter().copied().collect(),
            Block::Eta2 => s.eta2.iter().copied().collect(),
            Block::SigmaEta2 => vec![s.sigma_eta2],
        }
    }

    fn set(self, s: &mut ChainState, v: &[f64]) {
        match self {
            Block::Beta1 => s.beta1 = DVector::from_column_slice(v),
            Block::Eta1 => s.eta1 = DVector::from_column_slice(v),
            Block::Sigma2Eta1 => s.sigma2_eta1 = v[0],
            Block::Beta2 => s.beta2 = DVector::from_column_slice(v),
            Block::Eta2 => s.eta2 = DVector::from_column_slice(v),
            Block::SigmaEta2 => s.sigma_eta2 = v[0],
        }
    }
}

/// Unnormalized log full conditional of `block`, written out directly from
/// the model with everything else held at `f.state`.
fn log_conditional(f: &Fixture, block: Block, v: &[f64]) -> f64 {
    let mut s = f.state.clone();
    block.set(&mut s, v);
    let h = &f.design.hyper;
    let x = &f.design.x_mean;
    let alpha = h.alpha_mlg;
    // -log sigma2_i
    let lin = x * &s.beta2 + &s.eta2;
    let theta = x * &s.beta1 + &s.eta1;
    let gaussian = |theta: &DVector<f64>| -> f64 {
        (0..3).map(|i| -0.5 * (f.y[i] - theta[i]).powi(2) * lin[i].exp()).sum()
    };
    let variance_data = || -> f64 {
        (0..3)
            .map(|i| {
                let r2 = (f.y[i] - theta[i]).powi(2);
                let g = f.design.gamma_shape[i];
                0.5 * lin[i] - 0.5 * r2 * lin[i].exp() + g * lin[i] - g * f.s2[i] * lin[i].exp()
            })
            .sum()
    };
    let log_gamma_prior = |z: f64| alpha * z - alpha * z.exp();
    match block {
        Block::Beta1 => gaussian(&theta) - s.beta1.norm_squared() / (2.0 * h.sigma2_beta1),
        Block::Eta1 => gaussian(&theta) - s.eta1.norm_squared() / (2.0 * s.sigma2_eta1),
        Block::Sigma2Eta1 => {
            let t = s.sigma2_eta1;
            if t <= 0.0 {
                return f64::NEG_INFINITY;
            }
            -(h.a + 1.5 + 1.0) * t.ln() - (h.b + 0.5 * s.eta1.norm_squared()) / t
        }
        Block::Beta2 => {
            let scale = 1.0 / (alpha.sqrt() * h.sigma2_beta2.sqrt());
            variance_data() + s.beta2.iter().map(|b| log_gamma_prior(scale * b)).sum::<f64>()
        }
        Block::Eta2 => {
            let scale = 1.0 / (alpha.sqrt() * s.sigma_eta2);
            variance_data() + s.eta2.iter().map(|e| log_gamma_prior(scale * e)).sum::<f64>()
        }
        Block::SigmaEta2 => {
            let sigma = s.sigma_eta2;
            if sigma <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let scale = 1.0 / (alpha.sqrt() * sigma);
            -3.0 * sigma.ln() + s.eta2.iter().map(|e| log_gamma_prior(scale * e)).sum::<f64>()
                - sigma * sigma / (2.0 * h.c)
        }
    }
}

/// One draw of the library's kernel for `block`.
fn library_kernel(f: &Fixture, block: Block, current: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut s = f.state.clone();
    block.set(&mut s, current);
    s.theta = update_theta(&s, &f.design);
    let d = &f.design;
    let lin = d.variance_linear(&s.beta2, &s.eta2);
    let (sigma2, _) = variances_from_linear(&lin);
    let precision = sigma2.map(|v| 1.0 / v);
    let r2 = (&f.y - &s.theta).map(|r| r * r);
    match block {
        Block::Beta1 => {
            let prior = DMatrix::identity(2, 2) / d.hyper.sigma2_beta1;
            update_gaussian_coefficients(&(&f.y - d.expand(&s.eta1)), &d.x_mean, &precision, &prior, rng)
                .unwrap()
                .iter()
                .copied()
                .collect()
        }
        Block::Eta1 => update_random_effects(&(&f.y - &d.x_mean * &s.beta1), d, &precision, s.sigma2_eta1, rng)
            .unwrap()
            .iter()
            .copied()
            .collect(),
        Block::Sigma2Eta1 => vec![update_random_effect_variance_ig(&s.eta1, d.hyper.a, d.hyper.b, rng)],
        Block::Beta2 | Block::Eta2 => {
            let which = if matches!(block, Block::Beta2) { VarianceBlock::Coefficients } else { VarianceBlock::RandomEffects };
            let cond = build_variance_cmlg(which, &s, d, &r2, Some(&f.s2)).unwrap();
            update_variance_coefficients(&cond.params, rng).iter().copied().collect()
        }
        Block::SigmaEta2 => vec![update_sigma_eta2_mh(&s, d, rng, 0.5).0],
    }
}

struct ChainMoments {
    mean: Vec<f64>,
    var: Vec<f64>,
    mean_se: Vec<f64>,
    var_se: Vec<f64>,
}

fn moments(states: &[Vec<f64>]) -> ChainMoments {
    let dim = states[0].len();
    let mut out = ChainMoments { mean: vec![], var: vec![], mean_se: vec![], var_se: vec![] };
    for j in 0..dim {
        let col = column(states, j);
        let m = mean(&col);
        let sq: Vec<f64> = col.iter().map(|v| (v - m).powi(2)).collect();
        out.mean.push(m);
        out.var.push(variance(&col));
        out.mean_se.push(batch_means_se(&col, 50));
        out.var_se.push(batch_means_se(&sq, 50));
    }
    out
}

fn criterion_kernels() -> bool {
    let start = Instant::now();
    let mut c = Criterion::new(2, "each Gibbs kernel against a generic Metropolis kernel on its conditional");
    let f = fixture();
    let iters = 100_000;
    for (b, block) in Block::ALL.into_iter().enumerate() {
        let target = |v: &[f64]| log_conditional(&f, block, v);
        let init = block.get(&f.state);
        // Pilot runs set per-coordinate steps to about 2.4 marginal sd.
        let mut step = vec![0.2; init.len()];
        let mut rng = stream(20, b as u64);
        for _ in 0..2 {
            let pilot = random_walk_mh(target, &init, &step, 20_000, &mut rng);
            step = (0..init.len()).map(|j| 2.4 * variance(&column(&pilot[5000..], j)).sqrt()).collect();
        }
        let reference = random_walk_mh(target, &init, &step, iters + 5000, &mut rng).split_off(5000);

        let mut rng = stream(21, b as u64);
        let mut x = init.clone();
        let mut mixed = Vec::with_capacity(iters);
        for it in 0..iters + 5000 {
            x = library_kernel(&f, block, &x, &mut rng);
            let mut lp = target(&x);
            mh_sweep(&target, &mut x, &mut lp, &step, &mut rng);
            if it >= 5000 {
                mixed.push(x.clone());
            }
        }
        let (a, r) = (moments(&mixed), moments(&reference));
        for j in 0..init.len() {
            let tol_m = 3.0 * (a.mean_se[j].powi(2) + r.mean_se[j].powi(2)).sqrt();
            let tol_v = 3.0 * (a.var_se[j].powi(2) + r.var_se[j].powi(2)).sqrt();
            let dm = a.mean[j] - r.mean[j];
            let dv = a.var[j] - r.var[j];
            c.check(
                dm.abs() < tol_m,
                format!("{block:?}[{j}] mean {:.4} vs {:.4} (diff {dm:+.4}, 3 MC SE {tol_m:.4})", a.mean[j], r.mean[j]),
            );
            c.check(
                dv.abs() < tol_v,
                format!("{block:?}[{j}] variance {:.4} vs {:.4} (diff {dv:+.4}, 3 MC SE {tol_v:.4})", a.var[j], r.var[j]),
            );
        }
    }
    let elapsed = timed(&mut c, start, Duration::from_secs(300));
    c.finish(elapsed)
}

// ---------------------------------------------------------------- 3

fn log_gamma_draw(alpha: f64, rng: &mut ChaCha8Rng) -> f64 {
    sample_log_gamma(alpha, alpha, rng)
}

/// Draws parameters from the HALM prior and data from the likelihood.
fn sbc_dataset(d: usize, hyper: &Hyperparameters, rng: &mut ChaCha8Rng) -> (AreaDataset, DVector<f64>, f64) {
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let x = DMatrix::from_fn(d, 2, |_, j| if j == 0 { 1.0 } else { normal(rng) });
    let beta1 = DVector::from_fn(2, |_, _| hyper.sigma2_beta1.sqrt() * normal(rng));
    let sigma2_eta1 = hyper.b / Gamma::new(hyper.a, 1.0).unwrap().sample(rng);
    let eta1 = DVector::from_fn(d, |_, _| sigma2_eta1.sqrt() * normal(rng));
    let alpha = hyper.alpha_mlg;
    let beta2 = DVector::from_fn(2, |_, _| alpha.sqrt() * hyper.sigma2_beta2.sqrt() * log_gamma_draw(alpha, rng));
    let sigma_eta2 = (hyper.c.sqrt() * normal(rng)).abs();
    let eta2 = DVector::from_fn(d, |_, _| alpha.sqrt() * sigma_eta2 * log_gamma_draw(alpha, rng));
    let theta = &x * &beta1 + eta1;
    let sigma2 = (&x * &beta2 + eta2).map(|l| (-l).exp());
    let n_samp: Vec<usize> = (0..d).map(|_| rng.random_range(4..=12)).collect();
    let y = DVector::from_fn(d, |i, _| theta[i] + sigma2[i].sqrt() * normal(rng));
    let s2 = DVector::from_fn(d, |i, _| {
        let df = (n_samp[i] - 1) as f64;
        sigma2[i] * ChiSquared::new(df).unwrap().sample(rng) / df
    });
    let ids = (0..d).map(|i| format!("a{i}")).collect();
    (AreaDataset::new(ids, y, s2, n_samp, x).unwrap(), beta1, theta[0])
}

fn criterion_sbc() -> bool {
    let start = Instant::now();
    let mut c = Criterion::new(3, "simulation-based calibration of HALM");
    let hyper = Hyperparameters { sigma2_beta1: 1.0, sigma2_beta2: 0.25, a: 3.0, b: 2.0, c: 0.25, alpha_mlg: 1000.0 };
    let reps = 200;
    // 990 post-burn-in iterations thinned by 10 leave 99 draws: ranks 0..=99.
    let (iterations, burn_in, thin, max_rank, bins) = (1500, 510, 10, 99, 10);
    let mut ranks: [Vec<usize>; 3] = Default::default();
    let mut failures = 0;
    for rep in 0..reps {
        let mut rng = stream(30, rep as u64);
        let (data, beta1, theta1) = sbc_dataset(30, &hyper, &mut rng);
        let config = FitConfig {
            model: ModelKind::Halm,
            iterations,
            burn_in,
            thin,
            seed: 31 + rep as u64,
            hyper,
            ..FitConfig::default()
        };
        let draws = match fit(FitData::Area(&data), &config) {
            Ok(d) => d,
            Err(e) => {
                failures += 1;
                c.note(format!("replication {rep}: fit failed: {e}"));
                continue;
            }
        };
        assert_eq!(draws.area.nrows(), max_rank);
        let rank = |col: Vec<f64>, truth: f64| col.iter().filter(|&&v| v < truth).count();
        ranks[0].push(rank(draws.area.column(0).iter().copied().collect(), theta1));
        for j in 0..2 {
            ranks[j + 1].push(rank(draws.beta1.column(j).iter().copied().collect(), beta1[j]));
        }
    }
    c.check(failures == 0, format!("{failures} of {reps} fits failed"));
    let critical = chi2_critical_005(bins - 1);
    for (name, r) in ["theta[0]", "beta1[0]", "beta1[1]"].iter().zip(&ranks) {
        let h = rank_histogram(r, max_rank, bins);
        let chi2 = chi_square_uniform(&h);
        c.check(chi2 < critical, format!("{name}: chi-square {chi2:.2} (critical {critical}), rank histogram {h:?}"));
    }
    let elapsed = timed(&mut c, start, Duration::from_secs(1800));
    c.finish(elapsed)
}

// ---------------------------------------------------------------- 4

fn criterion_replication() -> bool {
    let start = Instant::now();
    let mut c = Criterion::new(4, "desk-scale replication study (stratified SRS and Poisson PPS)");
    let pop = generate_population(&GenerationSpec::default(), &mut stream(2024, 0)).unwrap();
    c.note(format!("population: {} areas, {} units", pop.n_areas, pop.n_units()));
    let model = |m| Estimator::Model(m);

    let srs = StudyConfig {
        estimators: vec![model(ModelKind::Fh), model(ModelKind::Halm), model(ModelKind::Shalm)],
        k: 50,
        parallelism: 8,
        ..StudyConfig::default()
    };
    let out = run_replication_study(&pop, &srs).unwrap();
    report_table(&c, &out.table);
    let get = |e| out.table.get(model(e)).unwrap().clone();
    let (halm, shalm) = (get(ModelKind::Halm), get(ModelKind::Shalm));
    c.check(halm.rel_rmse < 1.0, format!("SRS: HALM relative RMSE {:.3} < 1", halm.rel_rmse));
    c.check(shalm.rel_rmse < 1.0, format!("SRS: SHALM relative RMSE {:.3} < 1", shalm.rel_rmse));
    c.check(
        shalm.rel_rmse <= halm.rel_rmse,
        format!("SRS: SHALM relative RMSE {:.3} <= HALM {:.3}", shalm.rel_rmse, halm.rel_rmse),
    );
    c.check(
        (0.88..=0.99).contains(&halm.cov_rate),
        format!("SRS: HALM coverage {:.3} in [0.88, 0.99]", halm.cov_rate),
    );

    let mut pps = srs.clone();
    pps.design.kind = DesignKind::PoissonPps;
    pps.estimators = vec![
        model(ModelKind::Fh),
        model(ModelKind::Halm),
        model(ModelKind::Shalm),
        model(ModelKind::PlBulm),
        model(ModelKind::Hulm),
    ];
    let out = run_replication_study(&pop, &pps).unwrap();
    report_table(&c, &out.table);
    let cov = |e| out.table.get(model(e)).unwrap().cov_rate;
    let pl = cov(ModelKind::PlBulm);
    let area_models = cov(ModelKind::Halm).min(cov(ModelKind::Shalm));
    c.check(
        pl + 0.10 <= area_models,
        format!("PPS: PL-BULM coverage {pl:.3} at least 0.10 below HALM/SHALM minimum {area_models:.3}"),
    );
    let elapsed = timed(&mut c, start, Duration::from_secs(1200));
    c.finish(elapsed)
}

fn report_table(c: &Criterion, table: &hetsae::eval::MetricsTable) {
    for e in &table.estimators {
        c.note(format!(
            "{:>8}: rel RMSE {:.3}  abs bias {:.0}  coverage {:.3}  interval score {:.0}",
            e.estimator.to_string(),
            e.rel_rmse,
            e.abs_bias,
            e.cov_rate,
            e.int_score
        ));
    }
    let mut by_estimator = std::collections::BTreeMap::<String, usize>::new();
    for f in &table.failures {
        *by_estimator.entry(f.estimator.to_string()).or_default() += 1;
    }
    if !by_estimator.is_empty() {
        c.note(format!("replicate failures by estimator: {by_estimator:?}"));
    }
}

// ---------------------------------------------------------------- 5

fn criterion_exact_metrics() -> bool {
    let start = Instant::now();
    let mut c = Criterion::new(5, "exact metric identities and design unbiasedness by enumeration");
    for (truth, expected) in [(0.0, 2.0), (2.0, 42.0), (-2.0, 42.0)] {
        let s = interval_score(-1.0, 1.0, truth, 0.05).unwrap();
        c.check((s - expected).abs() < 1e-12, format!("interval score (-1, 1) at {truth} = {s}"));
    }

    let truth = [1.0, -2.0, 3.5];
    let exact = DMatrix::from_fn(4, 3, |_, j| truth[j]);
    let direct = DMatrix::from_fn(4, 3, |r, j| truth[j] + if r % 2 == 0 { 1.0 } else { -2.0 });
    let m = rmse_metrics(&exact, &truth, &direct).unwrap();
    c.check(m.mean_rmse == 0.0 && m.mean_abs_bias == 0.0, "estimates equal to truth: RMSE 0, bias 0");
    let m = rmse_metrics(&exact.add_scalar(0.75), &truth, &direct).unwrap();
    let ok = m.rmse.iter().chain(&m.abs_bias).all(|v| (v - 0.75).abs() < 1e-12);
    c.check(ok, "constant offset 0.75: RMSE and bias 0.75 in every area");
    let m = rmse_metrics(&direct, &truth, &direct).unwrap();
    c.check(m.rel_rmse.iter().all(|&r| r == 1.0), "direct against itself: relative RMSE exactly 1");
    let (_, cov) = coverage_rate(&DMatrix::from_element(4, 1, -1e15), &DMatrix::from_element(4, 1, 1e15), &[0.0]).unwrap();
    c.check(cov == 1.0, "unbounded intervals cover with rate 1");

    // Stratified SRSWOR, N = 6, n = 2: all 15 samples.
    let y = [3.0, 7.5, 1.25, 10.0, 4.0, 6.5];
    let samples: Vec<[usize; 2]> = (0..6).flat_map(|i| (i + 1..6).map(move |j| [i, j])).collect();
    let (mut hajek, mut ht, mut var) = (0.0, 0.0, 0.0);
    for s in &samples {
        let ys = [y[s[0]], y[s[1]]];
        let a = direct_estimates_from(&[6], &[0, 0], &ys, &[3.0, 3.0], DesignKind::StratifiedSrs, MeanForm::Hajek);
        let b = direct_estimates_from(&[6], &[0, 0], &ys, &[3.0, 3.0], DesignKind::StratifiedSrs, MeanForm::HorvitzThompson);
        hajek += a.mean[0] / 15.0;
        ht += b.mean[0] / 15.0;
        var += a.variance[0] / 15.0;
    }
    let pop_mean = mean(&y);
    let design_var = (1.0 - 2.0 / 6.0) * variance(&y) / 2.0;
    c.check(samples.len() == 15 && (hajek - pop_mean).abs() < 1e-12, format!("SRSWOR: mean Hajek {hajek} = {pop_mean}"));
    c.check((ht - pop_mean).abs() < 1e-12, format!("SRSWOR: mean HT {ht} = {pop_mean}"));
    c.check((var - design_var).abs() < 1e-12, format!("SRSWOR: mean variance estimate {var} = {design_var}"));

    // Poisson, N = 6: all 64 outcomes, HT total.
    let pi = pps_inclusion_probabilities(&[1.0, 2.0, 1.5, 3.0, 0.5, 2.5], 3.0).unwrap();
    let mut expected = 0.0;
    for mask in 0u32..64 {
        let chosen: Vec<usize> = (0..6).filter(|i| mask >> i & 1 == 1).collect();
        let prob: f64 = (0..6).map(|i| if mask >> i & 1 == 1 { pi[i] } else { 1.0 - pi[i] }).product();
        if chosen.is_empty() {
            continue;
        }
        let ys: Vec<f64> = chosen.iter().map(|&i| y[i]).collect();
        let ws: Vec<f64> = chosen.iter().map(|&i| 1.0 / pi[i]).collect();
        let e = direct_estimates_from(&[6], &vec![0; ys.len()], &ys, &ws, DesignKind::PoissonPps, MeanForm::HorvitzThompson);
        expected += prob * e.mean[0] * 6.0;
    }
    let total: f64 = y.iter().sum();
    c.check((expected - total).abs() < 1e-12, format!("Poisson: expected HT total {expected} = {total}"));
    let elapsed = timed(&mut c, start, Duration::from_secs(10));
    c.finish(elapsed)
}

// ---------------------------------------------------------------- 6

fn criterion_determinism() -> bool {
    let start = Instant::now();
    let mut c = Criterion::new(6, "bitwise determinism of chains and metrics");
    let dir = tempfile::tempdir().unwrap();
    let input = concat!(env!("CARGO_MANIFEST_DIR"), "/../cli/tests/fixtures/halm_d10.csv");
    let adjacency = concat!(env!("CARGO_MANIFEST_DIR"), "/../cli/tests/fixtures/adjacency_d10.txt");
    for model in ["halm", "shalm"] {
        let run = |name: &str| {
            let out = dir.path().join(format!("{model}-{name}"));
            hetsae_cli::run_args([
                "hetsae", "--command", "fit", "--model", model, "--input", input, "--adjacency", adjacency,
                "--iterations", "2000", "--burn-in", "500", "--seed", "77", "--output", out.to_str().unwrap(),
            ])
            .unwrap();
            std::fs::read(out.join("chains.csv")).unwrap()
        };
        let (a, b) = (run("a"), run("b"));
        c.check(!a.is_empty() && a == b, format!("{model}: chains.csv identical across runs ({} bytes)", a.len()));
    }

    let spec = GenerationSpec { n_areas: 9, min_area_size: 40, max_area_size: 80, ..Default::default() };
    let pop = generate_population(&spec, &mut stream(60, 0)).unwrap();
    for design in [DesignKind::StratifiedSrs, DesignKind::PoissonPps] {
        let mut config = StudyConfig {
            estimators: ModelKind::ALL.iter().map(|&m| Estimator::Model(m)).collect(),
            k: 8,
            base_seed: 61,
            ..StudyConfig::default()
        };
        config.design.kind = design;
        config.design.expected_n = 150.0;
        config.fit.iterations = 600;
        config.fit.burn_in = 200;
        let serial = run_replication_study(&pop, &config).unwrap();
        config.parallelism = 8;
        let parallel = run_replication_study(&pop, &config).unwrap();
        c.check(
            format!("{:?}", serial.table) == format!("{:?}", parallel.table),
            format!("{design:?}: MetricsTable identical at parallelism 1 and 8"),
        );
    }
    let elapsed = start.elapsed();
    c.finish(elapsed)
}

// ---------------------------------------------------------------- 7

fn criterion_performance() -> bool {
    let start = Instant::now();
    let mut c = Criterion::new(7, "HALM with 265 areas and 3000 iterations");
    let d = 265;
    let mut rng = stream(70, 0);
    let x = DMatrix::from_fn(d, 3, |_, j| if j == 0 { 1.0 } else { StandardNormal.sample(&mut rng) });
    let n_samp: Vec<usize> = (0..d).map(|_| rng.random_range(3..=40)).collect();
    let y = DVector::from_fn(d, |i, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        10.5 + 0.2 * x[(i, 1)] - 0.1 * x[(i, 2)] + 0.3 * e
    });
    let s2 = DVector::from_fn(d, |i, _| {
        let df = (n_samp[i] - 1) as f64;
        0.5 / n_samp[i] as f64 * ChiSquared::new(df).unwrap().sample(&mut rng) / df
    });
    let ids = (0..d).map(|i| format!("p{i:03}")).collect();
    let data = AreaDataset::new(ids, y, s2, n_samp, x).unwrap();
    let fit_start = Instant::now();
    let draws = fit(FitData::Area(&data), &FitConfig { iterations: 3000, burn_in: 1000, seed: 71, ..FitConfig::new(ModelKind::Halm) });
    let fit_time = fit_start.elapsed();
    c.check(draws.is_ok(), "fit completed");
    c.check(fit_time < Duration::from_secs(60), format!("fit took {:.2} s (< 60 s)", fit_time.as_secs_f64()));
    c.note(format!("available parallelism: {:?}", std::thread::available_parallelism().map(|n| n.get())));
    c.finish(start.elapsed())
}
