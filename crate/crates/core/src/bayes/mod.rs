//! Hierarchical Bayesian combination with discounted likelihood and AR(1)
//! imputation of missing forecasts.
//!
//! Model for a window of `L` rows and `m` analysts:
//!
//! ```text
//! y_t      ~ N(ω₀ + ωᵀx_t, σ² / p_t(λ))
//! ω        ~ Dir(α)            ω₀  ~ N(0, τ²_ω₀)
//! λ        ~ U(c₀, d₀)         σ²  ~ InvGamma(a₀, b₀)
//! X_{1,j}  ~ N(γ_j, σ²_j)
//! X_{l+1,j} | X_{l,j} ~ N(γ_j + φ_j (X_{l,j} - γ_j), σ²_j)
//! φ_j ~ U(e₀, f₀)   γ_j ~ N(x̄_j, τ²_γ)   σ²_j ~ InvGamma(g₀, h₀)
//! ```
//!
//! The next value is predicted as `Y_{L+1} ~ N(ω₀ + ωᵀx_{L+1}, σ²)`.
//! [`sample_posterior`] runs independent Metropolis-within-Gibbs chains (see
//! [`Sampler`]) and attaches one predictive draw to every kept sample.

mod diagnostics;
mod export;
mod sampler;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::discount::make_schedule;
use crate::panel::WindowView;

pub use diagnostics::{diagnostics, effective_sample_size, rhat, split_rhat, DiagnosticReport, ParamDiagnostic};
pub use export::{lambda_histogram, write_draws_csv, HistogramBin};
pub use sampler::{AcceptanceRates, Frozen, Sampler};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BayesError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid window: {0}")]
    Window(String),
}

/// Priors, chain layout and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesConfig {
    /// Dirichlet concentration per analyst; `None` means all ones.
    pub alpha: Option<Vec<f64>>,
    pub omega0_var: f64,
    pub lambda_bounds: (f64, f64),
    /// Inverse-gamma (shape, rate) for `σ²`.
    pub sigma2_prior: (f64, f64),
    pub phi_bounds: (f64, f64),
    pub gamma_var: f64,
    /// Inverse-gamma (shape, rate) for each `σ²_j`.
    pub sigma2_x_prior: (f64, f64),
    pub chains: usize,
    pub burn_in: usize,
    pub keep: usize,
    pub seed: u64,
    /// Drop the `y` likelihood (prior-recovery checks).
    pub prior_only: bool,
}

impl Default for BayesConfig {
    fn default() -> Self {
        Self {
            alpha: None,
            omega0_var: 1000.0,
            lambda_bounds: (0.0, 1.0),
            sigma2_prior: (0.1, 0.1),
            phi_bounds: (-1.0, 1.0),
            gamma_var: 100.0,
            sigma2_x_prior: (0.1, 0.1),
            chains: 2,
            burn_in: 10_000,
            keep: 20_000,
            seed: 0,
            prior_only: false,
        }
    }
}

impl BayesConfig {
    /// Small budget used by the test suites: 2 chains of 1000 + 4000.
    pub fn reduced() -> Self {
        Self {
            burn_in: 1000,
            keep: 4000,
            ..Self::default()
        }
    }

    pub fn validate(&self, m: usize) -> Result<(), BayesError> {
        let bad = |s: &str| Err(BayesError::Config(s.to_string()));
        if let Some(a) = &self.alpha {
            if a.len() != m {
                return Err(BayesError::Config(format!(
                    "{} Dirichlet concentrations for {m} analysts",
                    a.len()
                )));
            }
            if a.iter().any(|v| !(*v > 0.0)) {
                return bad("Dirichlet concentrations must be positive");
            }
        }
        let positive = [
            self.omega0_var,
            self.sigma2_prior.0,
            self.sigma2_prior.1,
            self.gamma_var,
            self.sigma2_x_prior.0,
            self.sigma2_x_prior.1,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("variances, shapes and rates must be positive");
        }
        let (c0, d0) = self.lambda_bounds;
        if !(c0 >= 0.0 && d0 > c0 && d0.is_finite()) {
            return bad("lambda bounds need 0 <= c0 < d0");
        }
        let (e0, f0) = self.phi_bounds;
        if !(f0 > e0 && e0.is_finite() && f0.is_finite()) {
            return bad("AR bounds need e0 < f0");
        }
        if self.chains == 0 || self.keep == 0 {
            return bad("need at least one chain and one kept draw");
        }
        Ok(())
    }

    fn alpha_for(&self, m: usize) -> Vec<f64> {
        self.alpha.clone().unwrap_or_else(|| vec![1.0; m])
    }
}

/// One joint sample of every unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaDraw {
    pub omega: Vec<f64>,
    pub omega0: f64,
    pub lambda: f64,
    pub sigma2: f64,
    pub phi: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma2_x: Vec<f64>,
    /// Values for the window's missing cells, in [`missing_cells`] order.
    pub imputed: Vec<f64>,
}

impl ThetaDraw {
    /// Scalar parameters in export order: ω_1..ω_m, ω₀, λ, σ², φ, γ, σ²_j.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 + 4 * self.omega.len());
        v.extend(&self.omega);
        v.push(self.omega0);
        v.push(self.lambda);
        v.push(self.sigma2);
        v.extend(&self.phi);
        v.extend(&self.gamma);
        v.extend(&self.sigma2_x);
        v
    }
}

/// Names matching [`ThetaDraw::flatten`].
pub fn parameter_names(m: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=m).map(|j| format!("omega_{j}")).collect();
    names.extend(["omega0".to_string(), "lambda".into(), "sigma2".into()]);
    for prefix in ["phi", "gamma", "sigma2"] {
        names.extend((1..=m).map(|j| format!("{prefix}_{j}")));
    }
    names
}

/// Row-major `(t, j)` positions of the missing forecasts.
pub fn missing_cells(window: &WindowView) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (t, row) in window.x().iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if v.is_none() {
                out.push((t, j));
            }
        }
    }
    out
}

/// Kept samples of every chain plus the matching predictive draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    /// `chains[c][s]`, burn-in removed.
    pub chains: Vec<Vec<ThetaDraw>>,
    /// One predictive draw per sample, chains concatenated in order.
    pub predictive: Vec<f64>,
    pub acceptance: Vec<AcceptanceRates>,
    pub missing: Vec<(usize, usize)>,
    pub n_analysts: usize,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &ThetaDraw> {
        self.chains.iter().flatten()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        parameter_names(self.n_analysts)
    }

    /// `values[param][chain][draw]`.
    pub fn parameter_traces(&self) -> Vec<Vec<Vec<f64>>> {
        let n_params = parameter_names(self.n_analysts).len();
        let mut out = vec![vec![Vec::new(); self.chains.len()]; n_params];
        for (c, chain) in self.chains.iter().enumerate() {
            for d in chain {
                for (k, v) in d.flatten().into_iter().enumerate() {
                    out[k][c].push(v);
                }
            }
        }
        out
    }

    /// Posterior mean of each imputed cell.
    pub fn imputed_means(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut sums = vec![0.0; self.missing.len()];
        for d in self.iter() {
            for (s, v) in sums.iter_mut().zip(&d.imputed) {
                *s += v;
            }
        }
        sums.into_iter().map(|s| s / n).collect()
    }

    /// Empirical mean of the predictive draws.
    pub fn point_forecast(&self) -> f64 {
        mean(&self.predictive)
    }

    /// Empirical predictive quantile (linear interpolation between order
    /// statistics).
    pub fn predictive_quantile(&self, q: f64) -> f64 {
        quantile(&self.predictive, q)
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean) * (x - mean) / var)
}

fn inv_gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

fn dirichlet_logpdf(w: &[f64], alpha: &[f64]) -> f64 {
    let total: f64 = alpha.iter().sum();
    ln_gamma(total) - alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>()
        + w.iter().zip(alpha).map(|(w, a)| (a - 1.0) * w.ln()).sum::<f64>()
}

/// `ln p_t(λ)` computed without underflow for long windows.
pub(crate) fn log_discount_weights(lambda: f64, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|t| -lambda * (len - 1 - t) as f64).collect();
    // The last exponent is 0, so the log-sum-exp shift is exact.
    let log_total = raw.iter().map(|v| v.exp()).sum::<f64>().ln();
    raw.into_iter().map(|v| v - log_total).collect()
}

/// `Σ_t log N(y_t; ω₀ + ωᵀx_t, σ²/p_t)` given `ln p_t`.
pub(crate) fn y_loglik(y: &[f64], x: &[Vec<f64>], log_p: &[f64], omega0: f64, omega: &[f64], sigma2: f64) -> f64 {
    y.iter()
        .zip(x)
        .zip(log_p)
        .map(|((y, row), lp)| {
            let r = y - omega0 - row.iter().zip(omega).map(|(a, w)| a * w).sum::<f64>();
            -0.5 * (LN_2PI + sigma2.ln() - lp + lp.exp() * r * r / sigma2)
        })
        .sum()
}

/// AR(1) log-likelihood of one analyst's column.
pub(crate) fn ar_loglik(col: impl Iterator<Item = f64>, phi: f64, gamma: f64, s2: f64) -> f64 {
    let mut prev: Option<f64> = None;
    let mut total = 0.0;
    for x in col {
        let mean = match prev {
            None => gamma,
            Some(p) => gamma + phi * (p - gamma),
        };
        total += normal_logpdf(x, mean, s2);
        prev = Some(x);
    }
    total
}

/// Observed-value mean of each analyst column.
pub(crate) fn column_means(window: &WindowView) -> Result<Vec<f64>, BayesError> {
    (0..window.n_analysts())
        .map(|j| {
            let vals: Vec<f64> = window.x().iter().filter_map(|r| r[j]).collect();
            if vals.is_empty() {
                Err(BayesError::Window(format!("analyst column {j} has no observed forecast")))
            } else {
                Ok(mean(&vals))
            }
        })
        .collect()
}

/// Completed forecast grid: observed values plus `theta.imputed`.
pub(crate) fn complete_grid(window: &WindowView, imputed: &[f64]) -> Vec<Vec<f64>> {
    let mut k = 0;
    window
        .x()
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| match v {
                    Some(v) => *v,
                    None => {
                        let out = imputed[k];
                        k += 1;
                        out
                    }
                })
                .collect()
        })
        .collect()
}

/// Unnormalized-free log posterior density (all normalizing constants of the
/// likelihood and priors included); `-∞` outside the prior support.
pub fn log_posterior(theta: &ThetaDraw, window: &WindowView, config: &BayesConfig) -> f64 {
    let m = window.n_analysts();
    let l = window.len();
    let n_missing = window.missing_count();
    if theta.omega.len() != m
        || theta.phi.len() != m
        || theta.gamma.len() != m
        || theta.sigma2_x.len() != m
        || theta.imputed.len() != n_missing
    {
        return f64::NEG_INFINITY;
    }
    let (c0, d0) = config.lambda_bounds;
    let (e0, f0) = config.phi_bounds;
    let on_simplex = theta.omega.iter().all(|&w| w > 0.0)
        && (theta.omega.iter().sum::<f64>() - 1.0).abs() <= 1e-10;
    if !on_simplex
        || !(theta.lambda > c0 && theta.lambda < d0)
        || !(theta.sigma2 > 0.0)
        || theta.phi.iter().any(|&p| !(p > e0 && p < f0))
        || theta.sigma2_x.iter().any(|&s| !(s > 0.0))
    {
        return f64::NEG_INFINITY;
    }
    let Ok(xbar) = column_means(window) else {
        return f64::NEG_INFINITY;
    };
    let x = complete_grid(window, &theta.imputed);
    let log_p = log_discount_weights(theta.lambda, l);

    let mut lp = 0.0;
    if !config.prior_only {
        lp += y_loglik(window.y(), &x, &log_p, theta.omega0, &theta.omega, theta.sigma2);
    }
    for j in 0..m {
        lp += ar_loglik(x.iter().map(|r| r[j]), theta.phi[j], theta.gamma[j], theta.sigma2_x[j]);
        lp += -(f0 - e0).ln();
        lp += normal_logpdf(theta.gamma[j], xbar[j], config.gamma_var);
        lp += inv_gamma_logpdf(theta.sigma2_x[j], config.sigma2_x_prior.0, config.sigma2_x_prior.1);
    }
    lp += dirichlet_logpdf(&theta.omega, &config.alpha_for(m));
    lp += normal_logpdf(theta.omega0, 0.0, config.omega0_var);
    lp += -(d0 - c0).ln();
    lp += inv_gamma_logpdf(theta.sigma2, config.sigma2_prior.0, config.sigma2_prior.1);
    lp
}

/// Runs `config.chains` chains in parallel and keeps `config.keep` draws
/// of each after `config.burn_in` adaptive warm-up sweeps.
pub fn sample_posterior(window: &WindowView, config: &BayesConfig) -> Result<PosteriorDraws, BayesError> {
    let m = window.n_analysts();
    config.validate(m)?;
    column_means(window)?;
    let results: Vec<(Vec<ThetaDraw>, AcceptanceRates)> = (0..config.chains)
        .into_par_iter()
        .map(|chain| {
            let mut s = Sampler::new(window, config, chain)?;
            for _ in 0..config.burn_in {
                s.sweep(true);
            }
            s.reset_acceptance();
            let mut kept = Vec::with_capacity(config.keep);
            for _ in 0..config.keep {
                s.sweep(false);
                kept.push(s.state().clone());
            }
            Ok((kept, s.acceptance()))
        })
        .collect::<Result<_, BayesError>>()?;
    let (chains, acceptance): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mut draws = PosteriorDraws {
        chains,
        predictive: Vec::new(),
        acceptance,
        missing: missing_cells(window),
        n_analysts: m,
    };
    draws.predictive = predictive_draws(&draws, window.target_x(), crate::derive_seed(config.seed, &[u64::MAX]));
    Ok(draws)
}

/// One `N(ω₀ + ωᵀx, σ²)` draw per posterior sample.
pub fn predictive_draws(draws: &PosteriorDraws, target: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draws
        .iter()
        .map(|d| {
            let mu = d.omega0 + d.omega.iter().zip(target).map(|(w, x)| w * x).sum::<f64>();
            let z: f64 = StandardNormal.sample(&mut rng);
            mu + d.sigma2.sqrt() * z
        })
        .collect()
}

/// Ground truth for [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTruth {
    pub omega: Vec<f64>,
    pub omega0: f64,
    pub lambda: f64,
    pub sigma2: f64,
    pub phi: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma2_x: Vec<f64>,
}

/// A data set drawn from the model.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub window: WindowView,
    /// Complete forecast grid before any masking.
    pub x_full: Vec<Vec<f64>>,
    /// Draw of `Y_{L+1}`.
    pub y_next: f64,
}

/// Draws `L` training rows plus a target row from the model, then hides each
/// training cell independently with probability `missing_rate` (every column
/// keeps at least one value).
pub fn simulate(truth: &ModelTruth, len: usize, missing_rate: f64, seed: u64) -> Result<Simulated, BayesError> {
    use rand::Rng;
    let m = truth.omega.len();
    if m == 0 || len == 0 {
        return Err(BayesError::Config("need at least one row and analyst".into()));
    }
    if [truth.phi.len(), truth.gamma.len(), truth.sigma2_x.len()] != [m, m, m] {
        return Err(BayesError::Config("AR parameters must have one entry per analyst".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x_full = vec![vec![0.0; m]; len + 1];
    for j in 0..m {
        let sd = truth.sigma2_x[j].sqrt();
        let mut prev: Option<f64> = None;
        for row in x_full.iter_mut() {
            let mean = match prev {
                None => truth.gamma[j],
                Some(p) => truth.gamma[j] + truth.phi[j] * (p - truth.gamma[j]),
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            row[j] = mean + sd * z;
            prev = Some(row[j]);
        }
    }
    let p = make_schedule(truth.lambda, len)
        .map_err(|e| BayesError::Config(e.to_string()))?
        .weights()
        .to_vec();
    let mu = |row: &[f64]| truth.omega0 + row.iter().zip(&truth.omega).map(|(a, w)| a * w).sum::<f64>();
    let y: Vec<f64> = (0..len)
        .map(|t| {
            let n = Normal::new(mu(&x_full[t]), (truth.sigma2 / p[t]).sqrt()).expect("positive variance");
            n.sample(&mut rng)
        })
        .collect();
    let y_next = Normal::new(mu(&x_full[len]), truth.sigma2.sqrt())
        .expect("positive variance")
        .sample(&mut rng);
    let mut grid: Vec<Vec<Option<f64>>> = x_full[..len]
        .iter()
        .map(|r| r.iter().map(|v| Some(*v)).collect())
        .collect();
    if missing_rate > 0.0 {
        for row in grid.iter_mut() {
            for cell in row.iter_mut() {
                if rng.random::<f64>() < missing_rate {
                    *cell = None;
                }
            }
        }
        for j in 0..m {
            if grid.iter().all(|r| r[j].is_none()) {
                let t = rng.random_range(0..len);
                grid[t][j] = Some(x_full[t][j]);
            }
        }
        // Rows need at least one forecast for the consensus.
        for (t, row) in grid.iter_mut().enumerate() {
            if row.iter().all(Option::is_none) {
                let j = rng.random_range(0..m);
                row[j] = Some(x_full[t][j]);
            }
        }
    }
    let window = WindowView::new(y, grid, x_full[len].clone()).map_err(|e| BayesError::Window(e.to_string()))?;
    Ok(Simulated { window, x_full, y_next })
}

pub(crate) fn inv_gamma_sample(rng: &mut ChaCha8Rng, shape: f64, rate: f64) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0 / rate).expect("positive shape and rate").sample(rng);
    1.0 / g
}

#[cfg(test)]
mod tests;
