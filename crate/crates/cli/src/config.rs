//! Run settings: command-line flags layered over an optional TOML file (or a
//! previous run's manifest) layered over the library defaults.

use std::path::Path;

use clap::Args;
use combine_core::backtest::{parse_estimators, BacktestConfig, Estimator};
use combine_core::losses::SurrogateFamily;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "COMBINE_SEED";

/// Every tunable of a backtest or fit. In a config file any subset may be
/// given; in a manifest all of them are written out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eligibility: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimators: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qp_intercept: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qp_center: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qp_max_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nlp_rho_begin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nlp_rho_end: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nlp_max_evaluations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nlp_max_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chains: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burnin: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keep: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega0_var: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_bounds: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2_prior: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_bounds: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_var: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2_x_prior: Option<(f64, f64)>,
}

/// Flags shared by `backtest` and `fit`.
#[derive(Debug, Clone, Args)]
pub struct ModelFlags {
    /// Training window length.
    #[arg(long = "L", value_name = "N")]
    pub window: Option<usize>,
    /// Comma-separated discount factors.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    /// Minimum share of window rows an analyst must cover.
    #[arg(long)]
    pub eligibility: Option<f64>,
    /// Win-rate surrogate tail coverage.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, value_parser = ["cauchy", "logistic"])]
    pub surrogate: Option<String>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub keep: Option<usize>,
    /// Falls back to the config file, then to COMBINE_SEED, then to 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML settings file, or a manifest.json from an earlier run.
    #[arg(long, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,
}

pub fn read_config_file(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let bad = |e: String| CliError::Usage(format!("config {}: {e}", path.display()));
    if path.extension().is_some_and(|x| x == "json") {
        let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let config = value
            .get_mut("config")
            .map(serde_json::Value::take)
            .ok_or_else(|| bad("manifest has no `config` object".into()))?;
        serde_json::from_value(config).map_err(|e| bad(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) if !s.trim().is_empty() => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))),
        _ => Ok(None),
    }
}

/// Seed for commands without a config file.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64, CliError> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

fn parse_estimator_list(names: &[String]) -> Result<Vec<Estimator>, CliError> {
    let mut out = Vec::new();
    for name in names {
        if name.trim().eq_ignore_ascii_case("all") {
            out.extend(Estimator::ALL);
        } else {
            out.extend(parse_estimators(name).map_err(|e| CliError::Usage(e.to_string()))?);
        }
    }
    let mut seen = Vec::new();
    out.retain(|e| {
        let fresh = !seen.contains(e);
        seen.push(*e);
        fresh
    });
    Ok(out)
}

fn parse_surrogate(s: &str) -> Result<SurrogateFamily, CliError> {
    s.parse()
        .map_err(|_| CliError::Usage(format!("unknown surrogate `{s}` (expected cauchy or logistic)")))
}

/// Applies flags over the config file over defaults.
pub fn resolve(flags: &ModelFlags, estimators: Option<&[String]>) -> Result<BacktestConfig, CliError> {
    let file = match &flags.config {
        Some(p) => read_config_file(p)?,
        None => FileConfig::default(),
    };
    let mut c = BacktestConfig::default();

    if let Some(v) = file.window {
        c.window = v;
    }
    if let Some(v) = &file.lambda_grid {
        c.lambda_grid = v.clone();
    }
    if let Some(v) = file.eligibility {
        c.eligibility = v;
    }
    if let Some(v) = &file.estimators {
        c.estimators = parse_estimator_list(v)?;
    }
    if let Some(v) = &file.surrogate {
        c.surrogate = parse_surrogate(v)?;
    }
    if let Some(v) = file.epsilon {
        c.epsilon = v;
    }
    if let Some(v) = file.qp_intercept {
        c.qp.intercept = v;
    }
    if let Some(v) = file.qp_center {
        c.qp.center = v;
    }
    if file.qp_max_iterations.is_some() {
        c.qp.max_iterations = file.qp_max_iterations;
    }
    if let Some(v) = file.nlp_rho_begin {
        c.nlp.rho_begin = v;
    }
    if let Some(v) = file.nlp_rho_end {
        c.nlp.rho_end = v;
    }
    if file.nlp_max_evaluations.is_some() {
        c.nlp.max_evaluations = file.nlp_max_evaluations;
    }
    if let Some(v) = file.nlp_max_radius {
        c.nlp.max_radius = v;
    }
    let b = &mut c.bayes;
    if let Some(v) = file.chains {
        b.chains = v;
    }
    if let Some(v) = file.burnin {
        b.burn_in = v;
    }
    if let Some(v) = file.keep {
        b.keep = v;
    }
    if file.alpha.is_some() {
        b.alpha = file.alpha.clone();
    }
    if let Some(v) = file.omega0_var {
        b.omega0_var = v;
    }
    if let Some(v) = file.lambda_bounds {
        b.lambda_bounds = v;
    }
    if let Some(v) = file.sigma2_prior {
        b.sigma2_prior = v;
    }
    if let Some(v) = file.phi_bounds {
        b.phi_bounds = v;
    }
    if let Some(v) = file.gamma_var {
        b.gamma_var = v;
    }
    if let Some(v) = file.sigma2_x_prior {
        b.sigma2_x_prior = v;
    }

    if let Some(v) = flags.window {
        c.window = v;
    }
    if let Some(v) = &flags.lambda_grid {
        c.lambda_grid = v.clone();
    }
    if let Some(v) = flags.eligibility {
        c.eligibility = v;
    }
    if let Some(v) = estimators {
        c.estimators = parse_estimator_list(v)?;
    }
    if let Some(v) = &flags.surrogate {
        c.surrogate = parse_surrogate(v)?;
    }
    if let Some(v) = flags.epsilon {
        c.epsilon = v;
    }
    if let Some(v) = flags.chains {
        c.bayes.chains = v;
    }
    if let Some(v) = flags.burnin {
        c.bayes.burn_in = v;
    }
    if let Some(v) = flags.keep {
        c.bayes.keep = v;
    }

    c.seed = match (flags.seed, file.seed) {
        (Some(s), _) | (None, Some(s)) => s,
        (None, None) => env_seed()?.unwrap_or(0),
    };
    c.bayes.seed = c.seed;
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

/// The fully resolved settings, in config-file form.
pub fn snapshot(c: &BacktestConfig) -> FileConfig {
    FileConfig {
        window: Some(c.window),
        lambda_grid: Some(c.lambda_grid.clone()),
        eligibility: Some(c.eligibility),
        estimators: Some(c.estimators.iter().map(|e| e.name().to_string()).collect()),
        surrogate: Some(c.surrogate.to_string()),
        epsilon: Some(c.epsilon),
        seed: Some(c.seed),
        qp_intercept: Some(c.qp.intercept),
        qp_center: Some(c.qp.center),
        qp_max_iterations: c.qp.max_iterations,
        nlp_rho_begin: Some(c.nlp.rho_begin),
        nlp_rho_end: Some(c.nlp.rho_end),
        nlp_max_evaluations: c.nlp.max_evaluations,
        nlp_max_radius: Some(c.nlp.max_radius),
        chains: Some(c.bayes.chains),
        burnin: Some(c.bayes.burn_in),
        keep: Some(c.bayes.keep),
        alpha: c.bayes.alpha.clone(),
        omega0_var: Some(c.bayes.omega0_var),
        lambda_bounds: Some(c.bayes.lambda_bounds),
        sigma2_prior: Some(c.bayes.sigma2_prior),
        phi_bounds: Some(c.bayes.phi_bounds),
        gamma_var: Some(c.bayes.gamma_var),
        sigma2_x_prior: Some(c.bayes.sigma2_x_prior),
    }
}
