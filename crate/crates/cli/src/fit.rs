//! Single-window fits for inspection.

use std::path::{Path, PathBuf};

use combine_core::backtest::{eligible_analysts, impute_window, BacktestConfig, Estimator};
use combine_core::bayes::{diagnostics, lambda_histogram, sample_posterior, write_draws_csv, PosteriorDraws};
use combine_core::losses::consensus;
use combine_core::nlp::{fit_hit_rate, fit_win_rate, predict_hit_probability};
use combine_core::qp::WeightSolution;
use combine_core::{make_schedule, qp, ForecastPanel, WindowView};

use crate::config::{resolve, ModelFlags};
use crate::manifest::{input_digests, FitTarget, Manifest};
use crate::{create, create_dir, load, write_failed, CliError};

#[derive(Debug, clap::Args)]
pub struct FitArgs {
    #[arg(long, value_name = "PATH")]
    panel: PathBuf,
    /// Required when the panel holds more than one ticker.
    #[arg(long)]
    ticker: Option<String>,
    /// 1-based fold; the training window ends at row L + fold - 2. Defaults to the last fold.
    #[arg(long)]
    fold: Option<usize>,
    /// One of qp, nlp-win, nlp-hit, bayes.
    #[arg(long)]
    estimator: String,
    /// Discount factor for qp and the nlp estimators.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Bins of the posterior λ histogram.
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
}

struct Fitted {
    rows: Vec<(String, String)>,
    weights: Vec<(f64, Option<f64>)>,
}

fn pick<'a>(panels: &'a [ForecastPanel], ticker: Option<&str>) -> Result<&'a ForecastPanel, CliError> {
    match ticker {
        Some(t) => panels
            .iter()
            .find(|p| p.ticker() == t)
            .ok_or_else(|| CliError::Usage(format!("ticker `{t}` not in the panel"))),
        None if panels.len() == 1 => Ok(&panels[0]),
        None => Err(CliError::Usage(format!(
            "panel holds {} tickers; choose one with --ticker",
            panels.len()
        ))),
    }
}

fn kv(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

fn solution_rows(sol: &WeightSolution, intercept_scale: &str) -> Vec<(String, String)> {
    vec![
        kv("omega0", sol.omega0),
        kv("omega0_scale", intercept_scale),
        kv("objective", sol.objective),
        kv("iterations", sol.diagnostics.iterations),
        kv("evaluations", sol.diagnostics.evaluations),
        kv("converged", sol.diagnostics.converged),
        kv("budget_exhausted", sol.diagnostics.budget_exhausted),
        kv("pd_repaired", sol.diagnostics.pd_repaired),
    ]
}

fn fit_point(window: &WindowView, estimator: Estimator, lambda: f64, config: &BacktestConfig) -> Result<Fitted, CliError> {
    let window = impute_window(window).map_err(CliError::Data)?;
    let schedule = make_schedule(lambda, window.len()).map_err(|e| CliError::Usage(e.to_string()))?;
    let failed = |e: String| CliError::Data(format!("{estimator} fit failed: {e}"));
    let (sol, mut rows) = match estimator {
        Estimator::Qp => {
            let sol = qp::fit(&window, &schedule, config.qp).map_err(|e| failed(e.to_string()))?;
            let yhat = sol.combine(window.target_x());
            let rows = solution_rows(&sol, "level");
            (sol, [rows, vec![kv("yhat", yhat)]].concat())
        }
        Estimator::NlpWin => {
            let fit = fit_win_rate(&window, &schedule, config.surrogate, config.epsilon, &config.nlp)
                .map_err(|e| failed(e.to_string()))?;
            let yhat = fit.solution.combine(window.target_x());
            let mut rows = solution_rows(&fit.solution, "level");
            rows.extend([
                kv("surrogate", fit.spec.family),
                kv("surrogate_z0", fit.spec.z0),
                kv("surrogate_gamma", fit.spec.gamma),
                kv("fallback_bounds", fit.fallback_bounds),
                kv("yhat", yhat),
            ]);
            (fit.solution, rows)
        }
        Estimator::NlpHit => {
            let model = fit_hit_rate(&window, &schedule, &config.nlp).map_err(|e| failed(e.to_string()))?;
            let p = predict_hit_probability(&window, &model).map_err(|e| failed(e.to_string()))?;
            let mut rows = solution_rows(&model.0, "log-odds");
            rows.push(kv("p_hat", p));
            (model.0, rows)
        }
        _ => unreachable!("checked by the caller"),
    };
    rows.insert(0, kv("lambda", lambda));
    Ok(Fitted {
        rows,
        weights: sol.omega.iter().map(|w| (*w, None)).collect(),
    })
}

fn fit_bayes(window: &WindowView, config: &BacktestConfig, bins: usize, out: &Path) -> Result<Fitted, CliError> {
    let draws: PosteriorDraws =
        sample_posterior(window, &config.bayes).map_err(|e| CliError::Data(format!("bayes fit failed: {e}")))?;

    let path = out.join("draws.csv");
    write_draws_csv(&draws, create(&path)?).map_err(write_failed(&path))?;

    let report = diagnostics(&draws);
    let path = out.join("diagnostics.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    w.write_record(["parameter", "mean", "sd", "rhat", "split_rhat", "ess", "stuck", "flagged"])
        .map_err(write_failed(&path))?;
    for p in &report.params {
        w.write_record([
            p.name.clone(),
            p.mean.to_string(),
            p.sd.to_string(),
            fmt(p.rhat),
            fmt(p.split_rhat),
            fmt(p.ess),
            p.stuck.to_string(),
            p.flagged.to_string(),
        ])
        .map_err(write_failed(&path))?;
    }
    w.flush().map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))?;

    let path = out.join("lambda_histogram.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["lo", "hi", "count"]).map_err(write_failed(&path))?;
    for b in lambda_histogram(&draws, bins, config.bayes.lambda_bounds) {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string()])
            .map_err(write_failed(&path))?;
    }
    w.flush().map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))?;

    let m = draws.n_analysts;
    let weights = report.params[..m].iter().map(|p| (p.mean, Some(p.sd))).collect();
    let stat = |name: &str| report.get(name).map(|p| p.mean).unwrap_or(f64::NAN);
    let mut rows = vec![
        kv("omega0", stat("omega0")),
        kv("omega0_scale", "level"),
        kv("lambda_mean", stat("lambda")),
        kv("sigma2_mean", stat("sigma2")),
        kv("yhat", draws.point_forecast()),
        kv("predictive_q025", draws.predictive_quantile(0.025)),
        kv("predictive_q975", draws.predictive_quantile(0.975)),
        kv("chains", report.chains),
        kv("draws_per_chain", report.draws_per_chain),
        kv("max_split_rhat", fmt(report.max_split_rhat())),
        kv("any_flagged", report.any_flagged()),
        kv("imputed_cells", draws.missing.len()),
    ];
    for (c, a) in draws.acceptance.iter().enumerate() {
        rows.push(kv(&format!("accept_omega_chain{}", c + 1), a.omega));
        rows.push(kv(&format!("accept_lambda_chain{}", c + 1), a.lambda));
    }
    Ok(Fitted { rows, weights })
}

pub fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    let started = crate::manifest::now();
    let estimator: Estimator = args.estimator.parse().map_err(|e: combine_core::backtest::BacktestError| {
        CliError::Usage(e.to_string())
    })?;
    if !matches!(estimator, Estimator::Qp | Estimator::NlpWin | Estimator::NlpHit | Estimator::Bayes) {
        return Err(CliError::Usage(format!("{estimator} has no weights to fit")));
    }
    if args.bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let config = resolve(&args.model, None)?;
    let inputs = input_digests(&args.panel)?;
    let panels = load(&args.panel)?;
    let panel = pick(&panels, args.ticker.as_deref())?;

    let len = config.window;
    if panel.len() < len + 1 {
        return Err(CliError::Data(format!(
            "{} has {} quarters; a window of {len} needs at least {}",
            panel.ticker(),
            panel.len(),
            len + 1
        )));
    }
    let folds = panel.len() - len;
    let fold = args.fold.unwrap_or(folds);
    if fold == 0 || fold > folds {
        return Err(CliError::Usage(format!("--fold must lie in 1..={folds}")));
    }
    let anchor = len + fold - 2;
    let eligible = eligible_analysts(panel, anchor, len, config.eligibility);
    if eligible.is_empty() {
        return Err(CliError::Data(format!("no eligible analysts for {} fold {fold}", panel.ticker())));
    }
    let window = panel.window(anchor, len, &eligible).map_err(|e| CliError::Data(e.to_string()))?;

    create_dir(&args.out)?;
    let fitted = if estimator == Estimator::Bayes {
        fit_bayes(&window, &config, args.bins, &args.out)?
    } else {
        fit_point(&window, estimator, args.lambda, &config)?
    };

    let target_row: Vec<f64> = panel.x()[anchor + 1].iter().flatten().copied().collect();
    let mut rows = vec![
        kv("ticker", panel.ticker()),
        kv("estimator", estimator),
        kv("fold", fold),
        kv("target_quarter", panel.quarters()[anchor + 1]),
        kv("eligible", eligible.len()),
    ];
    rows.extend(fitted.rows);
    rows.push(kv("y", panel.y()[anchor + 1]));
    if let Ok(yeq) = consensus(&target_row) {
        rows.push(kv("yeq", yeq));
    }

    let path = args.out.join("weights.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["analyst_id", "weight", "sd"]).map_err(write_failed(&path))?;
    for (j, (weight, sd)) in eligible.iter().zip(&fitted.weights) {
        let sd = sd.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([panel.analyst_ids()[*j].clone(), weight.to_string(), sd])
            .map_err(write_failed(&path))?;
    }
    w.flush().map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))?;

    let path = args.out.join("fit.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["key", "value"]).map_err(write_failed(&path))?;
    for (k, v) in &rows {
        w.write_record([k, v]).map_err(write_failed(&path))?;
    }
    w.flush().map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))?;

    let mut outputs = vec!["weights.csv".to_string(), "fit.csv".to_string()];
    if estimator == Estimator::Bayes {
        outputs.extend(["draws.csv", "diagnostics.csv", "lambda_histogram.csv"].map(String::from));
    }
    let mut m = Manifest::new("fit", started, inputs);
    m.seed = config.seed;
    m.config = Some(crate::config::snapshot(&config));
    m.fit = Some(FitTarget {
        ticker: panel.ticker().to_string(),
        fold,
        estimator: estimator.to_string(),
        lambda: estimator.uses_lambda_grid().then_some(args.lambda),
        bins: (estimator == Estimator::Bayes).then_some(args.bins),
    });
    m.outputs = outputs;
    m.write(&args.out)?;

    for (k, v) in &rows {
        println!("{k:>18}  {v}");
    }
    for (j, (weight, _)) in eligible.iter().zip(&fitted.weights) {
        println!("{:>18}  {weight:.6}", panel.analyst_ids()[*j]);
    }
    Ok(())
}
