//! Rolling-window evaluation of every estimator over a set of panels.
//!
//! For a panel of `T` quarters and window length `L`, fold `f = 1..T-L`
//! trains on rows `a-L+1..=a` (0-based anchor `a = L-2+f`) and predicts row
//! `a+1`. Qp and nlp estimators see a row-mean imputed window; the Bayesian
//! estimator imputes internally.

use std::fmt::{self, Write as _};
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::bayes::{sample_posterior, BayesConfig};
use crate::discount::make_schedule;
use crate::losses::{relative_bias, win_rate_loss, SurrogateFamily, DEFAULT_EPSILON};
use crate::nlp::{fit_hit_rate, fit_win_rate, predict_hit_probability, NlpOptions};
use crate::panel::{ForecastPanel, WindowView};
use crate::qp::{self, QpOptions};

/// Forecast horizon in quarters; only one-step-ahead is supported.
pub const HORIZON: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BacktestError {
    #[error("invalid backtest configuration: {0}")]
    Config(String),
    #[error("panel {ticker}: {message}")]
    Panel { ticker: String, message: String },
    #[error("unknown estimator {0:?}")]
    UnknownEstimator(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    Qp,
    NlpWin,
    NlpHit,
    Bayes,
    Naive,
    SeasonalNaive,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [
        Estimator::Qp,
        Estimator::NlpWin,
        Estimator::NlpHit,
        Estimator::Bayes,
        Estimator::Naive,
        Estimator::SeasonalNaive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Qp => "qp",
            Estimator::NlpWin => "nlp-win",
            Estimator::NlpHit => "nlp-hit",
            Estimator::Bayes => "bayes",
            Estimator::Naive => "naive",
            Estimator::SeasonalNaive => "seasonal-naive",
        }
    }

    /// Whether the estimator is run once per value of the λ grid.
    pub fn uses_lambda_grid(self) -> bool {
        matches!(self, Estimator::Qp | Estimator::NlpWin | Estimator::NlpHit)
    }

    /// The hit-rate classifier has no point forecast, so no win flag.
    pub fn has_point_forecast(self) -> bool {
        self != Estimator::NlpHit
    }

    fn index(self) -> u64 {
        Estimator::ALL.iter().position(|e| *e == self).expect("listed") as u64
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = BacktestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == key)
            .ok_or_else(|| BacktestError::UnknownEstimator(s.to_string()))
    }
}

/// Parses a comma-separated estimator list.
pub fn parse_estimators(s: &str) -> Result<Vec<Estimator>, BacktestError> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestConfig {
    /// Training window length `L`.
    pub window: usize,
    pub lambda_grid: Vec<f64>,
    /// Minimum fraction of window rows an analyst must cover.
    pub eligibility: f64,
    pub estimators: Vec<Estimator>,
    pub surrogate: SurrogateFamily,
    pub epsilon: f64,
    pub qp: QpOptions,
    pub nlp: NlpOptions,
    /// Priors and chain budget; its seed is replaced per fold.
    pub bayes: BayesConfig,
    pub seed: u64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            window: 12,
            lambda_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            eligibility: 0.9,
            estimators: Estimator::ALL.to_vec(),
            surrogate: SurrogateFamily::Cauchy,
            epsilon: DEFAULT_EPSILON,
            qp: QpOptions::default(),
            nlp: NlpOptions::default(),
            bayes: BayesConfig::default(),
            seed: 0,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<(), BacktestError> {
        let bad = |s: String| Err(BacktestError::Config(s));
        if self.window < 2 {
            return bad(format!("window length must be at least 2, got {}", self.window));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("lambda grid must be a non-empty list of finite values >= 0".into());
        }
        if !(self.eligibility > 0.0 && self.eligibility <= 1.0) {
            return bad(format!("eligibility threshold must lie in (0, 1], got {}", self.eligibility));
        }
        if self.estimators.is_empty() {
            return bad("no estimators selected".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if self.estimators.contains(&Estimator::Bayes) {
            // The analyst count varies per fold, so only the scalar fields can be checked here.
            let probe = BayesConfig {
                alpha: None,
                ..self.bayes.clone()
            };
            probe.validate(1).map_err(|e| BacktestError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Analysts with a forecast for row `anchor + 1` that cover at least
/// `threshold` of the `len` window rows ending at `anchor`.
pub fn eligible_analysts(panel: &ForecastPanel, anchor: usize, len: usize, threshold: f64) -> Vec<usize> {
    if len == 0 || anchor + 1 < len || anchor + 1 >= panel.len() {
        return Vec::new();
    }
    let start = anchor + 1 - len;
    (0..panel.n_analysts())
        .filter(|&j| {
            if !panel.is_present(anchor + 1, j) {
                return false;
            }
            let present = (start..=anchor).filter(|&t| panel.is_present(t, j)).count();
            // Small slack so that e.g. 9/10 passes a 0.9 threshold.
            present as f64 / len as f64 >= threshold - 1e-12
        })
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("row {row} has no forecast to average")]
pub struct ImputeError {
    pub row: usize,
}

/// Fills each missing cell with the mean of the present values in its row.
pub fn impute_row_mean(x: &[Vec<Option<f64>>]) -> Result<Vec<Vec<f64>>, ImputeError> {
    x.iter()
        .enumerate()
        .map(|(row, cells)| {
            let present: Vec<f64> = cells.iter().flatten().copied().collect();
            if present.is_empty() {
                return Err(ImputeError { row });
            }
            let mean = present.iter().sum::<f64>() / present.len() as f64;
            Ok(cells.iter().map(|v| v.unwrap_or(mean)).collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldStatus {
    Ok,
    /// The estimator did not produce a forecast.
    Failed,
    /// The fold could not be set up (no eligible analyst, boundary, ...).
    Skipped,
}

impl fmt::Display for FoldStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FoldStatus::Ok => "ok",
            FoldStatus::Failed => "failed",
            FoldStatus::Skipped => "skipped",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub ticker: String,
    pub estimator: Estimator,
    /// Grid value for grid estimators.
    pub lambda: Option<f64>,
    /// 1-based fold index.
    pub fold: usize,
    /// 0-based index of the last training row.
    pub anchor: usize,
    pub y: f64,
    pub yhat: Option<f64>,
    pub yeq: f64,
    /// `None` when there is no point forecast or `y = ŷ_eq`.
    pub r: Option<f64>,
    pub hit: Option<bool>,
    pub win: Option<bool>,
    /// Predicted `P(y > ŷ_eq)` (nlp-hit only).
    pub p_hat: Option<f64>,
    pub eligible: usize,
    pub status: FoldStatus,
    pub note: String,
}

impl FoldResult {
    fn blank(panel: &ForecastPanel, anchor: usize, estimator: Estimator, lambda: Option<f64>, len: usize) -> Self {
        Self {
            ticker: panel.ticker().to_string(),
            estimator,
            lambda,
            fold: anchor + 2 - len,
            anchor,
            y: panel.y()[anchor + 1],
            yhat: None,
            yeq: panel.consensus_at(anchor + 1).unwrap_or(f64::NAN),
            r: None,
            hit: None,
            win: None,
            p_hat: None,
            eligible: 0,
            status: FoldStatus::Ok,
            note: String::new(),
        }
    }

    fn mark(mut self, status: FoldStatus, note: impl Into<String>) -> Self {
        self.status = status;
        self.note = note.into();
        self
    }

    /// Fills `r`, `hit` and `win` from a point forecast.
    fn score(mut self, yhat: f64) -> Self {
        let rb = relative_bias(self.y, yhat, self.yeq);
        self.yhat = Some(yhat);
        self.r = rb.value();
        self.hit = Some(self.r.is_some_and(|r| r < 1.0));
        self.win = Some(win_rate_loss(&rb) == 0);
        self
    }

    /// Fills the hit flag from a probability of exceeding the consensus.
    fn score_probability(mut self, p_hat: f64) -> Self {
        self.p_hat = Some(p_hat);
        self.hit = Some((self.y > self.yeq) == (p_hat > 0.5));
        self
    }
}

fn ticker_key(ticker: &str) -> u64 {
    // FNV-1a, only used to decorrelate per-ticker seeds.
    ticker
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Evaluates one estimator on the fold whose last training row is `anchor`.
///
/// Only rows up to `anchor + 1` are read.
pub fn run_fold(
    panel: &ForecastPanel,
    anchor: usize,
    estimator: Estimator,
    lambda: Option<f64>,
    config: &BacktestConfig,
) -> FoldResult {
    let len = config.window;
    if anchor + 1 < len || anchor + 1 >= panel.len() {
        let mut out = FoldResult {
            ticker: panel.ticker().to_string(),
            estimator,
            lambda,
            fold: 0,
            anchor,
            y: f64::NAN,
            yhat: None,
            yeq: f64::NAN,
            r: None,
            hit: None,
            win: None,
            p_hat: None,
            eligible: 0,
            status: FoldStatus::Ok,
            note: String::new(),
        };
        out = out.mark(FoldStatus::Skipped, "anchor outside the panel");
        return out;
    }
    let mut out = FoldResult::blank(panel, anchor, estimator, lambda, len);
    if !out.yeq.is_finite() {
        return out.mark(FoldStatus::Skipped, "no forecasts for the target quarter");
    }
    match estimator {
        Estimator::Naive => return out.score(panel.y()[anchor]),
        Estimator::SeasonalNaive => {
            if anchor < 3 {
                return out.mark(FoldStatus::Skipped, "seasonal lag before panel start");
            }
            return out.score(panel.y()[anchor - 3]);
        }
        _ => {}
    }

    let eligible = eligible_analysts(panel, anchor, len, config.eligibility);
    out.eligible = eligible.len();
    if eligible.is_empty() {
        return out.mark(FoldStatus::Skipped, "no eligible analysts");
    }
    let window = match panel.window(anchor, len, &eligible) {
        Ok(w) => w,
        Err(e) => return out.mark(FoldStatus::Skipped, e.to_string()),
    };

    if estimator == Estimator::Bayes {
        let bayes = BayesConfig {
            seed: crate::derive_seed(config.seed, &[ticker_key(panel.ticker()), anchor as u64, estimator.index()]),
            ..config.bayes.clone()
        };
        return match sample_posterior(&window, &bayes) {
            Ok(draws) => out.score(draws.point_forecast()),
            Err(e) => out.mark(FoldStatus::Failed, e.to_string()),
        };
    }

    let window = match impute_window(&window) {
        Ok(w) => w,
        Err(e) => return out.mark(FoldStatus::Skipped, e.to_string()),
    };
    let Some(lam) = lambda else {
        return out.mark(FoldStatus::Failed, "grid estimator run without a lambda");
    };
    let schedule = match make_schedule(lam, len) {
        Ok(s) => s,
        Err(e) => return out.mark(FoldStatus::Failed, e.to_string()),
    };
    match estimator {
        Estimator::Qp => match qp::fit(&window, &schedule, config.qp) {
            Ok(sol) => out.score(sol.combine(window.target_x())),
            Err(e) => out.mark(FoldStatus::Failed, e.to_string()),
        },
        Estimator::NlpWin => match fit_win_rate(&window, &schedule, config.surrogate, config.epsilon, &config.nlp) {
            Ok(fit) => {
                let note = if fit.fallback_bounds { "fallback surrogate bounds" } else { "" };
                let mut out = out.score(fit.solution.combine(window.target_x()));
                out.note = note.to_string();
                out
            }
            Err(e) => out.mark(FoldStatus::Failed, e.to_string()),
        },
        Estimator::NlpHit => {
            match fit_hit_rate(&window, &schedule, &config.nlp).and_then(|m| predict_hit_probability(&window, &m)) {
                Ok(p) => out.score_probability(p),
                Err(e) => out.mark(FoldStatus::Failed, e.to_string()),
            }
        }
        _ => unreachable!("handled above"),
    }
}

/// Row-mean fill used by the QP and NLP estimators; complete windows pass through.
pub fn impute_window(window: &WindowView) -> Result<WindowView, String> {
    if window.is_complete() {
        return Ok(window.clone());
    }
    let filled = impute_row_mean(window.x()).map_err(|e| e.to_string())?;
    window
        .with_forecasts(filled.into_iter().map(|r| r.into_iter().map(Some).collect()).collect())
        .map_err(|e| e.to_string())
}

/// Column of the summary: one grid value, the grid mean, or no λ at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaColumn {
    None,
    Value(f64),
    Mean,
}

impl fmt::Display for LambdaColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaColumn::None => Ok(()),
            LambdaColumn::Value(v) => write!(f, "{v}"),
            LambdaColumn::Mean => f.write_str("mean"),
        }
    }
}

/// Ticker label of the rows pooled over all panels.
pub const POOLED: &str = "ALL";

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub ticker: String,
    pub estimator: Estimator,
    pub lambda: LambdaColumn,
    /// Folds with a scored forecast.
    pub evaluated: usize,
    pub failed: usize,
    pub skipped: usize,
    pub hits: usize,
    pub wins: usize,
    pub hit_rate: Option<f64>,
    /// `None` for the hit classifier.
    pub win_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub config: BacktestConfig,
    pub tickers: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub summary: Vec<SummaryRow>,
}

impl BacktestReport {
    pub fn row(&self, ticker: &str, estimator: Estimator, lambda: LambdaColumn) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.ticker == ticker && r.estimator == estimator && r.lambda == lambda)
    }
}

fn lambda_columns(estimator: Estimator, grid: &[f64]) -> Vec<Option<f64>> {
    if estimator.uses_lambda_grid() {
        grid.iter().map(|l| Some(*l)).collect()
    } else {
        vec![None]
    }
}

fn tally(ticker: &str, estimator: Estimator, lambda: LambdaColumn, folds: &[&FoldResult]) -> SummaryRow {
    let scored: Vec<&&FoldResult> = folds.iter().filter(|f| f.status == FoldStatus::Ok).collect();
    let evaluated = scored.len();
    let hits = scored.iter().filter(|f| f.hit == Some(true)).count();
    let wins = scored.iter().filter(|f| f.win == Some(true)).count();
    let rate = |k: usize| (evaluated > 0).then(|| k as f64 / evaluated as f64);
    SummaryRow {
        ticker: ticker.to_string(),
        estimator,
        lambda,
        evaluated,
        failed: folds.iter().filter(|f| f.status == FoldStatus::Failed).count(),
        skipped: folds.iter().filter(|f| f.status == FoldStatus::Skipped).count(),
        hits,
        wins,
        hit_rate: rate(hits),
        win_rate: if estimator.has_point_forecast() { rate(wins) } else { None },
    }
}

fn mean_row(rows: &[SummaryRow], ticker: &str, estimator: Estimator) -> SummaryRow {
    let avg = |get: fn(&SummaryRow) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = rows.iter().map(get).collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    SummaryRow {
        ticker: ticker.to_string(),
        estimator,
        lambda: LambdaColumn::Mean,
        evaluated: rows.iter().map(|r| r.evaluated).sum(),
        failed: rows.iter().map(|r| r.failed).sum(),
        skipped: rows.iter().map(|r| r.skipped).sum(),
        hits: rows.iter().map(|r| r.hits).sum(),
        wins: rows.iter().map(|r| r.wins).sum(),
        hit_rate: avg(|r| r.hit_rate),
        win_rate: avg(|r| r.win_rate),
    }
}

/// Per-ticker and pooled rates for every estimator and λ column.
pub fn summarize(folds: &[FoldResult], tickers: &[String], config: &BacktestConfig) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    let groups: Vec<Option<&str>> = tickers.iter().map(|t| Some(t.as_str())).chain([None]).collect();
    for group in groups {
        let label = group.unwrap_or(POOLED);
        for &est in &config.estimators {
            let mut per_lambda = Vec::new();
            for lam in lambda_columns(est, &config.lambda_grid) {
                let cell: Vec<&FoldResult> = folds
                    .iter()
                    .filter(|f| f.estimator == est && f.lambda == lam && group.is_none_or(|t| f.ticker == t))
                    .collect();
                let col = lam.map_or(LambdaColumn::None, LambdaColumn::Value);
                per_lambda.push(tally(label, est, col, &cell));
            }
            let mean = est.uses_lambda_grid().then(|| mean_row(&per_lambda, label, est));
            out.extend(per_lambda);
            out.extend(mean);
        }
    }
    out
}

/// Runs every (panel, fold, estimator, λ) cell in parallel.
pub fn run_backtest(panels: &[ForecastPanel], config: &BacktestConfig) -> Result<BacktestReport, BacktestError> {
    config.validate()?;
    let len = config.window;
    for p in panels {
        if p.len() < len + HORIZON {
            return Err(BacktestError::Panel {
                ticker: p.ticker().to_string(),
                message: format!("{} quarters is too short for a window of {len}", p.len()),
            });
        }
    }
    let mut tickers: Vec<String> = Vec::new();
    for p in panels {
        if tickers.iter().any(|t| t == p.ticker()) {
            return Err(BacktestError::Panel {
                ticker: p.ticker().to_string(),
                message: "duplicate ticker".into(),
            });
        }
        tickers.push(p.ticker().to_string());
    }
    let mut cells = Vec::new();
    for p in panels {
        for anchor in len - 1..p.len() - 1 {
            for &est in &config.estimators {
                for lam in lambda_columns(est, &config.lambda_grid) {
                    cells.push((p, anchor, est, lam));
                }
            }
        }
    }
    let folds: Vec<FoldResult> = cells
        .into_par_iter()
        .map(|(p, anchor, est, lam)| run_fold(p, anchor, est, lam, config))
        .collect();
    let summary = summarize(&folds, &tickers, config);
    Ok(BacktestReport {
        config: config.clone(),
        tickers,
        folds,
        summary,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn flag(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "1",
        Some(false) => "0",
        None => "",
    }
}

/// Fold-level detail, one row per cell.
pub fn write_folds_csv<W: Write>(report: &BacktestReport, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "ticker", "estimator", "lambda", "fold", "y", "yhat", "yeq", "R", "hit", "win", "p_hat", "eligible", "status",
        "note",
    ])?;
    for f in &report.folds {
        w.write_record([
            f.ticker.clone(),
            f.estimator.to_string(),
            opt(f.lambda),
            f.fold.to_string(),
            f.y.to_string(),
            opt(f.yhat),
            f.yeq.to_string(),
            opt(f.r),
            flag(f.hit).to_string(),
            flag(f.win).to_string(),
            opt(f.p_hat),
            f.eligible.to_string(),
            f.status.to_string(),
            f.note.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Hit and win rates per ticker, estimator and λ column.
pub fn write_summary_csv<W: Write>(report: &BacktestReport, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "ticker",
        "estimator",
        "lambda",
        "evaluated",
        "failed",
        "skipped",
        "hits",
        "wins",
        "hit_rate",
        "win_rate",
    ])?;
    for r in &report.summary {
        w.write_record([
            r.ticker.clone(),
            r.estimator.to_string(),
            r.lambda.to_string(),
            r.evaluated.to_string(),
            r.failed.to_string(),
            r.skipped.to_string(),
            r.hits.to_string(),
            r.wins.to_string(),
            opt(r.hit_rate),
            opt(r.win_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Pooled hit and win rates as two aligned text tables (percent).
pub fn render_table(report: &BacktestReport) -> String {
    let grid = &report.config.lambda_grid;
    let mut s = String::new();
    for (title, pick) in [
        ("Hit rate (%)", (|r: &SummaryRow| r.hit_rate) as fn(&SummaryRow) -> Option<f64>),
        ("Win rate (%)", |r: &SummaryRow| r.win_rate),
    ] {
        let _ = writeln!(s, "{title}, pooled over {} ticker(s)", report.tickers.len());
        let _ = write!(s, "{:<16}", "estimator");
        for l in grid {
            let _ = write!(s, "{:>9}", format!("λ={l}"));
        }
        let _ = writeln!(s, "{:>9}{:>8}", "mean", "failed");
        for &est in &report.config.estimators {
            let _ = write!(s, "{:<16}", est.name());
            let cell = |col: LambdaColumn| {
                report
                    .row(POOLED, est, col)
                    .and_then(pick)
                    .map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
            };
            let failed = if est.uses_lambda_grid() {
                for l in grid {
                    let _ = write!(s, "{:>9}", cell(LambdaColumn::Value(*l)));
                }
                let _ = write!(s, "{:>9}", cell(LambdaColumn::Mean));
                report.row(POOLED, est, LambdaColumn::Mean).map_or(0, |r| r.failed)
            } else {
                let v = cell(LambdaColumn::None);
                for _ in grid {
                    let _ = write!(s, "{:>9}", "");
                }
                let _ = write!(s, "{v:>9}");
                report.row(POOLED, est, LambdaColumn::None).map_or(0, |r| r.failed)
            };
            let _ = writeln!(s, "{failed:>8}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::classify_hit;
    use crate::panel::{synthesize_panel, to_log, Quarter, SynthConfig};

    fn quarters(n: usize) -> Vec<Quarter> {
        let mut q = Quarter::new(2010, 1).unwrap();
        (0..n)
            .map(|_| {
                let out = q;
                q = q.next();
                out
            })
            .collect()
    }

    fn panel_from(y: Vec<f64>, x: Vec<Vec<Option<f64>>>) -> ForecastPanel {
        let m = x[0].len();
        let ids = (0..m).map(|j| format!("a{j}")).collect();
        ForecastPanel::from_log("TST", quarters(y.len()), y, x, ids).unwrap()
    }

    #[test]
    fn estimator_names_round_trip() {
        for e in Estimator::ALL {
            assert_eq!(e.name().parse::<Estimator>().unwrap(), e);
        }
        assert_eq!(
            parse_estimators("qp, nlp_win,seasonal-naive").unwrap(),
            vec![Estimator::Qp, Estimator::NlpWin, Estimator::SeasonalNaive]
        );
        assert!(parse_estimators("qp,ols").is_err());
    }

    #[test]
    fn eligibility_examples() {
        // Analyst 0: 11/12 rows then present at the target; analyst 1: 12/12
        // but absent at the target; analyst 2: complete.
        let n = 14;
        let x: Vec<Vec<Option<f64>>> = (0..n)
            .map(|t| {
                vec![
                    if t == 4 { None } else { Some(1.0) },
                    if t == 12 { None } else { Some(1.0) },
                    Some(1.0),
                ]
            })
            .collect();
        let p = panel_from(vec![1.0; n], x);
        assert_eq!(eligible_analysts(&p, 11, 12, 0.9), vec![0, 2]);
        assert_eq!(eligible_analysts(&p, 11, 12, 1.0), vec![2]);
        assert!(eligible_analysts(&p, 13, 12, 0.9).is_empty());
    }

    #[test]
    fn row_mean_examples() {
        let filled = impute_row_mean(&[
            vec![Some(1.0), None, Some(3.0)],
            vec![Some(4.0), None, None],
            vec![Some(1.0), Some(5.0), Some(2.0)],
        ])
        .unwrap();
        assert_eq!(filled, vec![vec![1.0, 2.0, 3.0], vec![4.0; 3], vec![1.0, 5.0, 2.0]]);
        assert_eq!(impute_row_mean(&[vec![None, None]]), Err(ImputeError { row: 0 }));
    }

    #[test]
    fn naive_benchmarks_use_lagged_actuals() {
        let y: Vec<f64> = (0..16).map(|t| t as f64).collect();
        let x = (0..16).map(|t| vec![Some(t as f64 + 0.5), Some(t as f64 + 0.7)]).collect();
        let p = panel_from(y, x);
        let config = BacktestConfig {
            window: 4,
            ..BacktestConfig::default()
        };
        let f = run_fold(&p, 6, Estimator::Naive, None, &config);
        assert_eq!(f.yhat, Some(6.0));
        assert_eq!(f.fold, 4);
        let f = run_fold(&p, 6, Estimator::SeasonalNaive, None, &config);
        assert_eq!(f.yhat, Some(3.0));
        let f = run_fold(&p, 2, Estimator::SeasonalNaive, None, &BacktestConfig { window: 3, ..config });
        assert_eq!(f.status, FoldStatus::Skipped);
    }

    #[test]
    fn perfect_forecast_scores_as_hit_and_win() {
        let y: Vec<f64> = (0..8).map(|t| t as f64).collect();
        let x = (0..8).map(|_| vec![Some(0.0)]).collect();
        let p = panel_from(y, x);
        let blank = FoldResult::blank(&p, 4, Estimator::Qp, Some(0.0), 4);
        let f = blank.clone().score(blank.y);
        assert_eq!((f.r, f.hit, f.win), (Some(0.0), Some(true), Some(true)));
        // The consensus itself ties at |R| = 1: a win under the tie rule, not a hit.
        let f = blank.clone().score(blank.yeq);
        assert_eq!((f.r, f.hit, f.win), (Some(1.0), Some(false), Some(true)));
    }

    #[test]
    fn stored_flags_match_recomputation() {
        let raw = synthesize_panel(
            &SynthConfig {
                quarters: 20,
                analysts: 4,
                ..SynthConfig::default()
            },
            3,
        )
        .unwrap();
        let panel = to_log(raw);
        let config = BacktestConfig {
            window: 8,
            lambda_grid: vec![0.0, 0.5],
            bayes: BayesConfig {
                burn_in: 200,
                keep: 200,
                ..BayesConfig::default()
            },
            ..BacktestConfig::default()
        };
        let report = run_backtest(std::slice::from_ref(&panel), &config).unwrap();
        assert_eq!(report.folds.len(), 12 * (3 * 2 + 3));
        for f in report.folds.iter().filter(|f| f.status == FoldStatus::Ok) {
            if let Some(yhat) = f.yhat {
                let rb = relative_bias(f.y, yhat, f.yeq);
                assert_eq!(f.win, Some(win_rate_loss(&rb) == 0));
                if !rb.is_degenerate() {
                    assert_eq!(f.hit, Some(classify_hit(f.y, yhat, f.yeq)));
                }
            } else {
                let p = f.p_hat.unwrap();
                assert_eq!(f.hit, Some((f.y > f.yeq) == (p > 0.5)));
            }
        }
        for row in report.summary.iter().filter(|r| r.lambda != LambdaColumn::Mean) {
            let cell: Vec<&FoldResult> = report
                .folds
                .iter()
                .filter(|f| {
                    f.estimator == row.estimator
                        && (row.ticker == POOLED || f.ticker == row.ticker)
                        && f.lambda.map_or(LambdaColumn::None, LambdaColumn::Value) == row.lambda
                        && f.status == FoldStatus::Ok
                })
                .collect();
            let hits = cell.iter().filter(|f| f.hit == Some(true)).count();
            assert_eq!(row.hit_rate, Some(hits as f64 / cell.len() as f64));
        }
        let mean = report.row(POOLED, Estimator::Qp, LambdaColumn::Mean).unwrap();
        let a = report.row(POOLED, Estimator::Qp, LambdaColumn::Value(0.0)).unwrap();
        let b = report.row(POOLED, Estimator::Qp, LambdaColumn::Value(0.5)).unwrap();
        assert_eq!(mean.hit_rate, Some((a.hit_rate.unwrap() + b.hit_rate.unwrap()) / 2.0));
        assert!(report.row(POOLED, Estimator::NlpHit, LambdaColumn::Mean).unwrap().win_rate.is_none());
        let table = render_table(&report);
        assert!(table.contains("seasonal-naive"));
    }

    #[test]
    fn short_panels_and_bad_config_are_rejected() {
        let p = panel_from(vec![1.0; 5], vec![vec![Some(1.0)]; 5]);
        assert!(matches!(
            run_backtest(std::slice::from_ref(&p), &BacktestConfig::default()),
            Err(BacktestError::Panel { .. })
        ));
        let bad = BacktestConfig {
            eligibility: 0.0,
            ..BacktestConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = BacktestConfig {
            lambda_grid: vec![-0.5],
            ..BacktestConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
