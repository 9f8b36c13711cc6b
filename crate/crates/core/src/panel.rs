//! Analyst-forecast panels: CSV ingestion, log transform, window views and a
//! synthetic generator.
//!
//! A panel covers one ticker. Rows are quarters, columns are every analyst
//! ever seen for the ticker; a cell is empty when that analyst did not
//! publish a forecast for the quarter.
//!
//! # CSV layout
//!
//! Long format, UTF-8, header row required. Forecast rows:
//!
//! ```text
//! ticker,quarter,analyst_id,forecast,forecast_date
//! ACME,2015Q1,a01,1043.5,2015-02-11
//! ```
//!
//! `forecast_date` is optional. When an analyst has several rows for the same
//! quarter the one with the latest `forecast_date` wins (numeric comparison
//! when both dates parse as numbers, lexicographic otherwise, so ISO dates
//! work); without the column the last row wins.
//!
//! Actuals either live in a separate `ticker,quarter,actual` file or in an
//! `actual` column of the forecast file. Quarters are written `YYYYQn`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// File names used when a panel directory is given instead of a file.
pub const FORECASTS_FILE: &str = "forecasts.csv";
pub const ACTUALS_FILE: &str = "actuals.csv";

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed csv in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: missing column `{column}`")]
    Schema { path: String, column: String },
    #[error("{path} row {row}: {message}")]
    Domain {
        path: String,
        row: usize,
        message: String,
    },
    #[error("{path} row {row}: cannot parse {what} `{value}`")]
    Parse {
        path: String,
        row: usize,
        what: &'static str,
        value: String,
    },
    #[error("panel {ticker}: {message}")]
    Invalid { ticker: String, message: String },
    #[error("generator config: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WindowError {
    #[error("window of {len} rows ending at {anchor} does not fit a panel of {rows} rows")]
    OutOfRange {
        anchor: usize,
        len: usize,
        rows: usize,
    },
    #[error("row {row} has no analyst forecast, consensus undefined")]
    EmptyRow { row: usize },
    #[error("analyst {analyst} has no forecast for the target period")]
    MissingTarget { analyst: usize },
    #[error("{0}")]
    Shape(String),
}

/// Calendar quarter, ordered chronologically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quarter {
    year: i32,
    quarter: u8,
}

impl Quarter {
    pub fn new(year: i32, quarter: u8) -> Option<Self> {
        (1..=4)
            .contains(&quarter)
            .then_some(Self { year, quarter })
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn quarter(self) -> u8 {
        self.quarter
    }

    pub fn next(self) -> Self {
        if self.quarter == 4 {
            Self {
                year: self.year + 1,
                quarter: 1,
            }
        } else {
            Self {
                year: self.year,
                quarter: self.quarter + 1,
            }
        }
    }
}

impl fmt::Display for Quarter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}Q{}", self.year, self.quarter)
    }
}

impl FromStr for Quarter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (year, q) = s
            .split_once(['Q', 'q'])
            .ok_or_else(|| format!("expected YYYYQn, got `{s}`"))?;
        if year.len() != 4 || q.len() != 1 {
            return Err(format!("expected YYYYQn, got `{s}`"));
        }
        let year: i32 = year.parse().map_err(|_| format!("bad year in `{s}`"))?;
        let q: u8 = q.parse().map_err(|_| format!("bad quarter in `{s}`"))?;
        Quarter::new(year, q).ok_or_else(|| format!("quarter must be 1-4 in `{s}`"))
    }
}

/// Column names used when reading panel CSVs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub ticker: String,
    pub quarter: String,
    pub analyst_id: String,
    pub forecast: String,
    /// Optional; used only when present in the header.
    pub forecast_date: String,
    pub actual: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            ticker: "ticker".into(),
            quarter: "quarter".into(),
            analyst_id: "analyst_id".into(),
            forecast: "forecast".into(),
            forecast_date: "forecast_date".into(),
            actual: "actual".into(),
        }
    }
}

/// Panel on the original (positive) scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPanel {
    ticker: String,
    quarters: Vec<Quarter>,
    actuals: Vec<f64>,
    forecasts: Vec<Vec<Option<f64>>>,
    analyst_ids: Vec<String>,
}

impl RawPanel {
    /// Validates and assembles a panel. `forecasts` is `T × M`, row-major by
    /// quarter.
    pub fn new(
        ticker: impl Into<String>,
        quarters: Vec<Quarter>,
        actuals: Vec<f64>,
        forecasts: Vec<Vec<Option<f64>>>,
        analyst_ids: Vec<String>,
    ) -> Result<Self, PanelError> {
        let ticker = ticker.into();
        let invalid = |message: String| PanelError::Invalid {
            ticker: ticker.clone(),
            message,
        };
        if quarters.len() != actuals.len() || quarters.len() != forecasts.len() {
            return Err(invalid(format!(
                "{} quarters, {} actuals and {} forecast rows",
                quarters.len(),
                actuals.len(),
                forecasts.len()
            )));
        }
        if let Some(pair) = quarters.windows(2).find(|p| p[0] >= p[1]) {
            return Err(invalid(format!(
                "quarters must be strictly increasing ({} then {})",
                pair[0], pair[1]
            )));
        }
        let m = analyst_ids.len();
        for (t, row) in forecasts.iter().enumerate() {
            if row.len() != m {
                return Err(invalid(format!(
                    "row {} has {} cells for {m} analysts",
                    quarters[t],
                    row.len()
                )));
            }
            if !(actuals[t] > 0.0 && actuals[t].is_finite()) {
                return Err(invalid(format!(
                    "actual for {} must be positive, got {}",
                    quarters[t], actuals[t]
                )));
            }
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    if !(*v > 0.0 && v.is_finite()) {
                        return Err(invalid(format!(
                            "forecast by {} for {} must be positive, got {v}",
                            analyst_ids[j], quarters[t]
                        )));
                    }
                }
            }
        }
        for (j, id) in analyst_ids.iter().enumerate() {
            if forecasts.iter().all(|row| row[j].is_none()) {
                return Err(invalid(format!("analyst {id} has no forecasts")));
            }
        }
        Ok(Self {
            ticker,
            quarters,
            actuals,
            forecasts,
            analyst_ids,
        })
    }

    pub fn ticker(&self) -> &str {
        &self.ticker
    }

    pub fn quarters(&self) -> &[Quarter] {
        &self.quarters
    }

    pub fn actuals(&self) -> &[f64] {
        &self.actuals
    }

    pub fn forecasts(&self) -> &[Vec<Option<f64>>] {
        &self.forecasts
    }

    pub fn analyst_ids(&self) -> &[String] {
        &self.analyst_ids
    }

    pub fn len(&self) -> usize {
        self.quarters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quarters.is_empty()
    }

    pub fn n_analysts(&self) -> usize {
        self.analyst_ids.len()
    }
}

/// Log-scale panel: `y_t = ln A_t`, `x_{t,j} = ln F_{t,j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastPanel {
    y: Vec<f64>,
    x: Vec<Vec<Option<f64>>>,
    raw: Arc<RawPanel>,
}

/// Natural-log transform of every present value.
pub fn to_log(raw: RawPanel) -> ForecastPanel {
    let y = raw.actuals.iter().map(|a| a.ln()).collect();
    let x = raw
        .forecasts
        .iter()
        .map(|row| row.iter().map(|v| v.map(f64::ln)).collect())
        .collect();
    ForecastPanel {
        y,
        x,
        raw: Arc::new(raw),
    }
}

impl ForecastPanel {
    /// Builds a panel from values already on the log scale.
    pub fn from_log(
        ticker: impl Into<String>,
        quarters: Vec<Quarter>,
        y: Vec<f64>,
        x: Vec<Vec<Option<f64>>>,
        analyst_ids: Vec<String>,
    ) -> Result<Self, PanelError> {
        let actuals = y.iter().map(|v| v.exp()).collect();
        let forecasts = x
            .iter()
            .map(|row| row.iter().map(|v| v.map(f64::exp)).collect())
            .collect();
        let raw = RawPanel::new(ticker, quarters, actuals, forecasts, analyst_ids)?;
        Ok(ForecastPanel {
            y,
            x,
            raw: Arc::new(raw),
        })
    }

    pub fn raw(&self) -> &RawPanel {
        &self.raw
    }

    pub fn ticker(&self) -> &str {
        self.raw.ticker()
    }

    pub fn quarters(&self) -> &[Quarter] {
        self.raw.quarters()
    }

    pub fn analyst_ids(&self) -> &[String] {
        self.raw.analyst_ids()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &[Vec<Option<f64>>] {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_analysts(&self) -> usize {
        self.raw.n_analysts()
    }

    pub fn is_present(&self, t: usize, j: usize) -> bool {
        self.x[t][j].is_some()
    }

    pub fn mask(&self) -> Vec<Vec<bool>> {
        self.x
            .iter()
            .map(|row| row.iter().map(Option::is_some).collect())
            .collect()
    }

    /// Equal-weight consensus over every analyst present in row `t`.
    pub fn consensus_at(&self, t: usize) -> Option<f64> {
        row_consensus(&self.x[t])
    }

    /// Training window of `len` rows ending at `anchor` (0-based), restricted
    /// to `analysts`, with row `anchor + 1` as the target.
    ///
    /// Consensus values use every analyst present in the row, not only the
    /// selected ones.
    pub fn window(
        &self,
        anchor: usize,
        len: usize,
        analysts: &[usize],
    ) -> Result<WindowView, WindowError> {
        if len == 0 || anchor + 1 < len || anchor + 1 >= self.len() {
            return Err(WindowError::OutOfRange {
                anchor,
                len,
                rows: self.len(),
            });
        }
        let start = anchor + 1 - len;
        let mut consensus = Vec::with_capacity(len);
        for t in start..=anchor {
            consensus.push(self.consensus_at(t).ok_or(WindowError::EmptyRow { row: t })?);
        }
        let target = anchor + 1;
        let target_consensus = self
            .consensus_at(target)
            .ok_or(WindowError::EmptyRow { row: target })?;
        let mut target_x = Vec::with_capacity(analysts.len());
        for &j in analysts {
            target_x.push(self.x[target][j].ok_or(WindowError::MissingTarget { analyst: j })?);
        }
        Ok(WindowView {
            start,
            analysts: analysts.to_vec(),
            y: self.y[start..=anchor].to_vec(),
            x: self.x[start..=anchor]
                .iter()
                .map(|row| analysts.iter().map(|&j| row[j]).collect())
                .collect(),
            consensus,
            target_x,
            target_consensus,
        })
    }
}

fn row_consensus(row: &[Option<f64>]) -> Option<f64> {
    let (sum, n) = row
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// `L` training rows restricted to the selected analysts plus the target-row
/// forecasts.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowView {
    start: usize,
    analysts: Vec<usize>,
    y: Vec<f64>,
    x: Vec<Vec<Option<f64>>>,
    consensus: Vec<f64>,
    target_x: Vec<f64>,
    target_consensus: f64,
}

impl WindowView {
    /// Stand-alone window whose consensus is the mean of the given analysts.
    pub fn new(
        y: Vec<f64>,
        x: Vec<Vec<Option<f64>>>,
        target_x: Vec<f64>,
    ) -> Result<Self, WindowError> {
        if y.is_empty() || y.len() != x.len() {
            return Err(WindowError::Shape(format!(
                "{} targets for {} forecast rows",
                y.len(),
                x.len()
            )));
        }
        let m = target_x.len();
        if m == 0 || x.iter().any(|row| row.len() != m) {
            return Err(WindowError::Shape(format!(
                "every row needs {m} analyst cells"
            )));
        }
        let consensus = x
            .iter()
            .enumerate()
            .map(|(t, row)| row_consensus(row).ok_or(WindowError::EmptyRow { row: t }))
            .collect::<Result<Vec<_>, _>>()?;
        let target_consensus = target_x.iter().sum::<f64>() / m as f64;
        Ok(Self {
            start: 0,
            analysts: (0..m).collect(),
            y,
            x,
            consensus,
            target_x,
            target_consensus,
        })
    }

    /// Stand-alone window from a complete forecast grid.
    pub fn dense(y: Vec<f64>, x: Vec<Vec<f64>>, target_x: Vec<f64>) -> Result<Self, WindowError> {
        let x = x
            .into_iter()
            .map(|row| row.into_iter().map(Some).collect())
            .collect();
        Self::new(y, x, target_x)
    }

    /// Same window with a replacement forecast grid; consensus values are kept.
    pub fn with_forecasts(&self, x: Vec<Vec<Option<f64>>>) -> Result<Self, WindowError> {
        if x.len() != self.len() || x.iter().any(|r| r.len() != self.n_analysts()) {
            return Err(WindowError::Shape("replacement grid has wrong shape".into()));
        }
        Ok(Self { x, ..self.clone() })
    }

    /// Same window with replacement per-row consensus values.
    pub fn with_consensus(&self, consensus: Vec<f64>, target: f64) -> Result<Self, WindowError> {
        if consensus.len() != self.len() {
            return Err(WindowError::Shape("consensus length mismatch".into()));
        }
        Ok(Self {
            consensus,
            target_consensus: target,
            ..self.clone()
        })
    }

    /// Panel row index of the first training row.
    pub fn start(&self) -> usize {
        self.start
    }

    /// Panel row index of the last training row.
    pub fn anchor(&self) -> usize {
        self.start + self.y.len() - 1
    }

    pub fn target_index(&self) -> usize {
        self.anchor() + 1
    }

    /// Panel column of each window column.
    pub fn analysts(&self) -> &[usize] {
        &self.analysts
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_analysts(&self) -> usize {
        self.target_x.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &[Vec<Option<f64>>] {
        &self.x
    }

    pub fn consensus(&self) -> &[f64] {
        &self.consensus
    }

    pub fn target_x(&self) -> &[f64] {
        &self.target_x
    }

    pub fn target_consensus(&self) -> f64 {
        self.target_consensus
    }

    pub fn is_complete(&self) -> bool {
        self.x.iter().flatten().all(Option::is_some)
    }

    pub fn missing_count(&self) -> usize {
        self.x.iter().flatten().filter(|v| v.is_none()).count()
    }

    /// The forecast grid without gaps, or `None` if any cell is missing.
    pub fn dense_x(&self) -> Option<Vec<Vec<f64>>> {
        self.x
            .iter()
            .map(|row| row.iter().copied().collect::<Option<Vec<f64>>>())
            .collect()
    }
}

enum Recency {
    Number(f64),
    Text(String),
}

impl Recency {
    fn parse(s: &str) -> Self {
        match s.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Recency::Number(v),
            _ => Recency::Text(s.trim().to_string()),
        }
    }

    /// `true` when `self` is at least as recent as `other`.
    fn not_older_than(&self, other: &Recency) -> bool {
        match (self, other) {
            (Recency::Number(a), Recency::Number(b)) => a >= b,
            (Recency::Number(a), Recency::Text(b)) => a.to_string().as_str() >= b.as_str(),
            (Recency::Text(a), Recency::Number(b)) => a.as_str() >= b.to_string().as_str(),
            (Recency::Text(a), Recency::Text(b)) => a >= b,
        }
    }
}

struct Columns {
    ticker: usize,
    quarter: usize,
    analyst: Option<usize>,
    forecast: Option<usize>,
    date: Option<usize>,
    actual: Option<usize>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

fn open_csv(path: &Path) -> Result<(csv::Reader<File>, csv::StringRecord), PanelError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| PanelError::Io {
        path: display.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|source| PanelError::Csv {
            path: display,
            source,
        })?
        .clone();
    Ok((reader, headers))
}

fn parse_positive(
    path: &str,
    row: usize,
    what: &'static str,
    field: &str,
) -> Result<f64, PanelError> {
    let v: f64 = field.parse().map_err(|_| PanelError::Parse {
        path: path.to_string(),
        row,
        what,
        value: field.to_string(),
    })?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(PanelError::Domain {
            path: path.to_string(),
            row,
            message: format!("{what} must be positive for the log transform, got {v}"),
        });
    }
    Ok(v)
}

fn parse_quarter(path: &str, row: usize, field: &str) -> Result<Quarter, PanelError> {
    field.parse().map_err(|_| PanelError::Parse {
        path: path.to_string(),
        row,
        what: "quarter",
        value: field.to_string(),
    })
}

type ActualMap = BTreeMap<(String, Quarter), (f64, usize)>;

fn record_actual(
    actuals: &mut ActualMap,
    path: &str,
    row: usize,
    ticker: &str,
    quarter: Quarter,
    value: f64,
) -> Result<(), PanelError> {
    match actuals.get(&(ticker.to_string(), quarter)) {
        Some(&(prev, prev_row)) if prev != value => Err(PanelError::Domain {
            path: path.to_string(),
            row,
            message: format!(
                "actual {value} for {ticker} {quarter} conflicts with {prev} on row {prev_row}"
            ),
        }),
        _ => {
            actuals.insert((ticker.to_string(), quarter), (value, row));
            Ok(())
        }
    }
}

fn read_actuals(path: &Path, schema: &CsvSchema, actuals: &mut ActualMap) -> Result<(), PanelError> {
    let display = path.display().to_string();
    let (mut reader, headers) = open_csv(path)?;
    let need = |name: &str| {
        column(&headers, name).ok_or_else(|| PanelError::Schema {
            path: display.clone(),
            column: name.to_string(),
        })
    };
    let (ti, qi, ai) = (need(&schema.ticker)?, need(&schema.quarter)?, need(&schema.actual)?);
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|source| PanelError::Csv {
            path: display.clone(),
            source,
        })?;
        let ticker = record.get(ti).unwrap_or_default();
        let quarter = parse_quarter(&display, row, record.get(qi).unwrap_or_default())?;
        let value = parse_positive(&display, row, "actual", record.get(ai).unwrap_or_default())?;
        record_actual(actuals, &display, row, ticker, quarter, value)?;
    }
    Ok(())
}

/// One analyst's retained forecast for one quarter.
struct Kept {
    value: f64,
    recency: Option<Recency>,
}

type ForecastMap = BTreeMap<String, BTreeMap<(Quarter, String), Kept>>;

fn read_forecasts(
    path: &Path,
    schema: &CsvSchema,
    actuals: &mut ActualMap,
    actuals_inline: bool,
) -> Result<ForecastMap, PanelError> {
    let display = path.display().to_string();
    let (mut reader, headers) = open_csv(path)?;
    let need = |name: &str| {
        column(&headers, name).ok_or_else(|| PanelError::Schema {
            path: display.clone(),
            column: name.to_string(),
        })
    };
    let cols = Columns {
        ticker: need(&schema.ticker)?,
        quarter: need(&schema.quarter)?,
        analyst: Some(need(&schema.analyst_id)?),
        forecast: Some(need(&schema.forecast)?),
        date: column(&headers, &schema.forecast_date),
        actual: if actuals_inline {
            Some(need(&schema.actual)?)
        } else {
            None
        },
    };
    let mut out: ForecastMap = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|source| PanelError::Csv {
            path: display.clone(),
            source,
        })?;
        let field = |idx: Option<usize>| idx.and_then(|k| record.get(k)).unwrap_or_default();
        let ticker = field(Some(cols.ticker)).to_string();
        let quarter = parse_quarter(&display, row, field(Some(cols.quarter)))?;
        if let Some(ai) = cols.actual {
            let raw = field(Some(ai));
            if !raw.is_empty() {
                let value = parse_positive(&display, row, "actual", raw)?;
                record_actual(actuals, &display, row, &ticker, quarter, value)?;
            }
        }
        let raw_forecast = field(cols.forecast);
        if raw_forecast.is_empty() {
            continue;
        }
        let value = parse_positive(&display, row, "forecast", raw_forecast)?;
        let analyst = field(cols.analyst).to_string();
        if analyst.is_empty() {
            return Err(PanelError::Domain {
                path: display.clone(),
                row,
                message: "forecast without analyst id".into(),
            });
        }
        let recency = cols.date.map(|k| Recency::parse(record.get(k).unwrap_or_default()));
        let slot = out.entry(ticker).or_default().entry((quarter, analyst));
        use std::collections::btree_map::Entry;
        match slot {
            Entry::Vacant(v) => {
                v.insert(Kept { value, recency });
            }
            Entry::Occupied(mut o) => {
                let replace = match (&recency, &o.get().recency) {
                    (Some(new), Some(old)) => new.not_older_than(old),
                    _ => true,
                };
                if replace {
                    o.insert(Kept { value, recency });
                }
            }
        }
    }
    Ok(out)
}

fn resolve_sources(path: &Path) -> (PathBuf, Option<PathBuf>) {
    if path.is_dir() {
        let actuals = path.join(ACTUALS_FILE);
        (
            path.join(FORECASTS_FILE),
            actuals.exists().then_some(actuals),
        )
    } else {
        (path.to_path_buf(), None)
    }
}

/// Reads every ticker found at `path`.
///
/// `path` is either a directory holding `forecasts.csv` (and optionally
/// `actuals.csv`) or a single forecast file with an actual column. Tickers
/// come back sorted.
pub fn load_panels(path: &Path, schema: &CsvSchema) -> Result<Vec<RawPanel>, PanelError> {
    let (forecasts_path, actuals_path) = resolve_sources(path);
    let mut actuals = ActualMap::new();
    if let Some(p) = &actuals_path {
        read_actuals(p, schema, &mut actuals)?;
    }
    let forecasts = read_forecasts(&forecasts_path, schema, &mut actuals, actuals_path.is_none())?;

    let mut tickers: BTreeSet<String> = forecasts.keys().cloned().collect();
    tickers.extend(actuals.keys().map(|(t, _)| t.clone()));
    let mut panels = Vec::with_capacity(tickers.len());
    for ticker in tickers {
        let empty = BTreeMap::new();
        let cells = forecasts.get(&ticker).unwrap_or(&empty);
        let quarter_actuals: Vec<(Quarter, f64)> = actuals
            .range((ticker.clone(), Quarter { year: i32::MIN, quarter: 1 })..)
            .take_while(|((t, _), _)| *t == ticker)
            .map(|((_, q), (v, _))| (*q, *v))
            .collect();
        let quarters: Vec<Quarter> = quarter_actuals.iter().map(|(q, _)| *q).collect();
        if let Some(((q, _), _)) = cells.iter().find(|((q, _), _)| quarters.binary_search(q).is_err()) {
            return Err(PanelError::Invalid {
                ticker,
                message: format!("forecasts for {q} but no actual"),
            });
        }
        let analyst_ids: Vec<String> = cells
            .keys()
            .map(|(_, a)| a.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut grid = vec![vec![None; analyst_ids.len()]; quarters.len()];
        for ((q, a), kept) in cells {
            let t = quarters.binary_search(q).expect("checked above");
            let j = analyst_ids.binary_search(a).expect("collected above");
            grid[t][j] = Some(kept.value);
        }
        let values = quarter_actuals.iter().map(|(_, v)| *v).collect();
        panels.push(RawPanel::new(ticker, quarters, values, grid, analyst_ids)?);
    }
    Ok(panels)
}

/// Reads a single-ticker panel; errors if `path` holds zero or several tickers.
pub fn load_panel(path: &Path, schema: &CsvSchema) -> Result<RawPanel, PanelError> {
    let mut panels = load_panels(path, schema)?;
    match panels.len() {
        1 => Ok(panels.remove(0)),
        n => Err(PanelError::Invalid {
            ticker: path.display().to_string(),
            message: format!("expected exactly one ticker, found {n}"),
        }),
    }
}

/// Writes panels as `forecasts.csv` + `actuals.csv` into `dir`.
pub fn write_panels(dir: &Path, panels: &[RawPanel]) -> Result<(), PanelError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source: std::io::Error| PanelError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let fpath = dir.join(FORECASTS_FILE);
    let apath = dir.join(ACTUALS_FILE);
    let csv_err = |path: &Path| {
        let path = path.display().to_string();
        move |source: csv::Error| PanelError::Csv { path, source }
    };
    let mut fw = csv::Writer::from_path(&fpath).map_err(csv_err(&fpath))?;
    fw.write_record(["ticker", "quarter", "analyst_id", "forecast"])
        .map_err(csv_err(&fpath))?;
    let mut aw = csv::Writer::from_path(&apath).map_err(csv_err(&apath))?;
    aw.write_record(["ticker", "quarter", "actual"])
        .map_err(csv_err(&apath))?;
    for p in panels {
        for (t, q) in p.quarters().iter().enumerate() {
            let qs = q.to_string();
            aw.write_record([p.ticker(), qs.as_str(), &p.actuals()[t].to_string()])
                .map_err(csv_err(&apath))?;
            for (j, v) in p.forecasts()[t].iter().enumerate() {
                if let Some(v) = v {
                    fw.write_record([p.ticker(), qs.as_str(), &p.analyst_ids()[j], &v.to_string()])
                        .map_err(csv_err(&fpath))?;
                }
            }
        }
    }
    fw.flush().map_err(io(&fpath))?;
    aw.flush().map_err(io(&apath))?;
    Ok(())
}

/// Settings for [`synthesize_panel`].
///
/// Log actuals follow a linear trend plus optional seasonality and i.i.d.
/// shocks. Each analyst forecasts `y_t + bias_j + e_{t,j}` where the errors are
/// independent across analysts and AR(1) in time with marginal standard
/// deviation `sd_j`. With zero biases the population-optimal simplex weights
/// are the inverse-variance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub ticker: String,
    pub quarters: usize,
    pub analysts: usize,
    pub start: Quarter,
    /// Log actual at the first quarter.
    pub level: f64,
    /// Log growth per quarter.
    pub growth: f64,
    pub seasonal_amplitude: f64,
    pub actual_noise: f64,
    /// Range for per-analyst biases when `biases` is `None`.
    pub bias_range: (f64, f64),
    /// Range for per-analyst error sds when `error_sds` is `None`.
    pub sd_range: (f64, f64),
    pub biases: Option<Vec<f64>>,
    pub error_sds: Option<Vec<f64>>,
    /// AR(1) coefficient of each analyst's error process.
    pub persistence: f64,
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            ticker: "SYN".into(),
            quarters: 36,
            analysts: 10,
            start: Quarter::new(2015, 1).expect("valid"),
            level: 9.0,
            growth: 0.02,
            seasonal_amplitude: 0.0,
            actual_noise: 0.03,
            bias_range: (-0.04, -0.005),
            sd_range: (0.01, 0.05),
            biases: None,
            error_sds: None,
            persistence: 0.5,
            missing_rate: 0.05,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), PanelError> {
        let bad = |m: &str| Err(PanelError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing rate must lie in [0, 1)");
        }
        if self.quarters == 0 || self.analysts == 0 {
            return bad("need at least one quarter and one analyst");
        }
        if !(self.persistence > -1.0 && self.persistence < 1.0) {
            return bad("persistence must lie in (-1, 1)");
        }
        if self.bias_range.0 > self.bias_range.1 || self.sd_range.0 > self.sd_range.1 {
            return bad("ranges must be ordered (low, high)");
        }
        if self.sd_range.0 < 0.0 || self.actual_noise < 0.0 {
            return bad("standard deviations must be non-negative");
        }
        for (name, v) in [("biases", &self.biases), ("error_sds", &self.error_sds)] {
            if let Some(v) = v {
                if v.len() != self.analysts {
                    return Err(PanelError::Config(format!(
                        "{name} has {} entries for {} analysts",
                        v.len(),
                        self.analysts
                    )));
                }
            }
        }
        if let Some(sds) = &self.error_sds {
            if sds.iter().any(|s| !(*s >= 0.0)) {
                return bad("error_sds must be non-negative");
            }
        }
        Ok(())
    }

    /// Inverse-variance weights; optimal when biases are zero.
    pub fn population_weights(&self) -> Option<Vec<f64>> {
        let sds = self.error_sds.as_ref()?;
        let inv: Vec<f64> = sds.iter().map(|s| 1.0 / (s * s)).collect();
        let total: f64 = inv.iter().sum();
        Some(inv.into_iter().map(|v| v / total).collect())
    }
}

/// Generates a reproducible synthetic panel.
pub fn synthesize_panel(config: &SynthConfig, seed: u64) -> Result<RawPanel, PanelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_len, m) = (config.quarters, config.analysts);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let biases: Vec<f64> = match &config.biases {
        Some(b) => b.clone(),
        None => (0..m)
            .map(|_| uniform(&mut rng, config.bias_range))
            .collect(),
    };
    let sds: Vec<f64> = match &config.error_sds {
        Some(s) => s.clone(),
        None => (0..m).map(|_| uniform(&mut rng, config.sd_range)).collect(),
    };

    let y: Vec<f64> = (0..t_len)
        .map(|t| {
            let season =
                config.seasonal_amplitude * (std::f64::consts::FRAC_PI_2 * t as f64).sin();
            config.level + config.growth * t as f64 + season + config.actual_noise * normal(&mut rng)
        })
        .collect();

    let phi = config.persistence;
    let innovation = (1.0 - phi * phi).sqrt();
    let mut errors = vec![vec![0.0; m]; t_len];
    for j in 0..m {
        let mut e = sds[j] * normal(&mut rng);
        for row in errors.iter_mut() {
            row[j] = e;
            e = phi * e + innovation * sds[j] * normal(&mut rng);
        }
    }

    let mut grid: Vec<Vec<Option<f64>>> = (0..t_len)
        .map(|t| {
            (0..m)
                .map(|j| Some((y[t] + biases[j] + errors[t][j]).exp()))
                .collect()
        })
        .collect();
    if config.missing_rate > 0.0 {
        for row in grid.iter_mut() {
            for cell in row.iter_mut() {
                if rng.random::<f64>() < config.missing_rate {
                    *cell = None;
                }
            }
        }
        // Every analyst keeps at least one forecast.
        for j in 0..m {
            if grid.iter().all(|row| row[j].is_none()) {
                let t = rng.random_range(0..t_len);
                grid[t][j] = Some((y[t] + biases[j] + errors[t][j]).exp());
            }
        }
    }

    let mut quarters = Vec::with_capacity(t_len);
    let mut q = config.start;
    for _ in 0..t_len {
        quarters.push(q);
        q = q.next();
    }
    let ids = (1..=m).map(|j| format!("a{j:02}")).collect();
    RawPanel::new(
        config.ticker.clone(),
        quarters,
        y.iter().map(|v| v.exp()).collect(),
        grid,
        ids,
    )
}

/// Generates `n` tickers named `{prefix}01`, `{prefix}02`, ... with seeds
/// derived from `seed`.
pub fn synthesize_panels(
    config: &SynthConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<RawPanel>, PanelError> {
    let width = n.to_string().len().max(2);
    (0..n)
        .map(|i| {
            let cfg = SynthConfig {
                ticker: format!("{}{:0width$}", config.ticker, i + 1),
                ..config.clone()
            };
            synthesize_panel(&cfg, crate::derive_seed(seed, &[i as u64]))
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn quarter_parse_and_order() {
        let q: Quarter = "2015Q4".parse().unwrap();
        assert_eq!(q.to_string(), "2015Q4");
        assert_eq!(q.next().to_string(), "2016Q1");
        assert!(q < q.next());
        assert!("2015Q5".parse::<Quarter>().is_err());
        assert!("15Q1".parse::<Quarter>().is_err());
        assert!("2015-1".parse::<Quarter>().is_err());
    }

    #[test]
    fn keeps_most_recent_forecast() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            FORECASTS_FILE,
            "ticker,quarter,analyst_id,forecast,forecast_date\n\
             T,2020Q1,a,105,2020-02-10\n\
             T,2020Q1,a,100,2020-01-05\n\
             T,2020Q1,b,90,2020-01-01\n",
        );
        write(dir.path(), ACTUALS_FILE, "ticker,quarter,actual\nT,2020Q1,101\n");
        let p = load_panel(dir.path(), &CsvSchema::default()).unwrap();
        assert_eq!(p.analyst_ids(), ["a", "b"]);
        assert_eq!(p.forecasts()[0], vec![Some(105.0), Some(90.0)]);

        // numeric timestamps, later row older
        let f = write(
            dir.path(),
            "inline.csv",
            "ticker,quarter,analyst_id,forecast,forecast_date,actual\n\
             T,2020Q1,a,105,105,101\n\
             T,2020Q1,a,100,100,101\n",
        );
        let p = load_panel(&f, &CsvSchema::default()).unwrap();
        assert_eq!(p.forecasts()[0][0], Some(105.0));
    }

    #[test]
    fn last_row_wins_without_dates() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(
            dir.path(),
            "p.csv",
            "ticker,quarter,analyst_id,forecast,actual\n\
             T,2020Q1,a,100,101\n\
             T,2020Q1,a,105,101\n",
        );
        let p = load_panel(&f, &CsvSchema::default()).unwrap();
        assert_eq!(p.forecasts()[0], vec![Some(105.0)]);
        let cells: usize = p.forecasts().iter().flatten().flatten().count();
        assert_eq!(cells, 1);
    }

    #[test]
    fn log_of_e_is_one() {
        let e = std::f64::consts::E;
        let raw = RawPanel::new(
            "T",
            vec![Quarter::new(2020, 1).unwrap()],
            vec![e],
            vec![vec![Some(e)]],
            vec!["a".into()],
        )
        .unwrap();
        let p = to_log(raw);
        assert!((p.y()[0] - 1.0).abs() < 1e-15);
        assert!((p.x()[0][0].unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_forecast() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(
            dir.path(),
            "p.csv",
            "ticker,quarter,analyst_id,forecast,actual\nT,2020Q1,a,-3,101\n",
        );
        match load_panel(&f, &CsvSchema::default()) {
            Err(PanelError::Domain { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn schema_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "a.csv", "ticker,quarter,forecast,actual\nT,2020Q1,1,1\n");
        assert!(matches!(
            load_panel(&f, &CsvSchema::default()),
            Err(PanelError::Schema { column, .. }) if column == "analyst_id"
        ));
        let f = write(
            dir.path(),
            "b.csv",
            "ticker,quarter,analyst_id,forecast,actual\nT,2020-03,a,1,1\n",
        );
        assert!(matches!(
            load_panel(&f, &CsvSchema::default()),
            Err(PanelError::Parse { what: "quarter", .. })
        ));
    }

    #[test]
    fn empty_column_rejected() {
        let q = vec![Quarter::new(2020, 1).unwrap()];
        let err = RawPanel::new("T", q, vec![1.0], vec![vec![Some(1.0), None]], vec!["a".into(), "b".into()]);
        assert!(matches!(err, Err(PanelError::Invalid { .. })));
    }

    #[test]
    fn geometric_mean_on_original_scale() {
        let q = vec![Quarter::new(2020, 1).unwrap()];
        let raw = RawPanel::new("T", q, vec![4.0], vec![vec![Some(2.0), Some(8.0)]], vec!["a".into(), "b".into()]).unwrap();
        let p = to_log(raw);
        assert!((p.consensus_at(0).unwrap().exp() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn synth_is_deterministic_and_validates() {
        let cfg = SynthConfig::default();
        assert_eq!(synthesize_panel(&cfg, 7).unwrap(), synthesize_panel(&cfg, 7).unwrap());
        assert_ne!(synthesize_panel(&cfg, 7).unwrap(), synthesize_panel(&cfg, 8).unwrap());
        let bad = SynthConfig { missing_rate: 1.0, ..cfg.clone() };
        assert!(matches!(synthesize_panel(&bad, 1), Err(PanelError::Config(_))));
        let full = SynthConfig { missing_rate: 0.0, ..cfg };
        let p = synthesize_panel(&full, 3).unwrap();
        assert!(p.forecasts().iter().flatten().all(Option::is_some));
    }

    #[test]
    fn population_weights_follow_inverse_variance() {
        let cfg = SynthConfig {
            analysts: 2,
            error_sds: Some(vec![1.0, 2.0]),
            ..SynthConfig::default()
        };
        let w = cfg.population_weights().unwrap();
        assert!((w[0] - 0.8).abs() < 1e-12 && (w[1] - 0.2).abs() < 1e-12);
        let eq = SynthConfig { analysts: 3, error_sds: Some(vec![1.0; 3]), ..SynthConfig::default() };
        assert!(eq.population_weights().unwrap().iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn window_uses_all_analysts_for_consensus() {
        let q: Vec<Quarter> = (1..=4).map(|k| Quarter::new(2020, k).unwrap()).collect();
        let x = vec![
            vec![Some(1.0), Some(3.0)],
            vec![Some(2.0), None],
            vec![Some(3.0), Some(5.0)],
            vec![Some(4.0), Some(8.0)],
        ];
        let p = ForecastPanel::from_log("T", q, vec![1.0, 2.0, 3.0, 4.0], x, vec!["a".into(), "b".into()]).unwrap();
        let w = p.window(2, 3, &[0]).unwrap();
        assert_eq!(w.start(), 0);
        assert_eq!(w.anchor(), 2);
        assert_eq!(w.consensus(), &[2.0, 2.0, 4.0]);
        assert_eq!(w.target_x(), &[4.0]);
        assert_eq!(w.target_consensus(), 6.0);
        assert!(p.window(2, 4, &[0]).is_err());
        assert!(p.window(3, 2, &[0]).is_err());
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let panels = synthesize_panels(&SynthConfig { quarters: 8, analysts: 3, ..SynthConfig::default() }, 3, 11).unwrap();
        write_panels(dir.path(), &panels).unwrap();
        let back = load_panels(dir.path(), &CsvSchema::default()).unwrap();
        assert_eq!(back, panels);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn log_round_trip(seed in 0u64..500, missing in 0.0f64..0.5) {
                let cfg = SynthConfig { quarters: 10, analysts: 4, missing_rate: missing, ..SynthConfig::default() };
                let raw = synthesize_panel(&cfg, seed).unwrap();
                let p = to_log(raw.clone());
                for t in 0..raw.len() {
                    prop_assert!((p.y()[t].exp() / raw.actuals()[t] - 1.0).abs() <= 1e-12);
                    for j in 0..raw.n_analysts() {
                        prop_assert_eq!(p.is_present(t, j), raw.forecasts()[t][j].is_some());
                        if let (Some(x), Some(f)) = (p.x()[t][j], raw.forecasts()[t][j]) {
                            prop_assert!((x.exp() / f - 1.0).abs() <= 1e-12);
                        }
                    }
                }
            }
        }
    }
}
