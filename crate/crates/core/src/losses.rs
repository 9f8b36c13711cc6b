//! Loss functions, relative bias and the smooth surrogate for the 0-1 win
//! indicator.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::panel::WindowView;

/// Probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-12;

/// Interval used when the empirical bounds are unusable.
pub const FALLBACK_BOUNDS: (f64, f64) = (-2.0, 5.0);

pub const DEFAULT_EPSILON: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("consensus of an empty row is undefined")]
    EmptyRow,
    #[error("every training row has y equal to the consensus")]
    AllDegenerate,
    #[error("cannot calibrate surrogate on [{z_min}, {z_max}] with epsilon {epsilon}: {reason}")]
    Calibration {
        z_min: f64,
        z_max: f64,
        epsilon: f64,
        reason: String,
    },
}

/// Equal-weight mean of the present forecasts in a row.
pub fn consensus(row: &[f64]) -> Result<f64, LossError> {
    if row.is_empty() {
        return Err(LossError::EmptyRow);
    }
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// `(y - ŷ_opt) / (y - ŷ_eq)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeBias {
    pub numerator: f64,
    pub denominator: f64,
}

impl RelativeBias {
    pub fn is_degenerate(&self) -> bool {
        self.denominator == 0.0
    }

    /// The ratio, or `None` when the consensus is exact.
    pub fn value(&self) -> Option<f64> {
        (!self.is_degenerate()).then(|| self.numerator / self.denominator)
    }
}

pub fn relative_bias(y: f64, yhat_opt: f64, yhat_eq: f64) -> RelativeBias {
    RelativeBias {
        numerator: y - yhat_opt,
        denominator: y - yhat_eq,
    }
}

pub fn squared_error_loss(y: f64, yhat: f64) -> f64 {
    (y - yhat) * (y - yhat)
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Bernoulli negative log-likelihood with clamped probability.
pub fn hit_rate_loss(p_hat: f64, y_tilde: bool) -> f64 {
    let p = clamp_probability(p_hat);
    if y_tilde {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Bernoulli negative log-likelihood written in terms of the log-odds.
///
/// Equal to `hit_rate_loss(logistic(eta), y)` but without rounding `p̂`, so
/// it stays accurate for large `|η|`; the result is capped at the clamped
/// value `-ln(1e-12)`.
pub fn hit_rate_loss_logit(eta: f64, y_tilde: bool) -> f64 {
    // -log σ(s) = softplus(-s)
    let s = if y_tilde { eta } else { -eta };
    let softplus = if s > 0.0 {
        (-s).exp().ln_1p()
    } else {
        -s + s.exp().ln_1p()
    };
    softplus.clamp(-(1.0 - PROB_CLAMP).ln(), -PROB_CLAMP.ln())
}

/// 1 when the combination loses to the consensus, i.e. `|R| > 1`.
///
/// A degenerate `R` (exact consensus) counts as a loss.
pub fn win_rate_loss(r: &RelativeBias) -> u8 {
    match r.value() {
        Some(v) if v.abs() <= 1.0 => 0,
        _ => 1,
    }
}

/// Binary target: 1 iff the actual lies strictly above the consensus.
pub fn binary_target(y: f64, yhat_eq: f64) -> bool {
    y > yhat_eq
}

/// Hit iff the combination and the actual fall on the same side of the
/// consensus, ties counting as "not above".
pub fn classify_hit(y: f64, yhat_opt: f64, yhat_eq: f64) -> bool {
    binary_target(y, yhat_eq) == (yhat_opt > yhat_eq)
}

/// Range of `|(y_t - x_{t,j}) / (y_t - ŷ_t(ω̄))| - 1` over every present
/// forecast in non-degenerate rows.
pub fn empirical_bounds(window: &WindowView) -> Result<(f64, f64), LossError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for ((y, row), eq) in window.y().iter().zip(window.x()).zip(window.consensus()) {
        let denom = y - eq;
        if denom == 0.0 {
            continue;
        }
        for x in row.iter().flatten() {
            let z = ((y - x) / denom).abs() - 1.0;
            lo = lo.min(z);
            hi = hi.max(z);
        }
    }
    if lo > hi {
        return Err(LossError::AllDegenerate);
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SurrogateFamily {
    #[default]
    Cauchy,
    Logistic,
}

impl fmt::Display for SurrogateFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SurrogateFamily::Cauchy => "cauchy",
            SurrogateFamily::Logistic => "logistic",
        })
    }
}

impl FromStr for SurrogateFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cauchy" => Ok(SurrogateFamily::Cauchy),
            "logistic" => Ok(SurrogateFamily::Logistic),
            other => Err(format!("unknown surrogate family `{other}`")),
        }
    }
}

/// Logistic sigmoid, evaluated without overflow.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A calibrated smooth CDF standing in for `I(z > 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateSpec {
    pub family: SurrogateFamily,
    pub z0: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl SurrogateSpec {
    pub fn cdf(&self, z: f64) -> f64 {
        family_cdf(self.family, (z - self.z0) / self.gamma)
    }

    /// Probability mass the CDF assigns to `[z_min, z_max]`.
    pub fn coverage(&self) -> f64 {
        mass(self.family, self.z_min - self.z0, self.z_max - self.z0, self.gamma)
    }
}

pub fn surrogate_cdf(spec: &SurrogateSpec, z: f64) -> f64 {
    spec.cdf(z)
}

fn family_cdf(family: SurrogateFamily, u: f64) -> f64 {
    match family {
        SurrogateFamily::Cauchy => u.atan() / std::f64::consts::PI + 0.5,
        SurrogateFamily::Logistic => logistic(u),
    }
}

fn mass(family: SurrogateFamily, a: f64, b: f64, gamma: f64) -> f64 {
    match family {
        SurrogateFamily::Cauchy => ((b / gamma).atan() - (a / gamma).atan()) / std::f64::consts::PI,
        SurrogateFamily::Logistic => logistic(b / gamma) - logistic(a / gamma),
    }
}

/// Finds the scale `γ` (location 0) whose CDF puts mass `1 - ε` on
/// `[z_min, z_max]`.
///
/// The mass is monotone in `γ` when the interval straddles 0, so a bracket
/// is grown geometrically from `[1e-8, 1e3]` and then bisected in `log γ`.
pub fn calibrate_scale(
    family: SurrogateFamily,
    z_min: f64,
    z_max: f64,
    epsilon: f64,
) -> Result<SurrogateSpec, LossError> {
    let fail = |reason: &str| LossError::Calibration {
        z_min,
        z_max,
        epsilon,
        reason: reason.to_string(),
    };
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(fail("epsilon must lie in (0, 0.5)"));
    }
    if !(z_min < z_max) || !z_min.is_finite() || !z_max.is_finite() {
        return Err(fail("interval has no width"));
    }
    let target = 1.0 - epsilon;
    let g = |gamma: f64| mass(family, z_min, z_max, gamma) - target;

    let mut lo = 1e-8;
    let mut hi = 1e3;
    let mut tries = 0;
    while g(lo) <= 0.0 {
        lo *= 0.5;
        tries += 1;
        if tries > 1000 || lo == 0.0 {
            return Err(fail("no scale puts enough mass on the interval"));
        }
    }
    tries = 0;
    while g(hi) >= 0.0 {
        hi *= 2.0;
        tries += 1;
        if tries > 1000 || !hi.is_finite() {
            return Err(fail("upper bracket diverged"));
        }
    }
    let mut gamma = (lo * hi).sqrt();
    for _ in 0..400 {
        gamma = (lo * hi).sqrt();
        let v = g(gamma);
        if v == 0.0 {
            break;
        }
        if v > 0.0 {
            lo = gamma;
        } else {
            hi = gamma;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    if g(gamma).abs() > 1e-10 {
        return Err(fail("bisection did not reach tolerance"));
    }
    Ok(SurrogateSpec {
        family,
        z0: 0.0,
        gamma,
        epsilon,
        z_min,
        z_max,
    })
}

/// Calibrates a surrogate from a window's empirical bounds, falling back to
/// [`FALLBACK_BOUNDS`] when those are unusable. The flag reports the fallback.
pub fn surrogate_for_window(
    window: &WindowView,
    family: SurrogateFamily,
    epsilon: f64,
) -> Result<(SurrogateSpec, bool), LossError> {
    if let Ok((lo, hi)) = empirical_bounds(window) {
        if let Ok(spec) = calibrate_scale(family, lo, hi, epsilon) {
            return Ok((spec, false));
        }
    }
    let (lo, hi) = FALLBACK_BOUNDS;
    calibrate_scale(family, lo, hi, epsilon).map(|s| (s, true))
}
