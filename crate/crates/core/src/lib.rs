//! Optimally weighted combination of analyst point forecasts.
//!
//! Forecasts and actuals are modeled on the log scale. Combination weights
//! live on the probability simplex plus a free intercept, and are fitted by
//! one of three estimators:
//!
//! * [`qp`]: exponentially discounted least squares solved as a quadratic
//!   program,
//! * [`nlp`]: derivative-free minimization of a smooth win-rate surrogate or
//!   a discounted logistic (hit-rate) loss,
//! * [`bayes`]: a hierarchical model sampled by Metropolis-within-Gibbs that
//!   also imputes missing forecasts.
//!
//! [`backtest`] evaluates all of them over rolling windows.

pub mod backtest;
pub mod bayes;
pub mod discount;
pub mod losses;
pub mod nlp;
pub mod panel;
pub mod qp;

pub use discount::{make_schedule, DiscountSchedule};
pub use panel::{ForecastPanel, RawPanel, WindowView};

/// Mixes a master seed with a path of indices into an independent 64-bit
/// seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(seed), |acc, &k| mix(acc ^ mix(k)))
}
