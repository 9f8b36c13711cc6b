//! Normalized exponential discounting of training rows.
//!
//! Row `t` of an `L`-row window (1-based, `t = L` the most recent) receives
//!
//! ```text
//! p_t(λ) = exp(-λ (L - t)) / Σ_s exp(-λ (L - s))
//! ```
//!
//! so the weights sum to one and grow geometrically by `e^λ` per period.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscountError {
    #[error("discount factor must be a finite non-negative number, got {0}")]
    NegativeLambda(f64),
    #[error("window length must be at least 1")]
    EmptyWindow,
}

/// Discount weights `p_1..p_L` for a fixed `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountSchedule {
    lambda: f64,
    weights: Vec<f64>,
}

impl DiscountSchedule {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Weights ordered oldest row first.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weight of row `t` (0-based).
    pub fn weight(&self, t: usize) -> f64 {
        self.weights[t]
    }

    /// Reweights a subset of rows so that the kept weights sum to one again.
    ///
    /// Returns `None` when no rows are kept.
    pub fn renormalized(&self, keep: &[bool]) -> Option<Vec<f64>> {
        debug_assert_eq!(keep.len(), self.weights.len());
        let mass: f64 = self
            .weights
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(w, _)| w)
            .sum();
        if mass <= 0.0 {
            return None;
        }
        Some(
            self.weights
                .iter()
                .zip(keep)
                .map(|(w, &k)| if k { w / mass } else { 0.0 })
                .collect(),
        )
    }
}

/// Builds the discount schedule for `lambda` over a window of `len` rows.
pub fn make_schedule(lambda: f64, len: usize) -> Result<DiscountSchedule, DiscountError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(DiscountError::NegativeLambda(lambda));
    }
    if len == 0 {
        return Err(DiscountError::EmptyWindow);
    }
    if lambda == 0.0 {
        let w = 1.0 / len as f64;
        return Ok(DiscountSchedule {
            lambda,
            weights: vec![w; len],
        });
    }
    // The largest exponent is 0 at t = L, so the terms are already scaled by
    // their maximum and the sum is at least 1.
    let terms: Vec<f64> = (1..=len)
        .map(|t| (-lambda * (len - t) as f64).exp())
        .collect();
    let total: f64 = terms.iter().rev().sum();
    Ok(DiscountSchedule {
        lambda,
        weights: terms.into_iter().map(|e| e / total).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round5(v: f64) -> f64 {
        (v * 1e5).round() / 1e5
    }

    #[test]
    fn uniform_when_lambda_zero() {
        let s = make_schedule(0.0, 12).unwrap();
        assert!(s.weights().iter().all(|&w| w == 1.0 / 12.0));
        assert_eq!(round5(s.weight(0)), 0.08333);
    }

    #[test]
    fn published_corner_values() {
        let s = make_schedule(1.0, 12).unwrap();
        assert_eq!(round5(s.weight(11)), 0.63212);
        let s = make_schedule(0.5, 12).unwrap();
        assert_eq!(round5(s.weight(0)), 0.00161);
        assert_eq!(round5(s.weight(11)), 0.39445);
    }

    #[test]
    fn closed_form_matches_sum_form() {
        for k in 1..=500 {
            let lambda = k as f64 * 0.01;
            for len in [1usize, 2, 5, 12, 40] {
                let s = make_schedule(lambda, len).unwrap();
                let l = len as f64;
                for (i, &w) in s.weights().iter().enumerate() {
                    let t = (i + 1) as f64;
                    let closed = (-lambda * (l - t)).exp() * (1.0 - (-lambda).exp())
                        / (1.0 - (-lambda * l).exp());
                    assert!((w - closed).abs() <= 1e-12, "λ={lambda} L={len} t={t}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert_eq!(
            make_schedule(-0.1, 3),
            Err(DiscountError::NegativeLambda(-0.1))
        );
        assert!(make_schedule(f64::NAN, 3).is_err());
        assert_eq!(make_schedule(0.5, 0), Err(DiscountError::EmptyWindow));
    }

    #[test]
    fn renormalize_subset() {
        let s = make_schedule(0.0, 4).unwrap();
        let w = s.renormalized(&[true, false, true, false]).unwrap();
        assert_eq!(w, vec![0.5, 0.0, 0.5, 0.0]);
        assert!(s.renormalized(&[false; 4]).is_none());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sums_to_one_and_increases(lambda in 0.0f64..5.0, len in 1usize..60) {
                let s = make_schedule(lambda, len).unwrap();
                let total: f64 = s.weights().iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                for pair in s.weights().windows(2) {
                    if lambda > 0.0 {
                        prop_assert!(pair[1] > pair[0]);
                        prop_assert!((pair[1] / pair[0] - lambda.exp()).abs() <= 1e-9 * lambda.exp());
                    } else {
                        prop_assert_eq!(pair[1], pair[0]);
                    }
                }
            }
        }
    }
}
