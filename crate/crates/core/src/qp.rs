//! Discounted least squares on the simplex, solved as a quadratic program.
//!
//! For a window with design rows `(1, x_t)` and discount weights `p_t`, the
//! weighted least-squares objective `Σ p_t (y_t - ω₀ - ωᵀx_t)²` is, up to the
//! constant `yᵀWy`, equal to `2 (½ vᵀDv - cᵀv)` with `D = XᵀWX`, `c = XᵀWy`
//! and `v = (ω₀, ω)`. The constraints are `Σ ω_j = 1` and `ω_j ≥ 0`; `ω₀` is
//! free.
//!
//! The solver is the dual active-set method of Goldfarb and Idnani. It starts
//! at the unconstrained minimum, adds the equality, then repeatedly adds the
//! most violated bound, dropping bounds whose multipliers would turn negative.
//! Projection matrices are recomputed from scratch at every step; `m` is small.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::discount::DiscountSchedule;
use crate::panel::WindowView;

/// Relative eigenvalue floor used by [`repair_pd`].
pub const PD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("window has {0} missing forecasts; impute before fitting")]
    Incomplete(usize),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("objective matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("active-set solver stopped after {iterations} steps")]
    NonConvergence {
        iterations: usize,
        best: Box<WeightSolution>,
    },
}

/// Solver bookkeeping attached to every solution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Set when the evaluation budget ran out before the stopping tolerance.
    pub budget_exhausted: bool,
    /// Analysts whose weight is exactly zero.
    pub zero_weights: Vec<usize>,
    pub pd_repaired: bool,
    /// Best objective after each improvement (derivative-free solver only).
    pub best_history: Vec<f64>,
}

/// Intercept, simplex weights and the discounted loss they achieve.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSolution {
    pub omega0: f64,
    pub omega: Vec<f64>,
    pub lambda: f64,
    pub objective: f64,
    pub diagnostics: SolverDiagnostics,
}

impl WeightSolution {
    /// `ω₀ + ωᵀx`.
    pub fn combine(&self, x: &[f64]) -> f64 {
        self.omega0 + self.omega.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Choices that do not change the argmin of the problem but affect how it is
/// assembled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Include the free intercept `ω₀`.
    pub intercept: bool,
    /// Subtract the discounted mean of `y` from `y` and from every forecast
    /// before forming `D` and `c`. Because `Σ ω_j = 1`, residuals, `ω` and `ω₀`
    /// are unchanged; only the conditioning of `D` improves.
    pub center: bool,
    /// Active-set step cap; `None` means `10 (m + 1)²`.
    pub max_iterations: Option<usize>,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            intercept: true,
            center: true,
            max_iterations: None,
        }
    }
}

/// `min ½ vᵀDv - cᵀv` over `v = (ω₀, ω)` (or `ω` alone without intercept).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    /// `XᵀWX` after positive-definite repair.
    pub d: DMatrix<f64>,
    pub c: DVector<f64>,
    gram: DMatrix<f64>,
    n_weights: usize,
    intercept: bool,
    lambda: f64,
    pd_repaired: bool,
    max_iterations: Option<usize>,
    design: Vec<Vec<f64>>,
    target: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadraticProgram {
    pub fn n_weights(&self) -> usize {
        self.n_weights
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    pub fn pd_repaired(&self) -> bool {
        self.pd_repaired
    }

    /// Number of decision variables (weights plus intercept if any).
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// Constraint rows `a_iᵀv ≥ b_i`; the first row is the equality.
    pub fn constraints(&self) -> Vec<(DVector<f64>, f64, bool)> {
        let n = self.dim();
        let off = usize::from(self.intercept);
        let mut out = Vec::with_capacity(self.n_weights + 1);
        let mut sum = DVector::zeros(n);
        sum.rows_mut(off, self.n_weights).fill(1.0);
        out.push((sum, 1.0, true));
        for j in 0..self.n_weights {
            let mut e = DVector::zeros(n);
            e[off + j] = 1.0;
            out.push((e, 0.0, false));
        }
        out
    }

    /// Discounted sum of squared residuals `Σ p_t (y_t - ω₀ - ωᵀx_t)²`.
    pub fn loss(&self, omega0: f64, omega: &[f64]) -> f64 {
        let off = usize::from(self.intercept);
        self.design
            .iter()
            .zip(&self.target)
            .zip(&self.weights)
            .map(|((row, y), p)| {
                let fit = if self.intercept { omega0 } else { 0.0 }
                    + row[off..].iter().zip(omega).map(|(x, w)| x * w).sum::<f64>();
                p * (y - fit) * (y - fit)
            })
            .sum()
    }

    /// `½ vᵀDv - cᵀv`.
    pub fn quadratic_value(&self, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&(&self.d * v)) - self.c.dot(v)
    }
}

fn check_window(window: &WindowView, schedule: &DiscountSchedule) -> Result<Vec<Vec<f64>>, QpError> {
    if window.len() != schedule.len() {
        return Err(QpError::Dimension(format!(
            "window has {} rows, schedule {}",
            window.len(),
            schedule.len()
        )));
    }
    window
        .dense_x()
        .ok_or_else(|| QpError::Incomplete(window.missing_count()))
}

/// Assembles `D = XᵀWX` and `c = XᵀWy` with default options.
pub fn build_qp(window: &WindowView, schedule: &DiscountSchedule) -> Result<QuadraticProgram, QpError> {
    build_qp_with(window, schedule, QpOptions::default())
}

pub fn build_qp_with(
    window: &WindowView,
    schedule: &DiscountSchedule,
    options: QpOptions,
) -> Result<QuadraticProgram, QpError> {
    let x = check_window(window, schedule)?;
    let m = window.n_analysts();
    let p = schedule.weights();
    let shift = if options.center {
        window.y().iter().zip(p).map(|(y, p)| y * p).sum::<f64>()
    } else {
        0.0
    };
    let off = usize::from(options.intercept);
    let n = m + off;
    let design: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            let mut r = Vec::with_capacity(n);
            if options.intercept {
                r.push(1.0);
            }
            r.extend(row.iter().map(|v| v - shift));
            r
        })
        .collect();
    let target: Vec<f64> = window.y().iter().map(|y| y - shift).collect();

    let mut d = DMatrix::zeros(n, n);
    let mut c = DVector::zeros(n);
    for ((row, y), &w) in design.iter().zip(&target).zip(p) {
        for a in 0..n {
            c[a] += w * row[a] * y;
            for b in a..n {
                d[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            d[(a, b)] = d[(b, a)];
        }
    }
    let (repaired, pd_repaired) = repair_pd_flagged(&d)?;
    Ok(QuadraticProgram {
        d: repaired,
        gram: d,
        c,
        n_weights: m,
        intercept: options.intercept,
        lambda: schedule.lambda(),
        pd_repaired,
        max_iterations: options.max_iterations,
        design,
        target,
        weights: p.to_vec(),
    })
}

/// Clips eigenvalues below `1e-8 × λ_max` and reassembles; PD input with a
/// well-separated spectrum comes back unchanged.
pub fn repair_pd(d: &DMatrix<f64>) -> Result<DMatrix<f64>, QpError> {
    repair_pd_flagged(d).map(|(m, _)| m)
}

fn repair_pd_flagged(d: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool), QpError> {
    if !d.is_square() {
        return Err(QpError::Dimension(format!("{}×{} matrix", d.nrows(), d.ncols())));
    }
    let scale = d.amax().max(1.0);
    let asym = (d - d.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(QpError::NotSymmetric(asym));
    }
    let eig = SymmetricEigen::new(d.clone());
    let max = eig.eigenvalues.max();
    let floor = if max > 0.0 { PD_FLOOR * max } else { PD_FLOOR };
    if eig.eigenvalues.min() >= floor {
        return Ok((d.clone(), false));
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let repaired = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let sym = (&repaired + repaired.transpose()) * 0.5;
    Ok((sym, true))
}

struct Constraint {
    normal: DVector<f64>,
    rhs: f64,
    equality: bool,
}

/// Solves the program and returns simplex weights.
///
/// The intercept is profiled out first: for fixed `ω` the optimal `ω₀` is
/// `(c₀ - dᵀω) / d₀₀`, leaving a QP in `ω` alone whose matrix is the Schur
/// complement of the intercept block. The Schur complement is taken from the
/// Gram matrix before repair (the repair is then applied to the reduced
/// matrix), which keeps `ω₀` exact when analyst columns are collinear with
/// the intercept.
pub fn solve_qp(qp: &QuadraticProgram) -> Result<WeightSolution, QpError> {
    let m = qp.n_weights;
    let (g, a) = if qp.intercept {
        let d00 = qp.gram[(0, 0)];
        let d = qp.gram.view((1, 0), (m, 1)).clone_owned();
        let g = qp.gram.view((1, 1), (m, m)) - &d * d.transpose() / d00;
        let a = qp.c.rows(1, m) - &d * (qp.c[0] / d00);
        (g, a)
    } else {
        (qp.gram.clone(), qp.c.clone())
    };
    let g = (&g + g.transpose()) * 0.5;
    let (g, _) = repair_pd_flagged(&g)?;
    let cap = qp.max_iterations.unwrap_or(10 * (m + 1) * (m + 1));

    let finish = |x: &DVector<f64>, bound: &[usize], iterations: usize, converged: bool| {
        let mut omega: Vec<f64> = x.iter().map(|w| w.max(0.0)).collect();
        for &j in bound {
            omega[j] = 0.0;
        }
        let total: f64 = omega.iter().sum();
        if total > 0.0 {
            omega.iter_mut().for_each(|w| *w /= total);
        } else {
            omega.fill(1.0 / m as f64);
        }
        let omega0 = if qp.intercept {
            let dw: f64 = (0..m).map(|j| qp.gram[(j + 1, 0)] * omega[j]).sum();
            (qp.c[0] - dw) / qp.gram[(0, 0)]
        } else {
            0.0
        };
        WeightSolution {
            omega0,
            objective: qp.loss(omega0, &omega),
            lambda: qp.lambda,
            diagnostics: SolverDiagnostics {
                iterations,
                evaluations: 0,
                converged,
                budget_exhausted: false,
                zero_weights: (0..m).filter(|&j| omega[j] == 0.0).collect(),
                pd_repaired: qp.pd_repaired,
                best_history: Vec::new(),
            },
            omega,
        }
    };

    match dual_active_set(&g, &a, cap) {
        Ok((x, bound, iterations)) => Ok(finish(&x, &bound, iterations, true)),
        Err(ActiveSetFailure::Cap(x)) => Err(QpError::NonConvergence {
            iterations: cap,
            best: Box::new(finish(&x, &[], cap, false)),
        }),
        Err(ActiveSetFailure::Infeasible) => Err(QpError::Infeasible),
        Err(ActiveSetFailure::NotPd) => Err(QpError::NotPositiveDefinite),
    }
}

enum ActiveSetFailure {
    Cap(DVector<f64>),
    Infeasible,
    NotPd,
}

/// Goldfarb-Idnani dual active-set method for `min ½ xᵀGx - aᵀx` subject to
/// `Σ x_j = 1` and `x_j ≥ 0`. Returns the minimizer, the coordinates held
/// at their bound and the step count.
fn dual_active_set(
    g: &DMatrix<f64>,
    a: &DVector<f64>,
    cap: usize,
) -> Result<(DVector<f64>, Vec<usize>, usize), ActiveSetFailure> {
    let m = a.len();
    let chol = g.clone().cholesky().ok_or(ActiveSetFailure::NotPd)?;
    let g_inv = chol.inverse();
    let mut cons = vec![Constraint {
        normal: DVector::from_element(m, 1.0),
        rhs: 1.0,
        equality: true,
    }];
    for j in 0..m {
        let mut e = DVector::zeros(m);
        e[j] = 1.0;
        cons.push(Constraint {
            normal: e,
            rhs: 0.0,
            equality: false,
        });
    }

    // Unconstrained minimum.
    let mut x = chol.solve(a);
    // Active constraints (index into `cons`, sign applied to the normal) and
    // their multipliers.
    let mut active: Vec<(usize, f64)> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let tol = 1e-12;

    let mut pending_equality = true;
    loop {
        // The equality goes in first, then the most violated bound.
        let (p, sign) = if pending_equality {
            pending_equality = false;
            let s = cons[0].normal.dot(&x) - cons[0].rhs;
            (0, if s > 0.0 { -1.0 } else { 1.0 })
        } else {
            let mut worst = None;
            let mut worst_s = -tol;
            for (i, c) in cons.iter().enumerate().skip(1) {
                if active.iter().any(|&(k, _)| k == i) {
                    continue;
                }
                let s = c.normal.dot(&x) - c.rhs;
                if s < worst_s {
                    worst_s = s;
                    worst = Some(i);
                }
            }
            match worst {
                Some(i) => (i, 1.0),
                None => {
                    let bound = active.iter().filter(|&&(k, _)| k > 0).map(|&(k, _)| k - 1).collect();
                    return Ok((x, bound, iterations));
                }
            }
        };
        let np = &cons[p].normal * sign;
        let bp = cons[p].rhs * sign;
        let mut u_new = 0.0;

        loop {
            iterations += 1;
            if iterations > cap {
                return Err(ActiveSetFailure::Cap(x));
            }
            let (z, r) = directions(&g_inv, &cons, &active, &np);
            // Largest step keeping the active bounds' multipliers nonnegative.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, &(ci, _)) in active.iter().enumerate() {
                if cons[ci].equality || r[k] <= 0.0 {
                    continue;
                }
                let ratio = u[k] / r[k];
                if ratio < t1 {
                    t1 = ratio;
                    drop = Some(k);
                }
            }
            let s = np.dot(&x) - bp;
            let zn = z.dot(&np);
            let t2 = if z.norm() <= 1e-14 * (1.0 + np.norm()) || zn <= 0.0 {
                f64::INFINITY
            } else {
                -s / zn
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(ActiveSetFailure::Infeasible);
            }
            for (k, uk) in u.iter_mut().enumerate() {
                *uk -= t * r[k];
            }
            u_new += t;
            if t2.is_finite() {
                x += &z * t;
            }
            if t == t2 {
                active.push((p, sign));
                u.push(u_new);
                break;
            }
            let k = drop.expect("t1 finite implies a blocking bound");
            active.remove(k);
            u.remove(k);
        }
    }
}

/// Primal step direction `z = H n_p` and dual direction `r = N* n_p` for the
/// current active set.
fn directions(
    g_inv: &DMatrix<f64>,
    cons: &[Constraint],
    active: &[(usize, f64)],
    np: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let q = active.len();
    if q == 0 {
        return (g_inv * np, DVector::zeros(0));
    }
    let n = np.len();
    let mut big_n = DMatrix::zeros(n, q);
    for (k, &(ci, sign)) in active.iter().enumerate() {
        big_n.set_column(k, &(&cons[ci].normal * sign));
    }
    let gn = g_inv * &big_n;
    let m = big_n.transpose() * &gn;
    let m_inv = m
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| m.try_inverse())
        .expect("active normals are linearly independent");
    let n_star = &m_inv * gn.transpose();
    let r = &n_star * np;
    let z = g_inv * np - &gn * &r;
    (z, r)
}

/// Builds and solves in one call.
pub fn fit(
    window: &WindowView,
    schedule: &DiscountSchedule,
    options: QpOptions,
) -> Result<WeightSolution, QpError> {
    solve_qp(&build_qp_with(window, schedule, options)?)
}

/// `ŷ = ω₀ + ωᵀx_{L+1}` for the window's target row.
pub fn predict(window: &WindowView, solution: &WeightSolution) -> Result<f64, QpError> {
    if solution.omega.len() != window.n_analysts() {
        return Err(QpError::Dimension(format!(
            "{} weights for {} target forecasts",
            solution.omega.len(),
            window.n_analysts()
        )));
    }
    Ok(solution.combine(window.target_x()))
}
