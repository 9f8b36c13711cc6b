//! Derivative-free fitting of the win-rate surrogate and hit-rate objectives.
//!
//! [`cobyla_minimize`] is a trust-region method built on linear interpolation
//! models, in the spirit of Powell's COBYLA. The sum-to-one constraint is
//! removed by substituting `ω_m = 1 - Σ_{j<m} ω_j`, which leaves the variables
//! `(ω₀, ω_1..ω_{m-1})` on a box-times-corner-simplex. Each step minimizes the
//! linear model along the projected steepest-descent path, cut at the trust
//! radius, so every evaluated point is feasible.

use thiserror::Error;

use crate::discount::DiscountSchedule;
use crate::losses::{
    binary_target, clamp_probability, hit_rate_loss_logit, logistic, RelativeBias,
    surrogate_for_window, win_rate_loss, LossError, SurrogateFamily, SurrogateSpec,
};
use crate::panel::WindowView;
use crate::qp::{SolverDiagnostics, WeightSolution};

/// `|ω₀|` bound for the win-rate problem (log scale).
pub const WIN_OMEGA0_BOUND: f64 = 10.0;
/// `|ω₀|` bound for the hit-rate problem (log-odds scale).
pub const HIT_OMEGA0_BOUND: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("window has {0} missing forecasts; impute before fitting")]
    Incomplete(usize),
    #[error("start point is infeasible")]
    InfeasibleStart,
    #[error("objective is not finite at the start point")]
    NonFiniteStart,
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Stopping rules and trust-region sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpOptions {
    pub rho_begin: f64,
    pub rho_end: f64,
    /// `None` means `5000 (m + 1)`.
    pub max_evaluations: Option<usize>,
    pub max_radius: f64,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self {
            rho_begin: 0.25,
            rho_end: 1e-6,
            max_evaluations: None,
            max_radius: 25.0,
        }
    }
}

/// Objective over `(ω₀, ω)` plus the feasible set.
pub struct NlpProblem<'a> {
    pub objective: &'a (dyn Fn(f64, &[f64]) -> f64 + Sync),
    pub n_weights: usize,
    /// `|ω₀| ≤ omega0_bound`; `0` pins the intercept at zero.
    pub omega0_bound: f64,
    /// Typical magnitude of a meaningful intercept move; the trust region is
    /// measured in units of this for `ω₀` and in plain units for the weights.
    pub omega0_scale: f64,
    pub start_omega0: f64,
    pub start_omega: Vec<f64>,
    /// Additional starting points; the best result over all starts wins.
    pub extra_starts: Vec<(f64, Vec<f64>)>,
    pub options: NlpOptions,
}

impl<'a> NlpProblem<'a> {
    /// Problem started at equal weights and zero intercept.
    pub fn new(
        objective: &'a (dyn Fn(f64, &[f64]) -> f64 + Sync),
        n_weights: usize,
        omega0_bound: f64,
    ) -> Self {
        Self {
            objective,
            n_weights,
            omega0_bound,
            omega0_scale: 1.0,
            start_omega0: 0.0,
            start_omega: vec![1.0 / n_weights.max(1) as f64; n_weights],
            extra_starts: Vec::new(),
            options: NlpOptions::default(),
        }
    }

    /// Adds each simplex vertex (with the default intercept) as a start.
    pub fn with_vertex_starts(mut self) -> Self {
        for j in 0..self.n_weights {
            let mut w = vec![0.0; self.n_weights];
            w[j] = 1.0;
            self.extra_starts.push((self.start_omega0, w));
        }
        self
    }
}

/// Reduced coordinates `u = (ω₀ / scale, ω_1..ω_{m-1})`.
struct Space {
    m: usize,
    scale: f64,
    bound: f64,
}

impl Space {
    fn dim(&self) -> usize {
        self.m
    }

    fn to_weights(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let mut omega = Vec::with_capacity(self.m);
        omega.extend_from_slice(&u[1..]);
        let rest = 1.0 - u[1..].iter().sum::<f64>();
        omega.push(rest.max(0.0));
        (u[0] * self.scale, omega)
    }

    fn from_weights(&self, omega0: f64, omega: &[f64]) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.m);
        u.push(omega0 / self.scale);
        u.extend_from_slice(&omega[..self.m - 1]);
        u
    }

    fn project(&self, u: &mut [f64]) {
        let b = self.bound / self.scale;
        u[0] = u[0].clamp(-b, b);
        project_corner_simplex(&mut u[1..]);
    }

    fn feasible(&self, u: &[f64]) -> bool {
        let b = self.bound / self.scale;
        u[0].abs() <= b * (1.0 + 1e-12)
            && u[1..].iter().all(|&v| v >= -1e-12)
            && u[1..].iter().sum::<f64>() <= 1.0 + 1e-12
    }
}

/// Euclidean projection onto `{u ≥ 0, Σ u ≤ 1}`.
fn project_corner_simplex(u: &mut [f64]) {
    if u.is_empty() {
        return;
    }
    let clipped: f64 = u.iter().map(|v| v.max(0.0)).sum();
    if clipped <= 1.0 {
        u.iter_mut().for_each(|v| *v = v.max(0.0));
        return;
    }
    // Projection onto the face Σ u = 1.
    let mut sorted: Vec<f64> = u.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cum += v;
        let t = (cum - 1.0) / (k + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    u.iter_mut().for_each(|v| *v = (*v - theta).max(0.0));
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

struct Point {
    u: Vec<f64>,
    f: f64,
}

struct Run<'p, 'a> {
    problem: &'p NlpProblem<'a>,
    space: Space,
    evaluations: usize,
    max_evaluations: usize,
    best: Point,
    history: Vec<f64>,
}

impl Run<'_, '_> {
    fn eval(&mut self, u: &[f64]) -> f64 {
        self.evaluations += 1;
        let (w0, w) = self.space.to_weights(u);
        let f = (self.problem.objective)(w0, &w);
        let f = if f.is_finite() { f } else { f64::INFINITY };
        if f < self.best.f {
            self.best = Point { u: u.to_vec(), f };
            self.history.push(f);
        }
        f
    }

    fn exhausted(&self) -> bool {
        self.evaluations >= self.max_evaluations
    }

    /// Interpolation points around `base` along coordinate directions,
    /// flipped or shortened to stay feasible.
    fn rebuild(&mut self, base: &Point, radius: f64) -> Vec<Point> {
        let n = self.space.dim();
        let mut pts = Vec::with_capacity(n);
        for i in 0..n {
            if self.exhausted() {
                break;
            }
            let mut chosen = None;
            for step in [radius, -radius, radius * 0.5, -radius * 0.5, radius * 0.1, -radius * 0.1] {
                let mut u = base.u.clone();
                u[i] += step;
                if self.space.feasible(&u) {
                    chosen = Some(u);
                    break;
                }
            }
            let u = chosen.unwrap_or_else(|| {
                // Pinned coordinate (e.g. a corner): move along the face instead.
                let mut u = base.u.clone();
                u[i] += radius;
                self.space.project(&mut u);
                u
            });
            let f = self.eval(&u);
            pts.push(Point { u, f });
        }
        pts
    }

    /// Linear-model gradient from the displacement system, or `None` when
    /// the points are too close to degenerate.
    fn gradient(&self, base: &Point, pts: &[Point], radius: f64) -> Option<Vec<f64>> {
        let n = self.space.dim();
        if pts.len() != n {
            return None;
        }
        let mut a = nalgebra::DMatrix::zeros(n, n);
        let mut b = nalgebra::DVector::zeros(n);
        for (k, p) in pts.iter().enumerate() {
            let d = sub(&p.u, &base.u);
            if norm(&d) > 2.5 * radius || !p.f.is_finite() {
                return None;
            }
            for i in 0..n {
                a[(k, i)] = d[i] / radius;
            }
            b[k] = (p.f - base.f) / radius;
        }
        let svd = a.clone().svd(false, false);
        let smin = svd.singular_values.min();
        if smin < 0.05 {
            return None;
        }
        let g = a.lu().solve(&b)?;
        Some(g.iter().copied().collect())
    }

    /// Trial step: the projected steepest-descent path cut at `radius`.
    fn step(&self, base: &[f64], g: &[f64], radius: f64) -> Vec<f64> {
        let gn = norm(g);
        if gn == 0.0 {
            return vec![0.0; base.len()];
        }
        let at = |s: f64| {
            let mut u: Vec<f64> = base.iter().zip(g).map(|(b, gi)| b - s * gi).collect();
            self.space.project(&mut u);
            u
        };
        let len = |s: f64| norm(&sub(&at(s), base));
        let mut lo = 0.0;
        let mut hi = radius / gn;
        let mut prev = len(hi);
        let mut k = 0;
        while prev < radius && k < 60 {
            lo = hi;
            hi *= 2.0;
            let next = len(hi);
            if next - prev <= 1e-14 * radius {
                return sub(&at(hi), base);
            }
            prev = next;
            k += 1;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if len(mid) > radius {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        sub(&at(lo), base)
    }

    fn minimize_from(&mut self, start: Vec<f64>) {
        let opts = &self.problem.options;
        let (rho_end, max_radius) = (opts.rho_end, opts.max_radius);
        let mut radius = opts.rho_begin;
        let f0 = self.eval(&start);
        let mut base = Point { u: start, f: f0 };
        let mut pts = self.rebuild(&base, radius);
        let mut fresh = true;

        while radius >= rho_end && !self.exhausted() {
            let Some(g) = self.gradient(&base, &pts, radius) else {
                pts = self.rebuild(&base, radius);
                fresh = true;
                if self.gradient(&base, &pts, radius).is_none() {
                    radius *= 0.5;
                }
                continue;
            };
            let d = self.step(&base.u, &g, radius);
            let predicted = -g.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
            let dn = norm(&d);
            if predicted <= 1e-15 * (1.0 + base.f.abs()) || dn < 1e-3 * radius.min(1.0) * rho_end {
                if fresh {
                    radius *= 0.5;
                }
                pts = self.rebuild(&base, radius);
                fresh = true;
                continue;
            }
            let u: Vec<f64> = base.u.iter().zip(&d).map(|(a, b)| a + b).collect();
            let f = self.eval(&u);
            let ratio = (base.f - f) / predicted;
            let new = Point { u, f };
            if f < base.f {
                let old = std::mem::replace(&mut base, new);
                replace_farthest(&mut pts, &base.u, old);
                if ratio > 0.7 && dn > 0.9 * radius {
                    radius = (2.0 * radius).min(max_radius);
                }
                fresh = false;
            } else {
                replace_farthest(&mut pts, &base.u, new);
                if ratio < 0.1 {
                    if fresh {
                        radius *= 0.5;
                    }
                    pts = self.rebuild(&base, radius);
                    fresh = true;
                } else {
                    fresh = false;
                }
            }
        }
    }
}

fn replace_farthest(pts: &mut [Point], center: &[f64], p: Point) {
    if let Some(k) = (0..pts.len()).max_by(|&a, &b| {
        norm(&sub(&pts[a].u, center)).total_cmp(&norm(&sub(&pts[b].u, center)))
    }) {
        pts[k] = p;
    }
}

/// Minimizes the problem's objective over `ω ∈ S_m`, `|ω₀| ≤ bound`.
///
/// Running out of evaluations is not an error: the best point is returned
/// with `budget_exhausted` set.
pub fn cobyla_minimize(problem: &NlpProblem<'_>) -> Result<WeightSolution, NlpError> {
    let m = problem.n_weights;
    if m == 0 || problem.start_omega.len() != m {
        return Err(NlpError::Dimension(format!(
            "{} start weights for {m} analysts",
            problem.start_omega.len()
        )));
    }
    let scale = if problem.omega0_scale > 0.0 { problem.omega0_scale } else { 1.0 };
    let space = Space {
        m,
        scale,
        bound: problem.omega0_bound.max(0.0),
    };
    let mut starts = vec![(problem.start_omega0, problem.start_omega.clone())];
    starts.extend(problem.extra_starts.iter().cloned());
    for (w0, w) in &starts {
        let ok = w.len() == m
            && w.iter().all(|&v| v >= 0.0)
            && (w.iter().sum::<f64>() - 1.0).abs() <= 1e-10
            && w0.abs() <= space.bound;
        if !ok {
            return Err(NlpError::InfeasibleStart);
        }
    }
    let start_f = (problem.objective)(problem.start_omega0, &problem.start_omega);
    if !start_f.is_finite() {
        return Err(NlpError::NonFiniteStart);
    }
    let max_evaluations = problem
        .options
        .max_evaluations
        .unwrap_or(5000 * (m + 1))
        .max(1);

    let first = space.from_weights(problem.start_omega0, &problem.start_omega);
    let mut run = Run {
        problem,
        space,
        evaluations: 0,
        max_evaluations,
        best: Point {
            u: first,
            f: f64::INFINITY,
        },
        history: Vec::new(),
    };
    let mut iterations = 0;
    for (w0, w) in &starts {
        if run.exhausted() {
            break;
        }
        let u = run.space.from_weights(*w0, w);
        if m == 1 && run.space.bound == 0.0 {
            run.eval(&u);
            continue;
        }
        run.minimize_from(u);
        iterations += 1;
    }
    let exhausted = run.exhausted();
    let (omega0, mut omega) = run.space.to_weights(&run.best.u);
    let total: f64 = omega.iter().sum();
    omega.iter_mut().for_each(|w| *w /= total);
    let objective = (problem.objective)(omega0, &omega);
    Ok(WeightSolution {
        omega0,
        lambda: f64::NAN,
        objective,
        diagnostics: SolverDiagnostics {
            iterations,
            evaluations: run.evaluations,
            converged: !exhausted,
            budget_exhausted: exhausted,
            zero_weights: (0..m).filter(|&j| omega[j] == 0.0).collect(),
            pd_repaired: false,
            best_history: run.history,
        },
        omega,
    })
}

/// Training rows shared by both objectives, with forecasts centered on the
/// row consensus so that `ω₀ + ωᵀx_t = c_t + ω₀ + ωᵀ(x_t - c_t)` is evaluated
/// without cancellation.
struct Rows {
    y: Vec<f64>,
    consensus: Vec<f64>,
    x: Vec<Vec<f64>>,
    p: Vec<f64>,
    len: usize,
}

impl Rows {
    fn new(window: &WindowView, schedule: &DiscountSchedule) -> Result<Self, NlpError> {
        if window.len() != schedule.len() {
            return Err(NlpError::Dimension(format!(
                "window has {} rows, schedule {}",
                window.len(),
                schedule.len()
            )));
        }
        let x = window
            .dense_x()
            .ok_or_else(|| NlpError::Incomplete(window.missing_count()))?;
        Ok(Self {
            y: window.y().to_vec(),
            consensus: window.consensus().to_vec(),
            x,
            p: schedule.weights().to_vec(),
            len: window.len(),
        })
    }
}

/// Discounted surrogate win-rate loss `(1/L) Σ p_t F(|R_t| - 1)`.
///
/// Rows whose actual equals the consensus are dropped and the remaining
/// discount weights renormalized.
#[derive(Debug, Clone)]
pub struct WinRateObjective {
    spec: SurrogateSpec,
    /// (y - c, x - c, p̃) per kept row.
    rows: Vec<(f64, Vec<f64>, f64)>,
    len: usize,
}

impl WinRateObjective {
    pub fn spec(&self) -> &SurrogateSpec {
        &self.spec
    }

    pub fn kept_rows(&self) -> usize {
        self.rows.len()
    }

    fn relative_biases(&self, omega0: f64, omega: &[f64]) -> impl Iterator<Item = (f64, f64)> + '_ {
        let omega = omega.to_vec();
        self.rows.iter().map(move |(dy, dx, p)| {
            let fit: f64 = omega0 + dx.iter().zip(&omega).map(|(x, w)| x * w).sum::<f64>();
            ((dy - fit) / dy, *p)
        })
    }

    pub fn value(&self, omega0: f64, omega: &[f64]) -> f64 {
        self.relative_biases(omega0, omega)
            .map(|(r, p)| p * self.spec.cdf(r.abs() - 1.0))
            .sum::<f64>()
            / self.len as f64
    }

    /// The same sum with the exact indicator `I(|R_t| > 1)` in place of `F`.
    pub fn exact(&self, omega0: f64, omega: &[f64]) -> f64 {
        self.relative_biases(omega0, omega)
            .map(|(r, p)| {
                let ratio = RelativeBias {
                    numerator: r,
                    denominator: 1.0,
                };
                p * f64::from(win_rate_loss(&ratio))
            })
            .sum::<f64>()
            / self.len as f64
    }
}

pub fn win_rate_objective(
    window: &WindowView,
    schedule: &DiscountSchedule,
    spec: SurrogateSpec,
) -> Result<WinRateObjective, NlpError> {
    let rows = Rows::new(window, schedule)?;
    let keep: Vec<bool> = rows
        .y
        .iter()
        .zip(&rows.consensus)
        .map(|(y, c)| y - c != 0.0)
        .collect();
    let p = schedule
        .renormalized(&keep)
        .ok_or(NlpError::Loss(LossError::AllDegenerate))?;
    let kept = (0..rows.len)
        .filter(|&t| keep[t])
        .map(|t| {
            let c = rows.consensus[t];
            (
                rows.y[t] - c,
                rows.x[t].iter().map(|x| x - c).collect(),
                p[t],
            )
        })
        .collect();
    Ok(WinRateObjective {
        spec,
        rows: kept,
        len: rows.len,
    })
}

/// Discounted Bernoulli negative log-likelihood of the logistic model
/// `p̂_t = σ(ω₀ + ωᵀx_t)` against `ỹ_t = I(y_t > c_t)`.
#[derive(Debug, Clone)]
pub struct HitRateObjective {
    rows: Vec<(Vec<f64>, bool, f64)>,
    len: usize,
}

impl HitRateObjective {
    pub fn value(&self, omega0: f64, omega: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|(x, label, p)| {
                let eta = omega0 + x.iter().zip(omega).map(|(a, w)| a * w).sum::<f64>();
                p * hit_rate_loss_logit(eta, *label)
            })
            .sum::<f64>()
            / self.len as f64
    }

    pub fn labels(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.1).collect()
    }
}

pub fn hit_rate_objective(
    window: &WindowView,
    schedule: &DiscountSchedule,
) -> Result<HitRateObjective, NlpError> {
    let rows = Rows::new(window, schedule)?;
    let out = (0..rows.len)
        .map(|t| {
            (
                rows.x[t].clone(),
                binary_target(rows.y[t], rows.consensus[t]),
                rows.p[t],
            )
        })
        .collect();
    Ok(HitRateObjective {
        rows: out,
        len: rows.len,
    })
}

/// A fitted win-rate model with the surrogate it was fitted against.
#[derive(Debug, Clone)]
pub struct WinFit {
    pub solution: WeightSolution,
    pub spec: SurrogateSpec,
    /// Set when the empirical bounds were unusable and the fallback interval
    /// was used for calibration.
    pub fallback_bounds: bool,
}

/// Root-mean-square of `y_t - c_t`, the natural unit for intercept moves in
/// the win-rate problem.
fn surprise_scale(window: &WindowView) -> f64 {
    let ss: f64 = window
        .y()
        .iter()
        .zip(window.consensus())
        .map(|(y, c)| (y - c) * (y - c))
        .sum();
    let rms = (ss / window.len() as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        rms.min(1.0)
    } else {
        1.0
    }
}

/// Calibrates the surrogate on the window and minimizes it.
pub fn fit_win_rate(
    window: &WindowView,
    schedule: &DiscountSchedule,
    family: SurrogateFamily,
    epsilon: f64,
    options: &NlpOptions,
) -> Result<WinFit, NlpError> {
    let (spec, fallback_bounds) = surrogate_for_window(window, family, epsilon)?;
    let objective = win_rate_objective(window, schedule, spec)?;
    let f = |w0: f64, w: &[f64]| objective.value(w0, w);
    let mut problem = NlpProblem::new(&f, window.n_analysts(), WIN_OMEGA0_BOUND);
    problem.omega0_scale = surprise_scale(window);
    problem.options = options.clone();
    let mut solution = cobyla_minimize(&problem)?;
    solution.lambda = schedule.lambda();
    Ok(WinFit {
        solution,
        spec,
        fallback_bounds,
    })
}

/// Fits the constrained logistic regression for the hit indicator.
pub fn fit_hit_rate(
    window: &WindowView,
    schedule: &DiscountSchedule,
    options: &NlpOptions,
) -> Result<HitModel, NlpError> {
    let objective = hit_rate_objective(window, schedule)?;
    let f = |w0: f64, w: &[f64]| objective.value(w0, w);
    let mut problem = NlpProblem::new(&f, window.n_analysts(), HIT_OMEGA0_BOUND);
    problem.options = options.clone();
    let mut solution = cobyla_minimize(&problem)?;
    solution.lambda = schedule.lambda();
    Ok(HitModel(solution))
}

/// Weights interpreted on the log-odds scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HitModel(pub WeightSolution);

impl HitModel {
    pub fn probability(&self, x: &[f64]) -> f64 {
        clamp_probability(logistic(self.0.combine(x)))
    }
}

/// `p̂_{L+1} = σ(ω₀ + ωᵀx_{L+1})`, clamped away from 0 and 1.
pub fn predict_hit_probability(window: &WindowView, model: &HitModel) -> Result<f64, NlpError> {
    if model.0.omega.len() != window.n_analysts() {
        return Err(NlpError::Dimension(format!(
            "{} weights for {} target forecasts",
            model.0.omega.len(),
            window.n_analysts()
        )));
    }
    Ok(model.probability(window.target_x()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discount::make_schedule;
    use crate::losses::calibrate_scale;
    use crate::qp::{build_qp, solve_qp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_window(rng: &mut ChaCha8Rng, m: usize, l: usize) -> WindowView {
        let y: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<Vec<f64>> = y
            .iter()
            .map(|v| (0..m).map(|j| v + 0.1 * j as f64 + rng.random_range(-0.5..0.5)).collect())
            .collect();
        WindowView::dense(y, x, vec![0.0; m]).unwrap()
    }

    #[test]
    fn corner_simplex_projection() {
        let mut u = vec![0.2, 0.3];
        project_corner_simplex(&mut u);
        assert_eq!(u, vec![0.2, 0.3]);
        let mut u = vec![-0.5, 0.3];
        project_corner_simplex(&mut u);
        assert_eq!(u, vec![0.0, 0.3]);
        let mut u = vec![1.0, 1.0];
        project_corner_simplex(&mut u);
        assert!((u[0] - 0.5).abs() < 1e-15 && (u[1] - 0.5).abs() < 1e-15);
        let mut u = vec![2.0, -1.0];
        project_corner_simplex(&mut u);
        assert_eq!(u, vec![1.0, 0.0]);
    }

    #[test]
    fn matches_qp_on_convex_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let m = rng.random_range(2..=4);
            let w = random_window(&mut rng, m, 12);
            let s = make_schedule(0.25, 12).unwrap();
            let qp = build_qp(&w, &s).unwrap();
            let exact = solve_qp(&qp).unwrap();
            let f = |w0: f64, om: &[f64]| qp.loss(w0, om);
            let sol = cobyla_minimize(&NlpProblem::new(&f, m, 10.0)).unwrap();
            assert!(sol.objective - exact.objective <= 1e-4, "{} vs {}", sol.objective, exact.objective);
            assert!((sol.omega.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_objective_returns_start() {
        let f = |_: f64, _: &[f64]| 3.0;
        let sol = cobyla_minimize(&NlpProblem::new(&f, 3, 10.0)).unwrap();
        assert_eq!(sol.omega0, 0.0);
        assert!(sol.omega.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(sol.objective, 3.0);
        assert_eq!(sol.diagnostics.best_history, vec![3.0]);
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let f = |w0: f64, om: &[f64]| (w0 - 1.0).powi(2) + om[0];
        let mut p = NlpProblem::new(&f, 2, 10.0);
        p.options.max_evaluations = Some(5);
        let sol = cobyla_minimize(&p).unwrap();
        assert!(sol.diagnostics.budget_exhausted);
        assert!(sol.diagnostics.evaluations <= 5);
    }

    #[test]
    fn infeasible_start_rejected() {
        let f = |_: f64, _: &[f64]| 0.0;
        let mut p = NlpProblem::new(&f, 2, 10.0);
        p.start_omega = vec![0.7, 0.7];
        assert_eq!(cobyla_minimize(&p).unwrap_err(), NlpError::InfeasibleStart);
    }

    #[test]
    fn win_objective_at_equal_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_window(&mut rng, 3, 8);
        let s = make_schedule(0.5, 8).unwrap();
        let spec = calibrate_scale(SurrogateFamily::Cauchy, -2.0, 5.0, 0.005).unwrap();
        let obj = win_rate_objective(&w, &s, spec).unwrap();
        let eq = [1.0 / 3.0; 3];
        assert!((obj.value(0.0, &eq) - 0.5 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn win_objective_with_perfect_analyst() {
        let y = vec![1.0, 2.0, 1.5];
        let x = vec![vec![1.0, 0.0], vec![2.0, 3.5], vec![1.5, 0.9]];
        let w = WindowView::dense(y, x, vec![0.0, 0.0]).unwrap();
        let s = make_schedule(0.0, 3).unwrap();
        let spec = calibrate_scale(SurrogateFamily::Cauchy, -2.0, 5.0, 0.005).unwrap();
        let obj = win_rate_objective(&w, &s, spec).unwrap();
        let v = obj.value(0.0, &[1.0, 0.0]);
        assert!((v - spec.cdf(-1.0) / 3.0).abs() < 1e-12);
        assert!(v < 0.5 / 3.0);
    }

    #[test]
    fn win_objective_tends_to_exact_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_window(&mut rng, 2, 10);
        let s = make_schedule(0.75, 10).unwrap();
        let spec = SurrogateSpec {
            gamma: 1e-9,
            ..calibrate_scale(SurrogateFamily::Cauchy, -2.0, 5.0, 0.005).unwrap()
        };
        let obj = win_rate_objective(&w, &s, spec).unwrap();
        for om in [[0.3, 0.7], [0.9, 0.1]] {
            assert!((obj.value(0.05, &om) - obj.exact(0.05, &om)).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_rows_are_dropped() {
        let y = vec![1.0, 2.0];
        let x = vec![vec![0.0, 2.0], vec![1.0, 2.0]];
        let w = WindowView::dense(y, x, vec![0.0, 0.0]).unwrap();
        let s = make_schedule(0.0, 2).unwrap();
        let spec = calibrate_scale(SurrogateFamily::Cauchy, -2.0, 5.0, 0.005).unwrap();
        let obj = win_rate_objective(&w, &s, spec).unwrap();
        assert_eq!(obj.kept_rows(), 1);
        let all = WindowView::dense(vec![1.0], vec![vec![0.0, 2.0]], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            win_rate_objective(&all, &make_schedule(0.0, 1).unwrap(), spec),
            Err(NlpError::Loss(LossError::AllDegenerate))
        ));
    }

    #[test]
    fn hit_objective_examples() {
        let w = WindowView::dense(vec![1.0, -1.0], vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![0.0, 0.0]).unwrap();
        let s = make_schedule(0.0, 2).unwrap();
        let obj = hit_rate_objective(&w, &s).unwrap();
        assert!((obj.value(0.0, &[0.5, 0.5]) - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);

        let w = WindowView::dense(vec![-1.0, -2.0], vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![0.0, 0.0]).unwrap();
        let obj = hit_rate_objective(&w, &s).unwrap();
        assert!(obj.value(-40.0, &[0.5, 0.5]) < 1e-12);

        let w = WindowView::dense(vec![1.0], vec![vec![0.0]], vec![0.0]).unwrap();
        let one = make_schedule(0.0, 1).unwrap();
        let obj = hit_rate_objective(&w, &one).unwrap();
        let v = obj.value(2.1972, &[1.0]);
        assert!((v - (1.0f64 + (-2.1972f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.1054).abs() < 1e-4);
    }

    #[test]
    fn hit_probability_examples() {
        let w = WindowView::dense(vec![0.0], vec![vec![0.0]], vec![0.0]).unwrap();
        let model = |w0: f64| {
            HitModel(WeightSolution {
                omega0: w0,
                omega: vec![1.0],
                lambda: 0.0,
                objective: 0.0,
                diagnostics: SolverDiagnostics::default(),
            })
        };
        assert_eq!(predict_hit_probability(&w, &model(0.0)).unwrap(), 0.5);
        assert_eq!(predict_hit_probability(&w, &model(1e6)).unwrap(), 1.0 - 1e-12);
        let p = predict_hit_probability(&w, &model(-1.3863)).unwrap();
        assert!((p - 0.2).abs() < 1e-5);
    }

    #[test]
    fn hit_fit_improves_on_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let w = random_window(&mut rng, 3, 12);
            let s = make_schedule(0.5, 12).unwrap();
            let obj = hit_rate_objective(&w, &s).unwrap();
            let fit = fit_hit_rate(&w, &s, &NlpOptions::default()).unwrap();
            assert!(fit.0.objective <= obj.value(0.0, &[1.0 / 3.0; 3]));
            assert!(fit.0.omega0.abs() <= HIT_OMEGA0_BOUND);
        }
    }

    mod props {
        use super::{
            fit_win_rate, hit_rate_objective, make_schedule, random_window, win_rate_objective,
            ChaCha8Rng, NlpOptions, SurrogateFamily, WindowView, WIN_OMEGA0_BOUND,
        };
        use proptest::prelude::*;
        use rand::{Rng as _, SeedableRng as _};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn win_fit_is_feasible_and_no_worse(seed in 0u64..100_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = rng.random_range(1..=4);
                let w = random_window(&mut rng, m, 12);
                let s = make_schedule(0.25, 12).unwrap();
                let fit = fit_win_rate(&w, &s, SurrogateFamily::Cauchy, 0.005, &NlpOptions::default()).unwrap();
                let obj = win_rate_objective(&w, &s, fit.spec).unwrap();
                let eq = vec![1.0 / m as f64; m];
                prop_assert!(fit.solution.objective <= obj.value(0.0, &eq) + 1e-15);
                prop_assert!(fit.solution.omega.iter().all(|&v| v >= 0.0));
                prop_assert!((fit.solution.omega.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
                prop_assert!(fit.solution.omega0.abs() <= WIN_OMEGA0_BOUND);
                let h = &fit.solution.diagnostics.best_history;
                prop_assert!(h.windows(2).all(|p| p[1] < p[0]));
            }

            #[test]
            fn hit_loss_falls_toward_label(seed in 0u64..100_000, t in 0usize..6, delta in 0.01f64..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = random_window(&mut rng, 2, 6);
                let s = make_schedule(0.5, 6).unwrap();
                let obj = hit_rate_objective(&w, &s).unwrap();
                let label = obj.labels()[t];
                // Shift only row t's forecasts so its log-odds move toward its label.
                let mut x = w.dense_x().unwrap();
                let dir = if label { delta } else { -delta };
                x[t].iter_mut().for_each(|v| *v += dir);
                let moved = WindowView::dense(w.y().to_vec(), x, vec![0.0; 2]).unwrap()
                    .with_consensus(w.consensus().to_vec(), 0.0).unwrap();
                let obj2 = hit_rate_objective(&moved, &s).unwrap();
                prop_assert!(obj2.value(0.1, &[0.4, 0.6]) < obj.value(0.1, &[0.4, 0.6]));
            }
        }
    }
}
