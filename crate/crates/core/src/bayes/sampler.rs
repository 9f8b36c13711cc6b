use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    ar_loglik, column_means, complete_grid, inv_gamma_sample, log_discount_weights, missing_cells, y_loglik,
    BayesConfig, BayesError, ThetaDraw,
};
use crate::panel::WindowView;

const TARGET_ACCEPTANCE: f64 = 0.35;

/// Blocks held fixed by [`Sampler::sweep`]. Everything is free by default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Frozen {
    pub omega: bool,
    pub omega0: bool,
    pub lambda: bool,
    pub sigma2: bool,
    pub phi: bool,
    pub gamma: bool,
    pub sigma2_x: bool,
    pub imputed: bool,
}

impl Frozen {
    /// Everything fixed except `σ²`.
    pub fn all_but_sigma2() -> Self {
        Self {
            omega: true,
            omega0: true,
            lambda: true,
            sigma2: false,
            phi: true,
            gamma: true,
            sigma2_x: true,
            imputed: true,
        }
    }
}

/// Post-burn-in Metropolis acceptance fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptanceRates {
    pub omega: f64,
    pub lambda: f64,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct Adaptive {
    log_scale: f64,
    proposed: u64,
    accepted: u64,
    adapt_steps: u64,
}

impl Adaptive {
    fn new(scale: f64) -> Self {
        Self {
            log_scale: scale.ln(),
            ..Self::default()
        }
    }

    fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn record(&mut self, accepted: bool, adapt: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
        if adapt {
            self.adapt_steps += 1;
            let step = (self.adapt_steps as f64).powf(-0.6);
            let a = if accepted { 1.0 } else { 0.0 };
            self.log_scale = (self.log_scale + step * (a - TARGET_ACCEPTANCE)).clamp(-12.0, 3.0);
        }
    }

    fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn reset(&mut self) {
        self.proposed = 0;
        self.accepted = 0;
    }
}

/// Single-chain Metropolis-within-Gibbs state.
///
/// Each update is public so tests can drive one block at a time.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: BayesConfig,
    alpha: Vec<f64>,
    y: Vec<f64>,
    /// Current completed forecast grid.
    x: Vec<Vec<f64>>,
    missing: Vec<(usize, usize)>,
    xbar: Vec<f64>,
    log_p: Vec<f64>,
    p: Vec<f64>,
    state: ThetaDraw,
    frozen: Frozen,
    rng: ChaCha8Rng,
    omega_step: Adaptive,
    lambda_step: Adaptive,
    phi_step: Vec<Adaptive>,
}

impl Sampler {
    /// Chain `chain` of the run described by `config`, started from a
    /// dispersed but data-informed point.
    pub fn new(window: &WindowView, config: &BayesConfig, chain: usize) -> Result<Self, BayesError> {
        let m = window.n_analysts();
        let l = window.len();
        config.validate(m)?;
        let xbar = column_means(window)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(chain as u64);

        let missing = missing_cells(window);
        let imputed: Vec<f64> = missing
            .iter()
            .map(|&(t, j)| {
                let obs: Vec<f64> = window.x()[t].iter().flatten().copied().collect();
                if obs.is_empty() {
                    xbar[j]
                } else {
                    obs.iter().sum::<f64>() / obs.len() as f64
                }
            })
            .collect();
        let x = complete_grid(window, &imputed);

        let (c0, d0) = config.lambda_bounds;
        let lambda = c0 + (d0 - c0) * (0.05 + 0.9 * rng.random::<f64>());
        let omega = vec![1.0 / m as f64; m];
        let log_p = log_discount_weights(lambda, l);
        let p: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
        let fitted: Vec<f64> = x.iter().map(|r| dot(r, &omega)).collect();
        let omega0 = window.y().iter().zip(&fitted).zip(&p).map(|((y, f), p)| p * (y - f)).sum::<f64>();
        let sigma2 = window
            .y()
            .iter()
            .zip(&fitted)
            .zip(&p)
            .map(|((y, f), p)| p * (y - f - omega0).powi(2))
            .sum::<f64>()
            .max(1e-6);
        let sigma2_x = (0..m)
            .map(|j| {
                let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
                let mu = col.iter().sum::<f64>() / l as f64;
                (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / l as f64).max(1e-6)
            })
            .collect();
        let state = ThetaDraw {
            omega,
            omega0,
            lambda,
            sigma2,
            phi: vec![0.0; m],
            gamma: xbar.clone(),
            sigma2_x,
            imputed,
        };
        Ok(Self {
            config: config.clone(),
            alpha: config.alpha.clone().unwrap_or_else(|| vec![1.0; m]),
            y: window.y().to_vec(),
            x,
            missing,
            xbar,
            log_p,
            p,
            state,
            frozen: Frozen::default(),
            rng,
            omega_step: Adaptive::new(0.5 / (m as f64).sqrt()),
            lambda_step: Adaptive::new(0.1 * (d0 - c0)),
            phi_step: vec![Adaptive::new(0.2); m],
        })
    }

    pub fn state(&self) -> &ThetaDraw {
        &self.state
    }

    /// Replaces the current state. The imputed values are written into the
    /// forecast grid.
    pub fn set_state(&mut self, theta: ThetaDraw) -> Result<(), BayesError> {
        let m = self.xbar.len();
        if theta.omega.len() != m
            || theta.phi.len() != m
            || theta.gamma.len() != m
            || theta.sigma2_x.len() != m
            || theta.imputed.len() != self.missing.len()
        {
            return Err(BayesError::Config("state has the wrong dimensions".into()));
        }
        for (&(t, j), v) in self.missing.iter().zip(&theta.imputed) {
            self.x[t][j] = *v;
        }
        self.state = theta;
        self.refresh_weights();
        Ok(())
    }

    pub fn set_frozen(&mut self, frozen: Frozen) {
        self.frozen = frozen;
    }

    pub fn acceptance(&self) -> AcceptanceRates {
        AcceptanceRates {
            omega: self.omega_step.rate(),
            lambda: self.lambda_step.rate(),
            phi: self.phi_step.iter().map(Adaptive::rate).collect(),
        }
    }

    pub fn reset_acceptance(&mut self) {
        self.omega_step.reset();
        self.lambda_step.reset();
        self.phi_step.iter_mut().for_each(Adaptive::reset);
    }

    /// One full sweep over every non-frozen block. Proposal scales adapt only
    /// when `adapt` is set.
    pub fn sweep(&mut self, adapt: bool) {
        let f = self.frozen;
        if !f.imputed {
            self.update_missing();
        }
        if !f.gamma {
            self.update_gamma();
        }
        if !f.sigma2_x {
            self.update_sigma2_x();
        }
        if !f.phi {
            self.update_phi(adapt);
        }
        if !f.sigma2 {
            self.update_sigma2();
        }
        if !f.omega0 {
            self.update_omega0();
        }
        if !f.omega {
            self.update_omega(adapt);
        }
        if !f.lambda {
            self.update_lambda(adapt);
        }
    }

    fn refresh_weights(&mut self) {
        self.log_p = log_discount_weights(self.state.lambda, self.y.len());
        self.p = self.log_p.iter().map(|v| v.exp()).collect();
    }

    fn use_y(&self) -> bool {
        !self.config.prior_only
    }

    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    fn residuals(&self) -> Vec<f64> {
        self.y
            .iter()
            .zip(&self.x)
            .map(|(y, r)| y - self.state.omega0 - dot(r, &self.state.omega))
            .collect()
    }

    /// Conjugate inverse-gamma draw of the regression variance.
    pub fn update_sigma2(&mut self) {
        let (mut shape, mut rate) = self.config.sigma2_prior;
        if self.use_y() {
            let ss: f64 = self.residuals().iter().zip(&self.p).map(|(r, p)| p * r * r).sum();
            shape += 0.5 * self.y.len() as f64;
            rate += 0.5 * ss;
        }
        self.state.sigma2 = inv_gamma_sample(&mut self.rng, shape, rate);
    }

    /// Conjugate normal draw of the intercept.
    pub fn update_omega0(&mut self) {
        let mut prec = 1.0 / self.config.omega0_var;
        let mut prec_mean = 0.0;
        if self.use_y() {
            let s2 = self.state.sigma2;
            for ((y, r), p) in self.y.iter().zip(&self.x).zip(&self.p) {
                prec += p / s2;
                prec_mean += p * (y - dot(r, &self.state.omega)) / s2;
            }
        }
        let z = self.normal();
        self.state.omega0 = prec_mean / prec + z / prec.sqrt();
    }

    fn omega_target(&self, omega0: f64, omega: &[f64]) -> f64 {
        let mut lp = omega
            .iter()
            .zip(&self.alpha)
            .map(|(w, a)| (a - 1.0) * w.ln())
            .sum::<f64>()
            - 0.5 * omega0 * omega0 / self.config.omega0_var;
        if self.use_y() {
            lp += y_loglik(&self.y, &self.x, &self.log_p, omega0, omega, self.state.sigma2);
        }
        lp
    }

    /// Random walk on additive-log-ratio coordinates of `ω`, paired with an
    /// intercept shift that keeps the discounted fitted mean in place. The
    /// pair is an involution with unit Jacobian in `ω₀`, so only the
    /// simplex Jacobian `Π ω_j` enters the ratio.
    pub fn update_omega(&mut self, adapt: bool) {
        let m = self.state.omega.len();
        if m < 2 {
            return;
        }
        let s = self.omega_step.scale();
        let last = self.state.omega[m - 1];
        let mut z: Vec<f64> = self.state.omega[..m - 1].iter().map(|w| (w / last).ln()).collect();
        for v in z.iter_mut() {
            *v += s * self.normal();
        }
        let Some(proposal) = alr_inverse(&z) else {
            self.omega_step.record(false, adapt);
            return;
        };
        let xbar_w: Vec<f64> = (0..m)
            .map(|j| self.x.iter().zip(&self.p).map(|(r, p)| p * r[j]).sum())
            .collect();
        let shift: f64 = proposal
            .iter()
            .zip(&self.state.omega)
            .zip(&xbar_w)
            .map(|((a, b), x)| (a - b) * x)
            .sum();
        let omega0 = self.state.omega0 - shift;
        let log_jac = |w: &[f64]| w.iter().map(|v| v.ln()).sum::<f64>();
        let log_ratio = self.omega_target(omega0, &proposal) + log_jac(&proposal)
            - self.omega_target(self.state.omega0, &self.state.omega)
            - log_jac(&self.state.omega);
        let accepted = self.accept(log_ratio);
        if accepted {
            self.state.omega = proposal;
            self.state.omega0 = omega0;
        }
        self.omega_step.record(accepted, adapt);
    }

    /// Reflected random walk on the discount factor.
    pub fn update_lambda(&mut self, adapt: bool) {
        let (c0, d0) = self.config.lambda_bounds;
        let step = self.lambda_step.scale() * self.normal();
        let proposal = reflect(self.state.lambda + step, c0, d0);
        if !(proposal > c0 && proposal < d0) {
            self.lambda_step.record(false, adapt);
            return;
        }
        let accepted = if self.use_y() {
            let new_log_p = log_discount_weights(proposal, self.y.len());
            let (o0, w, s2) = (self.state.omega0, &self.state.omega, self.state.sigma2);
            let log_ratio =
                y_loglik(&self.y, &self.x, &new_log_p, o0, w, s2) - y_loglik(&self.y, &self.x, &self.log_p, o0, w, s2);
            self.accept(log_ratio)
        } else {
            true
        };
        if accepted {
            self.state.lambda = proposal;
            self.refresh_weights();
        }
        self.lambda_step.record(accepted, adapt);
    }

    fn column_ar(&self, j: usize, phi: f64) -> f64 {
        ar_loglik(self.x.iter().map(|r| r[j]), phi, self.state.gamma[j], self.state.sigma2_x[j])
    }

    /// Reflected random walk on each AR coefficient.
    pub fn update_phi(&mut self, adapt: bool) {
        let (e0, f0) = self.config.phi_bounds;
        for j in 0..self.state.phi.len() {
            let step = self.phi_step[j].scale() * self.normal();
            let proposal = reflect(self.state.phi[j] + step, e0, f0);
            let accepted = proposal > e0
                && proposal < f0
                && self.accept(self.column_ar(j, proposal) - self.column_ar(j, self.state.phi[j]));
            if accepted {
                self.state.phi[j] = proposal;
            }
            self.phi_step[j].record(accepted, adapt);
        }
    }

    /// Conjugate normal draw of each analyst mean.
    pub fn update_gamma(&mut self) {
        let l = self.x.len();
        for j in 0..self.state.gamma.len() {
            let phi = self.state.phi[j];
            let s2 = self.state.sigma2_x[j];
            let innov: f64 = (1..l).map(|t| self.x[t][j] - phi * self.x[t - 1][j]).sum();
            let prec = 1.0 / self.config.gamma_var + (1.0 + (l - 1) as f64 * (1.0 - phi).powi(2)) / s2;
            let prec_mean = self.xbar[j] / self.config.gamma_var + (self.x[0][j] + (1.0 - phi) * innov) / s2;
            let z = self.normal();
            self.state.gamma[j] = prec_mean / prec + z / prec.sqrt();
        }
    }

    /// Conjugate inverse-gamma draw of each AR innovation variance.
    pub fn update_sigma2_x(&mut self) {
        let l = self.x.len();
        let (g0, h0) = self.config.sigma2_x_prior;
        for j in 0..self.state.sigma2_x.len() {
            let (phi, gamma) = (self.state.phi[j], self.state.gamma[j]);
            let mut ss = (self.x[0][j] - gamma).powi(2);
            for t in 1..l {
                ss += (self.x[t][j] - gamma - phi * (self.x[t - 1][j] - gamma)).powi(2);
            }
            self.state.sigma2_x[j] = inv_gamma_sample(&mut self.rng, g0 + 0.5 * l as f64, h0 + 0.5 * ss);
        }
    }

    /// Mean and variance of the full conditional of forecast cell `(t, j)`
    /// given every other unknown.
    pub fn imputation_conditional(&self, t: usize, j: usize) -> (f64, f64) {
        let (phi, gamma, s2x) = (self.state.phi[j], self.state.gamma[j], self.state.sigma2_x[j]);
        let prior_mean = if t == 0 {
            gamma
        } else {
            gamma + phi * (self.x[t - 1][j] - gamma)
        };
        let mut prec = 1.0 / s2x;
        let mut prec_mean = prior_mean / s2x;
        if t + 1 < self.x.len() {
            prec += phi * phi / s2x;
            prec_mean += phi * (self.x[t + 1][j] - gamma * (1.0 - phi)) / s2x;
        }
        if self.use_y() {
            let w = self.state.omega[j];
            let others: f64 = self.x[t]
                .iter()
                .zip(&self.state.omega)
                .enumerate()
                .filter(|(k, _)| *k != j)
                .map(|(_, (a, b))| a * b)
                .sum();
            let r = self.y[t] - self.state.omega0 - others;
            prec += w * w * self.p[t] / self.state.sigma2;
            prec_mean += w * self.p[t] * r / self.state.sigma2;
        }
        (prec_mean / prec, 1.0 / prec)
    }

    /// Gibbs draw of every missing forecast in row-major order.
    pub fn update_missing(&mut self) {
        for k in 0..self.missing.len() {
            let (t, j) = self.missing[k];
            let (mean, var) = self.imputation_conditional(t, j);
            let z = self.normal();
            let v = mean + var.sqrt() * z;
            self.x[t][j] = v;
            self.state.imputed[k] = v;
        }
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        if log_ratio.is_nan() {
            return false;
        }
        log_ratio >= 0.0 || self.rng.random::<f64>().ln() < log_ratio
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maps additive-log-ratio coordinates (last component as reference) back to
/// the simplex. `None` if a component underflows to zero.
fn alr_inverse(z: &[f64]) -> Option<Vec<f64>> {
    let shift = z.iter().copied().fold(0.0_f64, f64::max);
    let mut w: Vec<f64> = z.iter().map(|v| (v - shift).exp()).collect();
    w.push((-shift).exp());
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    if w.iter().all(|v| *v > 0.0) {
        Some(w)
    } else {
        None
    }
}

/// Folds `v` back into `[a, b]` by mirror reflection at the ends.
pub(crate) fn reflect(v: f64, a: f64, b: f64) -> f64 {
    if !v.is_finite() {
        return f64::NAN;
    }
    let width = b - a;
    let y = (v - a).rem_euclid(2.0 * width);
    if y > width {
        a + 2.0 * width - y
    } else {
        a + y
    }
}
