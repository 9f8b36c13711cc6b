use rustfft::{num_complex::Complex, FftPlanner};

use super::PosteriorDraws;

/// Split-R̂ above this marks a parameter as unconverged.
pub const RHAT_THRESHOLD: f64 = 1.05;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDiagnostic {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Classic potential scale reduction; `None` for a single chain or zero
    /// within-chain variance.
    pub rhat: Option<f64>,
    pub split_rhat: Option<f64>,
    /// `None` when every chain is constant.
    pub ess: Option<f64>,
    pub stuck: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticReport {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub params: Vec<ParamDiagnostic>,
}

impl DiagnosticReport {
    pub fn any_flagged(&self) -> bool {
        self.params.iter().any(|p| p.flagged)
    }

    pub fn max_split_rhat(&self) -> Option<f64> {
        self.params.iter().filter_map(|p| p.split_rhat).reduce(f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&ParamDiagnostic> {
        self.params.iter().find(|p| p.name == name)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let mu = mean(v);
    v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Gelman–Rubin R̂ over equal-length chains.
pub fn rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min()?;
    if m < 2 || n < 2 {
        return None;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| sample_var(c)).sum::<f64>() / m as f64;
    if !(w > 0.0) {
        return None;
    }
    let b_over_n = sample_var(&means);
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    Some((var_plus / w).sqrt())
}

/// R̂ after splitting every chain into its first and second halves.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains.iter().map(Vec::len).min()?;
    let half = n / 2;
    if half < 2 {
        return None;
    }
    let halves: Vec<Vec<f64>> = chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..n].to_vec()])
        .collect();
    rhat(&halves)
}

/// Biased autocovariance at every lag, via zero-padded FFT.
fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let size = (2 * n).next_power_of_two();
    let mu = mean(x);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - mu, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    buf[..n].iter().map(|c| c.re / (size as f64 * n as f64)).collect()
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence
/// truncation.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min()?;
    if m == 0 || n < 4 {
        return None;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c)).collect();
    let nf = n as f64;
    let mean_acov = |t: usize| acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
    let w = mean_acov(0) * nf / (nf - 1.0);
    if !(w > 0.0) {
        return None;
    }
    let mut var_plus = w * (nf - 1.0) / nf;
    if m > 1 {
        let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
        var_plus += sample_var(&means);
    }
    let rho_at = |t: usize| 1.0 - (w - mean_acov(t)) / var_plus;

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho_at(1);
    rho[1] = odd;
    let mut t = 0;
    while t + 5 < n && (even + odd) > 0.0 {
        t += 2;
        even = rho_at(t);
        odd = rho_at(t + 1);
        if even + odd >= 0.0 {
            rho[t] = even;
            rho[t + 1] = odd;
        }
    }
    let max_t = t;
    if even > 0.0 && max_t + 1 < n {
        rho[max_t + 1] = even;
    }
    // Enforce a non-increasing sequence of paired sums.
    let mut k = 1;
    while k + 2 <= max_t {
        let prev = rho[k - 1] + rho[k];
        if rho[k + 1] + rho[k + 2] > prev {
            rho[k + 1] = prev / 2.0;
            rho[k + 2] = prev / 2.0;
        }
        k += 2;
    }
    let total = (m * n) as f64;
    let tail = if max_t + 1 < n { rho[max_t + 1] } else { 0.0 };
    let tau = (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + tail).max(1.0 / total.log10());
    Some(total / tau)
}

/// Per-parameter R̂, split-R̂ and ESS over every scalar in the draws.
pub fn diagnostics(draws: &PosteriorDraws) -> DiagnosticReport {
    let names = draws.parameter_names();
    let traces = draws.parameter_traces();
    let params = names
        .into_iter()
        .zip(traces)
        .map(|(name, chains)| {
            let all: Vec<f64> = chains.iter().flatten().copied().collect();
            let mu = mean(&all);
            let sd = if all.len() > 1 { sample_var(&all).sqrt() } else { 0.0 };
            let stuck = chains.iter().all(|c| c.iter().all(|v| *v == c[0]));
            let (r, sr) = if chains.len() >= 2 {
                (rhat(&chains), split_rhat(&chains))
            } else {
                (None, None)
            };
            let ess = if stuck { None } else { effective_sample_size(&chains) };
            let flagged = stuck || sr.is_some_and(|v| v > RHAT_THRESHOLD);
            ParamDiagnostic {
                name,
                mean: mu,
                sd,
                rhat: r,
                split_rhat: sr,
                ess,
                stuck,
                flagged,
            }
        })
        .collect();
    DiagnosticReport {
        chains: draws.chains.len(),
        draws_per_chain: draws.chains.first().map_or(0, Vec::len),
        params,
    }
}
