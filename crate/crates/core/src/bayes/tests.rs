use super::*;
use crate::discount::make_schedule;
use nalgebra::{Matrix3, Vector3};

fn small_window() -> WindowView {
    WindowView::new(
        vec![1.0, 1.4, 0.9, 1.7, 1.2],
        vec![
            vec![Some(0.9), Some(1.1)],
            vec![Some(1.3), None],
            vec![Some(1.0), Some(0.8)],
            vec![None, Some(1.6)],
            vec![Some(1.1), Some(1.3)],
        ],
        vec![1.2, 1.25],
    )
    .unwrap()
}

fn theta_for(window: &WindowView) -> ThetaDraw {
    let m = window.n_analysts();
    ThetaDraw {
        omega: vec![1.0 / m as f64; m],
        omega0: 0.1,
        lambda: 0.3,
        sigma2: 0.2,
        phi: vec![0.4; m],
        gamma: vec![1.0; m],
        sigma2_x: vec![0.1; m],
        imputed: vec![1.0; window.missing_count()],
    }
}

fn quick(seed: u64) -> BayesConfig {
    BayesConfig {
        burn_in: 300,
        keep: 500,
        seed,
        ..BayesConfig::default()
    }
}

fn normal_density(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// The y-likelihood part alone: full posterior minus the prior-only posterior.
fn y_part(theta: &ThetaDraw, window: &WindowView) -> f64 {
    let full = BayesConfig::default();
    let prior = BayesConfig {
        prior_only: true,
        ..BayesConfig::default()
    };
    log_posterior(theta, window, &full) - log_posterior(theta, window, &prior)
}

#[test]
fn log_weights_match_schedule() {
    for lambda in [0.0, 0.25, 1.0, 3.0] {
        let s = make_schedule(lambda, 12).unwrap();
        for (a, b) in log_discount_weights(lambda, 12).iter().zip(s.weights()) {
            assert!((a.exp() - b).abs() < 1e-14);
        }
    }
}

#[test]
fn lambda_outside_support_is_impossible() {
    let w = small_window();
    let config = BayesConfig::default();
    let mut theta = theta_for(&w);
    theta.lambda = 0.999;
    assert!(log_posterior(&theta, &w, &config).is_finite());
    theta.lambda = 1.001;
    assert_eq!(log_posterior(&theta, &w, &config), f64::NEG_INFINITY);
    theta.lambda = -0.001;
    assert_eq!(log_posterior(&theta, &w, &config), f64::NEG_INFINITY);
    let mut theta = theta_for(&w);
    theta.omega = vec![0.7, 0.4];
    assert_eq!(log_posterior(&theta, &w, &config), f64::NEG_INFINITY);
    let mut theta = theta_for(&w);
    theta.phi[1] = 1.0;
    assert_eq!(log_posterior(&theta, &w, &config), f64::NEG_INFINITY);
}

#[test]
fn single_observation_at_its_mean() {
    let x = [0.8, 1.6];
    let omega = vec![0.25, 0.75];
    let w = WindowView::dense(vec![2.0], vec![x.to_vec()], x.to_vec()).unwrap();
    let mut theta = theta_for(&w);
    theta.omega = omega.clone();
    theta.omega0 = 2.0 - (0.25 * 0.8 + 0.75 * 1.6);
    theta.sigma2 = 0.37;
    // One row means p_1 = 1.
    let expected = -0.5 * (2.0 * std::f64::consts::PI * 0.37).ln();
    assert!((y_part(&theta, &w) - expected).abs() < 1e-12);
}

#[test]
fn y_likelihood_matches_direct_density() {
    let w = small_window();
    let mut theta = theta_for(&w);
    theta.imputed = vec![1.2, 1.5];
    let x = [[0.9, 1.1], [1.3, 1.2], [1.0, 0.8], [1.5, 1.6], [1.1, 1.3]];
    let direct = |sigma2: f64| -> f64 {
        let p = make_schedule(theta.lambda, 5).unwrap();
        w.y()
            .iter()
            .enumerate()
            .map(|(t, y)| {
                let mu = theta.omega0 + theta.omega[0] * x[t][0] + theta.omega[1] * x[t][1];
                normal_density(*y, mu, sigma2 / p.weight(t)).ln()
            })
            .sum()
    };
    let base = y_part(&theta, &w);
    assert!((base - direct(0.2)).abs() < 1e-10);
    theta.sigma2 = 0.4;
    let doubled = y_part(&theta, &w);
    assert!(((doubled - base) - (direct(0.4) - direct(0.2))).abs() < 1e-10);
}

#[test]
fn fully_observed_window_imputes_nothing() {
    let w = WindowView::dense(vec![1.0, 2.0, 3.0], vec![vec![1.0, 1.1]; 3], vec![1.0, 1.0]).unwrap();
    assert!(missing_cells(&w).is_empty());
    let draws = sample_posterior(&w, &quick(1)).unwrap();
    assert!(draws.iter().all(|d| d.imputed.is_empty()));
}

#[test]
fn independent_case_conditional_is_ar_marginal() {
    let w = small_window();
    let config = BayesConfig::default();
    let mut s = Sampler::new(&w, &config, 0).unwrap();
    let mut theta = theta_for(&w);
    theta.phi = vec![0.0, 0.0];
    theta.omega = vec![1.0 - 1e-15, 1e-15];
    theta.gamma = vec![0.7, 1.3];
    theta.sigma2_x = vec![0.05, 0.08];
    s.set_state(theta).unwrap();
    let (mean, var) = s.imputation_conditional(1, 1);
    assert!((mean - 1.3).abs() < 1e-9);
    assert!((var - 0.08).abs() < 1e-9);
}

#[test]
fn interior_conditional_matches_gaussian_conditioning() {
    let w = small_window();
    let config = BayesConfig::default();
    let mut s = Sampler::new(&w, &config, 0).unwrap();
    let mut theta = theta_for(&w);
    theta.phi = vec![0.6, 0.7];
    theta.gamma = vec![1.0, 1.1];
    theta.sigma2_x = vec![0.05, 0.09];
    theta.omega = vec![0.35, 0.65];
    theta.omega0 = 0.05;
    theta.sigma2 = 0.03;
    theta.imputed = vec![1.25, 1.4];
    s.set_state(theta.clone()).unwrap();

    // Cell (1, 1): neighbours x[0][1] = 1.1 and x[2][1] = 0.8, row 1 has x[1][0] = 1.3.
    let (phi, gamma, s2x) = (0.7, 1.1, 0.09);
    let a = gamma + phi * (1.1 - gamma);
    let p = make_schedule(theta.lambda, 5).unwrap().weight(1);
    let (w0, w1) = (theta.omega[0], theta.omega[1]);
    let ey = theta.omega0 + w0 * 1.3 + w1 * a;
    // Joint of (x_t, x_{t+1}, y_t) given x_{t-1}.
    let cov = Matrix3::new(
        s2x,
        phi * s2x,
        w1 * s2x,
        phi * s2x,
        phi * phi * s2x + s2x,
        w1 * phi * s2x,
        w1 * s2x,
        w1 * phi * s2x,
        w1 * w1 * s2x + theta.sigma2 / p,
    );
    let mu = Vector3::new(a, gamma + phi * (a - gamma), ey);
    let obs = nalgebra::Vector2::new(0.8, w.y()[1]);
    let s12 = cov.fixed_view::<1, 2>(0, 1);
    let s22 = cov.fixed_view::<2, 2>(1, 1).into_owned();
    let inv = s22.try_inverse().unwrap();
    let mean = mu[0] + (s12 * inv * (obs - mu.fixed_rows::<2>(1)))[0];
    let var = cov[(0, 0)] - (s12 * inv * s12.transpose())[0];

    let (got_mean, got_var) = s.imputation_conditional(1, 1);
    assert!((got_mean - mean).abs() < 1e-10, "{got_mean} vs {mean}");
    assert!((got_var - var).abs() < 1e-12, "{got_var} vs {var}");

    // Without the regression row the answer lies between the two
    // neighbour-implied values.
    let prior = BayesConfig {
        prior_only: true,
        ..config
    };
    let mut s = Sampler::new(&w, &prior, 0).unwrap();
    s.set_state(theta).unwrap();
    let (m_ar, v_ar) = s.imputation_conditional(1, 1);
    let backward = gamma + (0.8 - gamma) / phi;
    assert!(m_ar > a.min(backward) && m_ar < a.max(backward));
    assert!((v_ar - s2x / (1.0 + phi * phi)).abs() < 1e-12);
}

#[test]
fn sigma2_gibbs_matches_inverse_gamma_moments() {
    // Enough rows for the inverse-gamma to have a finite fourth moment.
    let truth = ModelTruth {
        omega: vec![0.4, 0.6],
        omega0: 0.1,
        lambda: 0.1,
        sigma2: 0.05,
        phi: vec![0.5, 0.5],
        gamma: vec![1.0, 1.2],
        sigma2_x: vec![0.1, 0.1],
    };
    let w = simulate(&truth, 30, 0.1, 21).unwrap().window;
    let config = BayesConfig::default();
    let mut s = Sampler::new(&w, &config, 0).unwrap();
    let theta = ThetaDraw {
        imputed: vec![1.1; w.missing_count()],
        ..theta_for(&w)
    };
    s.set_state(theta.clone()).unwrap();
    s.set_frozen(Frozen::all_but_sigma2());
    let x = complete_grid(&w, &theta.imputed);
    let p = make_schedule(theta.lambda, 30).unwrap();
    let ss: f64 = (0..30)
        .map(|t| {
            let r = w.y()[t] - theta.omega0 - theta.omega[0] * x[t][0] - theta.omega[1] * x[t][1];
            p.weight(t) * r * r
        })
        .sum();
    let shape = 0.1 + 15.0;
    let rate = 0.1 + 0.5 * ss;
    let mean = rate / (shape - 1.0);
    let var = rate * rate / ((shape - 1.0).powi(2) * (shape - 2.0));
    let n = 50_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            s.sweep(false);
            s.state().sigma2
        })
        .collect();
    let m = draws.iter().sum::<f64>() / n as f64;
    let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((m / mean - 1.0).abs() < 0.02, "{m} vs {mean}");
    assert!((v / var - 1.0).abs() < 0.10, "{v} vs {var}");
    assert_eq!(s.state().omega, theta.omega);
}

#[test]
fn prior_only_recovers_symmetric_weights_and_uniform_lambda() {
    let w = small_window();
    let config = BayesConfig {
        prior_only: true,
        burn_in: 1000,
        keep: 8000,
        seed: 5,
        ..BayesConfig::default()
    };
    let draws = sample_posterior(&w, &config).unwrap();
    let n = draws.len() as f64;
    for j in 0..2 {
        let mean = draws.iter().map(|d| d.omega[j]).sum::<f64>() / n;
        assert!((mean - 0.5).abs() < 0.03, "omega_{j} {mean}");
    }
    let lam: Vec<f64> = draws.iter().map(|d| d.lambda).collect();
    let mean = lam.iter().sum::<f64>() / n;
    let var = lam.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!((mean - 0.5).abs() < 0.03, "{mean}");
    assert!((var - 1.0 / 12.0).abs() < 0.01, "{var}");
}

#[test]
fn runs_are_deterministic_and_respect_support() {
    let w = small_window();
    let a = sample_posterior(&w, &quick(11)).unwrap();
    let b = sample_posterior(&w, &quick(11)).unwrap();
    assert_eq!(a, b);
    let c = sample_posterior(&w, &quick(12)).unwrap();
    assert_ne!(a.chains, c.chains);
    assert_eq!(a.len(), 2 * 500);
    assert_eq!(a.predictive.len(), a.len());
    for d in a.iter() {
        assert!((d.omega.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        assert!(d.omega.iter().all(|v| *v > 0.0));
        assert!(d.lambda > 0.0 && d.lambda < 1.0);
        assert!(d.sigma2 > 0.0 && d.sigma2_x.iter().all(|v| *v > 0.0));
        assert!(d.phi.iter().all(|v| *v > -1.0 && *v < 1.0));
        assert!(log_posterior(d, &w, &quick(11)).is_finite());
    }
}

#[test]
fn degenerate_posterior_predicts_its_mean() {
    let d = ThetaDraw {
        omega: vec![0.3, 0.7],
        omega0: 0.2,
        lambda: 0.5,
        sigma2: 0.0,
        phi: vec![0.0; 2],
        gamma: vec![0.0; 2],
        sigma2_x: vec![1.0; 2],
        imputed: vec![],
    };
    let draws = PosteriorDraws {
        chains: vec![vec![d.clone(); 10]],
        predictive: vec![],
        acceptance: vec![],
        missing: vec![],
        n_analysts: 2,
    };
    let target = [1.0, 2.0];
    for v in predictive_draws(&draws, &target, 3) {
        assert!((v - (0.2 + 0.3 + 1.4)).abs() < 1e-15);
    }
}

#[test]
fn predictive_mean_matches_mean_of_regression_means() {
    let w = small_window();
    let draws = sample_posterior(&w, &quick(4)).unwrap();
    let mus: Vec<f64> = draws
        .iter()
        .map(|d| d.omega0 + d.omega.iter().zip(w.target_x()).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let s = mus.len() as f64;
    let target = mus.iter().sum::<f64>() / s;
    let sd = (draws.iter().map(|d| d.sigma2).sum::<f64>() / s).sqrt();
    assert!((draws.point_forecast() - target).abs() < 3.0 * sd / s.sqrt());
    assert!(draws.predictive_quantile(0.025) < draws.point_forecast());
    assert!(draws.predictive_quantile(0.975) > draws.point_forecast());
}

#[test]
fn simulate_masks_and_keeps_columns() {
    let truth = ModelTruth {
        omega: vec![0.2, 0.3, 0.5],
        omega0: 0.1,
        lambda: 0.05,
        sigma2: 0.01,
        phi: vec![0.5, 0.9, 0.0],
        gamma: vec![1.0, 2.0, 3.0],
        sigma2_x: vec![0.1, 0.2, 0.3],
    };
    let sim = simulate(&truth, 40, 0.2, 9).unwrap();
    assert_eq!(sim.window.len(), 40);
    assert_eq!(sim.x_full.len(), 41);
    assert!(sim.window.missing_count() > 0);
    for (t, row) in sim.window.x().iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if let Some(v) = v {
                assert_eq!(*v, sim.x_full[t][j]);
            }
        }
    }
    let again = simulate(&truth, 40, 0.2, 9).unwrap();
    assert_eq!(again.x_full, sim.x_full);
}

#[test]
fn diagnostics_flag_stuck_and_accept_duplicates() {
    let w = small_window();
    let draws = sample_posterior(&w, &quick(2)).unwrap();
    let dup = PosteriorDraws {
        chains: vec![draws.chains[0].clone(), draws.chains[0].clone()],
        ..draws.clone()
    };
    let report = diagnostics(&dup);
    for p in &report.params {
        if let Some(r) = p.rhat {
            assert!(r <= 1.0 + 1e-6, "{} {r}", p.name);
        }
    }
    let mut frozen = draws.clone();
    for chain in frozen.chains.iter_mut() {
        for d in chain.iter_mut() {
            d.lambda = 0.5;
        }
    }
    let report = diagnostics(&frozen);
    let lam = report.get("lambda").unwrap();
    assert!(lam.stuck && lam.flagged && lam.ess.is_none());

    let single = PosteriorDraws {
        chains: vec![draws.chains[0].clone()],
        ..draws
    };
    let report = diagnostics(&single);
    assert!(report.params.iter().all(|p| p.rhat.is_none() && p.split_rhat.is_none()));
    assert!(report.get("omega0").unwrap().ess.is_some());
}

#[test]
fn export_and_histogram() {
    let w = small_window();
    let draws = sample_posterior(&w, &quick(3)).unwrap();
    let mut buf = Vec::new();
    write_draws_csv(&draws, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "chain,draw,omega_1,omega_2,omega0,lambda,sigma2,phi_1,phi_2,gamma_1,gamma_2,sigma2_1,sigma2_2"
    );
    assert_eq!(lines.count(), draws.len());
    let hist = lambda_histogram(&draws, 20, (0.0, 1.0));
    assert_eq!(hist.len(), 20);
    assert_eq!(hist.iter().map(|b| b.count).sum::<usize>(), draws.len());
}

#[test]
fn bad_config_is_rejected() {
    let w = small_window();
    let config = BayesConfig {
        alpha: Some(vec![1.0]),
        ..quick(0)
    };
    assert!(matches!(sample_posterior(&w, &config), Err(BayesError::Config(_))));
    let config = BayesConfig {
        lambda_bounds: (0.5, 0.2),
        ..quick(0)
    };
    assert!(sample_posterior(&w, &config).is_err());
}
