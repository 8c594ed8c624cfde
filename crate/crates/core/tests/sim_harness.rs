use dcssl::augment::SslConfig;
use dcssl::sim::{generate, percentiles_tau, percentiles_tau_with_size, run_mc, CovariateDesign, SimConfig};
use dcssl::TransformParam;
use statrs::distribution::{ContinuousCDF, Normal};

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

fn big(r: f64, r_star: f64) -> SimConfig {
    SimConfig {
        n: 20_000,
        n_mult: 4,
        r: TransformParam::new(r).unwrap(),
        r_star: TransformParam::new(r_star).unwrap(),
        ..SimConfig::default()
    }
}

#[test]
fn censoring_fractions_are_near_the_window_percentiles() {
    for (r, rs) in [(0.0, 0.0), (1.0, 1.0)] {
        let cfg = big(r, rs);
        let g = generate(&cfg, 0).unwrap();
        let n = g.latent.len() as f64;
        let mut left = 0.0;
        let mut right = 0.0;
        for (lat, rec) in g.latent.iter().zip(g.cohort.records()) {
            if lat.t < rec.l {
                left += 1.0;
            } else if lat.t > rec.u {
                right += 1.0;
            }
        }
        let (fl, fr) = (left / n, right / n);
        assert!((fl - 0.20).abs() < 0.02, "r = {r}: left fraction {fl}");
        // U is uniform around τ_r and the upper tail of T is convex there, so
        // P(T > U) sits slightly above 0.20 (about 0.221 when r = 0)
        assert!((fr - 0.20).abs() < 0.025, "r = {r}: right fraction {fr}");
    }
}

#[test]
fn copula_scores_have_the_target_correlation_and_invert_the_times() {
    let std = Normal::standard();
    for (r, rs) in [(0.0, 1.0), (1.0, 0.0)] {
        let cfg = big(r, rs);
        let g = generate(&cfg, 1).unwrap();
        let w: Vec<f64> = g.latent.iter().map(|l| l.w).collect();
        let ws: Vec<f64> = g.latent.iter().map(|l| l.w_star).collect();
        let c = corr(&w, &ws);
        assert!((c - 0.85).abs() < 0.03, "copula correlation {c}");
        // T = scale·exp(−β'Z + ε) with P(ε > e) = exp(−G(e^e)); invert back to w
        let tp = cfg.r;
        for (lat, rec) in g.latent.iter().zip(g.cohort.records()).take(2000) {
            let lin: f64 = cfg.beta_true.iter().zip(&rec.z).map(|(b, z)| b * z).sum();
            let eps = (lat.t / cfg.time_scale).ln() + lin;
            let u = (-tp.g(eps.exp()).unwrap()).exp();
            let w_back = std.inverse_cdf(u);
            assert!((w_back - lat.w).abs() < 1e-6 * lat.w.abs().max(1.0), "{w_back} vs {}", lat.w);
        }
    }
}

#[test]
fn covariate_correlation_and_mixed_design() {
    let cfg = big(0.0, 0.0);
    let g = generate(&cfg, 2).unwrap();
    let z1: Vec<f64> = g.cohort.records().iter().map(|r| r.z[0]).collect();
    let z2: Vec<f64> = g.cohort.records().iter().map(|r| r.z[1]).collect();
    let c = corr(&z1, &z2);
    assert!((c - 0.30).abs() < 0.02, "covariate correlation {c}");

    let cfg = SimConfig {
        beta_true: vec![0.5, -0.3, 0.4],
        gamma_true: vec![-0.3, 0.7, 0.2],
        design: CovariateDesign::Mixed { binary_probs: vec![0.3, 0.6] },
        ..big(0.0, 0.0)
    };
    let g = generate(&cfg, 3).unwrap();
    let n = g.cohort.len() as f64;
    for (j, q) in [(1, 0.3), (2, 0.6)] {
        assert!(g.cohort.records().iter().all(|r| r.z[j] == 0.0 || r.z[j] == 1.0));
        let frac = g.cohort.records().iter().map(|r| r.z[j]).sum::<f64>() / n;
        assert!((frac - q).abs() < 0.01, "indicator {j}: mean {frac}");
    }
}

#[test]
fn tau_matches_closed_form_quantiles_without_covariate_effects() {
    // with β = 0, T = scale · G⁻¹(E, r), E ~ Exp(1)
    for r in [0.0, 1.0] {
        let tp = TransformParam::new(r).unwrap();
        let cfg = SimConfig {
            r: tp,
            beta_true: vec![0.0, 0.0],
            ..SimConfig::default()
        };
        let (lo, hi) = percentiles_tau(&cfg).unwrap();
        for (q, got) in [(cfg.cens_lo, lo), (cfg.cens_hi, hi)] {
            let exact = cfg.time_scale * tp.g_inv(-(1.0 - q).ln()).unwrap();
            assert!((got / exact - 1.0).abs() < 0.005, "r = {r}, q = {q}: {got} vs {exact}");
        }
    }
}

#[test]
fn pilot_quantiles_are_stable_in_the_pilot_size() {
    let cfg = SimConfig::default();
    let (a_lo, a_hi) = percentiles_tau_with_size(&cfg, 1_000_000).unwrap();
    let (b_lo, b_hi) = percentiles_tau_with_size(&cfg, 2_000_000).unwrap();
    assert!((a_lo / b_lo - 1.0).abs() < 0.002);
    assert!((a_hi / b_hi - 1.0).abs() < 0.002);
}

#[test]
fn window_resampling_is_rare_and_windows_are_ordered() {
    let g = generate(&SimConfig::default(), 4).unwrap();
    assert!(g.cohort.records().iter().all(|r| r.l < r.u));
    assert!(g.resampled_windows < g.cohort.len() / 100);
}

#[test]
fn monte_carlo_is_identical_across_pool_sizes() {
    let cfg = SimConfig { n: 80, n_mult: 2, reps: 6, ..SimConfig::default() };
    let ssl = SslConfig::default();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_mc(&cfg, &ssl).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.summary.to_csv(), b.summary.to_csv());
    assert_eq!(serde_json::to_string(&a.records).unwrap(), serde_json::to_string(&b.records).unwrap());
    for (x, y) in a.summary.rows.iter().zip(&b.summary.rows) {
        assert_eq!(x.bias.to_bits(), y.bias.to_bits());
        assert_eq!(x.ese.to_bits(), y.ese.to_bits());
    }
}

#[test]
fn single_replication_reports_nan_sd() {
    let cfg = SimConfig { n: 80, n_mult: 2, reps: 1, ..SimConfig::default() };
    let run = run_mc(&cfg, &SslConfig::default()).unwrap();
    assert!(run.summary.rows.iter().all(|r| r.se.is_nan()));
    assert!(run.summary.to_csv().contains("NaN"));
}
