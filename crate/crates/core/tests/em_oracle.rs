mod common;

use common::*;
use dcssl::em::{e_step, event_grid, fit_em, fit_em_from, m_step_beta, m_step_lambda, observed_loglik, EmOptions, JumpGrid};
use dcssl::{CensoringCode, EventData, TransformParam};
use rand::Rng;

use CensoringCode::*;

fn five_subjects() -> EventData {
    EventData::new(
        vec![0.8, 1.6, 0.5, 2.4, 1.2],
        vec![Exact, Exact, Left, Right, Left],
        vec![0.3, -0.5, 1.2, 0.1, -0.8, 0.4, 0.0, -1.0, 0.9, 0.6],
        2,
        None,
    )
    .unwrap()
}

fn check_e_step(data: &EventData, beta: &[f64], grid: &JumpGrid, r: f64) -> f64 {
    let cache = e_step(data, beta, grid, TransformParam::new(r).unwrap()).unwrap();
    let en = cache.en_matrix();
    let mut worst = 0.0f64;
    for i in 0..data.len() {
        let lin: f64 = data.zi(i).iter().zip(beta).map(|(a, b)| a * b).sum();
        let (emu, en_o, _) = posterior_oracle(data.x[i], data.delta[i], lin, &grid.times, &grid.jumps, r);
        worst = worst.max((cache.emu[i] - emu).abs());
        worst = worst.max(max_abs_diff(&en[i], &en_o));
        assert!(en[i].iter().all(|v| v.is_finite() && *v >= 0.0));
    }
    worst
}

#[test]
fn e_step_matches_posterior_quadrature_on_five_subjects() {
    let data = five_subjects();
    let grid = JumpGrid { times: vec![0.8, 1.6], jumps: vec![0.35, 0.6] };
    for r in [0.0, 0.5, 1.0] {
        let err = check_e_step(&data, &[0.4, -0.7], &grid, r);
        assert!(err < 1e-8, "r = {r}: max error {err:e}");
    }
}

#[test]
fn e_step_matches_posterior_quadrature_on_random_fixtures() {
    for seed in 0..4 {
        let data = random_fixture(100 + seed, 12, 2);
        let mut grid = event_grid(&data).unwrap();
        let mut g = rng(seed);
        for l in grid.jumps.iter_mut() {
            *l = g.random_range(0.05..0.4);
        }
        for r in [0.0, 0.5, 1.0] {
            let err = check_e_step(&data, &[0.3, -0.2], &grid, r);
            assert!(err < 1e-8, "seed {seed}, r = {r}: max error {err:e}");
        }
    }
}

#[test]
fn observed_loglik_matches_marginal_quadrature() {
    let data = EventData::new(vec![0.7, 1.0, 1.9], vec![Exact, Left, Right], vec![0.5, -0.4, 1.1], 1, None).unwrap();
    let grid = JumpGrid { times: vec![0.7], jumps: vec![0.45] };
    for r in [0.0, 0.5, 1.0] {
        let ll = observed_loglik(&data, &[0.6], &grid, TransformParam::new(r).unwrap()).unwrap();
        let oracle: f64 = (0..3)
            .map(|i| posterior_oracle(data.x[i], data.delta[i], 0.6 * data.z[i], &grid.times, &grid.jumps, r).2)
            .sum();
        assert!((ll - oracle).abs() < 1e-8, "r = {r}: {ll} vs {oracle}");
    }
}

#[test]
fn em_ascent_on_random_fixtures() {
    for seed in 0..20u64 {
        let data = random_fixture(seed, 40, 2);
        let r = [0.0, 0.5, 1.0][seed as usize % 3];
        for accelerate in [false, true] {
            let opts = EmOptions { max_iter: 300, tol: 1e-7, accelerate };
            let fit = fit_em(&data, TransformParam::new(r).unwrap(), &opts).unwrap();
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "seed {seed}, accelerate {accelerate}: {} -> {}", w[0], w[1]);
            }
            assert!(fit.grid.jumps.iter().all(|l| *l >= 0.0));
        }
    }
}

#[test]
fn plain_and_accelerated_em_reach_the_same_point() {
    let data = random_fixture(7, 60, 2);
    let r = TransformParam::new(0.5).unwrap();
    let slow = fit_em(&data, r, &EmOptions { max_iter: 20000, tol: 1e-10, accelerate: false }).unwrap();
    let fast = fit_em(&data, r, &EmOptions { max_iter: 2000, tol: 1e-10, accelerate: true }).unwrap();
    assert!(slow.converged && fast.converged);
    assert!(max_abs_diff(&slow.beta, &fast.beta) < 1e-6);
    assert!(fast.iterations < slow.iterations);
}

#[test]
fn no_left_censoring_ph_matches_cox_and_breslow() {
    for seed in 0..3 {
        let data = right_censored_fixture(50 + seed, 150, &[0.7, -0.4]);
        let fit = fit_em(&data, TransformParam::PH, &EmOptions { max_iter: 20000, tol: 1e-10, accelerate: true }).unwrap();
        assert!(fit.converged);
        let oracle = CoxOracle { data: &data };
        let beta = oracle.fit();
        assert!(max_abs_diff(&fit.beta, &beta) < 1e-6, "{:?} vs {:?}", fit.beta, beta);
        let (times, cum) = oracle.breslow(&beta);
        assert_eq!(times, fit.grid.times);
        let mut acc = 0.0;
        for (k, l) in fit.grid.jumps.iter().enumerate() {
            acc += l;
            assert!((acc - cum[k]).abs() < 1e-5, "k = {k}: {acc} vs {}", cum[k]);
        }
    }
}

#[test]
fn beta_step_matches_cox_when_frailty_is_degenerate() {
    // With r = 0 and no left censoring, one β-update with jumps held at the
    // Breslow values reproduces the Cox estimate.
    let data = right_censored_fixture(91, 120, &[0.5, 0.3]);
    let oracle = CoxOracle { data: &data };
    let beta = oracle.fit();
    let (times, cum) = oracle.breslow(&beta);
    let jumps: Vec<f64> = cum.iter().enumerate().map(|(k, c)| if k == 0 { *c } else { c - cum[k - 1] }).collect();
    let grid = JumpGrid { times, jumps };
    let cache = e_step(&data, &beta, &grid, TransformParam::PH).unwrap();
    let b = m_step_beta(&cache, &data, &[0.0, 0.0]).unwrap();
    assert!(max_abs_diff(&b, &beta) < 1e-8);
    let l = m_step_lambda(&cache, &data, &beta);
    assert!(max_abs_diff(&l, &grid.jumps) < 1e-10);
}

#[test]
fn refit_from_solution_is_a_fixed_point() {
    let data = random_fixture(3, 80, 2);
    let r = TransformParam::new(1.0).unwrap();
    let opts = EmOptions::default();
    let fit = fit_em(&data, r, &opts).unwrap();
    let again = fit_em_from(&data, r, &opts, &fit.beta, &fit.grid).unwrap();
    assert!(again.iterations <= 2);
    assert!(max_abs_diff(&fit.beta, &again.beta) < opts.tol);
}

#[test]
fn permutation_invariance() {
    let data = random_fixture(11, 50, 2);
    let n = data.len();
    let perm: Vec<usize> = (0..n).rev().collect();
    let permuted = EventData::new(
        perm.iter().map(|&i| data.x[i]).collect(),
        perm.iter().map(|&i| data.delta[i]).collect(),
        perm.iter().flat_map(|&i| data.zi(i).to_vec()).collect(),
        2,
        Some(perm.iter().map(|&i| data.l[i]).collect()),
    )
    .unwrap();
    let opts = EmOptions { tol: 1e-9, max_iter: 5000, accelerate: true };
    let a = fit_em(&data, TransformParam::new(0.5).unwrap(), &opts).unwrap();
    let b = fit_em(&permuted, TransformParam::new(0.5).unwrap(), &opts).unwrap();
    assert!(max_abs_diff(&a.beta, &b.beta) < 1e-7);
    assert!(max_abs_diff(&a.grid.jumps, &b.grid.jumps) < 1e-7);
}

#[test]
fn swapping_group_labels_flips_the_sign() {
    let mut g = rng(5);
    let n = 80;
    let mut x = Vec::new();
    let mut delta = Vec::new();
    let mut z = Vec::new();
    for i in 0..n {
        let zi = if i % 2 == 0 { 1.0 } else { 0.0 };
        let t = -(g.random::<f64>()).ln() * (-0.8f64 * zi).exp();
        let u = 1.5;
        if t > u {
            x.push(u);
            delta.push(Right);
        } else if t < 0.05 {
            x.push(0.05);
            delta.push(Left);
        } else {
            x.push(t);
            delta.push(Exact);
        }
        z.push(zi);
    }
    let a = EventData::new(x.clone(), delta.clone(), z.clone(), 1, None).unwrap();
    let b = EventData::new(x, delta, z.iter().map(|v| 1.0 - v).collect(), 1, None).unwrap();
    let opts = EmOptions { tol: 1e-10, max_iter: 5000, accelerate: true };
    let fa = fit_em(&a, TransformParam::PO, &opts).unwrap();
    let fb = fit_em(&b, TransformParam::PO, &opts).unwrap();
    assert!((fa.beta[0] + fb.beta[0]).abs() < 1e-7, "{} vs {}", fa.beta[0], fb.beta[0]);
}

#[test]
fn grid_size_tracks_exact_fraction_in_simulated_cell() {
    let cfg = dcssl::sim::SimConfig::default();
    let mut total = 0usize;
    for rep in 0..10 {
        let c = dcssl::sim::gen_cohort(&cfg, rep).unwrap();
        let (lab, _) = c.split();
        total += event_grid(&lab.true_outcomes()).unwrap().len();
    }
    let mean = total as f64 / 10.0;
    assert!((mean - 120.0).abs() < 10.0, "mean K_n = {mean}");
}
