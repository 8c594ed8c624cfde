//! NPMLE of `(β, Λ)` in the transformation model for doubly censored data.
//!
//! The baseline cumulative hazard is a step function with jumps `λ_k` at the
//! distinct exact event times. Each subject gets a latent frailty `μ_i` and
//! independent Poisson counts `N_ik` with mean `λ_k e^{z_i'β} μ_i`; the EM
//! algorithm alternates closed-form conditional expectations of `(N_ik, μ_i)`
//! with a closed-form update of the jumps and a concave Newton solve for `β`.
//!
//! Conditional expectations, with `V_i = e^{z_i'β} Σ_{t_k ≤ X_i} λ_k` and the
//! frailty integrals `m_j(V) = ∫ μ^j e^{-μV} φ(μ) dμ`:
//!
//! | case  | `E(μ_i)`                     | `E(N_ik)`, `t_k ≤ X_i`              |
//! |-------|------------------------------|-------------------------------------|
//! | exact | `m2 / m1`                    | `I(t_k = X_i)`                      |
//! | right | `m1 / m0 = G'(V)`            | `0`                                 |
//! | left  | `(1 - m0 G') / (1 - m0)`     | `λ_k e^{z'β} / (1 - m0)`            |
//!
//! and `E(N_ik) = λ_k e^{z'β} E(μ_i)` for `t_k > X_i` in every case.
//!
//! The raw EM map converges slowly in the tail of the time axis, so the fitting
//! loop wraps it in a SQUAREM extrapolation that only accepts steps which do not
//! decrease the observed-data log-likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CensoringCode, EventData};
use crate::error::{Error, Result};
use crate::linalg;
use crate::transform::TransformParam;

/// Per-term floor applied to the observed-data log-likelihood.
pub const LOG_FLOOR: f64 = -745.0;

/// Baseline hazard jumps on the distinct exact event times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpGrid {
    pub times: Vec<f64>,
    pub jumps: Vec<f64>,
}

impl JumpGrid {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `Λ(t) = Σ_{t_k ≤ t} λ_k`.
    pub fn cumulative_hazard(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|s| *s <= t);
        self.jumps[..k].iter().sum()
    }
}

/// Sorted unique exact times with jumps initialised to `1/K`.
pub fn event_grid(data: &EventData) -> Result<JumpGrid> {
    let mut times: Vec<f64> = data
        .x
        .iter()
        .zip(&data.delta)
        .filter(|(_, d)| **d == CensoringCode::Exact)
        .map(|(x, _)| *x)
        .collect();
    if times.is_empty() {
        return Err(Error::NoEvents);
    }
    times.sort_by(|a, b| a.total_cmp(b));
    times.dedup();
    let k = times.len();
    Ok(JumpGrid { times, jumps: vec![1.0 / k as f64; k] })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when `max|Δβ| + max|Δλ|` of one EM step falls below this.
    pub tol: f64,
    /// SQUAREM extrapolation on top of the EM map.
    pub accelerate: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-6, accelerate: true }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmFit {
    pub beta: Vec<f64>,
    pub grid: JumpGrid,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub r: TransformParam,
}

impl EmFit {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

/// Conditional expectations of the latent variables at one parameter value.
///
/// The `n × K` matrix of `E(N_ik)` is kept in factored form; [`EStepCache::en`]
/// evaluates single entries and the row and column totals are stored.
#[derive(Clone, Debug)]
pub struct EStepCache {
    /// `E(μ_i)`.
    pub emu: Vec<f64>,
    /// `V_i`.
    pub v: Vec<f64>,
    /// `Σ_k E(N_ik)`.
    pub row_totals: Vec<f64>,
    /// `Σ_i E(N_ik)`.
    pub col_totals: Vec<f64>,
    jumps: Vec<f64>,
    risk: Vec<f64>,
    /// `e^{z'β} / (1 - m0(V))` for left-censored subjects, else 0.
    left_mass: Vec<f64>,
    /// Number of grid times `≤ X_i`.
    kidx: Vec<usize>,
    exact: Vec<bool>,
}

impl EStepCache {
    /// `E(N_ik)` for subject `i` and grid index `k` (0-based).
    pub fn en(&self, i: usize, k: usize) -> f64 {
        let ki = self.kidx[i];
        if k >= ki {
            self.jumps[k] * self.risk[i] * self.emu[i]
        } else if self.exact[i] && k + 1 == ki {
            1.0
        } else {
            self.jumps[k] * self.left_mass[i]
        }
    }

    pub fn en_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.emu.len())
            .map(|i| (0..self.jumps.len()).map(|k| self.en(i, k)).collect())
            .collect()
    }

    pub fn n(&self) -> usize {
        self.emu.len()
    }

    pub(crate) fn kidx(&self) -> &[usize] {
        &self.kidx
    }

    pub(crate) fn left_mass(&self) -> &[f64] {
        &self.left_mass
    }

    pub(crate) fn risk(&self) -> &[f64] {
        &self.risk
    }
}

/// Data laid out against a fixed set of grid times.
#[derive(Clone, Debug)]
pub(crate) struct Prepared<'a> {
    pub data: &'a EventData,
    pub r: TransformParam,
    pub times: Vec<f64>,
    pub kidx: Vec<usize>,
    /// Exact-event count at each grid time.
    pub d: Vec<f64>,
}

impl<'a> Prepared<'a> {
    pub fn new(data: &'a EventData, times: &[f64], r: TransformParam) -> Self {
        let kidx: Vec<usize> = data.x.iter().map(|x| times.partition_point(|t| t <= x)).collect();
        let mut d = vec![0.0; times.len()];
        for (i, delta) in data.delta.iter().enumerate() {
            if *delta == CensoringCode::Exact {
                let k = kidx[i];
                if k > 0 && times[k - 1] == data.x[i] {
                    d[k - 1] += 1.0;
                }
            }
        }
        Self { data, r, times: times.to_vec(), kidx, d }
    }

    pub fn k(&self) -> usize {
        self.times.len()
    }

    fn linear_predictor(&self, beta: &[f64], i: usize) -> f64 {
        self.data.zi(i).iter().zip(beta).map(|(z, b)| z * b).sum()
    }

    fn cumulative(jumps: &[f64]) -> Vec<f64> {
        let mut c = Vec::with_capacity(jumps.len() + 1);
        let mut acc = 0.0;
        c.push(0.0);
        for l in jumps {
            acc += l;
            c.push(acc);
        }
        c
    }

    fn check_exact_on_grid(&self) -> Result<()> {
        for (i, delta) in self.data.delta.iter().enumerate() {
            if *delta == CensoringCode::Exact {
                let k = self.kidx[i];
                if k == 0 || self.times[k - 1] != self.data.x[i] {
                    return Err(Error::InvalidData(format!(
                        "exact time {} of subject {i} is not a grid time",
                        self.data.x[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn e_step(&self, beta: &[f64], jumps: &[f64]) -> Result<EStepCache> {
        let n = self.data.len();
        let kk = self.k();
        let r = self.r;
        let rr = r.r();
        let cum = Self::cumulative(jumps);
        let total = cum[kk];

        let mut emu = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut risk = vec![0.0; n];
        let mut left_mass = vec![0.0; n];
        let mut exact = vec![false; n];
        let mut bucket_a = vec![0.0; kk + 1];
        let mut bucket_b = vec![0.0; kk + 1];

        for i in 0..n {
            let e = self.linear_predictor(beta, i).exp();
            let ki = self.kidx[i];
            let vi = e * cum[ki];
            let gp = r.g_prime_raw(vi);
            let mu = match self.data.delta[i] {
                CensoringCode::Exact => {
                    exact[i] = true;
                    // m2 / m1 = (1 + r) G'(V)
                    (1.0 + rr) * gp
                }
                CensoringCode::Right => gp,
                CensoringCode::Left => {
                    if ki == 0 {
                        // No grid mass below X_i: the V -> 0 limit, and no N_ik with t_k <= X_i.
                        1.0 + rr
                    } else {
                        let om = r.one_minus_m0(vi);
                        if !(om > 0.0) || !om.is_finite() {
                            return Err(Error::Numeric(format!(
                                "1 - exp(-G(V)) underflows for left-censored subject {i} (V = {vi:e})"
                            )));
                        }
                        let m0 = (-r.g_raw(vi)).exp();
                        // (1 - m0 G') / (1 - m0) = 1 + m0 (1 - G') / (1 - m0)
                        let one_minus_gp = rr * vi / (1.0 + rr * vi);
                        left_mass[i] = e / om;
                        bucket_b[ki] += left_mass[i];
                        1.0 + m0 * one_minus_gp / om
                    }
                }
            };
            if !(mu.is_finite() && mu >= 0.0) {
                return Err(Error::Numeric(format!("E(mu) = {mu} for subject {i}")));
            }
            emu[i] = mu;
            v[i] = vi;
            risk[i] = e;
            bucket_a[ki] += e * mu;
        }

        // A[k] = Σ_{i: k_i ≤ k} e_i E(μ_i);  B[k] = Σ_{left i: k_i > k} left_mass_i
        let mut col_totals = vec![0.0; kk];
        let mut a_acc = 0.0;
        let mut b_suffix = vec![0.0; kk + 1];
        for k in (0..kk).rev() {
            b_suffix[k] = b_suffix[k + 1] + bucket_b[k + 1];
        }
        for k in 0..kk {
            a_acc += bucket_a[k];
            col_totals[k] = self.d[k] + jumps[k] * (a_acc + b_suffix[k]);
        }

        let row_totals = (0..n)
            .map(|i| {
                let ki = self.kidx[i];
                let mut s = risk[i] * emu[i] * (total - cum[ki]);
                if exact[i] {
                    s += 1.0;
                }
                s + left_mass[i] * cum[ki]
            })
            .collect();

        Ok(EStepCache {
            emu,
            v,
            row_totals,
            col_totals,
            jumps: jumps.to_vec(),
            risk,
            left_mass,
            kidx: self.kidx.clone(),
            exact,
        })
    }

    pub fn loglik(&self, beta: &[f64], jumps: &[f64]) -> f64 {
        let r = self.r;
        let cum = Self::cumulative(jumps);
        let mut ll = 0.0;
        for i in 0..self.data.len() {
            let eta = self.linear_predictor(beta, i);
            let ki = self.kidx[i];
            let vi = eta.exp() * cum[ki];
            let term = match self.data.delta[i] {
                CensoringCode::Exact => {
                    let lam = if ki > 0 { jumps[ki - 1] } else { 0.0 };
                    lam.ln() + eta + r.g_prime_raw(vi).ln() - r.g_raw(vi)
                }
                CensoringCode::Right => -r.g_raw(vi),
                CensoringCode::Left => r.log_one_minus_m0(vi),
            };
            ll += if term.is_nan() { LOG_FLOOR } else { term.max(LOG_FLOOR) };
        }
        ll
    }

    /// One full EM step: expectations, then the joint maximiser of the
    /// Q-function (profile Newton for `β`, closed form for `λ` at the new `β`).
    pub fn em_map(&self, beta: &[f64], jumps: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = self.e_step(beta, jumps)?;
        let new_beta = m_step_beta(&cache, self.data, beta)?;
        let new_jumps = m_step_lambda(&cache, self.data, &new_beta);
        Ok((new_beta, new_jumps))
    }

    /// Maximiser of `ℓ(β, ·)` over the jumps at fixed `β`.
    ///
    /// Newton on the jumps first. If that stalls, monotone EM from the same
    /// start. The flag reports convergence of whichever route finished.
    pub fn profile_jumps(&self, beta: &[f64], start: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, bool)> {
        if let Some(jumps) = self.profile_jumps_newton(beta, start, tol, PROFILE_NEWTON_STEPS) {
            return Ok((jumps, true));
        }
        self.profile_jumps_em(beta, start, tol, max_iter)
    }

    /// The λ-only EM map under SQUAREM until the jumps move less than `tol`.
    pub fn profile_jumps_em(&self, beta: &[f64], start: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, bool)> {
        let theta0: Vec<f64> = start.iter().map(|l| l.ln()).collect();
        let map = |theta: &[f64]| -> Result<Vec<f64>> {
            let jumps: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
            let cache = self.e_step(beta, &jumps)?;
            Ok(m_step_lambda(&cache, self.data, beta).iter().map(|l| l.ln()).collect())
        };
        let obj = |theta: &[f64]| {
            let jumps: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
            self.loglik(beta, &jumps)
        };
        let done = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x.exp() - y.exp()).abs()).fold(0.0, f64::max) < tol
        };
        let out = squarem(theta0, map, obj, done, max_iter, true)?;
        Ok((out.theta.iter().map(|t| t.exp()).collect(), out.converged))
    }

    /// Gradient and Hessian pieces of `ℓ(β, λ)` in `λ`.
    ///
    /// With `C_m = Σ_{k ≤ m} λ_k` every subject enters through one `C_m`, so
    /// `ℓ = Σ_k d_k log λ_k + Σ_m Φ_m(C_m)`. Returns `(c, w)` with `c_m = Φ_m'`
    /// and `w_m = Φ_m''`. `None` when a left-censored term has no mass.
    fn profile_derivatives(&self, beta: &[f64], jumps: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let kk = self.k();
        let rr = self.r.r();
        let cum = Self::cumulative(jumps);
        let mut c = vec![0.0; kk];
        let mut w = vec![0.0; kk];
        for i in 0..self.data.len() {
            let ki = self.kidx[i];
            if ki == 0 {
                continue;
            }
            let e = self.linear_predictor(beta, i).exp();
            let v = e * cum[ki];
            let gp = self.r.g_prime_raw(v);
            let gp2 = gp * gp;
            // derivatives in V of the per-subject term
            let (d1, d2) = match self.data.delta[i] {
                CensoringCode::Exact => (-(1.0 + rr) * gp, (1.0 + rr) * rr * gp2),
                CensoringCode::Right => (-gp, rr * gp2),
                CensoringCode::Left => {
                    let om = self.r.one_minus_m0(v);
                    if !(om > 0.0) {
                        return None;
                    }
                    let s = (-self.r.g_raw(v)).exp() / om;
                    (gp * s, -gp2 * s * (1.0 + rr + s))
                }
            };
            c[ki - 1] += e * d1;
            w[ki - 1] += e * e * d2;
        }
        Some((c, w))
    }

    /// Damped Newton on the jumps. `None` when no ascent step is found or the
    /// step budget runs out.
    ///
    /// The Hessian is `−diag(d/λ²) + Sᵀ W S` with `S` the cumulative-sum map.
    /// In `y = S δ` the Newton system is tridiagonal: `(W − T) y = −S⁻ᵀ g` with
    /// `T = S⁻ᵀ diag(d/λ²) S⁻¹`. Positive curvature in `W` is dropped when the
    /// exact system is not negative definite.
    pub fn profile_jumps_newton(&self, beta: &[f64], start: &[f64], tol: f64, max_steps: usize) -> Option<Vec<f64>> {
        let kk = self.k();
        if kk == 0 || start.iter().any(|l| !(*l > 0.0)) {
            return None;
        }
        let mut jumps = start.to_vec();
        let mut ll = self.loglik(beta, &jumps);
        for _ in 0..max_steps {
            let (c, w) = self.profile_derivatives(beta, &jumps)?;
            let dd: Vec<f64> = (0..kk).map(|k| self.d[k] / (jumps[k] * jumps[k])).collect();
            // g_k − g_{k+1} = d_k/λ_k − d_{k+1}/λ_{k+1} + c_k
            let rhs: Vec<f64> = (0..kk)
                .map(|k| {
                    let next = if k + 1 < kk { self.d[k + 1] / jumps[k + 1] } else { 0.0 };
                    -(self.d[k] / jumps[k] - next + c[k])
                })
                .collect();
            let system = |w_k: &dyn Fn(usize) -> f64| {
                let diag: Vec<f64> = (0..kk).map(|k| w_k(k) - dd[k] - if k + 1 < kk { dd[k + 1] } else { 0.0 }).collect();
                let off: Vec<f64> = (0..kk.saturating_sub(1)).map(|k| dd[k + 1]).collect();
                solve_negative_tridiagonal(&diag, &off, &rhs)
            };
            let y = system(&|k| w[k]).or_else(|| system(&|k| w[k].min(0.0)))?;
            let delta: Vec<f64> = (0..kk).map(|k| y[k] - if k > 0 { y[k - 1] } else { 0.0 }).collect();
            if !delta.iter().all(|x| x.is_finite()) {
                return None;
            }

            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let trial: Vec<f64> = jumps.iter().zip(&delta).map(|(l, d)| l + t * d).collect();
                if trial.iter().all(|l| *l > 0.0) {
                    let lt = self.loglik(beta, &trial);
                    if lt.is_finite() && lt >= ll - 1e-12 * ll.abs().max(1.0) {
                        accepted = Some((trial, lt));
                        break;
                    }
                }
                t *= 0.5;
            }
            let (trial, lt) = accepted?;
            let step = delta.iter().fold(0.0f64, |m, d| m.max((t * d).abs()));
            jumps = trial;
            ll = lt;
            if step < tol {
                return Some(jumps);
            }
        }
        None
    }
}

/// Newton steps allowed in the λ profile before falling back to EM.
const PROFILE_NEWTON_STEPS: usize = 100;

/// Solves a symmetric tridiagonal system by `LDLᵀ`, returning `None` unless
/// every pivot is negative, that is unless the matrix is negative definite.
fn solve_negative_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut piv = vec![0.0; n];
    let mut l = vec![0.0; n];
    let mut z = vec![0.0; n];
    for k in 0..n {
        let (sub, prev_z) = if k > 0 { (l[k] * off[k - 1], l[k] * z[k - 1]) } else { (0.0, 0.0) };
        piv[k] = diag[k] - sub;
        if !(piv[k] < 0.0) {
            return None;
        }
        z[k] = rhs[k] - prev_z;
        if k + 1 < n {
            l[k + 1] = off[k] / piv[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        x[k] = z[k] / piv[k] - if k + 1 < n { l[k + 1] * x[k + 1] } else { 0.0 };
    }
    Some(x)
}

/// Conditional expectations of `(N_ik, μ_i)` at `(β, grid)`.
pub fn e_step(data: &EventData, beta: &[f64], grid: &JumpGrid, r: TransformParam) -> Result<EStepCache> {
    check_params(data, beta, grid)?;
    let prep = Prepared::new(data, &grid.times, r);
    prep.check_exact_on_grid()?;
    prep.e_step(beta, &grid.jumps)
}

/// Closed-form jump update `λ_k = Σ_i E(N_ik) / Σ_i E(μ_i) e^{z_i'β}`.
pub fn m_step_lambda(cache: &EStepCache, data: &EventData, beta: &[f64]) -> Vec<f64> {
    let denom: f64 = (0..data.len())
        .map(|i| {
            let eta: f64 = data.zi(i).iter().zip(beta).map(|(z, b)| z * b).sum();
            cache.emu[i] * eta.exp()
        })
        .sum();
    assert!(denom > 0.0 && denom.is_finite(), "jump update denominator must be positive, got {denom}");
    cache.col_totals.iter().map(|s| s / denom).collect()
}

const BETA_NEWTON_STEPS: usize = 50;

/// Root of the profile score `Σ_i D_i (z_i - z̄(β)) = 0`, `D_i = Σ_k E(N_ik)`,
/// with `z̄` weighted by `E(μ_j) e^{z_j'β}`.
///
/// The score is the gradient of the concave
/// `Σ_i D_i z_i'β - (Σ_i D_i) log Σ_j E(μ_j) e^{z_j'β}`, which damped Newton ascends.
pub fn m_step_beta(cache: &EStepCache, data: &EventData, beta_init: &[f64]) -> Result<Vec<f64>> {
    let p = data.p;
    let n = data.len();
    if beta_init.len() != p {
        return Err(Error::Dimension(format!("beta has {} entries, p = {p}", beta_init.len())));
    }
    if p == 0 {
        return Ok(vec![]);
    }
    let d = &cache.row_totals;
    let s_tot: f64 = d.iter().sum();
    let log_emu: Vec<f64> = cache.emu.iter().map(|m| m.ln()).collect();
    let mut dz = vec![0.0; p];
    for i in 0..n {
        for (acc, z) in dz.iter_mut().zip(data.zi(i)) {
            *acc += d[i] * z;
        }
    }

    let objective = |beta: &[f64]| -> f64 {
        let lin: f64 = dz.iter().zip(beta).map(|(a, b)| a * b).sum();
        let etas: Vec<f64> = (0..n)
            .map(|i| log_emu[i] + data.zi(i).iter().zip(beta).map(|(z, b)| z * b).sum::<f64>())
            .collect();
        let m = etas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + etas.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
        lin - s_tot * lse
    };

    let gtol = 1e-10 * s_tot.max(1.0);
    let mut beta = beta_init.to_vec();
    let mut f_cur = objective(&beta);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..BETA_NEWTON_STEPS {
        let etas: Vec<f64> = (0..n)
            .map(|i| log_emu[i] + data.zi(i).iter().zip(&beta).map(|(z, b)| z * b).sum::<f64>())
            .collect();
        let m = etas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = etas.iter().map(|e| (e - m).exp()).collect();
        let wsum: f64 = w.iter().sum();
        let mut zbar = vec![0.0; p];
        for i in 0..n {
            for (acc, z) in zbar.iter_mut().zip(data.zi(i)) {
                *acc += w[i] * z / wsum;
            }
        }
        let grad: Vec<f64> = dz.iter().zip(&zbar).map(|(a, b)| a - s_tot * b).collect();
        grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm <= gtol {
            return Ok(beta);
        }
        let mut info = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let zi = data.zi(i);
            let wi = s_tot * w[i] / wsum;
            for a in 0..p {
                let da = zi[a] - zbar[a];
                for b in 0..=a {
                    info[(a, b)] += wi * da * (zi[b] - zbar[b]);
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        let step = match linalg::solve_spd(&info, &DVector::from_vec(grad.clone())) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                return Err(Error::Singular {
                    context: "profile information for beta".into(),
                    condition: linalg::condition_number(&info),
                })
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let f_new = objective(&cand);
            if f_new.is_finite() && f_new >= f_cur - 1e-12 * f_cur.abs().max(1.0) {
                beta = cand;
                f_cur = f_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || t * step.amax() < 1e-15 {
            break;
        }
    }
    Err(Error::NewtonNonConvergence { iterations: BETA_NEWTON_STEPS, last: beta, grad_norm })
}

/// Observed-data log-likelihood, each subject's term floored at [`LOG_FLOOR`].
pub fn observed_loglik(data: &EventData, beta: &[f64], grid: &JumpGrid, r: TransformParam) -> Result<f64> {
    check_params(data, beta, grid)?;
    Ok(Prepared::new(data, &grid.times, r).loglik(beta, &grid.jumps))
}

fn check_params(data: &EventData, beta: &[f64], grid: &JumpGrid) -> Result<()> {
    if beta.len() != data.p {
        return Err(Error::Dimension(format!("beta has {} entries, p = {}", beta.len(), data.p)));
    }
    if grid.jumps.len() != grid.times.len() {
        return Err(Error::Dimension("grid times and jumps differ in length".into()));
    }
    if grid.jumps.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Domain("baseline jumps must be nonnegative".into()));
    }
    Ok(())
}

/// Fits `(β, Λ)` from `β = 0`, `λ_k = 1/K`.
pub fn fit_em(data: &EventData, r: TransformParam, opts: &EmOptions) -> Result<EmFit> {
    let grid = event_grid(data)?;
    fit_em_from(data, r, opts, &vec![0.0; data.p], &grid)
}

/// Fits `(β, Λ)` from a given starting point on the data's own grid.
pub fn fit_em_from(
    data: &EventData,
    r: TransformParam,
    opts: &EmOptions,
    beta0: &[f64],
    start: &JumpGrid,
) -> Result<EmFit> {
    if data.is_empty() {
        return Err(Error::InvalidData("no subjects".into()));
    }
    data.check_covariate_rank()?;
    let grid = event_grid(data)?;
    if start.times != grid.times {
        return Err(Error::InvalidData("starting grid does not match the data's exact times".into()));
    }
    check_params(data, beta0, start)?;
    if start.jumps.iter().any(|l| *l <= 0.0) {
        return Err(Error::Domain("starting jumps must be positive".into()));
    }
    let p = data.p;
    let prep = Prepared::new(data, &grid.times, r);

    let pack = |beta: &[f64], jumps: &[f64]| -> Vec<f64> {
        beta.iter().cloned().chain(jumps.iter().map(|l| l.ln())).collect()
    };
    let unpack = |theta: &[f64]| -> (Vec<f64>, Vec<f64>) {
        (theta[..p].to_vec(), theta[p..].iter().map(|t| t.exp()).collect())
    };
    let map = |theta: &[f64]| -> Result<Vec<f64>> {
        let (b, l) = unpack(theta);
        let (nb, nl) = prep.em_map(&b, &l)?;
        Ok(pack(&nb, &nl))
    };
    let obj = |theta: &[f64]| {
        let (b, l) = unpack(theta);
        prep.loglik(&b, &l)
    };
    let tol = opts.tol;
    let done = |a: &[f64], b: &[f64]| {
        let db = a[..p].iter().zip(&b[..p]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let dl = a[p..].iter().zip(&b[p..]).map(|(x, y)| (x.exp() - y.exp()).abs()).fold(0.0, f64::max);
        db + dl < tol
    };
    let out = squarem(pack(beta0, &start.jumps), map, obj, done, opts.max_iter, opts.accelerate)?;
    let (beta, jumps) = unpack(&out.theta);
    Ok(EmFit {
        beta,
        grid: JumpGrid { times: grid.times, jumps },
        loglik_trace: out.trace,
        iterations: out.iterations,
        converged: out.converged,
        r,
    })
}

pub(crate) struct FixedPoint {
    pub theta: Vec<f64>,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Monotone SQUAREM (squared extrapolation) around a fixed-point map.
///
/// One iteration is either a single map application (`accelerate = false`) or
/// one extrapolation cycle. An extrapolated point is kept only when its
/// objective is at least that of two plain steps, so the trace never decreases.
pub(crate) fn squarem(
    theta0: Vec<f64>,
    map: impl Fn(&[f64]) -> Result<Vec<f64>>,
    obj: impl Fn(&[f64]) -> f64,
    done: impl Fn(&[f64], &[f64]) -> bool,
    max_iter: usize,
    accelerate: bool,
) -> Result<FixedPoint> {
    const STEP_MAX0: f64 = 1.0;
    const MSTEP: f64 = 4.0;
    let mut theta = theta0;
    let mut trace = vec![obj(&theta)];
    let mut step_max = STEP_MAX0;

    for it in 1..=max_iter {
        let t1 = map(&theta)?;
        if done(&theta, &t1) {
            trace.push(obj(&t1));
            return Ok(FixedPoint { theta: t1, trace, iterations: it, converged: true });
        }
        if !accelerate {
            trace.push(obj(&t1));
            theta = t1;
            continue;
        }
        let t2 = map(&t1)?;
        let f2 = obj(&t2);
        let r: Vec<f64> = t1.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = t2.iter().zip(&t1).zip(&r).map(|((a, b), c)| a - b - c).collect();
        let sr2: f64 = r.iter().map(|x| x * x).sum();
        let sv2: f64 = v.iter().map(|x| x * x).sum();
        let mut next = t2.clone();
        let mut f_next = f2;
        if sv2 > 0.0 && sv2.is_finite() {
            let alpha = (sr2 / sv2).sqrt().clamp(1.0, step_max);
            let extrap: Vec<f64> = theta
                .iter()
                .zip(&r)
                .zip(&v)
                .map(|((t, r), v)| t + 2.0 * alpha * r + alpha * alpha * v)
                .collect();
            let stabilized = if extrap.iter().all(|x| x.is_finite()) { map(&extrap).ok() } else { None };
            let accepted = match stabilized {
                Some(t3) => {
                    let f3 = obj(&t3);
                    if f3.is_finite() && f3 >= f2 {
                        next = t3;
                        f_next = f3;
                        true
                    } else {
                        false
                    }
                }
                None => false,
            };
            if alpha == step_max {
                step_max = if accepted { MSTEP * step_max } else { (step_max / MSTEP).max(STEP_MAX0) };
            }
        }
        trace.push(f_next);
        theta = next;
    }
    Ok(FixedPoint { theta, trace, iterations: max_iter, converged: false })
}
