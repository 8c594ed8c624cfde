//! Per-subject influence rows and the covariance blocks of the augmentation.
//!
//! For the NPMLE, the influence row is `ξ_i = A_β⁻¹ ψ_i`, where `ψ_i` is the
//! derivative of subject `i`'s log-likelihood along the profile `β ↦ λ(β)`:
//!
//! ```text
//! ψ_i = (I_ex − a_i C_i + b_i C_i) z_i + I_ex λ'_{k_i}/λ_{k_i} − a_i C'_i + b_i C'_i
//! ```
//!
//! with `a_i = e^{z_i'β} E(μ_i)`, `b_i = e^{z_i'β}/(1 − m0(V_i))` for left-censored
//! subjects (else 0), `C_i = Λ(X_i)`, and `C'_i = Σ_{t_k ≤ X_i} ∂λ_k/∂β`.
//! `∂λ/∂β` and `A_β = −n⁻¹ ∂²ℓ_prof/∂β∂β'` come from central differences of
//! the λ-profile. The same construction on surrogate data gives `η_1`.
//!
//! For the composite model, `η_2` is the `γ` block of `(−n⁻¹ ∇²ℓ)⁻¹` applied to
//! the logistic score residual plus the Cox martingale integral.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::composite::{cox_sums, CompositeFit, DesignV};
use crate::data::{CensoringCode, EventData};
use crate::em::{event_grid, EStepCache, EmFit, Prepared};
use crate::error::{Error, Result};
use crate::linalg;

/// Numerical settings for the profile derivatives.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProfileOptions {
    /// Central-difference step is `rel_step · max(1, |β_j|)`.
    pub rel_step: f64,
    /// Largest jump change of the last inner λ-profile step.
    pub tol: f64,
    pub max_iter: usize,
    /// Newton steps on the profile score used to refine `β̂` before forming `ψ`.
    pub polish_steps: usize,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self { rel_step: 1e-4, tol: 1e-10, max_iter: 5000, polish_steps: 3 }
    }
}

/// Profile-based influence of an NPMLE fit.
#[derive(Clone, Debug)]
pub struct ProfileInfluence {
    /// Refined estimate at which the rows are evaluated.
    pub beta: Vec<f64>,
    pub jumps: Vec<f64>,
    /// `n × p`.
    pub rows: DMatrix<f64>,
    pub a_beta: DMatrix<f64>,
    /// Sup-norm of `n⁻¹ Σ_i ψ_i` at `beta`.
    pub score_norm: f64,
}

fn cumulative(jumps: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; jumps.len() + 1];
    for (k, l) in jumps.iter().enumerate() {
        c[k + 1] = c[k] + l;
    }
    c
}

/// `Σ_i ∂ℓ_i/∂β` at fixed jumps.
fn partial_score(data: &EventData, cache: &EStepCache, jumps: &[f64]) -> Vec<f64> {
    let cum = cumulative(jumps);
    let mut f = vec![0.0; data.p];
    for i in 0..data.len() {
        let c = cum[cache.kidx()[i]];
        let ex = if data.delta[i] == CensoringCode::Exact { 1.0 } else { 0.0 };
        let coef = ex - cache.risk()[i] * cache.emu[i] * c + cache.left_mass()[i] * c;
        for (acc, z) in f.iter_mut().zip(data.zi(i)) {
            *acc += coef * z;
        }
    }
    f
}

struct Profiler<'a> {
    prep: Prepared<'a>,
    opts: ProfileOptions,
}

impl Profiler<'_> {
    fn jumps_at(&self, beta: &[f64], start: &[f64]) -> Result<Vec<f64>> {
        let (jumps, ok) = self.prep.profile_jumps(beta, start, self.opts.tol, self.opts.max_iter)?;
        if !ok {
            return Err(Error::Numeric(format!(
                "lambda profile did not converge within {} iterations at beta = {beta:?}",
                self.opts.max_iter
            )));
        }
        Ok(jumps)
    }

    fn score_at(&self, beta: &[f64], jumps: &[f64]) -> Result<Vec<f64>> {
        let cache = self.prep.e_step(beta, jumps)?;
        Ok(partial_score(self.prep.data, &cache, jumps))
    }

    /// `A_β` and `∂λ/∂β` (K × p) by central differences around `beta`.
    fn derivatives(&self, beta: &[f64], jumps: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let p = beta.len();
        let n = self.prep.data.len() as f64;
        let k = jumps.len();
        let mut a = DMatrix::zeros(p, p);
        let mut dl = DMatrix::zeros(k, p);
        for j in 0..p {
            let h = self.opts.rel_step * beta[j].abs().max(1.0);
            let mut bp = beta.to_vec();
            let mut bm = beta.to_vec();
            bp[j] += h;
            bm[j] -= h;
            let lp = self.jumps_at(&bp, jumps)?;
            let lm = self.jumps_at(&bm, jumps)?;
            let fp = self.score_at(&bp, &lp)?;
            let fm = self.score_at(&bm, &lm)?;
            for a_row in 0..p {
                a[(a_row, j)] = -(fp[a_row] - fm[a_row]) / (2.0 * h * n);
            }
            for kk in 0..k {
                dl[(kk, j)] = (lp[kk] - lm[kk]) / (2.0 * h);
            }
        }
        linalg::symmetrize(&mut a);
        Ok((a, dl))
    }
}

/// Influence rows `ξ_i` of a converged EM fit on `data`.
pub fn xi_rows(fit: &EmFit, data: &EventData) -> Result<DMatrix<f64>> {
    Ok(profile_influence(fit, data, &ProfileOptions::default())?.rows)
}

/// Sup-norm of the mean profile score below which a completed fit is accepted.
pub const PROFILE_SCORE_TOL: f64 = 1e-8;

/// Finishes an EM fit that stopped at its iteration cap by Newton steps on the
/// profile score, with `A_β` recomputed at every step and step halving on the
/// profile log-likelihood. The returned fit is flagged converged when the mean
/// profile score falls below [`PROFILE_SCORE_TOL`]; the sup-norm is returned too.
pub fn complete_by_profile_newton(
    fit: &EmFit,
    data: &EventData,
    opts: &ProfileOptions,
    max_steps: usize,
) -> Result<(EmFit, f64)> {
    let grid = event_grid(data)?;
    if grid.times != fit.grid.times || fit.beta.len() != data.p {
        return Err(Error::Dimension("EM fit does not belong to this data set".into()));
    }
    let n = data.len() as f64;
    let prof = Profiler { prep: Prepared::new(data, &grid.times, fit.r), opts: *opts };
    let sup = |f: &[f64]| f.iter().fold(0.0f64, |m, x| m.max(x.abs())) / n;

    let mut beta = fit.beta.clone();
    let mut jumps = prof.jumps_at(&beta, &fit.grid.jumps)?;
    let mut ll = prof.prep.loglik(&beta, &jumps);
    let mut f = prof.score_at(&beta, &jumps)?;
    for _ in 0..max_steps {
        if sup(&f) < PROFILE_SCORE_TOL {
            break;
        }
        let (a, _) = prof.derivatives(&beta, &jumps)?;
        let step = linalg::inverse(&a, "A_beta (profile information)")? * DVector::from_column_slice(&f) / n;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            if let Ok(lt) = prof.jumps_at(&trial, &jumps) {
                let ll_t = prof.prep.loglik(&trial, &lt);
                if ll_t >= ll - 1e-12 * ll.abs().max(1.0) {
                    beta = trial;
                    jumps = lt;
                    ll = ll_t;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
        f = prof.score_at(&beta, &jumps)?;
    }
    let norm = sup(&f);
    let mut out = fit.clone();
    out.beta = beta;
    out.grid.jumps = jumps;
    out.loglik_trace.push(ll);
    out.converged = norm < PROFILE_SCORE_TOL;
    Ok((out, norm))
}

/// Influence rows together with the refined estimate and `A_β`.
pub fn profile_influence(fit: &EmFit, data: &EventData, opts: &ProfileOptions) -> Result<ProfileInfluence> {
    if !fit.converged {
        return Err(Error::Numeric("influence rows need a converged EM fit".into()));
    }
    let grid = event_grid(data)?;
    if grid.times != fit.grid.times || fit.beta.len() != data.p {
        return Err(Error::Dimension("EM fit does not belong to this data set".into()));
    }
    let n = data.len();
    let p = data.p;
    let prof = Profiler { prep: Prepared::new(data, &grid.times, fit.r), opts: *opts };

    let mut beta = fit.beta.clone();
    let mut jumps = prof.jumps_at(&beta, &fit.grid.jumps)?;
    let (a_beta, dl) = prof.derivatives(&beta, &jumps)?;
    let a_inv = linalg::inverse(&a_beta, "A_beta (profile information)")?;

    let mut f = prof.score_at(&beta, &jumps)?;
    for _ in 0..opts.polish_steps {
        let step: Vec<f64> = (0..p)
            .map(|a| (0..p).map(|b| a_inv[(a, b)] * f[b]).sum::<f64>() / n as f64)
            .collect();
        if step.iter().fold(0.0f64, |m, s| m.max(s.abs())) < 1e-12 {
            break;
        }
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        jumps = prof.jumps_at(&beta, &jumps)?;
        f = prof.score_at(&beta, &jumps)?;
    }

    let cache = prof.prep.e_step(&beta, &jumps)?;
    let cum = cumulative(&jumps);
    let kk = jumps.len();
    // C'_k = Σ_{m < k} ∂λ_m/∂β, indexed by the count of grid times ≤ X_i
    let mut cum_dl = DMatrix::<f64>::zeros(kk + 1, p);
    for k in 0..kk {
        for j in 0..p {
            cum_dl[(k + 1, j)] = cum_dl[(k, j)] + dl[(k, j)];
        }
    }
    let mut psi = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        let ki = cache.kidx()[i];
        let c = cum[ki];
        let ex = data.delta[i] == CensoringCode::Exact;
        let a_i = cache.risk()[i] * cache.emu[i];
        let b_i = cache.left_mass()[i];
        let coef = if ex { 1.0 } else { 0.0 } - a_i * c + b_i * c;
        let zi = data.zi(i);
        for j in 0..p {
            let mut v = coef * zi[j] + (b_i - a_i) * cum_dl[(ki, j)];
            if ex {
                v += dl[(ki - 1, j)] / jumps[ki - 1];
            }
            psi[(i, j)] = v;
        }
    }
    let rows = &psi * a_inv.transpose();
    let score_norm = f.iter().fold(0.0f64, |m, x| m.max(x.abs())) / n as f64;
    Ok(ProfileInfluence { beta, jumps, rows, a_beta, score_norm })
}

/// Influence rows `η_1` of the transformation working model fit to surrogate data.
pub fn eta1_rows(fit_on_surrogate: &EmFit, surrogate: &EventData) -> Result<DMatrix<f64>> {
    xi_rows(fit_on_surrogate, surrogate)
}

/// Unscaled composite influence `η̃_i` (`n × (p + 2)`): logistic score residual
/// plus the Cox martingale integral in the `γ` coordinates.
pub fn composite_score_rows(theta: &[f64], data: &EventData, design: &DesignV) -> Result<DMatrix<f64>> {
    let n = data.len();
    let p = data.p;
    if theta.len() != p + 2 || design.rows.nrows() != n {
        return Err(Error::Dimension("theta, design and data disagree".into()));
    }
    let gamma = &theta[2..];
    let sums = cox_sums(gamma, data, false)?;
    let m = sums.times.len();
    // cumulative Σ dΛ and Σ Z̄ dΛ, in units of exp(-shift)
    let mut c0 = vec![0.0; m + 1];
    let mut c1 = vec![vec![0.0; p]; m + 1];
    let mut zbar = vec![vec![0.0; p]; m];
    for t in 0..m {
        let dl = sums.d[t] / sums.s0[t];
        c0[t + 1] = c0[t] + dl;
        for a in 0..p {
            zbar[t][a] = sums.s1[t][a] / sums.s0[t];
            c1[t + 1][a] = c1[t][a] + zbar[t][a] * dl;
        }
    }
    let mut out = DMatrix::zeros(n, p + 2);
    for i in 0..n {
        let v = design.rows.row(i);
        let lin: f64 = v.iter().zip(theta).map(|(a, b)| a * b).sum();
        let prob = 1.0 / (1.0 + (-lin).exp());
        let y = if data.delta[i] == CensoringCode::Left { 1.0 } else { 0.0 };
        for j in 0..p + 2 {
            out[(i, j)] = (y - prob) * v[j];
        }
        if data.delta[i] == CensoringCode::Left {
            continue;
        }
        let zi = data.zi(i);
        let eta: f64 = zi.iter().zip(gamma).map(|(z, g)| z * g).sum();
        let w = (eta - sums.shift).exp();
        let k = sums.times.partition_point(|t| *t <= data.x[i]);
        for a in 0..p {
            let mut mart = -w * (zi[a] * c0[k] - c1[k][a]);
            if data.delta[i] == CensoringCode::Exact {
                mart += zi[a] - zbar[k - 1][a];
            }
            out[(i, a + 2)] += mart;
        }
    }
    Ok(out)
}

/// Influence rows `η_2` of a composite fit.
pub fn eta2_rows(fit: &CompositeFit, data: &EventData, design: &DesignV) -> Result<DMatrix<f64>> {
    let n = data.len();
    let p = data.p;
    let tilde = composite_score_rows(&fit.theta, data, design)?;
    let neg_omega = -&fit.hessian / n as f64;
    let sol = linalg::solve(&neg_omega, &tilde.transpose(), "composite information")?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular {
            context: "composite information".into(),
            condition: linalg::condition_estimate(&neg_omega),
        });
    }
    Ok(sol.rows(2, p).transpose())
}

/// `Σ̂`, `Σ̂_γ`, `Ω̂` and `ρ = n/(n+N)`.
#[derive(Clone, Debug)]
pub struct CovBlocks {
    pub sigma: DMatrix<f64>,
    pub sigma_gamma: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub rho: f64,
    pub n: usize,
    pub n_unlabeled: usize,
}

pub fn covariance_blocks(xi: &DMatrix<f64>, eta: &DMatrix<f64>, n_unlabeled: usize) -> Result<CovBlocks> {
    let n = xi.nrows();
    if eta.nrows() != n {
        return Err(Error::Dimension(format!("xi has {n} rows, eta has {}", eta.nrows())));
    }
    if n == 0 {
        return Err(Error::InvalidData("no influence rows".into()));
    }
    let nf = n as f64;
    let big = n_unlabeled as f64;
    let scale = big / (nf * (nf + big));
    let mut sigma = xi.transpose() * xi / nf;
    let mut sigma_gamma = eta.transpose() * eta * scale;
    let omega = xi.transpose() * eta * scale;
    linalg::symmetrize(&mut sigma);
    linalg::symmetrize(&mut sigma_gamma);
    Ok(CovBlocks { sigma, sigma_gamma, omega, rho: nf / (nf + big), n, n_unlabeled })
}
