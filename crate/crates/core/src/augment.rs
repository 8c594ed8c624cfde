//! Supervised and semi-supervised estimators.
//!
//! Each SSL estimator subtracts from `β̂_SL` the variance-optimal multiple of
//! the labeled-minus-full discrepancy of a working-model coefficient:
//!
//! ```text
//! β̂_SSL = β̂_SL − Ω̂ Σ̂_γ⁻¹ (γ̂ − γ̄),    cov = (Σ̂ − Ω̂ Σ̂_γ⁻¹ Ω̂') / n
//! ```

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::composite::{build_design, fit_composite, CompositeOptions, HTransform};
use crate::data::{Cohort, EventData};
use crate::em::{fit_em, EmFit, EmOptions};
use crate::error::{Error, Result};
use crate::influence::{
    complete_by_profile_newton, covariance_blocks, eta2_rows, profile_influence, CovBlocks, ProfileOptions,
};
use crate::linalg;
use crate::transform::TransformParam;

pub const Z975: f64 = 1.959964;
const RIDGE_CONDITION: f64 = 1e10;
/// EM iteration cap used by the pipeline. Fits that reach it are finished by
/// profile Newton steps.
pub const PIPELINE_EM_MAX_ITER: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SL")]
    Sl,
    #[serde(rename = "SSL1")]
    Ssl1,
    #[serde(rename = "SSL2")]
    Ssl2,
    #[serde(rename = "SSL3")]
    Ssl3,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sl, Method::Ssl1, Method::Ssl2, Method::Ssl3];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sl => "SL",
            Method::Ssl1 => "SSL1",
            Method::Ssl2 => "SSL2",
            Method::Ssl3 => "SSL3",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AugmentedEstimate {
    pub method: Method,
    pub beta: Vec<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub cov: DMatrix<f64>,
    pub se: Vec<f64>,
    pub ci95: Vec<(f64, f64)>,
    /// SE of SL divided by SE of this estimator.
    pub re_vs_sl: Vec<f64>,
    /// Whether a ridge was added to `Σ̂_γ` before inversion.
    pub ridge: bool,
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect();
    rows.serialize(s)
}

fn finish(method: Method, beta: Vec<f64>, mut cov: DMatrix<f64>, sl_se: Option<&[f64]>, ridge: bool) -> AugmentedEstimate {
    linalg::symmetrize(&mut cov);
    let se: Vec<f64> = (0..beta.len()).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let ci95 = beta.iter().zip(&se).map(|(b, s)| (b - Z975 * s, b + Z975 * s)).collect();
    let re_vs_sl = match sl_se {
        Some(sl) => sl.iter().zip(&se).map(|(a, b)| a / b).collect(),
        None => vec![1.0; beta.len()],
    };
    AugmentedEstimate { method, beta, cov, se, ci95, re_vs_sl, ridge }
}

/// The supervised estimate with covariance `Σ̂ / n`.
pub fn supervised(beta_sl: &[f64], sigma: &DMatrix<f64>, n: usize) -> AugmentedEstimate {
    finish(Method::Sl, beta_sl.to_vec(), sigma / n as f64, None, false)
}

/// Augments `β̂_SL` with the discrepancy `γ̂ − γ̄`.
pub fn augment(
    method: Method,
    beta_sl: &[f64],
    gamma_hat: &[f64],
    gamma_bar: &[f64],
    blocks: &CovBlocks,
) -> Result<AugmentedEstimate> {
    let p = beta_sl.len();
    let d = gamma_hat.len();
    if gamma_bar.len() != d || blocks.sigma_gamma.nrows() != d || blocks.omega.shape() != (p, d) || blocks.sigma.nrows() != p {
        return Err(Error::Dimension(format!(
            "beta has {p} entries, gamma {d} / {}, omega is {:?}, sigma_gamma is {:?}",
            gamma_bar.len(),
            blocks.omega.shape(),
            blocks.sigma_gamma.shape()
        )));
    }
    let all_finite = beta_sl.iter().chain(gamma_hat).chain(gamma_bar).all(|v| v.is_finite())
        && blocks.sigma.iter().chain(blocks.sigma_gamma.iter()).chain(blocks.omega.iter()).all(|v| v.is_finite());
    if !all_finite {
        return Err(Error::Numeric("non-finite input to augmentation".into()));
    }
    let mut sg = blocks.sigma_gamma.clone();
    let ridge = linalg::condition_number(&sg) > RIDGE_CONDITION;
    if ridge {
        let eps = 1e-8 * sg.trace() / d as f64;
        for j in 0..d {
            sg[(j, j)] += eps;
        }
    }
    // K = Ω Σ_γ⁻¹ via Σ_γ K' = Ω'
    let kt = match sg.clone().cholesky() {
        Some(ch) => ch.solve(&blocks.omega.transpose()),
        None => linalg::solve(&sg, &blocks.omega.transpose(), "Sigma_gamma")?,
    };
    let k = kt.transpose();
    let diff = DMatrix::from_fn(d, 1, |j, _| gamma_hat[j] - gamma_bar[j]);
    let shift = &k * diff;
    let beta: Vec<f64> = (0..p).map(|j| beta_sl[j] - shift[(j, 0)]).collect();
    let cov = (&blocks.sigma - &k * blocks.omega.transpose()) / blocks.n as f64;
    let sl_se: Vec<f64> = (0..p).map(|j| (blocks.sigma[(j, j)] / blocks.n as f64).sqrt()).collect();
    Ok(finish(method, beta, cov, Some(&sl_se), ridge))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SslConfig {
    pub r: TransformParam,
    pub use_model4: bool,
    pub use_model5: bool,
    pub h: HTransform,
    pub em: EmOptions,
    pub composite: CompositeOptions,
    pub profile: ProfileOptions,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            r: TransformParam::PH,
            use_model4: true,
            use_model5: true,
            h: HTransform::Log,
            em: EmOptions { max_iter: PIPELINE_EM_MAX_ITER, ..EmOptions::default() },
            composite: CompositeOptions::default(),
            profile: ProfileOptions::default(),
        }
    }
}

impl SslConfig {
    pub fn with_r(r: TransformParam) -> Self {
        Self { r, ..Self::default() }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EmDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Number of distinct exact event times.
    pub k_n: usize,
    pub loglik: f64,
    /// Sup-norm of the mean profile score after refinement.
    pub score_norm: Option<f64>,
    /// EM hit its cap and the fit was finished by profile Newton steps.
    pub completed_by_profile_newton: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CompositeDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub score_norm: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Diagnostics {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub sl: EmDiagnostics,
    pub model4_labeled: Option<EmDiagnostics>,
    pub model4_full: Option<EmDiagnostics>,
    pub model5_labeled: Option<CompositeDiagnostics>,
    pub model5_full: Option<CompositeDiagnostics>,
}

/// Estimates plus the intermediate quantities of one pipeline run.
#[derive(Clone, Debug, Serialize)]
pub struct SslResult {
    pub estimates: Vec<AugmentedEstimate>,
    pub diagnostics: Diagnostics,
    pub gamma1: Option<(Vec<f64>, Vec<f64>)>,
    pub gamma2: Option<(Vec<f64>, Vec<f64>)>,
    #[serde(skip)]
    pub xi: DMatrix<f64>,
    #[serde(skip)]
    pub eta1: Option<DMatrix<f64>>,
    #[serde(skip)]
    pub eta2: Option<DMatrix<f64>>,
}

impl SslResult {
    pub fn get(&self, m: Method) -> Option<&AugmentedEstimate> {
        self.estimates.iter().find(|e| e.method == m)
    }
}

/// Profile Newton steps allowed when completing a capped EM fit.
const COMPLETION_STEPS: usize = 20;

/// EM fit, finished on the profile likelihood when EM stops at its cap.
fn fit_npmle(data: &EventData, cfg: &SslConfig) -> Result<(EmFit, bool)> {
    let fit = fit_em(data, cfg.r, &cfg.em)?;
    if fit.converged {
        return Ok((fit, false));
    }
    let (done, norm) = complete_by_profile_newton(&fit, data, &cfg.profile, COMPLETION_STEPS)?;
    if !done.converged {
        return Err(Error::Numeric(format!(
            "EM did not converge in {} iterations and profile Newton stopped at mean score {norm:e}",
            fit.iterations
        )));
    }
    Ok((done, true))
}

/// SL, then SSL1/SSL2/SSL3 as enabled. With no unlabeled subjects only SL is
/// returned.
pub fn run_ssl(labeled: &Cohort, unlabeled: &Cohort, cfg: &SslConfig) -> Result<Vec<AugmentedEstimate>> {
    Ok(run_ssl_detailed(labeled, unlabeled, cfg)?.estimates)
}

pub fn run_ssl_detailed(labeled: &Cohort, unlabeled: &Cohort, cfg: &SslConfig) -> Result<SslResult> {
    let n = labeled.len();
    let big_n = unlabeled.len();
    let p = labeled.p();
    if labeled.n_labeled() != n {
        return Err(Error::InvalidData("labeled cohort contains subjects without outcomes".into()));
    }
    if n < p + 2 {
        return Err(Error::InvalidData(format!("need at least p + 2 = {} labeled subjects, got {n}", p + 2)));
    }
    if unlabeled.p() != p && big_n > 0 {
        return Err(Error::Dimension(format!("labeled p = {p}, unlabeled p = {}", unlabeled.p())));
    }

    let truth = labeled.true_outcomes();
    let (sl_fit, sl_completed) = fit_npmle(&truth, cfg).map_err(|e| e.at_stage("SL fit"))?;
    let sl_inf = profile_influence(&sl_fit, &truth, &cfg.profile).map_err(|e| e.at_stage("SL influence"))?;
    let beta_sl = sl_inf.beta.clone();
    let xi = sl_inf.rows;
    let sl = supervised(&beta_sl, &(xi.transpose() * &xi / n as f64), n);
    let mut diagnostics = Diagnostics {
        n_labeled: n,
        n_unlabeled: big_n,
        sl: EmDiagnostics {
            iterations: sl_fit.iterations,
            converged: sl_fit.converged,
            k_n: sl_fit.grid.len(),
            loglik: sl_fit.loglik(),
            score_norm: Some(sl_inf.score_norm),
            completed_by_profile_newton: sl_completed,
        },
        ..Default::default()
    };
    let mut out = SslResult {
        estimates: vec![sl],
        diagnostics: Diagnostics::default(),
        gamma1: None,
        gamma2: None,
        xi: xi.clone(),
        eta1: None,
        eta2: None,
    };
    if big_n == 0 {
        out.diagnostics = diagnostics;
        return Ok(out);
    }

    let full = labeled.concat(unlabeled)?;
    let sur_lab = labeled.surrogate_outcomes();
    let sur_full = full.surrogate_outcomes();

    if cfg.use_model4 {
        let stage = "working model (4)";
        let (lab_fit, lab_completed) = fit_npmle(&sur_lab, cfg).map_err(|e| e.at_stage(stage))?;
        let inf = profile_influence(&lab_fit, &sur_lab, &cfg.profile).map_err(|e| e.at_stage(stage))?;
        let (full_fit, full_completed) = fit_npmle(&sur_full, cfg).map_err(|e| e.at_stage(stage))?;
        diagnostics.model4_labeled = Some(EmDiagnostics {
            iterations: lab_fit.iterations,
            converged: true,
            k_n: lab_fit.grid.len(),
            loglik: lab_fit.loglik(),
            score_norm: Some(inf.score_norm),
            completed_by_profile_newton: lab_completed,
        });
        diagnostics.model4_full = Some(EmDiagnostics {
            iterations: full_fit.iterations,
            converged: true,
            k_n: full_fit.grid.len(),
            loglik: full_fit.loglik(),
            score_norm: None,
            completed_by_profile_newton: full_completed,
        });
        out.gamma1 = Some((inf.beta, full_fit.beta));
        out.eta1 = Some(inf.rows);
    }

    if cfg.use_model5 {
        let stage = "working model (5)";
        let dl = build_design(&sur_lab, cfg.h).map_err(|e| e.at_stage(stage))?;
        let df = build_design(&sur_full, cfg.h).map_err(|e| e.at_stage(stage))?;
        let lab_fit = fit_composite(&sur_lab, &dl, &cfg.composite).map_err(|e| e.at_stage(stage))?;
        let full_fit = fit_composite(&sur_full, &df, &cfg.composite).map_err(|e| e.at_stage(stage))?;
        let eta2 = eta2_rows(&lab_fit, &sur_lab, &dl).map_err(|e| e.at_stage(stage))?;
        let diag = |f: &crate::composite::CompositeFit| CompositeDiagnostics {
            iterations: f.iterations,
            converged: f.converged,
            score_norm: f.score_norm,
            warnings: f.warnings.clone(),
        };
        diagnostics.model5_labeled = Some(diag(&lab_fit));
        diagnostics.model5_full = Some(diag(&full_fit));
        out.gamma2 = Some((lab_fit.gamma().to_vec(), full_fit.gamma().to_vec()));
        out.eta2 = Some(eta2);
    }

    if let (Some((g, gb)), Some(eta)) = (&out.gamma1, &out.eta1) {
        let blocks = covariance_blocks(&xi, eta, big_n)?;
        out.estimates.push(augment(Method::Ssl1, &beta_sl, g, gb, &blocks).map_err(|e| e.at_stage("SSL1"))?);
    }
    if let (Some((g, gb)), Some(eta)) = (&out.gamma2, &out.eta2) {
        let blocks = covariance_blocks(&xi, eta, big_n)?;
        out.estimates.push(augment(Method::Ssl2, &beta_sl, g, gb, &blocks).map_err(|e| e.at_stage("SSL2"))?);
    }
    if let (Some((g1, gb1)), Some(e1), Some((g2, gb2)), Some(e2)) = (&out.gamma1, &out.eta1, &out.gamma2, &out.eta2) {
        let mut eta3 = DMatrix::zeros(n, 2 * p);
        eta3.columns_mut(0, p).copy_from(e1);
        eta3.columns_mut(p, p).copy_from(e2);
        let g3: Vec<f64> = g1.iter().chain(g2).cloned().collect();
        let gb3: Vec<f64> = gb1.iter().chain(gb2).cloned().collect();
        let blocks = covariance_blocks(&xi, &eta3, big_n)?;
        out.estimates.push(augment(Method::Ssl3, &beta_sl, &g3, &gb3, &blocks).map_err(|e| e.at_stage("SSL3"))?);
    }
    out.diagnostics = diagnostics;
    Ok(out)
}
