//! Data-generating process and Monte Carlo harness.
//!
//! Covariates are equicorrelated normals. True and surrogate event times follow
//!
//! ```text
//! T  = scale · exp(-β'Z + ε),   ε  = log G⁻¹(-log u,  r)
//! T* = scale · exp(-γ'Z + ε*),  ε* = log G⁻¹(-log u*, r*)
//! ```
//!
//! with `(u, u*)` from a Gaussian copula. Censoring windows are
//! `L ~ U(τ_l/2, 3τ_l/2)`, `U ~ U(τ_r/2, 3τ_r/2)` around fixed percentiles of the
//! marginal distribution of `T`, computed once from a large pilot sample.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::augment::{run_ssl, AugmentedEstimate, Method, SslConfig};
use crate::data::{derive_observation, Cohort, SubjectRecord};
use crate::error::{Error, Result};
use crate::transform::TransformParam;

pub const PILOT_SIZE: usize = 1_000_000;
const PILOT_STREAM: u64 = u64::MAX;
/// Fraction of failed replications above which a Monte Carlo run fails.
pub const MAX_FAILURE_RATE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateDesign {
    /// All covariates standard normal with common correlation `z_corr`.
    Gaussian,
    /// First covariate standard normal; the others are indicators with the given
    /// success probabilities, thresholded from the same correlated normals.
    Mixed { binary_probs: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub n_mult: usize,
    pub r: TransformParam,
    pub r_star: TransformParam,
    pub beta_true: Vec<f64>,
    pub gamma_true: Vec<f64>,
    pub copula_rho: f64,
    pub z_corr: f64,
    pub cens_lo: f64,
    pub cens_hi: f64,
    pub time_scale: f64,
    pub seed: u64,
    pub reps: usize,
    pub design: CovariateDesign,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 200,
            n_mult: 5,
            r: TransformParam::PH,
            r_star: TransformParam::PH,
            beta_true: vec![0.5, -0.3],
            gamma_true: vec![-0.3, 0.7],
            copula_rho: 0.85,
            z_corr: 0.3,
            cens_lo: 0.20,
            cens_hi: 0.80,
            time_scale: 2.0,
            seed: 20240917,
            reps: 500,
            design: CovariateDesign::Gaussian,
        }
    }
}

impl SimConfig {
    pub fn p(&self) -> usize {
        self.beta_true.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidData(m));
        if !(0.0 < self.cens_lo && self.cens_lo < self.cens_hi && self.cens_hi < 1.0) {
            return bad(format!(
                "censoring percentiles need 0 < cens_lo < cens_hi < 1, got {} and {}",
                self.cens_lo, self.cens_hi
            ));
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.gamma_true.len() != self.p() {
            return bad("beta_true and gamma_true differ in length".into());
        }
        if !(self.copula_rho > -1.0 && self.copula_rho < 1.0) {
            return bad(format!("copula correlation must lie in (-1, 1), got {}", self.copula_rho));
        }
        let p = self.p() as f64;
        if p > 1.0 && !(self.z_corr > -1.0 / (p - 1.0) && self.z_corr < 1.0) {
            return bad(format!("covariate correlation {} is not positive definite", self.z_corr));
        }
        if !(self.time_scale > 0.0) {
            return bad("time_scale must be positive".into());
        }
        if let CovariateDesign::Mixed { binary_probs } = &self.design {
            if binary_probs.len() + 1 != self.p() {
                return bad("mixed design needs one probability per covariate after the first".into());
            }
            if binary_probs.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
                return bad("binary probabilities must lie in (0, 1)".into());
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n * (1 + self.n_mult)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Fields that determine the marginal law of `T` (and so `τ`).
    fn tau_key(&self) -> String {
        format!(
            "{:?}|{:?}|{:?}|{}|{}|{}|{}|{:?}",
            self.r.r().to_bits(),
            self.beta_true.iter().map(|b| b.to_bits()).collect::<Vec<_>>(),
            (self.z_corr.to_bits(), self.time_scale.to_bits()),
            self.cens_lo.to_bits(),
            self.cens_hi.to_bits(),
            self.seed,
            self.p(),
            self.design
        )
    }
}

/// Lower-triangular Cholesky factor of the equicorrelation matrix.
fn equicorr_factor(p: usize, rho: f64) -> Vec<Vec<f64>> {
    let m = nalgebra::DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { rho });
    let l = m.cholesky().expect("validated correlation is positive definite").l();
    (0..p).map(|i| (0..p).map(|j| l[(i, j)]).collect()).collect()
}

struct Sampler {
    factor: Vec<Vec<f64>>,
    thresholds: Vec<f64>,
}

impl Sampler {
    fn new(cfg: &SimConfig) -> Self {
        let p = cfg.p();
        let thresholds = match &cfg.design {
            CovariateDesign::Gaussian => vec![],
            CovariateDesign::Mixed { binary_probs } => {
                let std = Normal::standard();
                binary_probs.iter().map(|q| std.inverse_cdf(*q)).collect()
            }
        };
        Self { factor: equicorr_factor(p, cfg.z_corr), thresholds }
    }

    fn covariates<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let p = self.factor.len();
        let e: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut z: Vec<f64> = (0..p)
            .map(|i| (0..=i).map(|j| self.factor[i][j] * e[j]).sum())
            .collect();
        for (j, th) in self.thresholds.iter().enumerate() {
            z[j + 1] = if z[j + 1] < *th { 1.0 } else { 0.0 };
        }
        z
    }
}

fn std_normal_cdf(w: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-w / std::f64::consts::SQRT_2)
}

fn open_unit(u: f64) -> f64 {
    u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn event_time(scale: f64, coef: &[f64], z: &[f64], eps: f64) -> f64 {
    let lin: f64 = coef.iter().zip(z).map(|(b, z)| b * z).sum();
    scale * (-lin + eps).exp()
}

/// `(τ_l, τ_r)`: the `cens_lo` and `cens_hi` quantiles of `T` from a pilot sample.
pub fn percentiles_tau(cfg: &SimConfig) -> Result<(f64, f64)> {
    static CACHE: OnceLock<Mutex<HashMap<String, (f64, f64)>>> = OnceLock::new();
    cfg.validate()?;
    let key = cfg.tau_key();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(t) = cache.lock().unwrap().get(&key) {
        return Ok(*t);
    }
    let t = percentiles_tau_with_size(cfg, PILOT_SIZE)?;
    cache.lock().unwrap().insert(key, t);
    Ok(t)
}

/// Uncached pilot quantiles with an explicit pilot size.
pub fn percentiles_tau_with_size(cfg: &SimConfig, size: usize) -> Result<(f64, f64)> {
    cfg.validate()?;
    if size == 0 {
        return Err(Error::InvalidData("pilot size must be positive".into()));
    }
    let sampler = Sampler::new(cfg);
    let mut rng = cfg.rng(PILOT_STREAM);
    let mut t: Vec<f64> = (0..size)
        .map(|_| {
            let z = sampler.covariates(&mut rng);
            let w: f64 = rng.sample(StandardNormal);
            let eps = cfg.r.sample_eps_raw(open_unit(std_normal_cdf(w)));
            event_time(cfg.time_scale, &cfg.beta_true, &z, eps)
        })
        .collect();
    let mut quantile = |q: f64| {
        let idx = ((q * size as f64).ceil() as usize).clamp(1, size) - 1;
        *t.select_nth_unstable_by(idx, |a, b| a.total_cmp(b)).1
    };
    let lo = quantile(cfg.cens_lo);
    let hi = quantile(cfg.cens_hi);
    Ok((lo, hi))
}

/// Unobserved quantities behind one generated subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub t: f64,
    pub t_star: f64,
    /// Copula normal scores behind `T` and `T*`.
    pub w: f64,
    pub w_star: f64,
}

/// A generated cohort plus diagnostics.
#[derive(Clone, Debug)]
pub struct Generated {
    pub cohort: Cohort,
    /// Per-subject latent draws, in cohort order.
    pub latent: Vec<Latent>,
    /// Number of `(L, U)` pairs redrawn because `L ≥ U`.
    pub resampled_windows: usize,
    pub tau: (f64, f64),
}

/// One replication's cohort; the first `n` subjects are labeled.
pub fn gen_cohort(cfg: &SimConfig, rep_index: u64) -> Result<Cohort> {
    Ok(generate(cfg, rep_index)?.cohort)
}

pub fn generate(cfg: &SimConfig, rep_index: u64) -> Result<Generated> {
    cfg.validate()?;
    let (tau_l, tau_r) = percentiles_tau(cfg)?;
    let sampler = Sampler::new(cfg);
    let mut rng = cfg.rng(rep_index);
    let rho = cfg.copula_rho;
    let rho_c = (1.0 - rho * rho).sqrt();
    let mut resampled = 0;
    let mut records = Vec::with_capacity(cfg.total());
    let mut latent = Vec::with_capacity(cfg.total());
    for i in 0..cfg.total() {
        let z = sampler.covariates(&mut rng);
        let w1: f64 = rng.sample(StandardNormal);
        let w2: f64 = rng.sample(StandardNormal);
        let w = w1;
        let w_star = rho * w1 + rho_c * w2;
        let eps = cfg.r.sample_eps_raw(open_unit(std_normal_cdf(w)));
        let eps_star = cfg.r_star.sample_eps_raw(open_unit(std_normal_cdf(w_star)));
        let t = event_time(cfg.time_scale, &cfg.beta_true, &z, eps);
        let t_star = event_time(cfg.time_scale, &cfg.gamma_true, &z, eps_star);
        let (l, u) = loop {
            let l = rng.random_range(0.5 * tau_l..1.5 * tau_l);
            let u = rng.random_range(0.5 * tau_r..1.5 * tau_r);
            if l < u {
                break (l, u);
            }
            resampled += 1;
        };
        let labeled = i < cfg.n;
        records.push(SubjectRecord {
            id: format!("s{:06}", i + 1),
            outcome: if labeled { Some(derive_observation(t, l, u)?) } else { None },
            l,
            u,
            surrogate: derive_observation(t_star, l, u)?,
            z,
        });
        latent.push(Latent { t, t_star, w, w_star });
    }
    Ok(Generated {
        cohort: Cohort::new(records, cfg.p())?,
        latent,
        resampled_windows: resampled,
        tau: (tau_l, tau_r),
    })
}

/// One replication's estimates, in method order SL, SSL1, SSL2, SSL3.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep_index: u64,
    pub estimates: Vec<RepEstimate>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepEstimate {
    pub method: Method,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl From<&AugmentedEstimate> for RepEstimate {
    fn from(e: &AugmentedEstimate) -> Self {
        RepEstimate {
            method: e.method,
            beta: e.beta.clone(),
            se: e.se.clone(),
            cov: (0..e.cov.nrows()).map(|i| e.cov.row(i).iter().cloned().collect()).collect(),
        }
    }
}

/// One row of the Monte Carlo table.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    /// 0-based coefficient index.
    pub coef: usize,
    pub bias: f64,
    /// Monte Carlo standard deviation of the estimates (NaN with one replication).
    pub se: f64,
    /// Mean estimated standard error.
    pub ese: f64,
    /// Fraction of 95% intervals covering the true value.
    pub cp: f64,
    /// Mean SL ESE over mean ESE of this method.
    pub re: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct McSummary {
    pub rows: Vec<SummaryRow>,
    pub reps: usize,
    pub failed: usize,
}

impl McSummary {
    pub fn get(&self, method: Method, coef: usize) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method && r.coef == coef)
    }

    /// Table layout: `method,coefficient,bias,se,ese,cp,re`, CP in percent.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,coefficient,bias,se,ese,cp,re\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},beta{},{:.4},{:.4},{:.4},{:.1},{:.4}\n",
                r.method,
                r.coef + 1,
                r.bias,
                r.se,
                r.ese,
                100.0 * r.cp,
                r.re
            ));
        }
        s
    }
}

/// Replication outputs in replication order plus the summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McRun {
    pub summary: McSummary,
    pub records: Vec<RepRecord>,
}

pub fn run_replication(cfg: &SimConfig, ssl: &SslConfig, rep_index: u64) -> RepRecord {
    let result = gen_cohort(cfg, rep_index).and_then(|c| {
        let (lab, unlab) = c.split();
        run_ssl(&lab, &unlab, ssl)
    });
    match result {
        Ok(est) => RepRecord {
            rep_index,
            estimates: est.iter().map(RepEstimate::from).collect(),
            error: None,
        },
        Err(e) => RepRecord { rep_index, estimates: vec![], error: Some(e.to_string()) },
    }
}

/// Runs `cfg.reps` replications on the current rayon pool and summarises them.
/// Output is identical for any pool size. Fails when more than
/// [`MAX_FAILURE_RATE`] of the replications fail.
pub fn run_mc(cfg: &SimConfig, ssl: &SslConfig) -> Result<McRun> {
    let run = run_mc_ungated(cfg, ssl)?;
    run.check_failure_rate()?;
    Ok(run)
}

/// [`run_mc`] without the failure-rate gate, for callers that keep the records
/// of a failing run.
pub fn run_mc_ungated(cfg: &SimConfig, ssl: &SslConfig) -> Result<McRun> {
    cfg.validate()?;
    if cfg.reps == 0 {
        return Err(Error::InvalidData("reps must be at least 1".into()));
    }
    percentiles_tau(cfg)?;
    let mut records: Vec<RepRecord> = (0..cfg.reps as u64)
        .into_par_iter()
        .map(|k| run_replication(cfg, ssl, k))
        .collect();
    records.sort_by_key(|r| r.rep_index);
    let summary = summarize(&records, &cfg.beta_true)?;
    Ok(McRun { summary, records })
}

impl McRun {
    pub fn check_failure_rate(&self) -> Result<()> {
        let s = &self.summary;
        if s.failed as f64 > MAX_FAILURE_RATE * s.reps as f64 {
            return Err(Error::FailureRate { failed: s.failed, total: s.reps });
        }
        Ok(())
    }
}

const Z975: f64 = 1.959964;

/// Bias, MC SD, mean ESE, coverage and RE per method and coefficient over the
/// successful replications.
pub fn summarize(records: &[RepRecord], beta_true: &[f64]) -> Result<McSummary> {
    let ok: Vec<&RepRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let failed = records.len() - ok.len();
    let p = beta_true.len();
    let mut rows = Vec::new();
    if ok.is_empty() {
        return Ok(McSummary { rows, reps: records.len(), failed });
    }
    let methods: Vec<Method> = ok[0].estimates.iter().map(|e| e.method).collect();
    let mean_ese = |m: Method, j: usize| -> f64 {
        let v: Vec<f64> = ok
            .iter()
            .filter_map(|r| r.estimates.iter().find(|e| e.method == m).map(|e| e.se[j]))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    for &m in &methods {
        for j in 0..p {
            let pairs: Vec<(f64, f64)> = ok
                .iter()
                .filter_map(|r| r.estimates.iter().find(|e| e.method == m).map(|e| (e.beta[j], e.se[j])))
                .collect();
            let k = pairs.len() as f64;
            let mean = pairs.iter().map(|(b, _)| b).sum::<f64>() / k;
            let sd = if pairs.len() > 1 {
                (pairs.iter().map(|(b, _)| (b - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                f64::NAN
            };
            let ese = pairs.iter().map(|(_, s)| s).sum::<f64>() / k;
            let cover = pairs
                .iter()
                .filter(|(b, s)| (b - beta_true[j]).abs() <= Z975 * s)
                .count() as f64
                / k;
            let re = if m == Method::Sl { 1.0 } else { mean_ese(Method::Sl, j) / ese };
            rows.push(SummaryRow { method: m, coef: j, bias: mean - beta_true[j], se: sd, ese, cp: cover, re });
        }
    }
    Ok(McSummary { rows, reps: records.len(), failed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let mut c = SimConfig::default();
        assert!(c.validate().is_ok());
        c.cens_hi = c.cens_lo;
        assert!(c.validate().is_err());
        let c = SimConfig { copula_rho: 1.0, ..SimConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn sizes_and_labels() {
        let cfg = SimConfig { n: 20, ..SimConfig::default() };
        let c = gen_cohort(&cfg, 0).unwrap();
        assert_eq!(c.len(), 120);
        assert_eq!(c.n_labeled(), 20);
        assert!(c.records()[..20].iter().all(|r| r.labeled()));
        assert!(c.records()[20..].iter().all(|r| !r.labeled()));
    }

    #[test]
    fn replications_are_reproducible_in_isolation() {
        let cfg = SimConfig { n: 10, ..SimConfig::default() };
        let a = gen_cohort(&cfg, 7).unwrap();
        let _ = gen_cohort(&cfg, 3).unwrap();
        let b = gen_cohort(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_cohort(&cfg, 8).unwrap());
    }

    #[test]
    fn tau_is_ordered() {
        let cfg = SimConfig::default();
        let (lo, hi) = percentiles_tau_with_size(&cfg, 20_000).unwrap();
        assert!(lo < hi);
    }

    #[test]
    fn single_rep_summary_has_nan_sd() {
        let rec = RepRecord {
            rep_index: 0,
            estimates: vec![RepEstimate { method: Method::Sl, beta: vec![0.6], se: vec![0.1], cov: vec![vec![0.01]] }],
            error: None,
        };
        let s = summarize(&[rec], &[0.5]).unwrap();
        let row = s.get(Method::Sl, 0).unwrap();
        assert!(row.se.is_nan());
        assert!((row.bias - 0.1).abs() < 1e-15);
        assert_eq!(row.re, 1.0);
        assert_eq!(row.cp, 1.0);
    }
}
