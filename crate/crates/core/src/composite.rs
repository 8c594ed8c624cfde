//! Composite likelihood working model for the surrogate outcome.
//!
//! A logistic regression for the left-censoring indicator on
//! `v_i = (1, H(L_i), z_i')'` shares `γ` with a Cox partial likelihood over the
//! subjects that are not left-censored:
//!
//! ```text
//! ℓ(θ) = Σ_i [y_i θ'v_i - log(1 + e^{θ'v_i})]
//!      + Σ_{δ*_i = 1} [γ'z_i - log Σ_{j ∈ R_i} e^{γ'z_j}],
//! R_i = { j : δ*_j ≠ 3, X*_j ≥ X*_i },   y_i = I(δ*_i = 3).
//! ```
//!
//! Ties among events share one denominator (Breslow). The objective is concave,
//! and is maximised by Newton's method with Armijo backtracking.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CensoringCode, EventData};
use crate::error::{Error, Result};
use crate::linalg;

/// Monotone transform `H` applied to the window start `L`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HTransform {
    #[default]
    Log,
    Identity,
}

impl HTransform {
    pub fn apply(self, l: f64) -> Result<f64> {
        match self {
            HTransform::Log if l > 0.0 => Ok(l.ln()),
            HTransform::Log => Err(Error::Domain(format!("log H needs positive L, got {l}"))),
            HTransform::Identity => Ok(l),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HTransform::Log => "log",
            HTransform::Identity => "identity",
        }
    }
}

impl std::str::FromStr for HTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(HTransform::Log),
            "identity" => Ok(HTransform::Identity),
            _ => Err(Error::Domain(format!("unknown H transform '{s}' (expected log or identity)"))),
        }
    }
}

/// Rows `v_i = (1, H(L_i), z_i')`.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignV {
    pub rows: DMatrix<f64>,
    pub h: HTransform,
}

impl DesignV {
    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

pub fn build_design(data: &EventData, h: HTransform) -> Result<DesignV> {
    let n = data.len();
    let p = data.p;
    let mut rows = DMatrix::zeros(n, p + 2);
    for i in 0..n {
        rows[(i, 0)] = 1.0;
        rows[(i, 1)] = h.apply(data.l[i]).map_err(|e| match e {
            Error::Domain(m) => Error::Domain(format!("subject {i}: {m}")),
            e => e,
        })?;
        for (j, z) in data.zi(i).iter().enumerate() {
            rows[(i, j + 2)] = *z;
        }
    }
    Ok(DesignV { rows, h })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CompositeOptions {
    pub max_iter: usize,
    /// Stop when the score sup-norm falls below this.
    pub tol: f64,
    /// `|α_0|` or `|α_1|` beyond this is treated as separation.
    pub alpha_bound: f64,
}

impl Default for CompositeOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8, alpha_bound: 30.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompositeFit {
    /// `(α_0, α_1, γ')`.
    pub theta: Vec<f64>,
    pub neg_loglik: f64,
    pub score_norm: f64,
    #[serde(skip)]
    pub hessian: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

impl CompositeFit {
    pub fn gamma(&self) -> &[f64] {
        &self.theta[2..]
    }
}

fn check_dims(theta: &[f64], data: &EventData, design: &DesignV) -> Result<()> {
    if design.rows.nrows() != data.len() || design.dim() != data.p + 2 || theta.len() != data.p + 2 {
        return Err(Error::Dimension(format!(
            "theta has {} entries, design is {}x{}, data has {} rows with p = {}",
            theta.len(),
            design.rows.nrows(),
            design.dim(),
            data.len(),
            data.p
        )));
    }
    Ok(())
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Risk-set sums at each distinct surrogate event time, shifted by a common
/// `exp(-c)` for stability.
pub(crate) struct CoxSums {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// Events at each time.
    pub d: Vec<f64>,
    pub s0: Vec<f64>,
    pub s1: Vec<Vec<f64>>,
    pub s2: Vec<DMatrix<f64>>,
    /// `Σ z_i` over the events at each time.
    pub zsum: Vec<Vec<f64>>,
    pub shift: f64,
}

pub(crate) fn cox_sums(gamma: &[f64], data: &EventData, second_order: bool) -> Result<CoxSums> {
    let p = data.p;
    let n = data.len();
    let eta: Vec<f64> = (0..n)
        .map(|i| data.zi(i).iter().zip(gamma).map(|(z, g)| z * g).sum())
        .collect();
    let at_risk: Vec<usize> = (0..n).filter(|&i| data.delta[i] != CensoringCode::Left).collect();
    let shift = at_risk.iter().map(|&i| eta[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut order = at_risk.clone();
    order.sort_by(|&a, &b| data.x[b].total_cmp(&data.x[a]));

    let mut times = Vec::new();
    let mut d = Vec::new();
    let mut s0 = Vec::new();
    let mut s1 = Vec::new();
    let mut s2 = Vec::new();
    let mut zsum = Vec::new();
    let mut a0 = 0.0;
    let mut a1 = vec![0.0; p];
    let mut a2 = DMatrix::zeros(if second_order { p } else { 0 }, if second_order { p } else { 0 });
    let mut pos = 0;
    while pos < order.len() {
        let t = data.x[order[pos]];
        let mut end = pos;
        let mut events = 0.0;
        let mut ez = vec![0.0; p];
        while end < order.len() && data.x[order[end]] == t {
            let i = order[end];
            let w = (eta[i] - shift).exp();
            let zi = data.zi(i);
            a0 += w;
            for a in 0..p {
                a1[a] += w * zi[a];
                if second_order {
                    for b in 0..p {
                        a2[(a, b)] += w * zi[a] * zi[b];
                    }
                }
            }
            if data.delta[i] == CensoringCode::Exact {
                events += 1.0;
                for (e, z) in ez.iter_mut().zip(zi) {
                    *e += z;
                }
            }
            end += 1;
        }
        if events > 0.0 {
            if !(a0 > 0.0 && a0.is_finite()) {
                return Err(Error::EmptyRiskSet(t));
            }
            times.push(t);
            d.push(events);
            s0.push(a0);
            s1.push(a1.clone());
            if second_order {
                s2.push(a2.clone());
            }
            zsum.push(ez);
        }
        pos = end;
    }
    times.reverse();
    d.reverse();
    s0.reverse();
    s1.reverse();
    s2.reverse();
    zsum.reverse();
    Ok(CoxSums { times, d, s0, s1, s2, zsum, shift })
}

/// Breslow log partial likelihood over the non-left-censored subjects.
pub fn cox_log_partial(gamma: &[f64], data: &EventData) -> Result<f64> {
    if gamma.len() != data.p {
        return Err(Error::Dimension(format!("gamma has {} entries, p = {}", gamma.len(), data.p)));
    }
    let s = cox_sums(gamma, data, false)?;
    Ok((0..s.times.len())
        .map(|m| {
            let lin: f64 = s.zsum[m].iter().zip(gamma).map(|(z, g)| z * g).sum();
            lin - s.d[m] * (s.s0[m].ln() + s.shift)
        })
        .sum())
}

fn logistic_parts(theta: &[f64], data: &EventData, design: &DesignV) -> (f64, Vec<f64>, Vec<f64>) {
    let n = data.len();
    let mut ll = 0.0;
    let mut y = Vec::with_capacity(n);
    let mut prob = Vec::with_capacity(n);
    for i in 0..n {
        let lin: f64 = design.rows.row(i).iter().zip(theta).map(|(v, t)| v * t).sum();
        let yi = if data.delta[i] == CensoringCode::Left { 1.0 } else { 0.0 };
        ll += yi * lin - log1p_exp(lin);
        y.push(yi);
        prob.push(sigmoid(lin));
    }
    (ll, y, prob)
}

/// `-(ℓ_1 + ℓ_2)` at `θ`.
pub fn composite_negloglik(theta: &[f64], data: &EventData, design: &DesignV) -> Result<f64> {
    check_dims(theta, data, design)?;
    let (l1, _, _) = logistic_parts(theta, data, design);
    let l2 = cox_log_partial(&theta[2..], data)?;
    Ok(-(l1 + l2))
}

/// Gradient of `ℓ_1 + ℓ_2` (the log-likelihood, not its negative).
pub fn composite_score(theta: &[f64], data: &EventData, design: &DesignV) -> Result<Vec<f64>> {
    check_dims(theta, data, design)?;
    let p = data.p;
    let (_, y, prob) = logistic_parts(theta, data, design);
    let mut g = vec![0.0; p + 2];
    for i in 0..data.len() {
        for (gj, v) in g.iter_mut().zip(design.rows.row(i).iter()) {
            *gj += (y[i] - prob[i]) * v;
        }
    }
    let s = cox_sums(&theta[2..], data, false)?;
    for m in 0..s.times.len() {
        for a in 0..p {
            g[a + 2] += s.zsum[m][a] - s.d[m] * s.s1[m][a] / s.s0[m];
        }
    }
    Ok(g)
}

/// Hessian of `ℓ_1 + ℓ_2`; negative semidefinite.
pub fn composite_hessian(theta: &[f64], data: &EventData, design: &DesignV) -> Result<DMatrix<f64>> {
    check_dims(theta, data, design)?;
    let p = data.p;
    let dim = p + 2;
    let (_, _, prob) = logistic_parts(theta, data, design);
    let mut h = DMatrix::zeros(dim, dim);
    for i in 0..data.len() {
        let w = prob[i] * (1.0 - prob[i]);
        let v = design.rows.row(i);
        for a in 0..dim {
            for b in 0..=a {
                h[(a, b)] -= w * v[a] * v[b];
            }
        }
    }
    let s = cox_sums(&theta[2..], data, true)?;
    for m in 0..s.times.len() {
        let zbar: Vec<f64> = s.s1[m].iter().map(|x| x / s.s0[m]).collect();
        for a in 0..p {
            for b in 0..=a {
                h[(a + 2, b + 2)] -= s.d[m] * (s.s2[m][(a, b)] / s.s0[m] - zbar[a] * zbar[b]);
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    Ok(h)
}

const ARMIJO_SHRINK: f64 = 0.5;
const ARMIJO_C: f64 = 1e-4;

/// Maximises the composite likelihood from `θ = 0`.
pub fn fit_composite(data: &EventData, design: &DesignV, opts: &CompositeOptions) -> Result<CompositeFit> {
    let dim = data.p + 2;
    let theta0 = vec![0.0; dim];
    check_dims(&theta0, data, design)?;
    if data.is_empty() {
        return Err(Error::InvalidData("no subjects".into()));
    }
    let mut warnings = Vec::new();
    let n_exact = data.delta.iter().filter(|d| **d == CensoringCode::Exact).count();
    let n_left = data.delta.iter().filter(|d| **d == CensoringCode::Left).count();
    if n_exact == 0 {
        warnings.push("no exact surrogate events: gamma is identified only through the logistic part".into());
    }
    if n_left == 0 {
        warnings.push("no left-censored surrogate outcomes: the logistic intercept diverges".into());
    }

    let mut theta = theta0;
    let mut f = composite_negloglik(&theta, data, design)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut score_norm;
    loop {
        let g = composite_score(&theta, data, design)?;
        score_norm = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if score_norm < opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;
        let info = -composite_hessian(&theta, data, design)?;
        let gv = DVector::from_vec(g.clone());
        let step = match linalg::solve_spd(&info, &gv) {
            Some(s) if s.iter().all(|x| x.is_finite()) => s,
            _ => {
                warnings.push("singular composite information; fell back to a gradient step".into());
                gv.clone()
            }
        };
        let slope: f64 = step.dot(&gv);
        // near the optimum the predicted decrease drops below the rounding noise of f
        let noise = 1e-12 * f.abs().max(1.0);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            if let Ok(fc) = composite_negloglik(&cand, data, design) {
                if fc.is_finite() && fc <= f - ARMIJO_C * t * slope + noise {
                    theta = cand;
                    f = fc;
                    moved = true;
                    break;
                }
            }
            t *= ARMIJO_SHRINK;
        }
        if !moved {
            warnings.push(format!("line search stalled at iteration {iterations}"));
            break;
        }
    }
    if theta[0].abs() > opts.alpha_bound || theta[1].abs() > opts.alpha_bound {
        converged = false;
        warnings.push(format!(
            "logistic coefficients ({:.3}, {:.3}) exceed {}: separation",
            theta[0], theta[1], opts.alpha_bound
        ));
    }
    let hessian = composite_hessian(&theta, data, design)?;
    Ok(CompositeFit { theta, neg_loglik: f, score_norm, hessian, converged, iterations, warnings })
}
