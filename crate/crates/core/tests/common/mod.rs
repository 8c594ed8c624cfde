//! Independent reference computations for the integration tests.
#![allow(dead_code)]

use dcssl::{CensoringCode, EventData};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, Gamma};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adaptive Simpson on `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1) + rec(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    rec(f, a, fa, b, fb, m, fm, whole, tol, 40)
}

/// `∫_0^∞ f(μ) φ(μ | r) dμ` with the gamma(1/r, 1/r) mixing density; a point
/// mass at 1 when `r = 0`.
pub fn frailty_expectation(f: &dyn Fn(f64) -> f64, r: f64) -> f64 {
    if r == 0.0 {
        return f(1.0);
    }
    let dist = Gamma::new(1.0 / r, 1.0 / r).unwrap();
    let g = |mu: f64| if mu <= 0.0 { 0.0 } else { f(mu) * dist.pdf(mu) };
    let cuts = [0.0, 0.25, 1.0, 3.0, 8.0, 20.0, 80.0];
    cuts.windows(2).map(|w| integrate(&g, w[0], w[1], 1e-15)).sum()
}

fn poisson_pmf(a: usize, m: f64) -> f64 {
    let mut p = (-m).exp();
    for j in 1..=a {
        p *= m / j as f64;
    }
    p
}

/// Posterior `(E(μ_i), E(N_ik) for all k, log P(observation))` for one subject,
/// from the latent model directly: given `μ`, `N_ik ~ Poisson(λ_k e^{z'β} μ)`
/// independently; the observation event is
/// exact: no count before `X`, exactly one at `X`; right: no count up to `X`;
/// left: at least one count up to `X`. Counts on `t_k ≤ X` are enumerated.
pub fn posterior_oracle(
    x: f64,
    delta: CensoringCode,
    lin: f64,
    times: &[f64],
    jumps: &[f64],
    r: f64,
) -> (f64, Vec<f64>, f64) {
    let e = lin.exp();
    let kk = times.len();
    let inside: Vec<usize> = (0..kk).filter(|&k| times[k] <= x).collect();
    let own = if delta == CensoringCode::Exact {
        Some(inside.iter().cloned().find(|&k| times[k] == x).expect("exact time on grid"))
    } else {
        None
    };
    let v_of = |mu: f64| -> f64 { inside.iter().map(|&k| jumps[k] * e * mu).sum() };
    let prob = |mu: f64| -> f64 {
        let v = v_of(mu);
        match delta {
            CensoringCode::Exact => (-v).exp() * jumps[own.unwrap()] * e * mu,
            CensoringCode::Right => (-v).exp(),
            CensoringCode::Left => -(-v).exp_m1(),
        }
    };
    // E[N_k 1_A | μ] by enumerating N_k; the other counts on t ≤ X enter only
    // through their total, which is Poisson(V - m_k).
    let count_mass = |k: usize, mu: f64| -> f64 {
        let m = jumps[k] * e * mu;
        if times[k] > x {
            return m * prob(mu);
        }
        let rest = v_of(mu) - m;
        let mut s = 0.0;
        for a in 1..=80usize {
            let pa = poisson_pmf(a, m);
            let p_obs = match delta {
                CensoringCode::Exact => {
                    if Some(k) == own && a == 1 {
                        (-rest).exp()
                    } else {
                        0.0
                    }
                }
                CensoringCode::Right => 0.0,
                CensoringCode::Left => 1.0,
            };
            s += a as f64 * pa * p_obs;
        }
        s
    };
    let z = frailty_expectation(&prob, r);
    let emu = frailty_expectation(&|mu| mu * prob(mu), r) / z;
    let en = (0..kk).map(|k| frailty_expectation(&|mu| count_mass(k, mu), r) / z).collect();
    (emu, en, z.ln())
}

/// Random doubly censored data set with all three codes present.
pub fn random_fixture(seed: u64, n: usize, p: usize) -> EventData {
    let mut g = rng(seed);
    loop {
        let mut x = Vec::with_capacity(n);
        let mut delta = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n * p);
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            let zi: Vec<f64> = (0..p).map(|_| g.random_range(-1.5..1.5)).collect();
            let lin: f64 = zi.iter().enumerate().map(|(j, v)| v * (0.4 - 0.3 * j as f64)).sum();
            let t = -(g.random::<f64>().max(1e-12)).ln() * (-lin).exp();
            let lo = g.random_range(0.05..0.4);
            let hi = lo + g.random_range(0.5..2.5);
            let (xi, di) = if t < lo {
                (lo, CensoringCode::Left)
            } else if t > hi {
                (hi, CensoringCode::Right)
            } else {
                (t, CensoringCode::Exact)
            };
            x.push(xi);
            delta.push(di);
            l.push(lo);
            z.extend(zi);
        }
        let has = |c| delta.iter().filter(|d| **d == c).count() >= 2;
        if has(CensoringCode::Exact) && has(CensoringCode::Left) && has(CensoringCode::Right) {
            let d = EventData::new(x, delta, z, p, Some(l)).unwrap();
            if d.check_covariate_rank().is_ok() {
                return d;
            }
        }
    }
}

/// Right-censored data (no left censoring) from a PH model.
pub fn right_censored_fixture(seed: u64, n: usize, beta: &[f64]) -> EventData {
    let p = beta.len();
    let mut g = rng(seed);
    let mut x = Vec::new();
    let mut delta = Vec::new();
    let mut z = Vec::new();
    let mut l = Vec::new();
    for _ in 0..n {
        let zi: Vec<f64> = (0..p).map(|_| g.random_range(-1.0..1.0)).collect();
        let lin: f64 = zi.iter().zip(beta).map(|(a, b)| a * b).sum();
        let t = -(g.random::<f64>().max(1e-12)).ln() * (-lin).exp();
        let c = g.random_range(0.3..3.0);
        let lo = g.random_range(0.001f64..0.01).min(t * 0.5);
        if t <= c {
            x.push(t);
            delta.push(CensoringCode::Exact);
        } else {
            x.push(c);
            delta.push(CensoringCode::Right);
        }
        l.push(lo);
        z.extend(zi);
    }
    EventData::new(x, delta, z, p, Some(l)).unwrap()
}

/// Straightforward O(n²) Cox model with Breslow ties over the subjects with
/// `at_risk[i]`; events are `delta == Exact`.
pub struct CoxOracle<'a> {
    pub data: &'a EventData,
}

impl CoxOracle<'_> {
    fn included(&self, j: usize) -> bool {
        self.data.delta[j] != CensoringCode::Left
    }

    fn lin(&self, beta: &[f64], i: usize) -> f64 {
        self.data.zi(i).iter().zip(beta).map(|(a, b)| a * b).sum()
    }

    pub fn loglik(&self, beta: &[f64]) -> f64 {
        let d = self.data;
        let mut ll = 0.0;
        for i in 0..d.len() {
            if d.delta[i] != CensoringCode::Exact {
                continue;
            }
            let s0: f64 = (0..d.len())
                .filter(|&j| self.included(j) && d.x[j] >= d.x[i])
                .map(|j| self.lin(beta, j).exp())
                .sum();
            ll += self.lin(beta, i) - s0.ln();
        }
        ll
    }

    /// `(score, information)` at `beta`.
    pub fn derivatives(&self, beta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.data;
        let p = d.p;
        let mut g = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for i in 0..d.len() {
            if d.delta[i] != CensoringCode::Exact {
                continue;
            }
            let mut s0 = 0.0;
            let mut s1 = DVector::zeros(p);
            let mut s2 = DMatrix::zeros(p, p);
            for j in 0..d.len() {
                if self.included(j) && d.x[j] >= d.x[i] {
                    let w = self.lin(beta, j).exp();
                    let zj = DVector::from_column_slice(d.zi(j));
                    s0 += w;
                    s1 += &zj * w;
                    s2 += &zj * zj.transpose() * w;
                }
            }
            let zbar = &s1 / s0;
            g += DVector::from_column_slice(d.zi(i)) - &zbar;
            info += s2 / s0 - &zbar * zbar.transpose();
        }
        (g, info)
    }

    pub fn fit(&self) -> Vec<f64> {
        let mut beta = vec![0.0; self.data.p];
        for _ in 0..100 {
            let (g, info) = self.derivatives(&beta);
            let step = info.clone().lu().solve(&g).unwrap();
            for (b, s) in beta.iter_mut().zip(step.iter()) {
                *b += s;
            }
            if step.amax() < 1e-14 {
                break;
            }
        }
        beta
    }

    /// Breslow cumulative hazard at each distinct event time.
    pub fn breslow(&self, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.data;
        let mut times: Vec<f64> = (0..d.len()).filter(|&i| d.delta[i] == CensoringCode::Exact).map(|i| d.x[i]).collect();
        times.sort_by(|a, b| a.total_cmp(b));
        times.dedup();
        let mut cum = 0.0;
        let mut out = Vec::new();
        for &t in &times {
            let events = (0..d.len()).filter(|&i| d.delta[i] == CensoringCode::Exact && d.x[i] == t).count() as f64;
            let s0: f64 = (0..d.len())
                .filter(|&j| self.included(j) && d.x[j] >= t)
                .map(|j| self.lin(beta, j).exp())
                .sum();
            cum += events / s0;
            out.push(cum);
        }
        (times, out)
    }

    /// Classical influence rows `(I/n)⁻¹ ∫ (z_i − z̄) dM̂_i`.
    pub fn influence(&self, beta: &[f64]) -> DMatrix<f64> {
        let d = self.data;
        let n = d.len();
        let p = d.p;
        let (times, _) = self.breslow(beta);
        let (_, info) = self.derivatives(beta);
        let mut resid = DMatrix::<f64>::zeros(n, p);
        for &t in &times {
            let events = (0..n).filter(|&i| d.delta[i] == CensoringCode::Exact && d.x[i] == t).count() as f64;
            let mut s0 = 0.0;
            let mut s1 = DVector::zeros(p);
            for j in 0..n {
                if self.included(j) && d.x[j] >= t {
                    let w = self.lin(beta, j).exp();
                    s0 += w;
                    s1 += DVector::from_column_slice(d.zi(j)) * w;
                }
            }
            let zbar = s1 / s0;
            let dl = events / s0;
            for i in 0..n {
                let zi = DVector::from_column_slice(d.zi(i));
                let dev = &zi - &zbar;
                let mut dm = 0.0;
                if d.delta[i] == CensoringCode::Exact && d.x[i] == t {
                    dm += 1.0;
                }
                if self.included(i) && d.x[i] >= t {
                    dm -= self.lin(beta, i).exp() * dl;
                }
                for a in 0..p {
                    resid[(i, a)] += dev[a] * dm;
                }
            }
        }
        let a = info / n as f64;
        let a_inv = a.try_inverse().unwrap();
        resid * a_inv.transpose()
    }
}

/// Central-difference gradient.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[j] += h;
            b[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
