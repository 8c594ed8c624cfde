//! The transformation class `G(x, r) = log(1 + r x) / r` and its gamma frailty.
//!
//! `r = 0` is the proportional hazards limit `G(x) = x`; `r = 1` gives
//! proportional odds. For every `r` the function `exp(-G(v, r))` is the Laplace
//! transform of a gamma frailty with shape `1/r` and rate `1/r` (a point mass at
//! one when `r = 0`), which is what makes the E-step moments closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this `r` the closed forms are replaced by their second-order series.
const SERIES_R: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TransformParam(f64);

impl TryFrom<f64> for TransformParam {
    type Error = Error;

    fn try_from(r: f64) -> Result<Self> {
        Self::new(r)
    }
}

impl From<TransformParam> for f64 {
    fn from(t: TransformParam) -> f64 {
        t.0
    }
}

/// Frailty integrals `∫ μ^j e^{-μ v} φ(μ | r) dμ` for `j = 0, 1, 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrailtyMoments {
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
}

impl TransformParam {
    pub const PH: TransformParam = TransformParam(0.0);
    pub const PO: TransformParam = TransformParam(1.0);

    pub fn new(r: f64) -> Result<Self> {
        if r.is_finite() && r >= 0.0 {
            Ok(Self(r))
        } else {
            Err(Error::Domain(format!("transformation index r must be finite and >= 0, got {r}")))
        }
    }

    pub fn r(self) -> f64 {
        self.0
    }

    fn check_nonneg(x: f64, what: &str) -> Result<()> {
        if x >= 0.0 {
            Ok(())
        } else {
            Err(Error::Domain(format!("{what} must be >= 0, got {x}")))
        }
    }

    pub fn g(self, x: f64) -> Result<f64> {
        Self::check_nonneg(x, "G argument")?;
        Ok(self.g_raw(x))
    }

    pub fn g_prime(self, x: f64) -> Result<f64> {
        Self::check_nonneg(x, "G' argument")?;
        Ok(self.g_prime_raw(x))
    }

    pub fn g_inv(self, y: f64) -> Result<f64> {
        Self::check_nonneg(y, "G inverse argument")?;
        Ok(self.g_inv_raw(y))
    }

    #[inline]
    pub(crate) fn g_raw(self, x: f64) -> f64 {
        let r = self.0;
        if r == 0.0 {
            x
        } else if r < SERIES_R {
            x - r * x * x / 2.0 + r * r * x * x * x / 3.0
        } else {
            (r * x).ln_1p() / r
        }
    }

    #[inline]
    pub(crate) fn g_prime_raw(self, x: f64) -> f64 {
        let r = self.0;
        if r == 0.0 {
            1.0
        } else if r < SERIES_R {
            1.0 - r * x + r * r * x * x
        } else {
            1.0 / (1.0 + r * x)
        }
    }

    #[inline]
    pub(crate) fn g_inv_raw(self, y: f64) -> f64 {
        let r = self.0;
        if r == 0.0 {
            y
        } else if r < SERIES_R {
            y + r * y * y / 2.0 + r * r * y * y * y / 6.0
        } else {
            (r * y).exp_m1() / r
        }
    }

    /// Survival function of the model error: `exp(-G(exp(x)))`.
    pub fn eps_survival(self, x: f64) -> f64 {
        (-self.g_raw(x.exp())).exp()
    }

    /// Inverse-transform draw of the model error from a uniform `u ∈ (0, 1)`.
    pub fn sample_eps(self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Domain(format!("uniform draw must lie in (0, 1), got {u}")));
        }
        Ok(self.sample_eps_raw(u))
    }

    #[inline]
    pub(crate) fn sample_eps_raw(self, u: f64) -> f64 {
        self.g_inv_raw(-u.ln()).ln()
    }

    pub fn frailty_moments(self, v: f64) -> Result<FrailtyMoments> {
        Self::check_nonneg(v, "cumulative intensity")?;
        Ok(self.moments_raw(v))
    }

    #[inline]
    pub(crate) fn moments_raw(self, v: f64) -> FrailtyMoments {
        let r = self.0;
        let g = self.g_raw(v);
        let m0 = (-g).exp();
        let m1 = self.g_prime_raw(v) * m0;
        // (1 + r)(1 + r v)^(-1/r - 2) = (1 + r) exp(-G - 2 log(1 + r v))
        let log1p_rv = if r < SERIES_R { r * v - r * r * v * v / 2.0 } else { (r * v).ln_1p() };
        let m2 = (1.0 + r) * (-g - 2.0 * log1p_rv).exp();
        FrailtyMoments { m0, m1, m2 }
    }

    /// `log(1 - exp(-G(v)))` without cancellation for small `v`.
    #[inline]
    pub(crate) fn log_one_minus_m0(self, v: f64) -> f64 {
        let g = self.g_raw(v);
        (-(-g).exp_m1()).ln()
    }

    /// `1 - exp(-G(v))` without cancellation for small `v`.
    #[inline]
    pub(crate) fn one_minus_m0(self, v: f64) -> f64 {
        -(-self.g_raw(v)).exp_m1()
    }

    pub fn kernel(self) -> FrailtyKernel {
        FrailtyKernel { r: self }
    }
}

impl Default for TransformParam {
    fn default() -> Self {
        Self::PH
    }
}

/// The gamma(1/r, 1/r) mixing density whose Laplace transform is `exp(-G)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrailtyKernel {
    r: TransformParam,
}

impl FrailtyKernel {
    /// Density at `mu`; `None` for the degenerate point mass at `r = 0`.
    pub fn density(&self, mu: f64) -> Option<f64> {
        let r = self.r.r();
        if r == 0.0 {
            return None;
        }
        if mu <= 0.0 {
            return Some(0.0);
        }
        let a = 1.0 / r;
        let log = a * a.ln() + (a - 1.0) * mu.ln() - a * mu - statrs::function::gamma::ln_gamma(a);
        Some(log.exp())
    }

    pub fn laplace(&self, v: f64) -> f64 {
        (-self.r.g_raw(v)).exp()
    }
}
