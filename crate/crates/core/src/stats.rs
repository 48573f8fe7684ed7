//! Streaming moments, Welch's t-test, multiple-comparison thresholds and
//! two one-sided equivalence tests.
//!
//! All accumulation happens in `f64` regardless of the storage precision of
//! the traces.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Above this many degrees of freedom the Student distribution is replaced by
/// the standard normal.
pub const GAUSSIAN_DOF: f64 = 1.0e4;

/// Conventional fixed-vs-random threshold for a single comparison.
pub const TVLA_THRESHOLD: f64 = 4.5;

/// Running count, mean and sum of squared deviations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    /// Welford update. Non-finite samples are rejected and leave `self`
    /// untouched.
    pub fn update(&mut self, x: f64) -> Result<()> {
        if !x.is_finite() {
            return Err(Error::NonFinite(x));
        }
        self.push(x);
        Ok(())
    }

    #[inline]
    pub(crate) fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn from_slice(xs: &[f64]) -> Result<Self> {
        let mut m = Self::new();
        for &x in xs {
            m.update(x)?;
        }
        Ok(m)
    }

    /// Builds moments from a block's raw sums. The caller guarantees the sums
    /// come from roughly centred data so that the subtraction is benign.
    #[inline]
    pub(crate) fn from_sums(n: u64, sum: f64, sum_sq: f64) -> Self {
        if n == 0 {
            return Self::default();
        }
        let mean = sum / n as f64;
        let m2 = (sum_sq - sum * mean).max(0.0);
        Self { n, mean, m2 }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let (na, nb, nf) = (self.n as f64, other.n as f64, n as f64);
        let delta = other.mean - self.mean;
        Moments {
            n,
            mean: self.mean + delta * nb / nf,
            m2: self.m2 + other.m2 + delta * delta * na * nb / nf,
        }
    }

    /// Unbiased sample variance, `None` for fewer than two samples.
    pub fn variance(&self) -> Option<f64> {
        (self.n >= 2).then(|| self.m2 / (self.n - 1) as f64)
    }

    pub fn std_dev(&self) -> Option<f64> {
        self.variance().map(f64::sqrt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    /// Signed statistic; `±inf` when both populations are constant with
    /// different values.
    pub t: f64,
    pub dof: f64,
}

impl WelchResult {
    pub fn is_infinite(&self) -> bool {
        self.t.is_infinite()
    }
}

/// Welch's unequal-variance t statistic and its Welch–Satterthwaite degrees
/// of freedom. The sign of `t` follows `a.mean - b.mean`.
pub fn welch_t(a: &Moments, b: &Moments) -> Result<WelchResult> {
    if a.n < 2 || b.n < 2 {
        return Err(Error::invalid(format!(
            "welch_t needs at least two samples per population (got {} and {})",
            a.n, b.n
        )));
    }
    Ok(welch_unchecked(a, b))
}

#[inline]
pub(crate) fn welch_unchecked(a: &Moments, b: &Moments) -> WelchResult {
    let (na, nb) = (a.n as f64, b.n as f64);
    let qa = a.m2 / (na - 1.0) / na;
    let qb = b.m2 / (nb - 1.0) / nb;
    let se2 = qa + qb;
    let diff = a.mean - b.mean;
    if se2 <= 0.0 {
        let t = if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(diff)
        };
        return WelchResult {
            t,
            dof: na + nb - 2.0,
        };
    }
    let dof = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    WelchResult {
        t: diff / se2.sqrt(),
        dof,
    }
}

/// Probability that `|T| > t` for a Student variable with `dof` degrees of
/// freedom (standard normal beyond [`GAUSSIAN_DOF`]).
pub fn two_sided_tail(t: f64, dof: f64) -> f64 {
    let t = t.abs();
    if t == 0.0 {
        return 1.0;
    }
    if !t.is_finite() {
        return 0.0;
    }
    if !(dof <= GAUSSIAN_DOF) {
        return erfc(t / std::f64::consts::SQRT_2);
    }
    beta_reg(dof / 2.0, 0.5, dof / (dof + t * t))
}

/// Smallest `t >= 0` with `P(|T| > t) <= p`, found by bisection on the
/// regularised incomplete beta tail.
pub fn two_sided_quantile(p: f64, dof: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("tail probability {p} outside (0, 1)")));
    }
    if !(dof > 0.0) {
        return Err(Error::invalid(format!("degrees of freedom {dof} must be positive")));
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while two_sided_tail(hi, dof) > p {
        lo = hi;
        hi *= 2.0;
        if hi > 1.0e300 {
            return Err(Error::invalid(format!("quantile for p={p}, dof={dof} diverges")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if two_sided_tail(mid, dof) > p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1.0e-13 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One-sided critical value `t_alpha` with `P(T > t_alpha) = alpha`.
pub fn one_sided_quantile(alpha: f64, dof: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::invalid(format!("one-sided alpha {alpha} outside (0, 0.5)")));
    }
    two_sided_quantile(2.0 * alpha, dof)
}

/// Threshold on `|t|` that keeps the family-wise false-positive rate at
/// `alpha` over `n_comparisons` independent tests: the per-test level is
/// `1 - (1 - alpha)^(1/n)` and the threshold is the matching two-sided
/// quantile.
pub fn corrected_threshold(n_comparisons: u64, alpha: f64, dof: f64) -> Result<f64> {
    if n_comparisons == 0 {
        return Err(Error::invalid("corrected_threshold needs at least one comparison"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    let per_test = -((-alpha).ln_1p() / n_comparisons as f64).exp_m1();
    two_sided_quantile(per_test, dof)
}

/// Equivalence bounds around a target mean difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TostBounds {
    pub target_mu: f64,
    pub s: f64,
    pub n: u64,
    pub alpha: f64,
    pub t_alpha: f64,
    pub lower: f64,
    pub upper: f64,
    /// Set when the mean-difference distribution had zero spread and the
    /// bounds collapsed onto the target.
    pub degenerate: bool,
}

impl TostBounds {
    /// `mu ± t_alpha · s / sqrt(n)` with `t_alpha` the one-sided Student
    /// quantile at `alpha` and `n - 1` degrees of freedom.
    pub fn from_parts(target_mu: f64, s: f64, n: u64, alpha: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("TOST bounds need at least two mean differences"));
        }
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::invalid(format!("bad standard deviation {s}")));
        }
        let t_alpha = one_sided_quantile(alpha, (n - 1) as f64)?;
        let half = t_alpha * s / (n as f64).sqrt();
        Ok(Self {
            target_mu,
            s,
            n,
            alpha,
            t_alpha,
            lower: target_mu - half,
            upper: target_mu + half,
            degenerate: s == 0.0,
        })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

pub fn tost_bounds(mu: f64, mean_diff_samples: &[f64], alpha: f64) -> Result<TostBounds> {
    let m = Moments::from_slice(mean_diff_samples)?;
    let s = m
        .std_dev()
        .ok_or_else(|| Error::invalid("TOST bounds need at least two mean differences"))?;
    TostBounds::from_parts(mu, s, m.n, alpha)
}

/// Two one-sided Welch tests: true when the fixed-minus-random mean
/// difference is significantly below `bounds.upper` and significantly above
/// `bounds.lower`.
pub fn not_leaky(z_fixed: &[f64], z_random: &[f64], bounds: &TostBounds) -> Result<bool> {
    let f = Moments::from_slice(z_fixed)?;
    let r = Moments::from_slice(z_random)?;
    not_leaky_moments(&f, &r, bounds)
}

pub fn not_leaky_moments(fixed: &Moments, random: &Moments, bounds: &TostBounds) -> Result<bool> {
    if fixed.n < 2 || random.n < 2 {
        return Err(Error::invalid("not_leaky needs at least two samples per class"));
    }
    let (nf, nr) = (fixed.n as f64, random.n as f64);
    let qf = fixed.m2 / (nf - 1.0) / nf;
    let qr = random.m2 / (nr - 1.0) / nr;
    let se2 = qf + qr;
    let diff = fixed.mean - random.mean;
    if se2 <= 0.0 {
        return Ok(bounds.lower <= diff && diff <= bounds.upper);
    }
    let se = se2.sqrt();
    let dof = se2 * se2 / (qf * qf / (nf - 1.0) + qr * qr / (nr - 1.0));
    let crit = one_sided_quantile(bounds.alpha, dof)?;
    let below_upper = (diff - bounds.upper) / se <= -crit;
    let above_lower = (diff - bounds.lower) / se >= crit;
    Ok(below_upper && above_lower)
}
