//! Two-parameter Mittag-Leffler function on the negative real axis,
//! `E_{a,b}(-x) = sum_k (-x)^k / Gamma(a k + b)` for `0 < a <= 2`, `b > 0`, `x >= 0`.
//!
//! Evaluation is split by `r = x^(1/a)`: a power series for small `r`, the
//! algebraic asymptotic expansion (plus the oscillating pole pair when `a > 1`)
//! for large `r`, and a real Hankel-contour integral in between.

use std::f64::consts::PI;

use thiserror::Error;

use crate::gamma::{cos_pi, ln_gamma_abs, rgamma, scaled_rgamma, sin_pi};
use crate::quad;

/// Series is used for `x^(1/alpha)` up to this value.
pub const SERIES_RADIUS: f64 = 3.0;
/// Asymptotic expansion is used once `r - 2 alpha ln r` exceeds this value.
pub const ASYMPTOTIC_MARGIN: f64 = 40.0;
/// For `alpha = 1` the asymptotic expansion takes over above this `x`.
pub const UNIT_ALPHA_ASYMPTOTIC: f64 = 50.0;

const INTEGRAL_CUTOFF: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Origin,
    Series,
    UnitAlpha,
    Integral,
    Recurrence,
    Asymptotic,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MlError {
    #[error("invalid Mittag-Leffler input: {0}")]
    Domain(String),
    #[error("Mittag-Leffler evaluation did not converge in the {regime:?} regime (alpha={alpha}, beta={beta}, x={x})")]
    NoConvergence {
        regime: Regime,
        alpha: f64,
        beta: f64,
        x: f64,
    },
}

/// A validated evaluation point for `E_{alpha,beta}(-x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlQuery {
    alpha: f64,
    beta: f64,
    x: f64,
}

impl MlQuery {
    pub fn new(alpha: f64, beta: f64, x: f64) -> Result<Self, MlError> {
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(MlError::Domain(format!("alpha must lie in (0, 2], got {alpha}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(MlError::Domain(format!("beta must be positive and finite, got {beta}")));
        }
        if !(x >= 0.0 && x.is_finite()) {
            return Err(MlError::Domain(format!("x must be finite and nonnegative, got {x}")));
        }
        Ok(Self { alpha, beta, x })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn x(&self) -> f64 {
        self.x
    }
}

/// `E_{alpha,beta}(-x)`.
pub fn ml_eval(q: MlQuery) -> Result<f64, MlError> {
    eval(q.alpha, q.beta, q.x).map(|(v, _)| v)
}

/// Validating shorthand for `ml_eval(MlQuery::new(alpha, beta, x)?)`.
pub fn mittag_leffler(alpha: f64, beta: f64, x: f64) -> Result<f64, MlError> {
    ml_eval(MlQuery::new(alpha, beta, x)?)
}

/// Value together with the regime that produced it.
pub fn ml_eval_traced(q: MlQuery) -> Result<(f64, Regime), MlError> {
    eval(q.alpha, q.beta, q.x)
}

/// `t^beta E_{alpha,beta+1}(-lambda t^alpha)`, the integral over `[0, t]` of
/// `s^(beta-1) E_{alpha,beta}(-lambda s^alpha)`.
pub fn ml_kernel_primitive(alpha: f64, beta: f64, lambda: f64, t: f64) -> Result<f64, MlError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(MlError::Domain(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(MlError::Domain(format!("t must be finite and nonnegative, got {t}")));
    }
    let q = MlQuery::new(alpha, beta + 1.0, lambda * t.powf(alpha))?;
    if !(beta > 0.0) {
        return Err(MlError::Domain(format!("beta must be positive, got {beta}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    Ok(t.powf(beta) * ml_eval(q)?)
}

/// Regime selected for a valid input.
pub fn regime(alpha: f64, beta: f64, x: f64) -> Regime {
    if x == 0.0 {
        return Regime::Origin;
    }
    if alpha == 1.0 {
        return if beta == 1.0 || x <= UNIT_ALPHA_ASYMPTOTIC {
            Regime::UnitAlpha
        } else {
            Regime::Asymptotic
        };
    }
    let r = x.powf(1.0 / alpha);
    if r <= SERIES_RADIUS {
        Regime::Series
    } else if r - 2.0 * alpha * r.ln() >= ASYMPTOTIC_MARGIN {
        Regime::Asymptotic
    } else if beta >= 1.0 + 0.5 * alpha && beta - alpha >= 0.25 {
        // the contour integral degenerates as beta approaches 1 + alpha
        Regime::Recurrence
    } else {
        Regime::Integral
    }
}

/// Smallest `x` at which the asymptotic expansion is used for this `alpha != 1`.
pub fn asymptotic_threshold(alpha: f64) -> f64 {
    let mut r = ASYMPTOTIC_MARGIN;
    for _ in 0..100 {
        r = ASYMPTOTIC_MARGIN + 2.0 * alpha * r.ln();
    }
    r.powf(alpha)
}

/// Largest `x` evaluated by the power series for this `alpha != 1`.
pub fn series_threshold(alpha: f64) -> f64 {
    SERIES_RADIUS.powf(alpha)
}

/// Evaluate with a prescribed regime instead of the automatic choice.
/// `Integral` and `Recurrence` both mean the bridging scheme. Used for
/// cross-regime continuity checks.
pub fn ml_eval_in_regime(q: MlQuery, reg: Regime) -> Result<f64, MlError> {
    let (alpha, beta, x) = (q.alpha, q.beta, q.x);
    let reg = match reg {
        Regime::Integral | Regime::Recurrence if beta >= 1.0 + 0.5 * alpha && beta - alpha >= 0.25 => {
            Regime::Recurrence
        }
        Regime::Recurrence => Regime::Integral,
        r => r,
    };
    evaluate_as(alpha, beta, x, reg)
}

fn eval(alpha: f64, beta: f64, x: f64) -> Result<(f64, Regime), MlError> {
    let reg = regime(alpha, beta, x);
    Ok((evaluate_as(alpha, beta, x, reg)?, reg))
}

fn evaluate_as(alpha: f64, beta: f64, x: f64, reg: Regime) -> Result<f64, MlError> {
    let v = match reg {
        Regime::Origin => rgamma(beta),
        Regime::UnitAlpha => unit_alpha(beta, x)?,
        Regime::Series => series(alpha, beta, x)?,
        Regime::Asymptotic => asymptotic(alpha, beta, x)?,
        Regime::Recurrence => {
            let lower = eval(alpha, beta - alpha, x)?.0;
            (rgamma(beta - alpha) - lower) / x
        }
        Regime::Integral => integral(alpha, beta, x)?,
    };
    if !v.is_finite() {
        return Err(MlError::NoConvergence { regime: reg, alpha, beta, x });
    }
    Ok(v)
}

/// Neumaier compensated accumulator.
#[derive(Default)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, v: f64) {
        let t = self.s + v;
        if self.s.abs() >= v.abs() {
            self.c += (self.s - t) + v;
        } else {
            self.c += (v - t) + self.s;
        }
        self.s = t;
    }
    fn value(&self) -> f64 {
        self.s + self.c
    }
}

fn series(alpha: f64, beta: f64, x: f64) -> Result<f64, MlError> {
    let r = x.powf(1.0 / alpha);
    let ln_x = x.ln();
    let mut sum = Sum::default();
    for k in 0..4000usize {
        let arg = alpha * k as f64 + beta;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let term = scaled_rgamma(arg, k as f64 * ln_x, sign);
        sum.add(term);
        if arg > r + 2.0 && term.abs() <= 1e-17 * sum.value().abs().max(1e-300) {
            return Ok(sum.value());
        }
    }
    Err(MlError::NoConvergence { regime: Regime::Series, alpha, beta, x })
}

/// `alpha = 1`: `E_{1,b}(-x) = e^{-x}/Gamma(b) sum_n x^n/n! (b-1)/(b-1+n)` for `b >= 1`.
fn unit_alpha(beta: f64, x: f64) -> Result<f64, MlError> {
    if beta == 1.0 {
        return Ok((-x).exp());
    }
    if beta > 1.0 {
        let b1 = beta - 1.0;
        let mut t = 1.0;
        let mut sum = Sum::default();
        sum.add(1.0);
        for n in 1..5000usize {
            let nf = n as f64;
            t *= x / nf;
            let term = t * b1 / (b1 + nf);
            sum.add(term);
            if nf > x && term <= 1e-17 * sum.value() {
                return Ok((-x).exp() * rgamma(beta) * sum.value());
            }
        }
        return Err(MlError::NoConvergence { regime: Regime::UnitAlpha, alpha: 1.0, beta, x });
    }
    if x <= SERIES_RADIUS {
        return series(1.0, beta, x);
    }
    Ok(rgamma(beta) - x * unit_alpha(beta + 1.0, x)?)
}

fn asymptotic(alpha: f64, beta: f64, x: f64) -> Result<f64, MlError> {
    let ln_x = x.ln();
    let mut sum = Sum::default();
    let residue = if alpha > 1.0 { pole_pair(alpha, beta, x) } else { 0.0 };
    let mut prev_envelope = f64::INFINITY;
    let mut last_envelope = 0.0;
    for k in 1..2000usize {
        let kf = k as f64;
        let z = beta - alpha * kf;
        let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
        // magnitude ignoring the sin factor of the reflection formula
        let envelope = if z < 0.5 {
            (ln_gamma_abs(1.0 - z) - PI.ln() - kf * ln_x).exp()
        } else {
            (-ln_gamma_abs(z) - kf * ln_x).exp()
        };
        if envelope > prev_envelope && k > 2 {
            break;
        }
        prev_envelope = envelope;
        last_envelope = envelope;
        sum.add(scaled_rgamma(z, -kf * ln_x, sign));
        let scale = sum.value().abs() + residue.abs() + 1e-300;
        if envelope <= 1e-18 * scale {
            return Ok(sum.value() + residue);
        }
    }
    let scale = sum.value().abs() + residue.abs() + 1e-300;
    if last_envelope <= 1e-13 * scale {
        Ok(sum.value() + residue)
    } else {
        Err(MlError::NoConvergence { regime: Regime::Asymptotic, alpha, beta, x })
    }
}

/// Contribution of the two poles `zeta = x^(1/a) e^{+-i pi/a}` enclosed when `a > 1`.
fn pole_pair(alpha: f64, beta: f64, x: f64) -> f64 {
    let r = x.powf(1.0 / alpha);
    let c = cos_pi(1.0 / alpha);
    let s = sin_pi(1.0 / alpha);
    let phase = r * s + (1.0 - beta) * PI / alpha;
    2.0 / alpha * x.powf((1.0 - beta) / alpha) * (r * c).exp() * phase.cos()
}

/// Collapsed Hankel contour: `E = int_0^inf K(rho) d rho` (+ pole pair for `a > 1`), with
/// `K = e^{-rho} rho^{a-b} [rho^a sin(pi b) + x sin(pi(b-a))] / (pi |rho^a + x e^{i pi a}|^2)`.
/// Requires `b < 1 + a`; used only for `b < 1 + a/2` or `b < a + 1/4`.
fn integral(alpha: f64, beta: f64, x: f64) -> Result<f64, MlError> {
    let c = alpha - beta;
    let sb = sin_pi(beta);
    let sba = sin_pi(beta - alpha);
    let ca = cos_pi(alpha);
    let sa = sin_pi(alpha);
    // kernel without the rho^c factor
    let g = |rho: f64| -> f64 {
        let ra = rho.powf(alpha);
        let num = ra * sb + x * sba;
        let d1 = ra + x * ca;
        let d2 = x * sa;
        (-rho).exp() * num / (d1 * d1 + d2 * d2) / PI
    };

    let mut breaks = Vec::new();
    let mut rho1 = 1.0f64;
    if ca < 0.0 {
        let rp = (-x * ca).powf(1.0 / alpha);
        if rp < INTEGRAL_CUTOFF {
            rho1 = rho1.min(0.5 * rp);
            let width = rp * sa.abs() / (alpha * ca.abs());
            for m in [64.0, 16.0, 4.0, 1.0] {
                breaks.push(rp - m * width);
            }
            breaks.push(rp);
            for m in [1.0, 4.0, 16.0, 64.0] {
                breaks.push(rp + m * width);
            }
        }
    }
    let mut points = vec![rho1];
    for b in breaks {
        if b > rho1 && b < INTEGRAL_CUTOFF && b > *points.last().unwrap() {
            points.push(b);
        }
    }
    points.push(INTEGRAL_CUTOFF);

    let head = quad::tanh_sinh(|rho, d0, _| d0.powf(c) * g(rho), 0.0, rho1, 1e-14);
    let tail = quad::integrate(|rho| rho.powf(c) * g(rho), &points, 0.0, 1e-14, 800);

    let value = head.value + tail.value;
    let err = head.error + tail.error;
    if !(err <= 1e-11 * value.abs() + 1e-300) && !(head.converged && tail.converged) {
        return Err(MlError::NoConvergence { regime: Regime::Integral, alpha, beta, x });
    }
    let residue = if alpha > 1.0 { pole_pair(alpha, beta, x) } else { 0.0 };
    Ok(value + residue)
}
