//! Differential certificates for arbitrary additive smoothing.
//!
//! `Omega(p)` bounds how fast the smoothed mass of any set with mass `p` can
//! grow per unit of shift, and `F(beta) = integral_beta^{1/2} 1/Omega(p) dp`
//! integrates it. Moving the input by `r` can move `F` of the smoothed value
//! by at most `r`, so
//!
//! ```text
//! c_up[beta, r]   = sup { b : F(b) >= F(beta) - r }
//! c_down[beta, r] = inf { b : F(1 - b) >= F(1 - beta) - r } = 1 - c_up[1 - beta, r]
//! ```
//!
//! Every supported scheme has a symmetric `Omega` (`Omega(p) = Omega(1 - p)`),
//! hence `F(1 - beta) = -F(beta)` and `c_up`, `c_down` are inverse maps.

use super::{check_probability, check_radius, Certified, SmoothingSpec};
use crate::error::{domain, Result};
use crate::normal;

const BISECTION_TOL: f64 = 1e-10;
const BISECTION_MAX_ITER: usize = 200;

/// Growth bound `Omega(p)` for `p` in `(0, 1)`.
///
/// * Gaussian: `phi_sigma(Phi_sigma^-1(1 - p))`.
/// * Laplace: `min(p, 1 - p) / scale`.
/// * Uniform: `1 / (2 half_width)`, constant.
pub fn omega(p: f64, smoothing: &SmoothingSpec) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(domain(format!("p must be in (0,1), got {p}")));
    }
    Ok(match smoothing.validated()? {
        // phi is even, so phi(Phi^-1(1 - p)) = phi(Phi^-1(p)).
        SmoothingSpec::Gaussian { sigma } => normal::pdf(normal::quantile(p)) / sigma,
        SmoothingSpec::Laplace { scale } => p.min(1.0 - p) / scale,
        SmoothingSpec::Uniform { half_width } => 0.5 / half_width,
    })
}

/// `F(beta)` on `(0, 1/2]`; zero at `1/2` and decreasing.
pub fn f_integral(beta: f64, smoothing: &SmoothingSpec) -> Result<f64> {
    if !(beta > 0.0 && beta <= 0.5) {
        return Err(domain(format!("beta must be in (0, 0.5], got {beta}")));
    }
    Ok(signed_f(beta, &smoothing.validated()?))
}

/// `F` extended to `[0, 1]` through `F(1 - b) = -F(b)`.
pub(crate) fn signed_f(beta: f64, smoothing: &SmoothingSpec) -> f64 {
    match *smoothing {
        SmoothingSpec::Gaussian { sigma } => -sigma * normal::quantile(beta),
        SmoothingSpec::Laplace { scale } => {
            if beta <= 0.5 {
                -scale * (2.0 * beta).ln()
            } else {
                scale * (2.0 * (1.0 - beta)).ln()
            }
        }
        SmoothingSpec::Uniform { half_width } => half_width * (1.0 - 2.0 * beta),
    }
}

/// Closed-form `F^-1(y)`; saturates (vacuous) when `y` is below `F(1)`.
fn inverse_f(y: f64, smoothing: &SmoothingSpec) -> Certified {
    match *smoothing {
        SmoothingSpec::Gaussian { sigma } => Certified::exact(normal::sf(y / sigma)),
        SmoothingSpec::Laplace { scale } => {
            let v = if y >= 0.0 {
                0.5 * (-y / scale).exp()
            } else {
                1.0 - 0.5 * (y / scale).exp()
            };
            Certified::exact(v)
        }
        SmoothingSpec::Uniform { half_width } => {
            let v = 0.5 * (1.0 - y / half_width);
            if v >= 1.0 {
                Certified {
                    value: 1.0,
                    vacuous: true,
                }
            } else {
                Certified::exact(v.max(0.0))
            }
        }
    }
}

fn check_inputs(beta: f64, smoothing: &SmoothingSpec, radius: f64) -> Result<()> {
    check_probability(beta)?;
    smoothing.validated()?;
    check_radius(radius)
}

/// `c_up[beta, r] = sup { b : F(b) >= F(beta) - r }` through the closed-form
/// inverse of `F`. Nondecreasing in `beta` and in `radius`.
pub fn omega_upper(beta: f64, smoothing: &SmoothingSpec, radius: f64) -> Result<Certified> {
    check_inputs(beta, smoothing, radius)?;
    if beta == 0.0 || beta == 1.0 || radius == 0.0 {
        return Ok(Certified::exact(beta));
    }
    let target = signed_f(beta, smoothing) - radius;
    let mut out = inverse_f(target, smoothing);
    out.value = out.value.clamp(beta, 1.0);
    Ok(out)
}

/// `c_down[beta, r]`, the mirror of [`omega_upper`]: `1 - c_up[1 - beta, r]`.
pub fn omega_lower(beta: f64, smoothing: &SmoothingSpec, radius: f64) -> Result<Certified> {
    check_inputs(beta, smoothing, radius)?;
    if beta == 0.0 || beta == 1.0 || radius == 0.0 {
        return Ok(Certified::exact(beta));
    }
    let up = omega_upper(1.0 - beta, smoothing, radius)?;
    Ok(Certified {
        value: (1.0 - up.value).clamp(0.0, beta),
        vacuous: up.vacuous,
    })
}

/// Same supremum as [`omega_upper`] found by bisection on `F` alone.
///
/// This path needs nothing but an evaluable, decreasing `F`, so it is what a
/// new scheme without a closed-form inverse would use. The bracket keeps a
/// feasible lower end and an infeasible upper end; the upper end is returned
/// so the bound errs on the conservative (larger) side.
pub fn omega_upper_bisection(
    beta: f64,
    smoothing: &SmoothingSpec,
    radius: f64,
) -> Result<Certified> {
    check_inputs(beta, smoothing, radius)?;
    if beta == 0.0 || beta == 1.0 || radius == 0.0 {
        return Ok(Certified::exact(beta));
    }
    let target = signed_f(beta, smoothing) - radius;
    let feasible = |b: f64| signed_f(b, smoothing) >= target;
    if feasible(1.0) {
        // F(1) is finite only for uniform smoothing.
        return Ok(Certified {
            value: 1.0,
            vacuous: true,
        });
    }
    let (_, hi) = bisect_boundary(beta, 1.0, feasible);
    Ok(Certified::exact(hi))
}

/// Bisection for the boundary of a predicate that holds on `[lo, x*)` and
/// fails on `(x*, hi]`. Returns the final `(feasible, infeasible)` bracket.
pub(crate) fn bisect_boundary(
    mut lo: f64,
    mut hi: f64,
    holds: impl Fn(f64) -> bool,
) -> (f64, f64) {
    for _ in 0..BISECTION_MAX_ITER {
        if hi - lo <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, hi)
}
