//! Certified bounds on smoothed binary functions.
//!
//! For a binary function whose smoothed value at the clean input is `beta`,
//! [`lower_bound`] returns the smallest value the smoothed function can take
//! anywhere in the threat ball and [`upper_bound`] the largest. Gaussian
//! smoothing against the l2 ball has a closed form; Laplace and uniform
//! smoothing go through the differential `Omega`/`F` engine in [`omega`].
//! [`knapsack`] holds the region-based linear program used as an oracle.
//!
//! All supported smoothing schemes are symmetric, so the ball equals its
//! inverse and one radius serves both directions.

pub mod knapsack;
pub mod omega;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::error::{domain, Error, Result};
use crate::normal;

pub use knapsack::{knapsack_lower, RegionSystem};
pub use omega::{f_integral, omega, omega_lower, omega_upper, omega_upper_bisection};

/// Additive smoothing distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SmoothingSpec {
    /// Isotropic `N(0, sigma^2 I)`; `sigma` is the per-coordinate standard deviation.
    Gaussian { sigma: f64 },
    /// I.i.d. Laplace with scale `scale` (density `exp(-|x|/scale) / (2 scale)`).
    Laplace { scale: f64 },
    /// I.i.d. `Uniform[-half_width, half_width]`.
    Uniform { half_width: f64 },
}

impl SmoothingSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::Gaussian { sigma }.validated()
    }

    pub fn laplace(scale: f64) -> Result<Self> {
        Self::Laplace { scale }.validated()
    }

    pub fn uniform(half_width: f64) -> Result<Self> {
        Self::Uniform { half_width }.validated()
    }

    /// Uniform smoothing with the same standard deviation as `N(0, sigma^2)`.
    pub fn uniform_sigma_matched(sigma: f64) -> Result<Self> {
        Self::uniform(sigma * 3f64.sqrt())
    }

    pub fn validated(self) -> Result<Self> {
        let p = self.parameter();
        if !(p.is_finite() && p > 0.0) {
            return Err(domain(format!(
                "{} parameter must be finite and > 0, got {p}",
                self.name()
            )));
        }
        Ok(self)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian { .. } => "gaussian",
            Self::Laplace { .. } => "laplace",
            Self::Uniform { .. } => "uniform",
        }
    }

    /// The scheme's single scale parameter (sigma, scale, or half-width).
    pub fn parameter(&self) -> f64 {
        match *self {
            Self::Gaussian { sigma } => sigma,
            Self::Laplace { scale } => scale,
            Self::Uniform { half_width } => half_width,
        }
    }

    /// Rebuild from a `name()` / `parameter()` pair.
    pub fn from_parts(name: &str, parameter: f64) -> Result<Self> {
        match name {
            "gaussian" => Self::gaussian(parameter),
            "laplace" => Self::laplace(parameter),
            "uniform" => Self::uniform(parameter),
            other => Err(domain(format!("unknown smoothing scheme '{other}'"))),
        }
    }

    /// Draw one `dim`-dimensional noise vector.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, dim: usize) -> Vec<f64> {
        match *self {
            Self::Gaussian { sigma } => {
                let dist = Normal::new(0.0, sigma).expect("validated sigma");
                (0..dim).map(|_| dist.sample(rng)).collect()
            }
            Self::Laplace { scale } => {
                let dist = Exp::new(1.0 / scale).expect("validated scale");
                (0..dim)
                    .map(|_| {
                        let magnitude = dist.sample(rng);
                        if rng.random::<bool>() {
                            magnitude
                        } else {
                            -magnitude
                        }
                    })
                    .collect()
            }
            Self::Uniform { half_width } => (0..dim)
                .map(|_| rng.random_range(-half_width..=half_width))
                .collect(),
        }
    }
}

impl fmt::Display for SmoothingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name(), self.parameter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn name(&self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            other => Err(domain(format!("unknown norm '{other}'"))),
        }
    }
}

/// Perturbation ball `{x~ : ||x~ - x|| <= radius}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreatModel {
    pub norm: Norm,
    pub radius: f64,
}

impl ThreatModel {
    pub fn new(norm: Norm, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius >= 0.0) {
            return Err(domain(format!(
                "radius must be finite and >= 0, got {radius}"
            )));
        }
        Ok(Self { norm, radius })
    }

    pub fn l2(radius: f64) -> Result<Self> {
        Self::new(Norm::L2, radius)
    }

    pub fn l1(radius: f64) -> Result<Self> {
        Self::new(Norm::L1, radius)
    }
}

/// Checks that a certificate exists for the pair.
///
/// Gaussian smoothing certifies l1 through the l2 bound (`||d||_2 <= ||d||_1`),
/// which is sound but not tight in more than one dimension.
pub fn check_supported(smoothing: &SmoothingSpec, threat: &ThreatModel) -> Result<()> {
    let ok = matches!(
        (smoothing, threat.norm),
        (SmoothingSpec::Gaussian { .. }, _)
            | (SmoothingSpec::Laplace { .. }, Norm::L1)
            | (SmoothingSpec::Uniform { .. }, Norm::L1)
    );
    if ok {
        Ok(())
    } else {
        Err(Error::UnsupportedCertificate {
            scheme: smoothing.name(),
            norm: threat.norm.name(),
        })
    }
}

/// A certified value together with a saturation flag.
///
/// `vacuous` is set when the bound hit the trivial end of `[0, 1]` because
/// the radius exceeded what the scheme can certify; callers should fall back
/// to the full prediction set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certified {
    pub value: f64,
    pub vacuous: bool,
}

impl Certified {
    pub(crate) fn exact(value: f64) -> Self {
        Self {
            value,
            vacuous: false,
        }
    }
}

pub(crate) fn check_probability(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(domain(format!("beta must be in [0,1], got {beta}")))
    }
}

pub(crate) fn check_radius(radius: f64) -> Result<()> {
    if radius.is_finite() && radius >= 0.0 {
        Ok(())
    } else {
        Err(domain(format!(
            "radius must be finite and >= 0, got {radius}"
        )))
    }
}

/// `Phi_sigma(Phi_sigma^-1(beta) - r)`.
fn gaussian_lower(beta: f64, sigma: f64, radius: f64) -> f64 {
    if beta <= 0.0 || beta >= 1.0 || radius == 0.0 {
        return beta;
    }
    normal::cdf(normal::quantile(beta) - radius / sigma)
}

/// `Phi_sigma(Phi_sigma^-1(beta) + r)`.
pub(crate) fn gaussian_upper(beta: f64, sigma: f64, radius: f64) -> f64 {
    if beta <= 0.0 || beta >= 1.0 || radius == 0.0 {
        return beta;
    }
    normal::cdf(normal::quantile(beta) + radius / sigma)
}

/// Certified lower bound `c_down[beta, B_r]` with its vacuous flag.
pub fn lower_certificate(
    beta: f64,
    smoothing: &SmoothingSpec,
    threat: &ThreatModel,
) -> Result<Certified> {
    check_probability(beta)?;
    smoothing.validated()?;
    check_radius(threat.radius)?;
    check_supported(smoothing, threat)?;
    match *smoothing {
        SmoothingSpec::Gaussian { sigma } => {
            Ok(Certified::exact(gaussian_lower(beta, sigma, threat.radius)))
        }
        _ => omega_lower(beta, smoothing, threat.radius),
    }
}

/// Certified upper bound `c_up[beta, B_r]` with its vacuous flag.
pub fn upper_certificate(
    beta: f64,
    smoothing: &SmoothingSpec,
    threat: &ThreatModel,
) -> Result<Certified> {
    check_probability(beta)?;
    smoothing.validated()?;
    check_radius(threat.radius)?;
    check_supported(smoothing, threat)?;
    match *smoothing {
        SmoothingSpec::Gaussian { sigma } => {
            Ok(Certified::exact(gaussian_upper(beta, sigma, threat.radius)))
        }
        _ => omega_upper(beta, smoothing, threat.radius),
    }
}

/// Smallest smoothed value reachable inside the ball, given clean value `beta`.
pub fn lower_bound(beta: f64, smoothing: &SmoothingSpec, threat: &ThreatModel) -> Result<f64> {
    lower_certificate(beta, smoothing, threat).map(|c| c.value)
}

/// Largest smoothed value reachable inside the ball, given clean value `beta`.
pub fn upper_bound(beta: f64, smoothing: &SmoothingSpec, threat: &ThreatModel) -> Result<f64> {
    upper_certificate(beta, smoothing, threat).map(|c| c.value)
}

/// Range `[lo, hi]` of a bounded loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskBounds {
    pub lo: f64,
    pub hi: f64,
}

impl RiskBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(domain(format!(
                "risk bounds need finite lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn unit() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

/// Upper confidence certificate for a `[lo, hi]`-bounded smoothed expectation.
///
/// Rescales to `[0, 1]`, applies the Gaussian upper bound and maps back:
/// `lo + (hi - lo) * Phi_sigma(Phi_sigma^-1((beta - lo)/(hi - lo)) + r)`.
/// On `[0, 1]` this is exactly the binary upper bound.
pub fn confidence_upper(
    beta: f64,
    bounds: &RiskBounds,
    smoothing: &SmoothingSpec,
    radius: f64,
) -> Result<f64> {
    let SmoothingSpec::Gaussian { sigma } = smoothing.validated()? else {
        return Err(Error::UnsupportedCertificate {
            scheme: smoothing.name(),
            norm: "l2",
        });
    };
    check_radius(radius)?;
    if !bounds.contains(beta) {
        return Err(domain(format!(
            "beta must be in [{}, {}], got {beta}",
            bounds.lo, bounds.hi
        )));
    }
    let width = bounds.hi - bounds.lo;
    let t = ((beta - bounds.lo) / width).clamp(0.0, 1.0);
    let lifted = gaussian_upper(t, sigma, radius);
    Ok((bounds.lo + width * lifted).clamp(bounds.lo, bounds.hi))
}
