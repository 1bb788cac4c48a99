//! Region-based certificate oracle.
//!
//! Partition the input space into regions of constant likelihood ratio
//! `c_t = q_t / p_t` between the noise distributions centred at the clean
//! and the perturbed point. The worst-case binary function with clean value
//! `beta` then solves the fractional knapsack
//!
//! ```text
//! min h . q   s.t.   h . p = beta,   h in [0, 1]^T
//! ```
//!
//! which is filled greedily from the smallest ratio upwards. The result is
//! piecewise linear with increasing slopes, hence convex in `beta`.

use crate::error::{domain, Result};
use crate::normal;

const MASS_TOL: f64 = 1e-9;

/// Region masses under the clean (`p_mass`) and shifted (`q_mass`) noise,
/// sorted by strictly decreasing likelihood ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSystem {
    p_mass: Vec<f64>,
    q_mass: Vec<f64>,
    ratio: Vec<f64>,
}

impl RegionSystem {
    /// Builds the system from unordered masses. Regions are sorted by
    /// `q / p` and regions sharing a ratio are merged.
    pub fn new(p_mass: Vec<f64>, q_mass: Vec<f64>) -> Result<Self> {
        if p_mass.len() != q_mass.len() || p_mass.is_empty() {
            return Err(domain(format!(
                "region masses need equal nonzero lengths, got {} and {}",
                p_mass.len(),
                q_mass.len()
            )));
        }
        for (name, masses) in [("p", &p_mass), ("q", &q_mass)] {
            if masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
                return Err(domain(format!("{name} masses must be finite and >= 0")));
            }
            let total: f64 = masses.iter().sum();
            if (total - 1.0).abs() > MASS_TOL {
                return Err(domain(format!("{name} masses sum to {total}, not 1")));
            }
        }

        let mut regions: Vec<(f64, f64, f64)> = p_mass
            .into_iter()
            .zip(q_mass)
            .filter(|(p, q)| *p > 0.0 || *q > 0.0)
            .map(|(p, q)| {
                let ratio = if p > 0.0 { q / p } else { f64::INFINITY };
                (ratio, p, q)
            })
            .collect();
        regions.sort_by(|a, b| b.0.total_cmp(&a.0));

        let mut system = Self {
            p_mass: Vec::with_capacity(regions.len()),
            q_mass: Vec::with_capacity(regions.len()),
            ratio: Vec::with_capacity(regions.len()),
        };
        for (ratio, p, q) in regions {
            if system.ratio.last() == Some(&ratio) {
                *system.p_mass.last_mut().unwrap() += p;
                *system.q_mass.last_mut().unwrap() += q;
            } else {
                system.ratio.push(ratio);
                system.p_mass.push(p);
                system.q_mass.push(q);
            }
        }
        Ok(system)
    }

    /// Equal-mass slabs for 1-D `N(0, sigma^2)` against `N(radius, sigma^2)`.
    ///
    /// Each slab carries `1 / n_regions` of the clean mass and its exact
    /// shifted mass. Restricting `h` to be constant on slabs shrinks the
    /// feasible set of the continuous problem, so the knapsack value is
    /// attained by an actual classifier and never falls below the
    /// closed-form certificate.
    pub fn gaussian_shift(n_regions: usize, sigma: f64, radius: f64) -> Result<Self> {
        if n_regions == 0 {
            return Err(domain("need at least one region"));
        }
        if !(sigma.is_finite() && sigma > 0.0 && radius.is_finite() && radius >= 0.0) {
            return Err(domain("need sigma > 0 and radius >= 0"));
        }
        let shift = radius / sigma;
        let edges: Vec<f64> = (0..=n_regions)
            .map(|i| normal::quantile(i as f64 / n_regions as f64))
            .collect();
        let shifted_mass = |a: f64, b: f64| {
            let (a, b) = (a - shift, b - shift);
            // Stay in whichever tail keeps the difference well conditioned.
            if a >= 0.0 {
                normal::sf(a) - normal::sf(b)
            } else {
                normal::cdf(b) - normal::cdf(a)
            }
        };
        let p = vec![1.0 / n_regions as f64; n_regions];
        let q = edges.windows(2).map(|w| shifted_mass(w[0], w[1])).collect();
        Self::new(p, q)
    }

    pub fn len(&self) -> usize {
        self.ratio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratio.is_empty()
    }

    pub fn p_mass(&self) -> &[f64] {
        &self.p_mass
    }

    pub fn q_mass(&self) -> &[f64] {
        &self.q_mass
    }

    pub fn ratio(&self) -> &[f64] {
        &self.ratio
    }
}

/// Optimal value of the fractional knapsack at clean mass `beta`.
pub fn knapsack_lower(beta: f64, regions: &RegionSystem) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(domain(format!("beta must be in [0,1], got {beta}")));
    }
    let mut remaining = beta;
    let mut value = 0.0;
    for (p, q) in regions.p_mass.iter().zip(&regions.q_mass).rev() {
        if remaining <= 0.0 {
            break;
        }
        if *p <= remaining {
            value += q;
            remaining -= p;
        } else {
            value += q * (remaining / p);
            remaining = 0.0;
        }
    }
    Ok(value.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let sys = RegionSystem::new(vec![0.5, 0.5], vec![0.2, 0.8]).unwrap();
        assert_eq!(knapsack_lower(0.0, &sys).unwrap(), 0.0);
        assert!((knapsack_lower(1.0, &sys).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fills_lowest_ratio_first() {
        // Ratios 1.6 and 0.4: the first half of beta is bought at slope 0.4.
        let sys = RegionSystem::new(vec![0.5, 0.5], vec![0.8, 0.2]).unwrap();
        assert_eq!(sys.ratio(), &[1.6, 0.4]);
        assert!((knapsack_lower(0.25, &sys).unwrap() - 0.1).abs() < 1e-15);
        assert!((knapsack_lower(0.5, &sys).unwrap() - 0.2).abs() < 1e-15);
        assert!((knapsack_lower(0.75, &sys).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn duplicate_ratios_are_merged() {
        let sys = RegionSystem::new(vec![0.25, 0.25, 0.5], vec![0.1, 0.1, 0.8]).unwrap();
        assert_eq!(sys.len(), 2);
        assert_eq!(sys.p_mass(), &[0.5, 0.5]);
        assert!((sys.q_mass()[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_clean_mass_region_is_filled_last() {
        let sys = RegionSystem::new(vec![0.0, 1.0], vec![0.3, 0.7]).unwrap();
        assert_eq!(sys.ratio()[0], f64::INFINITY);
        assert!((knapsack_lower(1.0, &sys).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn invalid_masses_rejected() {
        assert!(RegionSystem::new(vec![0.5, 0.4], vec![0.5, 0.5]).is_err());
        assert!(RegionSystem::new(vec![0.5], vec![0.5, 0.5]).is_err());
        assert!(RegionSystem::new(vec![1.5, -0.5], vec![0.5, 0.5]).is_err());
        let sys = RegionSystem::new(vec![1.0], vec![1.0]).unwrap();
        assert!(knapsack_lower(1.2, &sys).is_err());
    }

    #[test]
    fn identical_distributions_give_identity() {
        let sys = RegionSystem::gaussian_shift(50, 0.5, 0.0).unwrap();
        for i in 0..=10 {
            let b = i as f64 / 10.0;
            assert!((knapsack_lower(b, &sys).unwrap() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_slabs_are_valid() {
        let sys = RegionSystem::gaussian_shift(400, 0.5, 0.25).unwrap();
        assert_eq!(sys.len(), 400);
        assert!(sys.ratio().windows(2).all(|w| w[0] > w[1]));
        let total: f64 = sys.q_mass().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
