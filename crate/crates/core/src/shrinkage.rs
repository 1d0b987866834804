//! Adaptive shrinkage: zero/nonzero indicators driven by the convergence rate
//! of the quasi-likelihood estimate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_extreme_eigenvalues;
use crate::model::{dataset_shape, ClusterObservation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkConfig {
    pub gamma: f64,
    pub delta: f64,
    pub theta: f64,
    pub epsilon: f64,
    /// Exponent on the iterated-log factor of the rate.
    pub rate_alpha: f64,
}

impl Default for ShrinkConfig {
    fn default() -> Self {
        Self { gamma: 1.0, delta: 0.45, theta: 0.65, epsilon: DEFAULT_EPSILON, rate_alpha: 0.05 }
    }
}

/// Threshold on the shrinkage statistic.
pub const DEFAULT_EPSILON: f64 = 3.25;

impl ShrinkConfig {
    pub fn new(gamma: f64, delta: f64, theta: f64, epsilon: f64, rate_alpha: f64) -> Result<Self> {
        let cfg = Self { gamma, delta, theta, epsilon, rate_alpha };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidParameter(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(Error::InvalidParameter(format!("delta must lie in (0, 1/2), got {}", self.delta)));
        }
        let upper = 0.5 + self.gamma * self.delta;
        if !(self.theta > 0.5 && self.theta < upper) {
            return Err(Error::InvalidParameter(format!(
                "theta must lie in (1/2, {upper}), got {}",
                self.theta
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.rate_alpha > 0.0) {
            return Err(Error::InvalidParameter(format!("rate_alpha must be > 0, got {}", self.rate_alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AseResult {
    pub indicators: Vec<bool>,
    pub beta_ase: DVector<f64>,
    pub p0_hat: usize,
    pub l_rate: f64,
    pub shrink_scale: f64,
}

impl AseResult {
    /// Result with every variable kept, used when shrinkage is disabled.
    pub fn keep_all(beta_tilde: &DVector<f64>) -> Self {
        Self {
            indicators: vec![true; beta_tilde.len()],
            beta_ase: beta_tilde.clone(),
            p0_hat: beta_tilde.len(),
            l_rate: f64::NAN,
            shrink_scale: f64::NAN,
        }
    }

    /// Indices of the selected variables in increasing order.
    pub fn selected(&self) -> Vec<usize> {
        selected_indices(&self.indicators)
    }
}

pub fn selected_indices(indicators: &[bool]) -> Vec<usize> {
    indicators.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
}

/// Stacked Gram matrix `sum X_i' X_i`.
pub fn design_gram<C: AsRef<ClusterObservation>>(data: &[C]) -> Result<DMatrix<f64>> {
    let (_, p) = dataset_shape(data)?;
    let mut gram = DMatrix::zeros(p, p);
    for c in data {
        let x = &c.as_ref().x;
        gram.gemm_tr(1.0, x, x, 1.0);
    }
    Ok(gram)
}

/// Extreme eigenvalues `(lambda_max, lambda_min)` of the stacked Gram matrix.
pub fn design_eigen_rates<C: AsRef<ClusterObservation>>(data: &[C]) -> Result<(f64, f64)> {
    Ok(gram_eigen_rates(&design_gram(data)?))
}

pub fn gram_eigen_rates(gram: &DMatrix<f64>) -> (f64, f64) {
    let (max, min) = sym_extreme_eigenvalues(gram);
    (max.max(0.0), min.max(0.0))
}

/// Convergence-rate quantity
/// `L = (lmax log lmax)^{1/2} (log log lmax)^{1/2 + rate_alpha} / lmin`.
///
/// `log lmax` and `log log lmax` are floored at 1 for small `lmax`.
pub fn l_rate(lambda_max: f64, lambda_min: f64, rate_alpha: f64) -> Result<f64> {
    if !(lambda_min > 0.0) {
        return Err(Error::RankDeficient { lambda_min });
    }
    let log = lambda_max.ln().max(1.0);
    let loglog = log.ln().max(1.0);
    Ok((lambda_max * log).sqrt() * loglog.powf(0.5 + rate_alpha) / lambda_min)
}

/// Shrinkage statistic `L^{1/2} kappa |beta_j|^{-gamma}`; infinite at zero.
pub fn shrink_statistic(beta_j: f64, l_rate: f64, config: &ShrinkConfig) -> f64 {
    if beta_j == 0.0 {
        return f64::INFINITY;
    }
    let kappa = l_rate.powf(-config.theta);
    l_rate.sqrt() * kappa * beta_j.abs().powf(-config.gamma)
}

/// Adaptive shrinkage estimate of `beta_tilde`.
pub fn ase(beta_tilde: &DVector<f64>, l_rate: f64, config: &ShrinkConfig) -> AseResult {
    let shrink_scale = l_rate.powf(-config.theta);
    let indicators: Vec<bool> = beta_tilde
        .iter()
        .map(|&b| shrink_statistic(b, l_rate, config) < config.epsilon)
        .collect();
    let beta_ase = DVector::from_iterator(
        beta_tilde.len(),
        beta_tilde.iter().zip(&indicators).map(|(&b, &k)| if k { b } else { 0.0 }),
    );
    let p0_hat = indicators.iter().filter(|&&k| k).count();
    AseResult { indicators, beta_ase, p0_hat, l_rate, shrink_scale }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn cfg(epsilon: f64) -> ShrinkConfig {
        ShrinkConfig { epsilon, ..ShrinkConfig::default() }
    }

    #[test]
    fn defaults_are_feasible() {
        let c = ShrinkConfig::default();
        assert_eq!((c.gamma, c.delta, c.theta, c.rate_alpha), (1.0, 0.45, 0.65, 0.05));
        c.validate().unwrap();
    }

    #[test]
    fn theta_outside_interval_rejected() {
        // upper bound 1/2 + gamma*delta = 0.95
        assert!(ShrinkConfig::new(1.0, 0.45, 0.96, 1.0, 0.05).is_err());
        assert!(ShrinkConfig::new(1.0, 0.45, 0.5, 1.0, 0.05).is_err());
        assert!(ShrinkConfig::new(1.0, 0.5, 0.65, 1.0, 0.05).is_err());
        assert!(ShrinkConfig::new(1.0, 0.45, 0.94, 1.0, 0.05).is_ok());
    }

    #[test]
    fn isotropic_gram() {
        let x = DMatrix::<f64>::identity(3, 3) * 2f64.sqrt();
        let c = ClusterObservation::new(0, DVector::zeros(3), x).unwrap();
        let (max, min) = design_eigen_rates(&[c]).unwrap();
        assert!((max - 2.0).abs() < 1e-12 && (min - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_rows_of_identity() {
        // rows e1, e2, e1 -> X'X = diag(2, 1)
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let c = ClusterObservation::new(0, DVector::zeros(3), x).unwrap();
        let (max, min) = design_eigen_rates(&[c]).unwrap();
        assert!((max - 2.0).abs() < 1e-12 && (min - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l_rate_at_e_to_the_e() {
        let lam = E.powf(E);
        let expected = (lam * E).sqrt() / lam;
        assert!((l_rate(lam, lam, 0.05).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn l_rate_formula_value() {
        let (lmax, lmin, a) = (1e4f64, 1e3f64, 0.05f64);
        // 30-digit evaluation of the closed form
        let expected = 0.470616485499805815330011780202;
        assert!((l_rate(lmax, lmin, a).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn l_rate_decreases_when_eigenvalues_double() {
        let mut lam = 100.0;
        while lam < 1e9 {
            let a = l_rate(lam, lam / 5.0, 0.05).unwrap();
            let b = l_rate(2.0 * lam, 2.0 * lam / 5.0, 0.05).unwrap();
            assert!(b < a, "lambda {lam}");
            lam *= 3.7;
        }
    }

    #[test]
    fn l_rate_rejects_rank_deficiency() {
        assert!(matches!(l_rate(10.0, 0.0, 0.05), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn zero_coefficient_never_selected() {
        let r = ase(&DVector::from_vec(vec![0.0, 2.0]), 1e8, &cfg(1.0));
        assert_eq!(r.indicators, vec![false, true]);
        assert_eq!(r.beta_ase[0], 0.0);
    }

    #[test]
    fn scalar_statistic_example() {
        // choose L with L^{1/2 - theta} = 0.01
        let c = cfg(1.0);
        let l = 0.01f64.powf(1.0 / (0.5 - c.theta));
        let stat = shrink_statistic(1.5, l, &c);
        assert!((stat - 0.01 / 1.5).abs() < 1e-12);
        let r = ase(&DVector::from_vec(vec![1.5]), l, &c);
        assert_eq!(r.indicators, vec![true]);
        assert!((r.shrink_scale - l.powf(-0.65)).abs() < 1e-9 * r.shrink_scale);
    }

    #[test]
    fn huge_coefficients_all_kept() {
        let b = DVector::from_vec(vec![1e6, -1e7, 3e5]);
        let r = ase(&b, 1e-3, &cfg(1.0));
        assert_eq!(r.p0_hat, 3);
        assert_eq!(r.beta_ase, b);
    }

    #[test]
    fn shrink_scale_limits_on_grid() {
        let c = ShrinkConfig::default();
        let mut prev_low = f64::INFINITY;
        let mut prev_high = 0.0;
        for k in 2..=8 {
            let l = 10f64.powi(k);
            let kappa = l.powf(-c.theta);
            let low = l.sqrt() * kappa;
            let high = l.powf(0.5 + c.gamma * c.delta) * kappa;
            assert!(low < prev_low && high > prev_high);
            prev_low = low;
            prev_high = high;
        }
        assert!(prev_low < 0.07 && prev_high > 1e2);
    }

    proptest! {
        #[test]
        fn indicator_monotone_in_magnitude(b in -5.0f64..5.0, extra in 0.0f64..5.0, l in 1e-3f64..1e3) {
            let c = cfg(1.0);
            let small = ase(&DVector::from_vec(vec![b]), l, &c).indicators[0];
            let bigger = b.signum() * (b.abs() + extra);
            let large = ase(&DVector::from_vec(vec![if b == 0.0 { extra } else { bigger }]), l, &c).indicators[0];
            prop_assert!(!small || large);
        }

        #[test]
        fn indicator_set_grows_with_epsilon(bs in proptest::collection::vec(-3.0f64..3.0, 1..8), l in 1e-2f64..1e2, e1 in 0.1f64..3.0, de in 0.0f64..3.0) {
            let b = DVector::from_vec(bs);
            let tight = ase(&b, l, &cfg(e1));
            let loose = ase(&b, l, &cfg(e1 + de));
            for (t, lo) in tight.indicators.iter().zip(&loose.indicators) {
                prop_assert!(!t || *lo);
            }
            prop_assert_eq!(tight.p0_hat, tight.indicators.iter().filter(|&&k| k).count());
        }
    }
}
