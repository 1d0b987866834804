//! Fixed-size confidence ellipsoids: the stopping rule, the partitioned
//! precision algebra and the recruitment loop that ties everything together.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chi2::chi2_quantile;
use crate::error::{Error, Result};
use crate::linalg::{
    condition_number, principal_submatrix, spd_inverse, submatrix, subvector, sym_extreme_eigenvalues,
    symmetrize,
};
use crate::model::{fit_mqle, initial_beta, ClusterObservation, CorrKind, FitOptions, GeeFit, Link};
use crate::sampling::{select_d_optimal, select_random, DCriterion, DataPool, SelectorKind};
use crate::shrinkage::{ase, gram_eigen_rates, l_rate, selected_indices, AseResult, ShrinkConfig};

/// Tolerance for "unselected coordinate is zero" in [`contains`].
pub const ZERO_PATTERN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingPolicy {
    /// Half-length of the largest ellipsoid axis.
    pub d: f64,
    pub conf_level: f64,
    /// Pilot size; the rule is never checked before `n0` clusters.
    pub n0: usize,
    pub shrink: ShrinkConfig,
    pub shrinkage_enabled: bool,
}

impl StoppingPolicy {
    pub fn new(d: f64, n0: usize) -> Self {
        Self { d, conf_level: 0.95, n0, shrink: ShrinkConfig::default(), shrinkage_enabled: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0) {
            return Err(Error::InvalidParameter(format!("d must be positive, got {}", self.d)));
        }
        if !(self.conf_level > 0.0 && self.conf_level < 1.0) {
            return Err(Error::InvalidParameter(format!("conf_level must lie in (0,1), got {}", self.conf_level)));
        }
        if self.n0 < 2 {
            return Err(Error::InvalidParameter(format!("n0 must be at least 2, got {}", self.n0)));
        }
        self.shrink.validate()
    }
}

/// Confidence ellipsoid restricted to the selected coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidSet {
    /// Dimension of the full parameter vector.
    pub p: usize,
    pub selected: Vec<usize>,
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub radius_sq: f64,
}

impl EllipsoidSet {
    /// Semi-axis lengths `sqrt(radius_sq / lambda_i(shape))`, largest first.
    pub fn semi_axes(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = crate::linalg::sym_eigenvalues(&self.shape).iter().cloned().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ev.into_iter().map(|l| (self.radius_sq / l).sqrt()).collect()
    }

    pub fn max_semi_axis(&self) -> f64 {
        let (_, min) = sym_extreme_eigenvalues(&self.shape);
        (self.radius_sq / min).sqrt()
    }

    pub fn contains(&self, beta: &DVector<f64>) -> bool {
        contains(self, beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopDecision {
    Stop,
    Continue,
}

/// `Sigma~_11` for the selected block of `Sigma = H M^{-1} H`.
///
/// Uses the partitioned form
/// `[S11^{-1} + S11^{-1} S12 S22.1^{-1} S21 S11^{-1}]^{-1}`
/// with `S22.1 = S22 - S21 S11^{-1} S12`, which is the inverse of the selected
/// block of `Sigma^{-1}`.
pub fn partition_sigma(
    h: &DMatrix<f64>,
    m: &DMatrix<f64>,
    indicators: &[bool],
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let p = h.nrows();
    if indicators.len() != p || m.nrows() != p {
        return Err(Error::Dimension(format!("H is {p}x{p}, M is {0}x{0}, {1} indicators", m.nrows(), indicators.len())));
    }
    let selected = selected_indices(indicators);
    if selected.is_empty() {
        return Err(Error::NoVariablesSelected);
    }
    let rest: Vec<usize> = (0..p).filter(|j| !indicators[*j]).collect();
    let m_inv = spd_inverse(m, "empirical information M")?;
    let sigma = symmetrize(&(h * m_inv * h));
    let s11 = principal_submatrix(&sigma, &selected);
    let s11_inv = spd_inverse(&s11, "Sigma_11")?;
    if rest.is_empty() {
        return Ok((s11, selected));
    }
    let s12 = submatrix(&sigma, &selected, &rest);
    let s21 = s12.transpose();
    let s22 = principal_submatrix(&sigma, &rest);
    let s22_1 = symmetrize(&(&s22 - &s21 * &s11_inv * &s12));
    let s22_1_inv = spd_inverse(&s22_1, "Sigma_22.1")?;
    let a = &s11_inv * &s12;
    let tilde_inv = symmetrize(&(&s11_inv + &a * s22_1_inv * a.transpose()));
    let tilde = spd_inverse(&tilde_inv, "Sigma~_11^{-1}")?;
    Ok((tilde, selected))
}

/// Selected block of the sandwich covariance `(H M^{-1} H)^{-1} = H^{-1} M H^{-1}`.
pub fn selected_sandwich_block(h: &DMatrix<f64>, m: &DMatrix<f64>, selected: &[usize]) -> Result<DMatrix<f64>> {
    let h_inv = spd_inverse(h, "information matrix H")?;
    let sandwich = symmetrize(&(&h_inv * m * &h_inv));
    Ok(principal_submatrix(&sandwich, selected))
}

/// Largest eigenvalue of `I (H M^{-1} H)^- I`.
pub fn nu_max(h: &DMatrix<f64>, m: &DMatrix<f64>, indicators: &[bool]) -> Result<f64> {
    let selected = selected_indices(indicators);
    if selected.is_empty() {
        return Err(Error::NoVariablesSelected);
    }
    let block = selected_sandwich_block(h, m, &selected)?;
    let (max, _) = sym_extreme_eigenvalues(&block);
    if !(max > 0.0) {
        return Err(Error::Singular { what: "selected sandwich block".into(), condition: condition_number(&block) });
    }
    Ok(max)
}

/// `N = inf { k >= n0 : nu_k <= d^2 / a_k^2 }`, evaluated at one `k`.
pub fn should_stop(k: usize, policy: &StoppingPolicy, nu_k: f64, p0_hat_k: usize) -> StopDecision {
    if k < policy.n0 || p0_hat_k == 0 {
        return StopDecision::Continue;
    }
    let a_sq = chi2_quantile(p0_hat_k as u32, policy.conf_level);
    if nu_k <= policy.d * policy.d / a_sq {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

/// Ellipsoid `{beta : (beta_1 - c)' Sigma~_11 (beta_1 - c) <= d^2/nu, beta_2 = 0}`.
pub fn confidence_set(fit: &GeeFit, ase: &AseResult, policy: &StoppingPolicy) -> Result<EllipsoidSet> {
    let (shape, selected) = partition_sigma(&fit.h, &fit.m, &ase.indicators)?;
    // nu from the shape itself: 1 / lambda_min(shape) equals nu_max exactly, but
    // the two routes drift apart when H is badly conditioned
    let (_, min) = sym_extreme_eigenvalues(&shape);
    if !(min > 0.0) {
        return Err(Error::Singular { what: "Sigma_11".into(), condition: condition_number(&shape) });
    }
    let nu = 1.0 / min;
    Ok(EllipsoidSet {
        p: fit.beta.len(),
        center: subvector(&ase.beta_ase, &selected),
        selected,
        shape,
        radius_sq: policy.d * policy.d / nu,
    })
}

pub fn contains(ellipsoid: &EllipsoidSet, beta: &DVector<f64>) -> bool {
    if beta.len() != ellipsoid.p {
        return false;
    }
    let mut sel = vec![false; ellipsoid.p];
    for &j in &ellipsoid.selected {
        sel[j] = true;
    }
    if (0..ellipsoid.p).any(|j| !sel[j] && beta[j].abs() > ZERO_PATTERN_TOL) {
        return false;
    }
    let diff = subvector(beta, &ellipsoid.selected) - &ellipsoid.center;
    let q = (ellipsoid.shape.clone() * &diff).dot(&diff);
    q <= ellipsoid.radius_sq
}

/// Efficiency ratio `d^2 rho(N) / (a^2 nu)` with `rho(N) = N` and `nu`
/// estimated by `N nu_N`, i.e. `d^2 / (a_N^2 nu_N)`.
pub fn efficiency_ratio(d: f64, a_sq_at_stop: f64, nu_at_stop: f64) -> f64 {
    d * d / (a_sq_at_stop * nu_at_stop)
}

/// The literal `d^2 N / (a_N^2 nu_N)`, which grows like `N^2`.
pub fn raw_efficiency_ratio(d: f64, n_stop: usize, a_sq_at_stop: f64, nu_at_stop: f64) -> f64 {
    d * d * n_stop as f64 / (a_sq_at_stop * nu_at_stop)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub link: Link,
    pub kind: CorrKind,
    pub fit: FitOptions,
}

/// One entry of the per-step history. `nu` and `a_sq` are NaN when the rule
/// could not be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub nu: f64,
    pub a_sq: f64,
    pub p0_hat: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequentialOutcome {
    pub n_stop: usize,
    pub fit: GeeFit,
    pub ase: AseResult,
    /// Absent only when no variable was ever selected.
    pub ellipsoid: Option<EllipsoidSet>,
    pub nu_at_stop: f64,
    pub a_sq_at_stop: f64,
    pub efficiency_ratio: f64,
    pub pool_exhausted: bool,
    /// Pool indices in recruitment order.
    pub recruited: Vec<usize>,
    pub history: Vec<StepRecord>,
    pub failed_fits: usize,
}

/// Converged state after a refit.
struct StepState {
    fit: GeeFit,
    ase: AseResult,
    nu: f64,
    a_sq: f64,
}

const MAX_CONSECUTIVE_FAILURES: usize = 3;

fn evaluate(
    data: &[&ClusterObservation],
    gram: &DMatrix<f64>,
    model: &ModelConfig,
    policy: &StoppingPolicy,
    warm: Option<&DVector<f64>>,
) -> Result<StepState> {
    let init = match warm {
        Some(b) => b.clone(),
        None => initial_beta(data, model.link)?,
    };
    let fit = fit_mqle(data, model.link, model.kind, &init, &model.fit)?;
    if !fit.converged {
        return Err(Error::NumericalDomain(format!(
            "fit did not converge in {} iterations (score norm {:.3e})",
            fit.iterations, fit.score_norm
        )));
    }
    let ase = if policy.shrinkage_enabled {
        let (lmax, lmin) = gram_eigen_rates(gram);
        ase(&fit.beta, l_rate(lmax, lmin, policy.shrink.rate_alpha)?, &policy.shrink)
    } else {
        AseResult::keep_all(&fit.beta)
    };
    let (nu, a_sq) = if ase.p0_hat > 0 {
        (nu_max(&fit.h, &fit.m, &ase.indicators)?, chi2_quantile(ase.p0_hat as u32, policy.conf_level))
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(StepState { fit, ase, nu, a_sq })
}

fn finish(state: StepState, pool: &DataPool, policy: &StoppingPolicy, exhausted: bool, history: Vec<StepRecord>, failed_fits: usize) -> Result<SequentialOutcome> {
    let ellipsoid = if state.ase.p0_hat > 0 { Some(confidence_set(&state.fit, &state.ase, policy)?) } else { None };
    Ok(SequentialOutcome {
        n_stop: pool.n_recruited(),
        efficiency_ratio: efficiency_ratio(policy.d, state.a_sq, state.nu),
        nu_at_stop: state.nu,
        a_sq_at_stop: state.a_sq,
        fit: state.fit,
        ase: state.ase,
        ellipsoid,
        pool_exhausted: exhausted,
        recruited: pool.recruitment_order().to_vec(),
        history,
        failed_fits,
    })
}

/// Sequential session: random pilot of `n0` clusters, then one recruit per
/// step until the stopping rule fires or the pool runs out.
pub fn run_sequential(
    pool: &mut DataPool,
    selector: SelectorKind,
    model: &ModelConfig,
    policy: &StoppingPolicy,
) -> Result<SequentialOutcome> {
    policy.validate()?;
    if pool.len() < policy.n0 {
        return Err(Error::InsufficientData(format!(
            "pool holds {} clusters, pilot needs {}",
            pool.len(),
            policy.n0
        )));
    }
    let p = pool.cluster(0).p();
    let mut rng = ChaCha8Rng::seed_from_u64(pool.rng_seed);
    let mut gram = DMatrix::zeros(p, p);
    let add = |pool: &mut DataPool, gram: &mut DMatrix<f64>, idx: usize| -> Result<()> {
        pool.recruit(idx)?;
        let x = &pool.cluster(idx).x;
        gram.gemm_tr(1.0, x, x, 1.0);
        Ok(())
    };
    for _ in 0..policy.n0 {
        let idx = select_random(pool, &mut rng)?;
        add(pool, &mut gram, idx)?;
    }

    let mut history = Vec::new();
    let mut last_good: Option<StepState> = None;
    let mut consecutive_failures = 0usize;
    let mut failed_fits = 0usize;
    loop {
        let k = pool.n_recruited();
        let data = pool.recruited_clusters();
        let warm = last_good.as_ref().map(|s| &s.fit.beta);
        let attempt = evaluate(&data, &gram, model, policy, warm).or_else(|e| {
            // retry from the deterministic start if a warm start was used
            if warm.is_some() && e.is_numerical() {
                evaluate(&data, &gram, model, policy, None)
            } else {
                Err(e)
            }
        });
        match attempt {
            Ok(state) => {
                consecutive_failures = 0;
                history.push(StepRecord { k, nu: state.nu, a_sq: state.a_sq, p0_hat: state.ase.p0_hat });
                let stop = state.ase.p0_hat > 0
                    && should_stop(k, policy, state.nu, state.ase.p0_hat) == StopDecision::Stop;
                last_good = Some(state);
                if stop {
                    return finish(last_good.unwrap(), pool, policy, false, history, failed_fits);
                }
            }
            Err(e) if e.is_numerical() || matches!(e, Error::InsufficientData(_)) => {
                consecutive_failures += 1;
                failed_fits += 1;
                history.push(StepRecord { k, nu: f64::NAN, a_sq: f64::NAN, p0_hat: 0 });
            }
            Err(e) => return Err(e),
        }

        if pool.n_inactive() == 0 {
            return match last_good {
                Some(state) => finish(state, pool, policy, true, history, failed_fits),
                None => Err(Error::NumericalDomain("no successful fit before the pool was exhausted".into())),
            };
        }

        let next = match (&last_good, selector) {
            (Some(state), SelectorKind::DOptimal)
                if consecutive_failures < MAX_CONSECUTIVE_FAILURES && state.ase.p0_hat > 0 =>
            {
                let crit = DCriterion::new(&data, &state.ase.beta_ase, model.link, &state.ase.indicators);
                match crit {
                    Ok(c) => select_d_optimal(pool, &c)?,
                    Err(e) if e.is_numerical() => select_random(pool, &mut rng)?,
                    Err(e) => return Err(e),
                }
            }
            _ => select_random(pool, &mut rng)?,
        };
        drop(data);
        add(pool, &mut gram, next)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(p: usize, seed: u64) -> DMatrix<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(p, p) * 0.5
    }

    #[test]
    fn all_selected_returns_sigma() {
        let h = spd(4, 1);
        let m = spd(4, 2);
        let (tilde, sel) = partition_sigma(&h, &m, &[true; 4]).unwrap();
        let sigma = &h * spd_inverse(&m, "m").unwrap() * &h;
        assert_eq!(sel, vec![0, 1, 2, 3]);
        assert!((tilde - sigma).abs().max() < 1e-9);
    }

    #[test]
    fn block_diagonal_sigma_no_correction() {
        // H = I, M^{-1} block diagonal => Sigma block diagonal
        let mut m = DMatrix::identity(4, 4);
        m[(0, 1)] = 0.3;
        m[(1, 0)] = 0.3;
        m[(2, 3)] = -0.2;
        m[(3, 2)] = -0.2;
        let h = DMatrix::identity(4, 4);
        let ind = [true, true, false, false];
        let (tilde, _) = partition_sigma(&h, &m, &ind).unwrap();
        let sigma = spd_inverse(&m, "m").unwrap();
        let s11 = principal_submatrix(&sigma, &[0, 1]);
        assert!((tilde - s11).abs().max() < 1e-12);
    }

    #[test]
    fn nu_of_scaled_identity() {
        // H M^{-1} H = c I with H = I, M = I / c
        let c = 4.0;
        let h = DMatrix::identity(3, 3);
        let m = DMatrix::identity(3, 3) / c;
        assert!((nu_max(&h, &m, &[true; 3]).unwrap() - 1.0 / c).abs() < 1e-14);
    }

    #[test]
    fn nu_single_selected_is_diagonal_entry() {
        let h = spd(5, 3);
        let m = spd(5, 4);
        let ind = [false, false, true, false, false];
        let h_inv = spd_inverse(&h, "h").unwrap();
        let sandwich = &h_inv * &m * &h_inv;
        assert!((nu_max(&h, &m, &ind).unwrap() - sandwich[(2, 2)]).abs() < 1e-12 * sandwich[(2, 2)]);
    }

    #[test]
    fn nothing_selected_is_an_error() {
        let h = spd(2, 5);
        assert!(matches!(nu_max(&h, &h, &[false, false]), Err(Error::NoVariablesSelected)));
        assert!(matches!(partition_sigma(&h, &h, &[false, false]), Err(Error::NoVariablesSelected)));
    }

    #[test]
    fn stop_rule_examples() {
        let policy = StoppingPolicy::new(0.2, 10);
        assert_eq!(should_stop(9, &policy, 0.0, 4), StopDecision::Continue);
        // 0.04 / 9.487729 = 0.004216
        assert_eq!(should_stop(10, &policy, 0.004, 4), StopDecision::Stop);
        assert_eq!(should_stop(10, &policy, 0.005, 4), StopDecision::Continue);
    }

    fn ellipsoid() -> EllipsoidSet {
        let shape = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let (_, min) = sym_extreme_eigenvalues(&shape);
        let d = 0.3;
        // radius d^2 / nu with nu = 1 / lambda_min(shape)
        EllipsoidSet { p: 4, selected: vec![0, 2], center: DVector::from_vec(vec![1.0, -2.0]), shape, radius_sq: d * d * min }
    }

    #[test]
    fn membership_rules() {
        let e = ellipsoid();
        assert!((e.max_semi_axis() - 0.3).abs() < 1e-12);
        let center = DVector::from_vec(vec![1.0, 0.0, -2.0, 0.0]);
        assert!(e.contains(&center));
        let mut off = center.clone();
        off[1] = 0.1;
        assert!(!e.contains(&off));

        let eig = nalgebra::SymmetricEigen::new(e.shape.clone());
        let (imin, _) = eig.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        let dir = eig.eigenvectors.column(imin).into_owned();
        let mut out = center.clone();
        let mut inside = center.clone();
        for (k, &j) in e.selected.iter().enumerate() {
            out[j] += 0.3 * dir[k] * (1.0 + 1e-6);
            inside[j] += 0.3 * dir[k] * (1.0 - 1e-6);
        }
        assert!(!e.contains(&out));
        assert!(e.contains(&inside));
    }

    #[test]
    fn efficiency_ratio_binding() {
        let (d, a_sq) = (0.2, 9.487729);
        let nu = d * d / a_sq;
        assert!((efficiency_ratio(d, a_sq, nu) - 1.0).abs() < 1e-14);
        assert!((raw_efficiency_ratio(d, 120, a_sq, nu) - 120.0).abs() < 1e-9);
    }
}
