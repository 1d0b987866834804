//! Synthetic pools: Gaussian clusters with adaptively drifting covariates and
//! AR(1)-correlated binary clusters with a logistic marginal mean.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClusterObservation, CorrKind, Link, WorkingCorrelation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousScenario {
    pub p: usize,
    pub m: usize,
    pub beta0: Vec<f64>,
    pub error_structure: CorrKind,
    pub alpha: f64,
    pub pool_size: usize,
}

impl ContinuousScenario {
    pub const LEADING: [f64; 4] = [1.0, -1.1, 1.5, -2.0];

    pub fn new(p: usize, error_structure: CorrKind, alpha: f64) -> Result<Self> {
        Ok(Self { p, m: 5, beta0: padded(&Self::LEADING, p)?, error_structure, alpha, pool_size: 1000 })
    }

    pub fn beta0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticScenario {
    pub p: usize,
    pub m: usize,
    pub beta0: Vec<f64>,
    pub response_alpha: f64,
    pub covar_rho: f64,
    pub covar_var: f64,
    pub pool_size: usize,
}

impl LogisticScenario {
    pub const LEADING: [f64; 3] = [0.6, -0.5, 0.4];

    pub fn new(p: usize, response_alpha: f64) -> Result<Self> {
        Ok(Self {
            p,
            m: 3,
            beta0: padded(&Self::LEADING, p)?,
            response_alpha,
            covar_rho: 0.5,
            covar_var: 0.2,
            pool_size: 5000,
        })
    }

    pub fn beta0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta0)
    }

    /// `covar_var * AR1(covar_rho)` for one covariate row.
    pub fn covariate_covariance(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.p, |i, j| {
            self.covar_var * self.covar_rho.powi((i as i32 - j as i32).abs())
        })
    }
}

fn padded(leading: &[f64], p: usize) -> Result<Vec<f64>> {
    if p < leading.len() {
        return Err(Error::InvalidParameter(format!("p must be at least {}, got {p}", leading.len())));
    }
    let mut b = leading.to_vec();
    b.resize(p, 0.0);
    Ok(b)
}

/// Running mean of every covariate row emitted so far.
#[derive(Debug, Clone)]
pub struct RunningMean {
    sum: DVector<f64>,
    rows: usize,
}

impl RunningMean {
    pub fn new(p: usize) -> Self {
        Self { sum: DVector::zeros(p), rows: 0 }
    }

    pub fn push_rows(&mut self, x: &DMatrix<f64>) {
        for r in x.row_iter() {
            self.sum += r.transpose();
        }
        self.rows += x.nrows();
    }

    /// Zero before anything was pushed.
    pub fn mean(&self) -> DVector<f64> {
        if self.rows == 0 {
            self.sum.clone()
        } else {
            &self.sum / self.rows as f64
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// `X_1 ~ N(0, I)`, and every row of `X_n` is `N(mean of all previous rows, I)`.
pub fn gen_adaptive_covariates<R: Rng + ?Sized>(n: usize, scenario: &ContinuousScenario, rng: &mut R) -> Vec<DMatrix<f64>> {
    let mut running = RunningMean::new(scenario.p);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let centre = running.mean();
        let x = DMatrix::from_fn(scenario.m, scenario.p, |_, j| centre[j] + std_normal(rng));
        running.push_rows(&x);
        out.push(x);
    }
    out
}

/// Zero-mean Gaussian vector with correlation `R(alpha)`, through its Cholesky factor.
pub fn gen_correlated_normal_errors<R: Rng + ?Sized>(
    structure: CorrKind,
    alpha: f64,
    m: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let factor = correlation_factor(structure, alpha, m)?;
    Ok(correlated_normal(&factor, rng))
}

/// Lower Cholesky factor of `R(alpha)`.
pub fn correlation_factor(structure: CorrKind, alpha: f64, m: usize) -> Result<DMatrix<f64>> {
    let r = WorkingCorrelation { kind: structure, alpha }.matrix(m);
    r.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidParameter(format!("{structure:?} correlation with alpha {alpha} is not positive definite for m = {m}")))
}

fn correlated_normal<R: Rng + ?Sized>(factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(factor.nrows(), |_, _| std_normal(rng));
    factor * z
}

/// `y = X beta0 + eps`.
pub fn gen_continuous_cluster<R: Rng + ?Sized>(
    id: u64,
    scenario: &ContinuousScenario,
    x: DMatrix<f64>,
    rng: &mut R,
) -> Result<ClusterObservation> {
    let eps = gen_correlated_normal_errors(scenario.error_structure, scenario.alpha, x.nrows(), rng)?;
    let y = &x * scenario.beta0() + eps;
    ClusterObservation::new(id, y, x)
}

/// Rows drawn from `N(0, covar_var * AR1(covar_rho))`.
pub fn gen_logistic_covariates<R: Rng + ?Sized>(scenario: &LogisticScenario, rng: &mut R) -> Result<DMatrix<f64>> {
    let factor = scenario
        .covariate_covariance()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidParameter(format!("covariate correlation {} is not admissible", scenario.covar_rho)))?;
    Ok(logistic_rows(&factor, scenario.m, rng))
}

fn logistic_rows<R: Rng + ?Sized>(factor: &DMatrix<f64>, m: usize, rng: &mut R) -> DMatrix<f64> {
    let p = factor.nrows();
    let mut x = DMatrix::zeros(m, p);
    for i in 0..m {
        let row = correlated_normal(factor, rng);
        x.row_mut(i).copy_from(&row.transpose());
    }
    x
}

/// Binary draw together with the number of clamped conditional probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDraw {
    pub y: DVector<f64>,
    pub clamp_events: usize,
}

/// Conditional linear family: `y_1 ~ B(mu_1)`,
/// `y_j | y_{j-1} ~ B(mu_j + alpha sqrt(v_j / v_{j-1}) (y_{j-1} - mu_{j-1}))`.
pub fn gen_ar1_binary<R: Rng + ?Sized>(mu: &DVector<f64>, alpha: f64, rng: &mut R) -> Result<BinaryDraw> {
    if mu.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
        return Err(Error::InvalidParameter("binary means must lie in (0, 1)".into()));
    }
    let m = mu.len();
    let mut y = DVector::zeros(m);
    let mut clamp_events = 0;
    for j in 0..m {
        let mut prob = mu[j];
        if j > 0 {
            let v = mu[j] * (1.0 - mu[j]);
            let v_prev = mu[j - 1] * (1.0 - mu[j - 1]);
            prob += alpha * (v / v_prev).sqrt() * (y[j - 1] - mu[j - 1]);
            if !(0.0..=1.0).contains(&prob) {
                clamp_events += 1;
                prob = prob.clamp(0.0, 1.0);
            }
        }
        let u: f64 = rng.random();
        y[j] = if u < prob { 1.0 } else { 0.0 };
    }
    Ok(BinaryDraw { y, clamp_events })
}

/// A generated pool plus its clamp counter.
#[derive(Debug, Clone)]
pub struct GeneratedPool {
    pub clusters: Vec<ClusterObservation>,
    pub clamp_events: usize,
}

pub fn continuous_pool<R: Rng + ?Sized>(scenario: &ContinuousScenario, rng: &mut R) -> Result<GeneratedPool> {
    // validates the structure before any draws
    let factor = correlation_factor(scenario.error_structure, scenario.alpha, scenario.m)?;
    let beta0 = scenario.beta0();
    let xs = gen_adaptive_covariates(scenario.pool_size, scenario, rng);
    let mut clusters = Vec::with_capacity(xs.len());
    for (i, x) in xs.into_iter().enumerate() {
        let y = &x * &beta0 + correlated_normal(&factor, rng);
        clusters.push(ClusterObservation::new(i as u64, y, x)?);
    }
    Ok(GeneratedPool { clusters, clamp_events: 0 })
}

pub fn logistic_pool<R: Rng + ?Sized>(scenario: &LogisticScenario, rng: &mut R) -> Result<GeneratedPool> {
    let factor = scenario
        .covariate_covariance()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidParameter(format!("covariate correlation {} is not admissible", scenario.covar_rho)))?;
    let beta0 = scenario.beta0();
    let mut clusters = Vec::with_capacity(scenario.pool_size);
    let mut clamp_events = 0;
    for i in 0..scenario.pool_size {
        let x = logistic_rows(&factor, scenario.m, rng);
        let eta = &x * &beta0;
        let mu = eta.map(|e| Link::Logit.mean(e));
        let draw = gen_ar1_binary(&mu, scenario.response_alpha, rng)?;
        clamp_events += draw.clamp_events;
        clusters.push(ClusterObservation::new(i as u64, draw.y, x)?);
    }
    Ok(GeneratedPool { clusters, clamp_events })
}

/// Long-format CSV: `cluster,order,y,x1..xp`, loadable as an external pool.
pub fn write_pool_csv<W: Write>(clusters: &[ClusterObservation], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let p = clusters.first().map_or(0, |c| c.p());
    let mut header = vec!["cluster".to_string(), "order".to_string(), "y".to_string()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for c in clusters {
        for i in 0..c.m() {
            let mut rec = vec![c.id.to_string(), i.to_string(), format!("{:?}", c.y[i])];
            rec.extend((0..p).map(|j| format!("{:?}", c.x[(i, j)])));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_pool_csv(clusters: &[ClusterObservation], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_pool_csv(clusters, std::io::BufWriter::new(f))
}
