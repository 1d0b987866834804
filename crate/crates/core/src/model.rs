//! Generalized estimating equations for equal-sized clusters.
//!
//! Each cluster `i` contributes a response vector `y_i` of length `m` and an
//! `m x p` covariate matrix `X_i` whose rows are the per-measurement
//! covariate vectors. The working covariance of a cluster is
//! `V_i = phi * A_i^{1/2} R(alpha) A_i^{1/2}` where `A_i` is the diagonal of
//! the inverse-link derivative at the linear predictor.
//!
//! All routines are pure functions of their inputs.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, spd_inverse, sup_norm, symmetrize};

/// Fitted logit means are kept inside `[MU_FLOOR, 1 - MU_FLOOR]`.
pub const MU_FLOOR: f64 = 1e-10;
/// Smallest derivative accepted when standardizing residuals by `A^{-1/2}`.
pub const A_FLOOR: f64 = 1e-10;
/// Condition number above which `Rbar` receives a ridge before inversion.
pub const RBAR_MAX_CONDITION: f64 = 1e12;
pub const RBAR_RIDGE: f64 = 1e-8;

/// One cluster: response vector and `m x p` covariate matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterObservation {
    pub id: u64,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
}

impl ClusterObservation {
    pub fn new(id: u64, y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(Error::Dimension(format!(
                "cluster {id}: response length {} != covariate rows {}",
                y.len(),
                x.nrows()
            )));
        }
        if y.is_empty() || x.ncols() == 0 {
            return Err(Error::Dimension(format!("cluster {id}: empty response or covariates")));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("cluster {id}: non-finite entry")));
        }
        Ok(Self { id, y, x })
    }

    /// Number of repeated measurements.
    pub fn m(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Copy keeping only the listed covariate columns.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let x = DMatrix::from_fn(self.x.nrows(), cols.len(), |i, j| self.x[(i, cols[j])]);
        Self { id: self.id, y: self.y.clone(), x }
    }
}

impl AsRef<ClusterObservation> for ClusterObservation {
    fn as_ref(&self) -> &ClusterObservation {
        self
    }
}

/// Shared `(m, p)` of a dataset; every cluster must agree.
pub fn dataset_shape<C: AsRef<ClusterObservation>>(data: &[C]) -> Result<(usize, usize)> {
    let first = data
        .first()
        .ok_or_else(|| Error::InsufficientData("empty dataset".into()))?
        .as_ref();
    let (m, p) = (first.m(), first.p());
    for c in data {
        let c = c.as_ref();
        if c.m() != m || c.p() != p {
            return Err(Error::Dimension(format!(
                "cluster {} has shape {}x{}, expected {m}x{p}",
                c.id,
                c.m(),
                c.p()
            )));
        }
    }
    Ok((m, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
}

impl Link {
    /// Inverse link `h(eta)`; logit means are clamped away from 0 and 1.
    #[inline]
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => (1.0 / (1.0 + (-eta).exp())).clamp(MU_FLOOR, 1.0 - MU_FLOOR),
        }
    }

    /// `h'(eta)`.
    #[inline]
    pub fn derivative(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => {
                let mu = self.mean(eta);
                mu * (1.0 - mu)
            }
        }
    }

    /// Variance function `v(mu)`; equals `h'` for both canonical links.
    #[inline]
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => {
                let mu = mu.clamp(MU_FLOOR, 1.0 - MU_FLOOR);
                mu * (1.0 - mu)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrKind {
    Independence,
    Exchangeable,
    Ar1,
}

impl CorrKind {
    /// Open interval of admissible correlation parameters for cluster size `m`.
    pub fn alpha_bounds(self, m: usize) -> (f64, f64) {
        match self {
            CorrKind::Independence => (f64::NEG_INFINITY, f64::INFINITY),
            CorrKind::Exchangeable if m > 1 => (-1.0 / (m as f64 - 1.0), 1.0),
            CorrKind::Exchangeable => (-1.0, 1.0),
            CorrKind::Ar1 => (-1.0, 1.0),
        }
    }

    /// Clip `alpha` strictly inside the admissible interval.
    pub fn clip_alpha(self, alpha: f64, m: usize) -> f64 {
        match self {
            CorrKind::Independence => 0.0,
            _ => {
                let (lo, hi) = self.alpha_bounds(m);
                alpha.clamp(0.999 * lo, 0.999 * hi)
            }
        }
    }
}

/// Working correlation `R(alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkingCorrelation {
    pub kind: CorrKind,
    pub alpha: f64,
}

impl WorkingCorrelation {
    pub fn independence() -> Self {
        Self { kind: CorrKind::Independence, alpha: 0.0 }
    }

    pub fn new(kind: CorrKind, alpha: f64, m: usize) -> Result<Self> {
        let (lo, hi) = kind.alpha_bounds(m);
        if kind != CorrKind::Independence && !(alpha > lo && alpha < hi) {
            return Err(Error::InvalidParameter(format!(
                "{kind:?} correlation requires {lo} < alpha < {hi}, got {alpha}"
            )));
        }
        Ok(Self { kind, alpha })
    }

    pub fn matrix(&self, m: usize) -> DMatrix<f64> {
        match self.kind {
            CorrKind::Independence => DMatrix::identity(m, m),
            CorrKind::Exchangeable => {
                DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { self.alpha })
            }
            CorrKind::Ar1 => DMatrix::from_fn(m, m, |i, j| {
                self.alpha.powi((i as i32 - j as i32).abs())
            }),
        }
    }
}

/// `R(alpha)` together with the dispersion and the cached inverse.
#[derive(Debug, Clone)]
pub struct WorkingCovariance {
    pub corr: WorkingCorrelation,
    pub phi: f64,
    r_inv: DMatrix<f64>,
}

impl WorkingCovariance {
    pub fn new(corr: WorkingCorrelation, phi: f64, m: usize) -> Result<Self> {
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::InvalidParameter(format!("dispersion must be positive, got {phi}")));
        }
        let r = corr.matrix(m);
        let r_inv = spd_inverse(&r, "working correlation R(alpha)")?;
        Ok(Self { corr, phi, r_inv })
    }

    pub fn r_inverse(&self) -> &DMatrix<f64> {
        &self.r_inv
    }
}

/// Mean vector and diagonal of `A` for one covariate matrix.
pub fn mean_and_derivative(
    link: Link,
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if x.ncols() != beta.len() {
        return Err(Error::Dimension(format!(
            "covariates have {} columns, beta has {} entries",
            x.ncols(),
            beta.len()
        )));
    }
    let eta = x * beta;
    if let Some(bad) = eta.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericalDomain(format!("linear predictor {bad}")));
    }
    let mu = eta.map(|e| link.mean(e));
    let a = eta.map(|e| link.derivative(e));
    Ok((mu, a))
}

/// Per-pass scratch buffers, reused across clusters.
struct Scratch {
    eta: DVector<f64>,
    sqrt_a: DVector<f64>,
    e: DVector<f64>,
    qe: DVector<f64>,
    z: DMatrix<f64>,
    qz: DMatrix<f64>,
    si: DVector<f64>,
}

impl Scratch {
    fn new(m: usize, p: usize) -> Self {
        Self {
            eta: DVector::zeros(m),
            sqrt_a: DVector::zeros(m),
            e: DVector::zeros(m),
            qe: DVector::zeros(m),
            z: DMatrix::zeros(m, p),
            qz: DMatrix::zeros(m, p),
            si: DVector::zeros(p),
        }
    }

    /// Fill `eta`, `sqrt_a`, `e = A^{-1/2} (y - mu)` and `z = A^{1/2} X`.
    fn load(&mut self, c: &ClusterObservation, beta: &DVector<f64>, link: Link, a_floor: f64) -> Result<()> {
        self.eta.gemv(1.0, &c.x, beta, 0.0);
        for j in 0..c.m() {
            let eta = self.eta[j];
            if !eta.is_finite() {
                return Err(Error::NumericalDomain(format!(
                    "cluster {}: linear predictor {eta}",
                    c.id
                )));
            }
            let mu = link.mean(eta);
            let a = link.derivative(eta);
            if !(a > 0.0) {
                return Err(Error::SingularCovariance { cluster: c.id });
            }
            let s = a.max(a_floor).sqrt();
            self.sqrt_a[j] = s;
            self.e[j] = (c.y[j] - mu) / s;
        }
        self.z.copy_from(&c.x);
        for j in 0..c.m() {
            let s = self.sqrt_a[j];
            self.z.row_mut(j).scale_mut(s);
        }
        Ok(())
    }
}

/// Sums of Pearson residual products used by the moment estimators.
#[derive(Debug, Clone, Copy, Default)]
pub struct PearsonSums {
    pub n: usize,
    pub m: usize,
    pub sum_sq: f64,
    pub sum_pairs: f64,
    pub sum_lag1: f64,
}

impl PearsonSums {
    fn add(&mut self, r: &DVector<f64>) {
        self.n += 1;
        self.m = r.len();
        let mut total = 0.0;
        for j in 0..r.len() {
            self.sum_sq += r[j] * r[j];
            total += r[j];
            if j + 1 < r.len() {
                self.sum_lag1 += r[j] * r[j + 1];
            }
        }
        let sq: f64 = r.iter().map(|v| v * v).sum();
        self.sum_pairs += 0.5 * (total * total - sq);
    }

    /// Moment estimates `(alpha_hat, phi_hat)` for `p` regression parameters.
    pub fn finish(&self, kind: CorrKind, p: usize) -> Result<(f64, f64)> {
        self.finish_with_dispersion(kind, p, None)
    }

    /// As [`finish`](Self::finish), but normalizing `alpha` by a known dispersion.
    pub fn finish_with_dispersion(&self, kind: CorrKind, p: usize, fixed_phi: Option<f64>) -> Result<(f64, f64)> {
        let (n, m) = (self.n as f64, self.m as f64);
        let p = p as f64;
        let phi_den = n * m - p;
        if phi_den <= 0.0 {
            return Err(Error::InsufficientData(format!(
                "dispersion denominator n*m - p = {phi_den} is not positive"
            )));
        }
        let phi = fixed_phi.unwrap_or(self.sum_sq / phi_den);
        let alpha = match kind {
            CorrKind::Independence => 0.0,
            CorrKind::Exchangeable => {
                let den = n * m * (m - 1.0) / 2.0 - p;
                if den <= 0.0 {
                    return Err(Error::InsufficientData(format!(
                        "exchangeable moment denominator {den} is not positive"
                    )));
                }
                if phi > 0.0 { self.sum_pairs / (phi * den) } else { 0.0 }
            }
            CorrKind::Ar1 => {
                let den = n * (m - 1.0) - p;
                if den <= 0.0 {
                    return Err(Error::InsufficientData(format!(
                        "AR(1) moment denominator {den} is not positive"
                    )));
                }
                if phi > 0.0 { self.sum_lag1 / (phi * den) } else { 0.0 }
            }
        };
        Ok((kind.clip_alpha(alpha, self.m), phi))
    }
}

/// Output of one pass over the data.
struct Pass {
    score: DVector<f64>,
    h: Option<DMatrix<f64>>,
    m: Option<DMatrix<f64>>,
    pearson: PearsonSums,
}

fn accumulate<C: AsRef<ClusterObservation>>(
    data: &[C],
    beta: &DVector<f64>,
    link: Link,
    cov: &WorkingCovariance,
    with_matrices: bool,
) -> Result<Pass> {
    let (m, p) = dataset_shape(data)?;
    if beta.len() != p {
        return Err(Error::Dimension(format!("beta has {} entries, data has p = {p}", beta.len())));
    }
    if cov.r_inv.nrows() != m {
        return Err(Error::Dimension(format!(
            "working correlation is {0}x{0}, clusters have m = {m}",
            cov.r_inv.nrows()
        )));
    }
    let q = &cov.r_inv;
    let inv_phi = 1.0 / cov.phi;
    let mut s = Scratch::new(m, p);
    let mut score = DVector::zeros(p);
    let mut h = with_matrices.then(|| DMatrix::zeros(p, p));
    let mut mm = with_matrices.then(|| DMatrix::zeros(p, p));
    let mut pearson = PearsonSums::default();
    for c in data {
        let c = c.as_ref();
        s.load(c, beta, link, 0.0)?;
        pearson.add(&s.e);
        // X' A V^{-1} (y - mu) = Z' R^{-1} A^{-1/2} (y - mu) / phi
        s.qe.gemv(1.0, q, &s.e, 0.0);
        s.si.gemv_tr(inv_phi, &s.z, &s.qe, 0.0);
        score += &s.si;
        if let (Some(h), Some(mm)) = (h.as_mut(), mm.as_mut()) {
            s.qz.gemm(1.0, q, &s.z, 0.0);
            h.gemm_tr(inv_phi, &s.z, &s.qz, 1.0);
            mm.ger(1.0, &s.si, &s.si, 1.0);
        }
    }
    Ok(Pass {
        score,
        h: h.map(|h| symmetrize(&h)),
        m: mm.map(|m| symmetrize(&m)),
        pearson,
    })
}

/// Estimating function `S(beta) = sum X_i' A_i V_i^{-1} (y_i - h_i(beta))`.
pub fn score<C: AsRef<ClusterObservation>>(
    data: &[C],
    beta: &DVector<f64>,
    link: Link,
    cov: &WorkingCovariance,
) -> Result<DVector<f64>> {
    Ok(accumulate(data, beta, link, cov, false)?.score)
}

/// Model-based `H` and empirical `M` information matrices.
pub fn information_matrices<C: AsRef<ClusterObservation>>(
    data: &[C],
    beta: &DVector<f64>,
    link: Link,
    cov: &WorkingCovariance,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let pass = accumulate(data, beta, link, cov, true)?;
    Ok((pass.h.unwrap(), pass.m.unwrap()))
}

/// Moment matrix of standardized residuals,
/// `Rbar = (1/n) sum A_i^{-1/2} e_i e_i' A_i^{-1/2}`.
pub fn rbar<C: AsRef<ClusterObservation>>(
    data: &[C],
    beta: &DVector<f64>,
    link: Link,
) -> Result<DMatrix<f64>> {
    let (m, p) = dataset_shape(data)?;
    if beta.len() != p {
        return Err(Error::Dimension(format!("beta has {} entries, data has p = {p}", beta.len())));
    }
    let mut s = Scratch::new(m, p);
    let mut out = DMatrix::zeros(m, m);
    let mut clamped = 0usize;
    for c in data {
        let c = c.as_ref();
        s.load(c, beta, link, A_FLOOR)?;
        for j in 0..m {
            if s.sqrt_a[j] * s.sqrt_a[j] <= A_FLOOR * (1.0 + 1e-12) {
                clamped += 1;
            }
        }
        out.ger(1.0, &s.e, &s.e, 1.0);
    }
    if clamped > 0 {
        warn!("rbar: {clamped} derivative entries clamped at {A_FLOOR:e} (logit saturation)");
    }
    Ok(symmetrize(&out) / data.len() as f64)
}

/// Inverse of `Rbar`, with a small ridge when it is badly conditioned.
pub fn rbar_inverse(rbar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cond = condition_number(rbar);
    let mut target = rbar.clone();
    if !(cond <= RBAR_MAX_CONDITION) {
        let m = rbar.nrows();
        target += DMatrix::identity(m, m) * RBAR_RIDGE;
        let after = condition_number(&target);
        if !(after <= RBAR_MAX_CONDITION) || target.clone().cholesky().is_none() {
            return Err(Error::SingularRbar { what: "residual moment matrix Rbar".into(), condition: cond });
        }
        warn!("rbar condition number {cond:.3e}; added {RBAR_RIDGE:e} ridge");
    }
    match target.clone().cholesky() {
        Some(ch) => Ok(symmetrize(&ch.inverse())),
        None => Err(Error::SingularRbar { what: "residual moment matrix Rbar".into(), condition: cond }),
    }
}

/// `G = sum X_i' A_i^{1/2} Rbar^{-1} A_i^{1/2} X_i` (p x p).
pub fn g_matrix<C: AsRef<ClusterObservation>>(
    data: &[C],
    beta: &DVector<f64>,
    link: Link,
    rbar: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let rbar_inv = rbar_inverse(rbar)?;
    g_matrix_with_inverse(data, beta, link, &rbar_inv)
}

pub(crate) fn g_matrix_with_inverse<C: AsRef<ClusterObservation>>(
    data: &[C],
    beta: &DVector<f64>,
    link: Link,
    rbar_inv: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (m, p) = dataset_shape(data)?;
    if rbar_inv.nrows() != m {
        return Err(Error::Dimension(format!("Rbar is {0}x{0}, clusters have m = {m}", rbar_inv.nrows())));
    }
    let mut s = Scratch::new(m, p);
    let mut g = DMatrix::zeros(p, p);
    for c in data {
        s.load(c.as_ref(), beta, link, 0.0)?;
        s.qz.gemm(1.0, rbar_inv, &s.z, 0.0);
        g.gemm_tr(1.0, &s.z, &s.qz, 1.0);
    }
    Ok(symmetrize(&g))
}

/// Liang–Zeger moment estimates `(alpha_hat, phi_hat)` at `beta`.
pub fn estimate_alpha<C: AsRef<ClusterObservation>>(
    data: &[C],
    beta: &DVector<f64>,
    link: Link,
    kind: CorrKind,
) -> Result<(f64, f64)> {
    let (m, p) = dataset_shape(data)?;
    if data.len() < 2 {
        return Err(Error::InsufficientData("moment estimation needs at least 2 clusters".into()));
    }
    let mut s = Scratch::new(m, p);
    let mut sums = PearsonSums::default();
    for c in data {
        s.load(c.as_ref(), beta, link, 0.0)?;
        sums.add(&s.e);
    }
    sums.finish(kind, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Dispersion {
    /// Pearson moment estimate.
    Estimate,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Convergence threshold on the sup-norm of the dispersion-free score.
    pub tol: f64,
    pub max_iter: usize,
    pub dispersion: Dispersion,
    /// Maximum number of step halvings per scoring iteration.
    pub max_halvings: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 50, dispersion: Dispersion::Estimate, max_halvings: 10 }
    }
}

/// Result of [`fit_mqle`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeeFit {
    pub link: Link,
    pub kind: CorrKind,
    pub beta: DVector<f64>,
    pub alpha_hat: f64,
    pub phi_hat: f64,
    pub h: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub rbar: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of the score with the dispersion factored out.
    pub score_norm: f64,
    pub h_condition: f64,
    /// Set when `H` is numerically rank deficient.
    pub ill_conditioned: bool,
}

impl GeeFit {
    pub fn working_covariance(&self) -> Result<WorkingCovariance> {
        let m = self.rbar.nrows();
        WorkingCovariance::new(WorkingCorrelation { kind: self.kind, alpha: self.alpha_hat }, usable_phi(self.phi_hat), m)
    }
}

fn usable_phi(phi: f64) -> f64 {
    if phi > 1e-300 && phi.is_finite() { phi } else { 1.0 }
}

/// Deterministic starting value: zeros for logit, stacked least squares for identity.
pub fn initial_beta<C: AsRef<ClusterObservation>>(data: &[C], link: Link) -> Result<DVector<f64>> {
    let (_, p) = dataset_shape(data)?;
    match link {
        Link::Logit => Ok(DVector::zeros(p)),
        Link::Identity => {
            let mut xtx = DMatrix::zeros(p, p);
            let mut xty = DVector::zeros(p);
            for c in data {
                let c = c.as_ref();
                xtx.gemm_tr(1.0, &c.x, &c.x, 1.0);
                xty.gemv_tr(1.0, &c.x, &c.y, 1.0);
            }
            crate::linalg::spd_solve(&xtx, &xty, "stacked Gram matrix X'X")
        }
    }
}

const H_WARN_CONDITION: f64 = 1e12;

fn nuisance(sums: &PearsonSums, kind: CorrKind, p: usize, opts: &FitOptions) -> Result<(f64, f64)> {
    match opts.dispersion {
        Dispersion::Estimate => sums.finish(kind, p),
        Dispersion::Fixed(phi) => sums.finish_with_dispersion(kind, p, Some(phi)),
    }
}

/// Solve the estimating equations by Fisher scoring, alternating with moment
/// updates of `alpha` and `phi`.
pub fn fit_mqle<C: AsRef<ClusterObservation>>(
    data: &[C],
    link: Link,
    kind: CorrKind,
    beta_init: &DVector<f64>,
    opts: &FitOptions,
) -> Result<GeeFit> {
    let (m, p) = dataset_shape(data)?;
    if beta_init.len() != p {
        return Err(Error::Dimension(format!("beta_init has {} entries, p = {p}", beta_init.len())));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {}", opts.tol)));
    }
    if data.len() < 2 {
        return Err(Error::InsufficientData("fit needs at least 2 clusters".into()));
    }

    let mut beta = beta_init.clone();
    let mut sums = {
        let mut s = Scratch::new(m, p);
        let mut sums = PearsonSums::default();
        for c in data {
            s.load(c.as_ref(), &beta, link, 0.0)?;
            sums.add(&s.e);
        }
        sums
    };
    let mut iterations = 0;
    let mut converged = false;
    let (mut alpha, mut phi);
    let mut pass;
    loop {
        (alpha, phi) = nuisance(&sums, kind, p, opts)?;
        let cov = WorkingCovariance::new(WorkingCorrelation { kind, alpha }, usable_phi(phi), m)?;
        pass = accumulate(data, &beta, link, &cov, true)?;
        let norm = sup_norm(&pass.score) * cov.phi;
        if !norm.is_finite() {
            return Err(Error::NumericalDomain("score is not finite".into()));
        }
        if norm <= opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;
        let h = pass.h.as_ref().unwrap();
        let step = crate::linalg::spd_solve(h, &pass.score, "information matrix H")?;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = &beta + &step * scale;
            match accumulate(data, &trial, link, &cov, false) {
                Ok(tp) => {
                    let tn = sup_norm(&tp.score) * cov.phi;
                    if tn.is_finite() && tn < norm {
                        accepted = Some((trial, tp.pearson));
                        break;
                    }
                }
                Err(e) if matches!(e, Error::NumericalDomain(_)) => {}
                Err(e) => return Err(e),
            }
            scale *= 0.5;
        }
        match accepted {
            Some((b, ps)) => {
                beta = b;
                sums = ps;
            }
            None => {
                // no decrease along the scoring direction: take the smallest step
                let trial = &beta + &step * scale;
                let tp = accumulate(data, &trial, link, &cov, false)?;
                beta = trial;
                sums = tp.pearson;
            }
        }
    }

    let h = pass.h.unwrap();
    let mm = pass.m.unwrap();
    let h_condition = condition_number(&h);
    let ill_conditioned = !(h_condition <= H_WARN_CONDITION);
    if ill_conditioned {
        warn!("fit_mqle: H condition number {h_condition:.3e}");
    }
    let cov_phi = usable_phi(phi);
    let score_norm = sup_norm(&pass.score) * cov_phi;
    let rb = rbar(data, &beta, link)?;
    let g = g_matrix(data, &beta, link, &rb)?;
    Ok(GeeFit {
        link,
        kind,
        beta,
        alpha_hat: alpha,
        phi_hat: phi,
        h,
        m: mm,
        g,
        rbar: rb,
        converged,
        iterations,
        score_norm,
        h_condition,
        ill_conditioned,
    })
}

/// Quasi-likelihood under independence, `Q(beta; I)`, scaled by `1/phi`.
fn independence_quasi_likelihood<C: AsRef<ClusterObservation>>(
    data: &[C],
    beta: &DVector<f64>,
    link: Link,
    phi: f64,
) -> Result<f64> {
    let mut q = 0.0;
    for c in data {
        let c = c.as_ref();
        let (mu, _) = mean_and_derivative(link, &c.x, beta)?;
        for j in 0..c.m() {
            let y = c.y[j];
            q += match link {
                Link::Identity => -0.5 * (y - mu[j]).powi(2),
                Link::Logit => y * mu[j].ln() + (1.0 - y) * (1.0 - mu[j]).ln(),
            };
        }
    }
    Ok(q / phi)
}

/// Pan's QIC: `-2 Q(beta_hat; I) + 2 tr(Omega_I V_R)` with `Omega_I` the
/// independence-model information and `V_R = H^{-1} M H^{-1}` the sandwich
/// covariance of the fit.
pub fn qic<C: AsRef<ClusterObservation>>(fit: &GeeFit, data: &[C], link: Link) -> Result<f64> {
    let phi = usable_phi(fit.phi_hat);
    let (m, _) = dataset_shape(data)?;
    let ind = WorkingCovariance::new(WorkingCorrelation::independence(), phi, m)?;
    let (omega_i, _) = information_matrices(data, &fit.beta, link, &ind)?;
    if omega_i.clone().cholesky().is_none() {
        return Err(Error::Singular {
            what: "independence information Omega_I".into(),
            condition: condition_number(&omega_i),
        });
    }
    let h_inv = spd_inverse(&fit.h, "information matrix H")?;
    let sandwich = &h_inv * &fit.m * &h_inv;
    let penalty = (omega_i * sandwich).trace();
    let q = independence_quasi_likelihood(data, &fit.beta, link, phi)?;
    Ok(-2.0 * q + 2.0 * penalty)
}
