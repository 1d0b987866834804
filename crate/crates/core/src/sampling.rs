//! Candidate pool management and next-subject selection.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{principal_submatrix, spd_inverse, subvector};
use crate::model::{
    dataset_shape, g_matrix_with_inverse, rbar_inverse, ClusterObservation, Link, RBAR_MAX_CONDITION,
    RBAR_RIDGE,
};

/// A fixed pool of clusters split into recruited and inactive sets.
#[derive(Debug, Clone)]
pub struct DataPool {
    clusters: Vec<ClusterObservation>,
    recruited: Vec<bool>,
    order: Vec<usize>,
    pub rng_seed: u64,
}

impl DataPool {
    pub fn new(clusters: Vec<ClusterObservation>, rng_seed: u64) -> Result<Self> {
        dataset_shape(&clusters)?;
        let n = clusters.len();
        Ok(Self { clusters, recruited: vec![false; n], order: Vec::new(), rng_seed })
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn clusters(&self) -> &[ClusterObservation] {
        &self.clusters
    }

    pub fn cluster(&self, index: usize) -> &ClusterObservation {
        &self.clusters[index]
    }

    pub fn is_recruited(&self, index: usize) -> bool {
        self.recruited[index]
    }

    pub fn n_recruited(&self) -> usize {
        self.order.len()
    }

    pub fn n_inactive(&self) -> usize {
        self.clusters.len() - self.order.len()
    }

    /// Pool indices in recruitment order.
    pub fn recruitment_order(&self) -> &[usize] {
        &self.order
    }

    pub fn recruited_clusters(&self) -> Vec<&ClusterObservation> {
        self.order.iter().map(|&i| &self.clusters[i]).collect()
    }

    pub fn inactive_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.recruited.iter().enumerate().filter(|(_, &r)| !r).map(|(i, _)| i)
    }

    /// Move `index` from the inactive to the recruited set.
    pub fn recruit(&mut self, index: usize) -> Result<()> {
        if index >= self.clusters.len() {
            return Err(Error::InvalidParameter(format!("pool index {index} out of range")));
        }
        if self.recruited[index] {
            return Err(Error::AlreadyRecruited(index));
        }
        self.recruited[index] = true;
        self.order.push(index);
        Ok(())
    }

    /// Forget all recruitment.
    pub fn reset(&mut self) {
        self.recruited.iter_mut().for_each(|r| *r = false);
        self.order.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Random,
    DOptimal,
}

/// Uniform draw from the inactive set.
pub fn select_random<R: Rng + ?Sized>(pool: &DataPool, rng: &mut R) -> Result<usize> {
    let n = pool.n_inactive();
    if n == 0 {
        return Err(Error::PoolExhausted);
    }
    let k = rng.random_range(0..n);
    Ok(pool.inactive_indices().nth(k).expect("inactive count is consistent"))
}

/// Precomputed pieces of the modified sequential D-criterion for one step.
#[derive(Debug, Clone)]
pub struct DCriterion {
    pub link: Link,
    pub selected: Vec<usize>,
    /// Coefficients on the selected variables.
    pub beta_sel: DVector<f64>,
    /// Inverse of `G` restricted to the selected variables.
    pub g_sel_inv: DMatrix<f64>,
    /// `Rbar`, ridged if it had to be for inversion.
    pub rbar: DMatrix<f64>,
}

impl DCriterion {
    /// Build from recruited data at the shrinkage estimate `beta`.
    pub fn new<C: AsRef<ClusterObservation>>(
        data: &[C],
        beta: &DVector<f64>,
        link: Link,
        indicators: &[bool],
    ) -> Result<Self> {
        let rbar = crate::model::rbar(data, beta, link)?;
        Self::with_rbar(data, beta, link, indicators, rbar)
    }

    pub fn with_rbar<C: AsRef<ClusterObservation>>(
        data: &[C],
        beta: &DVector<f64>,
        link: Link,
        indicators: &[bool],
        rbar: DMatrix<f64>,
    ) -> Result<Self> {
        let selected = crate::shrinkage::selected_indices(indicators);
        if selected.is_empty() {
            return Err(Error::NoVariablesSelected);
        }
        let rbar_inv = rbar_inverse(&rbar)?;
        let rbar = regularized_rbar(&rbar);
        let g = g_matrix_with_inverse(data, beta, link, &rbar_inv)?;
        let g_sel = principal_submatrix(&g, &selected);
        let g_sel_inv = spd_inverse(&g_sel, "selected block of G")?;
        Ok(Self { link, beta_sel: subvector(beta, &selected), selected, g_sel_inv, rbar })
    }

    /// `det(Rbar + B G_sel^{-1} B')` with `B = A^{1/2} X_sel`.
    pub fn score(&self, candidate: &ClusterObservation) -> f64 {
        let m = candidate.m();
        let q = self.selected.len();
        let mut b = DMatrix::zeros(m, q);
        for j in 0..m {
            let mut eta = 0.0;
            for (k, &col) in self.selected.iter().enumerate() {
                eta += candidate.x[(j, col)] * self.beta_sel[k];
            }
            let s = self.link.derivative(eta).sqrt();
            for (k, &col) in self.selected.iter().enumerate() {
                b[(j, k)] = s * candidate.x[(j, col)];
            }
        }
        let bg = &b * &self.g_sel_inv;
        let mut inner = self.rbar.clone();
        inner.gemm_tr(1.0, &bg.transpose(), &b.transpose(), 1.0);
        inner.determinant()
    }
}

fn regularized_rbar(rbar: &DMatrix<f64>) -> DMatrix<f64> {
    if crate::linalg::condition_number(rbar) <= RBAR_MAX_CONDITION {
        rbar.clone()
    } else {
        let m = rbar.nrows();
        rbar + DMatrix::identity(m, m) * RBAR_RIDGE
    }
}

/// Candidate ranking score for the modified D-criterion.
///
/// Equals `det(G_sel + g_sel) / (det(G_sel) det(Rbar^{-1}))` by the matrix
/// determinant lemma, so it orders candidates exactly like the direct
/// determinant.
pub fn d_gain(
    g_sel_inverse: &DMatrix<f64>,
    candidate: &ClusterObservation,
    beta: &DVector<f64>,
    link: Link,
    rbar: &DMatrix<f64>,
    indicators: &[bool],
) -> f64 {
    let selected = crate::shrinkage::selected_indices(indicators);
    let crit = DCriterion {
        link,
        beta_sel: subvector(beta, &selected),
        selected,
        g_sel_inv: g_sel_inverse.clone(),
        rbar: rbar.clone(),
    };
    crit.score(candidate)
}

/// Inactive candidate maximizing the D-criterion; ties go to the lowest
/// cluster id.
pub fn select_d_optimal(pool: &DataPool, criterion: &DCriterion) -> Result<usize> {
    let inactive: Vec<usize> = pool.inactive_indices().collect();
    if inactive.is_empty() {
        return Err(Error::PoolExhausted);
    }
    let scores: Vec<f64> = inactive.par_iter().map(|&i| criterion.score(pool.cluster(i))).collect();
    let mut best = inactive[0];
    let mut best_score = scores[0];
    for (&i, &s) in inactive.iter().zip(&scores).skip(1) {
        let better = s > best_score
            || (s == best_score && pool.cluster(i).id < pool.cluster(best).id)
            || (best_score.is_nan() && !s.is_nan());
        if better {
            best = i;
            best_score = s;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cluster(id: u64, rows: &[&[f64]]) -> ClusterObservation {
        let m = rows.len();
        let p = rows[0].len();
        let x = DMatrix::from_fn(m, p, |i, j| rows[i][j]);
        ClusterObservation::new(id, DVector::zeros(m), x).unwrap()
    }

    fn pool_of(n: usize) -> DataPool {
        let cs = (0..n).map(|i| cluster(i as u64, &[&[i as f64 + 1.0]])).collect();
        DataPool::new(cs, 7).unwrap()
    }

    #[test]
    fn single_inactive_is_chosen() {
        let mut pool = pool_of(3);
        pool.recruit(0).unwrap();
        pool.recruit(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_random(&pool, &mut rng).unwrap(), 1);
    }

    #[test]
    fn random_selection_deterministic_per_seed() {
        let pool = pool_of(50);
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            (0..10).map(|_| select_random(&pool, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn random_selection_uniform() {
        let pool = pool_of(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 4];
        let draws = 100_000;
        for _ in 0..draws {
            counts[select_random(&pool, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.25).abs() < 0.01, "frequency {f}");
        }
    }

    #[test]
    fn recruit_lifecycle() {
        let mut pool = pool_of(2);
        pool.recruit(1).unwrap();
        assert!(pool.is_recruited(1));
        assert_eq!(pool.n_inactive(), 1);
        assert!(matches!(pool.recruit(1), Err(Error::AlreadyRecruited(1))));
        pool.recruit(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(select_random(&pool, &mut rng), Err(Error::PoolExhausted)));
        let crit = DCriterion {
            link: Link::Identity,
            selected: vec![0],
            beta_sel: DVector::zeros(1),
            g_sel_inv: DMatrix::identity(1, 1),
            rbar: DMatrix::identity(1, 1),
        };
        assert!(matches!(select_d_optimal(&pool, &crit), Err(Error::PoolExhausted)));
    }

    #[test]
    fn zero_covariates_score_det_rbar() {
        let rbar = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = cluster(0, &[&[0.0, 0.0], &[0.0, 0.0]]);
        let s = d_gain(&DMatrix::identity(2, 2), &c, &DVector::zeros(2), Link::Identity, &rbar, &[true, true]);
        assert!((s - 1.75).abs() < 1e-12);
    }

    #[test]
    fn scalar_lemma_example() {
        // one selected variable, m = 2; u-vectors with squared norm 2 and 1
        let a = cluster(0, &[&[1.0, 9.0], &[1.0, 9.0]]);
        let b = cluster(1, &[&[1.0, 9.0], &[0.0, 9.0]]);
        let ind = [true, false];
        let g = DMatrix::identity(1, 1);
        let r = DMatrix::identity(2, 2);
        let beta = DVector::zeros(2);
        let sa = d_gain(&g, &a, &beta, Link::Identity, &r, &ind);
        let sb = d_gain(&g, &b, &beta, Link::Identity, &r, &ind);
        assert!((sa - 3.0).abs() < 1e-12 && (sb - 2.0).abs() < 1e-12);
        let pool = DataPool::new(vec![b.clone(), a.clone()], 0).unwrap();
        let crit = DCriterion { link: Link::Identity, selected: vec![0], beta_sel: DVector::zeros(1), g_sel_inv: g, rbar: r };
        assert_eq!(pool.cluster(select_d_optimal(&pool, &crit).unwrap()).id, 0);
    }

    #[test]
    fn identical_candidates_pick_lowest_id() {
        let cs: Vec<_> = [5u64, 3, 9].iter().map(|&id| cluster(id, &[&[1.0], &[2.0]])).collect();
        let pool = DataPool::new(cs, 0).unwrap();
        let crit = DCriterion {
            link: Link::Identity,
            selected: vec![0],
            beta_sel: DVector::zeros(1),
            g_sel_inv: DMatrix::identity(1, 1),
            rbar: DMatrix::identity(2, 2),
        };
        assert_eq!(pool.cluster(select_d_optimal(&pool, &crit).unwrap()).id, 3);
    }
}
