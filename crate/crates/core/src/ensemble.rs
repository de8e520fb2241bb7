//! Ensemble container and its sample statistics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `n_state x n_ens` matrix whose columns are member states.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
    pub time_index: usize,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>, time_index: usize) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::DegenerateEnsemble(format!(
                "need at least 2 members, got {}",
                members.ncols()
            )));
        }
        if members.nrows() == 0 {
            return Err(Error::DegenerateEnsemble("empty state dimension".into()));
        }
        if let Some(idx) = members.iter().position(|v| !v.is_finite()) {
            return Err(Error::DegenerateEnsemble(format!(
                "non-finite entry in member {}",
                idx / members.nrows()
            )));
        }
        Ok(Ensemble {
            members,
            time_index,
        })
    }

    pub fn from_columns(columns: &[DVector<f64>], time_index: usize) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::DegenerateEnsemble("no members".into()));
        }
        let n = columns[0].len();
        if let Some(bad) = columns.iter().find(|c| c.len() != n) {
            return Err(Error::dim("ensemble member", n, bad.len()));
        }
        Ensemble::new(DMatrix::from_columns(columns), time_index)
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }

    pub fn n_state(&self) -> usize {
        self.members.nrows()
    }

    pub fn n_ens(&self) -> usize {
        self.members.ncols()
    }

    pub fn member(&self, e: usize) -> DVector<f64> {
        self.members.column(e).into_owned()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    /// Member deviations from the ensemble mean; every row sums to zero.
    pub fn anomalies(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut a = self.members.clone();
        for mut col in a.column_iter_mut() {
            col -= &mean;
        }
        a
    }

    /// Sample covariance with the unbiased `n_ens - 1` divisor.
    pub fn covariance(&self) -> DMatrix<f64> {
        let a = self.anomalies();
        let mut b = &a * a.transpose() / (self.n_ens() as f64 - 1.0);
        // the product is symmetric up to round-off; make it exact
        for i in 0..b.nrows() {
            for j in 0..i {
                let v = 0.5 * (b[(i, j)] + b[(j, i)]);
                b[(i, j)] = v;
                b[(j, i)] = v;
            }
        }
        b
    }

    /// Multiplicative inflation of the deviations about the mean.
    pub fn inflate(&self, delta: f64) -> Result<Ensemble> {
        if !(delta >= 1.0 && delta.is_finite()) {
            return Err(Error::Parameter(format!(
                "inflation factor must be >= 1, got {delta}"
            )));
        }
        if delta == 1.0 {
            return Ok(self.clone());
        }
        let mean = self.mean();
        let a = self.anomalies();
        let mut members = a * delta;
        for mut col in members.column_iter_mut() {
            col += &mean;
        }
        Ok(Ensemble {
            members,
            time_index: self.time_index,
        })
    }

    /// Rebuild from a mean and a deviation matrix.
    pub(crate) fn from_mean_and_anomalies(
        mean: &DVector<f64>,
        anomalies: DMatrix<f64>,
        time_index: usize,
    ) -> Result<Ensemble> {
        let mut members = anomalies;
        for mut col in members.column_iter_mut() {
            col += mean;
        }
        Ensemble::new(members, time_index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ensemble(n: usize, m: usize, seed: u64) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ensemble::new(DMatrix::from_fn(n, m, |_, _| rng.random_range(-5.0..5.0)), 0).unwrap()
    }

    #[test]
    fn rejects_single_member_and_non_finite() {
        assert!(Ensemble::new(DMatrix::zeros(3, 1), 0).is_err());
        let mut m = DMatrix::zeros(3, 4);
        m[(1, 2)] = f64::NAN;
        assert!(Ensemble::new(m, 0).is_err());
    }

    #[test]
    fn mean_of_two_points() {
        let ens = Ensemble::new(DMatrix::from_column_slice(2, 2, &[0.0, 0.0, 2.0, 4.0]), 0).unwrap();
        assert_eq!(ens.mean().as_slice(), &[1.0, 2.0]);
        let v = DVector::from_vec(vec![1.5, -2.0, 3.0]);
        let same = Ensemble::from_columns(&[v.clone(), v.clone(), v.clone()], 0).unwrap();
        assert_eq!(same.mean(), v);
        assert_eq!(same.anomalies(), DMatrix::zeros(3, 3));
        assert_eq!(same.covariance(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn mean_matches_double_loop() {
        let ens = random_ensemble(5, 25, 1);
        let mean = ens.mean();
        for i in 0..5 {
            let mut s = 0.0;
            for e in 0..25 {
                s += ens.members()[(i, e)];
            }
            assert!((mean[i] - s / 25.0).abs() < 1e-14);
        }
    }

    #[test]
    fn two_point_variance() {
        let ens = Ensemble::new(DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]), 0).unwrap();
        assert_eq!(ens.anomalies().as_slice(), &[-1.0, 1.0]);
        assert_eq!(ens.covariance()[(0, 0)], 2.0);
        let inflated = ens.inflate(2.0).unwrap();
        assert_eq!(inflated.members().as_slice(), &[-2.0, 2.0]);
        assert_eq!(inflated.covariance()[(0, 0)], 8.0);
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let ens = random_ensemble(10, 25, 2);
        let b = ens.covariance();
        assert!((&b - b.transpose()).amax() < 1e-13);
        let eig = b.symmetric_eigenvalues();
        assert!(eig.iter().all(|l| *l >= -1e-10));
        // rank at most n_ens - 1 when n_state >= n_ens
        let tall = random_ensemble(30, 6, 3).covariance();
        let eig = tall.symmetric_eigenvalues();
        let big = eig.iter().filter(|l| l.abs() > 1e-9).count();
        assert!(big <= 5);
    }

    #[test]
    fn inflation_scales_covariance() {
        let ens = random_ensemble(8, 25, 4);
        assert_eq!(ens.inflate(1.0).unwrap().members(), ens.members());
        let b = ens.covariance();
        let b2 = ens.inflate(1.09).unwrap().covariance();
        assert!((b2 - b * (1.09 * 1.09)).amax() < 1e-12);
        assert!(ens.inflate(0.9).is_err());
    }

    proptest! {
        #[test]
        fn inflation_preserves_mean(seed in 0u64..1000, delta in 1.0f64..3.0) {
            let ens = random_ensemble(6, 7, seed);
            let m0 = ens.mean();
            let m1 = ens.inflate(delta).unwrap().mean();
            prop_assert!((m0 - m1).amax() < 1e-12);
        }

        #[test]
        fn covariance_matches_anomaly_product(seed in 0u64..1000) {
            let ens = random_ensemble(5, 9, seed);
            let a = ens.anomalies();
            for i in 0..5 {
                prop_assert!(a.row(i).sum().abs() < 1e-12);
            }
            let direct = &a * a.transpose() / 8.0;
            prop_assert!((ens.covariance() - direct).amax() < 1e-13);
        }
    }
}
