//! Forecast propagation and the two analysis kernels (perturbed-observation
//! EnKF and the half-gain deterministic DEnKF), both driven by an externally
//! supplied, possibly localized, Kalman gain.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::localization::{build_rho, localize_covariance, LocalizationSpec};
use crate::lorenz96::Lorenz96;

/// Observations `y` of the state through a linear operator `h`, with
/// independent errors of variance `r_diag`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    pub y: DVector<f64>,
    pub h: DMatrix<f64>,
    pub r_diag: DVector<f64>,
}

impl ObservationBatch {
    pub fn new(y: DVector<f64>, h: DMatrix<f64>, r_diag: DVector<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Parameter("need at least one observation".into()));
        }
        if h.nrows() != y.len() {
            return Err(Error::dim("observation operator rows", y.len(), h.nrows()));
        }
        if r_diag.len() != y.len() {
            return Err(Error::dim("observation error variances", y.len(), r_diag.len()));
        }
        if r_diag.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Parameter(
                "observation error variances must be > 0".into(),
            ));
        }
        if y.iter().chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Parameter("observations must be finite".into()));
        }
        Ok(ObservationBatch { y, h, r_diag })
    }

    /// Every state component observed directly with a common error variance.
    pub fn identity(y: DVector<f64>, variance: f64) -> Result<Self> {
        let n = y.len();
        ObservationBatch::new(y, DMatrix::identity(n, n), DVector::from_element(n, variance))
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_state(&self) -> usize {
        self.h.ncols()
    }

    pub fn observe(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n_state() {
            return Err(Error::dim("observed state", self.n_state(), x.len()));
        }
        Ok(&self.h * x)
    }

    fn check_ensemble(&self, ens: &Ensemble) -> Result<()> {
        if ens.n_state() != self.n_state() {
            return Err(Error::dim("ensemble state vs operator", self.n_state(), ens.n_state()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVariant {
    Stochastic,
    Deterministic,
}

impl std::str::FromStr for FilterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(FilterVariant::Stochastic),
            "deterministic" => Ok(FilterVariant::Deterministic),
            other => Err(Error::Parse(format!("unknown filter variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub n_ens: usize,
    pub inflation: f64,
    pub variant: FilterVariant,
    pub rng_seed: u64,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ens < 2 {
            return Err(Error::Parameter(format!("n_ens must be >= 2, got {}", self.n_ens)));
        }
        if !(self.inflation >= 1.0 && self.inflation.is_finite()) {
            return Err(Error::Parameter(format!(
                "inflation must be >= 1, got {}",
                self.inflation
            )));
        }
        Ok(())
    }
}

/// Propagate every member independently through the model (no model error).
pub fn forecast(model: &Lorenz96, ens: &Ensemble, n_steps: usize) -> Result<Ensemble> {
    if ens.n_state() != model.k {
        return Err(Error::dim("ensemble state vs model", model.k, ens.n_state()));
    }
    let columns = (0..ens.n_ens())
        .into_par_iter()
        .map(|e| {
            model
                .integrate(&ens.member(e), n_steps)
                .map_err(|_| Error::Divergence {
                    cycle: ens.time_index,
                    member: Some(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::from_columns(&columns, ens.time_index)
}

/// `K = B_loc H^T (H B_loc H^T + R)^{-1}` via a Cholesky solve of the
/// innovation covariance.
pub fn kalman_gain(b_loc: &DMatrix<f64>, obs: &ObservationBatch) -> Result<DMatrix<f64>> {
    let n = obs.n_state();
    if b_loc.shape() != (n, n) {
        return Err(Error::dim("background covariance", n, b_loc.nrows()));
    }
    let hb = &obs.h * b_loc;
    let mut innovation = &hb * obs.h.transpose();
    for i in 0..obs.n_obs() {
        innovation[(i, i)] += obs.r_diag[i];
    }
    let chol = innovation.cholesky().ok_or_else(|| {
        Error::LinearAlgebra("innovation covariance is not positive definite".into())
    })?;
    // S K^T = H B, using the symmetry of B and S
    let gain = chol.solve(&hb).transpose();
    if gain.iter().any(|v| !v.is_finite()) {
        return Err(Error::LinearAlgebra("non-finite Kalman gain".into()));
    }
    Ok(gain)
}

/// Gain from the forecast covariance after Schur-product localization.
pub fn localized_gain(
    ens: &Ensemble,
    obs: &ObservationBatch,
    spec: &LocalizationSpec,
) -> Result<DMatrix<f64>> {
    obs.check_ensemble(ens)?;
    let rho = build_rho(spec, ens.n_state())?;
    kalman_gain(&localize_covariance(&ens.covariance(), &rho)?, obs)
}

fn check_gain(ens: &Ensemble, obs: &ObservationBatch, gain: &DMatrix<f64>) -> Result<()> {
    obs.check_ensemble(ens)?;
    if gain.nrows() != ens.n_state() {
        return Err(Error::dim("gain rows", ens.n_state(), gain.nrows()));
    }
    if gain.ncols() != obs.n_obs() {
        return Err(Error::dim("gain columns", obs.n_obs(), gain.ncols()));
    }
    Ok(())
}

/// Perturbed-observation update: each member assimilates `y + zeta(e)` with
/// `zeta(e) ~ N(0, R)`, all sharing the same gain. Perturbations are drawn
/// member by member, observation by observation.
pub fn analysis_stochastic<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &ObservationBatch,
    gain: &DMatrix<f64>,
    rng: &mut R,
) -> Result<Ensemble> {
    check_gain(ens, obs, gain)?;
    let std: Vec<f64> = obs.r_diag.iter().map(|r| r.sqrt()).collect();
    let mut members = ens.members().clone();
    for mut col in members.column_iter_mut() {
        let mut innovation = &obs.y - &obs.h * &col;
        for (i, s) in std.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            innovation[i] += s * z;
        }
        col += gain * innovation;
    }
    Ensemble::new(members, ens.time_index).map_err(|_| Error::Divergence {
        cycle: ens.time_index,
        member: None,
    })
}

/// DEnKF update: the mean takes the full gain, deviations the half gain.
pub fn analysis_deterministic(
    ens: &Ensemble,
    obs: &ObservationBatch,
    gain: &DMatrix<f64>,
) -> Result<Ensemble> {
    check_gain(ens, obs, gain)?;
    let mean = ens.mean();
    let anomalies = ens.anomalies();
    let mean_a = &mean + gain * (&obs.y - &obs.h * &mean);
    let anomalies_a = &anomalies - (gain * 0.5) * (&obs.h * &anomalies);
    Ensemble::from_mean_and_anomalies(&mean_a, anomalies_a, ens.time_index).map_err(|_| {
        Error::Divergence {
            cycle: ens.time_index,
            member: None,
        }
    })
}

/// Run whichever analysis `variant` selects.
pub fn analysis<R: Rng + ?Sized>(
    variant: FilterVariant,
    ens: &Ensemble,
    obs: &ObservationBatch,
    gain: &DMatrix<f64>,
    rng: &mut R,
) -> Result<Ensemble> {
    match variant {
        FilterVariant::Stochastic => analysis_stochastic(ens, obs, gain, rng),
        FilterVariant::Deterministic => analysis_deterministic(ens, obs, gain),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localization::{Radii, Taper};
    use crate::rng::stream;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-2.0..2.0))
    }

    fn toy() -> (Ensemble, ObservationBatch) {
        let ens = Ensemble::new(random_matrix(3, 2, 1), 0).unwrap();
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        let obs = ObservationBatch::new(
            DVector::from_vec(vec![0.3, -0.7]),
            h,
            DVector::from_vec(vec![0.5, 2.0]),
        )
        .unwrap();
        (ens, obs)
    }

    #[test]
    fn observation_batch_validation() {
        assert!(ObservationBatch::identity(DVector::zeros(0), 1.0).is_err());
        assert!(ObservationBatch::identity(DVector::zeros(3), 0.0).is_err());
        assert!(ObservationBatch::new(DVector::zeros(2), DMatrix::zeros(3, 4), DVector::from_element(2, 1.0)).is_err());
    }

    #[test]
    fn forecast_zero_steps_and_equilibrium() {
        let model = Lorenz96::default();
        let ens = Ensemble::new(random_matrix(40, 5, 2), 3).unwrap();
        assert_eq!(forecast(&model, &ens, 0).unwrap(), ens);
        let eq = Ensemble::new(DMatrix::from_element(40, 4, 8.0), 0).unwrap();
        assert_eq!(forecast(&model, &eq, 50).unwrap(), eq);
    }

    #[test]
    fn forecast_matches_repeated_steps() {
        let model = Lorenz96::default();
        let ens = Ensemble::new(random_matrix(40, 3, 3), 0).unwrap();
        let fc = forecast(&model, &ens, 7).unwrap();
        for e in 0..3 {
            let mut x = ens.member(e);
            for _ in 0..7 {
                x = model.step_rk4(&x).unwrap();
            }
            assert_eq!(fc.member(e), x);
        }
    }

    #[test]
    fn forecast_blow_up_names_the_member() {
        let model = Lorenz96::new(4, 8.0, 5.0).unwrap();
        let mut m = DMatrix::from_element(4, 3, 8.0);
        m.column_mut(1).copy_from_slice(&[1e100, -1e100, 1e100, 3.0]);
        let ens = Ensemble::new(m, 12).unwrap();
        match forecast(&model, &ens, 10) {
            Err(Error::Divergence { cycle, member }) => {
                assert_eq!(cycle, 12);
                assert_eq!(member, Some(1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gain_cases() {
        let obs = ObservationBatch::identity(DVector::from_vec(vec![0.0]), 1.0).unwrap();
        let k = kalman_gain(&DMatrix::from_element(1, 1, 1.0), &obs).unwrap();
        assert!((k[(0, 0)] - 0.5).abs() < 1e-15);
        let obs6 = ObservationBatch::identity(DVector::zeros(6), 0.25).unwrap();
        assert_eq!(kalman_gain(&DMatrix::zeros(6, 6), &obs6).unwrap(), DMatrix::zeros(6, 6));
        let a = random_matrix(6, 6, 4);
        let b = &a * a.transpose() + DMatrix::identity(6, 6) * 0.1;
        let k = kalman_gain(&b, &obs6).unwrap();
        let resid = &k * (&b + DMatrix::identity(6, 6) * 0.25) - &b;
        assert!(resid.amax() < 1e-10);
    }

    #[test]
    fn gain_residual_general_operator() {
        let (_, obs) = toy();
        let a = random_matrix(3, 3, 5);
        let b = &a * a.transpose();
        let k = kalman_gain(&b, &obs).unwrap();
        let s = &obs.h * &b * obs.h.transpose() + DMatrix::from_diagonal(&obs.r_diag);
        let rhs = &b * obs.h.transpose();
        assert!((&k * s - &rhs).amax() / rhs.amax() < 1e-10);
    }

    #[test]
    fn gain_vanishes_for_huge_observation_error() {
        let ens = Ensemble::new(random_matrix(5, 6, 6), 0).unwrap();
        let obs = ObservationBatch::identity(DVector::zeros(5), 1e12).unwrap();
        let k = kalman_gain(&ens.covariance(), &obs).unwrap();
        assert!(k.amax() < 1e-10);
    }

    #[test]
    fn zero_gain_leaves_ensemble() {
        let (ens, obs) = toy();
        let zero = DMatrix::zeros(3, 2);
        let mut rng = stream(1, &[]);
        assert_eq!(analysis_stochastic(&ens, &obs, &zero, &mut rng).unwrap(), ens);
        assert_eq!(analysis_deterministic(&ens, &obs, &zero).unwrap(), ens);
    }

    #[test]
    fn unit_gain_with_tiny_noise_snaps_to_observation() {
        let ens = Ensemble::new(DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 5.0]), 0).unwrap();
        let obs = ObservationBatch::identity(DVector::from_vec(vec![0.7]), 1e-300).unwrap();
        let gain = DMatrix::from_element(1, 1, 1.0);
        let out = analysis_stochastic(&ens, &obs, &gain, &mut stream(2, &[])).unwrap();
        assert!(out.members().iter().all(|v| (*v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn stochastic_matches_member_loop_oracle() {
        let (ens, obs) = toy();
        let gain = random_matrix(3, 2, 7);
        let got = analysis_stochastic(&ens, &obs, &gain, &mut stream(42, &[1])).unwrap();
        let mut rng = stream(42, &[1]);
        for e in 0..2 {
            let x = ens.member(e);
            let mut innov = [0.0; 2];
            for i in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                let hx: f64 = (0..3).map(|j| obs.h[(i, j)] * x[j]).sum();
                innov[i] = obs.y[i] + obs.r_diag[i].sqrt() * z - hx;
            }
            for j in 0..3 {
                let want = x[j] + gain[(j, 0)] * innov[0] + gain[(j, 1)] * innov[1];
                assert!((got.members()[(j, e)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_matches_formula_oracle() {
        let ens = Ensemble::new(random_matrix(2, 3, 8), 0).unwrap();
        let obs = ObservationBatch::identity(DVector::from_vec(vec![0.4, -1.1]), 0.3).unwrap();
        let gain = random_matrix(2, 2, 9);
        let got = analysis_deterministic(&ens, &obs, &gain).unwrap();
        let x = ens.members();
        let mean: Vec<f64> = (0..2).map(|i| (x[(i, 0)] + x[(i, 1)] + x[(i, 2)]) / 3.0).collect();
        let innov: Vec<f64> = (0..2).map(|i| obs.y[i] - mean[i]).collect();
        for i in 0..2 {
            let ma = mean[i] + gain[(i, 0)] * innov[0] + gain[(i, 1)] * innov[1];
            for e in 0..3 {
                let d0 = x[(0, e)] - mean[0];
                let d1 = x[(1, e)] - mean[1];
                let di = x[(i, e)] - mean[i];
                let da = di - 0.5 * (gain[(i, 0)] * d0 + gain[(i, 1)] * d1);
                assert!((got.members()[(i, e)] - (ma + da)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let mut m = random_matrix(3, 4, 10);
        // members differ only in the unobserved third component
        for e in 0..4 {
            m[(0, e)] = 1.0;
            m[(1, e)] = -2.0;
        }
        let ens = Ensemble::new(m, 0).unwrap();
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let obs = ObservationBatch::new(DVector::from_vec(vec![1.0, -2.0]), h, DVector::from_element(2, 1.0)).unwrap();
        let gain = random_matrix(3, 2, 11);
        let out = analysis_deterministic(&ens, &obs, &gain).unwrap();
        assert!((out.mean() - ens.mean()).amax() < 1e-12);
    }

    #[test]
    fn stochastic_without_noise_has_deterministic_mean() {
        let ens = Ensemble::new(random_matrix(4, 6, 12), 0).unwrap();
        let obs = ObservationBatch::identity(DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]), 1e-300).unwrap();
        let gain = random_matrix(4, 4, 13);
        let s = analysis_stochastic(&ens, &obs, &gain, &mut stream(0, &[])).unwrap();
        let d = analysis_deterministic(&ens, &obs, &gain).unwrap();
        assert!((s.mean() - d.mean()).amax() < 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let (ens, obs) = toy();
        assert!(analysis_deterministic(&ens, &obs, &DMatrix::zeros(3, 3)).is_err());
        assert!(kalman_gain(&DMatrix::zeros(2, 2), &obs).is_err());
        let spec = LocalizationSpec::new(Taper::GaspariCohn, Radii::Scalar(1.0));
        let wrong = ObservationBatch::identity(DVector::zeros(4), 1.0).unwrap();
        assert!(localized_gain(&ens, &wrong, &spec).is_err());
    }
}
