//! Decision criteria: state- and observation-space RMSE, rank histograms,
//! a method-of-moments Beta fit, the Beta-vs-uniform KL divergence and the
//! weighted cost that ranks candidate radii.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::enkf::ObservationBatch;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};

/// KL value charged when the analysis rank histogram cannot be fitted.
pub const DEGENERATE_KL_PENALTY: f64 = 10.0;

const BETA_FLOOR: f64 = 1e-3;

/// `||x - x_true||_2 / sqrt(n)`.
pub fn rmse(x: &DVector<f64>, x_true: &DVector<f64>) -> Result<f64> {
    if x.len() != x_true.len() {
        return Err(Error::dim("rmse operands", x_true.len(), x.len()));
    }
    if x.is_empty() {
        return Err(Error::Parameter("rmse of an empty vector".into()));
    }
    Ok((x - x_true).norm() / (x.len() as f64).sqrt())
}

/// `||H x - y||_2 / sqrt(n_obs)`.
pub fn obs_rmse(x: &DVector<f64>, obs: &ObservationBatch) -> Result<f64> {
    rmse(&obs.observe(x)?, &obs.y)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankHistogram {
    /// `counts[r]` is the number of observations with rank `r`, `r = 0..=n_ens`.
    pub counts: Vec<u64>,
    pub n_samples: u64,
}

impl RankHistogram {
    pub fn empty(n_ens: usize) -> Self {
        RankHistogram {
            counts: vec![0; n_ens + 1],
            n_samples: 0,
        }
    }

    pub fn n_ens(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn add(&mut self, rank: usize) {
        self.counts[rank] += 1;
        self.n_samples += 1;
    }

    pub fn merge(&mut self, other: &RankHistogram) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::dim("rank histogram bins", self.counts.len(), other.counts.len()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.n_samples += other.n_samples;
        Ok(())
    }
}

/// Rank of each `y[i]` among row `i` of `projected` (`n_obs x n_ens`).
///
/// A member value equal to the observation counts as below it with
/// probability one half, decided by `rng`.
pub fn rank_histogram_projected<R: Rng + ?Sized>(
    projected: &DMatrix<f64>,
    y: &DVector<f64>,
    rng: &mut R,
) -> Result<RankHistogram> {
    if projected.nrows() != y.len() {
        return Err(Error::dim("projected ensemble rows", y.len(), projected.nrows()));
    }
    let mut hist = RankHistogram::empty(projected.ncols());
    for (i, &obs) in y.iter().enumerate() {
        let mut rank = 0;
        for &v in projected.row(i).iter() {
            if v < obs || (v == obs && rng.random_bool(0.5)) {
                rank += 1;
            }
        }
        hist.add(rank);
    }
    Ok(hist)
}

/// Rank histogram of the observations against the ensemble mapped through `H`.
pub fn rank_histogram<R: Rng + ?Sized>(
    ens: &Ensemble,
    obs: &ObservationBatch,
    rng: &mut R,
) -> Result<RankHistogram> {
    if ens.n_state() != obs.n_state() {
        return Err(Error::dim("ensemble state vs operator", obs.n_state(), ens.n_state()));
    }
    rank_histogram_projected(&(&obs.h * ens.members()), &obs.y, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Parameter(format!(
                "Beta parameters must be > 0, got ({alpha}, {beta})"
            )));
        }
        Ok(BetaParams { alpha, beta })
    }
}

/// Method-of-moments Beta fit to ranks mapped onto bin midpoints
/// `u = (rank + 0.5) / (n_ens + 1)`, using the `n - 1` sample variance.
pub fn fit_beta(hist: &RankHistogram) -> Result<BetaParams> {
    if hist.n_samples < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: hist.n_samples as usize,
        });
    }
    let bins = hist.counts.len() as f64;
    let u = |r: usize| (r as f64 + 0.5) / bins;
    let n = hist.n_samples as f64;
    let mean = hist
        .counts
        .iter()
        .enumerate()
        .map(|(r, &c)| c as f64 * u(r))
        .sum::<f64>()
        / n;
    let var = hist
        .counts
        .iter()
        .enumerate()
        .map(|(r, &c)| c as f64 * (u(r) - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::DegenerateHistogram);
    }
    let t = mean * (1.0 - mean) / var - 1.0;
    Ok(BetaParams {
        alpha: (mean * t).max(BETA_FLOOR),
        beta: ((1.0 - mean) * t).max(BETA_FLOOR),
    })
}

/// Closed-form `KL(Beta(a, b) || Beta(1, 1))`.
pub fn kl_beta_uniform(p: BetaParams) -> Result<f64> {
    let BetaParams { alpha: a, beta: b } = BetaParams::new(p.alpha, p.beta)?;
    let ln_b = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    let kl = -ln_b + (a - 1.0) * digamma(a) + (b - 1.0) * digamma(b)
        - (a + b - 2.0) * digamma(a + b);
    // Gibbs: never negative; guard the round-off at (1, 1)
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionWeights {
    pub w1: f64,
    pub w2: f64,
}

impl CriterionWeights {
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        let w = CriterionWeights { w1, w2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w1.is_finite()) {
            return Err(Error::Parameter(format!("w1 must be >= 0, got {}", self.w1)));
        }
        if !(self.w2 >= 0.0 && self.w2.is_finite()) {
            return Err(Error::Parameter(format!("w2 must be >= 0, got {}", self.w2)));
        }
        if !(self.w1 + self.w2 > 0.0) {
            return Err(Error::Parameter("w1 + w2 must be > 0".into()));
        }
        Ok(())
    }

    pub fn combine(&self, rmse_obs: f64, kl: f64) -> f64 {
        self.w1 * rmse_obs + self.w2 * kl
    }
}

/// The two terms of the decision criterion and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionValue {
    pub rmse_obs: f64,
    pub kl: f64,
    /// The rank histogram was degenerate and `kl` holds the penalty.
    pub degenerate: bool,
    pub value: f64,
}

/// KL of the fitted Beta, or the penalty when the histogram cannot be fitted.
pub fn histogram_kl(hist: &RankHistogram) -> (f64, bool) {
    match fit_beta(hist).and_then(kl_beta_uniform) {
        Ok(kl) => (kl, false),
        Err(_) => (DEGENERATE_KL_PENALTY, true),
    }
}

/// `w1 * RMSE(mean(analysis) | y) + w2 * KL(Beta fit of rank histogram || U)`.
pub fn criterion<R: Rng + ?Sized>(
    analysis: &Ensemble,
    obs: &ObservationBatch,
    w: &CriterionWeights,
    rng: &mut R,
) -> Result<CriterionValue> {
    let rmse_obs = obs_rmse(&analysis.mean(), obs)?;
    let hist = rank_histogram(analysis, obs, rng)?;
    let (kl, degenerate) = histogram_kl(&hist);
    Ok(CriterionValue {
        rmse_obs,
        kl,
        degenerate,
        value: w.combine(rmse_obs, kl),
    })
}
