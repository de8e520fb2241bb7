//! Fixed-length descriptors of a forecast ensemble, used as learning inputs.
//!
//! Layout, in order:
//! 1. forecast mean at the strided indices `0, stride, 2*stride, ...`
//! 2. global minimum and maximum over all members and components
//! 3. forecast variance at the strided indices
//! 4. correlations `corr(i, i+d)` for each strided `i` and `d = 1..=corr_lag` (periodic)
//! 5. KL divergence of the forecast rank histogram from uniform
//! 6. observation-space RMSE of the forecast mean

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::enkf::ObservationBatch;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::metrics::{histogram_kl, obs_rmse, rank_histogram};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSegment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub n_state: usize,
    pub stride: usize,
    pub corr_lag: usize,
    pub segments: Vec<FeatureSegment>,
}

impl FeatureLayout {
    pub fn new(n_state: usize, stride: usize, corr_lag: usize) -> Result<Self> {
        if stride == 0 || stride > n_state {
            return Err(Error::Parameter(format!(
                "feature stride must be in 1..={n_state}, got {stride}"
            )));
        }
        if corr_lag == 0 || 2 * corr_lag >= n_state {
            return Err(Error::Parameter(format!(
                "corr_lag must be >= 1 and < n_state/2, got {corr_lag}"
            )));
        }
        let n_sub = n_state.div_ceil(stride);
        let sizes = [
            ("mean", n_sub),
            ("min_max", 2),
            ("variance", n_sub),
            ("correlation", n_sub * corr_lag),
            ("forecast_kl", 1),
            ("forecast_rmse_obs", 1),
        ];
        let mut offset = 0;
        let segments = sizes
            .iter()
            .map(|(name, len)| {
                let seg = FeatureSegment {
                    name: name.to_string(),
                    offset,
                    len: *len,
                };
                offset += len;
                seg
            })
            .collect();
        Ok(FeatureLayout {
            n_state,
            stride,
            corr_lag,
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sampled_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_state).step_by(self.stride)
    }

    pub fn segment(&self, name: &str) -> Option<&FeatureSegment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// One human-readable name per feature, in layout order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len());
        names.extend(self.sampled_indices().map(|i| format!("mean[{i}]")));
        names.push("min".into());
        names.push("max".into());
        names.extend(self.sampled_indices().map(|i| format!("var[{i}]")));
        for i in self.sampled_indices() {
            for d in 1..=self.corr_lag {
                names.push(format!("corr[{i},+{d}]"));
            }
        }
        names.push("forecast_kl".into());
        names.push("forecast_rmse_obs".into());
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Extract the feature vector of a forecast ensemble. `tie_rng` only breaks
/// exact ties in the forecast rank histogram.
pub fn extract_features<R: Rng + ?Sized>(
    fc: &Ensemble,
    obs: &ObservationBatch,
    layout: &FeatureLayout,
    tie_rng: &mut R,
) -> Result<FeatureVector> {
    if fc.n_state() != layout.n_state {
        return Err(Error::dim("feature layout state size", layout.n_state, fc.n_state()));
    }
    let n = layout.n_state;
    let mean = fc.mean();
    let anomalies = fc.anomalies();
    let denom = fc.n_ens() as f64 - 1.0;
    let cov = |i: usize, j: usize| anomalies.row(i).dot(&anomalies.row(j)) / denom;
    // spread at the level of the mean's round-off counts as none
    let variance: Vec<f64> = (0..n)
        .map(|i| {
            let floor = (8.0 * f64::EPSILON * fc.members().row(i).amax()).powi(2);
            let v = cov(i, i);
            if v <= floor { 0.0 } else { v }
        })
        .collect();

    let mut values = Vec::with_capacity(layout.len());
    values.extend(layout.sampled_indices().map(|i| mean[i]));
    values.push(fc.members().min());
    values.push(fc.members().max());
    values.extend(layout.sampled_indices().map(|i| variance[i]));
    for i in layout.sampled_indices() {
        for d in 1..=layout.corr_lag {
            let j = (i + d) % n;
            let scale = (variance[i] * variance[j]).sqrt();
            // zero-spread components have no defined correlation
            values.push(if scale > 0.0 { cov(i, j) / scale } else { 0.0 });
        }
    }
    let hist = rank_histogram(fc, obs, tie_rng)?;
    values.push(histogram_kl(&hist).0);
    values.push(obs_rmse(&mean, obs)?);
    debug_assert_eq!(values.len(), layout.len());
    Ok(FeatureVector { values })
}
