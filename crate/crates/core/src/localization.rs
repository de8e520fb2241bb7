//! Distance-based covariance localization.
//!
//! A localization radius `r` is the characteristic length `l` handed to the
//! taper. For Gaspari-Cohn the support half-width is `c = sqrt(10/3) * l`, so
//! the taper vanishes beyond `2c`. Distances are measured in grid units on
//! the periodic ring.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Taper {
    GaspariCohn,
    Gaussian,
}

impl Taper {
    /// Taper value at distance `z` for characteristic length `length`.
    pub fn weight(self, z: f64, length: f64) -> Result<f64> {
        match self {
            Taper::GaspariCohn => gc_taper(z, gc_half_width(length)),
            Taper::Gaussian => gaussian_taper(z, length),
        }
    }
}

impl std::str::FromStr for Taper {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaspari_cohn" | "gc" => Ok(Taper::GaspariCohn),
            "gaussian" => Ok(Taper::Gaussian),
            other => Err(Error::Parse(format!("unknown taper `{other}`"))),
        }
    }
}

/// A scalar radius shared by every variable, or one radius per variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Radii {
    Scalar(f64),
    PerVariable(Vec<f64>),
}

impl Radii {
    pub fn validate(&self, n_state: usize) -> Result<()> {
        let ok = |r: f64| r > 0.0 && r.is_finite();
        match self {
            Radii::Scalar(r) if !ok(*r) => {
                Err(Error::Parameter(format!("radius must be > 0, got {r}")))
            }
            Radii::PerVariable(v) if v.len() != n_state => {
                Err(Error::dim("radius vector", n_state, v.len()))
            }
            Radii::PerVariable(v) => match v.iter().position(|r| !ok(*r)) {
                Some(i) => Err(Error::Parameter(format!(
                    "radius[{i}] must be > 0, got {}",
                    v[i]
                ))),
                None => Ok(()),
            },
            Radii::Scalar(_) => Ok(()),
        }
    }

    /// Pairwise length: the scalar itself, or the mean of the two variables' radii.
    pub fn pair_length(&self, i: usize, j: usize) -> f64 {
        match self {
            Radii::Scalar(r) => *r,
            Radii::PerVariable(v) => 0.5 * (v[i] + v[j]),
        }
    }

    pub fn as_vec(&self, n_state: usize) -> Vec<f64> {
        match self {
            Radii::Scalar(r) => vec![*r; n_state],
            Radii::PerVariable(v) => v.clone(),
        }
    }

    /// (mean, population std) over components; a scalar has zero spread.
    pub fn summary(&self) -> (f64, f64) {
        match self {
            Radii::Scalar(r) => (*r, 0.0),
            Radii::PerVariable(v) => {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSpec {
    pub taper: Taper,
    pub radii: Radii,
}

impl LocalizationSpec {
    pub fn new(taper: Taper, radii: Radii) -> Self {
        LocalizationSpec { taper, radii }
    }
}

/// Ring distance between grid indices `i` and `j` on `k` points.
pub fn grid_distance(i: usize, j: usize, k: usize) -> Result<f64> {
    for idx in [i, j] {
        if idx >= k {
            return Err(Error::Index { index: idx, len: k });
        }
    }
    let d = i.abs_diff(j);
    Ok(d.min(k - d) as f64)
}

pub fn gc_half_width(length: f64) -> f64 {
    (10.0f64 / 3.0).sqrt() * length
}

/// Gaspari-Cohn fifth-order piecewise rational taper with half-width `c`.
pub fn gc_taper(z: f64, c: f64) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Parameter(format!("GC half-width must be > 0, got {c}")));
    }
    if !(z >= 0.0) {
        return Err(Error::Parameter(format!("distance must be >= 0, got {z}")));
    }
    let r = z / c;
    let v = if r <= 1.0 {
        (((-0.25 * r + 0.5) * r + 0.625) * r - 5.0 / 3.0) * r * r + 1.0
    } else if r < 2.0 {
        ((((r / 12.0 - 0.5) * r + 0.625) * r + 5.0 / 3.0) * r - 5.0) * r + 4.0
            - 2.0 / (3.0 * r)
    } else {
        0.0
    };
    Ok(v.clamp(0.0, 1.0))
}

/// `exp(-z^2 / (2 L^2))`.
pub fn gaussian_taper(z: f64, length: f64) -> Result<f64> {
    if !(length > 0.0 && length.is_finite()) {
        return Err(Error::Parameter(format!(
            "Gaussian length must be > 0, got {length}"
        )));
    }
    if !(z >= 0.0) {
        return Err(Error::Parameter(format!("distance must be >= 0, got {z}")));
    }
    Ok((-z * z / (2.0 * length * length)).exp())
}

/// Taper matrix `rho[i][j] = taper(dist(i, j), l_ij)` on a `k`-point ring.
pub fn build_rho(spec: &LocalizationSpec, k: usize) -> Result<DMatrix<f64>> {
    spec.radii.validate(k)?;
    let mut rho = DMatrix::identity(k, k);
    for i in 0..k {
        for j in 0..i {
            let z = grid_distance(i, j, k)?;
            let v = spec.taper.weight(z, spec.radii.pair_length(i, j))?;
            rho[(i, j)] = v;
            rho[(j, i)] = v;
        }
    }
    Ok(rho)
}

/// Schur (entrywise) product `rho o b`.
pub fn localize_covariance(b: &DMatrix<f64>, rho: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !b.is_square() {
        return Err(Error::dim("covariance (square)", b.nrows(), b.ncols()));
    }
    if rho.shape() != b.shape() {
        return Err(Error::dim("taper matrix", b.nrows(), rho.nrows()));
    }
    Ok(b.component_mul(rho))
}
