#![allow(dead_code)]

use std::f64::consts::PI;

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Nodes of a double-exponential rule on (0, 1): `(ln x, ln(1 - x), dx/dt / (x (1 - x)))`.
/// `x = 1 / (1 + e^{-2u})` with `u = (pi/2) sinh t`, so endpoints are reached
/// in log space and never evaluated directly.
fn de_nodes(h: f64, t_max: f64) -> impl Iterator<Item = (f64, f64, f64)> {
    let n = (t_max / h).ceil() as i64;
    (-n..=n).map(move |k| {
        let t = k as f64 * h;
        let u = 0.5 * PI * t.sinh();
        let ln_x = -softplus(-2.0 * u);
        let ln_1mx = -softplus(2.0 * u);
        (ln_x, ln_1mx, PI * t.cosh())
    })
}

/// `KL(Beta(a, b) || U(0, 1)) = int p ln p`, with the normalizer also found
/// by quadrature so no special function is shared with the code under test.
pub fn kl_beta_uniform_quadrature(a: f64, b: f64) -> f64 {
    let h = 1.0 / 256.0;
    let mut z = 0.0;
    let mut first = 0.0;
    for (ln_x, ln_1mx, jac) in de_nodes(h, 7.0) {
        // density kernel times dx/dt, folded into one exponent
        let g = (a * ln_x + b * ln_1mx).exp() * jac;
        if g == 0.0 {
            continue;
        }
        z += h * g;
        first += h * g * ((a - 1.0) * ln_x + (b - 1.0) * ln_1mx);
    }
    first / z - z.ln()
}

/// `B(a, b)` by the same rule.
pub fn beta_function_quadrature(a: f64, b: f64) -> f64 {
    let h = 1.0 / 256.0;
    de_nodes(h, 7.0)
        .map(|(ln_x, ln_1mx, jac)| h * (a * ln_x + b * ln_1mx).exp() * jac)
        .sum()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
