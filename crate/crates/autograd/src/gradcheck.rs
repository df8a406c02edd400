//! Central finite differences against reverse-mode gradients.

use crate::ParamStore;

/// Denominator floor for [`relative_error`]; below it errors are effectively absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// `(f(θ + ε e_i) - f(θ - ε e_i)) / 2ε` for one scalar of one parameter.
pub fn central_difference(
    params: &ParamStore<f64>,
    name: &str,
    flat_index: usize,
    eps: f64,
    f: impl Fn(&ParamStore<f64>) -> f64,
) -> f64 {
    let base = params
        .scalar(name, flat_index)
        .unwrap_or_else(|| panic!("no scalar {name}[{flat_index}]"));
    let mut p = params.clone();
    p.set_scalar(name, flat_index, base + eps);
    let up = f(&p);
    p.set_scalar(name, flat_index, base - eps);
    let down = f(&p);
    (up - down) / (2.0 * eps)
}

/// One probed coordinate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl Probe {
    pub fn new(name: &str, index: usize, analytic: f64, numeric: f64) -> Self {
        Self {
            name: name.to_string(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        }
    }
}
