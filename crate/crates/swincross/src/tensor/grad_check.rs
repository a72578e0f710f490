//! Finite-difference verification of analytic gradients.
//!
//! The checker evaluates a scalar function twice per sampled parameter
//! coordinate (central differences) and compares against the gradient
//! populated by `backward`. It requires 64-bit tensors; 32-bit rounding
//! swamps the difference quotient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DType, NoGradGuard, Parameter, Storage, Tensor};
use crate::error::{Error, Result};

/// Cap on sampled coordinates per parameter tensor.
pub const MAX_COORDS_PER_PARAM: usize = 64;

#[derive(Debug, Clone)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Relative error convention used throughout:
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of `f` against central finite differences on
/// up to `coords_per_param` seeded-random coordinates of each parameter.
///
/// `f` must rebuild the forward pass from the parameters' current values and
/// return a scalar. Parameter buffers are restored bitwise afterwards.
pub fn grad_check(
    f: &dyn Fn() -> Result<Tensor>,
    params: &[Parameter],
    eps: f64,
    tol: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::invalid(
            "grad_check",
            format!("eps must lie in [1e-6, 1e-4], got {eps}"),
        ));
    }
    for p in params {
        if p.tensor.dtype() != DType::F64 {
            return Err(Error::invalid(
                "grad_check",
                format!("parameter {} is not f64; gradient checks need 64-bit precision", p.name),
            ));
        }
    }
    let coords_per_param = coords_per_param.clamp(1, MAX_COORDS_PER_PARAM);

    // One analytic pass.
    let loss = f()?;
    if loss.len() != 1 {
        return Err(Error::NonScalarLoss { elements: loss.len() });
    }
    let base = loss.scalar_f64()?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check loss".into(),
        });
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| match p.tensor.grad() {
            Some(Storage::F64(g)) => g,
            Some(_) => unreachable!("f64 enforced above"),
            None => vec![0.0; p.tensor.len()],
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        tol,
    };

    let _quiet = NoGradGuard::new();
    for (p, grads) in params.iter().zip(&analytic) {
        let n = p.tensor.len();
        let mut coords: Vec<usize> = (0..n).collect();
        coords.shuffle(&mut rng);
        coords.truncate(coords_per_param.min(n));
        coords.sort_unstable();

        for &idx in &coords {
            let original = p.tensor.with_data_mut(|s| s.get_f64(idx));
            p.tensor.with_data_mut(|s| s.set_f64(idx, original + eps));
            let plus = f()?.scalar_f64()?;
            p.tensor.with_data_mut(|s| s.set_f64(idx, original - eps));
            let minus = f()?.scalar_f64()?;
            p.tensor.with_data_mut(|s| s.set_f64(idx, original));
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("grad_check probe at {}[{}]", p.name, idx),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(grads[idx], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(CoordError {
                    param: p.name.clone(),
                    index: idx,
                    analytic: grads[idx],
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        let w = Parameter::new(
            "w",
            Tensor::leaf(&[4], Storage::F64(vec![0.3, -1.2, 2.0, 0.7])).unwrap(),
        );
        let wt = w.tensor.clone();
        let f = move || wt.mul(&wt)?.sum_all();
        let report = grad_check(&f, &[w], 1e-5, 1e-10, 64, 0).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
        assert!(report.max_rel_error < 1e-10);
        assert_eq!(report.coords_checked, 4);
    }

    #[test]
    fn rejects_f32_parameters() {
        let w = Parameter::new("w", Tensor::leaf(&[2], Storage::F32(vec![1.0, 2.0])).unwrap());
        let wt = w.tensor.clone();
        let f = move || wt.sum_all();
        assert!(grad_check(&f, &[w], 1e-5, 1e-6, 8, 0).is_err());
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let w = Parameter::new("w", Tensor::leaf(&[2], Storage::F64(vec![1.0, 2.0])).unwrap());
        let wt = w.tensor.clone();
        let f = move || wt.sum_all();
        assert!(grad_check(&f, &[w], 1e-2, 1e-6, 8, 0).is_err());
    }

    #[test]
    fn restores_parameters_bitwise() {
        let original = vec![0.11, -0.22, 0.33];
        let w = Parameter::new("w", Tensor::leaf(&[3], Storage::F64(original.clone())).unwrap());
        let wt = w.tensor.clone();
        let f = move || wt.mul(&wt)?.sum_all();
        grad_check(&f, &[w.clone()], 1e-5, 1e-6, 64, 1).unwrap();
        assert_eq!(w.tensor.to_f64_vec(), original);
    }
}
