//! Central finite-difference gradients over any [`ParamTree`], for checking
//! analytic gradients.

use crate::error::Result;
use crate::network::{check_same_layout, ParamTree};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `(loss(theta + h e_i) - loss(theta - h e_i)) / 2h` for every scalar.
///
/// Returns a tree shaped like `params`. `params` is restored exactly.
pub fn numeric_gradient<T, P, F>(params: &mut P, step: f64, mut loss: F) -> Result<P>
where
    T: Scalar,
    P: ParamTree<T> + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let mut out = params.clone();
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let h = T::lit(step);
    for (ti, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let orig = params.tensors_mut()[ti].1.data()[i];
            params.tensors_mut()[ti].1.data_mut()[i] = orig + h;
            let up = loss(params)?;
            params.tensors_mut()[ti].1.data_mut()[i] = orig - h;
            let down = loss(params)?;
            params.tensors_mut()[ti].1.data_mut()[i] = orig;
            out.tensors_mut()[ti].1.data_mut()[i] = T::lit((up - down) / (2.0 * step));
        }
    }
    Ok(out)
}

/// Entry-wise `|a - n| <= rel_tol * max(|a|, |n|, abs_floor)`.
pub fn compare<T: Scalar, P: ParamTree<T>>(
    analytic: &P,
    numeric: &P,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<GradCheckReport> {
    check_same_layout(analytic, numeric)?;
    let mut report = GradCheckReport::default();
    for ((name, a), (_, n)) in analytic.tensors().into_iter().zip(numeric.tensors()) {
        for (i, (&a, &n)) in a.data().iter().zip(n.data()).enumerate() {
            let (a, n) = (a.to_f64().unwrap_or(f64::NAN), n.to_f64().unwrap_or(f64::NAN));
            let abs = (a - n).abs();
            let scale = a.abs().max(n.abs()).max(abs_floor);
            let rel = abs / scale;
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            if !(rel <= rel_tol) {
                report.failures.push(Mismatch {
                    tensor: name.clone(),
                    index: i,
                    analytic: a,
                    numeric: n,
                });
            }
        }
    }
    Ok(report)
}
