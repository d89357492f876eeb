//! Central finite-difference gradient checking.
//!
//! Only forward evaluation is used on the numeric side, so the check is
//! independent of every backward rule it validates.

use alloc::vec::Vec;

use super::{Graph, Tensor, Var};
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor for the relative error `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per input (evenly strided).
    pub max_coords: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-3, max_coords: usize::MAX }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input index, flat coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    /// Compares backward gradients of `f(leaves)` against central differences.
    ///
    /// `f` must return a one-element loss. Coordinates whose difference
    /// quotient straddles a kink (ReLU) are re-evaluated with a quarter step;
    /// the smaller of the two errors is kept.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.backward(loss)?;
        let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

        let eval = |xs: &[Tensor]| -> Result<f64> {
            let mut g = Graph::inference();
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let loss = f(&mut g, &vars)?;
            g.value(loss).item()
        };

        let mut report = GradReport { max_rel_error: 0.0, checked: 0, worst: None };
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (ti, t) in inputs.iter().enumerate() {
            let stride = (t.len() / self.max_coords.max(1)).max(1);
            for k in (0..t.len()).step_by(stride) {
                let orig = t.data()[k];
                let mut numeric_at = |h: f64| -> Result<f64> {
                    work[ti].data_mut()[k] = orig + h;
                    let up = eval(&work)?;
                    work[ti].data_mut()[k] = orig - h;
                    let down = eval(&work)?;
                    work[ti].data_mut()[k] = orig;
                    Ok((up - down) / (2.0 * h))
                };
                let a = analytic[ti].data()[k];
                let rel = |n: f64| libm::fabs(a - n) / libm::fmax(libm::fmax(libm::fabs(a), libm::fabs(n)), self.floor);
                let n1 = numeric_at(self.step)?;
                let (mut err, mut n) = (rel(n1), n1);
                if err > 1e-6 {
                    let n2 = numeric_at(self.step * 0.25)?;
                    if rel(n2) < err {
                        err = rel(n2);
                        n = n2;
                    }
                }
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = libm::fmax(err, report.max_rel_error);
                    report.worst = Some((ti, k, a, n));
                }
            }
        }
        Ok(report)
    }
}
