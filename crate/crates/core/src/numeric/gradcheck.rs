//! Central finite-difference audit of tape gradients.

use crate::error::{Error, Result};
use crate::numeric::graph::{Graph, Var};
use crate::numeric::tensor::Tensor;

/// Outcome of [`audit`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradAudit {
    /// Worst relative error over all checked entries.
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    /// Number of scalar entries compared.
    pub checked: usize,
}

/// Compares the tape gradient of `build`'s scalar output with respect to
/// each input against the central difference `(f(x+h) − f(x−h)) / 2h`.
///
/// The error of an entry is scaled by the largest magnitude seen in that
/// input's analytic or numeric gradient (floored at `1e-8`), so entries
/// whose true gradient is tiny are judged on the scale of their tensor.
pub fn audit<F>(inputs: &[Tensor], h: f64, mut build: F) -> Result<GradAudit>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut work = inputs.to_vec();
    let mut result = GradAudit { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for j in 0..grad.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let scale = grad
            .iter()
            .chain(&numeric)
            .fold(1e-8f64, |m, v| m.max(v.abs()));
        for j in 0..grad.len() {
            let err = (grad[j] - numeric[j]).abs() / scale;
            if !err.is_finite() {
                return Err(Error::Contract(format!("non-finite gradient at input {i}, element {j}")));
            }
            if err > result.max_rel_error {
                result.max_rel_error = err;
                result.worst = (i, j);
            }
            result.checked += 1;
        }
    }
    Ok(result)
}
