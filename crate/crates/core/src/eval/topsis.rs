use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Criterion {
    /// Lower is better.
    Cost,
    /// Higher is better.
    Benefit,
}

/// Closeness of every alternative (row) to the ideal point after vector
/// normalization of each criterion column and weighting.
pub fn topsis_scores(matrix: &[Vec<f64>], kinds: &[Criterion], weights: &[f64]) -> Result<Vec<f64>> {
    if matrix.is_empty() {
        return Err(Error::Contract("TOPSIS needs at least one alternative".into()));
    }
    let k = kinds.len();
    if weights.len() != k || matrix.iter().any(|r| r.len() != k) {
        return Err(Error::dim("topsis", &[matrix.len(), k], &[weights.len()]));
    }
    let mut norms = vec![0.0; k];
    for row in matrix {
        for (n, v) in norms.iter_mut().zip(row) {
            *n += v * v;
        }
    }
    for (j, n) in norms.iter_mut().enumerate() {
        *n = n.sqrt();
        if *n == 0.0 {
            return Err(Error::Contract(format!("criterion column {j} is entirely zero")));
        }
    }
    let v: Vec<Vec<f64>> = matrix
        .iter()
        .map(|row| (0..k).map(|j| weights[j] * row[j] / norms[j]).collect())
        .collect();
    let mut ideal = vec![0.0; k];
    let mut anti = vec![0.0; k];
    for j in 0..k {
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
        (ideal[j], anti[j]) = match kinds[j] {
            Criterion::Benefit => (hi, lo),
            Criterion::Cost => (lo, hi),
        };
    }
    Ok(v.iter()
        .map(|r| {
            let dp = r.iter().zip(&ideal).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let dm = r.iter().zip(&anti).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dp + dm == 0.0 {
                1.0
            } else {
                dm / (dp + dm)
            }
        })
        .collect())
}

/// Index of the highest-scoring row with equal weights; ties go to the
/// earliest row.
pub fn topsis_select(matrix: &[Vec<f64>], kinds: &[Criterion]) -> Result<usize> {
    let weights = vec![1.0 / kinds.len().max(1) as f64; kinds.len()];
    let scores = topsis_scores(matrix, kinds, &weights)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}
