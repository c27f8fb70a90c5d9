use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Contiguous block of logit rows owned by one client, with the weight its
/// mean loss carries in the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientSlice {
    pub rows: usize,
    pub weight: f64,
}

impl ClientSlice {
    /// Slices weighted by their share of rows, so the objective is the plain
    /// mean over all rows.
    pub fn by_rows(rows: &[usize]) -> Vec<ClientSlice> {
        let total: usize = rows.iter().sum();
        rows.iter().map(|&r| ClientSlice { rows: r, weight: r as f64 / total as f64 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Weighted objective `Σ_i w_i·ce_i`, in nats.
    pub mean_ce: f64,
    /// `exp(mean_ce)`.
    pub ppl: f64,
    pub per_client_ce: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Cross-entropy of `logits` against `labels`, evaluated per client slice.
///
/// Returns the report and `∂mean_ce/∂logits`, i.e. `softmax − onehot` scaled
/// by `w_i / rows_i` on the rows of slice `i`.
pub fn compute_loss(logits: &Matrix, labels: &[u32], slices: &[ClientSlice]) -> Result<(LossReport, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!("{} labels for {} logit rows", labels.len(), logits.rows())));
    }
    let covered: usize = slices.iter().map(|s| s.rows).sum();
    if covered != logits.rows() || slices.iter().any(|s| s.rows == 0) {
        return Err(Error::Shape(format!("client slices cover {covered} rows (each must be nonempty), logits have {}", logits.rows())));
    }
    let total_w: f64 = slices.iter().map(|s| s.weight).sum();
    if slices.iter().any(|s| !(s.weight >= 0.0)) || (total_w - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("slice weights must be >= 0 and sum to 1, got {total_w}")));
    }
    let vocab = logits.cols();
    if let Some(bad) = labels.iter().find(|&&y| y as usize >= vocab) {
        return Err(Error::Data(format!("label {bad} outside vocab {vocab}")));
    }

    let mut grad = Matrix::zeros(logits.rows(), vocab);
    let mut per_client_ce = Vec::with_capacity(slices.len());
    let mut start = 0;
    for slice in slices {
        let coeff = slice.weight / slice.rows as f64;
        let mut ce_sum = 0.0;
        for row in start..start + slice.rows {
            let l = logits.row(row);
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let y = labels[row] as usize;
            ce_sum += lse - l[y];
            for (j, g) in grad.row_mut(row).iter_mut().enumerate() {
                let p = (l[j] - lse).exp();
                *g = coeff * if j == y { p - 1.0 } else { p };
            }
        }
        per_client_ce.push(ce_sum / slice.rows as f64);
        start += slice.rows;
    }
    let mean_ce: f64 = per_client_ce.iter().zip(slices).map(|(ce, s)| s.weight * ce).sum();
    let report = LossReport { mean_ce, ppl: mean_ce.exp(), per_client_ce, weights: slices.iter().map(|s| s.weight).collect() };
    Ok((report, grad))
}
