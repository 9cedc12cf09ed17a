//! Training objectives: the NT-Xent contrastive loss over adjacent-row
//! positive pairs, cross-entropy over relative-position probabilities, and
//! their alpha-weighted combination.
//!
//! Positive pairs are rows (0,1), (2,3), ... of the projection matrix.
//! Similarity is cosine; each row's denominator excludes its self-similarity.

use crate::error::{Error, Result};
use crate::model::RP_CLASSES;
use crate::tensor::{self, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Floor applied to probabilities before `log`.
const PROB_EPS: f64 = 1e-12;

/// Tolerance for treating a probability row as normalized.
const ROW_SUM_TOL: f64 = 1e-4;

/// Where the temperature enters the pairwise term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// `exp(sim / tau)`: the standard formulation; tau shapes the loss.
    #[default]
    InsideExp,
    /// `exp(sim) / tau`: tau cancels between numerator and denominator,
    /// leaving the loss independent of it. Kept for ablation.
    OutsideExp,
}

/// One training step's loss terms. `total` is exactly
/// `cl_loss + alpha * rpl_loss` in working precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cl_loss: f64,
    pub rpl_loss: f64,
    pub total: f64,
    pub alpha: f64,
}

/// Graph-building NT-Xent over `[2N, m]` projections.
pub fn nt_xent_t(projections: &Tensor, temperature: f64, mode: TemperatureMode) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    let shape = projections.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!("expected [2N, m] projections, got {shape:?}")));
    }
    let rows = shape[0];
    if rows < 4 || rows % 2 != 0 {
        return Err(Error::invalid(format!(
            "projection row count {rows} must be even and at least 4"
        )));
    }
    {
        let v = projections.value();
        for i in 0..rows {
            let norm: f64 = (0..shape[1]).map(|j| v[[i, j]] * v[[i, j]]).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::invalid(format!(
                    "projection row {i} has zero norm, cosine similarity undefined"
                )));
            }
            if !norm.is_finite() {
                return Err(Error::invalid(format!("projection row {i} is not finite")));
            }
        }
    }

    let norms = tensor::sqrt(&tensor::sum_axis_keep(&tensor::square(projections), 1));
    let unit = tensor::div(projections, &norms);
    let sim = tensor::matmul(&unit, false, &unit, true);
    let terms = match mode {
        TemperatureMode::InsideExp => tensor::exp(&tensor::scale(&sim, 1.0 / temperature)),
        TemperatureMode::OutsideExp => tensor::scale(&tensor::exp(&sim), 1.0 / temperature),
    };

    let mut eye = Array2::<f64>::zeros((rows, rows));
    let mut pair = Array2::<f64>::zeros((rows, rows));
    for i in 0..rows {
        eye[[i, i]] = 1.0;
        pair[[i, i ^ 1]] = 1.0;
    }
    let eye = Tensor::constant(eye.into_dyn());
    let pair = Tensor::constant(pair.into_dyn());

    let row_sum = tensor::sum_axis_keep(&terms, 1);
    let self_term = tensor::sum_axis_keep(&tensor::mul(&terms, &eye), 1);
    let denom = tensor::sub(&row_sum, &self_term);
    let num = tensor::sum_axis_keep(&tensor::mul(&terms, &pair), 1);
    let log_ratio = tensor::ln(&tensor::div(&num, &denom));
    Ok(tensor::scale(&tensor::mean_all(&log_ratio), -1.0))
}

/// NT-Xent with the standard temperature placement.
pub fn nt_xent(projections: &Array2<f64>, temperature: f64) -> Result<f64> {
    nt_xent_with_mode(projections, temperature, TemperatureMode::InsideExp)
}

pub fn nt_xent_with_mode(
    projections: &Array2<f64>,
    temperature: f64,
    mode: TemperatureMode,
) -> Result<f64> {
    let t = Tensor::constant(projections.clone().into_dyn());
    Ok(nt_xent_t(&t, temperature, mode)?.item())
}

/// Graph-building cross-entropy over `[N, 8]` direction probabilities.
pub fn rp_loss_t(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[1] != RP_CLASSES {
        return Err(Error::shape(format!(
            "expected [N, {RP_CLASSES}] probabilities, got {shape:?}"
        )));
    }
    let n = shape[0];
    if n == 0 {
        return Err(Error::invalid("empty probability batch"));
    }
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} probability rows",
            labels.len()
        )));
    }
    for (i, &d) in labels.iter().enumerate() {
        if d >= RP_CLASSES {
            return Err(Error::invalid(format!(
                "label {d} at index {i} outside 0..{RP_CLASSES}"
            )));
        }
    }
    {
        let v = probs.value();
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..RP_CLASSES {
                let p = v[[i, j]];
                if !p.is_finite() || p < 0.0 {
                    return Err(Error::invalid(format!(
                        "probability [{i}, {j}] = {p} is not a valid probability"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!(
                    "probability row {i} sums to {sum}, not normalized"
                )));
            }
        }
    }

    let mut onehot = Array2::<f64>::zeros((n, RP_CLASSES));
    for (i, &d) in labels.iter().enumerate() {
        onehot[[i, d]] = 1.0;
    }
    let mask = Tensor::constant(onehot.into_dyn());
    let picked = tensor::sum_axis_keep(&tensor::mul(probs, &mask), 1);
    let logp = tensor::ln(&tensor::clamp_min(&picked, PROB_EPS));
    Ok(tensor::scale(&tensor::mean_all(&logp), -1.0))
}

pub fn rp_loss(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let t = Tensor::constant(probs.clone().into_dyn());
    Ok(rp_loss_t(&t, labels)?.item())
}

/// Combine per-task losses into the trained objective.
pub fn combined_loss(cl_loss: f64, rpl_loss: f64, alpha: f64) -> Result<LossBreakdown> {
    if alpha < 0.0 {
        return Err(Error::invalid(format!("alpha {alpha} must be non-negative")));
    }
    let total = cl_loss + alpha * rpl_loss;
    if !total.is_finite() {
        return Err(Error::run(format!(
            "non-finite loss: cl={cl_loss} rpl={rpl_loss} alpha={alpha}"
        )));
    }
    Ok(LossBreakdown { cl_loss, rpl_loss, total, alpha })
}
