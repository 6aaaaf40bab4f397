use serde::{Deserialize, Serialize};

use super::PruneError;
use crate::search_space::PruningScheme;
use crate::sparse::{BlockAxis, BlockDims};

/// How a group's penalty weight enters the regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyForm {
    /// `α_g · ‖W_g‖²`
    #[default]
    Linear,
    /// `‖α_g · W_g‖² = α_g² · ‖W_g‖²`
    Squared,
}

/// Structural groups of a `rows × cols` GEMM view, as flat element indices.
///
/// Channel: one group per row. Block: one group per column (or row) slice
/// of every block. Pattern: one group per kernel (connectivity).
pub fn group_partition(
    rows: usize,
    cols: usize,
    kernel_area: usize,
    scheme: PruningScheme,
    block: BlockDims,
) -> Result<Vec<Vec<usize>>, PruneError> {
    Ok(match scheme {
        PruningScheme::Channel => (0..rows).map(|r| (r * cols..(r + 1) * cols).collect()).collect(),
        PruningScheme::Block => {
            let mut out = Vec::new();
            for (rr, cr) in block.blocks(rows, cols) {
                match block.axis {
                    BlockAxis::Column => {
                        for c in cr.clone() {
                            out.push(rr.clone().map(|r| r * cols + c).collect());
                        }
                    }
                    BlockAxis::Row => {
                        for r in rr.clone() {
                            out.push(cr.clone().map(|c| r * cols + c).collect());
                        }
                    }
                }
            }
            out
        }
        PruningScheme::Pattern => {
            if kernel_area == 0 || cols % kernel_area != 0 {
                return Err(PruneError::Dimension(format!(
                    "{cols} columns are not a multiple of kernel area {kernel_area}"
                )));
            }
            (0..rows * cols / kernel_area)
                .map(|k| (k * kernel_area..(k + 1) * kernel_area).collect())
                .collect()
        }
    })
}

fn group_sq_norm(weights: &[f64], group: &[usize]) -> f64 {
    group.iter().map(|&i| weights[i] * weights[i]).sum()
}

fn check(alpha: &[f64], groups: &[Vec<usize>]) -> Result<(), PruneError> {
    if alpha.len() != groups.len() {
        return Err(PruneError::Dimension(format!(
            "{} penalty values for {} groups",
            alpha.len(),
            groups.len()
        )));
    }
    Ok(())
}

/// `Σ_g α_g ‖W_g‖²` (or `Σ_g α_g² ‖W_g‖²` for [`PenaltyForm::Squared`]).
pub fn regularizer(weights: &[f64], alpha: &[f64], groups: &[Vec<usize>], form: PenaltyForm) -> Result<f64, PruneError> {
    check(alpha, groups)?;
    Ok(groups
        .iter()
        .zip(alpha)
        .map(|(g, &a)| {
            let a = match form {
                PenaltyForm::Linear => a,
                PenaltyForm::Squared => a * a,
            };
            a * group_sq_norm(weights, g)
        })
        .sum())
}

/// Per-element coefficients `c_i` with `Σ c_i w_i² = λ · regularizer`.
pub fn penalty_coefficients(
    len: usize,
    alpha: &[f64],
    groups: &[Vec<usize>],
    lambda: f64,
    form: PenaltyForm,
) -> Result<Vec<f64>, PruneError> {
    check(alpha, groups)?;
    let mut c = vec![0.0; len];
    for (g, &a) in groups.iter().zip(alpha) {
        let a = match form {
            PenaltyForm::Linear => a,
            PenaltyForm::Squared => a * a,
        };
        for &i in g {
            c[i] += lambda * a;
        }
    }
    Ok(c)
}

/// `α_g = 1 / (‖W_g‖² + ε)`.
pub fn update_alpha(weights: &[f64], groups: &[Vec<usize>], eps: f64) -> Result<Vec<f64>, PruneError> {
    if eps <= 0.0 {
        return Err(PruneError::Config(format!("epsilon must be positive, got {eps}")));
    }
    Ok(groups.iter().map(|g| 1.0 / (group_sq_norm(weights, g) + eps)).collect())
}

/// `Σ_g α_g (‖W_g‖² + ε) − ln α_g`, the majorizer that [`update_alpha`]
/// minimizes exactly for fixed weights.
pub fn surrogate_objective(weights: &[f64], alpha: &[f64], groups: &[Vec<usize>], eps: f64) -> Result<f64, PruneError> {
    check(alpha, groups)?;
    Ok(groups
        .iter()
        .zip(alpha)
        .map(|(g, &a)| a * (group_sq_norm(weights, g) + eps) - a.ln())
        .sum())
}

/// Group partitions and penalty values for every pruned layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PenaltyState {
    pub groups: Vec<Vec<Vec<usize>>>,
    pub alpha: Vec<Vec<f64>>,
}
