//! Greedy Matching Pursuit sparse coding.
//!
//! Each atom may be picked at most once per item, so a support is a set and
//! the coefficient of an atom is the residual inner product at the moment it
//! was picked.

use ndarray::{Array1, ArrayView1, Axis};
use rayon::prelude::*;

use crate::data::{Dictionary, EmbeddingSet, SparseCode, SparseCodes};
use crate::error::{Error, Result};

/// Norm tolerance checked before coding.
pub const UNIT_NORM_CHECK_TOL: f64 = 1e-4;
/// Pursuit stops once the residual norm falls to this level.
pub const RESIDUAL_STOP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PursuitResult {
    pub code: SparseCode,
    pub residual_norm: f64,
    /// Atoms in the order they were selected.
    pub selection_order: Vec<usize>,
}

/// Codes `z` against `dict` with at most `n_nnz` atoms.
pub fn matching_pursuit(z: ArrayView1<'_, f64>, dict: &Dictionary, n_nnz: usize) -> Result<PursuitResult> {
    if n_nnz == 0 {
        return Err(Error::InvalidConfig("n_nnz must be at least 1".into()));
    }
    if z.len() != dict.n_dims() {
        return Err(Error::DimMismatch {
            expected: dict.n_dims(),
            got: z.len(),
        });
    }
    dict.check_unit_norm(UNIT_NORM_CHECK_TOL)?;
    Ok(pursue(z, dict, n_nnz))
}

/// Unchecked pursuit; callers validate dimensions and norms once up front.
pub(crate) fn pursue(z: ArrayView1<'_, f64>, dict: &Dictionary, n_nnz: usize) -> PursuitResult {
    let atoms = dict.atoms();
    let mut residual: Array1<f64> = z.to_owned();
    let mut correlations = atoms.dot(&residual);
    let mut used = vec![false; dict.n_dicts()];
    let mut picks: Vec<(usize, f64)> = Vec::with_capacity(n_nnz);
    let mut norm_sq = residual.dot(&residual);

    while picks.len() < n_nnz && norm_sq.sqrt() > RESIDUAL_STOP {
        // Strict `>` keeps the lowest index on exact ties.
        let mut best: Option<(usize, f64)> = None;
        for (j, &c) in correlations.iter().enumerate() {
            if !used[j] && best.is_none_or(|(_, b)| c.abs() > b.abs()) {
                best = Some((j, c));
            }
        }
        let Some((j, coeff)) = best else { break };
        if coeff == 0.0 {
            break;
        }
        used[j] = true;
        picks.push((j, coeff));
        let atom = atoms.row(j);
        residual.scaled_add(-coeff, &atom);
        correlations = atoms.dot(&residual);
        norm_sq = residual.dot(&residual);
    }

    let selection_order = picks.iter().map(|p| p.0).collect();
    PursuitResult {
        code: SparseCode::from_pairs(picks),
        residual_norm: norm_sq.sqrt(),
        selection_order,
    }
}

/// Codes every row of `set`, in order, in parallel across items.
pub fn encode_all(set: &EmbeddingSet, dict: &Dictionary, n_nnz: usize) -> Result<SparseCodes> {
    let (codes, _) = encode_with_residuals(set, dict, n_nnz)?;
    Ok(codes)
}

/// [`encode_all`] that also returns each item's residual norm.
pub fn encode_with_residuals(set: &EmbeddingSet, dict: &Dictionary, n_nnz: usize) -> Result<(SparseCodes, Vec<f64>)> {
    if set.n_dims() != dict.n_dims() {
        return Err(Error::DimMismatch {
            expected: dict.n_dims(),
            got: set.n_dims(),
        });
    }
    encode_rows(set.to_f64().view(), dict, n_nnz)
}

pub(crate) fn encode_rows(
    rows: ndarray::ArrayView2<'_, f64>,
    dict: &Dictionary,
    n_nnz: usize,
) -> Result<(SparseCodes, Vec<f64>)> {
    if n_nnz == 0 {
        return Err(Error::InvalidConfig("n_nnz must be at least 1".into()));
    }
    if rows.ncols() != dict.n_dims() {
        return Err(Error::DimMismatch {
            expected: dict.n_dims(),
            got: rows.ncols(),
        });
    }
    dict.check_unit_norm(UNIT_NORM_CHECK_TOL)?;
    let results: Vec<PursuitResult> = rows
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|z| pursue(z, dict, n_nnz))
        .collect();
    let residuals = results.iter().map(|r| r.residual_norm).collect();
    let codes = results.into_iter().map(|r| r.code).collect();
    Ok((SparseCodes::new(codes, n_nnz)?, residuals))
}
