//! Compile-time channel sort for one attention head.
//!
//! The rows of the key projection are ordered by Euclidean norm, and the
//! query projection, projection biases and rotary tables are reordered with
//! the same permutation. Every query-key logit is unchanged, while channels
//! of similar magnitude end up adjacent and therefore share BFP blocks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::RopeTables;
use crate::tensor::{norm, Matrix};

/// `perm[j]` is the old channel placed at new position `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

impl Permutation {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let n = indices.len();
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidPermutation(format!(
                    "{indices:?} is not a bijection on 0..{n}"
                )));
            }
        }
        Ok(Self(indices))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(j, &i)| i == j)
    }

    /// `inv[perm[j]] == j`.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (j, &i) in self.0.iter().enumerate() {
            inv[i] = j;
        }
        Self(inv)
    }

    /// Gathers `out[j] = values[perm[j]]`.
    pub fn apply<T: Clone>(&self, values: &[T]) -> Result<Vec<T>> {
        if values.len() != self.0.len() {
            return Err(Error::ShapeMismatch(format!(
                "permutation of {} applied to {} values",
                self.0.len(),
                values.len()
            )));
        }
        Ok(self.0.iter().map(|&i| values[i].clone()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum SortOrder {
    #[default]
    #[serde(rename = "asc")]
    Ascending,
    #[serde(rename = "desc")]
    Descending,
}

impl fmt::Display for SortOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SortOrder::Ascending => "asc",
            SortOrder::Descending => "desc",
        })
    }
}

impl FromStr for SortOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asc" | "ascending" => Ok(SortOrder::Ascending),
            "desc" | "descending" => Ok(SortOrder::Descending),
            other => Err(Error::InvalidConfig(format!(
                "unknown sort order {other:?}"
            ))),
        }
    }
}

/// How the partner table follows the permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RopeRemap {
    /// `partner'[j] = inv[partner[perm[j]]]`: positions and values both move.
    #[default]
    Corrected,
    /// `partner'[j] = partner[perm[j]]`: only positions move, so indices
    /// still point at old channels and rotation pairs break. Kept to
    /// demonstrate the failure; never use it to run a model.
    Literal,
}

/// Projection weights of one head; rows are output channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    wk: Matrix,
    wq: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bk: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bq: Option<Vec<f64>>,
}

impl HeadWeights {
    pub fn new(wk: Matrix, wq: Matrix) -> Result<Self> {
        if wk.rows() != wq.rows() || wk.cols() != wq.cols() {
            return Err(Error::ShapeMismatch(format!(
                "W_k is {}x{} but W_q is {}x{}",
                wk.rows(),
                wk.cols(),
                wq.rows(),
                wq.cols()
            )));
        }
        Ok(Self {
            wk,
            wq,
            bk: None,
            bq: None,
        })
    }

    pub fn with_biases(mut self, bk: Vec<f64>, bq: Vec<f64>) -> Result<Self> {
        if bk.len() != self.head_dim() || bq.len() != self.head_dim() {
            return Err(Error::ShapeMismatch(format!(
                "biases of length {}/{} for head dimension {}",
                bk.len(),
                bq.len(),
                self.head_dim()
            )));
        }
        self.bk = Some(bk);
        self.bq = Some(bq);
        Ok(self)
    }

    pub fn wk(&self) -> &Matrix {
        &self.wk
    }

    pub fn wq(&self) -> &Matrix {
        &self.wq
    }

    pub fn bk(&self) -> Option<&[f64]> {
        self.bk.as_deref()
    }

    pub fn bq(&self) -> Option<&[f64]> {
        self.bq.as_deref()
    }

    pub fn head_dim(&self) -> usize {
        self.wk.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.wk.cols()
    }

    /// `k = W_k·x + b_k`.
    pub fn key(&self, x: &[f64]) -> Result<Vec<f64>> {
        project(&self.wk, self.bk.as_deref(), x)
    }

    /// `q = W_q·x + b_q`.
    pub fn query(&self, x: &[f64]) -> Result<Vec<f64>> {
        project(&self.wq, self.bq.as_deref(), x)
    }

    /// Reorders rows of both projections and both biases.
    pub fn permuted(&self, perm: &Permutation) -> Result<Self> {
        Ok(Self {
            wk: permute_rows(&self.wk, perm)?,
            wq: permute_rows(&self.wq, perm)?,
            bk: self.bk.as_deref().map(|b| perm.apply(b)).transpose()?,
            bq: self.bq.as_deref().map(|b| perm.apply(b)).transpose()?,
        })
    }
}

fn project(w: &Matrix, bias: Option<&[f64]>, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = w.mul_vec(x)?;
    if let Some(b) = bias {
        for (o, b) in out.iter_mut().zip(b) {
            *o += b;
        }
    }
    Ok(out)
}

/// Euclidean norm of every row.
pub fn row_norms(w: &Matrix) -> Vec<f64> {
    w.iter_rows().map(norm).collect()
}

/// Stable argsort; equal norms keep their original relative order in both directions.
pub fn argsort_norms(norms: &[f64], order: SortOrder) -> Result<Permutation> {
    if let Some((index, &value)) = norms.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidValue { index, value });
    }
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    match order {
        SortOrder::Ascending => idx.sort_by(|&a, &b| norms[a].total_cmp(&norms[b])),
        SortOrder::Descending => idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a])),
    }
    Ok(Permutation(idx))
}

/// `out[j, :] = w[perm[j], :]`.
pub fn permute_rows(w: &Matrix, perm: &Permutation) -> Result<Matrix> {
    if perm.len() != w.rows() {
        return Err(Error::ShapeMismatch(format!(
            "permutation of {} applied to {} rows",
            perm.len(),
            w.rows()
        )));
    }
    let mut data = Vec::with_capacity(w.rows() * w.cols());
    for &i in perm.as_slice() {
        data.extend_from_slice(w.row(i));
    }
    Matrix::new(w.rows(), w.cols(), data)
}

/// Moves the rotary tables along with the channels.
///
/// Frequencies and signs are gathered; partner indices are gathered and then
/// renamed into the new channel numbering, `partner'[j] = inv[partner[perm[j]]]`.
pub fn remap_rope_tables(tables: &RopeTables, perm: &Permutation) -> Result<RopeTables> {
    remap_rope_tables_with(tables, perm, RopeRemap::Corrected)
}

pub fn remap_rope_tables_with(
    tables: &RopeTables,
    perm: &Permutation,
    remap: RopeRemap,
) -> Result<RopeTables> {
    tables.validate()?;
    let theta = perm.apply(tables.theta())?;
    let sign = perm.apply(tables.sign())?;
    let gathered = perm.apply(tables.partner())?;
    match remap {
        RopeRemap::Corrected => {
            let inv = perm.inverse();
            let partner = gathered.iter().map(|&p| inv.0[p]).collect();
            RopeTables::new(theta, partner, sign)
        }
        RopeRemap::Literal => RopeTables::new_unchecked(theta, gathered, sign),
    }
}

/// The result of sorting one head.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationPlan {
    perm: Permutation,
    order: SortOrder,
    norms: Vec<f64>,
    weights: HeadWeights,
    rope: Option<RopeTables>,
}

/// The auditable part of a plan: everything except the permuted weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub head_dim: usize,
    pub model_dim: usize,
    pub order: SortOrder,
    /// Key row norms in the original channel order.
    pub norms: Vec<f64>,
    pub perm: Permutation,
    pub rope: Option<RopeTables>,
}

impl PermutationPlan {
    pub fn perm(&self) -> &Permutation {
        &self.perm
    }

    pub fn order(&self) -> SortOrder {
        self.order
    }

    /// Key row norms before sorting.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Permuted projections.
    pub fn weights(&self) -> &HeadWeights {
        &self.weights
    }

    /// Remapped rotary tables, when the head uses them.
    pub fn rope(&self) -> Option<&RopeTables> {
        self.rope.as_ref()
    }

    pub fn record(&self) -> PlanRecord {
        PlanRecord {
            head_dim: self.weights.head_dim(),
            model_dim: self.weights.model_dim(),
            order: self.order,
            norms: self.norms.clone(),
            perm: self.perm.clone(),
            rope: self.rope.clone(),
        }
    }

    /// Re-applies a stored record to the original weights.
    pub fn from_record(weights: &HeadWeights, record: PlanRecord) -> Result<Self> {
        if record.head_dim != weights.head_dim()
            || record.model_dim != weights.model_dim()
            || record.perm.len() != weights.head_dim()
        {
            return Err(Error::PlanMismatch(format!(
                "record for a {}x{} head applied to {}x{} weights",
                record.head_dim,
                record.model_dim,
                weights.head_dim(),
                weights.model_dim()
            )));
        }
        if record
            .rope
            .as_ref()
            .is_some_and(|t| t.dim() != record.head_dim)
        {
            return Err(Error::PlanMismatch("rope tables dimension".into()));
        }
        Ok(Self {
            weights: weights.permuted(&record.perm)?,
            perm: record.perm,
            order: record.order,
            norms: record.norms,
            rope: record.rope,
        })
    }
}

/// Sorts one head: norms, argsort, permute both projections, remap rope tables.
pub fn plan_head(
    weights: &HeadWeights,
    rope: Option<&RopeTables>,
    order: SortOrder,
) -> Result<PermutationPlan> {
    plan_head_with(weights, rope, order, RopeRemap::Corrected)
}

pub fn plan_head_with(
    weights: &HeadWeights,
    rope: Option<&RopeTables>,
    order: SortOrder,
    remap: RopeRemap,
) -> Result<PermutationPlan> {
    if let Some(t) = rope {
        if t.dim() != weights.head_dim() {
            return Err(Error::ShapeMismatch(format!(
                "rope tables of dimension {} for head dimension {}",
                t.dim(),
                weights.head_dim()
            )));
        }
    }
    let norms = row_norms(weights.wk());
    let perm = argsort_norms(&norms, order)?;
    let permuted = weights.permuted(&perm)?;
    let rope = rope
        .map(|t| remap_rope_tables_with(t, &perm, remap))
        .transpose()?;
    Ok(PermutationPlan {
        perm,
        order,
        norms,
        weights: permuted,
        rope,
    })
}
