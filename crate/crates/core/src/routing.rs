//! Personality-conditioned routing: a learned vector per trait and a gate
//! per adapted layer whose softmax gives the expert weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{dim, Error, Result};
use crate::persona::TraitId;
use crate::tensor::{softmax, Tensor};

/// Tolerance used when checking that a weighting sums to one.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Expert weights for one trait at one layer: non-negative, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeighting(Vec<f64>);

impl ExpertWeighting {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeighting("empty weighting".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidWeighting(format!("negative or non-finite weight in {weights:?}")));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidWeighting(format!("weights sum to {s}")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, j: usize) -> Result<Self> {
        if j >= n {
            return Err(Error::InvalidWeighting(format!("expert {j} of {n}")));
        }
        let mut w = vec![0.0; n];
        w[j] = 1.0;
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest weight (lowest index on ties).
    pub fn top1(&self) -> usize {
        let mut best = 0;
        for (j, &w) in self.0.iter().enumerate() {
            if w > self.0[best] {
                best = j;
            }
        }
        best
    }
}

/// One learned vector per trait, `[|P|, d_P]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalityTable {
    vectors: Tensor,
}

impl PersonalityTable {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(dim("personality_table", format!("shape {:?}", vectors.shape())));
        }
        Ok(Self { vectors })
    }

    /// Standard-normal entries.
    pub fn random<R: Rng + ?Sized>(trait_count: usize, dim_p: usize, rng: &mut R) -> Self {
        Self { vectors: Tensor::randn(&[trait_count, dim_p], 1.0, rng) }
    }

    pub fn trait_count(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut Tensor {
        &mut self.vectors
    }

    pub fn index_of(&self, t: TraitId) -> Result<usize> {
        let i = t.index();
        if i >= self.trait_count() {
            return Err(Error::UnknownTrait(format!(
                "{t} is not among the {} traits of this table",
                self.trait_count()
            )));
        }
        Ok(i)
    }

    pub fn vector(&self, t: TraitId) -> Result<&[f64]> {
        Ok(self.vectors.row(self.index_of(t)?))
    }
}

/// Gate matrix `[d_P, N]` for one adapted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    gate: Tensor,
}

impl Router {
    pub fn new(gate: Tensor) -> Result<Self> {
        if gate.shape().len() != 2 {
            return Err(dim("router", format!("shape {:?}", gate.shape())));
        }
        Ok(Self { gate })
    }

    pub fn random<R: Rng + ?Sized>(dim_p: usize, num_experts: usize, std: f64, rng: &mut R) -> Self {
        Self { gate: Tensor::randn(&[dim_p, num_experts], std, rng) }
    }

    pub fn num_experts(&self) -> usize {
        self.gate.cols()
    }

    pub fn gate(&self) -> &Tensor {
        &self.gate
    }

    pub(crate) fn gate_mut(&mut self) -> &mut Tensor {
        &mut self.gate
    }
}

/// `softmax(p_t · G)` for the trait's vector.
pub fn route(t: TraitId, table: &PersonalityTable, router: &Router) -> Result<ExpertWeighting> {
    let p = table.vector(t)?;
    route_vector(p, router)
}

fn route_vector(p: &[f64], router: &Router) -> Result<ExpertWeighting> {
    let (dp, n) = router.gate.dims2();
    if p.len() != dp {
        return Err(dim("route", format!("personality dim {} vs gate rows {dp}", p.len())));
    }
    let mut logits = vec![0.0; n];
    for (k, &pk) in p.iter().enumerate() {
        for (l, g) in logits.iter_mut().zip(router.gate.row(k)) {
            *l += pk * g;
        }
    }
    let w = softmax(&logits);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidWeighting("non-finite routing logits".into()));
    }
    Ok(ExpertWeighting(w))
}

/// Expert weights of every trait at one layer, stored as `[N, |P|]`:
/// column `i` is trait `i`'s weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightingMatrix {
    m: Tensor,
}

impl WeightingMatrix {
    pub fn from_columns(columns: &[ExpertWeighting]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = columns.iter().map(|c| c.0.clone()).collect();
        let t = Tensor::from_rows(&rows)?;
        Ok(Self { m: t.transpose() })
    }

    pub fn num_experts(&self) -> usize {
        self.m.rows()
    }

    pub fn trait_count(&self) -> usize {
        self.m.cols()
    }

    pub fn get(&self, expert: usize, trait_index: usize) -> f64 {
        self.m.get2(expert, trait_index)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.m
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.num_experts()).map(|j| self.get(j, i)).collect()
    }

    /// `Mᵀ·M`, `[|P|, |P|]`.
    pub fn gram(&self) -> Tensor {
        self.m.transpose().matmul(&self.m).expect("square product")
    }

    /// Mean and max of the off-diagonal Gram entries (`0, 0` when `|P| = 1`).
    pub fn gram_off_diagonal_stats(&self) -> (f64, f64) {
        let g = self.gram();
        let p = self.trait_count();
        let mut sum = 0.0;
        let mut max: f64 = 0.0;
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    sum += g.get2(i, j);
                    max = max.max(g.get2(i, j));
                }
            }
        }
        let count = p * p - p;
        if count == 0 {
            (0.0, 0.0)
        } else {
            (sum / count as f64, max)
        }
    }
}

/// Expert weights of every trait in the table at one layer.
pub fn weighting_matrix(table: &PersonalityTable, router: &Router) -> Result<WeightingMatrix> {
    let cols = (0..table.trait_count())
        .map(|i| route_vector(table.vectors.row(i), router))
        .collect::<Result<Vec<_>>>()?;
    WeightingMatrix::from_columns(&cols)
}

/// Graph version of [`route`]: the trait's routing weights as a `[1, N]` node.
pub fn route_graph(g: &mut Graph<'_>, table: Var, gate: Var, trait_index: usize) -> Result<Var> {
    let p = g.row(table, trait_index)?;
    let logits = g.matmul(p, gate)?;
    Ok(g.softmax_rows(logits))
}

/// Every trait's routing weights as a `[|P|, N]` node (the transpose of
/// the weighting matrix).
pub fn weights_graph(g: &mut Graph<'_>, table: Var, gate: Var) -> Result<Var> {
    let logits = g.matmul(table, gate)?;
    Ok(g.softmax_rows(logits))
}
