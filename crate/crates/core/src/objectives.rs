//! Routing regularizers and the combined objective.
//!
//! The specialization loss penalizes overlap between traits' expert
//! weightings: with `M` the `[N, |P|]` weighting matrix it is the sum of the
//! absolute off-diagonal entries of `MᵀM`. The balance loss is the soft,
//! trait-level load-balancing term `N · Σ_j (mean_i M[j, i])²`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::routing::WeightingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerMode {
    #[default]
    Psl,
    Aux,
    None,
}

impl std::str::FromStr for RegularizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "psl" => Ok(Self::Psl),
            "aux" => Ok(Self::Aux),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown regularizer mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm_loss: f64,
    /// Mean specialization loss over adapted layers (always reported).
    pub psl: f64,
    pub aux: Option<f64>,
    pub total: f64,
    pub per_layer_psl: Vec<f64>,
}

pub fn specialization_loss(m: &WeightingMatrix) -> f64 {
    let g = m.gram();
    let p = m.trait_count();
    let mut s = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                s += g.get2(i, j).abs();
            }
        }
    }
    s
}

pub fn auxiliary_balance_loss(m: &WeightingMatrix) -> f64 {
    let n = m.num_experts();
    let p = m.trait_count() as f64;
    let sq: f64 = (0..n)
        .map(|j| {
            let f = (0..m.trait_count()).map(|i| m.get(j, i)).sum::<f64>() / p;
            f * f
        })
        .sum();
    n as f64 * sq
}

/// Specialization loss on the graph. `omega` holds one trait per row
/// (`[|P|, N]`), so `Ω·Ωᵀ` is the trait Gram matrix.
pub fn specialization_loss_graph(g: &mut Graph<'_>, omega: Var) -> Result<Var> {
    let gram = g.matmul_nt(omega, omega)?;
    let a = g.abs(gram);
    g.sum_off_diag(a)
}

/// Balance loss on the graph, `omega` as in [`specialization_loss_graph`].
pub fn auxiliary_balance_loss_graph(g: &mut Graph<'_>, omega: Var) -> Result<Var> {
    let n = g.shape(omega)[1] as f64;
    let f = g.mean_rows(omega);
    let sq = g.mul(f, f)?;
    let s = g.sum(sq);
    Ok(g.scale(s, n))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Combines the LM loss with the per-layer regularizer values:
/// `total = lm + λ · mean(per-layer values of the chosen mode)`.
pub fn total_loss(
    lm: f64,
    psl_per_layer: &[f64],
    aux_per_layer: Option<&[f64]>,
    lambda: f64,
    mode: RegularizerMode,
) -> Result<LossBreakdown> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("regularizer weight must be >= 0, got {lambda}")));
    }
    let psl = mean(psl_per_layer);
    let aux = aux_per_layer.map(mean);
    let reg = match mode {
        RegularizerMode::Psl => psl,
        RegularizerMode::Aux => aux
            .ok_or_else(|| Error::Config("aux mode needs per-layer balance losses".into()))?,
        RegularizerMode::None => 0.0,
    };
    let total = if mode == RegularizerMode::None || lambda == 0.0 {
        lm
    } else {
        lm + lambda * reg
    };
    Ok(LossBreakdown {
        lm_loss: lm,
        psl,
        aux,
        total,
        per_layer_psl: psl_per_layer.to_vec(),
    })
}
