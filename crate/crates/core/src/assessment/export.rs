use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::persona::TraitId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitRow {
    #[serde(rename = "trait")]
    pub trait_id: TraitId,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerExport {
    /// Router index (one per adapted layer, or a single shared router).
    pub layer: usize,
    pub rows: Vec<TraitRow>,
    pub gram_off_diag_mean: f64,
    pub gram_off_diag_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterExport {
    pub layers: Vec<LayerExport>,
    /// Every layer's trait rows stacked layer by layer.
    pub stacked: Vec<Vec<f64>>,
}

/// Expert weights of every trait at every router of a routed model.
pub fn export_router_weights(model: &Model) -> Result<RouterExport> {
    let matrices = model.weighting_matrices()?;
    if matrices.is_empty() {
        return Err(Error::Assessment(format!(
            "unsupported checkpoint: a {} model has no routers",
            model.baseline()
        )));
    }
    let mut layers = Vec::new();
    let mut stacked = Vec::new();
    for (layer, m) in matrices.iter().enumerate() {
        let rows: Vec<TraitRow> = (0..m.trait_count())
            .map(|i| TraitRow { trait_id: TraitId::from_index(i).expect("at most ten traits"), weights: m.column(i) })
            .collect();
        stacked.extend(rows.iter().map(|r| r.weights.clone()));
        let (mean, max) = m.gram_off_diagonal_stats();
        layers.push(LayerExport { layer, rows, gram_off_diag_mean: mean, gram_off_diag_max: max });
    }
    Ok(RouterExport { layers, stacked })
}

impl RouterExport {
    /// `layer,trait,expert,weight` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,trait,expert,weight\n");
        for l in &self.layers {
            for r in &l.rows {
                for (j, w) in r.weights.iter().enumerate() {
                    let _ = writeln!(s, "{},{},{},{}", l.layer, r.trait_id, j, w);
                }
            }
        }
        s
    }

    pub fn mean_gram_off_diag(&self) -> f64 {
        self.layers.iter().map(|l| l.gram_off_diag_mean).sum::<f64>() / self.layers.len() as f64
    }
}
