use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persona::{Level, TraitId};

use super::{welch_t, ScoredItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(rename = "trait")]
    pub trait_id: TraitId,
    /// Mean over runs of each run's mean item score.
    pub mean: f64,
    /// Sample standard deviation of the run means (absent with one run).
    pub std: Option<f64>,
    pub run_means: Vec<f64>,
    pub scored: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    /// One cell per trait, in trait order.
    pub cells: Vec<Cell>,
    pub avg_high: f64,
    pub avg_low: f64,
    pub overall: f64,
}

fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt())
}

impl AggregateReport {
    /// Builds the report from finished cells; all ten traits are required.
    pub fn from_cells(mut cells: Vec<Cell>) -> Result<Self> {
        cells.sort_by_key(|c| c.trait_id.index());
        for t in TraitId::all() {
            if !cells.iter().any(|c| c.trait_id == t) {
                return Err(Error::Assessment(format!("missing condition {t}")));
            }
        }
        let avg = |level| {
            let v: Vec<f64> = cells.iter().filter(|c| c.trait_id.level == level).map(|c| c.mean).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let avg_high = avg(Level::High);
        let avg_low = avg(Level::Low);
        Ok(Self { cells, avg_high, avg_low, overall: avg_high - avg_low })
    }

    /// Report from plain per-trait means (no repeat data).
    pub fn from_means(means: &[(TraitId, f64)]) -> Result<Self> {
        Self::from_cells(
            means
                .iter()
                .map(|&(t, m)| Cell { trait_id: t, mean: m, std: None, run_means: vec![m], scored: 0, missing: 0 })
                .collect(),
        )
    }

    pub fn cell(&self, t: TraitId) -> &Cell {
        self.cells.iter().find(|c| c.trait_id == t).expect("all traits present")
    }

    /// Aligned table: O+..N+, Avg+, O-..N-, Avg-, Overall; means then std.
    pub fn to_table(&self) -> String {
        let mut header = Vec::new();
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for (level, avg) in [(Level::High, self.avg_high), (Level::Low, self.avg_low)] {
            for t in TraitId::all().into_iter().filter(|t| t.level == level) {
                let c = self.cell(t);
                header.push(t.code());
                means.push(format!("{:.2}", c.mean));
                stds.push(c.std.map_or("-".into(), |s| format!("{s:.2}")));
            }
            header.push(if level == Level::High { "Avg+".into() } else { "Avg-".into() });
            means.push(format!("{avg:.2}"));
            stds.push("-".into());
        }
        header.push("Overall".into());
        means.push(format!("{:.2}", self.overall));
        stds.push("-".into());
        let mut s = String::new();
        for (label, row) in [("", &header), ("mean", &means), ("std", &stds)] {
            let _ = write!(s, "{label:<5}");
            for v in row {
                let _ = write!(s, " {v:>7}");
            }
            s.push('\n');
        }
        s
    }
}

/// Per-trait means over the items of the condition's own dimension.
pub fn aggregate(scored: &[ScoredItem]) -> Result<AggregateReport> {
    let mut cells = Vec::new();
    for t in TraitId::all() {
        let mine: Vec<&ScoredItem> =
            scored.iter().filter(|s| s.trait_id == t && s.dimension == t.dimension).collect();
        let mut runs: Vec<usize> = mine.iter().map(|s| s.run).collect();
        runs.sort_unstable();
        runs.dedup();
        let run_means: Vec<f64> = runs
            .iter()
            .filter_map(|&r| {
                let v: Vec<f64> =
                    mine.iter().filter(|s| s.run == r).filter_map(|s| s.score).map(f64::from).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        if run_means.is_empty() {
            return Err(Error::Assessment(format!("no scored responses for condition {t}")));
        }
        let scored_n = mine.iter().filter(|s| s.score.is_some()).count();
        cells.push(Cell {
            trait_id: t,
            mean: run_means.iter().sum::<f64>() / run_means.len() as f64,
            std: sample_std(&run_means),
            run_means,
            scored: scored_n,
            missing: mine.len() - scored_n,
        });
    }
    AggregateReport::from_cells(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Welch p-value per trait over the run means (absent when undefined).
    pub p_values: Vec<(TraitId, Option<f64>)>,
}

pub fn compare(report: &AggregateReport, baseline: &AggregateReport) -> Comparison {
    Comparison {
        p_values: TraitId::all()
            .into_iter()
            .map(|t| (t, welch_t(&report.cell(t).run_means, &baseline.cell(t).run_means).ok()))
            .collect(),
    }
}
