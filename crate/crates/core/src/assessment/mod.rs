//! Inventory administration, Likert judging, aggregation into per-trait
//! reports, significance testing and router-weight export.

mod administer;
mod aggregate;
mod export;
mod inventory;
mod judge;
mod welch;

pub use administer::{administer, score, ModelSubject, ScoredItem, Subject, Transcript};
pub use aggregate::{aggregate, compare, AggregateReport, Cell, Comparison};
pub use export::{export_router_weights, LayerExport, RouterExport, TraitRow};
pub use inventory::{load_inventory, standard_inventory, InventoryItem};
pub use judge::{expected_sampling_tv, parse_likert, ChatJudge, LikertJudge, StyleJudge};
pub use welch::{ln_gamma, regularized_incomplete_beta, welch_t, welch_test, WelchResult};
