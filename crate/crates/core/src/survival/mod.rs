//! Discrete-time hazards, the survival loss and the evaluation statistics.

mod bootstrap;
mod concordance;
mod hazard;
mod km;
mod loss;

pub use bootstrap::{bootstrap_stats, stratify, BootstrapReport, SurvivalGroup, MAX_SKIPPED_FRACTION};
pub use concordance::concordance_index;
pub use hazard::{nll_graph, nll_loss, HazardCurve, HAZARD_FLOOR};
pub use km::{chi_square_sf, km_estimate, logrank_test, regularized_gamma_q, rmst, KmEstimate, LogRank};
pub use loss::{total_loss, LossReport, LossTerms};
