//! Cohort files, time discretization, fold splitting and synthetic cohorts.

mod bag;
mod cohort;
mod synth;

pub use bag::{BagError, FeatureBag, Modality, BAG_MAGIC, BAG_VERSION};
pub use cohort::{
    assign_bin, discretize_times, fold_split, kfold_split, quantile, quantile_edges, Cohort, FoldSplit, Manifest,
    PatientEntry, SurvivalRecord,
};
pub use synth::{synth_cohort, SynthCohort, SynthConfig, SynthPatient};
