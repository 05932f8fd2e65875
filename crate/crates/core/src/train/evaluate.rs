use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::data::quantile;
use crate::error::{Error, Result};
use crate::model::SlotSpe;
use crate::scalar::Scalar;
use crate::survival::{bootstrap_stats, concordance_index, logrank_test, stratify, BootstrapReport, HazardCurve, SurvivalGroup};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

impl From<SurvivalGroup> for GroupRecord {
    fn from(g: SurvivalGroup) -> Self {
        Self { times: g.times, events: g.event }
    }
}

impl From<&GroupRecord> for SurvivalGroup {
    fn from(g: &GroupRecord) -> Self {
        Self { times: g.times.clone(), event: g.events.clone() }
    }
}

/// Validation metrics for one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_validation: usize,
    pub missing_genomics: bool,
    pub c_index: f64,
    /// Median validation risk; patients above it form the high-risk group.
    pub risk_cutoff: f64,
    pub logrank_statistic: Option<f64>,
    pub logrank_p: Option<f64>,
    pub rmst: Option<BootstrapReport>,
    /// Why the group statistics are missing, when they are.
    pub stats_note: Option<String>,
    pub high: GroupRecord,
    pub low: GroupRecord,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub horizon_months: f64,
    pub bootstrap_replicates: usize,
    pub seed: u64,
}

/// Deterministic hazard curves for the given patients. With
/// `missing_genomics` the genomic bags are ignored and imputed.
pub fn predict<F: Scalar>(model: &SlotSpe<F>, data: &Dataset<F>, idx: &[usize], missing_genomics: bool) -> Result<Vec<HazardCurve>> {
    idx.par_iter()
        .map(|&i| {
            let p = &data.patients[i];
            let genomic = if missing_genomics { None } else { p.genomic.as_ref() };
            if !missing_genomics && genomic.is_none() {
                return Err(Error::Data(format!("patient {} has no genomic bag; evaluate with missing genomics", p.id)));
            }
            Ok(model.infer(&p.histology, genomic)?.curve)
        })
        .collect()
}

pub fn evaluate<F: Scalar>(
    model: &SlotSpe<F>,
    data: &Dataset<F>,
    fold: usize,
    validation: &[usize],
    missing_genomics: bool,
    opts: EvalOptions,
) -> Result<FoldMetrics> {
    if validation.is_empty() {
        return Err(Error::Data(format!("fold {fold} has no validation patients")));
    }
    let curves = predict(model, data, validation, missing_genomics)?;
    let risks: Vec<f64> = curves.iter().map(|c| c.risk).collect();
    let times: Vec<f64> = validation.iter().map(|&i| data.patients[i].time_months).collect();
    let censored: Vec<bool> = validation.iter().map(|&i| data.patients[i].censored).collect();
    let event: Vec<bool> = censored.iter().map(|c| !c).collect();
    let c_index = concordance_index(&risks, &times, &censored)?;

    let mut sorted = risks.clone();
    sorted.sort_by(f64::total_cmp);
    let risk_cutoff = quantile(&sorted, 0.5);
    let (high, low) = stratify(&risks, &times, &event, risk_cutoff);
    let mut m = FoldMetrics {
        fold,
        n_validation: validation.len(),
        missing_genomics,
        c_index,
        risk_cutoff,
        logrank_statistic: None,
        logrank_p: None,
        rmst: None,
        stats_note: None,
        high: GroupRecord::default(),
        low: GroupRecord::default(),
    };
    match logrank_test(&high.times, &high.event, &low.times, &low.event) {
        Ok(lr) => {
            m.logrank_statistic = Some(lr.statistic);
            m.logrank_p = Some(lr.p_value);
        }
        Err(e) => m.stats_note = Some(e.to_string()),
    }
    match bootstrap_stats(&high, &low, opts.horizon_months, opts.bootstrap_replicates, opts.seed) {
        Ok(b) => m.rmst = Some(b),
        Err(e) => m.stats_note = Some(e.to_string()),
    }
    m.high = high.into();
    m.low = low.into();
    Ok(m)
}
