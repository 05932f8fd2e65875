use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::{discretize_times, Cohort, SynthCohort};
use crate::error::{Error, Result};
use crate::model::Label;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct PatientData<F> {
    pub id: String,
    pub histology: Tensor<F>,
    pub genomic: Option<Tensor<F>>,
    pub label: Label,
    pub time_months: f64,
    pub censored: bool,
}

/// Bags and labels held in memory.
#[derive(Clone, Debug)]
pub struct Dataset<F> {
    pub patients: Vec<PatientData<F>>,
    pub d: usize,
    pub m_g: usize,
    pub n_bins: usize,
}

impl<F: Scalar> Dataset<F> {
    /// Loads every bag named by a discretized cohort. With `load_genomic`
    /// false no genomic file is opened.
    pub fn from_cohort(cohort: &Cohort, load_genomic: bool) -> Result<Self> {
        let mut patients = Vec::with_capacity(cohort.len());
        for (i, r) in cohort.records.iter().enumerate() {
            let bin = r
                .time_bin
                .ok_or_else(|| Error::Data(format!("patient {} has no time bin; run discretize first", r.patient_id)))?;
            let histology = cohort.load_histology::<F>(i)?.features;
            let genomic = if load_genomic { cohort.load_genomic::<F>(i)?.map(|b| b.features) } else { None };
            patients.push(PatientData {
                id: r.patient_id.clone(),
                histology,
                genomic,
                label: Label { bin, censored: r.censored },
                time_months: r.time_months,
                censored: r.censored,
            });
        }
        let n_bins = cohort.bin_edges.as_ref().map_or(1, |e| e.len() + 1);
        Self::assemble(patients, n_bins)
    }

    /// Discretizes a synthetic cohort in memory.
    pub fn from_synth(synth: &SynthCohort, n_bins: usize) -> Result<Self> {
        let mut cohort = synth.cohort(Path::new(""));
        discretize_times(&mut cohort, n_bins)?;
        let patients = synth
            .patients
            .iter()
            .zip(&cohort.records)
            .map(|(p, r)| PatientData {
                id: r.patient_id.clone(),
                histology: p.histology.features.cast(),
                genomic: Some(p.genomic.features.cast()),
                label: Label { bin: r.time_bin.unwrap(), censored: r.censored },
                time_months: r.time_months,
                censored: r.censored,
            })
            .collect();
        Self::assemble(patients, n_bins)
    }

    fn assemble(patients: Vec<PatientData<F>>, n_bins: usize) -> Result<Self> {
        let first = patients.first().ok_or_else(|| Error::Data("cohort is empty".into()))?;
        let d = first.histology.cols();
        let m_g = patients.iter().find_map(|p| p.genomic.as_ref().map(|g| g.rows())).unwrap_or(0);
        for p in &patients {
            if p.histology.cols() != d {
                return Err(Error::Data(format!("patient {}: histology width {} != {d}", p.id, p.histology.cols())));
            }
            if let Some(g) = &p.genomic {
                if g.shape() != [m_g, d] {
                    return Err(Error::Data(format!("patient {}: genomic bag {}×{} != {m_g}×{d}", p.id, g.rows(), g.cols())));
                }
            }
            if p.label.bin == 0 || p.label.bin > n_bins {
                return Err(Error::Data(format!("patient {}: bin {} outside 1..={n_bins}", p.id, p.label.bin)));
            }
        }
        Ok(Self { patients, d, m_g, n_bins })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }
}
