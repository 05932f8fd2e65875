//! Planted-signal synthetic cohorts.
//!
//! Each patient carries a set of latent binary events. Event `m` plants
//! genomic motif `m` (a fixed direction added to a fixed pathway subset) and,
//! with probability `coupling`, histology motif `m` (another fixed direction
//! added to a random subset of patches). Survival time is a deterministic
//! decreasing function of the weighted event sum, up to a small jitter.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bag::{FeatureBag, Modality};
use super::cohort::{Cohort, SurvivalRecord};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub m_h_min: usize,
    pub m_h_max: usize,
    pub m_g: usize,
    pub d: usize,
    /// Planted motifs per modality.
    pub n_motifs: usize,
    /// Motif norm relative to the per-instance noise norm.
    pub motif_strength: f64,
    /// Fraction of histology patches carrying a present motif.
    pub motif_fraction: f64,
    /// Pathways touched by each genomic motif, as a fraction of `m_g`.
    pub pathway_fraction: f64,
    /// Probability that a genomic event also shows in histology.
    pub coupling: f64,
    pub censor_fraction: f64,
    /// Standard deviation of the per-entry background noise.
    pub noise: f64,
    /// Upper bound on `n_motifs`, matching the slot count used downstream.
    pub slot_budget: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 200,
            m_h_min: 64,
            m_h_max: 128,
            m_g: 32,
            d: 32,
            n_motifs: 4,
            motif_strength: 1.0,
            motif_fraction: 0.3,
            pathway_fraction: 0.25,
            coupling: 0.9,
            censor_fraction: 0.3,
            noise: 1.0,
            slot_budget: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("synth config: {msg}")));
        if self.n_patients == 0 || self.m_g == 0 || self.d == 0 {
            return bad("n_patients, m_g and d must be positive");
        }
        if self.m_h_min == 0 || self.m_h_min > self.m_h_max {
            return bad("need 1 <= m_h_min <= m_h_max");
        }
        if self.n_motifs == 0 || self.n_motifs > self.slot_budget {
            return bad("need 1 <= n_motifs <= slot_budget");
        }
        if !(0.0..1.0).contains(&self.censor_fraction) {
            return bad("censor_fraction must lie in [0, 1)");
        }
        if !(self.motif_strength >= 0.0 && self.noise >= 0.0) {
            return bad("motif_strength and noise must be nonnegative");
        }
        for (name, v) in [("motif_fraction", self.motif_fraction), ("pathway_fraction", self.pathway_fraction)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(&format!("{name} must lie in (0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return bad("coupling must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthPatient {
    pub record: SurvivalRecord,
    pub histology: FeatureBag<f32>,
    pub genomic: FeatureBag<f32>,
    /// Latent events (genomic motif presence).
    pub events: Vec<bool>,
    pub histology_motifs: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct SynthCohort {
    pub config: SynthConfig,
    pub patients: Vec<SynthPatient>,
    pub event_weights: Vec<f64>,
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

pub fn synth_cohort(config: &SynthConfig) -> Result<SynthCohort> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    // Motif norm is strength times the expected noise norm √d·σ (σ floored at
    // 1 so zero-noise cohorts still carry signal).
    let scale = c.motif_strength * (c.d as f64).sqrt() * c.noise.max(1.0);
    let hist_dirs: Vec<Vec<f64>> = (0..c.n_motifs).map(|_| unit_direction(&mut rng, c.d)).collect();
    let gen_dirs: Vec<Vec<f64>> = (0..c.n_motifs).map(|_| unit_direction(&mut rng, c.d)).collect();
    let pathways_per_motif = ((c.pathway_fraction * c.m_g as f64).round() as usize).clamp(1, c.m_g);
    let motif_pathways: Vec<Vec<usize>> =
        (0..c.n_motifs).map(|_| sample(&mut rng, c.m_g, pathways_per_motif).into_vec()).collect();
    let pathway_base: Vec<f64> = (0..c.m_g * c.d).map(|_| gaussian(&mut rng, 1.0)).collect();
    let event_weights: Vec<f64> = (0..c.n_motifs).map(|_| rng.random_range(0.5..1.5)).collect();
    let weight_total: f64 = event_weights.iter().sum();

    let n_censored = (c.censor_fraction * c.n_patients as f64).round() as usize;
    let censored_set = sample(&mut rng, c.n_patients, n_censored).into_vec();

    let mut patients = Vec::with_capacity(c.n_patients);
    for i in 0..c.n_patients {
        let events: Vec<bool> = (0..c.n_motifs).map(|_| rng.random_bool(0.5)).collect();
        let histology_motifs: Vec<bool> =
            events.iter().map(|&e| if rng.random_bool(c.coupling) { e } else { !e }).collect();

        let m_h = rng.random_range(c.m_h_min..=c.m_h_max);
        let mut hist: Vec<f64> = (0..m_h * c.d).map(|_| gaussian(&mut rng, c.noise)).collect();
        for (m, present) in histology_motifs.iter().enumerate() {
            if !present {
                continue;
            }
            let count = ((c.motif_fraction * m_h as f64).round() as usize).clamp(1, m_h);
            for j in sample(&mut rng, m_h, count) {
                for (x, u) in hist[j * c.d..(j + 1) * c.d].iter_mut().zip(&hist_dirs[m]) {
                    *x += scale * u;
                }
            }
        }

        let mut gen: Vec<f64> =
            pathway_base.iter().map(|&b| b + gaussian(&mut rng, 0.5 * c.noise)).collect();
        for (m, present) in events.iter().enumerate() {
            if !present {
                continue;
            }
            for &p in &motif_pathways[m] {
                for (x, u) in gen[p * c.d..(p + 1) * c.d].iter_mut().zip(&gen_dirs[m]) {
                    *x += scale * u;
                }
            }
        }

        let score: f64 = events.iter().zip(&event_weights).filter(|(e, _)| **e).map(|(_, w)| w).sum::<f64>()
            / weight_total;
        let event_time = 120.0 * (-3.0 * score).exp() * rng.random_range(0.95..1.05);
        let censored = censored_set.contains(&i);
        let time_months = if censored { event_time * rng.random_range(0.1..1.0) } else { event_time };

        let to_bag = |m: Modality, rows: usize, v: Vec<f64>| {
            let data = v.into_iter().map(|x| x as f32).collect();
            FeatureBag::new(m, Tensor::from_vec(rows, c.d, data).unwrap()).expect("finite synthetic features")
        };
        patients.push(SynthPatient {
            record: SurvivalRecord { patient_id: format!("synth-{i:04}"), time_months, censored, time_bin: None },
            histology: to_bag(Modality::Histology, m_h, hist),
            genomic: to_bag(Modality::Genomic, c.m_g, gen),
            events,
            histology_motifs,
        });
    }
    Ok(SynthCohort { config: config.clone(), patients, event_weights })
}

impl SynthCohort {
    /// In-memory cohort whose bag paths point where [`SynthCohort::write`] puts them.
    pub fn cohort(&self, out_dir: &Path) -> Cohort {
        Cohort {
            records: self.patients.iter().map(|p| p.record.clone()).collect(),
            histology_paths: self
                .patients
                .iter()
                .map(|p| out_dir.join("bags").join(format!("{}.histology.bag", p.record.patient_id)))
                .collect(),
            genomic_paths: self
                .patients
                .iter()
                .map(|p| Some(out_dir.join("bags").join(format!("{}.genomic.bag", p.record.patient_id))))
                .collect(),
            bin_edges: None,
        }
    }

    /// Writes every bag plus `manifest.json` under `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<Cohort> {
        let bag_dir = out_dir.join("bags");
        fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
        let cohort = self.cohort(out_dir);
        for (i, p) in self.patients.iter().enumerate() {
            p.histology.save(&cohort.histology_paths[i])?;
            p.genomic.save(cohort.genomic_paths[i].as_ref().unwrap())?;
        }
        cohort.save(&out_dir.join("manifest.json"))?;
        Ok(cohort)
    }
}
