use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use super::dataset::{Dataset, PatientData};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{subsample_rows, Phase, SlotSpe};
use crate::scalar::Scalar;
use crate::survival::LossReport;

const SHUFFLE_SALT: u64 = 0x5EED_5EED_0000_0001;
const PATIENT_SALT: u64 = 0x5EED_5EED_0000_0002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over every patient seen this epoch.
    pub loss: LossReport,
    pub steps: usize,
    pub skipped_steps: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub model: SlotSpe<F>,
    pub optimizer: Adam<F>,
    pub log: Vec<EpochLog>,
}

/// Randomness for one patient in one epoch, independent of thread schedule.
pub fn patient_rng(seed: u64, epoch: usize, patient: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PATIENT_SALT);
    rng.set_stream(((epoch as u64) << 32) | patient as u64);
    rng
}

/// Loss breakdown and one gradient slot per stored parameter (`None` where
/// the parameter did not take part).
pub type PatientGradient<F> = (LossReport, Vec<Option<Tensor<F>>>);

/// Loss report and per-parameter gradient (indexed like the store) for one
/// patient.
pub fn patient_gradient<F: Scalar>(
    model: &SlotSpe<F>,
    patient: &PatientData<F>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PatientGradient<F>> {
    let genomic = patient
        .genomic
        .as_ref()
        .ok_or_else(|| Error::Data(format!("patient {}: training needs a genomic bag", patient.id)))?;
    let histology = subsample_rows(&patient.histology, config.subsample, rng);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let h = g.constant(histology);
    let x = g.constant(genomic.clone());
    let (loss, report) = model.patient_loss(&mut g, &p, h, x, patient.label, config.lambda, &mut Phase::Train(rng))?;
    let grads = g.backward(loss)?;
    Ok((report, p.vars().iter().map(|&v| grads.get(v).cloned()).collect()))
}

/// Trains from a fresh initialization on the `train` indices of `data`.
pub fn train<F: Scalar>(config: &TrainConfig, data: &Dataset<F>, train: &[usize]) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if config.model.n_bins != data.n_bins {
        return Err(Error::InvalidArgument(format!(
            "config has {} time bins but the cohort was discretized into {}",
            config.model.n_bins, data.n_bins
        )));
    }
    let events = train.iter().filter(|&&i| !data.patients[i].censored).count();
    if events < 2 {
        return Err(Error::Data(format!("training split has {events} uncensored patients; need at least 2")));
    }
    let mut model = SlotSpe::<F>::new(config.model.clone(), data.d, data.m_g, config.seed)?;
    let mut optimizer = Adam::new(&model.store, config.learning_rate);
    let mut log = Vec::with_capacity(config.epochs);
    let mut order = train.to_vec();
    let mut bad_batches = 0usize;

    for epoch in 0..config.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
        shuffle.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut reports = Vec::with_capacity(order.len());
        let mut steps = 0;
        let skipped_before = optimizer.skipped;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<PatientGradient<F>>> = batch
                .par_iter()
                .map(|&i| patient_gradient(&model, &data.patients[i], config, &mut patient_rng(config.seed, epoch, i)))
                .collect();
            let mut batch_reports = Vec::with_capacity(batch.len());
            let mut sum: Vec<Option<Tensor<F>>> = vec![None; model.store.len()];
            let mut finite = true;
            for r in results {
                match r {
                    Ok((report, grads)) => {
                        finite &= report.total.is_finite();
                        batch_reports.push(report);
                        for (acc, g) in sum.iter_mut().zip(grads) {
                            match (acc.as_mut(), g) {
                                (Some(a), Some(g)) => a.add_assign(&g),
                                (None, Some(g)) => *acc = Some(g),
                                _ => {}
                            }
                        }
                    }
                    Err(e) if e.is_numerical() => finite = false,
                    Err(e) => return Err(e),
                }
            }
            if !finite {
                bad_batches += 1;
                optimizer.skipped += 1;
                if bad_batches >= 2 {
                    return Err(Error::Divergence(format!(
                        "non-finite loss in two consecutive batches (epoch {}, batch {})",
                        epoch + 1,
                        b + 1
                    )));
                }
                continue;
            }
            bad_batches = 0;
            let inv = F::one() / F::from_usize(batch.len()).unwrap();
            for g in sum.iter_mut().flatten() {
                *g = g.map(|v| v * inv);
            }
            if optimizer.apply(&mut model.store, &sum) {
                steps += 1;
            }
            reports.extend(batch_reports);
        }
        model.epochs_trained = epoch + 1;
        log.push(EpochLog {
            epoch: epoch + 1,
            loss: LossReport::mean(&reports).unwrap_or_default(),
            steps,
            skipped_steps: optimizer.skipped - skipped_before,
        });
    }
    Ok(TrainOutcome { model, optimizer, log })
}
