use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::km::{km_estimate, rmst};
use crate::data::quantile;
use crate::error::{Error, Result};

/// Observed times with event flags for one risk group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurvivalGroup {
    pub times: Vec<f64>,
    pub event: Vec<bool>,
}

impl SurvivalGroup {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn rmst(&self, horizon: f64) -> Result<f64> {
        Ok(rmst(&km_estimate(&self.times, &self.event)?, horizon))
    }

    fn resample<R: Rng>(&self, rng: &mut R) -> Self {
        let n = self.len();
        let mut out = Self { times: Vec::with_capacity(n), event: Vec::with_capacity(n) };
        for _ in 0..n {
            let i = rng.random_range(0..n);
            out.times.push(self.times[i]);
            out.event.push(self.event[i]);
        }
        out
    }
}

/// Splits patients at `cutoff`: risk strictly above goes to the high group.
pub fn stratify(risks: &[f64], times: &[f64], event: &[bool], cutoff: f64) -> (SurvivalGroup, SurvivalGroup) {
    let (mut high, mut low) = (SurvivalGroup::default(), SurvivalGroup::default());
    for i in 0..risks.len() {
        let g = if risks[i] > cutoff { &mut high } else { &mut low };
        g.times.push(times[i]);
        g.event.push(event[i]);
    }
    (high, low)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub rmst_high: f64,
    pub rmst_low: f64,
    /// High minus low.
    pub delta: f64,
    pub delta_ci: [f64; 2],
    pub delta_p: f64,
    /// High over low.
    pub ratio: f64,
    pub ratio_ci: [f64; 2],
    pub replicates: usize,
    pub skipped: usize,
}

/// Share of degenerate resamples above which the bootstrap is refused.
pub const MAX_SKIPPED_FRACTION: f64 = 0.2;

/// Percentile bootstrap of the RMST difference and ratio between two groups.
/// Replicate `r` draws from its own ChaCha stream, so results do not depend
/// on thread scheduling.
pub fn bootstrap_stats(
    high: &SurvivalGroup,
    low: &SurvivalGroup,
    horizon: f64,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapReport> {
    if replicates == 0 {
        return Err(Error::InvalidArgument("bootstrap needs at least one replicate".into()));
    }
    if high.is_empty() || low.is_empty() {
        return Err(Error::Stats("bootstrap needs two nonempty groups".into()));
    }
    let rmst_high = high.rmst(horizon)?;
    let rmst_low = low.rmst(horizon)?;

    let draws: Vec<Option<(f64, f64)>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let (h, l) = (high.resample(&mut rng), low.resample(&mut rng));
            if !h.event.contains(&true) || !l.event.contains(&true) {
                return None;
            }
            let (a, b) = (h.rmst(horizon).ok()?, l.rmst(horizon).ok()?);
            Some((a - b, (a / b).ln()))
        })
        .collect();
    let skipped = draws.iter().filter(|d| d.is_none()).count();
    if skipped as f64 > MAX_SKIPPED_FRACTION * replicates as f64 {
        return Err(Error::Stats(format!("{skipped} of {replicates} bootstrap resamples had no events")));
    }
    let (mut deltas, mut log_ratios): (Vec<f64>, Vec<f64>) = draws.into_iter().flatten().unzip();
    deltas.sort_by(f64::total_cmp);
    log_ratios.sort_by(f64::total_cmp);
    let valid = deltas.len() as f64;
    let below = deltas.iter().filter(|&&d| d <= 0.0).count() as f64 / valid;
    let above = deltas.iter().filter(|&&d| d >= 0.0).count() as f64 / valid;
    let delta_p = (2.0 * below.min(above)).clamp(2.0 / replicates as f64, 1.0);
    Ok(BootstrapReport {
        rmst_high,
        rmst_low,
        delta: rmst_high - rmst_low,
        delta_ci: [quantile(&deltas, 0.025), quantile(&deltas, 0.975)],
        delta_p,
        ratio: rmst_high / rmst_low,
        ratio_ci: [quantile(&log_ratios, 0.025).exp(), quantile(&log_ratios, 0.975).exp()],
        replicates,
        skipped,
    })
}
