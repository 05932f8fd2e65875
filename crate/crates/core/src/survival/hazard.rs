use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Result, Tensor, Var};
use crate::scalar::Scalar;

pub const HAZARD_FLOOR: f64 = 1e-7;

/// Discrete hazards, the survival curve they imply, and the scalar risk
/// `−Σ_t S_t` used for ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardCurve {
    pub hazards: Vec<f64>,
    pub survival: Vec<f64>,
    pub risk: f64,
}

impl HazardCurve {
    pub fn from_logits<F: Scalar>(logits: &[F]) -> Self {
        let hazards: Vec<f64> = logits
            .iter()
            .map(|l| (1.0 / (1.0 + (-l.as_f64()).exp())).clamp(HAZARD_FLOOR, 1.0 - HAZARD_FLOOR))
            .collect();
        let mut survival = Vec::with_capacity(hazards.len());
        let mut s = 1.0;
        for h in &hazards {
            s *= 1.0 - h;
            survival.push(s);
        }
        let risk = -survival.iter().sum::<f64>();
        Self { hazards, survival, risk }
    }

    pub fn bins(&self) -> usize {
        self.hazards.len()
    }
}

/// Negative log-likelihood for one patient; `bin` is 1-based. A censored
/// patient contributes `−log S_bin`, an event `−log S_{bin−1} − log h_bin`.
pub fn nll_loss(curve: &HazardCurve, bin: usize, censored: bool) -> f64 {
    assert!(bin >= 1 && bin <= curve.bins(), "bin {bin} outside 1..={}", curve.bins());
    let survived = if censored { bin } else { bin - 1 };
    let mut loss: f64 = -curve.hazards[..survived].iter().map(|h| (1.0 - h).ln()).sum::<f64>();
    if !censored {
        loss -= curve.hazards[bin - 1].ln();
    }
    loss
}

/// Graph version of [`nll_loss`] over a `1×N_t` row of logits.
pub fn nll_graph<F: Scalar>(g: &mut Graph<F>, logits: Var, bin: usize, censored: bool) -> Result<Var> {
    let n = g.shape(logits)[1];
    assert!(bin >= 1 && bin <= n, "bin {bin} outside 1..={n}");
    let h = g.sigmoid(logits)?;
    let h = g.clamp(h, F::lit(HAZARD_FLOOR), F::lit(1.0 - HAZARD_FLOOR))?;
    let survived = if censored { bin } else { bin - 1 };
    let keep = g.scale(h, -F::one())?;
    let keep = g.add_scalar(keep, F::one())?;
    let log_keep = g.log(keep)?;
    let mut mask_keep = Tensor::zeros(1, n);
    for k in 0..survived {
        mask_keep.set(0, k, -F::one());
    }
    let mask_keep = g.constant(mask_keep);
    let terms = g.mul(log_keep, mask_keep)?;
    let mut total = g.sum(terms)?;
    if !censored {
        let log_h = g.log(h)?;
        let mut pick = Tensor::zeros(1, n);
        pick.set(0, bin - 1, -F::one());
        let pick = g.constant(pick);
        let event = g.mul(log_h, pick)?;
        let event = g.sum(event)?;
        total = g.add(total, event)?;
    }
    Ok(total)
}
