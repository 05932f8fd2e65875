use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Result, Var};
use crate::scalar::Scalar;

/// Loss components for one patient or, after [`LossReport::mean`], a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub surv_fused: f64,
    pub surv_hist: f64,
    pub surv_gen: f64,
    pub recon_g: f64,
    pub recon_h: f64,
    pub recon_cross: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn survival(&self) -> f64 {
        self.surv_fused + self.surv_hist + self.surv_gen
    }

    pub fn reconstruction(&self) -> f64 {
        self.recon_g + self.recon_h + self.recon_cross
    }

    /// `|total − (survival + λ·reconstruction)|`.
    pub fn accounting_gap(&self) -> f64 {
        (self.total - (self.survival() + self.lambda * self.reconstruction())).abs()
    }

    /// Component-wise mean; `None` for an empty slice.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let n = reports.len() as f64;
        let first = reports.first()?;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(LossReport {
            total: avg(|r| r.total),
            surv_fused: avg(|r| r.surv_fused),
            surv_hist: avg(|r| r.surv_hist),
            surv_gen: avg(|r| r.surv_gen),
            recon_g: avg(|r| r.recon_g),
            recon_h: avg(|r| r.recon_h),
            recon_cross: avg(|r| r.recon_cross),
            lambda: first.lambda,
        })
    }
}

/// Graph handles of the individual objective terms; absent reconstructions
/// count as zero.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub surv_fused: Var,
    pub surv_hist: Var,
    pub surv_gen: Var,
    pub recon_g: Option<Var>,
    pub recon_h: Option<Var>,
    pub recon_cross: Option<Var>,
}

/// `(fused + hist + gen) + λ·(recon_g + recon_h + recon_cross)`.
pub fn total_loss<F: Scalar>(g: &mut Graph<F>, terms: &LossTerms, lambda: f64) -> Result<(Var, LossReport)> {
    let a = g.add(terms.surv_fused, terms.surv_hist)?;
    let mut total = g.add(a, terms.surv_gen)?;
    let recons: Vec<Var> = [terms.recon_g, terms.recon_h, terms.recon_cross].into_iter().flatten().collect();
    if lambda != 0.0 && !recons.is_empty() {
        let mut r = recons[0];
        for &x in &recons[1..] {
            r = g.add(r, x)?;
        }
        let r = g.scale(r, F::lit(lambda))?;
        total = g.add(total, r)?;
    }
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
    let report = LossReport {
        total: g.value(total).item().as_f64(),
        surv_fused: val(Some(terms.surv_fused)),
        surv_hist: val(Some(terms.surv_hist)),
        surv_gen: val(Some(terms.surv_gen)),
        recon_g: val(terms.recon_g),
        recon_h: val(terms.recon_h),
        recon_cross: val(terms.recon_cross),
        lambda,
    };
    Ok((total, report))
}
