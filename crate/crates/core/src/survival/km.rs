use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Product-limit survival estimate as a right-continuous step function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmEstimate {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    /// `Ŝ` just after each event time.
    pub survival: Vec<f64>,
}

impl KmEstimate {
    pub fn survival_at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&x| x <= t);
        if i == 0 {
            1.0
        } else {
            self.survival[i - 1]
        }
    }
}

/// `event[i]` is true when subject `i` was observed to fail at `times[i]`.
pub fn km_estimate(times: &[f64], event: &[bool]) -> Result<KmEstimate> {
    if times.is_empty() || times.len() != event.len() {
        return Err(Error::Stats("Kaplan-Meier needs a nonempty sample with one flag per time".into()));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Stats("non-finite survival time".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut km = KmEstimate { times: Vec::new(), at_risk: Vec::new(), events: Vec::new(), survival: Vec::new() };
    let mut remaining = times.len();
    let mut s = 1.0;
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0;
        while j < order.len() && times[order[j]] == t {
            d += usize::from(event[order[j]]);
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / remaining as f64;
            km.times.push(t);
            km.at_risk.push(remaining);
            km.events.push(d);
            km.survival.push(s);
        }
        remaining -= j - i;
        i = j;
    }
    Ok(km)
}

/// Exact area under the step function on `[0, horizon]`.
pub fn rmst(km: &KmEstimate, horizon: f64) -> f64 {
    assert!(horizon > 0.0, "RMST horizon must be positive");
    let mut area = 0.0;
    let mut last_t = 0.0;
    let mut level = 1.0;
    for (&t, &s) in km.times.iter().zip(&km.survival) {
        if t >= horizon {
            break;
        }
        area += level * (t - last_t);
        last_t = t;
        level = s;
    }
    area + level * (horizon - last_t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-degree-of-freedom log-rank test between two groups.
pub fn logrank_test(a_times: &[f64], a_event: &[bool], b_times: &[f64], b_event: &[bool]) -> Result<LogRank> {
    if a_times.is_empty() || b_times.is_empty() {
        return Err(Error::Stats("log-rank needs two nonempty groups".into()));
    }
    if a_times.len() != a_event.len() || b_times.len() != b_event.len() {
        return Err(Error::Stats("log-rank flags differ in length from times".into()));
    }
    let mut pooled: Vec<(f64, bool, bool)> = a_times
        .iter()
        .zip(a_event)
        .map(|(&t, &e)| (t, e, true))
        .chain(b_times.iter().zip(b_event).map(|(&t, &e)| (t, e, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mut n_a, mut n) = (a_times.len() as f64, pooled.len() as f64);
    let (mut observed_minus_expected, mut variance) = (0.0, 0.0);
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        let (mut d, mut d_a, mut leaving_a, mut leaving) = (0.0, 0.0, 0.0, 0.0);
        while i < pooled.len() && pooled[i].0 == t {
            let (_, e, in_a) = pooled[i];
            if e {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            if in_a {
                leaving_a += 1.0;
            }
            leaving += 1.0;
            i += 1;
        }
        if d > 0.0 {
            let frac = n_a / n;
            observed_minus_expected += d_a - d * frac;
            if n > 1.0 {
                variance += d * frac * (1.0 - frac) * (n - d) / (n - 1.0);
            }
        }
        n_a -= leaving_a;
        n -= leaving;
    }
    if variance <= 0.0 {
        return Err(Error::Stats("log-rank variance is zero".into()));
    }
    let statistic = observed_minus_expected * observed_minus_expected / variance;
    Ok(LogRank { statistic, p_value: chi_square_sf(statistic, 1.0) })
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    regularized_gamma_q(dof / 2.0, x / 2.0)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `Q(a, x) = Γ(a, x) / Γ(a)`: series below `a + 1`, continued fraction above.
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    const EPS: f64 = 1e-15;
    const MAX_ITER: usize = 10_000;
    if x <= 0.0 {
        return 1.0;
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        (1.0 - sum * log_prefactor.exp()).clamp(0.0, 1.0)
    } else {
        // Modified Lentz evaluation of the continued fraction.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        (log_prefactor.exp() * h).clamp(0.0, 1.0)
    }
}
