use crate::error::{Error, Result};

/// Fenwick tree over risk ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's C over pairs `(i, j)` with `time_i < time_j` and `i` an event.
/// A pair is concordant when `risk_i > risk_j`; tied risks earn half credit.
pub fn concordance_index(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<f64> {
    let n = risks.len();
    if times.len() != n || censored.len() != n {
        return Err(Error::Stats("risks, times and censor flags differ in length".into()));
    }
    if risks.iter().chain(times).any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite risk or time".into()));
    }
    let mut sorted_risks = risks.to_vec();
    sorted_risks.sort_by(f64::total_cmp);
    sorted_risks.dedup();
    let rank = |r: f64| sorted_risks.partition_point(|&x| x < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut later = Fenwick::new(sorted_risks.len());
    let mut inserted = 0u64;
    let (mut doubled_credit, mut pairs) = (0u64, 0u64);
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end < n && times[order[end]] == times[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            if censored[i] {
                continue;
            }
            let r = rank(risks[i]);
            let lower = later.below(r);
            let tied = later.below(r + 1) - lower;
            doubled_credit += 2 * lower + tied;
            pairs += inserted;
        }
        for &i in &order[start..end] {
            later.add(rank(risks[i]));
            inserted += 1;
        }
        start = end;
    }
    if pairs == 0 {
        return Err(Error::Stats("no comparable pairs".into()));
    }
    Ok(doubled_credit as f64 / (2 * pairs) as f64)
}
