use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::evaluate::{FoldMetrics, GroupRecord};
use crate::error::{Error, Result};
use crate::survival::{bootstrap_stats, km_estimate, logrank_test, KmEstimate, SurvivalGroup};

/// Cross-fold summary. Fold standard deviation is the population one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub folds: usize,
    pub c_index_mean: f64,
    pub c_index_std: f64,
    pub std_convention: String,
    pub logrank_p: Option<f64>,
    pub rmst_high: Option<f64>,
    pub rmst_low: Option<f64>,
    pub delta: Option<f64>,
    pub delta_ci: Option<[f64; 2]>,
    pub ratio: Option<f64>,
    pub ratio_ci: Option<[f64; 2]>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `sqrt(Σ (x − mean)² / n)`.
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn pooled(metrics: &[FoldMetrics], pick: fn(&FoldMetrics) -> &GroupRecord) -> SurvivalGroup {
    let mut g = SurvivalGroup::default();
    for m in metrics {
        let r = pick(m);
        g.times.extend(&r.times);
        g.event.extend(&r.events);
    }
    g
}

/// Summary statistics; group statistics pool every fold's risk groups.
pub fn summarize(metrics: &[FoldMetrics], horizon: f64, replicates: usize, seed: u64) -> Result<RunSummary> {
    if metrics.is_empty() {
        return Err(Error::InvalidArgument("no fold results to report".into()));
    }
    let c: Vec<f64> = metrics.iter().map(|m| m.c_index).collect();
    let (high, low) = (pooled(metrics, |m| &m.high), pooled(metrics, |m| &m.low));
    let logrank_p = logrank_test(&high.times, &high.event, &low.times, &low.event).ok().map(|l| l.p_value);
    let boot = bootstrap_stats(&high, &low, horizon, replicates, seed).ok();
    Ok(RunSummary {
        folds: metrics.len(),
        c_index_mean: mean(&c),
        c_index_std: population_std(&c),
        std_convention: "population".into(),
        logrank_p,
        rmst_high: boot.as_ref().map(|b| b.rmst_high),
        rmst_low: boot.as_ref().map(|b| b.rmst_low),
        delta: boot.as_ref().map(|b| b.delta),
        delta_ci: boot.as_ref().map(|b| b.delta_ci),
        ratio: boot.as_ref().map(|b| b.ratio),
        ratio_ci: boot.as_ref().map(|b| b.ratio_ci),
    })
}

pub fn folds_csv(metrics: &[FoldMetrics]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("fold,n_validation,missing_genomics,c_index,risk_cutoff,logrank_p,rmst_high,rmst_low,delta,ratio\n");
    for m in metrics {
        let b = m.rmst.as_ref();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            m.fold,
            m.n_validation,
            m.missing_genomics,
            m.c_index,
            m.risk_cutoff,
            opt(m.logrank_p),
            opt(b.map(|b| b.rmst_high)),
            opt(b.map(|b| b.rmst_low)),
            opt(b.map(|b| b.delta)),
            opt(b.map(|b| b.ratio)),
        )
        .unwrap();
    }
    out
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn step_path(km: &KmEstimate, t_max: f64) -> String {
    let x = |t: f64| MARGIN + (WIDTH - 2.0 * MARGIN) * (t / t_max);
    let y = |s: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * s;
    let mut d = format!("M {:.2} {:.2}", x(0.0), y(1.0));
    for (&t, &s) in km.times.iter().zip(&km.survival) {
        write!(d, " H {:.2} V {:.2}", x(t), y(s)).unwrap();
    }
    write!(d, " H {:.2}", x(t_max)).unwrap();
    d
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.digits$}"))
}

/// Standalone SVG with one Kaplan-Meier step curve per risk group.
pub fn km_svg(high: &SurvivalGroup, low: &SurvivalGroup, summary: &RunSummary) -> Result<String> {
    let km_high = km_estimate(&high.times, &high.event)?;
    let km_low = km_estimate(&low.times, &low.event)?;
    let t_max = high.times.iter().chain(&low.times).fold(0.0f64, |m, &t| m.max(t)).max(1e-9);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#).unwrap();
    writeln!(s, r#"  <rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    writeln!(s, r#"  <line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"  <line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    writeln!(s, r##"  <path d="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##, step_path(&km_high, t_max)).unwrap();
    writeln!(s, r##"  <path d="{}" fill="none" stroke="#2471a3" stroke-width="2"/>"##, step_path(&km_low, t_max)).unwrap();
    let lines = [
        format!("High risk (n={}) / Low risk (n={})", high.len(), low.len()),
        format!("log-rank p = {}", summary.logrank_p.map_or_else(|| "n/a".into(), |p| format!("{p:.3e}"))),
        format!("delta RMST (High-Low) = {} months", fmt_opt(summary.delta, 2)),
        format!("RMST ratio (High/Low) = {}", fmt_opt(summary.ratio, 3)),
    ];
    for (i, text) in lines.iter().enumerate() {
        writeln!(s, r#"  <text x="{}" y="{}" font-family="sans-serif" font-size="12">{text}</text>"#, x1 - 260.0, y1 + 15.0 * (i as f64 + 1.0)).unwrap();
    }
    writeln!(s, r#"  <text x="{}" y="{}" font-family="sans-serif" font-size="12">months (0 to {t_max:.1})</text>"#, (x0 + x1) / 2.0 - 40.0, HEIGHT - 15.0).unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `folds.csv`, `summary.json` and `km.svg` into `out_dir`.
pub fn write_report(metrics: &[FoldMetrics], out_dir: &Path, horizon: f64, replicates: usize, seed: u64) -> Result<RunSummary> {
    let summary = summarize(metrics, horizon, replicates, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, body: &str| {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    write("folds.csv", &folds_csv(metrics))?;
    write("summary.json", &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    let (high, low) = (pooled(metrics, |m| &m.high), pooled(metrics, |m| &m.low));
    if !high.is_empty() && !low.is_empty() {
        write("km.svg", &km_svg(&high, &low, &summary)?)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fold(i: usize, c: f64) -> FoldMetrics {
        FoldMetrics {
            fold: i,
            n_validation: 4,
            missing_genomics: false,
            c_index: c,
            risk_cutoff: 0.0,
            logrank_statistic: None,
            logrank_p: None,
            rmst: None,
            stats_note: None,
            high: GroupRecord { times: vec![1.0 + i as f64, 5.0, 8.0], events: vec![true, true, false] },
            low: GroupRecord { times: vec![20.0, 30.0 + i as f64, 70.0], events: vec![true, false, true] },
        }
    }

    #[test]
    fn five_fold_mean_and_population_std() {
        let m: Vec<FoldMetrics> = [0.7, 0.71, 0.72, 0.73, 0.74].iter().enumerate().map(|(i, &c)| fold(i, c)).collect();
        let s = summarize(&m, 60.0, 200, 0).unwrap();
        assert!((s.c_index_mean - 0.72).abs() < 1e-12);
        assert!((s.c_index_std - 0.0141).abs() < 1e-4);
        assert_eq!(s.std_convention, "population");
    }

    #[test]
    fn single_fold_has_zero_std() {
        let s = summarize(&[fold(0, 0.8)], 60.0, 100, 0).unwrap();
        assert_eq!(s.c_index_std, 0.0);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(summarize(&[], 60.0, 100, 0).is_err());
    }

    #[test]
    fn summary_json_has_declared_fields() {
        let s = summarize(&[fold(0, 0.8), fold(1, 0.7)], 60.0, 100, 0).unwrap();
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        for key in ["c_index_mean", "c_index_std", "logrank_p", "rmst_high", "rmst_low", "delta", "delta_ci", "ratio", "ratio_ci"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn svg_has_two_paths_and_balanced_tags() {
        let m = [fold(0, 0.8), fold(1, 0.7)];
        let s = summarize(&m, 60.0, 100, 0).unwrap();
        let svg = km_svg(&pooled(&m, |m| &m.high), &pooled(&m, |m| &m.low), &s).unwrap();
        assert_eq!(svg.matches("<path").count(), 2);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        let opened = svg.matches('<').count();
        let self_closed = svg.matches("/>").count();
        let closing = svg.matches("</").count();
        // Every element is either self-closing or has a matching close tag.
        assert_eq!(opened - closing, self_closed + closing);
        assert!(!svg.contains('&'));
    }

    #[test]
    fn report_files_written() {
        let dir = tempfile::tempdir().unwrap();
        write_report(&[fold(0, 0.8), fold(1, 0.6)], dir.path(), 60.0, 100, 0).unwrap();
        for f in ["folds.csv", "summary.json", "km.svg"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = std::fs::read_to_string(dir.path().join("folds.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
