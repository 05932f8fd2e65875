use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bag::{BagError, FeatureBag, Modality};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalRecord {
    pub patient_id: String,
    pub time_months: f64,
    /// Right-censored (`censor = 1` on disk).
    pub censored: bool,
    /// 1-based discrete time bin, set by [`discretize_times`].
    pub time_bin: Option<usize>,
}

/// Manifest row as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub id: String,
    pub time_months: f64,
    pub censor: u8,
    pub histology_path: String,
    pub genomic_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_bin: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub patients: Vec<PatientEntry>,
    pub bin_edges: Option<Vec<f64>>,
}

/// Survival labels plus where each patient's bags live.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub records: Vec<SurvivalRecord>,
    pub histology_paths: Vec<PathBuf>,
    pub genomic_paths: Vec<Option<PathBuf>>,
    pub bin_edges: Option<Vec<f64>>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads a manifest; relative bag paths resolve against its directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(manifest, root)
    }

    pub fn from_manifest(manifest: Manifest, root: &Path) -> Result<Self> {
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() { p.to_path_buf() } else { root.join(p) }
        };
        let mut records = Vec::with_capacity(manifest.patients.len());
        let mut histology_paths = Vec::new();
        let mut genomic_paths = Vec::new();
        for e in &manifest.patients {
            if e.censor > 1 {
                return Err(Error::Data(format!("patient {}: censor must be 0 or 1, got {}", e.id, e.censor)));
            }
            if !(e.time_months.is_finite() && e.time_months >= 0.0) {
                return Err(Error::Data(format!("patient {}: invalid time {}", e.id, e.time_months)));
            }
            records.push(SurvivalRecord {
                patient_id: e.id.clone(),
                time_months: e.time_months,
                censored: e.censor == 1,
                time_bin: e.time_bin,
            });
            histology_paths.push(resolve(&e.histology_path));
            genomic_paths.push(e.genomic_path.as_deref().map(resolve));
        }
        if let Some(edges) = &manifest.bin_edges {
            if edges.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data("bin edges must be strictly increasing".into()));
            }
        }
        Ok(Self { records, histology_paths, genomic_paths, bin_edges: manifest.bin_edges })
    }

    /// Manifest with paths written relative to `root` when possible.
    pub fn to_manifest(&self, root: &Path) -> Manifest {
        let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).display().to_string();
        Manifest {
            patients: self
                .records
                .iter()
                .enumerate()
                .map(|(i, r)| PatientEntry {
                    id: r.patient_id.clone(),
                    time_months: r.time_months,
                    censor: u8::from(r.censored),
                    histology_path: rel(&self.histology_paths[i]),
                    genomic_path: self.genomic_paths[i].as_deref().map(rel),
                    time_bin: r.time_bin,
                })
                .collect(),
            bin_edges: self.bin_edges.clone(),
        }
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let text = serde_json::to_string_pretty(&self.to_manifest(root)).expect("manifest serializes");
        fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
    }

    pub fn load_histology<F: Scalar>(&self, i: usize) -> std::result::Result<FeatureBag<F>, BagError> {
        let bag = FeatureBag::load(&self.histology_paths[i])?;
        expect_modality(bag, Modality::Histology, &self.histology_paths[i])
    }

    /// `Ok(None)` when the patient has no genomic bag.
    pub fn load_genomic<F: Scalar>(&self, i: usize) -> std::result::Result<Option<FeatureBag<F>>, BagError> {
        match &self.genomic_paths[i] {
            None => Ok(None),
            Some(p) => expect_modality(FeatureBag::load(p)?, Modality::Genomic, p).map(Some),
        }
    }
}

fn expect_modality<F>(bag: FeatureBag<F>, want: Modality, path: &Path) -> std::result::Result<FeatureBag<F>, BagError> {
    if bag.modality != want {
        return Err(BagError::Io {
            path: path.display().to_string(),
            message: format!("expected a {want:?} bag, found {:?}", bag.modality),
        });
    }
    Ok(bag)
}

/// Quantile with linear interpolation between order statistics:
/// position `(n−1)·p` in the sorted sample.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Edges at the `1/n … (n−1)/n` quantiles of the given event times.
pub fn quantile_edges(event_times: &[f64], n_bins: usize) -> Result<Vec<f64>> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {n_bins}")));
    }
    if event_times.len() < n_bins {
        return Err(Error::Data(format!(
            "{} uncensored records cannot define {n_bins} bins",
            event_times.len()
        )));
    }
    let mut sorted = event_times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..n_bins).map(|k| quantile(&sorted, k as f64 / n_bins as f64)).collect();
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Data(format!("degenerate bin edges {edges:?}")));
    }
    Ok(edges)
}

/// Count of edges strictly below `time`, plus one.
pub fn assign_bin(time: f64, edges: &[f64]) -> usize {
    edges.iter().filter(|&&e| e < time).count() + 1
}

/// Computes edges from uncensored times and bins every record with them.
pub fn discretize_times(cohort: &mut Cohort, n_bins: usize) -> Result<Vec<f64>> {
    let events: Vec<f64> = cohort.records.iter().filter(|r| !r.censored).map(|r| r.time_months).collect();
    let edges = quantile_edges(&events, n_bins)?;
    for r in &mut cohort.records {
        r.time_bin = Some(assign_bin(r.time_months, &edges));
    }
    cohort.bin_edges = Some(edges.clone());
    Ok(edges)
}

/// Shuffles `0..n` with the seed and deals contiguous chunks; the first
/// `n % k` folds get one extra member.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("cannot split {n} patients into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(folds)
}

/// Train/validation indices for fold `fold` of a split.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

pub fn fold_split(n: usize, k: usize, fold: usize, seed: u64) -> Result<FoldSplit> {
    let folds = kfold_split(n, k, seed)?;
    if fold >= k {
        return Err(Error::InvalidArgument(format!("fold {fold} out of range for k={k}")));
    }
    let mut train: Vec<usize> =
        folds.iter().enumerate().filter(|(f, _)| *f != fold).flat_map(|(_, v)| v.iter().copied()).collect();
    train.sort_unstable();
    let mut validation = folds[fold].clone();
    validation.sort_unstable();
    Ok(FoldSplit { train, validation })
}
