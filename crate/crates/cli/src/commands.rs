use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use slotspe::data::{discretize_times, fold_split, synth_cohort, Cohort, FeatureBag, Modality, SynthConfig};
use slotspe::model::SlotSpe;
use slotspe::moe::write_gate_csv;
use slotspe::slot::write_assignment_csv;
use slotspe::train::{
    evaluate, train, write_report, Checkpoint, Dataset, EvalOptions, FoldMetrics, Precision, TrainConfig,
};
use slotspe::{Error, Result, Scalar};

use crate::Command;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out } => synth(config.as_deref(), &out),
        Command::Discretize { manifest, bins } => discretize(&manifest, bins),
        Command::Train { manifest, config, fold, out } => {
            let config = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => TrainConfig::default(),
            };
            let cohort = Cohort::load(&manifest)?;
            match config.precision {
                Precision::F32 => train_fold::<f32>(&config, &cohort, fold, &out),
                Precision::F64 => train_fold::<f64>(&config, &cohort, fold, &out),
            }
        }
        Command::Eval { checkpoint, manifest, fold, missing_genomics } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cohort = Cohort::load(&manifest)?;
            let metrics = match ck.config.precision {
                Precision::F32 => eval_fold::<f32>(&ck, &cohort, fold, missing_genomics)?,
                Precision::F64 => eval_fold::<f64>(&ck, &cohort, fold, missing_genomics)?,
            };
            println!("{}", to_json(&metrics));
            Ok(())
        }
        Command::Infer { checkpoint, histology, genomic, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            match ck.config.precision {
                Precision::F32 => infer::<f32>(&ck, &histology, genomic.as_deref(), &out),
                Precision::F64 => infer::<f64>(&ck, &histology, genomic.as_deref(), &out),
            }
        }
        Command::Report { runs, out, horizon, replicates, seed } => report(&runs, &out, horizon, replicates, seed),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes")
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn synth(config: Option<&Path>, out: &Path) -> Result<()> {
    let config = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<SynthConfig>(&text).map_err(|e| Error::json(path, e))?
        }
        None => SynthConfig::default(),
    };
    let cohort = synth_cohort(&config)?;
    cohort.write(out)?;
    println!("wrote {} patients to {}", cohort.patients.len(), out.display());
    Ok(())
}

fn discretize(manifest: &Path, bins: usize) -> Result<()> {
    let mut cohort = Cohort::load(manifest)?;
    let edges = discretize_times(&mut cohort, bins)?;
    cohort.save(manifest)?;
    println!("bin edges: {edges:?}");
    Ok(())
}

fn train_fold<F: Scalar>(config: &TrainConfig, cohort: &Cohort, fold: usize, out: &Path) -> Result<()> {
    let data = Dataset::<F>::from_cohort(cohort, true)?;
    let split = fold_split(data.len(), config.folds, fold, config.seed)?;
    let outcome = train(config, &data, &split.train)?;
    create_dir(out)?;
    Checkpoint::from_model(config, &outcome.model, &outcome.optimizer).save(&out.join("checkpoint.bin"))?;
    write_file(&out.join("train_log.json"), &to_json(&outcome.log))?;
    let metrics = evaluate(&outcome.model, &data, fold, &split.validation, false, eval_options(config))?;
    write_file(&out.join("metrics.json"), &to_json(&metrics))?;
    println!("fold {fold}: validation C-index {:.4}", metrics.c_index);
    Ok(())
}

fn eval_options(config: &TrainConfig) -> EvalOptions {
    EvalOptions {
        horizon_months: config.horizon_months,
        bootstrap_replicates: config.bootstrap_replicates,
        seed: config.seed,
    }
}

fn eval_fold<F: Scalar>(ck: &Checkpoint, cohort: &Cohort, fold: usize, missing_genomics: bool) -> Result<FoldMetrics> {
    let model = ck.to_model::<F>()?;
    let data = Dataset::<F>::from_cohort(cohort, !missing_genomics)?;
    let split = fold_split(data.len(), ck.config.folds, fold, ck.config.seed)?;
    evaluate(&model, &data, fold, &split.validation, missing_genomics, eval_options(&ck.config))
}

fn load_bag<F: Scalar>(path: &Path, want: Modality) -> Result<FeatureBag<F>> {
    let bag = FeatureBag::<F>::load(path)?;
    if bag.modality != want {
        return Err(Error::Data(format!("{}: expected a {want:?} bag, found {:?}", path.display(), bag.modality)));
    }
    Ok(bag)
}

fn infer<F: Scalar>(ck: &Checkpoint, histology: &Path, genomic: Option<&Path>, out: &Path) -> Result<()> {
    let model: SlotSpe<F> = ck.to_model()?;
    let h = load_bag::<F>(histology, Modality::Histology)?;
    let x = genomic.map(|p| load_bag::<F>(p, Modality::Genomic)).transpose()?;
    let result = model.infer(&h.features, x.as_ref().map(|b| &b.features))?;
    create_dir(out)?;
    let prediction = json!({
        "hazards": result.curve.hazards,
        "survival": result.curve.survival,
        "risk": result.curve.risk,
        "imputed": result.imputed,
    });
    write_file(&out.join("prediction.json"), &to_json(&prediction))?;
    write_assignment_csv(&out.join("histology_assignments.csv"), &result.hist_assignments)?;
    write_assignment_csv(&out.join("genomic_assignments.csv"), &result.gen_assignments)?;
    write_gate_csv(&out.join("histology_gates.csv"), &result.hist_gates)?;
    write_gate_csv(&out.join("genomic_gates.csv"), &result.gen_gates)?;
    if result.imputed {
        let bag = model.impute_genomic(&h.features)?;
        let path = out.join("imputed_genomic.bag");
        bag.save(&path)?;
        write_file(&out.join("imputed_genomic.json"), &to_json(&json!({ "imputed": true })))?;
    }
    println!("{}", to_json(&prediction));
    Ok(())
}

fn collect_metrics(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries.map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err))).collect::<Result<_>>()?;
    paths.sort();
    for path in paths {
        if path.is_dir() {
            collect_metrics(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "metrics.json") {
            found.push(path);
        }
    }
    Ok(())
}

fn report(runs: &Path, out: &Path, horizon: f64, replicates: usize, seed: u64) -> Result<()> {
    let mut paths = Vec::new();
    collect_metrics(runs, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no metrics.json under {}", runs.display())));
    }
    let mut metrics = Vec::with_capacity(paths.len());
    for path in &paths {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        metrics.push(serde_json::from_str::<FoldMetrics>(&text).map_err(|e| Error::json(path, e))?);
    }
    let summary = write_report(&metrics, out, horizon, replicates, seed)?;
    println!("{}", to_json(&summary));
    Ok(())
}
