use slotspe::data::{synth_cohort, SynthConfig};
use slotspe::model::{ModelConfig, SlotSpe};
use slotspe::survival::concordance_index;
use slotspe::train::{predict, train, Dataset, TrainConfig};

fn tiny_data(n: usize, seed: u64) -> Dataset<f32> {
    let synth = synth_cohort(&SynthConfig {
        n_patients: n,
        m_h_min: 12,
        m_h_max: 20,
        m_g: 6,
        d: 8,
        n_motifs: 2,
        slot_budget: 4,
        censor_fraction: 0.25,
        seed,
        ..Default::default()
    })
    .unwrap();
    Dataset::from_synth(&synth, 4).unwrap()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed: 3,
        model: ModelConfig { slots_h: 4, slots_g: 4, iterations: 2, fusion_rounds: 2, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let data = tiny_data(12, 1);
    let config = tiny_config(0);
    let all: Vec<usize> = (0..data.len()).collect();
    let out = train(&config, &data, &all).unwrap();
    let fresh = SlotSpe::<f32>::new(config.model.clone(), data.d, data.m_g, config.seed).unwrap();
    assert_eq!(out.model.store, fresh.store);
    assert_eq!(out.model.epochs_trained, 0);
    assert!(out.log.is_empty());
}

#[test]
fn training_is_independent_of_thread_count() {
    let data = tiny_data(12, 2);
    let config = tiny_config(2);
    let all: Vec<usize> = (0..data.len()).collect();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| train(&config, &data, &all).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.model.store, b.model.store);
    assert_eq!(a.log, b.log);
    assert_ne!(a.model.store, SlotSpe::<f32>::new(config.model.clone(), data.d, data.m_g, config.seed).unwrap().store);
}

#[test]
fn epoch_logs_satisfy_loss_accounting() {
    let data = tiny_data(12, 3);
    let config = tiny_config(3);
    let all: Vec<usize> = (0..data.len()).collect();
    let out = train(&config, &data, &all).unwrap();
    assert_eq!(out.log.len(), 3);
    for entry in &out.log {
        assert_eq!(entry.steps, 3);
        assert!(entry.loss.accounting_gap() <= 1e-5 * entry.loss.total.abs().max(1.0), "{entry:?}");
        assert!(entry.loss.reconstruction() > 0.0);
    }
}

#[test]
fn small_cohort_can_be_overfit() {
    let data = tiny_data(8, 4);
    let config = TrainConfig { epochs: 150, learning_rate: 5e-3, batch_size: 8, ..tiny_config(0) };
    let all: Vec<usize> = (0..data.len()).collect();
    let out = train(&config, &data, &all).unwrap();
    let curves = predict(&out.model, &data, &all, false).unwrap();
    let risks: Vec<f64> = curves.iter().map(|c| c.risk).collect();
    let times: Vec<f64> = data.patients.iter().map(|p| p.time_months).collect();
    let censored: Vec<bool> = data.patients.iter().map(|p| p.censored).collect();
    let c = concordance_index(&risks, &times, &censored).unwrap();
    let first = out.log.first().unwrap().loss.total;
    let last = out.log.last().unwrap().loss.total;
    assert!(last < first, "loss {first} -> {last}");
    assert!(c >= 0.95, "training C-index {c}");
}

#[test]
fn mismatched_bins_and_eventless_splits_are_rejected() {
    let data = tiny_data(12, 5);
    let mut config = tiny_config(1);
    config.model.n_bins = 3;
    let all: Vec<usize> = (0..data.len()).collect();
    assert!(train(&config, &data, &all).is_err());
    let censored: Vec<usize> = (0..data.len()).filter(|&i| data.patients[i].censored).collect();
    assert!(train(&tiny_config(1), &data, &censored).is_err());
}
