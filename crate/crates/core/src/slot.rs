//! Slot attention: compresses a variable-size bag of instance embeddings into
//! a fixed number of slots that compete for instances.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Result, Tensor, Var};
use crate::error::Error;
use crate::nn::{normal_tensor, Bound, Gru, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::scalar::Scalar;

/// How the attention-weighted values are combined into a slot update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `Σ_j α_kj v_j / (Σ_j α_kj + 1e-8)`; stable across bag sizes.
    #[default]
    WeightedMean,
    /// `Σ_j α_kj v_j`.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// `mean + exp(log_std) · ε` with fresh Gaussian `ε`.
    Stochastic,
    /// The learned mean.
    Deterministic,
}

const AGGREGATION_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct SlotParams {
    pub n_slots: usize,
    pub d_in: usize,
    pub d_slot: usize,
    pub init_mean: ParamId,
    pub init_log_std: ParamId,
    pub norm_input: LayerNorm,
    pub norm_slots: LayerNorm,
    pub norm_mlp: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub gru: Gru,
    pub mlp: Mlp,
    pub aggregation: Aggregation,
}

/// Keys and values for one bag, computed once and reused by every iteration.
#[derive(Clone, Copy, Debug)]
pub struct Projected {
    pub keys: Var,
    pub values: Var,
}

/// Graph handles for an encoded bag.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSlots {
    pub slots: Var,
    /// `S×M` attention from the last iteration; each column sums to one.
    pub attention: Var,
    pub iterations: usize,
}

/// Plain values of an encoded bag.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotSet<F> {
    pub slots: Tensor<F>,
    pub attention: Tensor<F>,
    pub iterations: usize,
}

impl EncodedSlots {
    pub fn values<F: Scalar>(&self, g: &Graph<F>) -> SlotSet<F> {
        SlotSet { slots: g.value(self.slots).clone(), attention: g.value(self.attention).clone(), iterations: self.iterations }
    }
}

impl SlotParams {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        n_slots: usize,
        d_in: usize,
        d_slot: usize,
        aggregation: Aggregation,
        rng: &mut R,
    ) -> Self {
        let init_mean = store.add(format!("{name}.init_mean"), normal_tensor(rng, n_slots, d_slot, 1.0), true);
        let init_log_std =
            store.add(format!("{name}.init_log_std"), Tensor::full(n_slots, d_slot, F::lit(0.1f64.ln())), true);
        Self {
            n_slots,
            d_in,
            d_slot,
            init_mean,
            init_log_std,
            norm_input: LayerNorm::new(store, &format!("{name}.norm_input"), d_in),
            norm_slots: LayerNorm::new(store, &format!("{name}.norm_slots"), d_slot),
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), d_slot),
            query: Linear::new(store, &format!("{name}.query"), d_slot, d_slot, false, rng),
            key: Linear::new(store, &format!("{name}.key"), d_in, d_slot, false, rng),
            value: Linear::new(store, &format!("{name}.value"), d_in, d_slot, false, rng),
            gru: Gru::new(store, &format!("{name}.gru"), d_slot, d_slot, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d_slot, d_slot, d_slot, rng),
            aggregation,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.init_mean, self.init_log_std];
        for ln in [self.norm_input, self.norm_slots, self.norm_mlp] {
            v.extend(ln.params());
        }
        for lin in [self.query, self.key, self.value] {
            v.extend(lin.params());
        }
        v.extend(self.gru.params());
        v.extend(self.mlp.params());
        v
    }

    /// Initial `S×d_slot` slots.
    pub fn init<F: Scalar, R: Rng + ?Sized>(&self, g: &mut Graph<F>, p: &Bound, mode: InitMode, rng: &mut R) -> Result<Var> {
        let mean = p[self.init_mean];
        match mode {
            InitMode::Deterministic => Ok(mean),
            InitMode::Stochastic => {
                let noise: Vec<F> = (0..self.n_slots * self.d_slot)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        F::lit(z)
                    })
                    .collect();
                let noise = g.constant(Tensor::from_vec(self.n_slots, self.d_slot, noise).unwrap());
                let std = g.exp(p[self.init_log_std])?;
                let jitter = g.mul(std, noise)?;
                g.add(mean, jitter)
            }
        }
    }

    /// Layer-normalized keys and values of an `M×d_in` bag.
    pub fn project<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, bag: Var) -> Result<Projected> {
        let x = self.norm_input.forward(g, p, bag)?;
        Ok(Projected { keys: self.key.forward(g, p, x)?, values: self.value.forward(g, p, x)? })
    }

    /// One round of competition and update; returns the new slots and `α`.
    pub fn step<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, slots: Var, inputs: &Projected) -> Result<(Var, Var)> {
        let normed = self.norm_slots.forward(g, p, slots)?;
        let q = self.query.forward(g, p, normed)?;
        let kt = g.transpose(inputs.keys)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, F::one() / F::from_usize(self.d_slot).unwrap().sqrt())?;
        let attn = g.column_softmax(logits)?;
        let weights = match self.aggregation {
            Aggregation::WeightedMean => g.row_normalize(attn, F::lit(AGGREGATION_EPS))?,
            Aggregation::Sum => attn,
        };
        let updates = g.matmul(weights, inputs.values)?;
        let slots = self.gru.forward(g, p, slots, updates)?;
        let h = self.norm_mlp.forward(g, p, slots)?;
        let h = self.mlp.forward(g, p, h)?;
        Ok((g.add(slots, h)?, attn))
    }

    /// `iterations` steps starting from `init`.
    pub fn encode_from<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        bag: Var,
        init: Var,
        iterations: usize,
    ) -> Result<EncodedSlots> {
        assert!(iterations >= 1, "slot attention needs at least one iteration");
        let inputs = self.project(g, p, bag)?;
        let mut slots = init;
        let mut attention = init;
        for _ in 0..iterations {
            (slots, attention) = self.step(g, p, slots, &inputs)?;
        }
        Ok(EncodedSlots { slots, attention, iterations })
    }

    pub fn encode<F: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        bag: Var,
        iterations: usize,
        mode: InitMode,
        rng: &mut R,
    ) -> Result<EncodedSlots> {
        let init = self.init(g, p, mode, rng)?;
        self.encode_from(g, p, bag, init, iterations)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub instance: usize,
    pub slot: usize,
    pub max_attention: f64,
}

/// Slot with the largest attention for every instance; ties go to the lowest
/// slot index.
pub fn assignment_map<F: Scalar>(attention: &Tensor<F>) -> Vec<Assignment> {
    (0..attention.cols())
        .map(|j| {
            let mut best = 0;
            for k in 1..attention.rows() {
                if attention.get(k, j) > attention.get(best, j) {
                    best = k;
                }
            }
            Assignment { instance: j, slot: best, max_attention: attention.get(best, j).as_f64() }
        })
        .collect()
}

pub fn write_assignment_csv(path: &Path, assignments: &[Assignment]) -> crate::Result<()> {
    let mut out = String::from("instance_index,slot_index,max_attention\n");
    for a in assignments {
        out.push_str(&format!("{},{},{}\n", a.instance, a.slot, a.max_attention));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::finite_diff_check;

    fn setup(s: usize, d: usize, seed: u64) -> (ParamStore<f64>, SlotParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sp = SlotParams::new(&mut store, "slots", s, d, d, Aggregation::WeightedMean, &mut rng);
        (store, sp)
    }

    fn bag(m: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal_tensor(&mut rng, m, d, 1.0)
    }

    #[test]
    fn vanishing_std_makes_stochastic_match_deterministic() {
        let (mut store, sp) = setup(3, 4, 1);
        *store.value_mut(sp.init_log_std) = Tensor::full(3, 4, -30.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = sp.init(&mut g, &p, InitMode::Stochastic, &mut rng).unwrap();
        let b = sp.init(&mut g, &p, InitMode::Deterministic, &mut rng).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn seeded_stochastic_init_repeats() {
        let (store, sp) = setup(3, 4, 1);
        let run = || {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let v = sp.init(&mut g, &p, InitMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            g.value(v).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_slot_takes_everything_and_averages_values() {
        let (store, sp) = setup(1, 4, 3);
        let x = bag(5, 4, 4);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xb = g.constant(x);
        let inputs = sp.project(&mut g, &p, xb).unwrap();
        let init = sp.init(&mut g, &p, InitMode::Deterministic, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (_, attn) = sp.step(&mut g, &p, init, &inputs).unwrap();
        assert!(g.value(attn).data().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn identical_slots_stay_identical() {
        let (mut store, sp) = setup(2, 4, 5);
        let row = store.get(sp.init_mean).value.row(0).to_vec();
        *store.value_mut(sp.init_mean) = Tensor::from_rows(&[row.clone(), row]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xb = g.constant(bag(6, 4, 6));
        let enc = sp.encode(&mut g, &p, xb, 3, InitMode::Deterministic, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (s, a) = (g.value(enc.slots), g.value(enc.attention));
        for c in 0..4 {
            assert!((s.get(0, c) - s.get(1, c)).abs() < 1e-12);
        }
        for j in 0..6 {
            assert!((a.get(0, j) - a.get(1, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn one_iteration_equals_one_step() {
        let (store, sp) = setup(3, 4, 7);
        let x = bag(5, 4, 8);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xb = g.constant(x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = sp.encode(&mut g, &p, xb, 1, InitMode::Deterministic, &mut rng).unwrap();
        let inputs = sp.project(&mut g, &p, xb).unwrap();
        let init = sp.init(&mut g, &p, InitMode::Deterministic, &mut rng).unwrap();
        let (s, a) = sp.step(&mut g, &p, init, &inputs).unwrap();
        assert_eq!(g.value(enc.slots), g.value(s));
        assert_eq!(g.value(enc.attention), g.value(a));
    }

    #[test]
    fn step_gradient_matches_finite_differences() {
        let (store, sp) = setup(3, 4, 9);
        let x = bag(5, 4, 10);
        let slots0 = bag(3, 4, 11);
        let err = finite_diff_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let p = store.bind(g);
                let inputs = sp.project(g, &p, v[0])?;
                let (s, _) = sp.step(g, &p, v[1], &inputs)?;
                let w = g.constant(bag(3, 4, 12));
                let y = g.mul(s, w)?;
                g.sum(y)
            },
            &[x, slots0],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err:e}");
    }

    #[test]
    fn sum_aggregation_scales_with_bag() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let sp = SlotParams::new(&mut store, "s", 1, 4, 4, Aggregation::Sum, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xb = g.constant(bag(3, 4, 2));
        let inputs = sp.project(&mut g, &p, xb).unwrap();
        let (_, attn) = sp.step(&mut g, &p, p[sp.init_mean], &inputs).unwrap();
        assert_eq!(g.value(attn).sum(), 3.0);
    }

    #[test]
    fn argmax_with_ties_to_lowest() {
        let a = Tensor::<f64>::from_rows(&[[0.7, 0.25], [0.2, 0.25], [0.1, 0.25]]);
        let map = assignment_map(&a);
        assert_eq!(map[0].slot, 0);
        assert_eq!(map[0].max_attention, 0.7);
        assert_eq!(map[1].slot, 0);
        let b = Tensor::<f64>::from_rows(&[[0.1], [0.2], [0.3], [0.3]]);
        assert_eq!(assignment_map(&b)[0].slot, 2);
    }

    #[test]
    fn assignment_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_assignment_csv(&path, &assignment_map(&Tensor::<f32>::from_rows(&[[0.5f32], [0.5]]))).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "instance_index,slot_index,max_attention\n0,0,0.5\n");
    }
}
