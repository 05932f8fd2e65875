//! Selective slot activation: per-slot survival logits, an affine gate, Gumbel
//! top-K selection with a straight-through mask, and the renormalized mixture.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, Mlp, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Cap on shifted logits inside the renormalization. Only slots outside the
/// selection can exceed it and their forward weight is zero.
const SHIFTED_LOGIT_CAP: f64 = 30.0;

/// Number of selected slots for a fraction of `n_slots`, rounded up.
pub fn selected_count(n_slots: usize, fraction: f64) -> usize {
    ((fraction * n_slots as f64).ceil() as usize).clamp(1, n_slots)
}

#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub affine: Linear,
}

impl Gate {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, d_slot: usize, rng: &mut R) -> Self {
        Self { affine: Linear::new(store, name, d_slot, 1, true, rng) }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.affine.params()
    }

    /// Retention scores as a `1×S` row.
    pub fn scores<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, slots: Var) -> Result<Var> {
        let r = self.affine.forward(g, p, slots)?;
        Ok(g.transpose(r)?)
    }
}

/// Gumbel(0, 1) draw by inversion.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Indices of the `k` largest values, ties broken toward the lower index,
/// returned in ascending index order.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    picked
}

#[derive(Clone, Debug)]
pub struct GateMask {
    /// Straight-through mask: forward value is K-hot, gradient is the soft
    /// relaxation's.
    pub mask: Var,
    pub soft: Var,
    pub selected: Vec<usize>,
    pub k: usize,
    pub temperature: f64,
}

impl GateMask {
    pub fn hard(&self, n_slots: usize) -> Vec<bool> {
        let mut h = vec![false; n_slots];
        for &i in &self.selected {
            h[i] = true;
        }
        h
    }
}

/// Gumbel top-K selection over `1×S` scores. With `rng` set (training) the
/// scores are perturbed by Gumbel noise; without it selection is the
/// deterministic top-K of the scores.
pub fn gumbel_topk_mask<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    scores: Var,
    k: usize,
    temperature: f64,
    rng: Option<&mut R>,
) -> Result<GateMask> {
    let [rows, s] = g.shape(scores);
    if rows != 1 {
        return Err(Error::InvalidArgument(format!("gate scores must be a row, got {rows}×{s}")));
    }
    if k == 0 || k > s {
        return Err(Error::InvalidArgument(format!("top-k needs 1 <= k <= {s}, got {k}")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let inv_t = F::lit(1.0 / temperature);
    match rng {
        Some(rng) => {
            let noise: Vec<f64> = (0..s).map(|_| gumbel(rng)).collect();
            let perturbed: Vec<f64> = g.value(scores).data().iter().zip(&noise).map(|(r, n)| r.as_f64() + n).collect();
            let selected = top_k(&perturbed, k);
            let noise = g.constant(Tensor::from_f64(1, s, &noise));
            let logits = g.add(scores, noise)?;
            let logits = g.scale(logits, inv_t)?;
            let soft = g.row_softmax(logits)?;
            let hard = g.constant(k_hot(s, &selected));
            let frozen = g.stop_gradient(soft)?;
            let delta = g.sub(soft, frozen)?;
            let mask = g.add(hard, delta)?;
            Ok(GateMask { mask, soft, selected, k, temperature })
        }
        None => {
            let r: Vec<f64> = g.value(scores).data().iter().map(|v| v.as_f64()).collect();
            let selected = top_k(&r, k);
            let logits = g.scale(scores, inv_t)?;
            let soft = g.row_softmax(logits)?;
            let mask = g.constant(k_hot(s, &selected));
            Ok(GateMask { mask, soft, selected, k, temperature })
        }
    }
}

/// Selection of every slot, used when selective activation is switched off.
pub fn full_mask<F: Scalar>(g: &mut Graph<F>, scores: Var, temperature: f64) -> Result<GateMask> {
    let s = g.shape(scores)[1];
    let logits = g.scale(scores, F::lit(1.0 / temperature))?;
    let soft = g.row_softmax(logits)?;
    let mask = g.constant(Tensor::full(1, s, F::one()));
    Ok(GateMask { mask, soft, selected: (0..s).collect(), k: s, temperature })
}

fn k_hot<F: Scalar>(s: usize, selected: &[usize]) -> Tensor<F> {
    let mut t = Tensor::zeros(1, s);
    for &i in selected {
        t.set(0, i, F::one());
    }
    t
}

/// `w_k = w̃_k Ĝ_k / Σ_s w̃_s Ĝ_s` with `w̃ = softmax(r / temperature)`.
///
/// The softmax normalizer cancels in the ratio, so the exponentials are
/// shifted by the largest selected logit instead. That keeps the selected
/// terms in `(0, 1]` even when the best score overall was not selected.
pub fn renormalize_weights<F: Scalar>(g: &mut Graph<F>, scores: Var, mask: &GateMask) -> Result<Var> {
    if mask.selected.is_empty() {
        return Err(Error::InvalidArgument("gate mask selects no slot".into()));
    }
    let inv_t = 1.0 / mask.temperature;
    let logits = g.scale(scores, F::lit(inv_t))?;
    let shift = {
        let v = g.value(logits);
        mask.selected.iter().map(|&i| v.get(0, i)).fold(F::neg_infinity(), F::max)
    };
    let shifted = g.add_scalar(logits, -shift)?;
    let capped = g.clamp(shifted, F::neg_infinity(), F::lit(SHIFTED_LOGIT_CAP))?;
    let e = g.exp(capped)?;
    let gated = g.mul(e, mask.mask)?;
    Ok(g.row_normalize(gated, F::zero())?)
}

/// Per-slot survival logits `S×N_t`.
#[derive(Clone, Copy, Debug)]
pub struct SlotPredictor {
    pub mlp: Mlp,
}

impl SlotPredictor {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_slot: usize,
        n_bins: usize,
        rng: &mut R,
    ) -> Self {
        Self { mlp: Mlp::new(store, name, d_slot, d_slot, n_bins, rng) }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }

    pub fn logits<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, slots: Var) -> Result<Var> {
        Ok(self.mlp.forward(g, p, slots)?)
    }
}

/// `y = Σ_k w_k ℓ_k` as a `1×N_t` row.
pub fn gated_mixture<F: Scalar>(g: &mut Graph<F>, weights: Var, logits: Var) -> Result<Var> {
    Ok(g.matmul(weights, logits)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateRow {
    pub slot: usize,
    pub score: f64,
    pub selected: bool,
    pub weight: f64,
}

pub fn gate_report<F: Scalar>(g: &Graph<F>, scores: Var, mask: &GateMask, weights: Var) -> Vec<GateRow> {
    let (r, w) = (g.value(scores), g.value(weights));
    let hard = mask.hard(r.cols());
    (0..r.cols())
        .map(|k| GateRow { slot: k, score: r.get(0, k).as_f64(), selected: hard[k], weight: w.get(0, k).as_f64() })
        .collect()
}

pub fn write_gate_csv(path: &Path, rows: &[GateRow]) -> Result<()> {
    let mut out = String::from("slot_index,r,selected,w\n");
    for row in rows {
        out.push_str(&format!("{},{},{},{}\n", row.slot, row.score, u8::from(row.selected), row.weight));
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(out.as_bytes())).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::finite_diff_check;

    fn row(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.input(Tensor::from_f64(1, v.len(), v))
    }

    fn infer(g: &mut Graph<f64>, r: Var, k: usize, t: f64) -> GateMask {
        gumbel_topk_mask::<f64, ChaCha8Rng>(g, r, k, t, None).unwrap()
    }

    #[test]
    fn inference_takes_deterministic_top_k() {
        let mut g = Graph::new();
        let r = row(&mut g, &[3.0, 1.0, 2.0]);
        let m = infer(&mut g, r, 2, 1.0);
        assert_eq!(m.hard(3), vec![true, false, true]);
        assert_eq!(g.value(m.mask).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn full_k_selects_everything_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut g = Graph::new();
            let r = row(&mut g, &[0.3, -2.0, 5.0, 1.0]);
            let m = gumbel_topk_mask(&mut g, r, 4, 0.01, Some(&mut rng)).unwrap();
            assert_eq!(g.value(m.mask).data(), &[1.0; 4]);
        }
    }

    #[test]
    fn k_out_of_range_rejected() {
        let mut g = Graph::new();
        let r = row(&mut g, &[1.0, 2.0]);
        assert!(gumbel_topk_mask::<f64, ChaCha8Rng>(&mut g, r, 0, 1.0, None).is_err());
        assert!(gumbel_topk_mask::<f64, ChaCha8Rng>(&mut g, r, 3, 1.0, None).is_err());
        assert!(gumbel_topk_mask::<f64, ChaCha8Rng>(&mut g, r, 1, 0.0, None).is_err());
    }

    #[test]
    fn renormalized_weights_match_hand_arithmetic() {
        let mut g = Graph::new();
        let r = row(&mut g, &[3.0, 1.0, 2.0]);
        let m = infer(&mut g, r, 2, 1.0);
        let w = renormalize_weights(&mut g, r, &m).unwrap();
        let e = std::f64::consts::E;
        let expect = [e.powi(3) / (e.powi(3) + e.powi(2)), 0.0, e.powi(2) / (e.powi(3) + e.powi(2))];
        for (a, b) in g.value(w).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((expect[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn single_and_uniform_selections() {
        let mut g = Graph::new();
        let r = row(&mut g, &[0.5, 2.0, -1.0]);
        let m = infer(&mut g, r, 1, 0.01);
        let w = renormalize_weights(&mut g, r, &m).unwrap();
        assert_eq!(g.value(w).data(), &[0.0, 1.0, 0.0]);

        let u = row(&mut g, &[0.7; 4]);
        let m = infer(&mut g, u, 3, 0.01);
        let w = renormalize_weights(&mut g, u, &m).unwrap();
        for (i, &x) in g.value(w).data().iter().enumerate() {
            assert!((x - if i < 3 { 1.0 / 3.0 } else { 0.0 }).abs() < 1e-15);
        }
    }

    #[test]
    fn unselected_best_score_does_not_underflow() {
        // The Gumbel draw can pick a slot whose score is far below the best;
        // at temperature 0.01 a naive softmax leaves every selected weight at 0.
        let mut g = Graph::<f32>::new();
        let r = g.input(Tensor::from_rows(&[[5.0f32, 0.0, -1.0]]));
        let soft = g.constant(Tensor::from_rows(&[[1.0f32, 0.0, 0.0]]));
        let mask = GateMask { mask: g.constant(Tensor::from_rows(&[[0.0f32, 1.0, 1.0]])), soft, selected: vec![1, 2], k: 2, temperature: 0.01 };
        let w = renormalize_weights(&mut g, r, &mask).unwrap();
        assert!(g.value(w).is_finite());
        assert!((g.value(w).get(0, 1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mixture_examples() {
        let mut g = Graph::new();
        let w = row(&mut g, &[0.5, 0.5]);
        let l = g.input(Tensor::from_rows(&[[1.0; 4], [3.0; 4]]));
        let y = gated_mixture(&mut g, w, l).unwrap();
        assert_eq!(g.value(y).data(), &[2.0; 4]);
        let w = row(&mut g, &[0.0, 1.0]);
        let y = gated_mixture(&mut g, w, l).unwrap();
        assert_eq!(g.value(y).data(), &[3.0; 4]);
    }

    #[test]
    fn zero_gate_and_predictor_give_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let gate = Gate::new(&mut store, "gate", 4, &mut rng);
        let pred = SlotPredictor::new(&mut store, "pred", 4, 3, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let [r, c] = store.get(id).value.shape();
            *store.value_mut(id) = Tensor::zeros(r, c);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let slots = g.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]]));
        let r = gate.scores(&mut g, &p, slots).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0]);
        let l = pred.logits(&mut g, &p, slots).unwrap();
        assert_eq!(g.value(l).shape(), [2, 3]);
        assert!(g.value(l).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_and_mixture_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let gate = Gate::new(&mut store, "gate", 4, &mut rng);
        let pred = SlotPredictor::new(&mut store, "pred", 4, 3, &mut rng);
        let slots = crate::nn::normal_tensor::<f64, _>(&mut rng, 5, 4, 1.0);
        let err = finite_diff_check(
            |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
                let p = store.bind(g);
                let r = gate.scores(g, &p, v[0])?;
                let m = gumbel_topk_mask::<f64, ChaCha8Rng>(g, r, 2, 1.0, None)?;
                let w = renormalize_weights(g, r, &m)?;
                let l = pred.logits(g, &p, v[0])?;
                let y = gated_mixture(g, w, l)?;
                let c = g.constant(Tensor::from_rows(&[[0.3, -1.2, 0.8]]));
                let y = g.mul(y, c)?;
                Ok(g.sum(y)?)
            },
            &[slots],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err:e}");
    }

    #[test]
    fn straight_through_gradient_equals_soft_gradient() {
        let c = [0.4, -1.3, 2.2, 0.7];
        let r0 = [0.2, -0.5, 1.1, 0.3];
        let grad = |soft_only: bool| {
            let mut g = Graph::<f64>::new();
            let r = row(&mut g, &r0);
            let m = gumbel_topk_mask(&mut g, r, 2, 0.5, Some(&mut ChaCha8Rng::seed_from_u64(4))).unwrap();
            let cv = g.constant(Tensor::from_f64(1, 4, &c));
            let src = if soft_only { m.soft } else { m.mask };
            let y = g.mul(src, cv).unwrap();
            let y = g.sum(y).unwrap();
            g.backward(y).unwrap().wrt(&g, r)
        };
        let (a, b) = (grad(false), grad(true));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let rows = vec![GateRow { slot: 0, score: 1.5, selected: true, weight: 1.0 }];
        write_gate_csv(&path, &rows).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "slot_index,r,selected,w\n0,1.5,1,1\n");
    }

    #[test]
    fn selected_count_rounds_up() {
        assert_eq!(selected_count(16, 0.25), 4);
        assert_eq!(selected_count(8, 0.25), 2);
        assert_eq!(selected_count(5, 0.25), 2);
        assert_eq!(selected_count(1, 0.25), 1);
    }
}
