//! Reconstruction regularizers and the histology-to-genomic imputer.
//!
//! Genomic pathways are reconstructed from learned per-pathway position
//! queries; histology patches from a frozen random map of the patches
//! themselves. Both decode by cross-attending from the queries to slots.

use rand::Rng;

use crate::autodiff::{Graph, Result, Tensor, Var};
use crate::nn::{attend, glorot, normal_tensor, Bound, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::slot::{EncodedSlots, InitMode, SlotParams};

/// One learnable query row per pathway.
#[derive(Clone, Copy, Debug)]
pub struct PositionTable {
    pub embed: ParamId,
    pub rows: usize,
}

impl PositionTable {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, rows: usize, d: usize, rng: &mut R) -> Self {
        Self { embed: store.add(format!("{name}.embed"), normal_tensor(rng, rows, d, 1.0), true), rows }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.embed]
    }
}

/// A single decoder block: cross-attention to slots with a residual and layer
/// norm, then a two-layer feed-forward with a residual.
#[derive(Clone, Copy, Debug)]
pub struct ReconHead {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm: LayerNorm,
    pub ff: Mlp,
}

impl ReconHead {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, d: usize, d_slot: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d_slot, false, rng),
            key: Linear::new(store, &format!("{name}.key"), d_slot, d_slot, false, rng),
            value: Linear::new(store, &format!("{name}.value"), d_slot, d_slot, false, rng),
            out: Linear::new(store, &format!("{name}.out"), d_slot, d, true, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            ff: Mlp::new(store, &format!("{name}.ff"), d, d, d, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for lin in [self.query, self.key, self.value, self.out] {
            v.extend(lin.params());
        }
        v.extend(self.norm.params());
        v.extend(self.ff.params());
        v
    }

    /// Decodes one row per query.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, queries: Var, slots: Var) -> Result<Var> {
        let q = self.query.forward(g, p, queries)?;
        let k = self.key.forward(g, p, slots)?;
        let v = self.value.forward(g, p, slots)?;
        let (a, _) = attend(g, q, k, v)?;
        let a = self.out.forward(g, p, a)?;
        let h = g.add(queries, a)?;
        let h = self.norm.forward(g, p, h)?;
        let f = self.ff.forward(g, p, h)?;
        g.add(h, f)
    }
}

/// Random affine `d→d` map that is registered as frozen.
#[derive(Clone, Copy, Debug)]
pub struct FrozenQueryMap {
    pub w: ParamId,
    pub b: ParamId,
}

impl FrozenQueryMap {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            w: store.add(format!("{name}.w"), glorot(rng, d, d), false),
            b: store.add(format!("{name}.b"), normal_tensor(rng, 1, d, 0.1), false),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    pub output: Var,
    /// Scalar loss, absent when there is nothing to compare against.
    pub loss: Option<Var>,
    /// Rows whose cosine was undefined (zero norm) and counted as 0.
    pub zero_norm_rows: usize,
}

/// Pathway reconstruction from slots; mean squared error when `target` is set.
pub fn reconstruct_genomic<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    slots: Var,
    positions: &PositionTable,
    head: &ReconHead,
    target: Option<Var>,
) -> Result<Reconstruction> {
    let output = head.forward(g, p, p[positions.embed], slots)?;
    let loss = target.map(|t| g.squared_error(output, t)).transpose()?;
    Ok(Reconstruction { output, loss, zero_norm_rows: 0 })
}

/// Patch reconstruction from slots; loss is `1 − mean row cosine`.
pub fn reconstruct_histology<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    slots: Var,
    bag: Var,
    qmap: &FrozenQueryMap,
    head: &ReconHead,
) -> Result<Reconstruction> {
    let queries = qmap.forward(g, p, bag)?;
    let output = head.forward(g, p, queries, slots)?;
    let (loss, zero_norm_rows) = cosine_loss(g, output, bag)?;
    Ok(Reconstruction { output, loss: Some(loss), zero_norm_rows })
}

/// `1 − mean_j cos(a_j, b_j)` and the number of rows with a zero-norm side.
pub fn cosine_loss<F: Scalar>(g: &mut Graph<F>, a: Var, b: Var) -> Result<(Var, usize)> {
    let cos = g.cosine_similarity(a, b)?;
    let zero = |t: &Tensor<F>, i: usize| t.row(i).iter().all(|&x| x == F::zero());
    let (va, vb) = (g.value(a), g.value(b));
    let flagged = (0..va.rows()).filter(|&i| zero(va, i) || zero(vb, i)).count();
    let mean = g.mean_pool(cos)?;
    let neg = g.scale(mean, -F::one())?;
    Ok((g.add_scalar(neg, F::one())?, flagged))
}

/// Where cross-modal slot attention starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossInit {
    /// The genomic branch's learned initialization.
    #[default]
    LearnedInit,
    /// The genomic slots after encoding the genomic bag.
    EncodedGenomic,
}

/// Runs the genomic slot parameters over histology instances.
#[allow(clippy::too_many_arguments)]
pub fn cross_modal_encode<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    p: &Bound,
    genomic_params: &SlotParams,
    histology: Var,
    iterations: usize,
    mode: InitMode,
    init: Option<Var>,
    rng: &mut R,
) -> Result<EncodedSlots> {
    let start = match init {
        Some(v) => v,
        None => genomic_params.init(g, p, mode, rng)?,
    };
    genomic_params.encode_from(g, p, histology, start, iterations)
}

/// Pathway reconstruction from cross-modal slots.
pub fn cross_modal_reconstruct<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    cross_slots: Var,
    positions: &PositionTable,
    head: &ReconHead,
    target: Option<Var>,
) -> Result<Reconstruction> {
    reconstruct_genomic(g, p, cross_slots, positions, head, target)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::slot::Aggregation;

    #[test]
    fn squared_error_conventions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0]]));
        let same = g.squared_error(x, x).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let shifted = g.add_scalar(x, 1.0).unwrap();
        let off = g.squared_error(shifted, x).unwrap();
        assert_eq!(g.value(off).item(), 1.0);
    }

    #[test]
    fn cosine_loss_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0]]));
        let scaled = g.constant(Tensor::from_rows(&[[2.0, 4.0], [0.3, -0.1]]));
        let (l, _) = cosine_loss(&mut g, scaled, x).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        let neg = g.scale(x, -1.0).unwrap();
        let (l, _) = cosine_loss(&mut g, neg, x).unwrap();
        assert!((g.value(l).item() - 2.0).abs() < 1e-12);
        let orth = g.constant(Tensor::from_rows(&[[-2.0, 1.0], [1.0, 3.0]]));
        let (l, _) = cosine_loss(&mut g, orth, x).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rows_count_as_orthogonal_and_are_flagged() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]));
        let (l, flagged) = cosine_loss(&mut g, x, x).unwrap();
        assert_eq!(flagged, 1);
        assert!((g.value(l).item() - 0.5).abs() < 1e-12);
    }

    struct Parts {
        store: ParamStore<f64>,
        slots: SlotParams,
        positions: PositionTable,
        head: ReconHead,
        cross: ReconHead,
        qmap: FrozenQueryMap,
    }

    fn parts(seed: u64) -> Parts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let slots = SlotParams::new(&mut store, "gen", 3, 4, 4, Aggregation::WeightedMean, &mut rng);
        let positions = PositionTable::new(&mut store, "pos", 5, 4, &mut rng);
        let head = ReconHead::new(&mut store, "head", 4, 4, &mut rng);
        let cross = ReconHead::new(&mut store, "cross", 4, 4, &mut rng);
        let qmap = FrozenQueryMap::new(&mut store, "qmap", 4, &mut rng);
        Parts { store, slots, positions, head, cross, qmap }
    }

    fn rand(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        normal_tensor(&mut ChaCha8Rng::seed_from_u64(seed), rows, cols, 1.0)
    }

    #[test]
    fn genomic_loss_gradient_wrt_slots() {
        let pt = parts(1);
        let target = rand(5, 4, 2);
        let err = finite_diff_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let p = pt.store.bind(g);
                let t = g.constant(target.clone());
                let r = reconstruct_genomic(g, &p, v[0], &pt.positions, &pt.head, Some(t))?;
                Ok::<_, crate::autodiff::AutodiffError>(r.loss.unwrap())
            },
            &[rand(3, 4, 3)],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err:e}");
    }

    #[test]
    fn histology_loss_gradient_wrt_slots() {
        let pt = parts(4);
        let bag = rand(6, 4, 5);
        let err = finite_diff_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let p = pt.store.bind(g);
                let b = g.constant(bag.clone());
                let r = reconstruct_histology(g, &p, v[0], b, &pt.qmap, &pt.head)?;
                Ok::<_, crate::autodiff::AutodiffError>(r.loss.unwrap())
            },
            &[rand(3, 4, 6)],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err:e}");
    }

    #[test]
    fn cross_modal_path_gradient() {
        let pt = parts(7);
        let target = rand(5, 4, 8);
        let err = finite_diff_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let p = pt.store.bind(g);
                let t = g.constant(target.clone());
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let s = cross_modal_encode(g, &p, &pt.slots, v[0], 2, InitMode::Deterministic, None, &mut rng)?;
                let r = cross_modal_reconstruct(g, &p, s.slots, &pt.positions, &pt.cross, Some(t))?;
                Ok::<_, crate::autodiff::AutodiffError>(r.loss.unwrap())
            },
            &[rand(6, 4, 9)],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err:e}");
    }

    #[test]
    fn cross_reconstruct_with_true_slots_is_genomic_reconstruct() {
        let pt = parts(10);
        let mut g = Graph::new();
        let p = pt.store.bind(&mut g);
        let s = g.constant(rand(3, 4, 11));
        let a = reconstruct_genomic(&mut g, &p, s, &pt.positions, &pt.head, None).unwrap();
        let b = cross_modal_reconstruct(&mut g, &p, s, &pt.positions, &pt.head, None).unwrap();
        assert_eq!(g.value(a.output), g.value(b.output));
        assert_eq!(g.value(a.output).shape(), [5, 4]);
    }

    #[test]
    fn cross_encode_is_permutation_invariant() {
        let pt = parts(12);
        let bag = rand(7, 4, 13);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let run = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let p = pt.store.bind(&mut g);
            let x = g.constant(x);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let s = cross_modal_encode(&mut g, &p, &pt.slots, x, 3, InitMode::Deterministic, None, &mut rng).unwrap();
            g.value(s.slots).clone()
        };
        let a = run(bag.clone());
        let b = run(bag.select_rows(&perm));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn query_map_is_frozen() {
        let pt = parts(14);
        let mut g = Graph::new();
        let p = pt.store.bind(&mut g);
        let bag = g.constant(rand(4, 4, 15));
        let s = g.input(rand(3, 4, 16));
        let r = reconstruct_histology(&mut g, &p, s, bag, &pt.qmap, &pt.head).unwrap();
        let grads = g.backward(r.loss.unwrap()).unwrap();
        assert!(!g.requires_grad(p[pt.qmap.w]));
        assert!(grads.get(p[pt.qmap.w]).is_none());
        assert!(grads.get(p[pt.head.query.w]).is_some());
    }
}
