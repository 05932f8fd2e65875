//! Intra-modal masked self-attention, iterative inter-modal cross-attention,
//! pooling and the risk head.

use rand::Rng;

use crate::autodiff::{Axis, Graph, Result, Var};
use crate::nn::{attend, Bound, Gru, Linear, Mlp, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Self-attention over the selected slots with residual and MLP.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub mlp: Mlp,
}

impl SelfAttentionBlock {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, false, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, false, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, false, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, d, d, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for lin in [self.query, self.key, self.value] {
            v.extend(lin.params());
        }
        v.extend(self.mlp.params());
        v
    }

    fn refine<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let (a, _) = attend(g, q, k, v)?;
        let h = g.add(x, a)?;
        let m = self.mlp.forward(g, p, h)?;
        g.add(h, m)
    }
}

/// Refines the `selected` rows of `slots` by self-attention among themselves;
/// every other row is copied through unchanged.
pub fn masked_self_attention<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    block: &SelfAttentionBlock,
    slots: Var,
    selected: &[usize],
) -> Result<Var> {
    let s = g.shape(slots)[0];
    if selected.len() == s {
        return block.refine(g, p, slots);
    }
    let mut is_selected = vec![false; s];
    for &i in selected {
        is_selected[i] = true;
    }
    let rest: Vec<usize> = (0..s).filter(|&i| !is_selected[i]).collect();
    let picked = g.gather_rows(slots, selected)?;
    let refined = block.refine(g, p, picked)?;
    let untouched = g.gather_rows(slots, &rest)?;
    let stacked = g.concat(&[refined, untouched], Axis::Rows)?;
    // Row `i` of the output lives at position `inverse[i]` of the stack.
    let mut inverse = vec![0; s];
    for (pos, &i) in selected.iter().chain(&rest).enumerate() {
        inverse[i] = pos;
    }
    g.gather_rows(stacked, &inverse)
}

/// The single cross-attention block shared by every fusion iteration and both
/// directions.
#[derive(Clone, Copy, Debug)]
pub struct CrossBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub gru: Gru,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, false, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, false, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, false, rng),
            gru: Gru::new(store, &format!("{name}.gru"), d, d, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, d, d, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for lin in [self.query, self.key, self.value] {
            v.extend(lin.params());
        }
        v.extend(self.gru.params());
        v.extend(self.mlp.params());
        v
    }

    /// Updates `target` from what it reads in `source`.
    pub fn update<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, target: Var, source: Var) -> Result<Var> {
        let q = self.query.forward(g, p, target)?;
        let k = self.key.forward(g, p, source)?;
        let v = self.value.forward(g, p, source)?;
        let (a, _) = attend(g, q, k, v)?;
        let u = self.gru.forward(g, p, target, a)?;
        let m = self.mlp.forward(g, p, u)?;
        g.add(u, m)
    }
}

/// `rounds` simultaneous bidirectional updates; both directions read the
/// previous round's state.
pub fn iterative_cross_attention<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    block: &CrossBlock,
    histology: Var,
    genomic: Var,
    rounds: usize,
) -> Result<(Var, Var)> {
    assert!(rounds >= 1, "cross-attention needs at least one round");
    let (mut h, mut s) = (histology, genomic);
    for _ in 0..rounds {
        let next_h = block.update(g, p, h, s)?;
        let next_s = block.update(g, p, s, h)?;
        (h, s) = (next_h, next_s);
    }
    Ok((h, s))
}

/// `[mean(fused_h ; fused_g) ∥ mean(refined_h) ∥ mean(refined_g)]`, a `1×3d` row.
pub fn pool_concat<F: Scalar>(
    g: &mut Graph<F>,
    fused_h: Var,
    fused_g: Var,
    refined_h: Var,
    refined_g: Var,
) -> Result<Var> {
    let joint = g.concat(&[fused_h, fused_g], Axis::Rows)?;
    let a = g.mean_pool(joint)?;
    let b = g.mean_pool(refined_h)?;
    let c = g.mean_pool(refined_g)?;
    g.concat(&[a, b, c], Axis::Cols)
}

#[derive(Clone, Copy, Debug)]
pub struct RiskHead {
    pub mlp: Mlp,
}

impl RiskHead {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, d: usize, n_bins: usize, rng: &mut R) -> Self {
        Self { mlp: Mlp::new(store, name, 3 * d, d, n_bins, rng) }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, z: Var) -> Result<Var> {
        self.mlp.forward(g, p, z)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_diff_check, Tensor};
    use crate::nn::normal_tensor;

    fn rand(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        normal_tensor(&mut ChaCha8Rng::seed_from_u64(seed), rows, cols, 1.0)
    }

    fn self_block(seed: u64) -> (ParamStore<f64>, SelfAttentionBlock) {
        let mut store = ParamStore::new();
        let b = SelfAttentionBlock::new(&mut store, "sa", 4, &mut ChaCha8Rng::seed_from_u64(seed));
        (store, b)
    }

    #[test]
    fn unselected_rows_pass_through_bitwise() {
        let (store, block) = self_block(1);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = rand(5, 4, 2);
        let xv = g.constant(x.clone());
        let out = masked_self_attention(&mut g, &p, &block, xv, &[1, 3]).unwrap();
        let y = g.value(out);
        for i in [0, 2, 4] {
            assert_eq!(y.row(i), x.row(i));
        }
        assert_ne!(y.row(1), x.row(1));
    }

    #[test]
    fn selected_rows_only_see_each_other() {
        let (store, block) = self_block(3);
        let x = rand(5, 4, 4);
        let mut other = x.clone();
        other.row_mut(0).copy_from_slice(&[9.0, -9.0, 9.0, -9.0]);
        let run = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let v = g.constant(t);
            let out = masked_self_attention(&mut g, &p, &block, v, &[2, 4]).unwrap();
            g.value(out).clone()
        };
        let (a, b) = (run(x), run(other));
        assert_eq!(a.row(2), b.row(2));
        assert_eq!(a.row(4), b.row(4));
    }

    #[test]
    fn singleton_selection_attends_to_itself() {
        let (store, block) = self_block(5);
        let x = rand(3, 4, 6);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = masked_self_attention(&mut g, &p, &block, xv, &[1]).unwrap();
        let own = g.constant(x.select_rows(&[1]));
        let v = block.value.forward(&mut g, &p, own).unwrap();
        let h = g.add(own, v).unwrap();
        let m = block.mlp.forward(&mut g, &p, h).unwrap();
        let expect = g.add(h, m).unwrap();
        assert_eq!(g.value(out).row(1), g.value(expect).row(0));
    }

    #[test]
    fn full_selection_is_plain_self_attention() {
        let (store, block) = self_block(7);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(rand(4, 4, 8));
        let a = masked_self_attention(&mut g, &p, &block, xv, &[0, 1, 2, 3]).unwrap();
        let b = block.refine(&mut g, &p, xv).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    fn cross_block(seed: u64) -> (ParamStore<f64>, CrossBlock) {
        let mut store = ParamStore::new();
        let b = CrossBlock::new(&mut store, "cross", 4, &mut ChaCha8Rng::seed_from_u64(seed));
        (store, b)
    }

    #[test]
    fn identical_inputs_fuse_identically() {
        let (store, block) = cross_block(9);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(rand(3, 4, 10));
        let (h, s) = iterative_cross_attention(&mut g, &p, &block, x, x, 3).unwrap();
        for (a, b) in g.value(h).data().iter().zip(g.value(s).data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn one_round_is_one_bidirectional_update() {
        let (store, block) = cross_block(11);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let h = g.constant(rand(3, 4, 12));
        let s = g.constant(rand(2, 4, 13));
        let (fh, fs) = iterative_cross_attention(&mut g, &p, &block, h, s, 1).unwrap();
        let eh = block.update(&mut g, &p, h, s).unwrap();
        let es = block.update(&mut g, &p, s, h).unwrap();
        assert_eq!(g.value(fh), g.value(eh));
        assert_eq!(g.value(fs), g.value(es));
    }

    #[test]
    fn pooled_embedding_of_constants() {
        let mut g = Graph::<f64>::new();
        let v = [0.5, -1.0, 2.0];
        let c = |g: &mut Graph<f64>, n| g.constant(Tensor::from_rows(&vec![v; n]));
        let (a, b, x, y) = (c(&mut g, 2), c(&mut g, 3), c(&mut g, 4), c(&mut g, 1));
        let z = pool_concat(&mut g, a, b, x, y).unwrap();
        assert_eq!(g.value(z).data(), &[v, v, v].concat()[..]);
    }

    #[test]
    fn pooled_embedding_ignores_slot_order() {
        let parts: Vec<Tensor<f64>> = (0..4).map(|i| rand(3, 2, 20 + i)).collect();
        let run = |perm: &[usize]| {
            let mut g = Graph::new();
            let v: Vec<Var> = parts.iter().map(|t| g.constant(t.select_rows(perm))).collect();
            let z = pool_concat(&mut g, v[0], v[1], v[2], v[3]).unwrap();
            g.value(z).clone()
        };
        let (a, b) = (run(&[0, 1, 2]), run(&[2, 0, 1]));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_risk_head_gives_zero_logits() {
        let mut store = ParamStore::<f64>::new();
        let head = RiskHead::new(&mut store, "risk", 4, 4, &mut ChaCha8Rng::seed_from_u64(0));
        for id in store.ids().collect::<Vec<_>>() {
            let [r, c] = store.get(id).value.shape();
            *store.value_mut(id) = Tensor::zeros(r, c);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let z = g.constant(rand(1, 12, 1));
        let y = head.forward(&mut g, &p, z).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn end_to_end_fusion_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut store = ParamStore::<f64>::new();
        let sa_h = SelfAttentionBlock::new(&mut store, "sa_h", 4, &mut rng);
        let sa_g = SelfAttentionBlock::new(&mut store, "sa_g", 4, &mut rng);
        let cross = CrossBlock::new(&mut store, "cross", 4, &mut rng);
        let head = RiskHead::new(&mut store, "risk", 4, 3, &mut rng);
        let err = finite_diff_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let p = store.bind(g);
                let bh = masked_self_attention(g, &p, &sa_h, v[0], &[0, 2])?;
                let bg = masked_self_attention(g, &p, &sa_g, v[1], &[1])?;
                let (fh, fg) = iterative_cross_attention(g, &p, &cross, v[0], v[1], 2)?;
                let z = pool_concat(g, fh, fg, bh, bg)?;
                let y = head.forward(g, &p, z)?;
                let w = g.constant(Tensor::from_rows(&[[0.7, -1.1, 0.4]]));
                let y = g.mul(y, w)?;
                g.sum(y)
            },
            &[rand(3, 4, 31), rand(2, 4, 32)],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err:e}");
    }

    #[test]
    fn interaction_cost_depends_only_on_slot_counts() {
        // The block only ever sees slots, so its count is fixed by S and d.
        let (store, block) = cross_block(40);
        let count = |s_h, s_g| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let h = g.constant(rand(s_h, 4, 1));
            let s = g.constant(rand(s_g, 4, 2));
            iterative_cross_attention(&mut g, &p, &block, h, s, 3).unwrap();
            g.macs()
        };
        assert_eq!(count(3, 2), count(3, 2));
        assert!(count(4, 4) > count(3, 2));
    }
}
