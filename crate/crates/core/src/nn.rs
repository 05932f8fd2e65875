//! Named parameter storage and the dense building blocks shared by every
//! model component.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, GruVars, Result, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub trainable: bool,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a graph leaf. Frozen parameters become
    /// constants and never receive a gradient.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| if p.trainable { g.input(p.value.clone()) } else { g.constant(p.value.clone()) })
                .collect(),
        )
    }

    /// Converts every tensor to another scalar width.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
        }
    }
}

/// Graph variables for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Binding over caller-supplied variables, one per parameter in store
    /// order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

pub fn normal_tensor<F: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor<F> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::lit(z * std)
        })
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Uniform Glorot initialization.
pub fn glorot<F: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| F::lit(rng.random_range(-limit..limit))).collect();
    Tensor::from_vec(fan_in, fan_out, data).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, d_in, d_out), true);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, d_out), true));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], self.b.map(|b| p[b]))
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// One hidden layer with relu.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, d_hidden, true, rng),
            out: Linear::new(store, &format!("{name}.out"), d_hidden, d_out, true, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, p, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.hidden.params();
        v.extend(self.out.params());
        v
    }
}

/// Layer norm followed by a learnable per-feature gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(1, width, F::one()), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, width), true),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let s = g.mul_row(n, p[self.gain])?;
        g.add_row(s, p[self.bias])
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b_x: ParamId,
    pub b_h: ParamId,
}

impl Gru {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_x: store.add(format!("{name}.w_x"), glorot(rng, d_in, 3 * width), true),
            w_h: store.add(format!("{name}.w_h"), glorot(rng, width, 3 * width), true),
            b_x: store.add(format!("{name}.b_x"), Tensor::zeros(1, 3 * width), true),
            b_h: store.add(format!("{name}.b_h"), Tensor::zeros(1, 3 * width), true),
        }
    }

    /// New hidden state from `hidden` and `input`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, hidden: Var, input: Var) -> Result<Var> {
        g.gru_cell(input, hidden, GruVars { w_x: p[self.w_x], w_h: p[self.w_h], b_x: p[self.b_x], b_h: p[self.b_h] })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_x, self.w_h, self.b_x, self.b_h]
    }
}

/// `softmax(q kᵀ / √d) · v` with the softmax taken per query row.
pub fn attend<F: Scalar>(g: &mut Graph<F>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = g.shape(q)[1];
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, F::one() / F::from_usize(d).unwrap().sqrt())?;
    let attn = g.row_softmax(logits)?;
    let out = g.matmul(attn, v)?;
    Ok((out, attn))
}
