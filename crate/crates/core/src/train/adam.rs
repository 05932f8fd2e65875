use crate::autodiff::Tensor;
use crate::nn::ParamStore;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction. Frozen parameters are left alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub learning_rate: f64,
    pub step: u64,
    pub first: Vec<Tensor<F>>,
    pub second: Vec<Tensor<F>>,
    /// Steps refused because a gradient was not finite.
    pub skipped: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, learning_rate: f64) -> Self {
        let moments: Vec<Tensor<F>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        Self { learning_rate, step: 0, first: moments.clone(), second: moments, skipped: 0 }
    }

    /// Applies one update; returns false, leaving everything untouched, when a
    /// gradient is not finite. `grads` is indexed like the store; `None`
    /// means a zero gradient.
    pub fn apply(&mut self, store: &mut ParamStore<F>, grads: &[Option<Tensor<F>>]) -> bool {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::lit(BETA1), F::lit(BETA2));
        let (one, eps) = (F::one(), F::lit(EPSILON));
        let c1 = one - F::lit(BETA1.powi(t));
        let c2 = one - F::lit(BETA2.powi(t));
        let lr = F::lit(self.learning_rate);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !store.get(id).trainable {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let value = store.value_mut(id);
            for k in 0..value.len() {
                let gk = grads[i].as_ref().map_or(F::zero(), |g| g.data()[k]);
                let mk = b1 * m.data()[k] + (one - b1) * gk;
                let vk = b2 * v.data()[k] + (one - b2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + eps);
                value.data_mut()[k] = value.data()[k] - update;
            }
        }
        true
    }
}
