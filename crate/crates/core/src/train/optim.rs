use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore, Tensor};

/// SGD with momentum; L2 decay is folded into the gradient for parameters
/// the store marks as decaying.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect(),
        }
    }

    /// `v := μv + g + wd·θ; θ := θ − lr·v`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        if grads.params().len() < ids.len() {
            let missing = ids[grads.params().len()];
            return Err(Error::contract(format!("no gradient for parameter {}", store.name(missing))));
        }
        for id in ids {
            let g = grads.param(id);
            let decay = if store.decays(id) { self.weight_decay } else { 0.0 };
            let v = &mut self.velocity[id.index()];
            if g.shape() != v.shape() {
                return Err(Error::contract(format!("gradient shape mismatch for {}", store.name(id))));
            }
            let theta = store.get_mut(id);
            for ((v, &g), t) in v.data_mut().iter_mut().zip(g.data()).zip(theta.data_mut()) {
                *v = self.momentum * *v + g + decay * *t;
                *t -= lr * *v;
            }
        }
        Ok(())
    }
}
