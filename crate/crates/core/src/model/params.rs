use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorcore::{Tape, Tensor, Var};

/// One trainable tensor with its momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub velocity: Vec<f64>,
    pub trainable: bool,
}

/// Named trainable tensors. Each name appears once; the comparison module's
/// weights are read by both branches through the same entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::config(format!("parameter {name} already exists")));
        }
        let n = tensor.numel();
        let tensor = if tensor.requires_grad() {
            tensor
        } else {
            tensor.with_grad()
        };
        self.params.push(Param {
            name,
            tensor,
            velocity: vec![0.0; n],
            trainable: true,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    /// Marks every parameter whose name starts with `prefix` as (un)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    /// Records every parameter on `tape` as a tracked leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.tensor)).collect()
    }

    /// Adds the tape's gradients for `bound` leaves into the grad buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let (Some(src), Some(dst)) = (tape.grad(v), p.tensor.grad_mut()) {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Sum of squared gradient entries, for diagnostics.
    pub fn grad_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum()
    }
}

/// Classical momentum SGD: `v ← μv + g`, `w ← w − lr·v`, then gradients
/// are zeroed. Untrainable parameters only have their gradients cleared.
pub fn sgd_step(params: &mut ParamStore, lr: f64, momentum: f64) {
    for p in params.iter_mut() {
        if p.trainable {
            let (data, grad) = p.tensor.data_and_grad_mut();
            if let Some(grad) = grad {
                for ((w, v), &g) in data.iter_mut().zip(p.velocity.iter_mut()).zip(grad.iter()) {
                    *v = momentum * *v + g;
                    *w -= lr * *v;
                }
            }
        }
        p.tensor.zero_grad();
    }
}

/// He-uniform conv weight `[k, k, cin, cout]` and a zero bias.
pub(crate) fn conv_init<R: Rng + ?Sized>(k: usize, cin: usize, cout: usize, rng: &mut R) -> (Tensor, Tensor) {
    let fan_in = (k * k * cin) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let n = k * k * cin * cout;
    let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    (
        Tensor::new(vec![k, k, cin, cout], w).expect("sized"),
        Tensor::zeros(vec![cout]),
    )
}
