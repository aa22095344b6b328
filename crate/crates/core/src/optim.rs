//! Parameter updates. Both optimizers refuse to touch any parameter unless
//! every parameter carries a gradient, and clear the gradients afterwards.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

fn check_grads(store: &ParamStore) -> Result<()> {
    match store.iter().find(|p| p.grad.is_none()) {
        Some(p) => Err(Error::MissingGrad(p.name.clone())),
        None => Ok(()),
    }
}

pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore) -> Result<()>;
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: Real,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        sgd_step(store, self.lr)
    }
}

pub fn sgd_step(store: &mut ParamStore, lr: Real) -> Result<()> {
    check_grads(store)?;
    for p in store.iter_mut() {
        let g = p.grad.take().expect("checked above");
        let lr = lr * p.lr_scale;
        let data = p.value.data().iter().zip(g.data()).map(|(v, g)| v - lr * g).collect();
        p.value = Tensor::from_parts(p.value.shape().to_vec(), data);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    t: i32,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

impl Adam {
    pub fn new(lr: Real, beta1: Real, beta2: Real, eps: Real) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(1e-3, 0.9, 0.999, 1e-8)
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        check_grads(store)?;
        if self.m.len() != store.len() {
            self.m = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.take().expect("checked above");
            let lr = self.lr * p.lr_scale;
            let mut data = p.value.to_vec();
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.value = Tensor::from_parts(p.value.shape().to_vec(), data);
        }
        Ok(())
    }
}
