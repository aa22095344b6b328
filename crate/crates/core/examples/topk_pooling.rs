//! Learns top-k pooling weights on a toy bag task where the positive signal
//! is a handful of strong activations. The weights stay on the simplex.

use mims::mil::TopKPool;
use mims::optim::{Adam, Optimizer};
use mims::{Graph, ParamStore, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

fn main() -> mims::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let pool = TopKPool::new(&mut store, "pool", 5, 1.0)?;
    let bias = store.add("bias", Tensor::scalar(0.0), 1.0)?;
    let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8);
    let noise = Normal::new(0.0 as Real, 1.0).expect("unit variance");
    println!("initial weights {:?}", pool.weights(&store));

    for step in 0..=300 {
        // Positive bags raise four of 60 Gaussian activations, so
        // averaging the top few beats the single maximum.
        let label = rng.random_bool(0.5);
        let mut values: Vec<Real> = (0..60).map(|_| noise.sample(&mut rng)).collect();
        if label {
            for v in values.iter_mut().take(4) {
                *v += 1.5;
            }
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(values)?);
        let pooled = pool.pool(&mut g, &store, &[x])?;
        let b = g.param(&store, bias);
        let logit = g.add(pooled, b)?;
        let loss = g.bce_with_logits(logit, &[label as u8 as Real])?;
        g.backward(loss)?;
        store.accumulate_grads(&g.param_grads())?;
        opt.step(&mut store)?;
        if step % 100 == 0 {
            let w = pool.weights(&store);
            let sum: Real = w.iter().sum();
            println!("step {step:>3}: w = {w:.3?} (sum {sum:.6})");
        }
    }
    Ok(())
}
