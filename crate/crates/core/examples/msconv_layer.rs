//! One multi-scale convolution layer on random primary feature maps: prints
//! every scale pathway's output shape and audits the parameter count.

use mims::msconv::{MsConvConfig, MsConvLayer};
use mims::nn::Mode;
use mims::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mims::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let config = MsConvConfig::default();
    let layer = MsConvLayer::new(&mut store, &mut rng, "msconv", 32, config.clone(), 1.0)?;

    let x = Tensor::from_fn(&[2, 32, 16, 16], |_| rng.random_range(0.0..1.0))?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (maps, bn) = layer.forward(&mut g, &store, xv, Mode::Train)?;

    println!("input [2, 32, 16, 16], N = {} channels", maps.channels);
    for (&(s, _), scale) in config.scales.iter().zip(&maps.maps) {
        for (v, offset) in scale {
            println!("  scale {s:<4} channels {offset:>2}.. -> {:?}", g.value(*v).shape());
        }
    }
    println!(
        "receptive fields: {}, batch statistics recorded: {}",
        config.receptive_field_count(),
        bn.len()
    );
    println!(
        "parameters: {} stored, {} expected",
        store.num_scalars(),
        layer.expected_param_count()
    );
    Ok(())
}
