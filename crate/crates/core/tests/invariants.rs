use mims::harness::{auroc, pearson};
use mims::nn::{resize_tensor, BnStats};
use mims::{Graph, Real, Tensor};
use proptest::prelude::*;

fn topk(values: &[Real], w: &[Real]) -> Real {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(values.to_vec()).unwrap());
    let w = g.constant(Tensor::from_vec(w.to_vec()).unwrap());
    let y = g.topk_pool(&[x], w).unwrap();
    g.value(y).item().unwrap()
}

fn simplex(raw: &[Real]) -> Vec<Real> {
    let s: Real = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

proptest! {
    #[test]
    fn topk_ignores_order(
        values in prop::collection::vec(-10.0f32..10.0, 1..40),
        raw in prop::collection::vec(0.01f32..1.0, 1..6),
        seed in any::<u64>(),
    ) {
        let values: Vec<Real> = values.into_iter().map(|v| v as Real).collect();
        let w = simplex(&raw.into_iter().map(|v| v as Real).collect::<Vec<_>>());
        let mut shuffled = values.clone();
        let mut state = seed;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(topk(&values, &w), topk(&shuffled, &w));
    }

    #[test]
    fn topk_lies_between_min_and_max(
        values in prop::collection::vec(-10.0f32..10.0, 1..40),
        raw in prop::collection::vec(0.01f32..1.0, 1..6),
    ) {
        let values: Vec<Real> = values.into_iter().map(|v| v as Real).collect();
        let w = simplex(&raw.into_iter().map(|v| v as Real).collect::<Vec<_>>());
        let y = topk(&values, &w);
        let lo = values.iter().copied().fold(Real::INFINITY, Real::min);
        let hi = values.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        prop_assert!(y >= lo - 1e-4 && y <= hi + 1e-4);
    }

    #[test]
    fn topk_is_monotone_in_every_value(
        values in prop::collection::vec(-10.0f32..10.0, 2..30),
        raw in prop::collection::vec(0.01f32..1.0, 1..6),
        idx in any::<prop::sample::Index>(),
        bump in 0.0f32..5.0,
    ) {
        let values: Vec<Real> = values.into_iter().map(|v| v as Real).collect();
        let w = simplex(&raw.into_iter().map(|v| v as Real).collect::<Vec<_>>());
        let mut raised = values.clone();
        raised[idx.index(values.len())] += bump as Real;
        prop_assert!(topk(&raised, &w) >= topk(&values, &w) - 1e-4);
    }

    #[test]
    fn auroc_is_invariant_to_monotone_maps(
        pairs in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60),
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| p.1 as u8).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let a = auroc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (0.5 * s).exp() + 3.0).collect();
        prop_assert_eq!(a, auroc(&mapped, &labels).unwrap());
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((a + auroc(&flipped, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_bounded_and_symmetric(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..50),
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        if let Some(r) = pearson(&a, &b) {
            prop_assert!(r.abs() <= 1.0 + 1e-12);
            prop_assert_eq!(Some(r), pearson(&b, &a));
        }
    }

    #[test]
    fn train_mode_batchnorm_centers_each_channel(
        b in 1usize..3, c in 1usize..4, h in 2usize..5, w in 2usize..5, seed in any::<u64>(),
    ) {
        let mut state = seed | 1;
        let x = Tensor::from_fn(&[b, c, h, w], |_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 2001) as Real / 1000.0 - 1.0
        }).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::ones(&[c]).unwrap());
        let beta = g.constant(Tensor::zeros(&[c]).unwrap());
        let (y, _) = g.batchnorm(xv, gamma, beta, 0, BnStats::Batch, 1e-5).unwrap();
        let y = g.value(y);
        for ch in 0..c {
            let mut sum = 0.0f64;
            for n in 0..b {
                let start = (n * c + ch) * h * w;
                sum += y.data()[start..start + h * w].iter().map(|&v| v as f64).sum::<f64>();
            }
            prop_assert!((sum / (b * h * w) as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn identity_resize_is_exact(h in 1usize..8, w in 1usize..8, seed in any::<u32>()) {
        let x = Tensor::from_fn(&[1, 2, h, w], |i| ((i as u32).wrapping_mul(2654435761) ^ seed) as Real / u32::MAX as Real).unwrap();
        prop_assert_eq!(resize_tensor(&x, h, w).unwrap(), x);
    }

    #[test]
    fn rtf_round_trips(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
        let x = Tensor::from_fn(&shape, |i| (i as Real) * 0.37 - (seed % 97) as Real).unwrap();
        let bytes = x.to_rtf_bytes();
        let (back, used) = Tensor::from_rtf_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, x);
    }
}
