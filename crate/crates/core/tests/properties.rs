use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scnet_core::eval::iou;
use scnet_core::model::{decode_checkpoint, encode_checkpoint, ParamStore};
use scnet_core::protogen::{background_regions, cosine_kmeans, map_pool, spp_masks, DEFAULT_MAX_ITER};
use scnet_core::tensorcore::{BinaryMask, Tape, Tensor};

fn tensor(h: usize, w: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, h * w * c).prop_map(move |d| Tensor::new(vec![h, w, c], d).unwrap())
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |d| BinaryMask::new(h, w, d).unwrap())
}

/// A feature map with its size and a cluster count that fits it.
fn kmeans_instance() -> impl Strategy<Value = (Tensor, usize, u64)> {
    (1usize..5, 1usize..5, 1usize..6).prop_flat_map(|(h, w, c)| (tensor(h, w, c), 1..=(h * w).min(4), any::<u64>()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn concat_then_slice_recovers_inputs(
        (a, b) in (1usize..4, 1usize..4, 1usize..4, 1usize..4)
            .prop_flat_map(|(h, w, ca, cb)| (tensor(h, w, ca), tensor(h, w, cb)))
    ) {
        let ca = a.shape()[2];
        let cb = b.shape()[2];
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let cat = tape.concat_channels(va, vb).unwrap();
        let left = tape.slice_channels(cat, 0, ca).unwrap();
        let right = tape.slice_channels(cat, ca, ca + cb).unwrap();
        prop_assert_eq!(tape.value(left), &a);
        prop_assert_eq!(tape.value(right), &b);
    }

    #[test]
    fn kmeans_trace_never_increases((features, n, seed) in kmeans_instance()) {
        let r = cosine_kmeans(&features, n, DEFAULT_MAX_ITER, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(!r.objective_trace.is_empty() && r.objective_trace.len() <= DEFAULT_MAX_ITER);
        for pair in r.objective_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12, "trace {:?}", r.objective_trace);
        }
        prop_assert!(r.assignments.iter().all(|&a| a < n));
    }

    #[test]
    fn kmeans_ignores_positive_pixel_scaling(
        ((features, n, seed), scales) in kmeans_instance()
            .prop_flat_map(|inst| {
                let pixels = inst.0.shape()[0] * inst.0.shape()[1];
                (Just(inst), prop::collection::vec(0.01f64..100.0, pixels))
            })
    ) {
        let c = features.shape()[2];
        let mut scaled = features.clone();
        for (p, s) in scales.iter().enumerate() {
            scaled.data_mut()[p * c..(p + 1) * c].iter_mut().for_each(|v| *v *= s);
        }
        let a = cosine_kmeans(&features, n, DEFAULT_MAX_ITER, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = cosine_kmeans(&scaled, n, DEFAULT_MAX_ITER, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn iou_matches_pixel_counting(
        (pred, gt) in (1usize..12, 1usize..12).prop_flat_map(|(h, w)| (mask(h, w), mask(h, w)))
    ) {
        let both = pred.as_slice().iter().zip(gt.as_slice()).filter(|(p, g)| **p && **g).count();
        let either = pred.as_slice().iter().zip(gt.as_slice()).filter(|(p, g)| **p || **g).count();
        let want = if either == 0 { 1.0 } else { both as f64 / either as f64 };
        prop_assert!((iou(&pred, &gt).unwrap() - want).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn background_regions_and_foreground_partition_the_grid(
        (features, fg, n, seed) in (2usize..6, 2usize..6, 1usize..5)
            .prop_flat_map(|(h, w, c)| (tensor(h, w, c), mask(h, w), 1usize..4, any::<u64>()))
    ) {
        prop_assume!(!fg.all());
        let (_, regions) = background_regions(&features, &fg, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(!regions.is_empty());
        for p in 0..fg.len() {
            let owners = regions.iter().filter(|m| m.as_slice()[p]).count() + usize::from(fg.as_slice()[p]);
            prop_assert_eq!(owners, 1);
        }
    }

    #[test]
    fn map_pool_is_the_masked_loop_average(
        (features, m) in (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(h, w, c)| (tensor(h, w, c), mask(h, w)))
    ) {
        prop_assume!(m.any());
        let c = features.shape()[2];
        let proto = map_pool(&features, &m).unwrap();
        for k in 0..c {
            let (mut sum, mut count) = (0.0, 0.0);
            for p in 0..m.len() {
                if m.as_slice()[p] {
                    sum += features.data()[p * c + k];
                    count += 1.0;
                }
            }
            prop_assert!((proto.values[k] - sum / count).abs() < 1e-12);
        }
    }

    #[test]
    fn spp_bins_tile_the_grid(h in 1usize..20, w in 1usize..20, level in 1usize..6) {
        prop_assume!(level <= h.min(w));
        let masks = spp_masks(h, w, level).unwrap();
        prop_assert_eq!(masks.len(), level * level);
        prop_assert!(masks.iter().all(BinaryMask::any));
        for p in 0..h * w {
            prop_assert_eq!(masks.iter().filter(|m| m.as_slice()[p]).count(), 1);
        }
    }

    #[test]
    fn checkpoints_round_trip_bitwise(
        tensors in prop::collection::vec(
            (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(h, w, c)| tensor(h, w, c)),
            1..5,
        ),
        specials in prop::collection::vec(prop::sample::select(vec![0.0, -0.0, f64::MIN_POSITIVE, 1e308, -1e-308]), 1..4),
    ) {
        let mut params = ParamStore::new();
        for (i, t) in tensors.into_iter().enumerate() {
            params.insert(format!("t{i}"), t).unwrap();
        }
        params.insert("specials", Tensor::new(vec![specials.len()], specials).unwrap()).unwrap();
        let bytes = encode_checkpoint(&params).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.len(), params.len());
        for (a, b) in params.iter().zip(back.iter()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.tensor.shape(), b.tensor.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }
}
