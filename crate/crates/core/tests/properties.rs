use c3net::checkpoint::{Checkpoint, Provenance};
use c3net::control::{fuse_tensors, Fusion};
use c3net::data::{render, sample_concept, ConceptVector, Modality, CONCEPT_DIM, EMPTY};
use c3net::encoders::{contrastive_loss_value, interpolate_batches, mask_payload};
use c3net::eval::{frechet_distance, retrieval_accuracy};
use c3net::rng::rng_from_seed;
use c3net::{Tensor32, Tensor64};
use proptest::prelude::*;

fn permuted(t: &Tensor64, perm: &[usize]) -> Tensor64 {
    let d = t.shape()[1];
    let mut out = Vec::with_capacity(t.len());
    for &i in perm {
        out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor64::new(t.shape().to_vec(), out).unwrap()
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor64 {
    let mut t = Tensor64::randn([n, d], 1.0, &mut rng_from_seed(seed));
    for r in t.data_mut().chunks_mut(d) {
        let s = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= s);
    }
    t
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn sized_permutation(lo: usize, hi: usize) -> impl Strategy<Value = (usize, Vec<usize>)> {
    (lo..hi).prop_flat_map(|n| (Just(n), permutation(n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_loss_ignores_joint_row_order((n, perm) in sized_permutation(2, 12), seed in any::<u64>(), tau in 0.01f64..1.0) {
        let a = unit_rows(n, 6, seed);
        let b = unit_rows(n, 6, seed ^ 1);
        let l0 = contrastive_loss_value(&a, &b, tau).unwrap();
        let l1 = contrastive_loss_value(&permuted(&a, &perm), &permuted(&b, &perm), tau).unwrap();
        prop_assert!((l0 - l1).abs() <= 1e-9 * l0.abs().max(1.0));
    }

    #[test]
    fn retrieval_ignores_joint_row_order((n, perm) in sized_permutation(1, 20), seed in any::<u64>(), k in 1usize..5) {
        let q = unit_rows(n, 5, seed);
        let g = unit_rows(n, 5, seed ^ 7);
        let k = k.min(n);
        let r0 = retrieval_accuracy(&q, &g, k).unwrap();
        let r1 = retrieval_accuracy(&permuted(&q, &perm), &permuted(&g, &perm), k).unwrap();
        prop_assert_eq!(r0, r1);
    }

    #[test]
    fn interpolation_is_row_equivariant_and_order_free(
        (n, perm) in sized_permutation(1, 8),
        seed in any::<u64>(),
        w in proptest::collection::vec(0.05f64..1.0, 3),
        renormalize in any::<bool>(),
    ) {
        let total: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|x| x / total).collect();
        let c: Vec<Tensor64> = (0..3).map(|j| unit_rows(n, 4, seed.wrapping_add(j))).collect();
        let fwd = interpolate_batches(&[&c[0], &c[1], &c[2]], &w, renormalize).unwrap();
        let pc: Vec<Tensor64> = c.iter().map(|t| permuted(t, &perm)).collect();
        let rows = interpolate_batches(&[&pc[0], &pc[1], &pc[2]], &w, renormalize).unwrap();
        prop_assert!(rows.max_abs_diff(&permuted(&fwd, &perm)) <= 1e-12);
        let swapped = interpolate_batches(&[&c[2], &c[0], &c[1]], &[w[2], w[0], w[1]], renormalize).unwrap();
        prop_assert!(swapped.max_abs_diff(&fwd) <= 1e-12);
    }

    #[test]
    fn sum_fusion_is_additive_in_residuals(seed in any::<u64>(), alpha in -2.0f64..2.0, sites in 1usize..4) {
        let mut rng = rng_from_seed(seed);
        let base: Vec<Tensor64> = (0..sites).map(|_| Tensor64::randn([2, 3], 1.0, &mut rng)).collect();
        let r: Vec<Vec<Tensor64>> = (0..2)
            .map(|_| (0..sites).map(|_| Tensor64::randn([2, 3], 1.0, &mut rng)).collect())
            .collect();
        let both = fuse_tensors(&base, &r, alpha, Fusion::Sum).unwrap();
        let one = fuse_tensors(&base, &r[..1], alpha, Fusion::Sum).unwrap();
        let two = fuse_tensors(&base, &r[1..], alpha, Fusion::Sum).unwrap();
        let mean = fuse_tensors(&base, &r, alpha, Fusion::Mean).unwrap();
        for i in 0..sites {
            for k in 0..6 {
                let b = base[i].data()[k];
                let (d1, d2) = (one[i].data()[k] - b, two[i].data()[k] - b);
                prop_assert!((both[i].data()[k] - b - (d1 + d2)).abs() <= 1e-12);
                prop_assert!((mean[i].data()[k] - b - 0.5 * (d1 + d2)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(
        shapes in proptest::collection::vec(proptest::collection::vec(1usize..5, 0..4), 1..6),
        seed in any::<u64>(),
        step in any::<u64>(),
    ) {
        let mut rng = rng_from_seed(seed);
        let mut ck = Checkpoint::new("test", serde_json::json!({"shapes": shapes}), Provenance {
            config_digest: format!("{seed:x}"),
            step,
            stage: "prop".into(),
        });
        let mut tensors = Vec::new();
        for (i, s) in shapes.iter().enumerate() {
            let t32 = Tensor32::randn(s.clone(), 1.0, &mut rng);
            let t64 = Tensor64::randn(s.clone(), 1.0, &mut rng);
            ck.insert(&format!("f32/{i}"), &t32);
            ck.insert(&format!("f64/{i}"), &t64);
            tensors.push((t32, t64));
        }
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back, &ck);
        for (i, (t32, t64)) in tensors.iter().enumerate() {
            let (n32, n64) = (format!("f32/{i}"), format!("f64/{i}"));
            prop_assert!(back.get::<f32>(&n32).unwrap().bits_eq(t32));
            prop_assert!(back.get::<f64>(&n64).unwrap().bits_eq(t64));
        }
    }

    #[test]
    fn half_of_the_attribute_tokens_are_emptied(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let c = sample_concept(&mut rng);
        let x = render(Modality::Text, &c, 0);
        let m = mask_payload(&x, 0.5, &mut rng).unwrap();
        let toks = m.sample.payload.as_tokens().unwrap();
        let orig = x.payload.as_tokens().unwrap();
        prop_assert_eq!(m.count(), CONCEPT_DIM / 2);
        prop_assert_eq!(toks.iter().zip(orig).filter(|(a, b)| a != b).count(), CONCEPT_DIM / 2);
        prop_assert!(toks.iter().zip(orig).all(|(a, b)| a == b || *a == EMPTY));
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in any::<u64>(), shift in -1.0f64..1.0) {
        let a = Tensor64::randn([40, 3], 1.0, &mut rng_from_seed(seed));
        let b = Tensor64::randn([40, 3], 1.0, &mut rng_from_seed(seed ^ 3)).map(|x| x + shift);
        let ab = frechet_distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, frechet_distance(&b, &a).unwrap());
        prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn bins_are_quartiles_of_the_unit_interval(v in proptest::array::uniform8(-1.0f64..1.0)) {
        let c = ConceptVector(v);
        for (x, b) in v.iter().zip(c.bins()) {
            prop_assert!(b < 4);
            prop_assert_eq!(b, c3net::data::quantize(*x));
        }
    }
}
