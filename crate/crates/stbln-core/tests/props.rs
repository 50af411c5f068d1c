//! Property-based checks: partitioning is invariant under rigid
//! translation of the rest pose, and eval-mode inference treats batch
//! members independently.

use proptest::prelude::*;

use stbln_core::graph::{build_partitions, SkeletonTemplate, PARTITIONS};
use stbln_core::layers::SpatialVariant;
use stbln_core::network::{build, LayerSpec, NetworkConfig};
use stbln_core::tensor::Tensor;

fn chain4_template(pose: &[[f64; 3]]) -> SkeletonTemplate {
    SkeletonTemplate::new(4, vec![(0, 1), (1, 2), (2, 3)], pose.to_vec(), 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Shifting every joint by the same vector leaves the center-of-
    /// gravity distances, and therefore the partition matrices, exactly
    /// unchanged. Four joints on an integer grid keep the mean and every
    /// difference exactly representable, so the invariance is bitwise.
    #[test]
    fn partitioning_is_invariant_under_rigid_translation(
        coords in proptest::collection::vec(-8i32..=8, 12),
        shift in proptest::array::uniform3(-64i32..=64),
    ) {
        let pose: Vec<[f64; 3]> = coords
            .chunks(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        let moved: Vec<[f64; 3]> = pose
            .iter()
            .map(|p| [p[0] + shift[0] as f64, p[1] + shift[1] as f64, p[2] + shift[2] as f64])
            .collect();
        let a = build_partitions(&chain4_template(&pose)).unwrap();
        let b = build_partitions(&chain4_template(&moved)).unwrap();
        for p in 0..PARTITIONS {
            prop_assert_eq!(a.a[p].data(), b.a[p].data(), "partition {} changed", p);
            prop_assert_eq!(a.a_hat[p].data(), b.a_hat[p].data(), "normalized partition {} changed", p);
        }
    }

    /// In eval mode a sample's logits do not depend on what else sits in
    /// the batch.
    #[test]
    fn eval_logits_are_batch_independent(
        raw in proptest::collection::vec(-1.0f64..1.0, 3 * 2 * 6 * 4),
        seed in 0u64..1000,
    ) {
        let template = SkeletonTemplate::new(
            4,
            vec![(0, 1), (1, 2), (2, 3)],
            vec![[0.0, 0.0, 0.0], [1.0, 0.5, 0.0], [2.0, 0.0, 0.0], [3.0, -0.5, 0.0]],
            0,
        )
        .unwrap();
        let config = NetworkConfig {
            input: (2, 6, 4),
            num_classes: 3,
            temporal_kernel: 3,
            layers: vec![
                LayerSpec { c_out: 3, stride: 1, v_out: 4, variant: SpatialVariant::Additive },
                LayerSpec { c_out: 4, stride: 2, v_out: 4, variant: SpatialVariant::Additive },
            ],
            lambda: None,
            symmetric_rank: None,
            bilinear_init: Default::default(),
        };
        let mut model = build(config, Some(&template), seed).unwrap();
        let batch = Tensor::new(&[3, 2, 6, 4], raw.clone()).unwrap();
        let together = model.eval_logits(&batch).unwrap();
        for s in 0..3 {
            let one = Tensor::new(&[1, 2, 6, 4], raw[s * 48..(s + 1) * 48].to_vec()).unwrap();
            let alone = model.eval_logits(&one).unwrap();
            for k in 0..3 {
                let diff = (together.at(&[s, k]) - alone.at(&[0, k])).abs();
                prop_assert!(diff < 1e-12, "sample {} class {} differs by {:e}", s, k, diff);
            }
        }
    }

    /// Two identically seeded builds produce bitwise-identical logits on
    /// the same input.
    #[test]
    fn identically_seeded_models_agree_bitwise(
        raw in proptest::collection::vec(-1.0f64..1.0, 2 * 2 * 6 * 4),
        seed in 0u64..1000,
    ) {
        let template = SkeletonTemplate::new(
            4,
            vec![(0, 1), (1, 2), (2, 3)],
            vec![[0.0, 0.0, 0.0], [1.0, 0.5, 0.0], [2.0, 0.0, 0.0], [3.0, -0.5, 0.0]],
            0,
        )
        .unwrap();
        let config = NetworkConfig {
            input: (2, 6, 4),
            num_classes: 3,
            temporal_kernel: 3,
            layers: vec![LayerSpec {
                c_out: 3,
                stride: 1,
                v_out: 4,
                variant: SpatialVariant::Multiplicative,
            }],
            lambda: None,
            symmetric_rank: None,
            bilinear_init: Default::default(),
        };
        let mut m1 = build(config.clone(), Some(&template), seed).unwrap();
        let mut m2 = build(config, Some(&template), seed).unwrap();
        let batch = Tensor::new(&[2, 2, 6, 4], raw).unwrap();
        let l1 = model_bits(&mut m1, &batch);
        let l2 = model_bits(&mut m2, &batch);
        prop_assert_eq!(l1, l2);
    }
}

fn model_bits(model: &mut stbln_core::network::Model, batch: &Tensor) -> Vec<u64> {
    model
        .eval_logits(batch)
        .unwrap()
        .data()
        .iter()
        .map(|x| x.to_bits())
        .collect()
}
