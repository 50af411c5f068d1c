//! Cross-checks of the optimized kernels against deliberately naive
//! scalar references that share no code with the library:
//! the spatial stage against a nested-loop oracle, degree normalization
//! against a per-entry formula, and the analytic cost model against an
//! operation-by-operation count of an actually executed forward pass.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stbln_core::flops::count_model;
use stbln_core::graph::{build_partitions, SkeletonTemplate, DEGREE_EPS, PARTITIONS};
use stbln_core::layers::{SpatialVariant, StLayer, StLayerParams};
use stbln_core::network::{build, LayerSpec, NetworkConfig};
use stbln_core::tape::{Mode, Tape};
use stbln_core::tensor::Tensor;
use stbln_testkit::{instrumented_forward_cost, normalize_oracle, spatial_oracle};

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shapes differ: {:?} vs {:?}", a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// A five-joint chain with distinct distances to the center of gravity,
/// so all three partitions are non-trivial.
fn chain5() -> SkeletonTemplate {
    SkeletonTemplate::new(
        5,
        vec![(0, 1), (1, 2), (2, 3), (3, 4)],
        vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.2, 0.0],
            [2.0, 0.0, 0.1],
            [3.0, -0.2, 0.0],
            [4.0, 0.0, 0.0],
        ],
        2,
    )
    .unwrap()
}

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn spatial_stage_matches_scalar_oracle_for_every_variant() {
    let template = chain5();
    let adj = build_partitions(&template).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for variant in [
        SpatialVariant::Multiplicative,
        SpatialVariant::Additive,
        SpatialVariant::Symmetric,
        SpatialVariant::Bilinear,
    ] {
        let params = StLayerParams::new(3, 4, 5, variant);
        let layer = StLayer::new(params, Some(&adj), &mut rng).unwrap();
        let x = random_input(&mut rng, &[2, 3, 4, 5]);

        let mut tape = Tape::new();
        let h = tape.leaf(x.clone());
        let pre = layer.spatial_preact(&mut tape, h, Mode::Eval).unwrap();
        let got = tape.value(pre).unwrap().clone();

        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut mixings = Vec::new();
        for (name, t) in layer.param_refs() {
            if name.ends_with(".weight") && name.starts_with("branch") {
                weights.push(t.clone());
            }
            if name.ends_with(".bias") && name.starts_with("branch") {
                biases.push(t.clone());
            }
        }
        for p in 0..PARTITIONS {
            mixings.push(layer.effective_mixing(p).unwrap());
        }
        let want = spatial_oracle(&x, &weights, &biases, &mixings).unwrap();
        let diff = max_abs_diff(&got, &want);
        assert!(diff < 1e-10, "{} deviates from the oracle by {diff:e}", variant.name());
    }
}

#[test]
fn vertex_aggregation_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut params = StLayerParams::new(4, 3, 8, SpatialVariant::Bilinear);
    params.v_out = 1;
    let layer = StLayer::new(params, None, &mut rng).unwrap();
    let x = random_input(&mut rng, &[2, 4, 5, 8]);

    let mut tape = Tape::new();
    let h = tape.leaf(x.clone());
    let pre = layer.spatial_preact(&mut tape, h, Mode::Eval).unwrap();
    let got = tape.value(pre).unwrap().clone();
    assert_eq!(got.shape(), &[2, 3, 5, 1]);

    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut mixings = Vec::new();
    for (name, t) in layer.param_refs() {
        if name.ends_with(".weight") && name.starts_with("branch") {
            weights.push(t.clone());
        }
        if name.ends_with(".bias") && name.starts_with("branch") {
            biases.push(t.clone());
        }
    }
    for p in 0..PARTITIONS {
        mixings.push(layer.effective_mixing(p).unwrap());
    }
    let want = spatial_oracle(&x, &weights, &biases, &mixings).unwrap();
    let diff = max_abs_diff(&got, &want);
    assert!(diff < 1e-10, "aggregating layer deviates from the oracle by {diff:e}");
}

#[test]
fn degree_normalization_matches_per_entry_oracle() {
    // Built-in skeleton: every partition of the real graph.
    let adj = build_partitions(&SkeletonTemplate::builtin25()).unwrap();
    for p in 0..PARTITIONS {
        let want = normalize_oracle(&adj.a[p], DEGREE_EPS);
        let diff = max_abs_diff(&adj.a_hat[p], &want);
        assert!(diff < 1e-14, "partition {p} deviates by {diff:e}");
    }

    // Random non-negative matrices, including zero rows.
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for trial in 0..10 {
        let v = 2 + (trial % 5);
        let mut a = Tensor::zeros(&[v, v]);
        for e in a.data_mut() {
            let x: f64 = rng.random();
            *e = if x < 0.3 { 0.0 } else { 2.0 * x };
        }
        // Force one zero row to exercise the eps floor.
        for j in 0..v {
            *a.at_mut(&[0, j]) = 0.0;
        }
        let got = stbln_core::graph::normalize(&a, DEGREE_EPS).unwrap();
        let want = normalize_oracle(&a, DEGREE_EPS);
        let diff = max_abs_diff(&got, &want);
        assert!(diff < 1e-14, "trial {trial} deviates by {diff:e}");
    }

    // Random binary matrices at full skeleton size.
    for trial in 0..10 {
        let v = 25;
        let mut a = Tensor::zeros(&[v, v]);
        for e in a.data_mut() {
            *e = if rng.random::<f64>() < 0.2 { 1.0 } else { 0.0 };
        }
        let got = stbln_core::graph::normalize(&a, DEGREE_EPS).unwrap();
        let want = normalize_oracle(&a, DEGREE_EPS);
        let diff = max_abs_diff(&got, &want);
        assert!(diff < 1e-14, "binary trial {trial} deviates by {diff:e}");
    }
}

#[test]
fn normalization_of_a_symmetric_matrix_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for _ in 0..5 {
        let v = 6;
        let mut a = Tensor::zeros(&[v, v]);
        for i in 0..v {
            for j in i..v {
                let x = if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 };
                *a.at_mut(&[i, j]) = x;
                *a.at_mut(&[j, i]) = x;
            }
        }
        let out = stbln_core::graph::normalize(&a, DEGREE_EPS).unwrap();
        let mut worst = 0.0f64;
        for i in 0..v {
            for j in 0..v {
                worst = worst.max((out.at(&[i, j]) - out.at(&[j, i])).abs());
            }
        }
        assert!(worst < 1e-15, "asymmetry {worst:e}");
    }
}

#[test]
fn directed_partitions_cover_the_undirected_adjacency_exactly() {
    let template = SkeletonTemplate::builtin25();
    let adj = build_partitions(&template).unwrap();
    let v = template.num_joints();
    let mut undirected = Tensor::zeros(&[v, v]);
    for &(i, j) in template.edges() {
        *undirected.at_mut(&[i, j]) = 1.0;
        *undirected.at_mut(&[j, i]) = 1.0;
    }
    for i in 0..v {
        for j in 0..v {
            if i == j {
                continue;
            }
            let sum = adj.a[1].at(&[i, j]) + adj.a[2].at(&[i, j]);
            assert_eq!(
                sum,
                undirected.at(&[i, j]),
                "off-diagonal ({i},{j}) not covered exactly once"
            );
        }
    }
}

fn desk_config(variant: SpatialVariant) -> NetworkConfig {
    NetworkConfig {
        input: (2, 6, 5),
        num_classes: 3,
        temporal_kernel: 3,
        layers: vec![
            LayerSpec { c_out: 3, stride: 1, v_out: 5, variant },
            LayerSpec { c_out: 4, stride: 2, v_out: 5, variant },
        ],
        lambda: None,
        symmetric_rank: None,
        bilinear_init: Default::default(),
    }
}

fn aggregating_config() -> NetworkConfig {
    NetworkConfig {
        input: (2, 6, 5),
        num_classes: 3,
        temporal_kernel: 3,
        layers: vec![
            LayerSpec { c_out: 3, stride: 1, v_out: 5, variant: SpatialVariant::Additive },
            LayerSpec { c_out: 4, stride: 1, v_out: 1, variant: SpatialVariant::Bilinear },
            LayerSpec { c_out: 4, stride: 2, v_out: 1, variant: SpatialVariant::Bilinear },
        ],
        lambda: None,
        symmetric_rank: None,
        bilinear_init: Default::default(),
    }
}

#[test]
fn analytic_cost_model_equals_executed_operation_count() {
    let template = chain5();
    let mut configs: Vec<(String, NetworkConfig)> = Vec::new();
    for variant in [
        SpatialVariant::Multiplicative,
        SpatialVariant::Additive,
        SpatialVariant::Symmetric,
        SpatialVariant::Bilinear,
    ] {
        configs.push((variant.name().to_string(), desk_config(variant)));
    }
    configs.push(("aggregating".to_string(), aggregating_config()));
    let mut low_rank = desk_config(SpatialVariant::Symmetric);
    low_rank.symmetric_rank = Some(2);
    configs.push(("symmetric_rank2".to_string(), low_rank));

    for (label, config) in configs {
        config.validate().unwrap();
        let report = count_model(&config).unwrap();
        let mut model = build(config.clone(), Some(&template), 7).unwrap();
        let executed = instrumented_forward_cost(&mut model).unwrap();
        assert_eq!(
            report.macs(),
            executed.macs,
            "{label}: analytic MACs {} != executed {}",
            report.macs(),
            executed.macs
        );
        assert_eq!(
            report.elementwise(),
            executed.elementwise,
            "{label}: analytic elementwise {} != executed {}",
            report.elementwise(),
            executed.elementwise
        );
        assert_eq!(
            report.params(),
            model.param_count() as u64,
            "{label}: analytic params differ from the built model"
        );
    }
}
