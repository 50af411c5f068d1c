//! Algebraic equivalences between the mixing variants:
//! all variants coincide at their canonical initialization, a trained
//! mask-based model can be rewritten as a bilinear one without changing
//! its outputs, the single-vertex layer is an additive layer with the
//! scalar mixing folded into the channel weights, and conjugating the
//! mixing matrix by a vertex permutation permutes the output.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stbln_core::graph::{build_partitions, SkeletonTemplate, PARTITIONS};
use stbln_core::layers::{SpatialVariant, StLayer, StLayerParams, BN_EPS};
use stbln_core::network::{build, LayerSpec, NetworkConfig};
use stbln_core::tape::{Mode, Tape};
use stbln_core::tensor::Tensor;
use stbln_core::training::{train, Dataset, TrainConfig};

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shapes differ: {:?} vs {:?}", a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

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

fn spatial_preact_of(layer: &StLayer, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let h = tape.leaf(x.clone());
    let pre = layer.spatial_preact(&mut tape, h, Mode::Eval).unwrap();
    tape.value(pre).unwrap().clone()
}

fn set_param(layer: &mut StLayer, name: &str, value: &Tensor) {
    for (n, t) in layer.param_refs_mut() {
        if n == name {
            assert_eq!(t.shape(), value.shape(), "{name} shape mismatch");
            *t = value.clone();
            return;
        }
    }
    panic!("layer has no parameter named {name}");
}

/// Additive with zero masks, multiplicative with all-ones masks, and
/// bilinear with the mixing set to the normalized adjacency are the same
/// function of the input when they share channel weights.
#[test]
fn variants_coincide_at_canonical_initialization() {
    let template = chain5();
    let adj = build_partitions(&template).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut additive = StLayer::new(
        StLayerParams::new(3, 4, 5, SpatialVariant::Additive),
        Some(&adj),
        &mut rng,
    )
    .unwrap();
    let mut multiplicative = StLayer::new(
        StLayerParams::new(3, 4, 5, SpatialVariant::Multiplicative),
        Some(&adj),
        &mut rng,
    )
    .unwrap();
    let mut bilinear = StLayer::new(
        StLayerParams::new(3, 4, 5, SpatialVariant::Bilinear),
        Some(&adj),
        &mut rng,
    )
    .unwrap();

    // Canonical starting masks: zeros, ones, and the adjacency itself.
    for p in 0..PARTITIONS {
        set_param(&mut additive, &format!("mask{p}"), &Tensor::zeros(&[5, 5]));
        let ones = Tensor::new(&[5, 5], vec![1.0; 25]).unwrap();
        set_param(&mut multiplicative, &format!("mask{p}"), &ones);
        set_param(&mut bilinear, &format!("mask{p}"), &adj.a_hat[p]);
    }
    // Shared channel weights, copied from the additive layer.
    let shared: Vec<(String, Tensor)> = additive
        .param_refs()
        .into_iter()
        .filter(|(n, _)| n.starts_with("branch"))
        .map(|(n, t)| (n, t.clone()))
        .collect();
    for layer in [&mut multiplicative, &mut bilinear] {
        for (name, value) in &shared {
            set_param(layer, name, value);
        }
    }

    let x = random_input(&mut rng, &[2, 3, 4, 5]);
    let a = spatial_preact_of(&additive, &x);
    let m = spatial_preact_of(&multiplicative, &x);
    let b = spatial_preact_of(&bilinear, &x);
    let dam = max_abs_diff(&a, &m);
    let dab = max_abs_diff(&a, &b);
    assert!(dam < 1e-12, "additive vs multiplicative differ by {dam:e}");
    assert!(dab < 1e-12, "additive vs bilinear differ by {dab:e}");
}

/// After real training steps, rewriting every mask-based layer as a
/// bilinear layer with U := effective mixing reproduces the logits.
#[test]
fn trained_model_converts_to_bilinear_without_changing_logits() {
    let template = chain5();
    let config = NetworkConfig {
        input: (2, 8, 5),
        num_classes: 3,
        temporal_kernel: 3,
        layers: vec![
            LayerSpec { c_out: 4, stride: 1, v_out: 5, variant: SpatialVariant::Additive },
            LayerSpec { c_out: 6, stride: 2, v_out: 5, variant: SpatialVariant::Additive },
        ],
        lambda: None,
        symmetric_rank: None,
        bilinear_init: Default::default(),
    };
    let mut model = build(config, Some(&template), 11).unwrap();

    // A small random training problem; labels are arbitrary, the point
    // is that parameters (masks included) move away from initialization.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 18;
    let data = random_input(&mut rng, &[n, 2, 8, 5]);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let dataset = Dataset::new(data, labels, 3).unwrap();
    let train_cfg = TrainConfig {
        epochs: 3,
        batch_size: 6,
        lr: 0.05,
        lr_drop_epochs: vec![],
        ..TrainConfig::default()
    };
    train(&mut model, &dataset, &dataset, &train_cfg, |_, _| Ok(())).unwrap();

    // Masks must have moved, otherwise the conversion is vacuous.
    let mask_norm: f64 = model
        .param_refs()
        .iter()
        .filter(|(n, _)| n.contains(".mask"))
        .flat_map(|(_, t)| t.data().iter().copied())
        .map(f64::abs)
        .fold(0.0, f64::max)
        ;
    assert!(mask_norm > 1e-6, "training never moved the masks (max |m| = {mask_norm:e})");

    let mut converted = model.to_bilinear().unwrap();
    let probe = random_input(&mut rng, &[4, 2, 8, 5]);
    let original = model.eval_logits(&probe).unwrap();
    let rewritten = converted.eval_logits(&probe).unwrap();
    let diff = max_abs_diff(&original, &rewritten);
    assert!(diff < 1e-10, "conversion changed the logits by {diff:e}");
}

/// On a single vertex the additive layer's mixing matrices are scalars
/// `g_p`, so the whole spatial stage collapses to one channel map with
/// `W = sum_p g_p W_p` and `b = sum_p g_p b_p` — exactly the degenerate
/// layer's single-conv form.
#[test]
fn single_vertex_additive_layer_folds_into_degenerate_form() {
    let single = SkeletonTemplate::new(1, vec![], vec![[0.0, 0.0, 0.0]], 0).unwrap();
    let adj = build_partitions(&single).unwrap();
    // Identity partition normalizes to 1/(1+eps); the empty partitions
    // stay zero.
    let eps = stbln_core::graph::DEGREE_EPS;
    assert!((adj.a_hat[0].at(&[0, 0]) - 1.0 / (1.0 + eps)).abs() < 1e-15);
    assert_eq!(adj.a_hat[1].at(&[0, 0]), 0.0);
    assert_eq!(adj.a_hat[2].at(&[0, 0]), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut additive = StLayer::new(
        StLayerParams::new(3, 4, 1, SpatialVariant::Additive),
        Some(&adj),
        &mut rng,
    )
    .unwrap();
    for p in 0..PARTITIONS {
        let m = Tensor::new(&[1, 1], vec![rng.random::<f64>() - 0.5]).unwrap();
        set_param(&mut additive, &format!("mask{p}"), &m);
        let b = Tensor::new(&[4], (0..4).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        set_param(&mut additive, &format!("branch{p}.bias"), &b);
    }

    // Fold the scalar mixings into one weight/bias pair.
    let mut w_fold = Tensor::zeros(&[4, 3, 1, 1]);
    let mut b_fold = Tensor::zeros(&[4]);
    for p in 0..PARTITIONS {
        let g = additive.effective_mixing(p).unwrap().at(&[0, 0]);
        let refs = additive.param_refs();
        let w = &refs.iter().find(|(n, _)| n == &format!("branch{p}.weight")).unwrap().1;
        let b = &refs.iter().find(|(n, _)| n == &format!("branch{p}.bias")).unwrap().1;
        for (o, x) in w_fold.data_mut().iter_mut().zip(w.data()) {
            *o += g * x;
        }
        for (o, x) in b_fold.data_mut().iter_mut().zip(b.data()) {
            *o += g * x;
        }
    }

    let mut degenerate = StLayer::new(
        StLayerParams::new(3, 4, 1, SpatialVariant::Bilinear),
        None,
        &mut rng,
    )
    .unwrap();
    assert!(degenerate.is_degenerate());
    set_param(&mut degenerate, "branch0.weight", &w_fold);
    set_param(&mut degenerate, "branch0.bias", &b_fold);

    let x = random_input(&mut rng, &[2, 3, 6, 1]);
    let full = spatial_preact_of(&additive, &x);
    let folded = spatial_preact_of(&degenerate, &x);
    let diff = max_abs_diff(&full, &folded);
    assert!(diff < 1e-6, "fold deviates by {diff:e}");
}

/// Relabeling vertices commutes with the spatial stage: running the
/// layer with conjugated mixing on permuted input equals permuting the
/// layer's output.
#[test]
fn spatial_stage_is_equivariant_under_vertex_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let v = 5;
    let perm = [3usize, 0, 4, 1, 2];

    let base = StLayer::new(
        StLayerParams::new(2, 3, v, SpatialVariant::Bilinear),
        None,
        &mut rng,
    )
    .unwrap();
    let mut conjugated = base.clone();
    for p in 0..PARTITIONS {
        let u = base.effective_mixing(p).unwrap();
        let mut pu = Tensor::zeros(&[v, v]);
        for i in 0..v {
            for j in 0..v {
                *pu.at_mut(&[i, j]) = u.at(&[perm[i], perm[j]]);
            }
        }
        set_param(&mut conjugated, &format!("mask{p}"), &pu);
    }

    let x = random_input(&mut rng, &[2, 2, 3, v]);
    let mut x_perm = Tensor::zeros(&[2, 2, 3, v]);
    for n in 0..2 {
        for c in 0..2 {
            for t in 0..3 {
                for i in 0..v {
                    *x_perm.at_mut(&[n, c, t, i]) = x.at(&[n, c, t, perm[i]]);
                }
            }
        }
    }

    let out = {
        let mut tape = Tape::new();
        let h = tape.leaf(x.clone());
        let y = base.spatial_forward(&mut tape, h, Mode::Eval).unwrap();
        tape.value(y).unwrap().clone()
    };
    let out_perm = {
        let mut tape = Tape::new();
        let h = tape.leaf(x_perm.clone());
        let y = conjugated.spatial_forward(&mut tape, h, Mode::Eval).unwrap();
        tape.value(y).unwrap().clone()
    };

    let mut expected = Tensor::zeros(out.shape());
    for n in 0..2 {
        for c in 0..3 {
            for t in 0..3 {
                for i in 0..v {
                    *expected.at_mut(&[n, c, t, i]) = out.at(&[n, c, t, perm[i]]);
                }
            }
        }
    }
    let diff = max_abs_diff(&out_perm, &expected);
    assert!(diff < 1e-12, "permutation equivariance broken by {diff:e}");
}

/// Full composite layer against a composed-by-hand reference: additive
/// mixing with zero masks, identity-like eval batch norm, an identity
/// temporal filter and identity residuals reduce the layer to
/// `relu(relu(s/sqrt(1+eps) + x)/sqrt(1+eps) + x)` with
/// `s = sum_p A_hat_p (W_p x + b_p)`.
#[test]
fn composite_layer_matches_hand_composition_in_the_identity_regime() {
    let template = chain5();
    let adj = build_partitions(&template).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut params = StLayerParams::new(2, 2, 5, SpatialVariant::Additive);
    params.temporal_kernel = 3;
    let mut layer = StLayer::new(params, Some(&adj), &mut rng).unwrap();

    for p in 0..PARTITIONS {
        set_param(&mut layer, &format!("mask{p}"), &Tensor::zeros(&[5, 5]));
    }
    // Identity temporal filter: center tap of each channel's own kernel.
    let mut ident = Tensor::zeros(&[2, 2, 3, 1]);
    *ident.at_mut(&[0, 0, 1, 0]) = 1.0;
    *ident.at_mut(&[1, 1, 1, 0]) = 1.0;
    set_param(&mut layer, "temporal.weight", &ident);
    set_param(&mut layer, "temporal.bias", &Tensor::zeros(&[2]));

    let x = random_input(&mut rng, &[2, 2, 4, 5]);
    let got = {
        let mut tape = Tape::new();
        let h = tape.leaf(x.clone());
        let mut binds = Vec::new();
        let y = layer.forward(&mut tape, h, Mode::Eval, &mut binds).unwrap();
        tape.value(y).unwrap().clone()
    };

    // Hand composition with plain loops.
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (name, t) in layer.param_refs() {
        if name.starts_with("branch") && name.ends_with(".weight") {
            weights.push(t.clone());
        }
        if name.starts_with("branch") && name.ends_with(".bias") {
            biases.push(t.clone());
        }
    }
    let mixings: Vec<Tensor> = (0..PARTITIONS).map(|p| layer.effective_mixing(p).unwrap()).collect();
    let s = stbln_testkit::spatial_oracle(&x, &weights, &biases, &mixings).unwrap();
    // Fresh eval batch norm with unit gamma and zero beta scales by
    // 1/sqrt(1 + eps).
    let bn_scale = 1.0 / (1.0 + BN_EPS).sqrt();
    let mut want = Tensor::zeros(s.shape());
    for (o, (sv, xv)) in want.data_mut().iter_mut().zip(s.data().iter().zip(x.data())) {
        let after_spatial = (sv * bn_scale + xv).max(0.0);
        *o = (after_spatial * bn_scale + xv).max(0.0);
    }
    let diff = max_abs_diff(&got, &want);
    assert!(diff < 1e-12, "hand-composed layer deviates by {diff:e}");
}
