//! Finite-difference verification of tape gradients.
//!
//! The checker replays a user-supplied graph builder on fresh tapes: one
//! analytic run (backward pass), then two perturbed forward runs per
//! checked element for a central difference with step `h`. Non-scalar
//! outputs are contracted against a fixed random projection so that a
//! sign or transposition error cannot cancel out of a plain sum.
//!
//! This module is library code, not test code, because the command-line
//! `gradcheck` subcommand runs the same suite at runtime.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{BnState, Mode, Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step used across the suite.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub name: String,
    /// Relative-error tolerance the case is held to.
    pub tol: f64,
    pub max_rel_err: f64,
    /// Number of scalar derivatives compared.
    pub checked: usize,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }
}

/// Relative error with an absolute floor: components below the floor are
/// compared absolutely, so passing at tolerance `t` means
/// `|a - b| <= t * max(|a|, |b|, FLOOR)` — the usual rtol-plus-atol rule
/// with `atol = t * FLOOR`.
///
/// The floor exists because a difference quotient cannot resolve small
/// derivatives of a large function: the quotient carries irreducible
/// float noise of tens of ulps of the loss over `2h` (~1e-9 absolute for
/// a loss near 10), and some true gradients are tiny or exactly zero — a
/// bias feeding train-mode batch norm shifts a channel uniformly, which
/// the normalization cancels exactly. With a 1e-3 floor the noise reads
/// as at most ~1e-6 relative, inside every tolerance used here, while
/// any physically meaningful defect (a dropped term, a factor slip, a
/// sign flip) still produces absolute errors orders of magnitude above
/// `atol` and is reported at full strength.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = math::abs(a).max(math::abs(b)).max(REL_ERR_FLOOR);
    math::abs(a - b) / scale
}

/// Checks the analytic gradient of `build` with respect to every element
/// of every input against central differences.
///
/// `build` must construct the same graph every call; stateful pieces
/// (batch-norm state) must be created inside the closure so that repeated
/// evaluations start from identical state. `seed` fixes the output
/// projection.
pub fn check_gradient<F>(
    name: &str,
    inputs: &[Tensor],
    tol: f64,
    seed: u64,
    build: &F,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // Probe run: learn the output shape for the projection.
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out)?.shape().to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = out_shape.iter().product();
    let proj_data: Vec<f64> = (0..numel).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let proj = Tensor::new(&out_shape, proj_data)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = if numel == 1 {
            out
        } else {
            let p = tape.leaf(proj.clone());
            let prod = tape.mul(out, p)?;
            tape.sum_all(prod)?
        };
        let v = tape.value(loss)?.data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name}: loss is not finite")));
        }
        Ok(v)
    };

    // Analytic gradients.
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = true;
                tape.leaf(t)
            })
            .collect();
        let out = build(&mut tape, &vars)?;
        let loss = if numel == 1 {
            out
        } else {
            let p = tape.leaf(proj.clone());
            let prod = tape.mul(out, p)?;
            tape.sum_all(prod)?
        };
        let mut grads = tape.backward(loss)?;
        vars.iter()
            .map(|&v| {
                grads.take(v).ok_or_else(|| {
                    Error::Contract(format!("{name}: missing gradient for an input"))
                })
            })
            .collect::<Result<_>>()?
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, base) in inputs.iter().enumerate() {
        for e in 0..base.numel() {
            let orig = base.data()[e];
            work[i].data_mut()[e] = orig + FD_STEP;
            let fp = eval(&work)?;
            work[i].data_mut()[e] = orig - FD_STEP;
            let fm = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let re = rel_err(analytic[i].data()[e], fd);
            if re > max_rel {
                max_rel = re;
            }
            checked += 1;
        }
    }
    Ok(FdReport { name: String::from(name), tol, max_rel_err: max_rel, checked })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Random values with `min_abs <= |x| <= max_abs`, keeping inputs away
/// from non-differentiable kinks (relu at zero).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64, max_abs: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
            sign * (min_abs + (max_abs - min_abs) * rng.random::<f64>())
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// The standard per-operation gradient suite: every differentiable tape
/// operation on small random tensors, plus a composite chain that runs
/// spatial mixing, batch norm, temporal convolution, pooling and the
/// classifier loss end to end.
pub fn standard_suite(seed: u64) -> Result<Vec<FdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let tol = 1e-5;
    let bn_tol = 1e-4;

    {
        let a = uniform(&mut rng, &[2, 3], -1.0, 1.0);
        let b = uniform(&mut rng, &[2, 3], -1.0, 1.0);
        out.push(check_gradient("add", &[a.clone(), b.clone()], tol, seed ^ 1, &|t, v| {
            t.add(v[0], v[1])
        })?);
        out.push(check_gradient("mul", &[a, b], tol, seed ^ 2, &|t, v| t.mul(v[0], v[1]))?);
    }
    {
        let a = uniform(&mut rng, &[2, 3], -1.0, 1.0);
        let b = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        out.push(check_gradient("matmul", &[a, b], tol, seed ^ 3, &|t, v| t.matmul(v[0], v[1]))?);
    }
    {
        let x = uniform(&mut rng, &[3, 2], -1.0, 1.0);
        out.push(check_gradient("transpose2d", &[x], tol, seed ^ 4, &|t, v| t.transpose2d(v[0]))?);
    }
    {
        let x = uniform(&mut rng, &[2, 6], -1.0, 1.0);
        out.push(check_gradient("reshape", &[x], tol, seed ^ 5, &|t, v| {
            t.reshape(v[0], &[3, 4])
        })?);
    }
    {
        let x = uniform(&mut rng, &[2, 2, 3, 2], -1.0, 1.0);
        out.push(check_gradient("permute_last2", &[x], tol, seed ^ 6, &|t, v| {
            t.permute_last2(v[0])
        })?);
    }
    {
        let x = away_from_zero(&mut rng, &[2, 5], 0.05, 1.0);
        out.push(check_gradient("relu", &[x], tol, seed ^ 7, &|t, v| t.relu(v[0]))?);
    }
    {
        let x = uniform(&mut rng, &[3, 4], -2.0, 2.0);
        out.push(check_gradient("softmax_rows", &[x], tol, seed ^ 8, &|t, v| {
            t.softmax_rows(v[0])
        })?);
    }
    {
        let x = uniform(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);
        let w = uniform(&mut rng, &[2, 3, 1, 1], -1.0, 1.0);
        out.push(check_gradient("conv2d_1x1", &[x, w], tol, seed ^ 9, &|t, v| {
            t.conv2d(v[0], v[1], 1, 0)
        })?);
    }
    {
        let x = uniform(&mut rng, &[2, 2, 6, 4], -1.0, 1.0);
        let w = uniform(&mut rng, &[3, 2, 3, 1], -1.0, 1.0);
        out.push(check_gradient("conv2d_k3_pad1", &[x, w], tol, seed ^ 10, &|t, v| {
            t.conv2d(v[0], v[1], 1, 1)
        })?);
    }
    {
        let x = uniform(&mut rng, &[1, 2, 7, 3], -1.0, 1.0);
        let w = uniform(&mut rng, &[2, 2, 3, 1], -1.0, 1.0);
        out.push(check_gradient("conv2d_k3_stride2", &[x, w], tol, seed ^ 11, &|t, v| {
            t.conv2d(v[0], v[1], 2, 1)
        })?);
    }
    {
        let x = uniform(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let w = uniform(&mut rng, &[2, 2, 1, 4], -1.0, 1.0);
        out.push(check_gradient("conv2d_full_vertex", &[x, w], tol, seed ^ 12, &|t, v| {
            t.conv2d(v[0], v[1], 1, 0)
        })?);
    }
    {
        let x = uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let b = uniform(&mut rng, &[3], -1.0, 1.0);
        out.push(check_gradient("add_bias_4d", &[x, b], tol, seed ^ 13, &|t, v| {
            t.add_bias(v[0], v[1], 1)
        })?);
    }
    {
        let x = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let b = uniform(&mut rng, &[4], -1.0, 1.0);
        out.push(check_gradient("add_bias_2d", &[x, b], tol, seed ^ 14, &|t, v| {
            t.add_bias(v[0], v[1], 1)
        })?);
    }
    {
        let x = uniform(&mut rng, &[2, 2, 3, 2], -1.0, 1.0);
        let gamma = uniform(&mut rng, &[2], 0.5, 1.5);
        let beta = uniform(&mut rng, &[2], -0.5, 0.5);
        out.push(check_gradient(
            "batch_norm_train",
            &[x, gamma, beta],
            bn_tol,
            seed ^ 15,
            &|t, v| {
                let mut state = BnState::new(2);
                t.batch_norm(v[0], v[1], v[2], &mut state, Mode::Train, 0.1, 1e-5)
            },
        )?);
    }
    {
        let x = uniform(&mut rng, &[2, 2, 3, 2], -1.0, 1.0);
        let gamma = uniform(&mut rng, &[2], 0.5, 1.5);
        let beta = uniform(&mut rng, &[2], -0.5, 0.5);
        out.push(check_gradient(
            "batch_norm_eval",
            &[x, gamma, beta],
            tol,
            seed ^ 16,
            &|t, v| {
                let mut state = BnState::new(2);
                state.running_mean = alloc::vec![0.3, -0.2];
                state.running_var = alloc::vec![1.7, 0.6];
                t.batch_norm(v[0], v[1], v[2], &mut state, Mode::Eval, 0.1, 1e-5)
            },
        )?);
    }
    {
        let x = uniform(&mut rng, &[2, 2, 3, 4], -1.0, 1.0);
        let g = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        out.push(check_gradient("mix_last", &[x, g], tol, seed ^ 17, &|t, v| {
            t.mix_last(v[0], v[1])
        })?);
    }
    {
        let x = uniform(&mut rng, &[2, 3, 2, 3], -1.0, 1.0);
        out.push(check_gradient("global_avg_pool", &[x], tol, seed ^ 18, &|t, v| {
            t.global_avg_pool(v[0])
        })?);
    }
    {
        let x = uniform(&mut rng, &[4, 3], -2.0, 2.0);
        out.push(check_gradient("cross_entropy", &[x], tol, seed ^ 19, &|t, v| {
            t.cross_entropy(v[0], &[0, 2, 1, 1])
        })?);
    }
    {
        // Composite chain: channel conv + bias + batch norm + relu +
        // vertex mixing + strided temporal conv + pool + classifier.
        let x = uniform(&mut rng, &[2, 3, 6, 4], -1.0, 1.0);
        let w1 = uniform(&mut rng, &[4, 3, 1, 1], -0.7, 0.7);
        let b1 = uniform(&mut rng, &[4], -0.2, 0.2);
        let gamma = uniform(&mut rng, &[4], 0.8, 1.2);
        let beta = uniform(&mut rng, &[4], -0.2, 0.2);
        let g = uniform(&mut rng, &[2, 4], -0.8, 0.8);
        let w2 = uniform(&mut rng, &[4, 4, 3, 1], -0.5, 0.5);
        let head = uniform(&mut rng, &[4, 3], -0.9, 0.9);
        out.push(check_gradient(
            "composite_layer_chain",
            &[x, w1, b1, gamma, beta, g, w2, head],
            bn_tol,
            seed ^ 20,
            &|t, v| {
                let mut state = BnState::new(4);
                let c = t.conv2d(v[0], v[1], 1, 0)?;
                let c = t.add_bias(c, v[2], 1)?;
                let c = t.batch_norm(c, v[3], v[4], &mut state, Mode::Train, 0.1, 1e-5)?;
                let c = t.relu(c)?;
                let c = t.mix_last(c, v[5])?;
                let c = t.conv2d(c, v[6], 2, 1)?;
                let p = t.global_avg_pool(c)?;
                let logits = t.matmul(p, v[7])?;
                t.cross_entropy(logits, &[1, 2])
            },
        )?);
    }

    // Full composite layers, one per mixing variant, covering the
    // identity, channel-conv and vertex-conv residual shapes plus the
    // degenerate single-vertex form, each ending in the classifier loss.
    {
        use crate::layers::SpatialVariant::*;
        // same channels, stride 1: both residuals are identity
        out.push(full_layer_case("layer_additive", Additive, (2, 2, 3, 3, 4, 1), 3, bn_tol, &mut rng, seed ^ 21)?);
        // widening channels: both residuals are channel convs
        out.push(full_layer_case("layer_multiplicative", Multiplicative, (2, 3, 3, 3, 4, 1), 3, bn_tol, &mut rng, seed ^ 22)?);
        // stride 2: identity vertex residual, strided channel-conv temporal residual
        out.push(full_layer_case("layer_symmetric", Symmetric, (2, 2, 3, 3, 5, 2), 2, bn_tol, &mut rng, seed ^ 23)?);
        // vertex aggregation: both residuals are vertex convs
        out.push(full_layer_case("layer_bilinear_agg", Bilinear, (2, 3, 4, 1, 4, 1), 4, bn_tol, &mut rng, seed ^ 24)?);
        out.push(degenerate_layer_case("layer_degenerate", bn_tol, &mut rng, seed ^ 25)?);
    }
    Ok(out)
}

/// Builds the whole composite-layer graph for `variant` out of leafed
/// inputs and checks every gradient. `dims` is
/// `(c_in, c_out, v_in, v_out, t, stride)`; `rank` is the symmetric
/// factor width.
fn full_layer_case(
    name: &str,
    variant: crate::layers::SpatialVariant,
    dims: (usize, usize, usize, usize, usize, usize),
    rank: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<FdReport> {
    use crate::layers::SpatialVariant;
    let (ci, co, vi, vo, t_len, stride) = dims;
    let a_hat: Vec<Tensor> = (0..3)
        .map(|p| {
            let mut a = Tensor::zeros(&[vi, vi]);
            for i in 0..vi {
                for j in 0..vi {
                    // fixed, asymmetric, partition-dependent constants
                    *a.at_mut(&[i, j]) =
                        0.2 + 0.1 * p as f64 + 0.05 * i as f64 - 0.04 * j as f64;
                }
            }
            a
        })
        .collect();
    let mask_shape: &[usize] = match variant {
        SpatialVariant::Symmetric => &[vi, rank],
        SpatialVariant::Bilinear => &[vo, vi],
        _ => &[vi, vi],
    };
    let mut inputs = Vec::new();
    inputs.push(uniform(rng, &[2, ci, t_len, vi], -1.0, 1.0));
    for _ in 0..3 {
        inputs.push(uniform(rng, &[co, ci, 1, 1], -0.7, 0.7));
        inputs.push(uniform(rng, &[co], -0.2, 0.2));
        let lo_hi = if variant == SpatialVariant::Multiplicative { (0.5, 1.5) } else { (-0.5, 0.5) };
        inputs.push(uniform(rng, mask_shape, lo_hi.0, lo_hi.1));
    }
    inputs.push(uniform(rng, &[co], 0.8, 1.2)); // gamma_s
    inputs.push(uniform(rng, &[co], -0.2, 0.2)); // beta_s
    inputs.push(uniform(rng, &[co, co, 3, 1], -0.5, 0.5)); // temporal w
    inputs.push(uniform(rng, &[co], -0.2, 0.2)); // temporal b
    inputs.push(uniform(rng, &[co], 0.8, 1.2)); // gamma_t
    inputs.push(uniform(rng, &[co], -0.2, 0.2)); // beta_t
    let res_v_conv = vi != vo || ci != co;
    if res_v_conv {
        if vi == vo {
            inputs.push(uniform(rng, &[co, ci, 1, 1], -0.6, 0.6));
            inputs.push(uniform(rng, &[co], -0.2, 0.2));
        } else {
            inputs.push(uniform(rng, &[co * vo, ci, 1, vi], -0.6, 0.6));
            inputs.push(uniform(rng, &[co * vo], -0.2, 0.2));
        }
    }
    let res_t_conv = vi != vo || ci != co || stride != 1;
    if res_t_conv {
        if vi == vo {
            inputs.push(uniform(rng, &[co, ci, 1, 1], -0.6, 0.6));
            inputs.push(uniform(rng, &[co], -0.2, 0.2));
        } else {
            inputs.push(uniform(rng, &[co * vo, ci, 1, vi], -0.6, 0.6));
            inputs.push(uniform(rng, &[co * vo], -0.2, 0.2));
        }
    }
    inputs.push(uniform(rng, &[co, 3], -0.9, 0.9)); // head
    check_gradient(name, &inputs, tol, seed, &move |t, v| {
        let x = v[0];
        let residual = |t: &mut Tape, w: Var, b: Var, s: usize| -> Result<Var> {
            let c = t.conv2d(x, w, s, 0)?;
            let c = t.add_bias(c, b, 1)?;
            if vi == vo {
                return Ok(c);
            }
            let shape = t.value(c)?.shape().to_vec();
            let c = t.reshape(c, &[shape[0], co, vo, shape[2]])?;
            t.permute_last2(c)
        };
        let mut acc: Option<Var> = None;
        let mut i = 1;
        for p in 0..3 {
            let (w, b, m) = (v[i], v[i + 1], v[i + 2]);
            i += 3;
            let c = t.conv2d(x, w, 1, 0)?;
            let c = t.add_bias(c, b, 1)?;
            let g = match variant {
                SpatialVariant::Bilinear => m,
                SpatialVariant::Multiplicative => {
                    let a = t.leaf(a_hat[p].clone());
                    t.mul(a, m)?
                }
                SpatialVariant::Additive => {
                    let a = t.leaf(a_hat[p].clone());
                    t.add(a, m)?
                }
                SpatialVariant::Symmetric => {
                    let lt = t.transpose2d(m)?;
                    let mm = t.matmul(m, lt)?;
                    let a = t.leaf(a_hat[p].clone());
                    t.add(a, mm)?
                }
            };
            let mixed = t.mix_last(c, g)?;
            acc = Some(match acc {
                None => mixed,
                Some(a) => t.add(a, mixed)?,
            });
        }
        let s = acc.expect("three branches");
        let (gs, bs, wt, bt, gt, bt2) = (v[i], v[i + 1], v[i + 2], v[i + 3], v[i + 4], v[i + 5]);
        i += 6;
        let mut state_s = BnState::new(co);
        let s = t.batch_norm(s, gs, bs, &mut state_s, Mode::Train, 0.1, 1e-5)?;
        let s = if res_v_conv {
            let r = residual(t, v[i], v[i + 1], 1)?;
            i += 2;
            t.add(s, r)?
        } else {
            t.add(s, x)?
        };
        let s = t.relu(s)?;
        let c = t.conv2d(s, wt, stride, 1)?;
        let c = t.add_bias(c, bt, 1)?;
        let mut state_t = BnState::new(co);
        let c = t.batch_norm(c, gt, bt2, &mut state_t, Mode::Train, 0.1, 1e-5)?;
        let c = if res_t_conv {
            let r = residual(t, v[i], v[i + 1], stride)?;
            i += 2;
            t.add(c, r)?
        } else {
            t.add(c, x)?
        };
        let c = t.relu(c)?;
        let p = t.global_avg_pool(c)?;
        let logits = t.matmul(p, v[i])?;
        t.cross_entropy(logits, &[0, 1])
    })
}

/// The degenerate single-vertex layer: one channel conv, no vertex
/// mixing, no vertex residual, channel-conv temporal residual.
fn degenerate_layer_case(
    name: &str,
    tol: f64,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<FdReport> {
    let (ci, co, t_len) = (2, 3, 4);
    let inputs = alloc::vec![
        uniform(rng, &[2, ci, t_len, 1], -1.0, 1.0),
        uniform(rng, &[co, ci, 1, 1], -0.7, 0.7),
        uniform(rng, &[co], -0.2, 0.2),
        uniform(rng, &[co], 0.8, 1.2),
        uniform(rng, &[co], -0.2, 0.2),
        uniform(rng, &[co, co, 3, 1], -0.5, 0.5),
        uniform(rng, &[co], -0.2, 0.2),
        uniform(rng, &[co], 0.8, 1.2),
        uniform(rng, &[co], -0.2, 0.2),
        uniform(rng, &[co, ci, 1, 1], -0.6, 0.6),
        uniform(rng, &[co], -0.2, 0.2),
        uniform(rng, &[co, 3], -0.9, 0.9),
    ];
    check_gradient(name, &inputs, tol, seed, &|t, v| {
        let c = t.conv2d(v[0], v[1], 1, 0)?;
        let c = t.add_bias(c, v[2], 1)?;
        let mut state_s = BnState::new(3);
        let c = t.batch_norm(c, v[3], v[4], &mut state_s, Mode::Train, 0.1, 1e-5)?;
        let c = t.relu(c)?;
        let c = t.conv2d(c, v[5], 1, 1)?;
        let c = t.add_bias(c, v[6], 1)?;
        let mut state_t = BnState::new(3);
        let c = t.batch_norm(c, v[7], v[8], &mut state_t, Mode::Train, 0.1, 1e-5)?;
        let r = t.conv2d(v[0], v[9], 1, 0)?;
        let r = t.add_bias(r, v[10], 1)?;
        let c = t.add(c, r)?;
        let c = t.relu(c)?;
        let p = t.global_avg_pool(c)?;
        let logits = t.matmul(p, v[11])?;
        t.cross_entropy(logits, &[0, 1])
    })
}
