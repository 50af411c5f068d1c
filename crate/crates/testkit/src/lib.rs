//! Deliberately naive reference implementations used by the test
//! suites to cross-check the optimized library code. Everything here is
//! written as plain scalar loops with no shared code paths into the
//! main crate's kernels, so agreement between the two is meaningful.

use stbln_core::tape::{Mode, OpView, Tape};
use stbln_core::tensor::Tensor;
use stbln_core::network::Model;
use stbln_core::{Error, Result};

/// Scalar reference for the spatial stage: for each branch `p`,
/// a 1x1 channel map plus bias followed by vertex mixing with `G_p`,
/// summed over branches.
///
/// `x` is `[n, ci, t, vi]`, `weights[p]` is `[co, ci, 1, 1]`,
/// `biases[p]` is `[co]`, `mixings[p]` is `[vo, vi]`; the result is
/// `[n, co, t, vo]`.
pub fn spatial_oracle(
    x: &Tensor,
    weights: &[Tensor],
    biases: &[Tensor],
    mixings: &[Tensor],
) -> Result<Tensor> {
    if weights.len() != biases.len() || weights.len() != mixings.len() || weights.is_empty() {
        return Err(Error::Contract("branch lists must be equal-length and non-empty".into()));
    }
    let (n, ci, t, vi) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = weights[0].shape()[0];
    let vo = mixings[0].shape()[0];
    let mut out = Tensor::zeros(&[n, co, t, vo]);
    for p in 0..weights.len() {
        let (w, b, g) = (&weights[p], &biases[p], &mixings[p]);
        for s in 0..n {
            for c_out in 0..co {
                for step in 0..t {
                    for v_out in 0..vo {
                        let mut acc = 0.0;
                        for v_in in 0..vi {
                            let mut conv = b.at(&[c_out]);
                            for c_in in 0..ci {
                                conv += w.at(&[c_out, c_in, 0, 0])
                                    * x.at(&[s, c_in, step, v_in]);
                            }
                            acc += g.at(&[v_out, v_in]) * conv;
                        }
                        *out.at_mut(&[s, c_out, step, v_out]) += acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-entry reference for the degree normalization
/// `a[i][j] / sqrt((deg_i + eps) * (deg_j + eps))` with row-sum degrees.
pub fn normalize_oracle(a: &Tensor, eps: f64) -> Tensor {
    let v = a.shape()[0];
    let mut deg = vec![0.0f64; v];
    for (i, d) in deg.iter_mut().enumerate() {
        for j in 0..v {
            *d += a.at(&[i, j]);
        }
    }
    let mut out = Tensor::zeros(&[v, v]);
    for i in 0..v {
        for j in 0..v {
            *out.at_mut(&[i, j]) =
                a.at(&[i, j]) / ((deg[i] + eps) * (deg[j] + eps)).sqrt();
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method,
/// returned in ascending order.
pub fn jacobi_eigenvalues(m: &Tensor) -> Result<Vec<f64>> {
    if m.rank() != 2 || m.shape()[0] != m.shape()[1] {
        return Err(Error::Contract("eigensolver expects a square matrix".into()));
    }
    let n = m.shape()[0];
    for i in 0..n {
        for j in (i + 1)..n {
            if (m.at(&[i, j]) - m.at(&[j, i])).abs() > 1e-9 {
                return Err(Error::Contract("eigensolver expects a symmetric matrix".into()));
            }
        }
    }
    let mut a: Vec<f64> = m.data().to_vec();
    let idx = |i: usize, j: usize| i * n + j;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[idx(i, j)] * a[idx(i, j)];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[idx(p, q)];
                if apq.abs() < 1e-18 {
                    continue;
                }
                let app = a[idx(p, p)];
                let aqq = a[idx(q, q)];
                // two-sided rotation angle: tan(2 phi) = 2 a_pq / (a_pp - a_qq)
                let phi = 0.5 * (2.0 * apq).atan2(app - aqq);
                let (s, c) = phi.sin_cos();
                for k in 0..n {
                    let akp = a[idx(k, p)];
                    let akq = a[idx(k, q)];
                    a[idx(k, p)] = c * akp + s * akq;
                    a[idx(k, q)] = -s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[idx(p, k)];
                    let aqk = a[idx(q, k)];
                    a[idx(p, k)] = c * apk + s * aqk;
                    a[idx(q, k)] = -s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[idx(i, i)]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    Ok(eig)
}

/// MAC and elementwise totals of an executed tape under the cost
/// convention: matmul/conv/mixing are MACs from operand shapes, every
/// other value-producing op is 1 FLOP per element (pooling per input
/// element), data movement is free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CostTally {
    pub macs: u64,
    pub elementwise: u64,
}

fn numel(shape: &[usize]) -> u64 {
    shape.iter().product::<usize>() as u64
}

/// Accumulates the cost of every operation recorded on a tape.
pub fn tape_cost(tape: &Tape) -> Result<CostTally> {
    let mut tally = CostTally::default();
    for op in tape.ops() {
        let OpView { name, input_shapes, output_shape } = op;
        match name {
            "leaf" | "reshape" | "permute_last2" | "transpose2d" => {}
            "add" | "mul" | "relu" | "batch_norm" | "add_bias" | "softmax_rows" => {
                tally.elementwise += numel(&output_shape);
            }
            "global_avg_pool" | "sum_all" => {
                tally.elementwise += numel(&input_shapes[0]);
            }
            "matmul" => {
                let (m, k) = (input_shapes[0][0], input_shapes[0][1]);
                let n = input_shapes[1][1];
                tally.macs += (m * k * n) as u64;
            }
            "conv2d" => {
                let w = &input_shapes[1];
                let taps = w[1] * w[2] * w[3];
                tally.macs += numel(&output_shape) * taps as u64;
            }
            "mix_last" => {
                let vi = input_shapes[1][1];
                tally.macs += numel(&output_shape) * vi as u64;
            }
            "cross_entropy" => {
                tally.elementwise += numel(&input_shapes[0]);
            }
            other => {
                return Err(Error::Contract(format!("unknown op {other} in cost tally")));
            }
        }
    }
    Ok(tally)
}

/// Runs one eval-mode forward pass at batch 1 with the model's own
/// input size and tallies the executed operations.
pub fn instrumented_forward_cost(model: &mut Model) -> Result<CostTally> {
    let (c, t, v) = model.config().input;
    let batch = Tensor::zeros(&[1, c, t, v]);
    let mut tape = Tape::new();
    let mut binds = Vec::new();
    model.forward(&mut tape, &batch, Mode::Eval, &mut binds)?;
    tape_cost(&tape)
}
