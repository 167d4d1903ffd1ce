//! Central finite differences, used as an oracle for analytic gradients.
//!
//! Only forward evaluations are used here, so the oracle is independent of
//! every backward rule.

use crate::graph::{Graph, Mask, Var};
use crate::resample::ResampleMode;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Numerical gradient of `f` at `x` by central differences.
pub fn numeric_grad(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.sq_norm().sqrt().max(b.sq_norm().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Deterministic values in `[-2, 2)` from a splitmix64 stream.
fn uniform_tensor(state: &mut u64, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = *state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
    })
}

/// Largest relative error, over all inputs, between the analytic gradient of
/// `sum(build(inputs) * weights)` and its central-difference estimate.
/// `weights` are drawn from `state` so each output element gets a distinct
/// upstream gradient.
pub fn max_relative_error<F>(state: &mut u64, inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let loss = |g: &mut Graph, out: Var, weights: &Tensor| {
        let w = g.constant(weights.clone());
        let p = g.mul(out, w).expect("weights match the output shape");
        g.sum(p)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let weights = uniform_tensor(state, g.value(out).shape());
    let l = loss(&mut g, out, &weights);
    let grads = g.backward(l).expect("scalar loss");

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let numeric = numeric_grad(input, FD_STEP, |probe| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if i == j { probe.clone() } else { t.clone() }))
                .collect();
            let out = build(&mut g, &vars);
            let l = loss(&mut g, out, &weights);
            g.value(l).item().expect("scalar loss")
        });
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Checks every differentiable graph op except `straight_through`, whose
/// gradient is deliberately not the true one, on fixed pseudo-random inputs in
/// `[-2, 2)` and returns `(op, max relative error)` pairs.
pub fn op_suite() -> Vec<(String, f64)> {
    let mut s = 0x5eed_u64;
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, [$($input:expr),*], $build:expr) => {{
            let inputs = vec![$($input.clone()),*];
            let err = max_relative_error(&mut s, &inputs, $build);
            out.push(($name.to_string(), err));
        }};
    }

    let a = uniform_tensor(&mut s, &[3, 4]);
    let b = uniform_tensor(&mut s, &[3, 4]);
    check!("add", [a, b], |g, v| g.add(v[0], v[1]).unwrap());
    check!("sub", [a, b], |g, v| g.sub(v[0], v[1]).unwrap());
    check!("mul", [a, b], |g, v| g.mul(v[0], v[1]).unwrap());
    check!("scale", [a], |g, v| g.scale(v[0], -1.7));
    check!("add_scalar", [a], |g, v| g.add_scalar(v[0], 0.3));
    check!("gelu", [a], |g, v| g.gelu(v[0]));
    check!("sigmoid", [a], |g, v| g.sigmoid(v[0]));
    check!("log_sigmoid", [a], |g, v| g.log_sigmoid(v[0]));
    check!("abs", [a], |g, v| g.abs(v[0]));
    check!("square", [a], |g, v| g.square(v[0]));
    check!("mse", [a, b], |g, v| g.mse(v[0], v[1]).unwrap());
    check!("sum", [a], |g, v| g.sum(v[0]));
    check!("mean", [a], |g, v| g.mean(v[0]));

    let a = uniform_tensor(&mut s, &[3, 5]);
    let b = uniform_tensor(&mut s, &[5, 4]);
    let bt = uniform_tensor(&mut s, &[4, 5]);
    let bias = uniform_tensor(&mut s, &[4]);
    check!("matmul", [a, b], |g, v| g.matmul(v[0], v[1]).unwrap());
    check!("matmul_nt", [a, bt], |g, v| g.matmul_nt(v[0], v[1]).unwrap());
    check!("linear", [a, b, bias], |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap());
    check!("transpose", [a], |g, v| g.transpose(v[0]).unwrap());
    check!("reshape", [a], |g, v| g.reshape(v[0], &[5, 3]).unwrap());
    let m = uniform_tensor(&mut s, &[4, 2, 3]);
    let row = uniform_tensor(&mut s, &[3]);
    check!("add_row_bias", [m, row], |g, v| g.add_row_bias(v[0], v[1]).unwrap());
    check!("add_channel_bias", [m, bias], |g, v| g.add_channel_bias(v[0], v[1]).unwrap());

    let x = uniform_tensor(&mut s, &[3, 6, 5]);
    let w = uniform_tensor(&mut s, &[4, 3, 3, 3]);
    let b = uniform_tensor(&mut s, &[4]);
    let w1 = uniform_tensor(&mut s, &[2, 3, 1, 1]);
    check!("conv2d s1 p1", [x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap());
    check!("conv2d s2 p1", [x, w], |g, v| g.conv2d(v[0], v[1], None, 2, 1).unwrap());
    check!("conv2d 1x1", [x, w1], |g, v| g.conv2d(v[0], v[1], None, 1, 0).unwrap());

    let x = uniform_tensor(&mut s, &[3, 6]);
    let gamma = uniform_tensor(&mut s, &[6]);
    let beta = uniform_tensor(&mut s, &[6]);
    check!("layer_norm", [x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap());
    let m = uniform_tensor(&mut s, &[4, 3, 2]);
    let (gc, bc) = (uniform_tensor(&mut s, &[4]), uniform_tensor(&mut s, &[4]));
    check!("group_norm", [m, gc, bc], |g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-6).unwrap());
    check!("softmax", [x], |g, v| g.softmax(v[0]).unwrap());
    check!("log_softmax", [x], |g, v| g.log_softmax(v[0]).unwrap());
    let allowed: Vec<bool> = (0..18).map(|i| i % 6 <= i / 6 + 2).collect();
    let mask = std::sync::Arc::new(Mask::new(3, 6, allowed).unwrap());
    check!("masked_softmax", [x], |g, v| g.masked_softmax(v[0], &mask, 0.7).unwrap());

    let table = uniform_tensor(&mut s, &[5, 3]);
    check!("embed", [table], |g, v| g.embed(v[0], &[4, 0, 4, 2]).unwrap());
    let x = uniform_tensor(&mut s, &[4, 5]);
    let y = uniform_tensor(&mut s, &[2, 5]);
    let z = uniform_tensor(&mut s, &[4, 2]);
    check!("gather", [x], |g, v| g.gather(v[0], &[1, 4, 0, 1]).unwrap());
    check!("slice_rows", [x], |g, v| g.slice_rows(v[0], 1, 3).unwrap());
    check!("slice_cols", [x], |g, v| g.slice_cols(v[0], 2, 5).unwrap());
    check!("concat_rows", [x, y], |g, v| g.concat_rows(&[v[0], v[1], v[0]]).unwrap());
    check!("concat_cols", [x, z], |g, v| g.concat_cols(&[v[1], v[0]]).unwrap());
    let m = uniform_tensor(&mut s, &[8, 2, 3]);
    check!("depth_to_space", [m], |g, v| g.depth_to_space(v[0], 2).unwrap());
    check!("map_to_tokens", [m], |g, v| g.map_to_tokens(v[0]).unwrap());

    let x = uniform_tensor(&mut s, &[2, 5, 7]);
    for mode in [ResampleMode::Bilinear, ResampleMode::Area, ResampleMode::Nearest] {
        for (h, w) in [(3, 4), (9, 11), (5, 7)] {
            check!(format!("interpolate {mode:?} {h}x{w}"), [x], |g, v| g.interpolate(v[0], h, w, mode).unwrap());
        }
    }

    out
}
