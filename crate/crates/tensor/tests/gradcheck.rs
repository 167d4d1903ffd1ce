//! Analytic gradients of every differentiable op against central finite
//! differences (step 1e-5) on random inputs in [-2, 2].

use hvsr_tensor::gradcheck::{numeric_grad, op_suite, relative_error, FD_STEP};
use hvsr_tensor::{Graph, ResampleMode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-2.0..2.0))
}

/// Weighted sum of the op output so every output element gets a distinct
/// upstream gradient.
fn weighted_loss(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

fn check<F>(name: &str, inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let weights = rand_tensor(&mut rng, g.value(out).shape());
    let loss = weighted_loss(&mut g, out, &weights);
    let grads = g.backward(loss).unwrap();

    for (i, input) in inputs.iter().enumerate() {
        let numeric = numeric_grad(input, FD_STEP, |probe| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if i == j { probe.clone() } else { t.clone() }))
                .collect();
            let out = build(&mut g, &vars);
            let l = weighted_loss(&mut g, out, &weights);
            g.value(l).item().unwrap()
        });
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let err = relative_error(&analytic, &numeric);
        assert!(err < TOL, "{name}: input {i} relative error {err:e}");
    }
}

#[test]
fn every_op_matches_finite_differences() {
    let results = op_suite();
    assert!(results.len() >= 40);
    for (name, err) in results {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn straight_through_passes_upstream_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = rand_tensor(&mut rng, &[6]);
    let r = rand_tensor(&mut rng, &[6]);
    let up = rand_tensor(&mut rng, &[6]);
    let mut g = Graph::new();
    let (zv, rv) = (g.input(z), g.input(r.clone()));
    let q = g.straight_through(zv, rv).unwrap();
    assert_eq!(g.value(q), &r);
    let loss = weighted_loss(&mut g, q, &up);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(zv).unwrap(), &up);
    assert!(grads.get(rv).is_none());
}

#[test]
fn composite_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = rand_tensor(&mut rng, &[2, 6, 6]);
    let w = rand_tensor(&mut rng, &[4, 2, 3, 3]);
    let proj = rand_tensor(&mut rng, &[4, 3]);
    let gamma = rand_tensor(&mut rng, &[4]);
    let beta = rand_tensor(&mut rng, &[4]);
    check("composite", vec![img, w, proj, gamma, beta], |g, v| {
        let h = g.conv2d(v[0], v[1], None, 2, 1).unwrap();
        let h = g.group_norm(h, 2, v[3], v[4], 1e-6).unwrap();
        let h = g.gelu(h);
        let h = g.interpolate(h, 5, 5, ResampleMode::Bilinear).unwrap();
        let t = g.map_to_tokens(h).unwrap();
        let t = g.matmul(t, v[2]).unwrap();
        let s = g.log_softmax(t).unwrap();
        g.gather(s, &[0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0]).unwrap()
    });
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[3, 8, 8]);
        let w = rand_tensor(&mut rng, &[5, 3, 3, 3]);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x), g.input(w));
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = g.gelu(y);
        let l = g.mean(y);
        let grads = g.backward(l).unwrap();
        (g.value(l).clone(), grads.get(wv).unwrap().clone(), grads.get(xv).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data()[0].to_bits(), b.0.data()[0].to_bits());
    assert!(a.1.data().iter().zip(b.1.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.2.data().iter().zip(b.2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
