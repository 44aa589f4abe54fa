//! Every differentiable op checked against central differences.

use herbs_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.5..1.5))
}

/// Checks d f / d inputs for a scalar-valued `f`.
fn check<F>(inputs: &[Tensor], f: F)
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&vars);
    let grads = tape.backward(out);
    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).item()
    };
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "input {k}[{i}]: analytic {a} numeric {numeric}");
        }
    }
}

fn weights<'t>(x: Var<'t>, seed: u64) -> Var<'t> {
    // Fixed random projection so the scalar output depends on every element.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&x.shape(), &mut rng);
    x.mul(x.tape().constant(w)).sum()
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng);
    let pos = a.map(|x| x.abs() + 0.5);
    check(&[a.clone(), b.clone()], |v| weights(v[0].add(v[1]), 1));
    check(&[a.clone(), b.clone()], |v| weights(v[0].sub(v[1]), 2));
    check(&[a.clone(), b.clone()], |v| weights(v[0].mul(v[1]), 3));
    check(&[a.clone(), pos.clone()], |v| weights(v[0].div(v[1]), 4));
    check(std::slice::from_ref(&a), |v| weights(v[0].neg().scale(0.7).add_scalar(2.0), 5));
    check(std::slice::from_ref(&a), |v| weights(v[0].exp(), 6));
    check(std::slice::from_ref(&pos), |v| weights(v[0].ln(), 7));
    check(std::slice::from_ref(&pos), |v| weights(v[0].powf(-0.5), 8));
    check(std::slice::from_ref(&a), |v| weights(v[0].tanh(), 9));
    check(std::slice::from_ref(&a), |v| weights(v[0].sigmoid(), 10));
    check(std::slice::from_ref(&a), |v| weights(v[0].silu(), 11));
    check(std::slice::from_ref(&a), |v| weights(v[0].gelu(), 12));
    check(&[a], |v| weights(v[0].relu(), 13));
}

#[test]
fn broadcasting_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 4], &mut rng);
    let row = random(&[4], &mut rng);
    let col = random(&[3, 1], &mut rng).map(|x| x.abs() + 0.5);
    check(&[a.clone(), row.clone()], |v| weights(v[0].add(v[1]), 1));
    check(&[a.clone(), row], |v| weights(v[0].mul(v[1]), 2));
    check(&[a.clone(), col.clone()], |v| weights(v[0].div(v[1]), 3));
    check(&[a, col], |v| weights(v[0].sub(v[1]), 4));
}

#[test]
fn reductions_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 3, 4], &mut rng);
    check(std::slice::from_ref(&a), |v| weights(v[0].sum_axis(1), 1));
    check(std::slice::from_ref(&a), |v| weights(v[0].mean_axis(2), 2));
    check(std::slice::from_ref(&a), |v| weights(v[0].mean_axis_keepdim(0), 3));
    check(std::slice::from_ref(&a), |v| v[0].mean());
    check(std::slice::from_ref(&a), |v| weights(v[0].softmax(), 4));
    check(&[a], |v| weights(v[0].log_softmax(), 5));
}

#[test]
fn linear_algebra_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let ba = random(&[2, 3, 4], &mut rng);
    let bb = random(&[2, 4, 5], &mut rng);
    check(&[a, b.clone()], |v| weights(v[0].matmul(v[1]), 1));
    check(&[ba.clone(), bb], |v| weights(v[0].matmul(v[1]), 2));
    check(&[ba.clone(), b], |v| weights(v[0].matmul(v[1]), 3));
    check(std::slice::from_ref(&ba), |v| weights(v[0].permute(&[2, 0, 1]), 4));
    check(std::slice::from_ref(&ba), |v| weights(v[0].t().reshape([8, 3]), 5));
    check(&[ba.clone(), random(&[2, 1, 4], &mut rng)], |v| weights(Var::concat(&[v[0], v[1]], 1), 6));
    check(std::slice::from_ref(&ba), |v| weights(v[0].index_select(1, &[2, 0, 2]), 7));
    check(&[ba], |v| weights(v[0].narrow(2, 1, 2), 8));
}

#[test]
fn convolution_and_resampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 6, 6], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    check(&[x.clone(), w.clone(), b.clone()], |v| weights(v[0].conv2d(v[1], Some(v[2]), 1, 1), 1));
    check(&[x.clone(), w.clone(), b], |v| weights(v[0].conv2d(v[1], Some(v[2]), 2, 1), 2));
    check(&[x.clone(), random(&[2, 3, 4, 4], &mut rng)], |v| weights(v[0].conv2d(v[1], None, 4, 0), 3));
    check(std::slice::from_ref(&x), |v| weights(v[0].upsample_nearest(2), 4));
    check(&[x], |v| weights(v[0].global_avg_pool(), 5));
}
