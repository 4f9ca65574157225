//! Every differentiable op against central differences, in f64.

use afw_tensor::gradcheck::max_relative_error;
use afw_tensor::{finite_diff_grad, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 50;
const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Reduces an arbitrary output to a scalar with fixed pseudo-random
/// weights so every output coordinate matters.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7310).sin() + 0.2).collect();
    let shape = tape.shape(y).to_vec();
    let wv = tape.input(&shape, w)?;
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

fn eval(build: &Build, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let y = build(&mut tape, &vars)?;
    let s = project(&mut tape, y)?;
    Ok(tape.item(s))
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, build: &Build) {
    let mut store = ParamStore::new();
    let ids: Vec<_> =
        inputs.iter().enumerate().map(|(i, t)| store.add(format!("in{i}"), t.clone().with_requires_grad(true)).unwrap()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let y = build(&mut tape, &vars).unwrap();
    let s = project(&mut tape, y).unwrap();
    let grads = tape.backward(s).unwrap();

    for (k, &id) in ids.iter().enumerate() {
        let numeric = finite_diff_grad(
            |x| {
                let mut probe = inputs.clone();
                probe[k] = x.clone();
                eval(build, &probe)
            },
            &inputs[k],
            H,
        )
        .unwrap();
        let zeros = vec![0.0; inputs[k].numel()];
        let analytic = grads.get(id).unwrap_or(&zeros);
        let err = max_relative_error(analytic, numeric.data(), 1e-3);
        assert!(err < TOL, "{name}: input {k} relative error {err:e}");
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in ±[gap, hi] so kinks at zero are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn for_seeds(mut f: impl FnMut(&mut ChaCha8Rng)) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(&mut rng);
    }
}

#[test]
fn linear_algebra() {
    for_seeds(|r| {
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..5));
        check("matmul", vec![uniform(r, &[m, k], -2.0, 2.0), uniform(r, &[k, n], -2.0, 2.0)], &|t, v| t.matmul(v[0], v[1]));
        check("transpose", vec![uniform(r, &[m, k], -2.0, 2.0)], &|t, v| t.transpose(v[0]));
        check("add_row", vec![uniform(r, &[m, n], -2.0, 2.0), uniform(r, &[n], -2.0, 2.0)], &|t, v| t.add_row(v[0], v[1]));
    });
}

#[test]
fn convolution_and_pooling() {
    for_seeds(|r| {
        let (c, o) = (r.random_range(1..4), r.random_range(1..4));
        let (h, w) = (r.random_range(3..7), r.random_range(3..7));
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..2);
        let x = uniform(r, &[2, c, h, w], -1.0, 1.0);
        let k = uniform(r, &[o, c, 3, 3], -1.0, 1.0);
        let b = uniform(r, &[o], -1.0, 1.0);
        check("conv2d", vec![x.clone(), k.clone(), b], &move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad));
        check("conv2d_nobias", vec![x.clone(), k], &move |t, v| t.conv2d(v[0], v[1], None, stride, pad));
        check("global_avg_pool", vec![x], &|t, v| t.global_avg_pool(v[0]));
    });
}

#[test]
fn binary_elementwise() {
    for_seeds(|r| {
        let shape = [r.random_range(1..4), r.random_range(1..5)];
        let a = uniform(r, &shape, -2.0, 2.0);
        let b = uniform(r, &shape, -2.0, 2.0);
        check("add", vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]));
        check("sub", vec![a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]));
        check("mul", vec![a.clone(), b], &|t, v| t.mul(v[0], v[1]));
        let d = away_from_zero(r, &shape, 0.5, 2.0);
        check("div", vec![a, d], &|t, v| t.div(v[0], v[1]));
    });
}

#[test]
fn unary_elementwise() {
    for_seeds(|r| {
        let shape = [r.random_range(1..4), r.random_range(1..5)];
        let x = uniform(r, &shape, -3.0, 3.0);
        check("scale", vec![x.clone()], &|t, v| t.scale(v[0], -1.7));
        check("add_scalar", vec![x.clone()], &|t, v| t.add_scalar(v[0], 0.3));
        check("sigmoid", vec![x.clone()], &|t, v| t.sigmoid(v[0]));
        check("tanh", vec![x.clone()], &|t, v| t.tanh(v[0]));
        check("exp", vec![x.clone()], &|t, v| t.exp(v[0]));
        check("softplus", vec![x.clone()], &|t, v| t.softplus(v[0]));
        check("cos", vec![x], &|t, v| t.cos(v[0]));
        check("relu", vec![away_from_zero(r, &shape, 0.05, 3.0)], &|t, v| t.relu(v[0]));
        check("log", vec![uniform(r, &shape, 0.2, 3.0)], &|t, v| t.log(v[0]));
        check("acos", vec![uniform(r, &shape, -0.9, 0.9)], &|t, v| t.acos(v[0]));
        // clamp to [-0.5, 0.5]; keep samples off the two boundaries
        let mut c = away_from_zero(r, &shape, 0.05, 1.0).into_data();
        for v in &mut c {
            if (v.abs() - 0.5).abs() < 0.05 {
                *v *= 0.5;
            }
        }
        check("clamp", vec![Tensor::new(&shape, c).unwrap()], &|t, v| t.clamp(v[0], -0.5, 0.5));
    });
}

#[test]
fn structural_ops() {
    for_seeds(|r| {
        let (m, n) = (r.random_range(2..5), r.random_range(2..5));
        let a = uniform(r, &[m, n], -2.0, 2.0);
        let b = uniform(r, &[m, 2], -2.0, 2.0);
        let c = uniform(r, &[3, n], -2.0, 2.0);
        check("concat_cols", vec![a.clone(), b], &|t, v| t.concat(&[v[0], v[1], v[0]], 1));
        check("concat_rows", vec![a.clone(), c], &|t, v| t.concat(&[v[1], v[0]], 0));
        check("slice_cols", vec![a.clone()], &|t, v| t.slice(v[0], 1, 1, 2));
        check("slice_rows", vec![a.clone()], &|t, v| t.slice(v[0], 0, 0, 2));
        check("reshape", vec![a.clone()], &move |t, v| t.reshape(v[0], &[n, m]));
        check("sum", vec![a.clone()], &|t, v| t.sum(v[0]));
        check("mean", vec![a], &|t, v| t.mean(v[0]));
    });
}

#[test]
fn normalizations() {
    for_seeds(|r| {
        let (m, n) = (r.random_range(1..5), r.random_range(2..6));
        let a = away_from_zero(r, &[m, n], 0.1, 2.0);
        check("l2_normalize_rows", vec![a.clone()], &|t, v| t.l2_normalize_rows(v[0]));
        check("log_softmax_rows", vec![a], &|t, v| t.log_softmax_rows(v[0]));
    });
}

/// Random two-layer perceptron with exactly 20 parameters:
/// W1 [3,4] + b1 [4] + W2 [4,1] = 12 + 4 + 4.
#[test]
fn two_layer_perceptron() {
    for_seeds(|r| {
        let x = uniform(r, &[5, 3], -1.0, 1.0);
        let y: Vec<f64> = (0..5).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let targets = Tensor::new(&[5, 1], y).unwrap();
        let params = vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0), uniform(r, &[4, 1], -1.0, 1.0)];
        assert_eq!(params.iter().map(Tensor::numel).sum::<usize>(), 20);
        check("mlp", params, &move |t, v| {
            let xi = t.constant(&x);
            let h = t.matmul(xi, v[0])?;
            let h = t.add_row(h, v[1])?;
            let h = t.tanh(h)?;
            let z = t.matmul(h, v[2])?;
            // BCE(σ(z), y) = softplus(z) − y·z
            let sp = t.softplus(z)?;
            let yi = t.constant(&targets);
            let yz = t.mul(yi, z)?;
            let l = t.sub(sp, yz)?;
            t.mean(l)
        });
    });
}

#[test]
fn accumulation_matches_summed_loss() {
    for_seeds(|r| {
        let mut store = ParamStore::new();
        let w = store.add("w", uniform(r, &[3, 2], -1.0, 1.0).with_requires_grad(true)).unwrap();
        let xa = uniform(r, &[4, 3], -1.0, 1.0);
        let xb = uniform(r, &[4, 3], -1.0, 1.0);
        let loss = |tape: &mut Tape<f64>, x: &Tensor<f64>| -> Result<Var> {
            let wv = tape.param(&store, w);
            let xi = tape.constant(x);
            let z = tape.matmul(xi, wv)?;
            let z = tape.tanh(z)?;
            tape.sum(z)
        };
        let mut t1 = Tape::new();
        let la = loss(&mut t1, &xa).unwrap();
        let mut t2 = Tape::new();
        let lb = loss(&mut t2, &xb).unwrap();
        let (la1, lb1) = (la, lb);
        let mut sep = t1.backward(la).unwrap();
        sep.add(&t2.backward(lb).unwrap()).unwrap();

        let mut t3 = Tape::new();
        let la = loss(&mut t3, &xa).unwrap();
        let lb = loss(&mut t3, &xb).unwrap();
        let total = t3.add(la, lb).unwrap();
        let joint = t3.backward(total).unwrap();
        for (a, b) in sep.get(w).unwrap().iter().zip(joint.get(w).unwrap()) {
            assert!((a - b).abs() < 1e-6);
        }

        // buffers in the store accumulate additively until zeroed
        store.accumulate(&t1.backward(la1).unwrap()).unwrap();
        store.accumulate(&t2.backward(lb1).unwrap()).unwrap();
        for (a, b) in store.get(w).grad().unwrap().iter().zip(sep.get(w).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
        store.zero_grad();
        assert!(store.get(w).grad().is_none());
    });
}
