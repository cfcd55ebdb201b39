//! Central finite-difference checks for every taped primitive.
//!
//! Checks run on `Tape<f64>` with h = 1e-3; the analytic gradient must agree
//! with the difference quotient to a relative error of 1e-4.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdfn_tensor::{AttnLayout, Tape, Tensor, Var};

const H: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Values bounded away from zero so kinked functions stay differentiable
/// under the ±h probe.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|x| if x.abs() < 0.05 { x + 0.1_f64.copysign(x) } else { x })
}

/// Reduces `out` against fixed random weights so every output element
/// carries a distinct cotangent.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    if tape.value(out).is_scalar() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let weights = random(&mut rng, tape.shape(out));
    let w = tape.constant(weights);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn loss_at<F>(inputs: &[Tensor<f64>], f: &F, seed: u64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let loss = project(&mut tape, out, seed);
    tape.value(loss).item().unwrap()
}

fn gradcheck<F>(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars);
    let loss = project(&mut tape, out, seed);
    tape.backward(loss).unwrap();

    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (loss_at(&plus, &f, seed) - loss_at(&minus, &f, seed)) / (2.0 * H);
            let err = rel_err(analytic[j], numeric);
            assert!(
                err <= REL_TOL,
                "{name}: input {i} element {j}: analytic {} vs numeric {numeric} (rel {err:e}, seed {seed})",
                analytic[j]
            );
        }
    }
}

fn each_instance(mut body: impl FnMut(u64, &mut ChaCha8Rng)) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        body(seed, &mut rng);
    }
}

#[test]
fn matmul_gradients() {
    each_instance(|seed, rng| {
        let m = rng.random_range(1..5);
        let k = rng.random_range(1..5);
        let n = rng.random_range(1..5);
        let inputs = vec![random(rng, &[m, k]), random(rng, &[k, n])];
        gradcheck("matmul", inputs, seed, |t, v| t.matmul(v[0], v[1]).unwrap());
    });
}

#[test]
fn linear_gradients() {
    each_instance(|seed, rng| {
        let inputs = vec![random(rng, &[3, 4]), random(rng, &[4, 2]), random(rng, &[2])];
        gradcheck("linear", inputs.clone(), seed, |t, v| {
            t.linear(v[0], v[1], Some(v[2])).unwrap()
        });
        gradcheck("linear-nobias", inputs[..2].to_vec(), seed, |t, v| {
            t.linear(v[0], v[1], None).unwrap()
        });
    });
}

#[test]
fn elementwise_gradients() {
    each_instance(|seed, rng| {
        let inputs = vec![random(rng, &[2, 3]), random(rng, &[2, 3])];
        gradcheck("add", inputs.clone(), seed, |t, v| t.add(v[0], v[1]).unwrap());
        gradcheck("sub", inputs.clone(), seed, |t, v| t.sub(v[0], v[1]).unwrap());
        gradcheck("mul", inputs.clone(), seed, |t, v| t.mul(v[0], v[1]).unwrap());
        gradcheck("scale", inputs[..1].to_vec(), seed, |t, v| t.scale(v[0], -0.7));
    });
}

#[test]
fn add_row_gradients() {
    each_instance(|seed, rng| {
        let inputs = vec![random(rng, &[4, 3]), random(rng, &[3])];
        gradcheck("add_row", inputs, seed, |t, v| t.add_row(v[0], v[1]).unwrap());
    });
}

#[test]
fn layer_norm_gradients() {
    each_instance(|seed, rng| {
        let inputs = vec![random(rng, &[3, 5]), random(rng, &[5]), random(rng, &[5])];
        gradcheck("layer_norm", inputs, seed, |t, v| {
            t.layer_norm(v[0], v[1], v[2]).unwrap()
        });
    });
}

#[test]
fn activation_gradients() {
    each_instance(|seed, rng| {
        let x = vec![random(rng, &[2, 4])];
        gradcheck("gelu", x, seed, |t, v| t.gelu(v[0]));
        let x = vec![random_off_zero(rng, &[2, 4])];
        gradcheck("leaky_relu", x, seed, |t, v| t.leaky_relu(v[0], 0.01));
    });
}

#[test]
fn softmax_gradients_along_each_axis() {
    each_instance(|seed, rng| {
        let x = vec![random(rng, &[2, 3, 4])];
        for axis in 0..3 {
            gradcheck("softmax", x.clone(), seed, |t, v| t.softmax(v[0], axis).unwrap());
        }
        gradcheck("log_softmax", vec![random(rng, &[3, 5])], seed, |t, v| t.log_softmax(v[0]));
    });
}

#[test]
fn loss_gradients() {
    each_instance(|seed, rng| {
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..10)).collect();
        gradcheck("cross_entropy", vec![random(rng, &[3, 10])], seed, |t, v| {
            t.cross_entropy(v[0], &labels).unwrap()
        });
        let inputs = vec![random(rng, &[2, 3]), random(rng, &[2, 3])];
        gradcheck("mse", inputs, seed, |t, v| t.mse(v[0], v[1]).unwrap());
    });
}

#[test]
fn reduction_gradients() {
    each_instance(|seed, rng| {
        let x = vec![random(rng, &[3, 2])];
        gradcheck("sum", x.clone(), seed, |t, v| t.sum(v[0]));
        gradcheck("mean", x, seed, |t, v| t.mean(v[0]));
    });
}

#[test]
fn structural_gradients() {
    each_instance(|seed, rng| {
        let inputs = vec![random(rng, &[2, 3]), random(rng, &[1, 3]), random(rng, &[3, 3])];
        gradcheck("concat", inputs, seed, |t, v| t.concat(v).unwrap());
        let rows = [2, 0, 2, 1, 2];
        gradcheck("gather_rows", vec![random(rng, &[3, 4])], seed, |t, v| {
            t.gather_rows(v[0], &rows).unwrap()
        });
        gradcheck("slice_rows", vec![random(rng, &[4, 2])], seed, |t, v| {
            t.slice_rows(v[0], 1, 2).unwrap()
        });
        gradcheck("reshape", vec![random(rng, &[2, 6])], seed, |t, v| {
            t.reshape(v[0], &[3, 4]).unwrap()
        });
        let flat = [5, 1, 5, 0];
        gradcheck("pick", vec![random(rng, &[2, 3])], seed, |t, v| t.pick(v[0], &flat).unwrap());
    });
}

#[test]
fn attention_gradients() {
    each_instance(|seed, rng| {
        let layout = AttnLayout {
            batch: 2,
            seq: 3,
            heads: 2,
            dim: 4,
        };
        let shape = [6, 4];
        let inputs = vec![random(rng, &shape), random(rng, &shape), random(rng, &shape)];
        gradcheck("attention", inputs, seed, |t, v| {
            t.attention(v[0], v[1], v[2], layout).unwrap()
        });
    });
}

#[test]
fn composed_mse_of_affine_map() {
    // loss = mse(W·x, y)
    each_instance(|seed, rng| {
        let inputs = vec![random(rng, &[3, 4]), random(rng, &[4, 1]), random(rng, &[3, 1])];
        gradcheck("mse(Wx, y)", inputs, seed, |t, v| {
            let wx = t.matmul(v[0], v[1]).unwrap();
            t.mse(wx, v[2]).unwrap()
        });
    });
}

#[test]
fn fan_out_sums_both_paths() {
    // loss = sum(x * x + 3x): d/dx = 2x + 3
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::vector(vec![0.5, -2.0, 1.0]).with_grad());
    let sq = tape.mul(x, x).unwrap();
    let lin = tape.scale(x, 3.0);
    let total = tape.add(sq, lin).unwrap();
    let loss = tape.sum(total);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, -1.0, 5.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let y = tape.scale(x, 2.0);
    assert!(tape.backward(y).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let p = tape.mul(x, c).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(tape.grad(c).is_none());
}
