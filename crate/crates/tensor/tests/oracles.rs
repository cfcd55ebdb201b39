use proptest::prelude::*;
use tdfn_tensor::{Tape, Tensor, TensorError};

fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a[i * k + l] as f64 * b[l * n + j] as f64;
            }
        }
    }
    out
}

fn matmul(a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let a = tape.constant(a);
    let b = tape.constant(b);
    let c = tape.matmul(a, b)?;
    Ok(tape.value(c).clone())
}

fn softmax(values: Vec<f32>) -> Vec<f32> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(values));
    let y = tape.softmax(x, 0).unwrap();
    tape.data(y).to_vec()
}

fn cross_entropy(logits: Vec<f32>, classes: usize, labels: &[usize]) -> Result<f32, TensorError> {
    let rows = logits.len() / classes;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[rows, classes], logits).unwrap());
    let loss = tape.cross_entropy(x, labels)?;
    tape.value(loss).item()
}

fn mse(a: Vec<f32>, b: Vec<f32>) -> Result<f32, TensorError> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(a));
    let b = tape.constant(Tensor::vector(b));
    let loss = tape.mse(a, b)?;
    tape.value(loss).item()
}

#[test]
fn matmul_identity_and_hand_expansion() {
    let eye = Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
    let b = Tensor::new(&[2, 2], vec![3., 4., 5., 6.]).unwrap();
    assert_eq!(matmul(eye, b.clone()).unwrap().data(), b.data());

    let a = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
    let b = Tensor::new(&[2, 2], vec![5., 6., 7., 8.]).unwrap();
    assert_eq!(matmul(a, b).unwrap().data(), &[19., 22., 43., 50.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
    let b = Tensor::<f32>::zeros(&[2, 3]).unwrap();
    let err = matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Shape {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] and [2, 3]"));
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(vec![0.0; 4]), vec![0.25; 4]);

    let big = softmax(vec![1000.0, 0.0]);
    assert!(big.iter().all(|x| x.is_finite()));
    assert!((big[0] - 1.0).abs() < 1e-6 && big[1].abs() < 1e-6);

    // f64 reference: exp(i - 3) / sum_j exp(j - 3)
    let reference: Vec<f64> = {
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| (x - 3.0).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    };
    for (got, want) in softmax(vec![1.0, 2.0, 3.0]).iter().zip(&reference) {
        assert!((*got as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn softmax_axis_out_of_range() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[2, 2]).unwrap());
    assert!(matches!(
        tape.softmax(x, 2),
        Err(TensorError::Axis { axis: 2, rank: 2, .. })
    ));
}

#[test]
fn leaky_relu_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::vector(vec![5.0, -2.0, 0.0]));
    let y = tape.leaky_relu(x, 0.01);
    assert_eq!(tape.data(y), &[5.0, -0.02, 0.0]);
}

#[test]
fn cross_entropy_examples() {
    let uniform = cross_entropy(vec![0.0; 10], 10, &[4]).unwrap();
    assert!((uniform as f64 - 10f64.ln()).abs() < 1e-6);

    let mut confident = vec![0.0; 10];
    confident[7] = 30.0;
    assert!(cross_entropy(confident, 10, &[7]).unwrap() < 1e-6);

    // -log(e^3 / (e^1 + e^2 + e^3)) in f64.
    let reference = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
    let got = cross_entropy(vec![1.0, 2.0, 3.0], 3, &[2]).unwrap();
    assert!((got as f64 - reference).abs() < 1e-6);

    assert!(matches!(
        cross_entropy(vec![0.0; 10], 10, &[10]),
        Err(TensorError::Index { index: 10, .. })
    ));
}

#[test]
fn mse_examples() {
    assert_eq!(mse(vec![0.3, 0.7], vec![0.3, 0.7]).unwrap(), 0.0);
    assert_eq!(mse(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(), 1.0);
    assert!(mse(vec![0.0, 0.0], vec![1.0]).is_err());
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(&[2, 3, 2], vec![0.5; 12]).unwrap().with_grad());
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 12]);
}

proptest! {
    #[test]
    fn matmul_agrees_with_triple_loop(
        m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()
    ) {
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13; state ^= state >> 7; state ^= state << 17;
            (state % 2000) as f32 / 1000.0 - 1.0
        };
        let a: Vec<f32> = (0..m * k).map(|_| next()).collect();
        let b: Vec<f32> = (0..k * n).map(|_| next()).collect();
        let want = naive_matmul(&a, &b, m, k, n);
        let got = matmul(Tensor::new(&[m, k], a).unwrap(), Tensor::new(&[k, n], b).unwrap()).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            prop_assert!((*g as f64 - w).abs() <= 1e-5);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-80f32..80f32, 1..40)) {
        let p = softmax(values);
        let total: f64 = p.iter().map(|&x| x as f64).sum();
        prop_assert!((total - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn sum_of_leaves_gives_unit_gradients(
        sizes in proptest::collection::vec(1usize..6, 1..5),
        reuse in proptest::collection::vec(0usize..4, 0..4)
    ) {
        // Build sum(l0) + sum(l1) + ... through a mix of concat and separate sums.
        let mut tape = Tape::<f32>::new();
        let leaves: Vec<_> = sizes
            .iter()
            .map(|&n| tape.leaf(Tensor::vector(vec![0.25; n]).with_grad()))
            .collect();
        let joined = tape.concat(&leaves).unwrap();
        let mut loss = tape.sum(joined);
        // Extra reads of a leaf through a zero-weighted path must not change its gradient.
        for &r in &reuse {
            let leaf = leaves[r % leaves.len()];
            let z = tape.scale(leaf, 0.0);
            let s = tape.sum(z);
            loss = tape.add(loss, s).unwrap();
        }
        tape.backward(loss).unwrap();
        for &l in &leaves {
            prop_assert!(tape.grad(l).unwrap().iter().all(|&g| g == 1.0));
        }
    }
}
