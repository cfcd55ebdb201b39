//! Central finite-difference checks of the three head networks, run in
//! f64 on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdfn::geometry::{Architecture, Geometry};
use tdfn::model::TdfnModel;
use tdfn::params::TwoLayer;
use tdfn_tensor::{Tape, Tensor};

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

struct Case {
    x: Vec<f64>,
    weights: Vec<f64>,
    rows: usize,
}

/// `sum(head(x) * weights)` and, when asked, the analytic gradients of the
/// head's parameters and of `x`.
fn eval(model: &TdfnModel, head: &TwoLayer, prefix: &str, case: &Case, grads: bool) -> (f64, Vec<(String, Vec<f64>)>, Vec<f64>) {
    let dim = model.geometry.embed_dim;
    let mut tape = Tape::<f64>::new();
    let p = model.store.bind(&mut tape, |n| grads && n.starts_with(prefix));
    let mut x = Tensor::new(&[case.rows, dim], case.x.clone()).unwrap();
    x.requires_grad = grads;
    let x = tape.leaf(x);
    let out = head.forward(&mut tape, &p, x).unwrap();
    let w = tape.constant(Tensor::new(tape.shape(out), case.weights.clone()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let value = tape.value(loss).item().unwrap();
    if !grads {
        return (value, Vec::new(), Vec::new());
    }
    tape.backward(loss).unwrap();
    let params = model
        .store
        .ids()
        .filter(|&id| model.store.name(id).starts_with(prefix))
        .map(|id| (model.store.name(id).to_string(), tape.grad(p[id]).unwrap().to_vec()))
        .collect();
    (value, params, tape.grad(x).unwrap().to_vec())
}

fn min_hidden_magnitude(model: &TdfnModel, head: &TwoLayer, x: &[f64], rows: usize) -> f64 {
    let mut tape = Tape::<f64>::new();
    let p = model.store.bind(&mut tape, |_| false);
    let x = tape.constant(Tensor::new(&[rows, model.geometry.embed_dim], x.to_vec()).unwrap());
    let z = head.hidden.forward(&mut tape, &p, x).unwrap();
    tape.data(z).iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn check_head(
    pick: fn(&TdfnModel) -> (TwoLayer, &'static str),
    out_width: fn(&Geometry, &Architecture) -> usize,
    kinked: bool,
) {
    let geometry = Geometry::default();
    let arch = Architecture::default();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = TdfnModel::new(geometry, arch, seed).unwrap();
        let (head, prefix) = pick(&model);
        let rows = 2;
        // Keep hidden pre-activations away from the LeakyReLU kink.
        let x = loop {
            let x: Vec<f64> = (0..rows * geometry.embed_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            if !kinked || min_hidden_magnitude(&model, &head, &x, rows) > 1e-2 {
                break x;
            }
        };
        let case = Case {
            x,
            weights: (0..rows * out_width(&geometry, &arch)).map(|_| rng.random_range(-1.0..1.0)).collect(),
            rows,
        };
        let (_, param_grads, x_grad) = eval(&model, &head, prefix, &case, true);

        for i in 0..case.x.len() {
            let mut plus = Case { x: case.x.clone(), weights: case.weights.clone(), rows };
            plus.x[i] += H;
            let mut minus = Case { x: case.x.clone(), weights: case.weights.clone(), rows };
            minus.x[i] -= H;
            let fd = (eval(&model, &head, prefix, &plus, false).0 - eval(&model, &head, prefix, &minus, false).0) / (2.0 * H);
            assert!(rel_err(x_grad[i], fd) <= TOL, "{prefix} seed {seed} input {i}: {} vs {fd}", x_grad[i]);
        }

        for (name, grad) in &param_grads {
            let id = model.store.find(name).unwrap();
            let len = model.store.get(id).numel();
            for _ in 0..6 {
                let k = rng.random_range(0..len);
                let base = model.store.get(id).data()[k];
                // Parameters are stored in f32, so the step actually taken
                // is measured rather than assumed.
                let up = (base as f64 + H) as f32;
                let down = (base as f64 - H) as f32;
                let mut shifted = model.clone();
                let mut data = model.store.get(id).data().to_vec();
                data[k] = up;
                shifted.store.set(id, data.clone()).unwrap();
                let f_up = eval(&shifted, &head, prefix, &case, false).0;
                data[k] = down;
                shifted.store.set(id, data).unwrap();
                let f_down = eval(&shifted, &head, prefix, &case, false).0;
                let fd = (f_up - f_down) / (up as f64 - down as f64);
                assert!(rel_err(grad[k], fd) <= TOL, "seed {seed} {name}[{k}]: {} vs {fd}", grad[k]);
            }
        }
    }
}

#[test]
fn classifier_head_gradients() {
    check_head(|m| (m.classifier, "classifier."), |g, _| g.num_classes, false);
}

#[test]
fn reconstructor_head_gradients() {
    check_head(|m| (m.reconstructor, "reconstructor."), |g, _| g.image_pixels(), false);
}

#[test]
fn fpg_head_gradients() {
    check_head(|m| (m.fpg, "fpg."), |g, _| g.num_regions(), true);
}
