//! Named parameter storage and the small layer building blocks shared by
//! every network in the model.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use tdfn_tensor::{Element, Tape, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Flat, ordered list of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape`; those accepted by `trainable`
    /// become gradient-tracking leaves, the rest constants.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let mut v = t.cast::<T>();
                v.requires_grad = trainable(name);
                tape.leaf(v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds tape gradients of bound parameters into the stored gradients.
    pub fn accumulate(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Mutable references to the parameters whose names pass `filter`, in
    /// store order.
    pub fn select_mut(&mut self, filter: impl Fn(&str) -> bool) -> Vec<&mut Tensor> {
        self.names
            .iter()
            .zip(self.tensors.iter_mut())
            .filter(|(n, _)| filter(n))
            .map(|(_, t)| t)
            .collect()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: Vec<f32>) -> Result<()> {
        let shape = self.tensors[id.0].shape().to_vec();
        self.tensors[id.0] = Tensor::new(&shape, data)?.with_grad();
        Ok(())
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).unwrap();
        let w: Vec<f32> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        let weight = store.add(format!("{name}.w"), Tensor::new(&[fan_in, fan_out], w).unwrap());
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]).unwrap());
        Linear { weight, bias }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.linear(x, p[self.weight], Some(p[self.bias]))?)
    }
}

/// Trainable scale/shift pair for layer normalisation.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[width], 1.0).unwrap()),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]).unwrap()),
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p[self.gamma], p[self.beta])?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    LeakyRelu,
}

pub const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    pub fn apply<T: Element>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, T::from_f64(LEAKY_SLOPE)),
        }
    }
}

/// Two fully connected layers with a hidden activation; the output is raw
/// (softmax, where needed, is applied by the caller).
#[derive(Clone, Copy, Debug)]
pub struct TwoLayer {
    pub hidden: Linear,
    pub output: Linear,
    pub activation: Activation,
}

impl TwoLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        TwoLayer {
            hidden: Linear::new(store, &format!("{name}.hidden"), dims.0, dims.1, rng),
            output: Linear::new(store, &format!("{name}.out"), dims.1, dims.2, rng),
            activation,
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = self.activation.apply(tape, h);
        self.output.forward(tape, p, h)
    }
}

/// Zero-mean normal table of `rows` trainable vectors.
pub fn normal_table(store: &mut ParamStore, name: &str, rows: usize, width: usize, std: f32, rng: &mut impl Rng) -> ParamId {
    let dist = Normal::new(0.0, std).unwrap();
    let data = (0..rows * width).map(|_| dist.sample(rng)).collect();
    store.add(name, Tensor::new(&[rows, width], data).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_marks_only_selected_params_trainable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = Linear::new(&mut store, "a", 2, 3, &mut rng);
        let b = Linear::new(&mut store, "b", 3, 1, &mut rng);
        let mut tape = Tape::<f32>::new();
        let bound = store.bind(&mut tape, |n| n.starts_with("b."));
        assert!(!tape.requires_grad(bound[a.weight]));
        assert!(tape.requires_grad(bound[b.weight]));
        assert_eq!(store.find("b.b"), Some(b.bias));
    }

    #[test]
    fn xavier_limits_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", 10, 6, &mut rng);
        let limit = (6.0f32 / 16.0).sqrt();
        assert!(store.get(l.weight).data().iter().all(|w| w.abs() <= limit));
        assert!(store.get(l.bias).data().iter().all(|&b| b == 0.0));
    }
}
