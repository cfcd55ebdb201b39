use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(learning_rate: f32, beta1: f32, beta2: f32, epsilon: f32) -> Self {
        AdamState {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn with_lr(learning_rate: f32) -> Self {
        Self::new(learning_rate, 0.9, 0.999, 1e-8)
    }

    /// Applies one update to `params` using their stored gradients.
    ///
    /// Moments are lazily sized on the first call; afterwards the parameter
    /// list must keep the same layout.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(TensorError::MissingGrad(i));
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        let layout_ok = self.first_moment.len() == params.len()
            && self
                .first_moment
                .iter()
                .zip(params.iter())
                .all(|(m, p)| m.len() == p.numel());
        if !layout_ok {
            return Err(TensorError::Invalid(
                "parameter layout changed between Adam steps".into(),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let grad = p.grad.take().unwrap();
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
