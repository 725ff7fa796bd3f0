use super::{shape_err, Element, Result, Tensor};

/// A learnable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Element = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Frozen parameters are never touched by [`adam_step`].
    pub trainable: bool,
}

impl<T: Element> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad, trainable: true }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-7 }
    }
}

/// Moment estimates for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T: Element = f32> {
    pub config: AdamConfig,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[Parameter<T>], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { config, first_moment: zeros(), second_moment: zeros(), step_count: 0 }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step<T: Element>(params: &mut [Parameter<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return shape_err("adam_step", format!("state tracks {} parameters, got {}", state.first_moment.len(), params.len()));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad.shape() != p.value.shape() || state.first_moment[i].shape() != p.value.shape() {
            return shape_err("adam_step", format!("parameter {i}: value {:?}, grad {:?}", p.value.shape(), p.grad.shape()));
        }
    }
    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
    let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.epsilon));
    let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
