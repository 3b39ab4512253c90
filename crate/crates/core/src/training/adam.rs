use super::TrainError;
use crate::numerics::{Float, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: Float,
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
}

impl AdamConfig {
    pub fn paper() -> Self {
        Self { lr: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-9 }
    }

    pub fn desk() -> Self {
        Self { lr: 1e-3, ..Self::paper() }
    }
}

/// Moment estimates for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<Float>>,
    pub v: Vec<Vec<Float>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<Float>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one bias-corrected update using the stored gradients (missing gradients count as zero).
    ///
    /// Nothing is modified if any gradient is NaN.
    pub fn update(&mut self, params: &mut ParamStore) -> Result<(), TrainError> {
        if self.m.len() != params.len() || self.m.iter().zip(params.tensors()).any(|(m, t)| m.len() != t.numel()) {
            return Err(TrainError::Config("optimizer state does not match the parameters".into()));
        }
        for id in params.ids() {
            if params.get(id).grad().is_some_and(|g| g.iter().any(|x| x.is_nan())) {
                return Err(TrainError::NanGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((tensor, m), v) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = tensor.grad().map(<[Float]>::to_vec);
            for (i, theta) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store(values: &[Float]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        s
    }

    fn set_grad(s: &mut ParamStore, g: &[Float]) {
        let id = s.find("w").unwrap();
        s.get_mut(id).zero_grad();
        s.get_mut(id).accumulate_grad(g);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.5, -2.0]);
        set_grad(&mut s, &[1.0, 1.0]);
        let mut adam = AdamState::new(AdamConfig::paper(), &s);
        adam.update(&mut s).unwrap();
        let want = 1e-6 / (1.0 + 1e-9);
        assert!((s.tensors()[0].data()[0] - (0.5 - want)).abs() < 1e-15);
        assert!((s.tensors()[0].data()[1] - (-2.0 - want)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[0.25, 3.0]);
        set_grad(&mut s, &[0.0, 0.0]);
        let mut adam = AdamState::new(AdamConfig::desk(), &s);
        adam.update(&mut s).unwrap();
        assert_eq!(s.tensors()[0].data(), &[0.25, 3.0]);
    }

    /// Scalar Adam written out step by step.
    #[test]
    fn matches_scalar_recurrence() {
        let (lr, b1, b2, eps, g) = (1e-2, 0.9, 0.999, 1e-9, 0.37);
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, t));
            let vh = v / (1.0 - f64::powi(b2, t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        let mut s = store(&[1.0]);
        let mut adam = AdamState::new(AdamConfig { lr, beta1: b1, beta2: b2, eps }, &s);
        for _ in 0..2 {
            set_grad(&mut s, &[g]);
            adam.update(&mut s).unwrap();
        }
        assert!((s.tensors()[0].data()[0] as f64 - theta).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts_and_names_parameter() {
        let mut s = store(&[1.0, 2.0]);
        set_grad(&mut s, &[0.1, Float::NAN]);
        let mut adam = AdamState::new(AdamConfig::desk(), &s);
        let err = adam.update(&mut s).unwrap_err();
        assert_eq!(err, TrainError::NanGradient("w".into()));
        assert_eq!(adam.step, 0);
        assert_eq!(s.tensors()[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn quadratic_bowl_decreases() {
        let mut s = store(&[3.0, -1.5]);
        let loss = |s: &ParamStore| s.tensors()[0].data().iter().map(|x| x * x).sum::<Float>();
        let before = loss(&s);
        let g: Vec<Float> = s.tensors()[0].data().iter().map(|x| 2.0 * x).collect();
        set_grad(&mut s, &g);
        AdamState::new(AdamConfig::desk(), &s).update(&mut s).unwrap();
        assert!(loss(&s) < before);
    }
}
