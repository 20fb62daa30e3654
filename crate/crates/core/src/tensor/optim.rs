use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T = f64> {
    lr: T,
    momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Result<Self> {
        if lr <= T::zero() || !lr.is_finite() {
            return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::contract(format!("momentum must lie in [0,1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    pub fn set_lr(&mut self, lr: T) {
        self.lr = lr;
    }

    /// Forgets the momentum buffers.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Updates every parameter in place from its gradient slot. Gradients are
    /// left untouched; call [`ParamSet::zero_grad`] before the next pass.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| !t.has_grad()) {
            return Err(Error::contract(format!("parameter `{name}` has no gradient")));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        }
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let g = t.grad().expect("checked above").to_vec();
            let v = &mut self.velocity[i];
            if v.len() != g.len() {
                *v = vec![T::zero(); g.len()];
            }
            for ((w, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(w: f64, g: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(w)).unwrap();
        p.tensor_at_mut(0).set_grad(vec![g]).unwrap();
        p
    }

    #[test]
    fn single_plain_step() {
        let mut p = one_param(1.0, 2.0);
        Sgd::new(0.1, 0.0).unwrap().step(&mut p).unwrap();
        assert!((p.tensor_at(0).data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.tensor_at(0).grad().unwrap(), &[2.0]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one_param(0.37, 0.0);
        let mut opt = Sgd::new(0.5, 0.9).unwrap();
        opt.step(&mut p).unwrap();
        opt.step(&mut p).unwrap();
        assert_eq!(p.tensor_at(0).data()[0], 0.37);
    }

    #[test]
    fn momentum_two_steps_unrolled() {
        let (w0, g, lr) = (0.3, 0.7, 0.05);
        let mut p = one_param(w0, g);
        let mut opt = Sgd::new(lr, 0.9).unwrap();
        opt.step(&mut p).unwrap();
        opt.step(&mut p).unwrap();
        let expected = w0 - lr * g - lr * (1.9 * g);
        assert!((p.tensor_at(0).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = ParamSet::<f64>::new();
        p.push("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(Sgd::new(0.1, 0.0).unwrap().step(&mut p), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::<f64>::new(0.0, 0.5).is_err());
        assert!(Sgd::<f64>::new(0.1, 1.0).is_err());
    }
}
