use super::Param;
use crate::error::{Error, Result};

/// Bias-corrected Adam over a list of [`Param`] buffers. Moments are kept in
/// double precision; parameters are rounded back to `f32` after each step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 0.001;

    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` must have the length of `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.data.len() != g.len() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for `{}` has {} entries, parameter has {}",
                    p.name,
                    g.len(),
                    p.data.len()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.data.len())
        {
            return Err(Error::ShapeMismatch(
                "parameter list changed between optimizer steps".into(),
            ));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                if update != 0.0 {
                    p.data[i] = (p.data[i] as f64 - update) as f32;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Param::new("w", Shape::new(1, 1, 3), vec![0.3, -1.2, 7.0]).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(Adam::DEFAULT_LR);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // at t = 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
        for g in [0.5f64, -3.0, 1e-3] {
            let mut p = Param::new("w", Shape::scalar(), vec![1.0]).unwrap();
            let mut adam = Adam::new(0.001);
            adam.step(&mut [&mut p], &[&[g]]).unwrap();
            let expected = 1.0 - 0.001 * g / (g.abs() + 1e-8);
            assert!((p.data[0] as f64 - expected).abs() < 1e-7, "g={g}");
        }
    }

    #[test]
    fn mismatched_gradient_rejected() {
        let mut p = Param::zeros("w", Shape::new(1, 1, 2));
        let mut adam = Adam::new(0.001);
        assert!(adam.step(&mut [&mut p], &[&[1.0]]).is_err());
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(Adam::DEFAULT_LR, 0.001);
    }
}
