//! Adam on a flat parameter vector.

use crate::error::{Error, Result};

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("learning rate must be a positive finite number"));
        }
        if n_params == 0 {
            return Err(Error::invalid("optimizer needs at least one parameter"));
        }
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update: params -= lr * m_hat / (sqrt(v_hat) + eps).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params / {} grads vs {} state", params.len(), grad.len(), self.m.len()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_gradient_direction() {
        // bias correction makes m_hat = g, v_hat = g^2 on step one, so the
        // update is lr * sign(g) up to eps
        let mut opt = Adam::new(0.1, 3).unwrap();
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.3, -4.0, 0.0]).unwrap();
        assert!((p[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p[1] - (-2.0 + 0.1)).abs() < 1e-6);
        assert_eq!(p[2], 0.5); // zero gradient leaves the weight alone
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut opt = Adam::new(0.05, 2).unwrap();
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 4.0)];
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3, "{p:?}");
        assert!((p[1] + 4.0).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn rejects_bad_construction_and_shapes() {
        assert!(Adam::new(0.0, 4).is_err());
        assert!(Adam::new(f64::NAN, 4).is_err());
        assert!(Adam::new(1e-3, 0).is_err());
        let mut opt = Adam::new(1e-3, 4).unwrap();
        let mut p = vec![0.0; 3];
        assert!(opt.step(&mut p, &[0.0; 3]).is_err());
    }

    #[test]
    fn deterministic_across_instances() {
        let run = || {
            let mut opt = Adam::new(1e-2, 2).unwrap();
            let mut p = vec![0.7, -0.1];
            for k in 0..50 {
                let g = [p[0] * 0.5 + k as f64 * 0.01, -p[1]];
                opt.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
