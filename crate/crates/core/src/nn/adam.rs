//! First-order adaptive-moment optimizer with bias correction.

use super::param::Scalar;

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![F::zero(); n], v: vec![F::zero(); n], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn update(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = F::from_f64(lr);
        let eps = F::from_f64(self.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_quadratic() {
        // minimize (p - 3)^2
        let mut adam = Adam::<f64>::new(1);
        let mut p = vec![0.0f64];
        for _ in 0..2000 {
            let g = 2.0 * (p[0] - 3.0);
            adam.update(&mut p, &[g], 1e-2);
        }
        assert!((p[0] - 3.0).abs() < 1e-3, "got {}", p[0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first update is lr * sign(g)
        let mut adam = Adam::<f64>::new(1);
        let mut p = vec![1.0f64];
        adam.update(&mut p, &[0.5], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
    }
}
