use super::model::Param;
use super::tensor::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam optimizer state, one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, params: &[Param<S>]) -> Self {
        Adam {
            lr,
            step: 0,
            m: params.iter().map(|p| vec![S::zero(); p.value.len()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.value.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Param<S>], grads: &[Vec<S>]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::of(BETA1), S::of(BETA2));
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        let lr = S::of(self.lr);
        let eps = S::of(EPSILON);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.value.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
