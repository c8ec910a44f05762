//! Mini-batch SGD with momentum: v <- m*v + g, p <- p - lr*v.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64, param_shapes: &[Vec<usize>]) -> Self {
        assert!(learning_rate >= 0.0, "learning rate must be non-negative");
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0,1)");
        Self {
            learning_rate,
            momentum,
            velocity: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// One update over aligned parameter and gradient slices. `masks`, when
    /// present, pins masked coordinates: their gradient and velocity are
    /// forced to zero so the parameter value never moves.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        masks: Option<&[Option<Vec<bool>>]>,
    ) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.velocity.len());
        for idx in 0..params.len() {
            let v = &mut self.velocity[idx];
            debug_assert_eq!(v.shape(), params[idx].shape());
            let mask = masks.and_then(|m| m[idx].as_ref());
            let p = params[idx].data_mut();
            let g = grads[idx].data();
            let vd = v.data_mut();
            for i in 0..p.len() {
                let masked = mask.map_or(false, |m| m[i]);
                if masked {
                    vd[i] = 0.0;
                    continue;
                }
                vd[i] = self.momentum * vd[i] + g[i];
                p[i] -= self.learning_rate * vd[i];
            }
        }
    }
}
