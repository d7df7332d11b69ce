//! First-order adaptive-moment optimizer.

use crate::autodiff::Tensor;
use crate::nn::ParamBlock;

/// Adam state for one parameter block. Moment tensors are allocated lazily
/// on the first step and stay aligned with the block's canonical order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update. `grads` must follow the block's canonical parameter
    /// order (the same order `visit`/`visit_mut` traverse).
    pub fn step(&mut self, block: &mut dyn ParamBlock, grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.raw_dim())).collect();
            self.v = grads.iter().map(|g| Tensor::zeros(g.raw_dim())).collect();
        }
        assert_eq!(self.m.len(), grads.len(), "gradient list shape drift");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);

        let mut idx = 0usize;
        block.visit_mut(&mut |_, param| {
            let g = &grads[idx];
            debug_assert_eq!(g.shape(), param.shape());
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= self.lr * mh / (vh.sqrt() + self.eps);
                });
            idx += 1;
        });
        assert_eq!(idx, grads.len(), "block has fewer tensors than gradients");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize ||W||^2 via its gradient 2W.
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        let mut layer = Dense::init(4, 4, &mut rng);
        layer.bias = Tensor::zeros(IxDyn(&[4]));
        let mut opt = Adam::new(0.05);
        let start: f64 = layer.weight.iter().map(|w| w * w).sum();
        for _ in 0..200 {
            let gw = layer.weight.mapv(|w| 2.0 * w);
            let gb = layer.bias.mapv(|b| 2.0 * b);
            let grads = vec![gw, gb];
            struct DenseBlock<'a>(&'a mut Dense);
            impl crate::nn::ParamBlock for DenseBlock<'_> {
                fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
                    f("weight", &self.0.weight);
                    f("bias", &self.0.bias);
                }
                fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
                    f("weight", &mut self.0.weight);
                    f("bias", &mut self.0.bias);
                }
            }
            opt.step(&mut DenseBlock(&mut layer), &grads);
        }
        let end: f64 = layer.weight.iter().map(|w| w * w).sum();
        assert!(end < start * 1e-2, "start {start}, end {end}");
    }
}
