//! Convolutional and dense layer parameters shared by the codec components.
//!
//! Layers own plain tensors; every forward pass binds them into a [`Graph`]
//! (tracked leaves during training, constants during evaluation) and applies
//! the corresponding graph ops. Binding order is the canonical parameter
//! order used by the optimizer, the checkpoint format and gradient reports.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Tensor, Var};


/// Visitor over the named parameter tensors of a component, in canonical
/// (binding) order.
pub trait ParamBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Fan-in-scaled Gaussian init, matched to the tanh activations used by the
/// codec nets (the whole pipeline must stay C-smooth for finite-difference
/// gradient verification, so kinked activations are out).
fn fan_in_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let std = (1.0 / fan_in as f64).sqrt();
    Tensor::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// 3x3-style convolution parameters plus geometry.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: Tensor, // (Cout, Cin, K, K)
    pub bias: Tensor,   // (Cout,)
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn init(cin: usize, cout: usize, ksize: usize, stride: usize, pad: usize, rng: &mut ChaCha12Rng) -> Self {
        Conv {
            kernel: fan_in_normal(&[cout, cin, ksize, ksize], cin * ksize * ksize, rng),
            bias: Tensor::zeros(IxDyn(&[cout])),
            stride,
            pad,
        }
    }

    pub fn bind(&self, g: &mut Graph, track: bool) -> ConvVars {
        let mk = |g: &mut Graph, t: &Tensor| {
            if track {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        ConvVars {
            kernel: mk(g, &self.kernel),
            bias: mk(g, &self.bias),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

#[derive(Clone, Copy)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

impl ConvVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.conv2d(x, self.kernel, Some(self.bias), self.stride, self.pad)
    }
}

/// Fully connected layer parameters.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Tensor, // (Out, In)
    pub bias: Tensor,   // (Out,)
}

impl Dense {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha12Rng) -> Self {
        Dense {
            weight: fan_in_normal(&[fan_out, fan_in], fan_in, rng),
            bias: Tensor::zeros(IxDyn(&[fan_out])),
        }
    }

    pub fn bind(&self, g: &mut Graph, track: bool) -> DenseVars {
        let mk = |g: &mut Graph, t: &Tensor| {
            if track {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        DenseVars {
            weight: mk(g, &self.weight),
            bias: mk(g, &self.bias),
        }
    }
}

#[derive(Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.linear(x, self.weight, self.bias)
    }
}

/// Collects the bound leaf [`Var`]s of a component in canonical order so the
/// optimizer can pair them with parameter tensors.
#[derive(Default)]
pub struct BoundVars(pub Vec<Var>);

impl BoundVars {
    pub fn push_conv(&mut self, c: &ConvVars) {
        self.0.push(c.kernel);
        self.0.push(c.bias);
    }
    pub fn push_dense(&mut self, d: &DenseVars) {
        self.0.push(d.weight);
        self.0.push(d.bias);
    }
}

/// Draw a tensor with entries uniform in [-scale, scale]; used by tests and
/// the synthetic probe batches.
pub fn uniform_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha12Rng) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-scale..scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut a = ChaCha12Rng::seed_from_u64(5);
        let mut b = ChaCha12Rng::seed_from_u64(5);
        let ka = Conv::init(3, 8, 3, 1, 1, &mut a);
        let kb = Conv::init(3, 8, 3, 1, 1, &mut b);
        assert_eq!(ka.kernel, kb.kernel);
        assert!(ka.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_bind_apply_shapes() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let conv = Conv::init(3, 5, 3, 2, 1, &mut rng);
        let mut g = Graph::new(crate::autodiff::Mode::Eval);
        let x = g.constant(Tensor::zeros(IxDyn(&[2, 3, 8, 8])));
        let cv = conv.bind(&mut g, false);
        let y = cv.apply(&mut g, x);
        assert_eq!(g.value(y).shape(), &[2, 5, 4, 4]);
    }
}
