//! Reverse-mode automatic differentiation over dynamically shaped `f64` tensors.
//!
//! Every training step builds a fresh [`Graph`], binds model parameters as
//! tracked leaves, runs the forward pipeline (embed, distort, re-embed,
//! decode, losses) and calls [`Graph::backward`] on a scalar loss node. The
//! op set is deliberately small: exactly what the watermark codecs and the
//! distortion channel need, each with a hand-written backward rule that is
//! verified against central finite differences in the unit tests below.
//!
//! The graph also carries the execution [`Mode`]: saturation ops behave
//! differently during training (smooth clamp, straight-through rounding)
//! than during evaluation (hard clamp, true rounding).

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

/// Dynamically shaped `f64` tensor.
pub type Tensor = ArrayD<f64>;

/// Execution mode of a graph. Decided at construction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Smooth saturation so gradients survive; used by the trainers.
    Train,
    /// Hard saturation, exact quantization; used by embed/decode/attacks.
    Eval,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Sharpness of the smooth clamp used in training mode. At this value the
/// largest deviation from a hard clamp is ln(2)/50 ≈ 0.014 at the borders.
pub const SOFT_CLAMP_SHARPNESS: f64 = 50.0;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Tanh(Var),
    /// x * sigmoid(x): smooth everywhere, relu-like for positive inputs.
    Silu(Var),
    LeakyRelu(Var, f64),
    SoftClamp01(Var, f64),
    HardClamp01(Var),
    /// Rounds to the nearest integer; the gradient passes through unchanged.
    RoundSte(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ConcatChannels(Vec<Var>),
    /// (B, C) -> (B, C, H, W), repeating each value over the spatial plane.
    BroadcastPlanes(Var, usize, usize),
    Flatten(Var),
    MeanAll(Var),
    /// (B, C, H, W) -> (B, C): mean over the spatial plane.
    MeanSpatial(Var),
    /// Despread (B, K, H, W) features against L constant signature planes
    /// (L, H, W), producing per-(feature, signature) correlations (B, K*L).
    CorrelatePlanes { input: Var, sigs: std::sync::Arc<Tensor> },
    /// Orthonormal 8x8 block DCT applied per (batch, channel) plane.
    BlockDct8 {
        input: Var,
        inverse: bool,
    },
    /// Separable blur with per-position boundary renormalization.
    Blur(Var, Vec<f64>),
    /// Bilinear resample of a sub-rectangle back to the full resolution.
    Resample {
        input: Var,
        top: f64,
        left: f64,
        height: f64,
        width: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients of a scalar with respect to every tracked node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient tensor for `v`, if `v` was tracked and reached by backprop.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// An append-only computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::with_capacity(128),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a zero-dimensional node as a plain `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1, "scalar() called on non-scalar node");
        t.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Untracked leaf: gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf: model parameters and probe inputs.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies the value of `v` into a fresh untracked leaf, cutting the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub(a, b), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Mul(a, b), tracked)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).mapv(|x| x * s);
        let tracked = self.tracked(a);
        self.push(v, Op::Scale(a, s), tracked)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).mapv(|x| x + s);
        let tracked = self.tracked(a);
        self.push(v, Op::AddScalar(a, s), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let tracked = self.tracked(a);
        self.push(v, Op::Tanh(a), tracked)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let tracked = self.tracked(a);
        self.push(v, Op::Silu(a), tracked)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let tracked = self.tracked(a);
        self.push(v, Op::LeakyRelu(a, slope), tracked)
    }

    /// Clamp to [0, 1]: smooth in training mode, hard in evaluation mode.
    pub fn clamp01(&mut self, a: Var) -> Var {
        match self.mode {
            Mode::Train => self.soft_clamp01(a, SOFT_CLAMP_SHARPNESS),
            Mode::Eval => self.hard_clamp01(a),
        }
    }

    pub fn soft_clamp01(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| soft_clamp(x, k));
        let tracked = self.tracked(a);
        self.push(v, Op::SoftClamp01(a, k), tracked)
    }

    pub fn hard_clamp01(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(0.0, 1.0));
        let tracked = self.tracked(a);
        self.push(v, Op::HardClamp01(a), tracked)
    }

    /// Nearest-integer rounding with a straight-through gradient.
    pub fn round_ste(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::round);
        let tracked = self.tracked(a);
        self.push(v, Op::RoundSte(a), tracked)
    }

    /// 2-D convolution. `input` is (B, Cin, H, W), `kernel` (Cout, Cin, K, K),
    /// optional `bias` (Cout,). Zero padding of `pad` on every border.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let x = self
            .value(input)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d input must be 4-d");
        let k = self
            .value(kernel)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d kernel must be 4-d");
        let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kcin, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        assert_eq!(cin, kcin, "conv2d channel mismatch");
        assert_eq!(kh, kw, "conv2d expects square kernels");
        let ksz = kh;
        assert!(h + 2 * pad >= ksz && w + 2 * pad >= ksz, "conv2d kernel larger than padded input");
        let ho = (h + 2 * pad - ksz) / stride + 1;
        let wo = (w + 2 * pad - ksz) / stride + 1;

        let k2 = k
            .to_shape((cout, cin * ksz * ksz))
            .expect("kernel reshape")
            .to_owned();
        let mut out = ndarray::Array4::<f64>::zeros((b, cout, ho, wo));
        let mut col = ndarray::Array2::<f64>::zeros((cin * ksz * ksz, ho * wo));
        for bi in 0..b {
            im2col(&x.index_axis(Axis(0), bi), ksz, stride, pad, ho, wo, &mut col);
            let y2 = k2.dot(&col); // (Cout, Ho*Wo)
            let mut dst = out.index_axis_mut(Axis(0), bi);
            for co in 0..cout {
                let row = y2.row(co);
                let mut plane = dst.index_axis_mut(Axis(0), co);
                plane
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(row.as_slice().unwrap());
            }
        }
        if let Some(bias) = bias {
            let bv = self
                .value(bias)
                .view()
                .into_dimensionality::<Ix1>()
                .expect("conv2d bias must be 1-d");
            assert_eq!(bv.len(), cout, "conv2d bias length mismatch");
            for co in 0..cout {
                let bval = bv[co];
                out.index_axis_mut(Axis(1), co).mapv_inplace(|v| v + bval);
            }
        }
        let tracked = self.tracked(input)
            || self.tracked(kernel)
            || bias.map(|bb| self.tracked(bb)).unwrap_or(false);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            tracked,
        )
    }

    /// Fully connected layer: (B, In) x (Out, In)^T + bias -> (B, Out).
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = self
            .value(input)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear input must be 2-d");
        let w = self
            .value(weight)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear weight must be 2-d");
        let bv = self
            .value(bias)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("linear bias must be 1-d");
        assert_eq!(x.shape()[1], w.shape()[1], "linear in-features mismatch");
        assert_eq!(w.shape()[0], bv.len(), "linear bias length mismatch");
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            row += &bv;
        }
        let tracked = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        self.push(y.into_dyn(), Op::Linear { input, weight, bias }, tracked)
    }

    /// Concatenate 4-d tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch");
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(v, Op::ConcatChannels(parts.to_vec()), tracked)
    }

    /// (B, C) -> (B, C, H, W) by repeating every entry over an HxW plane.
    pub fn broadcast_planes(&mut self, v: Var, h: usize, w: usize) -> Var {
        let src = self
            .value(v)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("broadcast_planes input must be 2-d");
        let (b, c) = (src.shape()[0], src.shape()[1]);
        let mut out = ndarray::Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                out.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .fill(src[[bi, ci]]);
            }
        }
        let tracked = self.tracked(v);
        self.push(out.into_dyn(), Op::BroadcastPlanes(v, h, w), tracked)
    }

    /// (B, C, H, W) -> (B, C*H*W).
    pub fn flatten(&mut self, v: Var) -> Var {
        let src = self.value(v);
        let b = src.shape()[0];
        let rest: usize = src.shape()[1..].iter().product();
        let out = src
            .to_shape((b, rest))
            .expect("flatten reshape")
            .to_owned()
            .into_dyn();
        let tracked = self.tracked(v);
        self.push(out, Op::Flatten(v), tracked)
    }

    /// Global average pooling: (B, C, H, W) -> (B, C).
    pub fn mean_spatial(&mut self, v: Var) -> Var {
        let src = self
            .value(v)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("mean_spatial input must be 4-d");
        let n = (src.shape()[2] * src.shape()[3]) as f64;
        let out = src.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|s| s / n);
        let tracked = self.tracked(v);
        self.push(out.into_dyn(), Op::MeanSpatial(v), tracked)
    }

    /// Correlate each feature map with each signature plane:
    /// out[b, k*L + i] = mean_p(input[b, k, p] * sigs[i, p]).
    pub fn correlate_planes(&mut self, input: Var, sigs: std::sync::Arc<Tensor>) -> Var {
        let x = self
            .value(input)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("correlate_planes input must be 4-d");
        let s = sigs
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("signatures must be 3-d");
        let (b, k, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let l = s.shape()[0];
        assert_eq!(
            (s.shape()[1], s.shape()[2]),
            (h, w),
            "signature spatial dims mismatch"
        );
        let n = (h * w) as f64;
        let mut out = ndarray::Array2::<f64>::zeros((b, k * l));
        for bi in 0..b {
            for ki in 0..k {
                let feat = x.index_axis(Axis(0), bi);
                let feat = feat.index_axis(Axis(0), ki);
                let feat_flat = feat.to_shape(h * w).unwrap();
                for li in 0..l {
                    let sig = s.index_axis(Axis(0), li);
                    let sig_flat = sig.to_shape(h * w).unwrap();
                    out[[bi, ki * l + li]] = feat_flat.dot(&sig_flat) / n;
                }
            }
        }
        let tracked = self.tracked(input);
        self.push(
            out.into_dyn(),
            Op::CorrelatePlanes { input, sigs },
            tracked,
        )
    }

    /// Mean over every element, producing a 0-d tensor.
    pub fn mean_all(&mut self, v: Var) -> Var {
        let src = self.value(v);
        let m = src.mean().expect("mean of empty tensor");
        let tracked = self.tracked(v);
        self.push(
            ndarray::arr0(m).into_dyn(),
            Op::MeanAll(v),
            tracked,
        )
    }

    /// Mean squared error between two same-shape tensors (0-d result).
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Orthonormal 8x8 block DCT (or its inverse) per (batch, channel) plane.
    /// Requires spatial dims divisible by 8.
    pub fn block_dct8(&mut self, input: Var, inverse: bool) -> Var {
        let x = self
            .value(input)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("block_dct8 input must be 4-d");
        let out = block_dct8_apply(&x, inverse);
        let tracked = self.tracked(input);
        self.push(out.into_dyn(), Op::BlockDct8 { input, inverse }, tracked)
    }

    /// Separable blur with an odd 1-d kernel; borders renormalize over the
    /// in-bounds taps so flat images stay flat.
    pub fn blur(&mut self, input: Var, kernel1d: &[f64]) -> Var {
        assert!(kernel1d.len() % 2 == 1, "blur kernel must have odd length");
        let x = self
            .value(input)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("blur input must be 4-d");
        let out = blur_apply(&x, kernel1d, false);
        let tracked = self.tracked(input);
        self.push(out.into_dyn(), Op::Blur(input, kernel1d.to_vec()), tracked)
    }

    /// Bilinear-resample the axis-aligned source rectangle (fractional pixel
    /// coordinates) back to the input's full spatial resolution.
    pub fn resample(&mut self, input: Var, top: f64, left: f64, height: f64, width: f64) -> Var {
        let x = self
            .value(input)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("resample input must be 4-d");
        let out = resample_forward(&x, top, left, height, width);
        let tracked = self.tracked(input);
        self.push(
            out.into_dyn(),
            Op::Resample {
                input,
                top,
                left,
                height,
                width,
            },
            tracked,
        )
    }

    /// Backpropagate from a scalar root. Returns gradients for every tracked
    /// node reachable from the root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.value(root).raw_dim()));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].tracked {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &contribution,
            slot => *slot = Some(contribution),
        }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g * self.value(*b));
                self.accumulate(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.mapv(|x| x * s)),
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                self.accumulate(grads, *a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let dx = x.mapv(|v| {
                    let s = sigmoid(v);
                    s + v * s * (1.0 - s)
                });
                self.accumulate(grads, *a, g * &dx);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let slope = *slope;
                let dx = x.mapv(|v| if v > 0.0 { 1.0 } else { slope });
                self.accumulate(grads, *a, g * &dx);
            }
            Op::SoftClamp01(a, k) => {
                let x = self.value(*a);
                let k = *k;
                let dx = x.mapv(|v| sigmoid(k * v) - sigmoid(k * (v - 1.0)));
                self.accumulate(grads, *a, g * &dx);
            }
            Op::HardClamp01(a) => {
                let x = self.value(*a);
                let dx = x.mapv(|v| if v > 0.0 && v < 1.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g * &dx);
            }
            Op::RoundSte(a) => self.accumulate(grads, *a, g.clone()),
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => self.conv2d_backward(g, *input, *kernel, *bias, *stride, *pad, grads),
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let x = self
                    .value(*input)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let w = self
                    .value(*weight)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                if self.tracked(*input) {
                    self.accumulate(grads, *input, g2.dot(&w).into_dyn());
                }
                if self.tracked(*weight) {
                    self.accumulate(grads, *weight, g2.t().dot(&x).into_dyn());
                }
                if self.tracked(*bias) {
                    self.accumulate(grads, *bias, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::ConcatChannels(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).shape()[1];
                    let slice = g
                        .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + c))
                        .to_owned();
                    self.accumulate(grads, *p, slice);
                    offset += c;
                }
            }
            Op::BroadcastPlanes(v, _, _) => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let summed = g4.sum_axis(Axis(3)).sum_axis(Axis(2));
                self.accumulate(grads, *v, summed.into_dyn());
            }
            Op::Flatten(v) => {
                let shape = self.value(*v).raw_dim();
                let back = g.to_shape(shape).expect("flatten backward reshape").to_owned();
                self.accumulate(grads, *v, back);
            }
            Op::MeanAll(v) => {
                let n = self.value(*v).len() as f64;
                let gs = g.iter().next().copied().unwrap() / n;
                let back = ArrayD::from_elem(self.value(*v).raw_dim(), gs);
                self.accumulate(grads, *v, back);
            }
            Op::CorrelatePlanes { input, sigs } => {
                let shape = self.value(*input).raw_dim();
                let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let s = sigs.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let l = s.shape()[0];
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let n = (h * w) as f64;
                let mut back = ndarray::Array4::<f64>::zeros((b, k, h, w));
                for bi in 0..b {
                    for ki in 0..k {
                        let mut dst = back.index_axis_mut(Axis(0), bi);
                        let mut dst = dst.index_axis_mut(Axis(0), ki);
                        for li in 0..l {
                            let gval = g2[[bi, ki * l + li]] / n;
                            if gval == 0.0 {
                                continue;
                            }
                            dst.scaled_add(gval, &s.index_axis(Axis(0), li));
                        }
                    }
                }
                self.accumulate(grads, *input, back.into_dyn());
            }
            Op::MeanSpatial(v) => {
                let shape = self.value(*v).raw_dim();
                let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let n = (h * w) as f64;
                let mut back = ndarray::Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        back.index_axis_mut(Axis(0), bi)
                            .index_axis_mut(Axis(0), ci)
                            .fill(g2[[bi, ci]] / n);
                    }
                }
                self.accumulate(grads, *v, back.into_dyn());
            }
            Op::BlockDct8 { input, inverse } => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                // The transform is orthonormal, so the adjoint is its inverse.
                let back = block_dct8_apply(&g4, !inverse);
                self.accumulate(grads, *input, back.into_dyn());
            }
            Op::Blur(input, kernel1d) => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let back = blur_apply(&g4, kernel1d, true);
                self.accumulate(grads, *input, back.into_dyn());
            }
            Op::Resample {
                input,
                top,
                left,
                height,
                width,
            } => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let src_shape = self.value(*input).raw_dim();
                let back = resample_backward(&g4, src_shape, *top, *left, *height, *width);
                self.accumulate(grads, *input, back);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let x = self
            .value(input)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let k = self
            .value(kernel)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, _, ksz, _) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let (ho, wo) = (g4.shape()[2], g4.shape()[3]);

        let k2 = k
            .to_shape((cout, cin * ksz * ksz))
            .expect("kernel reshape")
            .to_owned();
        let want_input = self.tracked(input);
        let want_kernel = self.tracked(kernel);
        let want_bias = bias.map(|bb| self.tracked(bb)).unwrap_or(false);

        let mut gx = ndarray::Array4::<f64>::zeros((b, cin, h, w));
        let mut gk2 = ndarray::Array2::<f64>::zeros((cout, cin * ksz * ksz));
        let mut col = ndarray::Array2::<f64>::zeros((cin * ksz * ksz, ho * wo));
        for bi in 0..b {
            let gb = g4.index_axis(Axis(0), bi);
            let g2 = gb.to_shape((cout, ho * wo)).expect("grad reshape").to_owned();
            if want_kernel {
                im2col(&x.index_axis(Axis(0), bi), ksz, stride, pad, ho, wo, &mut col);
                gk2 += &g2.dot(&col.t());
            }
            if want_input {
                let gcol = k2.t().dot(&g2); // (Cin*K*K, Ho*Wo)
                col2im(&gcol, ksz, stride, pad, ho, wo, &mut gx.index_axis_mut(Axis(0), bi));
            }
        }
        if want_input {
            self.accumulate(grads, input, gx.into_dyn());
        }
        if want_kernel {
            let gk = gk2
                .to_shape((cout, cin, ksz, ksz))
                .expect("kernel grad reshape")
                .to_owned();
            self.accumulate(grads, kernel, gk.into_dyn());
        }
        if want_bias {
            let gbias = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            self.accumulate(grads, bias.unwrap(), gbias.into_dyn());
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Smooth approximation of clamp(x, 0, 1) with strictly positive derivative.
fn soft_clamp(x: f64, k: f64) -> f64 {
    (softplus(k * x) - softplus(k * (x - 1.0))) / k
}

/// Gathers K x K patches of one (C, H, W) sample into a column matrix with
/// rows indexed by (channel, ky, kx) and columns by output position.
fn im2col(
    x: &ndarray::ArrayView3<f64>,
    ksz: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut ndarray::Array2<f64>,
) {
    col.fill(0.0);
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    for ci in 0..cin {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..ksz {
            for kx in 0..ksz {
                let row = (ci * ksz + ky) * ksz + kx;
                let mut col_row = col.row_mut(row);
                let col_slice = col_row.as_slice_mut().unwrap();
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = plane.row(iy as usize);
                    let src = src_row.as_slice().unwrap();
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col_slice[base + ox] = src[ix as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the input plane.
fn col2im(
    col: &ndarray::Array2<f64>,
    ksz: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    gx: &mut ndarray::ArrayViewMut3<f64>,
) {
    let (cin, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
    for ci in 0..cin {
        let mut plane = gx.index_axis_mut(Axis(0), ci);
        for ky in 0..ksz {
            for kx in 0..ksz {
                let row = (ci * ksz + ky) * ksz + kx;
                let col_row = col.row(row);
                let src = col_row.as_slice().unwrap();
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut dst_row = plane.row_mut(iy as usize);
                    let dst = dst_row.as_slice_mut().unwrap();
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[ix as usize] += src[base + ox];
                    }
                }
            }
        }
    }
}

/// Orthonormal DCT-II matrix of size 8.
fn dct8_matrix() -> ndarray::Array2<f64> {
    let n = 8usize;
    let mut c = ndarray::Array2::<f64>::zeros((n, n));
    for u in 0..n {
        let alpha = if u == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for xi in 0..n {
            c[[u, xi]] = alpha
                * ((2.0 * xi as f64 + 1.0) * u as f64 * std::f64::consts::PI / (2.0 * n as f64))
                    .cos();
        }
    }
    c
}

fn block_dct8_apply(x: &ndarray::ArrayView4<f64>, inverse: bool) -> ndarray::Array4<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h % 8 == 0 && w % 8 == 0, "block DCT needs dims divisible by 8");
    let m = dct8_matrix();
    let mt = m.t().to_owned();
    // Forward: C X C^T. Inverse: C^T Y C.
    let (a, bmat) = if inverse { (&mt, &m) } else { (&m, &mt) };
    let mut out = ndarray::Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            let mut dst = out.index_axis_mut(Axis(0), bi);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            for by in (0..h).step_by(8) {
                for bx in (0..w).step_by(8) {
                    let block = plane.slice(ndarray::s![by..by + 8, bx..bx + 8]).to_owned();
                    let t = a.dot(&block).dot(bmat);
                    dst.slice_mut(ndarray::s![by..by + 8, bx..bx + 8]).assign(&t);
                }
            }
        }
    }
    out
}

/// Separable blur pass; `transpose` applies the adjoint (for backprop).
/// Border positions renormalize by the sum of in-bounds taps.
fn blur_apply(x: &ndarray::ArrayView4<f64>, kernel: &[f64], transpose: bool) -> ndarray::Array4<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let r = kernel.len() / 2;

    let norm_1d = |len: usize| -> Vec<f64> {
        (0..len)
            .map(|i| {
                let mut s = 0.0;
                for (ti, &kv) in kernel.iter().enumerate() {
                    let j = i as isize + ti as isize - r as isize;
                    if j >= 0 && j < len as isize {
                        s += kv;
                    }
                }
                s
            })
            .collect()
    };
    let norm_h = norm_1d(h);
    let norm_w = norm_1d(w);

    let pass =
        |src: &ndarray::Array4<f64>, vertical: bool| -> ndarray::Array4<f64> {
            let len = if vertical { h } else { w };
            let norms = if vertical { &norm_h } else { &norm_w };
            let mut dst = ndarray::Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..h {
                        for xq in 0..w {
                            let i = if vertical { y } else { xq };
                            let mut acc = 0.0;
                            for (ti, &kv) in kernel.iter().enumerate() {
                                let j = i as isize + ti as isize - r as isize;
                                if j < 0 || j >= len as isize {
                                    continue;
                                }
                                let (sy, sx) = if vertical {
                                    (j as usize, xq)
                                } else {
                                    (y, j as usize)
                                };
                                // Adjoint divides by the norm at the position
                                // that produced the output, i.e. the source.
                                let weight = if transpose { kv / norms[j as usize] } else { kv };
                                acc += weight * src[[bi, ci, sy, sx]];
                            }
                            if !transpose {
                                acc /= norms[i];
                            }
                            dst[[bi, ci, y, xq]] = acc;
                        }
                    }
                }
            }
            dst
        };

    let owned = x.to_owned();
    if transpose {
        // Adjoint of (horizontal after vertical) is vertical-adjoint after
        // horizontal-adjoint; each 1-d adjoint uses the same symmetric taps.
        let t1 = pass(&owned, false);
        pass(&t1, true)
    } else {
        let t1 = pass(&owned, true);
        pass(&t1, false)
    }
}

fn bilinear_taps(center: f64, len: usize) -> (usize, usize, f64) {
    // Clamp the sampling point into the valid range, then split into the two
    // neighbouring integer taps and the interpolation weight.
    let p = center.clamp(0.0, (len - 1) as f64);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - i0 as f64)
}

fn resample_forward(
    x: &ndarray::ArrayView4<f64>,
    top: f64,
    left: f64,
    height: f64,
    width: f64,
) -> ndarray::Array4<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = ndarray::Array4::<f64>::zeros((b, c, h, w));
    for oy in 0..h {
        let sy = top + (oy as f64 + 0.5) * height / h as f64 - 0.5;
        let (y0, y1, fy) = bilinear_taps(sy, h);
        for ox in 0..w {
            let sx = left + (ox as f64 + 0.5) * width / w as f64 - 0.5;
            let (x0, x1, fx) = bilinear_taps(sx, w);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            for bi in 0..b {
                for ci in 0..c {
                    out[[bi, ci, oy, ox]] = w00 * x[[bi, ci, y0, x0]]
                        + w01 * x[[bi, ci, y0, x1]]
                        + w10 * x[[bi, ci, y1, x0]]
                        + w11 * x[[bi, ci, y1, x1]];
                }
            }
        }
    }
    out
}

fn resample_backward(
    g: &ndarray::ArrayView4<f64>,
    src_shape: IxDyn,
    top: f64,
    left: f64,
    height: f64,
    width: f64,
) -> Tensor {
    let (b, c, h, w) = (
        src_shape[0],
        src_shape[1],
        src_shape[2],
        src_shape[3],
    );
    let mut gx = ndarray::Array4::<f64>::zeros((b, c, h, w));
    for oy in 0..h {
        let sy = top + (oy as f64 + 0.5) * height / h as f64 - 0.5;
        let (y0, y1, fy) = bilinear_taps(sy, h);
        for ox in 0..w {
            let sx = left + (ox as f64 + 0.5) * width / w as f64 - 0.5;
            let (x0, x1, fx) = bilinear_taps(sx, w);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            for bi in 0..b {
                for ci in 0..c {
                    let gv = g[[bi, ci, oy, ox]];
                    gx[[bi, ci, y0, x0]] += w00 * gv;
                    gx[[bi, ci, y0, x1]] += w01 * gv;
                    gx[[bi, ci, y1, x0]] += w10 * gv;
                    gx[[bi, ci, y1, x1]] += w11 * gv;
                }
            }
        }
    }
    gx.into_dyn()
}
