//! Watermark codec: carrier images, payload messages and the differentiable
//! encoder / decoder-head(s) / discriminator models.
//!
//! The encoder projects the payload to a few channels, broadcasts them over
//! the carrier, and predicts a bounded residual that is added to the image.
//! Decoder heads downsample three times and read the payload back as `L`
//! logits. The `multi_head_aux` architecture carries two primary heads plus
//! an auxiliary head trained to emit the zero vector on watermarked inputs.

use std::sync::Arc;

use ndarray::{Array2, Array3, Array4, Axis, Ix4, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundVars, Conv, Dense, ConvVars, DenseVars, ParamBlock};
use crate::rng::{self, tag};
use rand::Rng as _;

/// An RGB carrier image with values in [0, 1], spatial dims multiples of 8.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>, // (3, H, W)
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let shape = data.shape();
        if shape[0] != 3 {
            return Err(Error::Shape {
                expected: "(3, H, W)".into(),
                got: format!("{:?}", shape),
            });
        }
        let (h, w) = (shape[1], shape[2]);
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Input(format!(
                "image dims must be positive multiples of 8, got {h}x{w}"
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Input(
                "image values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Image { data })
    }

    /// Build from a generator over (channel, y, x); values are hard-clamped.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let data = Array3::from_shape_fn((3, h, w), |(c, y, x)| f(c, y, x).clamp(0.0, 1.0));
        Image::new(data)
    }

    /// Internal constructor for values already guaranteed in range.
    pub(crate) fn from_clamped(data: Array3<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        Image { data }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// An L-bit payload; bits are 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Input("message must contain at least one bit".into()));
        }
        if !bits.iter().all(|&b| b == 0 || b == 1) {
            return Err(Error::Input("message bits must be 0 or 1".into()));
        }
        Ok(Message { bits })
    }

    pub fn random(len: usize, rng: &mut impl rand::Rng) -> Self {
        Message {
            bits: (0..len).map(|_| u8::from(rng.random::<bool>())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Model-side representation: bit 1 -> +amplitude, bit 0 -> -amplitude.
    pub fn to_signal(&self, amplitude: f64) -> Signal {
        Signal {
            values: self
                .bits
                .iter()
                .map(|&b| if b == 1 { amplitude } else { -amplitude })
                .collect(),
        }
    }
}

/// The signed representation of a message, values in {-a, +a}.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    values: Vec<f64>,
}

impl Signal {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Map soft decoder outputs back to bits: strictly positive -> 1, else 0.
/// Zero maps to 0. NaN anywhere is a numeric error.
pub fn binarize(soft: &[f64]) -> Result<Message> {
    if soft.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("binarize received NaN logits".into()));
    }
    Message::new(soft.iter().map(|&v| u8::from(v > 0.0)).collect())
}

/// Which decoder-head layout a codec carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// One primary decoder head.
    SingleHead,
    /// Two (or more) primary heads plus an auxiliary zero-output head.
    MultiHeadAux,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Architecture::SingleHead => write!(f, "single_head"),
            Architecture::MultiHeadAux => write!(f, "multi_head_aux"),
        }
    }
}

/// Structural hyperparameters of a codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub architecture: Architecture,
    /// Square carrier side length; multiple of 8, at least 8.
    pub image_size: usize,
    /// Payload length L in bits.
    pub payload_len: usize,
    /// Amplitude of the signed message representation.
    pub amplitude: f64,
    /// Hidden width of the encoder convolutions.
    pub enc_channels: usize,
    /// Hidden width of decoder/discriminator convolutions.
    pub dec_channels: usize,
    /// Feature maps the decoder despreads against the signature planes.
    pub demod_channels: usize,
    /// Scale of the tanh-bounded residual the encoder may add.
    pub residual_scale: f64,
    /// Number of primary decoder heads (1 for single_head).
    pub primary_heads: usize,
}

impl CodecConfig {
    /// Desk-scale defaults: 64x64 carriers, 30-bit payload.
    pub fn desk(architecture: Architecture) -> Self {
        CodecConfig {
            architecture,
            image_size: 64,
            payload_len: 30,
            amplitude: 1.0,
            enc_channels: 12,
            dec_channels: 12,
            demod_channels: 4,
            residual_scale: 0.05,
            primary_heads: match architecture {
                Architecture::SingleHead => 1,
                Architecture::MultiHeadAux => 2,
            },
        }
    }

    /// Tiny probe model for gradient verification: 8x8 carriers, 8 bits.
    pub fn probe(architecture: Architecture) -> Self {
        CodecConfig {
            architecture,
            image_size: 8,
            payload_len: 8,
            amplitude: 1.0,
            enc_channels: 6,
            dec_channels: 6,
            demod_channels: 3,
            residual_scale: 0.05,
            primary_heads: match architecture {
                Architecture::SingleHead => 1,
                Architecture::MultiHeadAux => 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(Error::config(
                "image_size",
                format!("must be a multiple of 8 and >= 8, got {}", self.image_size),
            ));
        }
        if self.payload_len == 0 {
            return Err(Error::config("payload_len", "must be positive"));
        }
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(Error::config("amplitude", "must be a positive finite real"));
        }
        for (field, v) in [
            ("enc_channels", self.enc_channels),
            ("dec_channels", self.dec_channels),
            ("demod_channels", self.demod_channels),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.residual_scale.is_finite() && self.residual_scale > 0.0 && self.residual_scale <= 1.0) {
            return Err(Error::config("residual_scale", "must be in (0, 1]"));
        }
        match self.architecture {
            Architecture::SingleHead if self.primary_heads != 1 => Err(Error::config(
                "primary_heads",
                format!("single_head requires exactly 1, got {}", self.primary_heads),
            )),
            Architecture::MultiHeadAux if self.primary_heads < 2 => Err(Error::config(
                "primary_heads",
                format!("multi_head_aux requires >= 2, got {}", self.primary_heads),
            )),
            _ => Ok(()),
        }
    }

}

/// Residual-predicting encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub conv_in: Conv,
    pub conv_mid: Conv,
    pub conv_out: Conv,
    residual_scale: f64,
}

impl ParamBlock for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("conv_in.kernel", &self.conv_in.kernel);
        f("conv_in.bias", &self.conv_in.bias);
        f("conv_mid.kernel", &self.conv_mid.kernel);
        f("conv_mid.bias", &self.conv_mid.bias);
        f("conv_out.kernel", &self.conv_out.kernel);
        f("conv_out.bias", &self.conv_out.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("conv_in.kernel", &mut self.conv_in.kernel);
        f("conv_in.bias", &mut self.conv_in.bias);
        f("conv_mid.kernel", &mut self.conv_mid.kernel);
        f("conv_mid.bias", &mut self.conv_mid.bias);
        f("conv_out.kernel", &mut self.conv_out.kernel);
        f("conv_out.bias", &mut self.conv_out.bias);
    }
}

/// A decoder head: a convolutional front end over the image and its
/// high-pass component, despreading against the model's signature planes,
/// then a dense readout that unmixes the correlations into logits.
#[derive(Debug, Clone)]
pub struct DecoderHead {
    pub conv1: Conv,
    pub conv2: Conv,
    pub readout: Dense,
}

impl ParamBlock for DecoderHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("conv1.kernel", &self.conv1.kernel);
        f("conv1.bias", &self.conv1.bias);
        f("conv2.kernel", &self.conv2.kernel);
        f("conv2.bias", &self.conv2.bias);
        f("readout.weight", &self.readout.weight);
        f("readout.bias", &self.readout.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("conv1.kernel", &mut self.conv1.kernel);
        f("conv1.bias", &mut self.conv1.bias);
        f("conv2.kernel", &mut self.conv2.kernel);
        f("conv2.bias", &mut self.conv2.bias);
        f("readout.weight", &mut self.readout.weight);
        f("readout.bias", &mut self.readout.bias);
    }
}

/// Binary critic scoring how watermark-like an image looks: conv stack,
/// global average pooling, scalar readout.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub conv1: Conv,
    pub conv2: Conv,
    pub readout: Dense,
}

impl ParamBlock for Discriminator {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("conv1.kernel", &self.conv1.kernel);
        f("conv1.bias", &self.conv1.bias);
        f("conv2.kernel", &self.conv2.kernel);
        f("conv2.bias", &self.conv2.bias);
        f("readout.weight", &self.readout.weight);
        f("readout.bias", &self.readout.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("conv1.kernel", &mut self.conv1.kernel);
        f("conv1.bias", &mut self.conv1.bias);
        f("conv2.kernel", &mut self.conv2.kernel);
        f("conv2.bias", &mut self.conv2.bias);
        f("readout.weight", &mut self.readout.weight);
        f("readout.bias", &mut self.readout.bias);
    }
}

/// A complete watermark codec.
#[derive(Debug, Clone)]
pub struct CodecModel {
    pub model_id: String,
    pub config: CodecConfig,
    /// Per-bit pseudo-random +/-1 signature planes (L, H, W), derived from
    /// `signature_seed`. Fixed buffers, not trainable parameters.
    pub signatures: Arc<Tensor>,
    pub signature_seed: u64,
    pub encoder: Encoder,
    pub heads: Vec<DecoderHead>,
    pub aux_head: Option<DecoderHead>,
    pub discriminator: Discriminator,
    /// Number of optimizer steps this model has absorbed.
    pub training_step: usize,
}

/// Generate the per-bit signature planes for a codec.
pub fn signature_planes(seed: u64, payload_len: usize, size: usize) -> Tensor {
    let mut r = rng::substream(seed, &[tag::SIGNATURES]);
    Tensor::from_shape_fn(IxDyn(&[payload_len, size, size]), |_| {
        if r.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    })
}

fn init_head(config: &CodecConfig, rng: &mut rand_chacha::ChaCha12Rng) -> DecoderHead {
    let d = config.dec_channels;
    let k = config.demod_channels;
    let l = config.payload_len;
    DecoderHead {
        conv1: Conv::init(6, d, 3, 1, 1, rng),
        conv2: Conv::init(d, k, 3, 1, 1, rng),
        readout: Dense::init(k * l, l, rng),
    }
}

impl CodecModel {
    /// Deterministically initialize a codec from a config and seed.
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let l = config.payload_len;

        let signatures = Arc::new(signature_planes(seed, l, config.image_size));

        let mut enc_rng = rng::substream(seed, &[tag::ENCODER]);
        let encoder = Encoder {
            conv_in: Conv::init(4, config.enc_channels, 3, 1, 1, &mut enc_rng),
            conv_mid: Conv::init(config.enc_channels, config.enc_channels, 3, 1, 1, &mut enc_rng),
            conv_out: Conv::init(config.enc_channels, 3, 3, 1, 1, &mut enc_rng),
            residual_scale: config.residual_scale,
        };

        let heads = (0..config.primary_heads)
            .map(|i| {
                let mut r = rng::substream(seed, &[tag::DECODER_HEAD, i as u64]);
                init_head(&config, &mut r)
            })
            .collect();

        let aux_head = match config.architecture {
            Architecture::SingleHead => None,
            Architecture::MultiHeadAux => {
                let mut r = rng::substream(seed, &[tag::AUX_HEAD]);
                Some(init_head(&config, &mut r))
            }
        };

        let mut disc_rng = rng::substream(seed, &[tag::DISCRIMINATOR]);
        let d = config.dec_channels;
        let discriminator = Discriminator {
            conv1: Conv::init(6, d, 3, 1, 1, &mut disc_rng),
            conv2: Conv::init(d, d, 3, 2, 1, &mut disc_rng),
            readout: Dense::init(d, 1, &mut disc_rng),
        };

        let model_id = format!(
            "{}_L{}_e{}d{}_seed{}",
            config.architecture, l, config.enc_channels, config.dec_channels, seed
        );

        Ok(CodecModel {
            model_id,
            config,
            signatures,
            signature_seed: seed,
            encoder,
            heads,
            aux_head,
            discriminator,
            training_step: 0,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = id.into();
        self
    }

    /// Number of primary decoder heads.
    pub fn primary_head_count(&self) -> usize {
        self.heads.len()
    }

    /// (component name, parameter count) for every parameter group.
    pub fn parameter_groups(&self) -> Vec<(String, usize)> {
        let mut groups = vec![("encoder".to_string(), self.encoder.param_count())];
        for (i, h) in self.heads.iter().enumerate() {
            groups.push((format!("decoder_head_{}", i + 1), h.param_count()));
        }
        if let Some(aux) = &self.aux_head {
            groups.push(("aux_zero_head".to_string(), aux.param_count()));
        }
        groups.push(("discriminator".to_string(), self.discriminator.param_count()));
        groups
    }

    pub fn param_count(&self) -> usize {
        self.parameter_groups().iter().map(|(_, n)| n).sum()
    }

    fn ensure_finite(&self) -> Result<()> {
        let ok = self.encoder.all_finite()
            && self.heads.iter().all(|h| h.all_finite())
            && self.aux_head.as_ref().map(|h| h.all_finite()).unwrap_or(true)
            && self.discriminator.all_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::ModelState(
                "model contains non-finite parameters".into(),
            ))
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::Shape {
                expected: format!("{s}x{s} image (model config)"),
                got: format!("{}x{}", image.height(), image.width()),
            });
        }
        Ok(())
    }

    /// Embed `message` into `image` (evaluation mode, hard clamp).
    pub fn embed(&self, image: &Image, message: &Message) -> Result<Image> {
        self.ensure_finite()?;
        self.check_image(image)?;
        if message.len() != self.config.payload_len {
            return Err(Error::Input(format!(
                "message length {} does not match payload_len {}",
                message.len(),
                self.config.payload_len
            )));
        }
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(images_to_batch(std::slice::from_ref(image)));
        let sig = signals_to_tensor(&[message.to_signal(self.config.amplitude)]);
        let plane = g.constant(modulation_plane(&sig, &self.signatures));
        let enc = self.encoder.bind(&mut g, false, &mut BoundVars::default());
        let xw = enc.embed(&mut g, x, plane);
        let batch = g.value(xw).view().into_dimensionality::<Ix4>().unwrap().to_owned();
        Ok(batch_to_images(&batch).remove(0))
    }

    /// Soft-decode `image` with the addressed head (evaluation mode).
    /// Index 0 addresses the auxiliary zero head; 1..=k the primary heads.
    pub fn decode(&self, image: &Image, head_index: usize) -> Result<Vec<f64>> {
        self.ensure_finite()?;
        self.check_image(image)?;
        let head = self.head(head_index)?;
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(images_to_batch(std::slice::from_ref(image)));
        let hv = head.bind_head(&mut g, false, &mut BoundVars::default());
        let logits = hv.decode(&mut g, x, self.signatures.clone());
        Ok(g.value(logits).iter().copied().collect())
    }

    /// Resolve a head index per the addressing convention.
    pub fn head(&self, head_index: usize) -> Result<&DecoderHead> {
        if head_index == 0 {
            return self.aux_head.as_ref().ok_or_else(|| {
                Error::Addressing(format!(
                    "head index 0 addresses the auxiliary zero head, but architecture `{}` has none",
                    self.config.architecture
                ))
            });
        }
        self.heads.get(head_index - 1).ok_or_else(|| {
            Error::Addressing(format!(
                "head index {head_index} out of range: model has {} primary head(s)",
                self.heads.len()
            ))
        })
    }
}

// Graph-side bindings.

/// Encoder bound into a graph.
#[derive(Clone, Copy)]
pub struct EncoderVars {
    conv_in: ConvVars,
    conv_mid: ConvVars,
    conv_out: ConvVars,
    residual_scale: f64,
}

impl Encoder {
    pub fn bind(&self, g: &mut Graph, track: bool, order: &mut BoundVars) -> EncoderVars {
        let conv_in = self.conv_in.bind(g, track);
        let conv_mid = self.conv_mid.bind(g, track);
        let conv_out = self.conv_out.bind(g, track);
        order.push_conv(&conv_in);
        order.push_conv(&conv_mid);
        order.push_conv(&conv_out);
        EncoderVars {
            conv_in,
            conv_mid,
            conv_out,
            residual_scale: self.residual_scale,
        }
    }
}

impl EncoderVars {
    /// Watermark a batch: `x` is (B, 3, H, W), `modulation` is the
    /// signature-spread payload plane (B, 1, H, W). Returns the clamped
    /// watermarked batch (clamp mode follows the graph).
    pub fn embed(&self, g: &mut Graph, x: Var, modulation: Var) -> Var {
        let cat = g.concat_channels(&[x, modulation]);
        let h1 = self.conv_in.apply(g, cat);
        let h1 = g.silu(h1);
        let h2 = self.conv_mid.apply(g, h1);
        let h2 = g.silu(h2);
        let res = self.conv_out.apply(g, h2);
        let res = g.tanh(res);
        let res = g.scale(res, self.residual_scale);
        let sum = g.add(x, res);
        g.clamp01(sum)
    }
}

/// Decoder head bound into a graph.
#[derive(Clone, Copy)]
pub struct HeadVars {
    conv1: ConvVars,
    conv2: ConvVars,
    readout: DenseVars,
}

impl DecoderHead {
    pub fn bind_head(&self, g: &mut Graph, track: bool, order: &mut BoundVars) -> HeadVars {
        let conv1 = self.conv1.bind(g, track);
        let conv2 = self.conv2.bind(g, track);
        let readout = self.readout.bind(g, track);
        order.push_conv(&conv1);
        order.push_conv(&conv2);
        order.push_dense(&readout);
        HeadVars {
            conv1,
            conv2,
            readout,
        }
    }
}

/// Taps of the fixed separable blur behind the high-pass front ends.
const HP_BLUR: [f64; 3] = [0.25, 0.5, 0.25];

/// Image plus its high-pass component: watermark residuals are broadband
/// while carriers are texture-dominated, so the fixed filter lifts the
/// embedded signal above carrier interference.
fn with_highpass(g: &mut Graph, x: Var) -> Var {
    let blurred = g.blur(x, &HP_BLUR);
    let hp = g.sub(x, blurred);
    g.concat_channels(&[x, hp])
}

impl HeadVars {
    /// Produce (B, L) logits from a (B, 3, H, W) batch by despreading conv
    /// features against the codec's signature planes.
    pub fn decode(&self, g: &mut Graph, x: Var, signatures: Arc<Tensor>) -> Var {
        let input = with_highpass(g, x);
        let h1 = self.conv1.apply(g, input);
        let h1 = g.silu(h1);
        let feats = self.conv2.apply(g, h1);
        let corr = g.correlate_planes(feats, signatures);
        self.readout.apply(g, corr)
    }
}

/// Discriminator bound into a graph.
#[derive(Clone, Copy)]
pub struct CriticVars {
    conv1: ConvVars,
    conv2: ConvVars,
    readout: DenseVars,
}

impl Discriminator {
    pub fn bind_critic(&self, g: &mut Graph, track: bool, order: &mut BoundVars) -> CriticVars {
        let conv1 = self.conv1.bind(g, track);
        let conv2 = self.conv2.bind(g, track);
        let readout = self.readout.bind(g, track);
        order.push_conv(&conv1);
        order.push_conv(&conv2);
        order.push_dense(&readout);
        CriticVars {
            conv1,
            conv2,
            readout,
        }
    }
}

impl CriticVars {
    /// Produce a (B, 1) realness score.
    pub fn score(&self, g: &mut Graph, x: Var) -> Var {
        let input = with_highpass(g, x);
        let h1 = self.conv1.apply(g, input);
        let h1 = g.silu(h1);
        let h2 = self.conv2.apply(g, h1);
        let h2 = g.silu(h2);
        let pooled = g.mean_spatial(h2);
        self.readout.apply(g, pooled)
    }
}

// Tensor conversions.

/// Stack images into a (B, 3, H, W) tensor.
pub fn images_to_batch(images: &[impl std::borrow::Borrow<Image>]) -> Tensor {
    assert!(!images.is_empty());
    let first = images[0].borrow();
    let (h, w) = (first.height(), first.width());
    let mut out = Array4::<f64>::zeros((images.len(), 3, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img.borrow().data());
    }
    out.into_dyn()
}

/// Split a clamped (B, 3, H, W) tensor back into images.
pub fn batch_to_images(batch: &Array4<f64>) -> Vec<Image> {
    (0..batch.shape()[0])
        .map(|i| Image::from_clamped(batch.index_axis(Axis(0), i).to_owned()))
        .collect()
}

/// Stack signed signals into a (B, L) tensor.
pub fn signals_to_tensor(signals: &[Signal]) -> Tensor {
    assert!(!signals.is_empty());
    let l = signals[0].len();
    let mut out = Array2::<f64>::zeros((signals.len(), l));
    for (i, s) in signals.iter().enumerate() {
        for (j, &v) in s.values().iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out.into_dyn()
}

/// Zero tensor shaped like a batch of signals; target of the auxiliary head.
pub fn zero_signal_tensor(batch: usize, l: usize) -> Tensor {
    Tensor::zeros(IxDyn(&[batch, l]))
}

/// Spread a batch of signed signals over the signature planes:
/// m[b, 0, p] = sum_i signal[b, i] * sig[i, p] / sqrt(L).
pub fn modulation_plane(signals: &Tensor, signatures: &Tensor) -> Tensor {
    let s2 = signals.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let t3 = signatures
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let (b, l) = (s2.shape()[0], s2.shape()[1]);
    let (lt, h, w) = (t3.shape()[0], t3.shape()[1], t3.shape()[2]);
    assert_eq!(l, lt, "signal/signature payload length mismatch");
    let norm = 1.0 / (l as f64).sqrt();
    let mut out = Array4::<f64>::zeros((b, 1, h, w));
    for bi in 0..b {
        let mut plane = out.index_axis_mut(Axis(0), bi);
        let mut plane = plane.index_axis_mut(Axis(0), 0);
        for li in 0..l {
            plane.scaled_add(s2[[bi, li]] * norm, &t3.index_axis(Axis(0), li));
        }
    }
    out.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn test_image(size: usize, seed: u64) -> Image {
        let mut r = ChaCha12Rng::seed_from_u64(seed);
        let noise: Vec<f64> = (0..3 * size * size)
            .map(|_| rand::Rng::random_range(&mut r, 0.2..0.8))
            .collect();
        Image::from_fn(size, size, |c, y, x| {
            noise[(c * size + y) * size + x] + 0.1 * ((x + y) as f64 / size as f64 - 0.5)
        })
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = CodecConfig::desk(Architecture::SingleHead);
        let a = CodecModel::init(cfg.clone(), 7).unwrap();
        let b = CodecModel::init(cfg, 7).unwrap();
        let mut equal = true;
        a.encoder.visit(&mut |name, t| {
            let mut found = false;
            b.encoder.visit(&mut |n2, t2| {
                if n2 == name {
                    found = true;
                    equal &= t == t2;
                }
            });
            assert!(found);
        });
        assert!(equal, "same (config, seed) must give identical parameters");
        assert_eq!(a.model_id, b.model_id);
    }

    #[test]
    fn single_head_structure() {
        let model = CodecModel::init(CodecConfig::desk(Architecture::SingleHead), 3).unwrap();
        assert_eq!(model.primary_head_count(), 1);
        assert!(model.aux_head.is_none());
        let names: Vec<String> = model.parameter_groups().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["encoder", "decoder_head_1", "discriminator"]);
    }

    #[test]
    fn multi_head_aux_structure_by_group_enumeration() {
        let model = CodecModel::init(CodecConfig::desk(Architecture::MultiHeadAux), 3).unwrap();
        assert_eq!(model.primary_head_count(), 2);
        assert!(model.aux_head.is_some());
        let groups = model.parameter_groups();
        let names: Vec<&str> = groups.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "encoder",
                "decoder_head_1",
                "decoder_head_2",
                "aux_zero_head",
                "discriminator"
            ]
        );
        // Parameter count is stable for a given config.
        let again = CodecModel::init(CodecConfig::desk(Architecture::MultiHeadAux), 99).unwrap();
        assert_eq!(model.param_count(), again.param_count());
    }

    #[test]
    fn embed_preserves_shape_and_range() {
        let model = CodecModel::init(CodecConfig::desk(Architecture::SingleHead), 5).unwrap();
        let img = test_image(64, 1);
        let mut r = ChaCha12Rng::seed_from_u64(2);
        let msg = Message::random(30, &mut r);
        let out = model.embed(&img, &msg).unwrap();
        assert_eq!(out.height(), 64);
        assert_eq!(out.width(), 64);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn re_embedding_is_accepted() {
        let model = CodecModel::init(CodecConfig::desk(Architecture::SingleHead), 5).unwrap();
        let img = test_image(64, 1);
        let mut r = ChaCha12Rng::seed_from_u64(3);
        let w1 = Message::random(30, &mut r);
        let w2 = Message::random(30, &mut r);
        let once = model.embed(&img, &w1).unwrap();
        let twice = model.embed(&once, &w2).unwrap();
        let soft = model.decode(&twice, 1).unwrap();
        assert_eq!(soft.len(), 30);
    }

    #[test]
    fn decode_on_zero_image_is_finite() {
        let model = CodecModel::init(CodecConfig::desk(Architecture::SingleHead), 5).unwrap();
        let zeros = Image::new(Array3::zeros((3, 64, 64))).unwrap();
        let soft = model.decode(&zeros, 1).unwrap();
        assert_eq!(soft.len(), 30);
        assert!(soft.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn head_addressing_errors() {
        let single = CodecModel::init(CodecConfig::desk(Architecture::SingleHead), 5).unwrap();
        let img = test_image(64, 4);
        assert!(matches!(
            single.decode(&img, 0),
            Err(Error::Addressing(_))
        ));
        assert!(matches!(single.decode(&img, 2), Err(Error::Addressing(_))));

        let multi = CodecModel::init(CodecConfig::desk(Architecture::MultiHeadAux), 5).unwrap();
        assert!(multi.decode(&img, 0).is_ok());
        assert!(multi.decode(&img, 2).is_ok());
        assert!(multi.decode(&img, 3).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_input_error() {
        let model = CodecModel::init(CodecConfig::desk(Architecture::SingleHead), 5).unwrap();
        let small = test_image(32, 1);
        assert!(model.embed(&small, &Message::new(vec![1; 30]).unwrap()).is_err());
        let img = test_image(64, 1);
        assert!(model.embed(&img, &Message::new(vec![1; 8]).unwrap()).is_err());
    }

    #[test]
    fn non_finite_params_rejected() {
        let mut model = CodecModel::init(CodecConfig::desk(Architecture::SingleHead), 5).unwrap();
        model.encoder.conv_in.kernel[[0, 0, 0, 0]] = f64::NAN;
        let img = test_image(64, 1);
        let msg = Message::new(vec![0; 30]).unwrap();
        assert!(matches!(
            model.embed(&img, &msg),
            Err(Error::ModelState(_))
        ));
    }

    #[test]
    fn binarize_spec_cases() {
        let m = binarize(&[0.3, -0.2, 0.0, 1e-9]).unwrap();
        assert_eq!(m.bits(), &[1, 0, 0, 1]);
        let all_pos = binarize(&[0.5, 2.0, 1e-12]).unwrap();
        assert_eq!(all_pos.bits(), &[1, 1, 1]);
        assert!(matches!(
            binarize(&[0.1, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn binarize_inverts_signal_mapping() {
        let mut r = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let msg = Message::random(30, &mut r);
            let sig = msg.to_signal(1.0);
            assert_eq!(binarize(sig.values()).unwrap(), msg);
            let sig_small = msg.to_signal(0.25);
            assert_eq!(binarize(sig_small.values()).unwrap(), msg);
        }
    }

    #[test]
    fn config_validation_names_offending_field() {
        let mut cfg = CodecConfig::desk(Architecture::SingleHead);
        cfg.image_size = 60;
        match CodecModel::init(cfg, 1) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "image_size"),
            other => panic!("expected config error, got {other:?}"),
        }
        let mut cfg = CodecConfig::desk(Architecture::SingleHead);
        cfg.primary_heads = 2;
        assert!(matches!(
            CodecModel::init(cfg, 1),
            Err(Error::Config { .. })
        ));
    }
}
