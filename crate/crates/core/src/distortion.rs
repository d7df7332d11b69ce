//! The adjustable distortion channel applied between embedding and decoding
//! (and between the two embeddings during resilience fine-tuning).
//!
//! Randomness is *realized* before any graph op is created: noise fields,
//! dropout masks and crop offsets are drawn from the caller's stream into a
//! [`Realized`] value, which then applies as a deterministic differentiable
//! function of the input image. This keeps training graphs pure and makes
//! every distortion replayable for gradient verification.
//!
//! Parameter ranges enforced by validation:
//! - `gaussian_noise`: sigma in [0, 0.5]
//! - `gaussian_blur`: odd kernel_size in 1..=9, sigma in (0, 5]
//! - `jpeg_approx`: quality in [10, 95]
//! - `dropout`: keep_prob in (0, 1]
//! - `crop_resize`: crop_fraction in [0.5, 1]

use ndarray::{Array4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::codec::{batch_to_images, images_to_batch, Image};
use crate::error::{Error, Result};

/// Distortion family plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistortionKind {
    Identity,
    GaussianNoise { sigma: f64 },
    GaussianBlur { kernel_size: usize, sigma: f64 },
    JpegApprox { quality: u32 },
    Dropout { keep_prob: f64 },
    CropResize { crop_fraction: f64 },
}

impl DistortionKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DistortionKind::Identity => Ok(()),
            DistortionKind::GaussianNoise { sigma } => {
                if (0.0..=0.5).contains(&sigma) && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config("gaussian_noise.sigma", "must be in [0, 0.5]"))
                }
            }
            DistortionKind::GaussianBlur { kernel_size, sigma } => {
                if kernel_size % 2 != 1 || kernel_size > 9 {
                    return Err(Error::config(
                        "gaussian_blur.kernel_size",
                        "must be odd and at most 9",
                    ));
                }
                if !(sigma.is_finite() && sigma > 0.0 && sigma <= 5.0) {
                    return Err(Error::config("gaussian_blur.sigma", "must be in (0, 5]"));
                }
                Ok(())
            }
            DistortionKind::JpegApprox { quality } => {
                if (10..=95).contains(&quality) {
                    Ok(())
                } else {
                    Err(Error::config("jpeg_approx.quality", "must be in [10, 95]"))
                }
            }
            DistortionKind::Dropout { keep_prob } => {
                if keep_prob.is_finite() && keep_prob > 0.0 && keep_prob <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::config("dropout.keep_prob", "must be in (0, 1]"))
                }
            }
            DistortionKind::CropResize { crop_fraction } => {
                if crop_fraction.is_finite() && (0.5..=1.0).contains(&crop_fraction) {
                    Ok(())
                } else {
                    Err(Error::config("crop_resize.crop_fraction", "must be in [0.5, 1]"))
                }
            }
        }
    }
}

/// One pool entry: a distortion and its selection probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    #[serde(flatten)]
    pub kind: DistortionKind,
    pub probability: f64,
}

/// A validated distortion pool; probabilities sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DistortionSpec>", into = "Vec<DistortionSpec>")]
pub struct DistortionPool {
    specs: Vec<DistortionSpec>,
}

impl TryFrom<Vec<DistortionSpec>> for DistortionPool {
    type Error = Error;
    fn try_from(specs: Vec<DistortionSpec>) -> Result<Self> {
        DistortionPool::new(specs)
    }
}

impl From<DistortionPool> for Vec<DistortionSpec> {
    fn from(p: DistortionPool) -> Self {
        p.specs
    }
}

impl DistortionPool {
    pub fn new(specs: Vec<DistortionSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::config("distortion.pool", "pool must not be empty"));
        }
        for s in &specs {
            s.kind.validate()?;
            if !(s.probability.is_finite() && s.probability >= 0.0) {
                return Err(Error::config(
                    "distortion.pool.probability",
                    "probabilities must be non-negative",
                ));
            }
        }
        let total: f64 = specs.iter().map(|s| s.probability).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "distortion.pool.probability",
                format!("probabilities must sum to 1, got {total}"),
            ));
        }
        Ok(DistortionPool { specs })
    }

    /// Single-entry pool.
    pub fn single(kind: DistortionKind) -> Self {
        DistortionPool {
            specs: vec![DistortionSpec {
                kind,
                probability: 1.0,
            }],
        }
    }

    /// The default training pool: identity-dominant with light noise, blur,
    /// compression and dropout.
    pub fn default_training() -> Self {
        DistortionPool {
            specs: vec![
                DistortionSpec {
                    kind: DistortionKind::Identity,
                    probability: 0.4,
                },
                DistortionSpec {
                    kind: DistortionKind::GaussianNoise { sigma: 0.02 },
                    probability: 0.2,
                },
                DistortionSpec {
                    kind: DistortionKind::GaussianBlur {
                        kernel_size: 3,
                        sigma: 1.0,
                    },
                    probability: 0.15,
                },
                DistortionSpec {
                    kind: DistortionKind::JpegApprox { quality: 50 },
                    probability: 0.15,
                },
                DistortionSpec {
                    kind: DistortionKind::Dropout { keep_prob: 0.3 },
                    probability: 0.1,
                },
            ],
        }
    }

    pub fn specs(&self) -> &[DistortionSpec] {
        &self.specs
    }

    /// Draw one spec according to the configured probabilities.
    pub fn sample(&self, rng: &mut impl Rng) -> &DistortionSpec {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut cumulative = 0.0;
        for s in &self.specs {
            cumulative += s.probability;
            if u < cumulative {
                return s;
            }
        }
        self.specs.last().unwrap()
    }
}

/// A distortion with all of its randomness drawn.
#[derive(Debug, Clone)]
pub enum Realized {
    Identity,
    Noise { delta: Tensor },
    Blur { kernel1d: Vec<f64> },
    Jpeg { quality: u32 },
    Dropout { mask: Tensor },
    CropResize { top: f64, left: f64, height: f64, width: f64 },
}

/// Gaussian kernel taps for the blur distortion.
fn gaussian_kernel1d(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Draw the randomness of `kind` for a (batch, 3, h, w) input.
pub fn realize(
    kind: &DistortionKind,
    batch: usize,
    h: usize,
    w: usize,
    rng: &mut impl Rng,
) -> Realized {
    match *kind {
        DistortionKind::Identity => Realized::Identity,
        DistortionKind::GaussianNoise { sigma } => {
            let delta = Tensor::from_shape_fn(IxDyn(&[batch, 3, h, w]), |_| {
                let z: f64 = StandardNormal.sample(rng);
                z * sigma
            });
            Realized::Noise { delta }
        }
        DistortionKind::GaussianBlur { kernel_size, sigma } => Realized::Blur {
            kernel1d: gaussian_kernel1d(kernel_size, sigma),
        },
        DistortionKind::JpegApprox { quality } => Realized::Jpeg { quality },
        DistortionKind::Dropout { keep_prob } => {
            // One mask per pixel, shared across channels.
            let mut mask = Array4::<f64>::zeros((batch, 3, h, w));
            for b in 0..batch {
                for y in 0..h {
                    for x in 0..w {
                        let keep = f64::from(rng.random_range(0.0..1.0) < keep_prob);
                        for c in 0..3 {
                            mask[[b, c, y, x]] = keep;
                        }
                    }
                }
            }
            Realized::Dropout {
                mask: mask.into_dyn(),
            }
        }
        DistortionKind::CropResize { crop_fraction } => {
            let ch = crop_fraction * h as f64;
            let cw = crop_fraction * w as f64;
            let top = rng.random_range(0.0..=(h as f64 - ch).max(0.0));
            let left = rng.random_range(0.0..=(w as f64 - cw).max(0.0));
            Realized::CropResize {
                top,
                left,
                height: ch,
                width: cw,
            }
        }
    }
}

/// Standard JPEG luminance quantization table.
const JPEG_LUMA_QUANT: [[f64; 8]; 8] = [
    [16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0],
    [12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0],
    [14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0],
    [14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0],
    [18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0],
    [24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0],
    [49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0],
    [72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0],
];

/// Quality-scaled quantization steps (IJG scaling), clamped to [1, 255].
pub fn jpeg_quant_table(quality: u32) -> [[f64; 8]; 8] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut out = [[0.0; 8]; 8];
    for y in 0..8 {
        for x in 0..8 {
            out[y][x] = ((JPEG_LUMA_QUANT[y][x] * scale + 50.0) / 100.0)
                .floor()
                .clamp(1.0, 255.0);
        }
    }
    out
}

fn tiled_quant(batch: usize, h: usize, w: usize, table: &[[f64; 8]; 8], invert: bool) -> Tensor {
    Tensor::from_shape_fn(IxDyn(&[batch, 3, h, w]), |idx| {
        let v = table[idx[2] % 8][idx[3] % 8];
        if invert {
            1.0 / v
        } else {
            v
        }
    })
}

/// Apply a realized distortion inside a graph. The output keeps shape and
/// stays within [0, 1] (softly so in training mode).
pub fn apply_graph(g: &mut Graph, realized: &Realized, x: Var) -> Var {
    match realized {
        Realized::Identity => x,
        Realized::Noise { delta } => {
            let d = g.constant(delta.clone());
            let y = g.add(x, d);
            g.clamp01(y)
        }
        Realized::Blur { kernel1d } => {
            // Convex combination of in-range values; already in range.
            g.blur(x, kernel1d)
        }
        Realized::Jpeg { quality } => {
            let shape = g.value(x).shape().to_vec();
            let (b, h, w) = (shape[0], shape[2], shape[3]);
            let table = jpeg_quant_table(*quality);
            let inv = g.constant(tiled_quant(b, h, w, &table, true));
            let fwd = g.constant(tiled_quant(b, h, w, &table, false));

            let scaled = g.scale(x, 255.0);
            let centered = g.add_scalar(scaled, -128.0);
            let coeffs = g.block_dct8(centered, false);
            let q = g.mul(coeffs, inv);
            let rounded = g.round_ste(q);
            let deq = g.mul(rounded, fwd);
            let spatial = g.block_dct8(deq, true);
            let back = g.add_scalar(spatial, 128.0);
            let unit = g.scale(back, 1.0 / 255.0);
            g.clamp01(unit)
        }
        Realized::Dropout { mask } => {
            let m = g.constant(mask.clone());
            g.mul(x, m)
        }
        Realized::CropResize {
            top,
            left,
            height,
            width,
        } => g.resample(x, *top, *left, *height, *width),
    }
}

/// Evaluation-mode application to a single image (hard clamp, true rounding).
pub fn apply(kind: &DistortionKind, image: &Image, rng: &mut impl Rng) -> Result<Image> {
    kind.validate()?;
    let (h, w) = (image.height(), image.width());
    let realized = realize(kind, 1, h, w, rng);
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(images_to_batch(std::slice::from_ref(image)));
    let y = apply_graph(&mut g, &realized, x);
    let out = g
        .value(y)
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
        .to_owned();
    Ok(batch_to_images(&out).remove(0))
}
