//! Forensic and fidelity metrics: bit error rate, PSNR, SSIM and the
//! residual visualization.
//!
//! All functions are pure; none of them touch the autodiff graph.

use ndarray::Array2;

use crate::codec::{Image, Message};
use crate::error::{Error, Result};

/// ITU-R BT.601 luma weights used for the internal grayscale conversion.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// SSIM window side length.
pub const SSIM_WINDOW: usize = 11;
/// SSIM window Gaussian sigma.
pub const SSIM_SIGMA: f64 = 1.5;
/// SSIM stabilization constants for dynamic range 1.0.
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Bit error rate in percent: mean absolute bit difference x 100.
pub fn ber(a: &Message, b: &Message) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "bit error rate needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let wrong: u32 = a
        .bits()
        .iter()
        .zip(b.bits())
        .map(|(&x, &y)| u32::from(x != y))
        .sum();
    Ok(wrong as f64 / a.len() as f64 * 100.0)
}

/// Mean squared error over all pixels and channels.
pub fn image_mse(x: &Image, y: &Image) -> Result<f64> {
    if x.data().shape() != y.data().shape() {
        return Err(Error::Input(format!(
            "psnr/mse needs equal shapes, got {:?} and {:?}",
            x.data().shape(),
            y.data().shape()
        )));
    }
    let n = x.data().len() as f64;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data().iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in dB on the [0, 1] scale. Identical images
/// return `f64::INFINITY`, serialized as "inf" in CSV output.
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    let mse = image_mse(x, y)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn luma(image: &Image) -> Array2<f64> {
    let d = image.data();
    let (h, w) = (image.height(), image.width());
    Array2::from_shape_fn((h, w), |(y, x)| {
        LUMA_WEIGHTS[0] * d[[0, y, x]] + LUMA_WEIGHTS[1] * d[[1, y, x]] + LUMA_WEIGHTS[2] * d[[2, y, x]]
    })
}

fn gaussian_window() -> Array2<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w = Array2::<f64>::zeros((SSIM_WINDOW, SSIM_WINDOW));
    let mut sum = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[[(dy + r) as usize, (dx + r) as usize]] = v;
            sum += v;
        }
    }
    w.mapv_inplace(|v| v / sum);
    w
}

/// Mean local SSIM on the luma plane, Gaussian-weighted 11x11 windows,
/// evaluated at fully overlapping positions only.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    if x.data().shape() != y.data().shape() {
        return Err(Error::Input(format!(
            "ssim needs equal shapes, got {:?} and {:?}",
            x.data().shape(),
            y.data().shape()
        )));
    }
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let a = luma(x);
    let b = luma(y);
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=(h - SSIM_WINDOW) {
        for ox in 0..=(w - SSIM_WINDOW) {
            let mut mu1 = 0.0;
            let mut mu2 = 0.0;
            let mut s11 = 0.0;
            let mut s22 = 0.0;
            let mut s12 = 0.0;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let wgt = win[[ky, kx]];
                    let av = a[[oy + ky, ox + kx]];
                    let bv = b[[oy + ky, ox + kx]];
                    mu1 += wgt * av;
                    mu2 += wgt * bv;
                    s11 += wgt * av * av;
                    s22 += wgt * bv * bv;
                    s12 += wgt * av * bv;
                }
            }
            let var1 = s11 - mu1 * mu1;
            let var2 = s22 - mu2 * mu2;
            let cov = s12 - mu1 * mu2;
            let score = ((2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2))
                / ((mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2));
            total += score;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Amplified residual for visualization: |x_w - x| min-max normalized to
/// [0, 1]. A constant residual normalizes to all zeros.
pub fn residual_visual(x: &Image, xw: &Image) -> Result<Image> {
    if x.data().shape() != xw.data().shape() {
        return Err(Error::Input(format!(
            "residual needs equal shapes, got {:?} and {:?}",
            x.data().shape(),
            xw.data().shape()
        )));
    }
    let mut res = (xw.data() - x.data()).mapv(f64::abs);
    let min = res.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = res.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        res.mapv_inplace(|v| (v - min) / (max - min));
    } else {
        res.fill(0.0);
    }
    Ok(Image::from_clamped(res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn constant_image(size: usize, v: f64) -> Image {
        Image::new(Array3::from_elem((3, size, size), v)).unwrap()
    }

    fn msg(bits: &[u8]) -> Message {
        Message::new(bits.to_vec()).unwrap()
    }

    #[test]
    fn ber_spec_cases() {
        let a = msg(&[1, 1, 0, 0]);
        assert_eq!(ber(&a, &a).unwrap(), 0.0);
        let complement = msg(&[0, 0, 1, 1]);
        assert_eq!(ber(&a, &complement).unwrap(), 100.0);
        let half = msg(&[1, 0, 0, 1]);
        assert_eq!(ber(&a, &half).unwrap(), 50.0);
        assert!(ber(&a, &msg(&[1, 0])).is_err());
    }

    #[test]
    fn ber_is_symmetric_and_bounded() {
        let mut r = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = Message::random(30, &mut r);
            let b = Message::random(30, &mut r);
            let ab = ber(&a, &b).unwrap();
            assert_eq!(ab, ber(&b, &a).unwrap());
            assert!((0.0..=100.0).contains(&ab));
        }
    }

    #[test]
    fn random_message_ber_concentrates_near_half() {
        // Random bits against a fixed message: mean within 3 sigma of 50%.
        let mut r = ChaCha12Rng::seed_from_u64(2);
        let l = 30usize;
        let target = Message::random(l, &mut r);
        let trials = 1000;
        let mean: f64 = (0..trials)
            .map(|_| ber(&target, &Message::random(l, &mut r)).unwrap())
            .sum::<f64>()
            / trials as f64;
        let band = 3.0 * 50.0 / (l as f64).sqrt() / (trials as f64).sqrt();
        assert!(
            (mean - 50.0).abs() < band.max(1.5),
            "mean {mean} not near 50%"
        );
    }

    #[test]
    fn psnr_closed_forms() {
        let x = constant_image(16, 0.0);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);

        // MSE 1e-4 -> 40 dB.
        let y = constant_image(16, 0.01);
        assert!((psnr(&x, &y).unwrap() - 40.0).abs() < 1e-9);

        // MSE 1e-2 -> 20 dB.
        let z = constant_image(16, 0.1);
        assert!((psnr(&x, &z).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut r = ChaCha12Rng::seed_from_u64(3);
        let base: Vec<f64> = (0..3 * 16 * 16).map(|_| r.random_range(0.3..0.7)).collect();
        let x = Image::new(
            Array3::from_shape_vec((3, 16, 16), base.clone()).unwrap(),
        )
        .unwrap();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1] {
            let noisy = Image::new(
                Array3::from_shape_vec(
                    (3, 16, 16),
                    base.iter().map(|&v| (v + amp).min(1.0)).collect(),
                )
                .unwrap(),
            )
            .unwrap();
            let p = psnr(&x, &noisy).unwrap();
            assert!(p < last, "psnr must strictly decrease");
            last = p;
        }
    }

    #[test]
    fn ssim_identical_and_constant_cases() {
        let mut r = ChaCha12Rng::seed_from_u64(4);
        let x = Image::from_fn(16, 16, |_, _, _| r.random_range(0.0..1.0)).unwrap();
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);

        let a = constant_image(16, 0.5);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_pair_closed_form() {
        // Constant 0.25 vs constant 0.75: contrast/structure terms are
        // exactly 1, luminance term = (2*0.25*0.75 + C1) / (0.25^2 + 0.75^2 + C1).
        let a = constant_image(16, 0.25);
        let b = constant_image(16, 0.75);
        let c1 = SSIM_K1 * SSIM_K1;
        let expected = (2.0 * 0.25 * 0.75 + c1) / (0.25f64.powi(2) + 0.75f64.powi(2) + c1);
        let got = ssim(&a, &b).unwrap();
        assert!(
            (got - expected).abs() < 1e-4,
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn ssim_is_symmetric_and_rejects_small_images() {
        let mut r = ChaCha12Rng::seed_from_u64(5);
        let x = Image::from_fn(16, 16, |_, _, _| r.random_range(0.0..1.0)).unwrap();
        let y = Image::from_fn(16, 16, |_, _, _| r.random_range(0.0..1.0)).unwrap();
        let xy = ssim(&x, &y).unwrap();
        let yx = ssim(&y, &x).unwrap();
        assert!((xy - yx).abs() < 1e-12);

        let tiny = constant_image(8, 0.5);
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn residual_visual_cases() {
        let x = constant_image(8, 0.0);
        // Identical images: degenerate branch gives all zeros.
        let r0 = residual_visual(&x, &x).unwrap();
        assert!(r0.data().iter().all(|&v| v == 0.0));

        // Residual values {0.01, 0.02, 0.03} -> {0.0, 0.5, 1.0}.
        let mut data = Array3::from_elem((3, 8, 8), 0.01);
        data[[0, 2, 2]] = 0.02;
        data[[0, 4, 4]] = 0.03;
        let xw = Image::new(data).unwrap();
        let rv = residual_visual(&x, &xw).unwrap();
        assert_eq!(rv.data()[[0, 0, 0]], 0.0);
        assert!((rv.data()[[0, 2, 2]] - 0.5).abs() < 1e-12);
        assert!((rv.data()[[0, 4, 4]] - 1.0).abs() < 1e-12);
        // Normalization contract: output spans [0, 1].
        assert!(rv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
