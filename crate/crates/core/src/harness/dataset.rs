//! Dataset ingestion: a seeded procedural generator (`path = "synthetic"`)
//! and a plain image-folder reader, both producing deterministic splits.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::codec::Image;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Deterministic train/val/test partition.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<Image>,
    pub val: Vec<Image>,
    pub test: Vec<Image>,
}

impl DatasetSplits {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Bilinearly upsampled value-noise octave.
fn value_noise(size: usize, cells: usize, amplitude: f64, rng: &mut ChaCha12Rng) -> Array3<f64> {
    let grid: Vec<f64> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let at = |gy: usize, gx: usize| grid[gy * (cells + 1) + gx];
    let mut out = Array3::<f64>::zeros((3, size, size));
    for y in 0..size {
        let fy = y as f64 / size as f64 * cells as f64;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = x as f64 / size as f64 * cells as f64;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f64;
            let v = at(y0, x0) * (1.0 - ty) * (1.0 - tx)
                + at(y0, x0 + 1) * (1.0 - ty) * tx
                + at(y0 + 1, x0) * ty * (1.0 - tx)
                + at(y0 + 1, x0 + 1) * ty * tx;
            for c in 0..3 {
                out[[c, y, x]] += amplitude * v;
            }
        }
    }
    out
}

/// One textured synthetic carrier: multi-scale value noise, a directional
/// gradient, a few geometric shapes and a per-channel tint.
pub fn synthetic_image(size: usize, seed: u64, index: usize) -> Image {
    let mut r = rng::substream(seed, &[tag::SYNTH_IMAGE, index as u64]);
    let mut data = Array3::<f64>::zeros((3, size, size));

    // Directional brightness gradient.
    let angle: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    let grad_amp: f64 = r.random_range(0.1..0.3);
    let base: f64 = r.random_range(0.3..0.6);
    for y in 0..size {
        for x in 0..size {
            let t = (x as f64 / size as f64 - 0.5) * gx + (y as f64 / size as f64 - 0.5) * gy;
            for c in 0..3 {
                data[[c, y, x]] = base + grad_amp * t;
            }
        }
    }

    // Noise octaves, coarse to fine.
    let mut amp = 0.25;
    let mut cells = 4usize;
    while cells <= size / 2 {
        data += &value_noise(size, cells, amp, &mut r);
        data -= amp * 0.5; // keep the expectation centered
        amp *= 0.55;
        cells *= 2;
    }

    // A few solid shapes with alpha blending.
    let n_shapes = r.random_range(2..=4);
    for _ in 0..n_shapes {
        let color: [f64; 3] = [
            r.random_range(0.0..1.0),
            r.random_range(0.0..1.0),
            r.random_range(0.0..1.0),
        ];
        let alpha: f64 = r.random_range(0.3..0.8);
        let cy = r.random_range(0.0..size as f64);
        let cx = r.random_range(0.0..size as f64);
        let radius = r.random_range(size as f64 * 0.08..size as f64 * 0.3);
        let disc: bool = r.random();
        for y in 0..size {
            for x in 0..size {
                let inside = if disc {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    (dy * dy + dx * dx).sqrt() < radius
                } else {
                    (y as f64 - cy).abs() < radius && (x as f64 - cx).abs() < radius
                };
                if inside {
                    for c in 0..3 {
                        data[[c, y, x]] = (1.0 - alpha) * data[[c, y, x]] + alpha * color[c];
                    }
                }
            }
        }
    }

    // Mild per-channel tint so channels decorrelate.
    for c in 0..3 {
        let tint: f64 = r.random_range(-0.08..0.08);
        for y in 0..size {
            for x in 0..size {
                data[[c, y, x]] += tint;
            }
        }
    }

    data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Image::new(data).expect("synthetic image construction")
}

fn load_folder(path: &Path, image_size: usize) -> Result<Vec<Image>> {
    let mut files: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!(
            "dataset directory {} contains no files",
            path.display()
        )));
    }
    let mut images = Vec::new();
    for f in &files {
        match image::open(f) {
            Ok(img) => {
                let rgb = img.to_rgb8();
                let (w, h) = (rgb.width(), rgb.height());
                let side = w.min(h);
                let x0 = (w - side) / 2;
                let y0 = (h - side) / 2;
                let cropped = image::imageops::crop_imm(&rgb, x0, y0, side, side).to_image();
                let resized = image::imageops::resize(
                    &cropped,
                    image_size as u32,
                    image_size as u32,
                    image::imageops::FilterType::Triangle,
                );
                let data = Array3::from_shape_fn((3, image_size, image_size), |(c, y, x)| {
                    resized.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
                });
                images.push(Image::new(data)?);
            }
            Err(e) => {
                eprintln!("warning: skipping unreadable image {}: {e}", f.display());
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Input(format!(
            "no decodable images in {}",
            path.display()
        )));
    }
    Ok(images)
}

/// Load (or generate) a dataset and split it deterministically.
///
/// `path = "synthetic"` generates `synthetic_count` textured images; any
/// other path is read as a directory of raster images (center-cropped and
/// resized). Split fractions apply as floor(n * fraction) for val and test,
/// remainder to train. Fewer than 30 test images triggers a warning, not an
/// error: forensic statistics get noisy below that.
pub fn ingest_dataset(
    path: &str,
    image_size: usize,
    splits: (f64, f64, f64),
    seed: u64,
    synthetic_count: usize,
) -> Result<DatasetSplits> {
    if image_size < 8 || image_size % 8 != 0 {
        return Err(Error::config(
            "dataset.image_size",
            "must be a multiple of 8 and >= 8",
        ));
    }
    let (ft, fv, fe) = splits;
    if !(ft >= 0.0 && fv >= 0.0 && fe >= 0.0 && (ft + fv + fe - 1.0).abs() < 1e-9) {
        return Err(Error::config(
            "dataset.splits",
            format!("fractions must be non-negative and sum to 1, got {splits:?}"),
        ));
    }

    let images: Vec<Image> = if path == "synthetic" {
        if synthetic_count == 0 {
            return Err(Error::config("dataset.synthetic_count", "must be positive"));
        }
        (0..synthetic_count)
            .map(|i| synthetic_image(image_size, seed, i))
            .collect()
    } else {
        load_folder(Path::new(path), image_size)?
    };

    let n = images.len();
    let n_val = (n as f64 * fv).floor() as usize;
    let n_test = (n as f64 * fe).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::substream(seed, &[tag::DATASET]);
    // Fisher-Yates with draws independent of list contents.
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        order.swap(i, j);
    }

    let mut shuffled: Vec<Option<Image>> = images.into_iter().map(Some).collect();
    let picked: Vec<Image> = order
        .iter()
        .map(|&i| shuffled[i].take().unwrap())
        .collect();

    let mut iter = picked.into_iter();
    let test: Vec<Image> = iter.by_ref().take(n_test).collect();
    let val: Vec<Image> = iter.by_ref().take(n_val).collect();
    let train: Vec<Image> = iter.collect();

    if test.len() < 30 {
        eprintln!(
            "warning: test split has {} images; forensic statistics are noisy below 30",
            test.len()
        );
    }
    if train.is_empty() {
        return Err(Error::Input(
            "split fractions leave no training images".into(),
        ));
    }
    Ok(DatasetSplits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_split_is_deterministic() {
        let a = ingest_dataset("synthetic", 64, (0.8, 0.1, 0.1), 3, 40).unwrap();
        let b = ingest_dataset("synthetic", 64, (0.8, 0.1, 0.1), 3, 40).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.data(), y.data());
        }
        for (x, y) in a.test.iter().zip(&b.test) {
            assert_eq!(x.data(), y.data());
        }
        let c = ingest_dataset("synthetic", 64, (0.8, 0.1, 0.1), 4, 40).unwrap();
        assert_ne!(a.train[0].data(), c.train[0].data());
    }

    #[test]
    fn split_counts_follow_fractions() {
        let s = ingest_dataset("synthetic", 16, (0.8, 0.1, 0.1), 1, 100).unwrap();
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.val.len(), 10);
        assert_eq!(s.test.len(), 10);
        assert_eq!(s.total(), 100);
    }

    #[test]
    fn synthetic_images_satisfy_carrier_invariants() {
        let s = ingest_dataset("synthetic", 32, (0.6, 0.2, 0.2), 2, 10).unwrap();
        for img in s.train.iter().chain(&s.val).chain(&s.test) {
            assert_eq!(img.height(), 32);
            assert_eq!(img.width(), 32);
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // Textured, not constant.
        let img = &s.train[0];
        let mean = img.data().mean().unwrap();
        let var = img
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / img.data().len() as f64;
        assert!(var > 1e-3, "synthetic images should have texture, var={var}");
    }

    #[test]
    fn folder_ingest_skips_unreadable_and_errors_on_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest_dataset(
            dir.path().to_str().unwrap(),
            16,
            (0.8, 0.1, 0.1),
            1,
            0
        )
        .is_err());

        // One valid PNG and one junk file: junk is skipped with a warning.
        let img = image::RgbImage::from_fn(24, 20, |x, y| {
            image::Rgb([(x * 10) as u8, (y * 12) as u8, 128])
        });
        img.save(dir.path().join("ok.png")).unwrap();
        std::fs::write(dir.path().join("junk.png"), b"not an image").unwrap();
        let s = ingest_dataset(
            dir.path().to_str().unwrap(),
            16,
            (1.0, 0.0, 0.0),
            1,
            0,
        )
        .unwrap();
        assert_eq!(s.total(), 1);
        assert_eq!(s.train[0].height(), 16);
    }

    #[test]
    fn invalid_split_fractions_are_config_errors() {
        assert!(matches!(
            ingest_dataset("synthetic", 16, (0.8, 0.3, 0.1), 1, 10),
            Err(Error::Config { .. })
        ));
    }
}
