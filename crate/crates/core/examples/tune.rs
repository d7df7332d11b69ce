// Scratch experiment driver for hyperparameter exploration. Not part of the
// deliverable surface; run with `cargo run -p overmark --example tune -- ...`.

use std::time::Instant;

use overmark::attacks::run_intra_model_suite;
use overmark::codec::{Architecture, CodecConfig, CodecModel};
use overmark::harness::ingest_dataset;
use overmark::training::{finetune_resilient, train_baseline, TrainConfig};

fn eval(model: &CodecModel, test: &[overmark::codec::Image], label: &str, depths: usize) {
    let t = run_intra_model_suite(model, test, depths, 1, 777).unwrap();
    let bers: Vec<String> = (1..=depths)
        .map(|d| format!("d{d}={:.2}%", t.mean_ber(d)))
        .collect();
    println!(
        "[{label}] step {}: {} | psnr d1={:.2} d5={:.2} | ssim d1={:.3}",
        model.training_step,
        bers.join(" "),
        t.mean_psnr(1),
        t.mean_psnr(depths),
        t.mean_ssim(1),
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps_base: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let steps_ft: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let chunk: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(100);

    let data = ingest_dataset("synthetic", 64, (0.8, 0.1, 0.1), 11, 320).unwrap();
    let test: Vec<_> = data.test.iter().take(12).cloned().collect();
    println!(
        "dataset: {} train / {} test(eval {})",
        data.train.len(),
        data.test.len(),
        test.len()
    );

    let cfg = CodecConfig::desk(Architecture::SingleHead);
    let mut model = CodecModel::init(cfg, 7).unwrap();
    println!("model {} params {}", model.model_id, model.param_count());

    // Baseline in chunks with eval between.
    let t0 = Instant::now();
    let mut done = 0;
    while done < steps_base {
        let n = chunk.min(steps_base - done);
        let mut tc = TrainConfig::new(n, batch, 7 + done as u64);
        tc.resilience_enabled = false;
        tc.lr_encdec = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
        tc.lr_disc = tc.lr_encdec;
        if std::env::var("IDPOOL").is_ok() {
            tc.pool = overmark::distortion::DistortionPool::single(
                overmark::distortion::DistortionKind::Identity,
            );
        }
        tc.weights.lambda_resilience = 0.0;
        let t1 = Instant::now();
        let log = train_baseline(&mut model, &tc, &data.train).unwrap();
        done += n;
        let tail: Vec<_> = log.records.iter().rev().take(20).collect();
        let mean_dec: f64 = tail.iter().map(|r| r.l_decoder).sum::<f64>() / tail.len() as f64;
        let mean_img: f64 = tail.iter().map(|r| r.l_image).sum::<f64>() / tail.len() as f64;
        println!("  last-20 losses: dec={mean_dec:.4} img={mean_img:.5}");
        println!(
            "baseline chunk done: {:.1} ms/step (total {:.1}s)",
            t1.elapsed().as_secs_f64() * 1000.0 / n as f64,
            t0.elapsed().as_secs_f64()
        );
        eval(&model, &test, "baseline", 2);
    }
    eval(&model, &test, "baseline-final", 5);

    // Resilience fine-tune.
    let mut ft = model.clone();
    let mut done = 0;
    while done < steps_ft {
        let n = chunk.min(steps_ft - done);
        let mut tc = TrainConfig::new(n, batch, 1000 + done as u64);
        tc.resilience_enabled = true;
        tc.weights.lambda_resilience = 10.0;
        let t1 = Instant::now();
        finetune_resilient(&mut ft, &tc, &data.train).unwrap();
        done += n;
        println!(
            "finetune chunk done: {:.1} ms/step",
            t1.elapsed().as_secs_f64() * 1000.0 / n as f64
        );
        eval(&ft, &test, "resilient", 5);
    }
    println!("total wall time {:.1}s", t0.elapsed().as_secs_f64());
}
