//! Loss formulation, baseline training and resilience fine-tuning.
//!
//! The task loss combines imperceptibility (image MSE), decodability
//! (per-head message MSE through the distortion channel) and an adversarial
//! stealth term. Resilience fine-tuning additionally simulates an overwrite
//! attack inside every step — embed, distort, re-embed with a fresh random
//! payload using the live encoder — and penalizes failure to recover the
//! *first* payload from the doubly watermarked image:
//!
//! ```text
//! total = l1 * L_image + l2 * L_decoder + l3 * L_adversarial
//!       + lr * [ sum_i beta_i * MSE(head_i(x_w12), s1)
//!              + beta_aux * MSE(aux(x_w12), 0) ]
//! ```
//!
//! With the resilience weight at zero the fine-tuning step consumes exactly
//! the same random draws as a baseline step and is bit-identical to it.

mod adam;
mod gradcheck;

pub use adam::Adam;
pub use gradcheck::{
    gradient_check, ComponentMask, GradCheckEntry, GradCheckReport, LossTerm, ProbeConfig,
};

use std::path::PathBuf;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::checkpoint;
use crate::codec::{
    images_to_batch, modulation_plane, signals_to_tensor, zero_signal_tensor, CodecModel, Image,
    Message, Signal,
};
use crate::distortion::{apply_graph, realize, DistortionPool, Realized};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::BoundVars;
use crate::rng::{self, tag};

/// Weights of the composite objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Imperceptibility weight (image MSE).
    pub lambda_image: f64,
    /// Decoder weight (message recovery through the distortion channel).
    pub lambda_decoder: f64,
    /// Adversarial stealth weight.
    pub lambda_adversarial: f64,
    /// Resilience weight; zero disables the overwrite simulation entirely.
    pub lambda_resilience: f64,
    /// Per-primary-head resilience weights; a single entry broadcasts.
    pub beta: Vec<f64>,
    /// Auxiliary zero-head resilience weight; forced to 0 without an aux head.
    pub beta_aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_image: 1.0,
            lambda_decoder: 1.0,
            lambda_adversarial: 0.01,
            lambda_resilience: 10.0,
            beta: vec![1.0],
            beta_aux: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_image", self.lambda_image),
            ("lambda_decoder", self.lambda_decoder),
            ("lambda_adversarial", self.lambda_adversarial),
            ("lambda_resilience", self.lambda_resilience),
            ("beta_aux", self.beta_aux),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be a finite non-negative real"));
            }
        }
        if self.beta.is_empty() || !self.beta.iter().all(|b| b.is_finite() && *b >= 0.0) {
            return Err(Error::config(
                "beta",
                "must be non-empty, finite and non-negative",
            ));
        }
        Ok(())
    }

    /// Resolve per-model weights: broadcast `beta` to the model's head count
    /// and zero `beta_aux` when the model has no auxiliary head.
    pub fn resolved_for(&self, model: &CodecModel) -> Result<LossWeights> {
        self.validate()?;
        let k = model.primary_head_count();
        let beta = if self.beta.len() == k {
            self.beta.clone()
        } else if self.beta.len() == 1 {
            vec![self.beta[0]; k]
        } else {
            return Err(Error::config(
                "beta",
                format!("expected 1 or {k} entries, got {}", self.beta.len()),
            ));
        };
        let beta_aux = if model.aux_head.is_some() {
            self.beta_aux
        } else {
            0.0
        };
        Ok(LossWeights {
            beta,
            beta_aux,
            ..self.clone()
        })
    }
}

/// Everything a training run needs besides the model and the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_encdec: f64,
    pub lr_disc: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub pool: DistortionPool,
    /// Enables the overwrite simulation; required true for fine-tuning.
    pub resilience_enabled: bool,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch_size,
            lr_encdec: 1e-3,
            lr_disc: 1e-3,
            seed,
            weights: LossWeights::default(),
            pool: DistortionPool::default_training(),
            resilience_enabled: false,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (field, v) in [("lr_encdec", self.lr_encdec), ("lr_disc", self.lr_disc)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be a positive finite real"));
            }
        }
        self.weights.validate()
    }
}

/// One logged step of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_image: f64,
    pub l_decoder: f64,
    pub l_adversarial: f64,
    pub l_resilience: f64,
    pub l_total: f64,
}

/// Loss curve of a run; serializes to CSV with one row per step.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "l_image", "l_decoder", "l_adversarial", "l_resilience", "l_total"])?;
        for r in &self.records {
            w.write_record(&[
                r.step.to_string(),
                format!("{:.10}", r.l_image),
                format!("{:.10}", r.l_decoder),
                format!("{:.10}", r.l_adversarial),
                format!("{:.10}", r.l_resilience),
                format!("{:.10}", r.l_total),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

// Plain-number loss surface (used by tests, suites and reports).

/// Imperceptibility loss: pixel MSE between carrier and watermarked image.
pub fn image_loss(x: &Image, xw: &Image) -> Result<f64> {
    metrics::image_mse(x, xw)
}

/// Mean squared error of soft logits against a signed signal, i.e. the
/// squared-distance recovery error normalized by message length.
pub fn mse_vs_signal(soft: &[f64], signal: &Signal) -> Result<f64> {
    if soft.len() != signal.len() {
        return Err(Error::Input(format!(
            "logit/signal length mismatch: {} vs {}",
            soft.len(),
            signal.len()
        )));
    }
    Ok(soft
        .iter()
        .zip(signal.values())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / soft.len() as f64)
}

/// Mean squared logit magnitude; recovery error against the zero vector.
pub fn mse_vs_zero(soft: &[f64]) -> f64 {
    soft.iter().map(|v| v * v).sum::<f64>() / soft.len() as f64
}

/// Decoder loss on an already-distorted watermarked image: summed per-head
/// recovery MSE plus the auxiliary zero term when an aux head exists.
pub fn decoder_loss(model: &CodecModel, noisy: &Image, signal: &Signal) -> Result<f64> {
    let mut total = 0.0;
    for i in 1..=model.primary_head_count() {
        total += mse_vs_signal(&model.decode(noisy, i)?, signal)?;
    }
    if model.aux_head.is_some() {
        total += mse_vs_zero(&model.decode(noisy, 0)?);
    }
    Ok(total)
}

/// Least-squares adversarial pair: the generator term pushes watermarked
/// images toward the discriminator's "clean" label 1; the discriminator term
/// separates clean (label 1) from watermarked (label 0).
pub fn adversarial_losses(model: &CodecModel, x: &Image, xw: &Image) -> Result<(f64, f64)> {
    let score = |img: &Image| -> Result<f64> {
        let mut g = Graph::new(Mode::Eval);
        let xb = g.constant(images_to_batch(std::slice::from_ref(img)));
        let cv = model
            .discriminator
            .bind_critic(&mut g, false, &mut BoundVars::default());
        let s = cv.score(&mut g, xb);
        Ok(g.value(s).iter().next().copied().unwrap())
    };
    let s_real = score(x)?;
    let s_fake = score(xw)?;
    let gen = (s_fake - 1.0) * (s_fake - 1.0);
    let disc = (s_real - 1.0) * (s_real - 1.0) + s_fake * s_fake;
    Ok((gen, disc))
}

/// Resilience loss on an attacked image: weighted per-head recovery of the
/// original signal plus the weighted auxiliary zero term.
pub fn resilience_loss(
    model: &CodecModel,
    attacked: &Image,
    w1_signal: &Signal,
    weights: &LossWeights,
) -> Result<f64> {
    let w = weights.resolved_for(model)?;
    let mut total = 0.0;
    for (i, beta) in w.beta.iter().enumerate() {
        total += beta * mse_vs_signal(&model.decode(attacked, i + 1)?, w1_signal)?;
    }
    if model.aux_head.is_some() && w.beta_aux != 0.0 {
        total += w.beta_aux * mse_vs_zero(&model.decode(attacked, 0)?);
    }
    Ok(total)
}

/// The task-loss terms entering the total objective.
#[derive(Debug, Clone, Copy)]
pub struct TaskTerms {
    pub image: f64,
    pub decoder: f64,
    pub adversarial: f64,
}

/// Combine task terms and the resilience term under the configured weights.
pub fn total_loss(task: &TaskTerms, resilience: f64, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("image", task.image),
        ("decoder", task.decoder),
        ("adversarial", task.adversarial),
        ("resilience", resilience),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "total_loss received a non-finite `{name}` term"
            )));
        }
    }
    Ok(weights.lambda_image * task.image
        + weights.lambda_decoder * task.decoder
        + weights.lambda_adversarial * task.adversarial
        + weights.lambda_resilience * resilience)
}

// Graph-side step construction, shared by the trainer and gradient checks.

/// Which components are bound as tracked (trainable) leaves.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TrackMask {
    pub encoder: bool,
    pub heads: bool,
    pub aux: bool,
    pub discriminator: bool,
}

impl TrackMask {
    pub fn all() -> Self {
        TrackMask {
            encoder: true,
            heads: true,
            aux: true,
            discriminator: true,
        }
    }
}

/// All randomness of one training step, realized up front.
#[derive(Debug, Clone)]
pub(crate) struct StepDraws {
    pub batch: Tensor,
    pub sig1: Tensor,
    pub task_dist: Realized,
    pub resilience: Option<ResilienceDraws>,
}

#[derive(Debug, Clone)]
pub(crate) struct ResilienceDraws {
    pub sig2: Tensor,
    pub dist: Realized,
}

/// Canonical-order leaf bindings per component.
pub(crate) struct BoundModel {
    pub encoder: BoundVars,
    pub heads: Vec<BoundVars>,
    pub aux: Option<BoundVars>,
    pub discriminator: BoundVars,
}

/// The scalar loss nodes of one step.
pub(crate) struct StepTerms {
    pub image: Var,
    pub decoder: Var,
    pub adversarial_gen: Var,
    pub adversarial_disc: Var,
    pub resilience: Option<Var>,
    pub total: Var,
    pub bound: BoundModel,
}

/// Build the full training-step graph. `weights` must already be resolved
/// for the model. The resilience pipeline is built only when draws carry it.
pub(crate) fn build_step_graph(
    g: &mut Graph,
    model: &CodecModel,
    draws: &StepDraws,
    weights: &LossWeights,
    track: TrackMask,
) -> StepTerms {
    let mut enc_order = BoundVars::default();
    let enc = model.encoder.bind(g, track.encoder, &mut enc_order);
    let mut head_orders: Vec<BoundVars> = Vec::new();
    let heads: Vec<_> = model
        .heads
        .iter()
        .map(|h| {
            let mut o = BoundVars::default();
            let v = h.bind_head(g, track.heads, &mut o);
            head_orders.push(o);
            v
        })
        .collect();
    let mut aux_order = None;
    let aux = model.aux_head.as_ref().map(|h| {
        let mut o = BoundVars::default();
        let v = h.bind_head(g, track.aux, &mut o);
        aux_order = Some(o);
        v
    });
    let mut disc_order = BoundVars::default();
    let disc = model
        .discriminator
        .bind_critic(g, track.discriminator, &mut disc_order);

    let batch = draws.batch.shape()[0];
    let l = model.config.payload_len;
    let x = g.constant(draws.batch.clone());
    let s1 = g.constant(draws.sig1.clone());
    let zeros_sig = g.constant(zero_signal_tensor(batch, l));
    let ones_score = g.constant(Tensor::ones(IxDyn(&[batch, 1])));
    let zeros_score = g.constant(Tensor::zeros(IxDyn(&[batch, 1])));

    // Embed and imperceptibility.
    let plane1 = g.constant(modulation_plane(&draws.sig1, &model.signatures));
    let xw = enc.embed(g, x, plane1);
    let image = g.mse(x, xw);

    // Adversarial terms. The discriminator trains on a detached copy.
    let xw_detached = g.detach(xw);
    let score_real = disc.score(g, x);
    let score_fake_detached = disc.score(g, xw_detached);
    let d_real = g.mse(score_real, ones_score);
    let d_fake = g.mse(score_fake_detached, zeros_score);
    let adversarial_disc = g.add(d_real, d_fake);
    let score_fake = disc.score(g, xw);
    let adversarial_gen = g.mse(score_fake, ones_score);

    // Decoder loss through the distortion channel.
    let sigs = model.signatures.clone();
    let x_noisy = apply_graph(g, &draws.task_dist, xw);
    let mut decoder = {
        let logits = heads[0].decode(g, x_noisy, sigs.clone());
        g.mse(logits, s1)
    };
    for hv in heads.iter().skip(1) {
        let logits = hv.decode(g, x_noisy, sigs.clone());
        let term = g.mse(logits, s1);
        decoder = g.add(decoder, term);
    }
    if let Some(auxv) = aux {
        let logits = auxv.decode(g, x_noisy, sigs.clone());
        let term = g.mse(logits, zeros_sig);
        decoder = g.add(decoder, term);
    }

    // Overwrite simulation: distort, re-embed a fresh payload with the live
    // encoder, then demand recovery of the original signal.
    let resilience = draws.resilience.as_ref().map(|res| {
        let x_tilde = apply_graph(g, &res.dist, xw);
        let plane2 = g.constant(modulation_plane(&res.sig2, &model.signatures));
        let xw12 = enc.embed(g, x_tilde, plane2);
        let mut acc: Option<Var> = None;
        for (i, hv) in heads.iter().enumerate() {
            let logits = hv.decode(g, xw12, sigs.clone());
            let m = g.mse(logits, s1);
            let weighted = g.scale(m, weights.beta[i]);
            acc = Some(match acc {
                Some(a) => g.add(a, weighted),
                None => weighted,
            });
        }
        if let (Some(auxv), true) = (aux, weights.beta_aux != 0.0) {
            let logits = auxv.decode(g, xw12, sigs.clone());
            let m = g.mse(logits, zeros_sig);
            let weighted = g.scale(m, weights.beta_aux);
            acc = Some(match acc {
                Some(a) => g.add(a, weighted),
                None => weighted,
            });
        }
        acc.expect("resilience loss needs at least one head")
    });

    let mut total = g.scale(image, weights.lambda_image);
    let dec_w = g.scale(decoder, weights.lambda_decoder);
    total = g.add(total, dec_w);
    let adv_w = g.scale(adversarial_gen, weights.lambda_adversarial);
    total = g.add(total, adv_w);
    if let Some(res) = resilience {
        let res_w = g.scale(res, weights.lambda_resilience);
        total = g.add(total, res_w);
    }

    StepTerms {
        image,
        decoder,
        adversarial_gen,
        adversarial_disc,
        resilience,
        total,
        bound: BoundModel {
            encoder: enc_order,
            heads: head_orders,
            aux: aux_order,
            discriminator: disc_order,
        },
    }
}

/// Draw a fresh attack payload distinct from `w1`, resampling on collision.
pub fn draw_attack_message(rng: &mut impl Rng, w1: &Message) -> Message {
    loop {
        let m = Message::random(w1.len(), rng);
        if &m != w1 {
            return m;
        }
    }
}

fn draw_step(
    model: &CodecModel,
    cfg: &TrainConfig,
    data: &[Image],
    with_resilience: bool,
    rng: &mut ChaCha12Rng,
) -> StepDraws {
    let size = model.config.image_size;
    let l = model.config.payload_len;
    let b = cfg.batch_size;
    let picks: Vec<&Image> = (0..b)
        .map(|_| &data[rng.random_range(0..data.len())])
        .collect();
    let batch = images_to_batch(&picks);
    let w1: Vec<Message> = (0..b).map(|_| Message::random(l, rng)).collect();
    let sig1 = signals_to_tensor(
        &w1.iter()
            .map(|m| m.to_signal(model.config.amplitude))
            .collect::<Vec<_>>(),
    );
    let task_kind = cfg.pool.sample(rng).kind.clone();
    let task_dist = realize(&task_kind, b, size, size, rng);

    let resilience = with_resilience.then(|| {
        let w2: Vec<Message> = w1.iter().map(|m1| draw_attack_message(rng, m1)).collect();
        let sig2 = signals_to_tensor(
            &w2.iter()
                .map(|m| m.to_signal(model.config.amplitude))
                .collect::<Vec<_>>(),
        );
        let kind = cfg.pool.sample(rng).kind.clone();
        let dist = realize(&kind, b, size, size, rng);
        ResilienceDraws { sig2, dist }
    });

    StepDraws {
        batch,
        sig1,
        task_dist,
        resilience,
    }
}

fn collect_grads(
    g: &Graph,
    grads: &crate::autodiff::Gradients,
    order: &BoundVars,
) -> Vec<Tensor> {
    order
        .0
        .iter()
        .map(|&v| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).raw_dim()))
        })
        .collect()
}

fn rng_digest(seed: u64, rng: &ChaCha12Rng) -> String {
    let mut h = Sha256::new();
    h.update(format!("seed={seed};word_pos={}", rng.get_word_pos()));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Optimizers {
    encoder: Adam,
    heads: Vec<Adam>,
    aux: Option<Adam>,
    discriminator: Adam,
}

fn check_dataset(model: &CodecModel, data: &[Image]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let s = model.config.image_size;
    if let Some(bad) = data
        .iter()
        .find(|img| img.height() != s || img.width() != s)
    {
        return Err(Error::Shape {
            expected: format!("{s}x{s} training images"),
            got: format!("{}x{}", bad.height(), bad.width()),
        });
    }
    Ok(())
}

/// Standard end-to-end training of the embed -> distort -> decode pipeline
/// with alternating discriminator updates. No overwrite simulation.
pub fn train_baseline(
    model: &mut CodecModel,
    cfg: &TrainConfig,
    data: &[Image],
) -> Result<TrainLog> {
    if cfg.resilience_enabled {
        return Err(Error::config(
            "resilience_enabled",
            "baseline training requires resilience_enabled = false",
        ));
    }
    run_loop(model, cfg, data, false)
}

/// Resilience fine-tuning on top of a baseline-trained model.
pub fn finetune_resilient(
    model: &mut CodecModel,
    cfg: &TrainConfig,
    data: &[Image],
) -> Result<TrainLog> {
    if !cfg.resilience_enabled {
        return Err(Error::config(
            "resilience_enabled",
            "fine-tuning requires resilience_enabled = true",
        ));
    }
    if model.training_step == 0 {
        return Err(Error::StageDependency(
            "resilience fine-tuning needs a baseline-trained model (training_step is 0)".into(),
        ));
    }
    run_loop(model, cfg, data, true)
}

fn run_loop(
    model: &mut CodecModel,
    cfg: &TrainConfig,
    data: &[Image],
    resilience: bool,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_dataset(model, data)?;
    let weights = cfg.weights.resolved_for(model)?;
    // At zero resilience weight the overwrite pipeline is skipped entirely,
    // so the step (including its random draws) matches baseline training.
    let with_resilience = resilience && weights.lambda_resilience > 0.0;

    let mut rng = rng::substream(cfg.seed, &[tag::TRAINING]);
    let mut opt = Optimizers {
        encoder: Adam::new(cfg.lr_encdec),
        heads: model.heads.iter().map(|_| Adam::new(cfg.lr_encdec)).collect(),
        aux: model.aux_head.as_ref().map(|_| Adam::new(cfg.lr_encdec)),
        discriminator: Adam::new(cfg.lr_disc),
    };
    let mut log = TrainLog::default();
    let mut last_checkpoint: Option<PathBuf> = None;

    for _ in 0..cfg.steps {
        let draws = draw_step(model, cfg, data, with_resilience, &mut rng);
        let mut g = Graph::new(Mode::Train);
        let terms = build_step_graph(&mut g, model, &draws, &weights, TrackMask::all());

        let record = LossRecord {
            step: model.training_step + 1,
            l_image: g.scalar(terms.image),
            l_decoder: g.scalar(terms.decoder),
            l_adversarial: g.scalar(terms.adversarial_gen),
            l_resilience: terms.resilience.map(|r| g.scalar(r)).unwrap_or(0.0),
            l_total: g.scalar(terms.total),
        };
        for (name, v) in [
            ("image", record.l_image),
            ("decoder", record.l_decoder),
            ("adversarial", record.l_adversarial),
            ("resilience", record.l_resilience),
            ("total", record.l_total),
        ] {
            if !v.is_finite() {
                // The model still holds the last finite parameters; keep them.
                if let Some(dir) = &cfg.checkpoint_dir {
                    let path = dir.join(format!("diverged_step_{:06}.ovmk", record.step));
                    if checkpoint::save(model, &rng_digest(cfg.seed, &rng), &path).is_ok() {
                        last_checkpoint = Some(path);
                    }
                }
                return Err(Error::TrainingDiverged {
                    step: record.step,
                    term: name.to_string(),
                    last_checkpoint,
                });
            }
        }

        // Discriminator update from its own objective.
        let disc_grads = g.backward(terms.adversarial_disc);
        let gd = collect_grads(&g, &disc_grads, &terms.bound.discriminator);
        opt.discriminator.step(&mut model.discriminator, &gd);

        // Encoder/decoder/aux update from the total objective.
        let grads = g.backward(terms.total);
        let ge = collect_grads(&g, &grads, &terms.bound.encoder);
        opt.encoder.step(&mut model.encoder, &ge);
        for (i, head) in model.heads.iter_mut().enumerate() {
            let gh = collect_grads(&g, &grads, &terms.bound.heads[i]);
            opt.heads[i].step(head, &gh);
        }
        if let (Some(aux), Some(opt_aux), Some(order)) = (
            model.aux_head.as_mut(),
            opt.aux.as_mut(),
            terms.bound.aux.as_ref(),
        ) {
            let ga = collect_grads(&g, &grads, order);
            opt_aux.step(aux, &ga);
        }

        model.training_step += 1;
        log.records.push(record);

        if cfg.checkpoint_every > 0 && model.training_step % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("step_{:06}.ovmk", model.training_step));
                checkpoint::save(model, &rng_digest(cfg.seed, &rng), &path)?;
                last_checkpoint = Some(path);
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests;

#[cfg(test)]
mod gradcheck_tests;
