//! Re-embedding attack chains and the forensic evaluation suites.
//!
//! An attack chain embeds the defender's payload first and then re-embeds
//! one or more fresh payloads (with the same codec for the same-model suite,
//! with third-party codecs for the cross-model suite). The suites measure
//! how much of the *first* payload survives, as bit error rate against the
//! original message, plus PSNR/SSIM of every attacked image against the
//! original carrier.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::codec::{binarize, CodecModel, Image, Message};
use crate::distortion::{self, DistortionKind};
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::{self, tag};
use crate::training::mse_vs_signal;

/// Lookup of codecs by model id.
#[derive(Default)]
pub struct ModelRegistry {
    models: HashMap<String, CodecModel>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, model: CodecModel) {
        self.models.insert(model.model_id.clone(), model);
    }

    pub fn get(&self, id: &str) -> Result<&CodecModel> {
        self.models
            .get(id)
            .ok_or_else(|| Error::Registry(id.to_string()))
    }
}

/// An ordered list of (model id, payload) embedding steps. The first step
/// carries the defender's payload.
#[derive(Debug, Clone)]
pub struct AttackChain {
    steps: Vec<(String, Message)>,
}

impl AttackChain {
    pub fn new(steps: Vec<(String, Message)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Input("attack chain needs at least one step".into()));
        }
        Ok(AttackChain { steps })
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[(String, Message)] {
        &self.steps
    }
}

/// Run a chain: sequentially embed every step's payload with its model.
pub fn run_chain(chain: &AttackChain, image: &Image, registry: &ModelRegistry) -> Result<Image> {
    run_chain_with(chain, image, registry, None, &mut rng::stream(0))
}

/// Like [`run_chain`], optionally applying a distortion between consecutive
/// embeddings (off by default; the plain re-embedding protocol applies none).
pub fn run_chain_with(
    chain: &AttackChain,
    image: &Image,
    registry: &ModelRegistry,
    between: Option<&DistortionKind>,
    rng: &mut impl Rng,
) -> Result<Image> {
    let mut current = image.clone();
    for (i, (model_id, message)) in chain.steps.iter().enumerate() {
        if i > 0 {
            if let Some(kind) = between {
                current = distortion::apply(kind, &current, rng)?;
            }
        }
        let model = registry.get(model_id)?;
        current = model.embed(&current, message)?;
    }
    Ok(current)
}

/// Forensic-integrity loss: squared recovery error of the original payload
/// from an attacked image, read through the defender's first primary head.
pub fn forensic_loss(model: &CodecModel, attacked: &Image, w1: &Message) -> Result<f64> {
    let soft = model.decode(attacked, 1)?;
    mse_vs_signal(&soft, &w1.to_signal(model.config.amplitude))
}

/// Outcome of attacking one image at one depth.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub depth: usize,
    pub attacked: Image,
    pub recovered: Message,
    pub ber_percent: f64,
    pub forensic_loss: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// One per-image, per-depth measurement row.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub suite: String,
    pub defender_id: String,
    pub attacker_id: String,
    pub depth: usize,
    pub image_idx: usize,
    pub ber_percent: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-depth aggregate in the CSV schema.
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub suite: String,
    pub defender_id: String,
    pub attacker_id: String,
    pub depth: usize,
    pub ber_percent: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_images: usize,
    pub seed: u64,
}

/// Collected measurements of one suite run.
#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub suite: String,
    pub seed: u64,
    pub rows: Vec<SuiteRow>,
}

impl MetricsTable {
    /// Mean rows grouped by (defender, attacker, depth), in first-seen order.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut order: Vec<(String, String, usize)> = Vec::new();
        let mut acc: HashMap<(String, String, usize), (f64, f64, f64, usize)> = HashMap::new();
        for r in &self.rows {
            let key = (r.defender_id.clone(), r.attacker_id.clone(), r.depth);
            let slot = acc.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                (0.0, 0.0, 0.0, 0)
            });
            slot.0 += r.ber_percent;
            slot.1 += r.psnr_db;
            slot.2 += r.ssim;
            slot.3 += 1;
        }
        order
            .into_iter()
            .map(|key| {
                let (ber, psnr, ssim, n) = acc[&key];
                AggregateRow {
                    suite: self.suite.clone(),
                    defender_id: key.0,
                    attacker_id: key.1,
                    depth: key.2,
                    ber_percent: ber / n as f64,
                    psnr_db: psnr / n as f64,
                    ssim: ssim / n as f64,
                    n_images: n,
                    seed: self.seed,
                }
            })
            .collect()
    }

    /// Mean BER at one depth for single-pairing tables.
    pub fn mean_ber(&self, depth: usize) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.depth == depth)
            .map(|r| r.ber_percent)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn mean_psnr(&self, depth: usize) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.depth == depth)
            .map(|r| r.psnr_db)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn mean_ssim(&self, depth: usize) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.depth == depth)
            .map(|r| r.ssim)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Write the per-depth aggregates.
    /// Columns: suite, defender_id, attacker_id, depth, ber_percent,
    /// psnr_db, ssim, n_images, seed. Infinite PSNR serializes as "inf".
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "suite",
            "defender_id",
            "attacker_id",
            "depth",
            "ber_percent",
            "psnr_db",
            "ssim",
            "n_images",
            "seed",
        ])?;
        for r in self.aggregate() {
            w.write_record(&[
                r.suite,
                r.defender_id,
                r.attacker_id,
                r.depth.to_string(),
                format!("{:.6}", r.ber_percent),
                if r.psnr_db.is_infinite() {
                    "inf".to_string()
                } else {
                    format!("{:.6}", r.psnr_db)
                },
                format!("{:.6}", r.ssim),
                r.n_images.to_string(),
                r.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Attack one carrier at one depth with the defender's own codec: embed `w1`
/// first, then `depth - 1` fresh payloads drawn from `rng`.
pub fn intra_attack_image(
    defender: &CodecModel,
    image: &Image,
    w1: &Message,
    depth: usize,
    rng: &mut impl Rng,
) -> Result<Image> {
    if depth == 0 {
        return Err(Error::Input("attack depth must be at least 1".into()));
    }
    let mut current = defender.embed(image, w1)?;
    for _ in 1..depth {
        let w = Message::random(defender.config.payload_len, rng);
        current = defender.embed(&current, &w)?;
    }
    Ok(current)
}

/// Embed the defender's payload, then `additional` attacker payloads.
pub fn cross_attack_image(
    defender: &CodecModel,
    attacker: &CodecModel,
    image: &Image,
    w1: &Message,
    additional: usize,
    rng: &mut impl Rng,
) -> Result<Image> {
    let mut current = defender.embed(image, w1)?;
    for _ in 0..additional {
        let w = Message::random(attacker.config.payload_len, rng);
        current = attacker.embed(&current, &w)?;
    }
    Ok(current)
}

/// Full measurement of a single attacked image.
pub fn measure_attack(
    defender: &CodecModel,
    original: &Image,
    attacked: &Image,
    w1: &Message,
    head_index: usize,
    depth: usize,
) -> Result<AttackResult> {
    let soft = defender.decode(attacked, head_index)?;
    let recovered = binarize(&soft)?;
    Ok(AttackResult {
        depth,
        ber_percent: metrics::ber(w1, &recovered)?,
        forensic_loss: mse_vs_signal(&soft, &w1.to_signal(defender.config.amplitude))?,
        psnr_db: metrics::psnr(original, attacked)?,
        ssim: metrics::ssim(original, attacked)?,
        recovered,
        attacked: attacked.clone(),
    })
}

/// Same-model re-embedding suite over `dataset` at depths `1..=max_depth`.
///
/// Per image, the original payload and each depth's attack payloads are
/// drawn from a substream of `seed`, so results are independent of
/// evaluation order. PSNR/SSIM reference the original carrier at every
/// depth. BER is read through `head_index`.
pub fn run_intra_model_suite(
    defender: &CodecModel,
    dataset: &[Image],
    max_depth: usize,
    head_index: usize,
    seed: u64,
) -> Result<MetricsTable> {
    if dataset.is_empty() {
        return Err(Error::Input("suite dataset is empty".into()));
    }
    if max_depth == 0 {
        return Err(Error::Input("max_depth must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(dataset.len() * max_depth);
    for (idx, image) in dataset.iter().enumerate() {
        let mut r = rng::substream(seed, &[tag::SUITE_INTRA, idx as u64]);
        let w1 = Message::random(defender.config.payload_len, &mut r);
        for depth in 1..=max_depth {
            // Fresh attack payloads per depth.
            let attacked = intra_attack_image(defender, image, &w1, depth, &mut r)?;
            let result = measure_attack(defender, image, &attacked, &w1, head_index, depth)?;
            rows.push(SuiteRow {
                suite: "intra_model".into(),
                defender_id: defender.model_id.clone(),
                attacker_id: defender.model_id.clone(),
                depth,
                image_idx: idx,
                ber_percent: result.ber_percent,
                psnr_db: result.psnr_db,
                ssim: result.ssim,
            });
        }
    }
    Ok(MetricsTable {
        suite: "intra_model".into(),
        seed,
        rows,
    })
}

/// Cross-model suite: for every attacker and every `n in 1..=max_additional`
/// additional embeddings, measure recovery of the defender's payload.
pub fn run_cross_model_suite(
    defender: &CodecModel,
    attackers: &[&CodecModel],
    dataset: &[Image],
    max_additional: usize,
    head_index: usize,
    seed: u64,
) -> Result<MetricsTable> {
    if attackers.is_empty() {
        return Err(Error::Input("attacker set is empty".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Input("suite dataset is empty".into()));
    }
    let mut rows = Vec::new();
    for (ai, attacker) in attackers.iter().enumerate() {
        for (idx, image) in dataset.iter().enumerate() {
            let mut r = rng::substream(seed, &[tag::SUITE_CROSS, ai as u64, idx as u64]);
            let w1 = Message::random(defender.config.payload_len, &mut r);
            for n in 1..=max_additional {
                let attacked = cross_attack_image(defender, attacker, image, &w1, n, &mut r)?;
                let result = measure_attack(defender, image, &attacked, &w1, head_index, n)?;
                rows.push(SuiteRow {
                    suite: "cross_model".into(),
                    defender_id: defender.model_id.clone(),
                    attacker_id: attacker.model_id.clone(),
                    depth: n,
                    image_idx: idx,
                    ber_percent: result.ber_percent,
                    psnr_db: result.psnr_db,
                    ssim: result.ssim,
                });
            }
        }
    }
    Ok(MetricsTable {
        suite: "cross_model".into(),
        seed,
        rows,
    })
}

/// Mean squared auxiliary-head output on one image (zero for a perfectly
/// trained aux head).
pub fn aux_output_mean_square(model: &CodecModel, image: &Image) -> Result<f64> {
    let soft = model.decode(image, 0)?;
    Ok(crate::training::mse_vs_zero(&soft))
}
