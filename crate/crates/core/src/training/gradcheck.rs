//! Verification of the differentiable contract: analytic gradients of every
//! loss term against central finite differences on a small probe model.
//!
//! All pipeline randomness (probe batch, payloads, distortion realizations)
//! is frozen up front, so each loss term is a deterministic function of the
//! parameters and finite differences are well defined.

use rand::Rng;

use crate::autodiff::{Graph, Mode, Tensor};
use crate::codec::{images_to_batch, signals_to_tensor, CodecModel, Image, Message};
use crate::distortion::{realize, DistortionKind};
use crate::error::{Error, Result};
use crate::nn::ParamBlock;
use crate::rng::{self, tag};

use super::{
    build_step_graph, LossWeights, ResilienceDraws, StepDraws, TrackMask,
};

/// Loss term selector for gradient verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Image,
    Decoder,
    AdversarialGen,
    Resilience,
    Total,
}

impl LossTerm {
    pub fn name(&self) -> &'static str {
        match self {
            LossTerm::Image => "image",
            LossTerm::Decoder => "decoder",
            LossTerm::AdversarialGen => "adversarial_gen",
            LossTerm::Resilience => "resilience",
            LossTerm::Total => "total",
        }
    }

    fn needs_resilience(&self) -> bool {
        matches!(self, LossTerm::Resilience | LossTerm::Total)
    }
}

/// Components to exclude (freeze) from a check.
#[derive(Debug, Clone, Copy, Default)]
pub struct ComponentMask {
    pub encoder: bool,
    pub heads: bool,
    pub aux: bool,
    pub discriminator: bool,
}

/// Probe configuration for [`gradient_check`].
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub batch: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub distortion: DistortionKind,
    pub freeze: ComponentMask,
    /// Coordinates to sample per tensor; `None` checks every coordinate.
    pub coords_per_tensor: Option<usize>,
    pub epsilon: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            batch: 2,
            seed: 123,
            weights: LossWeights::default(),
            distortion: DistortionKind::Identity,
            freeze: ComponentMask::default(),
            coords_per_tensor: None,
            epsilon: 1e-4,
        }
    }
}

/// One verified coordinate.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub component: String,
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Result of verifying one loss term.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub term: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Worst offenders, sorted by relative error, capped at 16 entries.
    pub worst: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradient check [{}]: {} coords, max relative error {:.3e}",
            self.term, self.coords_checked, self.max_rel_error
        )
    }
}

pub(crate) fn fixed_draws(model: &CodecModel, probe: &ProbeConfig, with_resilience: bool) -> StepDraws {
    let size = model.config.image_size;
    let l = model.config.payload_len;
    let b = probe.batch;
    let mut r = rng::substream(probe.seed, &[tag::GRADCHECK]);

    let images: Vec<Image> = (0..b)
        .map(|_| {
            Image::from_fn(size, size, |_, _, _| r.random_range(0.2..0.8)).expect("probe image")
        })
        .collect();
    let batch = images_to_batch(&images);
    let w1: Vec<Message> = (0..b).map(|_| Message::random(l, &mut r)).collect();
    let sig1 = signals_to_tensor(
        &w1.iter()
            .map(|m| m.to_signal(model.config.amplitude))
            .collect::<Vec<_>>(),
    );
    let task_dist = realize(&probe.distortion, b, size, size, &mut r);
    let resilience = with_resilience.then(|| {
        let w2: Vec<Message> = w1
            .iter()
            .map(|m1| super::draw_attack_message(&mut r, m1))
            .collect();
        let sig2 = signals_to_tensor(
            &w2.iter()
                .map(|m| m.to_signal(model.config.amplitude))
                .collect::<Vec<_>>(),
        );
        let dist = realize(&probe.distortion, b, size, size, &mut r);
        ResilienceDraws { sig2, dist }
    });
    StepDraws {
        batch,
        sig1,
        task_dist,
        resilience,
    }
}

pub(crate) fn eval_term(
    model: &CodecModel,
    draws: &StepDraws,
    weights: &LossWeights,
    term: LossTerm,
) -> f64 {
    let mut g = Graph::new(Mode::Train);
    let terms = build_step_graph(&mut g, model, draws, weights, TrackMask::all());
    let var = match term {
        LossTerm::Image => terms.image,
        LossTerm::Decoder => terms.decoder,
        LossTerm::AdversarialGen => terms.adversarial_gen,
        LossTerm::Resilience => terms
            .resilience
            .expect("resilience term requested but pipeline not built"),
        LossTerm::Total => terms.total,
    };
    g.scalar(var)
}

/// Names of the model components in canonical order, with frozen flags.
fn component_plan(model: &CodecModel, freeze: &ComponentMask) -> Vec<(String, bool)> {
    let mut plan = vec![("encoder".to_string(), freeze.encoder)];
    for i in 0..model.primary_head_count() {
        plan.push((format!("decoder_head_{}", i + 1), freeze.heads));
    }
    if model.aux_head.is_some() {
        plan.push(("aux_zero_head".to_string(), freeze.aux));
    }
    plan.push(("discriminator".to_string(), freeze.discriminator));
    plan
}

fn with_component<R>(
    model: &mut CodecModel,
    comp: usize,
    f: impl FnOnce(&mut dyn ParamBlock) -> R,
) -> R {
    let k = model.primary_head_count();
    let has_aux = model.aux_head.is_some();
    if comp == 0 {
        f(&mut model.encoder)
    } else if comp <= k {
        f(&mut model.heads[comp - 1])
    } else if has_aux && comp == k + 1 {
        f(model.aux_head.as_mut().unwrap())
    } else {
        f(&mut model.discriminator)
    }
}

fn set_coord(model: &mut CodecModel, comp: usize, tensor: usize, index: usize, value: f64) {
    with_component(model, comp, |block| {
        let mut ti = 0usize;
        block.visit_mut(&mut |_, t| {
            if ti == tensor {
                t.as_slice_mut().expect("contiguous param")[index] = value;
            }
            ti += 1;
        });
    });
}

/// Compare analytic gradients of `term` against central finite differences
/// on a random (or exhaustive) subset of the unfrozen parameters.
pub fn gradient_check(
    model: &CodecModel,
    term: LossTerm,
    probe: &ProbeConfig,
) -> Result<GradCheckReport> {
    if !(probe.epsilon.is_finite() && probe.epsilon > 0.0) {
        return Err(Error::config("epsilon", "must be a positive finite real"));
    }
    if probe.batch == 0 {
        return Err(Error::config("batch", "must be positive"));
    }
    let weights = probe.weights.resolved_for(model)?;
    let with_res = term.needs_resilience();
    let draws = fixed_draws(model, probe, with_res);

    // Analytic pass.
    let track = TrackMask {
        encoder: !probe.freeze.encoder,
        heads: !probe.freeze.heads,
        aux: !probe.freeze.aux,
        discriminator: !probe.freeze.discriminator,
    };
    let mut g = Graph::new(Mode::Train);
    let terms = build_step_graph(&mut g, model, &draws, &weights, track);
    let root = match term {
        LossTerm::Image => terms.image,
        LossTerm::Decoder => terms.decoder,
        LossTerm::AdversarialGen => terms.adversarial_gen,
        LossTerm::Resilience => terms
            .resilience
            .expect("resilience pipeline missing"),
        LossTerm::Total => terms.total,
    };
    let grads = g.backward(root);

    // Pair every unfrozen component with its bound order.
    let plan = component_plan(model, &probe.freeze);
    let orders: Vec<&crate::nn::BoundVars> = {
        let mut v = vec![&terms.bound.encoder];
        for o in &terms.bound.heads {
            v.push(o);
        }
        if let Some(a) = &terms.bound.aux {
            v.push(a);
        }
        v.push(&terms.bound.discriminator);
        v
    };

    let mut scratch = model.clone();
    let mut coord_rng = rng::substream(probe.seed, &[tag::GRADCHECK, 1]);
    let mut entries: Vec<GradCheckEntry> = Vec::new();
    let mut coords_checked = 0usize;
    let mut max_rel = 0.0f64;

    // Coordinates with gradients four-plus orders below the dominant one are
    // held to absolute accuracy: central differences cannot resolve them.
    let gmax = plan
        .iter()
        .zip(&orders)
        .filter(|((_, frozen), _)| !*frozen)
        .flat_map(|(_, order)| order.0.iter())
        .filter_map(|&v| grads.get(v))
        .flat_map(|t| t.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let rel_floor = (1e-4 * gmax).max(1e-8);

    for (comp_idx, ((comp_name, frozen), order)) in plan.iter().zip(&orders).enumerate() {
        if *frozen {
            continue;
        }
        // Tensor names in canonical order.
        let mut tensor_names: Vec<String> = Vec::new();
        let mut tensor_lens: Vec<usize> = Vec::new();
        with_component(&mut scratch, comp_idx, |block| {
            block.visit(&mut |name, t| {
                tensor_names.push(name.to_string());
                tensor_lens.push(t.len());
            });
        });
        assert_eq!(tensor_names.len(), order.0.len(), "order/name drift");

        for (tensor_idx, (name, &len)) in tensor_names.iter().zip(&tensor_lens).enumerate() {
            let var = order.0[tensor_idx];
            let analytic_tensor: Tensor = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(var).raw_dim()));
            let analytic_flat = analytic_tensor.as_slice().expect("contiguous grad");

            let coords: Vec<usize> = match probe.coords_per_tensor {
                None => (0..len).collect(),
                Some(n) => (0..n.min(len))
                    .map(|_| coord_rng.random_range(0..len))
                    .collect(),
            };
            for idx in coords {
                let original = {
                    let mut val = 0.0;
                    with_component(&mut scratch, comp_idx, |block| {
                        let mut ti = 0usize;
                        block.visit(&mut |_, t| {
                            if ti == tensor_idx {
                                val = t.as_slice().unwrap()[idx];
                            }
                            ti += 1;
                        });
                    });
                    val
                };
                set_coord(&mut scratch, comp_idx, tensor_idx, idx, original + probe.epsilon);
                let plus = eval_term(&scratch, &draws, &weights, term);
                set_coord(&mut scratch, comp_idx, tensor_idx, idx, original - probe.epsilon);
                let minus = eval_term(&scratch, &draws, &weights, term);
                set_coord(&mut scratch, comp_idx, tensor_idx, idx, original);

                let numeric = (plus - minus) / (2.0 * probe.epsilon);
                let analytic = analytic_flat[idx];
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(rel_floor);
                coords_checked += 1;
                max_rel = max_rel.max(rel);
                entries.push(GradCheckEntry {
                    component: comp_name.clone(),
                    tensor: name.clone(),
                    index: idx,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }

    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    entries.truncate(16);
    Ok(GradCheckReport {
        term: term.name().to_string(),
        coords_checked,
        max_rel_error: max_rel,
        worst: entries,
    })
}

/// Run [`gradient_check`] for every loss term.
pub fn gradient_check_all(model: &CodecModel, probe: &ProbeConfig) -> Result<Vec<GradCheckReport>> {
    [
        LossTerm::Image,
        LossTerm::Decoder,
        LossTerm::AdversarialGen,
        LossTerm::Resilience,
        LossTerm::Total,
    ]
    .iter()
    .map(|t| gradient_check(model, *t, probe))
    .collect()
}
