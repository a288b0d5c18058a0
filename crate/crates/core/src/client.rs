//! One participant's local round.
//!
//! In adaptive mode a round alternates, once per local epoch, between a
//! keep-ratio step on the validation split and a pass of weight updates on
//! the training split, with subnets drawn from the importance-weighted
//! sampler. At the end the architecture is hardened to the top units and the
//! surviving parameters are packaged for the server together with the index
//! map that locates them in the supernet.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::importance::{self, ImportanceMode, ImportanceVector};
use crate::nn::{masked_counts, Batch, Mode, Network, UnitGates, UnitMask};
use crate::sampler::{self, SparsenessVector};
use crate::seeding::{self, Stream};

pub const VALIDATION_FRACTION: f64 = 0.1;
pub const MIN_LOCAL_SAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub client_id: usize,
    /// Indices of the client's local training pool; the train/validation
    /// split is redrawn from it every round.
    pub pool: Vec<usize>,
    /// Held-out indices for local evaluation.
    pub test: Vec<usize>,
    pub label_histogram: Vec<f64>,
    pub jsd: f64,
    pub lambda: f64,
    pub sparseness: SparsenessVector,
}

/// How the client chooses the subnet it trains.
#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    /// Learn keep ratios and sample subnets.
    Adaptive,
    /// Train exactly this subnet (the full mask gives plain local SGD).
    Fixed(UnitMask),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub lr_alpha: f64,
    pub alpha_min: f64,
    pub root_tolerance: f64,
    pub freeze_alpha: bool,
    pub importance: ImportanceMode,
    pub seed: u64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            lr_weights: 0.05,
            lr_alpha: 0.01,
            alpha_min: 0.05,
            root_tolerance: 1e-8,
            freeze_alpha: false,
            importance: ImportanceMode::Slim,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub local_loss: f64,
    pub local_accuracy: f64,
    pub params: u64,
    pub flops: u64,
    pub params_ratio: f64,
    pub flops_ratio: f64,
    pub alpha: Vec<f64>,
    pub saturated_alpha_steps: usize,
}

/// What a client sends back: its subnet, where that subnet lives in the
/// supernet, and how much data trained it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// The trained subnet with masked units physically removed.
    pub theta: Network,
    /// Flattened hidden-unit mask over the supernet's samplable units.
    pub index_map: Vec<bool>,
    pub n_k: usize,
    pub metrics: ClientMetrics,
    /// Keep ratios to carry into the client's next round.
    pub sparseness: SparsenessVector,
}

/// 90/10 split of `pool` into (train, validation), each sorted.
pub fn split_local_data<R: Rng + ?Sized>(
    pool: &[usize],
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if pool.len() < MIN_LOCAL_SAMPLES {
        return Err(Error::invalid(format!(
            "client has {} samples, need at least {MIN_LOCAL_SAMPLES} to carve a validation split",
            pool.len()
        )));
    }
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    let n_val = ((pool.len() as f64 * VALIDATION_FRACTION).round() as usize).max(1);
    let mut val = shuffled[..n_val].to_vec();
    let mut train = shuffled[n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// `λ = JSD₂(histogram ‖ uniform) + 0.5`.
pub fn lambda_from_jsd(label_histogram: &[f64], num_classes: usize) -> Result<f64> {
    Ok(data::jsd(label_histogram, &data::uniform(num_classes))? + 0.5)
}

/// Per-layer mask: α ≥ 1 keeps everything, otherwise solve β, relax, and draw.
struct Draw {
    mask: Vec<Vec<bool>>,
    probs: Vec<Option<Vec<f64>>>,
}

fn draw_subnet<R: Rng + ?Sized>(
    imp: &ImportanceVector,
    sparseness: &mut SparsenessVector,
    tol: f64,
    rng: &mut R,
) -> Result<Draw> {
    let mut mask = Vec::with_capacity(imp.per_layer.len());
    let mut probs = Vec::with_capacity(imp.per_layer.len());
    for (k, b) in imp.per_layer.iter().enumerate() {
        if sparseness.alpha[k] >= 1.0 {
            mask.push(vec![true; b.len()]);
            probs.push(None);
            continue;
        }
        let beta = sampler::solve_shift(b, sparseness.alpha[k], sparseness.epsilon, tol)?;
        sparseness.beta[k] = beta;
        let p = sampler::layer_probs(b, beta, sparseness.epsilon);
        mask.push(sampler::sample_mask(&p, rng));
        probs.push(Some(p));
    }
    Ok(Draw { mask, probs })
}

fn harden_all(imp: &ImportanceVector, alpha: &[f64]) -> Result<UnitMask> {
    UnitMask::from_layers(
        imp.per_layer
            .iter()
            .zip(alpha)
            .map(|(b, &a)| sampler::harden(b, a))
            .collect(),
    )
}

fn minibatches<R: Rng + ?Sized>(idx: &[usize], size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order = idx.to_vec();
    order.shuffle(rng);
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

fn train_step(net: &mut Network, gates: &UnitGates, batch: &Batch, lr: f64) -> Result<f64> {
    let (grads, pass) = net.loss_and_grads(gates, batch, Mode::Train)?;
    net.sgd_step(&grads, lr);
    net.absorb_batch_statistics(&pass, gates);
    if !net.is_finite() {
        return Err(Error::numeric("weights diverged"));
    }
    Ok(grads.loss)
}

/// One descent step on every α from the validation loss of the drawn subnet.
/// Returns how many layers had no usable data gradient.
fn alpha_step(
    net: &Network,
    gates: &UnitGates,
    val_batch: &Batch,
    probs: &[Option<Vec<f64>>],
    sparseness: &mut SparsenessVector,
    lambda: f64,
    cfg: &LocalConfig,
) -> Result<usize> {
    let (grads, _) = net.loss_and_grads(gates, val_batch, Mode::Train)?;
    let (_, reg) = sampler::regularizer(&sparseness.alpha, lambda);
    let mut saturated = 0;
    let step: Vec<f64> = probs
        .iter()
        .zip(&grads.units)
        .zip(&reg)
        .map(|((p, g), r)| {
            let data = match p {
                Some(p) => {
                    let sg = sampler::sparseness_grad(g, p);
                    saturated += usize::from(sg.saturated);
                    sg.value
                }
                // α = 1: every probability is 1
                None => {
                    saturated += 1;
                    0.0
                }
            };
            data + r
        })
        .collect();
    sparseness.descend(&step, cfg.lr_alpha, cfg.alpha_min);
    Ok(saturated)
}

/// Runs one client's local round against an immutable supernet snapshot.
pub fn local_round(
    supernet: &Network,
    dataset: &Dataset,
    state: &ClientState,
    round: usize,
    epsilon: f64,
    arch: &Architecture,
    cfg: &LocalConfig,
) -> Result<ClientUpdate> {
    let ids = [state.client_id as u64, round as u64];
    let (train, val) = split_local_data(
        &state.pool,
        &mut seeding::stream(cfg.seed, Stream::Split, &ids),
    )?;
    let mut shuffle_rng = seeding::stream(cfg.seed, Stream::Shuffle, &ids);
    let mut sample_rng = seeding::stream(cfg.seed, Stream::Sampling, &ids);

    let mut net = supernet.clone();
    let mut sparseness = state.sparseness.clone();
    sparseness.epsilon = epsilon;
    let widths = net.hidden_widths();
    let full = UnitMask::full(&widths);
    let val_batch = dataset.batch(&val)?;
    let mut saturated = 0;

    for _epoch in 0..cfg.epochs {
        let gates = match arch {
            Architecture::Fixed(mask) => mask.to_gates(),
            Architecture::Adaptive => {
                let b = importance::compute(cfg.importance, &net, &full, &val_batch)?;
                let drawn = draw_subnet(&b, &mut sparseness, cfg.root_tolerance, &mut sample_rng)?;
                let gates = UnitMask::from_layers(drawn.mask)?.to_gates();
                if !cfg.freeze_alpha {
                    saturated += alpha_step(
                        &net,
                        &gates,
                        &val_batch,
                        &drawn.probs,
                        &mut sparseness,
                        state.lambda,
                        cfg,
                    )?;
                    // the next draw starts from the updated ratios
                    for (k, b) in b.per_layer.iter().enumerate() {
                        if sparseness.alpha[k] < 1.0 {
                            sparseness.beta[k] = sampler::solve_shift(
                                b,
                                sparseness.alpha[k],
                                sparseness.epsilon,
                                cfg.root_tolerance,
                            )?;
                        }
                    }
                }
                gates
            }
        };

        for idx in minibatches(&train, cfg.batch_size, &mut shuffle_rng) {
            let batch = dataset.batch(&idx)?;
            let loss = train_step(&mut net, &gates, &batch, cfg.lr_weights)?;
            if !loss.is_finite() {
                return Err(Error::numeric("non-finite training loss"));
            }
        }
    }

    let final_mask = match arch {
        Architecture::Fixed(mask) => mask.clone(),
        Architecture::Adaptive => {
            let b = importance::compute(cfg.importance, &net, &full, &val_batch)?;
            harden_all(&b, &sparseness.alpha)?
        }
    };

    let test_batch = dataset.batch(&state.test)?;
    let (local_loss, local_accuracy) =
        net.evaluate(&final_mask.to_gates(), &test_batch, Mode::Eval)?;
    if !local_loss.is_finite() {
        return Err(Error::numeric("non-finite local loss"));
    }
    let counts = masked_counts(supernet, &final_mask);
    let full_counts = masked_counts(supernet, &full);
    let theta = net.extract_subnet(&final_mask)?;

    Ok(ClientUpdate {
        client_id: state.client_id,
        theta,
        index_map: final_mask.index_map(),
        n_k: state.pool.len(),
        metrics: ClientMetrics {
            local_loss,
            local_accuracy,
            params: counts.params,
            flops: counts.flops,
            params_ratio: counts.params as f64 / full_counts.params as f64,
            flops_ratio: counts.flops as f64 / full_counts.flops as f64,
            alpha: sparseness.alpha.clone(),
            saturated_alpha_steps: saturated,
        },
        sparseness,
    })
}
