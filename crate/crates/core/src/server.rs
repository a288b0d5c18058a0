//! Round orchestration and aggregation of heterogeneous subnets.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{self, Architecture, ClientState, ClientUpdate, LocalConfig};
use crate::config::{
    Algorithm, DatasetSpec, ExperimentConfig, LambdaMode, PartitionSpec, Weighting,
};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{masked_counts, Mode, Network, UnitMask};
use crate::sampler::{self, SparsenessVector};
use crate::seeding::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub global_accuracy: f64,
    pub global_loss: f64,
    pub mean_local_accuracy: f64,
    pub std_local_accuracy: f64,
    pub mean_params_ratio: f64,
    pub mean_flops_ratio: f64,
    pub mean_alpha: Vec<f64>,
    pub epsilon: f64,
    pub participants: Vec<usize>,
}

/// Per-client outcome of a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub samples: usize,
    pub jsd: f64,
    pub lambda: f64,
    pub rounds_participated: usize,
    /// Parameter ratio of the client's most recent upload.
    pub params_ratio: Option<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub clients: Vec<ClientSummary>,
    pub supernet: Network,
    pub failures: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AggregationReport {
    pub accepted: Vec<usize>,
    pub rejected: Vec<usize>,
}

/// Uniform sample without replacement of `⌈fraction·N⌉` ids, ascending.
pub fn select_clients<R: Rng + ?Sized>(
    all_ids: &[usize],
    fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    let n = all_ids.len();
    if n == 0 {
        return Vec::new();
    }
    let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut picked: Vec<usize> = index::sample(rng, n, k)
        .into_iter()
        .map(|i| all_ids[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Per-layer row/column index sets a subnet occupies in the supernet.
fn footprint(supernet: &Network, mask: &UnitMask) -> Vec<(Vec<usize>, Vec<usize>)> {
    let k = supernet.num_hidden();
    let units = |l: usize| -> Vec<usize> {
        if l == 0 {
            (0..supernet.input_dim()).collect()
        } else if l == k + 1 {
            (0..supernet.num_classes()).collect()
        } else {
            mask.active_indices(l - 1)
        }
    };
    (0..=k).map(|l| (units(l), units(l + 1))).collect()
}

fn check_update(supernet: &Network, update: &ClientUpdate) -> Result<UnitMask> {
    let mask = UnitMask::from_index_map(&supernet.hidden_widths(), &update.index_map)?;
    let expected: Vec<usize> = {
        let mut s = vec![supernet.input_dim()];
        s.extend((0..mask.num_layers()).map(|l| mask.active_count(l)));
        s.push(supernet.num_classes());
        s
    };
    if update.theta.layer_sizes() != expected {
        return Err(Error::invalid(format!(
            "subnet sizes {:?} disagree with index map {:?}",
            update.theta.layer_sizes(),
            expected
        )));
    }
    if !update.theta.is_finite() {
        return Err(Error::numeric("subnet has non-finite parameters"));
    }
    Ok(mask)
}

/// Running weighted mean, `m ← m + (w/W)(v − m)`; exact when every value agrees.
struct Accumulator {
    mean: Vec<f64>,
    weight: Vec<f64>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            weight: vec![0.0; n],
        }
    }

    #[inline]
    fn add(&mut self, i: usize, v: f64, w: f64) {
        if w == 0.0 {
            return;
        }
        self.weight[i] += w;
        self.mean[i] += w / self.weight[i] * (v - self.mean[i]);
    }

    fn resolve(&self, old: &mut [f64]) {
        for ((o, m), w) in old.iter_mut().zip(&self.mean).zip(&self.weight) {
            if *w > 0.0 {
                *o = *m;
            }
        }
    }
}

/// Merges subnets into the supernet.
///
/// A weight `i → j` takes the weighted mean over clients whose index map
/// keeps both endpoints; bias and normalization values follow their unit.
/// Anything no client kept is left unchanged. Updates are folded in
/// ascending client id. Malformed updates are skipped and reported.
pub fn indexed_aggregate(
    supernet: &Network,
    updates: &[ClientUpdate],
    weighting: Weighting,
) -> (Network, AggregationReport) {
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);

    let layers = supernet.layers();
    let mut weights: Vec<Accumulator> = layers
        .iter()
        .map(|l| Accumulator::new(l.weights.as_slice().len()))
        .collect();
    // bias, gamma, beta, running mean, running var
    let mut unit: Vec<[Accumulator; 5]> = layers
        .iter()
        .map(|l| std::array::from_fn(|_| Accumulator::new(l.fan_out())))
        .collect();
    let mut report = AggregationReport::default();

    for update in order {
        let mask = match check_update(supernet, update) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("rejecting update from client {}: {e}", update.client_id);
                report.rejected.push(update.client_id);
                continue;
            }
        };
        let w = match weighting {
            Weighting::Samples => update.n_k as f64,
            Weighting::Uniform => 1.0,
        };
        for (l, (rows, cols)) in footprint(supernet, &mask).into_iter().enumerate() {
            let theta = &update.theta.layers()[l];
            let fan_out = layers[l].fan_out();
            for (ri, &r) in rows.iter().enumerate() {
                for (ci, &c) in cols.iter().enumerate() {
                    weights[l].add(r * fan_out + c, theta.weights.get(ri, ci), w);
                }
            }
            for (ci, &c) in cols.iter().enumerate() {
                unit[l][0].add(c, theta.bias[ci], w);
                if let Some(bn) = &theta.norm {
                    unit[l][1].add(c, bn.gamma[ci], w);
                    unit[l][2].add(c, bn.beta[ci], w);
                    unit[l][3].add(c, bn.running_mean[ci], w);
                    unit[l][4].add(c, bn.running_var[ci], w);
                }
            }
        }
        report.accepted.push(update.client_id);
    }

    let mut merged = supernet.clone();
    for (l, layer) in merged.layers_mut().iter_mut().enumerate() {
        weights[l].resolve(layer.weights.as_mut_slice());
        unit[l][0].resolve(&mut layer.bias);
        if let Some(bn) = layer.norm.as_mut() {
            unit[l][1].resolve(&mut bn.gamma);
            unit[l][2].resolve(&mut bn.beta);
            unit[l][3].resolve(&mut bn.running_mean);
            unit[l][4].resolve(&mut bn.running_var);
        }
    }
    (merged, report)
}

/// Sample-weighted mean of full-size client models, `w = Σ n_k·w_k / Σ n_k`,
/// accumulated as a running mean in ascending client id.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<Network> {
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let first = order
        .first()
        .ok_or_else(|| Error::invalid("no updates to average"))?;
    if let Some(bad) = order.iter().find(|u| !u.index_map.iter().all(|&b| b)) {
        return Err(Error::invalid(format!(
            "client {} sent a partial subnet; use indexed aggregation",
            bad.client_id
        )));
    }
    if order.iter().all(|u| u.n_k == 0) {
        return Err(Error::invalid("updates carry no samples"));
    }
    let sizes = first.theta.layer_sizes();
    if let Some(bad) = order.iter().find(|u| u.theta.layer_sizes() != sizes) {
        return Err(Error::invalid(format!(
            "client {} model shape differs",
            bad.client_id
        )));
    }

    let mut out = first.theta.clone();
    let average = |pick: &dyn Fn(&Network) -> Vec<&[f64]>, dst: &mut Vec<Vec<f64>>| {
        for slot in dst.iter_mut() {
            slot.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut total = 0.0;
        for u in &order {
            let w = u.n_k as f64;
            if w == 0.0 {
                continue;
            }
            total += w;
            let share = w / total;
            for (slot, src) in dst.iter_mut().zip(pick(&u.theta)) {
                for (d, s) in slot.iter_mut().zip(src) {
                    *d += share * (s - *d);
                }
            }
        }
    };

    for l in 0..out.layers().len() {
        let mut buffers: Vec<Vec<f64>> = {
            let layer = &out.layers()[l];
            let mut b = vec![layer.weights.as_slice().to_vec(), layer.bias.clone()];
            if let Some(bn) = &layer.norm {
                b.extend([
                    bn.gamma.clone(),
                    bn.beta.clone(),
                    bn.running_mean.clone(),
                    bn.running_var.clone(),
                ]);
            }
            b
        };
        average(
            &|net: &Network| {
                let layer = &net.layers()[l];
                let mut v: Vec<&[f64]> = vec![layer.weights.as_slice(), &layer.bias];
                if let Some(bn) = &layer.norm {
                    v.extend([&bn.gamma[..], &bn.beta, &bn.running_mean, &bn.running_var]);
                }
                v
            },
            &mut buffers,
        );
        let layer = &mut out.layers_mut()[l];
        let mut it = buffers.into_iter();
        layer.weights = Matrix::from_vec(
            layer.weights.rows(),
            layer.weights.cols(),
            it.next().expect("weights"),
        )?;
        layer.bias = it.next().expect("bias");
        if let Some(bn) = layer.norm.as_mut() {
            bn.gamma = it.next().expect("gamma");
            bn.beta = it.next().expect("beta");
            bn.running_mean = it.next().expect("running mean");
            bn.running_var = it.next().expect("running var");
        }
    }
    Ok(out)
}

/// One random mask keeping exactly `⌈keep·C⌉` units per layer.
pub fn dropout_mask<R: Rng + ?Sized>(widths: &[usize], keep: f64, rng: &mut R) -> Result<UnitMask> {
    let layers = widths
        .iter()
        .map(|&c| {
            let n = sampler::kept_units(keep, c);
            let mut bits = vec![false; c];
            for i in index::sample(rng, c, n) {
                bits[i] = true;
            }
            bits
        })
        .collect();
    UnitMask::from_layers(layers)
}

/// Runs the selected clients of a FedDrop round on one shared random subnet.
pub fn feddrop_round(
    supernet: &Network,
    dataset: &Dataset,
    states: &[&ClientState],
    round: usize,
    epsilon: f64,
    keep: f64,
    cfg: &LocalConfig,
) -> Result<(UnitMask, Vec<Result<ClientUpdate>>)> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::config("feddrop_keep", "must lie in (0, 1]"));
    }
    let mut rng = seeding::stream(cfg.seed, Stream::Dropout, &[round as u64]);
    let mask = dropout_mask(&supernet.hidden_widths(), keep, &mut rng)?;
    let arch = Architecture::Fixed(mask.clone());
    let updates = run_clients(supernet, dataset, states, round, epsilon, &arch, cfg);
    Ok((mask, updates))
}

fn run_clients(
    supernet: &Network,
    dataset: &Dataset,
    states: &[&ClientState],
    round: usize,
    epsilon: f64,
    arch: &Architecture,
    cfg: &LocalConfig,
) -> Vec<Result<ClientUpdate>> {
    states
        .par_iter()
        .map(|s| client::local_round(supernet, dataset, s, round, epsilon, arch, cfg))
        .collect()
}

/// Everything derived from the configuration before round 0.
pub struct Federation {
    pub dataset: Dataset,
    pub supernet: Network,
    pub train_clients: Vec<ClientState>,
    /// Pooled samples of the held-out clients.
    pub test_indices: Vec<usize>,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut ds = match &cfg.dataset {
        DatasetSpec::Blobs {
            classes,
            samples_per_class,
            dim,
            spread,
        } => {
            let mut rng = seeding::stream(cfg.seed, Stream::Dataset, &[]);
            data::make_blobs(*classes, *samples_per_class, *dim, *spread, &mut rng)?
        }
        DatasetSpec::Csv { path } => data::load_csv_dataset(path)?,
    };
    ds.standardize();
    Ok(ds)
}

pub fn build_federation(cfg: &ExperimentConfig) -> Result<Federation> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let sizes = match &cfg.layer_sizes {
        Some(s) => s.clone(),
        None => vec![dataset.dim(), 128, 128, dataset.num_classes],
    };
    if sizes[0] != dataset.dim() || *sizes.last().expect("validated") != dataset.num_classes {
        return Err(Error::config(
            "layer_sizes",
            format!(
                "{sizes:?} must start with {} features and end with {} classes",
                dataset.dim(),
                dataset.num_classes
            ),
        ));
    }
    let supernet = Network::he_uniform(&sizes, &mut seeding::stream(cfg.seed, Stream::Init, &[]))?;

    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = seeding::stream(cfg.seed, Stream::Partition, &[]);
    let partition = match &cfg.partition {
        PartitionSpec::Dirichlet {
            concentration,
            min_samples,
        } => data::dirichlet_partition(
            &dataset,
            &all,
            cfg.clients,
            *concentration,
            *min_samples,
            &mut rng,
        )?,
        PartitionSpec::Shards { shards_per_client } => {
            data::shards_partition(&dataset, &all, cfg.clients, *shards_per_client, &mut rng)?
        }
    };

    let n_test = ((cfg.clients as f64 * cfg.test_client_fraction).round() as usize)
        .clamp(1, cfg.clients - 1);
    let mut test_ids: Vec<usize> = index::sample(&mut rng, cfg.clients, n_test).into_vec();
    test_ids.sort_unstable();
    let test_indices: Vec<usize> = {
        let mut v: Vec<usize> = test_ids
            .iter()
            .flat_map(|&c| partition.client_indices[c].iter().copied())
            .collect();
        v.sort_unstable();
        v
    };

    let num_hidden = sizes.len() - 2;
    let mut train_clients = Vec::new();
    for c in (0..cfg.clients).filter(|c| !test_ids.contains(c)) {
        let mut idx = partition.client_indices[c].clone();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        let n_test_local =
            ((idx.len() as f64 * cfg.local_test_fraction).round() as usize).clamp(1, idx.len() - 1);
        let mut test = idx[..n_test_local].to_vec();
        let mut pool = idx[n_test_local..].to_vec();
        test.sort_unstable();
        pool.sort_unstable();
        let hist = dataset.label_histogram(&pool);
        let jsd = data::jsd(&hist, &data::uniform(dataset.num_classes))?;
        train_clients.push(ClientState {
            client_id: c,
            pool,
            test,
            label_histogram: hist,
            jsd,
            lambda: 0.0,
            sparseness: SparsenessVector::new(
                num_hidden,
                cfg.sampling.alpha_init,
                cfg.sampling.epsilon_init,
            ),
        });
    }

    let (lo, hi) = train_clients
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.jsd), hi.max(s.jsd))
        });
    for s in &mut train_clients {
        s.lambda = match cfg.sampling.lambda_mode {
            LambdaMode::Jsd => client::lambda_from_jsd(&s.label_histogram, dataset.num_classes)?,
            LambdaMode::JsdMinmax => {
                let norm = if hi > lo {
                    (s.jsd - lo) / (hi - lo)
                } else {
                    0.0
                };
                norm + 0.5
            }
            LambdaMode::Fixed => cfg.sampling.lambda,
        };
    }
    Ok(Federation {
        dataset,
        supernet,
        train_clients,
        test_indices,
    })
}

pub fn local_config(cfg: &ExperimentConfig) -> LocalConfig {
    LocalConfig {
        epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        lr_weights: cfg.lr_weights,
        lr_alpha: cfg.lr_alpha,
        alpha_min: cfg.sampling.alpha_min,
        root_tolerance: cfg.sampling.root_tolerance,
        freeze_alpha: cfg.sampling.freeze_alpha,
        importance: cfg.importance,
        seed: cfg.seed,
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs every round of the configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let fed = build_federation(cfg)?;
    run_federation(cfg, fed)
}

pub fn run_federation(cfg: &ExperimentConfig, fed: Federation) -> Result<ExperimentOutcome> {
    let Federation {
        dataset,
        mut supernet,
        mut train_clients,
        test_indices,
    } = fed;
    let local = local_config(cfg);
    let sampling = cfg.sampling_config();
    let test_batch = dataset.batch(&test_indices)?;
    let widths = supernet.hidden_widths();
    let full = UnitMask::full(&widths);
    let ids: Vec<usize> = train_clients.iter().map(|s| s.client_id).collect();
    let mut summaries: Vec<ClientSummary> = train_clients
        .iter()
        .map(|s| ClientSummary {
            client_id: s.client_id,
            samples: s.pool.len(),
            jsd: s.jsd,
            lambda: s.lambda,
            rounds_participated: 0,
            params_ratio: None,
            alpha: s.sparseness.alpha.clone(),
        })
        .collect();
    let mut reports = Vec::with_capacity(cfg.rounds);
    let mut failures = 0;

    for round in 0..cfg.rounds {
        let epsilon = sampler::anneal(&sampling, round);
        let (participants, local_acc, params_ratio, flops_ratio, mean_alpha) = match cfg.algorithm {
            Algorithm::Centralized => {
                let pool: Vec<usize> = {
                    let mut v: Vec<usize> = train_clients
                        .iter()
                        .flat_map(|s| s.pool.iter().copied())
                        .collect();
                    v.sort_unstable();
                    v
                };
                let mut rng = seeding::stream(cfg.seed, Stream::Centralized, &[round as u64]);
                let gates = full.to_gates();
                for _ in 0..cfg.local_epochs {
                    use rand::seq::SliceRandom;
                    let mut order = pool.clone();
                    order.shuffle(&mut rng);
                    for chunk in order.chunks(cfg.batch_size) {
                        let batch = dataset.batch(chunk)?;
                        let (grads, pass) = supernet.loss_and_grads(&gates, &batch, Mode::Train)?;
                        supernet.sgd_step(&grads, cfg.lr_weights);
                        supernet.absorb_batch_statistics(&pass, &gates);
                    }
                }
                if !supernet.is_finite() {
                    return Err(Error::numeric("centralized training diverged"));
                }
                let mut accs = Vec::with_capacity(train_clients.len());
                for s in &train_clients {
                    let (_, acc) =
                        supernet.evaluate(&gates, &dataset.batch(&s.test)?, Mode::Eval)?;
                    accs.push(acc);
                }
                (
                    Vec::new(),
                    accs,
                    vec![1.0],
                    vec![1.0],
                    vec![1.0; widths.len()],
                )
            }
            algorithm => {
                let mut rng = seeding::stream(cfg.seed, Stream::Selection, &[round as u64]);
                let selected = select_clients(&ids, cfg.participation, &mut rng);
                let states: Vec<&ClientState> = train_clients
                    .iter()
                    .filter(|s| selected.binary_search(&s.client_id).is_ok())
                    .collect();
                let results = match algorithm {
                    Algorithm::Adds => run_clients(
                        &supernet,
                        &dataset,
                        &states,
                        round,
                        epsilon,
                        &Architecture::Adaptive,
                        &local,
                    ),
                    Algorithm::Fedavg => run_clients(
                        &supernet,
                        &dataset,
                        &states,
                        round,
                        epsilon,
                        &Architecture::Fixed(full.clone()),
                        &local,
                    ),
                    Algorithm::Feddrop => {
                        feddrop_round(
                            &supernet,
                            &dataset,
                            &states,
                            round,
                            epsilon,
                            cfg.feddrop_keep,
                            &local,
                        )?
                        .1
                    }
                    Algorithm::Centralized => unreachable!(),
                };
                let mut updates = Vec::with_capacity(results.len());
                for (state, res) in states.iter().zip(results) {
                    match res {
                        Ok(u) => updates.push(u),
                        Err(e) => {
                            failures += 1;
                            log::warn!("round {round}: client {} failed: {e}", state.client_id);
                        }
                    }
                }

                for u in &updates {
                    let pos = ids.binary_search(&u.client_id).expect("known client");
                    train_clients[pos].sparseness = u.sparseness.clone();
                    let summary = &mut summaries[pos];
                    summary.rounds_participated += 1;
                    summary.params_ratio = Some(u.metrics.params_ratio);
                    summary.alpha = u.sparseness.alpha.clone();
                }

                if !updates.is_empty() {
                    supernet = match algorithm {
                        Algorithm::Fedavg => fedavg_aggregate(&updates)?,
                        _ => indexed_aggregate(&supernet, &updates, cfg.aggregation_weighting).0,
                    };
                }

                let accs: Vec<f64> = updates.iter().map(|u| u.metrics.local_accuracy).collect();
                let pr: Vec<f64> = updates.iter().map(|u| u.metrics.params_ratio).collect();
                let fr: Vec<f64> = updates.iter().map(|u| u.metrics.flops_ratio).collect();
                let mean_alpha = (0..widths.len())
                    .map(|k| {
                        let vals: Vec<f64> = updates
                            .iter()
                            .map(|u| match algorithm {
                                Algorithm::Adds => u.sparseness.alpha[k],
                                // realized keep ratio of the fixed subnet
                                _ => {
                                    let mask = UnitMask::from_index_map(&widths, &u.index_map)
                                        .expect("validated");
                                    mask.active_count(k) as f64 / widths[k] as f64
                                }
                            })
                            .collect();
                        mean_std(&vals).0
                    })
                    .collect();
                (
                    updates.iter().map(|u| u.client_id).collect(),
                    accs,
                    pr,
                    fr,
                    mean_alpha,
                )
            }
        };

        let (global_loss, global_accuracy) =
            supernet.evaluate(&full.to_gates(), &test_batch, Mode::Eval)?;
        let (mean_local_accuracy, std_local_accuracy) = mean_std(&local_acc);
        reports.push(RoundReport {
            round,
            global_accuracy,
            global_loss,
            mean_local_accuracy,
            std_local_accuracy,
            mean_params_ratio: mean_std(&params_ratio).0,
            mean_flops_ratio: mean_std(&flops_ratio).0,
            mean_alpha,
            epsilon,
            participants,
        });
        log::info!(
            "round {round}: global acc {global_accuracy:.4}, local acc {mean_local_accuracy:.4}, params {:.3}",
            reports.last().expect("pushed").mean_params_ratio
        );
    }

    Ok(ExperimentOutcome {
        reports,
        clients: summaries,
        supernet,
        failures,
    })
}

/// Bits needed for an index map: one per samplable unit.
pub fn index_map_bits(supernet: &Network) -> usize {
    supernet.hidden_widths().iter().sum()
}

/// Parameter ratio of a subnet relative to the full supernet.
pub fn params_ratio(supernet: &Network, mask: &UnitMask) -> f64 {
    masked_counts(supernet, mask).params as f64
        / masked_counts(supernet, &supernet.full_mask()).params as f64
}
