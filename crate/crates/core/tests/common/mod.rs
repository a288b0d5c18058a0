#![allow(dead_code)]

use fedsample::nn::softmax_row;
use fedsample::{Batch, Matrix, Mode, Network, UnitGates, UnitMask};
use rand::Rng;

pub const BN_EPS: f64 = 1e-5;

/// He-initialized net with every normalization scalar and bias randomized.
pub fn random_net<R: Rng>(sizes: &[usize], rng: &mut R) -> Network {
    let mut net = Network::he_uniform(sizes, rng).unwrap();
    for layer in net.layers_mut() {
        layer
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-0.3..0.3));
        if let Some(bn) = layer.norm.as_mut() {
            bn.gamma
                .iter_mut()
                .for_each(|g| *g = rng.gen_range(0.5..1.5));
            bn.beta
                .iter_mut()
                .for_each(|b| *b = rng.gen_range(-0.5..0.5));
            bn.running_mean
                .iter_mut()
                .for_each(|m| *m = rng.gen_range(-0.5..0.5));
            bn.running_var
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(0.5..2.0));
        }
    }
    net
}

pub fn random_batch<R: Rng>(n: usize, d: usize, classes: usize, rng: &mut R) -> Batch {
    let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let y = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    Batch::new(Matrix::from_vec(n, d, x).unwrap(), y).unwrap()
}

/// Binary gates with at least one open unit per layer.
pub fn random_gates<R: Rng>(widths: &[usize], rng: &mut R) -> UnitGates {
    let per_layer = widths
        .iter()
        .map(|&w| {
            let mut g: Vec<f64> = (0..w)
                .map(|_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 })
                .collect();
            g[rng.gen_range(0..w)] = 1.0;
            g
        })
        .collect();
    UnitGates { per_layer }
}

/// Straightforward loop implementation of the gated Dense→BN→ReLU stack.
/// Returns the input, every gated hidden activation, and the logits.
pub fn reference_activations(
    net: &Network,
    gates: &UnitGates,
    x: &Matrix,
    mode: Mode,
) -> Vec<Vec<Vec<f64>>> {
    let n = x.rows();
    let mut layers = vec![(0..n).map(|r| x.row(r).to_vec()).collect::<Vec<_>>()];
    let k = net.num_hidden();
    for (l, layer) in net.layers().iter().enumerate() {
        let a = layers.last().unwrap();
        let (fi, fo) = (layer.fan_in(), layer.fan_out());
        let mut z = vec![vec![0.0; fo]; n];
        for r in 0..n {
            for j in 0..fo {
                let mut s = layer.bias[j];
                for i in 0..fi {
                    s += a[r][i] * layer.weights.get(i, j);
                }
                z[r][j] = s;
            }
        }
        if l < k {
            let bn = layer.norm.as_ref().unwrap();
            for j in 0..fo {
                let (mean, var) = match mode {
                    Mode::Train => {
                        let m = z.iter().map(|row| row[j]).sum::<f64>() / n as f64;
                        let v = z.iter().map(|row| (row[j] - m).powi(2)).sum::<f64>() / n as f64;
                        (m, v)
                    }
                    Mode::Eval => (bn.running_mean[j], bn.running_var[j]),
                };
                for row in z.iter_mut() {
                    let y = bn.gamma[j] * (row[j] - mean) / (var + BN_EPS).sqrt() + bn.beta[j];
                    row[j] = gates.per_layer[l][j] * y.max(0.0);
                }
            }
        }
        layers.push(z);
    }
    layers
}

pub fn reference_logits(net: &Network, gates: &UnitGates, x: &Matrix, mode: Mode) -> Vec<Vec<f64>> {
    reference_activations(net, gates, x, mode).pop().unwrap()
}

pub fn reference_loss(net: &Network, gates: &UnitGates, batch: &Batch, mode: Mode) -> f64 {
    let logits = reference_logits(net, gates, &batch.inputs, mode);
    let n = batch.len() as f64;
    logits
        .iter()
        .zip(&batch.labels)
        .map(|(z, &y)| -softmax_row(z)[y].ln())
        .sum::<f64>()
        / n
}

/// Signs of every hidden pre-activation; a change marks a rectifier kink.
pub fn relu_pattern(net: &Network, gates: &UnitGates, batch: &Batch, mode: Mode) -> Vec<bool> {
    let pass = net.forward(gates, &batch.inputs, mode).unwrap();
    pass.hidden
        .iter()
        .flat_map(|h| {
            h.pre_relu
                .as_slice()
                .iter()
                .map(|v| *v > 0.0)
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub max_param_rel: f64,
    pub max_unit_rel: f64,
    pub params_checked: usize,
    pub units_checked: usize,
    pub skipped: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Clone, Copy)]
enum Slot {
    Weight(usize, usize),
    Bias(usize, usize),
    Gamma(usize, usize),
    Beta(usize, usize),
}

fn param_mut(net: &mut Network, s: Slot) -> &mut f64 {
    match s {
        Slot::Weight(l, i) => &mut net.layers_mut()[l].weights.as_mut_slice()[i],
        Slot::Bias(l, i) => &mut net.layers_mut()[l].bias[i],
        Slot::Gamma(l, i) => &mut net.layers_mut()[l].norm.as_mut().unwrap().gamma[i],
        Slot::Beta(l, i) => &mut net.layers_mut()[l].norm.as_mut().unwrap().beta[i],
    }
}

/// Central differences on every parameter (step `h_param`) and every gate
/// (step `h_gate`), skipping coordinates whose perturbation crosses a kink.
pub fn grad_check(
    net: &Network,
    gates: &UnitGates,
    batch: &Batch,
    mode: Mode,
    h_param: f64,
    h_gate: f64,
) -> GradCheck {
    let (grads, _) = net.loss_and_grads(gates, batch, mode).unwrap();
    let base = relu_pattern(net, gates, batch, mode);
    let mut out = GradCheck::default();

    let mut slots = Vec::new();
    for (l, layer) in net.layers().iter().enumerate() {
        for i in 0..layer.weights.as_slice().len() {
            slots.push((Slot::Weight(l, i), grads.layers[l].weights.as_slice()[i]));
        }
        for i in 0..layer.fan_out() {
            slots.push((Slot::Bias(l, i), grads.layers[l].bias[i]));
            if layer.norm.is_some() {
                slots.push((
                    Slot::Gamma(l, i),
                    grads.layers[l].gamma.as_ref().unwrap()[i],
                ));
                slots.push((Slot::Beta(l, i), grads.layers[l].beta.as_ref().unwrap()[i]));
            }
        }
    }
    for (slot, analytic) in slots {
        let mut plus = net.clone();
        *param_mut(&mut plus, slot) += h_param;
        let mut minus = net.clone();
        *param_mut(&mut minus, slot) -= h_param;
        if relu_pattern(&plus, gates, batch, mode) != base
            || relu_pattern(&minus, gates, batch, mode) != base
        {
            out.skipped += 1;
            continue;
        }
        let numeric = (reference_loss(&plus, gates, batch, mode)
            - reference_loss(&minus, gates, batch, mode))
            / (2.0 * h_param);
        out.max_param_rel = out.max_param_rel.max(rel_err(analytic, numeric));
        out.params_checked += 1;
    }

    for (l, layer_grads) in grads.units.iter().enumerate() {
        for (c, &analytic) in layer_grads.iter().enumerate() {
            let mut gp = gates.clone();
            gp.per_layer[l][c] += h_gate;
            let mut gm = gates.clone();
            gm.per_layer[l][c] -= h_gate;
            if relu_pattern(net, &gp, batch, mode) != base
                || relu_pattern(net, &gm, batch, mode) != base
            {
                out.skipped += 1;
                continue;
            }
            let numeric = (reference_loss(net, &gp, batch, mode)
                - reference_loss(net, &gm, batch, mode))
                / (2.0 * h_gate);
            out.max_unit_rel = out.max_unit_rel.max(rel_err(analytic, numeric));
            out.units_checked += 1;
        }
    }
    out
}

/// Random layer sizes `[d, h1, (h2), classes]` for gradient and LRP checks.
pub fn random_sizes<R: Rng>(rng: &mut R) -> Vec<usize> {
    let mut s = vec![rng.gen_range(2..6)];
    for _ in 0..rng.gen_range(1..3) {
        s.push(rng.gen_range(2..8));
    }
    s.push(rng.gen_range(2..5));
    s
}

// ---------------------------------------------------------------- sampler oracles

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Expected kept count as a function of the shift, evaluated without the library.
pub fn expected_kept(b: &[f64], beta: f64, eps: f64) -> f64 {
    b.iter().map(|&v| logistic((v - beta) / eps)).sum()
}

/// Root of `Σ σ((b−β)/ε) = αC` by a uniform scan for the sign change
/// followed by bisection inside the bracketing cell.
pub fn grid_root(b: &[f64], alpha: f64, eps: f64) -> f64 {
    let target = alpha * b.len() as f64;
    let lo = b.iter().cloned().fold(f64::INFINITY, f64::min) - 50.0 * eps;
    let hi = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 50.0 * eps;
    let steps = 100_000;
    let dx = (hi - lo) / steps as f64;
    let (mut a, mut z) = (lo, hi);
    for s in 0..steps {
        let x0 = lo + s as f64 * dx;
        if expected_kept(b, x0, eps) >= target && expected_kept(b, x0 + dx, eps) < target {
            a = x0;
            z = x0 + dx;
            break;
        }
    }
    for _ in 0..200 {
        let m = 0.5 * (a + z);
        if expected_kept(b, m, eps) >= target {
            a = m;
        } else {
            z = m;
        }
    }
    0.5 * (a + z)
}

/// Random `(b, α, ε)` with `C ∈ [4, 96]`.
pub fn random_triple<R: Rng>(rng: &mut R) -> (Vec<f64>, f64, f64) {
    let c = rng.gen_range(4..=96);
    let b: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..2.0)).collect();
    let alpha = rng.gen_range(0.05..0.95);
    let eps = 10f64.powf(rng.gen_range(-2.0..0.5));
    (b, alpha, eps)
}

pub struct BernoulliCase {
    pub residual: f64,
    pub within_3sigma: bool,
}

/// Solves the shift, then compares the mean kept count over `draws` masks
/// with its expectation. The empty-layer guard adds one unit exactly when
/// every draw fails, so the expectation is `Σp + Π(1−p)`; the tolerance is
/// three standard errors with per-draw `σ² = Σ p(1−p)`.
pub fn bernoulli_case<R: Rng>(rng: &mut R, draws: usize, tol: f64) -> BernoulliCase {
    let (b, alpha, eps) = random_triple(rng);
    let beta = fedsample::sampler::solve_shift(&b, alpha, eps, tol).unwrap();
    let p = fedsample::sampler::layer_probs(&b, beta, eps);
    let residual = (p.iter().sum::<f64>() - alpha * b.len() as f64).abs();
    let p_empty: f64 = p.iter().map(|q| 1.0 - q).product();
    let expect = p.iter().sum::<f64>() + p_empty;
    let sigma = p.iter().map(|q| q * (1.0 - q)).sum::<f64>().sqrt();
    let total: usize = (0..draws)
        .map(|_| {
            fedsample::sampler::sample_mask(&p, rng)
                .iter()
                .filter(|&&w| w)
                .count()
        })
        .sum();
    let mean = total as f64 / draws as f64;
    BernoulliCase {
        residual,
        within_3sigma: (mean - expect).abs() <= 3.0 * sigma / (draws as f64).sqrt(),
    }
}

/// One trial of the ε → 0 limit: distinct importances, `α = n/C`.
pub fn hard_limit_case<R: Rng>(rng: &mut R, eps: f64) -> bool {
    let c = rng.gen_range(2..=64);
    let b: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
    let n = rng.gen_range(1..c);
    let alpha = n as f64 / c as f64;
    let beta = fedsample::sampler::solve_shift(&b, alpha, eps, 1e-8).unwrap();
    let p = fedsample::sampler::layer_probs(&b, beta, eps);
    fedsample::sampler::sample_mask(&p, rng) == fedsample::sampler::harden(&b, alpha)
}

/// Relative error between `sparseness_grad` and a central difference of
/// the soft-gated loss through the re-solved shift, or `None` when the
/// perturbation crosses a rectifier kink.
pub fn arch_grad_case<R: Rng>(rng: &mut R, h: f64) -> Option<f64> {
    use fedsample::sampler;
    let d = rng.gen_range(2..5);
    let c = rng.gen_range(4..12);
    let classes = rng.gen_range(2..4);
    let two_hidden = rng.gen_bool(0.5);
    let sizes = if two_hidden {
        vec![d, c, rng.gen_range(3..7), classes]
    } else {
        vec![d, c, classes]
    };
    let net = random_net(&sizes, rng);
    let batch = random_batch(rng.gen_range(4..8), d, classes, rng);
    let mode = if rng.gen_bool(0.5) {
        Mode::Train
    } else {
        Mode::Eval
    };
    let b: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..2.0)).collect();
    let alpha = rng.gen_range(0.2..0.8);
    let eps = rng.gen_range(0.2..1.0);
    let others: Vec<Vec<f64>> = sizes[2..sizes.len() - 1]
        .iter()
        .map(|&w| vec![1.0; w])
        .collect();

    let gates_at = |a: f64| {
        let beta = sampler::solve_shift(&b, a, eps, 1e-13).unwrap();
        let mut per_layer = vec![sampler::layer_probs(&b, beta, eps)];
        per_layer.extend(others.iter().cloned());
        UnitGates { per_layer }
    };
    let g0 = gates_at(alpha);
    let (gp, gm) = (gates_at(alpha + h), gates_at(alpha - h));
    let base = relu_pattern(&net, &g0, &batch, mode);
    if relu_pattern(&net, &gp, &batch, mode) != base
        || relu_pattern(&net, &gm, &batch, mode) != base
    {
        return None;
    }
    let (grads, _) = net.loss_and_grads(&g0, &batch, mode).unwrap();
    let analytic = sampler::sparseness_grad(&grads.units[0], &g0.per_layer[0]).value;
    let numeric = (reference_loss(&net, &gp, &batch, mode)
        - reference_loss(&net, &gm, &batch, mode))
        / (2.0 * h);
    Some((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6))
}

// ---------------------------------------------------------------- relevance oracle

/// Relevance per layer per sample, built message by message, plus a flag
/// per (layer, sample) recording whether any message was dropped there.
pub struct Brute {
    pub layers: Vec<Vec<Vec<f64>>>,
    pub dropped: Vec<Vec<bool>>,
}

pub fn brute_force(net: &Network, mask: &UnitMask, batch: &Batch) -> Brute {
    let acts = reference_activations(net, &mask.to_gates(), &batch.inputs, Mode::Train);
    let k = net.num_hidden();
    let n = batch.len();
    let mut layers = vec![Vec::new(); k + 2];
    let mut dropped = vec![vec![false; n]; k + 1];
    layers[k + 1] = (0..n)
        .map(|r| {
            let mut v = vec![0.0; net.num_classes()];
            let y = batch.labels[r];
            v[y] = softmax_row(&acts[k + 1][r])[y];
            v
        })
        .collect();
    for l in (0..=k).rev() {
        let w = &net.layers()[l].weights;
        let mut lower = vec![vec![0.0; w.rows()]; n];
        for r in 0..n {
            for j in 0..w.cols() {
                let upper = layers[l + 1][r][j];
                let contrib: Vec<f64> = (0..w.rows())
                    .map(|i| (acts[l][r][i] * w.get(i, j)).max(0.0))
                    .collect();
                let denom: f64 = contrib.iter().sum();
                if upper != 0.0 && denom == 0.0 {
                    dropped[l][r] = true;
                    continue;
                }
                for i in 0..w.rows() {
                    if denom > 0.0 {
                        lower[r][i] += contrib[i] / denom * upper;
                    }
                }
            }
        }
        layers[l] = lower;
    }
    Brute { layers, dropped }
}

pub fn random_mask<R: Rng>(widths: &[usize], rng: &mut R) -> UnitMask {
    let g = random_gates(widths, rng);
    UnitMask::from_layers(
        g.per_layer
            .iter()
            .map(|l| l.iter().map(|&v| v > 0.0).collect())
            .collect(),
    )
    .unwrap()
}
