//! Per-unit importance scores that steer the sampler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_row, Batch, Mode, Network, UnitMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMode {
    /// `|γ|` of each unit's normalization.
    Slim,
    /// Mean z⁺ relevance over a batch.
    Lrp,
    /// Mean absolute post-activation over a batch.
    FcActivation,
}

/// Non-negative score for every hidden unit, laid out like a [`UnitMask`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub per_layer: Vec<Vec<f64>>,
}

/// Relevance of every unit at every layer for every sample.
#[derive(Debug, Clone)]
pub struct RelevanceTrace {
    /// `layers[0]` is the input layer, `layers[K+1]` the output layer; each is `n × width`.
    pub layers: Vec<Vec<Vec<f64>>>,
    /// Number of (sample, unit) pairs whose relevance was dropped because
    /// no lower-layer unit made a positive contribution to them.
    pub dropped: usize,
}

pub fn compute(
    mode: ImportanceMode,
    net: &Network,
    mask: &UnitMask,
    batch: &Batch,
) -> Result<ImportanceVector> {
    match mode {
        ImportanceMode::Slim => Ok(slim_importance(net)),
        ImportanceMode::Lrp => lrp_importance(net, mask, batch),
        ImportanceMode::FcActivation => fc_activation_importance(net, mask, batch),
    }
}

pub fn slim_importance(net: &Network) -> ImportanceVector {
    let per_layer = net.layers()[..net.num_hidden()]
        .iter()
        .map(|layer| {
            let bn = layer.norm.as_ref().expect("hidden layers are normalized");
            bn.gamma.iter().map(|g| g.abs()).collect()
        })
        .collect();
    ImportanceVector { per_layer }
}

pub fn fc_activation_importance(
    net: &Network,
    mask: &UnitMask,
    batch: &Batch,
) -> Result<ImportanceVector> {
    let pass = net.forward(&mask.to_gates(), &batch.inputs, Mode::Train)?;
    let n = batch.len() as f64;
    let per_layer = pass.activations[1..]
        .iter()
        .map(|act| {
            let mut out = vec![0.0; act.cols()];
            for r in 0..act.rows() {
                for (o, a) in out.iter_mut().zip(act.row(r)) {
                    *o += a.abs();
                }
            }
            out.into_iter().map(|s| s / n).collect()
        })
        .collect();
    Ok(ImportanceVector { per_layer })
}

/// Runs z⁺ relevance propagation for each sample in `batch`.
///
/// The output layer is seeded with the softmax probability of the true class
/// at that class's unit. Each `Dense → BN → ReLU` block is treated as one
/// mapping whose contributions are `a_i · w_ij` on the rectified, gated
/// activations.
pub fn lrp_relevance(net: &Network, mask: &UnitMask, batch: &Batch) -> Result<RelevanceTrace> {
    if batch.is_empty() {
        return Err(Error::invalid("relevance needs a non-empty batch"));
    }
    let pass = net.forward(&mask.to_gates(), &batch.inputs, Mode::Train)?;
    let k = net.num_hidden();
    let n = batch.len();
    let mut layers: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k + 2];
    let mut dropped = 0;

    let mut upper: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let probs = softmax_row(pass.logits.row(r));
            let mut seed = vec![0.0; net.num_classes()];
            seed[batch.labels[r]] = probs[batch.labels[r]];
            seed
        })
        .collect();
    layers[k + 1] = upper.clone();

    for l in (0..=k).rev() {
        let w = &net.layers()[l].weights;
        let act = &pass.activations[l];
        let (fan_in, fan_out) = (w.rows(), w.cols());
        let mut lower = vec![vec![0.0; fan_in]; n];
        for r in 0..n {
            let a = act.row(r);
            let mut denom = vec![0.0; fan_out];
            for (i, &ai) in a.iter().enumerate() {
                for (j, d) in denom.iter_mut().enumerate() {
                    *d += (ai * w.get(i, j)).max(0.0);
                }
            }
            let mut scale = vec![0.0; fan_out];
            for j in 0..fan_out {
                if upper[r][j] == 0.0 {
                    continue;
                }
                if denom[j] > 0.0 {
                    scale[j] = upper[r][j] / denom[j];
                } else {
                    dropped += 1;
                }
            }
            for (i, &ai) in a.iter().enumerate() {
                lower[r][i] = (0..fan_out)
                    .map(|j| (ai * w.get(i, j)).max(0.0) * scale[j])
                    .sum();
            }
        }
        layers[l] = lower.clone();
        upper = lower;
    }
    Ok(RelevanceTrace { layers, dropped })
}

pub fn lrp_importance(net: &Network, mask: &UnitMask, batch: &Batch) -> Result<ImportanceVector> {
    let trace = lrp_relevance(net, mask, batch)?;
    if trace.dropped > 0 {
        log::debug!(
            "relevance propagation dropped {} messages with zero denominator",
            trace.dropped
        );
    }
    let n = batch.len() as f64;
    let per_layer = trace.layers[1..=net.num_hidden()]
        .iter()
        .map(|rows| {
            let mut out = vec![0.0; rows[0].len()];
            for row in rows {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.into_iter().map(|s| s / n).collect()
        })
        .collect();
    Ok(ImportanceVector { per_layer })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::matrix::Matrix;
    use crate::nn::{BatchNorm, DenseLayer};

    fn random_setup(sizes: &[usize], n: usize, seed: u64) -> (Network, Batch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::he_uniform(sizes, &mut rng).unwrap();
        let d = sizes[0];
        let x =
            Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let labels = (0..n)
            .map(|_| rng.gen_range(0..*sizes.last().unwrap()))
            .collect();
        (net, Batch::new(x, labels).unwrap())
    }

    #[test]
    fn slim_is_absolute_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::he_uniform(&[2, 3, 2], &mut rng).unwrap();
        assert_eq!(slim_importance(&net).per_layer, vec![vec![1.0; 3]]);
        net.layers_mut()[0].norm.as_mut().unwrap().gamma = vec![0.5, -0.2, 0.0];
        assert_eq!(slim_importance(&net).per_layer, vec![vec![0.5, 0.2, 0.0]]);
        net.layers_mut()[0].norm.as_mut().unwrap().gamma = vec![1.0, -0.4, 0.0];
        assert_eq!(slim_importance(&net).per_layer, vec![vec![1.0, 0.4, 0.0]]);
    }

    #[test]
    fn relevance_follows_a_single_path() {
        let layer = |w: f64, norm: bool| DenseLayer {
            weights: Matrix::from_vec(1, 1, vec![w]).unwrap(),
            bias: vec![0.0],
            norm: norm.then(|| BatchNorm::identity(1)),
        };
        let mut net = Network::from_layers(vec![layer(2.0, true), layer(1.5, false)]).unwrap();
        // keep the normalized activation positive for every sample
        let bn = net.layers_mut()[0].norm.as_mut().unwrap();
        bn.gamma = vec![0.5];
        bn.beta = vec![1.0];
        let batch =
            Batch::new(Matrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap(), vec![0, 0]).unwrap();
        let trace = lrp_relevance(&net, &net.full_mask(), &batch).unwrap();
        assert_eq!(trace.dropped, 0);
        for r in 0..2 {
            let out = trace.layers[2][r][0];
            assert!((out - 1.0).abs() < 1e-12, "single class softmax is 1");
            assert!((trace.layers[1][r][0] - out).abs() < 1e-12);
            assert!((trace.layers[0][r][0] - out).abs() < 1e-12);
        }
        let imp = lrp_importance(&net, &net.full_mask(), &batch).unwrap();
        let expected = trace.layers[1].iter().map(|r| r[0]).sum::<f64>() / 2.0;
        assert_eq!(imp.per_layer[0][0], expected);
        assert!(expected > 0.0);
    }

    #[test]
    fn dead_unit_has_zero_activation_importance() {
        let (mut net, batch) = random_setup(&[3, 4, 2], 6, 1);
        let bn = net.layers_mut()[0].norm.as_mut().unwrap();
        bn.gamma[2] = 0.0;
        bn.beta[2] = -1.0;
        let imp = fc_activation_importance(&net, &net.full_mask(), &batch).unwrap();
        assert_eq!(imp.per_layer[0][2], 0.0);
        assert!(imp.per_layer[0].iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn masked_units_get_no_importance() {
        let (net, batch) = random_setup(&[3, 5, 4, 2], 8, 2);
        let mask = UnitMask::from_layers(vec![
            vec![true, false, true, true, true],
            vec![true, true, false, true],
        ])
        .unwrap();
        for imp in [
            lrp_importance(&net, &mask, &batch).unwrap(),
            fc_activation_importance(&net, &mask, &batch).unwrap(),
        ] {
            assert_eq!(imp.per_layer[0][1], 0.0);
            assert_eq!(imp.per_layer[1][2], 0.0);
        }
    }

    #[test]
    fn relevance_is_invariant_to_sample_order() {
        let (net, batch) = random_setup(&[4, 6, 3], 9, 3);
        let mut rev: Vec<usize> = (0..9).collect();
        rev.reverse();
        let shuffled = Batch::new(
            batch.inputs.select_rows(&rev),
            rev.iter().map(|&i| batch.labels[i]).collect(),
        )
        .unwrap();
        let a = lrp_importance(&net, &net.full_mask(), &batch).unwrap();
        let b = lrp_importance(&net, &net.full_mask(), &shuffled).unwrap();
        for (x, y) in a.per_layer[0].iter().zip(&b.per_layer[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
