//! Fully-connected network with per-unit gating.
//!
//! Hidden layers compute `Dense → BatchNorm → ReLU` and then multiply each
//! unit by its gate. A gate of `0` removes the unit from the network: it
//! contributes nothing downstream, receives no gradient, and its running
//! statistics are left alone. The output layer is a plain dense map to
//! logits.
//!
//! Gates are real-valued so that the same code path serves three purposes:
//! binary sampled masks, the soft relaxation (gate = keep probability), and
//! straight-through gradients with respect to the gate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

/// One `in → out` layer. Hidden layers carry a [`BatchNorm`]; the logit layer does not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub norm: Option<BatchNorm>,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn is_finite(&self) -> bool {
        self.weights.is_finite()
            && self.bias.iter().all(|v| v.is_finite())
            && self.norm.as_ref().is_none_or(|bn| {
                bn.gamma
                    .iter()
                    .chain(&bn.beta)
                    .chain(&bn.running_mean)
                    .chain(&bn.running_var)
                    .all(|v| v.is_finite())
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization.
    Train,
    /// Running statistics for normalization.
    Eval,
}

/// Binary keep/drop decision for every hidden unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitMask {
    per_layer: Vec<Vec<bool>>,
}

/// Real-valued gates, one per hidden unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitGates {
    pub per_layer: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::invalid("batch is empty"));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "batch has {} rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything a hidden layer computed on the way forward.
#[derive(Debug, Clone)]
pub struct HiddenCache {
    /// Dense pre-activation `z = a·W + b`.
    pub pre_norm: Matrix,
    /// `(z − μ) / √(σ² + ε)`.
    pub normalized: Matrix,
    /// `γ·x̂ + β`, the rectifier input.
    pub pre_relu: Matrix,
    /// `max(0, ·)` before gating.
    pub rectified: Matrix,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub mode: Mode,
    /// `activations[0]` is the input; `activations[l]` is hidden layer `l` after gating.
    pub activations: Vec<Matrix>,
    pub hidden: Vec<HiddenCache>,
    pub logits: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub layers: Vec<LayerGrads>,
    /// `∂loss/∂gate` for every hidden unit, evaluated at the gates used.
    pub units: Vec<Vec<f64>>,
}

/// Parameter and FLOP totals for a (sub)network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub params: u64,
    pub flops: u64,
}

impl UnitMask {
    pub fn full(widths: &[usize]) -> Self {
        Self {
            per_layer: widths.iter().map(|&w| vec![true; w]).collect(),
        }
    }

    pub fn from_layers(per_layer: Vec<Vec<bool>>) -> Result<Self> {
        for (l, layer) in per_layer.iter().enumerate() {
            if !layer.iter().any(|&b| b) {
                return Err(Error::invalid(format!(
                    "hidden layer {l} has no active unit"
                )));
            }
        }
        Ok(Self { per_layer })
    }

    /// Rebuilds a mask from a flattened index map.
    pub fn from_index_map(widths: &[usize], bits: &[bool]) -> Result<Self> {
        let total: usize = widths.iter().sum();
        if bits.len() != total {
            return Err(Error::invalid(format!(
                "index map has {} entries, supernet has {total} samplable units",
                bits.len()
            )));
        }
        let mut per_layer = Vec::with_capacity(widths.len());
        let mut offset = 0;
        for &w in widths {
            per_layer.push(bits[offset..offset + w].to_vec());
            offset += w;
        }
        Self::from_layers(per_layer)
    }

    /// Flattened index map, layer by layer.
    pub fn index_map(&self) -> Vec<bool> {
        self.per_layer.iter().flatten().copied().collect()
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.per_layer
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.per_layer[l]
    }

    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn active_count(&self, l: usize) -> usize {
        self.per_layer[l].iter().filter(|&&b| b).count()
    }

    pub fn active_indices(&self, l: usize) -> Vec<usize> {
        self.per_layer[l]
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn is_full(&self) -> bool {
        self.per_layer.iter().flatten().all(|&b| b)
    }

    pub fn widths(&self) -> Vec<usize> {
        self.per_layer.iter().map(Vec::len).collect()
    }

    pub fn to_gates(&self) -> UnitGates {
        UnitGates {
            per_layer: self
                .per_layer
                .iter()
                .map(|l| l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }
}

impl UnitGates {
    pub fn ones(widths: &[usize]) -> Self {
        Self {
            per_layer: widths.iter().map(|&w| vec![1.0; w]).collect(),
        }
    }
}

impl From<&UnitMask> for UnitGates {
    fn from(mask: &UnitMask) -> Self {
        mask.to_gates()
    }
}

impl Network {
    /// He-uniform weights, zero biases, `γ = 1`, `β = 0`.
    pub fn he_uniform<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "layer sizes {sizes:?} must have ≥ 2 entries, all ≥ 1"
            )));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect();
                DenseLayer {
                    weights: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                    norm: (l != last).then(|| BatchNorm::identity(fan_out)),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::invalid(format!(
                    "layer {l} outputs {} but layer {} expects {}",
                    pair[0].fan_out(),
                    l + 1,
                    pair[1].fan_in()
                )));
            }
        }
        let last = layers.len() - 1;
        for (l, layer) in layers.iter().enumerate() {
            let out = layer.fan_out();
            if layer.bias.len() != out {
                return Err(Error::invalid(format!("layer {l} bias length mismatch")));
            }
            match (&layer.norm, l == last) {
                (Some(_), true) => {
                    return Err(Error::invalid("logit layer must not be normalized"))
                }
                (None, false) => {
                    return Err(Error::invalid(format!(
                        "hidden layer {l} lacks normalization"
                    )))
                }
                (Some(bn), false) => {
                    let lens = [
                        bn.gamma.len(),
                        bn.beta.len(),
                        bn.running_mean.len(),
                        bn.running_var.len(),
                    ];
                    if lens.iter().any(|&n| n != out) {
                        return Err(Error::invalid(format!(
                            "layer {l} normalization length mismatch"
                        )));
                    }
                    if bn.running_var.iter().any(|&v| v < 0.0) {
                        return Err(Error::invalid(format!(
                            "layer {l} has negative running variance"
                        )));
                    }
                }
                (None, true) => {}
            }
            if !layer.is_finite() {
                return Err(Error::numeric(format!(
                    "layer {l} has non-finite parameters"
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    /// `[d_0, d_1, …, d_K, d_out]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].fan_in())
            .chain(self.layers.iter().map(DenseLayer::fan_out))
            .collect()
    }

    /// Widths of the samplable (hidden) layers.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(DenseLayer::fan_out)
            .collect()
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn full_mask(&self) -> UnitMask {
        UnitMask::full(&self.hidden_widths())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    fn check_gates(&self, gates: &UnitGates) -> Result<()> {
        let widths = self.hidden_widths();
        if gates.per_layer.len() != widths.len()
            || gates
                .per_layer
                .iter()
                .zip(&widths)
                .any(|(g, &w)| g.len() != w)
        {
            return Err(Error::invalid(format!(
                "gate layout {:?} does not match hidden widths {widths:?}",
                gates.per_layer.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.inputs.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch has {} features, network expects {}",
                batch.inputs.cols(),
                self.input_dim()
            )));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= self.num_classes()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Pure forward pass. Running statistics are not touched; see
    /// [`Network::absorb_batch_statistics`] / [`Network::forward_train`].
    pub fn forward(&self, gates: &UnitGates, inputs: &Matrix, mode: Mode) -> Result<ForwardPass> {
        self.check_gates(gates)?;
        if inputs.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} features, network expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::invalid("empty input"));
        }
        let n = inputs.rows();
        let mut activations = vec![inputs.clone()];
        let mut hidden = Vec::with_capacity(self.num_hidden());

        for (l, layer) in self.layers[..self.num_hidden()].iter().enumerate() {
            let bn = layer.norm.as_ref().expect("hidden layers are normalized");
            let width = layer.fan_out();
            let mut z = activations[l].matmul(&layer.weights);
            for r in 0..n {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let (mean, var) = match mode {
                Mode::Train => column_moments(&z),
                Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
            let mut normalized = Matrix::zeros(n, width);
            let mut pre_relu = Matrix::zeros(n, width);
            let mut rectified = Matrix::zeros(n, width);
            let mut act = Matrix::zeros(n, width);
            let g = &gates.per_layer[l];
            for r in 0..n {
                for c in 0..width {
                    let xh = (z.get(r, c) - mean[c]) * inv_std[c];
                    let y = bn.gamma[c] * xh + bn.beta[c];
                    let rr = y.max(0.0);
                    normalized.set(r, c, xh);
                    pre_relu.set(r, c, y);
                    rectified.set(r, c, rr);
                    act.set(r, c, g[c] * rr);
                }
            }
            if !act.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite activation in hidden layer {l}"
                )));
            }
            hidden.push(HiddenCache {
                pre_norm: z,
                normalized,
                pre_relu,
                rectified,
                mean,
                var,
                inv_std,
            });
            activations.push(act);
        }

        let out = &self.layers[self.num_hidden()];
        let mut logits = activations[self.num_hidden()].matmul(&out.weights);
        for r in 0..n {
            for (v, b) in logits.row_mut(r).iter_mut().zip(&out.bias) {
                *v += b;
            }
        }
        if !logits.is_finite() {
            return Err(Error::numeric("non-finite logits"));
        }
        Ok(ForwardPass {
            mode,
            activations,
            hidden,
            logits,
        })
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates of every unit whose gate is non-zero.
    pub fn absorb_batch_statistics(&mut self, pass: &ForwardPass, gates: &UnitGates) {
        if pass.mode != Mode::Train {
            return;
        }
        let n = pass.logits.rows() as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for ((layer, cache), g) in self
            .layers
            .iter_mut()
            .zip(&pass.hidden)
            .zip(&gates.per_layer)
        {
            let bn = layer.norm.as_mut().expect("hidden layers are normalized");
            for c in 0..g.len() {
                if g[c] == 0.0 {
                    continue;
                }
                bn.running_mean[c] =
                    BN_MOMENTUM * bn.running_mean[c] + (1.0 - BN_MOMENTUM) * cache.mean[c];
                bn.running_var[c] =
                    BN_MOMENTUM * bn.running_var[c] + (1.0 - BN_MOMENTUM) * cache.var[c] * unbias;
            }
        }
    }

    /// Train-mode forward that also updates the running statistics.
    pub fn forward_train(&mut self, gates: &UnitGates, inputs: &Matrix) -> Result<ForwardPass> {
        let pass = self.forward(gates, inputs, Mode::Train)?;
        self.absorb_batch_statistics(&pass, gates);
        Ok(pass)
    }

    /// Mean softmax cross-entropy plus gradients for every parameter and every gate.
    pub fn loss_and_grads(
        &self,
        gates: &UnitGates,
        batch: &Batch,
        mode: Mode,
    ) -> Result<(Gradients, ForwardPass)> {
        self.check_batch(batch)?;
        let pass = self.forward(gates, &batch.inputs, mode)?;
        let n = batch.len();
        let (loss, mut delta) = softmax_cross_entropy(&pass.logits, &batch.labels);
        let k = self.num_hidden();

        let mut layers = vec![None; k + 1];
        let mut units = vec![Vec::new(); k];

        // logit layer
        let out = &self.layers[k];
        layers[k] = Some(LayerGrads {
            weights: pass.activations[k].t_matmul(&delta),
            bias: column_sums(&delta),
            gamma: None,
            beta: None,
        });
        let mut d_act = delta.matmul_t(&out.weights);

        for l in (0..k).rev() {
            let layer = &self.layers[l];
            let bn = layer.norm.as_ref().expect("hidden layers are normalized");
            let cache = &pass.hidden[l];
            let g = &gates.per_layer[l];
            let width = layer.fan_out();

            let mut unit_grad = vec![0.0; width];
            let mut dy = Matrix::zeros(n, width);
            for r in 0..n {
                for c in 0..width {
                    let da = d_act.get(r, c);
                    unit_grad[c] += da * cache.rectified.get(r, c);
                    if cache.pre_relu.get(r, c) > 0.0 {
                        dy.set(r, c, da * g[c]);
                    }
                }
            }
            let mut dgamma = vec![0.0; width];
            let mut dbeta = vec![0.0; width];
            let mut dxhat = Matrix::zeros(n, width);
            for r in 0..n {
                for c in 0..width {
                    let d = dy.get(r, c);
                    dgamma[c] += d * cache.normalized.get(r, c);
                    dbeta[c] += d;
                    dxhat.set(r, c, d * bn.gamma[c]);
                }
            }
            delta = Matrix::zeros(n, width);
            match mode {
                Mode::Train => {
                    let nf = n as f64;
                    for c in 0..width {
                        let mut sum = 0.0;
                        let mut sum_x = 0.0;
                        for r in 0..n {
                            sum += dxhat.get(r, c);
                            sum_x += dxhat.get(r, c) * cache.normalized.get(r, c);
                        }
                        for r in 0..n {
                            let v = cache.inv_std[c] / nf
                                * (nf * dxhat.get(r, c) - sum - cache.normalized.get(r, c) * sum_x);
                            delta.set(r, c, v);
                        }
                    }
                }
                Mode::Eval => {
                    for r in 0..n {
                        for c in 0..width {
                            delta.set(r, c, dxhat.get(r, c) * cache.inv_std[c]);
                        }
                    }
                }
            }
            layers[l] = Some(LayerGrads {
                weights: pass.activations[l].t_matmul(&delta),
                bias: column_sums(&delta),
                gamma: Some(dgamma),
                beta: Some(dbeta),
            });
            units[l] = unit_grad;
            if l > 0 {
                d_act = delta.matmul_t(&layer.weights);
            }
        }

        if !loss.is_finite() {
            return Err(Error::numeric("non-finite loss"));
        }
        let grads = Gradients {
            loss,
            layers: layers.into_iter().map(|g| g.expect("filled")).collect(),
            units,
        };
        Ok((grads, pass))
    }

    /// Mean cross-entropy and accuracy without gradients.
    pub fn evaluate(&self, gates: &UnitGates, batch: &Batch, mode: Mode) -> Result<(f64, f64)> {
        self.check_batch(batch)?;
        let pass = self.forward(gates, &batch.inputs, mode)?;
        let (loss, _) = softmax_cross_entropy(&pass.logits, &batch.labels);
        let correct = (0..batch.len())
            .filter(|&r| argmax(pass.logits.row(r)) == batch.labels[r])
            .count();
        Ok((loss, correct as f64 / batch.len() as f64))
    }

    /// Plain SGD step `θ ← θ − lr·∇θ`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, d) in layer
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(g.weights.as_slice())
            {
                *w -= lr * d;
            }
            for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * d;
            }
            if let (Some(bn), Some(dg), Some(db)) = (layer.norm.as_mut(), &g.gamma, &g.beta) {
                for (p, d) in bn.gamma.iter_mut().zip(dg) {
                    *p -= lr * d;
                }
                for (p, d) in bn.beta.iter_mut().zip(db) {
                    *p -= lr * d;
                }
            }
        }
    }

    /// Physically removes masked units, producing a smaller dense network.
    pub fn extract_subnet(&self, mask: &UnitMask) -> Result<Network> {
        self.check_gates(&mask.to_gates())?;
        let k = self.num_hidden();
        let keep: Vec<Vec<usize>> = (0..=k + 1)
            .map(|l| match l {
                0 => (0..self.input_dim()).collect(),
                l if l == k + 1 => (0..self.num_classes()).collect(),
                l => mask.active_indices(l - 1),
            })
            .collect();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let (rows, cols) = (&keep[l], &keep[l + 1]);
                let mut w = Matrix::zeros(rows.len(), cols.len());
                for (ri, &r) in rows.iter().enumerate() {
                    for (ci, &c) in cols.iter().enumerate() {
                        w.set(ri, ci, layer.weights.get(r, c));
                    }
                }
                let pick = |v: &[f64]| cols.iter().map(|&c| v[c]).collect::<Vec<_>>();
                DenseLayer {
                    weights: w,
                    bias: pick(&layer.bias),
                    norm: layer.norm.as_ref().map(|bn| BatchNorm {
                        gamma: pick(&bn.gamma),
                        beta: pick(&bn.beta),
                        running_mean: pick(&bn.running_mean),
                        running_var: pick(&bn.running_var),
                    }),
                }
            })
            .collect();
        Ok(Network { layers })
    }
}

/// Parameter/FLOP accounting for the subnet selected by `mask`.
///
/// A weight counts iff both endpoints are active. Bias and the four
/// normalization scalars count with their unit. FLOPs are
/// `2·in·out` per dense layer plus `2·out` for each normalization.
pub fn masked_counts(net: &Network, mask: &UnitMask) -> Counts {
    let k = net.num_hidden();
    let mut active = Vec::with_capacity(k + 2);
    active.push(net.input_dim() as u64);
    active.extend((0..k).map(|l| mask.active_count(l) as u64));
    active.push(net.num_classes() as u64);

    let mut params = 0;
    let mut flops = 0;
    for (l, layer) in net.layers().iter().enumerate() {
        let (i, o) = (active[l], active[l + 1]);
        params += i * o + o;
        flops += 2 * i * o;
        if layer.norm.is_some() {
            params += 4 * o;
            flops += 2 * o;
        }
    }
    Counts { params, flops }
}

/// Returns `(mean loss, ∂loss/∂logits)`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows();
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut total = 0.0;
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[labels[r]];
        let g = grad.row_mut(r);
        for (c, v) in row.iter().enumerate() {
            g[c] = (v - log_z).exp() / n as f64;
        }
        g[labels[r]] -= 1.0 / n as f64;
    }
    (total / n as f64, grad)
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

/// Per-column mean and biased variance.
fn column_moments(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    let mean: Vec<f64> = column_sums(m).into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for ((v, x), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
            *v += (x - mu) * (x - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}
