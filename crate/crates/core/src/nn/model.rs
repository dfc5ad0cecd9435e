use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{ArchSpec, Batch};
use crate::{Error, Result};

/// Added to the variance before the square root in batch norm.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics normalize, running statistics are updated.
    Train,
    /// Running statistics normalize, nothing is updated.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn identity(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

/// Parameters and batch-norm buffers of a dense classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    arch: ArchSpec,
    pub(crate) layers: Vec<Dense>,
    /// One slot per hidden layer; `Some` where the architecture asks for batch norm.
    pub(crate) norms: Vec<Option<BatchNorm>>,
    bn_momentum: f64,
}

/// Statistics of one batch at one batch-norm input.
#[derive(Debug, Clone)]
pub(crate) struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

struct BnCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

struct HiddenCache {
    input: Array2<f64>,
    /// Post-norm, pre-activation values; their sign is the ReLU mask.
    pre_activation: Array2<f64>,
    bn: Option<BnCache>,
}

struct ForwardPass {
    hidden: Vec<HiddenCache>,
    last_input: Array2<f64>,
    logits: Array2<f64>,
    stats: Vec<Option<BatchStats>>,
}

impl ModelState {
    /// Initializes weights and biases uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    /// Batch norm starts as the identity with unit running variance.
    pub fn init<R: Rng + ?Sized>(arch: ArchSpec, bn_momentum: f64, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        check_momentum(bn_momentum)?;
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(fan_in, out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Dense {
                    weight: Array2::from_shape_simple_fn((out, fan_in), || dist.sample(rng)),
                    bias: Array1::from_shape_simple_fn(out, || dist.sample(rng)),
                }
            })
            .collect();
        let norms = Self::identity_norms(&arch);
        Ok(Self {
            arch,
            layers,
            norms,
            bn_momentum,
        })
    }

    /// All weights, biases and betas zero; gammas one.
    pub fn zeros(arch: ArchSpec, bn_momentum: f64) -> Result<Self> {
        arch.validate()?;
        check_momentum(bn_momentum)?;
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Dense {
                weight: Array2::zeros((o, i)),
                bias: Array1::zeros(o),
            })
            .collect();
        let norms = Self::identity_norms(&arch);
        Ok(Self {
            arch,
            layers,
            norms,
            bn_momentum,
        })
    }

    /// Builds a model from a flat parameter vector and flat running statistics
    /// (all means, then all variances, BN layers in order).
    pub fn from_flat(arch: ArchSpec, bn_momentum: f64, params: &[f64], running: &[f64]) -> Result<Self> {
        let mut m = Self::zeros(arch, bn_momentum)?;
        m.set_params(params)?;
        m.set_running_stats(running)?;
        Ok(m)
    }

    fn identity_norms(arch: &ArchSpec) -> Vec<Option<BatchNorm>> {
        arch.hidden_dims
            .iter()
            .enumerate()
            .map(|(i, &h)| arch.has_batchnorm(i).then(|| BatchNorm::identity(h)))
            .collect()
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn bn_momentum(&self) -> f64 {
        self.bn_momentum
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// Batch-norm layers in order, skipping hidden layers without one.
    pub fn batchnorms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.norms.iter().flatten()
    }

    pub fn batchnorms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.norms.iter_mut().flatten()
    }

    pub fn num_batchnorms(&self) -> usize {
        self.norms.iter().flatten().count()
    }

    pub fn num_params(&self) -> usize {
        self.arch.num_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
            if let Some(Some(bn)) = self.norms.get(i) {
                out.extend(bn.gamma.iter());
                out.extend(bn.beta.iter());
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::dim("flat parameters", self.num_params(), params.len()));
        }
        let mut it = params.iter().copied();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
            if let Some(Some(bn)) = self.norms.get_mut(i) {
                bn.gamma.iter_mut().for_each(|g| *g = it.next().unwrap());
                bn.beta.iter_mut().for_each(|b| *b = it.next().unwrap());
            }
        }
        Ok(())
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    pub fn num_running_stats(&self) -> usize {
        self.batchnorms().map(|bn| 2 * bn.running_mean.len()).sum()
    }

    /// Running means of every BN layer, then running variances.
    pub fn running_stats(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_running_stats());
        for bn in self.batchnorms() {
            out.extend(bn.running_mean.iter());
        }
        for bn in self.batchnorms() {
            out.extend(bn.running_var.iter());
        }
        out
    }

    pub fn set_running_stats(&mut self, stats: &[f64]) -> Result<()> {
        if stats.len() != self.num_running_stats() {
            return Err(Error::dim("running statistics", self.num_running_stats(), stats.len()));
        }
        if let Some(v) = stats[stats.len() / 2..].iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("running variance {v} is negative")));
        }
        let mut it = stats.iter().copied();
        for bn in self.batchnorms_mut() {
            bn.running_mean.iter_mut().for_each(|m| *m = it.next().unwrap());
        }
        for bn in self.batchnorms_mut() {
            bn.running_var.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::dim("model input", self.arch.input_dim, x.ncols()));
        }
        Ok(())
    }

    fn run(&self, x: ArrayView2<'_, f64>, mode: Mode, keep_cache: bool) -> Result<ForwardPass> {
        self.check_input(&x)?;
        let mut act = x.to_owned();
        let mut hidden = Vec::with_capacity(self.arch.hidden_dims.len());
        let mut stats = Vec::with_capacity(self.arch.hidden_dims.len());
        let n = x.nrows() as f64;

        for (i, layer) in self.layers[..self.layers.len() - 1].iter().enumerate() {
            let mut z = act.dot(&layer.weight.t());
            z += &layer.bias;
            ensure_finite(&z, || format!("dense layer {i}"))?;

            let mut bn_cache = None;
            let mut batch_stats = None;
            if let Some(bn) = &self.norms[i] {
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mean = z.sum_axis(Axis(0)) / n;
                        let centered = &z - &mean;
                        let var = (&centered * &centered).sum_axis(Axis(0)) / n;
                        batch_stats = Some(BatchStats {
                            mean: mean.clone(),
                            var: var.clone(),
                        });
                        (mean, var)
                    }
                    Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let normalized = (&z - &mean) * &inv_std;
                z = &normalized * &bn.gamma + &bn.beta;
                ensure_finite(&z, || format!("batch norm after hidden layer {i}"))?;
                if keep_cache {
                    bn_cache = Some(BnCache { normalized, inv_std });
                }
            }
            stats.push(batch_stats);

            let next = z.mapv(|v| v.max(0.0));
            if keep_cache {
                hidden.push(HiddenCache {
                    input: std::mem::replace(&mut act, next),
                    pre_activation: z,
                    bn: bn_cache,
                });
            } else {
                act = next;
            }
        }

        let out = self.layers.last().expect("at least one layer");
        let mut logits = act.dot(&out.weight.t());
        logits += &out.bias;
        ensure_finite(&logits, || "output layer".to_string())?;
        Ok(ForwardPass {
            hidden,
            last_input: act,
            logits,
            stats,
        })
    }

    /// Forward pass. In train mode batch statistics normalize and the
    /// returned model carries running statistics updated with momentum; in
    /// eval mode the returned model is an unchanged copy.
    pub fn forward(&self, batch: &Batch, mode: Mode) -> Result<(Array2<f64>, ModelState)> {
        let pass = self.run(batch.view(), mode, false)?;
        let mut updated = self.clone();
        if mode == Mode::Train {
            updated.update_running(&pass.stats);
        }
        Ok((pass.logits, updated))
    }

    /// Eval-mode forward through hidden layers `0..hidden_layer`, then the
    /// dense map of `hidden_layer` itself: the input its batch norm sees.
    pub(crate) fn pre_norm_activations(&self, x: ArrayView2<'_, f64>, hidden_layer: usize) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut act = x.to_owned();
        for i in 0..=hidden_layer {
            let layer = &self.layers[i];
            let mut z = act.dot(&layer.weight.t());
            z += &layer.bias;
            ensure_finite(&z, || format!("dense layer {i}"))?;
            if i == hidden_layer {
                return Ok(z);
            }
            if let Some(bn) = &self.norms[i] {
                let inv_std = bn.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                z = (&z - &bn.running_mean) * &inv_std * &bn.gamma + &bn.beta;
            }
            act = z.mapv(|v| v.max(0.0));
        }
        unreachable!("loop returns at hidden_layer")
    }

    /// Eval-mode logits without copying the model.
    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.run(x, Mode::Eval, false)?.logits)
    }

    /// Eval-mode logits for a single feature vector.
    pub fn logits_one(&self, x: &[f64]) -> Result<Array1<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Structure(e.to_string()))?;
        Ok(self.logits(view)?.row(0).to_owned())
    }

    pub(crate) fn update_running(&mut self, stats: &[Option<BatchStats>]) {
        let m = self.bn_momentum;
        for (slot, s) in self.norms.iter_mut().zip(stats) {
            if let (Some(bn), Some(s)) = (slot, s) {
                Zip::from(&mut bn.running_mean)
                    .and(&s.mean)
                    .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
                Zip::from(&mut bn.running_var)
                    .and(&s.var)
                    .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
            }
        }
    }

    /// Train-mode mean cross-entropy and its gradient, plus the batch
    /// statistics seen at each batch-norm layer.
    pub(crate) fn loss_grad_stats(&self, batch: &Batch) -> Result<(f64, Vec<f64>, Vec<Option<BatchStats>>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let pass = self.run(batch.view(), Mode::Train, true)?;
        let n = batch.len() as f64;
        let probs = softmax_rows(&pass.logits);
        let loss = cross_entropy(&pass.logits, &batch.labels)?;

        let mut delta = probs;
        for (mut row, &y) in delta.rows_mut().into_iter().zip(&batch.labels) {
            row[y] -= 1.0;
        }
        delta /= n;

        // Gradients per dense layer, output layer first.
        let num_layers = self.layers.len();
        let mut dense_grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(num_layers);
        let mut bn_grads: Vec<Option<(Array1<f64>, Array1<f64>)>> = vec![None; num_layers - 1];

        let out = &self.layers[num_layers - 1];
        dense_grads.push((delta.t().dot(&pass.last_input), delta.sum_axis(Axis(0))));
        let mut upstream = delta.dot(&out.weight);

        for (i, cache) in pass.hidden.iter().enumerate().rev() {
            let mut grad_z = upstream;
            Zip::from(&mut grad_z).and(&cache.pre_activation).for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0
                }
            });
            if let (Some(bn), Some(bc)) = (&self.norms[i], &cache.bn) {
                let grad_gamma = (&grad_z * &bc.normalized).sum_axis(Axis(0));
                let grad_beta = grad_z.sum_axis(Axis(0));
                let grad_norm = &grad_z * &bn.gamma;
                let sum_gn = grad_norm.sum_axis(Axis(0));
                let sum_gn_xn = (&grad_norm * &bc.normalized).sum_axis(Axis(0));
                let scaled = &grad_norm * n - &sum_gn - &(&bc.normalized * &sum_gn_xn);
                grad_z = scaled * &(&bc.inv_std / n);
                bn_grads[i] = Some((grad_gamma, grad_beta));
            }
            dense_grads.push((grad_z.t().dot(&cache.input), grad_z.sum_axis(Axis(0))));
            upstream = grad_z.dot(&self.layers[i].weight);
        }
        dense_grads.reverse();

        let mut grad: Vec<f64> = Vec::with_capacity(self.num_params());
        for (i, (gw, gb)) in dense_grads.iter().enumerate() {
            grad.extend(gw.iter());
            grad.extend(gb.iter());
            if let Some(Some((gg, gbeta))) = bn_grads.get(i) {
                grad.extend(gg.iter());
                grad.extend(gbeta.iter());
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericOverflow {
                layer: "gradient".into(),
            });
        }
        Ok((loss, grad, pass.stats))
    }

    /// Train-mode loss and gradient that also folds the batch statistics
    /// into the running statistics.
    pub fn train_loss_and_grad(&mut self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let (loss, grad, stats) = self.loss_grad_stats(batch)?;
        self.update_running(&stats);
        Ok((loss, grad))
    }

    /// Eval-mode mean loss and accuracy over a labeled set, in chunks.
    pub fn evaluate(&self, features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, f64)> {
        if features.nrows() == 0 {
            return Err(Error::Empty("evaluation set".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::dim("evaluation labels", features.nrows(), labels.len()));
        }
        const CHUNK: usize = 1024;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for start in (0..labels.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(labels.len());
            let logits = self.logits(features.slice(ndarray::s![start..end, ..]))?;
            let ys = &labels[start..end];
            loss_sum += cross_entropy(&logits, ys)? * (end - start) as f64;
            correct += logits
                .rows()
                .into_iter()
                .zip(ys)
                .filter(|(row, &y)| argmax(row.as_slice().expect("contiguous row")) == y)
                .count();
        }
        let n = labels.len() as f64;
        Ok((loss_sum / n, correct as f64 / n))
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::InvalidArgument(format!("bn_momentum {m} outside (0, 1]")));
    }
    Ok(())
}

fn ensure_finite(a: &Array2<f64>, layer: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow { layer: layer() })
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean cross-entropy of raw logits against integer labels.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::dim("cross-entropy labels", logits.nrows(), labels.len()));
    }
    let k = logits.ncols();
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        if y >= k {
            return Err(Error::IndexOutOfRange { index: y, len: k });
        }
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean train-mode cross-entropy and its gradient. Running statistics are
/// left alone; see [`ModelState::train_loss_and_grad`] for the updating form.
pub fn loss_and_grad(model: &ModelState, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let (loss, grad, _) = model.loss_grad_stats(batch)?;
    Ok((loss, grad))
}

/// `a + beta * (b - a)` over parameters and batch-norm running statistics.
/// `beta == 0` returns `a` and `beta == 1` returns `b`, bit for bit.
pub fn interpolate_params(a: &ModelState, b: &ModelState, beta: f64) -> Result<ModelState> {
    if a.arch != b.arch {
        return Err(Error::Structure(
            "cannot interpolate models with different architectures".into(),
        ));
    }
    if beta == 0.0 {
        return Ok(a.clone());
    }
    if beta == 1.0 {
        return Ok(b.clone());
    }
    let lerp = |x: &mut f64, &y: &f64| *x += beta * (y - *x);
    let mut out = a.clone();
    for (la, lb) in out.layers.iter_mut().zip(&b.layers) {
        Zip::from(&mut la.weight).and(&lb.weight).for_each(lerp);
        Zip::from(&mut la.bias).and(&lb.bias).for_each(lerp);
    }
    for (na, nb) in out.batchnorms_mut().zip(b.batchnorms()) {
        Zip::from(&mut na.gamma).and(&nb.gamma).for_each(lerp);
        Zip::from(&mut na.beta).and(&nb.beta).for_each(lerp);
        Zip::from(&mut na.running_mean).and(&nb.running_mean).for_each(lerp);
        Zip::from(&mut na.running_var).and(&nb.running_var).for_each(lerp);
        // Extrapolating betas can push a variance below zero.
        na.running_var.mapv_inplace(|v| v.max(0.0));
    }
    Ok(out)
}
