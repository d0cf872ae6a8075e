//! A small configurable CNN (`conv -> norm -> relu` blocks, global average
//! pooling, linear classifier) and its SGD trainer.

use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::norm::{merge_shard_statistics, Mode, NormCache, NormKind, NormLayer, NormMethod};
use crate::ops::{
    argmax_rows, conv2d_backward, conv2d_forward, global_avg_pool_backward, global_avg_pool_forward, linear_backward,
    linear_forward, relu_backward, relu_forward, softmax_cross_entropy, ConvCache, ConvGeometry, LinearCache,
    ReluCache,
};
use crate::rng::SeededRng;
use crate::tensor::{Matrix, Precision, Real, Shape4, Tensor4};

pub const KERNEL: usize = 3;

/// One convolution block: `conv(3x3, stride) -> norm -> relu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Output spatial extent of the conv, i.e. the normalized feature map.
    pub height: usize,
    pub width: usize,
    pub norm: NormKind,
}

/// How a layer's group count is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupChoice {
    /// Use this `G` in every layer; a layer it does not fit is an error.
    Fixed(usize),
    /// Follow [`crate::norm::select_group_count`] for this per-worker batch.
    Schedule { batch_size: usize },
}

/// Architecture of the network, with the normalizer of every layer resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetSpec {
    /// `(C, H, W)` of an input image.
    pub input: (usize, usize, usize),
    pub blocks: Vec<BlockSpec>,
    pub classes: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl ConvNetSpec {
    /// Builds a network of stages `(channels, blocks)`; every stage after the
    /// first starts with a stride-2 conv.
    pub fn new(
        input: (usize, usize, usize),
        stages: &[(usize, usize)],
        classes: usize,
        method: NormMethod,
        groups: GroupChoice,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument("classifier needs at least 2 classes".into()));
        }
        let (mut c, mut h, mut w) = input;
        let mut blocks = Vec::new();
        for (si, &(channels, count)) in stages.iter().enumerate() {
            for b in 0..count {
                let stride = if si > 0 && b == 0 { 2 } else { 1 };
                let geom = ConvGeometry::new(stride, 1);
                let out = geom.output_shape(Shape4::new(1, c, h, w), Shape4::new(channels, c, KERNEL, KERNEL))?;
                let limit_c = channels;
                let merged = channels * out.h * out.w;
                let g = match groups {
                    GroupChoice::Fixed(g) => g,
                    GroupChoice::Schedule { batch_size } => {
                        crate::norm::select_group_count(method, batch_size, limit_c, merged)
                    }
                };
                let norm = method.with_groups(g);
                norm.validate(out)?;
                blocks.push(BlockSpec {
                    in_channels: c,
                    out_channels: channels,
                    stride,
                    height: out.h,
                    width: out.w,
                    norm,
                });
                (c, h, w) = (channels, out.h, out.w);
            }
        }
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("network has no conv blocks".into()));
        }
        Ok(Self {
            input,
            blocks,
            classes,
            eps: crate::norm::DEFAULT_EPS,
            momentum: crate::norm::DEFAULT_MOMENTUM,
        })
    }

    /// The reference network: stages of 16, 32 and 64 channels with two
    /// blocks each.
    pub fn small_net(input: (usize, usize, usize), classes: usize, method: NormMethod, groups: GroupChoice) -> Result<Self> {
        Self::new(input, &[(16, 2), (32, 2), (64, 2)], classes, method, groups)
    }

    pub fn feature_width(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    /// Group count of every block, in order.
    pub fn group_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.norm.group_count()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub spec: BlockSpec,
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
    pub norm: NormLayer<T>,
}

#[derive(Debug, Clone)]
pub struct ConvNet<T> {
    pub spec: ConvNetSpec,
    pub blocks: Vec<ConvBlock<T>>,
    pub fc_weights: Matrix<T>,
    pub fc_bias: Vec<T>,
}

struct BlockCache<T> {
    conv: ConvCache<T>,
    norm: NormCache<T>,
    relu: ReluCache,
}

/// Saved activations from a train-mode forward pass.
pub struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
    pooled_from: Shape4,
    linear: LinearCache<T>,
}

impl<T> ForwardCache<T> {
    pub fn norm_caches(&self) -> impl Iterator<Item = &NormCache<T>> {
        self.blocks.iter().map(|b| &b.norm)
    }
}

/// Gradients for every trainable tensor, in [`ConvNet::visit_params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

impl<T: Real> ConvNet<T> {
    /// He (fan-in) normal initialisation for conv and classifier weights;
    /// zero biases; `gamma = 1`, `beta = 0`.
    pub fn new(spec: ConvNetSpec, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::derive(seed, 0x1417);
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for b in &spec.blocks {
            let wshape = Shape4::new(b.out_channels, b.in_channels, KERNEL, KERNEL);
            let std = (2.0 / (b.in_channels * KERNEL * KERNEL) as f64).sqrt();
            let weights = Tensor4::from_fn(wshape, |_, _, _, _| T::from_f64(std * rng.normal()));
            blocks.push(ConvBlock {
                spec: *b,
                weights,
                bias: vec![T::zero(); b.out_channels],
                norm: NormLayer::new(b.norm, b.out_channels, spec.eps, spec.momentum)?,
            });
        }
        let fan_in = spec.feature_width();
        let std = (2.0 / fan_in as f64).sqrt();
        let fc: Vec<T> = (0..spec.classes * fan_in).map(|_| T::from_f64(std * rng.normal())).collect();
        Ok(Self {
            fc_weights: Matrix::from_vec(spec.classes, fan_in, fc)?,
            fc_bias: vec![T::zero(); spec.classes],
            blocks,
            spec,
        })
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    /// Calls `f` on every trainable tensor in a fixed order: per block conv
    /// weights, conv bias, gamma, beta; then classifier weights and bias.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &[T])) {
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("block{i}.conv.weight"), b.weights.data());
            f(&format!("block{i}.conv.bias"), &b.bias);
            f(&format!("block{i}.norm.gamma"), &b.norm.params.gamma);
            f(&format!("block{i}.norm.beta"), &b.norm.params.beta);
        }
        f("fc.weight", self.fc_weights.data());
        f("fc.bias", &self.fc_bias);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for b in &mut self.blocks {
            f(b.weights.data_mut());
            f(&mut b.bias);
            f(&mut b.norm.params.gamma);
            f(&mut b.norm.params.beta);
        }
        f(self.fc_weights.data_mut());
        f(&mut self.fc_bias);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, p| n += p.len());
        n
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let s = x.shape();
        if (s.c, s.h, s.w) != self.spec.input {
            return Err(Error::ShapeMismatch(format!(
                "input {s} for network expecting {:?}",
                self.spec.input
            )));
        }
        Ok(())
    }

    /// Inference-mode logits. BN/BGN read running statistics, so each
    /// sample's logits are independent of the rest of the batch.
    pub fn predict(&self, x: &Tensor4<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            let (y, _) = conv2d_forward(&h, &b.weights, &b.bias, ConvGeometry::new(b.spec.stride, 1))?;
            let (y, _) = b.norm.forward(&y, Mode::Infer)?;
            h = relu_forward(&y).0;
        }
        let pooled = global_avg_pool_forward(&h);
        Ok(linear_forward(&pooled, &self.fc_weights, &self.fc_bias)?.0)
    }

    /// Train-mode forward: statistics come from `x` itself.
    pub fn forward_train(&self, x: &Tensor4<T>) -> Result<(Matrix<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, conv) = conv2d_forward(&h, &b.weights, &b.bias, ConvGeometry::new(b.spec.stride, 1))?;
            let (y, norm) = b.norm.forward(&y, Mode::Train)?;
            let (y, relu) = relu_forward(&y);
            caches.push(BlockCache { conv, norm, relu });
            h = y;
        }
        let pooled_from = h.shape();
        let pooled = global_avg_pool_forward(&h);
        let (logits, linear) = linear_forward(&pooled, &self.fc_weights, &self.fc_bias)?;
        Ok((
            logits,
            ForwardCache {
                blocks: caches,
                pooled_from,
                linear,
            },
        ))
    }

    /// Backpropagates `dlogits` and returns parameter gradients plus the
    /// gradient with respect to the input.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Matrix<T>) -> Result<(Gradients, Tensor4<T>)> {
        let (dpooled, dfc_w, dfc_b) = linear_backward(&cache.linear, dlogits)?;
        let mut dh = global_avg_pool_backward(cache.pooled_from, &dpooled)?;
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let dy = relu_backward(&c.relu, &dh)?;
            let ng = b.norm.backward(&dy, &c.norm)?;
            let (dx, dw, db) = conv2d_backward(&c.conv, &ng.dx)?;
            per_block.push([to_f64(dw.data()), to_f64(&db), ng.dgamma, ng.dbeta]);
            dh = dx;
        }
        let mut grads = Vec::with_capacity(4 * per_block.len() + 2);
        for g in per_block.into_iter().rev() {
            grads.extend(g);
        }
        grads.push(to_f64(dfc_w.data()));
        grads.push(to_f64(&dfc_b));
        Ok((Gradients(grads), dh))
    }

    /// Mean cross-entropy of a train-mode forward and its gradients.
    pub fn loss_and_gradients(&self, x: &Tensor4<T>, labels: &[usize]) -> Result<StepResult<T>> {
        let (logits, cache) = self.forward_train(x)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        let (grads, _) = self.backward(&cache, &dlogits)?;
        let correct = argmax_rows(&logits).iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(StepResult {
            loss,
            correct,
            grads,
            cache,
        })
    }
}

pub struct StepResult<T> {
    pub loss: f64,
    pub correct: usize,
    pub grads: Gradients,
    pub cache: ForwardCache<T>,
}

/// Top-1 accuracy in inference mode, evaluated in chunks of `batch_size`.
pub fn evaluate<T: Real>(model: &ConvNet<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("evaluation batch size must be >= 1".into()));
    }
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let x: Tensor4<T> = data.images.slice_batch(start, end)?.cast();
        let preds = argmax_rows(&model.predict(&x)?);
        correct += preds.iter().zip(&data.labels[start..end]).filter(|(p, l)| p == l).count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Learning rate per sample in the linear scaling rule (0.4 at batch 128).
pub const LR_PER_SAMPLE: f64 = 0.003125;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` applies the linear scaling rule `LR_PER_SAMPLE * batch_size`.
    pub base_lr: Option<f64>,
    pub lr_decay: f64,
    /// Epoch indices (0-based) at which the rate is divided by `lr_decay`.
    /// `None` places them at 25%, 50% and 75% of the run.
    pub milestones: Option<Vec<usize>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub worker_shards: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 20,
            base_lr: None,
            lr_decay: 10.0,
            milestones: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            worker_shards: 1,
            eval_batch_size: 100,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.base_lr.unwrap_or(LR_PER_SAMPLE * self.batch_size as f64)
    }

    pub fn milestones(&self) -> Vec<usize> {
        self.milestones.clone().unwrap_or_else(|| {
            [1, 2, 3]
                .iter()
                .map(|q| q * self.epochs / 4)
                .filter(|&e| e > 0)
                .collect()
        })
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones().iter().filter(|&&m| epoch >= m).count();
        self.lr() / self.lr_decay.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.worker_shards == 0 {
            return Err(Error::InvalidArgument("batch size and worker shards must be >= 1".into()));
        }
        if !self.batch_size.is_multiple_of(self.worker_shards) {
            return Err(Error::InvalidArgument(format!(
                "batch size {} not divisible by {} worker shards",
                self.batch_size, self.worker_shards
            )));
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.lr())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub status: RunStatus,
}

impl TrainHistory {
    /// Median test accuracy over the last five epochs (fewer if the run is
    /// shorter); `None` when no epoch completed.
    pub fn final_metric(&self) -> Option<f64> {
        let tail: Vec<f64> = self.epochs.iter().rev().take(5).map(|e| e.test_acc).collect();
        median(&tail)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// SGD with momentum and weight decay on every trainable tensor:
/// `v <- momentum * v + grad + wd * param`, `param <- param - lr * v`.
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new<T: Real>(model: &ConvNet<T>, momentum: f64, weight_decay: f64) -> Self {
        let mut velocity = Vec::new();
        model.visit_params(|_, p| velocity.push(vec![0.0; p.len()]));
        Self {
            velocity,
            momentum,
            weight_decay,
        }
    }

    pub fn step<T: Real>(&mut self, model: &mut ConvNet<T>, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.0.len() != self.velocity.len() {
            return Err(Error::ShapeMismatch("gradient list does not match the model".into()));
        }
        let mut i = 0;
        let (mom, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_params_mut(|p| {
            for ((param, v), g) in p.iter_mut().zip(velocity[i].iter_mut()).zip(&grads.0[i]) {
                let pv = param.to_f64();
                *v = mom * *v + g + wd * pv;
                *param = T::from_f64(pv - lr * *v);
            }
            i += 1;
        });
        Ok(())
    }
}

/// Trained network and its per-epoch history.
pub struct TrainOutcome<T> {
    pub model: ConvNet<T>,
    pub history: TrainHistory,
}

/// One optimisation step on a batch split into `shards` equal worker shards.
///
/// Each shard normalizes with its own statistics; parameter gradients are
/// averaged across shards; BN/BGN running statistics absorb the unweighted
/// mean of the shards' batch statistics. Returns `(mean loss, correct)`.
pub fn sharded_step<T: Real>(
    model: &mut ConvNet<T>,
    sgd: &mut Sgd,
    x: &Tensor4<T>,
    labels: &[usize],
    shards: usize,
    lr: f64,
) -> Result<(f64, usize)> {
    let n = x.shape().n;
    if shards == 0 || !n.is_multiple_of(shards) {
        return Err(Error::InvalidArgument(format!("batch {n} not divisible into {shards} shards")));
    }
    let per = n / shards;
    let mut results = Vec::with_capacity(shards);
    for s in 0..shards {
        let xs = x.slice_batch(s * per, (s + 1) * per)?;
        results.push(model.loss_and_gradients(&xs, &labels[s * per..(s + 1) * per])?);
    }
    let mut grads = results[0].grads.clone();
    for r in &results[1..] {
        grads.add_assign(&r.grads);
    }
    grads.scale(1.0 / shards as f64);
    let loss = results.iter().map(|r| r.loss).sum::<f64>() / shards as f64;
    let correct = results.iter().map(|r| r.correct).sum();
    if !loss.is_finite() {
        return Ok((loss, correct));
    }

    for (li, block) in model.blocks.iter_mut().enumerate() {
        if block.norm.running.is_none() {
            continue;
        }
        let caches: Vec<&NormCache<T>> = results.iter().map(|r| &r.cache.blocks[li].norm).collect();
        let (means, vars) = merge_shard_statistics(&caches)?;
        block.norm.absorb_statistics(&means, &vars)?;
    }
    sgd.step(model, &grads, lr)?;
    Ok((loss, correct))
}

/// Trains a freshly initialised network on `train`, evaluating on `test`
/// after every epoch. Deterministic for a given seed. A non-finite loss or
/// activation ends the run with [`RunStatus::Diverged`].
pub fn train<T: Real>(spec: &ConvNetSpec, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if train.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "training set of {} is smaller than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let mut model = ConvNet::<T>::new(spec.clone(), cfg.seed)?;
    let mut sgd = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let mut history = TrainHistory {
        epochs: Vec::new(),
        status: RunStatus::Completed,
    };
    let steps = train.len() / cfg.batch_size;
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut shuffle = SeededRng::derive(cfg.seed, 1000 + epoch as u64);
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for step in 0..steps {
            let idx = &order[step * cfg.batch_size..(step + 1) * cfg.batch_size];
            let batch = train.select(idx)?;
            let x: Tensor4<T> = batch.images.cast();
            let outcome = sharded_step(&mut model, &mut sgd, &x, &batch.labels, cfg.worker_shards, lr);
            let (loss, c) = match outcome {
                Ok(v) => v,
                Err(Error::NonFiniteActivation) => {
                    history.status = RunStatus::Diverged {
                        epoch,
                        reason: "non-finite activation".into(),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                history.status = RunStatus::Diverged {
                    epoch,
                    reason: format!("non-finite loss at step {step}"),
                };
                break 'epochs;
            }
            loss_sum += loss;
            correct += c;
        }
        let test_acc = match evaluate(&model, test, cfg.eval_batch_size) {
            Ok(a) => a,
            Err(Error::NonFiniteActivation) => {
                history.status = RunStatus::Diverged {
                    epoch,
                    reason: "non-finite activation during evaluation".into(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            train_acc: correct as f64 / (steps * cfg.batch_size) as f64,
            test_acc,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        log::debug!(
            "epoch {epoch}: loss {:.4} train {:.3} test {:.3}",
            loss_sum / steps as f64,
            correct as f64 / (steps * cfg.batch_size) as f64,
            test_acc
        );
    }
    Ok(TrainOutcome { model, history })
}
