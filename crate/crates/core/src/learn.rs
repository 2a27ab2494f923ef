//! Classifier, loss, reverse-mode gradients, SGD and the training loop.
//!
//! Only the projectors `P_j`, the nonlinearity parameters and the classifier
//! are learned; the wavelet filters stay fixed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{ConfigEntries, CsvLog, DatasetBatch, Tensor, TensorContainer};
use crate::network::{NetworkConfig, NetworkGrads, NetworkState, Tape, NORM_EPS, RUNNING_MOMENTUM};
use crate::rng;
use crate::tensor_ops::{ComplexFeatureMap, RealImage};

/// Header of the per-epoch metrics CSV.
pub const TRAIN_CSV_HEADER: [&str; 6] = ["epoch", "lr", "train_loss", "train_err", "test_err", "seconds"];

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// The learning rate is divided by 10 every this many epochs; 0 disables.
    pub lr_decay_period: usize,
    /// Random crops (4-pixel zero padding) and horizontal flips.
    pub augment: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 30,
            lr_decay_period: 70,
            augment: true,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::param("weight decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_period {
            0 => self.lr,
            p => self.lr * 0.1f64.powi((epoch / p) as i32),
        }
    }

    /// Reads `lr`, `momentum`, `weight_decay`, `batch_size`, `epochs`,
    /// `lr_decay_period` and `augment` on top of the defaults.
    pub fn from_entries(entries: &mut ConfigEntries) -> Result<Self> {
        let mut c = Self::default();
        if let Some(v) = entries.take_parsed("lr")? {
            c.lr = v;
        }
        if let Some(v) = entries.take_parsed("momentum")? {
            c.momentum = v;
        }
        if let Some(v) = entries.take_parsed("weight_decay")? {
            c.weight_decay = v;
        }
        if let Some(v) = entries.take_parsed("batch_size")? {
            c.batch_size = v;
        }
        if let Some(v) = entries.take_parsed("epochs")? {
            c.epochs = v;
        }
        if let Some(v) = entries.take_parsed("lr_decay_period")? {
            c.lr_decay_period = v;
        }
        if let Some(v) = entries.take_parsed("augment")? {
            c.augment = v;
        }
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        format!(
            "lr = {}\nmomentum = {}\nweight_decay = {}\nbatch_size = {}\nepochs = {}\nlr_decay_period = {}\naugment = {}\n",
            self.lr, self.momentum, self.weight_decay, self.batch_size, self.epochs, self.lr_decay_period, self.augment
        )
    }
}

/// Parses a full run configuration: network keys plus optimizer keys.
pub fn parse_run_config(text: &str) -> Result<(NetworkConfig, SgdConfig)> {
    let mut entries = ConfigEntries::parse(text)?;
    let net = NetworkConfig::from_entries(&mut entries)?;
    let sgd = SgdConfig::from_entries(&mut entries)?;
    entries.finish()?;
    net.validate()?;
    sgd.validate()?;
    Ok((net, sgd))
}

/// One SGD step with momentum and weight decay:
/// `v ← momentum·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], config: &SgdConfig, velocity: &mut [f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "{} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = config.momentum * *v + (g + config.weight_decay * *p);
        *p -= config.lr * *v;
    }
    Ok(())
}

/// Numerically stable cross-entropy and its gradient `softmax − one_hot`.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Label { label, classes: logits.len() });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Position of `label` when classes are ranked by decreasing logit, ties
/// going to the lower class index.
pub fn label_rank(logits: &[f64], label: usize) -> usize {
    let target = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(k, &v)| v > target || (v == target && k < label))
        .count()
}

/// Top-1 and top-5 error percentages; top-5 only with at least 5 classes.
pub fn top_k_errors(logits: &[Vec<f64>], labels: &[usize]) -> (f64, Option<f64>) {
    if labels.is_empty() {
        return (0.0, None);
    }
    let ranks: Vec<usize> = logits.iter().zip(labels).map(|(l, &y)| label_rank(l, y)).collect();
    let pct = |k: usize| 100.0 * ranks.iter().filter(|&&r| r >= k).count() as f64 / labels.len() as f64;
    let classes = logits[0].len();
    (pct(1), (classes >= 5).then(|| pct(5)))
}

/// Splits complex features into real channels `(c, re)`, `(c, im)`.
fn flatten(features: &ComplexFeatureMap) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * features.data().len());
    for c in 0..features.channels() {
        out.extend(features.channel(c).iter().map(|z| z.re));
        out.extend(features.channel(c).iter().map(|z| z.im));
    }
    out
}

fn unflatten(v: &[f64], shape: (usize, usize, usize)) -> Result<ComplexFeatureMap> {
    let (c, h, w) = shape;
    let plane = h * w;
    let mut data = Vec::with_capacity(c * plane);
    for k in 0..c {
        let re = &v[2 * k * plane..(2 * k + 1) * plane];
        let im = &v[(2 * k + 1) * plane..(2 * k + 2) * plane];
        data.extend(re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)));
    }
    ComplexFeatureMap::from_vec(c, h, w, data)
}

/// Linear classifier on real-split features, preceded by a per-channel
/// batch normalization without affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub classes: usize,
    feature_shape: (usize, usize, usize),
    /// Row-major `classes × dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

struct BnTape {
    normalized: Vec<Vec<f64>>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl Classifier {
    /// Zero weights and bias, so the initial prediction is uniform.
    pub fn new(feature_shape: (usize, usize, usize), classes: usize) -> Self {
        let (c, h, w) = feature_shape;
        let dim = 2 * c * h * w;
        Classifier {
            classes,
            feature_shape,
            weight: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            running_mean: vec![0.0; 2 * c],
            running_var: vec![1.0; 2 * c],
        }
    }

    pub fn dim(&self) -> usize {
        let (c, h, w) = self.feature_shape;
        2 * c * h * w
    }

    fn plane(&self) -> usize {
        self.feature_shape.1 * self.feature_shape.2
    }

    fn check(&self, f: &ComplexFeatureMap) -> Result<()> {
        if f.shape() != self.feature_shape {
            return Err(Error::shape(format!("classifier expects {:?}, got {:?}", self.feature_shape, f.shape())));
        }
        Ok(())
    }

    fn normalize(&self, x: &mut [f64], mean: &[f64], var: &[f64]) {
        let plane = self.plane();
        for (k, chunk) in x.chunks_mut(plane).enumerate() {
            let s = var[k].max(NORM_EPS).sqrt();
            for v in chunk {
                *v = (*v - mean[k]) / s;
            }
        }
    }

    fn logits_of(&self, x: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        (0..self.classes)
            .map(|k| self.bias[k] + self.weight[k * dim..(k + 1) * dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Evaluation-mode logits using the running statistics.
    pub fn logits(&self, features: &ComplexFeatureMap) -> Result<Vec<f64>> {
        self.check(features)?;
        let mut x = flatten(features);
        self.normalize(&mut x, &self.running_mean, &self.running_var);
        Ok(self.logits_of(&x))
    }

    fn forward_train(&self, features: &[ComplexFeatureMap]) -> Result<(Vec<Vec<f64>>, BnTape)> {
        for f in features {
            self.check(f)?;
        }
        let mut xs: Vec<Vec<f64>> = features.iter().map(flatten).collect();
        let plane = self.plane();
        let channels = 2 * self.feature_shape.0;
        let n = (xs.len() * plane) as f64;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for k in 0..channels {
            let slice = |x: &Vec<f64>| x[k * plane..(k + 1) * plane].to_vec();
            let m = xs.iter().flat_map(slice).sum::<f64>() / n;
            var[k] = xs.iter().flat_map(slice).map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[k] = m;
        }
        for x in &mut xs {
            self.normalize(x, &mean, &var);
        }
        let logits = xs.iter().map(|x| self.logits_of(x)).collect();
        Ok((logits, BnTape { normalized: xs, mean, var }))
    }

    /// Returns `(∂weight, ∂bias, ∂features)`.
    #[allow(clippy::type_complexity)]
    fn backward(&self, tape: &BnTape, dlogits: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, Vec<ComplexFeatureMap>)> {
        let dim = self.dim();
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.classes];
        for (x, dl) in tape.normalized.iter().zip(dlogits) {
            for k in 0..self.classes {
                db[k] += dl[k];
                for (d, v) in dw[k * dim..(k + 1) * dim].iter_mut().zip(x) {
                    *d += dl[k] * v;
                }
            }
        }
        let mut dx: Vec<Vec<f64>> = dlogits
            .iter()
            .map(|dl| {
                let mut g = vec![0.0; dim];
                for k in 0..self.classes {
                    for (gv, w) in g.iter_mut().zip(&self.weight[k * dim..(k + 1) * dim]) {
                        *gv += dl[k] * w;
                    }
                }
                g
            })
            .collect();
        let plane = self.plane();
        let n = (dx.len() * plane) as f64;
        for k in 0..tape.mean.len() {
            let range = k * plane..(k + 1) * plane;
            let gbar = dx.iter().flat_map(|g| &g[range.clone()]).sum::<f64>() / n;
            let clamped = tape.var[k] <= NORM_EPS;
            let a = if clamped {
                0.0
            } else {
                dx.iter()
                    .zip(&tape.normalized)
                    .flat_map(|(g, x)| g[range.clone()].iter().zip(&x[range.clone()]))
                    .map(|(g, x)| g * x)
                    .sum::<f64>()
                    / n
            };
            let s = tape.var[k].max(NORM_EPS).sqrt();
            for (g, x) in dx.iter_mut().zip(&tape.normalized) {
                for (gv, xv) in g[range.clone()].iter_mut().zip(&x[range.clone()]) {
                    *gv = (*gv - gbar - xv * a) / s;
                }
            }
        }
        let diverged = |_| Error::Divergence { layer: usize::MAX, reason: "non-finite classifier gradient".into() };
        let features = dx.iter().map(|g| unflatten(g, self.feature_shape).map_err(diverged)).collect::<Result<_>>()?;
        Ok((dw, db, features))
    }

    fn update_running(&mut self, tape: &BnTape) {
        for (r, b) in self.running_mean.iter_mut().zip(&tape.mean) {
            *r = *r * (1.0 - RUNNING_MOMENTUM) + b * RUNNING_MOMENTUM;
        }
        for (r, b) in self.running_var.iter_mut().zip(&tape.var) {
            *r = *r * (1.0 - RUNNING_MOMENTUM) + b * RUNNING_MOMENTUM;
        }
    }
}

/// A network and its classifier.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: NetworkState,
    pub classifier: Classifier,
}

/// Forward record of one training batch.
pub struct ModelTape {
    network: Tape,
    classifier: BnTape,
}

/// Gradients of every learnable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub network: NetworkGrads,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    /// Same order as [`Model::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for p in &self.network.projectors {
            v.extend(p.iter().flat_map(|z| [z.re, z.im]));
        }
        for (a, b) in self.network.nonlin_a.iter().zip(&self.network.nonlin_b) {
            v.extend(a);
            v.extend(b);
        }
        v.extend(&self.weight);
        v.extend(&self.bias);
        v
    }
}

impl Model {
    pub fn new(config: NetworkConfig, input_shape: (usize, usize, usize), classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::param("at least two classes are needed"));
        }
        let network = NetworkState::new(config, input_shape)?;
        let classifier = Classifier::new(network.output_shape(), classes);
        Ok(Model { network, classifier })
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, x: &ComplexFeatureMap) -> Result<Vec<f64>> {
        self.classifier.logits(&self.network.forward_eval(x)?)
    }

    pub fn forward_train(&self, xs: &[ComplexFeatureMap]) -> Result<(Vec<Vec<f64>>, ModelTape)> {
        let (features, network) = self.network.forward_train(xs)?;
        let (logits, classifier) = self.classifier.forward_train(&features)?;
        Ok((logits, ModelTape { network, classifier }))
    }

    /// Gradients given `∂L/∂logits` for every example of the taped batch.
    pub fn backward(&self, tape: &ModelTape, dlogits: &[Vec<f64>]) -> Result<Gradients> {
        let classifier_layer = self.network.layers().len() + 1;
        let diverged = || Error::Divergence { layer: classifier_layer, reason: "non-finite classifier gradient".into() };
        let (weight, bias, dfeatures) = self.classifier.backward(&tape.classifier, dlogits).map_err(|_| diverged())?;
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(diverged());
        }
        let network = self.network.backward(&tape.network, dfeatures)?;
        Ok(Gradients { network, weight, bias })
    }

    pub fn update_running(&mut self, tape: &ModelTape) {
        self.network.update_running(&tape.network);
        self.classifier.update_running(&tape.classifier);
    }

    /// All learnable parameters: projector entries as `(re, im)` pairs, then
    /// per layer the nonlinearity slopes and offsets, then the classifier.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for p in self.network.projectors() {
            v.extend(p.matrix.iter().flat_map(|z| [z.re, z.im]));
        }
        for l in self.network.layers() {
            v.extend(&l.nonlin.a);
            v.extend(&l.nonlin.b);
        }
        v.extend(&self.classifier.weight);
        v.extend(&self.classifier.bias);
        v
    }

    pub fn set_params_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::shape(format!("{} values for {} parameters", v.len(), self.param_count())));
        }
        let mut it = v.iter().copied();
        for p in self.network.projectors_mut() {
            for z in &mut p.matrix {
                *z = Complex64::new(it.next().expect("counted"), it.next().expect("counted"));
            }
        }
        for l in self.network.layers_mut() {
            for x in l.nonlin.a.iter_mut().chain(l.nonlin.b.iter_mut()) {
                *x = it.next().expect("counted");
            }
            l.nonlin.project();
        }
        for x in self.classifier.weight.iter_mut().chain(self.classifier.bias.iter_mut()) {
            *x = it.next().expect("counted");
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.network.parameter_count() + self.classifier.weight.len() + self.classifier.bias.len()
    }

    /// Mean cross-entropy over a batch, its gradients, the number of top-1
    /// errors, and the tape (for running statistics).
    pub fn loss_and_grads(&self, xs: &[ComplexFeatureMap], labels: &[usize]) -> Result<(f64, Gradients, usize, ModelTape)> {
        if xs.len() != labels.len() {
            return Err(Error::shape("images and labels differ in length"));
        }
        let (logits, tape) = self.forward_train(xs)?;
        let n = xs.len() as f64;
        let mut loss = 0.0;
        let mut errors = 0;
        let mut dlogits = Vec::with_capacity(xs.len());
        for (l, &y) in logits.iter().zip(labels) {
            let (li, g) = softmax_xent(l, y).map_err(|e| match e {
                Error::Domain(reason) => Error::Divergence { layer: self.network.layers().len() + 1, reason },
                other => other,
            })?;
            loss += li;
            errors += usize::from(label_rank(l, y) > 0);
            dlogits.push(g.into_iter().map(|v| v / n).collect::<Vec<_>>());
        }
        let grads = self.backward(&tape, &dlogits)?;
        Ok((loss / n, grads, errors, tape))
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        for t in self.network.to_tensors()? {
            c.push(t)?;
        }
        let k = self.classifier.classes;
        let dim = self.classifier.dim();
        c.push(Tensor::real("classifier.weight", vec![k, dim], self.classifier.weight.clone())?)?;
        c.push(Tensor::real("classifier.bias", vec![k], self.classifier.bias.clone())?)?;
        let ch = self.classifier.running_mean.len();
        c.push(Tensor::real("classifier.running_mean", vec![ch], self.classifier.running_mean.clone())?)?;
        c.push(Tensor::real("classifier.running_var", vec![ch], self.classifier.running_var.clone())?)?;
        Ok(c)
    }

    pub fn load_container(&mut self, c: &TensorContainer) -> Result<()> {
        self.network.load_tensors(c)?;
        let fetch = |name: &str, len: usize| -> Result<Vec<f64>> {
            let v = c.require(name)?.as_real()?;
            if v.len() != len {
                return Err(Error::shape(format!("{name} has {} values, expected {len}", v.len())));
            }
            Ok(v.to_vec())
        };
        let cl = &mut self.classifier;
        cl.weight = fetch("classifier.weight", cl.weight.len())?;
        cl.bias = fetch("classifier.bias", cl.bias.len())?;
        cl.running_mean = fetch("classifier.running_mean", cl.running_mean.len())?;
        cl.running_var = fetch("classifier.running_var", cl.running_var.len())?;
        Ok(())
    }

    /// Writes a checkpoint and its manifest; the manifest records the
    /// network configuration.
    pub fn save(&self, path: &Path, notes: &[String]) -> Result<PathBuf> {
        let mut lines: Vec<String> = self.network.config().to_text().lines().map(String::from).collect();
        lines.extend(notes.iter().cloned());
        self.to_container()?.save_with_manifest(path, &lines)
    }
}

/// Reverse-mode gradients of the mean cross-entropy over `(xs, labels)`.
pub fn backward(model: &Model, xs: &[ComplexFeatureMap], labels: &[usize]) -> Result<(f64, Gradients)> {
    let (loss, grads, _, _) = model.loss_and_grads(xs, labels)?;
    Ok((loss, grads))
}

/// Top-1 and top-5 error percentages of a model on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    pub top5: Option<f64>,
}

pub fn evaluate(model: &Model, data: &DatasetBatch) -> Result<Evaluation> {
    let logits: Vec<Vec<f64>> = data
        .images
        .par_iter()
        .map(|im| model.logits(&ComplexFeatureMap::from_real(im)))
        .collect::<Result<_>>()?;
    let (top1, top5) = top_k_errors(&logits, &data.labels);
    Ok(Evaluation { top1, top5 })
}

/// Metrics of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Top-1 error (%) on the training batches as seen during the epoch.
    pub train_err: f64,
    pub test: Option<Evaluation>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_test(&self) -> Option<Evaluation> {
        self.epochs.last().and_then(|e| e.test)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Side outputs of [`train`].
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints are written here as `epoch_NNN.pct`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Write a checkpoint every this many epochs (and after the last one);
    /// 0 writes only the last.
    pub checkpoint_period: usize,
    /// Metrics CSV, appended to.
    pub csv: Option<PathBuf>,
    /// Seed of the shuffling and augmentation streams.
    pub seed: u64,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

/// Random crop from the 4-pixel zero-padded image and a coin-flip mirror.
pub fn augment(image: &RealImage, rng: &mut rng::Rng) -> RealImage {
    const PAD: usize = 4;
    let top = rng.random_range(0..=2 * PAD);
    let left = rng.random_range(0..=2 * PAD);
    let cropped = image.padded_crop(PAD, top, left);
    if rng.random_bool(0.5) {
        cropped.flipped_horizontally()
    } else {
        cropped
    }
}

fn write_checkpoint(model: &Model, dir: &Path, epoch: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("epoch_{epoch:03}.pct"));
    model.save(&path, &[format!("epoch = {epoch}")])?;
    Ok(path)
}

/// Trains with seeded per-epoch shuffling. On a non-finite loss or gradient
/// the model is restored to the end of the last completed epoch (and that
/// state is checkpointed as `last_good.pct`) before the error is returned.
pub fn train(
    model: &mut Model,
    train_set: &DatasetBatch,
    test_set: Option<&DatasetBatch>,
    config: &SgdConfig,
    options: &TrainOptions,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::param("empty training set"));
    }
    if train_set.classes != model.classifier.classes {
        return Err(Error::param(format!(
            "dataset has {} classes, classifier {}",
            train_set.classes, model.classifier.classes
        )));
    }
    let mut csv = match &options.csv {
        Some(p) => Some(CsvLog::open(p, &TRAIN_CSV_HEADER)?),
        None => None,
    };
    let mut velocity = vec![0.0; model.param_count()];
    let mut report = TrainReport::default();
    let mut last_good = model.clone();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let step_config = SgdConfig { lr: config.lr_at(epoch), ..config.clone() };
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(options.seed, "shuffle", epoch as u64));
        let mut aug_rng = rng::stream(options.seed, "augment", epoch as u64);
        let (mut loss_sum, mut errors) = (0.0, 0usize);
        let outcome: Result<()> = (|| {
            for batch in order.chunks(config.batch_size) {
                let xs: Vec<ComplexFeatureMap> = batch
                    .iter()
                    .map(|&i| {
                        let im = &train_set.images[i];
                        if config.augment {
                            ComplexFeatureMap::from_real(&augment(im, &mut aug_rng))
                        } else {
                            ComplexFeatureMap::from_real(im)
                        }
                    })
                    .collect();
                let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
                let (loss, grads, errs, tape) = model.loss_and_grads(&xs, &labels)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        layer: model.network.layers().len() + 1,
                        reason: format!("loss {loss}"),
                    });
                }
                model.update_running(&tape);
                let mut params = model.params_flat();
                sgd_step(&mut params, &grads.flat(), &step_config, &mut velocity)?;
                model.set_params_flat(&params)?;
                loss_sum += loss * batch.len() as f64;
                errors += errs;
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            *model = last_good;
            if let Some(dir) = &options.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                model.save(&dir.join("last_good.pct"), &[format!("epoch = {epoch}")])?;
            }
            return Err(e);
        }
        let test = test_set.map(|t| evaluate(model, t)).transpose()?;
        let stats = EpochStats {
            epoch: epoch + 1,
            lr: step_config.lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_err: 100.0 * errors as f64 / train_set.len() as f64,
            test,
            seconds: start.elapsed().as_secs_f64(),
        };
        if options.verbose {
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.4}  train err {:6.2}%  test err {}  {:.1}s",
                stats.epoch,
                stats.lr,
                stats.train_loss,
                stats.train_err,
                test.map_or("-".to_string(), |t| format!("{:6.2}%", t.top1)),
                stats.seconds
            );
        }
        if let Some(log) = &mut csv {
            log.append(&[
                stats.epoch.to_string(),
                format!("{}", stats.lr),
                format!("{}", stats.train_loss),
                format!("{}", stats.train_err),
                test.map_or(String::new(), |t| format!("{}", t.top1)),
                format!("{:.3}", stats.seconds),
            ])?;
        }
        if let Some(dir) = &options.checkpoint_dir {
            let last = epoch + 1 == config.epochs;
            let periodic = options.checkpoint_period > 0 && (epoch + 1) % options.checkpoint_period == 0;
            if last || periodic {
                write_checkpoint(model, dir, epoch + 1)?;
            }
        }
        report.epochs.push(stats);
        last_good = model.clone();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlin::NonlinKind;
    use rand::Rng;

    #[test]
    fn softmax_examples() {
        let (loss, g) = softmax_xent(&[0.3; 7], 2).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        let (loss, g) = softmax_xent(&[1000.0, 0.0, -5.0], 0).unwrap();
        assert!((0.0..1e-12).contains(&loss));
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        assert!(matches!(softmax_xent(&[0.0, 1.0], 2), Err(Error::Label { label: 2, classes: 2 })));
        assert!(softmax_xent(&[f64::NAN, 1.0], 0).is_err());
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let logits = [0.2, -1.3, 2.2, 0.7];
        let (_, g) = softmax_xent(&logits, 1).unwrap();
        for k in 0..4 {
            let mut p = logits;
            let mut m = logits;
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let fd = (softmax_xent(&p, 1).unwrap().0 - softmax_xent(&m, 1).unwrap().0) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    fn cfg(lr: f64, momentum: f64, wd: f64) -> SgdConfig {
        SgdConfig { lr, momentum, weight_decay: wd, ..SgdConfig::default() }
    }

    #[test]
    fn sgd_examples() {
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[1.0], &cfg(0.1, 0.0, 0.0), &mut v).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);

        let mut p = [1.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.0], &cfg(1.0, 0.0, 0.1), &mut v).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);

        let mut p = [0.0];
        let mut v = [0.0];
        for _ in 0..2 {
            sgd_step(&mut p, &[1.0], &cfg(1.0, 0.9, 0.0), &mut v).unwrap();
        }
        assert!((p[0] + 2.9).abs() < 1e-15);
        assert!(sgd_step(&mut p, &[1.0, 2.0], &cfg(1.0, 0.9, 0.0), &mut v).is_err());
    }

    #[test]
    fn weight_decay_contracts_geometrically() {
        let c = cfg(0.5, 0.0, 0.1);
        let mut p = vec![3.0, -4.0];
        let mut v = vec![0.0; 2];
        for step in 1..=10 {
            sgd_step(&mut p, &[0.0, 0.0], &c, &mut v).unwrap();
            let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((norm - 5.0 * 0.95f64.powi(step)).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation_and_schedule() {
        assert!(cfg(0.0, 0.9, 0.0).validate().is_err());
        assert!(cfg(0.1, 1.0, 0.0).validate().is_err());
        let c = SgdConfig { lr_decay_period: 70, ..SgdConfig::default() };
        assert_eq!(c.lr_at(69), 0.01);
        assert!((c.lr_at(70) - 0.001).abs() < 1e-18);
        let (net, sgd) = parse_run_config("depth = 2\nwidths = 4, 8\nlr = 0.1\nepochs = 3\n").unwrap();
        assert_eq!((net.depth, sgd.lr, sgd.epochs), (2, 0.1, 3));
        assert!(parse_run_config("lr = 0.1\nepoch = 3\n").is_err());
        let round = parse_run_config(&(net.to_text() + &sgd.to_text())).unwrap();
        assert_eq!(round, (net, sgd));
    }

    #[test]
    fn ranking_and_errors() {
        assert_eq!(label_rank(&[1.0, 1.0, 0.0], 1), 1);
        assert_eq!(label_rank(&[1.0, 1.0, 0.0], 0), 0);
        let logits: Vec<Vec<f64>> = (0..6).map(|y| (0..6).map(|k| if k == y { 1.0 } else { 0.0 }).collect()).collect();
        let labels: Vec<usize> = (0..6).collect();
        assert_eq!(top_k_errors(&logits, &labels), (0.0, Some(0.0)));

        let mut r = rng::stream(1, "uniform-predictor", 0);
        let n = 20000;
        let logits: Vec<Vec<f64>> = (0..n).map(|_| (0..10).map(|_| r.random::<f64>()).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..10)).collect();
        let (t1, t5) = top_k_errors(&logits, &labels);
        assert!((t1 - 90.0).abs() < 1.5 && (t5.unwrap() - 50.0).abs() < 2.0, "{t1} {t5:?}");
        assert!(t5.unwrap() <= t1);
        assert_eq!(top_k_errors(&[vec![0.0, 1.0]], &[0]).1, None);
    }

    fn random_real(seed: u64, c: usize, n: usize) -> ComplexFeatureMap {
        let mut r = rng::stream(seed, "learn-test", 0);
        ComplexFeatureMap::from_fn(c, n, n, |_, _, _| Complex64::new(r.random_range(-1.0..1.0), 0.0))
    }

    fn toy(nonlin: NonlinKind, skip: bool) -> NetworkConfig {
        NetworkConfig {
            depth: 2,
            widths: vec![3, 2],
            angles: 2,
            nonlin,
            skip,
            subsample_period: 1,
            seed: 11,
            learned: true,
            grid: 7,
        }
    }

    /// Worst relative error between the analytic gradient and central
    /// differences of the batch loss, over every parameter.
    fn gradient_check(kind: NonlinKind, skip: bool) -> f64 {
        let mut model = Model::new(toy(kind, skip), (1, 8, 8), 3).unwrap();
        let mut r = rng::stream(3, "gradcheck-init", 0);
        let mut p = model.params_flat();
        for v in p.iter_mut() {
            *v += r.random_range(-0.3..0.3);
        }
        model.set_params_flat(&p).unwrap();
        // keep thresholds and slopes away from the clamp at zero
        for j in 0..2 {
            let mut nl = model.network.layers()[j].nonlin.clone();
            nl.b.iter_mut().for_each(|b| *b = r.random_range(0.05..0.4));
            nl.a.iter_mut().for_each(|a| *a = r.random_range(0.7..1.3));
            model.network.set_nonlin(j, nl).unwrap();
        }
        let p = model.params_flat();
        let xs: Vec<_> = (0..4).map(|i| random_real(100 + i, 1, 8)).collect();
        let labels = [0, 2, 1, 2];
        let (_, grads) = backward(&model, &xs, &labels).unwrap();
        let analytic = grads.flat();
        let h = 1e-4;
        let loss_at = |m: &mut Model, v: &[f64]| {
            m.set_params_flat(v).unwrap();
            backward(m, &xs, &labels).unwrap().0
        };
        let mut worst: f64 = 0.0;
        let mut probe = model.clone();
        for i in 0..p.len() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (loss_at(&mut probe, &plus) - loss_at(&mut probe, &minus)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / (fd.abs().max(analytic[i].abs()) + 1e-8);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [NonlinKind::Modulus, NonlinKind::SoftThreshold, NonlinKind::Tanh, NonlinKind::Sigmoid, NonlinKind::Sign] {
            for skip in [false, true] {
                let worst = gradient_check(kind, skip);
                assert!(worst < 1e-3, "{kind} skip={skip}: {worst}");
            }
        }
    }

    #[test]
    fn zero_classifier_blocks_upstream_gradients_and_scaling_is_linear() {
        let model = Model::new(toy(NonlinKind::Modulus, false), (1, 8, 8), 2).unwrap();
        let xs: Vec<_> = (0..4).map(|i| random_real(i, 1, 8)).collect();
        let (_, grads) = backward(&model, &xs, &[0, 1, 0, 1]).unwrap();
        assert!(grads.network.projectors.iter().flatten().all(|z| z.norm() == 0.0));

        let mut model = model;
        let mut p = model.params_flat();
        let mut r = rng::stream(5, "scale", 0);
        p.iter_mut().for_each(|v| *v += r.random_range(-0.2..0.2));
        model.set_params_flat(&p).unwrap();
        let (logits, tape) = model.forward_train(&xs).unwrap();
        let d: Vec<Vec<f64>> = logits.iter().zip([0, 1, 0, 1]).map(|(l, y)| softmax_xent(l, y).unwrap().1).collect();
        let d2: Vec<Vec<f64>> = d.iter().map(|v| v.iter().map(|x| 2.0 * x).collect()).collect();
        let g1 = model.backward(&tape, &d).unwrap().flat();
        let g2 = model.backward(&tape, &d2).unwrap().flat();
        assert!(g1.iter().zip(&g2).all(|(a, b)| (2.0 * a - b).abs() <= 1e-12 * (1.0 + a.abs())));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = Model::new(toy(NonlinKind::Sigmoid, true), (1, 8, 8), 3).unwrap();
        let mut p = model.params_flat();
        p.iter_mut().enumerate().for_each(|(i, v)| *v += i as f64 * 1e-3);
        model.set_params_flat(&p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pct");
        let manifest = model.save(&path, &[]).unwrap();
        assert!(std::fs::read_to_string(manifest).unwrap().contains("nonlin = sigmoid"));
        let mut other = Model::new(toy(NonlinKind::Sigmoid, true), (1, 8, 8), 3).unwrap();
        other.load_container(&TensorContainer::load(&path).unwrap()).unwrap();
        assert_eq!(other.params_flat(), model.params_flat());
    }

    /// Horizontal versus vertical stripes with random phase and frequency.
    fn stripes(n: usize, seed: u64) -> DatasetBatch {
        let mut r = rng::stream(seed, "stripes", 0);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            let freq = r.random_range(1.2..2.2);
            let data = (0..64)
                .map(|k| {
                    let (row, col) = ((k / 8) as f64, (k % 8) as f64);
                    let t = if label == 0 { row } else { col };
                    (freq * t + phase).sin() + 0.1 * r.random_range(-1.0..1.0)
                })
                .collect();
            images.push(RealImage::new(1, 8, 8, data).unwrap());
            labels.push(label);
        }
        DatasetBatch::new(images, labels, 2).unwrap()
    }

    #[test]
    fn separable_toy_reaches_zero_test_error() {
        let mut model = Model::new(NetworkConfig::plain(1, 2, 1), (1, 8, 8), 2).unwrap();
        let sgd = SgdConfig { lr: 0.05, batch_size: 16, epochs: 20, augment: false, lr_decay_period: 0, ..SgdConfig::default() };
        let report = train(&mut model, &stripes(64, 1), Some(&stripes(32, 2)), &sgd, &TrainOptions::default()).unwrap();
        assert!(report.epochs[0].train_loss <= 2f64.ln() + 0.1);
        assert_eq!(report.final_test().unwrap().top1, 0.0);
    }

    #[test]
    fn training_is_reproducible_and_logs() {
        let data = stripes(24, 3);
        let sgd = SgdConfig { lr: 0.05, batch_size: 8, epochs: 2, augment: true, ..SgdConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let run = |csv: Option<PathBuf>| {
            let mut model = Model::new(toy(NonlinKind::Modulus, true), (1, 8, 8), 2).unwrap();
            let opts = TrainOptions { csv, checkpoint_dir: Some(dir.path().join("ck")), seed: 4, ..TrainOptions::default() };
            let report = train(&mut model, &data, Some(&data), &sgd, &opts).unwrap();
            (report.losses(), model.params_flat())
        };
        let csv = dir.path().join("m.csv");
        let a = run(Some(csv.clone()));
        let b = run(None);
        assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1, b.1);
        let text = std::fs::read_to_string(csv).unwrap();
        assert!(text.starts_with("epoch,lr,train_loss,train_err,test_err,seconds\n"));
        assert_eq!(text.lines().count(), 3);
        assert!(dir.path().join("ck/epoch_002.pct").exists());
    }

    #[test]
    fn divergence_restores_the_last_good_state() {
        let data = stripes(8, 5);
        let mut model = Model::new(toy(NonlinKind::Modulus, false), (1, 8, 8), 2).unwrap();
        let before = model.params_flat();
        let sgd = SgdConfig { lr: 1e300, batch_size: 4, epochs: 3, augment: false, ..SgdConfig::default() };
        let err = train(&mut model, &data, None, &sgd, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
        assert_eq!(model.params_flat(), before);
    }
}
