//! Plain and learned scattering networks.
//!
//! A learned network with `J` wavelet layers computes, for `j = 0..J`,
//!
//! ```text
//! x ← divisive_normalize(P_j · standardize(x))   (skipped at j = 0, P_0 = Id)
//! w ← W_j x
//! x ← ρ(w), or [ρ(w), w] with skip connections
//! ```
//!
//! followed by a final `standardize → P_J → divisive_normalize`. Plain
//! scattering is the same cascade with `ρ = |·|` and no projection stages.
//!
//! Maps smaller than the filter grid are handled by wrapping the filters
//! around the map (see [`BankPlan::periodized`]).

use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filterbank::{build_bank, BlockLayer, DEFAULT_GRID};
use crate::io::{ConfigEntries, Tensor, TensorContainer};
use crate::linalg;
use crate::nonlin::{NonlinKind, NonlinSpec};
use crate::rng;
use crate::tensor_ops::{BankPlan, ComplexFeatureMap};

/// Floor applied to variances and column norms before dividing.
pub const NORM_EPS: f64 = 1e-5;

/// Weight of the newest batch in the running statistics.
pub const RUNNING_MOMENTUM: f64 = 0.1;

/// Architecture and seed of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Number `J` of wavelet layers.
    pub depth: usize,
    /// Projector output widths `c_1..c_J`; the last one is the feature width.
    pub widths: Vec<usize>,
    /// Number `L` of band-pass angles per bank.
    pub angles: usize,
    pub nonlin: NonlinKind,
    pub skip: bool,
    /// Subsample by 2 after layer `j` when `(j + 1) % subsample_period == 0`.
    pub subsample_period: usize,
    pub seed: u64,
    /// `false` gives plain scattering: modulus only, no projectors.
    pub learned: bool,
    /// Filter grid size.
    pub grid: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    /// Reduced learned network for 32×32 inputs: six layers, widths 32 to 256.
    pub fn desk() -> Self {
        NetworkConfig {
            depth: 6,
            widths: vec![32, 64, 128, 256, 256, 256],
            angles: 4,
            nonlin: NonlinKind::Modulus,
            skip: false,
            subsample_period: 2,
            seed: 0,
            learned: true,
            grid: DEFAULT_GRID,
        }
    }

    /// Full-size CIFAR network: eight layers, widths 64 to 512.
    pub fn full_cifar() -> Self {
        NetworkConfig {
            depth: 8,
            widths: vec![64, 128, 256, 512, 512, 512, 512, 512],
            ..Self::desk()
        }
    }

    /// Plain scattering with `depth` layers.
    pub fn plain(depth: usize, angles: usize, subsample_period: usize) -> Self {
        NetworkConfig {
            depth,
            widths: Vec::new(),
            angles,
            nonlin: NonlinKind::Modulus,
            skip: false,
            subsample_period,
            seed: 0,
            learned: false,
            grid: DEFAULT_GRID,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::param("depth must be at least 1"));
        }
        if self.angles == 0 {
            return Err(Error::param("L must be at least 1"));
        }
        if self.subsample_period == 0 {
            return Err(Error::param("subsample_period must be at least 1"));
        }
        if self.grid == 0 || self.grid.is_multiple_of(2) {
            return Err(Error::Grid(format!("filter grid {} must be odd", self.grid)));
        }
        if self.learned {
            if self.widths.len() != self.depth {
                return Err(Error::param(format!(
                    "{} widths for depth {}",
                    self.widths.len(),
                    self.depth
                )));
            }
            if let Some(j) = self.widths.iter().position(|&c| c == 0) {
                return Err(Error::Config { layer: j + 1, reason: "zero projector width".into() });
            }
        } else if self.nonlin != NonlinKind::Modulus || self.skip {
            return Err(Error::param("plain scattering uses the modulus without skip connections"));
        }
        Ok(())
    }

    pub fn subsamples_after(&self, layer: usize) -> bool {
        (layer + 1).is_multiple_of(self.subsample_period)
    }

    /// Within each block of `subsample_period` layers the last one uses the
    /// intermediate-scale filters, the others the first-layer filters.
    pub fn bank_variant(&self, layer: usize) -> BlockLayer {
        if self.subsample_period >= 2 && layer % self.subsample_period == self.subsample_period - 1 {
            BlockLayer::Second
        } else {
            BlockLayer::First
        }
    }

    /// Reads the network keys (`depth`, `widths`, `L`, `nonlin`, `skip`,
    /// `subsample_period`, `seed`, `learned`, `grid`) on top of the desk
    /// defaults. Other keys are left in `entries`; the result is not yet
    /// validated.
    pub fn from_entries(entries: &mut ConfigEntries) -> Result<Self> {
        let mut c = Self::desk();
        if let Some(learned) = entries.take_parsed("learned")? {
            c.learned = learned;
            if !learned {
                c.widths.clear();
            }
        }
        if let Some(v) = entries.take_parsed("depth")? {
            c.depth = v;
        }
        if let Some(v) = entries.take_list("widths")? {
            c.widths = v;
        }
        if let Some(v) = entries.take_parsed("L")? {
            c.angles = v;
        }
        if let Some(v) = entries.take_parsed("nonlin")? {
            c.nonlin = v;
        }
        if let Some(v) = entries.take_parsed("skip")? {
            c.skip = v;
        }
        if let Some(v) = entries.take_parsed("subsample_period")? {
            c.subsample_period = v;
        }
        if let Some(v) = entries.take_parsed("seed")? {
            c.seed = v;
        }
        if let Some(v) = entries.take_parsed("grid")? {
            c.grid = v;
        }
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = ConfigEntries::parse(text)?;
        let c = Self::from_entries(&mut entries)?;
        entries.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let mut s = format!("learned = {}\ndepth = {}\n", self.learned, self.depth);
        if self.learned {
            s.push_str(&format!("widths = {}\n", widths.join(",")));
        }
        s.push_str(&format!(
            "L = {}\nnonlin = {}\nskip = {}\nsubsample_period = {}\nseed = {}\ngrid = {}\n",
            self.angles, self.nonlin, self.skip, self.subsample_period, self.seed, self.grid
        ));
        s
    }
}

/// One wavelet layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    /// Channels entering the projector `P_j` (equal to `out_channels` at `j = 0`).
    pub in_channels: usize,
    /// Channels `c_j` after `P_j`, entering `W`.
    pub out_channels: usize,
    pub bank_variant: BlockLayer,
    pub do_subsample: bool,
    /// Applied to the `(L+1)·c_j` channels of `W P_j x`.
    pub nonlin: NonlinSpec,
    pub skip: bool,
    /// Spatial size entering `W`.
    pub size: (usize, usize),
}

impl LayerSpec {
    pub fn wavelet_channels(&self, angles: usize) -> usize {
        (angles + 1) * self.out_channels
    }

    pub fn output_channels(&self, angles: usize) -> usize {
        self.wavelet_channels(angles) * if self.skip { 2 } else { 1 }
    }

    pub fn output_size(&self) -> (usize, usize) {
        if self.do_subsample {
            (self.size.0 / 2, self.size.1 / 2)
        } else {
            self.size
        }
    }
}

/// A complex 1×1 convolution over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub matrix: Vec<Complex64>,
}

impl Projector {
    pub fn identity(layer: usize, n: usize) -> Self {
        let mut matrix = vec![Complex64::default(); n * n];
        for i in 0..n {
            matrix[i * n + i] = Complex64::new(1.0, 0.0);
        }
        Projector { layer, rows: n, cols: n, matrix }
    }

    /// Independent real and imaginary parts with variance `1/(2·cols)` each.
    pub fn random(layer: usize, rows: usize, cols: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "projector", layer as u64);
        let normal = Normal::new(0.0, (0.5 / cols as f64).sqrt()).expect("positive std");
        let matrix = (0..rows * cols)
            .map(|_| Complex64::new(normal.sample(&mut r), normal.sample(&mut r)))
            .collect();
        Projector { layer, rows, cols, matrix }
    }

    pub fn apply(&self, x: &ComplexFeatureMap) -> Result<ComplexFeatureMap> {
        if x.channels() != self.cols {
            return Err(Error::Config {
                layer: self.layer,
                reason: format!("projector expects {} channels, got {}", self.cols, x.channels()),
            });
        }
        let n = x.plane();
        let mut out = vec![Complex64::default(); self.rows * n];
        linalg::matmul(&self.matrix, x.data(), &mut out, self.rows, self.cols, n);
        ComplexFeatureMap::from_vec(self.rows, x.height(), x.width(), out).map_err(|_| Error::Divergence {
            layer: self.layer,
            reason: "non-finite projector output".into(),
        })
    }

    /// `Pᴴ g`.
    fn adjoint(&self, g: &ComplexFeatureMap) -> Result<ComplexFeatureMap> {
        let n = g.plane();
        let conj = linalg::conj_vec(&self.matrix);
        let mut out = vec![Complex64::default(); self.cols * n];
        linalg::matmul_tn_acc(&conj, g.data(), &mut out, self.cols, self.rows, n);
        ComplexFeatureMap::from_vec(self.cols, g.height(), g.width(), out).map_err(|_| Error::Divergence {
            layer: self.layer,
            reason: "non-finite gradient".into(),
        })
    }
}

/// Per-channel complex mean and variance `E|z − μ|²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<Complex64>,
    pub var: Vec<f64>,
}

impl ChannelStats {
    /// Zero mean, unit variance: standardization is then the identity.
    pub fn identity(channels: usize) -> Self {
        ChannelStats { mean: vec![Complex64::default(); channels], var: vec![1.0; channels] }
    }

    /// Statistics over every example and position of a batch.
    pub fn of_batch(xs: &[ComplexFeatureMap]) -> Result<Self> {
        let first = xs.first().ok_or_else(|| Error::param("empty batch"))?;
        let channels = first.channels();
        if xs.iter().any(|x| x.shape() != first.shape()) {
            return Err(Error::shape("batch items differ in shape"));
        }
        let n = (xs.len() * first.plane()) as f64;
        let mut mean = vec![Complex64::default(); channels];
        let mut var = vec![0.0; channels];
        for c in 0..channels {
            let sum: Complex64 = xs.iter().flat_map(|x| x.channel(c)).sum();
            let mu = sum / n;
            let ss: f64 = xs.iter().flat_map(|x| x.channel(c)).map(|z| (z - mu).norm_sqr()).sum();
            mean[c] = mu;
            var[c] = ss / n;
        }
        Ok(ChannelStats { mean, var })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.var.iter().map(|&v| v.max(NORM_EPS).sqrt()).collect()
    }

    /// Exponential moving average toward `batch`.
    pub fn update(&mut self, batch: &ChannelStats, momentum: f64) {
        for (m, b) in self.mean.iter_mut().zip(&batch.mean) {
            *m = *m * (1.0 - momentum) + b * momentum;
        }
        for (v, b) in self.var.iter_mut().zip(&batch.var) {
            *v = *v * (1.0 - momentum) + b * momentum;
        }
    }
}

/// `(x − μ)/σ` per channel with `σ = √max(var, ε)`.
pub fn standardize(x: &ComplexFeatureMap, stats: &ChannelStats) -> Result<ComplexFeatureMap> {
    if x.channels() != stats.channels() {
        return Err(Error::shape(format!(
            "statistics for {} channels, map has {}",
            stats.channels(),
            x.channels()
        )));
    }
    let scales = stats.scales();
    let mut out = x.clone();
    for c in 0..x.channels() {
        let (mu, s) = (stats.mean[c], scales[c]);
        for z in out.channel_mut(c) {
            *z = (*z - mu) / s;
        }
    }
    Ok(out)
}

/// Euclidean norm across channels at every position.
pub fn column_norms(x: &ComplexFeatureMap) -> Vec<f64> {
    let mut sq = vec![0.0; x.plane()];
    for c in 0..x.channels() {
        for (s, z) in sq.iter_mut().zip(x.channel(c)) {
            *s += z.norm_sqr();
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Divides every position's channel vector by `max(‖·‖, ε)`.
pub fn divisive_normalize(x: &ComplexFeatureMap) -> ComplexFeatureMap {
    let norms = column_norms(x);
    let mut out = x.clone();
    for c in 0..x.channels() {
        for (z, &r) in out.channel_mut(c).iter_mut().zip(&norms) {
            *z /= r.max(NORM_EPS);
        }
    }
    out
}

/// Reverse of [`divisive_normalize`] given its output `y` and input norms.
fn divisive_normalize_backward(y: &ComplexFeatureMap, norms: &[f64], g: &ComplexFeatureMap) -> ComplexFeatureMap {
    let mut dot = vec![0.0; y.plane()];
    for c in 0..y.channels() {
        for ((d, gz), yz) in dot.iter_mut().zip(g.channel(c)).zip(y.channel(c)) {
            *d += (gz.conj() * yz).re;
        }
    }
    let mut out = g.clone();
    for c in 0..y.channels() {
        for (((o, yz), &r), &d) in out.channel_mut(c).iter_mut().zip(y.channel(c)).zip(norms).zip(&dot) {
            if r > NORM_EPS {
                *o = (*o - yz * d) / r;
            } else {
                *o /= NORM_EPS;
            }
        }
    }
    out
}

/// Reverse of batch standardization, treating the statistics as functions
/// of the batch.
fn standardize_backward(
    y: &[ComplexFeatureMap],
    stats: &ChannelStats,
    g: &[ComplexFeatureMap],
) -> Vec<ComplexFeatureMap> {
    let n = (y.len() * y[0].plane()) as f64;
    let scales = stats.scales();
    let mut out: Vec<ComplexFeatureMap> = g.to_vec();
    for c in 0..stats.channels() {
        let gbar: Complex64 = g.iter().flat_map(|m| m.channel(c)).sum::<Complex64>() / n;
        let clamped = stats.var[c] <= NORM_EPS;
        let a = if clamped {
            0.0
        } else {
            y.iter()
                .zip(g)
                .flat_map(|(ym, gm)| ym.channel(c).iter().zip(gm.channel(c)))
                .map(|(yz, gz)| (gz.conj() * yz).re)
                .sum::<f64>()
                / n
        };
        let s = scales[c];
        for (om, ym) in out.iter_mut().zip(y) {
            for (o, yz) in om.channel_mut(c).iter_mut().zip(ym.channel(c)) {
                *o = (*o - gbar - yz * a) / s;
            }
        }
    }
    out
}

/// Filter banks for `depth` plain scattering layers on `size` inputs.
pub fn plain_plans(config: &NetworkConfig, size: (usize, usize)) -> Result<Vec<BankPlan>> {
    let mut plans = Vec::with_capacity(config.depth);
    let mut size = size;
    for j in 0..config.depth {
        let sub = config.subsamples_after(j);
        let plan = layer_plan(config, j, size, sub)?;
        size = plan.output_size();
        plans.push(plan);
    }
    Ok(plans)
}

fn layer_plan(config: &NetworkConfig, layer: usize, size: (usize, usize), subsample: bool) -> Result<BankPlan> {
    if size.0 == 0 || size.1 == 0 || (subsample && (!size.0.is_multiple_of(2) || !size.1.is_multiple_of(2))) {
        return Err(Error::Size(format!(
            "spatial size {}×{} exhausted at layer {layer}",
            size.0, size.1
        )));
    }
    let bank = build_bank(config.angles, config.bank_variant(layer), config.grid)?;
    BankPlan::periodized(bank, size.0, size.1, subsample)
}

/// Plain scattering: `x ← |W_j x|` for every plan in turn.
pub fn forward_plain(x: &ComplexFeatureMap, plans: &[BankPlan]) -> Result<ComplexFeatureMap> {
    let mut x = x.clone();
    for plan in plans {
        x = plan.apply(&x)?.map(crate::nonlin::modulus);
    }
    Ok(x)
}

/// Learned scattering in evaluation mode; see [`NetworkState::forward_eval`].
pub fn forward_learned(x: &ComplexFeatureMap, state: &NetworkState) -> Result<ComplexFeatureMap> {
    state.forward_eval(x)
}

/// Learnable and running state of a network bound to one input shape.
#[derive(Debug, Clone)]
pub struct NetworkState {
    config: NetworkConfig,
    input_shape: (usize, usize, usize),
    layers: Vec<LayerSpec>,
    plans: Vec<BankPlan>,
    /// `P_1..P_J`; empty for plain scattering.
    projectors: Vec<Projector>,
    /// Running statistics of the standardization before `P_1..P_J`.
    running: Vec<ChannelStats>,
}

/// Intermediate values of one projection stage needed by the backward pass.
#[derive(Debug, Clone)]
struct StageTape {
    standardized: Vec<ComplexFeatureMap>,
    stats: ChannelStats,
    normalized: Vec<ComplexFeatureMap>,
    norms: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct LayerTape {
    stage: Option<StageTape>,
    wavelet: Vec<ComplexFeatureMap>,
}

/// Forward-pass record of one training batch.
#[derive(Debug, Clone)]
pub struct Tape {
    layers: Vec<LayerTape>,
    last: Option<StageTape>,
}

impl Tape {
    /// Batch statistics of every standardization, in layer order.
    pub fn batch_stats(&self) -> Vec<&ChannelStats> {
        self.layers
            .iter()
            .filter_map(|l| l.stage.as_ref())
            .chain(self.last.as_ref())
            .map(|s| &s.stats)
            .collect()
    }

    /// Shapes of the wavelet outputs `W P_j x_j`, one per layer.
    pub fn wavelet_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.layers.iter().map(|l| l.wavelet[0].shape()).collect()
    }
}

/// Gradients of the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    /// One per projector `P_1..P_J`, row-major.
    pub projectors: Vec<Vec<Complex64>>,
    /// Per layer, per channel.
    pub nonlin_a: Vec<Vec<f64>>,
    pub nonlin_b: Vec<Vec<f64>>,
}

impl NetworkGrads {
    fn zeros(state: &NetworkState) -> Self {
        NetworkGrads {
            projectors: state.projectors.iter().map(|p| vec![Complex64::default(); p.matrix.len()]).collect(),
            nonlin_a: state.layers.iter().map(|l| vec![0.0; l.nonlin.a.len()]).collect(),
            nonlin_b: state.layers.iter().map(|l| vec![0.0; l.nonlin.b.len()]).collect(),
        }
    }
}

enum Stats<'a> {
    Batch,
    Running(&'a ChannelStats),
}

impl NetworkState {
    /// Builds the network for `(channels, height, width)` inputs, drawing
    /// projectors from the config seed.
    pub fn new(config: NetworkConfig, input_shape: (usize, usize, usize)) -> Result<Self> {
        config.validate()?;
        let (c0, h, w) = input_shape;
        if c0 == 0 {
            return Err(Error::param("inputs need at least one channel"));
        }
        let mut layers = Vec::with_capacity(config.depth);
        let mut plans = Vec::with_capacity(config.depth);
        let mut projectors = Vec::new();
        let mut running = Vec::new();
        let mut channels = c0;
        let mut size = (h, w);
        for j in 0..config.depth {
            let out_channels = if config.learned && j > 0 { config.widths[j - 1] } else { channels };
            if config.learned && j > 0 {
                projectors.push(Projector::random(j, out_channels, channels, config.seed));
                running.push(ChannelStats::identity(channels));
            }
            let do_subsample = config.subsamples_after(j);
            let plan = layer_plan(&config, j, size, do_subsample)?;
            let wavelet_channels = (config.angles + 1) * out_channels;
            let spec = LayerSpec {
                in_channels: channels,
                out_channels,
                bank_variant: config.bank_variant(j),
                do_subsample,
                nonlin: NonlinSpec::new(config.nonlin, wavelet_channels),
                skip: config.skip,
                size,
            };
            channels = spec.output_channels(config.angles);
            size = plan.output_size();
            layers.push(spec);
            plans.push(plan);
        }
        if config.learned {
            let last = config.depth;
            projectors.push(Projector::random(last, config.widths[last - 1], channels, config.seed));
            running.push(ChannelStats::identity(channels));
        }
        Ok(NetworkState { config, input_shape, layers, plans, projectors, running })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn plans(&self) -> &[BankPlan] {
        &self.plans
    }

    pub fn projectors(&self) -> &[Projector] {
        &self.projectors
    }

    pub fn running_stats(&self) -> &[ChannelStats] {
        &self.running
    }

    pub(crate) fn projectors_mut(&mut self) -> &mut [Projector] {
        &mut self.projectors
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    /// Replaces a projector; its shape must match the current one.
    pub fn set_projector(&mut self, projector: Projector) -> Result<()> {
        let j = projector.layer;
        let slot = j
            .checked_sub(1)
            .and_then(|i| self.projectors.get_mut(i))
            .ok_or_else(|| Error::Config { layer: j, reason: "no learned projector at this layer".into() })?;
        if (slot.rows, slot.cols) != (projector.rows, projector.cols) || projector.matrix.len() != slot.matrix.len() {
            return Err(Error::Config {
                layer: j,
                reason: format!(
                    "projector is {}×{}, expected {}×{}",
                    projector.rows, projector.cols, slot.rows, slot.cols
                ),
            });
        }
        *slot = projector;
        Ok(())
    }

    /// Replaces the nonlinearity of layer `j`.
    pub fn set_nonlin(&mut self, layer: usize, nonlin: NonlinSpec) -> Result<()> {
        let angles = self.config.angles;
        let spec = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::Config { layer, reason: "no such layer".into() })?;
        nonlin
            .validate(spec.wavelet_channels(angles))
            .map_err(|e| Error::Config { layer, reason: e.to_string() })?;
        spec.nonlin = nonlin;
        Ok(())
    }

    /// `(channels, height, width)` of the features handed to the classifier.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        let last = self.layers.last().expect("depth ≥ 1");
        let (h, w) = last.output_size();
        let c = if self.config.learned {
            self.config.widths[self.config.depth - 1]
        } else {
            last.output_channels(self.config.angles)
        };
        (c, h, w)
    }

    /// Number of real learnable parameters.
    pub fn parameter_count(&self) -> usize {
        self.projectors.iter().map(|p| 2 * p.matrix.len()).sum::<usize>()
            + self.layers.iter().map(|l| l.nonlin.a.len() + l.nonlin.b.len()).sum::<usize>()
    }

    fn check_input(&self, x: &ComplexFeatureMap) -> Result<()> {
        if x.shape() != self.input_shape {
            return Err(Error::shape(format!("network expects {:?}, got {:?}", self.input_shape, x.shape())));
        }
        Ok(())
    }

    fn stage_forward(
        &self,
        index: usize,
        xs: Vec<ComplexFeatureMap>,
        stats: Stats<'_>,
        record: bool,
    ) -> Result<(Vec<ComplexFeatureMap>, Option<StageTape>)> {
        let layer = index + 1;
        let expected = self.running[index].channels();
        if let Some(x) = xs.iter().find(|x| x.channels() != expected) {
            return Err(Error::Config {
                layer,
                reason: format!("expected {expected} channels, got {}", x.channels()),
            });
        }
        let batch_stats;
        let stats = match stats {
            Stats::Batch => {
                batch_stats = ChannelStats::of_batch(&xs)?;
                &batch_stats
            }
            Stats::Running(s) => s,
        };
        let projector = &self.projectors[index];
        let standardized: Vec<ComplexFeatureMap> =
            xs.par_iter().map(|x| standardize(x, stats)).collect::<Result<_>>()?;
        drop(xs);
        let outputs: Vec<(ComplexFeatureMap, Vec<f64>)> = standardized
            .par_iter()
            .map(|y| {
                let s = projector.apply(y)?;
                let norms = column_norms(&s);
                Ok((divisive_normalize(&s), norms))
            })
            .collect::<Result<_>>()?;
        let (normalized, norms): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
        let tape = record.then(|| StageTape {
            standardized,
            stats: stats.clone(),
            normalized: normalized.clone(),
            norms,
        });
        Ok((normalized, tape))
    }

    fn layer_forward(&self, j: usize, xs: Vec<ComplexFeatureMap>) -> Result<(Vec<ComplexFeatureMap>, Vec<ComplexFeatureMap>)> {
        let spec = &self.layers[j];
        if let Some(x) = xs.iter().find(|x| x.channels() != spec.out_channels) {
            return Err(Error::Config {
                layer: j,
                reason: format!("wavelet layer expects {} channels, got {}", spec.out_channels, x.channels()),
            });
        }
        let wavelet: Vec<ComplexFeatureMap> = xs.par_iter().map(|x| self.plans[j].apply(x)).collect::<Result<_>>()?;
        let outputs: Vec<ComplexFeatureMap> = wavelet
            .par_iter()
            .map(|w| {
                let rho = spec.nonlin.apply(w)?;
                if spec.skip {
                    ComplexFeatureMap::concat(&[&rho, w])
                } else {
                    Ok(rho)
                }
            })
            .collect::<Result<_>>()?;
        Ok((outputs, wavelet))
    }

    fn run(&self, xs: Vec<ComplexFeatureMap>, training: bool) -> Result<(Vec<ComplexFeatureMap>, Tape)> {
        for x in &xs {
            self.check_input(x)?;
        }
        let mut xs = xs;
        let mut layers = Vec::with_capacity(self.layers.len());
        for j in 0..self.layers.len() {
            let mut stage = None;
            if self.config.learned && j > 0 {
                let stats = if training { Stats::Batch } else { Stats::Running(&self.running[j - 1]) };
                let (next, tape) = self.stage_forward(j - 1, xs, stats, training)?;
                xs = next;
                stage = tape;
            }
            let (next, wavelet) = self.layer_forward(j, xs)?;
            xs = next;
            layers.push(LayerTape { stage, wavelet: if training { wavelet } else { Vec::new() } });
        }
        let mut last = None;
        if self.config.learned {
            let i = self.layers.len() - 1 + 1;
            let stats = if training { Stats::Batch } else { Stats::Running(&self.running[i - 1]) };
            let (next, tape) = self.stage_forward(i - 1, xs, stats, training)?;
            xs = next;
            last = tape;
        }
        Ok((xs, Tape { layers, last }))
    }

    /// Evaluation-mode forward pass using the running statistics.
    pub fn forward_eval(&self, x: &ComplexFeatureMap) -> Result<ComplexFeatureMap> {
        let (mut out, _) = self.run(vec![x.clone()], false)?;
        Ok(out.pop().expect("one output per input"))
    }

    /// Evaluation-mode forward pass over a batch.
    pub fn forward_eval_batch(&self, xs: &[ComplexFeatureMap]) -> Result<Vec<ComplexFeatureMap>> {
        xs.par_iter().map(|x| self.forward_eval(x)).collect()
    }

    /// Training-mode forward pass: standardizes with the batch statistics
    /// and records what [`backward`](Self::backward) needs. Running
    /// statistics are left untouched; see [`update_running`](Self::update_running).
    pub fn forward_train(&self, xs: &[ComplexFeatureMap]) -> Result<(Vec<ComplexFeatureMap>, Tape)> {
        if xs.is_empty() {
            return Err(Error::param("empty batch"));
        }
        self.run(xs.to_vec(), true)
    }

    pub fn update_running(&mut self, tape: &Tape) {
        for (running, batch) in self.running.iter_mut().zip(tape.batch_stats()) {
            running.update(batch, RUNNING_MOMENTUM);
        }
    }

    fn stage_backward(
        &self,
        index: usize,
        tape: &StageTape,
        g: Vec<ComplexFeatureMap>,
        grad_p: &mut [Complex64],
    ) -> Result<Vec<ComplexFeatureMap>> {
        let projector = &self.projectors[index];
        let g_s: Vec<ComplexFeatureMap> = g
            .par_iter()
            .zip(&tape.normalized)
            .zip(&tape.norms)
            .map(|((g, y), r)| divisive_normalize_backward(y, r, g))
            .collect();
        for (gs, y) in g_s.iter().zip(&tape.standardized) {
            let conj = linalg::conj_vec(y.data());
            linalg::matmul_nt_acc(gs.data(), &conj, grad_p, projector.rows, y.plane(), projector.cols);
        }
        let g_y: Vec<ComplexFeatureMap> = g_s.par_iter().map(|gs| projector.adjoint(gs)).collect::<Result<_>>()?;
        Ok(standardize_backward(&tape.standardized, &tape.stats, &g_y))
    }

    /// Reverse-mode gradients of a loss given `∂L/∂features` for the batch
    /// recorded in `tape`. Complex quantities follow the real-pair
    /// convention `∂L/∂Re + i ∂L/∂Im`.
    pub fn backward(&self, tape: &Tape, grad_features: Vec<ComplexFeatureMap>) -> Result<NetworkGrads> {
        let mut grads = NetworkGrads::zeros(self);
        if !self.config.learned {
            return Ok(grads);
        }
        let depth = self.layers.len();
        let last = tape.last.as_ref().ok_or_else(|| Error::param("tape was not recorded in training mode"))?;
        let mut g = self.stage_backward(depth - 1, last, grad_features, &mut grads.projectors[depth - 1])?;
        check_finite(depth, &grads.projectors[depth - 1], &g)?;
        for j in (0..depth).rev() {
            let spec = &self.layers[j];
            let layer_tape = &tape.layers[j];
            let wc = spec.wavelet_channels(self.config.angles);
            let per_example: Vec<(ComplexFeatureMap, Vec<f64>, Vec<f64>)> = g
                .par_iter()
                .zip(&layer_tape.wavelet)
                .map(|(g, w)| nonlin_backward(&spec.nonlin, w, g, wc, spec.skip))
                .collect::<Result<_>>()?;
            let mut g_w = Vec::with_capacity(per_example.len());
            for (gw, ga, gb) in per_example {
                for (acc, v) in grads.nonlin_a[j].iter_mut().zip(ga) {
                    *acc += v;
                }
                for (acc, v) in grads.nonlin_b[j].iter_mut().zip(gb) {
                    *acc += v;
                }
                g_w.push(gw);
            }
            if grads.nonlin_a[j].iter().chain(&grads.nonlin_b[j]).any(|v| !v.is_finite()) {
                return Err(Error::Divergence { layer: j, reason: "non-finite nonlinearity gradient".into() });
            }
            if j == 0 {
                break;
            }
            let g_n: Vec<ComplexFeatureMap> =
                g_w.par_iter().map(|gw| self.plans[j].adjoint(gw)).collect::<Result<_>>()?;
            let stage = layer_tape.stage.as_ref().expect("learned layers record their stage");
            g = self.stage_backward(j - 1, stage, g_n, &mut grads.projectors[j - 1])?;
            check_finite(j, &grads.projectors[j - 1], &g)?;
        }
        Ok(grads)
    }

    /// Parameters and running statistics as named tensors.
    pub fn to_tensors(&self) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        for p in &self.projectors {
            out.push(Tensor::complex(format!("P{}", p.layer), vec![p.rows, p.cols], p.matrix.clone())?);
        }
        for (j, l) in self.layers.iter().enumerate() {
            if !l.nonlin.a.is_empty() {
                out.push(Tensor::real(format!("nonlin{j}.a"), vec![l.nonlin.a.len()], l.nonlin.a.clone())?);
            }
            if !l.nonlin.b.is_empty() {
                out.push(Tensor::real(format!("nonlin{j}.b"), vec![l.nonlin.b.len()], l.nonlin.b.clone())?);
            }
        }
        for (i, s) in self.running.iter().enumerate() {
            let n = s.channels();
            out.push(Tensor::complex(format!("running{}.mean", i + 1), vec![n], s.mean.clone())?);
            out.push(Tensor::real(format!("running{}.var", i + 1), vec![n], s.var.clone())?);
        }
        Ok(out)
    }

    /// Restores what [`to_tensors`](Self::to_tensors) wrote.
    pub fn load_tensors(&mut self, container: &TensorContainer) -> Result<()> {
        for p in &mut self.projectors {
            let t = container.require(&format!("P{}", p.layer))?;
            if t.dims != [p.rows, p.cols] {
                return Err(Error::Config { layer: p.layer, reason: format!("stored projector has dims {:?}", t.dims) });
            }
            p.matrix = t.as_complex()?.to_vec();
        }
        for (j, l) in self.layers.iter_mut().enumerate() {
            for (suffix, values) in [("a", &mut l.nonlin.a), ("b", &mut l.nonlin.b)] {
                if values.is_empty() {
                    continue;
                }
                let t = container.require(&format!("nonlin{j}.{suffix}"))?;
                let v = t.as_real()?;
                if v.len() != values.len() {
                    return Err(Error::Config { layer: j, reason: "stored nonlinearity has the wrong size".into() });
                }
                values.copy_from_slice(v);
            }
        }
        for (i, s) in self.running.iter_mut().enumerate() {
            let mean = container.require(&format!("running{}.mean", i + 1))?.as_complex()?;
            let var = container.require(&format!("running{}.var", i + 1))?.as_real()?;
            if mean.len() != s.channels() || var.len() != s.channels() {
                return Err(Error::Config { layer: i + 1, reason: "stored statistics have the wrong size".into() });
            }
            s.mean = mean.to_vec();
            s.var = var.to_vec();
        }
        Ok(())
    }
}

fn check_finite(layer: usize, grad_p: &[Complex64], g: &[ComplexFeatureMap]) -> Result<()> {
    let bad = grad_p.iter().any(|z| !z.is_finite()) || g.iter().any(|m| m.data().iter().any(|z| !z.is_finite()));
    if bad {
        return Err(Error::Divergence { layer, reason: "non-finite projector gradient".into() });
    }
    Ok(())
}

/// Gradient through `ρ` (and the skip concatenation) for one example.
fn nonlin_backward(
    nonlin: &NonlinSpec,
    w: &ComplexFeatureMap,
    g: &ComplexFeatureMap,
    channels: usize,
    skip: bool,
) -> Result<(ComplexFeatureMap, Vec<f64>, Vec<f64>)> {
    let (g_rho, g_raw) = if skip {
        let mut parts = g.split(&[channels, channels])?;
        let raw = parts.pop();
        (parts.pop().expect("two parts"), raw)
    } else {
        (g.clone(), None)
    };
    let mut ga = vec![0.0; nonlin.a.len()];
    let mut gb = vec![0.0; nonlin.b.len()];
    let mut out = g_rho;
    for c in 0..channels {
        let (mut sa, mut sb) = (0.0, 0.0);
        for (o, z) in out.channel_mut(c).iter_mut().zip(w.channel(c)) {
            let pg = nonlin.backward(*z, *o, c);
            *o = pg.input;
            sa += pg.a;
            sb += pg.b;
        }
        if let Some(a) = ga.get_mut(c) {
            *a = sa;
        }
        if let Some(b) = gb.get_mut(c) {
            *b = sb;
        }
    }
    if let Some(raw) = g_raw {
        for (o, r) in out.data_mut().iter_mut().zip(raw.data()) {
            *o += r;
        }
    }
    Ok((out, ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_ops::translate;
    use rand::Rng;

    fn random_map(seed: u64, c: usize, h: usize, w: usize) -> ComplexFeatureMap {
        let mut r = rng::stream(seed, "network-test", 0);
        ComplexFeatureMap::from_fn(c, h, w, |_, _, _| {
            Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))
        })
    }

    fn real_map(seed: u64, c: usize, h: usize, w: usize) -> ComplexFeatureMap {
        random_map(seed, c, h, w).map(|z| Complex64::new(z.re, 0.0))
    }

    fn assert_standardized(xs: &[ComplexFeatureMap], tol: f64) {
        let s = ChannelStats::of_batch(xs).unwrap();
        for c in 0..s.channels() {
            assert!(s.mean[c].norm() <= tol, "mean {}", s.mean[c]);
            assert!((s.var[c] - 1.0).abs() <= tol, "var {}", s.var[c]);
        }
    }

    #[test]
    fn standardization_examples() {
        let xs: Vec<_> = (0..3).map(|i| random_map(i, 4, 5, 5)).collect();
        let stats = ChannelStats::of_batch(&xs).unwrap();
        let ys: Vec<_> = xs.iter().map(|x| standardize(x, &stats).unwrap()).collect();
        assert_standardized(&ys, 1e-6);
        let again = ChannelStats::of_batch(&ys).unwrap();
        for (y, z) in ys.iter().zip(ys.iter().map(|y| standardize(y, &again).unwrap())) {
            assert!(y.data().iter().zip(z.data()).all(|(a, b)| (a - b).norm() < 1e-6));
        }

        let constant = ComplexFeatureMap::from_fn(1, 3, 3, |_, _, _| Complex64::new(2.0, -1.0));
        let s = ChannelStats::of_batch(std::slice::from_ref(&constant)).unwrap();
        assert!(standardize(&constant, &s).unwrap().data().iter().all(|z| z.norm() == 0.0));

        // mean 2, variance 4: values 2 ± 2 and 2 ± 2i
        let vals = [4.0, 0.0].map(|v| Complex64::new(v, 0.0));
        let ivals = [Complex64::new(2.0, 2.0), Complex64::new(2.0, -2.0)];
        let x = ComplexFeatureMap::from_vec(1, 2, 2, [vals, ivals].concat()).unwrap();
        let s = ChannelStats::of_batch(std::slice::from_ref(&x)).unwrap();
        assert!((s.mean[0] - Complex64::new(2.0, 0.0)).norm() < 1e-15 && (s.var[0] - 4.0).abs() < 1e-15);
        assert_standardized(&[standardize(&x, &s).unwrap()], 1e-12);
    }

    #[test]
    fn divisive_normalization_examples() {
        let x = ComplexFeatureMap::from_fn(1, 2, 2, |_, _, _| Complex64::new(3.0, 4.0));
        assert!(divisive_normalize(&x).data().iter().all(|z| (z.norm() - 1.0).abs() < 1e-15));
        let x = random_map(3, 5, 4, 4);
        let y = divisive_normalize(&x);
        assert!(column_norms(&y).iter().all(|r| (r - 1.0).abs() < 1e-6));
        let yy = divisive_normalize(&y);
        assert!(y.data().iter().zip(yy.data()).all(|(a, b)| (a - b).norm() < 1e-6));
        let mut z = x.clone();
        for c in 0..5 {
            z.set(c, 1, 1, Complex64::default());
        }
        let zn = divisive_normalize(&z);
        assert!((0..5).all(|c| zn.get(c, 1, 1) == Complex64::default()));
    }

    #[test]
    fn plain_shapes_and_range() {
        let cfg = NetworkConfig::plain(2, 4, 1);
        let plans = plain_plans(&cfg, (32, 32)).unwrap();
        let out = forward_plain(&real_map(1, 3, 32, 32), &plans).unwrap();
        assert_eq!(out.shape(), (75, 8, 8));
        assert!(out.data().iter().all(|z| z.im == 0.0 && z.re >= 0.0));
        let state = NetworkState::new(cfg, (3, 32, 32)).unwrap();
        assert_eq!(state.output_shape(), (75, 8, 8));
        assert!(matches!(
            plain_plans(&NetworkConfig::plain(6, 2, 1), (32, 32)),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn plain_translation_covariance() {
        let x = real_map(2, 1, 16, 16);
        let cfg = NetworkConfig::plain(2, 2, 1);
        let plans = plain_plans(&cfg, (16, 16)).unwrap();
        let base = forward_plain(&x, &plans).unwrap();
        let shifted = forward_plain(&translate(&x, (4, -4)), &plans).unwrap();
        let expected = translate(&base, (1, -1));
        assert!(shifted.data().iter().zip(expected.data()).all(|(a, b)| (a - b).norm() < 1e-12));

        let cfg = NetworkConfig::plain(2, 2, 3);
        let plans = plain_plans(&cfg, (16, 16)).unwrap();
        let base = forward_plain(&x, &plans).unwrap();
        let shifted = forward_plain(&translate(&x, (3, 5)), &plans).unwrap();
        let expected = translate(&base, (3, 5));
        assert!(shifted.data().iter().zip(expected.data()).all(|(a, b)| (a - b).norm() < 1e-12));
    }

    fn toy(nonlin: NonlinKind, skip: bool) -> NetworkConfig {
        NetworkConfig {
            depth: 2,
            widths: vec![3, 2],
            angles: 2,
            nonlin,
            skip,
            subsample_period: 1,
            seed: 5,
            learned: true,
            grid: 7,
        }
    }

    #[test]
    fn identity_projectors_compose_with_normalization() {
        let mut cfg = toy(NonlinKind::Modulus, false);
        cfg.widths = vec![3, 9];
        let mut state = NetworkState::new(cfg.clone(), (1, 8, 8)).unwrap();
        state.set_projector(Projector::identity(1, 3)).unwrap();
        state.set_projector(Projector::identity(2, 9)).unwrap();
        let x = real_map(4, 1, 8, 8);
        let out = state.forward_eval(&x).unwrap();
        let plans = state.plans();
        let h = forward_plain(&x, &plans[..1]).unwrap();
        let h = forward_plain(&divisive_normalize(&h), &plans[1..]).unwrap();
        let expected = divisive_normalize(&h);
        assert_eq!(out.data(), expected.data());
    }

    #[test]
    fn skip_doubles_channels_and_orders_blocks() {
        let state = NetworkState::new(toy(NonlinKind::Modulus, true), (1, 8, 8)).unwrap();
        let (_, tape) = state.forward_train(&[real_map(1, 1, 8, 8), real_map(2, 1, 8, 8)]).unwrap();
        assert_eq!(state.layers()[1].in_channels, 2 * 3);
        assert_eq!(state.layers()[1].output_channels(2), 2 * 3 * 3);
        let w = &tape.layers[1].wavelet[0];
        let (out, _) = state.layer_forward(1, vec![tape.layers[1].stage.as_ref().unwrap().normalized[0].clone()]).unwrap();
        let halves = out[0].split(&[9, 9]).unwrap();
        assert_eq!(halves[1].data(), w.data());
        assert_eq!(halves[0].data(), w.map(crate::nonlin::modulus).data());
    }

    #[test]
    fn channel_mismatch_names_the_layer() {
        let mut state = NetworkState::new(toy(NonlinKind::Modulus, false), (1, 8, 8)).unwrap();
        let bad = Projector::identity(2, 4);
        assert!(matches!(state.set_projector(bad), Err(Error::Config { layer: 2, .. })));
        state.projectors[1] = Projector::random(2, 2, 5, 0);
        assert!(matches!(state.forward_eval(&real_map(1, 1, 8, 8)), Err(Error::Config { layer: 2, .. })));
        assert!(matches!(state.forward_eval(&real_map(1, 2, 8, 8)), Err(Error::Shape(_))));
    }

    #[test]
    fn full_cifar_shape_contract() {
        let cfg = NetworkConfig::full_cifar();
        let state = NetworkState::new(cfg.clone(), (3, 32, 32)).unwrap();
        let mut channels = 3;
        let mut size = 32;
        for (j, l) in state.layers().iter().enumerate() {
            let c_j = if j == 0 { 3 } else { cfg.widths[j - 1] };
            assert_eq!((l.in_channels, l.out_channels, l.size), (channels, c_j, (size, size)));
            assert_eq!(l.do_subsample, j % 2 == 1);
            assert_eq!(l.bank_variant, if j % 2 == 0 { BlockLayer::First } else { BlockLayer::Second });
            channels = 5 * c_j;
            if l.do_subsample {
                size /= 2;
            }
        }
        assert_eq!(state.output_shape(), (512, 2, 2));
        let out = state.forward_eval(&real_map(9, 3, 32, 32)).unwrap();
        assert_eq!(out.shape(), (512, 2, 2));
    }

    #[test]
    fn desk_shapes_recorded_on_the_tape() {
        let state = NetworkState::new(NetworkConfig::desk(), (3, 32, 32)).unwrap();
        let xs = [real_map(1, 3, 32, 32), real_map(2, 3, 32, 32)];
        let (out, tape) = state.forward_train(&xs).unwrap();
        assert_eq!(out[0].shape(), (256, 4, 4));
        let expected: Vec<_> = state
            .layers()
            .iter()
            .map(|l| {
                let (h, w) = l.output_size();
                (5 * l.out_channels, h, w)
            })
            .collect();
        assert_eq!(tape.wavelet_shapes(), expected);
        assert_eq!(expected[0], (15, 32, 32));
        assert_eq!(expected[5], (1280, 4, 4));
    }

    #[test]
    fn modulus_features_are_nonnegative_before_projection() {
        let state = NetworkState::new(toy(NonlinKind::Modulus, false), (1, 8, 8)).unwrap();
        let (out, _) = state.layer_forward(0, vec![real_map(3, 1, 8, 8)]).unwrap();
        assert!(out[0].data().iter().all(|z| z.im == 0.0 && z.re >= 0.0));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let a = NetworkState::new(toy(NonlinKind::Sigmoid, true), (1, 8, 8)).unwrap();
        let b = NetworkState::new(toy(NonlinKind::Sigmoid, true), (1, 8, 8)).unwrap();
        let x = real_map(6, 1, 8, 8);
        assert_eq!(a.forward_eval(&x).unwrap().data(), b.forward_eval(&x).unwrap().data());
    }

    #[test]
    fn config_text_round_trip() {
        for cfg in [NetworkConfig::desk(), NetworkConfig::full_cifar(), NetworkConfig::plain(3, 4, 2), toy(NonlinKind::Tanh, true)] {
            assert_eq!(NetworkConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
        assert!(matches!(NetworkConfig::parse("depth=2\nwidht=3"), Err(Error::ConfigFile { line: 2, .. })));
        assert!(NetworkConfig::parse("depth=2").is_err());
        assert!(NetworkConfig::parse("learned=false\nnonlin=tanh").is_err());
    }

    #[test]
    fn tensors_round_trip() {
        let a = NetworkState::new(toy(NonlinKind::SoftThreshold, false), (1, 8, 8)).unwrap();
        let mut c = TensorContainer::new();
        for t in a.to_tensors().unwrap() {
            c.push(t).unwrap();
        }
        let mut cfg = toy(NonlinKind::SoftThreshold, false);
        cfg.seed = 99;
        let mut b = NetworkState::new(cfg, (1, 8, 8)).unwrap();
        assert_ne!(a.projectors, b.projectors);
        b.load_tensors(&c).unwrap();
        assert_eq!(a.projectors, b.projectors);
        assert_eq!(a.layers, b.layers);
    }

    #[test]
    fn projector_init_variance() {
        let p = Projector::random(1, 200, 50, 3);
        let var_re = p.matrix.iter().map(|z| z.re * z.re).sum::<f64>() / p.matrix.len() as f64;
        assert!((var_re * 100.0 - 1.0).abs() < 0.1, "{var_re}");
    }
}
