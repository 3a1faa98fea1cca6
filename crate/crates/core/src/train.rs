//! Optimizers, full-precision pretraining and the coreset QAT loop.
//!
//! [`run_quarc`] follows the two-stage loop: at every epoch `t` with
//! `t % R == 0` the whole training set is rescored with the current student
//! and the top `S` fraction becomes the coreset; other epochs reuse the
//! previous coreset. Each epoch then minimizes `L_KD + β·L_CLC` over coreset
//! batches.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coreset::{
    score_dataset, select_random, select_top, uncovered_classes, MetricMask, ScoringPass, SelectionRound, WorkCounter,
};
use crate::data::{random_hflip, Batcher, Dataset, SplitData};
use crate::graph::Graph;
use crate::loss::{ce_loss, clc_loss, kd_loss, total_loss, LossReport};
use crate::model::{LayerGrads, ModelDef, ModelInstance};
use crate::quant::QuantSpec;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, epoch: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => base * 0.5 * (1.0 + (PI * epoch as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Score-based selection every `R` epochs.
    Quarc,
    /// Uniformly random coreset, redrawn every `R` epochs.
    RandomCoreset,
    /// Every training sample, every epoch.
    FullData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub bits_w: u32,
    pub bits_a: Option<u32>,
    /// Coreset fraction `S`.
    pub fraction: f64,
    /// Selection interval `R` in epochs.
    pub interval: usize,
    /// Total QAT epochs `T`.
    pub epochs: usize,
    pub beta: f64,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub metrics: MetricMask,
    pub clc: bool,
    pub method: Method,
    /// Train quantizer step sizes; when false they stay at calibration.
    pub learn_scale: bool,
    pub hflip: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bits_w: 2,
            bits_a: None,
            fraction: 0.1,
            interval: 10,
            epochs: 60,
            beta: 10.0,
            optimizer: OptimizerConfig::Sgd {
                lr: 0.003,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            batch_size: 32,
            seed: 0,
            lr_schedule: LrSchedule::Cosine,
            metrics: MetricMask::ALL,
            clc: true,
            method: Method::Quarc,
            learn_scale: true,
            hflip: false,
        }
    }
}

impl RunConfig {
    /// MobileNetV2 / CIFAR-100 hyperparameters (2-bit weights).
    pub fn preset_cifar() -> Self {
        Self {
            epochs: 200,
            interval: 50,
            beta: 1e5,
            batch_size: 256,
            optimizer: OptimizerConfig::Sgd {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            ..Self::default()
        }
    }

    /// ResNet-18 / ImageNet-1K hyperparameters.
    pub fn preset_imagenet() -> Self {
        Self {
            epochs: 120,
            interval: 10,
            beta: 3e3,
            batch_size: 128,
            optimizer: OptimizerConfig::Adam {
                lr: 1.25e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("fraction must be in (0, 1], got {}", self.fraction));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.interval < 1 || self.interval > self.epochs {
            return bad(format!(
                "interval must be in 1..={}, got {}",
                self.epochs, self.interval
            ));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.optimizer.lr() > 0.0) {
            return bad("learning rate must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.bits_w < 2 || self.bits_a.is_some_and(|b| b < 2) {
            return bad("bitwidths must be at least 2".into());
        }
        let m = self.metrics;
        if self.method == Method::Quarc && !(m.evs || m.ds || m.res) {
            return bad("selection needs at least one metric".into());
        }
        Ok(())
    }
}

/// One SGD update with optional momentum and L2 weight decay:
/// `v ← μ·v + g + λ·w; w ← w − lr·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let d = g + weight_decay * *w;
        *v = momentum * *v + d;
        *w -= lr * *v;
    }
}

#[derive(Default)]
struct SlotState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Stateful optimizer over a model's weights, biases and step sizes.
pub struct Optimizer {
    cfg: OptimizerConfig,
    state: BTreeMap<String, SlotState>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
            steps: 0,
        }
    }

    fn update(&mut self, key: String, values: &mut [f64], grads: &[f64], lr: f64, decay: bool) {
        let slot = self.state.entry(key).or_default();
        if slot.m.len() != values.len() {
            slot.m = vec![0.0; values.len()];
            slot.v = vec![0.0; values.len()];
        }
        match self.cfg {
            OptimizerConfig::Sgd {
                momentum, weight_decay, ..
            } => {
                let wd = if decay { weight_decay } else { 0.0 };
                sgd_step(values, grads, &mut slot.m, lr, momentum, wd);
            }
            OptimizerConfig::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                let wd = if decay { weight_decay } else { 0.0 };
                let t = self.steps as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for i in 0..values.len() {
                    let g = grads[i] + wd * values[i];
                    slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                    slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                    values[i] -= lr * (slot.m[i] / c1) / ((slot.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }

    fn update_scale(&mut self, key: String, spec: &mut Option<QuantSpec>, grad: Option<f64>, lr: f64) {
        if let (Some(spec), Some(g)) = (spec.as_mut(), grad) {
            if spec.learnable {
                let mut s = [spec.scale];
                self.update(key, &mut s, &[g], lr, false);
                spec.scale = s[0];
                spec.project_scale();
            }
        }
    }

    /// Applies one step; step sizes are re-projected to stay positive.
    pub fn step(&mut self, model: &mut ModelInstance, grads: &[LayerGrads], lr: f64) {
        self.steps += 1;
        for (layer, g) in model.layers.iter_mut().zip(grads) {
            let name = layer.name.clone();
            self.update(
                format!("{name}.weight"),
                layer.weight.data_mut(),
                g.weight.data(),
                lr,
                true,
            );
            self.update(format!("{name}.bias"), layer.bias.data_mut(), g.bias.data(), lr, true);
            self.update_scale(
                format!("{name}.weight_scale"),
                &mut layer.weight_quant,
                g.weight_scale,
                lr,
            );
            self.update_scale(format!("{name}.act_scale"), &mut layer.act_quant, g.act_scale, lr);
        }
    }
}

/// Whether `y` is among the `k` largest logits, ties going to the lower class.
pub fn in_top_k(logits: &[f64], y: usize, k: usize) -> bool {
    let ly = logits[y];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(j, &l)| l > ly || (l == ly && j < y))
        .count();
    rank < k
}

/// Top-1 and top-5 accuracy; top-5 means top-`min(5, M)`.
pub fn evaluate(model: &ModelInstance, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let ids: Vec<usize> = (0..data.len()).collect();
    let k5 = 5.min(data.classes);
    let (mut top1, mut top5) = (0usize, 0usize);
    for chunk in ids.chunks(batch_size.max(1)) {
        let (x, labels) = data.gather(chunk);
        let out = model.forward(&x)?;
        for (r, &y) in labels.iter().enumerate() {
            let row = out.logits.row(r);
            top1 += usize::from(in_top_k(row, y, 1));
            top5 += usize::from(in_top_k(row, y, k5));
        }
    }
    let n = data.len() as f64;
    Ok((top1 as f64 / n, top5 as f64 / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            optimizer: OptimizerConfig::Sgd {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

fn diverged(epoch: usize, e: Error) -> Error {
    if e.is_numeric() {
        Error::Diverged {
            epoch,
            detail: e.to_string(),
        }
    } else {
        e
    }
}

/// Cross-entropy training of a freshly initialized full-precision model.
pub fn pretrain_fp(
    def: &ModelDef,
    split: &SplitData,
    cfg: &PretrainConfig,
) -> Result<(ModelInstance, Vec<PretrainEpoch>)> {
    let mut model = ModelInstance::init(def.clone(), cfg.seed)?;
    let batcher = Batcher::new(cfg.batch_size, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let ids: Vec<usize> = (0..split.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let batches = batcher.epoch(&ids, epoch);
        for batch in &batches {
            let (x, labels) = split.train.gather(batch);
            let step = || -> Result<f64> {
                let mut g = Graph::new();
                let bound = model.bind(&mut g, true);
                let xv = g.constant(x);
                let out = model.forward_graph(&mut g, &bound, xv)?;
                let loss = ce_loss(&mut g, out.probs, &labels)?;
                g.backward(loss)?;
                let value = g.value(loss).item();
                let grads = model.collect_grads(&g, &bound)?;
                opt.step(&mut model, &grads, cfg.optimizer.lr());
                Ok(value)
            };
            let value = step().map_err(|e| diverged(epoch, e))?;
            if !value.is_finite() {
                return Err(diverged(epoch, Error::NonFinite("pretraining loss".into())));
            }
            loss_sum += value;
        }
        let (top1, top5) = evaluate(&model, &split.eval, cfg.batch_size)?;
        history.push(PretrainEpoch {
            epoch,
            loss: loss_sum / batches.len() as f64,
            top1,
            top5,
        });
    }
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossReport,
    pub top1: f64,
    pub top5: f64,
    pub seconds: f64,
    pub coreset_size: usize,
    pub selected: bool,
    pub train_forwards: usize,
    pub backwards: usize,
    pub selection_forwards: usize,
}

impl EpochMetrics {
    /// Equality on every field except wall-clock time.
    pub fn same_outcome(&self, other: &EpochMetrics) -> bool {
        let mut a = self.clone();
        a.seconds = other.seconds;
        a == *other
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub student: ModelInstance,
    pub metrics: Vec<EpochMetrics>,
    pub rounds: Vec<SelectionRound>,
    /// Sorted sample ids trained on in each epoch.
    pub drawn: Vec<Vec<usize>>,
    pub work: WorkCounter,
}

enum CoresetSource<'a> {
    Method(Method),
    Fixed(&'a [usize]),
}

/// Coreset QAT from a trained full-precision model. `teacher` supplies the
/// distillation targets, the layer-correction taps and the scoring
/// reference; pass `fp` itself for the default setup.
pub fn run_quarc(fp: &ModelInstance, teacher: &ModelInstance, split: &SplitData, cfg: &RunConfig) -> Result<RunOutput> {
    run(fp, teacher, split, cfg, CoresetSource::Method(cfg.method))
}

/// Same loop with a coreset fixed for the whole run; no scoring happens.
pub fn run_on_fixed_coreset(
    fp: &ModelInstance,
    teacher: &ModelInstance,
    split: &SplitData,
    cfg: &RunConfig,
    ids: &[usize],
) -> Result<RunOutput> {
    if ids.is_empty() {
        return Err(Error::Config("fixed coreset is empty".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= split.train.len()) {
        return Err(Error::Config(format!("coreset id {bad} outside the training set")));
    }
    run(fp, teacher, split, cfg, CoresetSource::Fixed(ids))
}

fn run(
    fp: &ModelInstance,
    teacher: &ModelInstance,
    split: &SplitData,
    cfg: &RunConfig,
    source: CoresetSource,
) -> Result<RunOutput> {
    cfg.validate()?;
    let n = split.train.len();
    let batcher = Batcher::new(cfg.batch_size, cfg.seed)?;
    let calib_ids: Vec<usize> = (0..cfg.batch_size.min(n)).collect();
    let (calib, _) = split.train.gather(&calib_ids);
    let mut student = fp.clone_as_quantized(cfg.bits_w, cfg.bits_a, Some(&calib))?;
    for l in &mut student.layers {
        for spec in [&mut l.weight_quant, &mut l.act_quant].into_iter().flatten() {
            spec.learnable = cfg.learn_scale;
        }
    }
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut work = WorkCounter::default();
    let mut rounds = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut drawn = Vec::with_capacity(cfg.epochs);
    let mut coreset: Vec<usize> = match source {
        CoresetSource::Fixed(ids) => ids.to_vec(),
        _ => (0..n).collect(),
    };
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for t in 0..cfg.epochs {
        let start = Instant::now();
        let before = work;
        let reselect = t % cfg.interval == 0;
        let mut selected = false;
        match source {
            CoresetSource::Method(Method::Quarc) if reselect => {
                let pass = ScoringPass {
                    epoch: t,
                    total_epochs: cfg.epochs,
                    batch_size: cfg.batch_size,
                    mask: cfg.metrics,
                };
                let scores =
                    score_dataset(&student, teacher, &split.train, pass, &mut work).map_err(|e| diverged(t, e))?;
                let round = select_top(&scores, cfg.fraction, cfg.epochs)?;
                coreset = round.selected_ids.clone();
                rounds.push(round);
                selected = true;
            }
            CoresetSource::Method(Method::RandomCoreset) if reselect => {
                let round = select_random(&split.train.labels, cfg.fraction, cfg.seed, t)?;
                coreset = round.selected_ids.clone();
                rounds.push(round);
                selected = true;
            }
            _ => {}
        }
        if selected {
            let gaps = uncovered_classes(&coreset, &split.train.labels, split.train.classes);
            if !gaps.is_empty() {
                log::warn!("epoch {t}: coreset has no samples of classes {gaps:?}");
            }
        }
        if coreset.is_empty() {
            return Err(Error::Config(format!("empty coreset at epoch {t}")));
        }

        let lr = cfg.lr_schedule.lr_at(cfg.optimizer.lr(), t, cfg.epochs);
        let batches = batcher.epoch(&coreset, t);
        let mut sums = LossReport::default();
        for batch in &batches {
            let (mut x, _) = split.train.gather(batch);
            if cfg.hflip {
                random_hflip(&mut x, &mut aug_rng);
            }
            let report =
                train_step(&mut student, teacher, &x, cfg, &mut opt, lr, &mut work).map_err(|e| diverged(t, e))?;
            if !report.total.is_finite() {
                return Err(diverged(t, Error::NonFinite("total loss".into())));
            }
            accumulate(&mut sums, &report);
        }
        let nb = batches.len() as f64;
        sums.kd /= nb;
        sums.clc /= nb;
        sums.total /= nb;
        sums.per_tap.iter_mut().for_each(|(_, v)| *v /= nb);

        let (top1, top5) = evaluate(&student, &split.eval, cfg.batch_size)?;
        let mut ids = coreset.clone();
        ids.sort_unstable();
        drawn.push(ids);
        metrics.push(EpochMetrics {
            epoch: t,
            loss: sums,
            top1,
            top5,
            seconds: start.elapsed().as_secs_f64(),
            coreset_size: coreset.len(),
            selected,
            train_forwards: work.train_forwards - before.train_forwards,
            backwards: work.backwards - before.backwards,
            selection_forwards: work.selection_forwards - before.selection_forwards,
        });
    }
    Ok(RunOutput {
        student,
        metrics,
        rounds,
        drawn,
        work,
    })
}

fn accumulate(sums: &mut LossReport, r: &LossReport) {
    sums.kd += r.kd;
    sums.clc += r.clc;
    sums.total += r.total;
    if sums.per_tap.is_empty() {
        sums.per_tap = r.per_tap.clone();
    } else {
        for ((_, acc), (_, v)) in sums.per_tap.iter_mut().zip(&r.per_tap) {
            *acc += v;
        }
    }
}

fn train_step(
    student: &mut ModelInstance,
    teacher: &ModelInstance,
    x: &crate::Tensor,
    cfg: &RunConfig,
    opt: &mut Optimizer,
    lr: f64,
    work: &mut WorkCounter,
) -> Result<LossReport> {
    let target = teacher.forward(x)?;
    work.teacher_forwards += 1;

    let mut g = Graph::new();
    let bound = student.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let out = student.forward_graph(&mut g, &bound, xv)?;
    work.train_forwards += 1;
    let p_t = g.constant(target.probs);
    let kd = kd_loss(&mut g, p_t, out.probs)?;
    let mut report = LossReport {
        kd: g.value(kd).item(),
        ..LossReport::default()
    };
    let total = if cfg.clc {
        let teacher_taps: Vec<(String, _)> = target.taps.0.into_iter().map(|(n, t)| (n, g.constant(t))).collect();
        let terms = clc_loss(&mut g, &teacher_taps, &out.taps)?;
        report.clc = g.value(terms.total).item();
        report.per_tap = terms
            .per_tap
            .iter()
            .map(|(n, v)| (n.clone(), g.value(*v).item()))
            .collect();
        total_loss(&mut g, kd, terms.total, cfg.beta)?
    } else {
        kd
    };
    report.total = g.value(total).item();
    g.backward(total)?;
    work.backwards += 1;
    let grads = student.collect_grads(&g, &bound)?;
    opt.step(student, &grads, lr);
    Ok(report)
}
