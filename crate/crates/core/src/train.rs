//! Losses, metrics, Adam and the training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{log_sum_exp, softmax, AutodiffError, Grad, Primitive, Tape, ValueId};
use crate::graph::MolGraph;
use crate::model::{GvpGnnModel, ModelError, Mode, Recorder, TaskMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("sample {index}: {message}")]
    Sample { index: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("{0} needs at least 2 samples")]
    TooFewSamples(MetricKind),
    #[error("{kind}: {got} predictions for {want} targets")]
    LengthMismatch { kind: MetricKind, got: usize, want: usize },
    #[error("{0} is undefined for this data: {1}")]
    Undefined(MetricKind, &'static str),
}

pub fn loss_mse(pred: &[f64], target: &[f64]) -> Result<f64, AutodiffError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(AutodiffError::Shape { prim: "mse", lhs: (pred.len(), 1), rhs: (target.len(), 1) });
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn loss_cross_entropy(logits: &[f64], label: usize) -> Result<f64, AutodiffError> {
    if label >= logits.len() {
        return Err(AutodiffError::LabelOutOfRange { label, classes: logits.len() });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Mae,
    Rmse,
    Auroc,
    Spearman,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [MetricKind::Mae, MetricKind::Rmse, MetricKind::Auroc, MetricKind::Spearman];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mae => "mae",
            MetricKind::Rmse => "rmse",
            MetricKind::Auroc => "auroc",
            MetricKind::Spearman => "spearman",
        }
    }
}

impl core::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        MetricKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

/// Average 1-based ranks, ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = alloc::vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Computes `kind` on flat arrays. AUROC reads targets as labels 0/1.
pub fn metric(preds: &[f64], targets: &[f64], kind: MetricKind) -> Result<f64, MetricError> {
    if preds.len() != targets.len() {
        return Err(MetricError::LengthMismatch { kind, got: preds.len(), want: targets.len() });
    }
    let n = preds.len();
    if n < 2 {
        return Err(MetricError::TooFewSamples(kind));
    }
    let nf = n as f64;
    match kind {
        MetricKind::Mae => Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / nf),
        MetricKind::Rmse => Ok(libm::sqrt(preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / nf)),
        MetricKind::Auroc => {
            if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
                return Err(MetricError::Undefined(kind, "labels must be 0 or 1"));
            }
            let pos = targets.iter().filter(|&&t| t == 1.0).count();
            let neg = n - pos;
            if pos == 0 || neg == 0 {
                return Err(MetricError::Undefined(kind, "only one class present"));
            }
            let ranks = average_ranks(preds);
            let rank_sum: f64 = ranks.iter().zip(targets).filter(|(_, &t)| t == 1.0).map(|(r, _)| r).sum();
            let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
            Ok(u / (pos as f64 * neg as f64))
        }
        MetricKind::Spearman => {
            let (rx, ry) = (average_ranks(preds), average_ranks(targets));
            let mean = (nf + 1.0) / 2.0;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (a, b) in rx.iter().zip(&ry) {
                let (da, db) = (a - mean, b - mean);
                sxy += da * db;
                sxx += da * da;
                syy += db * db;
            }
            if sxx == 0.0 || syy == 0.0 {
                return Err(MetricError::Undefined(kind, "constant input"));
            }
            Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            _ => Err(format!("unknown loss {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Metric recorded on the validation set each epoch.
    pub metric: Option<MetricKind>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 10,
            seed: 0,
            loss: LossKind::Mse,
            metric: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be a finite non-negative number, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(TrainError::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn steps(&self) -> usize {
        self.step as usize
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grad: &Grad) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (((p, g), m), v) in params.into_iter().zip(&grad.tensors).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

/// One training example: one graph (two for paired tasks) and its target.
/// For cross-entropy the target is the class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub graphs: Vec<MolGraph>,
    pub target: Vec<f64>,
}

impl Sample {
    pub fn single(graph: MolGraph, target: Vec<f64>) -> Self {
        Self { graphs: alloc::vec![graph], target }
    }

    pub fn pair(a: MolGraph, b: MolGraph, target: Vec<f64>) -> Self {
        Self { graphs: alloc::vec![a, b], target }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub metric: Vec<f64>,
}

impl History {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

fn label_of(target: &[f64], classes: usize) -> Option<usize> {
    let t = *target.first()?;
    (target.len() == 1 && t >= 0.0 && t.fract() == 0.0 && (t as usize) < classes).then_some(t as usize)
}

fn check_sample(model: &GvpGnnModel, loss: LossKind, s: &Sample, index: usize) -> Result<(), TrainError> {
    let cfg = model.config();
    let want_graphs = if cfg.task_mode == TaskMode::Paired { 2 } else { 1 };
    let bad = |message: String| Err(TrainError::Sample { index, message });
    if s.graphs.len() != want_graphs {
        return bad(format!("{} graphs for a {:?} task", s.graphs.len(), cfg.task_mode));
    }
    match loss {
        LossKind::Mse if s.target.len() != cfg.output_dim => bad(format!("{} targets, model outputs {}", s.target.len(), cfg.output_dim)),
        LossKind::CrossEntropy if label_of(&s.target, cfg.output_dim).is_none() => {
            bad(format!("target {:?} is not a class label below {}", s.target, cfg.output_dim))
        }
        _ => Ok(()),
    }
}

fn record_output(tape: &mut Tape, rec: &Recorder<'_>, s: &Sample, mode: &mut Mode<'_, ChaCha8Rng>) -> Result<ValueId, ModelError> {
    match s.graphs.as_slice() {
        [a, b] => rec.forward_pair(tape, a, b, mode),
        [g] => rec.forward(tape, g, mode),
        _ => Err(ModelError::Config(format!("sample carries {} graphs", s.graphs.len()))),
    }
}

fn record_loss(tape: &mut Tape, out: ValueId, s: &Sample, loss: LossKind) -> Result<ValueId, AutodiffError> {
    match loss {
        LossKind::Mse => {
            let t = tape.constant(Tensor::column(s.target.clone()));
            tape.mse(out, t)
        }
        LossKind::CrossEntropy => tape.record(Primitive::CrossEntropy { label: s.target[0] as usize }, &[out]),
    }
}

/// Loss and parameter gradient (canonical tensor order) for one sample.
pub fn sample_gradient(
    model: &GvpGnnModel,
    s: &Sample,
    loss: LossKind,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Grad), TrainError> {
    let mut tape = Tape::new();
    let w = model.bind(&mut tape);
    let ids: Vec<ValueId> = w.named().into_iter().map(|(_, id)| *id).collect();
    let rec = Recorder::new(model, w);
    let mut mode = match dropout {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    let out = record_output(&mut tape, &rec, s, &mut mode)?;
    let l = record_loss(&mut tape, out, s, loss)?;
    let grads = tape.backward(l)?;
    let value = tape.value(l).data()[0];
    Ok((value, Grad { tensors: ids.iter().map(|&id| grads.wrt(id)).collect() }))
}

/// Eval-mode model output for one sample.
pub fn predict(model: &GvpGnnModel, s: &Sample) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let rec = Recorder::new(model, model.bind_const(&mut tape));
    let out = record_output(&mut tape, &rec, s, &mut Mode::Eval)?;
    Ok(tape.value(out).data().to_vec())
}

/// Scores and targets fed to the metrics: raw outputs for regression,
/// probability of class 1 against the label for classification.
pub fn metric_inputs(outputs: &[Vec<f64>], samples: &[Sample], loss: LossKind) -> (Vec<f64>, Vec<f64>) {
    match loss {
        LossKind::Mse => (outputs.iter().flatten().copied().collect(), samples.iter().flat_map(|s| s.target.iter().copied()).collect()),
        LossKind::CrossEntropy => (
            outputs.iter().map(|o| if o.len() > 1 { softmax(o)[1] } else { o[0] }).collect(),
            samples.iter().map(|s| s.target[0]).collect(),
        ),
    }
}

/// Mean eval-mode loss and the outputs of every sample.
pub fn evaluate(model: &GvpGnnModel, samples: &[Sample], loss: LossKind) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let mut total = 0.0;
    let mut outputs = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        check_sample(model, loss, s, i)?;
        let out = predict(model, s)?;
        total += match loss {
            LossKind::Mse => loss_mse(&out, &s.target)?,
            LossKind::CrossEntropy => loss_cross_entropy(&out, s.target[0] as usize)?,
        };
        outputs.push(out);
    }
    Ok((total / samples.len().max(1) as f64, outputs))
}

#[cfg(feature = "parallel")]
fn batch_gradients(model: &GvpGnnModel, batch: &[(u64, &Sample)], cfg: &TrainConfig, seed: u64) -> Vec<Result<(f64, Grad), TrainError>> {
    use rayon::prelude::*;
    batch.par_iter().map(|&(stream, s)| sample_gradient(model, s, cfg.loss, Some(&mut dropout_rng(seed, stream)))).collect()
}

#[cfg(not(feature = "parallel"))]
fn batch_gradients(model: &GvpGnnModel, batch: &[(u64, &Sample)], cfg: &TrainConfig, seed: u64) -> Vec<Result<(f64, Grad), TrainError>> {
    batch.iter().map(|&(stream, s)| sample_gradient(model, s, cfg.loss, Some(&mut dropout_rng(seed, stream)))).collect()
}

/// Each sample visit draws dropout masks from its own ChaCha stream, so the
/// result does not depend on evaluation order.
fn dropout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
    r.set_stream(stream);
    r
}

/// Called after every optimizer step with `(epoch, batch, batch_loss)`.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, usize, f64);

/// Trains `model` in place with Adam. Shuffling and dropout are driven by
/// `cfg.seed`; the same inputs always give the same parameters and history.
pub fn train_loop(model: &mut GvpGnnModel, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<History, TrainError> {
    train_loop_with(model, train, val, cfg, &mut |_, _, _| {})
}

pub fn train_loop_with(
    model: &mut GvpGnnModel,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    hook: StepHook<'_>,
) -> Result<History, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (i, s) in train.iter().enumerate() {
        check_sample(model, cfg.loss, s, i)?;
    }
    for (i, s) in val.iter().enumerate() {
        check_sample(model, cfg.loss, s, i)?;
    }
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::from_config(cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    let mut visits = 0u64;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(u64, &Sample)> = chunk.iter().enumerate().map(|(k, &i)| (visits + k as u64, &train[i])).collect();
            visits += chunk.len() as u64;
            let mut total: Option<Grad> = None;
            let mut batch_loss = 0.0;
            for r in batch_gradients(model, &batch, cfg, cfg.seed) {
                let (l, g) = r?;
                batch_loss += l;
                match total.as_mut() {
                    Some(t) => t.add(&g),
                    None => total = Some(g),
                }
            }
            let mut grad = total.expect("chunks are non-empty");
            grad.scale(1.0 / chunk.len() as f64);
            if !batch_loss.is_finite() || !grad.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b });
            }
            epoch_loss += batch_loss;
            adam.step(model.named_tensors_mut().into_iter().map(|(_, t)| t).collect(), &grad);
            hook(epoch, b, batch_loss / chunk.len() as f64);
        }
        history.train_loss.push(epoch_loss / train.len() as f64);
        if val.is_empty() {
            history.val_loss.push(f64::NAN);
            history.metric.push(f64::NAN);
        } else {
            let (vl, outs) = evaluate(model, val, cfg.loss)?;
            history.val_loss.push(vl);
            let m = cfg.metric.map_or(f64::NAN, |k| {
                let (p, t) = metric_inputs(&outs, val, cfg.loss);
                metric(&p, &t, k).unwrap_or(f64::NAN)
            });
            history.metric.push(m);
        }
    }
    Ok(history)
}

/// Convolves `series` with a Gaussian of width `sigma` (in samples),
/// truncated at ±4σ and renormalized where it overhangs the ends.
pub fn smooth_history(series: &[f64], sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let half = libm::ceil(4.0 * sigma) as isize;
    let kernel: Vec<f64> = (-half..=half).map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma))).collect();
    let n = series.len() as isize;
    (0..n)
        .map(|i| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for k in -half..=half {
                let j = i + k;
                if (0..n).contains(&j) {
                    let w = kernel[(k + half) as usize];
                    acc += w * (series[j as usize] - series[i as usize]);
                    norm += w;
                }
            }
            // Centered on the current value so a flat stretch stays exact.
            series[i as usize] + acc / norm
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::Rng;

    #[test]
    fn loss_examples() {
        assert_eq!(loss_mse(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
        let ce = loss_cross_entropy(&[0.3; 4], 1).unwrap();
        assert!((ce - libm::log(4.0)).abs() < 1e-12);
        assert!(loss_cross_entropy(&[0.0; 3], 3).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let direct = -libm::log(libm::exp(z[2]) / z.iter().map(|x| libm::exp(*x)).sum::<f64>());
        assert!((loss_cross_entropy(&z, 2).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(metric(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0], MetricKind::Auroc).unwrap(), 0.75);
        assert_eq!(metric(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0], MetricKind::Auroc).unwrap(), 1.0);
        assert_eq!(metric(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0], MetricKind::Spearman).unwrap(), -1.0);
        assert!(matches!(metric(&[0.1, 0.2], &[1.0, 1.0], MetricKind::Auroc), Err(MetricError::Undefined(..))));
        assert!(matches!(metric(&[0.1], &[1.0], MetricKind::Mae), Err(MetricError::TooFewSamples(_))));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn auroc_matches_pair_count() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<f64> = (0..10).map(|_| rng.random_range(0..2) as f64).collect();
            labels[0] = 0.0;
            labels[1] = 1.0;
            // Coarse scores so that ties occur.
            let scores: Vec<f64> = (0..10).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
            let (mut wins, mut pairs) = (0.0, 0.0);
            for i in 0..10 {
                for j in 0..10 {
                    if labels[i] == 1.0 && labels[j] == 0.0 {
                        pairs += 1.0;
                        wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            assert_eq!(metric(&scores, &labels, MetricKind::Auroc).unwrap(), wins / pairs);
        }
    }

    #[test]
    fn metric_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mae = metric(&p, &t, MetricKind::Mae).unwrap();
            let rmse = metric(&p, &t, MetricKind::Rmse).unwrap();
            assert!(rmse >= mae && mae >= 0.0);
            let r = metric(&p, &t, MetricKind::Spearman).unwrap();
            assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr() {
        let mut p = Tensor::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]);
        let before = p.clone();
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        for _ in 0..10 {
            adam.step(vec![&mut p], &Grad { tensors: vec![Tensor::zeros(2, 2)] });
        }
        assert!(p.max_abs_diff(&before) <= 1e-15);
        let mut adam = Adam::new(0.0, 0.9, 0.999, 1e-8);
        adam.step(vec![&mut p], &Grad { tensors: vec![Tensor::filled(2, 2, 7.0)] });
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::from_vec(1, 2, vec![0.0, 0.0]);
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        adam.step(vec![&mut p], &Grad { tensors: vec![Tensor::from_vec(1, 2, vec![3.0, -0.5])] });
        assert!((p.get(0, 0) + 0.1).abs() < 1e-8 && (p.get(0, 1) - 0.1).abs() < 1e-8);
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth_history(&[2.5; 30], 2.0), vec![2.5; 30]);
        let mut impulse = vec![0.0; 41];
        impulse[20] = 1.0;
        let out = smooth_history(&impulse, 2.0);
        let z: f64 = (-8..=8).map(|k: i32| libm::exp(-((k * k) as f64) / 8.0)).sum();
        for k in -8i32..=8 {
            let want = libm::exp(-((k * k) as f64) / 8.0) / z;
            assert!((out[(20 + k) as usize] - want).abs() < 1e-12);
        }
        assert_eq!(out[0], 0.0);
        let mono: Vec<f64> = (0..15).map(|i| (i * i) as f64).collect();
        for v in smooth_history(&mono, 2.0) {
            assert!((0.0..=196.0).contains(&v));
        }
    }
}
