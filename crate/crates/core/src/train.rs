//! Seeded training loop, optimizers, evaluation and the σ sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{load_idx, rotate_augment, LabeledImageSet, MnistPaths, Provenance};
use crate::error::{invalid, Error, Result};
use crate::layers::Mode;
use crate::metrics::{equivariance_error, model_tap, Actions, ProbeSet};
use crate::model::{Model, ModelSpec};
use crate::params::{apply_stat_updates, Forward, ParamId, ParamStore};
use crate::record::{MetricsRecord, Split};
use crate::tensor::{Scalar, Tensor};

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e4;

const AUGMENT_SALT: u64 = 0x5eed_0001;
const SHUFFLE_SALT: u64 = 0x5eed_0002;
const PROBE_SALT: u64 = 0x5eed_0003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    SgdMomentum,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd-momentum",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd-momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            _ => Err(invalid("optimizer", format!("unknown optimizer `{s}`"))),
        }
    }
}

/// Adam or heavy-ball SGD over the trainable entries of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar = f32> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    steps: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from `(param, gradient)` pairs.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.steps += 1;
        let t = self.steps as i32;
        let lr = T::from_f64_lossy(self.lr);
        for (id, g) in grads {
            let p = store.get(*id);
            g.expect_same_shape("optimizer step", p)?;
            let i = id.index();
            let next = match self.kind {
                OptimizerKind::SgdMomentum => {
                    let mu = T::from_f64_lossy(self.momentum);
                    let buf = match self.first[i].take() {
                        Some(b) => b.zip_map(g, |b, g| mu * b + g)?,
                        None => g.clone(),
                    };
                    let next = p.zip_map(&buf, |p, b| p - lr * b)?;
                    self.first[i] = Some(buf);
                    next
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
                    let one = T::one();
                    let m = match self.first[i].take() {
                        Some(m) => m.zip_map(g, |m, g| b1 * m + (one - b1) * g)?,
                        None => g.map(|g| (one - b1) * g),
                    };
                    let v = match self.second[i].take() {
                        Some(v) => v.zip_map(g, |v, g| b2 * v + (one - b2) * g * g)?,
                        None => g.map(|g| (one - b2) * g * g),
                    };
                    let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
                    let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
                    let eps = T::from_f64_lossy(self.eps);
                    let mut next = p.clone();
                    for ((p, &m), &v) in next.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    }
                    self.first[i] = Some(m);
                    self.second[i] = Some(v);
                    next
                }
            };
            store.set(*id, next)?;
        }
        Ok(())
    }

    /// Moment buffers and step counter, keyed by parameter name.
    pub fn state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("steps".to_string(), Tensor::scalar(T::from_f64_lossy(self.steps as f64)))];
        for (tag, bufs) in [("m", &self.first), ("v", &self.second)] {
            for (i, b) in bufs.iter().enumerate() {
                if let Some(b) = b {
                    out.push((format!("{tag}.{}", store.entries()[i].name), b.clone()));
                }
            }
        }
        out
    }

    /// Inverse of [`Optimizer::state`].
    pub fn load_state(&mut self, store: &ParamStore<T>, state: &[(String, Tensor<T>)]) -> Result<()> {
        self.first = vec![None; store.len()];
        self.second = vec![None; store.len()];
        for (name, t) in state {
            if name == "steps" {
                self.steps = t.item().to_u64().unwrap_or(0);
                continue;
            }
            let (tag, pname) = name
                .split_once('.')
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let id = store.id(pname).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: store.get(id).shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            match tag {
                "m" => self.first[id.index()] = Some(t.clone()),
                "v" => self.second[id.index()] = Some(t.clone()),
                _ => return Err(Error::UnknownParam(name.clone())),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub sigma: f64,
    pub mode: Mode,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// Training images are randomly quarter-turned; test images stay upright.
    pub rotate_train: bool,
    pub subset_train: Option<usize>,
    pub subset_test: Option<usize>,
    /// Probes for the per-epoch EE column; 0 disables it.
    pub ee_probes: usize,
    pub data: Option<MnistPaths>,
    pub checkpoint_out: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed,
            sigma: 0.1,
            mode: Mode::Relaxed,
            widths: vec![8, 16, 32, 32],
            num_classes: 10,
            rotate_train: true,
            subset_train: Some(5000),
            subset_test: Some(1000),
            ee_probes: 16,
            data: None,
            checkpoint_out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.num_classes == 0 {
            return Err(invalid("TrainConfig", "epochs, batch size and class count must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("TrainConfig", "learning rate must be positive"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(invalid("TrainConfig", "sigma must be non-negative"));
        }
        if self.subset_train == Some(0) || self.subset_test == Some(0) {
            return Err(invalid("TrainConfig", "subsets must be non-empty"));
        }
        Ok(())
    }

    pub fn model_spec(&self, input_size: usize) -> ModelSpec {
        let mut spec = ModelSpec::toy(&self.widths, self.mode, self.sigma, self.num_classes);
        spec.input_size = input_size;
        spec.canvas = crate::model::canvas_for(input_size);
        spec
    }

    /// Every resolved setting as one record line.
    pub fn describe(&self) -> crate::record::Record {
        let widths: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        let opt = |v: Option<usize>| v.map_or_else(|| "all".to_string(), |n| n.to_string());
        let path = |p: Option<&PathBuf>| p.map_or_else(|| "none".to_string(), |p| p.display().to_string());
        crate::record::Record::new("config")
            .field("epochs", self.epochs)
            .field("batch_size", self.batch_size)
            .field("lr", self.learning_rate)
            .field("optimizer", self.optimizer)
            .field("seed", self.seed)
            .field("sigma", self.sigma)
            .field("mode", self.mode)
            .field("widths", widths.join(","))
            .field("num_classes", self.num_classes)
            .field("rotate_train", self.rotate_train)
            .field("subset_train", opt(self.subset_train))
            .field("subset_test", opt(self.subset_test))
            .field("ee_probes", self.ee_probes)
            .field("train_images", path(self.data.as_ref().map(|d| &d.train_images)))
            .field("train_labels", path(self.data.as_ref().map(|d| &d.train_labels)))
            .field("test_images", path(self.data.as_ref().map(|d| &d.test_images)))
            .field("test_labels", path(self.data.as_ref().map(|d| &d.test_labels)))
            .field("out", path(self.checkpoint_out.as_ref()))
    }
}

/// Prepared train and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
}

impl TrainData {
    /// Applies the configured subsets and training-set rotation.
    pub fn prepare(config: &TrainConfig, train: &LabeledImageSet, test: &LabeledImageSet) -> Result<Self> {
        let train = match config.subset_train {
            Some(n) => train.take(n)?,
            None => train.clone(),
        };
        let train = if config.rotate_train {
            rotate_augment(&train, config.seed ^ AUGMENT_SALT)?
        } else {
            train
        };
        let test = match config.subset_test {
            Some(n) => test.take(n)?,
            None => test.clone(),
        };
        if train.image_shape() != test.image_shape() {
            return Err(Error::Data(format!(
                "train images {:?} and test images {:?} differ in shape",
                train.image_shape(),
                test.image_shape()
            )));
        }
        Ok(Self { train, test })
    }

    /// Loads the IDX files named in the config (or the data directory).
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let paths = config
            .data
            .clone()
            .or_else(MnistPaths::from_env)
            .ok_or_else(|| Error::Data("no dataset paths given and no data directory configured".into()))?;
        let train = load_idx(&paths.train_images, &paths.train_labels, Provenance::Train)?;
        let test = load_idx(&paths.test_images, &paths.test_labels, Provenance::Test)?;
        Self::prepare(config, &train, &test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub top1_error_percent: f64,
    pub correct: usize,
    pub total: usize,
}

impl Evaluation {
    pub fn record(&self, epoch: usize, split: Split, ee: Option<f64>, wall_seconds: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            split,
            loss: self.loss,
            top1_error_percent: self.top1_error_percent,
            empirical_ee: ee,
            wall_seconds,
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode batch predictions.
pub fn predict<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let logits = model.logits(x)?;
    let k = logits.shape()[1];
    Ok(logits.data().chunks(k).map(argmax).collect())
}

const EVAL_BATCH: usize = 250;

/// Mean loss and top-1 error over the whole set, in inference mode.
pub fn evaluate(model: &Model<f32>, set: &LabeledImageSet) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let [c, h, w] = set.image_shape();
    let spec = model.spec();
    if c != spec.in_channels || h != spec.input_size || w != spec.input_size {
        return Err(crate::error::shape_err(
            "evaluate",
            format!(
                "images ({c},{h},{w}) vs model input ({},{},{})",
                spec.in_channels, spec.input_size, spec.input_size
            ),
        ));
    }
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::Label {
            label: bad,
            classes: spec.num_classes,
        });
    }
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = set.batch(chunk)?;
        let mut fw = Forward::eval(&model.params);
        let xv = fw.graph.constant(x);
        let logits = model.net.forward(&mut fw, xv)?;
        let loss = fw.graph.softmax_cross_entropy(logits, &labels)?;
        loss_sum += fw.graph.value(loss).item() as f64 * chunk.len() as f64;
        let out = fw.graph.value(logits);
        let k = out.shape()[1];
        correct += out
            .data()
            .chunks(k)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
    }
    let total = set.len();
    Ok(Evaluation {
        loss: loss_sum / total as f64,
        top1_error_percent: 100.0 * (total - correct) as f64 / total as f64,
        correct,
        total,
    })
}

/// Empirical EE of a classifier's logits on mixed dataset/Gaussian probes.
pub fn classifier_ee(model: &Model<f32>, set: &LabeledImageSet, probes: usize, seed: u64) -> Result<Option<f64>> {
    if probes == 0 {
        return Ok(None);
    }
    let natural = probes / 2;
    let p = ProbeSet::mixed(set, natural, probes - natural, seed ^ PROBE_SALT)?;
    Ok(Some(equivariance_error(model_tap(model, "head"), &p, Actions::INVARIANT)?.ee))
}

/// Holds a model and its optimizer and advances them one batch at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optimizer: Optimizer<f32>,
    pub epoch: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, input_size: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::build(&config.model_spec(input_size), config.seed)?;
        Ok(Self {
            config: config.clone(),
            model,
            optimizer: Optimizer::new(config.optimizer, config.learning_rate),
            epoch: 0,
            step: 0,
        })
    }

    /// One forward/backward/update on a batch; returns the batch loss and
    /// number of correct predictions.
    pub fn train_step(&mut self, x: Tensor<f32>, labels: &[usize]) -> Result<(f64, usize)> {
        let (loss, correct, grads, stats) = {
            let mut fw = Forward::train(&self.model.params);
            let xv = fw.graph.constant(x);
            let logits = self.model.net.forward(&mut fw, xv)?;
            let loss = fw.graph.softmax_cross_entropy(logits, labels)?;
            let lv = fw.graph.value(loss).item() as f64;
            if !lv.is_finite() || lv > DIVERGENCE_LOSS {
                return Err(Error::Divergence {
                    epoch: self.epoch,
                    step: self.step,
                    loss: lv,
                });
            }
            let out = fw.graph.value(logits);
            let k = out.shape()[1];
            let correct = out
                .data()
                .chunks(k)
                .zip(labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            fw.graph.backward(loss)?;
            let grads = fw.param_grads();
            let stats = fw.take_stat_updates();
            (lv, correct, grads, stats)
        };
        self.optimizer.step(&mut self.model.params, &grads)?;
        apply_stat_updates(&mut self.model.params, stats);
        self.step += 1;
        Ok((loss, correct))
    }

    /// Seeded batch order for the given epoch.
    pub fn batch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ SHUFFLE_SALT ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        idx.shuffle(&mut rng);
        idx
    }

    /// One pass over the training set; returns the mean loss and error.
    pub fn train_epoch(&mut self, train: &LabeledImageSet) -> Result<Evaluation> {
        let order = self.batch_order(train.len(), self.epoch);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(self.config.batch_size) {
            let (x, labels) = train.batch(chunk)?;
            let (l, c) = self.train_step(x, &labels)?;
            loss_sum += l * chunk.len() as f64;
            correct += c;
        }
        self.epoch += 1;
        let total = train.len();
        Ok(Evaluation {
            loss: loss_sum / total as f64,
            top1_error_percent: 100.0 * (total - correct) as f64 / total as f64,
            correct,
            total,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), self.config.seed.to_string());
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("optimizer".to_string(), self.config.optimizer.to_string());
        meta.insert("lr".to_string(), self.config.learning_rate.to_string());
        meta.insert("batch_size".to_string(), self.config.batch_size.to_string());
        Checkpoint::from_model(&self.model, meta, self.optimizer.state(&self.model.params))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub checkpoint: Checkpoint,
    pub records: Vec<MetricsRecord>,
}

impl TrainOutcome {
    /// The last test-split record.
    pub fn final_test(&self) -> Option<&MetricsRecord> {
        self.records.iter().rev().find(|r| r.split == Split::Test)
    }
}

/// Trains per the config, reporting each record as soon as it exists.
pub fn train_with(
    config: &TrainConfig,
    data: &TrainData,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    let [_, h, _] = data.train.image_shape();
    let mut trainer = Trainer::new(config, h)?;
    let start = Instant::now();
    let mut records = Vec::with_capacity(2 * config.epochs);
    for _ in 0..config.epochs {
        let tr = trainer.train_epoch(&data.train)?;
        let ee = classifier_ee(&trainer.model, &data.test, config.ee_probes, config.seed)?;
        let te = evaluate(&trainer.model, &data.test)?;
        let wall = start.elapsed().as_secs_f64();
        for r in [
            tr.record(trainer.epoch, Split::Train, ee, wall),
            te.record(trainer.epoch, Split::Test, ee, wall),
        ] {
            on_record(&r);
            records.push(r);
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(path) = &config.checkpoint_out {
        save_checkpoint(path, &checkpoint)?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        checkpoint,
        records,
    })
}

pub fn train(config: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    train_with(config, data, |_| {})
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    /// EE of the freshly initialized model.
    pub init_ee: Option<f64>,
    pub test_error_percent: f64,
    pub final_ee: Option<f64>,
}

impl SweepRow {
    pub fn to_record(&self) -> crate::record::Record {
        let f = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |v| v.to_string());
        crate::record::Record::new("sweep")
            .field("sigma", self.sigma)
            .field("init_ee", f(self.init_ee))
            .field("test_error", self.test_error_percent)
            .field("final_ee", f(self.final_ee))
    }
}

/// Trains one model per σ with the config's seed and returns one row each.
pub fn sigma_sweep(config: &TrainConfig, sigmas: &[f64], data: &TrainData) -> Result<Vec<SweepRow>> {
    if sigmas.is_empty() {
        return Err(invalid("sigma_sweep", "needs at least one sigma"));
    }
    let [_, h, _] = data.train.image_shape();
    sigmas
        .iter()
        .map(|&sigma| {
            let cfg = TrainConfig {
                sigma,
                checkpoint_out: None,
                ..config.clone()
            };
            let init = Trainer::new(&cfg, h)?;
            let init_ee = classifier_ee(&init.model, &data.test, cfg.ee_probes, cfg.seed)?;
            let out = train(&cfg, data)?;
            let last = out
                .final_test()
                .ok_or_else(|| invalid("sigma_sweep", "training produced no test record"))?;
            Ok(SweepRow {
                sigma,
                init_ee,
                test_error_percent: last.top1_error_percent,
                final_ee: last.empirical_ee,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_symmetry_breaking_set;

    #[test]
    fn sgd_step_matches_closed_form() {
        let mut store = ParamStore::<f64>::new();
        let p0 = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let id = store.add("w", p0.clone(), crate::params::ParamKind::Trainable).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 0.1);
        // loss = ½‖w‖², so ∇ = w
        opt.step(&mut store, &[(id, p0.clone())]).unwrap();
        for (a, b) in store.get(id).data().iter().zip(p0.data()) {
            assert!((a - 0.9 * b).abs() < 1e-7);
        }
        let p1 = store.get(id).clone();
        opt.step(&mut store, &[(id, p1.clone())]).unwrap();
        for ((a, b), c) in store.get(id).data().iter().zip(p1.data()).zip(p0.data()) {
            assert!((a - (b - 0.1 * (0.9 * c + b))).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("w", Tensor::from_f64(&[2], &[3.0, -4.0]).unwrap(), crate::params::ParamKind::Trainable)
            .unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        let g = Tensor::from_f64(&[2], &[0.5, -7.0]).unwrap();
        opt.step(&mut store, &[(id, g)]).unwrap();
        let w = store.get(id).data();
        assert!((w[0] - 2.99).abs() < 1e-7 && (w[1] + 3.99).abs() < 1e-7);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let m = Model::<f32>::build(&ModelSpec::toy(&[4, 8, 8, 8], Mode::Relaxed, 0.1, 3), 0).unwrap();
        let mut params = m.params.clone();
        let id = params.trainable_ids()[0];
        let g = Tensor::full(params.get(id).shape(), 0.5f32);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3);
        opt.step(&mut params, &[(id, g)]).unwrap();
        let state = opt.state(&params);
        let mut back = Optimizer::<f32>::new(OptimizerKind::Adam, 1e-3);
        back.load_state(&params, &state).unwrap();
        assert_eq!(back.state(&params), state);
        assert_eq!(back.steps(), 1);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    fn tiny_config(mode: Mode) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            mode,
            widths: vec![4, 8, 8, 8],
            num_classes: 4,
            subset_train: None,
            subset_test: None,
            rotate_train: false,
            ee_probes: 2,
            ..TrainConfig::new(5)
        }
    }

    fn tiny_data() -> TrainData {
        let s = make_symmetry_breaking_set(32, 1.0, 2).unwrap();
        TrainData {
            train: s.clone(),
            test: s.take(8).unwrap(),
        }
    }

    #[test]
    fn strict_training_keeps_delta_zero_and_is_deterministic() {
        let cfg = tiny_config(Mode::Strict);
        let data = tiny_data();
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert!(ra.same_outcome(rb));
        }
        for (_, d) in a.model.deltas() {
            assert!(d.data().iter().all(|v| v.to_bits() == 0));
        }
        assert_eq!(a.records.len(), 2);
    }

    #[test]
    fn relaxed_training_moves_delta() {
        let cfg = tiny_config(Mode::Relaxed);
        let before = Trainer::new(&cfg, 28).unwrap();
        let out = train(&cfg, &tiny_data()).unwrap();
        let moved = before
            .model
            .deltas()
            .iter()
            .zip(out.model.deltas())
            .any(|((_, a), (_, b))| a != &b);
        assert!(moved);
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = tiny_config(Mode::Plain);
        cfg.learning_rate = 1e6;
        cfg.optimizer = OptimizerKind::SgdMomentum;
        cfg.epochs = 3;
        match train(&cfg, &tiny_data()) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_rejects_bad_labels() {
        let m = Model::<f32>::build(&ModelSpec::toy(&[4, 8, 8, 8], Mode::Strict, 0.0, 2), 0).unwrap();
        let s = make_symmetry_breaking_set(8, 1.0, 0).unwrap();
        assert!(matches!(evaluate(&m, &s), Err(Error::Label { .. })));
    }
}
