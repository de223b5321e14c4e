//! Prediction on top of a frozen representation, and the unconstrained
//! end-to-end baseline network.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, AdamConfig, AdamState, Param, Tape, Tensor};
use crate::batch::{Column, SampleBatch};
use crate::error::{Error, Result};
use crate::matrix::SampleMatrix;
use crate::mlp::{Mlp, MlpConfig};
use crate::representation::{encode, RepresentationModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Hidden widths of the head; empty gives softmax regression.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Standardize head inputs with statistics of the training features.
    pub standardize: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: Vec::new(),
            epochs: 100,
            batch_size: 128,
            optimizer: AdamConfig::default(),
            seed: 0,
            standardize: true,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.epochs == 0 {
            errors.push("classifier epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            errors.push("classifier batch size must be at least 1".into());
        }
        if let Some(i) = self.hidden.iter().position(|&w| w == 0) {
            errors.push(format!("classifier hidden layer {i} has zero width"));
        }
        self.optimizer.validate(errors);
    }
}

/// Softmax head over representation features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub head: Mlp,
    pub num_classes: usize,
    /// Per-feature affine map `(r - shift) / scale` applied before the head.
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ClassifierModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::save_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = crate::io::load_json(path)?;
        m.head.check_shapes()?;
        Ok(m)
    }

    fn prepare(&self, features: &SampleMatrix) -> Result<SampleMatrix> {
        if features.cols() != self.shift.len() {
            return Err(Error::ShapeMismatch {
                op: "classifier input",
                left: vec![features.rows(), features.cols()],
                right: vec![self.shift.len()],
            });
        }
        let d = features.cols();
        let data = features
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.shift[i % d]) / self.scale[i % d])
            .collect();
        SampleMatrix::new(features.rows(), d, data)
    }

    pub fn logits(&self, features: &SampleMatrix) -> Result<SampleMatrix> {
        self.head.forward(&self.prepare(features)?)
    }
}

/// Argmax labels (ties to the lowest class id) and row-wise softmax probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub probs: SampleMatrix,
}

pub fn predict_from_logits(logits: &SampleMatrix) -> Prediction {
    let k = logits.cols();
    let mut labels = Vec::with_capacity(logits.rows());
    let mut probs = Vec::with_capacity(logits.rows() * k);
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        let p: Vec<f64> = row.iter().map(|v| (v - lse).exp()).collect();
        let z: f64 = p.iter().sum();
        probs.extend(p.iter().map(|v| v / z));
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        labels.push(best);
    }
    Prediction {
        labels,
        probs: SampleMatrix::from_raw(logits.rows(), k, probs),
    }
}

pub fn predict(clf: &ClassifierModel, rep: &RepresentationModel, x: &SampleMatrix) -> Result<Prediction> {
    let r = encode(rep, x)?;
    Ok(predict_from_logits(&clf.logits(&r)?))
}

fn class_labels(y: &Column) -> Result<(&[usize], usize)> {
    let ids = y
        .class_ids()
        .ok_or_else(|| Error::invalid("classification needs integer class labels"))?;
    let distinct: BTreeSet<usize> = ids.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::invalid("training labels contain a single class"));
    }
    Ok((ids, y.num_classes().unwrap_or(0).max(distinct.len())))
}

fn standardizer(features: &SampleMatrix, enabled: bool) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (features.rows(), features.cols());
    if !enabled {
        return (vec![0.0; d], vec![1.0; d]);
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(features.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (j, v) in features.row(i).iter().enumerate() {
            var[j] += (v - mean[j]) * (v - mean[j]);
        }
    }
    let scale = var
        .iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Cross-entropy minibatch Adam over `params` given a closure that records logits.
fn fit_cross_entropy<F>(
    params: &mut [Param],
    inputs: &SampleMatrix,
    labels: &[usize],
    cfg: &ClassifierConfig,
    forward: F,
) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Param], &SampleMatrix) -> Result<(crate::autodiff::Var, Vec<crate::autodiff::Var>)>,
{
    let mut adam = {
        let refs: Vec<&Param> = params.iter().collect();
        AdamState::new(cfg.optimizer.clone(), &refs)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut order: Vec<usize> = (0..inputs.rows()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = inputs.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let (logits, leaves) = forward(&mut tape, params, &xb)?;
            let loss = tape
                .softmax_cross_entropy(logits, &yb)
                .map_err(|_| Error::NonFiniteLoss { epoch, batch: b })?;
            let grads = tape.backward(loss)?;
            let gs: Vec<Tensor> = leaves.iter().map(|&v| grads.get(v)).collect();
            let mut refs: Vec<&mut Param> = params.iter_mut().collect();
            adam.step(&mut refs, &gs, epoch)?;
            total += tape.value(loss).item();
            steps += 1;
        }
        trace.push(total / steps as f64);
    }
    Ok(trace)
}

/// Trains a head on features that are already computed.
pub fn train_classifier_on_features(
    features: &SampleMatrix,
    y: &Column,
    cfg: &ClassifierConfig,
) -> Result<(ClassifierModel, Vec<f64>)> {
    let mut errors = Vec::new();
    cfg.validate(&mut errors);
    if !errors.is_empty() {
        return Err(Error::InvalidConfig(errors));
    }
    let (labels, k) = class_labels(y)?;
    if labels.len() != features.rows() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    let (shift, scale) = standardizer(features, cfg.standardize);
    let mut clf = ClassifierModel {
        head: Mlp::build(MlpConfig::new(features.cols(), cfg.hidden.clone(), k, cfg.seed))?,
        num_classes: k,
        shift,
        scale,
    };
    let inputs = clf.prepare(features)?;
    let head = clf.head.clone();
    let trace = fit_cross_entropy(&mut clf.head.params, &inputs, labels, cfg, |tape, params, xb| {
        let leaves: Vec<_> = params.iter().map(|p| tape.param(p.tensor())).collect();
        let xv = tape.constant(xb.into());
        Ok((head.forward_with_leaves(tape, xv, &leaves)?, leaves))
    })?;
    Ok((clf, trace))
}

/// Step II: fit the head on `rep(X)`; the representation is only read.
pub fn train_classifier(
    rep: &RepresentationModel,
    data: &SampleBatch,
    cfg: &ClassifierConfig,
) -> Result<ClassifierModel> {
    let r = encode(rep, &data.x)?;
    Ok(train_classifier_on_features(&r, &data.y, cfg)?.0)
}

/// Representation layers spliced directly into a softmax head, trained
/// jointly on cross-entropy with no fairness term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnnBaseline {
    pub representation: RepresentationModel,
    pub head: Mlp,
}

impl DnnBaseline {
    pub fn logits(&self, x: &SampleMatrix) -> Result<SampleMatrix> {
        self.head.forward(&encode(&self.representation, x)?)
    }

    pub fn predict(&self, x: &SampleMatrix) -> Result<Prediction> {
        Ok(predict_from_logits(&self.logits(x)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::save_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = crate::io::load_json(path)?;
        m.representation.network.check_shapes()?;
        m.head.check_shapes()?;
        Ok(m)
    }
}

pub fn train_dnn_baseline(
    mlp_cfg: &MlpConfig,
    data: &SampleBatch,
    cfg: &ClassifierConfig,
) -> Result<(DnnBaseline, Vec<f64>)> {
    let mut errors = Vec::new();
    cfg.validate(&mut errors);
    if !errors.is_empty() {
        return Err(Error::InvalidConfig(errors));
    }
    let (labels, k) = class_labels(&data.y)?;
    let rep = RepresentationModel::build(mlp_cfg.clone())?;
    let head = Mlp::build(MlpConfig::new(
        mlp_cfg.output_dim,
        cfg.hidden.clone(),
        k,
        mlp_cfg.init_seed.wrapping_add(1),
    ))?;
    let split = rep.network.params.len();
    let mut params: Vec<Param> = rep.network.params.iter().chain(&head.params).cloned().collect();
    let (rep_net, head_net) = (rep.network.clone(), head.clone());
    let trace = fit_cross_entropy(&mut params, &data.x, labels, cfg, |tape, params, xb| {
        let leaves: Vec<_> = params.iter().map(|p| tape.param(p.tensor())).collect();
        let xv = tape.constant(xb.into());
        let r = rep_net.forward_with_leaves(tape, xv, &leaves[..split])?;
        Ok((head_net.forward_with_leaves(tape, r, &leaves[split..])?, leaves))
    })?;
    let head_params = params.split_off(split);
    let mut representation = rep;
    representation.network.params = params;
    let mut head = head;
    head.params = head_params;
    Ok((DnnBaseline { representation, head }, trace))
}
