//! Representation learning: the FSRL objective and its minibatch training loop.
//!
//! The objective for a representation `R` is
//! `-alpha * V_n[R(X), Y] + (1 - alpha) * V_n[R(X), A] + lambda * D_n[R(X), gamma]`
//! where `V_n` is the distance covariance U-statistic and `D_n` the energy
//! distance to a standard Gaussian reference sample `gamma`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::batch::SampleBatch;
use crate::dependence::{self, pairwise_distances_with, u_center};
use crate::error::{Error, Result};
use crate::matrix::SampleMatrix;
use crate::mlp::{Mlp, MlpConfig};
use crate::par::Execution;

/// Smallest minibatch the loop will use; the U-statistic itself needs 4.
pub const MIN_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Draw a fresh Gaussian reference for every minibatch; otherwise one draw per run.
    pub gaussian_resample: bool,
    /// Return the weights of the epoch with the lowest validation loss instead of the last.
    pub keep_best_validation: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 0.001,
            batch_size: 128,
            epochs: 100,
            optimizer: AdamConfig::default(),
            seed: 0,
            gaussian_resample: true,
            keep_best_validation: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            errors.push(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            errors.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.batch_size < MIN_BATCH {
            errors.push(format!(
                "batch size must be at least {MIN_BATCH}, got {}",
                self.batch_size
            ));
        }
        if self.epochs == 0 {
            errors.push("epochs must be at least 1".into());
        }
        self.optimizer.validate(errors);
    }

    pub fn check(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.validate(&mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errors))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub config_hash: String,
    pub final_epoch: usize,
}

/// A trained (or freshly initialized) representation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationModel {
    pub network: Mlp,
    #[serde(default)]
    pub provenance: Provenance,
}

impl RepresentationModel {
    pub fn build(cfg: MlpConfig) -> Result<Self> {
        Ok(Self {
            network: Mlp::build(cfg)?,
            provenance: Provenance::default(),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.network.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::save_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: Self = crate::io::load_json(path)?;
        model.network.check_shapes()?;
        Ok(model)
    }
}

/// `R(X)`: one output row per input row, no coupling between rows.
pub fn encode(model: &RepresentationModel, x: &SampleMatrix) -> Result<SampleMatrix> {
    model.network.forward(x)
}

/// Standard normal `n x d` sample.
pub fn gaussian_sample(n: usize, d: usize, rng: &mut ChaCha8Rng) -> SampleMatrix {
    let data = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    SampleMatrix::from_raw(n, d, data)
}

/// Handles to the objective and its parts on a tape.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub loss: Var,
    pub dcov_ry: Var,
    pub dcov_ra: Var,
    pub energy: Var,
    /// Parameter leaves in `network.params` order.
    pub params: Vec<Var>,
}

fn check_weights(alpha: f64, lambda: f64) -> Result<()> {
    let mut errors = Vec::new();
    if !(alpha > 0.0 && alpha <= 1.0) {
        errors.push(format!("alpha must lie in (0, 1], got {alpha}"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        errors.push(format!("lambda must be >= 0, got {lambda}"));
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(errors))
    }
}

/// Records the differentiable objective for one batch.
///
/// `y` and `a` are the real-valued views of target and sensitive attribute
/// (see [`crate::batch::Column::to_matrix`]).
#[allow(clippy::too_many_arguments)]
pub fn fsrl_loss(
    tape: &mut Tape,
    model: &RepresentationModel,
    x: &SampleMatrix,
    y: &SampleMatrix,
    a: &SampleMatrix,
    gaussian_ref: &SampleMatrix,
    alpha: f64,
    lambda: f64,
) -> Result<LossTerms> {
    check_weights(alpha, lambda)?;
    let n = x.rows();
    if n < MIN_BATCH {
        return Err(Error::TooFewSamples {
            what: "fsrl_loss",
            min: MIN_BATCH,
            got: n,
        });
    }
    if y.rows() != n || a.rows() != n || gaussian_ref.rows() != n {
        return Err(Error::invalid(format!(
            "fsrl_loss: row counts differ (x {n}, y {}, a {}, gaussian {})",
            y.rows(),
            a.rows(),
            gaussian_ref.rows()
        )));
    }
    if gaussian_ref.cols() != model.output_dim() {
        return Err(Error::ShapeMismatch {
            op: "fsrl_loss gaussian reference",
            left: vec![n, model.output_dim()],
            right: vec![gaussian_ref.rows(), gaussian_ref.cols()],
        });
    }

    let seq = Execution::Sequential;
    let centered = |m: &SampleMatrix| -> Result<Tensor> {
        Tensor::matrix(n, n, u_center(pairwise_distances_with(m, seq).as_slice(), n, seq))
    };
    let y_c = tape.constant(centered(y)?);
    let a_c = tape.constant(centered(a)?);
    let gamma = tape.constant(gaussian_ref.into());
    let gamma_self: f64 = pairwise_distances_with(gaussian_ref, seq).as_slice().iter().sum();
    let gamma_self = tape.constant(Tensor::scalar(gamma_self));
    let mut off_diag = vec![1.0; n * n];
    (0..n).for_each(|i| off_diag[i * n + i] = 0.0);
    let off_diag = tape.constant(Tensor::matrix(n, n, off_diag)?);

    let xv = tape.constant(x.into());
    let (r, params) = model.network.forward_tape(tape, xv)?;
    let r_dist = tape.pairwise_euclidean(r)?;
    let r_c = tape.u_center(r_dist)?;

    let dcov_norm = 1.0 / (n as f64 * (n - 3) as f64);
    let ry = tape.mul(r_c, y_c)?;
    let ry = tape.sum(ry)?;
    let dcov_ry = tape.scale_add(&[(dcov_norm, ry)])?;
    let ra = tape.mul(r_c, a_c)?;
    let ra = tape.sum(ra)?;
    let dcov_ra = tape.scale_add(&[(dcov_norm, ra)])?;

    // sum_{i<j} |r_i - g_j| + |r_j - g_i| is the off-diagonal sum of the cross matrix;
    // the within-sample sums over i<j are half the full symmetric sums.
    let cross = tape.cross_euclidean(r, gamma)?;
    let cross = tape.mul(cross, off_diag)?;
    let cross = tape.sum(cross)?;
    let r_self = tape.sum(r_dist)?;
    let pairs = (n * (n - 1) / 2) as f64;
    let energy = tape.scale_add(&[(1.0 / pairs, cross), (-0.5 / pairs, r_self), (-0.5 / pairs, gamma_self)])?;

    let loss = tape.scale_add(&[(-alpha, dcov_ry), (1.0 - alpha, dcov_ra), (lambda, energy)])?;
    Ok(LossTerms {
        loss,
        dcov_ry,
        dcov_ra,
        energy,
        params,
    })
}

/// Objective value from the non-differentiable estimators.
pub fn fsrl_loss_value(
    r: &SampleMatrix,
    y: &SampleMatrix,
    a: &SampleMatrix,
    gaussian_ref: &SampleMatrix,
    alpha: f64,
    lambda: f64,
) -> Result<f64> {
    let rep = dependence::dependence_report(r, y, a, gaussian_ref)?;
    Ok(-alpha * rep.dcov_ry + (1.0 - alpha) * rep.dcov_ra + lambda * rep.energy_gauss)
}

/// Per-epoch mean training loss and validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LossTrace {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedRepresentation {
    pub model: RepresentationModel,
    pub trace: LossTrace,
    /// Epoch whose weights were returned.
    pub selected_epoch: usize,
}

/// Contiguous batches of `size` over `order`, dropping a remnant below [`MIN_BATCH`].
fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size).filter(|c| c.len() >= MIN_BATCH)
}

pub fn config_hash(mlp: &MlpConfig, cfg: &TrainingConfig) -> String {
    let json = serde_json::to_vec(&(mlp, cfg)).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// Validation loss averaged over in-order chunks of the validation set.
fn validation_loss(
    model: &RepresentationModel,
    x: &SampleMatrix,
    y: &SampleMatrix,
    a: &SampleMatrix,
    gamma: &SampleMatrix,
    cfg: &TrainingConfig,
) -> Result<f64> {
    let n = x.rows();
    let size = cfg.batch_size.min(n);
    let order: Vec<usize> = (0..n).collect();
    let r = encode(model, x)?;
    let mut total = 0.0;
    let mut count = 0;
    for chunk in order.chunks(size).filter(|c| c.len() >= 4) {
        let g: Vec<usize> = (0..chunk.len()).collect();
        total += fsrl_loss_value(
            &r.select_rows(chunk),
            &y.select_rows(chunk),
            &a.select_rows(chunk),
            &gamma.select_rows(&g),
            cfg.alpha,
            cfg.lambda,
        )?;
        count += 1;
    }
    Ok(total / count as f64)
}

/// Minibatch Adam on the FSRL objective.
///
/// Each epoch shuffles the training rows with the run seed, partitions them
/// into `batch_size` chunks (a final chunk under 8 rows is dropped) and takes
/// one step per chunk at the decayed learning rate for that epoch.
pub fn train_representation(
    init: &RepresentationModel,
    train: &SampleBatch,
    val: &SampleBatch,
    cfg: &TrainingConfig,
) -> Result<TrainedRepresentation> {
    cfg.check()?;
    if train.len() < MIN_BATCH {
        return Err(Error::TooFewSamples {
            what: "training set",
            min: MIN_BATCH,
            got: train.len(),
        });
    }
    if val.len() < 4 {
        return Err(Error::TooFewSamples {
            what: "validation set",
            min: 4,
            got: val.len(),
        });
    }
    for b in [train, val] {
        if b.dim() != init.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "train_representation",
                left: vec![b.len(), b.dim()],
                right: vec![init.input_dim(), init.output_dim()],
            });
        }
    }
    let d = init.output_dim();
    let (ty, ta) = (train.y.to_matrix(), train.a.to_matrix());
    let (vy, va) = (val.y.to_matrix(), val.a.to_matrix());

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(0);
    let mut gauss_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    gauss_rng.set_stream(1);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(2);

    let max_batch = cfg.batch_size.min(train.len());
    let frozen_gamma = (!cfg.gaussian_resample).then(|| gaussian_sample(max_batch, d, &mut gauss_rng));
    let val_gamma = gaussian_sample(cfg.batch_size.min(val.len()), d, &mut val_rng);

    let mut model = init.clone();
    let mut adam = {
        let refs: Vec<_> = model.network.params.iter().collect();
        AdamState::new(cfg.optimizer.clone(), &refs)
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = LossTrace::default();
    let mut best: Option<(f64, usize, RepresentationModel)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (b, idx) in batches(&order, cfg.batch_size).enumerate() {
            let m = idx.len();
            let gamma = match &frozen_gamma {
                Some(g) => g.select_rows(&(0..m).collect::<Vec<_>>()),
                None => gaussian_sample(m, d, &mut gauss_rng),
            };
            let mut tape = Tape::new();
            let terms = fsrl_loss(
                &mut tape,
                &model,
                &train.x.select_rows(idx),
                &ty.select_rows(idx),
                &ta.select_rows(idx),
                &gamma,
                cfg.alpha,
                cfg.lambda,
            )
            .map_err(|e| match e {
                Error::NonFiniteForward { .. } => Error::NonFiniteLoss { epoch, batch: b },
                other => other,
            })?;
            let loss = tape.value(terms.loss).item();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let grads = tape.backward(terms.loss)?;
            let gs: Vec<Tensor> = terms.params.iter().map(|&v| grads.get(v)).collect();
            let mut refs: Vec<_> = model.network.params.iter_mut().collect();
            adam.step(&mut refs, &gs, epoch)?;
            epoch_loss += loss;
            steps += 1;
        }
        trace.train.push(epoch_loss / steps.max(1) as f64);
        let vl = validation_loss(&model, &val.x, &vy, &va, &val_gamma, cfg)?;
        trace.val.push(vl);
        if cfg.keep_best_validation && best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
            best = Some((vl, epoch, model.clone()));
        }
    }

    let hash = config_hash(&init.network.config, cfg);
    let (mut model, selected_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, cfg.epochs - 1),
    };
    model.provenance = Provenance {
        config_hash: hash,
        final_epoch: selected_epoch,
    };
    Ok(TrainedRepresentation {
        model,
        trace,
        selected_epoch,
    })
}
