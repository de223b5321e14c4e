//! Single runs (representation then classifier) and alpha sweeps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{Column, SampleBatch};
use crate::dependence::{dependence_report, DependenceReport};
use crate::downstream::{
    predict, train_classifier_on_features, train_dnn_baseline, ClassifierConfig, ClassifierModel, DnnBaseline,
    Prediction,
};
use crate::error::{Error, Result};
use crate::metrics::{demographic_parity_gap, error_rate, gap_rms, GroupedPredictions};
use crate::mlp::MlpConfig;
use crate::par::{self, Execution};
use crate::representation::{
    encode, gaussian_sample, train_representation, LossTrace, RepresentationModel, TrainingConfig,
};

/// Rows of the evaluation set used for the O(n^2) dependence diagnostics.
pub const DEFAULT_DEPENDENCE_ROWS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Fsrl,
    DnnBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub mlp: MlpConfig,
    pub training: TrainingConfig,
    pub classifier: ClassifierConfig,
    pub dependence_rows: usize,
}

impl RunConfig {
    /// Every validation problem across the three configs.
    pub fn check(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.mlp.validate(&mut errors);
        if let Err(Error::InvalidConfig(e)) = self.training.check() {
            errors.extend(e);
        }
        self.classifier.validate(&mut errors);
        if self.dependence_rows < 4 {
            errors.push("dependence_rows must be at least 4".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errors))
        }
    }

    /// The same configuration with every seed set to `seed` and weight `alpha`.
    pub fn for_cell(&self, alpha: f64, seed: u64) -> Self {
        let mut c = self.clone();
        c.training.alpha = alpha;
        c.training.seed = seed;
        c.mlp.init_seed = seed;
        c.classifier.seed = seed;
        c
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: SampleBatch,
    pub val: SampleBatch,
    pub test: SampleBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accuracy: f64,
    pub error_rate: f64,
    pub delta_dp: f64,
    /// Only for a binary sensitive attribute with every class in both groups.
    pub gap: Option<f64>,
    pub dcov_ry: f64,
    pub dcov_ra: f64,
    pub energy_gauss: f64,
    pub dependence_n: usize,
}

/// Trained models of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Trained {
    Fsrl {
        representation: RepresentationModel,
        classifier: ClassifierModel,
    },
    DnnBaseline(DnnBaseline),
}

impl Trained {
    pub fn representation(&self) -> &RepresentationModel {
        match self {
            Trained::Fsrl { representation, .. } => representation,
            Trained::DnnBaseline(b) => &b.representation,
        }
    }

    pub fn predict(&self, data: &SampleBatch) -> Result<Prediction> {
        match self {
            Trained::Fsrl {
                representation,
                classifier,
            } => predict(classifier, representation, &data.x),
            Trained::DnnBaseline(b) => b.predict(&data.x),
        }
    }

    /// Metrics of these models on `data`; `seed` fixes the Gaussian
    /// reference sample of the energy diagnostic.
    pub fn evaluate(&self, data: &SampleBatch, dependence_rows: usize, seed: u64) -> Result<RunMetrics> {
        evaluate(self, data, dependence_rows, seed)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trained: Trained,
    pub metrics: RunMetrics,
    /// Representation losses per epoch (FSRL mode only).
    pub representation_trace: Option<LossTrace>,
    pub classifier_trace: Vec<f64>,
}

fn class_ids<'a>(c: &'a Column, what: &str) -> Result<&'a [usize]> {
    c.class_ids()
        .ok_or_else(|| Error::invalid(format!("{what} must be categorical for classification metrics")))
}

fn evaluate(trained: &Trained, data: &SampleBatch, dependence_rows: usize, seed: u64) -> Result<RunMetrics> {
    let y = class_ids(&data.y, "target")?;
    let a = class_ids(&data.a, "sensitive attribute")?;
    let pred = trained.predict(data)?;
    let err = error_rate(y, &pred.labels)?;
    let gp = GroupedPredictions::new(y.to_vec(), pred.labels.clone(), a.to_vec())?;
    let delta_dp = demographic_parity_gap(&gp)?;
    let gap = gap_rms(&gp).ok();

    let m = data.len().min(dependence_rows);
    let sub = data.select(&(0..m).collect::<Vec<_>>());
    let r = encode(trained.representation(), &sub.x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let g = gaussian_sample(m, r.cols(), &mut rng);
    let DependenceReport {
        dcov_ry,
        dcov_ra,
        energy_gauss,
        n,
    } = dependence_report(&r, &sub.y.to_matrix(), &sub.a.to_matrix(), &g)?;
    Ok(RunMetrics {
        accuracy: 1.0 - err,
        error_rate: err,
        delta_dp,
        gap,
        dcov_ry,
        dcov_ra,
        energy_gauss,
        dependence_n: n,
    })
}

/// Trains both steps on `splits.train` (validation on `splits.val`) and
/// evaluates on `splits.test`.
pub fn run_cell(cfg: &RunConfig, splits: &Splits) -> Result<RunOutput> {
    cfg.check()?;
    let (trained, representation_trace, classifier_trace) = match cfg.mode {
        Mode::Fsrl => {
            let init = RepresentationModel::build(cfg.mlp.clone())?;
            let rep = train_representation(&init, &splits.train, &splits.val, &cfg.training)?;
            let features = encode(&rep.model, &splits.train.x)?;
            let (classifier, ctrace) = train_classifier_on_features(&features, &splits.train.y, &cfg.classifier)?;
            (
                Trained::Fsrl {
                    representation: rep.model,
                    classifier,
                },
                Some(rep.trace),
                ctrace,
            )
        }
        Mode::DnnBaseline => {
            let (b, ctrace) = train_dnn_baseline(&cfg.mlp, &splits.train, &cfg.classifier)?;
            (Trained::DnnBaseline(b), None, ctrace)
        }
    };
    let metrics = evaluate(&trained, &splits.test, cfg.dependence_rows, cfg.training.seed)?;
    Ok(RunOutput {
        trained,
        metrics,
        representation_trace,
        classifier_trace,
    })
}

/// One (alpha, seed) cell of a sweep; failures are kept as messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub alpha: f64,
    pub seed: u64,
    pub metrics: std::result::Result<RunMetrics, String>,
}

/// The alpha grid 0.1, 0.15, ..., 1.0.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..19).map(|k| (10 + 5 * k) as f64 / 100.0).collect()
}

/// Runs every (alpha, seed) cell on fixed data. Cells are independent and
/// returned in alpha-major order regardless of scheduling.
pub fn sweep(base: &RunConfig, splits: &Splits, alphas: &[f64], seeds: &[u64], exec: Execution) -> Vec<CellResult> {
    sweep_with(alphas, seeds, exec, |alpha, seed| {
        run_cell(&base.for_cell(alpha, seed), splits).map(|o| o.metrics)
    })
}

/// [`sweep`] with a caller-supplied cell runner, for data that varies by seed.
pub fn sweep_with<F>(alphas: &[f64], seeds: &[u64], exec: Execution, run: F) -> Vec<CellResult>
where
    F: Fn(f64, u64) -> Result<RunMetrics> + Sync + Send,
{
    let cells: Vec<(f64, u64)> = alphas
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    par::map_range(exec, cells.len(), |i| {
        let (alpha, seed) = cells[i];
        CellResult {
            alpha,
            seed,
            metrics: run(alpha, seed).map_err(|e| e.to_string()),
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two values.
    pub sd: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Self { mean, sd, count: n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub alpha: f64,
    pub succeeded: usize,
    pub failed: usize,
    pub accuracy: Option<Summary>,
    pub error_rate: Option<Summary>,
    pub delta_dp: Option<Summary>,
    pub gap: Option<Summary>,
    pub dcov_ry: Option<Summary>,
    pub dcov_ra: Option<Summary>,
    pub energy_gauss: Option<Summary>,
}

/// Per-alpha mean and sd over the successful cells, in first-seen alpha order.
pub fn aggregate(cells: &[CellResult]) -> Vec<AlphaSummary> {
    let mut alphas: Vec<f64> = Vec::new();
    for c in cells {
        if !alphas.contains(&c.alpha) {
            alphas.push(c.alpha);
        }
    }
    alphas
        .into_iter()
        .map(|alpha| {
            let ok: Vec<&RunMetrics> = cells
                .iter()
                .filter(|c| c.alpha == alpha)
                .filter_map(|c| c.metrics.as_ref().ok())
                .collect();
            let failed = cells.iter().filter(|c| c.alpha == alpha && c.metrics.is_err()).count();
            let col = |f: fn(&RunMetrics) -> f64| Summary::of(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
            AlphaSummary {
                alpha,
                succeeded: ok.len(),
                failed,
                accuracy: col(|m| m.accuracy),
                error_rate: col(|m| m.error_rate),
                delta_dp: col(|m| m.delta_dp),
                gap: Summary::of(&ok.iter().filter_map(|m| m.gap).collect::<Vec<_>>()),
                dcov_ry: col(|m| m.dcov_ry),
                dcov_ra: col(|m| m.dcov_ra),
                energy_gauss: col(|m| m.energy_gauss),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;
    use crate::datagen::{gen_example_dep, Kind};
    use crate::dataio::split;

    fn small_cfg() -> RunConfig {
        RunConfig {
            mode: Mode::Fsrl,
            mlp: MlpConfig::new(50, vec![], 4, 1),
            training: TrainingConfig {
                alpha: 0.5,
                lambda: 0.001,
                batch_size: 64,
                epochs: 2,
                optimizer: AdamConfig::default(),
                seed: 1,
                gaussian_resample: true,
                keep_best_validation: false,
            },
            classifier: ClassifierConfig {
                epochs: 3,
                ..ClassifierConfig::default()
            },
            dependence_rows: DEFAULT_DEPENDENCE_ROWS,
        }
    }

    fn splits() -> Splits {
        let b = gen_example_dep(Kind::Nonlinear, 300, 5).unwrap();
        let (train, val, test) = split(&b, (0.8, 0.1, 0.1), 5).unwrap();
        Splits { train, val, test }
    }

    #[test]
    fn grid_has_nineteen_values() {
        let g = default_alpha_grid();
        assert_eq!(g.len(), 19);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[18], 1.0);
        assert!((g[1] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn summary_against_hand_values() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[7.0]).unwrap().sd, 0.0);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn run_is_reproducible_and_finite() {
        let s = splits();
        let a = run_cell(&small_cfg(), &s).unwrap();
        let b = run_cell(&small_cfg(), &s).unwrap();
        assert_eq!(a.metrics, b.metrics);
        let m = a.metrics;
        for v in [m.accuracy, m.delta_dp, m.dcov_ry, m.dcov_ra, m.energy_gauss] {
            assert!(v.is_finite());
        }
        assert_eq!(m.dependence_n, s.test.len());
        let again = a.trained.evaluate(&s.test, DEFAULT_DEPENDENCE_ROWS, 1).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn config_errors_collected_before_compute() {
        let mut cfg = small_cfg();
        cfg.mlp.output_dim = 0;
        cfg.training.alpha = 2.0;
        cfg.classifier.epochs = 0;
        match run_cell(&cfg, &splits()) {
            Err(Error::InvalidConfig(e)) => assert!(e.len() >= 3, "{e:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_records_failures_and_orders_cells() {
        let s = splits();
        let cells = sweep_with(&[0.5, 1.0], &[1, 2], Execution::available(), |alpha, seed| {
            if seed == 2 && alpha == 1.0 {
                Err(Error::invalid("boom"))
            } else {
                run_cell(&small_cfg().for_cell(alpha, seed), &s).map(|o| o.metrics)
            }
        });
        let keys: Vec<(f64, u64)> = cells.iter().map(|c| (c.alpha, c.seed)).collect();
        assert_eq!(keys, vec![(0.5, 1), (0.5, 2), (1.0, 1), (1.0, 2)]);
        let agg = aggregate(&cells);
        assert_eq!(agg[1].succeeded, 1);
        assert_eq!(agg[1].failed, 1);
        let accs: Vec<f64> = cells[..2]
            .iter()
            .map(|c| c.metrics.as_ref().unwrap().accuracy)
            .collect();
        assert_eq!(agg[0].accuracy.unwrap().mean, (accs[0] + accs[1]) / 2.0);
    }

    #[test]
    fn sequential_and_parallel_sweeps_agree() {
        let s = splits();
        let a = sweep(&small_cfg(), &s, &[0.3, 0.9], &[4], Execution::Sequential);
        let b = sweep(&small_cfg(), &s, &[0.3, 0.9], &[4], Execution::Parallel);
        assert_eq!(a, b);
    }
}
