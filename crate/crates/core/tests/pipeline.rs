use std::fmt::Write as _;

use nalgebra::DMatrix;

use fsrl::datagen::{gen_example, gen_example_dep, Dependence, Kind};
use fsrl::dataio::{
    category_counts, export_csv, export_schema, load_csv, split, split_indices, DatasetSchema, FeatureEncoding,
    FeatureKind, FeatureSpec, Preprocessor, Table,
};
use fsrl::downstream::{predict, train_classifier, ClassifierConfig, ClassifierModel};
use fsrl::experiment::{run_cell, Mode, RunConfig, Splits, Trained, DEFAULT_DEPENDENCE_ROWS};
use fsrl::mlp::MlpConfig;
use fsrl::representation::{train_representation, RepresentationModel, TrainingConfig};

fn quick_training(alpha: f64, epochs: usize) -> TrainingConfig {
    TrainingConfig {
        alpha,
        epochs,
        ..TrainingConfig::default()
    }
}

fn desk(dep: Dependence, seed: u64) -> Splits {
    let b = gen_example(dep, Kind::Nonlinear, 5000, seed).unwrap();
    let (train, val, test) = split(&b, (0.8, 0.1, 0.1), seed).unwrap();
    Splits { train, val, test }
}

#[test]
fn classifier_training_leaves_representation_untouched() {
    let b = gen_example_dep(Kind::Nonlinear, 400, 1).unwrap();
    let (train, val, _) = split(&b, (0.8, 0.1, 0.1), 1).unwrap();
    let init = RepresentationModel::build(MlpConfig::new(50, vec![32], 8, 1)).unwrap();
    let rep = train_representation(&init, &train, &val, &quick_training(0.5, 2))
        .unwrap()
        .model;
    let before = rep.clone();
    let _ = train_classifier(&rep, &train, &ClassifierConfig::default()).unwrap();
    assert_eq!(rep, before);
}

#[test]
fn predictions_invariant_to_absorbed_rotation() {
    let b = gen_example_dep(Kind::Nonlinear, 300, 2).unwrap();
    let (train, val, test) = split(&b, (0.8, 0.1, 0.1), 2).unwrap();
    let init = RepresentationModel::build(MlpConfig::new(50, vec![32], 4, 2)).unwrap();
    let rep = train_representation(&init, &train, &val, &quick_training(0.5, 2))
        .unwrap()
        .model;
    let cfg = ClassifierConfig {
        standardize: false,
        epochs: 5,
        ..ClassifierConfig::default()
    };
    let clf = train_classifier(&rep, &train, &cfg).unwrap();

    // Rotation of representation space: r -> r M, head weights V -> M^T V.
    let m = DMatrix::from_fn(4, 4, |i, j| ((i * 4 + j) as f64).sin()).qr().q();
    let rotate = |values: &[f64], rows: usize| -> Vec<f64> {
        let out = DMatrix::from_row_slice(rows, 4, values) * &m;
        (0..rows)
            .flat_map(|i| out.row(i).iter().copied().collect::<Vec<_>>())
            .collect()
    };
    let mut rep2 = rep.clone();
    let last = rep2.network.params.len() - 2;
    let h = rep2.network.params[last].shape[0];
    rep2.network.params[last].values = rotate(&rep.network.params[last].values, h);
    rep2.network.params[last + 1].values = rotate(&rep.network.params[last + 1].values, 1);
    let mut clf2: ClassifierModel = clf.clone();
    let k = clf2.num_classes;
    let w = &clf.head.params[0];
    assert_eq!(w.shape, vec![4, k]);
    let vm = DMatrix::from_row_slice(4, k, &w.values);
    let rotated = m.transpose() * vm;
    clf2.head.params[0].values = (0..4)
        .flat_map(|i| rotated.row(i).iter().copied().collect::<Vec<_>>())
        .collect();

    let p1 = predict(&clf, &rep, &test.x).unwrap();
    let p2 = predict(&clf2, &rep2, &test.x).unwrap();
    assert_eq!(p1.labels, p2.labels);
    for (a, b) in p1.probs.as_slice().iter().zip(p2.probs.as_slice()) {
        assert!((a - b).abs() < 1e-10);
    }
}

/// Six numeric columns and seven categorical ones whose category counts
/// (including `?`) sum to 100.
fn adult_like(dir: &std::path::Path, rows: usize) -> std::path::PathBuf {
    let cats = [
        ("workclass", 9),
        ("education", 16),
        ("marital", 7),
        ("occupation", 15),
        ("relationship", 6),
        ("race", 5),
        ("country", 42),
    ];
    let numeric = ["age", "fnlwgt", "edu_num", "gain", "loss", "hours"];
    let mut s = String::new();
    let header: Vec<&str> = numeric
        .iter()
        .copied()
        .chain(cats.iter().map(|c| c.0))
        .chain(["sex", "income"])
        .collect();
    writeln!(s, "# synthetic census-style fixture").unwrap();
    writeln!(s, "{}", header.join(",")).unwrap();
    for r in 0..rows {
        let mut cells: Vec<String> = (0..numeric.len())
            .map(|j| format!("{}", (r * 7 + j * 13) % 50 + 17))
            .collect();
        for (j, (name, k)) in cats.iter().enumerate() {
            let c = (r + j) % k;
            cells.push(if c == k - 1 {
                "?".to_string()
            } else {
                format!("{name}_{c}")
            });
        }
        cells.push(if r % 3 == 0 { "Female" } else { "Male" }.into());
        cells.push(if r % 4 == 0 { ">50K" } else { "<=50K" }.into());
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    let p = dir.join("adult.csv");
    std::fs::write(&p, s).unwrap();
    p
}

fn adult_schema() -> DatasetSchema {
    let numeric = ["age", "fnlwgt", "edu_num", "gain", "loss", "hours"];
    let cats = [
        "workclass",
        "education",
        "marital",
        "occupation",
        "relationship",
        "race",
        "country",
    ];
    let mut schema = DatasetSchema::new("income", "sex");
    schema.features = Some(
        numeric
            .iter()
            .map(|n| FeatureSpec {
                name: n.to_string(),
                kind: FeatureKind::Numeric,
            })
            .chain(cats.iter().map(|n| FeatureSpec {
                name: n.to_string(),
                kind: FeatureKind::Categorical,
            }))
            .collect(),
    );
    schema
}

#[test]
fn census_style_fixture_encodes_to_106_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = adult_like(dir.path(), 200);
    let loaded = load_csv(&path, &adult_schema()).unwrap();
    assert_eq!(loaded.batch.dim(), 106);
    assert_eq!(loaded.batch.len(), 200);
    assert_eq!(loaded.dropped, 0);
    assert_eq!(category_counts(&loaded.preprocessor)["country"], 42);
    assert_eq!(loaded.batch.a.num_classes(), Some(2));
    // Every one-hot block decodes back to the raw cell.
    let table = Table::read(&path).unwrap();
    let col = table.header.iter().position(|h| h == "occupation").unwrap();
    let (start, width) = {
        let mut off = 0;
        let mut found = None;
        for (f, enc) in loaded.preprocessor.features.iter().enumerate() {
            if enc.name() == "occupation" {
                found = Some((f, off, enc.width()));
            }
            off += enc.width();
        }
        let (f, off, w) = found.unwrap();
        assert_eq!(f, 9);
        (off, w)
    };
    for i in 0..table.len() {
        let block = &loaded.batch.x.row(i)[start..start + width];
        assert_eq!(
            loaded.preprocessor.decode_category(9, block),
            Some(table.rows[i][col].as_str())
        );
    }
}

#[test]
fn standardization_uses_training_rows_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = adult_like(dir.path(), 300);
    let table = Table::read(&path).unwrap();
    let parts = split_indices(table.len(), &[0.8, 0.1, 0.1], 9).unwrap();
    let (train, test) = (table.select(&parts[0]), table.select(&parts[2]));
    let pre = Preprocessor::fit(&train, &adult_schema()).unwrap();
    let FeatureEncoding::Numeric { mean, sd, .. } = pre.features[0].clone() else {
        panic!("first feature is numeric");
    };
    let ages: Vec<f64> = train.rows.iter().map(|r| r[0].parse().unwrap()).collect();
    let m = ages.iter().sum::<f64>() / ages.len() as f64;
    assert_eq!(mean, m);
    let enc = pre.transform(&test).unwrap();
    for (i, row) in test.rows.iter().enumerate() {
        let raw: f64 = row[0].parse().unwrap();
        assert_eq!(enc.batch.x.get(i, 0), (raw - mean) / sd);
    }
}

#[test]
fn exported_batches_reload_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let b = gen_example_dep(Kind::Nonlinear, 120, 4).unwrap();
    let path = dir.path().join("sim.csv");
    export_csv(&b, &path).unwrap();
    let schema = export_schema(&b);
    schema.save(dir.path().join("schema.json")).unwrap();
    let schema = DatasetSchema::load(dir.path().join("schema.json")).unwrap();
    let loaded = load_csv(&path, &schema).unwrap();
    assert_eq!(loaded.batch.x, b.x);
    assert_eq!(loaded.batch.y.class_ids(), b.y.class_ids());
    assert_eq!(loaded.batch.a.class_ids(), b.a.class_ids());
    let first = std::fs::read_to_string(&path).unwrap();
    assert!(first.starts_with("# generator="));
}

#[test]
fn unfair_baseline_is_at_least_as_accurate_as_strongly_fair_fsrl() {
    let s = desk(Dependence::Dependent, 21);
    let cfg = RunConfig {
        mode: Mode::Fsrl,
        mlp: MlpConfig::new(50, vec![32], 8, 21),
        training: TrainingConfig {
            seed: 21,
            ..quick_training(0.1, 100)
        },
        classifier: ClassifierConfig::default(),
        dependence_rows: DEFAULT_DEPENDENCE_ROWS,
    };
    let fair = run_cell(&cfg, &s).unwrap().metrics;
    let dnn = run_cell(
        &RunConfig {
            mode: Mode::DnnBaseline,
            ..cfg.clone()
        },
        &s,
    )
    .unwrap()
    .metrics;
    assert!(
        dnn.error_rate <= fair.error_rate,
        "dnn {} fsrl {}",
        dnn.error_rate,
        fair.error_rate
    );
    assert!(
        dnn.delta_dp > fair.delta_dp,
        "dnn {} fsrl {}",
        dnn.delta_dp,
        fair.delta_dp
    );
}

#[test]
fn independent_attribute_is_scrubbed_from_representation() {
    let s = desk(Dependence::Independent, 22);
    let cfg = RunConfig {
        mode: Mode::Fsrl,
        mlp: MlpConfig::new(50, vec![32], 8, 22),
        training: TrainingConfig {
            seed: 22,
            ..quick_training(0.5, 100)
        },
        classifier: ClassifierConfig::default(),
        dependence_rows: DEFAULT_DEPENDENCE_ROWS,
    };
    let out = run_cell(&cfg, &s).unwrap();
    let m = out.metrics;
    assert!(m.dcov_ry > 0.0);
    assert!(m.dcov_ra.abs() < 0.05 * m.dcov_ry, "ra {} ry {}", m.dcov_ra, m.dcov_ry);
    let Trained::Fsrl { representation, .. } = &out.trained else {
        panic!("fsrl mode");
    };
    assert_eq!(representation.provenance.final_epoch, 99);
}
