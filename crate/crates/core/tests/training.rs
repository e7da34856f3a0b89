use std::collections::HashSet;

use nbr_gcn::experiment::*;
use nbr_gcn::grid::{CellId, CellRecord, FeatureTable, GridSpec, Label};
use nbr_gcn::models::{AnyModel, GcnClassifier, MlpBaseline, MlpVariant};
use nbr_gcn::seeds::stream_rng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two zones split at column 10; favela rows come in stripes of three and
/// the first feature separates the classes with a clear margin.
fn separable_table(seed: u64) -> FeatureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GridSpec::with_shape(12, 20).unwrap();
    let records = (0..12).flat_map(|r| (0..20).map(move |c| (r, c))).map(|(row, col)| {
        let favela = (row / 3) % 2 == 0;
        let mut features: [f64; 9] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        features[0] = if favela { rng.gen_range(0.5..2.0) } else { rng.gen_range(-2.0..-0.5) };
        CellRecord {
            row,
            col,
            features,
            label: Some(if favela { Label::Favela } else { Label::NonFavela }),
            zone: Some(if col < 10 { 1 } else { 2 }),
        }
    });
    FeatureTable::from_records(grid, records).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, seed: 5, ..TrainConfig::default() }
}

#[test]
fn separable_subset_is_learned_by_every_model() {
    let table = separable_table(1);
    let split = SplitSpec::holdout(2, &[1, 2]).unwrap();
    for kind in ModelKind::ALL {
        let m = train_model(kind, &table, &split, &config(60)).unwrap();
        assert_eq!(m.loss_trace.len(), 60);
        assert!(m.loss_trace[59] < m.loss_trace[0], "{kind}: {:?}", m.loss_trace);
        let acc = m.train_accuracy(&table).unwrap();
        assert!(acc >= 0.95, "{kind}: accuracy {acc}");
    }
}

#[test]
fn training_is_bit_reproducible() {
    let table = separable_table(2);
    let split = SplitSpec::holdout(1, &[1, 2]).unwrap();
    for kind in ModelKind::ALL {
        let a = train_model(kind, &table, &split, &config(5)).unwrap();
        let b = train_model(kind, &table, &split, &config(5)).unwrap();
        let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.loss_trace), bits(&b.loss_trace));
        assert_eq!(a.model, b.model);
    }
}

#[test]
fn zero_epochs_return_the_initialization() {
    let table = separable_table(3);
    let split = SplitSpec::holdout(1, &[1, 2]).unwrap();
    let cfg = config(0);
    let init = |kind: ModelKind| {
        let mut rng = stream_rng(cfg.seed, "init", &[]);
        match kind {
            ModelKind::Gcn => AnyModel::Gcn(GcnClassifier::new(&mut rng)),
            ModelKind::MlpLocal => AnyModel::Mlp(MlpBaseline::new(MlpVariant::Local, &mut rng)),
            ModelKind::MlpNeighbors => AnyModel::Mlp(MlpBaseline::new(MlpVariant::Neighbors, &mut rng)),
        }
    };
    for kind in ModelKind::ALL {
        let m = train_model(kind, &table, &split, &cfg).unwrap();
        assert!(m.loss_trace.is_empty());
        assert_eq!(m.model, init(kind));
    }
}

fn balanced_zone_table(n: usize) -> FeatureTable {
    let grid = GridSpec::with_shape(2, 2 * n).unwrap();
    let records = (0..2 * n).flat_map(|c| {
        (0..2).map(move |r| CellRecord {
            row: r,
            col: c,
            features: [if r == 0 { 1.0 } else { -1.0 }; 9],
            label: Some(if r == 0 { Label::Favela } else { Label::NonFavela }),
            zone: Some(if c < n { 1 } else { 2 }),
        })
    });
    FeatureTable::from_records(grid, records).unwrap()
}

/// A local MLP whose favela logit is `gain * x0` and whose other logit is
/// `-gain * x0`, plus a favela-side bias.
fn hand_model(gain: f64, bias: f64) -> TrainedModel {
    let mut m = MlpBaseline::<f64>::zeros(MlpVariant::Local);
    m.hidden.weight.set(0, 0, 1.0);
    m.hidden.weight.set(0, 1, -1.0);
    m.head.weight.set(0, 1, gain);
    m.head.weight.set(1, 0, gain);
    m.head.bias[1] = bias;
    TrainedModel {
        kind: ModelKind::MlpLocal,
        model: AnyModel::Mlp(m),
        standardizer: Standardizer::identity(),
        loss_trace: vec![],
        train_cells: vec![],
    }
}

#[test]
fn evaluation_of_perfect_and_constant_predictors() {
    let table = balanced_zone_table(20);
    let split = SplitSpec::holdout(2, &[1, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let perfect = evaluate(&hand_model(1.0, 0.0), &table, &split, &mut rng, false).unwrap();
    assert_eq!(perfect.confusion, ConfusionMatrix::new(20, 0, 0, 20));
    let constant = evaluate(&hand_model(0.0, 1.0), &table, &split, &mut rng, false).unwrap();
    assert_eq!(constant.confusion, ConfusionMatrix::new(20, 20, 0, 0));
    assert_eq!(compute_metrics(&constant.confusion).unwrap().kappa, 0.0);
}

#[test]
fn evaluation_reproduces_with_same_sampling_seed() {
    let table = separable_table(4);
    let split = SplitSpec::holdout(2, &[1, 2]).unwrap();
    let m = train_model(ModelKind::MlpNeighbors, &table, &split, &config(3)).unwrap();
    let run = || evaluate(&m, &table, &split, &mut stream_rng(9, "balance-test", &[]), false).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let p = a.confusion.tp + a.confusion.fn_;
    assert_eq!(p, a.confusion.fp + a.confusion.tn, "test set is balanced");
}

#[test]
fn two_zones_one_repetition() {
    let table = separable_table(5);
    let opts = CrossvalOptions { repetitions: 1, ..Default::default() };
    let report = spatial_crossval(&table, &[2, 1], ModelKind::Gcn, &config(20), &opts).unwrap();
    assert_eq!(report.kappas().len(), 2);
    assert!(report.failures.is_empty());
    let means: Vec<f64> = report.per_zone.iter().map(|z| z.summary.kappa.mean).collect();
    assert_eq!(report.global.kappa, MeanStd::of(&means));
    for f in &report.folds {
        let train: HashSet<&CellId> = f.train_cells.iter().collect();
        assert!(f.test_cells.iter().all(|c| !train.contains(c)));
        assert_eq!(f.leaked, 0);
        assert_eq!(2 * f.train_positive, f.n_train);
        assert_eq!(2 * f.test_positive, f.n_test);
        assert!(f.foreign_neighbors > 0, "border cells see the other zone");
    }
    let csv = report.csv_string();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.lines().next().unwrap(), "zone,repetition,model,precision,recall,f1,kappa");
}

#[test]
fn report_is_independent_of_job_count() {
    let table = separable_table(6);
    let run = |jobs| {
        let opts = CrossvalOptions { repetitions: 2, jobs, ..Default::default() };
        spatial_crossval(&table, &[1, 2], ModelKind::MlpNeighbors, &config(5), &opts).unwrap().csv_string()
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn single_class_zone_fails_alone() {
    let mut table = separable_table(7);
    // Zone 3: two non-favela cells only.
    let grid = *table.grid();
    let mut records: Vec<CellRecord> = table.iter().cloned().collect();
    for r in records.iter_mut().filter(|r| r.col >= 18) {
        r.zone = Some(3);
        r.label = Some(Label::NonFavela);
    }
    table = FeatureTable::from_records(grid, records).unwrap();
    let opts = CrossvalOptions { repetitions: 1, ..Default::default() };
    let report = spatial_crossval(&table, &[1, 2, 3], ModelKind::MlpLocal, &config(3), &opts).unwrap();
    assert_eq!(report.folds.len(), 2);
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].zone, 3);
}

#[test]
fn natural_prevalence_keeps_every_test_cell() {
    let table = separable_table(8);
    let opts = CrossvalOptions { repetitions: 1, natural_prevalence: true, ..Default::default() };
    let report = spatial_crossval(&table, &[1, 2], ModelKind::MlpLocal, &config(3), &opts).unwrap();
    for f in &report.folds {
        assert_eq!(f.n_test, 120);
    }
}
