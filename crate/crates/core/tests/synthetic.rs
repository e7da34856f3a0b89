use nbr_gcn::experiment::{spatial_crossval, CrossvalOptions, ModelKind, TrainConfig};
use nbr_gcn::grid::{class_counts, GridSpec};
use nbr_gcn::synthetic::*;

#[test]
fn default_city_hits_imbalance_target() {
    let city = generate_city_with_truth(&SynthConfig::default()).unwrap();
    let s = city.summary();
    let (fav, non, unlabeled) = class_counts(&city.table);
    assert_eq!(unlabeled, 0);
    assert_eq!((s.n_favela, s.n_nonfavela), (fav, non));
    assert_eq!(s.n_cells, 36_000);
    let ratio = non as f64 / fav as f64;
    assert_eq!(s.achieved_ratio, ratio);
    assert!((25.0..=35.0).contains(&ratio), "{ratio}");
    assert_eq!(*city.table.grid(), GridSpec::with_shape(200, 200).unwrap());
}

#[test]
fn favela_cells_cluster() {
    // The 3x3-mean labeling rule leaves few isolated favela cells.
    let city = generate_city_with_truth(&SynthConfig::default()).unwrap();
    let t = &city.table;
    let mut with_favela_neighbor = 0;
    let mut n = 0;
    for rec in t.iter().filter(|r| r.label.is_some_and(|l| l.is_favela())) {
        n += 1;
        let nb = nbr_gcn::grid::neighbors_king(rec.row, rec.col, t.grid()).unwrap();
        if nb.iter().any(|c| t.get(c.row, c.col).is_some_and(|r| r.label.is_some_and(|l| l.is_favela()))) {
            with_favela_neighbor += 1;
        }
    }
    assert!(with_favela_neighbor as f64 >= 0.95 * n as f64, "{with_favela_neighbor}/{n}");
}

fn square(size: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        n_rows: size,
        n_cols: size,
        n_zones: 3,
        imbalance_target: 8.0,
        seed,
        oracle_samples: 5000,
        ..SynthConfig::default()
    }
}

#[test]
fn oracle_tends_to_one_without_noise() {
    for seed in [1, 2] {
        let m = oracle_metrics(&SynthConfig { noise: 1e-3, ..square(60, seed) }).unwrap();
        assert!(m.kappa > 0.97, "{m:?}");
    }
}

fn mean_kappa(config: &SynthConfig, kind: ModelKind, epochs: usize) -> f64 {
    let table = generate_city(config).unwrap();
    let train = TrainConfig { epochs, seed: config.seed, ..TrainConfig::default() };
    let opts = CrossvalOptions { repetitions: 1, jobs: 4, ..Default::default() };
    let report = spatial_crossval(&table, &table.zones(), kind, &train, &opts).unwrap();
    report.global.kappa.mean
}

fn gap(config: impl Fn(u64) -> SynthConfig, epochs: usize) -> f64 {
    (0..10u64)
        .map(|s| mean_kappa(&config(s), ModelKind::Gcn, epochs) - mean_kappa(&config(s), ModelKind::MlpLocal, epochs))
        .sum::<f64>()
        / 10.0
}

#[test]
fn no_context_and_no_noise_leaves_nothing_to_gain() {
    // Zone offsets stay out: at vanishing noise they would dominate.
    let g = gap(|s| SynthConfig { context_strength: 0.0, noise: 0.02, zone_shift: 0.0, ..square(60, s) }, 150);
    assert!(g.abs() < 0.03, "gap {g}");
}

#[test]
fn context_strength_widens_the_gap() {
    let gaps: Vec<f64> = [0.0, 0.3, 0.6]
        .iter()
        .map(|&l| gap(|s| SynthConfig { context_strength: l, ..square(100, s) }, 60))
        .collect();
    assert!(gaps[0] < gaps[1] && gaps[1] < gaps[2], "{gaps:?}");
}

#[test]
fn default_oracle_is_pinned() {
    let m = oracle_metrics(&SynthConfig::default()).unwrap();
    assert_eq!(m.n_cities, 3);
    assert_eq!(m.n_samples, 108_000);
    assert!((m.kappa - 0.7146279307850443).abs() <= 1e-12, "{m:?}");
    assert!((m.kappa - (m.tpr + m.tnr - 1.0)).abs() <= 1e-15);
}
