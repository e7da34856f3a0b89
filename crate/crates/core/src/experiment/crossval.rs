use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, ConfusionMatrix, Metrics};
use super::train::{evaluate, leakage, train_model, ModelKind, SplitSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::grid::{CellId, FeatureTable, Label, ZoneId};
use crate::seeds::{derive_seed, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossvalOptions {
    pub repetitions: usize,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
    /// Evaluate at the zone's natural class ratio instead of balancing.
    pub natural_prevalence: bool,
    /// Keep out-of-fold predictions for every cell of each held-out zone
    /// (first repetition), for map rendering.
    pub record_maps: bool,
}

impl Default for CrossvalOptions {
    fn default() -> Self {
        CrossvalOptions {
            repetitions: 10,
            jobs: 1,
            natural_prevalence: false,
            record_maps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub zone: ZoneId,
    pub repetition: usize,
    pub seed: u64,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub n_train: usize,
    pub n_test: usize,
    pub train_positive: usize,
    pub test_positive: usize,
    /// Labeled cells present in both the training and evaluation sets.
    pub leaked: usize,
    pub foreign_neighbors: usize,
    pub final_loss: f64,
    #[serde(skip)]
    pub train_cells: Vec<CellId>,
    #[serde(skip)]
    pub test_cells: Vec<CellId>,
    #[serde(skip)]
    pub map: Option<Vec<(CellId, Label)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub zone: ZoneId,
    pub repetition: usize,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub kappa: MeanStd,
}

impl MetricSummary {
    fn of(ms: &[Metrics]) -> Self {
        let col = |f: fn(&Metrics) -> f64| MeanStd::of(&ms.iter().map(f).collect::<Vec<_>>());
        MetricSummary {
            precision: col(|m| m.precision),
            recall: col(|m| m.recall),
            f1: col(|m| m.f1),
            kappa: col(|m| m.kappa),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneSummary {
    pub zone: ZoneId,
    pub folds: usize,
    pub summary: MetricSummary,
}

/// Per-fold metrics plus per-zone and global aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: ModelKind,
    pub seed: u64,
    pub repetitions: usize,
    pub zones: Vec<ZoneId>,
    pub natural_prevalence: bool,
    pub folds: Vec<FoldResult>,
    pub failures: Vec<FoldFailure>,
    pub per_zone: Vec<ZoneSummary>,
    /// Over the per-zone means.
    pub global: MetricSummary,
    pub foreign_neighbors: usize,
}

impl MetricsReport {
    pub fn kappas(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.metrics.kappa).collect()
    }

    /// `zone,repetition,model,precision,recall,f1,kappa`, one row per fold.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "zone,repetition,model,precision,recall,f1,kappa")?;
        for f in &self.folds {
            let m = &f.metrics;
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                f.zone, f.repetition, self.model, m.precision, m.recall, m.f1, m.kappa
            )?;
        }
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to memory");
        String::from_utf8(buf).expect("ascii csv")
    }

    /// Summary JSON: per-zone and global mean ± std.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "seed": self.seed,
            "repetitions": self.repetitions,
            "zones": self.zones,
            "evaluation": if self.natural_prevalence { "natural-prevalence (non-standard)" } else { "balanced" },
            "n_folds": self.folds.len(),
            "failures": self.failures,
            "per_zone": self.per_zone,
            "global": self.global,
            "foreign_neighbor_nodes": self.foreign_neighbors,
        })
    }

    /// Out-of-fold predictions gathered from every fold that recorded a map.
    pub fn prediction_map(&self) -> Vec<(CellId, Label)> {
        let mut all: Vec<(CellId, Label)> = self.folds.iter().filter_map(|f| f.map.clone()).flatten().collect();
        all.sort_by_key(|(c, _)| *c);
        all
    }
}

fn run_fold(
    table: &FeatureTable,
    zones: &[ZoneId],
    kind: ModelKind,
    config: &TrainConfig,
    opts: &CrossvalOptions,
    repetition: usize,
    zone: ZoneId,
) -> Result<FoldResult> {
    let seed = derive_seed(config.seed, "fold", &[repetition as u64, zone as u64]);
    let split = SplitSpec::holdout(zone, zones)?;
    let fold_config = TrainConfig { seed, ..*config };
    let trained = train_model(kind, table, &split, &fold_config)?;
    let mut eval_rng = stream_rng(seed, "balance-test", &[]);
    let eval = evaluate(&trained, table, &split, &mut eval_rng, opts.natural_prevalence)?;
    let leaked = leakage(&trained.train_cells, &eval.cells);
    if leaked > 0 {
        return Err(Error::Config(format!("{leaked} labeled cells shared between train and test")));
    }
    let metrics = compute_metrics(&eval.confusion)?;
    let positives = |cells: &[CellId]| {
        cells
            .iter()
            .filter(|c| table.get_id(**c).and_then(|r| r.label) == Some(Label::Favela))
            .count()
    };
    let map = if opts.record_maps && repetition == 0 {
        let cells: Vec<CellId> = table.iter().filter(|r| r.zone == Some(zone)).map(|r| r.id()).collect();
        let preds = trained.predict_cells(table, &cells)?;
        Some(cells.into_iter().zip(preds).collect())
    } else {
        None
    };
    Ok(FoldResult {
        zone,
        repetition,
        seed,
        confusion: eval.confusion,
        metrics,
        n_train: trained.train_cells.len(),
        n_test: eval.cells.len(),
        train_positive: positives(&trained.train_cells),
        test_positive: positives(&eval.cells),
        leaked,
        foreign_neighbors: eval.foreign_neighbors,
        final_loss: trained.loss_trace.last().copied().unwrap_or(f64::NAN),
        train_cells: trained.train_cells,
        test_cells: eval.cells,
        map,
    })
}

/// Leave-one-zone-out cross-validation repeated `opts.repetitions` times.
///
/// Fold `(r, z)` draws everything from a seed derived from
/// `(config.seed, r, z)`, so the report does not depend on `opts.jobs` or
/// completion order. Failing folds are recorded and skipped.
pub fn spatial_crossval(
    table: &FeatureTable,
    zones: &[ZoneId],
    kind: ModelKind,
    config: &TrainConfig,
    opts: &CrossvalOptions,
) -> Result<MetricsReport> {
    config.validate()?;
    let mut zones = zones.to_vec();
    zones.sort_unstable();
    zones.dedup();
    if zones.len() < 2 {
        return Err(Error::Config(format!("spatial cross-validation needs at least 2 zones, got {zones:?}")));
    }
    let folds: Vec<(usize, ZoneId)> = (0..opts.repetitions)
        .flat_map(|r| zones.iter().map(move |&z| (r, z)))
        .collect();

    let job = |&(r, z): &(usize, ZoneId)| (r, z, run_fold(table, &zones, kind, config, opts, r, z));
    let outcomes: Vec<_> = if opts.jobs <= 1 {
        folds.iter().map(job).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| folds.par_iter().map(job).collect())
    };

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (r, z, out) in outcomes {
        match out {
            Ok(f) => results.push(f),
            Err(e) => {
                warn!("fold (zone {z}, repetition {r}) failed: {e}");
                failures.push(FoldFailure {
                    zone: z,
                    repetition: r,
                    error: e.to_string(),
                });
            }
        }
    }
    results.sort_by_key(|f| (f.zone, f.repetition));
    failures.sort_by_key(|f| (f.zone, f.repetition));

    let per_zone: Vec<ZoneSummary> = zones
        .iter()
        .filter_map(|&z| {
            let ms: Vec<Metrics> = results.iter().filter(|f| f.zone == z).map(|f| f.metrics).collect();
            (!ms.is_empty()).then(|| ZoneSummary {
                zone: z,
                folds: ms.len(),
                summary: MetricSummary::of(&ms),
            })
        })
        .collect();
    let zone_means: Vec<Metrics> = per_zone
        .iter()
        .map(|z| Metrics {
            precision: z.summary.precision.mean,
            recall: z.summary.recall.mean,
            f1: z.summary.f1.mean,
            kappa: z.summary.kappa.mean,
            degenerate: false,
        })
        .collect();
    let foreign_neighbors = results.iter().map(|f| f.foreign_neighbors).sum();

    Ok(MetricsReport {
        model: kind,
        seed: config.seed,
        repetitions: opts.repetitions,
        zones,
        natural_prevalence: opts.natural_prevalence,
        folds: results,
        failures,
        per_zone,
        global: MetricSummary::of(&zone_means),
        foreign_neighbors,
    })
}

/// Binary PGM (P5) of per-cell predictions: 255 favela, 0 non-favela, 128
/// for cells without a prediction. The top image row is the northernmost
/// grid row.
pub fn write_prediction_pgm<W: Write>(
    grid: &crate::grid::GridSpec,
    predictions: &[(CellId, Label)],
    mut w: W,
) -> std::io::Result<()> {
    let mut img = vec![128u8; grid.n_cells()];
    for (c, l) in predictions {
        if grid.contains(c.row, c.col) {
            let y = grid.n_rows - 1 - c.row;
            img[y * grid.n_cols + c.col] = if l.is_favela() { 255 } else { 0 };
        }
    }
    write!(w, "P5\n{} {}\n255\n", grid.n_cols, grid.n_rows)?;
    w.write_all(&img)
}
