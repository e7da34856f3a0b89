use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::balance::undersample;
use super::metrics::ConfusionMatrix;
use super::standardize::Standardizer;
use crate::error::{Error, Result};
use crate::grid::{CellId, CellRecord, FeatureTable, Label, ZoneId};
use crate::local_graph::build_local_graph;
use crate::models::{assemble_neighbor_input, AnyModel, GcnClassifier, GcnWorkspace, GraphInput, MlpBaseline, MlpVariant};
use crate::nn::{AdamState, Parameterized};
use crate::seeds::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Gcn,
    MlpLocal,
    MlpNeighbors,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Gcn, ModelKind::MlpNeighbors, ModelKind::MlpLocal];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gcn => "gcn",
            ModelKind::MlpLocal => "mlp-local",
            ModelKind::MlpNeighbors => "mlp-neighbors",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}`; valid models: gcn, mlp-local, mlp-neighbors")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 32,
            learning_rate: 0.001,
            seed: 0,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_zone: ZoneId,
    pub train_zones: Vec<ZoneId>,
}

impl SplitSpec {
    /// Holds out `test_zone` and trains on every other zone in `zones`.
    pub fn holdout(test_zone: ZoneId, zones: &[ZoneId]) -> Result<Self> {
        if !zones.contains(&test_zone) {
            return Err(Error::Config(format!("zone {test_zone} is not among {zones:?}")));
        }
        Ok(SplitSpec {
            test_zone,
            train_zones: zones.iter().copied().filter(|&z| z != test_zone).collect(),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.train_zones.contains(&self.test_zone) {
            return Err(Error::Config(format!("test zone {} is also a training zone", self.test_zone)));
        }
        if self.train_zones.is_empty() {
            return Err(Error::Config("no training zones".into()));
        }
        Ok(())
    }
}

/// Labeled records whose zone satisfies `keep`.
fn labeled_in<'a>(table: &'a FeatureTable, keep: impl Fn(ZoneId) -> bool + 'a) -> Vec<&'a CellRecord> {
    table
        .iter()
        .filter(|r| r.label.is_some() && r.zone.is_some_and(&keep))
        .collect()
}

enum Inputs {
    Graph(Vec<GraphInput<f64>>),
    Vector(Vec<Vec<f64>>),
}

fn build_inputs(kind: ModelKind, table: &FeatureTable, cells: &[CellId]) -> Result<Inputs> {
    Ok(match kind {
        ModelKind::Gcn => Inputs::Graph(
            cells
                .iter()
                .map(|c| build_local_graph(table, c.row, c.col).map(|g| GraphInput::new(&g)))
                .collect::<Result<_>>()?,
        ),
        ModelKind::MlpLocal => Inputs::Vector(
            cells
                .iter()
                .map(|c| {
                    table
                        .get_id(*c)
                        .map(|r| r.features.to_vec())
                        .ok_or(Error::MissingCell { row: c.row, col: c.col })
                })
                .collect::<Result<_>>()?,
        ),
        ModelKind::MlpNeighbors => Inputs::Vector(
            cells
                .iter()
                .map(|c| assemble_neighbor_input(table, c.row, c.col))
                .collect::<Result<_>>()?,
        ),
    })
}

/// A trained classifier with the feature transform it was trained under.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub model: AnyModel<f64>,
    pub standardizer: Standardizer,
    /// Mean per-sample loss of each epoch.
    pub loss_trace: Vec<f64>,
    /// Labeled cells the model was trained on.
    pub train_cells: Vec<CellId>,
}

impl TrainedModel {
    /// Predicts one cell of an already standardized table.
    pub fn predict_cell(&self, std_table: &FeatureTable, cell: CellId) -> Result<Label> {
        let mut ws = GcnWorkspace::default();
        self.predict_with(std_table, cell, &mut ws)
    }

    fn predict_with(&self, std_table: &FeatureTable, cell: CellId, ws: &mut GcnWorkspace<f64>) -> Result<Label> {
        Ok(match &self.model {
            AnyModel::Gcn(m) => {
                let g = build_local_graph(std_table, cell.row, cell.col)?;
                m.predict_input(&GraphInput::new(&g), ws).label()
            }
            AnyModel::Mlp(m) => {
                let x = match m.variant {
                    MlpVariant::Local => std_table
                        .get_id(cell)
                        .ok_or(Error::MissingCell { row: cell.row, col: cell.col })?
                        .features
                        .to_vec(),
                    MlpVariant::Neighbors => assemble_neighbor_input(std_table, cell.row, cell.col)?,
                };
                crate::models::mlp_predict(m, &x)?.label()
            }
        })
    }

    /// Predictions for many cells of a raw (unstandardized) table.
    pub fn predict_cells(&self, table: &FeatureTable, cells: &[CellId]) -> Result<Vec<Label>> {
        let std_table = self.standardizer.apply_table(table);
        let mut ws = GcnWorkspace::default();
        cells.iter().map(|&c| self.predict_with(&std_table, c, &mut ws)).collect()
    }

    /// Training-set accuracy.
    pub fn train_accuracy(&self, table: &FeatureTable) -> Result<f64> {
        let preds = self.predict_cells(table, &self.train_cells)?;
        let hits = self
            .train_cells
            .iter()
            .zip(&preds)
            .filter(|(c, p)| table.get_id(**c).and_then(|r| r.label) == Some(**p))
            .count();
        Ok(hits as f64 / self.train_cells.len().max(1) as f64)
    }
}

fn fresh_model<R: Rng + ?Sized>(kind: ModelKind, rng: &mut R) -> AnyModel<f64> {
    match kind {
        ModelKind::Gcn => AnyModel::Gcn(GcnClassifier::new(rng)),
        ModelKind::MlpLocal => AnyModel::Mlp(MlpBaseline::new(MlpVariant::Local, rng)),
        ModelKind::MlpNeighbors => AnyModel::Mlp(MlpBaseline::new(MlpVariant::Neighbors, rng)),
    }
}

fn run_epochs<M, F>(
    model: &mut M,
    zero: &M,
    n: usize,
    config: &TrainConfig,
    mut accumulate: F,
) -> Result<Vec<f64>>
where
    M: Parameterized<f64> + Clone,
    F: FnMut(&M, usize, f64, &mut M) -> f64,
{
    let mut adam = AdamState::new(model);
    let mut shuffle = stream_rng(config.seed, "shuffle", &[]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = zero.clone();
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.clone_from(zero);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                total += accumulate(model, i, scale, &mut grad);
            }
            adam.step(model, &grad, config.learning_rate)?;
        }
        trace.push(total / n as f64);
    }
    Ok(trace)
}

/// Trains a freshly initialized model on the balanced labeled cells of the
/// training zones.
pub fn train_model(kind: ModelKind, table: &FeatureTable, split: &SplitSpec, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    split.validate()?;
    let pool = labeled_in(table, |z| split.train_zones.contains(&z));
    let mut balance_rng = stream_rng(config.seed, "balance-train", &[]);
    let train = undersample(&pool, |r| r.label.expect("labeled"), &mut balance_rng)?;
    let standardizer = if config.standardize {
        Standardizer::fit(train.iter().map(|r| &r.features))
    } else {
        Standardizer::identity()
    };
    let std_table = standardizer.apply_table(table);
    let cells: Vec<CellId> = train.iter().map(|r| r.id()).collect();
    let labels: Vec<Label> = train.iter().map(|r| r.label.expect("labeled")).collect();

    let mut init_rng = stream_rng(config.seed, "init", &[]);
    let mut model = fresh_model(kind, &mut init_rng);
    let inputs = build_inputs(kind, &std_table, &cells)?;
    let n = cells.len();

    let loss_trace = match (&mut model, &inputs) {
        (AnyModel::Gcn(m), Inputs::Graph(xs)) => {
            let mut ws = GcnWorkspace::default();
            run_epochs(m, &GcnClassifier::zeros(), n, config, |m, i, s, g| {
                m.accumulate_grad(&xs[i], labels[i], s, g, &mut ws)
            })?
        }
        (AnyModel::Mlp(m), Inputs::Vector(xs)) => {
            let zero = MlpBaseline::zeros(m.variant);
            run_epochs(m, &zero, n, config, |m, i, s, g| m.accumulate_grad(&xs[i], labels[i], s, g))?
        }
        _ => unreachable!("inputs built for the model kind"),
    };

    Ok(TrainedModel {
        kind,
        model,
        standardizer,
        loss_trace,
        train_cells: cells,
    })
}

/// Confusion counts and bookkeeping from evaluating one held-out zone.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub cells: Vec<CellId>,
    pub predictions: Vec<Label>,
    /// Graph neighbor nodes (features only) drawn from outside the test zone.
    pub foreign_neighbors: usize,
}

/// Evaluates on the test zone, balanced by undersampling unless
/// `natural_prevalence` is set.
pub fn evaluate<R: Rng + ?Sized>(
    model: &TrainedModel,
    table: &FeatureTable,
    split: &SplitSpec,
    rng: &mut R,
    natural_prevalence: bool,
) -> Result<Evaluation> {
    let pool = labeled_in(table, |z| z == split.test_zone);
    let test: Vec<&CellRecord> = if natural_prevalence {
        if pool.is_empty() {
            return Err(Error::Balancing(format!("zone {} has no labeled cells", split.test_zone)));
        }
        pool
    } else {
        undersample(&pool, |r| r.label.expect("labeled"), rng)?
    };
    let cells: Vec<CellId> = test.iter().map(|r| r.id()).collect();
    let predictions = model.predict_cells(table, &cells)?;
    let mut confusion = ConfusionMatrix::default();
    for (rec, &p) in test.iter().zip(&predictions) {
        confusion.record(rec.label.expect("labeled"), p);
    }
    let foreign_neighbors = if model.kind == ModelKind::MlpLocal {
        0
    } else {
        cells
            .iter()
            .flat_map(|c| crate::grid::neighbors_king(c.row, c.col, table.grid()).unwrap_or_default())
            .filter(|n| table.get_id(*n).is_some_and(|r| r.zone != Some(split.test_zone)))
            .count()
    };
    Ok(Evaluation {
        confusion,
        cells,
        predictions,
        foreign_neighbors,
    })
}

/// Number of labeled cells shared between training and evaluation.
pub fn leakage(train: &[CellId], eval: &[CellId]) -> usize {
    let train: HashSet<&CellId> = train.iter().collect();
    eval.iter().filter(|c| train.contains(c)).count()
}
