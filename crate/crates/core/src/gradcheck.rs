//! Finite-difference verification of the analytic gradients on random
//! instances.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::ModelKind;
use crate::grid::{CellId, Label, N_FEATURES, WINDOW_OFFSETS};
use crate::linalg::vec_mat_bias;
use crate::local_graph::LocalGraph;
use crate::models::{GcnClassifier, GraphInput, MlpBaseline, MlpVariant, HIDDEN, NEIGHBOR_INPUT};
use crate::nn::{gradcheck, LayerParams, Parameterized};
use crate::seeds::stream_rng;

/// Pass threshold on the largest relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const GRADCHECK_EPSILON: f64 = 1e-4;
/// Every ReLU pre-activation is moved at least this far from zero, so no
/// finite-difference probe crosses a kink.
const KINK_MARGIN: f64 = 1e-2;
const MAX_ATTEMPTS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub model: ModelKind,
    pub seed: u64,
    pub n_params: usize,
    /// Random draws used; a draw is discarded when no small bias shift
    /// clears every ReLU kink.
    pub attempts: u64,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

fn randomize_biases<R: Rng>(layers: &mut [&mut LayerParams<f64>], rng: &mut R) {
    for l in layers {
        for b in &mut l.bias {
            *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn clear_of_kinks(z: &[f64]) -> bool {
    z.iter().all(|v| v.abs() >= KINK_MARGIN)
}

/// Shifts `bias` in small steps until every pre-activation `base + bias`
/// clears the kink margin; false if no nearby shift works.
fn nudge_bias(bias: &mut f64, base: &[f64]) -> bool {
    for step in 0..200i32 {
        let shift = 2.0 * KINK_MARGIN * f64::from(if step % 2 == 0 { step / 2 } else { -(step + 1) / 2 });
        if base.iter().all(|v| (v + *bias + shift).abs() >= KINK_MARGIN) {
            *bias += shift;
            return true;
        }
    }
    false
}

/// Nudges the biases of `layer` so that the pre-activations of `inputs`
/// (one row per node) all clear the kink margin.
fn clear_layer(layer: &mut LayerParams<f64>, inputs: &[&[f64]]) -> Option<Vec<f64>> {
    let n = layer.fan_out();
    let mut z = vec![0.0; inputs.len() * n];
    for (i, x) in inputs.iter().enumerate() {
        vec_mat_bias(x, &layer.weight, &layer.bias, &mut z[i * n..(i + 1) * n]);
    }
    for u in 0..n {
        let base: Vec<f64> = (0..inputs.len()).map(|i| z[i * n + u] - layer.bias[u]).collect();
        let before = layer.bias[u];
        if !nudge_bias(&mut layer.bias[u], &base) {
            return None;
        }
        for i in 0..inputs.len() {
            z[i * n + u] += layer.bias[u] - before;
        }
    }
    debug_assert!(clear_of_kinks(&z));
    Some(z)
}

fn random_graph<R: Rng>(rng: &mut R) -> LocalGraph {
    let mut nodes = vec![(CellId::new(1, 1), random_features(rng))];
    for (dr, dc) in WINDOW_OFFSETS {
        if rng.gen_bool(0.75) {
            let id = CellId::new((1 + dr) as usize, (1 + dc) as usize);
            nodes.push((id, random_features(rng)));
        }
    }
    LocalGraph::from_nodes(nodes, 0).expect("at most 9 nodes")
}

fn random_features<R: Rng>(rng: &mut R) -> [f64; N_FEATURES] {
    std::array::from_fn(|_| rng.sample(StandardNormal))
}

fn gcn_instance<R: Rng>(rng: &mut R) -> Option<(GcnClassifier<f64>, GraphInput<f64>)> {
    let mut m = GcnClassifier::new(rng);
    randomize_biases(&mut [&mut m.gcn1, &mut m.gcn2, &mut m.head], rng);
    let input = GraphInput::new(&random_graph(rng));
    let k = input.n_nodes();
    let rows: Vec<&[f64]> = (0..k).map(|i| input.aggregated.row(i)).collect();
    let z1 = clear_layer(&mut m.gcn1, &rows)?;
    let mut agg = [0.0; HIDDEN];
    for i in 0..k {
        let a = input.adj.get(input.central, i);
        for u in 0..HIDDEN {
            agg[u] += a * z1[i * HIDDEN + u].max(0.0);
        }
    }
    clear_layer(&mut m.gcn2, &[&agg])?;
    Some((m, input))
}

fn mlp_instance<R: Rng>(variant: MlpVariant, rng: &mut R) -> Option<(MlpBaseline<f64>, Vec<f64>)> {
    let mut m = MlpBaseline::new(variant, rng);
    randomize_biases(&mut [&mut m.hidden, &mut m.head], rng);
    let mut x: Vec<f64> = (0..variant.input_dim()).map(|_| rng.sample(StandardNormal)).collect();
    if variant == MlpVariant::Neighbors {
        // Some absent neighbors, as zero padding.
        for slot in 1..NEIGHBOR_INPUT / N_FEATURES {
            if rng.gen_bool(0.25) {
                x[slot * N_FEATURES..(slot + 1) * N_FEATURES].fill(0.0);
            }
        }
    }
    clear_layer(&mut m.hidden, &[&x])?;
    Some((m, x))
}

fn check<M, F>(model: &M, loss_and_grad: F, corrupt: bool) -> f64
where
    M: Parameterized<f64> + Clone,
    F: Fn(&M) -> (f64, M),
{
    gradcheck(
        model,
        |m: &M| {
            let (l, mut g) = loss_and_grad(m);
            if corrupt {
                let last = g.params_mut().len() - 1;
                g.params_mut()[last][0] += 0.1;
            }
            (l, g)
        },
        GRADCHECK_EPSILON,
    )
}

/// Gradient check of `kind` on a random instance derived from `seed`.
/// `corrupt` perturbs one analytic gradient entry (a negative control).
pub fn check_gradients(kind: ModelKind, seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = stream_rng(seed, "gradcheck", &[attempt]);
        let label = if rng.gen_bool(0.5) { Label::Favela } else { Label::NonFavela };
        let found = match kind {
            ModelKind::Gcn => gcn_instance(&mut rng).map(|(m, input)| {
                let err = check(&m, |m: &GcnClassifier<f64>| m.loss_and_grad(&input, label), corrupt);
                (m.n_params(), err)
            }),
            ModelKind::MlpLocal | ModelKind::MlpNeighbors => {
                let variant = if kind == ModelKind::MlpLocal { MlpVariant::Local } else { MlpVariant::Neighbors };
                mlp_instance(variant, &mut rng).map(|(m, x)| {
                    let err = check(&m, |m: &MlpBaseline<f64>| m.loss_and_grad(&x, label), corrupt);
                    (m.n_params(), err)
                })
            }
        };
        if let Some((n_params, max_rel_error)) = found {
            return Ok(GradcheckReport {
                model: kind,
                seed,
                n_params,
                attempts: attempt + 1,
                max_rel_error,
            });
        }
    }
    Err(Error::Config(format!("no kink-free instance found for seed {seed}")))
}
