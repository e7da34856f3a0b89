//! The two-layer GCN classifier and the two MLP baselines.
//!
//! GCN: `9 -> 64 -> 64` graph convolutions with ReLU, then a `64 -> 2` head on
//! the central node. MLPs: one hidden layer of 64 units with ReLU over either
//! the 9 local features or the 81-dimensional zero-padded window.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureTable, Label, WINDOW_OFFSETS, N_FEATURES};
use crate::linalg::{add_outer, axpy, mat_vec, vec_mat_bias, Matrix};
use crate::local_graph::{normalized_adjacency, LocalGraph};
use crate::nn::{gcn_layer_forward, relu, relu_in_place, softmax, softmax_cross_entropy, DenseParams, GcnLayerParams, Parameterized};
use crate::scalar::Scalar;

pub const HIDDEN: usize = 64;
pub const N_CLASSES: usize = 2;
/// Width of the concatenated window input.
pub const NEIGHBOR_INPUT: usize = N_FEATURES * 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<T> {
    pub logits: [T; 2],
    pub probs: [T; 2],
}

impl<T: Scalar> Prediction<T> {
    fn from_logits(logits: [T; 2]) -> Self {
        Prediction {
            logits,
            probs: softmax(logits),
        }
    }

    /// Favela iff its probability is strictly larger.
    pub fn label(&self) -> Label {
        if self.probs[1] > self.probs[0] {
            Label::Favela
        } else {
            Label::NonFavela
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnClassifier<T> {
    pub gcn1: GcnLayerParams<T>,
    pub gcn2: GcnLayerParams<T>,
    pub head: DenseParams<T>,
}

impl<T: Scalar> GcnClassifier<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        GcnClassifier {
            gcn1: GcnLayerParams::glorot(N_FEATURES, HIDDEN, rng),
            gcn2: GcnLayerParams::glorot(HIDDEN, HIDDEN, rng),
            head: DenseParams::glorot(HIDDEN, N_CLASSES, rng),
        }
    }

    pub fn zeros() -> Self {
        GcnClassifier {
            gcn1: GcnLayerParams::zeros(N_FEATURES, HIDDEN),
            gcn2: GcnLayerParams::zeros(HIDDEN, HIDDEN),
            head: DenseParams::zeros(HIDDEN, N_CLASSES),
        }
    }

    fn check(&self) -> Result<()> {
        let dims = [
            (self.gcn1.fan_in(), self.gcn1.fan_out()),
            (self.gcn2.fan_in(), self.gcn2.fan_out()),
            (self.head.fan_in(), self.head.fan_out()),
        ];
        if dims != [(N_FEATURES, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, N_CLASSES)] {
            return Err(Error::Shape(format!("unexpected GCN layer shapes {dims:?}")));
        }
        self.gcn1.check()?;
        self.gcn2.check()?;
        self.head.check()
    }
}

impl<T: Scalar> Parameterized<T> for GcnClassifier<T> {
    fn params(&self) -> Vec<&[T]> {
        let mut v = self.gcn1.params();
        v.extend(self.gcn2.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.gcn1.params_mut();
        v.extend(self.gcn2.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// A local graph converted for repeated evaluation: the normalized
/// adjacency and the pre-aggregated input `Â·X`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput<T> {
    pub adj: Matrix<T>,
    pub aggregated: Matrix<T>,
    pub central: usize,
}

impl<T: Scalar> GraphInput<T> {
    pub fn new(g: &LocalGraph) -> Self {
        let adj: Matrix<T> = normalized_adjacency(g);
        let x: Matrix<T> = g.node_features().cast();
        let aggregated = adj.matmul(&x).expect("adjacency matches node count");
        GraphInput {
            adj,
            aggregated,
            central: g.central_index(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.adj.rows()
    }
}

/// Forward pass of the GCN following the layer sequence literally:
/// both graph convolutions over all nodes, head on the central node.
pub fn gcn_predict<T: Scalar>(model: &GcnClassifier<T>, g: &LocalGraph) -> Result<Prediction<T>> {
    model.check()?;
    if g.node_features().cols() != N_FEATURES {
        return Err(Error::Shape(format!("GCN expects {N_FEATURES} features per node")));
    }
    let adj: Matrix<T> = normalized_adjacency(g);
    let x: Matrix<T> = g.node_features().cast();
    let h1 = relu(&gcn_layer_forward(&adj, &x, &model.gcn1)?);
    let h2 = relu(&gcn_layer_forward(&adj, &h1, &model.gcn2)?);
    let mut logits = [T::zero(); 2];
    vec_mat_bias(h2.row(g.central_index()), &model.head.weight, &model.head.bias, &mut logits);
    Ok(Prediction::from_logits(logits))
}

/// Scratch buffers for the GCN training path.
#[derive(Debug, Clone)]
pub struct GcnWorkspace<T> {
    z1: Vec<T>,
    agg: [T; HIDDEN],
    z2: [T; HIDDEN],
    h2: [T; HIDDEN],
    d_h2: [T; HIDDEN],
    d_agg: [T; HIDDEN],
    d_z1: Vec<T>,
}

impl<T: Scalar> Default for GcnWorkspace<T> {
    fn default() -> Self {
        GcnWorkspace {
            z1: vec![T::zero(); 9 * HIDDEN],
            agg: [T::zero(); HIDDEN],
            z2: [T::zero(); HIDDEN],
            h2: [T::zero(); HIDDEN],
            d_h2: [T::zero(); HIDDEN],
            d_agg: [T::zero(); HIDDEN],
            d_z1: vec![T::zero(); 9 * HIDDEN],
        }
    }
}

impl<T: Scalar> GcnClassifier<T> {
    /// Logits computing only the central row of the second layer, which is
    /// all the head reads.
    pub fn logits(&self, input: &GraphInput<T>, ws: &mut GcnWorkspace<T>) -> [T; 2] {
        let k = input.n_nodes();
        let c = input.central;
        for i in 0..k {
            let z = &mut ws.z1[i * HIDDEN..(i + 1) * HIDDEN];
            vec_mat_bias(input.aggregated.row(i), &self.gcn1.weight, &self.gcn1.bias, z);
            relu_in_place(z);
        }
        ws.agg = [T::zero(); HIDDEN];
        for i in 0..k {
            let a = input.adj.get(c, i);
            if a != T::zero() {
                axpy(a, &ws.z1[i * HIDDEN..(i + 1) * HIDDEN], &mut ws.agg);
            }
        }
        vec_mat_bias(&ws.agg, &self.gcn2.weight, &self.gcn2.bias, &mut ws.z2);
        ws.h2 = ws.z2;
        relu_in_place(&mut ws.h2);
        let mut logits = [T::zero(); 2];
        vec_mat_bias(&ws.h2, &self.head.weight, &self.head.bias, &mut logits);
        logits
    }

    pub fn predict_input(&self, input: &GraphInput<T>, ws: &mut GcnWorkspace<T>) -> Prediction<T> {
        Prediction::from_logits(self.logits(input, ws))
    }

    /// Adds `scale * dLoss/dθ` for one sample into `grad`; returns the loss.
    pub fn accumulate_grad(
        &self,
        input: &GraphInput<T>,
        label: Label,
        scale: T,
        grad: &mut GcnClassifier<T>,
        ws: &mut GcnWorkspace<T>,
    ) -> T {
        let k = input.n_nodes();
        let c = input.central;
        let logits = self.logits(input, ws);
        let (loss, g) = softmax_cross_entropy(logits, label.bit() as usize);
        let g = [g[0] * scale, g[1] * scale];

        // Head.
        add_outer(&mut grad.head.weight, &ws.h2, &g);
        grad.head.bias[0] += g[0];
        grad.head.bias[1] += g[1];
        mat_vec(&self.head.weight, &g, &mut ws.d_h2);
        // Second layer, central row only.
        for u in 0..HIDDEN {
            if !(ws.z2[u] > T::zero()) {
                ws.d_h2[u] = T::zero();
            }
        }
        add_outer(&mut grad.gcn2.weight, &ws.agg, &ws.d_h2);
        axpy(T::one(), &ws.d_h2, &mut grad.gcn2.bias);
        mat_vec(&self.gcn2.weight, &ws.d_h2, &mut ws.d_agg);
        // First layer: dH1[i] = Â[c, i] · dAgg, masked by ReLU (z1 holds relu output).
        for i in 0..k {
            let a = input.adj.get(c, i);
            let dz = &mut ws.d_z1[i * HIDDEN..(i + 1) * HIDDEN];
            let h = &ws.z1[i * HIDDEN..(i + 1) * HIDDEN];
            for u in 0..HIDDEN {
                dz[u] = if h[u] > T::zero() { a * ws.d_agg[u] } else { T::zero() };
            }
            axpy(T::one(), dz, &mut grad.gcn1.bias);
            add_outer(&mut grad.gcn1.weight, input.aggregated.row(i), dz);
        }
        loss
    }

    /// Loss and full gradient for one sample.
    pub fn loss_and_grad(&self, input: &GraphInput<T>, label: Label) -> (T, GcnClassifier<T>) {
        let mut grad = GcnClassifier::zeros();
        let mut ws = GcnWorkspace::default();
        let loss = self.accumulate_grad(input, label, T::one(), &mut grad, &mut ws);
        (loss, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MlpVariant {
    Local,
    Neighbors,
}

impl MlpVariant {
    pub fn input_dim(self) -> usize {
        match self {
            MlpVariant::Local => N_FEATURES,
            MlpVariant::Neighbors => NEIGHBOR_INPUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpBaseline<T> {
    pub variant: MlpVariant,
    pub hidden: DenseParams<T>,
    pub head: DenseParams<T>,
}

impl<T: Scalar> MlpBaseline<T> {
    pub fn new<R: Rng + ?Sized>(variant: MlpVariant, rng: &mut R) -> Self {
        MlpBaseline {
            variant,
            hidden: DenseParams::glorot(variant.input_dim(), HIDDEN, rng),
            head: DenseParams::glorot(HIDDEN, N_CLASSES, rng),
        }
    }

    pub fn zeros(variant: MlpVariant) -> Self {
        MlpBaseline {
            variant,
            hidden: DenseParams::zeros(variant.input_dim(), HIDDEN),
            head: DenseParams::zeros(HIDDEN, N_CLASSES),
        }
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.variant.input_dim() || self.hidden.fan_in() != self.variant.input_dim() {
            return Err(Error::Shape(format!(
                "{:?} MLP expects {} inputs, got {}",
                self.variant,
                self.variant.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    fn hidden_activations(&self, x: &[T], z: &mut [T; HIDDEN]) {
        vec_mat_bias(x, &self.hidden.weight, &self.hidden.bias, z);
    }

    /// Adds `scale * dLoss/dθ` for one sample into `grad`; returns the loss.
    pub fn accumulate_grad(&self, x: &[T], label: Label, scale: T, grad: &mut MlpBaseline<T>) -> T {
        let mut z = [T::zero(); HIDDEN];
        self.hidden_activations(x, &mut z);
        let mut h = z;
        relu_in_place(&mut h);
        let mut logits = [T::zero(); 2];
        vec_mat_bias(&h, &self.head.weight, &self.head.bias, &mut logits);
        let (loss, g) = softmax_cross_entropy(logits, label.bit() as usize);
        let g = [g[0] * scale, g[1] * scale];
        add_outer(&mut grad.head.weight, &h, &g);
        grad.head.bias[0] += g[0];
        grad.head.bias[1] += g[1];
        let mut dz = [T::zero(); HIDDEN];
        mat_vec(&self.head.weight, &g, &mut dz);
        for u in 0..HIDDEN {
            if !(z[u] > T::zero()) {
                dz[u] = T::zero();
            }
        }
        add_outer(&mut grad.hidden.weight, x, &dz);
        axpy(T::one(), &dz, &mut grad.hidden.bias);
        loss
    }

    pub fn loss_and_grad(&self, x: &[T], label: Label) -> (T, MlpBaseline<T>) {
        let mut grad = MlpBaseline::zeros(self.variant);
        let loss = self.accumulate_grad(x, label, T::one(), &mut grad);
        (loss, grad)
    }
}

impl<T: Scalar> Parameterized<T> for MlpBaseline<T> {
    fn params(&self) -> Vec<&[T]> {
        let mut v = self.hidden.params();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.hidden.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

pub fn mlp_predict<T: Scalar>(model: &MlpBaseline<T>, x: &[T]) -> Result<Prediction<T>> {
    model.check_input(x)?;
    let mut z = [T::zero(); HIDDEN];
    model.hidden_activations(x, &mut z);
    relu_in_place(&mut z);
    let mut logits = [T::zero(); 2];
    vec_mat_bias(&z, &model.head.weight, &model.head.bias, &mut logits);
    Ok(Prediction::from_logits(logits))
}

/// Central features followed by the eight window neighbors in row-major
/// order; absent or out-of-grid neighbors are zero.
pub fn assemble_neighbor_input(table: &FeatureTable, row: usize, col: usize) -> Result<Vec<f64>> {
    let center = table.get(row, col).ok_or(Error::MissingCell { row, col })?;
    let mut x = vec![0.0; NEIGHBOR_INPUT];
    x[..N_FEATURES].copy_from_slice(&center.features);
    for (k, (dr, dc)) in WINDOW_OFFSETS.iter().enumerate() {
        let r = row as i64 + dr;
        let c = col as i64 + dc;
        if r < 0 || c < 0 {
            continue;
        }
        if let Some(rec) = table.get(r as usize, c as usize) {
            let at = N_FEATURES * (k + 1);
            x[at..at + N_FEATURES].copy_from_slice(&rec.features);
        }
    }
    Ok(x)
}

/// Checkpoint layout shared by all model kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub variant: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLayer {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "nbr-gcn-checkpoint/1";

fn layer_to_ckpt<T: Scalar>(name: &str, p: &crate::nn::LayerParams<T>) -> CheckpointLayer {
    CheckpointLayer {
        name: name.into(),
        rows: p.fan_in(),
        cols: p.fan_out(),
        weight: p.weight.as_slice().iter().map(|v| v.as_f64()).collect(),
        bias: p.bias.iter().map(|v| v.as_f64()).collect(),
    }
}

fn layer_from_ckpt<T: Scalar>(l: &CheckpointLayer, rows: usize, cols: usize) -> Result<crate::nn::LayerParams<T>> {
    if l.rows != rows || l.cols != cols || l.bias.len() != cols {
        return Err(Error::Shape(format!(
            "checkpoint layer `{}` is {}x{}, expected {rows}x{cols}",
            l.name, l.rows, l.cols
        )));
    }
    Ok(crate::nn::LayerParams {
        weight: Matrix::from_vec(rows, cols, l.weight.iter().map(|&v| T::of(v)).collect())?,
        bias: l.bias.iter().map(|&v| T::of(v)).collect(),
    })
}

/// Either trained model kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel<T> {
    Gcn(GcnClassifier<T>),
    Mlp(MlpBaseline<T>),
}

impl<T: Scalar> AnyModel<T> {
    pub fn variant_name(&self) -> &'static str {
        match self {
            AnyModel::Gcn(_) => "gcn",
            AnyModel::Mlp(m) => match m.variant {
                MlpVariant::Local => "mlp-local",
                MlpVariant::Neighbors => "mlp-neighbors",
            },
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            AnyModel::Gcn(m) => m.n_params(),
            AnyModel::Mlp(m) => m.n_params(),
        }
    }

    pub fn to_checkpoint(&self, seed: u64, config: serde_json::Value) -> Checkpoint {
        let layers = match self {
            AnyModel::Gcn(m) => vec![
                layer_to_ckpt("gcn1", &m.gcn1),
                layer_to_ckpt("gcn2", &m.gcn2),
                layer_to_ckpt("head", &m.head),
            ],
            AnyModel::Mlp(m) => vec![layer_to_ckpt("hidden", &m.hidden), layer_to_ckpt("head", &m.head)],
        };
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            variant: self.variant_name().into(),
            seed,
            config,
            layers,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        let layer = |i: usize| ck.layers.get(i).ok_or_else(|| Error::Shape("checkpoint missing layer".into()));
        match ck.variant.as_str() {
            "gcn" => Ok(AnyModel::Gcn(GcnClassifier {
                gcn1: layer_from_ckpt(layer(0)?, N_FEATURES, HIDDEN)?,
                gcn2: layer_from_ckpt(layer(1)?, HIDDEN, HIDDEN)?,
                head: layer_from_ckpt(layer(2)?, HIDDEN, N_CLASSES)?,
            })),
            "mlp-local" | "mlp-neighbors" => {
                let variant = if ck.variant == "mlp-local" {
                    MlpVariant::Local
                } else {
                    MlpVariant::Neighbors
                };
                Ok(AnyModel::Mlp(MlpBaseline {
                    variant,
                    hidden: layer_from_ckpt(layer(0)?, variant.input_dim(), HIDDEN)?,
                    head: layer_from_ckpt(layer(1)?, HIDDEN, N_CLASSES)?,
                }))
            }
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(ck)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellId, CellRecord, GridSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(GcnClassifier::<f64>::new(&mut rng).n_params(), 4930);
        assert_eq!(MlpBaseline::<f64>::new(MlpVariant::Neighbors, &mut rng).n_params(), 5378);
        assert_eq!(MlpBaseline::<f64>::new(MlpVariant::Local, &mut rng).n_params(), 770);
    }

    #[test]
    fn zero_inputs_give_uniform_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gcn = GcnClassifier::<f64>::new(&mut rng);
        let nodes = (0..9).map(|i| (CellId::new(i / 3, i % 3), [0.0; 9])).collect();
        let g = LocalGraph::from_nodes(nodes, 4).unwrap();
        let p = gcn_predict(&gcn, &g).unwrap();
        assert_eq!(p.logits, [0.0, 0.0]);
        assert_eq!(p.probs, [0.5, 0.5]);
        let mlp = MlpBaseline::<f64>::new(MlpVariant::Local, &mut rng);
        assert_eq!(mlp_predict(&mlp, &[0.0; 9]).unwrap().probs, [0.5, 0.5]);
    }

    #[test]
    fn mlp_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = MlpBaseline::<f64>::new(MlpVariant::Local, &mut rng);
        assert!(matches!(mlp_predict(&mlp, &[0.0; 81]), Err(Error::Shape(_))));
    }

    #[test]
    fn neighbor_input_padding() {
        let g = GridSpec::with_shape(3, 3).unwrap();
        let recs = (0..3).flat_map(|r| {
            (0..3).map(move |c| CellRecord {
                row: r,
                col: c,
                features: [1.0 + (r * 3 + c) as f64; 9],
                label: None,
                zone: None,
            })
        });
        let t = FeatureTable::from_records(g, recs).unwrap();
        let x = assemble_neighbor_input(&t, 1, 1).unwrap();
        assert_eq!(x.len(), 81);
        assert!(x.iter().all(|&v| v != 0.0));
        let corner = assemble_neighbor_input(&t, 0, 0).unwrap();
        let zero_slots = (1..9).filter(|k| corner[9 * k..9 * k + 9].iter().all(|&v| v == 0.0)).count();
        assert_eq!(zero_slots, 5);

        let lone = FeatureTable::from_records(
            g,
            [CellRecord {
                row: 1,
                col: 1,
                features: [7.0; 9],
                label: None,
                zone: None,
            }],
        )
        .unwrap();
        let x = assemble_neighbor_input(&lone, 1, 1).unwrap();
        assert!(x[..9].iter().all(|&v| v == 7.0));
        assert!(x[9..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in [
            AnyModel::Gcn(GcnClassifier::<f64>::new(&mut rng)),
            AnyModel::Mlp(MlpBaseline::new(MlpVariant::Neighbors, &mut rng)),
        ] {
            let ck = m.to_checkpoint(9, serde_json::json!({"epochs": 1}));
            let text = serde_json::to_string(&ck).unwrap();
            let back: Checkpoint = serde_json::from_str(&text).unwrap();
            assert_eq!(AnyModel::from_checkpoint(&back).unwrap(), m);
        }
    }

    #[test]
    fn fast_path_matches_literal_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut m = GcnClassifier::<f64>::new(&mut rng);
        for b in m.gcn1.bias.iter_mut().chain(m.gcn2.bias.iter_mut()) {
            *b = rng.gen_range(-0.1..0.1);
        }
        let nodes = (0..9)
            .map(|i| {
                let mut f = [0.0; 9];
                f.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
                (CellId::new(i / 3, i % 3), f)
            })
            .collect();
        let g = LocalGraph::from_nodes(nodes, 4).unwrap();
        let lit = gcn_predict(&m, &g).unwrap();
        let fast = m.predict_input(&GraphInput::new(&g), &mut GcnWorkspace::default());
        for c in 0..2 {
            assert!((lit.logits[c] - fast.logits[c]).abs() < 1e-12);
        }
    }
}
