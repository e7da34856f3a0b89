//! Model forward passes against independent dense transcriptions.

use nbr_gcn::grid::{CellId, N_FEATURES};
use nbr_gcn::local_graph::{normalized_adjacency, LocalGraph};
use nbr_gcn::models::{gcn_predict, mlp_predict, GcnClassifier, MlpBaseline, MlpVariant};
use nbr_gcn::nn::LayerParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Dense = Vec<Vec<f64>>;

fn to_dense(m: &nbr_gcn::Matrix) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn affine(h: &Dense, p: &LayerParams<f64>) -> Dense {
    let mut out = matmul(h, &to_dense(&p.weight));
    for row in &mut out {
        for (v, b) in row.iter_mut().zip(&p.bias) {
            *v += b;
        }
    }
    out
}

fn relu(h: Dense) -> Dense {
    h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

/// Normalized adjacency rebuilt from node coordinates alone.
fn oracle_adjacency(coords: &[CellId]) -> Dense {
    let k = coords.len();
    let adj = |i: usize, j: usize| {
        let (a, b) = (coords[i], coords[j]);
        i == j || (a.row.abs_diff(b.row) <= 1 && a.col.abs_diff(b.col) <= 1)
    };
    let deg: Vec<f64> = (0..k).map(|i| (0..k).filter(|&j| adj(i, j)).count() as f64).collect();
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| if adj(i, j) { 1.0 / (deg[i] * deg[j]).sqrt() } else { 0.0 })
                .collect()
        })
        .collect()
}

fn oracle_gcn(m: &GcnClassifier<f64>, g: &LocalGraph) -> [f64; 2] {
    let a = oracle_adjacency(g.node_coords());
    let x = to_dense(g.node_features());
    let h1 = relu(affine(&matmul(&a, &x), &m.gcn1));
    let h2 = relu(affine(&matmul(&a, &h1), &m.gcn2));
    let out = affine(&vec![h2[g.central_index()].clone()], &m.head);
    [out[0][0], out[0][1]]
}

fn oracle_mlp(m: &MlpBaseline<f64>, x: &[f64]) -> [f64; 2] {
    let h = relu(affine(&vec![x.to_vec()], &m.hidden));
    let out = affine(&h, &m.head);
    [out[0][0], out[0][1]]
}

fn randomize(p: &mut LayerParams<f64>, rng: &mut ChaCha8Rng) {
    for b in &mut p.bias {
        *b = rng.gen_range(-0.5..0.5);
    }
}

fn random_graph(rng: &mut ChaCha8Rng) -> LocalGraph {
    let feats = |rng: &mut ChaCha8Rng| std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
    let mut nodes = vec![(CellId::new(1, 1), feats(rng))];
    for r in 0..3 {
        for c in 0..3 {
            if (r, c) != (1, 1) && rng.gen_bool(0.7) {
                nodes.push((CellId::new(r, c), feats(rng)));
            }
        }
    }
    // Shuffle everything but the center so node order is not row-major.
    let k = nodes.len();
    for i in (2..k).rev() {
        let j = rng.gen_range(1..=i);
        nodes.swap(i, j);
    }
    LocalGraph::from_nodes(nodes, 0).unwrap()
}

fn close(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn gcn_matches_dense_oracle_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let mut m = GcnClassifier::<f64>::new(&mut rng);
        randomize(&mut m.gcn1, &mut rng);
        randomize(&mut m.gcn2, &mut rng);
        randomize(&mut m.head, &mut rng);
        let g = random_graph(&mut rng);
        let got = gcn_predict(&m, &g).unwrap().logits;
        let want = oracle_gcn(&m, &g);
        assert!(close(got, want, 1e-12), "{got:?} vs {want:?}");
    }
}

#[test]
fn mlp_matches_dense_oracle_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..100 {
        let variant = if i % 2 == 0 { MlpVariant::Local } else { MlpVariant::Neighbors };
        let mut m = MlpBaseline::<f64>::new(variant, &mut rng);
        randomize(&mut m.hidden, &mut rng);
        randomize(&mut m.head, &mut rng);
        let x: Vec<f64> = (0..variant.input_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let got = mlp_predict(&m, &x).unwrap().logits;
        let want = oracle_mlp(&m, &x);
        assert!(close(got, want, 1e-12), "{got:?} vs {want:?}");
    }
}

#[test]
fn adjacency_matches_coordinate_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let g = random_graph(&mut rng);
        let a = to_dense(&normalized_adjacency::<f64>(&g));
        let want = oracle_adjacency(g.node_coords());
        for i in 0..g.n_nodes() {
            for j in 0..g.n_nodes() {
                assert!((a[i][j] - want[i][j]).abs() <= 1e-15);
                assert_eq!(a[i][j].to_bits(), a[j][i].to_bits());
            }
        }
    }
}

#[test]
fn single_node_gcn_is_a_two_layer_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let mut m = GcnClassifier::<f64>::new(&mut rng);
        randomize(&mut m.gcn1, &mut rng);
        randomize(&mut m.gcn2, &mut rng);
        let x: [f64; N_FEATURES] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
        let g = LocalGraph::from_nodes(vec![(CellId::new(4, 4), x)], 0).unwrap();
        let direct = {
            let h1 = relu(affine(&vec![x.to_vec()], &m.gcn1));
            let h2 = relu(affine(&h1, &m.gcn2));
            let out = affine(&h2, &m.head);
            [out[0][0], out[0][1]]
        };
        assert!(close(gcn_predict(&m, &g).unwrap().logits, direct, 1e-12));
    }
}

#[test]
fn gcn_logits_ignore_non_central_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let mut m = GcnClassifier::<f64>::new(&mut rng);
        randomize(&mut m.gcn1, &mut rng);
        let g = random_graph(&mut rng);
        let k = g.n_nodes();
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let p = g.permuted(&perm).unwrap();
        let (a, b) = (gcn_predict(&m, &g).unwrap(), gcn_predict(&m, &p).unwrap());
        assert!(close(a.logits, b.logits, 1e-12));
        assert_eq!(a.label(), b.label());
    }
}

#[test]
fn zero_inputs_give_even_odds() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let m = GcnClassifier::<f64>::new(&mut rng);
    let g = LocalGraph::from_nodes(vec![(CellId::new(0, 0), [0.0; N_FEATURES])], 0).unwrap();
    assert_eq!(gcn_predict(&m, &g).unwrap().probs, [0.5, 0.5]);
    let mlp = MlpBaseline::<f64>::new(MlpVariant::Neighbors, &mut rng);
    assert_eq!(mlp_predict(&mlp, &[0.0; 81]).unwrap().probs, [0.5, 0.5]);
    let local = MlpBaseline::<f64>::new(MlpVariant::Local, &mut rng);
    assert!(mlp_predict(&local, &[0.0; 81]).is_err());
}
