//! Layer primitives, the fused softmax/cross-entropy loss, Adam and
//! finite-difference gradient checking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Weight (`in x out`) and bias (`out`) of an affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

/// Fully connected layer.
pub type DenseParams<T> = LayerParams<T>;
/// Graph-convolution layer.
pub type GcnLayerParams<T> = LayerParams<T>;

impl<T: Scalar> LayerParams<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        LayerParams {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![T::zero(); fan_out],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        LayerParams {
            weight: glorot_init(fan_in, fan_out, rng),
            bias: vec![T::zero(); fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn n_params(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.bias.len() != self.weight.cols() {
            return Err(Error::Shape(format!(
                "bias of length {} for a layer with {} outputs",
                self.bias.len(),
                self.weight.cols()
            )));
        }
        Ok(())
    }
}

/// i.i.d. uniform samples on `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_init<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix<T> {
    assert!(fan_in > 0 && fan_out > 0, "glorot_init needs positive fans");
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| T::of(rng.gen_range(-a..=a)))
}

/// `Â · H · W + 1 bᵀ`.
pub fn gcn_layer_forward<T: Scalar>(adj: &Matrix<T>, h: &Matrix<T>, params: &GcnLayerParams<T>) -> Result<Matrix<T>> {
    params.check()?;
    if adj.rows() != adj.cols() || adj.cols() != h.rows() {
        return Err(Error::Shape(format!(
            "adjacency {}x{} does not match {} node rows",
            adj.rows(),
            adj.cols(),
            h.rows()
        )));
    }
    if h.cols() != params.fan_in() {
        return Err(Error::Shape(format!(
            "{} input features for a layer expecting {}",
            h.cols(),
            params.fan_in()
        )));
    }
    let mut out = adj.matmul(&h.matmul(&params.weight)?)?;
    for i in 0..out.rows() {
        for (o, &b) in out.row_mut(i).iter_mut().zip(&params.bias) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    m.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[inline]
pub fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

/// Max-subtracted two-class softmax.
pub fn softmax<T: Scalar>(logits: [T; 2]) -> [T; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Cross-entropy of `softmax(logits)` against class index `label` (0 or 1)
/// and its gradient `p - onehot(label)`.
pub fn softmax_cross_entropy<T: Scalar>(logits: [T; 2], label: usize) -> (T, [T; 2]) {
    assert!(label < 2, "binary label expected");
    let m = logits[0].max(logits[1]);
    let shifted = [logits[0] - m, logits[1] - m];
    let lse = (shifted[0].exp() + shifted[1].exp()).ln();
    let loss = lse - shifted[label];
    let p = softmax(logits);
    let mut grad = p;
    grad[label] -= T::one();
    (loss, grad)
}

/// Anything whose parameters can be visited as flat slices, in a fixed order.
pub trait Parameterized<T> {
    fn params(&self) -> Vec<&[T]>;
    fn params_mut(&mut self) -> Vec<&mut [T]>;

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

impl<T: Scalar> Parameterized<T> for LayerParams<T> {
    fn params(&self) -> Vec<&[T]> {
        vec![self.weight.as_slice(), &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one per parameter slice.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<M: Parameterized<T>>(model: &M) -> Self {
        Self::with_config(model, AdamConfig::default())
    }

    pub fn with_config<M: Parameterized<T>>(model: &M, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        AdamState {
            config,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `model` with gradients `grads`.
    pub fn step<M: Parameterized<T>>(&mut self, model: &mut M, grads: &M, lr: T) -> Result<()> {
        let b1 = T::of(self.config.beta1);
        let b2 = T::of(self.config.beta2);
        let eps = T::of(self.config.eps);
        let mut params = model.params_mut();
        let grads = grads.params();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape("parameter and gradient layouts differ".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (s, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[s].len() {
                return Err(Error::Shape(format!("slice {s} length mismatch")));
            }
            let m = &mut self.m[s];
            let v = &mut self.v[s];
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Relative error used by [`gradcheck`].
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + T::of(1e-12))
}

/// Compares the analytic gradient returned by `loss_and_grad` against
/// fourth-order central differences on every parameter; returns the
/// largest relative error. Probes reach `±2·epsilon`.
pub fn gradcheck<T, M, F>(model: &M, loss_and_grad: F, epsilon: T) -> T
where
    T: Scalar,
    M: Parameterized<T> + Clone,
    F: Fn(&M) -> (T, M),
{
    let (_, grads) = loss_and_grad(model);
    let analytic: Vec<Vec<T>> = grads.params().iter().map(|s| s.to_vec()).collect();
    let mut probe = model.clone();
    let mut worst = T::zero();
    let two = T::of(2.0);
    for (s, slice) in analytic.iter().enumerate() {
        for (k, &a) in slice.iter().enumerate() {
            let orig = probe.params()[s][k];
            let mut at = |h: T| {
                probe.params_mut()[s][k] = orig + h;
                loss_and_grad(&probe).0
            };
            let (p1, m1) = (at(epsilon), at(-epsilon));
            let (p2, m2) = (at(two * epsilon), at(-two * epsilon));
            probe.params_mut()[s][k] = orig;
            let numeric = (T::of(8.0) * (p1 - m1) - (p2 - m2)) / (T::of(12.0) * epsilon);
            let err = relative_error(a, numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_cases() {
        let m = Matrix::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&m).as_slice(), &[0.0, 0.0, 2.0]);
        let neg = Matrix::from_vec(1, 2, vec![-3.0, -0.5]).unwrap();
        assert_eq!(relu(&neg).as_slice(), &[0.0, 0.0]);
        assert_eq!(relu(&relu(&m)), relu(&m));
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, g) = softmax_cross_entropy([0.3, 0.3], 1);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] + 0.5).abs() < 1e-15);
        let (l, _) = softmax_cross_entropy([1.0, 0.0], 0);
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.313262).abs() < 1e-6);
        let (l, g) = softmax_cross_entropy([1000.0f64, 0.0], 0);
        assert!(l.is_finite() && l.abs() < 1e-300);
        assert!(g.iter().all(|v| v.is_finite()));
        let (l, _) = softmax_cross_entropy([1000.0, 0.0], 1);
        assert_eq!(l, 1000.0);
    }

    #[test]
    fn gcn_layer_simple_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = GcnLayerParams::<f64>::glorot(3, 4, &mut rng);
        p.bias = vec![0.1, 0.2, 0.3, 0.4];
        let adj = Matrix::from_fn(2, 2, |_, _| 0.5);
        let out = gcn_layer_forward(&adj, &Matrix::zeros(2, 3), &p).unwrap();
        for i in 0..2 {
            assert_eq!(out.row(i), p.bias.as_slice());
        }
        let id = GcnLayerParams {
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
        };
        let h = Matrix::from_vec(1, 3, vec![1.5, -2.0, 0.25]).unwrap();
        assert_eq!(gcn_layer_forward(&Matrix::identity(1), &h, &id).unwrap(), h);
        assert!(gcn_layer_forward(&Matrix::identity(2), &h, &id).is_err());
        assert!(gcn_layer_forward(&adj, &Matrix::zeros(2, 5), &p).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = LayerParams::<f64>::glorot(2, 2, &mut rng);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        st.step(&mut p, &LayerParams::zeros(2, 2), 0.001).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_against_scalar_reference() {
        // Hand-rolled scalar Adam on a single coordinate.
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8f64, 0.001f64, 0.37f64);
        let (mut m, mut v, mut theta) = (0.0, 0.0, 1.0);
        let mut trace = Vec::new();
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            trace.push(theta);
        }
        let mut p = LayerParams {
            weight: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            bias: vec![1.0],
        };
        let grads = LayerParams {
            weight: Matrix::from_vec(1, 1, vec![g]).unwrap(),
            bias: vec![g],
        };
        let mut st = AdamState::new(&p);
        for want in trace {
            st.step(&mut p, &grads, lr).unwrap();
            assert_eq!(p.weight.get(0, 0), want);
        }
        assert_eq!(st.t, 3);
    }

    #[test]
    fn adam_first_step_magnitude() {
        for g in [1e-3, 0.5, -4.0] {
            let mut p = LayerParams::<f64>::zeros(1, 1);
            let grads = LayerParams {
                weight: Matrix::from_vec(1, 1, vec![g]).unwrap(),
                bias: vec![0.0],
            };
            let mut st = AdamState::new(&p);
            st.step(&mut p, &grads, 0.001).unwrap();
            let expect = 0.001 * g.abs() / (g.abs() + 1e-8);
            let got = p.weight.get(0, 0);
            assert!((got.abs() - expect).abs() < 1e-15, "{got} vs {expect}");
            assert_eq!(got.signum(), -g.signum());
        }
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let a = (6.0f64 / (9.0 + 64.0)).sqrt();
        let w1: Matrix<f64> = glorot_init(9, 64, &mut ChaCha8Rng::seed_from_u64(11));
        let w2: Matrix<f64> = glorot_init(9, 64, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(w1, w2);
        assert!(w1.as_slice().iter().all(|v| v.abs() <= a));
        let big: Matrix<f64> = glorot_init(500, 200, &mut ChaCha8Rng::seed_from_u64(5));
        let mean = big.as_slice().iter().sum::<f64>() / 1e5;
        assert!(mean.abs() < 0.01, "{mean}");
    }

    #[test]
    fn gradcheck_linear_model() {
        // Linear logits z = x·W + b feeding the fused loss.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = LayerParams::<f64>::glorot(5, 2, &mut rng);
        p.bias = vec![0.2, -0.1];
        let x = [0.3, -1.2, 0.5, 2.0, -0.7];
        let f = |m: &LayerParams<f64>| {
            let mut z = [0.0; 2];
            crate::linalg::vec_mat_bias(&x, &m.weight, &m.bias, &mut z);
            let (loss, g) = softmax_cross_entropy(z, 1);
            let mut grad = LayerParams::zeros(5, 2);
            crate::linalg::add_outer(&mut grad.weight, &x, &g);
            grad.bias = g.to_vec();
            (loss, grad)
        };
        let err = gradcheck(&p, f, 1e-5);
        assert!(err <= 1e-9, "{err}");
    }
}
