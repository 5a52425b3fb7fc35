//! Dense networks with explicit forward and backward passes.

mod adam;
mod gradcheck;
mod sphere;

pub use adam::Adam;
pub use gradcheck::{central_difference, max_relative_error, REL_FLOOR};
pub use sphere::{normalize_sphere, normalize_sphere_backward, SPHERE_EPS};

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;

use crate::rng;
use crate::{Error, Result};

/// Multilayer perceptron: ReLU on hidden layers, identity on the output.
///
/// Layer `l` maps a batch `x` (rows are samples) to `x · W_l + b_l`, with
/// `W_l` of shape `[dims[l], dims[l + 1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub seed: u64,
}

/// Per-layer inputs and pre-activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct Cache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Cache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            weights: net
                .weights
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect(),
            biases: net
                .biases
                .iter()
                .map(|b| Array1::zeros(b.raw_dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

impl Mlp {
    /// Fan-in scaled uniform initialisation: every weight and bias of layer
    /// `l` is drawn from `U(-1/sqrt(dims[l]), 1/sqrt(dims[l]))`.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!(
                "layer dims {dims:?} need >= 2 positive entries"
            )));
        }
        let mut r = rng::seeded(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let bound = 1.0 / (dims[l] as f64).sqrt();
            weights.push(Array2::from_shape_fn((dims[l], dims[l + 1]), |_| {
                r.random_range(-bound..bound)
            }));
            biases.push(Array1::from_shape_fn(dims[l + 1], |_| {
                r.random_range(-bound..bound)
            }));
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
            seed,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let mut net = Mlp::new(dims, 0)?;
        net.weights.iter_mut().for_each(|w| w.fill(0.0));
        net.biases.iter_mut().for_each(|b| b.fill(0.0));
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input width {} but network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Output only, without recording a cache.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in 0..self.n_layers() {
            let mut z = h.dot(&self.weights[l]) + &self.biases[l];
            if l + 1 < self.n_layers() {
                z.mapv_inplace(relu);
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Cache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut h = x.clone();
        for l in 0..self.n_layers() {
            let z = h.dot(&self.weights[l]) + &self.biases[l];
            inputs.push(h);
            h = if l + 1 < self.n_layers() {
                z.mapv(relu)
            } else {
                z.clone()
            };
            pre.push(z);
        }
        Ok((h, Cache { inputs, pre }))
    }

    /// Reverse-mode gradients of `Σ grad_out ⊙ output` with respect to the
    /// parameters and the input. ReLU uses subgradient 0 at 0.
    pub fn backward(
        &self,
        cache: &Cache,
        grad_out: &Array2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        if cache.inputs.len() != self.n_layers()
            || cache
                .inputs
                .iter()
                .zip(&self.dims)
                .any(|(x, &d)| x.ncols() != d)
            || grad_out.dim() != (cache.batch_size(), self.output_dim())
        {
            return Err(Error::shape(
                "cache or output gradient does not match this network",
            ));
        }
        let n = self.n_layers();
        let mut gw = vec![Array2::zeros((0, 0)); n];
        let mut gb = vec![Array1::zeros(0); n];
        let mut g = grad_out.clone();
        for l in (0..n).rev() {
            if l + 1 < n {
                g.zip_mut_with(&cache.pre[l], |gi, &z| {
                    if z <= 0.0 {
                        *gi = 0.0
                    }
                });
            }
            gw[l] = cache.inputs[l]
                .t()
                .dot(&g)
                .as_standard_layout()
                .into_owned();
            gb[l] = g.sum_axis(Axis(0));
            g = g.dot(&self.weights[l].t());
        }
        Ok((
            MlpGrads {
                weights: gw,
                biases: gb,
            },
            g.as_standard_layout().into_owned(),
        ))
    }

    /// All parameters in declared layer order: `W_0, b_0, W_1, b_1, ...`, row-major.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::shape(format!(
                "{} parameters for a {}-parameter net",
                flat.len(),
                self.n_params()
            )));
        }
        let mut i = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for x in w.iter_mut().chain(b.iter_mut()) {
                *x = flat[i];
                i += 1;
            }
        }
        Ok(())
    }

    /// Mutable parameter slices with names, in declared order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (l, (w, b)) in self
            .weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .enumerate()
        {
            out.push((format!("W{l}"), w.as_slice_mut().expect("standard layout")));
            out.push((format!("b{l}"), b.as_slice_mut().expect("standard layout")));
        }
        out
    }

    /// `θ ← (1 - μ) θ + μ θ_src`, elementwise.
    pub fn polyak_from(&mut self, src: &Mlp, mu: f64) {
        for (a, b) in self.weights.iter_mut().zip(&src.weights) {
            a.zip_mut_with(b, |x, &y| *x = (1.0 - mu) * *x + mu * y);
        }
        for (a, b) in self.biases.iter_mut().zip(&src.biases) {
            a.zip_mut_with(b, |x, &y| *x = (1.0 - mu) * *x + mu * y);
        }
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        writeln!(
            w,
            "igdf-net v1; dims={}; seed={}",
            dims.join(","),
            self.seed
        )?;
        for x in self.flat_params() {
            writeln!(w, "{x:.16e}")?;
        }
        Ok(())
    }

    /// Reads one network block; `line_no` tracks the line position for error messages.
    pub fn read_text<R: BufRead>(
        lines: &mut std::io::Lines<R>,
        line_no: &mut usize,
    ) -> Result<Mlp> {
        *line_no += 1;
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(*line_no, "missing network header"))??;
        let rest = header
            .strip_prefix("igdf-net v1; dims=")
            .ok_or_else(|| Error::parse(*line_no, "expected `igdf-net v1; dims=...` header"))?;
        let (dims, seed) = rest
            .split_once("; seed=")
            .ok_or_else(|| Error::parse(*line_no, "missing seed"))?;
        let dims: Vec<usize> = dims
            .split(',')
            .map(|d| {
                d.trim()
                    .parse()
                    .map_err(|_| Error::parse(*line_no, format!("bad dim `{d}`")))
            })
            .collect::<Result<_>>()?;
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| Error::parse(*line_no, "bad seed"))?;
        let mut net = Mlp::new(&dims, seed)?;
        let mut flat = Vec::with_capacity(net.n_params());
        for _ in 0..net.n_params() {
            *line_no += 1;
            let l = lines
                .next()
                .ok_or_else(|| Error::parse(*line_no, "truncated parameter list"))??;
            flat.push(
                l.trim()
                    .parse()
                    .map_err(|_| Error::parse(*line_no, format!("bad parameter `{l}`")))?,
            );
        }
        net.set_flat_params(&flat)?;
        Ok(net)
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("Vec write");
        String::from_utf8(buf).expect("ASCII")
    }

    pub fn from_text(s: &str) -> Result<Mlp> {
        let mut lines = s.as_bytes().lines();
        Mlp::read_text(&mut lines, &mut 0)
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

/// Mean softmax cross-entropy of `logits` against class `labels`, and its gradient.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let logp = log_softmax_rows(logits);
    let mut grad = logp.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    (loss / n, grad / n)
}

/// Stack rows of equal width into a matrix.
pub fn rows_to_matrix(rows: &[Vec<f64>], width: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((rows.len(), width), flat).expect("rows of equal width")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_input(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::seeded(seed);
        Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 8, 2]).unwrap();
        let y = net.predict(&random_input(4, 3, 0)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut net = Mlp::zeros(&[3, 3]).unwrap();
        net.weights[0] = Array2::eye(3);
        let x = random_input(5, 3, 1);
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn forward_is_deterministic_and_matches_predict() {
        let net = Mlp::new(&[4, 16, 16, 3], 9).unwrap();
        let x = random_input(7, 4, 2);
        let (a, _) = net.forward(&x).unwrap();
        let (b, _) = net.forward(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, net.predict(&x).unwrap());
        assert!(net.predict(&random_input(2, 5, 0)).is_err());
    }

    #[test]
    fn linear_layer_closed_form_gradient() {
        // loss ½‖Wx‖² → dW = x (Wx)ᵀ in the (in, out) layout
        let mut net = Mlp::zeros(&[2, 2]).unwrap();
        net.weights[0] = array![[1.0, 2.0], [3.0, 4.0]];
        let x = array![[0.5, -1.0]];
        let (y, cache) = net.forward(&x).unwrap();
        let (g, _) = net.backward(&cache, &y).unwrap();
        assert_eq!(g.weights[0], x.t().dot(&y));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            let net = Mlp::new(&[3, 6, 5, 2], seed).unwrap();
            let x = random_input(4, 3, seed + 100);
            let target = random_input(4, 2, seed + 200);
            let loss = |n: &Mlp, x: &Array2<f64>| {
                0.5 * (n.predict(x).unwrap() - &target).mapv(|d| d * d).sum()
            };
            let (y, cache) = net.forward(&x).unwrap();
            let (g, gx) = net.backward(&cache, &(y - &target)).unwrap();
            let theta = net.flat_params();
            let numeric = central_difference(
                |p| {
                    let mut n = net.clone();
                    n.set_flat_params(p).unwrap();
                    loss(&n, &x)
                },
                &theta,
                1e-6,
            );
            assert!(max_relative_error(&g.flat(), &numeric) < 1e-5);
            let xf: Vec<f64> = x.iter().copied().collect();
            let numeric_x = central_difference(
                |p| loss(&net, &Array2::from_shape_vec((4, 3), p.to_vec()).unwrap()),
                &xf,
                1e-6,
            );
            assert!(max_relative_error(&gx.iter().copied().collect::<Vec<_>>(), &numeric_x) < 1e-5);
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut net = Mlp::zeros(&[1, 1, 1]).unwrap();
        net.weights[0][[0, 0]] = 1.0;
        net.weights[1][[0, 0]] = 1.0;
        let (_, cache) = net.forward(&array![[0.0]]).unwrap();
        let (_, gx) = net.backward(&cache, &array![[1.0]]).unwrap();
        assert_eq!(gx[[0, 0]], 0.0);
    }

    #[test]
    fn stale_cache_rejected() {
        let a = Mlp::new(&[3, 4, 2], 0).unwrap();
        let b = Mlp::new(&[5, 4, 2], 0).unwrap();
        let (_, cache) = a.forward(&random_input(2, 3, 0)).unwrap();
        assert!(b.backward(&cache, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = Mlp::new(&[3, 7, 2], 42).unwrap();
        let back = Mlp::from_text(&net.to_text()).unwrap();
        assert_eq!(back, net);
        assert!(net
            .to_text()
            .starts_with("igdf-net v1; dims=3,7,2; seed=42\n"));
    }

    #[test]
    fn polyak_extremes() {
        let q = Mlp::new(&[2, 3, 1], 1).unwrap();
        let mut t = Mlp::zeros(&[2, 3, 1]).unwrap();
        t.polyak_from(&q, 1.0);
        assert_eq!(
            t,
            Mlp {
                seed: 0,
                ..q.clone()
            }
        );
    }
}
