//! Fully connected `tanh` network `u(x; Θ)` with a scalar linear output.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{jet_affine_forward, jet_seed, jet_tanh_forward, DualScalar, Scalar, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::linalg::Mat;

/// Parameters are stored layer by layer, each layer as its `n_in x n_out`
/// row-major weight matrix followed by its `n_out` biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateNet {
    layer_sizes: Vec<usize>,
    seed: u64,
    params: Vec<f64>,
}

/// Value, input gradient and Laplacian of the network at a batch of points.
#[derive(Clone, Debug)]
pub struct Jet {
    pub value: Vec<f64>,
    /// `n x d`.
    pub grad: Mat,
    pub laplacian: Vec<f64>,
}

/// Tape handles for the network outputs at a batch; each is `n x 1`.
#[derive(Clone, Debug)]
pub struct TapeJet {
    pub value: Var,
    pub grad: Vec<Var>,
    pub laplacian: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
struct LayerSlots {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

impl SurrogateNet {
    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(layer_sizes));
        for pair in layer_sizes.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, 1.0 / (n_in as f64).sqrt()).expect("positive scale");
            params.extend((0..n_in * n_out).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, n_out));
        }
        Ok(SurrogateNet { layer_sizes: layer_sizes.to_vec(), seed, params })
    }

    pub fn from_params(layer_sizes: &[usize], seed: u64, params: Vec<f64>) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let expected = param_count(layer_sizes);
        if params.len() != expected {
            return Err(contract(format!("expected {expected} parameters, got {}", params.len())));
        }
        Ok(SurrogateNet { layer_sizes: layer_sizes.to_vec(), seed, params })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn slots(&self) -> Vec<LayerSlots> {
        let mut off = 0;
        self.layer_sizes
            .windows(2)
            .map(|p| {
                let s = LayerSlots { n_in: p[0], n_out: p[1], w: off, b: off + p[0] * p[1] };
                off += p[0] * p[1] + p[1];
                s
            })
            .collect()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(contract(format!("point has {} coordinates, network expects {}", x.len(), self.dim())));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("input point {x:?}")));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.forward_scalar(x))
    }

    fn forward_scalar<S: Scalar>(&self, x: &[S]) -> S {
        let mut a = x.to_vec();
        let slots = self.slots();
        for (l, s) in slots.iter().enumerate() {
            let mut z: Vec<S> = self.params[s.b..s.b + s.n_out].iter().map(|&b| S::from_f64(b)).collect();
            for (i, ai) in a.iter().enumerate() {
                let row = &self.params[s.w + i * s.n_out..s.w + (i + 1) * s.n_out];
                for (zj, &w) in z.iter_mut().zip(row) {
                    *zj = *zj + *ai * S::from_f64(w);
                }
            }
            a = if l + 1 < slots.len() { z.into_iter().map(Scalar::tanh).collect() } else { z };
        }
        a[0]
    }

    /// `∇_x u` by a reverse sweep through the layers.
    pub fn grad_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(self.grad_scalar(x))
    }

    fn grad_scalar<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let slots = self.slots();
        let hidden = slots.len() - 1;
        // Forward pass keeping every hidden activation.
        let mut acts: Vec<Vec<S>> = vec![x.to_vec()];
        for s in &slots[..hidden] {
            let a = acts.last().expect("nonempty");
            let mut z: Vec<S> = self.params[s.b..s.b + s.n_out].iter().map(|&b| S::from_f64(b)).collect();
            for (i, ai) in a.iter().enumerate() {
                let row = &self.params[s.w + i * s.n_out..s.w + (i + 1) * s.n_out];
                for (zj, &w) in z.iter_mut().zip(row) {
                    *zj = *zj + *ai * S::from_f64(w);
                }
            }
            acts.push(z.into_iter().map(Scalar::tanh).collect());
        }
        let out = slots[hidden];
        let mut adj: Vec<S> = (0..out.n_in).map(|i| S::from_f64(self.params[out.w + i])).collect();
        for (l, s) in slots[..hidden].iter().enumerate().rev() {
            let t = &acts[l + 1];
            let dz: Vec<S> = adj.iter().zip(t).map(|(&g, &ti)| g * (S::from_f64(1.0) - ti * ti)).collect();
            adj = (0..s.n_in)
                .map(|i| {
                    let row = &self.params[s.w + i * s.n_out..s.w + (i + 1) * s.n_out];
                    row.iter().zip(&dz).fold(S::from_f64(0.0), |acc, (&w, &g)| acc + S::from_f64(w) * g)
                })
                .collect();
        }
        adj
    }

    /// `Δu` by `d` forward-mode sweeps over the reverse-mode gradient.
    pub fn laplacian(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok((0..x.len()).map(|i| self.grad_scalar(&DualScalar::seed(x, i))[i].tangent).sum())
    }

    /// Values at the rows of `x`.
    pub fn eval_batch(&self, x: &Mat) -> Result<Vec<f64>> {
        self.check_batch(x)?;
        Ok(self.propagate(jet_seed(x, false), 1).into_vec())
    }

    /// Value, gradient and Laplacian at the rows of `x` in one batched pass.
    pub fn jet_batch(&self, x: &Mat) -> Result<Jet> {
        self.check_batch(x)?;
        let (n, d) = x.shape();
        let channels = d + 2;
        let out = self.propagate(jet_seed(x, true), channels).into_vec();
        let mut grad = Mat::zeros(n, d);
        for i in 0..d {
            for r in 0..n {
                grad.set(r, i, out[(1 + i) * n + r]);
            }
        }
        Ok(Jet { value: out[..n].to_vec(), grad, laplacian: out[(d + 1) * n..].to_vec() })
    }

    fn propagate(&self, mut h: Mat, channels: usize) -> Mat {
        let slots = self.slots();
        let last = slots.len() - 1;
        for (l, s) in slots.iter().enumerate() {
            let w = Mat::from_vec(s.n_in, s.n_out, self.params[s.w..s.b].to_vec());
            let b = Mat::from_vec(1, s.n_out, self.params[s.b..s.b + s.n_out].to_vec());
            h = if l < last { jet_tanh_forward(&h, &w, &b, channels).0 } else { jet_affine_forward(&h, &w, &b, channels) };
        }
        h
    }

    fn check_batch(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(contract(format!("batch has {} columns, network expects {}", x.cols(), self.dim())));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("batch contains non-finite coordinates".into()));
        }
        Ok(())
    }

    /// Records the network on `tape` at the `n x d` node `x`. The tape's
    /// parameter vector must be this network's. With `derivs`, gradient and
    /// Laplacian nodes are produced as well.
    pub fn on_tape(&self, tape: &mut Tape, x: Var, derivs: bool) -> Result<TapeJet> {
        if tape.param_len() != self.param_count() {
            return Err(contract("tape parameter length does not match the network"));
        }
        let (n, d) = tape.value(x).shape();
        if d != self.dim() {
            return Err(contract(format!("batch has {d} columns, network expects {}", self.dim())));
        }
        let channels = if derivs { d + 2 } else { 1 };
        let slots = self.slots();
        let last = slots.len() - 1;
        let mut h = tape.jet_input(x, derivs);
        for (l, s) in slots.iter().enumerate() {
            let w = tape.param(&self.params, s.w, s.n_in, s.n_out);
            let b = tape.param(&self.params, s.b, 1, s.n_out);
            h = if l < last { tape.jet_tanh(h, w, b, channels) } else { tape.jet_affine(h, w, b, channels) };
        }
        debug_assert_eq!(tape.value(h).shape(), (channels * n, 1));
        let value = if derivs { tape.block(h, 0, channels) } else { h };
        let grad = if derivs { (1..=d).map(|i| tape.block(h, i, channels)).collect() } else { Vec::new() };
        let laplacian = derivs.then(|| tape.block(h, d + 1, channels));
        Ok(TapeJet { value, grad, laplacian })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: SurrogateNet = serde_json::from_str(s)?;
        Self::from_params(&net.layer_sizes, net.seed, net.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Artifact { path: path.to_path_buf(), msg: e.to_string() })
    }
}

pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config("network needs at least an input and an output layer".into()));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config(format!("layer sizes must be positive, got {layer_sizes:?}")));
    }
    if *layer_sizes.last().expect("nonempty") != 1 {
        return Err(Error::Config("the output layer must have width 1".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_for_five_hidden_layers() {
        let net = SurrogateNet::new(&[2, 32, 32, 32, 32, 32, 1], 0).unwrap();
        assert_eq!(net.param_count(), 4353);
    }

    #[test]
    fn invalid_sizes_are_config_errors() {
        assert!(matches!(SurrogateNet::new(&[2], 0), Err(Error::Config(_))));
        assert!(matches!(SurrogateNet::new(&[2, 0, 1], 0), Err(Error::Config(_))));
        assert!(matches!(SurrogateNet::new(&[2, 4, 3], 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_hidden_weights_give_output_bias() {
        let mut net = SurrogateNet::new(&[3, 4, 1], 1).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let n = net.param_count();
        net.params_mut()[n - 1] = 0.75;
        assert_eq!(net.eval(&[0.3, -1.0, 2.0]).unwrap(), 0.75);
        assert_eq!(net.grad_input(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = SurrogateNet::new(&[2, 4, 1], 0).unwrap();
        assert!(matches!(net.eval(&[1.0]), Err(Error::Contract(_))));
        assert!(matches!(net.eval(&[f64::NAN, 0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn batched_jet_matches_pointwise_paths() {
        let net = SurrogateNet::new(&[3, 8, 8, 1], 4).unwrap();
        let x = Mat::from_fn(5, 3, |i, j| 0.3 * i as f64 - 0.2 * j as f64);
        let jet = net.jet_batch(&x).unwrap();
        for (r, row) in x.iter_rows().enumerate() {
            assert!((jet.value[r] - net.eval(row).unwrap()).abs() < 1e-14);
            let g = net.grad_input(row).unwrap();
            for (i, gi) in g.iter().enumerate() {
                assert!((jet.grad.get(r, i) - gi).abs() < 1e-13);
            }
            assert!((jet.laplacian[r] - net.laplacian(row).unwrap()).abs() < 1e-12);
        }
    }
}
