//! Fully connected ReLU networks with inverted dropout, exact reverse-mode
//! gradients, an Adam optimizer and a little-endian weight file format.
//!
//! Inputs are stored column-per-sample: a batch of `n` inputs for a network
//! with input width `d` is a `d × n` matrix.
//!
//! Weight file layout (`MLP1`):
//!
//! ```text
//! magic        4 bytes  "MLP1"
//! layer_count  u32 LE   number of affine layers
//! dims         u32 LE × (layer_count + 1)
//! per layer    f64 LE weights, row-major (out × in), then f64 LE biases (out)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MLP1";
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Multilayer perceptron: affine → ReLU → dropout for each hidden layer,
/// affine output layer with no activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    pub dropout_rate: f64,
}

/// Per-hidden-layer keep flags for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Vec<bool>>,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, net: &Mlp) -> Self {
        let keep = 1.0 - net.dropout_rate;
        let layers = net
            .hidden_dims()
            .map(|h| (0..h).map(|_| rng.gen_bool(keep)).collect())
            .collect();
        Self { layers }
    }

    pub fn all_ones(net: &Mlp) -> Self {
        Self { layers: net.hidden_dims().map(|h| vec![true; h]).collect() }
    }
}

/// Dropout multipliers for a batch: one `hidden × n` matrix per hidden layer
/// holding `0` or `1 / keep`.
#[derive(Debug, Clone)]
pub struct BatchMask {
    pub layers: Vec<DMatrix<f64>>,
}

impl BatchMask {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, net: &Mlp, n: usize) -> Self {
        let keep = 1.0 - net.dropout_rate;
        let scale = 1.0 / keep;
        let layers = net
            .hidden_dims()
            .map(|h| DMatrix::from_fn(h, n, |_, _| if rng.gen_bool(keep) { scale } else { 0.0 }))
            .collect();
        Self { layers }
    }

    /// Stacks single-sample masks column-wise.
    pub fn from_masks(net: &Mlp, masks: &[&DropoutMask]) -> Self {
        let scale = 1.0 / (1.0 - net.dropout_rate);
        let layers = net
            .hidden_dims()
            .enumerate()
            .map(|(l, h)| DMatrix::from_fn(h, masks.len(), |i, j| if masks[j].layers[l][i] { scale } else { 0.0 }))
            .collect();
        Self { layers }
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each affine layer (post-dropout for hidden layers).
    inputs: Vec<DMatrix<f64>>,
    /// Derivative of each hidden layer's output w.r.t. its pre-activation
    /// (ReLU indicator times dropout multiplier).
    gates: Vec<DMatrix<f64>>,
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Mlp {
    /// Uniform `±1/√fan_in` initialisation for weights and biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], dropout_rate: f64, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-bound..=bound)),
                    bias: DVector::from_fn(w[1], |_, _| rng.gen_range(-bound..=bound)),
                }
            })
            .collect();
        Self { layers, dropout_rate }
    }

    pub fn zeros(dims: &[usize], dropout_rate: f64) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Layer { weight: DMatrix::zeros(w[1], w[0]), bias: DVector::zeros(w[1]) })
            .collect();
        Self { layers, dropout_rate }
    }

    pub fn from_layers(layers: Vec<Layer>, dropout_rate: f64) -> Result<Self, NnError> {
        for l in &layers {
            if l.weight.nrows() != l.bias.len() {
                return Err(NnError::Dimension { expected: l.weight.nrows(), got: l.bias.len() });
            }
        }
        for w in layers.windows(2) {
            if w[0].weight.nrows() != w[1].weight.ncols() {
                return Err(NnError::Dimension { expected: w[0].weight.nrows(), got: w[1].weight.ncols() });
            }
        }
        Ok(Self { layers, dropout_rate })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.nrows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.nrows()).unwrap_or(0)
    }

    fn hidden_dims(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.weight.nrows())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn affine(layer: &Layer, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &layer.weight * x;
        for mut col in z.column_iter_mut() {
            col += &layer.bias;
        }
        z
    }

    fn check_input(&self, rows: usize) -> Result<(), NnError> {
        if rows != self.input_dim() {
            return Err(NnError::Dimension { expected: self.input_dim(), got: rows });
        }
        Ok(())
    }

    /// Batch forward pass retaining the values needed by [`Mlp::backward_batch`].
    pub fn forward_batch_cached(&self, x: &DMatrix<f64>, mask: Option<&BatchMask>) -> Result<(DMatrix<f64>, ForwardCache), NnError> {
        self.check_input(x.nrows())?;
        let n_hidden = self.layers.len() - 1;
        if let Some(m) = mask {
            if m.layers.len() != n_hidden {
                return Err(NnError::Dimension { expected: n_hidden, got: m.layers.len() });
            }
            for (ml, l) in m.layers.iter().zip(&self.layers) {
                if ml.nrows() != l.weight.nrows() || ml.ncols() != x.ncols() {
                    return Err(NnError::Dimension { expected: l.weight.nrows() * x.ncols(), got: ml.len() });
                }
            }
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut gates = Vec::with_capacity(n_hidden);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Self::affine(layer, &h);
            inputs.push(h);
            if i < n_hidden {
                let mut gate = z.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                if let Some(m) = mask {
                    gate.component_mul_assign(&m.layers[i]);
                }
                z.component_mul_assign(&gate);
                gates.push(gate);
            }
            h = z;
        }
        Ok((h, ForwardCache { inputs, gates }))
    }

    /// Batch forward pass without caching.
    pub fn forward_batch(&self, x: &DMatrix<f64>, mask: Option<&BatchMask>) -> Result<DMatrix<f64>, NnError> {
        self.check_input(x.nrows())?;
        let n_hidden = self.layers.len() - 1;
        let mut h = Self::affine(&self.layers[0], x);
        for i in 0..n_hidden {
            h.apply(|v| *v = v.max(0.0));
            if let Some(m) = mask {
                h.component_mul_assign(&m.layers[i]);
            }
            h = Self::affine(&self.layers[i + 1], &h);
        }
        Ok(h)
    }

    /// Single-sample forward pass. When a mask is supplied, kept activations
    /// are divided by the keep probability; without one, the network runs in
    /// expectation mode.
    pub fn forward(&self, input: &[f64], mask: Option<&DropoutMask>) -> Result<DVector<f64>, NnError> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        let bm = mask.map(|m| BatchMask::from_masks(self, &[m]));
        let y = self.forward_batch(&x, bm.as_ref())?;
        Ok(y.column(0).into_owned())
    }

    /// Reverse pass for a batch. `d_out` is `∂loss/∂output` (`out × n`).
    /// Returns summed parameter gradients and `∂loss/∂input`.
    pub fn backward_batch(&self, cache: &ForwardCache, d_out: &DMatrix<f64>) -> Result<(Gradients, DMatrix<f64>), NnError> {
        if d_out.nrows() != self.output_dim() {
            return Err(NnError::Dimension { expected: self.output_dim(), got: d_out.nrows() });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &cache.inputs[i];
            let weight = &delta * input.transpose();
            let bias = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            grads.push(Layer { weight, bias });
            let mut d_in = layer.weight.transpose() * &delta;
            if i > 0 {
                d_in.component_mul_assign(&cache.gates[i - 1]);
            }
            delta = d_in;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    /// Single-sample gradients of `output_grad · f(input)` w.r.t. the parameters.
    pub fn backward(&self, input: &[f64], mask: Option<&DropoutMask>, output_grad: &[f64]) -> Result<Gradients, NnError> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        let bm = mask.map(|m| BatchMask::from_masks(self, &[m]));
        let (_, cache) = self.forward_batch_cached(&x, bm.as_ref())?;
        let g = DMatrix::from_column_slice(output_grad.len(), 1, output_grad);
        Ok(self.backward_batch(&cache, &g)?.0)
    }

    /// `self ← τ·other + (1 − τ)·self`
    pub fn soft_update_from(&mut self, other: &Mlp, tau: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.zip_apply(&b.weight, |x, y| *x = tau * y + (1.0 - tau) * *x);
            a.bias.zip_apply(&b.bias, |x, y| *x = tau * y + (1.0 - tau) * *x);
        }
    }

    /// Euclidean distance between parameter vectors.
    pub fn distance(&self, other: &Mlp) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| (&a.weight - &b.weight).norm_squared() + (&a.bias - &b.bias).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), NnError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for d in self.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            for r in 0..l.weight.nrows() {
                for c in 0..l.weight.ncols() {
                    w.write_all(&l.weight[(r, c)].to_le_bytes())?;
                }
            }
            for b in l.bias.iter() {
                w.write_all(&b.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a weight file; the dropout rate is not stored and is set to
    /// `dropout_rate`.
    pub fn read_from<R: Read>(r: &mut R, dropout_rate: f64) -> Result<Self, NnError> {
        let mut buf4 = [0u8; 4];
        read_exact(r, &mut buf4, "magic")?;
        if &buf4 != MAGIC {
            return Err(NnError::Malformed("bad magic".into()));
        }
        read_exact(r, &mut buf4, "layer count")?;
        let n = u32::from_le_bytes(buf4) as usize;
        if n == 0 || n > 1024 {
            return Err(NnError::Malformed(format!("implausible layer count {n}")));
        }
        let mut dims = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            read_exact(r, &mut buf4, "dims")?;
            let d = u32::from_le_bytes(buf4) as usize;
            if d == 0 || d > 1 << 20 {
                return Err(NnError::Malformed(format!("implausible width {d}")));
            }
            dims.push(d);
        }
        let mut buf8 = [0u8; 8];
        let mut next = |r: &mut R| -> Result<f64, NnError> {
            read_exact(r, &mut buf8, "parameters")?;
            Ok(f64::from_le_bytes(buf8))
        };
        let mut layers = Vec::with_capacity(n);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut weight = DMatrix::zeros(fan_out, fan_in);
            for row in 0..fan_out {
                for col in 0..fan_in {
                    weight[(row, col)] = next(r)?;
                }
            }
            let mut bias = DVector::zeros(fan_out);
            for b in bias.iter_mut() {
                *b = next(r)?;
            }
            layers.push(Layer { weight, bias });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(NnError::Malformed("trailing bytes after parameters".into()));
        }
        Self::from_layers(layers, dropout_rate)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, dropout_rate: f64) -> Result<Self, NnError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f, dropout_rate)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), NnError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => NnError::Malformed(format!("truncated while reading {what}")),
        _ => NnError::Io(e),
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Gradients,
    v: Gradients,
    t: u64,
}

impl Adam {
    pub fn new(net: &Mlp) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Gradients::zeros_like(net), v: Gradients::zeros_like(net), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descent step `θ ← θ − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        };
        for (((layer, g), m), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut self.m.layers).zip(&mut self.v.layers) {
            update(layer.weight.as_mut_slice(), g.weight.as_slice(), m.weight.as_mut_slice(), v.weight.as_mut_slice());
            update(layer.bias.as_mut_slice(), g.bias.as_slice(), m.bias.as_mut_slice(), v.bias.as_mut_slice());
        }
    }
}
