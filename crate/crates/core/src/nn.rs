//! Dense feed-forward network with hand-written reverse-mode gradients.
//!
//! Parameters are stored as `f32`; forward and backward passes run in `f64`
//! so finite-difference checks stay meaningful. Hidden layers use SiLU, the
//! output layer is linear. Batches are row-major `batch × dim` slices.

use std::io::{Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::seed::rng_from;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CHIM";
const CHECKPOINT_VERSION: u32 = 1;
const ACTIVATION_SILU: u8 = 1;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Denominator floor of the relative error used by [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Layer {
    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

/// Activations cached by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    /// Input of every layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    pub fn get(&self, mut index: usize) -> f64 {
        for l in &self.layers {
            if index < l.weights.len() {
                return l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("gradient index out of range")
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// `c = a · b` for row/column-strided operands, `m×k` times `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass slices whose extents cover every strided
    // index touched for the given shapes; `c` is m×n row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl DenseNet {
    /// Kaiming-uniform fan-in initialization with zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self, NnError> {
        Self::check_dims(dims)?;
        let mut rng = rng_from(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Layer {
                    inputs: w[0],
                    outputs: w[1],
                    weights: (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound) as f32).collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Ok(DenseNet { dims: dims.to_vec(), layers })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, NnError> {
        Self::check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Layer { inputs: w[0], outputs: w[1], weights: vec![0.0; w[0] * w[1]], bias: vec![0.0; w[1]] })
            .collect();
        Ok(DenseNet { dims: dims.to_vec(), layers })
    }

    fn check_dims(dims: &[usize]) -> Result<(), NnError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::InvalidArchitecture(format!("layer dims {dims:?}")));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, bool, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            if index < l.weights.len() {
                return (li, false, index);
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return (li, true, index);
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    /// Parameter by flat index (layer by layer, weights then bias).
    pub fn param(&self, index: usize) -> f32 {
        let (l, is_bias, i) = self.locate(index);
        if is_bias {
            self.layers[l].bias[i]
        } else {
            self.layers[l].weights[i]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f32) {
        let (l, is_bias, i) = self.locate(index);
        if is_bias {
            self.layers[l].bias[i] = value;
        } else {
            self.layers[l].weights[i] = value;
        }
    }

    pub fn params(&self) -> impl Iterator<Item = f32> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(f32::is_finite)
    }

    /// Single-input forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape), NnError> {
        self.forward_batch(x, 1)
    }

    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<(Vec<f64>, Tape), NnError> {
        let expected = batch * self.input_dim();
        if x.len() != expected {
            return Err(NnError::DimensionMismatch { expected, got: x.len() });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let w: Vec<f64> = layer.weights.iter().map(|&v| v as f64).collect();
            let mut z = vec![0.0; batch * layer.outputs];
            gemm(batch, layer.inputs, layer.outputs, &a, layer.inputs, 1, &w, 1, layer.inputs, &mut z);
            for row in z.chunks_exact_mut(layer.outputs) {
                row.iter_mut().zip(&layer.bias).for_each(|(v, &b)| *v += b as f64);
            }
            inputs.push(std::mem::take(&mut a));
            if li < last {
                a = z.iter().map(|&v| silu(v)).collect();
                pre.push(z);
            } else {
                a = z;
            }
        }
        Ok((a, Tape { batch, inputs, pre }))
    }

    /// Forward pass without keeping the tape.
    pub fn predict_batch(&self, x: &[f64], batch: usize) -> Result<Vec<f64>, NnError> {
        self.forward_batch(x, batch).map(|(y, _)| y)
    }

    /// Reverse-mode gradients of a scalar loss given `dL/dy`. Returns the
    /// parameter gradients and `dL/dx`.
    pub fn backward(&self, tape: &Tape, dy: &[f64]) -> Result<(Gradients, Vec<f64>), NnError> {
        let batch = tape.batch;
        let expected = batch * self.output_dim();
        if dy.len() != expected {
            return Err(NnError::DimensionMismatch { expected, got: dy.len() });
        }
        if tape.inputs.len() != self.layers.len() || tape.inputs[0].len() != batch * self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.layers.len(),
                got: tape.inputs.len(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = dy.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            if li < self.layers.len() - 1 {
                delta.iter_mut().zip(&tape.pre[li]).for_each(|(d, &z)| *d *= silu_grad(z));
            }
            let x = &tape.inputs[li];
            let g = &mut grads.layers[li];
            // dW = δᵀ · X
            gemm(layer.outputs, batch, layer.inputs, &delta, 1, layer.outputs, x, layer.inputs, 1, &mut g.weights);
            for row in delta.chunks_exact(layer.outputs) {
                g.bias.iter_mut().zip(row).for_each(|(b, d)| *b += d);
            }
            // dX = δ · W
            let w: Vec<f64> = layer.weights.iter().map(|&v| v as f64).collect();
            let mut dx = vec![0.0; batch * layer.inputs];
            gemm(batch, layer.outputs, layer.inputs, &delta, layer.outputs, 1, &w, layer.inputs, 1, &mut dx);
            delta = dx;
        }
        Ok((grads, delta))
    }
}

/// Adam optimizer state, moments stored as `f32` to match the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        let n = net.param_count();
        AdamState { step: 0, lr, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One bias-corrected Adam update. Any non-finite gradient aborts before a
/// single parameter is touched.
pub fn adam_step(net: &mut DenseNet, grads: &Gradients, state: &mut AdamState) -> Result<(), NnError> {
    let n = net.param_count();
    if state.m.len() != n || state.v.len() != n {
        return Err(NnError::DimensionMismatch { expected: n, got: state.m.len() });
    }
    if grads.layers.len() != net.layers.len() {
        return Err(NnError::DimensionMismatch { expected: net.layers.len(), got: grads.layers.len() });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFiniteGradient(i));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let mut idx = 0;
    for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
        for (p, &gv) in layer.weights.iter_mut().chain(layer.bias.iter_mut()).zip(g.weights.iter().chain(&g.bias)) {
            let m = state.beta1 * state.m[idx] as f64 + (1.0 - state.beta1) * gv;
            let v = state.beta2 * state.v[idx] as f64 + (1.0 - state.beta2) * gv * gv;
            state.m[idx] = m as f32;
            state.v[idx] = v as f32;
            let update = state.lr * (m / c1) / ((v / c2).sqrt() + state.eps);
            *p = (*p as f64 - update) as f32;
            idx += 1;
        }
    }
    Ok(())
}

/// Largest relative error between analytic gradients and central finite
/// differences over `probes` randomly chosen parameters.
///
/// `loss_and_grad` must be deterministic in the network. The perturbation is
/// applied to the `f32` parameter and the difference quotient uses the step
/// that was actually representable.
pub fn grad_check<F, R>(net: &DenseNet, loss_and_grad: F, probes: usize, h: f64, rng: &mut R) -> f64
where
    F: Fn(&DenseNet) -> (f64, Gradients),
    R: Rng + ?Sized,
{
    assert!(probes >= 1, "grad_check needs at least one probe");
    let (_, analytic) = loss_and_grad(net);
    let mut probe_net = net.clone();
    let n = net.param_count();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.random_range(0..n);
        let p0 = net.param(i);
        let plus = (p0 as f64 + h) as f32;
        let minus = (p0 as f64 - h) as f32;
        probe_net.set_param(i, plus);
        let (lp, _) = loss_and_grad(&probe_net);
        probe_net.set_param(i, minus);
        let (lm, _) = loss_and_grad(&probe_net);
        probe_net.set_param(i, p0);
        let fd = (lp - lm) / (plus as f64 - minus as f64);
        let a = analytic.get(i);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

/// Writes the binary checkpoint.
///
/// Layout, little-endian: magic `b"CHIM"`, `u32` version, `u32` layer-dim
/// count, `u32` dims, `u8` activation tag (1 = SiLU hidden / linear output),
/// `u64` parameter count, `f32` parameters (per layer: weights row-major,
/// then bias), `u8` Adam flag, and when set `u64` step, `f64` lr, β1, β2,
/// eps followed by the `f32` first and second moments.
pub fn write_checkpoint<W: Write>(net: &DenseNet, adam: Option<&AdamState>, mut w: W) -> Result<(), NnError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(net.dims.len() as u32).to_le_bytes())?;
    for &d in &net.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&[ACTIVATION_SILU])?;
    w.write_all(&(net.param_count() as u64).to_le_bytes())?;
    for p in net.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    match adam {
        None => w.write_all(&[0])?,
        Some(s) => {
            w.write_all(&[1])?;
            w.write_all(&s.step.to_le_bytes())?;
            for x in [s.lr, s.beta1, s.beta2, s.eps] {
                w.write_all(&x.to_le_bytes())?;
            }
            for x in s.m.iter().chain(&s.v) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], NnError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| NnError::MalformedCheckpoint(format!("truncated: {e}")))?;
    Ok(b)
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, NnError> {
    (0..n).map(|_| Ok(f32::from_le_bytes(read_array(r)?))).collect()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(DenseNet, Option<AdamState>), NnError> {
    if &read_array::<4, _>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(NnError::MalformedCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(NnError::MalformedCheckpoint(format!("unsupported version {version}")));
    }
    let ndims = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if !(2..=64).contains(&ndims) {
        return Err(NnError::MalformedCheckpoint(format!("{ndims} layer dims")));
    }
    let dims = (0..ndims)
        .map(|_| Ok(u32::from_le_bytes(read_array(&mut r)?) as usize))
        .collect::<Result<Vec<_>, NnError>>()?;
    let [tag] = read_array::<1, _>(&mut r)?;
    if tag != ACTIVATION_SILU {
        return Err(NnError::MalformedCheckpoint(format!("unknown activation tag {tag}")));
    }
    let mut net = DenseNet::zeros(&dims).map_err(|e| NnError::MalformedCheckpoint(e.to_string()))?;
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    if count != net.param_count() {
        return Err(NnError::MalformedCheckpoint(format!(
            "parameter count {count} does not match dims ({})",
            net.param_count()
        )));
    }
    for layer in &mut net.layers {
        layer.weights = read_f32s(&mut r, layer.weights.len())?;
        layer.bias = read_f32s(&mut r, layer.bias.len())?;
    }
    let [flag] = read_array::<1, _>(&mut r)?;
    let adam = match flag {
        0 => None,
        1 => {
            let step = u64::from_le_bytes(read_array(&mut r)?);
            let mut hp = [0.0f64; 4];
            for x in &mut hp {
                *x = f64::from_le_bytes(read_array(&mut r)?);
            }
            let m = read_f32s(&mut r, count)?;
            let v = read_f32s(&mut r, count)?;
            Some(AdamState { step, lr: hp[0], beta1: hp[1], beta2: hp[2], eps: hp[3], m, v })
        }
        other => return Err(NnError::MalformedCheckpoint(format!("bad adam flag {other}"))),
    };
    Ok((net, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::gaussian_vec;

    /// `L = ½ Σ ||y - target||²` over the batch.
    fn half_sq_loss(net: &DenseNet, x: &[f64], target: &[f64], batch: usize) -> (f64, Gradients) {
        let (y, tape) = net.forward_batch(x, batch).unwrap();
        let dy: Vec<f64> = y.iter().zip(target).map(|(a, b)| a - b).collect();
        let loss = 0.5 * dy.iter().map(|v| v * v).sum::<f64>();
        (loss, net.backward(&tape, &dy).unwrap().0)
    }

    #[test]
    fn zero_net_outputs_final_bias() {
        let mut net = DenseNet::zeros(&[5, 7, 3]).unwrap();
        net.layers_mut()[1].bias = vec![0.5, -1.0, 2.0];
        let (y, _) = net.forward(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(y, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn identity_layer() {
        let mut net = DenseNet::zeros(&[4, 4]).unwrap();
        for i in 0..4 {
            net.layers_mut()[0].weights[i * 4 + i] = 1.0;
        }
        let x = [0.25, -1.5, 3.0, 7.0];
        assert_eq!(net.forward(&x).unwrap().0, x.to_vec());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let net = DenseNet::new(&[10, 32, 32, 4], 9).unwrap();
        let x = gaussian_vec(&mut rng_from(1), 10);
        let a = net.forward(&x).unwrap().0;
        let b = DenseNet::new(&[10, 32, 32, 4], 9).unwrap().forward(&x).unwrap().0;
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let net = DenseNet::new(&[6, 16, 3], 2).unwrap();
        let x = gaussian_vec(&mut rng_from(3), 18);
        let batch = net.predict_batch(&x, 3).unwrap();
        for r in 0..3 {
            let single = net.forward(&x[r * 6..(r + 1) * 6]).unwrap().0;
            for (a, b) in single.iter().zip(&batch[r * 3..(r + 1) * 3]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let net = DenseNet::new(&[3, 2], 0).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(NnError::DimensionMismatch { .. })));
        let (_, tape) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(net.backward(&tape, &[1.0]), Err(NnError::DimensionMismatch { .. })));
        assert!(DenseNet::new(&[3], 0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = DenseNet::new(&[5, 8, 8, 2], 4).unwrap();
        let (_, tape) = net.forward(&[1.0, -1.0, 0.5, 2.0, 0.0]).unwrap();
        let (g, dx) = net.backward(&tape, &[0.0, 0.0]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_analytic_gradient() {
        let net = DenseNet::new(&[3, 2], 5).unwrap();
        let x = [0.5, -2.0, 1.5];
        let (y, tape) = net.forward(&x).unwrap();
        // L = ½||y||² ⇒ dL/dy = y, dL/dW = y xᵀ
        let (g, _) = net.backward(&tape, &y).unwrap();
        for j in 0..2 {
            for p in 0..3 {
                assert!((g.layers[0].weights[j * 3 + p] - y[j] * x[p]).abs() < 1e-12);
            }
            assert!((g.layers[0].bias[j] - y[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn three_layer_grad_check() {
        let net = DenseNet::new(&[6, 12, 12, 4], 8).unwrap();
        let mut rng = rng_from(10);
        let x = gaussian_vec(&mut rng, 5 * 6);
        let target = gaussian_vec(&mut rng, 5 * 4);
        let err = grad_check(&net, |n| half_sq_loss(n, &x, &target, 5), 10, 1e-3, &mut rng);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let net = DenseNet::new(&[6, 12, 12, 4], 8).unwrap();
        let mut rng = rng_from(10);
        let x = gaussian_vec(&mut rng, 5 * 6);
        let target = gaussian_vec(&mut rng, 5 * 4);
        let corrupted = |n: &DenseNet| {
            let (l, mut g) = half_sq_loss(n, &x, &target, 5);
            let layer = &mut g.layers[1];
            layer.weights.iter_mut().chain(layer.bias.iter_mut()).for_each(|v| *v = -*v);
            (l, g)
        };
        // the flipped layer holds 156 of the 292 parameters
        let err = grad_check(&net, corrupted, 40, 1e-3, &mut rng);
        assert!(err > 1e-1, "sign flip undetected: {err}");
    }

    #[test]
    fn adam_zero_gradient_only_advances_step() {
        let mut net = DenseNet::new(&[3, 4, 2], 1).unwrap();
        let before = net.clone();
        let mut st = AdamState::new(&net, 1e-3);
        let zero = Gradients::zeros_like(&net);
        adam_step(&mut net, &zero, &mut st).unwrap();
        assert_eq!(net, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g, v̂ = g² after bias correction ⇒ |Δ| = lr·|g|/(|g|+eps)
        let mut net = DenseNet::zeros(&[1, 1]).unwrap();
        let mut st = AdamState::new(&net, 1e-3);
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights[0] = 0.37;
        adam_step(&mut net, &g, &mut st).unwrap();
        let expected = 1e-3 * 0.37 / (0.37 + 1e-8);
        assert!((net.param(0) as f64 + expected).abs() < 1e-9);
        assert_eq!(net.param(1), 0.0);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut net = DenseNet::new(&[2, 2], 1).unwrap();
        let before = net.clone();
        let mut st = AdamState::new(&net, 1e-3);
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].bias[1] = f64::NAN;
        assert!(matches!(adam_step(&mut net, &g, &mut st), Err(NnError::NonFiniteGradient(5))));
        assert_eq!(net, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut net = DenseNet::new(&[7, 16, 5], 3).unwrap();
        let mut st = AdamState::new(&net, 2e-3);
        let x = gaussian_vec(&mut rng_from(4), 7);
        let (y, tape) = net.forward(&x).unwrap();
        let (g, _) = net.backward(&tape, &y).unwrap();
        adam_step(&mut net, &g, &mut st).unwrap();

        let mut buf = Vec::new();
        write_checkpoint(&net, Some(&st), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CHIM");
        let (back, back_st) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, net);
        assert_eq!(back_st.unwrap(), st);
        let a = net.forward(&x).unwrap().0;
        let b = back.forward(&x).unwrap().0;
        assert_eq!(a, b);

        let mut plain = Vec::new();
        write_checkpoint(&net, None, &mut plain).unwrap();
        assert!(read_checkpoint(&plain[..]).unwrap().1.is_none());
        assert!(read_checkpoint(&plain[..plain.len() - 3]).is_err());
        plain[0] = b'X';
        assert!(read_checkpoint(&plain[..]).is_err());
    }
}
