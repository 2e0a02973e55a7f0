//! Feed-forward tanh networks with exact derivatives.
//!
//! Parameters live in one flat vector, layer by layer, each layer stored as
//! its row-major weight matrix (`out × in`) followed by its bias. Hidden
//! layers use `tanh`, the output layer is linear.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

const SNAPSHOT_MAGIC: &[u8; 8] = b"MLPF64v1";

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    flat: Vec<f64>,
}

/// Activations of one forward pass; `activations[0]` is the input and the
/// last entry is the network output.
#[derive(Debug, Clone)]
pub struct Trace {
    pub activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has at least the input")
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

impl MlpParams {
    pub fn param_count(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|p| (p[0] + 1) * p[1]).sum()
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidInput(format!("bad layer sizes {layer_sizes:?}")));
        }
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            flat: vec![0.0; Self::param_count(layer_sizes)],
        })
    }

    pub fn from_flat(layer_sizes: &[usize], flat: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes)?;
        if flat.len() != p.flat.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                p.flat.len(),
                flat.len()
            )));
        }
        p.flat = flat;
        Ok(p)
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases; the output layer's
    /// weights are multiplied by `output_scale`.
    pub fn init<R: Rng + ?Sized>(layer_sizes: &[usize], output_scale: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes)?;
        let layers = p.layers();
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            let scale = if i == last { output_scale } else { 1.0 };
            for w in &mut p.flat[l.w..l.b] {
                *w = scale * rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut off = 0;
        self.layer_sizes
            .windows(2)
            .map(|p| {
                let l = Layer {
                    w: off,
                    b: off + p[0] * p[1],
                    fan_in: p[0],
                    fan_out: p[1],
                };
                off += (p[0] + 1) * p[1];
                l
            })
            .collect()
    }

    /// Per-layer `(weights, bias)` copies.
    pub fn unflatten(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers()
            .iter()
            .map(|l| (self.flat[l.w..l.b].to_vec(), self.flat[l.b..l.b + l.fan_out].to_vec()))
            .collect()
    }

    pub fn flatten(layer_sizes: &[usize], layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let flat: Vec<f64> = layers.iter().flat_map(|(w, b)| w.iter().chain(b)).copied().collect();
        Self::from_flat(layer_sizes, flat)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input length {} != {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_upstream(&self, upstream: &[f64]) -> Result<()> {
        if upstream.len() != self.output_dim() {
            return Err(Error::InvalidInput(format!(
                "upstream length {} != {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut h = input.to_vec();
        let layers = self.layers();
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            h = self.affine(l, &h);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok(h)
    }

    pub fn trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut activations = Vec::with_capacity(layers.len() + 1);
        activations.push(input.to_vec());
        for (i, l) in layers.iter().enumerate() {
            let mut z = self.affine(l, activations.last().unwrap());
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        Ok(Trace { activations })
    }

    fn affine(&self, l: &Layer, h: &[f64]) -> Vec<f64> {
        let w = &self.flat[l.w..l.b];
        let b = &self.flat[l.b..l.b + l.fan_out];
        (0..l.fan_out)
            .map(|o| {
                let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                b[o] + row.iter().zip(h).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect()
    }

    /// Reverse pass for `upstreamᵀ·f(θ, x)`. Adds `scale ·` the parameter
    /// gradient into `grad_params` (if given) and returns the input gradient.
    pub fn backward(&self, trace: &Trace, upstream: &[f64], scale: f64, mut grad_params: Option<&mut [f64]>) -> Vec<f64> {
        let layers = self.layers();
        let mut delta = upstream.to_vec();
        for (i, l) in layers.iter().enumerate().rev() {
            let a_in = &trace.activations[i];
            if let Some(g) = grad_params.as_deref_mut() {
                for o in 0..l.fan_out {
                    let d = scale * delta[o];
                    if d != 0.0 {
                        let row = &mut g[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in];
                        for (gw, x) in row.iter_mut().zip(a_in) {
                            *gw += d * x;
                        }
                    }
                    g[l.b + o] += d;
                }
            }
            let w = &self.flat[l.w..l.b];
            let mut prev = vec![0.0; l.fan_in];
            for (o, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                    for (p, wv) in prev.iter_mut().zip(row) {
                        *p += wv * d;
                    }
                }
            }
            if i > 0 {
                for (p, a) in prev.iter_mut().zip(a_in) {
                    *p *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
        delta
    }

    /// Forward-mode derivative of the output along parameter tangent `v`.
    pub fn jvp_params(&self, trace: &Trace, v: &[f64]) -> Vec<f64> {
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut tangent = vec![0.0; self.input_dim()];
        for (i, l) in layers.iter().enumerate() {
            let a_in = &trace.activations[i];
            let w = &self.flat[l.w..l.b];
            let dw = &v[l.w..l.b];
            let db = &v[l.b..l.b + l.fan_out];
            let mut dz: Vec<f64> = (0..l.fan_out)
                .map(|o| {
                    let r = o * l.fan_in..(o + 1) * l.fan_in;
                    let mut acc = db[o];
                    for ((dwv, x), (wv, t)) in dw[r.clone()].iter().zip(a_in).zip(w[r].iter().zip(&tangent)) {
                        acc += dwv * x + wv * t;
                    }
                    acc
                })
                .collect();
            if i < last {
                for (d, a) in dz.iter_mut().zip(&trace.activations[i + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            tangent = dz;
        }
        tangent
    }

    /// Exact gradient of `upstreamᵀ·forward(input)` with respect to the flat parameters.
    pub fn grad_params(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_upstream(upstream)?;
        let trace = self.trace(input)?;
        let mut g = vec![0.0; self.flat.len()];
        self.backward(&trace, upstream, 1.0, Some(&mut g));
        Ok(g)
    }

    /// Exact gradient of `upstreamᵀ·forward(input)` with respect to the input.
    pub fn grad_input(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_upstream(upstream)?;
        let trace = self.trace(input)?;
        Ok(self.backward(&trace, upstream, 1.0, None))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&(self.layer_sizes.len() as u32).to_le_bytes())?;
        for s in &self.layer_sizes {
            out.write_all(&(*s as u32).to_le_bytes())?;
        }
        out.write_all(&(self.flat.len() as u64).to_le_bytes())?;
        for v in &self.flat {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::InvalidInput("not a parameter snapshot".into()));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        let n_layers = u32::from_le_bytes(u32buf) as usize;
        if n_layers > 1024 {
            return Err(Error::InvalidInput("implausible layer count".into()));
        }
        let mut sizes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            input.read_exact(&mut u32buf)?;
            sizes.push(u32::from_le_bytes(u32buf) as usize);
        }
        let mut u64buf = [0u8; 8];
        input.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        if count != Self::param_count(&sizes) {
            return Err(Error::InvalidInput("parameter count does not match header".into()));
        }
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            input.read_exact(&mut u64buf)?;
            flat.push(f64::from_le_bytes(u64buf));
        }
        Self::from_flat(&sizes, flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// `c ← alpha·a·b + beta·c` on strided `m×k` and `k×n` operands; strides
/// are `(row, col)` in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access, and `c` is
    // row-major `m×n` and does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Activations of a whole batch, each layer stored row-major
/// (`batch × width`).
#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub batch: usize,
    pub activations: Vec<Vec<f64>>,
}

impl BatchTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has an output layer")
    }
}

impl MlpParams {
    /// Forward pass over `batch` inputs stored row-major in `inputs`.
    pub fn batch_trace(&self, inputs: &[f64], batch: usize) -> Result<BatchTrace> {
        if inputs.len() != batch * self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "batch of {batch} needs {} input values, got {}",
                batch * self.input_dim(),
                inputs.len()
            )));
        }
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut activations = Vec::with_capacity(layers.len() + 1);
        activations.push(inputs.to_vec());
        for (i, l) in layers.iter().enumerate() {
            let bias = &self.flat[l.b..l.b + l.fan_out];
            let mut z: Vec<f64> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
            // z = a·Wᵀ + b
            gemm(
                batch,
                l.fan_in,
                l.fan_out,
                1.0,
                &activations[i],
                (l.fan_in, 1),
                &self.flat[l.w..l.b],
                (1, l.fan_in),
                1.0,
                &mut z,
            );
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        Ok(BatchTrace { batch, activations })
    }

    /// Batched reverse pass: adds `Σ_b upstream_bᵀ·∂f(θ, x_b)/∂θ` into
    /// `grad_params`. `upstream` is row-major `batch × output_dim`.
    pub fn batch_backward(&self, trace: &BatchTrace, upstream: &[f64], grad_params: &mut [f64]) {
        let layers = self.layers();
        let batch = trace.batch;
        let mut delta = upstream.to_vec();
        for (i, l) in layers.iter().enumerate().rev() {
            let a_in = &trace.activations[i];
            {
                let (gw, gb) = grad_params[l.w..l.b + l.fan_out].split_at_mut(l.b - l.w);
                // gW += deltaᵀ·a
                gemm(l.fan_out, batch, l.fan_in, 1.0, &delta, (1, l.fan_out), a_in, (l.fan_in, 1), 1.0, gw);
                for row in delta.chunks_exact(l.fan_out) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; batch * l.fan_in];
            gemm(
                batch,
                l.fan_out,
                l.fan_in,
                1.0,
                &delta,
                (l.fan_out, 1),
                &self.flat[l.w..l.b],
                (l.fan_in, 1),
                0.0,
                &mut prev,
            );
            for (p, a) in prev.iter_mut().zip(a_in) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }
}

/// Compares analytic gradients of `sum(forward(θ, x))` against central
/// differences, over every parameter and input coordinate. Returns
/// `max |analytic − numeric| / max(1, |analytic|)`.
pub fn finite_diff_check(params: &MlpParams, input: &[f64], step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    let ones = vec![1.0; params.output_dim()];
    let analytic_p = params.grad_params(input, &ones)?;
    let analytic_x = params.grad_input(input, &ones)?;
    let scalar = |p: &MlpParams, x: &[f64]| -> Result<f64> { Ok(p.forward(x)?.iter().sum()) };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(1.0);

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (i, a) in analytic_p.iter().enumerate() {
        let orig = probe.flat[i];
        probe.flat[i] = orig + step;
        let up = scalar(&probe, input)?;
        probe.flat[i] = orig - step;
        let down = scalar(&probe, input)?;
        probe.flat[i] = orig;
        worst = worst.max(rel(*a, (up - down) / (2.0 * step)));
    }
    let mut x = input.to_vec();
    for (i, a) in analytic_x.iter().enumerate() {
        let orig = x[i];
        x[i] = orig + step;
        let up = scalar(params, &x)?;
        x[i] = orig - step;
        let down = scalar(params, &x)?;
        x[i] = orig;
        worst = worst.max(rel(*a, (up - down) / (2.0 * step)));
    }
    Ok(worst)
}

/// Deterministic policy `π(s) = mid + half ⊙ tanh(net(s))`, always inside
/// the action box.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicPolicy {
    pub net: MlpParams,
    low: Vec<f64>,
    high: Vec<f64>,
}

/// Forward pass of a policy, retained for vector-Jacobian and
/// Jacobian-vector products.
#[derive(Debug, Clone)]
pub struct PolicyTrace {
    pub net: Trace,
    pub action: Vec<f64>,
    /// `∂action/∂net_output`, diagonal.
    pub squash_slope: Vec<f64>,
}

impl DeterministicPolicy {
    pub fn new(net: MlpParams, low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != net.output_dim() || high.len() != net.output_dim() {
            return Err(Error::InvalidInput("action bounds do not match network output".into()));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidInput("action_low must be < action_high".into()));
        }
        Ok(DeterministicPolicy { net, low, high })
    }

    /// `hidden` layers between `state_dim` and the action dimension; the
    /// output layer is scaled by 0.01 so the initial actions are near the
    /// box center.
    pub fn init<R: Rng + ?Sized>(
        state_dim: usize,
        hidden: &[usize],
        low: Vec<f64>,
        high: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(low.len());
        Self::new(MlpParams::init(&sizes, 0.01, rng)?, low, high)
    }

    pub fn with_params(&self, flat: &[f64]) -> Self {
        let mut p = self.clone();
        p.net.flat_mut().copy_from_slice(flat);
        p
    }

    pub fn params(&self) -> &[f64] {
        self.net.flat()
    }

    pub fn num_params(&self) -> usize {
        self.net.len()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    pub fn trace(&self, state: &[f64]) -> Result<PolicyTrace> {
        let net = self.net.trace(state)?;
        let mut action = Vec::with_capacity(self.low.len());
        let mut squash_slope = Vec::with_capacity(self.low.len());
        for (y, (lo, hi)) in net.output().iter().zip(self.low.iter().zip(&self.high)) {
            let half = 0.5 * (hi - lo);
            let t = y.tanh();
            action.push(0.5 * (hi + lo) + half * t);
            squash_slope.push(half * (1.0 - t * t));
        }
        Ok(PolicyTrace {
            net,
            action,
            squash_slope,
        })
    }

    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(state)?.action)
    }

    /// Adds `scale · Jᵀ·upstream` to `grad`, where `J = ∂π(s)/∂θ`.
    pub fn accumulate_vjp(&self, trace: &PolicyTrace, upstream: &[f64], scale: f64, grad: &mut [f64]) {
        let u: Vec<f64> = upstream.iter().zip(&trace.squash_slope).map(|(u, s)| u * s).collect();
        self.net.backward(&trace.net, &u, scale, Some(grad));
    }

    /// `J·v` for a parameter tangent `v`.
    pub fn jvp(&self, trace: &PolicyTrace, v: &[f64]) -> Vec<f64> {
        self.net
            .jvp_params(&trace.net, v)
            .iter()
            .zip(&trace.squash_slope)
            .map(|(t, s)| t * s)
            .collect()
    }
}

impl crate::cmdp::ActionMap for DeterministicPolicy {
    fn action(&self, state: &[f64]) -> Vec<f64> {
        self.act(state).expect("state dimension matches policy input")
    }
}

/// `Q(s, a)` as an MLP on the concatenated `[s, a]` input.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    pub net: MlpParams,
    state_dim: usize,
}

impl QFunction {
    pub fn new(net: MlpParams, state_dim: usize) -> Result<Self> {
        if net.output_dim() != 1 || net.input_dim() <= state_dim {
            return Err(Error::InvalidInput("Q network must map state+action to a scalar".into()));
        }
        Ok(QFunction { net, state_dim })
    }

    pub fn init<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self::new(MlpParams::init(&sizes, 1.0, rng)?, state_dim)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.net.input_dim() - self.state_dim
    }

    pub fn input(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(state.len() + action.len());
        x.extend_from_slice(state);
        x.extend_from_slice(action);
        x
    }

    pub fn value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.net.forward(&self.input(state, action))?[0])
    }

    /// `∇_a Q(s, a)`.
    pub fn grad_action(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let g = self.net.grad_input(&self.input(state, action), &[1.0])?;
        Ok(g[self.state_dim..].to_vec())
    }

    /// `(Q(s, a), ∇_a Q(s, a))` from one forward/backward pass.
    pub fn value_and_grad_action(&self, state: &[f64], action: &[f64]) -> Result<(f64, Vec<f64>)> {
        let trace = self.net.trace(&self.input(state, action))?;
        let v = trace.output()[0];
        let g = self.net.backward(&trace, &[1.0], 1.0, None);
        Ok((v, g[self.state_dim..].to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_net(sizes: &[usize], seed: u64) -> MlpParams {
        let mut rng = derive(seed, Stream::Init, 0, 0);
        let mut p = MlpParams::init(sizes, 1.0, &mut rng).unwrap();
        for v in p.flat_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        p
    }

    #[test]
    fn param_count_matches_layout() {
        assert_eq!(MlpParams::param_count(&[4, 8, 2]), 5 * 8 + 9 * 2);
        assert_eq!(MlpParams::zeros(&[3, 5, 1]).unwrap().len(), 4 * 5 + 6);
        assert!(MlpParams::zeros(&[3]).is_err());
        assert!(MlpParams::from_flat(&[2, 2], vec![0.0; 5]).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = MlpParams::zeros(&[3, 7, 2]).unwrap();
        assert_eq!(p.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let p = MlpParams::from_flat(&[2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.forward(&[0.3, -0.7]).unwrap(), vec![0.3, -0.7]);
    }

    #[test]
    fn hand_computed_two_two_one() {
        // h = tanh(W1 x + b1), y = w2·h + b2
        let flat = vec![0.5, -0.25, 1.0, 0.75, 0.1, -0.2, 2.0, -1.0, 0.3];
        let p = MlpParams::from_flat(&[2, 2, 1], flat).unwrap();
        let x = [0.4, -0.8];
        let h1 = (0.5 * 0.4 + -0.25 * -0.8 + 0.1f64).tanh();
        let h2 = (1.0 * 0.4 + 0.75 * -0.8 - 0.2f64).tanh();
        let expected = 2.0 * h1 - 1.0 * h2 + 0.3;
        assert!((p.forward(&x).unwrap()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let p = MlpParams::zeros(&[3, 2]).unwrap();
        assert!(p.forward(&[1.0]).is_err());
        assert!(p.grad_params(&[1.0, 2.0, 3.0], &[1.0]).is_err());
        assert!(p.grad_input(&[1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn gradient_special_cases() {
        let p = random_net(&[3, 5, 2], 1);
        let x = [0.1, 0.2, -0.3];
        assert!(p.grad_params(&x, &[0.0, 0.0]).unwrap().iter().all(|g| *g == 0.0));
        assert!(p.grad_input(&x, &[0.0, 0.0]).unwrap().iter().all(|g| *g == 0.0));

        // 1-1 linear: d(w x + b)/d(w, b) = (x, 1)
        let lin = MlpParams::from_flat(&[1, 1], vec![0.7, -0.2]).unwrap();
        assert_eq!(lin.grad_params(&[2.5], &[1.0]).unwrap(), vec![2.5, 1.0]);

        // linear W: ∇_x uᵀWx = Wᵀu
        let w = MlpParams::from_flat(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0]).unwrap();
        let g = w.grad_input(&[0.1, 0.2], &[1.0, -1.0, 2.0]).unwrap();
        assert_eq!(g, vec![1.0 - 3.0 + 10.0, 2.0 - 4.0 + 12.0]);
    }

    #[test]
    fn random_net_matches_finite_differences() {
        let p = random_net(&[4, 8, 2], 3);
        let x = [0.3, -0.1, 0.8, -0.5];
        let err = finite_diff_check(&p, &x, 1e-5).unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn finite_diff_check_examples() {
        let lin = MlpParams::from_flat(&[3, 2], (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        assert!(finite_diff_check(&lin, &[0.5, -1.0, 2.0], 1e-5).unwrap() < 1e-9);

        let p = random_net(&[3, 6, 6, 2], 9);
        let x = [0.9, -0.7, 0.4];
        let fine = finite_diff_check(&p, &x, 1e-5).unwrap();
        let coarse = finite_diff_check(&p, &x, 1e-1).unwrap();
        assert!(fine < 1e-5);
        assert!(coarse > fine);
        assert!(finite_diff_check(&p, &x, 0.0).is_err());
    }

    #[test]
    fn jvp_matches_directional_difference() {
        let p = random_net(&[3, 6, 2], 4);
        let x = [0.2, -0.4, 0.6];
        let mut rng = derive(4, Stream::Init, 1, 0);
        let v: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let jv = p.jvp_params(&p.trace(&x).unwrap(), &v);
        let h = 1e-6;
        let shift = |sign: f64| {
            let flat: Vec<f64> = p.flat().iter().zip(&v).map(|(a, b)| a + sign * h * b).collect();
            MlpParams::from_flat(p.layer_sizes(), flat).unwrap().forward(&x).unwrap()
        };
        let (up, down) = (shift(1.0), shift(-1.0));
        for i in 0..2 {
            let fd = (up[i] - down[i]) / (2.0 * h);
            assert!((fd - jv[i]).abs() < 1e-7, "{fd} vs {}", jv[i]);
        }
    }

    #[test]
    fn snapshot_round_trip_and_rejects_garbage() {
        let p = random_net(&[2, 4, 3], 5);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 3 * 4 + 8 + 8 * p.len());
        assert_eq!(MlpParams::read_from(&buf[..]).unwrap(), p);
        assert!(MlpParams::read_from(&b"garbage!"[..]).is_err());
        buf.truncate(buf.len() - 1);
        assert!(MlpParams::read_from(&buf[..]).is_err());
    }

    #[test]
    fn policy_vjp_and_jvp_are_adjoint() {
        let mut rng = derive(8, Stream::Init, 0, 0);
        let pol = DeterministicPolicy::init(2, &[5], vec![-0.2, -0.2], vec![0.2, 0.2], &mut rng).unwrap();
        let pol = pol.with_params(random_net(&[2, 5, 2], 8).flat());
        let tr = pol.trace(&[0.3, -0.6]).unwrap();
        let v: Vec<f64> = (0..pol.num_params()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let u = [0.7, -1.3];
        let jv = pol.jvp(&tr, &v);
        let mut jtu = vec![0.0; pol.num_params()];
        pol.accumulate_vjp(&tr, &u, 1.0, &mut jtu);
        let lhs: f64 = u.iter().zip(&jv).map(|(a, b)| a * b).sum();
        let rhs: f64 = v.iter().zip(&jtu).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn q_function_action_gradient() {
        let mut rng = derive(2, Stream::Init, 0, 0);
        let q = QFunction::init(2, 2, &[6], &mut rng).unwrap();
        let (s, a) = ([0.5, 0.1], [0.05, -0.1]);
        let g = q.grad_action(&s, &a).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut ap = a;
            ap[i] += h;
            let mut am = a;
            am[i] -= h;
            let fd = (q.value(&s, &ap).unwrap() - q.value(&s, &am).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
        let (v, g2) = q.value_and_grad_action(&s, &a).unwrap();
        assert_eq!(v, q.value(&s, &a).unwrap());
        assert_eq!(g, g2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn gradients_agree_with_finite_differences(seed in any::<u64>(), x in prop::collection::vec(-1.5f64..1.5, 3)) {
            let p = random_net(&[3, 5, 4, 2], seed);
            prop_assert!(finite_diff_check(&p, &x, 1e-5).unwrap() < 1e-4);
        }

        #[test]
        fn policy_outputs_stay_in_bounds(seed in any::<u64>(), s in prop::collection::vec(-50.0f64..50.0, 2)) {
            let mut rng = derive(seed, Stream::Init, 0, 0);
            let net = MlpParams::init(&[2, 8, 2], 50.0, &mut rng).unwrap();
            let pol = DeterministicPolicy::new(net, vec![-0.2, -1.0], vec![0.2, 3.0]).unwrap();
            let a = pol.act(&s).unwrap();
            prop_assert!((-0.2..=0.2).contains(&a[0]));
            prop_assert!((-1.0..=3.0).contains(&a[1]));
        }

        #[test]
        fn flatten_unflatten_round_trip(seed in any::<u64>()) {
            let p = random_net(&[3, 4, 2], seed);
            let q = MlpParams::flatten(p.layer_sizes(), &p.unflatten()).unwrap();
            prop_assert_eq!(p, q);
        }
    }

    #[test]
    fn batch_pass_matches_per_sample() {
        let mut rng = derive(31, Stream::Init, 0, 0);
        for sizes in [vec![4, 7, 6, 1], vec![3, 9, 2], vec![2, 1]] {
            let p = MlpParams::init(&sizes, 1.0, &mut rng).unwrap();
            let batch = 13;
            let (din, dout) = (p.input_dim(), p.output_dim());
            let inputs: Vec<f64> = (0..batch * din).map(|_| rng.random_range(-1.0..1.0)).collect();
            let upstream: Vec<f64> = (0..batch * dout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let trace = p.batch_trace(&inputs, batch).unwrap();
            let mut batch_grad = vec![0.0; p.len()];
            p.batch_backward(&trace, &upstream, &mut batch_grad);
            let mut grad = vec![0.0; p.len()];
            for b in 0..batch {
                let x = &inputs[b * din..(b + 1) * din];
                let y = p.forward(x).unwrap();
                for (u, v) in y.iter().zip(&trace.output()[b * dout..(b + 1) * dout]) {
                    assert!((u - v).abs() < 1e-12);
                }
                p.backward(&p.trace(x).unwrap(), &upstream[b * dout..(b + 1) * dout], 1.0, Some(&mut grad));
            }
            for (a, b) in grad.iter().zip(&batch_grad) {
                assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
        let p = MlpParams::zeros(&[2, 1]).unwrap();
        assert!(p.batch_trace(&[1.0, 2.0, 3.0], 2).is_err());
    }
}
