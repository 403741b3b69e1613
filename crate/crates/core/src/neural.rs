//! Small dense Q-network: ReLU hidden layers, linear output, hand-written
//! backpropagation for a single-output squared error, Adam and plain SGD.
//!
//! Parameter layout, layer by layer: the `out x in` weight matrix row-major
//! (row = output unit), then the `out` biases.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"FDRLNN1";

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layer_sizes: Vec<usize>,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(layer_sizes: &[usize]) -> Self {
        Self {
            layer_sizes: layer_sizes.to_vec(),
            values: vec![0.0; param_count(layer_sizes)],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least one layer")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layer_sizes == other.layer_sizes && self.values.len() == other.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Serialised size: header plus 4 bytes per parameter.
    pub fn wire_bytes(&self) -> usize {
        checkpoint_header_len(self.layer_sizes.len()) + 4 * self.values.len()
    }

    /// (weight offset, bias offset, fan in, fan out) for every layer.
    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = offset;
            let biases = offset + fan_in * fan_out;
            offset = biases + fan_out;
            (weights, biases, fan_in, fan_out)
        })
    }
}

/// He-uniform weights, zero biases.
pub fn init_params<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> ModelParams {
    let mut p = ModelParams::zeros(layer_sizes);
    let layers: Vec<_> = p.layers().collect();
    for (w, _, fan_in, fan_out) in layers {
        let limit = (6.0 / fan_in as f64).sqrt();
        for v in &mut p.values[w..w + fan_in * fan_out] {
            *v = rng.random_range(-limit..limit);
        }
    }
    p
}

/// Pre-activations and activations of every layer, input included.
struct Trace {
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn check_input(params: &ModelParams, input: &[f64]) -> Result<()> {
    if input.len() != params.input_dim() {
        return Err(Error::Dimension { expected: params.input_dim(), actual: input.len() });
    }
    Ok(())
}

fn forward_trace(params: &ModelParams, input: &[f64]) -> Trace {
    let n_layers = params.layer_sizes.len() - 1;
    let mut activations = Vec::with_capacity(n_layers + 1);
    let mut pre = Vec::with_capacity(n_layers);
    activations.push(input.to_vec());
    for (l, (w, b, fan_in, fan_out)) in params.layers().enumerate() {
        let x = &activations[l];
        let z: Vec<f64> = (0..fan_out)
            .map(|o| {
                let row = &params.values[w + o * fan_in..w + (o + 1) * fan_in];
                params.values[b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let a = if l + 1 < n_layers {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        activations.push(a);
    }
    Trace { activations, pre }
}

/// Q-values for `input`, one per action.
pub fn forward(params: &ModelParams, input: &[f64]) -> Result<Vec<f64>> {
    check_input(params, input)?;
    Ok(forward_trace(params, input).activations.pop().expect("output layer"))
}

/// Adds `coeff * d q[action] / d theta` into `grads`.
fn accumulate_output_gradient(params: &ModelParams, trace: &Trace, action: usize, coeff: f64, grads: &mut [f64]) {
    let layers: Vec<_> = params.layers().collect();
    let last = layers.len() - 1;
    let mut delta = vec![0.0; params.output_dim()];
    delta[action] = coeff;
    for l in (0..=last).rev() {
        let (w, b, fan_in, fan_out) = layers[l];
        let x = &trace.activations[l];
        for o in 0..fan_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            grads[b + o] += d;
            let row = &mut grads[w + o * fan_in..w + (o + 1) * fan_in];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += d * xi;
            }
        }
        if l == 0 {
            break;
        }
        let z_prev = &trace.pre[l - 1];
        let mut next = vec![0.0; fan_in];
        for (i, n) in next.iter_mut().enumerate() {
            if z_prev[i] <= 0.0 {
                continue;
            }
            *n = (0..fan_out)
                .map(|o| params.values[w + o * fan_in + i] * delta[o])
                .sum();
        }
        delta = next;
    }
}

/// Gradient of `(td_target - q[action])^2` with respect to every parameter.
pub fn backward(params: &ModelParams, state: &[f64], action: usize, td_target: f64) -> Result<Vec<f64>> {
    check_input(params, state)?;
    if action >= params.output_dim() {
        return Err(Error::Dimension { expected: params.output_dim(), actual: action + 1 });
    }
    let mut grads = vec![0.0; params.len()];
    accumulate_td_gradient(params, state, action, td_target, 1.0, &mut grads)?;
    Ok(grads)
}

/// Adds `scale * grad (td_target - q[action])^2` into `grads` and returns the
/// squared error at the current parameters.
pub fn accumulate_td_gradient(
    params: &ModelParams,
    state: &[f64],
    action: usize,
    td_target: f64,
    scale: f64,
    grads: &mut [f64],
) -> Result<f64> {
    accumulate_clipped_td_gradient(params, state, action, td_target, f64::INFINITY, scale, grads)
}

/// As [`accumulate_td_gradient`] with the TD error clamped to `[-clip, clip]`
/// in the gradient, i.e. the gradient of twice the Huber loss. Returns the
/// unclipped squared error.
pub fn accumulate_clipped_td_gradient(
    params: &ModelParams,
    state: &[f64],
    action: usize,
    td_target: f64,
    clip: f64,
    scale: f64,
    grads: &mut [f64],
) -> Result<f64> {
    check_input(params, state)?;
    let trace = forward_trace(params, state);
    let q = trace.activations.last().expect("output layer")[action];
    let err = td_target - q;
    accumulate_output_gradient(params, &trace, action, -2.0 * err.clamp(-clip, clip) * scale, grads);
    Ok(err * err)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.first_moment.iter_mut().for_each(|m| *m = 0.0);
        self.second_moment.iter_mut().for_each(|v| *v = 0.0);
        self.step_count = 0;
    }
}

/// One bias-corrected Adam step in place.
pub fn adam_update(params: &mut ModelParams, grads: &[f64], opt: &mut OptState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "gradient length");
    assert_eq!(params.len(), opt.first_moment.len(), "optimizer state length");
    opt.step_count += 1;
    let t = opt.step_count as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params
        .values
        .iter_mut()
        .zip(grads)
        .zip(opt.first_moment.iter_mut())
        .zip(opt.second_moment.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

pub fn sgd_update(params: &mut ModelParams, grads: &[f64], lr: f64) {
    assert_eq!(params.len(), grads.len(), "gradient length");
    for (p, g) in params.values.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

pub fn checkpoint_header_len(n_layer_sizes: usize) -> usize {
    CHECKPOINT_MAGIC.len() + 4 + 4 * n_layer_sizes
}

/// `FDRLNN1`, u32 count of layer sizes, the sizes as u32, then every
/// parameter as f32; all little-endian.
pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(params.layer_sizes.len() as u32).to_le_bytes())?;
    for &s in &params.layer_sizes {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    for &v in &params.values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let n = u32::from_le_bytes(word) as usize;
    if !(2..=64).contains(&n) {
        return Err(Error::Checkpoint(format!("implausible layer count {n}")));
    }
    let mut sizes = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut word)?;
        sizes.push(u32::from_le_bytes(word) as usize);
    }
    let count = param_count(&sizes);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut word)?;
        values.push(f64::from(f32::from_le_bytes(word)));
    }
    Ok(ModelParams { layer_sizes: sizes, values })
}
