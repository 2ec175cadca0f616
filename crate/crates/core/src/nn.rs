//! Minimal fully-connected network engine.
//!
//! Every learned policy in the crate (mobility predictor, scheduler actor and
//! critic, association classifier) is an [`MlpParams`]. The engine covers the
//! forward pass, reverse-mode gradients, SGD updates with per-layer freeze
//! masks, and a versioned binary model format.
//!
//! # Model file format
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "MLP1"                       4 bytes magic (format version 1)
//! u32  m                       number of layer widths
//! u32 × m                      widths (input, hidden..., output)
//! u8  × (m - 2)                hidden activation codes (0 = relu, 1 = tanh)
//! u8                           output code (0 = identity, 1 = sigmoid, 2 = softmax)
//! u32                          softmax group width (0 unless softmax)
//! per layer: f64 × (out × in)  weights, row-major
//!            f64 × out         biases
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MLP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => fast_tanh(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and the output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            other => Err(Error::Parse(format!("unknown activation code {other}"))),
        }
    }
}

/// `tanh` through one `exp_m1`; a few ulp from libm and roughly twice as fast.
#[inline]
fn fast_tanh(z: f64) -> f64 {
    if z.abs() > 19.0 {
        return z.signum();
    }
    let e = (-2.0 * z.abs()).exp_m1();
    (-e / (e + 2.0)).copysign(z)
}

/// Output non-linearity. `Softmax` normalizes each consecutive block of
/// `group` outputs independently, which gives one classifier head per block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
    Softmax { group: usize },
}

/// Activation choice used by [`MlpParams::init`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActivationConfig {
    pub hidden: Activation,
    pub output: OutputActivation,
}

impl ActivationConfig {
    pub fn new(hidden: Activation, output: OutputActivation) -> Self {
        Self { hidden, output }
    }
}

/// One affine layer. `weights` is row-major with shape `(outputs, inputs)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    #[inline]
    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.inputs + inp]
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Parameter container for a fully-connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    layers: Vec<Layer>,
    hidden: Vec<Activation>,
    output: OutputActivation,
}

/// Gradient buffer, shape-congruent with the [`MlpParams`] it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

/// Per-layer trainable flags; `true` means the layer is updated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask(Vec<bool>);

/// Intermediate values of one forward pass, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `activations[0]` is the input, `activations[L]` the network output.
    pub activations: Vec<Vec<f64>>,
    /// Pre-activation values of every layer.
    pub pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace always holds the input")
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "need at least input and output widths, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.iter().any(|&w| w == 0) {
        return Err(Error::Config(format!(
            "layer widths must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

fn validate_output(output: OutputActivation, width: usize) -> Result<()> {
    if let OutputActivation::Softmax { group } = output {
        if group == 0 || width % group != 0 {
            return Err(Error::Config(format!(
                "softmax group {group} does not divide output width {width}"
            )));
        }
    }
    Ok(())
}

/// Dot product with four independent accumulators; the summation order is
/// fixed, so results are reproducible bit-for-bit.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

fn apply_output(output: OutputActivation, z: &[f64], out: &mut [f64]) {
    match output {
        OutputActivation::Identity => out.copy_from_slice(z),
        OutputActivation::Sigmoid => {
            for (o, &v) in out.iter_mut().zip(z) {
                *o = sigmoid(v);
            }
        }
        OutputActivation::Softmax { group } => {
            for (zs, os) in z.chunks(group).zip(out.chunks_mut(group)) {
                let max = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &v) in os.iter_mut().zip(zs) {
                    *o = (v - max).exp();
                    sum += *o;
                }
                for o in os.iter_mut() {
                    *o /= sum;
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl MlpParams {
    /// Scaled-uniform initialization: every weight and bias of a layer with
    /// fan-in `k` is drawn from `U(-1/sqrt(k), 1/sqrt(k))`.
    pub fn init(layer_sizes: &[usize], activation: ActivationConfig, seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        validate_output(activation.output, *layer_sizes.last().unwrap())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let scale = 1.0 / (inputs as f64).sqrt();
                let mut layer = Layer::zeros(inputs, outputs);
                for v in layer.weights.iter_mut() {
                    *v = rng.gen_range(-scale..scale);
                }
                for v in layer.biases.iter_mut() {
                    *v = rng.gen_range(-scale..scale);
                }
                layer
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            hidden: vec![activation.hidden; layer_sizes.len() - 2],
            output: activation.output,
        })
    }

    /// Builds a network from explicit parameter values.
    pub fn from_parts(
        layer_sizes: &[usize],
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        hidden: Vec<Activation>,
        output: OutputActivation,
    ) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        validate_output(output, *layer_sizes.last().unwrap())?;
        let n_layers = layer_sizes.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::Shape(format!(
                "expected {n_layers} weight and bias blocks, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        if hidden.len() != n_layers - 1 {
            return Err(Error::Shape(format!(
                "expected {} hidden activations, got {}",
                n_layers - 1,
                hidden.len()
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (i, (w, b)) in weights.into_iter().zip(biases).enumerate() {
            let (inputs, outputs) = (layer_sizes[i], layer_sizes[i + 1]);
            if w.len() != inputs * outputs || b.len() != outputs {
                return Err(Error::Shape(format!(
                    "layer {i}: expected {outputs}x{inputs} weights and {outputs} biases"
                )));
            }
            if w.iter().chain(&b).any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    layer: i,
                    detail: "non-finite parameter".into(),
                });
            }
            layers.push(Layer {
                inputs,
                outputs,
                weights: w,
                biases: b,
            });
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            hidden,
            output,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the raw parameter blocks; shapes cannot change.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn hidden_activations(&self) -> &[Activation] {
        &self.hidden
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// True when both networks have identical widths and activations.
    pub fn same_architecture(&self, other: &MlpParams) -> bool {
        self.layer_sizes == other.layer_sizes
            && self.hidden == other.hidden
            && self.output == other.output
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    /// All parameters in file order (per layer: weights row-major, then biases).
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Computes the network output for one input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut current = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.outputs];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                *zo = layer.biases[o] + dot(row, &current);
            }
            if i < last {
                let act = self.hidden[i];
                for v in z.iter_mut() {
                    *v = act.apply(*v);
                }
                current = z;
            } else {
                let mut out = vec![0.0; layer.outputs];
                apply_output(self.output, &z, &mut out);
                current = out;
            }
        }
        if let Some(pos) = current.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                layer: last,
                detail: format!("non-finite output at index {pos}"),
            });
        }
        Ok(current)
    }

    /// Forward pass that keeps every intermediate for backpropagation.
    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        activations.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = &activations[i];
            let mut z = vec![0.0; layer.outputs];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                *zo = layer.biases[o] + dot(row, prev);
            }
            let mut a = vec![0.0; layer.outputs];
            if i < last {
                let act = self.hidden[i];
                for (av, &zv) in a.iter_mut().zip(&z) {
                    *av = act.apply(zv);
                }
            } else {
                apply_output(self.output, &z, &mut a);
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    layer: i,
                    detail: "non-finite activation in forward pass".into(),
                });
            }
            pre.push(z);
            activations.push(a);
        }
        Ok(Trace { activations, pre })
    }

    /// Maps a gradient with respect to the network output through the output
    /// non-linearity, giving the gradient with respect to its pre-activation.
    pub fn output_grad_to_logits(&self, trace: &Trace, out_grad: &[f64]) -> Vec<f64> {
        let out = trace.output();
        match self.output {
            OutputActivation::Identity => out_grad.to_vec(),
            OutputActivation::Sigmoid => out_grad
                .iter()
                .zip(out)
                .map(|(g, s)| g * s * (1.0 - s))
                .collect(),
            OutputActivation::Softmax { group } => {
                let mut dz = vec![0.0; out.len()];
                for ((gs, ps), ds) in out_grad
                    .chunks(group)
                    .zip(out.chunks(group))
                    .zip(dz.chunks_mut(group))
                {
                    let inner: f64 = gs.iter().zip(ps).map(|(g, p)| g * p).sum();
                    for ((d, g), p) in ds.iter_mut().zip(gs).zip(ps) {
                        *d = p * (g - inner);
                    }
                }
                dz
            }
        }
    }

    /// Reverse-mode pass starting from the gradient at the output
    /// pre-activation. Adds parameter gradients into `acc` and returns the
    /// gradient with respect to the input.
    pub fn backward_logits_into(
        &self,
        trace: &Trace,
        logit_grad: &[f64],
        acc: &mut Gradients,
    ) -> Result<Vec<f64>> {
        if logit_grad.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "output gradient has length {}, network output is {}",
                logit_grad.len(),
                self.output_dim()
            )));
        }
        if acc.layers.len() != self.layers.len() {
            return Err(Error::Shape("gradient buffer does not match network".into()));
        }
        let mut delta = logit_grad.to_vec();
        for i in (0..self.layers.len()).rev() {
            if let Some(pos) = delta.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    layer: i,
                    detail: format!("non-finite gradient at unit {pos}"),
                });
            }
            let layer = &self.layers[i];
            let a_prev = &trace.activations[i];
            let g = &mut acc.layers[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, &a) in row.iter_mut().zip(a_prev) {
                    *w += d * a;
                }
            }
            let mut prev_grad = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, &w) in prev_grad.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            if i > 0 {
                let act = self.hidden[i - 1];
                for ((p, &z), &a) in prev_grad
                    .iter_mut()
                    .zip(&trace.pre[i - 1])
                    .zip(&trace.activations[i])
                {
                    *p *= act.derivative(z, a);
                }
            }
            delta = prev_grad;
        }
        Ok(delta)
    }

    /// Gradient with respect to the input only, starting from the output
    /// pre-activation gradient. Skips the parameter-gradient accumulation.
    pub fn backward_input_only(&self, trace: &Trace, logit_grad: &[f64]) -> Result<Vec<f64>> {
        if logit_grad.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "output gradient has length {}, network output is {}",
                logit_grad.len(),
                self.output_dim()
            )));
        }
        let mut delta = logit_grad.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let mut prev_grad = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, &w) in prev_grad.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            if i > 0 {
                let act = self.hidden[i - 1];
                for ((p, &z), &a) in prev_grad
                    .iter_mut()
                    .zip(&trace.pre[i - 1])
                    .zip(&trace.activations[i])
                {
                    *p *= act.derivative(z, a);
                }
            }
            delta = prev_grad;
        }
        if let Some(pos) = delta.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                layer: 0,
                detail: format!("non-finite input gradient at {pos}"),
            });
        }
        Ok(delta)
    }

    /// Gradient of the loss with respect to every parameter, given the
    /// gradient of the loss with respect to the network output.
    pub fn backward(&self, input: &[f64], out_grad: &[f64]) -> Result<Gradients> {
        let trace = self.forward_trace(input)?;
        if out_grad.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "output gradient has length {}, network output is {}",
                out_grad.len(),
                self.output_dim()
            )));
        }
        let dz = self.output_grad_to_logits(&trace, out_grad);
        let mut grads = Gradients::zeros_like(self);
        self.backward_logits_into(&trace, &dz, &mut grads)?;
        Ok(grads)
    }

    /// Gradient of a scalar function of the output with respect to the input.
    pub fn input_gradient(&self, input: &[f64], out_grad: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(input)?;
        let dz = self.output_grad_to_logits(&trace, out_grad);
        self.backward_input_only(&trace, &dz)
    }

    /// `θ ← θ − lr·g` on trainable layers; frozen layers are copied bitwise.
    pub fn apply_update(&self, grads: &Gradients, learning_rate: f64, mask: &FreezeMask) -> Result<MlpParams> {
        let mut next = self.clone();
        next.apply_update_in_place(grads, learning_rate, mask)?;
        Ok(next)
    }

    pub fn apply_update_in_place(
        &mut self,
        grads: &Gradients,
        learning_rate: f64,
        mask: &FreezeMask,
    ) -> Result<()> {
        self.check_congruent(grads)?;
        mask.check(self)?;
        if learning_rate == 0.0 {
            return Ok(());
        }
        for ((layer, g), &trainable) in self.layers.iter_mut().zip(&grads.layers).zip(&mask.0) {
            if !trainable {
                continue;
            }
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= learning_rate * gw;
            }
            for (b, gb) in layer.biases.iter_mut().zip(&g.biases) {
                *b -= learning_rate * gb;
            }
        }
        Ok(())
    }

    fn check_congruent(&self, grads: &Gradients) -> Result<()> {
        let ok = grads.layers.len() == self.layers.len()
            && grads
                .layers
                .iter()
                .zip(&self.layers)
                .all(|(g, l)| g.inputs == l.inputs && g.outputs == l.outputs);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("gradients are not congruent with parameters".into()))
        }
    }

    /// Polyak averaging toward `source`: `θ ← (1 − τ)·θ + τ·θ_source`.
    pub fn soft_update_from(&mut self, source: &MlpParams, tau: f64) -> Result<()> {
        if !self.same_architecture(source) {
            return Err(Error::Shape("soft update between different architectures".into()));
        }
        for (t, s) in self.params_mut().zip(source.params()) {
            *t = (1.0 - tau) * *t + tau * s;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &w in &self.layer_sizes {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for a in &self.hidden {
            out.push(a.code());
        }
        let (code, group) = match self.output {
            OutputActivation::Identity => (0u8, 0u32),
            OutputActivation::Sigmoid => (1, 0),
            OutputActivation::Softmax { group } => (2, group as u32),
        };
        out.push(code);
        out.extend_from_slice(&group.to_le_bytes());
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse("bad magic, expected MLP1".into()));
        }
        let m = r.u32()? as usize;
        if !(2..=1024).contains(&m) {
            return Err(Error::Parse(format!("implausible layer count {m}")));
        }
        let mut sizes = Vec::with_capacity(m);
        for _ in 0..m {
            sizes.push(r.u32()? as usize);
        }
        validate_sizes(&sizes).map_err(|e| Error::Parse(e.to_string()))?;
        let mut hidden = Vec::with_capacity(m - 2);
        for _ in 0..m - 2 {
            hidden.push(Activation::from_code(r.u8()?)?);
        }
        let output = match (r.u8()?, r.u32()?) {
            (0, _) => OutputActivation::Identity,
            (1, _) => OutputActivation::Sigmoid,
            (2, g) => OutputActivation::Softmax { group: g as usize },
            (c, _) => return Err(Error::Parse(format!("unknown output code {c}"))),
        };
        validate_output(output, sizes[m - 1]).map_err(|e| Error::Parse(e.to_string()))?;
        let expected: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if r.remaining() != expected * 8 {
            return Err(Error::Parse(format!(
                "parameter block has {} bytes, header implies {}",
                r.remaining(),
                expected * 8
            )));
        }
        let mut weights = Vec::with_capacity(m - 1);
        let mut biases = Vec::with_capacity(m - 1);
        for w in sizes.windows(2) {
            weights.push(r.f64s(w[0] * w[1])?);
            biases.push(r.f64s(w[1])?);
        }
        Self::from_parts(&sizes, weights, biases, hidden, output)
            .map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse(format!(
                "truncated stream at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn reset(&mut self) {
        for v in self.values_mut() {
            *v = 0.0;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let norm = self.l2_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }
}

impl FreezeMask {
    pub fn new(trainable: Vec<bool>) -> Self {
        Self(trainable)
    }

    pub fn all_trainable(params: &MlpParams) -> Self {
        Self(vec![true; params.num_layers()])
    }

    pub fn all_frozen(params: &MlpParams) -> Self {
        Self(vec![false; params.num_layers()])
    }

    /// Only the last `k` parameterized layers are trainable.
    pub fn last_k(params: &MlpParams, k: usize) -> Self {
        let n = params.num_layers();
        Self((0..n).map(|i| i + k >= n).collect())
    }

    pub fn is_trainable(&self, layer: usize) -> bool {
        self.0[layer]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check(&self, params: &MlpParams) -> Result<()> {
        if self.0.len() != params.num_layers() {
            return Err(Error::Shape(format!(
                "freeze mask has {} entries, network has {} layers",
                self.0.len(),
                params.num_layers()
            )));
        }
        Ok(())
    }
}

/// SGD with optional classical momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &Gradients, mask: &FreezeMask) -> Result<()> {
        if self.momentum == 0.0 {
            return params.apply_update_in_place(grads, self.learning_rate, mask);
        }
        let velocity = self.velocity.get_or_insert_with(|| Gradients::zeros_like(params));
        params.check_congruent(velocity)?;
        for (v, g) in velocity.values_mut().zip(grads.values()) {
            *v = self.momentum * *v + g;
        }
        params.apply_update_in_place(velocity, self.learning_rate, mask)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: Option<Gradients>,
    v: Option<Gradients>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: None,
            v: None,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &Gradients, mask: &FreezeMask) -> Result<()> {
        params.check_congruent(grads)?;
        mask.check(params)?;
        let m = self.m.get_or_insert_with(|| Gradients::zeros_like(params));
        let v = self.v.get_or_insert_with(|| Gradients::zeros_like(params));
        params.check_congruent(m)?;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, layer) in params.layers.iter_mut().enumerate() {
            if !mask.0[i] {
                continue;
            }
            let g = &grads.layers[i];
            let (ml, vl) = (&mut m.layers[i], &mut v.layers[i]);
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            for (((p, &gw), mw), vw) in layer
                .weights
                .iter_mut()
                .zip(&g.weights)
                .zip(ml.weights.iter_mut())
                .zip(vl.weights.iter_mut())
            {
                update(p, gw, mw, vw);
            }
            for (((p, &gb), mb), vb) in layer
                .biases
                .iter_mut()
                .zip(&g.biases)
                .zip(ml.biases.iter_mut())
                .zip(vl.biases.iter_mut())
            {
                update(p, gb, mb, vb);
            }
        }
        Ok(())
    }
}

/// Loss used by [`fit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// Mean squared error over all outputs.
    Mse,
    /// Cross-entropy summed over softmax heads; targets are one-hot per head.
    CrossEntropy,
}

impl Loss {
    /// Returns the loss value and its gradient at the output pre-activation.
    pub fn evaluate(self, params: &MlpParams, trace: &Trace, target: &[f64]) -> (f64, Vec<f64>) {
        let out = trace.output();
        match self {
            Loss::Mse => {
                let n = out.len() as f64;
                let mut loss = 0.0;
                let grad: Vec<f64> = out
                    .iter()
                    .zip(target)
                    .map(|(o, t)| {
                        let d = o - t;
                        loss += d * d;
                        2.0 * d / n
                    })
                    .collect();
                (loss / n, params.output_grad_to_logits(trace, &grad))
            }
            Loss::CrossEntropy => {
                let loss = -out
                    .iter()
                    .zip(target)
                    .filter(|(_, &t)| t > 0.0)
                    .map(|(p, t)| t * p.max(1e-300).ln())
                    .sum::<f64>();
                let grad = match params.output {
                    OutputActivation::Softmax { .. } | OutputActivation::Sigmoid => {
                        out.iter().zip(target).map(|(p, t)| p - t).collect()
                    }
                    OutputActivation::Identity => {
                        out.iter().zip(target).map(|(p, t)| -t / p.max(1e-300)).collect()
                    }
                };
                (loss, grad)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay: 1.0,
            seed: 0,
        }
    }
}

/// One row of the training log produced by [`fit`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
}

/// Shuffled mini-batch SGD over `(input, target)` pairs.
pub fn fit(
    params: &mut MlpParams,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    loss: Loss,
    config: &FitConfig,
    mask: &FreezeMask,
) -> Result<Vec<EpochStats>> {
    if inputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.is_empty() || config.epochs == 0 {
        return Ok(Vec::new());
    }
    if let Some(bad) = targets.iter().find(|t| t.len() != params.output_dim()) {
        return Err(Error::Shape(format!(
            "target of length {} for network output {}",
            bad.len(),
            params.output_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut opt = Sgd::new(config.learning_rate, config.momentum);
    let mut grads = Gradients::zeros_like(params);
    let batch = config.batch_size.max(1);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            grads.reset();
            for &idx in chunk {
                let trace = params.forward_trace(&inputs[idx])?;
                let (l, dz) = loss.evaluate(params, &trace, &targets[idx]);
                total += l;
                params.backward_logits_into(&trace, &dz, &mut grads)?;
            }
            grads.scale(1.0 / chunk.len() as f64);
            opt.step(params, &grads, mask)?;
        }
        let mean = total / inputs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence(format!("loss became non-finite in epoch {epoch}")));
        }
        log.push(EpochStats { epoch, loss: mean });
        opt.learning_rate *= config.lr_decay;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(w: f64, b: f64) -> MlpParams {
        MlpParams::from_parts(&[1, 1], vec![vec![w]], vec![vec![b]], vec![], OutputActivation::Identity).unwrap()
    }

    fn tanh_identity() -> ActivationConfig {
        ActivationConfig::new(Activation::Tanh, OutputActivation::Identity)
    }

    #[test]
    fn init_predictor_shape() {
        let net = MlpParams::init(&[3, 100, 100, 3], tanh_identity(), 1).unwrap();
        assert_eq!(net.num_layers(), 3);
        assert_eq!(net.layers()[0].weights.len(), 300);
        assert_eq!(net.layers()[1].biases.len(), 100);
        assert_eq!(net.hidden_activations(), &[Activation::Tanh, Activation::Tanh]);
        for layer in net.layers() {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            assert!(layer.weights.iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpParams::init(&[4, 7, 2], tanh_identity(), 99).unwrap();
        let b = MlpParams::init(&[4, 7, 2], tanh_identity(), 99).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = MlpParams::init(&[4, 7, 2], tanh_identity(), 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(MlpParams::init(&[3], tanh_identity(), 0), Err(Error::Config(_))));
        assert!(matches!(MlpParams::init(&[3, 0, 1], tanh_identity(), 0), Err(Error::Config(_))));
        let softmax = ActivationConfig::new(Activation::Relu, OutputActivation::Softmax { group: 4 });
        assert!(MlpParams::init(&[3, 6], softmax, 0).is_err());
    }

    #[test]
    fn smallest_net_is_affine() {
        let net = MlpParams::init(&[1, 1], tanh_identity(), 5).unwrap();
        let (w, b) = (net.layers()[0].weights[0], net.layers()[0].biases[0]);
        assert_eq!(net.forward(&[2.5]).unwrap(), vec![w * 2.5 + b]);
        assert_eq!(affine(2.0, 1.0).forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn zero_net_gives_zero() {
        let mut net = MlpParams::init(&[4, 8, 3], ActivationConfig::new(Activation::Relu, OutputActivation::Identity), 3).unwrap();
        for p in net.params_mut() {
            *p = 0.0;
        }
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let net = MlpParams::init(&[3, 2], tanh_identity(), 0).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn grouped_softmax_heads_sum_to_one() {
        let cfg = ActivationConfig::new(Activation::Relu, OutputActivation::Softmax { group: 3 });
        let net = MlpParams::init(&[5, 12, 9], cfg, 8).unwrap();
        let out = net.forward(&[0.1, 0.2, -0.3, 0.4, 1.0]).unwrap();
        for head in out.chunks(3) {
            assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_squared_loss_gradient() {
        let (w, b, x, y) = (1.5, -0.25, 2.0, 0.7);
        let net = affine(w, b);
        let pred = net.forward(&[x]).unwrap()[0];
        let g = net.backward(&[x], &[2.0 * (pred - y)]).unwrap();
        assert!((g.layers[0].weights[0] - 2.0 * (w * x + b - y) * x).abs() < 1e-15);
        assert!((g.layers[0].biases[0] - 2.0 * (w * x + b - y)).abs() < 1e-15);
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let net = MlpParams::init(&[3, 5, 5, 2], tanh_identity(), 2).unwrap();
        let g = net.backward(&[0.3, -0.1, 0.9], &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn update_arithmetic() {
        let net = affine(1.0, 0.0);
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights[0] = 0.5;
        let next = net.apply_update(&g, 0.1, &FreezeMask::all_trainable(&net)).unwrap();
        assert!((next.layers()[0].weights[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn frozen_or_zero_lr_updates_are_identity() {
        let net = MlpParams::init(&[3, 6, 2], tanh_identity(), 4).unwrap();
        let g = net.backward(&[1.0, 2.0, 3.0], &[1.0, -1.0]).unwrap();
        let frozen = net.apply_update(&g, 0.5, &FreezeMask::all_frozen(&net)).unwrap();
        assert_eq!(frozen.to_bytes(), net.to_bytes());
        let zero_lr = net.apply_update(&g, 0.0, &FreezeMask::all_trainable(&net)).unwrap();
        assert_eq!(zero_lr.to_bytes(), net.to_bytes());
    }

    #[test]
    fn last_k_mask_leaves_early_layers_bitwise() {
        let net = MlpParams::init(&[3, 6, 6, 2], tanh_identity(), 4).unwrap();
        let mask = FreezeMask::last_k(&net, 1);
        assert_eq!(mask, FreezeMask::new(vec![false, false, true]));
        let g = net.backward(&[1.0, 2.0, 3.0], &[1.0, -1.0]).unwrap();
        let next = net.apply_update(&g, 0.1, &mask).unwrap();
        assert_eq!(next.layers()[0], net.layers()[0]);
        assert_eq!(next.layers()[1], net.layers()[1]);
        assert_ne!(next.layers()[2], net.layers()[2]);
    }

    #[test]
    fn mask_length_is_checked() {
        let net = MlpParams::init(&[3, 6, 2], tanh_identity(), 4).unwrap();
        let g = Gradients::zeros_like(&net);
        assert!(net.apply_update(&g, 0.1, &FreezeMask::new(vec![true])).is_err());
    }

    #[test]
    fn truncated_stream_is_parse_error() {
        let bytes = MlpParams::init(&[3, 4, 2], tanh_identity(), 1).unwrap().to_bytes();
        for cut in [0, 3, 4, 10, bytes.len() - 1] {
            assert!(matches!(MlpParams::from_bytes(&bytes[..cut]), Err(Error::Parse(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(MlpParams::from_bytes(&extra).is_err());
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(MlpParams::from_bytes(&bad_magic).is_err());
    }

    #[test]
    fn different_structures_have_distinct_headers() {
        let a = MlpParams::init(&[3, 4, 2], tanh_identity(), 1).unwrap().to_bytes();
        let b = MlpParams::init(&[3, 5, 2], tanh_identity(), 1).unwrap().to_bytes();
        let c = MlpParams::init(&[3, 4, 2], ActivationConfig::new(Activation::Relu, OutputActivation::Identity), 1)
            .unwrap()
            .to_bytes();
        let header = |v: &[u8]| v[..4 + 4 + 3 * 4 + 1 + 1 + 4].to_vec();
        assert_ne!(header(&a), header(&b));
        assert_ne!(header(&a), header(&c));
    }

    #[test]
    fn momentum_sgd_accumulates_velocity() {
        let mut net = affine(1.0, 0.0);
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights[0] = 1.0;
        let mask = FreezeMask::all_trainable(&net);
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut net, &g, &mask).unwrap();
        opt.step(&mut net, &g, &mask).unwrap();
        // v1 = 1, v2 = 1.9; θ = 1 - 0.1 - 0.19
        assert!((net.layers()[0].weights[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // bias-corrected first step is lr·sign(g) regardless of |g|
        let mut net = affine(1.0, 0.5);
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights[0] = 3.0;
        g.layers[0].biases[0] = -0.01;
        let mask = FreezeMask::all_trainable(&net);
        let mut opt = Adam::new(0.1);
        opt.step(&mut net, &g, &mask).unwrap();
        assert!((net.layers()[0].weights[0] - 0.9).abs() < 1e-6);
        assert!((net.layers()[0].biases[0] - 0.6).abs() < 1e-5);
        let frozen = FreezeMask::all_frozen(&net);
        let before = net.clone();
        opt.step(&mut net, &g, &frozen).unwrap();
        assert_eq!(before, net);
    }

    #[test]
    fn fast_tanh_matches_libm() {
        for i in -4000..=4000 {
            let z = i as f64 * 0.006 + 1e-3;
            let (a, b) = (fast_tanh(z), z.tanh());
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1e-300), "{z}: {a} vs {b}");
        }
        assert_eq!(fast_tanh(0.0), 0.0);
        assert_eq!(fast_tanh(40.0), 1.0);
        assert_eq!(fast_tanh(-40.0), -1.0);
    }

    #[test]
    fn fit_memorizes_identical_pairs() {
        let mut net = MlpParams::init(&[2, 8, 1], tanh_identity(), 11).unwrap();
        let xs = vec![vec![0.3, -0.2]; 16];
        let ys = vec![vec![0.5]; 16];
        let cfg = FitConfig { epochs: 200, batch_size: 4, learning_rate: 0.05, ..Default::default() };
        let mask = FreezeMask::all_trainable(&net);
        let log = fit(&mut net, &xs, &ys, Loss::Mse, &cfg, &mask).unwrap();
        assert_eq!(log.len(), 200);
        assert!(log.last().unwrap().loss < 1e-10);
    }
}
