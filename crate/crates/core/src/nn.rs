//! Feed-forward building blocks with explicit forward and backward passes.
//!
//! Parameter layout, used by [`Network::flatten`] and every gradient vector:
//! layers in order; within a layer the weight (dense) or kernel (conv) matrix
//! row-major, then the bias.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_scalar, Matrix, RngStream};

/// Flattened model parameters, the unit of federated exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// `p − lr·g`.
pub fn sgd_step(p: &ParamVector, g: &ParamVector, lr: f64) -> Result<ParamVector> {
    if p.len() != g.len() {
        return Err(Error::shape("sgd step", p.len(), g.len()));
    }
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    Ok(ParamVector(p.0.iter().zip(&g.0).map(|(w, d)| w - lr * d).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid_scalar(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation and the activated value.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => post * (1.0 - post),
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

/// Shape description of one layer; a list of these is a network template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Conv1d {
        in_channels: usize,
        in_len: usize,
        out_channels: usize,
        kernel_width: usize,
        stride: usize,
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn input_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv1d {
                in_channels, in_len, ..
            } => in_channels * in_len,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv1d {
                out_channels,
                in_len,
                kernel_width,
                stride,
                ..
            } => out_channels * conv_out_len(in_len, kernel_width, stride),
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => outputs * inputs + outputs,
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel_width,
                ..
            } => out_channels * in_channels * kernel_width + out_channels,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::Config("dense layer dimensions must be positive".into()));
                }
            }
            LayerSpec::Conv1d {
                in_channels,
                in_len,
                out_channels,
                kernel_width,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel_width == 0 || stride == 0 {
                    return Err(Error::Config(
                        "conv1d channels, kernel width and stride must be positive".into(),
                    ));
                }
                if in_len < kernel_width {
                    return Err(Error::Config(format!(
                        "conv1d input length {in_len} shorter than kernel width {kernel_width}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn conv_out_len(in_len: usize, kernel_width: usize, stride: usize) -> usize {
    if in_len < kernel_width || stride == 0 {
        0
    } else {
        (in_len - kernel_width) / stride + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Cross-correlation with valid padding over a channel-major sequence
/// (`x[c * len + t]`). Kernel row `o` holds `in_channels · kernel_width`
/// taps, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1dLayer {
    pub in_channels: usize,
    pub in_len: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub kernels: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Conv1dLayer {
    pub fn out_channels(&self) -> usize {
        self.kernels.rows()
    }

    pub fn out_len(&self) -> usize {
        conv_out_len(self.in_len, self.kernel_width, self.stride)
    }
}

fn conv_pre_activation(layer: &Conv1dLayer, x: &[f64]) -> Vec<f64> {
    let (k, s, len) = (layer.kernel_width, layer.stride, layer.in_len);
    let out_len = layer.out_len();
    let mut pre = vec![0.0; layer.out_channels() * out_len];
    for o in 0..layer.out_channels() {
        let taps = layer.kernels.row(o);
        for t in 0..out_len {
            let mut acc = layer.bias[o];
            for c in 0..layer.in_channels {
                let xs = &x[c * len + t * s..c * len + t * s + k];
                let ws = &taps[c * k..(c + 1) * k];
                for (w, v) in ws.iter().zip(xs) {
                    acc += w * v;
                }
            }
            pre[o * out_len + t] = acc;
        }
    }
    pre
}

/// Standalone convolution of a channel-major sequence.
pub fn conv1d_forward(layer: &Conv1dLayer, x: &[f64]) -> Result<Vec<f64>> {
    let expected = layer.in_channels * layer.in_len;
    if x.len() != expected || layer.in_len < layer.kernel_width {
        return Err(Error::shape("conv1d input", expected.max(layer.kernel_width), x.len()));
    }
    let act = layer.activation;
    Ok(conv_pre_activation(layer, x).into_iter().map(|v| act.apply(v)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Layer {
    Dense(DenseLayer),
    Conv1d(Conv1dLayer),
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(l) => LayerSpec::Dense {
                inputs: l.weight.cols(),
                outputs: l.weight.rows(),
                activation: l.activation,
            },
            Layer::Conv1d(l) => LayerSpec::Conv1d {
                in_channels: l.in_channels,
                in_len: l.in_len,
                out_channels: l.out_channels(),
                kernel_width: l.kernel_width,
                stride: l.stride,
                activation: l.activation,
            },
        }
    }

    fn from_spec(spec: LayerSpec, mut w: impl FnMut(usize, usize, usize, usize) -> Matrix) -> Layer {
        match spec {
            LayerSpec::Dense {
                inputs,
                outputs,
                activation,
            } => Layer::Dense(DenseLayer {
                weight: w(outputs, inputs, inputs, outputs),
                bias: vec![0.0; outputs],
                activation,
            }),
            LayerSpec::Conv1d {
                in_channels,
                in_len,
                out_channels,
                kernel_width,
                stride,
                activation,
            } => Layer::Conv1d(Conv1dLayer {
                in_channels,
                in_len,
                kernel_width,
                stride,
                kernels: w(
                    out_channels,
                    in_channels * kernel_width,
                    in_channels * kernel_width,
                    out_channels * kernel_width,
                ),
                bias: vec![0.0; out_channels],
                activation,
            }),
        }
    }

    fn weight_values(&self) -> &[f64] {
        match self {
            Layer::Dense(l) => l.weight.values(),
            Layer::Conv1d(l) => l.kernels.values(),
        }
    }

    fn bias(&self) -> &[f64] {
        match self {
            Layer::Dense(l) => &l.bias,
            Layer::Conv1d(l) => &l.bias,
        }
    }

    fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        match self {
            Layer::Dense(l) => (l.weight.values_mut(), &mut l.bias),
            Layer::Conv1d(l) => (l.kernels.values_mut(), &mut l.bias),
        }
    }

    fn activation(&self) -> Activation {
        match self {
            Layer::Dense(l) => l.activation,
            Layer::Conv1d(l) => l.activation,
        }
    }

    fn pre_activation(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Layer::Dense(l) => {
                let mut z = l.weight.matvec(x)?;
                for (zi, b) in z.iter_mut().zip(&l.bias) {
                    *zi += b;
                }
                Ok(z)
            }
            Layer::Conv1d(l) => Ok(conv_pre_activation(l, x)),
        }
    }

    /// Back-propagates `dpre` (gradient w.r.t. the pre-activation); writes
    /// parameter gradients into `grads` (this layer's slice, accumulated) and
    /// returns the input gradient.
    fn backward(&self, x: &[f64], dpre: &[f64], grads: &mut [f64]) -> Vec<f64> {
        match self {
            Layer::Dense(l) => {
                let (rows, cols) = (l.weight.rows(), l.weight.cols());
                let (gw, gb) = grads.split_at_mut(rows * cols);
                for r in 0..rows {
                    let d = dpre[r];
                    if d != 0.0 {
                        for (g, xi) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                            *g += d * xi;
                        }
                    }
                    gb[r] += d;
                }
                l.weight.matvec_t(dpre).expect("dense backward shape")
            }
            Layer::Conv1d(l) => {
                let (k, s, len) = (l.kernel_width, l.stride, l.in_len);
                let out_len = l.out_len();
                let taps = l.in_channels * k;
                let (gw, gb) = grads.split_at_mut(l.out_channels() * taps);
                let mut dx = vec![0.0; x.len()];
                for o in 0..l.out_channels() {
                    let row = l.kernels.row(o);
                    for t in 0..out_len {
                        let d = dpre[o * out_len + t];
                        gb[o] += d;
                        if d == 0.0 {
                            continue;
                        }
                        for c in 0..l.in_channels {
                            let base = c * len + t * s;
                            for j in 0..k {
                                gw[o * taps + c * k + j] += d * x[base + j];
                                dx[base + j] += row[c * k + j] * d;
                            }
                        }
                    }
                }
                dx
            }
        }
    }
}

/// Cached intermediates from [`Network::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    signature: Vec<LayerSpec>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(Layer::spec).collect();
        validate_specs(&specs)?;
        for layer in &layers {
            let ok = match layer {
                Layer::Dense(l) => l.bias.len() == l.weight.rows(),
                Layer::Conv1d(l) => l.bias.len() == l.kernels.rows(),
            };
            if !ok {
                return Err(Error::Config("bias length must equal output rows".into()));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(specs: &[LayerSpec], rng: &mut RngStream) -> Result<Self> {
        validate_specs(specs)?;
        let layers = specs
            .iter()
            .map(|&s| Layer::from_spec(s, |r, c, fi, fo| Matrix::glorot(r, c, fi, fo, rng)))
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        validate_specs(specs)?;
        let layers = specs
            .iter()
            .map(|&s| Layer::from_spec(s, |r, c, _, _| Matrix::zeros(r, c)))
            .collect();
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn spec(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec().input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec().output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec().param_count()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), x.len()));
        }
        let n = self.layers.len();
        let mut tape = Tape {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
            signature: self.spec(),
        };
        let mut current = x.to_vec();
        for layer in &self.layers {
            let pre = layer.pre_activation(&current)?;
            let act = layer.activation();
            let post: Vec<f64> = pre.iter().map(|&v| act.apply(v)).collect();
            tape.inputs.push(std::mem::replace(&mut current, post.clone()));
            tape.pre.push(pre);
            tape.post.push(post);
        }
        Ok((current, tape))
    }

    /// Output only; no tape.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), x.len()));
        }
        let mut current = x.to_vec();
        for layer in &self.layers {
            let act = layer.activation();
            current = layer.pre_activation(&current)?.into_iter().map(|v| act.apply(v)).collect();
        }
        Ok(current)
    }

    pub fn backward(&self, tape: &Tape, dy: &[f64]) -> Result<(Vec<f64>, ParamVector)> {
        let mut grads = vec![0.0; self.param_count()];
        let dx = self.backward_accumulate(tape, dy, &mut grads)?;
        Ok((dx, ParamVector(grads)))
    }

    /// Like [`Network::backward`] but adds parameter gradients into `grads`.
    pub fn backward_accumulate(&self, tape: &Tape, dy: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        if tape.signature.len() != self.layers.len()
            || tape.signature.iter().zip(&self.layers).any(|(s, l)| *s != l.spec())
        {
            return Err(Error::Contract("tape was recorded on a different network".into()));
        }
        if grads.len() != self.param_count() {
            return Err(Error::shape("gradient buffer", self.param_count(), grads.len()));
        }
        if dy.len() != self.output_dim() {
            return Err(Error::shape("output gradient", self.output_dim(), dy.len()));
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.spec().param_count();
        }
        let mut upstream = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation();
            let dpre: Vec<f64> = upstream
                .iter()
                .zip(tape.pre[i].iter().zip(&tape.post[i]))
                .map(|(g, (&p, &q))| g * act.derivative(p, q))
                .collect();
            let count = layer.spec().param_count();
            upstream = layer.backward(&tape.inputs[i], &dpre, &mut grads[offsets[i]..offsets[i] + count]);
        }
        Ok(upstream)
    }

    pub fn flatten(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_params(&mut out);
        ParamVector(out)
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight_values());
            out.extend_from_slice(l.bias());
        }
    }

    /// Overwrites all parameters from `p` in layout order.
    pub fn load_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::shape("parameter vector", self.param_count(), p.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let (w, b) = l.parts_mut();
            w.copy_from_slice(&p[off..off + w.len()]);
            off += w.len();
            b.copy_from_slice(&p[off..off + b.len()]);
            off += b.len();
        }
        Ok(())
    }

    pub fn unflatten(specs: &[LayerSpec], p: &ParamVector) -> Result<Self> {
        let mut net = Self::zeros(specs)?;
        net.load_params(p.as_slice())?;
        Ok(net)
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for s in specs {
        s.validate()?;
    }
    for pair in specs.windows(2) {
        if pair[0].output_dim() != pair[1].input_dim() {
            return Err(Error::Config(format!(
                "layer output {} does not match next layer input {}",
                pair[0].output_dim(),
                pair[1].input_dim()
            )));
        }
    }
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "twin-net-v1";

/// JSON checkpoint: layer template plus flattened parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub format: String,
    pub layers: Vec<LayerSpec>,
    pub params: ParamVector,
}

impl NetworkCheckpoint {
    pub fn from_network(net: &Network) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            layers: net.spec(),
            params: net.flatten(),
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unknown checkpoint format {:?}", self.format)));
        }
        Network::unflatten(&self.layers, &self.params)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, FD_STEP};
    use proptest::prelude::*;

    fn dense(inputs: usize, outputs: usize, activation: Activation) -> LayerSpec {
        LayerSpec::Dense {
            inputs,
            outputs,
            activation,
        }
    }

    fn with_weights(weight: Matrix, bias: Vec<f64>) -> Network {
        Network::from_layers(vec![Layer::Dense(DenseLayer {
            weight,
            bias,
            activation: Activation::Identity,
        })])
        .unwrap()
    }

    #[test]
    fn forward_examples() {
        let id = with_weights(Matrix::identity(3), vec![0.0; 3]);
        assert_eq!(id.forward(&[1.0, -2.0, 3.5]).unwrap().0, vec![1.0, -2.0, 3.5]);

        let zero = with_weights(Matrix::zeros(2, 3), vec![0.25, -1.0]);
        assert_eq!(zero.forward(&[9.0, 9.0, 9.0]).unwrap().0, vec![0.25, -1.0]);

        let net = with_weights(Matrix::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 2]);
        assert_eq!(net.forward(&[1.0, 1.0]).unwrap().0, vec![3.0, 7.0]);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_examples() {
        let id = with_weights(Matrix::identity(4), vec![0.0; 4]);
        let (_, tape) = id.forward(&[0.3, 0.1, -0.2, 2.0]).unwrap();
        let (dx, _) = id.backward(&tape, &[1.0; 4]).unwrap();
        assert_eq!(dx, vec![1.0; 4]);

        let mut rng = RngStream::new(1);
        let net = Network::init(&[dense(3, 5, Activation::Tanh), dense(5, 2, Activation::Identity)], &mut rng).unwrap();
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (dx, grads) = net.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(grads.as_slice().iter().all(|&v| v == 0.0));

        let other = Network::init(&[dense(3, 4, Activation::Tanh)], &mut rng).unwrap();
        assert!(matches!(other.backward(&tape, &[0.0; 4]), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_examples() {
        let layer = |kernel: Vec<f64>, width: usize, bias: f64| Conv1dLayer {
            in_channels: 1,
            in_len: 3,
            kernel_width: width,
            stride: 1,
            kernels: Matrix::from_rows(1, width, kernel).unwrap(),
            bias: vec![bias],
            activation: Activation::Identity,
        };
        let x = [1.0, 2.0, 4.0];
        assert_eq!(conv1d_forward(&layer(vec![1.0], 1, 0.0), &x).unwrap(), x.to_vec());
        assert_eq!(conv1d_forward(&layer(vec![0.0, 0.0], 2, 0.5), &x).unwrap(), vec![0.5, 0.5]);
        assert_eq!(conv1d_forward(&layer(vec![1.0, -1.0], 2, 0.0), &x).unwrap(), vec![-1.0, -2.0]);

        let mut short = layer(vec![1.0, 1.0, 1.0, 1.0], 4, 0.0);
        assert!(conv1d_forward(&short, &x).is_err());
        short.in_len = 4;
        assert!(conv1d_forward(&short, &x).is_err());
    }

    #[test]
    fn conv_stride_output_length() {
        let spec = LayerSpec::Conv1d {
            in_channels: 2,
            in_len: 9,
            out_channels: 3,
            kernel_width: 3,
            stride: 2,
            activation: Activation::Relu,
        };
        assert_eq!(spec.output_dim(), 3 * 4);
        assert_eq!(conv_out_len(9, 3, 2), 4);
        assert_eq!(conv_out_len(3, 3, 5), 1);
    }

    #[test]
    fn flatten_layout() {
        let specs = [dense(2, 3, Activation::Relu), dense(3, 1, Activation::Identity)];
        let zero = Network::zeros(&specs).unwrap();
        assert!(zero.flatten().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(zero.param_count(), 2 * 3 + 3 + 3 + 1);

        // second layer weight (row 0, col 2) lives at offset 9 + 2
        let mut changed = zero.clone();
        if let Layer::Dense(l) = &mut changed.layers[1] {
            l.weight.values_mut()[2] = 1.5;
        }
        let a = zero.flatten();
        let b = changed.flatten();
        let diffs: Vec<usize> = (0..a.len()).filter(|&i| a.as_slice()[i] != b.as_slice()[i]).collect();
        assert_eq!(diffs, vec![11]);
        assert!(Network::unflatten(&specs, &ParamVector::zeros(3)).is_err());
    }

    #[test]
    fn sgd_examples() {
        let p = ParamVector::new(vec![1.0, -2.0]);
        assert_eq!(sgd_step(&p, &ParamVector::zeros(2), 0.5).unwrap(), p);
        let one = sgd_step(&ParamVector::new(vec![1.0]), &ParamVector::new(vec![2.0]), 0.1).unwrap();
        assert!((one.as_slice()[0] - 0.8).abs() < 1e-15);

        let mut theta = ParamVector::new(vec![1.0]);
        for _ in 0..10 {
            let g = ParamVector::new(vec![2.0 * theta.as_slice()[0]]);
            theta = sgd_step(&theta, &g, 0.1).unwrap();
        }
        assert!((theta.as_slice()[0] - 0.1073741824).abs() < 1e-12);
        assert!(sgd_step(&p, &ParamVector::zeros(1), 0.1).is_err());
        assert!(sgd_step(&p, &p, 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = RngStream::new(99);
        let specs = [
            LayerSpec::Conv1d {
                in_channels: 2,
                in_len: 6,
                out_channels: 3,
                kernel_width: 2,
                stride: 2,
                activation: Activation::Relu,
            },
            dense(9, 4, Activation::Sigmoid),
        ];
        let net = Network::init(&specs, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        NetworkCheckpoint::from_network(&net).write(&path).unwrap();
        let back = NetworkCheckpoint::read(&path).unwrap().to_network().unwrap();
        let bits = |n: &Network| n.flatten().into_inner().into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&net), bits(&back));
        assert_eq!(net, back);
    }

    fn random_specs(rng: &mut RngStream) -> Vec<LayerSpec> {
        let acts = [Activation::Identity, Activation::Relu, Activation::Sigmoid, Activation::Tanh];
        let channels = 1 + rng.index(3);
        let len = 4 + rng.index(6);
        let width = 1 + rng.index(3);
        let stride = 1 + rng.index(2);
        let conv = LayerSpec::Conv1d {
            in_channels: channels,
            in_len: len,
            out_channels: 1 + rng.index(3),
            kernel_width: width,
            stride,
            activation: acts[rng.index(4)],
        };
        let hidden = 1 + rng.index(5);
        vec![
            conv,
            dense(conv.output_dim(), hidden, acts[rng.index(4)]),
            dense(hidden, 1 + rng.index(3), acts[rng.index(4)]),
        ]
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngStream::new(2024);
        for trial in 0..120 {
            let specs = random_specs(&mut rng);
            let net = Network::init(&specs, &mut rng).unwrap();
            let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let target: Vec<f64> = (0..net.output_dim()).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let loss = |n: &Network, input: &[f64]| {
                let y = n.predict(input).unwrap();
                0.5 * y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            };
            let (y, tape) = net.forward(&x).unwrap();
            let dy: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
            let (dx, grads) = net.backward(&tape, &dy).unwrap();

            let p0 = net.flatten();
            let mut probe = net.clone();
            let fd = finite_diff_grad(
                |p| {
                    probe.load_params(p).unwrap();
                    loss(&probe, &x)
                },
                p0.as_slice(),
                FD_STEP,
            )
            .unwrap();
            let err = relative_error(grads.as_slice(), &fd, 1e-8);
            // relu kinks inside the difference window invalidate the oracle
            let kinked = tape_has_kink(&net, &tape);
            if !kinked {
                assert!(err <= 1e-5, "trial {trial}: param rel err {err}");
            }
            let fdx = finite_diff_grad(|xi| loss(&net, xi), &x, FD_STEP).unwrap();
            let errx = relative_error(&dx, &fdx, 1e-8);
            if !kinked {
                assert!(errx <= 1e-5, "trial {trial}: input rel err {errx}");
            }
        }
    }

    fn tape_has_kink(net: &Network, tape: &Tape) -> bool {
        net.layers
            .iter()
            .zip(&tape.pre)
            .any(|(l, pre)| l.activation() == Activation::Relu && pre.iter().any(|v| v.abs() < 1e-4))
    }

    proptest! {
        #[test]
        fn flatten_unflatten_bijection(seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let specs = random_specs(&mut rng);
            let net = Network::init(&specs, &mut rng).unwrap();
            let p = net.flatten();
            prop_assert_eq!(p.len(), net.param_count());
            let back = Network::unflatten(&specs, &p).unwrap();
            prop_assert_eq!(&back, &net);
            let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let a = net.forward(&x).unwrap().0;
            let b = back.forward(&x).unwrap().0;
            prop_assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
