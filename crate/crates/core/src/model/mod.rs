//! The convolutional detector: layer table, parameter layout, forward and backward passes.

pub mod checkpoint;
pub mod layers;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledFeatureSet;
use crate::dsp::FRAMES_PER_BLOCK;
use crate::filterbanks::{FeatureMatrix, NUM_CEPS};

pub use train::{bce_grad_p, bce_loss, train, Adam, EpochRecord, TrainConfig, TrainingHistory};

/// Clamp applied to probabilities before the log in the loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("parameter vector has {got} values, expected {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Activation tensor geometry, channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const fn new(channels: usize, rows: usize, cols: usize) -> Self {
        Self { channels, rows, cols }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.rows * self.cols
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Relu,
    MaxPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Sigmoid,
}

impl Layer {
    /// Output geometry, or `None` when the input does not fit.
    pub const fn output_shape(&self, s: Shape) -> Option<Shape> {
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if s.channels != in_channels || s.rows < kernel.0 || s.cols < kernel.1 {
                    return None;
                }
                Some(Shape::new(
                    out_channels,
                    layers::window_out(s.rows, kernel.0, stride.0),
                    layers::window_out(s.cols, kernel.1, stride.1),
                ))
            }
            Layer::MaxPool { kernel, stride } => {
                if s.rows < kernel.0 || s.cols < kernel.1 {
                    return None;
                }
                Some(Shape::new(
                    s.channels,
                    layers::window_out(s.rows, kernel.0, stride.0),
                    layers::window_out(s.cols, kernel.1, stride.1),
                ))
            }
            Layer::Flatten => Some(Shape::new(s.len(), 1, 1)),
            Layer::Dense { inputs, outputs } => {
                if s.len() != inputs {
                    return None;
                }
                Some(Shape::new(outputs, 1, 1))
            }
            Layer::Relu | Layer::Sigmoid => Some(s),
        }
    }

    /// (weights, biases) parameter counts.
    pub const fn param_counts(&self) -> (usize, usize) {
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels * in_channels * kernel.0 * kernel.1, out_channels),
            Layer::Dense { inputs, outputs } => (outputs * inputs, outputs),
            _ => (0, 0),
        }
    }

    /// Fan-in used for He initialisation.
    pub const fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel.0 * kernel.1,
            Layer::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }
}

pub const INPUT_SHAPE: Shape = Shape::new(1, FRAMES_PER_BLOCK, NUM_CEPS);
pub const FLATTEN_WIDTH: usize = 896;
pub const HIDDEN_UNITS: usize = 128;

pub const ARCHITECTURE: [Layer; 14] = [
    Layer::Conv2d {
        in_channels: 1,
        out_channels: 64,
        kernel: (2, 2),
        stride: (1, 1),
    },
    Layer::Relu,
    Layer::MaxPool {
        kernel: (1, 3),
        stride: (1, 3),
    },
    Layer::Conv2d {
        in_channels: 64,
        out_channels: 64,
        kernel: (2, 2),
        stride: (1, 1),
    },
    Layer::Relu,
    Layer::MaxPool {
        kernel: (1, 1),
        stride: (1, 1),
    },
    Layer::Conv2d {
        in_channels: 64,
        out_channels: 32,
        kernel: (2, 2),
        stride: (1, 1),
    },
    Layer::Relu,
    Layer::MaxPool {
        kernel: (2, 2),
        stride: (2, 2),
    },
    Layer::Flatten,
    Layer::Dense {
        inputs: FLATTEN_WIDTH,
        outputs: HIDDEN_UNITS,
    },
    Layer::Relu,
    Layer::Dense {
        inputs: HIDDEN_UNITS,
        outputs: 1,
    },
    Layer::Sigmoid,
];

/// Output shape of every layer in `ARCHITECTURE`, evaluated at compile time.
pub const SHAPES: [Shape; ARCHITECTURE.len()] = shape_chain(INPUT_SHAPE);

pub const fn shape_chain(input: Shape) -> [Shape; ARCHITECTURE.len()] {
    let mut out = [Shape::new(0, 0, 0); ARCHITECTURE.len()];
    let mut s = input;
    let mut i = 0;
    while i < ARCHITECTURE.len() {
        s = match ARCHITECTURE[i].output_shape(s) {
            Some(next) => next,
            None => panic!("layer does not accept its input shape"),
        };
        out[i] = s;
        i += 1;
    }
    out
}

const fn flatten_index() -> usize {
    let mut i = 0;
    while i < ARCHITECTURE.len() {
        if matches!(ARCHITECTURE[i], Layer::Flatten) {
            return i;
        }
        i += 1;
    }
    panic!("no flatten layer")
}

const fn total_params() -> usize {
    let mut n = 0;
    let mut i = 0;
    while i < ARCHITECTURE.len() {
        let (w, b) = ARCHITECTURE[i].param_counts();
        n += w + b;
        i += 1;
    }
    n
}

pub const NUM_PARAMS: usize = total_params();

const _: () = {
    assert!(SHAPES[flatten_index()].channels == FLATTEN_WIDTH);
    assert!(SHAPES[ARCHITECTURE.len() - 1].channels == 1);
    assert!(matches!(ARCHITECTURE[ARCHITECTURE.len() - 1], Layer::Sigmoid));
};

/// Spatial shapes (rows, cols) from the first convolution to the last pool.
pub fn spatial_chain() -> Vec<(usize, usize)> {
    ARCHITECTURE
        .iter()
        .zip(SHAPES.iter())
        .filter(|(l, _)| matches!(l, Layer::Conv2d { .. } | Layer::MaxPool { .. }))
        .map(|(_, s)| (s.rows, s.cols))
        .collect()
}

/// Offsets of one parametrised layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub layer: usize,
    pub weights: (usize, usize),
    pub biases: (usize, usize),
}

/// Layout in layer order: weights then biases for every conv and dense layer.
pub fn param_slots() -> Vec<ParamSlot> {
    let mut slots = Vec::new();
    let mut off = 0;
    for (i, l) in ARCHITECTURE.iter().enumerate() {
        let (w, b) = l.param_counts();
        if w + b == 0 {
            continue;
        }
        slots.push(ParamSlot {
            layer: i,
            weights: (off, off + w),
            biases: (off + w, off + w + b),
        });
        off += w + b;
    }
    slots
}

fn slot_for(slots: &[ParamSlot], layer: usize) -> ParamSlot {
    *slots.iter().find(|s| s.layer == layer).expect("parametrised layer")
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-coefficient z-score statistics, one entry per feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(cols: usize) -> Self {
        Self {
            mean: vec![0.0; cols],
            std: vec![1.0; cols],
        }
    }

    /// Pools every frame of every matrix. Columns with no spread get unit scale.
    pub fn fit<'a, I>(matrices: I, cols: usize) -> Self
    where
        I: IntoIterator<Item = &'a FeatureMatrix>,
    {
        let mut sum = vec![0.0; cols];
        let mut sq = vec![0.0; cols];
        let mut n = 0usize;
        let matrices: Vec<&FeatureMatrix> = matrices.into_iter().collect();
        for m in &matrices {
            for row in m.supervector().chunks(cols) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity(cols);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for m in &matrices {
            for row in m.supervector().chunks(cols) {
                for ((q, v), mu) in sq.iter_mut().zip(row).zip(&mean) {
                    *q += (v - mu) * (v - mu);
                }
            }
        }
        let std = sq
            .iter()
            .map(|q| {
                let s = (q / n as f64).sqrt();
                if s > 1e-12 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let cols = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % cols]) / self.std[i % cols])
            .collect()
    }
}

/// Intermediate values kept by a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer; the last entry is the logit.
    inputs: Vec<Vec<f64>>,
    cols: Vec<Option<Vec<f64>>>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl Trace {
    pub fn logit(&self) -> f64 {
        self.inputs.last().expect("nonempty")[0]
    }

    pub fn probability(&self) -> f64 {
        sigmoid(self.logit())
    }

    /// Output of layer `i` (input of `i + 1`).
    pub fn output(&self, i: usize) -> &[f64] {
        &self.inputs[i + 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnDetector {
    params: Vec<f64>,
    standardizer: Standardizer,
}

impl CnnDetector {
    pub fn zeros() -> Self {
        Self {
            params: vec![0.0; NUM_PARAMS],
            standardizer: Standardizer::identity(INPUT_SHAPE.cols),
        }
    }

    pub fn from_params(params: Vec<f64>, standardizer: Standardizer) -> Result<Self, ModelError> {
        if params.len() != NUM_PARAMS {
            return Err(ModelError::ParamCount {
                expected: NUM_PARAMS,
                got: params.len(),
            });
        }
        Ok(Self { params, standardizer })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn set_standardizer(&mut self, s: Standardizer) {
        self.standardizer = s;
    }

    fn check_shape(x: &FeatureMatrix) -> Result<(), ModelError> {
        let expected = (INPUT_SHAPE.rows, INPUT_SHAPE.cols);
        if x.shape() != expected {
            return Err(ModelError::ShapeMismatch {
                expected,
                got: x.shape(),
            });
        }
        Ok(())
    }

    /// Standardized network input for a feature matrix.
    pub fn prepare(&self, x: &FeatureMatrix) -> Result<Vec<f64>, ModelError> {
        Self::check_shape(x)?;
        Ok(self.standardizer.apply(x.supervector()))
    }

    /// Probability of the adversarial class.
    pub fn forward(&self, x: &FeatureMatrix) -> Result<f64, ModelError> {
        Ok(self.trace(&self.prepare(x)?).probability())
    }

    /// Runs every layer but the final sigmoid on an already standardized input.
    pub fn trace(&self, input: &[f64]) -> Trace {
        assert_eq!(input.len(), INPUT_SHAPE.len());
        let slots = param_slots();
        let n = ARCHITECTURE.len() - 1;
        let mut inputs = Vec::with_capacity(n + 1);
        let mut cols = vec![None; n];
        let mut argmax = vec![None; n];
        inputs.push(input.to_vec());
        let mut shape = INPUT_SHAPE;
        for (i, layer) in ARCHITECTURE[..n].iter().enumerate() {
            let x = inputs.last().expect("nonempty");
            let y = match *layer {
                Layer::Conv2d { kernel, stride, .. } => {
                    let slot = slot_for(&slots, i);
                    let (y, c) = layers::conv_forward(
                        x,
                        shape,
                        &self.params[slot.weights.0..slot.weights.1],
                        &self.params[slot.biases.0..slot.biases.1],
                        kernel,
                        stride,
                    );
                    cols[i] = Some(c);
                    y
                }
                Layer::Relu => {
                    let mut y = x.clone();
                    layers::relu_forward(&mut y);
                    y
                }
                Layer::MaxPool { kernel, stride } => {
                    let (y, a) = layers::maxpool_forward(x, shape, kernel, stride);
                    argmax[i] = Some(a);
                    y
                }
                Layer::Flatten => x.clone(),
                Layer::Dense { .. } => {
                    let slot = slot_for(&slots, i);
                    layers::dense_forward(
                        x,
                        &self.params[slot.weights.0..slot.weights.1],
                        &self.params[slot.biases.0..slot.biases.1],
                    )
                }
                Layer::Sigmoid => unreachable!("sigmoid is applied with the loss"),
            };
            inputs.push(y);
            shape = SHAPES[i];
        }
        Trace { inputs, cols, argmax }
    }

    /// Adds `scale * dL/dparams` to `grad`, given `dL/dlogit`.
    pub fn backward(&self, trace: &Trace, dlogit: f64, scale: f64, grad: &mut [f64]) {
        assert_eq!(grad.len(), NUM_PARAMS);
        let slots = param_slots();
        let n = ARCHITECTURE.len() - 1;
        let mut g = vec![dlogit * scale];
        for i in (0..n).rev() {
            let in_shape = if i == 0 { INPUT_SHAPE } else { SHAPES[i - 1] };
            let need_input = i > 0;
            g = match ARCHITECTURE[i] {
                Layer::Conv2d { kernel, stride, .. } => {
                    let slot = slot_for(&slots, i);
                    let (wg, bg) = grad[slot.weights.0..slot.biases.1].split_at_mut(slot.weights.1 - slot.weights.0);
                    match layers::conv_backward(
                        &g,
                        trace.cols[i].as_ref().expect("conv cols"),
                        in_shape,
                        &self.params[slot.weights.0..slot.weights.1],
                        kernel,
                        stride,
                        wg,
                        bg,
                        need_input,
                    ) {
                        Some(d) => d,
                        None => break,
                    }
                }
                Layer::Relu => {
                    layers::relu_backward(&mut g, &trace.inputs[i + 1]);
                    g
                }
                Layer::MaxPool { .. } => {
                    layers::maxpool_backward(&g, trace.argmax[i].as_ref().expect("argmax"), in_shape.len())
                }
                Layer::Flatten => g,
                Layer::Dense { .. } => {
                    let slot = slot_for(&slots, i);
                    let (wg, bg) = grad[slot.weights.0..slot.biases.1].split_at_mut(slot.weights.1 - slot.weights.0);
                    match layers::dense_backward(
                        &g,
                        &trace.inputs[i],
                        &self.params[slot.weights.0..slot.weights.1],
                        wg,
                        bg,
                        need_input,
                    ) {
                        Some(d) => d,
                        None => break,
                    }
                }
                Layer::Sigmoid => unreachable!(),
            };
        }
    }

    /// Mean clamped BCE over a batch of standardized inputs and its gradient.
    pub fn batch_loss_and_grad(&self, xs: &[&[f64]], ys: &[u8]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; NUM_PARAMS];
        let mut loss = 0.0;
        let scale = 1.0 / xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let t = self.trace(x);
            let z = t.logit();
            let p = sigmoid(z);
            loss += bce_loss(p, y);
            let dz = bce_grad_p(p, y) * p * (1.0 - p);
            if dz != 0.0 {
                self.backward(&t, dz, scale, &mut grad);
            }
        }
        (loss * scale, grad)
    }

    /// Mean clamped BCE over standardized inputs.
    pub fn mean_loss(&self, xs: &[&[f64]], ys: &[u8]) -> f64 {
        let total: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, &y)| bce_loss(self.trace(x).probability(), y))
            .sum();
        total / xs.len() as f64
    }
}

/// Scores in input order, paired with labels.
pub fn predict_scores(model: &CnnDetector, set: &LabeledFeatureSet) -> Result<Vec<(f64, u8)>, ModelError> {
    set.items
        .iter()
        .map(|it| Ok((model.forward(&it.features)?, it.label)))
        .collect()
}
