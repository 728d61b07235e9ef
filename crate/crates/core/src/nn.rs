//! Dense feed-forward network with ReLU hidden layers, softmax cross-entropy
//! loss and plain SGD. All arithmetic is `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Copies the selected rows into a new matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// One fully connected layer. `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    fn weight_row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }
}

/// Ordered dense layers of an MLP. Also used as the container for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<DenseLayer>,
}

impl ModelParams {
    /// Builds an all-zero model with the given layer dimensions.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        validate_dims(layer_dims)?;
        Ok(Self {
            layers: layer_dims
                .windows(2)
                .map(|w| DenseLayer::zeros(w[0], w[1]))
                .collect(),
        })
    }

    /// `[input, hidden..., classes]`
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers.len() + 1);
        if let Some(first) = self.layers.first() {
            dims.push(first.inputs);
        }
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
    }

    pub(crate) fn check_shape(&self, other: &ModelParams, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: layer dims {:?} vs {:?}",
                self.layer_dims(),
                other.layer_dims()
            )))
        }
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// In-place `self -= lr * grads`.
    pub fn apply_sgd(&mut self, grads: &ModelParams, lr: f64) -> Result<()> {
        self.check_shape(grads, "sgd step")?;
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, gv) in layer.weights.iter_mut().zip(&g.weights) {
                *p -= lr * gv;
            }
            for (p, gv) in layer.bias.iter_mut().zip(&g.bias) {
                *p -= lr * gv;
            }
        }
        Ok(())
    }
}

/// A labelled set of samples, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.rows,
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "layer_dims needs at least input and output dims, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "layer dims must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_model(layer_dims: &[usize], seed: u64) -> Result<ModelParams> {
    let mut model = ModelParams::zeros(layer_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut model.layers {
        let bound = 1.0 / (layer.inputs as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(model)
}

/// `out[i][o] = bias[o] + sum_j input[i][j] * w[o][j]`
fn affine(layer: &DenseLayer, input: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(input.rows, layer.outputs);
    for i in 0..input.rows {
        let x = input.row(i);
        let dst = out.row_mut(i);
        for (o, d) in dst.iter_mut().enumerate() {
            *d = layer.bias[o] + dot(x, layer.weight_row(o));
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn relu_in_place(m: &mut Matrix) {
    for v in &mut m.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn check_input_width(model: &ModelParams, inputs: &Matrix) -> Result<()> {
    if model.layers.is_empty() {
        return Err(Error::Shape("model has no layers".into()));
    }
    if inputs.cols != model.input_dim() {
        return Err(Error::Shape(format!(
            "input width {} but model expects {}",
            inputs.cols,
            model.input_dim()
        )));
    }
    Ok(())
}

/// Layer outputs after activation; `acts[0]` is the input, `acts[L]` the logits.
fn forward_cached(model: &ModelParams, inputs: &Matrix) -> Vec<Matrix> {
    let last = model.layers.len() - 1;
    let mut acts = Vec::with_capacity(model.layers.len() + 1);
    acts.push(inputs.clone());
    for (l, layer) in model.layers.iter().enumerate() {
        let mut z = affine(layer, &acts[l]);
        if l < last {
            relu_in_place(&mut z);
        }
        acts.push(z);
    }
    acts
}

/// Logits for every input row.
pub fn forward(model: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    check_input_width(model, inputs)?;
    let mut act = affine(&model.layers[0], inputs);
    for layer in &model.layers[1..] {
        relu_in_place(&mut act);
        act = affine(layer, &act);
    }
    Ok(act)
}

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(model: &ModelParams, batch: &Batch) -> Result<(f64, ModelParams)> {
    check_input_width(model, &batch.inputs)?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if batch.inputs.rows != batch.labels.len() {
        return Err(Error::Shape("batch rows and labels differ".into()));
    }
    let classes = model.class_count();
    if let Some(bad) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Shape(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let acts = forward_cached(model, &batch.inputs);
    let logits = acts.last().expect("at least one layer");

    // dL/dlogits = (softmax - onehot) / n
    let mut delta = Matrix::zeros(n, classes);
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_sum = max + sum.ln();
        let y = batch.labels[i];
        loss += log_sum - row[y];
        let d = delta.row_mut(i);
        for (c, dc) in d.iter_mut().enumerate() {
            let p = (row[c] - log_sum).exp();
            *dc = (p - if c == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    loss *= inv_n;

    let mut grads = ModelParams {
        layers: model
            .layers
            .iter()
            .map(|l| DenseLayer::zeros(l.inputs, l.outputs))
            .collect(),
    };

    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let prev = &acts[l];
        let g = &mut grads.layers[l];
        for i in 0..n {
            let x = prev.row(i);
            let d = delta.row(i);
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                g.bias[o] += dv;
                let gw = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, xv) in gw.iter_mut().zip(x) {
                    *w += dv * xv;
                }
            }
        }
        if l == 0 {
            break;
        }
        // Back through the weights, then through the ReLU of layer l-1.
        let mut next = Matrix::zeros(n, layer.inputs);
        for i in 0..n {
            let d = delta.row(i);
            let dst = next.row_mut(i);
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                for (t, w) in dst.iter_mut().zip(layer.weight_row(o)) {
                    *t += dv * w;
                }
            }
            for (t, a) in dst.iter_mut().zip(prev.row(i)) {
                if *a <= 0.0 {
                    *t = 0.0;
                }
            }
        }
        delta = next;
    }

    Ok((loss, grads))
}

/// Returns `model - lr * grads`.
pub fn sgd_step(model: &ModelParams, grads: &ModelParams, lr: f64) -> Result<ModelParams> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    let mut out = model.clone();
    out.apply_sgd(grads, lr)?;
    Ok(out)
}

/// First layer's weights and bias followed by the last layer's weights and
/// bias. A single-layer model yields its full parameter vector once.
pub fn flatten_partial(model: &ModelParams) -> Vec<f64> {
    match model.layers.as_slice() {
        [] => Vec::new(),
        [only] => only.weights.iter().chain(&only.bias).copied().collect(),
        [first, .., last] => first
            .weights
            .iter()
            .chain(&first.bias)
            .chain(&last.weights)
            .chain(&last.bias)
            .copied()
            .collect(),
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate(model: &ModelParams, test: &Batch) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    const CHUNK: usize = 4096;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let logits = forward(model, &test.inputs.select_rows(chunk))?;
        correct += chunk
            .iter()
            .enumerate()
            .filter(|(r, &i)| argmax(logits.row(*r)) == test.labels[i])
            .count();
    }
    Ok(correct as f64 / test.len() as f64)
}
