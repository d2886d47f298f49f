//! Fully connected network with weighted backpropagation.
//!
//! The backward pass takes one weight per sample and returns
//! `Σ_i w_i ∇_W c_i`, so any criterion whose weight gradient is a weighted
//! sum of per-sample loss gradients (CE, RAE, NRAE, ANRAT) shares a single
//! batched pass.
//!
//! Flat parameter order is frozen: layer by layer, each layer's weight
//! matrix row-major (`d_k × d_{k-1}`) followed by its bias vector.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

use crate::criteria::{per_sample_loss, LossMode, PerSampleLosses, Prediction, Target};
use crate::data::{SampleBatch, Targets};
use crate::error::{Error, Result};
use crate::hexfloat;
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation value `a = act(z)`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputMode {
    SoftmaxCe,
    SigmoidBinaryCe,
    IdentitySquared,
}

impl OutputMode {
    pub fn loss_mode(self) -> LossMode {
        match self {
            OutputMode::SoftmaxCe => LossMode::CategoricalCe,
            OutputMode::SigmoidBinaryCe => LossMode::BinaryCe,
            OutputMode::IdentitySquared => LossMode::Squared,
        }
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, OutputMode::IdentitySquared)
    }
}

impl fmt::Display for OutputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputMode::SoftmaxCe => "softmax-ce",
            OutputMode::SigmoidBinaryCe => "sigmoid-binary-ce",
            OutputMode::IdentitySquared => "identity-squared",
        })
    }
}

impl FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax-ce" => Ok(OutputMode::SoftmaxCe),
            "sigmoid-binary-ce" => Ok(OutputMode::SigmoidBinaryCe),
            "identity-squared" => Ok(OutputMode::IdentitySquared),
            other => Err(Error::invalid(format!("unknown output mode '{other}'"))),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `d_k × d_{k-1}`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    activation: Activation,
    output_mode: OutputMode,
    layers: Vec<Layer>,
}

fn validate_shape(dims: &[usize], output_mode: OutputMode) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::invalid(format!(
            "network needs at least an input and an output width, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::invalid(format!("layer widths must be >= 1, got {dims:?}")));
    }
    let out = *dims.last().unwrap();
    match output_mode {
        OutputMode::SoftmaxCe if out < 2 => Err(Error::invalid("softmax-ce needs >= 2 outputs")),
        OutputMode::SigmoidBinaryCe | OutputMode::IdentitySquared if out != 1 => Err(Error::invalid(format!(
            "{output_mode} needs exactly one output, got {out}"
        ))),
        _ => Ok(()),
    }
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: &[usize], activation: Activation, output_mode: OutputMode, seed: u64) -> Result<Self> {
        validate_shape(dims, output_mode)?;
        let mut rng = stream_rng(seed, Stream::Init);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-r..=r)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(MlpModel {
            dims: dims.to_vec(),
            activation,
            output_mode,
            layers,
        })
    }

    /// All-zero parameters with the given shape.
    pub fn zeros(dims: &[usize], activation: Activation, output_mode: OutputMode) -> Result<Self> {
        validate_shape(dims, output_mode)?;
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(MlpModel {
            dims: dims.to_vec(),
            activation,
            output_mode,
            layers,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_mode(&self) -> OutputMode {
        self.output_mode
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.dims)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weights.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    /// Copy of this model's shape with parameters taken from `params`.
    pub fn unflatten(&self, params: &[f64]) -> Result<MlpModel> {
        let mut model = self.clone();
        model.set_params(params)?;
        Ok(model)
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for (dst, src) in layer.weights.iter_mut().zip(&params[offset..]) {
                *dst = *src;
            }
            offset += layer.weights.len();
            for (dst, src) in layer.bias.iter_mut().zip(&params[offset..]) {
                *dst = *src;
            }
            offset += layer.bias.len();
        }
        Ok(())
    }

    /// `θ ← θ + alpha · direction` over the flat parameter order.
    pub fn add_scaled(&mut self, alpha: f64, direction: &[f64]) -> Result<()> {
        if direction.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "update has {} entries, model has {} parameters",
                direction.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v += alpha * direction[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, inputs: &Array2<f64>) -> Result<ForwardPass> {
        if inputs.ncols() != self.dims[0] {
            return Err(Error::invalid(format!(
                "input width {} does not match network input {}",
                inputs.ncols(),
                self.dims[0]
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.clone());
        let last = self.layers.len() - 1;
        let mut logits = Array2::zeros((0, 0));
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = activations[k].dot(&layer.weights.t());
            z += &layer.bias;
            if k < last {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            } else {
                logits = z.clone();
                self.apply_output(&mut z);
            }
            activations.push(z);
        }
        Ok(ForwardPass { activations, logits })
    }

    fn apply_output(&self, z: &mut Array2<f64>) {
        match self.output_mode {
            OutputMode::SoftmaxCe => {
                for mut row in z.outer_iter_mut() {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|v| (v - max).exp());
                    let total = row.sum();
                    row.mapv_inplace(|v| v / total);
                }
            }
            OutputMode::SigmoidBinaryCe => z.mapv_inplace(sigmoid),
            OutputMode::IdentitySquared => {}
        }
    }

    fn check_targets(&self, batch: &SampleBatch) -> Result<()> {
        match (&batch.targets, self.output_mode) {
            (Targets::Classes { num_classes, .. }, OutputMode::SoftmaxCe) if *num_classes == self.output_width() => Ok(()),
            (Targets::Classes { labels, .. }, OutputMode::SigmoidBinaryCe) if labels.iter().all(|&l| l < 2) => Ok(()),
            (Targets::Real(_), OutputMode::IdentitySquared) => Ok(()),
            (targets, mode) => Err(Error::invalid(format!(
                "targets ({}) incompatible with output mode {mode} of width {}",
                match targets {
                    Targets::Classes { num_classes, .. } => format!("{num_classes} classes"),
                    Targets::Real(_) => "real".into(),
                },
                self.output_width()
            ))),
        }
    }

    pub fn output_width(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Per-sample base losses `c_i` from a completed forward pass.
    ///
    /// The cross-entropy modes work on the logits in log space, so `c_i` is
    /// finite without clamping the probabilities and its gradient never
    /// vanishes on a misclassified sample.
    pub fn losses(&self, batch: &SampleBatch, pass: &ForwardPass) -> Result<PerSampleLosses> {
        self.check_targets(batch)?;
        if pass.logits.nrows() != batch.len() {
            return Err(Error::invalid("forward pass does not belong to this batch"));
        }
        let z = &pass.logits;
        let non_finite = || Error::NumericDomain("network output is not finite".into());
        let values = match &batch.targets {
            Targets::Classes { labels, .. } if self.output_mode == OutputMode::SoftmaxCe => z
                .outer_iter()
                .zip(labels)
                .map(|(row, &y)| {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    let c = (lse - row[y]).max(0.0);
                    if c.is_finite() {
                        Ok(c)
                    } else {
                        Err(non_finite())
                    }
                })
                .collect::<Result<Vec<_>>>()?,
            Targets::Classes { labels, .. } => z
                .column(0)
                .iter()
                .zip(labels)
                .map(|(&v, &y)| {
                    // -log σ(v) = softplus(-v), -log(1 - σ(v)) = softplus(v)
                    let c = softplus(if y == 1 { -v } else { v });
                    if c.is_finite() {
                        Ok(c)
                    } else {
                        Err(non_finite())
                    }
                })
                .collect::<Result<Vec<_>>>()?,
            Targets::Real(y) => pass
                .output()
                .column(0)
                .iter()
                .zip(y)
                .map(|(&f, &t)| per_sample_loss(Prediction::Scalar(f), Target::Real(t), self.output_mode.loss_mode()))
                .collect::<Result<Vec<_>>>()?,
        };
        PerSampleLosses::new(values)
    }

    /// `∂c_i/∂z_L` for every sample, one row per sample.
    fn output_deltas(&self, batch: &SampleBatch, pass: &ForwardPass) -> Array2<f64> {
        let mut delta = pass.output().clone();
        match (&batch.targets, self.output_mode) {
            (Targets::Classes { labels, .. }, OutputMode::SoftmaxCe) => {
                for (mut row, &y) in delta.outer_iter_mut().zip(labels) {
                    row[y] -= 1.0;
                }
            }
            (Targets::Classes { labels, .. }, OutputMode::SigmoidBinaryCe) => {
                for (mut row, &y) in delta.outer_iter_mut().zip(labels) {
                    row[0] -= y as f64;
                }
            }
            (Targets::Real(y), _) => {
                for (mut row, &t) in delta.outer_iter_mut().zip(y) {
                    row[0] = 2.0 * (row[0] - t);
                }
            }
            _ => unreachable!("targets checked before backward"),
        }
        delta
    }

    /// `Σ_i weights[i] · ∇_W c_i` in flat parameter order.
    pub fn weighted_backward(&self, batch: &SampleBatch, pass: &ForwardPass, weights: &[f64]) -> Result<GradientBundle> {
        if weights.len() != batch.len() {
            return Err(Error::invalid(format!(
                "{} sample weights for a batch of {}",
                weights.len(),
                batch.len()
            )));
        }
        if pass.activations.len() != self.layers.len() + 1 || pass.output().nrows() != batch.len() {
            return Err(Error::invalid("forward pass does not belong to this model and batch"));
        }
        self.check_targets(batch)?;
        let mut delta = self.output_deltas(batch, pass);
        let w = Array1::from(weights.to_vec());
        delta *= &w.insert_axis(Axis(1));

        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let input = &pass.activations[k];
            let grad_w = delta.t().dot(input);
            let grad_b = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut next = delta.dot(&self.layers[k].weights);
                let act = self.activation;
                Zip::from(&mut next)
                    .and(input)
                    .for_each(|d, &a| *d *= act.derivative_from_output(a));
                delta = next;
            }
            grads.push((grad_w, grad_b));
        }
        let mut flat_grad = Vec::with_capacity(self.param_count());
        for (gw, gb) in grads.iter().rev() {
            flat_grad.extend(gw.iter());
            flat_grad.extend(gb.iter());
        }
        Ok(GradientBundle {
            flat_grad,
            sample_weights_used: weights.to_vec(),
            lambda_grad: None,
        })
    }

    /// Text model file; every parameter is written as a hex float.
    pub fn serialize(&self) -> String {
        let mut out = String::from("mlp");
        for d in &self.dims {
            write!(out, " {d}").unwrap();
        }
        writeln!(out, " {} {}", self.activation, self.output_mode).unwrap();
        for (k, layer) in self.layers.iter().enumerate() {
            writeln!(out, "layer {}", k + 1).unwrap();
            for (row, b) in layer.weights.outer_iter().zip(layer.bias.iter()) {
                let tokens: Vec<String> = row.iter().chain(std::iter::once(b)).map(|v| hexfloat::format(*v)).collect();
                writeln!(out, "{}", tokens.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn deserialize(text: &str) -> Result<MlpModel> {
        let parse_err = |line: usize, message: String| Error::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header line".into()))?;
        let tokens: Vec<&str> = header.split_whitespace().collect();
        if tokens.len() < 5 || tokens[0] != "mlp" {
            return Err(parse_err(
                1,
                "header must be 'mlp <d_0> ... <d_L> <activation> <output_mode>'".into(),
            ));
        }
        let n = tokens.len();
        let dims = tokens[1..n - 2]
            .iter()
            .map(|t| t.parse::<usize>().map_err(|_| parse_err(1, format!("bad layer width '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        let activation: Activation = tokens[n - 2].parse().map_err(|e: Error| parse_err(1, e.to_string()))?;
        let output_mode: OutputMode = tokens[n - 1].parse().map_err(|e: Error| parse_err(1, e.to_string()))?;
        let mut model = MlpModel::zeros(&dims, activation, output_mode).map_err(|e| parse_err(1, e.to_string()))?;

        let mut last_line = 1;
        for k in 0..model.layers.len() {
            let (line_no, line) = lines
                .next()
                .ok_or_else(|| parse_err(last_line + 1, format!("missing section 'layer {}'", k + 1)))?;
            if line.trim() != format!("layer {}", k + 1) {
                return Err(parse_err(line_no, format!("expected 'layer {}', found '{line}'", k + 1)));
            }
            last_line = line_no;
            let layer = &mut model.layers[k];
            let (rows, cols) = layer.weights.dim();
            for r in 0..rows {
                let (line_no, line) = lines.next().ok_or_else(|| {
                    parse_err(
                        last_line + 1,
                        format!("missing section: layer {} ends after {r} of {rows} rows", k + 1),
                    )
                })?;
                last_line = line_no;
                let values = line
                    .split_whitespace()
                    .map(|t| hexfloat::parse(t).ok_or_else(|| parse_err(line_no, format!("bad hex float '{t}'"))))
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != cols + 1 {
                    return Err(parse_err(
                        line_no,
                        format!("expected {} values (weights then bias), found {}", cols + 1, values.len()),
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(parse_err(line_no, "parameters must be finite".into()));
                }
                layer.weights.row_mut(r).assign(&Array1::from(values[..cols].to_vec()));
                layer.bias[r] = values[cols];
            }
        }
        if let Some((line_no, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(parse_err(line_no, format!("unexpected trailing content '{extra}'")));
        }
        Ok(model)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `n = Σ_k d_k (d_{k-1} + 1)`
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

/// Activations of every layer for one batch; index 0 is the input and the
/// last entry is the network output (probabilities for the CE modes).
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPass {
    activations: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl ForwardPass {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("at least one layer")
    }

    pub fn hidden(&self, layer: usize) -> &Array2<f64> {
        &self.activations[layer]
    }

    /// Output layer before the softmax or sigmoid.
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub flat_grad: Vec<f64>,
    pub sample_weights_used: Vec<f64>,
    pub lambda_grad: Option<f64>,
}

impl GradientBundle {
    pub fn is_finite(&self) -> bool {
        self.flat_grad.iter().all(|v| v.is_finite()) && self.lambda_grad.is_none_or(f64::is_finite)
    }
}

/// Mean pairwise cosine similarity between hidden units' incoming weight
/// vectors in layer `layer` (1-based). Duplicated units push this towards 1.
pub fn hidden_unit_similarity(model: &MlpModel, layer: usize) -> Option<f64> {
    let w = &model.layers.get(layer.checked_sub(1)?)?.weights;
    let rows: Vec<_> = w.outer_iter().collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let dot = rows[i].dot(&rows[j]);
            let norm = (rows[i].dot(&rows[i]) * rows[j].dot(&rows[j])).sqrt();
            if norm > 0.0 {
                total += dot / norm;
                count += 1;
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}
