//! Dense layers, activations, backpropagation and the online gradient-descent
//! update used by every block of the cascade.
//!
//! The update rule is w ← w − η·e·∂e/∂w. For a vector error e = ỹ − y the
//! factor e·∂e/∂w is read as ∂(½‖e‖²)/∂w, i.e. the gradient of half the
//! squared error, so [`backprop`] returns exactly that gradient.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::provenance::Metadata;

pub const MODEL_HEADER: &str = "spp-cascadenet-model v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("model format, line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for NnError {
    fn from(e: std::io::Error) -> Self {
        NnError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    /// tanh(x)
    Tansig,
    /// 1 / (1 + e^−x)
    Logsig,
    /// x
    Purelin,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Tansig, Activation::Logsig, Activation::Purelin];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tansig => x.tanh(),
            Activation::Logsig => 1.0 / (1.0 + (-x).exp()),
            Activation::Purelin => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tansig => 1.0 - y * y,
            Activation::Logsig => y * (1.0 - y),
            Activation::Purelin => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tansig => "tansig",
            Activation::Logsig => "logsig",
            Activation::Purelin => "purelin",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tansig" => Ok(Activation::Tansig),
            "logsig" => Ok(Activation::Logsig),
            "purelin" => Ok(Activation::Purelin),
            other => Err(NnError::InvalidParameter(format!(
                "unknown activation `{other}`"
            ))),
        }
    }
}

/// Elementwise activation of a vector.
pub fn activation(kind: Activation, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| kind.apply(v)).collect()
}

/// y = act(W x + b) with W stored row-major (fan_out × fan_in).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    fan_in: usize,
    fan_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            biases: vec![0.0; fan_out],
            activation,
        }
    }

    pub fn from_parts(
        fan_in: usize,
        fan_out: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(NnError::Dimension(format!(
                "empty layer {fan_out}x{fan_in}"
            )));
        }
        if weights.len() != fan_in * fan_out || biases.len() != fan_out {
            return Err(NnError::Dimension(format!(
                "layer {fan_out}x{fan_in} given {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        if weights.iter().chain(biases.iter()).any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("layer parameters".into()));
        }
        Ok(Self {
            fan_in,
            fan_out,
            weights,
            biases,
            activation,
        })
    }

    /// Uniform weights and biases in [−s, s]/√fan_in, s = `init_scale`.
    pub fn random<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let bound = init_scale / (fan_in as f64).sqrt();
        let mut draw = || {
            if bound > 0.0 {
                rng.random_range(-bound..=bound)
            } else {
                0.0
            }
        };
        let weights = (0..fan_in * fan_out).map(|_| draw()).collect();
        let biases = (0..fan_out).map(|_| draw()).collect();
        Self {
            fan_in,
            fan_out,
            weights,
            biases,
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.fan_in + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.weights[row * self.fan_in..(row + 1) * self.fan_in]
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    /// Flattened view: weights then biases.
    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(self.biases.iter()).copied()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.fan_in {
            return Err(NnError::Dimension(format!(
                "layer expects {} inputs, got {}",
                self.fan_in,
                x.len()
            )));
        }
        let pre: Vec<f64> = (0..self.fan_out)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .fold(self.biases[i], |acc, (w, v)| acc + w * v)
            })
            .collect();
        let output = activation(self.activation, &pre);
        Ok((
            output.clone(),
            ForwardCache {
                input: x.to_vec(),
                pre_activation: pre,
                output,
            },
        ))
    }
}

/// Values kept from a forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub output: Vec<f64>,
}

/// Gradient of ½‖e‖² with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerGradients {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            biases: vec![0.0; layer.biases.len()],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .all(|&g| g == 0.0)
    }
}

/// Error signal e = ỹ − y of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSignal(pub Vec<f64>);

impl ErrorSignal {
    pub fn between(target: &[f64], output: &[f64]) -> Result<Self> {
        if target.len() != output.len() {
            return Err(NnError::Dimension(format!(
                "target has {} entries, output {}",
                target.len(),
                output.len()
            )));
        }
        Ok(Self(
            target.iter().zip(output).map(|(t, y)| t - y).collect(),
        ))
    }

    /// Root-mean-square magnitude.
    pub fn rms(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        (self.0.iter().map(|e| e * e).sum::<f64>() / self.0.len() as f64).sqrt()
    }

    pub fn half_squared_norm(&self) -> f64 {
        0.5 * self.0.iter().map(|e| e * e).sum::<f64>()
    }
}

/// Forward pass through a chain of layers, keeping every cache.
pub fn forward_chain(layers: &[&DenseLayer], x: &[f64]) -> Result<(Vec<f64>, Vec<ForwardCache>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut current = x.to_vec();
    for layer in layers {
        let (y, cache) = layer.forward(&current)?;
        caches.push(cache);
        current = y;
    }
    Ok((current, caches))
}

/// Backward pass given ∂L/∂y of the last layer. Returns per-layer gradients
/// and ∂L/∂x of the chain input.
pub fn backward_chain(
    layers: &[&DenseLayer],
    caches: &[ForwardCache],
    output_grad: &[f64],
) -> Result<(Vec<LayerGradients>, Vec<f64>)> {
    if layers.len() != caches.len() {
        return Err(NnError::Dimension(format!(
            "{} layers but {} caches",
            layers.len(),
            caches.len()
        )));
    }
    let mut grads: Vec<LayerGradients> = Vec::with_capacity(layers.len());
    let mut upstream = output_grad.to_vec();
    for (layer, cache) in layers.iter().zip(caches).rev() {
        if upstream.len() != layer.fan_out {
            return Err(NnError::Dimension(format!(
                "gradient has {} entries, layer has {} outputs",
                upstream.len(),
                layer.fan_out
            )));
        }
        let delta: Vec<f64> = upstream
            .iter()
            .zip(&cache.output)
            .map(|(g, &y)| g * layer.activation.derivative_from_output(y))
            .collect();
        let mut gw = vec![0.0; layer.weights.len()];
        for (i, d) in delta.iter().enumerate() {
            for (j, x) in cache.input.iter().enumerate() {
                gw[i * layer.fan_in + j] = d * x;
            }
        }
        let mut down = vec![0.0; layer.fan_in];
        for (i, d) in delta.iter().enumerate() {
            for (j, slot) in down.iter_mut().enumerate() {
                *slot += layer.weights[i * layer.fan_in + j] * d;
            }
        }
        grads.push(LayerGradients {
            weights: gw,
            biases: delta,
        });
        upstream = down;
    }
    grads.reverse();
    Ok((grads, upstream))
}

/// Gradient of ½‖ỹ − y‖² for every layer of the chain, plus the error signal.
pub fn backprop(
    layers: &[&DenseLayer],
    x: &[f64],
    target: &[f64],
) -> Result<(Vec<LayerGradients>, ErrorSignal)> {
    let (y, caches) = forward_chain(layers, x)?;
    let e = ErrorSignal::between(target, &y)?;
    let output_grad: Vec<f64> = e.0.iter().map(|v| -v).collect();
    let (grads, _) = backward_chain(layers, &caches, &output_grad)?;
    Ok((grads, e))
}

/// w ← w − η·g, elementwise. Non-finite gradients leave the layer untouched.
pub fn gd_update(layer: &mut DenseLayer, grads: &LayerGradients, learning_rate: f64) -> Result<()> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(NnError::InvalidParameter(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    if grads.weights.len() != layer.weights.len() || grads.biases.len() != layer.biases.len() {
        return Err(NnError::Dimension(
            "gradient shape does not match layer".into(),
        ));
    }
    if grads
        .weights
        .iter()
        .chain(grads.biases.iter())
        .any(|g| !g.is_finite())
    {
        return Err(NnError::NonFinite("gradient".into()));
    }
    for (w, g) in layer.weights.iter_mut().zip(&grads.weights) {
        *w -= learning_rate * g;
    }
    for (b, g) in layer.biases.iter_mut().zip(&grads.biases) {
        *b -= learning_rate * g;
    }
    Ok(())
}

/// Mean of squared componentwise differences.
pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(NnError::InvalidParameter("mse of empty input".into()));
    }
    if predictions.len() != targets.len() {
        return Err(NnError::Dimension(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Training stops once the epoch MSE reaches this value.
    pub mse_goal: Option<f64>,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_epochs: 50,
            mse_goal: None,
            seed: 7,
            init_scale: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(NnError::InvalidParameter(format!(
                "init scale must be non-negative, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }
}

/// Named layers plus metadata, in the text model format:
///
/// ```text
/// spp-cascadenet-model v1
/// meta <key> <value>
/// layer <name> <fan_in> <fan_out> <activation>
/// <fan_out rows of fan_in weights>
/// bias <fan_out values>
/// ```
///
/// Numbers are written with 17 significant digits; `#` lines are comments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelFile {
    pub metadata: Metadata,
    pub layers: Vec<(String, DenseLayer)>,
}

impl ModelFile {
    pub fn layer(&self, name: &str) -> Option<&DenseLayer> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, l)| l)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{MODEL_HEADER}")?;
        for (k, v) in self.metadata.iter() {
            writeln!(w, "meta {k} {v}")?;
        }
        for (name, layer) in &self.layers {
            writeln!(
                w,
                "layer {name} {} {} {}",
                layer.fan_in, layer.fan_out, layer.activation
            )?;
            for i in 0..layer.fan_out {
                let row: Vec<String> = layer.row(i).iter().map(|v| format!("{v:.16e}")).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
            let b: Vec<String> = layer.biases.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "bias {}", b.join(" "))?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| {
                l.as_ref().map_or(true, |s| {
                    !s.trim().is_empty() && !s.trim_start().starts_with('#')
                })
            });
        let fmt_err = |line: usize, message: String| NnError::Format { line, message };

        match lines.next() {
            Some((_, Ok(h))) if h.trim() == MODEL_HEADER => {}
            Some((n, Ok(h))) => {
                return Err(fmt_err(n, format!("expected `{MODEL_HEADER}`, got `{h}`")))
            }
            Some((_, Err(e))) => return Err(e.into()),
            None => return Err(fmt_err(0, "empty model file".into())),
        }

        let parse_row = |line: usize, text: &str, n: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = text
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| fmt_err(line, format!("`{t}`: {e}")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != n {
                return Err(fmt_err(
                    line,
                    format!("expected {n} values, found {}", vals.len()),
                ));
            }
            Ok(vals)
        };

        let mut model = ModelFile::default();
        while let Some((n, line)) = lines.next() {
            let line = line?;
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                model.metadata.set(k.trim(), v.trim());
            } else if let Some(rest) = line.strip_prefix("layer ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(fmt_err(
                        n,
                        "layer line needs name, fan_in, fan_out, activation".into(),
                    ));
                }
                let fan_in: usize = parts[1]
                    .parse()
                    .map_err(|_| fmt_err(n, "bad fan_in".into()))?;
                let fan_out: usize = parts[2]
                    .parse()
                    .map_err(|_| fmt_err(n, "bad fan_out".into()))?;
                let act: Activation = parts[3]
                    .parse()
                    .map_err(|e: NnError| fmt_err(n, e.to_string()))?;
                let mut weights = Vec::with_capacity(fan_in * fan_out);
                for _ in 0..fan_out {
                    let (rn, row) = lines
                        .next()
                        .ok_or_else(|| fmt_err(n, "truncated weight rows".into()))?;
                    weights.extend(parse_row(rn, &row?, fan_in)?);
                }
                let (bn, bias) = lines
                    .next()
                    .ok_or_else(|| fmt_err(n, "missing bias line".into()))?;
                let bias = bias?;
                let values = bias
                    .trim()
                    .strip_prefix("bias")
                    .ok_or_else(|| fmt_err(bn, "expected `bias` line".into()))?;
                let biases = parse_row(bn, values, fan_out)?;
                let layer = DenseLayer::from_parts(fan_in, fan_out, weights, biases, act)
                    .map_err(|e| fmt_err(n, e.to_string()))?;
                model.layers.push((parts[0].to_string(), layer));
            } else {
                return Err(fmt_err(n, format!("unexpected line `{line}`")));
            }
        }
        Ok(model)
    }
}
