//! The cascade topology and its per-sample training steps.
//!
//! ```text
//!            ┌── II (3 logsig: τ, Δτ, σ) ──────────────┐
//!   x^I ─────┤                                         ├─> ω-validation
//!            └── IIIa (10 tansig) ── IVa (7 logsig) ───┤
//!                                                      │ validated?
//!   [x^I | y^IVa] ── IIIb (8 tansig) ── IVb (5 tansig) ┤
//!                                                      └─> VI (2 purelin)
//! ```
//!
//! Stage 1 (II, IIIa, IVa) is written only by Phase A and stage 2 (IIIb,
//! IVb, VI) only by Phase B. VI always sees a 12-wide input: `[y^IVa | y^IVb]`
//! when the sample is validated, `[y^IVa | 0]` otherwise, in which case only
//! its first neuron is trained and its second output is the NaN flag.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nncore::{
    backward_chain, gd_update, Activation, DenseLayer, ErrorSignal, ForwardCache, LayerGradients,
    ModelFile, NnError,
};
use crate::omegaval::{AcceptanceRegion, ValidationError, ValidationParams, MIN_WINDOW};
use crate::provenance::Metadata;

pub const INPUT_DIM: usize = 2;
pub const PARAM_DIM: usize = 3;
pub const IIIA_DIM: usize = 10;
pub const IVA_DIM: usize = 7;
pub const IIIB_DIM: usize = 8;
pub const IVB_DIM: usize = 5;
pub const OUTPUT_DIM: usize = 2;
pub const MERGE_DIM: usize = IVA_DIM + IVB_DIM;

/// Block names in manifest order.
pub const BLOCK_NAMES: [&str; 6] = ["II", "IIIa", "IVa", "IIIb", "IVb", "VI"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CascadeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("block {block}: {message}")]
    Topology {
        block: &'static str,
        message: String,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite {what}")]
    NonFinite { what: String },
}

pub type Result<T> = std::result::Result<T, CascadeError>;

/// Identifies a weight block, for write auditing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    II,
    IIIa,
    IVa,
    IIIb,
    IVb,
    VI,
}

impl Block {
    pub const STAGE1: [Block; 3] = [Block::II, Block::IIIa, Block::IVa];
    pub const STAGE2: [Block; 3] = [Block::IIIb, Block::IVb, Block::VI];

    pub fn name(self) -> &'static str {
        BLOCK_NAMES[self as usize]
    }
}

/// Maps layer II's logsig outputs onto validation parameters, and the
/// parameter targets back onto (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowDecoding {
    /// Number of samples per epoch; τ is decoded on [0, tau_span).
    pub tau_span: usize,
    /// Δτ target.
    pub window: usize,
    /// Largest decodable Δτ.
    pub max_window: usize,
    /// Lower clamp on σ.
    pub sigma_floor: f64,
}

impl Default for WindowDecoding {
    fn default() -> Self {
        Self {
            tau_span: 1,
            window: 32,
            max_window: 64,
            sigma_floor: 1e-3,
        }
    }
}

impl WindowDecoding {
    pub fn validate(&self) -> Result<()> {
        if self.window < MIN_WINDOW
            || self.max_window <= MIN_WINDOW
            || self.window > self.max_window
        {
            return Err(CascadeError::Contract(format!(
                "need {MIN_WINDOW} <= window <= max_window and max_window > {MIN_WINDOW}, got {} / {}",
                self.window, self.max_window
            )));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor <= 1.0) || self.tau_span == 0 {
            return Err(CascadeError::Contract(
                "sigma_floor must be in (0, 1] and tau_span >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn decode(&self, raw: &[f64]) -> Result<ValidationParams> {
        let clamp01 = |v: f64| {
            if v.is_finite() {
                v.clamp(0.0, 1.0)
            } else {
                0.5
            }
        };
        let span = (self.max_window - MIN_WINDOW) as f64;
        let tau = (clamp01(raw[0]) * (self.tau_span - 1) as f64).round() as usize;
        let delta = MIN_WINDOW + (clamp01(raw[1]) * span).round() as usize;
        let sigma = clamp01(raw[2]).max(self.sigma_floor);
        Ok(ValidationParams::new(tau, delta, sigma)?)
    }

    /// Layer II target for a window starting at `start` with width fraction `sigma`.
    pub fn encode(&self, start: usize, sigma: f64) -> [f64; PARAM_DIM] {
        let tau = if self.tau_span > 1 {
            start as f64 / (self.tau_span - 1) as f64
        } else {
            0.0
        };
        let delta = (self.window - MIN_WINDOW) as f64 / (self.max_window - MIN_WINDOW) as f64;
        [tau, delta, sigma.clamp(self.sigma_floor, 1.0)]
    }
}

/// Fixed encoders turning the normalized targets into per-layer training signals.
pub mod targets {
    use super::*;

    /// ỹ^IVa: λ̃_SPP mapped into the logsig range and replicated.
    pub fn stage1(lambda_spp: f64) -> [f64; IVA_DIM] {
        [0.5 + 0.4 * lambda_spp; IVA_DIM]
    }

    /// ỹ^IVb: L̃_SPP mapped into the tansig range and replicated.
    pub fn stage2(propagation_length: f64) -> [f64; IVB_DIM] {
        [0.8 * propagation_length; IVB_DIM]
    }

    pub fn output(lambda_spp: f64, propagation_length: f64) -> [f64; OUTPUT_DIM] {
        [lambda_spp, propagation_length]
    }
}

/// Normalized training pattern plus the layer II target for its position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pattern {
    pub input: [f64; INPUT_DIM],
    pub stage1_target: [f64; IVA_DIM],
    pub stage2_target: [f64; IVB_DIM],
    pub output_target: [f64; OUTPUT_DIM],
    pub param_target: [f64; PARAM_DIM],
}

impl Pattern {
    pub fn new(
        input: [f64; INPUT_DIM],
        lambda_spp: f64,
        propagation_length: f64,
        param_target: [f64; PARAM_DIM],
    ) -> Self {
        Self {
            input,
            stage1_target: targets::stage1(lambda_spp),
            stage2_target: targets::stage2(propagation_length),
            output_target: targets::output(lambda_spp, propagation_length),
            param_target,
        }
    }
}

/// Layers II, IIIa and IVa.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1 {
    pub params: DenseLayer,
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

/// Layers IIIb, IVb and VI.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2 {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
    pub merge: DenseLayer,
}

fn check_layer(
    block: &'static str,
    layer: &DenseLayer,
    fan_in: usize,
    fan_out: usize,
    act: Activation,
) -> Result<()> {
    if layer.fan_in() != fan_in || layer.fan_out() != fan_out {
        return Err(CascadeError::Topology {
            block,
            message: format!(
                "expected {fan_out}x{fan_in}, found {}x{}",
                layer.fan_out(),
                layer.fan_in()
            ),
        });
    }
    if layer.activation != act {
        return Err(CascadeError::Topology {
            block,
            message: format!("expected {act} activation, found {}", layer.activation),
        });
    }
    Ok(())
}

impl Stage1 {
    pub fn new(params: DenseLayer, hidden: DenseLayer, output: DenseLayer) -> Result<Self> {
        check_layer("II", &params, INPUT_DIM, PARAM_DIM, Activation::Logsig)?;
        check_layer("IIIa", &hidden, INPUT_DIM, IIIA_DIM, Activation::Tansig)?;
        check_layer("IVa", &output, IIIA_DIM, IVA_DIM, Activation::Logsig)?;
        Ok(Self {
            params,
            hidden,
            output,
        })
    }

    pub fn zeros() -> Self {
        Self {
            params: DenseLayer::zeros(INPUT_DIM, PARAM_DIM, Activation::Logsig),
            hidden: DenseLayer::zeros(INPUT_DIM, IIIA_DIM, Activation::Tansig),
            output: DenseLayer::zeros(IIIA_DIM, IVA_DIM, Activation::Logsig),
        }
    }

    /// Forward pass of II and IIIa→IVa on the same input x^I.
    pub fn forward(&self, x: &[f64], decoding: &WindowDecoding) -> Result<Stage1Pass> {
        if x.len() != INPUT_DIM {
            return Err(NnError::Dimension(format!(
                "x^I must have {INPUT_DIM} entries, got {}",
                x.len()
            ))
            .into());
        }
        let (raw, params_cache) = self.params.forward(x)?;
        let (h, hidden_cache) = self.hidden.forward(x)?;
        let (y, output_cache) = self.output.forward(&h)?;
        if y.iter().chain(raw.iter()).any(|v| !v.is_finite()) {
            return Err(CascadeError::NonFinite {
                what: "stage-1 activation".into(),
            });
        }
        let params = decoding.decode(&raw)?;
        Ok(Stage1Pass {
            y_iva: y,
            params,
            params_cache,
            hidden_cache,
            output_cache,
        })
    }

    pub fn layers(&self) -> [(Block, &DenseLayer); 3] {
        [
            (Block::II, &self.params),
            (Block::IIIa, &self.hidden),
            (Block::IVa, &self.output),
        ]
    }
}

impl Stage2 {
    pub fn new(hidden: DenseLayer, output: DenseLayer, merge: DenseLayer) -> Result<Self> {
        check_layer(
            "IIIb",
            &hidden,
            INPUT_DIM + IVA_DIM,
            IIIB_DIM,
            Activation::Tansig,
        )?;
        check_layer("IVb", &output, IIIB_DIM, IVB_DIM, Activation::Tansig)?;
        check_layer("VI", &merge, MERGE_DIM, OUTPUT_DIM, Activation::Purelin)?;
        Ok(Self {
            hidden,
            output,
            merge,
        })
    }

    pub fn zeros() -> Self {
        Self {
            hidden: DenseLayer::zeros(INPUT_DIM + IVA_DIM, IIIB_DIM, Activation::Tansig),
            output: DenseLayer::zeros(IIIB_DIM, IVB_DIM, Activation::Tansig),
            merge: DenseLayer::zeros(MERGE_DIM, OUTPUT_DIM, Activation::Purelin),
        }
    }

    pub fn layers(&self) -> [(Block, &DenseLayer); 3] {
        [
            (Block::IIIb, &self.hidden),
            (Block::IVb, &self.output),
            (Block::VI, &self.merge),
        ]
    }

    fn forward_chain(
        &self,
        x: &[f64],
        y_iva: &[f64],
    ) -> Result<(Vec<f64>, ForwardCache, ForwardCache)> {
        let mut joined = Vec::with_capacity(INPUT_DIM + IVA_DIM);
        joined.extend_from_slice(x);
        joined.extend_from_slice(y_iva);
        let (h, hidden_cache) = self.hidden.forward(&joined)?;
        let (y, output_cache) = self.output.forward(&h)?;
        Ok((y, hidden_cache, output_cache))
    }

    /// y^IVb for x^IIIb = [x^I | y^IVa]; refused for unvalidated samples.
    pub fn forward(&self, x: &[f64], y_iva: &[f64], validated: bool) -> Result<Vec<f64>> {
        if !validated {
            return Err(CascadeError::Contract(
                "stage 2 only runs on validated stage-1 output".into(),
            ));
        }
        Ok(self.forward_chain(x, y_iva)?.0)
    }

    /// Vb + VI: merge the stage outputs and apply the purelin output layer.
    pub fn merge_and_output(&self, s: &StageOutput) -> Result<[f64; OUTPUT_DIM]> {
        let input = merge_input(s)?;
        let (y, _) = self.merge.forward(&input)?;
        Ok(if s.validated {
            [y[0], y[1]]
        } else {
            [y[0], f64::NAN]
        })
    }
}

fn merge_input(s: &StageOutput) -> Result<Vec<f64>> {
    if s.y_iva.len() != IVA_DIM {
        return Err(CascadeError::Contract(format!(
            "y^IVa must have {IVA_DIM} entries"
        )));
    }
    let mut input = Vec::with_capacity(MERGE_DIM);
    input.extend_from_slice(&s.y_iva);
    match (&s.y_ivb, s.validated) {
        (Some(b), true) if b.len() == IVB_DIM => input.extend_from_slice(b),
        (None, false) => input.extend_from_slice(&[0.0; IVB_DIM]),
        _ => {
            return Err(CascadeError::Contract(
                "y^IVb must be present exactly when the sample is validated".into(),
            ))
        }
    }
    Ok(input)
}

/// Stage-1 forward results kept for Phase A and the validator.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Pass {
    pub y_iva: Vec<f64>,
    pub params: ValidationParams,
    pub params_cache: ForwardCache,
    pub hidden_cache: ForwardCache,
    pub output_cache: ForwardCache,
}

/// Outputs of both stages for one sample; `y_ivb` is present iff validated.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub y_iva: Vec<f64>,
    pub y_ivb: Option<Vec<f64>>,
    pub validated: bool,
}

/// Full network plus the validator's calibrated region.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeNet {
    pub stage1: Stage1,
    pub stage2: Stage2,
    pub region: Option<AcceptanceRegion>,
    pub decoding: WindowDecoding,
}

impl CascadeNet {
    pub fn new(stage1: Stage1, stage2: Stage2, decoding: WindowDecoding) -> Result<Self> {
        decoding.validate()?;
        Ok(Self {
            stage1,
            stage2,
            region: None,
            decoding,
        })
    }

    /// Seeded initialization, each block drawn in manifest order.
    pub fn random(seed: u64, init_scale: f64, decoding: WindowDecoding) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |i, o, a| DenseLayer::random(i, o, a, init_scale, &mut rng);
        let stage1 = Stage1::new(
            layer(INPUT_DIM, PARAM_DIM, Activation::Logsig),
            layer(INPUT_DIM, IIIA_DIM, Activation::Tansig),
            layer(IIIA_DIM, IVA_DIM, Activation::Logsig),
        )?;
        let stage2 = Stage2::new(
            layer(INPUT_DIM + IVA_DIM, IIIB_DIM, Activation::Tansig),
            layer(IIIB_DIM, IVB_DIM, Activation::Tansig),
            layer(MERGE_DIM, OUTPUT_DIM, Activation::Purelin),
        )?;
        Self::new(stage1, stage2, decoding)
    }

    pub fn zeros() -> Self {
        Self {
            stage1: Stage1::zeros(),
            stage2: Stage2::zeros(),
            region: None,
            decoding: WindowDecoding::default(),
        }
    }

    pub fn stage1_forward(&self, x: &[f64]) -> Result<(Vec<f64>, ValidationParams)> {
        let pass = self.stage1.forward(x, &self.decoding)?;
        Ok((pass.y_iva, pass.params))
    }

    pub fn stage2_forward(&self, x: &[f64], y_iva: &[f64], validated: bool) -> Result<Vec<f64>> {
        self.stage2.forward(x, y_iva, validated)
    }

    pub fn merge_and_output(&self, s: &StageOutput) -> Result<[f64; OUTPUT_DIM]> {
        self.stage2.merge_and_output(s)
    }

    pub fn layers(&self) -> impl Iterator<Item = (Block, &DenseLayer)> {
        self.stage1.layers().into_iter().chain(self.stage2.layers())
    }

    /// All parameters in manifest order.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.layers()
            .flat_map(|(_, l)| l.parameters().collect::<Vec<_>>())
            .collect()
    }

    /// One sequential training step: stage-1 forward, Phase A, Phase B.
    pub fn train_step(
        &mut self,
        pattern: &Pattern,
        learning_rate: f64,
        validated: bool,
    ) -> Result<StepErrors> {
        let pass = self.stage1.forward(&pattern.input, &self.decoding)?;
        let e_a = phase_a_update(&mut self.stage1, &pass, pattern, learning_rate)?;
        let b = phase_b_update(
            &mut self.stage2,
            &pattern.input,
            &pass.y_iva,
            validated,
            pattern,
            learning_rate,
        )?;
        Ok(StepErrors::new(e_a, b))
    }

    pub fn to_model_file(&self, extra: &Metadata) -> ModelFile {
        let mut metadata = Metadata::new();
        metadata.set("cascade.blocks", BLOCK_NAMES.join(" "));
        metadata.set("decoding.tau_span", self.decoding.tau_span);
        metadata.set("decoding.window", self.decoding.window);
        metadata.set("decoding.max_window", self.decoding.max_window);
        metadata.set(
            "decoding.sigma_floor",
            format!("{:.16e}", self.decoding.sigma_floor),
        );
        if let Some(r) = self.region {
            metadata.set("region.theta_max", format!("{:.16e}", r.theta_max));
            metadata.set("region.theta_min", format!("{:.16e}", r.theta_min));
        }
        metadata.extend(extra);
        let layers = self
            .layers()
            .map(|(b, l)| (b.name().to_string(), l.clone()))
            .collect();
        ModelFile { metadata, layers }
    }

    pub fn from_model_file(model: &ModelFile) -> Result<Self> {
        let manifest = model.metadata.get("cascade.blocks").unwrap_or_default();
        if manifest.split_whitespace().collect::<Vec<_>>() != BLOCK_NAMES {
            return Err(CascadeError::Contract(format!(
                "model manifest lists `{manifest}`, expected `{}`",
                BLOCK_NAMES.join(" ")
            )));
        }
        let get = |name: &'static str| {
            model.layer(name).cloned().ok_or(CascadeError::Topology {
                block: name,
                message: "missing from model file".into(),
            })
        };
        let parse = |key: &str| -> Result<f64> {
            model
                .metadata
                .get(key)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| {
                    CascadeError::Contract(format!("model metadata `{key}` missing or invalid"))
                })
        };
        let decoding = WindowDecoding {
            tau_span: parse("decoding.tau_span")? as usize,
            window: parse("decoding.window")? as usize,
            max_window: parse("decoding.max_window")? as usize,
            sigma_floor: parse("decoding.sigma_floor")?,
        };
        let stage1 = Stage1::new(get("II")?, get("IIIa")?, get("IVa")?)?;
        let stage2 = Stage2::new(get("IIIb")?, get("IVb")?, get("VI")?)?;
        let mut net = Self::new(stage1, stage2, decoding)?;
        if model.metadata.get("region.theta_max").is_some() {
            net.region = Some(AcceptanceRegion::new(
                parse("region.theta_max")?,
                parse("region.theta_min")?,
            )?);
        }
        Ok(net)
    }

    pub fn write_model<W: Write>(&self, extra: &Metadata, w: &mut W) -> std::io::Result<()> {
        self.to_model_file(extra).write(w)
    }

    pub fn read_model<R: BufRead>(r: R) -> Result<(Self, Metadata)> {
        let file = ModelFile::read(r)?;
        Ok((Self::from_model_file(&file)?, file.metadata))
    }
}

/// Phase A: updates II from its parameter targets and IIIa/IVa from e^a.
/// Returns e^a.
pub fn phase_a_update(
    stage1: &mut Stage1,
    pass: &Stage1Pass,
    pattern: &Pattern,
    learning_rate: f64,
) -> Result<ErrorSignal> {
    let e_params = ErrorSignal::between(&pattern.param_target, &pass.params_cache.output)?;
    let e_a = ErrorSignal::between(&pattern.stage1_target, &pass.y_iva)?;
    if e_a
        .0
        .iter()
        .chain(e_params.0.iter())
        .any(|v| !v.is_finite())
    {
        return Err(CascadeError::NonFinite { what: "e^a".into() });
    }
    let neg = |e: &ErrorSignal| e.0.iter().map(|v| -v).collect::<Vec<_>>();
    let (g_params, _) = backward_chain(
        &[&stage1.params],
        std::slice::from_ref(&pass.params_cache),
        &neg(&e_params),
    )?;
    let (g_chain, _) = backward_chain(
        &[&stage1.hidden, &stage1.output],
        &[pass.hidden_cache.clone(), pass.output_cache.clone()],
        &neg(&e_a),
    )?;
    gd_update(&mut stage1.params, &g_params[0], learning_rate)?;
    gd_update(&mut stage1.hidden, &g_chain[0], learning_rate)?;
    gd_update(&mut stage1.output, &g_chain[1], learning_rate)?;
    Ok(e_a)
}

/// What Phase B produced for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseBOutcome {
    pub y_ivb: Option<Vec<f64>>,
    /// Second component is NaN when the sample was not validated.
    pub y_vi: [f64; OUTPUT_DIM],
    pub e_b: Option<ErrorSignal>,
    /// ỹ^VI − y^VI over the trained components.
    pub e_vi: ErrorSignal,
}

/// Phase B: when validated, trains IIIb/IVb from e^b and all of VI from the
/// output error; otherwise trains only VI's first neuron on `[y^IVa | 0]`.
pub fn phase_b_update(
    stage2: &mut Stage2,
    x: &[f64],
    y_iva: &[f64],
    validated: bool,
    pattern: &Pattern,
    learning_rate: f64,
) -> Result<PhaseBOutcome> {
    if validated {
        let (y_ivb, hidden_cache, output_cache) = stage2.forward_chain(x, y_iva)?;
        let e_b = ErrorSignal::between(&pattern.stage2_target, &y_ivb)?;
        let out = StageOutput {
            y_iva: y_iva.to_vec(),
            y_ivb: Some(y_ivb.clone()),
            validated: true,
        };
        let (y_vi, merge_cache) = stage2.merge.forward(&merge_input(&out)?)?;
        let e_vi = ErrorSignal::between(&pattern.output_target, &y_vi)?;
        if e_b.0.iter().chain(e_vi.0.iter()).any(|v| !v.is_finite()) {
            return Err(CascadeError::NonFinite { what: "e^b".into() });
        }
        let neg = |e: &ErrorSignal| e.0.iter().map(|v| -v).collect::<Vec<_>>();
        let (g_chain, _) = backward_chain(
            &[&stage2.hidden, &stage2.output],
            &[hidden_cache, output_cache],
            &neg(&e_b),
        )?;
        let (g_merge, _) = backward_chain(
            &[&stage2.merge],
            std::slice::from_ref(&merge_cache),
            &neg(&e_vi),
        )?;
        gd_update(&mut stage2.hidden, &g_chain[0], learning_rate)?;
        gd_update(&mut stage2.output, &g_chain[1], learning_rate)?;
        gd_update(&mut stage2.merge, &g_merge[0], learning_rate)?;
        Ok(PhaseBOutcome {
            y_ivb: Some(y_ivb),
            y_vi: [y_vi[0], y_vi[1]],
            e_b: Some(e_b),
            e_vi,
        })
    } else {
        let out = StageOutput {
            y_iva: y_iva.to_vec(),
            y_ivb: None,
            validated: false,
        };
        let input = merge_input(&out)?;
        let (y_vi, _) = stage2.merge.forward(&input)?;
        let e0 = pattern.output_target[0] - y_vi[0];
        if !e0.is_finite() {
            return Err(CascadeError::NonFinite {
                what: "output error".into(),
            });
        }
        // first neuron only: row 0 of W and b[0]; everything else untouched
        let fan_in = stage2.merge.fan_in();
        let mut grads = LayerGradients::zeros_like(&stage2.merge);
        for (g, x) in grads.weights[..fan_in].iter_mut().zip(&input) {
            *g = -e0 * x;
        }
        grads.biases[0] = -e0;
        gd_update(&mut stage2.merge, &grads, learning_rate)?;
        Ok(PhaseBOutcome {
            y_ivb: None,
            y_vi: [y_vi[0], f64::NAN],
            e_b: None,
            e_vi: ErrorSignal(vec![e0]),
        })
    }
}

/// Scalar error summary of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepErrors {
    /// RMS of e^a.
    pub e_a: f64,
    /// RMS of e^b, when stage 2 ran.
    pub e_b: Option<f64>,
    /// max{e^a, e^b}, or e^a alone when stage 2 was skipped.
    pub e_star: f64,
    /// Largest |ỹ^VI − y^VI| component over the trained outputs.
    pub output_error: f64,
    pub outcome: PhaseBOutcome,
}

impl StepErrors {
    pub fn new(e_a: ErrorSignal, outcome: PhaseBOutcome) -> Self {
        Self::from_parts(e_a.rms(), outcome)
    }

    /// Same as [`StepErrors::new`] with e^a already reduced to its RMS.
    pub fn from_parts(a: f64, outcome: PhaseBOutcome) -> Self {
        let b = outcome.e_b.as_ref().map(ErrorSignal::rms);
        let e_star = global_error(a, b);
        let output_error = outcome.e_vi.0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self {
            e_a: a,
            e_b: b,
            e_star,
            output_error,
            outcome,
        }
    }

    /// Whether e* ≥ |ỹ^VI − y^VI| held for this step (monitored, not enforced).
    pub fn bound_holds(&self) -> bool {
        self.e_star >= self.output_error
    }
}

/// e* = max{e^a, e^b}; e^a alone when e^b is absent.
pub fn global_error(e_a: f64, e_b: Option<f64>) -> f64 {
    match e_b {
        Some(b) => e_a.max(b),
        None => e_a,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(x: [f64; 2], lam: f64, len: f64) -> Pattern {
        Pattern::new(x, lam, len, [0.2, 0.47, 0.3])
    }

    #[test]
    fn zero_network_outputs() {
        let net = CascadeNet::zeros();
        let (y, vp) = net.stage1_forward(&[0.3, -0.9]).unwrap();
        assert_eq!(y, vec![0.5; IVA_DIM]);
        assert!(vp.delta_tau >= MIN_WINDOW && vp.sigma > 0.0 && vp.sigma <= 1.0);
        let y2 = net.stage2_forward(&[0.3, -0.9], &y, true).unwrap();
        assert_eq!(y2, vec![0.0; IVB_DIM]);
    }

    #[test]
    fn unvalidated_stage2_is_refused() {
        let net = CascadeNet::zeros();
        let err = net.stage2_forward(&[0.0, 0.0], &[0.5; IVA_DIM], false);
        assert!(matches!(err, Err(CascadeError::Contract(_))));
    }

    #[test]
    fn decoding_always_lands_in_range() {
        let d = WindowDecoding {
            tau_span: 100,
            ..WindowDecoding::default()
        };
        for raw in [
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 1.0],
            [f64::NAN, -3.0, 7.0],
            [0.5, 0.5, 1e-9],
        ] {
            let vp = d.decode(&raw).unwrap();
            assert!(vp.tau < 100);
            assert!((MIN_WINDOW..=64).contains(&vp.delta_tau));
            assert!(vp.sigma >= 1e-3 && vp.sigma <= 1.0);
        }
        let enc = d.encode(0, 0.25);
        let vp = d.decode(&enc).unwrap();
        assert_eq!(vp.delta_tau, 32);
        assert_eq!(vp.sigma, 0.25);
    }

    #[test]
    fn merge_flags_nan_when_unvalidated() {
        let mut net = CascadeNet::zeros();
        net.stage2.merge.biases = vec![0.25, -0.75];
        let s = StageOutput {
            y_iva: vec![0.5; IVA_DIM],
            y_ivb: None,
            validated: false,
        };
        let out = net.merge_and_output(&s).unwrap();
        assert_eq!(out[0], 0.25);
        assert!(out[1].is_nan());
        let v = StageOutput {
            y_ivb: Some(vec![0.1; IVB_DIM]),
            validated: true,
            ..s.clone()
        };
        assert_eq!(net.merge_and_output(&v).unwrap(), [0.25, -0.75]);
        let bad = StageOutput {
            y_ivb: Some(vec![0.1; IVB_DIM]),
            ..s
        };
        assert!(net.merge_and_output(&bad).is_err());
    }

    #[test]
    fn construction_rejects_bad_fan_in() {
        let err = Stage2::new(
            DenseLayer::zeros(INPUT_DIM + IVA_DIM + 1, IIIB_DIM, Activation::Tansig),
            DenseLayer::zeros(IIIB_DIM, IVB_DIM, Activation::Tansig),
            DenseLayer::zeros(MERGE_DIM, OUTPUT_DIM, Activation::Purelin),
        );
        assert!(matches!(
            err,
            Err(CascadeError::Topology { block: "IIIb", .. })
        ));
        let err = Stage1::new(
            DenseLayer::zeros(INPUT_DIM, PARAM_DIM, Activation::Logsig),
            DenseLayer::zeros(INPUT_DIM, IIIA_DIM, Activation::Tansig),
            DenseLayer::zeros(IIIA_DIM, IVA_DIM, Activation::Tansig),
        );
        assert!(matches!(
            err,
            Err(CascadeError::Topology { block: "IVa", .. })
        ));
    }

    #[test]
    fn rejected_step_leaves_stage2_hidden_layers_untouched() {
        let mut net = CascadeNet::random(5, 0.5, WindowDecoding::default()).unwrap();
        let before = net.clone();
        net.train_step(&pattern([0.1, -0.2], 0.3, -0.4), 0.05, false)
            .unwrap();
        assert_eq!(net.stage2.hidden, before.stage2.hidden);
        assert_eq!(net.stage2.output, before.stage2.output);
        assert_eq!(net.stage2.merge.row(1), before.stage2.merge.row(1));
        assert_eq!(net.stage2.merge.biases[1], before.stage2.merge.biases[1]);
        assert_ne!(net.stage2.merge.row(0), before.stage2.merge.row(0));
        assert_ne!(net.stage1, before.stage1);
    }

    #[test]
    fn perfect_targets_leave_weights_unchanged() {
        let mut net = CascadeNet::zeros();
        net.stage2.merge.biases = vec![0.1, 0.2];
        // zero net: y^IVa = 0.5 (λ̃ = 0), y^IVb = 0 (L̃ = 0), y^VI = bias
        let mut p = Pattern::new([0.4, 0.4], 0.0, 0.0, [0.5, 0.5, 0.5]);
        p.output_target = [0.1, 0.2];
        let before = net.clone();
        let errs = net.train_step(&p, 0.1, true).unwrap();
        assert_eq!(errs.e_a, 0.0);
        assert_eq!(errs.e_b, Some(0.0));
        assert_eq!(net.flat_parameters(), before.flat_parameters());
    }

    #[test]
    fn global_error_convention() {
        assert_eq!(global_error(0.3, Some(0.5)), 0.5);
        assert_eq!(global_error(0.3, Some(0.1)), 0.3);
        assert_eq!(global_error(0.3, None), 0.3);
    }

    #[test]
    fn model_roundtrip() {
        let mut net = CascadeNet::random(
            11,
            0.5,
            WindowDecoding {
                tau_span: 727,
                ..WindowDecoding::default()
            },
        )
        .unwrap();
        net.region = Some(AcceptanceRegion::new(0.4, 0.01).unwrap());
        let mut meta = Metadata::new();
        meta.set("seed", 11);
        let mut buf = Vec::new();
        net.write_model(&meta, &mut buf).unwrap();
        let (back, m) = CascadeNet::read_model(buf.as_slice()).unwrap();
        assert_eq!(back, net);
        assert_eq!(m.get("seed"), Some("11"));
        assert!(String::from_utf8(buf)
            .unwrap()
            .contains("meta cascade.blocks II IIIa IVa IIIb IVb VI"));
    }
}
