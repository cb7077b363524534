//! Training orchestration: a sequential reference trainer and a four-worker
//! pipelined trainer that follow the same per-sample dependency graph.
//!
//! Per sample τ the four activities are
//!
//! * NN Simulation: stage-1 forward pass (II, IIIa→IVa) with the current weights;
//! * Phase A: updates II, IIIa, IVa and reports e^a;
//! * ω-validation: buffers the stage-1 output and judges the newest window;
//! * Phase B: stage-2 forward, merge and update, gated by the verdict.
//!
//! In the parallel trainer each activity is a long-lived thread. Simulation
//! fans each result out to Phase A and ω-validation; Phase B joins both
//! streams by τ. Simulation needs the weights Phase A produced for τ before it
//! can run τ+1, so it waits on Phase A's weight hand-back, while ω-validation
//! and Phase B run alongside. Both trainers call the same step functions in
//! the same order per weight block, which makes their results bitwise equal.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use crossbeam::channel::{bounded, Receiver, RecvTimeoutError, SendTimeoutError, Sender};
use thiserror::Error;

use crate::cascade::{
    phase_a_update, phase_b_update, Block, CascadeError, CascadeNet, Pattern, Stage1, Stage1Pass,
    Stage2, StepErrors, WindowDecoding, IVA_DIM,
};
use crate::dataset::{Dataset, DatasetError};
use crate::nncore::NnError;
use crate::omegaval::{
    dominant_peak_width, OmegaValidator, ValidationError, ValidationParams, ValidatorConfig,
    Verdict,
};
use crate::provenance::Metadata;

pub const METRICS_HEADER: &str = "epoch,mse,ea_mean,eb_mean,pass_rate,wall_ms,overlap_ratio";
pub const TIMELINE_HEADER: &str = "tau,stage,start_ns,end_ns";
pub const EVENTS_HEADER: &str = "epoch,tau,e_a,e_b,e_star,accepted,output_error";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("epoch {epoch}, sample {tau}: {source}")]
    Step {
        epoch: usize,
        tau: u64,
        #[source]
        source: CascadeError,
    },
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{worker} made no progress for {waited:?} (possible deadlock)")]
    Deadlock {
        worker: &'static str,
        waited: Duration,
    },
    #[error("{0}: peer worker hung up")]
    Disconnected(&'static str),
    #[error("{worker}: expected sequence number {expected}, got {found}")]
    Sequence {
        worker: &'static str,
        expected: u64,
        found: u64,
    },
    #[error("epoch {epoch} is incomplete: {found} of {expected} samples")]
    IncompleteEpoch {
        epoch: usize,
        expected: usize,
        found: usize,
    },
    #[error("{0} worker panicked")]
    WorkerPanic(&'static str),
}

impl PipelineError {
    fn step(epoch: usize, tau: u64, source: impl Into<CascadeError>) -> Self {
        Self::Step {
            epoch,
            tau,
            source: source.into(),
        }
    }

    /// Whether training stopped because the weights or errors went non-finite.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Self::Step {
                source: CascadeError::NonFinite { .. } | CascadeError::Nn(NnError::NonFinite(_)),
                ..
            }
        )
    }

    fn is_hangup(&self) -> bool {
        matches!(self, Self::Disconnected(_))
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// The four training activities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Simulation,
    PhaseA,
    OmegaValidation,
    PhaseB,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Simulation,
        Stage::PhaseA,
        Stage::OmegaValidation,
        Stage::PhaseB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulation => "sim",
            Stage::PhaseA => "phase_a",
            Stage::OmegaValidation => "omega_val",
            Stage::PhaseB => "phase_b",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Capacity of every inter-worker queue.
    pub queue_capacity: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Stop after the first epoch whose MSE is at or below this value.
    pub mse_goal: Option<f64>,
    pub validator: ValidatorConfig,
    /// Which IVa output feeds the validator.
    pub validated_component: usize,
    /// Δτ target for layer II.
    pub window: usize,
    pub max_window: usize,
    pub sigma_floor: f64,
    /// Recorded in outputs; initialization and splitting happen upstream.
    pub seed: u64,
    /// A worker blocked this long aborts the run.
    pub stall_timeout: Duration,
    /// Busy-poll before blocking on a queue. `None` spins only on hosts with
    /// at least one hardware thread per worker.
    pub spin: Option<bool>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            queue_capacity: 64,
            epochs: 50,
            learning_rate: 0.01,
            mse_goal: None,
            validator: ValidatorConfig::default(),
            validated_component: 0,
            window: 32,
            max_window: 64,
            sigma_floor: 1e-3,
            seed: 7,
            stall_timeout: Duration::from_secs(60),
            spin: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.queue_capacity == 0 {
            return bad("queue capacity must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be finite and positive");
        }
        if self.mse_goal.is_some_and(|g| !(g.is_finite() && g >= 0.0)) {
            return bad("MSE goal must be finite and non-negative");
        }
        if self.validated_component >= IVA_DIM {
            return bad("validated component must index an IVa output");
        }
        if !(self.validator.percentile > 0.0 && self.validator.percentile <= 1.0) {
            return bad("validation percentile must be in (0, 1]");
        }
        if self.stall_timeout.is_zero() {
            return bad("stall timeout must be positive");
        }
        self.decoding(1)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn decoding(&self, tau_span: usize) -> WindowDecoding {
        WindowDecoding {
            tau_span: tau_span.max(1),
            window: self.window,
            max_window: self.max_window,
            sigma_floor: self.sigma_floor,
        }
    }

    fn spin_enabled(&self) -> bool {
        self.spin.unwrap_or_else(|| {
            std::thread::available_parallelism().is_ok_and(|n| n.get() >= Stage::ALL.len())
        })
    }

    pub fn to_metadata(&self) -> Metadata {
        let mut m = Metadata::new();
        m.set("pipeline.queue_capacity", self.queue_capacity);
        m.set("pipeline.epochs", self.epochs);
        m.set("pipeline.learning_rate", self.learning_rate);
        m.set(
            "pipeline.mse_goal",
            self.mse_goal
                .map_or_else(|| "none".to_string(), |g| g.to_string()),
        );
        m.set("pipeline.validation_percentile", self.validator.percentile);
        m.set("pipeline.warmup_epochs", self.validator.warmup_epochs);
        m.set("pipeline.validated_component", self.validated_component);
        m.set("pipeline.window", self.window);
        m.set("pipeline.max_window", self.max_window);
        m.set("pipeline.sigma_floor", self.sigma_floor);
        m.set("seed", self.seed);
        m
    }
}

/// Turns a normalized dataset into training patterns, including the layer II
/// targets for each position of the fixed epoch order.
///
/// The training signal is the validated IVa target component. Since every
/// epoch presents the same order, the signal is periodic and windows near the
/// start of an epoch wrap into the previous epoch's tail.
pub fn prepare_patterns(
    ds: &Dataset,
    cfg: &PipelineConfig,
) -> Result<(Vec<Pattern>, WindowDecoding)> {
    if ds.normalization.is_none() {
        return Err(PipelineError::Config(
            "training needs a normalized dataset".into(),
        ));
    }
    if ds.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let n = ds.len();
    let decoding = cfg.decoding(n);
    let signal: Vec<f64> = ds
        .samples
        .iter()
        .map(|s| crate::cascade::targets::stage1(s.lambda_spp)[cfg.validated_component])
        .collect();
    let patterns = ds
        .samples
        .iter()
        .enumerate()
        .map(|(p, s)| {
            let start = (p + n * cfg.window + 1 - cfg.window) % n;
            let segment: Vec<f64> = (0..cfg.window).map(|k| signal[(start + k) % n]).collect();
            let sigma = dominant_peak_width(&segment);
            Pattern::new(
                s.inputs(),
                s.lambda_spp,
                s.propagation_length,
                decoding.encode(start, sigma),
            )
        })
        .collect();
    Ok((patterns, decoding))
}

/// Per-sample record of the training errors and the gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleEvent {
    pub epoch: usize,
    pub tau: u64,
    pub e_a: f64,
    pub e_b: Option<f64>,
    pub e_star: f64,
    pub accepted: bool,
    /// Largest trained component of |ỹ^VI − y^VI|.
    pub output_error: f64,
}

impl SampleEvent {
    fn new(epoch: usize, tau: u64, accepted: bool, errors: &StepErrors) -> Self {
        Self {
            epoch,
            tau,
            e_a: errors.e_a,
            e_b: errors.e_b,
            e_star: errors.e_star,
            accepted,
            output_error: errors.output_error,
        }
    }

    pub fn bound_holds(&self) -> bool {
        self.e_star >= self.output_error
    }
}

/// A timed span of one activity on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub tau: u64,
    pub stage: Stage,
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean of e*² over the epoch.
    pub mse: f64,
    pub ea_mean: f64,
    /// Absent when no sample passed validation.
    pub eb_mean: Option<f64>,
    pub pass_rate: f64,
    pub wall_ms: f64,
    /// Fraction of samples whose Phase A and ω-validation spans intersect.
    pub overlap_ratio: f64,
    pub samples: usize,
    pub accepted: usize,
    /// Samples where e* < |ỹ^VI − y^VI|.
    pub bound_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMetrics {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainingMetrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn total_accepted(&self) -> usize {
        self.epochs.iter().map(|e| e.accepted).sum()
    }

    /// Samples over all epochs whose Phase A and ω-validation spans intersect,
    /// divided by the sample count.
    pub fn overlap_ratio(&self) -> f64 {
        let total: usize = self.epochs.iter().map(|e| e.samples).sum();
        if total == 0 {
            return 0.0;
        }
        let hits: f64 = self
            .epochs
            .iter()
            .map(|e| e.overlap_ratio * e.samples as f64)
            .sum();
        hits / total as f64
    }

    pub fn write_csv<W: Write>(&self, meta: &Metadata, w: &mut W) -> std::io::Result<()> {
        meta.write_comments(w)?;
        writeln!(w, "{METRICS_HEADER}")?;
        for e in &self.epochs {
            let eb = e.eb_mean.map(|v| format!("{v:.17e}")).unwrap_or_default();
            writeln!(
                w,
                "{},{:.17e},{:.17e},{},{:.6},{:.3},{:.6}",
                e.epoch, e.mse, e.ea_mean, eb, e.pass_rate, e.wall_ms, e.overlap_ratio
            )?;
        }
        Ok(())
    }
}

/// Whether `stage_a` and `stage_b` spans for each τ intersect in time, indexed by τ.
pub fn span_overlaps(timeline: &[Span], stage_a: Stage, stage_b: Stage) -> BTreeMap<u64, bool> {
    let mut a: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    let mut b: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for s in timeline {
        if s.stage == stage_a {
            a.insert(s.tau, (s.start_ns, s.end_ns));
        } else if s.stage == stage_b {
            b.insert(s.tau, (s.start_ns, s.end_ns));
        }
    }
    a.into_iter()
        .filter_map(|(tau, (a0, a1))| b.get(&tau).map(|&(b0, b1)| (tau, a1.min(b1) > a0.max(b0))))
        .collect()
}

/// Aggregates a complete per-sample event stream into epoch metrics.
/// `wall_ms[i]` is the wall-clock duration of the i-th epoch present in `events`.
pub fn record_metrics(
    events: &[SampleEvent],
    samples_per_epoch: usize,
    timeline: &[Span],
    wall_ms: &[f64],
) -> Result<TrainingMetrics> {
    let overlaps = span_overlaps(timeline, Stage::PhaseA, Stage::OmegaValidation);
    let mut by_epoch: BTreeMap<usize, Vec<&SampleEvent>> = BTreeMap::new();
    for e in events {
        by_epoch.entry(e.epoch).or_default().push(e);
    }
    if by_epoch.is_empty() {
        return Err(PipelineError::IncompleteEpoch {
            epoch: 1,
            expected: samples_per_epoch,
            found: 0,
        });
    }
    let mut epochs = Vec::with_capacity(by_epoch.len());
    for (i, (epoch, evs)) in by_epoch.into_iter().enumerate() {
        if evs.len() != samples_per_epoch {
            return Err(PipelineError::IncompleteEpoch {
                epoch,
                expected: samples_per_epoch,
                found: evs.len(),
            });
        }
        let n = evs.len() as f64;
        let mse = evs.iter().map(|e| e.e_star * e.e_star).sum::<f64>() / n;
        let ea_mean = evs.iter().map(|e| e.e_a).sum::<f64>() / n;
        let eb: Vec<f64> = evs.iter().filter_map(|e| e.e_b).collect();
        let eb_mean = (!eb.is_empty()).then(|| eb.iter().sum::<f64>() / eb.len() as f64);
        let accepted = evs.iter().filter(|e| e.accepted).count();
        let overlapped = evs
            .iter()
            .filter(|e| overlaps.get(&e.tau).copied().unwrap_or(false))
            .count();
        let bound_violations = evs.iter().filter(|e| !e.bound_holds()).count();
        log::info!(
            "epoch {epoch}: mse {mse:.3e}, e* < |e_VI| on {bound_violations}/{} samples",
            evs.len()
        );
        epochs.push(EpochMetrics {
            epoch,
            mse,
            ea_mean,
            eb_mean,
            pass_rate: accepted as f64 / n,
            wall_ms: wall_ms.get(i).copied().unwrap_or(0.0),
            overlap_ratio: overlapped as f64 / n,
            samples: evs.len(),
            accepted,
            bound_violations,
        });
    }
    Ok(TrainingMetrics { epochs })
}

fn epoch_mse(events: &[SampleEvent]) -> f64 {
    events.iter().map(|e| e.e_star * e.e_star).sum::<f64>() / events.len().max(1) as f64
}

pub fn write_timeline<W: Write>(
    timeline: &[Span],
    meta: &Metadata,
    w: &mut W,
) -> std::io::Result<()> {
    meta.write_comments(w)?;
    writeln!(w, "{TIMELINE_HEADER}")?;
    for s in timeline {
        writeln!(
            w,
            "{},{},{},{}",
            s.tau,
            s.stage.name(),
            s.start_ns,
            s.end_ns
        )?;
    }
    Ok(())
}

pub fn write_events<W: Write>(events: &[SampleEvent], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{EVENTS_HEADER}")?;
    for e in events {
        let eb = e.e_b.map(|v| format!("{v:.17e}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{:.17e},{},{:.17e},{},{:.17e}",
            e.epoch, e.tau, e.e_a, eb, e.e_star, e.accepted as u8, e.output_error
        )?;
    }
    Ok(())
}

/// Blocks written per activity, collected only in debug builds.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WriteAudit {
    pub writes: BTreeMap<(Stage, Block), u64>,
}

impl WriteAudit {
    fn record(
        &mut self,
        stage: Stage,
        allowed: &[Block],
        before: &[(Block, Vec<f64>)],
        after: &[(Block, Vec<f64>)],
    ) {
        for ((block, old), (_, new)) in before.iter().zip(after) {
            if old != new {
                assert!(
                    allowed.contains(block),
                    "{} wrote block {} outside its partition",
                    stage.name(),
                    block.name()
                );
                *self.writes.entry((stage, *block)).or_default() += 1;
            }
        }
    }

    pub fn count(&self, stage: Stage, block: Block) -> u64 {
        self.writes.get(&(stage, block)).copied().unwrap_or(0)
    }

    fn merge(&mut self, other: WriteAudit) {
        for (k, v) in other.writes {
            *self.writes.entry(k).or_default() += v;
        }
    }
}

fn stage1_blocks(s: &Stage1) -> Vec<(Block, Vec<f64>)> {
    s.layers()
        .iter()
        .map(|(b, l)| (*b, l.parameters().collect()))
        .collect()
}

fn stage2_blocks(s: &Stage2) -> Vec<(Block, Vec<f64>)> {
    s.layers()
        .iter()
        .map(|(b, l)| (*b, l.parameters().collect()))
        .collect()
}

/// Everything a training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: CascadeNet,
    pub metrics: TrainingMetrics,
    pub events: Vec<SampleEvent>,
    pub verdicts: Vec<Verdict>,
    pub timeline: Vec<Span>,
    /// Phase B invocations that ran stage 2 (validated samples).
    pub stage2_updates: u64,
    pub audit: WriteAudit,
    /// Whether the MSE goal ended training before the epoch budget.
    pub goal_reached: bool,
    /// Sequence number carried by the stop message.
    pub stop_tau: u64,
}

impl TrainOutcome {
    pub fn accepted_verdicts(&self) -> u64 {
        self.verdicts.iter().filter(|v| v.accepted).count() as u64
    }
}

struct Clock(Instant);

impl Clock {
    fn now(&self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

fn phase_a_step(
    stage1: &mut Stage1,
    pass: &Stage1Pass,
    pattern: &Pattern,
    eta: f64,
    audit: &mut WriteAudit,
) -> std::result::Result<f64, CascadeError> {
    let before = cfg!(debug_assertions).then(|| stage1_blocks(stage1));
    let e_a = phase_a_update(stage1, pass, pattern, eta)?;
    if let Some(before) = before {
        audit.record(
            Stage::PhaseA,
            &Block::STAGE1,
            &before,
            &stage1_blocks(stage1),
        );
    }
    Ok(e_a.rms())
}

fn phase_b_step(
    stage2: &mut Stage2,
    pattern: &Pattern,
    y_iva: &[f64],
    accepted: bool,
    eta: f64,
    audit: &mut WriteAudit,
) -> std::result::Result<crate::cascade::PhaseBOutcome, CascadeError> {
    let before = cfg!(debug_assertions).then(|| stage2_blocks(stage2));
    let out = phase_b_update(stage2, &pattern.input, y_iva, accepted, pattern, eta)?;
    if let Some(before) = before {
        let allowed: &[Block] = if accepted {
            &Block::STAGE2
        } else {
            &[Block::VI]
        };
        audit.record(Stage::PhaseB, allowed, &before, &stage2_blocks(stage2));
    }
    Ok(out)
}

fn validate_step(
    validator: &mut OmegaValidator,
    epoch: usize,
    tau: u64,
    predicted: f64,
    training: f64,
    params: ValidationParams,
) -> Result<Verdict> {
    validator
        .observe(epoch, tau, predicted, training, params)
        .map_err(|e: ValidationError| PipelineError::step(epoch, tau, e))
}

fn end_validation_epoch(validator: &mut OmegaValidator, epoch: usize, tau: u64) -> Result<()> {
    validator
        .end_epoch(epoch)
        .map(|_| ())
        .map_err(|e| PipelineError::step(epoch, tau, e))
}

fn prepare(
    ds: &Dataset,
    mut net: CascadeNet,
    cfg: &PipelineConfig,
) -> Result<(Vec<Pattern>, CascadeNet, OmegaValidator)> {
    cfg.validate()?;
    let (patterns, decoding) = prepare_patterns(ds, cfg)?;
    net.decoding = decoding;
    let validator = match net.region {
        Some(r) => OmegaValidator::with_region(r),
        None => OmegaValidator::new(cfg.validator),
    };
    Ok((patterns, net, validator))
}

/// Runs Simulation → Phase A → ω-validation → Phase B strictly in order per sample.
pub fn run_sequential(ds: &Dataset, net: CascadeNet, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    let (patterns, mut net, mut validator) = prepare(ds, net, cfg)?;
    let n = patterns.len();
    let c = cfg.validated_component;
    let clock = Clock(Instant::now());
    let mut events = Vec::with_capacity(n * cfg.epochs);
    let mut verdicts = Vec::with_capacity(n * cfg.epochs);
    let mut timeline = Vec::with_capacity(4 * n * cfg.epochs);
    let mut wall_ms = Vec::with_capacity(cfg.epochs);
    let mut audit = WriteAudit::default();
    let mut stage2_updates = 0u64;
    let mut goal_reached = false;
    let mut tau = 0u64;

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let first_event = events.len();
        for pattern in &patterns {
            let t0 = clock.now();
            let pass = net
                .stage1
                .forward(&pattern.input, &net.decoding)
                .map_err(|e| PipelineError::step(epoch, tau, e))?;
            let t1 = clock.now();
            let e_a = phase_a_step(
                &mut net.stage1,
                &pass,
                pattern,
                cfg.learning_rate,
                &mut audit,
            )
            .map_err(|e| PipelineError::step(epoch, tau, e))?;
            let t2 = clock.now();
            let verdict = validate_step(
                &mut validator,
                epoch,
                tau,
                pass.y_iva[c],
                pattern.stage1_target[c],
                pass.params,
            )?;
            let t3 = clock.now();
            let outcome = phase_b_step(
                &mut net.stage2,
                pattern,
                &pass.y_iva,
                verdict.accepted,
                cfg.learning_rate,
                &mut audit,
            )
            .map_err(|e| PipelineError::step(epoch, tau, e))?;
            let t4 = clock.now();
            if verdict.accepted {
                stage2_updates += 1;
            }
            let errors = StepErrors::from_parts(e_a, outcome);
            events.push(SampleEvent::new(epoch, tau, verdict.accepted, &errors));
            verdicts.push(verdict);
            for (stage, a, b) in [
                (Stage::Simulation, t0, t1),
                (Stage::PhaseA, t1, t2),
                (Stage::OmegaValidation, t2, t3),
                (Stage::PhaseB, t3, t4),
            ] {
                timeline.push(Span {
                    tau,
                    stage,
                    start_ns: a,
                    end_ns: b,
                });
            }
            tau += 1;
        }
        end_validation_epoch(&mut validator, epoch, tau)?;
        wall_ms.push(epoch_start.elapsed().as_secs_f64() * 1e3);
        if cfg
            .mse_goal
            .is_some_and(|g| epoch_mse(&events[first_event..]) <= g)
        {
            goal_reached = epoch < cfg.epochs;
            break;
        }
    }

    net.region = validator.region();
    let metrics = if events.is_empty() {
        TrainingMetrics::default()
    } else {
        record_metrics(&events, n, &timeline, &wall_ms)?
    };
    Ok(TrainOutcome {
        net,
        metrics,
        events,
        verdicts,
        timeline,
        stage2_updates,
        audit,
        goal_reached,
        stop_tau: tau,
    })
}

/// Message carried on every inter-worker queue.
#[derive(Debug)]
pub enum WorkMessage<P> {
    Item { tau: u64, epoch: usize, payload: P },
    EpochEnd { epoch: usize },
    Stop { tau: u64 },
}

/// Simulation → Phase A.
#[derive(Debug)]
pub struct SimResult {
    pub index: usize,
    pub pass: Stage1Pass,
}

/// Simulation → ω-validation.
#[derive(Debug, Clone, Copy)]
pub struct SimSignal {
    pub predicted: f64,
    pub training: f64,
    pub params: ValidationParams,
}

/// Phase A → Phase B.
#[derive(Debug)]
pub struct Stage1Result {
    pub index: usize,
    pub y_iva: Vec<f64>,
    pub e_a: f64,
}

enum Control {
    Continue,
    Stop,
}

/// Queue endpoint with the stall detector and optional busy-polling.
struct Port<'a> {
    worker: &'static str,
    timeout: Duration,
    spin: bool,
    spans: &'a mut Vec<Span>,
    clock: &'a Clock,
}

const SPIN_ITERATIONS: u32 = 2_000;

impl Port<'_> {
    fn recv<T>(&self, rx: &Receiver<T>) -> Result<T> {
        if self.spin {
            for _ in 0..SPIN_ITERATIONS {
                if let Ok(v) = rx.try_recv() {
                    return Ok(v);
                }
                std::hint::spin_loop();
            }
        }
        rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => PipelineError::Deadlock {
                worker: self.worker,
                waited: self.timeout,
            },
            RecvTimeoutError::Disconnected => PipelineError::Disconnected(self.worker),
        })
    }

    fn send<T>(&self, tx: &Sender<T>, msg: T) -> Result<()> {
        tx.send_timeout(msg, self.timeout).map_err(|e| match e {
            SendTimeoutError::Timeout(_) => PipelineError::Deadlock {
                worker: self.worker,
                waited: self.timeout,
            },
            SendTimeoutError::Disconnected(_) => PipelineError::Disconnected(self.worker),
        })
    }

    fn span(&mut self, tau: u64, stage: Stage, start_ns: u64) {
        self.spans.push(Span {
            tau,
            stage,
            start_ns,
            end_ns: self.clock.now(),
        });
    }
}

fn check_sequence(worker: &'static str, expected: u64, found: u64) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(PipelineError::Sequence {
            worker,
            expected,
            found,
        })
    }
}

struct SimEnd {
    spans: Vec<Span>,
    stop_tau: u64,
}

struct PhaseAEnd {
    stage1: Stage1,
    spans: Vec<Span>,
    audit: WriteAudit,
}

struct OmegaEnd {
    validator: OmegaValidator,
    verdicts: Vec<Verdict>,
    spans: Vec<Span>,
}

struct PhaseBEnd {
    stage2: Stage2,
    events: Vec<SampleEvent>,
    spans: Vec<Span>,
    audit: WriteAudit,
    stage2_updates: u64,
    wall_ms: Vec<f64>,
    goal_reached: bool,
}

struct SimLinks {
    to_a: Sender<WorkMessage<SimResult>>,
    to_omega: Sender<WorkMessage<SimSignal>>,
    weights: Receiver<Stage1>,
    control: Receiver<Control>,
}

fn simulation_worker(
    patterns: &[Pattern],
    mut stage1: Stage1,
    decoding: WindowDecoding,
    cfg: &PipelineConfig,
    links: SimLinks,
    clock: &Clock,
) -> Result<SimEnd> {
    let mut spans = Vec::with_capacity(patterns.len() * cfg.epochs);
    let mut port = Port {
        worker: "simulation",
        timeout: cfg.stall_timeout,
        spin: cfg.spin_enabled(),
        spans: &mut spans,
        clock,
    };
    let c = cfg.validated_component;
    let mut tau = 0u64;
    'epochs: for epoch in 1..=cfg.epochs {
        for (index, pattern) in patterns.iter().enumerate() {
            let t0 = clock.now();
            let pass = stage1
                .forward(&pattern.input, &decoding)
                .map_err(|e| PipelineError::step(epoch, tau, e))?;
            port.span(tau, Stage::Simulation, t0);
            let signal = SimSignal {
                predicted: pass.y_iva[c],
                training: pattern.stage1_target[c],
                params: pass.params,
            };
            port.send(
                &links.to_a,
                WorkMessage::Item {
                    tau,
                    epoch,
                    payload: SimResult { index, pass },
                },
            )?;
            port.send(
                &links.to_omega,
                WorkMessage::Item {
                    tau,
                    epoch,
                    payload: signal,
                },
            )?;
            stage1 = port.recv(&links.weights)?;
            tau += 1;
        }
        port.send(&links.to_a, WorkMessage::EpochEnd { epoch })?;
        port.send(&links.to_omega, WorkMessage::EpochEnd { epoch })?;
        if cfg.mse_goal.is_some() {
            if let Control::Stop = port.recv(&links.control)? {
                break 'epochs;
            }
        }
    }
    port.send(&links.to_a, WorkMessage::Stop { tau })?;
    port.send(&links.to_omega, WorkMessage::Stop { tau })?;
    Ok(SimEnd {
        spans,
        stop_tau: tau,
    })
}

fn phase_a_worker(
    patterns: &[Pattern],
    mut stage1: Stage1,
    cfg: &PipelineConfig,
    from_sim: Receiver<WorkMessage<SimResult>>,
    weights: Sender<Stage1>,
    to_b: Sender<WorkMessage<Stage1Result>>,
    clock: &Clock,
) -> Result<PhaseAEnd> {
    let mut spans = Vec::with_capacity(patterns.len() * cfg.epochs);
    let mut audit = WriteAudit::default();
    let mut port = Port {
        worker: "phase A",
        timeout: cfg.stall_timeout,
        spin: cfg.spin_enabled(),
        spans: &mut spans,
        clock,
    };
    let mut expected = 0u64;
    loop {
        match port.recv(&from_sim)? {
            WorkMessage::Item {
                tau,
                epoch,
                payload,
            } => {
                check_sequence(port.worker, expected, tau)?;
                let t0 = clock.now();
                let e_a = phase_a_step(
                    &mut stage1,
                    &payload.pass,
                    &patterns[payload.index],
                    cfg.learning_rate,
                    &mut audit,
                )
                .map_err(|e| PipelineError::step(epoch, tau, e))?;
                port.span(tau, Stage::PhaseA, t0);
                port.send(&weights, stage1.clone())?;
                let result = Stage1Result {
                    index: payload.index,
                    y_iva: payload.pass.y_iva,
                    e_a,
                };
                port.send(
                    &to_b,
                    WorkMessage::Item {
                        tau,
                        epoch,
                        payload: result,
                    },
                )?;
                expected += 1;
            }
            WorkMessage::EpochEnd { epoch } => port.send(&to_b, WorkMessage::EpochEnd { epoch })?,
            WorkMessage::Stop { tau } => {
                port.send(&to_b, WorkMessage::Stop { tau })?;
                break;
            }
        }
    }
    Ok(PhaseAEnd {
        stage1,
        spans,
        audit,
    })
}

fn omega_worker(
    mut validator: OmegaValidator,
    cfg: &PipelineConfig,
    samples: usize,
    from_sim: Receiver<WorkMessage<SimSignal>>,
    to_b: Sender<WorkMessage<Verdict>>,
    clock: &Clock,
) -> Result<OmegaEnd> {
    let mut spans = Vec::with_capacity(samples * cfg.epochs);
    let mut verdicts = Vec::with_capacity(samples * cfg.epochs);
    let mut port = Port {
        worker: "omega validation",
        timeout: cfg.stall_timeout,
        spin: cfg.spin_enabled(),
        spans: &mut spans,
        clock,
    };
    let mut expected = 0u64;
    loop {
        match port.recv(&from_sim)? {
            WorkMessage::Item {
                tau,
                epoch,
                payload,
            } => {
                check_sequence(port.worker, expected, tau)?;
                let t0 = clock.now();
                let verdict = validate_step(
                    &mut validator,
                    epoch,
                    tau,
                    payload.predicted,
                    payload.training,
                    payload.params,
                )?;
                port.span(tau, Stage::OmegaValidation, t0);
                verdicts.push(verdict);
                port.send(
                    &to_b,
                    WorkMessage::Item {
                        tau,
                        epoch,
                        payload: verdict,
                    },
                )?;
                expected += 1;
            }
            WorkMessage::EpochEnd { epoch } => {
                end_validation_epoch(&mut validator, epoch, expected)?;
                port.send(&to_b, WorkMessage::EpochEnd { epoch })?;
            }
            WorkMessage::Stop { tau } => {
                port.send(&to_b, WorkMessage::Stop { tau })?;
                break;
            }
        }
    }
    Ok(OmegaEnd {
        validator,
        verdicts,
        spans,
    })
}

fn phase_b_worker(
    patterns: &[Pattern],
    mut stage2: Stage2,
    cfg: &PipelineConfig,
    from_a: Receiver<WorkMessage<Stage1Result>>,
    from_omega: Receiver<WorkMessage<Verdict>>,
    control: Sender<Control>,
    clock: &Clock,
) -> Result<PhaseBEnd> {
    let mut spans = Vec::with_capacity(patterns.len() * cfg.epochs);
    let mut events = Vec::with_capacity(patterns.len() * cfg.epochs);
    let mut wall_ms = Vec::with_capacity(cfg.epochs);
    let mut audit = WriteAudit::default();
    let mut stage2_updates = 0u64;
    let mut goal_reached = false;
    let mut port = Port {
        worker: "phase B",
        timeout: cfg.stall_timeout,
        spin: cfg.spin_enabled(),
        spans: &mut spans,
        clock,
    };
    let mut expected = 0u64;
    let mut epoch_start = Instant::now();
    let mut first_event = 0usize;
    loop {
        let a = port.recv(&from_a)?;
        let v = port.recv(&from_omega)?;
        match (a, v) {
            (
                WorkMessage::Item {
                    tau,
                    epoch,
                    payload,
                },
                WorkMessage::Item {
                    tau: vtau,
                    payload: verdict,
                    ..
                },
            ) => {
                check_sequence(port.worker, expected, tau)?;
                check_sequence(port.worker, tau, vtau)?;
                let t0 = clock.now();
                let pattern = &patterns[payload.index];
                let outcome = phase_b_step(
                    &mut stage2,
                    pattern,
                    &payload.y_iva,
                    verdict.accepted,
                    cfg.learning_rate,
                    &mut audit,
                )
                .map_err(|e| PipelineError::step(epoch, tau, e))?;
                port.span(tau, Stage::PhaseB, t0);
                if verdict.accepted {
                    stage2_updates += 1;
                }
                let errors = StepErrors::from_parts(payload.e_a, outcome);
                events.push(SampleEvent::new(epoch, tau, verdict.accepted, &errors));
                expected += 1;
            }
            (WorkMessage::EpochEnd { epoch }, WorkMessage::EpochEnd { epoch: ve })
                if epoch == ve =>
            {
                wall_ms.push(epoch_start.elapsed().as_secs_f64() * 1e3);
                epoch_start = Instant::now();
                if let Some(goal) = cfg.mse_goal {
                    let stop = epoch_mse(&events[first_event..]) <= goal;
                    goal_reached = stop && epoch < cfg.epochs;
                    port.send(
                        &control,
                        if stop {
                            Control::Stop
                        } else {
                            Control::Continue
                        },
                    )?;
                }
                first_event = events.len();
            }
            (WorkMessage::Stop { tau }, WorkMessage::Stop { tau: vt }) => {
                check_sequence(port.worker, tau, vt)?;
                check_sequence(port.worker, expected, tau)?;
                break;
            }
            _ => {
                return Err(PipelineError::Sequence {
                    worker: "phase B",
                    expected,
                    found: u64::MAX,
                })
            }
        }
    }
    Ok(PhaseBEnd {
        stage2,
        events,
        spans,
        audit,
        stage2_updates,
        wall_ms,
        goal_reached,
    })
}

fn join<T>(handle: std::thread::ScopedJoinHandle<'_, Result<T>>, name: &'static str) -> Result<T> {
    handle
        .join()
        .unwrap_or(Err(PipelineError::WorkerPanic(name)))
}

/// Runs the four activities as concurrent workers joined by bounded queues.
pub fn run_parallel(ds: &Dataset, net: CascadeNet, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    let (patterns, net, validator) = prepare(ds, net, cfg)?;
    let n = patterns.len();
    let cap = cfg.queue_capacity;
    let clock = Clock(Instant::now());
    let decoding = net.decoding;

    let (sim_a_tx, sim_a_rx) = bounded(cap);
    let (sim_w_tx, sim_w_rx) = bounded(cap);
    let (weights_tx, weights_rx) = bounded(cap);
    let (a_b_tx, a_b_rx) = bounded(cap);
    let (w_b_tx, w_b_rx) = bounded(cap);
    let (control_tx, control_rx) = bounded(cap);

    let patterns = patterns.as_slice();
    let clock_ref = &clock;
    let (sim, a, omega, b) = std::thread::scope(|s| {
        let spawn_err = |name: &'static str| move |_| PipelineError::WorkerPanic(name);
        let stage1_for_sim = net.stage1.clone();
        let links = SimLinks {
            to_a: sim_a_tx,
            to_omega: sim_w_tx,
            weights: weights_rx,
            control: control_rx,
        };
        let sim = std::thread::Builder::new()
            .name("nn-simulation".into())
            .spawn_scoped(s, move || {
                simulation_worker(patterns, stage1_for_sim, decoding, cfg, links, clock_ref)
            })
            .map_err(spawn_err("simulation"));
        let stage1 = net.stage1.clone();
        let a = std::thread::Builder::new()
            .name("phase-a".into())
            .spawn_scoped(s, move || {
                phase_a_worker(
                    patterns, stage1, cfg, sim_a_rx, weights_tx, a_b_tx, clock_ref,
                )
            })
            .map_err(spawn_err("phase A"));
        let omega = std::thread::Builder::new()
            .name("omega-validation".into())
            .spawn_scoped(s, move || {
                omega_worker(validator, cfg, n, sim_w_rx, w_b_tx, clock_ref)
            })
            .map_err(spawn_err("omega validation"));
        let stage2 = net.stage2.clone();
        let b = std::thread::Builder::new()
            .name("phase-b".into())
            .spawn_scoped(s, move || {
                phase_b_worker(patterns, stage2, cfg, a_b_rx, w_b_rx, control_tx, clock_ref)
            })
            .map_err(spawn_err("phase B"));
        (
            sim.and_then(|h| join(h, "simulation")),
            a.and_then(|h| join(h, "phase A")),
            omega.and_then(|h| join(h, "omega validation")),
            b.and_then(|h| join(h, "phase B")),
        )
    });

    // Report the root cause rather than the hang-ups it triggered downstream.
    let mut errors = Vec::new();
    let sim = sim.map_err(|e| errors.push(e)).ok();
    let a = a.map_err(|e| errors.push(e)).ok();
    let omega = omega.map_err(|e| errors.push(e)).ok();
    let b = b.map_err(|e| errors.push(e)).ok();
    let (Some(sim), Some(a), Some(omega), Some(b)) = (sim, a, omega, b) else {
        let pos = errors.iter().position(|e| !e.is_hangup()).unwrap_or(0);
        let err = errors.swap_remove(pos);
        log::error!("parallel training aborted: {err}");
        return Err(err);
    };

    let mut audit = a.audit;
    audit.merge(b.audit);
    let mut timeline = sim.spans;
    timeline.extend(a.spans);
    timeline.extend(omega.spans);
    timeline.extend(b.spans);
    timeline.sort_by_key(|s| (s.tau, s.stage));

    let mut net = net;
    net.stage1 = a.stage1;
    net.stage2 = b.stage2;
    net.region = omega.validator.region();
    let metrics = if b.events.is_empty() {
        TrainingMetrics::default()
    } else {
        record_metrics(&b.events, n, &timeline, &b.wall_ms)?
    };
    Ok(TrainOutcome {
        net,
        metrics,
        events: b.events,
        verdicts: omega.verdicts,
        timeline,
        stage2_updates: b.stage2_updates,
        audit,
        goal_reached: b.goal_reached,
        stop_tau: sim.stop_tau,
    })
}

/// Network outputs over a dataset, with the frozen acceptance region applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Normalized (λ̃, L̃) per sample; L̃ is NaN when the sample was rejected.
    pub outputs: Vec<[f64; 2]>,
    pub rejected: Vec<bool>,
    /// Mean squared error over every available normalized output component.
    pub mse: f64,
}

/// Inference pass in dataset order. The validator sees the same
/// (prediction, target) stream as in training, so the first Δτ−1 samples are
/// rejected once a region exists.
pub fn evaluate(net: &CascadeNet, ds: &Dataset, validated_component: usize) -> Result<Evaluation> {
    if ds.normalization.is_none() {
        return Err(PipelineError::Config(
            "evaluation needs a normalized dataset".into(),
        ));
    }
    if validated_component >= IVA_DIM {
        return Err(PipelineError::Config(
            "validated component must index an IVa output".into(),
        ));
    }
    let mut validator = match net.region {
        Some(r) => OmegaValidator::with_region(r),
        None => OmegaValidator::new(ValidatorConfig {
            warmup_epochs: usize::MAX,
            ..ValidatorConfig::default()
        }),
    };
    let mut outputs = Vec::with_capacity(ds.len());
    let mut rejected = Vec::with_capacity(ds.len());
    let (mut sq, mut count) = (0.0, 0usize);
    for (i, s) in ds.samples.iter().enumerate() {
        let tau = i as u64;
        let x = s.inputs();
        let (y_iva, params) = net
            .stage1_forward(&x)
            .map_err(|e| PipelineError::step(0, tau, e))?;
        let training = crate::cascade::targets::stage1(s.lambda_spp)[validated_component];
        let verdict = validate_step(
            &mut validator,
            0,
            tau,
            y_iva[validated_component],
            training,
            params,
        )?;
        let y_ivb = if verdict.accepted {
            Some(
                net.stage2_forward(&x, &y_iva, true)
                    .map_err(|e| PipelineError::step(0, tau, e))?,
            )
        } else {
            None
        };
        let out = net
            .merge_and_output(&crate::cascade::StageOutput {
                y_iva,
                y_ivb,
                validated: verdict.accepted,
            })
            .map_err(|e| PipelineError::step(0, tau, e))?;
        for (y, t) in out.iter().zip(s.targets()) {
            if !y.is_nan() {
                sq += (y - t) * (y - t);
                count += 1;
            }
        }
        outputs.push(out);
        rejected.push(!verdict.accepted);
    }
    Ok(Evaluation {
        outputs,
        rejected,
        mse: if count == 0 { 0.0 } else { sq / count as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{normalize, Sample};

    fn toy_dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let l = 400.0 + 300.0 * i as f64 / (n - 1) as f64;
                let t = [36.0, 60.0, 128.0][i % 3];
                Sample {
                    lambda0: l,
                    thickness: t,
                    lambda_spp: 0.97 * l - 0.05 * t,
                    propagation_length: 1e4 * (1.0 + l / 100.0) * (t / 36.0),
                }
            })
            .collect();
        normalize(&Dataset::new(samples)).unwrap()
    }

    fn cfg(epochs: usize) -> PipelineConfig {
        PipelineConfig {
            epochs,
            window: 8,
            max_window: 16,
            queue_capacity: 4,
            stall_timeout: Duration::from_secs(20),
            ..PipelineConfig::default()
        }
    }

    fn net() -> CascadeNet {
        CascadeNet::random(3, 0.5, WindowDecoding::default()).unwrap()
    }

    #[test]
    fn zero_epochs_leave_weights_alone() {
        let ds = toy_dataset(12);
        let init = net();
        for out in [
            run_sequential(&ds, init.clone(), &cfg(0)).unwrap(),
            run_parallel(&ds, init.clone(), &cfg(0)).unwrap(),
        ] {
            assert_eq!(out.net.flat_parameters(), init.flat_parameters());
            assert!(out.metrics.epochs.is_empty());
            assert_eq!(out.stop_tau, 0);
        }
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let ds = toy_dataset(30);
        let seq = run_sequential(&ds, net(), &cfg(6)).unwrap();
        let par = run_parallel(&ds, net(), &cfg(6)).unwrap();
        assert_eq!(seq.net, par.net);
        assert_eq!(seq.events, par.events);
        assert_eq!(seq.verdicts, par.verdicts);
        assert_eq!(seq.stage2_updates, par.stage2_updates);
        assert_eq!(par.stage2_updates, par.accepted_verdicts());
        assert_eq!(par.stop_tau, 180);
        assert!(par.events.iter().all(|e| e.tau < par.stop_tau));
        if cfg!(debug_assertions) {
            assert_eq!(seq.audit, par.audit);
            assert_eq!(par.audit.count(Stage::PhaseA, Block::IVa), 180);
        }
    }

    #[test]
    fn mse_goal_stops_both_trainers_at_the_same_epoch() {
        let ds = toy_dataset(20);
        let probe = run_sequential(&ds, net(), &cfg(8)).unwrap();
        let goal = probe.metrics.epochs[3].mse;
        let c = PipelineConfig {
            mse_goal: Some(goal),
            ..cfg(8)
        };
        let seq = run_sequential(&ds, net(), &c).unwrap();
        let par = run_parallel(&ds, net(), &c).unwrap();
        assert!(seq.goal_reached && par.goal_reached);
        assert_eq!(seq.metrics.epochs.len(), par.metrics.epochs.len());
        assert!(seq.metrics.epochs.len() <= 4);
        assert_eq!(seq.net, par.net);
    }

    #[test]
    fn metrics_degenerate_cases() {
        let ev = |tau, e_a: f64, e_b: Option<f64>| SampleEvent {
            epoch: 1,
            tau,
            e_a,
            e_b,
            e_star: crate::cascade::global_error(e_a, e_b),
            accepted: e_b.is_some(),
            output_error: 0.0,
        };
        let rejected = [ev(0, 0.5, None), ev(1, 0.1, None)];
        let m = record_metrics(&rejected, 2, &[], &[]).unwrap();
        assert_eq!(m.epochs[0].pass_rate, 0.0);
        assert_eq!(m.epochs[0].eb_mean, None);
        assert!((m.epochs[0].mse - 0.13).abs() < 1e-15);
        let zeros = [ev(0, 0.0, Some(0.0)), ev(1, 0.0, Some(0.0))];
        let m = record_metrics(&zeros, 2, &[], &[]).unwrap();
        assert_eq!(m.epochs[0].mse, 0.0);
        assert_eq!(m.epochs[0].pass_rate, 1.0);
        assert!(matches!(
            record_metrics(&zeros[..1], 2, &[], &[]),
            Err(PipelineError::IncompleteEpoch { found: 1, .. })
        ));
    }

    #[test]
    fn overlap_needs_positive_intersection() {
        let span = |tau, stage, a, b| Span {
            tau,
            stage,
            start_ns: a,
            end_ns: b,
        };
        let tl = [
            span(0, Stage::PhaseA, 0, 10),
            span(0, Stage::OmegaValidation, 5, 20),
            span(1, Stage::PhaseA, 20, 30),
            span(1, Stage::OmegaValidation, 30, 40),
        ];
        let o = span_overlaps(&tl, Stage::PhaseA, Stage::OmegaValidation);
        assert!(o[&0]);
        assert!(!o[&1]);
    }

    #[test]
    fn unnormalized_data_is_refused() {
        let mut ds = toy_dataset(10);
        ds.normalization = None;
        assert!(matches!(
            run_sequential(&ds, net(), &cfg(1)),
            Err(PipelineError::Config(_))
        ));
    }
}
