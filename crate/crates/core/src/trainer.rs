//! Optimizer and training loops: flow matching, the continuous adversarial
//! objective (from scratch or as post-training), and the discrete adversarial
//! baseline.
//!
//! `total_steps` counts optimizer updates of either network, warm-up
//! included. After warm-up the adversarial loops repeat `N` discriminator
//! updates followed by one generator update, each on a fresh batch.

use crate::eval::{energy_distance, field_rel_mse, EvalError};
use crate::flowpath::{sample_afm_batch, sample_batch, sample_noise, FlowError, FlowPath, TimeSampler};
use crate::models::{g_forward, EmaState, MlpSpec, ModelError, Norm};
use crate::objectives::{
    afm_d_step, afm_g_step, cafm_d_step, cafm_g_step, fm_step, Contrastive, LossWeights, ObjectiveError,
};
use crate::oracle::{Dataset, OracleError};
use crate::params::{grad_norm, GradientMap, Parameters};
use crate::rng::{stream, substream, RngState, Stream};
use crate::samplers::{afm_model_sample, sample, ModelField, SamplerConfig, SamplerError, SamplerKind};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

/// Minimum `s − t` for the discrete baseline's time pairs.
pub const AFM_TIME_GAP: f64 = 0.05;
/// Length of the trailing window for the reported discriminator loss.
pub const D_LOSS_WINDOW: usize = 500;
/// Gradient norms above this multiple of the trailing median are logged.
pub const SPIKE_FACTOR: f64 = 10.0;
pub const SPIKE_WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error("initial generator does not match the model spec at parameter {0:?}")]
    InitMismatch(String),
    #[error("monitor failed: {0}")]
    Monitor(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Fm,
    Cafm,
    Afm,
}

/// Network sizes. The input and output widths come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub g_hidden: Vec<usize>,
    #[serde(default = "default_d_hidden")]
    pub d_hidden: Vec<usize>,
    #[serde(default = "rms")]
    pub g_norm: Norm,
    #[serde(default = "rms")]
    pub d_norm: Norm,
    #[serde(default = "default_embed")]
    pub time_embed_dim: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}

fn default_d_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}

fn rms() -> Norm {
    Norm::Rms
}

fn default_embed() -> usize {
    64
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            g_hidden: default_hidden(),
            d_hidden: default_d_hidden(),
            g_norm: Norm::Rms,
            d_norm: Norm::Rms,
            time_embed_dim: default_embed(),
        }
    }
}

impl ModelConfig {
    /// Velocity network for `fm`/`cafm`, two-time generator for `afm`.
    pub fn generator_spec(&self, dataset: &Dataset, objective: Objective) -> MlpSpec {
        MlpSpec {
            norm: self.g_norm,
            time_embed_dim: self.time_embed_dim,
            time_inputs: if objective == Objective::Afm { 2 } else { 1 },
            ..MlpSpec::generator(dataset.dim(), self.g_hidden.clone())
        }
        .with_classes(dataset.num_classes())
    }

    pub fn discriminator_spec(&self, dataset: &Dataset) -> MlpSpec {
        MlpSpec {
            norm: self.d_norm,
            time_embed_dim: self.time_embed_dim,
            ..MlpSpec::discriminator(dataset.dim(), self.d_hidden.clone())
        }
        .with_classes(dataset.num_classes())
    }
}

/// Piecewise-constant overrides. Each entry `(step, value)` takes effect at
/// that update count and holds until the next entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedules {
    #[serde(default)]
    pub lambda_ot: Vec<(usize, f64)>,
    #[serde(default, rename = "N")]
    pub n: Vec<(usize, usize)>,
}

fn piecewise<T: Copy>(points: &[(usize, T)], step: usize, base: T) -> T {
    points.iter().take_while(|(s, _)| *s <= step).last().map_or(base, |p| p.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub dataset: String,
    #[serde(default = "default_lr")]
    pub g_lr: f64,
    #[serde(default = "default_lr")]
    pub d_lr: f64,
    #[serde(default = "default_beta")]
    pub adam_beta: [f64; 2],
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub d_warmup_steps: usize,
    /// Discriminator updates per generator update.
    #[serde(default = "default_n", rename = "N")]
    pub n: usize,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedules: Schedules,
    #[serde(default = "default_dropout")]
    pub cfg_dropout: f64,
    #[serde(default)]
    pub contrastive: Contrastive,
    #[serde(default = "TimeSampler::uniform")]
    pub time_sampler: TimeSampler,
    #[serde(default)]
    pub model: ModelConfig,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_beta() -> [f64; 2] {
    [0.0, 0.95]
}

fn default_eps() -> f64 {
    1e-8
}

fn default_batch() -> usize {
    256
}

fn default_n() -> usize {
    16
}

fn default_ema() -> f64 {
    0.99
}

fn default_dropout() -> f64 {
    0.1
}

impl TrainConfig {
    /// Defaults for `objective`: Adam `β = (0, 0.95)`, no weight decay,
    /// `N = 16`, `λ_ot = 0`, `λ_cp = 0.001`, EMA 0.99 and uniform times.
    pub fn new(objective: Objective, dataset: &str, total_steps: usize) -> Self {
        Self {
            objective,
            dataset: dataset.to_string(),
            g_lr: default_lr(),
            d_lr: default_lr(),
            adam_beta: default_beta(),
            adam_eps: default_eps(),
            weight_decay: 0.0,
            batch: default_batch(),
            total_steps,
            d_warmup_steps: 0,
            n: default_n(),
            weights: LossWeights::default(),
            ema_decay: default_ema(),
            seed: 0,
            schedules: Schedules::default(),
            cfg_dropout: default_dropout(),
            contrastive: Contrastive::default(),
            time_sampler: TimeSampler::uniform(),
            model: ModelConfig::default(),
        }
    }

    /// Post-training defaults: the from-scratch defaults with the smaller
    /// learning rate 1e-5.
    pub fn posttrain(dataset: &str, total_steps: usize) -> Self {
        Self {
            g_lr: 1e-5,
            d_lr: 1e-5,
            ..Self::new(Objective::Cafm, dataset, total_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        // A zero learning rate freezes that network.
        for (name, lr) in [("g_lr", self.g_lr), ("d_lr", self.d_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {lr}"));
            }
        }
        let [b1, b2] = self.adam_beta;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam_beta entries must lie in [0, 1), got [{b1}, {b2}]"));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        if self.batch == 0 || self.total_steps == 0 || self.n == 0 {
            return bad("batch, total_steps and N must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return bad(format!("cfg_dropout must lie in [0, 1], got {}", self.cfg_dropout));
        }
        self.weights.validate()?;
        self.time_sampler.validate()?;
        let increasing = |steps: Vec<usize>| steps.windows(2).all(|w| w[0] < w[1]);
        if !increasing(self.schedules.lambda_ot.iter().map(|p| p.0).collect())
            || !increasing(self.schedules.n.iter().map(|p| p.0).collect())
        {
            return bad("schedule steps must be strictly increasing".into());
        }
        if self.schedules.lambda_ot.iter().any(|p| !(p.1 >= 0.0 && p.1.is_finite())) {
            return bad("scheduled lambda_ot values must be non-negative".into());
        }
        if self.schedules.n.iter().any(|p| p.1 == 0) {
            return bad("scheduled N values must be positive".into());
        }
        Dataset::preset(&self.dataset)?;
        Ok(())
    }

    pub fn lambda_ot_at(&self, step: usize) -> f64 {
        piecewise(&self.schedules.lambda_ot, step, self.weights.lambda_ot)
    }

    pub fn n_at(&self, step: usize) -> usize {
        piecewise(&self.schedules.n, step, self.n)
    }

    fn weights_at(&self, step: usize) -> LossWeights {
        LossWeights {
            lambda_ot: self.lambda_ot_at(step),
            ..self.weights
        }
    }

    fn expect(&self, objective: Objective) -> Result<()> {
        self.validate()?;
        if self.objective != objective {
            return Err(TrainError::Config(format!(
                "objective is {:?}, this loop trains {objective:?}",
                self.objective
            )));
        }
        Ok(())
    }
}

/// Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        let mut zeros = Parameters::new();
        for (name, t) in params.iter() {
            zeros.insert(name.clone(), Tensor::zeros_like(t));
        }
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Weight decay is decoupled and applied as
/// `p ← p·(1 − lr·wd)` before the adaptive step. Parameters without a
/// gradient entry are treated as having zero gradient.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut Parameters,
    grads: &GradientMap,
    lr: f64,
    beta: [f64; 2],
    eps: f64,
    weight_decay: f64,
) {
    assert!(state.m.same_layout(params), "optimizer state does not match parameters");
    state.step += 1;
    let [b1, b2] = beta;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - lr * weight_decay;
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for ((name, p), ((_, m), (_, v))) in params.iter_mut().zip(moments) {
        let g = grads.get(name.as_str());
        if let Some(g) = g {
            assert_eq!(g.shape(), p.shape(), "gradient shape mismatch for {name}");
        }
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            if weight_decay > 0.0 {
                p[i] *= decay;
            }
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Fm,
    Warmup,
    D,
    G,
    Eval,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Fm => "fm",
            Phase::Warmup => "warmup",
            Phase::D => "d",
            Phase::G => "g",
            Phase::Eval => "eval",
        }
    }
}

pub const METRICS_COLUMNS: [&str; 13] = [
    "step",
    "phase",
    "loss_g",
    "loss_d_adv",
    "loss_d_cp",
    "loss_g_adv",
    "loss_g_ot",
    "d_logit_real_mean",
    "d_logit_fake_mean",
    "grad_norm_g",
    "grad_norm_d",
    "field_rel_mse",
    "energy_distance",
];

/// One metrics record. `step` is the number of optimizer updates completed.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub phase: Phase,
    pub loss_g: Option<f64>,
    pub loss_d_adv: Option<f64>,
    pub loss_d_cp: Option<f64>,
    pub loss_g_adv: Option<f64>,
    pub loss_g_ot: Option<f64>,
    pub d_logit_real_mean: Option<f64>,
    pub d_logit_fake_mean: Option<f64>,
    pub grad_norm_g: Option<f64>,
    pub grad_norm_d: Option<f64>,
    pub field_rel_mse: Option<f64>,
    pub energy_distance: Option<f64>,
}

impl MetricsRow {
    pub fn new(step: usize, phase: Phase) -> Self {
        Self {
            step,
            phase,
            loss_g: None,
            loss_d_adv: None,
            loss_d_cp: None,
            loss_g_adv: None,
            loss_g_ot: None,
            d_logit_real_mean: None,
            d_logit_fake_mean: None,
            grad_norm_g: None,
            grad_norm_d: None,
            field_rel_mse: None,
            energy_distance: None,
        }
    }

    /// Field values in [`METRICS_COLUMNS`] order; absent values are empty.
    pub fn fields(&self) -> Vec<String> {
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.step.to_string(),
            self.phase.as_str().to_string(),
            num(self.loss_g),
            num(self.loss_d_adv),
            num(self.loss_d_cp),
            num(self.loss_g_adv),
            num(self.loss_g_ot),
            num(self.d_logit_real_mean),
            num(self.d_logit_fake_mean),
            num(self.grad_norm_g),
            num(self.grad_norm_d),
            num(self.field_rel_mse),
            num(self.energy_distance),
        ]
    }
}

/// What to evaluate on the EMA generator, and how often.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Updates between evaluations; 0 evaluates only after the last update.
    #[serde(default)]
    pub every: usize,
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    #[serde(default = "default_eval_sampler")]
    pub sampler: SamplerConfig,
    /// Steps of the difference sampler for the discrete baseline.
    #[serde(default = "default_afm_steps")]
    pub afm_steps: usize,
    #[serde(default = "default_t_draws")]
    pub field_t_draws: usize,
    #[serde(default = "default_x_draws")]
    pub field_x_draws: usize,
}

fn default_eval_samples() -> usize {
    2000
}

fn default_eval_sampler() -> SamplerConfig {
    SamplerConfig::new(SamplerKind::Euler, 128)
}

fn default_afm_steps() -> usize {
    8
}

fn default_t_draws() -> usize {
    64
}

fn default_x_draws() -> usize {
    256
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            every: 0,
            samples: default_eval_samples(),
            sampler: default_eval_sampler(),
            afm_steps: default_afm_steps(),
            field_t_draws: default_t_draws(),
            field_x_draws: default_x_draws(),
        }
    }
}

/// Logging cadence and optional evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Reporting {
    /// A row is kept for every update whose count is a multiple of this.
    pub log_every: usize,
    pub eval: Option<EvalSettings>,
}

impl Default for Reporting {
    fn default() -> Self {
        Self {
            log_every: 1,
            eval: None,
        }
    }
}

/// Update counters. Warm-up discriminator updates are counted separately.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub warmup_d: usize,
    pub d_updates: usize,
    pub g_updates: usize,
}

/// Everything needed to describe a run at a given update count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub g: Parameters,
    pub d: Option<Parameters>,
    pub ema: EmaState,
    pub adam_g: AdamState,
    pub adam_d: Option<AdamState>,
    pub counters: Counters,
    /// Position of the training-data generator.
    pub rng: RngState,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub step: usize,
    pub phase: Phase,
    pub grad_norm: f64,
    pub trailing_median: f64,
}

/// Receives rows as they are produced and decides when to snapshot.
pub trait Monitor {
    fn row(&mut self, _row: &MetricsRow) -> Result<(), String> {
        Ok(())
    }

    fn wants_checkpoint(&self, _step: usize) -> bool {
        false
    }

    fn checkpoint(&mut self, _state: &TrainState) -> Result<(), String> {
        Ok(())
    }
}

/// A monitor that ignores everything.
pub struct Silent;

impl Monitor for Silent {}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub g_spec: MlpSpec,
    pub d_spec: Option<MlpSpec>,
    pub state: TrainState,
    pub log: Vec<MetricsRow>,
    pub spikes: Vec<Spike>,
    /// Mean discriminator adversarial loss over the last
    /// [`D_LOSS_WINDOW`] discriminator updates.
    pub trailing_d_adv: Option<f64>,
}

struct SpikeWatch {
    window: VecDeque<f64>,
}

impl SpikeWatch {
    fn new() -> Self {
        Self {
            window: VecDeque::with_capacity(SPIKE_WINDOW),
        }
    }

    /// Records `norm`, returning the trailing median when it is a spike.
    fn observe(&mut self, norm: f64) -> Option<f64> {
        let spike = if self.window.len() >= SPIKE_WINDOW / 4 {
            let mut sorted: Vec<f64> = self.window.iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            (norm > SPIKE_FACTOR * median).then_some(median)
        } else {
            None
        };
        if self.window.len() == SPIKE_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(norm);
        spike
    }
}

/// Shared bookkeeping: logging, spikes, evaluation and checkpoints.
struct Run<'a> {
    config: &'a TrainConfig,
    dataset: &'a Dataset,
    reporting: &'a Reporting,
    monitor: &'a mut dyn Monitor,
    log: Vec<MetricsRow>,
    spikes: Vec<Spike>,
    watch_d: SpikeWatch,
    watch_g: SpikeWatch,
    d_adv: VecDeque<f64>,
}

impl<'a> Run<'a> {
    fn new(config: &'a TrainConfig, dataset: &'a Dataset, reporting: &'a Reporting, monitor: &'a mut dyn Monitor) -> Self {
        Self {
            config,
            dataset,
            reporting,
            monitor,
            log: Vec::new(),
            spikes: Vec::new(),
            watch_d: SpikeWatch::new(),
            watch_g: SpikeWatch::new(),
            d_adv: VecDeque::with_capacity(D_LOSS_WINDOW),
        }
    }

    fn emit(&mut self, row: MetricsRow) -> Result<()> {
        self.monitor.row(&row).map_err(TrainError::Monitor)?;
        self.log.push(row);
        Ok(())
    }

    fn record(&mut self, row: MetricsRow) -> Result<()> {
        let every = self.reporting.log_every.max(1);
        if row.step % every == 0 || row.step == self.config.total_steps {
            self.emit(row)?;
        }
        Ok(())
    }

    fn watch(&mut self, step: usize, phase: Phase, norm: f64) {
        let watch = if phase == Phase::G || phase == Phase::Fm {
            &mut self.watch_g
        } else {
            &mut self.watch_d
        };
        if let Some(median) = watch.observe(norm) {
            self.spikes.push(Spike {
                step,
                phase,
                grad_norm: norm,
                trailing_median: median,
            });
        }
    }

    fn d_adv(&mut self, loss: f64) {
        if self.d_adv.len() == D_LOSS_WINDOW {
            self.d_adv.pop_front();
        }
        self.d_adv.push_back(loss);
    }

    fn trailing_d_adv(&self) -> Option<f64> {
        (!self.d_adv.is_empty()).then(|| self.d_adv.iter().sum::<f64>() / self.d_adv.len() as f64)
    }

    /// Evaluates when the cadence says so, then checkpoints when asked.
    fn after_update(&mut self, g_spec: &MlpSpec, state: impl Fn() -> TrainState, ema: &Parameters, step: usize) -> Result<()> {
        if let Some(settings) = &self.reporting.eval {
            let due = (settings.every > 0 && step % settings.every == 0) || step == self.config.total_steps;
            if due {
                let settings = settings.clone();
                let row = evaluate(self.config, self.dataset, g_spec, ema, &settings, step)?;
                self.emit(row)?;
            }
        }
        if self.monitor.wants_checkpoint(step) {
            self.monitor.checkpoint(&state()).map_err(TrainError::Monitor)?;
        }
        Ok(())
    }
}

/// Field error (velocity objectives only) and energy distance of generated
/// samples against fresh data, on an evaluation stream keyed by `step`.
pub fn evaluate(
    config: &TrainConfig,
    dataset: &Dataset,
    g_spec: &MlpSpec,
    g_params: &Parameters,
    settings: &EvalSettings,
    step: usize,
) -> Result<MetricsRow> {
    let mut rng = substream(config.seed, Stream::Eval, step as u64);
    let mut row = MetricsRow::new(step, Phase::Eval);
    if config.objective != Objective::Afm {
        let field = ModelField {
            spec: g_spec,
            params: g_params,
            classes: None,
        };
        let report = field_rel_mse(&field, &dataset.mixture, settings.field_t_draws, settings.field_x_draws, &mut rng)?;
        row.field_rel_mse = Some(report.relative_mse);
    }
    let (truth, labels) = dataset.mixture.sample_labelled(&mut rng, settings.samples);
    let classes = dataset.conditional.then_some(labels);
    let x1 = sample_noise(&mut rng, settings.samples, dataset.dim());
    let generated = if config.objective == Objective::Afm {
        afm_model_sample(g_spec, g_params, &x1, settings.afm_steps, classes.as_deref())?
    } else {
        let field = ModelField {
            spec: g_spec,
            params: g_params,
            classes,
        };
        sample(&field, &x1, &settings.sampler, &mut rng)?
    };
    row.energy_distance = Some(energy_distance(&generated, &truth)?);
    Ok(row)
}

fn check_finite(value: f64, step: usize, what: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFinite { step, what })
    }
}

/// Decides the phase of each update: warm-up, then cycles of `N`
/// discriminator updates and one generator update.
struct Cycle {
    position: usize,
    n: usize,
}

impl Cycle {
    fn new() -> Self {
        Self { position: 0, n: 0 }
    }

    fn next(&mut self, config: &TrainConfig, step: usize) -> Phase {
        if step < config.d_warmup_steps {
            return Phase::Warmup;
        }
        if self.position == 0 {
            self.n = config.n_at(step);
        }
        if self.position < self.n {
            self.position += 1;
            Phase::D
        } else {
            self.position = 0;
            Phase::G
        }
    }
}

/// Flow-matching training of a velocity network.
pub fn train_fm(config: &TrainConfig, reporting: &Reporting, monitor: &mut dyn Monitor) -> Result<TrainOutcome> {
    config.expect(Objective::Fm)?;
    let dataset = Dataset::preset(&config.dataset)?;
    let path = FlowPath::linear();
    let g_spec = config.model.generator_spec(&dataset, Objective::Fm);
    let mut g = g_spec.init(config.seed)?;
    let mut ema = EmaState::new(&g, config.ema_decay);
    let mut adam = AdamState::new(&g);
    let mut rng = stream(config.seed, Stream::Data);
    let mut counters = Counters::default();
    let mut run = Run::new(config, &dataset, reporting, monitor);
    for step in 1..=config.total_steps {
        let batch = sample_batch(&dataset, &path, &config.time_sampler, &mut rng, config.batch, config.cfg_dropout)?;
        let (loss, grads) = fm_step(&g_spec, &g, &batch, None)?;
        check_finite(loss, step, "flow-matching loss")?;
        let norm = check_finite(grad_norm(&grads), step, "generator gradient")?;
        adam_step(&mut adam, &mut g, &grads, config.g_lr, config.adam_beta, config.adam_eps, config.weight_decay);
        ema.update(&g);
        counters.g_updates += 1;
        run.watch(step, Phase::Fm, norm);
        let mut row = MetricsRow::new(step, Phase::Fm);
        row.loss_g = Some(loss);
        row.grad_norm_g = Some(norm);
        run.record(row)?;
        let snapshot = || TrainState {
            step,
            g: g.clone(),
            d: None,
            ema: ema.clone(),
            adam_g: adam.clone(),
            adam_d: None,
            counters,
            rng: RngState::capture(&rng),
        };
        run.after_update(&g_spec, snapshot, &ema.shadow, step)?;
    }
    let trailing = run.trailing_d_adv();
    Ok(TrainOutcome {
        state: TrainState {
            step: config.total_steps,
            g,
            d: None,
            ema,
            adam_g: adam,
            adam_d: None,
            counters,
            rng: RngState::capture(&rng),
        },
        g_spec,
        d_spec: None,
        log: run.log,
        spikes: run.spikes,
        trailing_d_adv: trailing,
    })
}

fn initial_generator(spec: &MlpSpec, seed: u64, init: Option<&Parameters>) -> Result<Parameters> {
    let fresh = spec.init(seed)?;
    match init {
        None => Ok(fresh),
        Some(p) => match fresh.first_layout_mismatch(p) {
            Some(name) => Err(TrainError::InitMismatch(name)),
            None => Ok(p.clone()),
        },
    }
}

/// Continuous adversarial training. With `init_g` the generator starts from
/// those parameters (post-training); otherwise it is freshly initialized.
pub fn train_cafm(
    config: &TrainConfig,
    init_g: Option<&Parameters>,
    reporting: &Reporting,
    monitor: &mut dyn Monitor,
) -> Result<TrainOutcome> {
    config.expect(Objective::Cafm)?;
    let dataset = Dataset::preset(&config.dataset)?;
    let path = FlowPath::linear();
    let g_spec = config.model.generator_spec(&dataset, Objective::Cafm);
    let d_spec = config.model.discriminator_spec(&dataset);
    let mut g = initial_generator(&g_spec, config.seed, init_g)?;
    let mut d = d_spec.init_from(&mut substream(config.seed, Stream::Init, 1))?;
    let mut ema = EmaState::new(&g, config.ema_decay);
    let mut adam_g = AdamState::new(&g);
    let mut adam_d = AdamState::new(&d);
    let mut rng = stream(config.seed, Stream::Data);
    let mut counters = Counters::default();
    let mut cycle = Cycle::new();
    let mut run = Run::new(config, &dataset, reporting, monitor);
    // The JVP time tangent: the path moves at unit speed in t.
    let t_dot = 1.0;
    for step in 1..=config.total_steps {
        let phase = cycle.next(config, step - 1);
        let weights = config.weights_at(step - 1);
        let batch = sample_batch(&dataset, &path, &config.time_sampler, &mut rng, config.batch, config.cfg_dropout)?;
        let mut row = MetricsRow::new(step, phase);
        if phase == Phase::G {
            let (terms, grads, _) = cafm_g_step(&g_spec, &g, &d_spec, &d, &batch, t_dot, config.contrastive, &weights)?;
            check_finite(terms.total, step, "generator loss")?;
            let norm = check_finite(grad_norm(&grads), step, "generator gradient")?;
            adam_step(&mut adam_g, &mut g, &grads, config.g_lr, config.adam_beta, config.adam_eps, config.weight_decay);
            ema.update(&g);
            counters.g_updates += 1;
            run.watch(step, phase, norm);
            row.loss_g = Some(terms.total);
            row.loss_g_adv = Some(terms.adv);
            row.loss_g_ot = Some(terms.ot);
            row.grad_norm_g = Some(norm);
        } else {
            let g_out = g_forward(&g_spec, &g, &batch.x_t, &batch.t, batch.c.as_deref())?;
            let (terms, grads) = cafm_d_step(&d_spec, &d, &batch, &g_out, t_dot, config.contrastive, &weights)?;
            check_finite(terms.total, step, "discriminator loss")?;
            let norm = check_finite(grad_norm(&grads), step, "discriminator gradient")?;
            adam_step(&mut adam_d, &mut d, &grads, config.d_lr, config.adam_beta, config.adam_eps, config.weight_decay);
            if phase == Phase::Warmup {
                counters.warmup_d += 1;
            } else {
                counters.d_updates += 1;
            }
            run.watch(step, phase, norm);
            run.d_adv(terms.adv);
            row.loss_d_adv = Some(terms.adv);
            row.loss_d_cp = Some(terms.cp);
            row.d_logit_real_mean = Some(terms.real_logit_mean);
            row.d_logit_fake_mean = Some(terms.fake_logit_mean);
            row.grad_norm_d = Some(norm);
        }
        run.record(row)?;
        let snapshot = || TrainState {
            step,
            g: g.clone(),
            d: Some(d.clone()),
            ema: ema.clone(),
            adam_g: adam_g.clone(),
            adam_d: Some(adam_d.clone()),
            counters,
            rng: RngState::capture(&rng),
        };
        run.after_update(&g_spec, snapshot, &ema.shadow, step)?;
    }
    let trailing = run.trailing_d_adv();
    Ok(TrainOutcome {
        state: TrainState {
            step: config.total_steps,
            g,
            d: Some(d),
            ema,
            adam_g,
            adam_d: Some(adam_d),
            counters,
            rng: RngState::capture(&rng),
        },
        g_spec,
        d_spec: Some(d_spec),
        log: run.log,
        spikes: run.spikes,
        trailing_d_adv: trailing,
    })
}

/// Discrete-time adversarial baseline with a two-time generator
/// `G(x_s, s, t)`, relativistic losses, gradient penalties and the discrete
/// transport penalty.
pub fn train_afm(config: &TrainConfig, reporting: &Reporting, monitor: &mut dyn Monitor) -> Result<TrainOutcome> {
    config.expect(Objective::Afm)?;
    let dataset = Dataset::preset(&config.dataset)?;
    let path = FlowPath::linear();
    let g_spec = config.model.generator_spec(&dataset, Objective::Afm);
    let d_spec = config.model.discriminator_spec(&dataset);
    let mut g = g_spec.init(config.seed)?;
    let mut d = d_spec.init_from(&mut substream(config.seed, Stream::Init, 1))?;
    let mut ema = EmaState::new(&g, config.ema_decay);
    let mut adam_g = AdamState::new(&g);
    let mut adam_d = AdamState::new(&d);
    let mut rng = stream(config.seed, Stream::Data);
    let mut counters = Counters::default();
    let mut cycle = Cycle::new();
    let mut run = Run::new(config, &dataset, reporting, monitor);
    for step in 1..=config.total_steps {
        let phase = cycle.next(config, step - 1);
        let weights = config.weights_at(step - 1);
        let batch = sample_afm_batch(&dataset, &path, &mut rng, config.batch, AFM_TIME_GAP)?;
        let mut row = MetricsRow::new(step, phase);
        if phase == Phase::G {
            let (terms, grads) = afm_g_step(&g_spec, &g, &d_spec, &d, &batch, &weights)?;
            check_finite(terms.total, step, "generator loss")?;
            let norm = check_finite(grad_norm(&grads), step, "generator gradient")?;
            adam_step(&mut adam_g, &mut g, &grads, config.g_lr, config.adam_beta, config.adam_eps, config.weight_decay);
            ema.update(&g);
            counters.g_updates += 1;
            run.watch(step, phase, norm);
            row.loss_g = Some(terms.total);
            row.loss_g_adv = Some(terms.adv);
            row.loss_g_ot = Some(terms.ot);
            row.grad_norm_g = Some(norm);
        } else {
            let (terms, grads) = afm_d_step(&g_spec, &g, &d_spec, &d, &batch, &weights)?;
            check_finite(terms.total, step, "discriminator loss")?;
            let norm = check_finite(grad_norm(&grads), step, "discriminator gradient")?;
            adam_step(&mut adam_d, &mut d, &grads, config.d_lr, config.adam_beta, config.adam_eps, config.weight_decay);
            if phase == Phase::Warmup {
                counters.warmup_d += 1;
            } else {
                counters.d_updates += 1;
            }
            run.watch(step, phase, norm);
            run.d_adv(terms.adv);
            row.loss_d_adv = Some(terms.adv);
            row.loss_d_cp = Some(terms.cp);
            row.d_logit_real_mean = Some(terms.real_logit_mean);
            row.d_logit_fake_mean = Some(terms.fake_logit_mean);
            row.grad_norm_d = Some(norm);
        }
        run.record(row)?;
        let snapshot = || TrainState {
            step,
            g: g.clone(),
            d: Some(d.clone()),
            ema: ema.clone(),
            adam_g: adam_g.clone(),
            adam_d: Some(adam_d.clone()),
            counters,
            rng: RngState::capture(&rng),
        };
        run.after_update(&g_spec, snapshot, &ema.shadow, step)?;
    }
    let trailing = run.trailing_d_adv();
    Ok(TrainOutcome {
        state: TrainState {
            step: config.total_steps,
            g,
            d: Some(d),
            ema,
            adam_g,
            adam_d: Some(adam_d),
            counters,
            rng: RngState::capture(&rng),
        },
        g_spec,
        d_spec: Some(d_spec),
        log: run.log,
        spikes: run.spikes,
        trailing_d_adv: trailing,
    })
}

/// Runs whichever loop `config.objective` names. `init_g` is only accepted
/// for the continuous adversarial objective.
pub fn train(
    config: &TrainConfig,
    init_g: Option<&Parameters>,
    reporting: &Reporting,
    monitor: &mut dyn Monitor,
) -> Result<TrainOutcome> {
    match (config.objective, init_g) {
        (Objective::Cafm, _) => train_cafm(config, init_g, reporting, monitor),
        (_, Some(_)) => Err(TrainError::Config("an initial generator is only used by cafm".into())),
        (Objective::Fm, None) => train_fm(config, reporting, monitor),
        (Objective::Afm, None) => train_afm(config, reporting, monitor),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(objective: Objective, dataset: &str, steps: usize) -> TrainConfig {
        TrainConfig {
            batch: 32,
            model: ModelConfig {
                g_hidden: vec![16, 16],
                d_hidden: vec![16, 16],
                time_embed_dim: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::new(objective, dataset, steps)
        }
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut p = Parameters::new();
        p.insert("w", Tensor::scalar(1.0));
        let mut state = AdamState::new(&p);
        let mut g = GradientMap::new();
        g.insert("w".into(), Tensor::scalar(4.0));
        adam_step(&mut state, &mut p, &g, 0.1, [0.0, 0.95], 1e-8, 0.0);
        // m̂ = 4, v̂ = 16, update = −0.1·4/(4 + ε).
        let expected = 1.0 - 0.1 * 4.0 / (4.0 + 1e-8);
        assert_eq!(p.get("w").unwrap().item(), expected);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = Parameters::new();
        p.insert("w", Tensor::row(&[0.5, -2.0]));
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let g = GradientMap::new();
        for _ in 0..3 {
            adam_step(&mut state, &mut p, &g, 0.1, [0.9, 0.999], 1e-8, 0.0);
        }
        assert_eq!(p, before);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn adam_momentum_is_gradient_when_beta1_is_zero() {
        let mut p = Parameters::new();
        p.insert("w", Tensor::row(&[0.0, 0.0]));
        let mut state = AdamState::new(&p);
        for k in 0..4 {
            let mut g = GradientMap::new();
            let grad = Tensor::row(&[k as f64, -(k as f64) * 0.5 + 1.0]);
            g.insert("w".into(), grad.clone());
            adam_step(&mut state, &mut p, &g, 0.01, [0.0, 0.95], 1e-8, 0.0);
            assert_eq!(state.m.get("w").unwrap(), &grad);
        }
    }

    #[test]
    fn adam_decoupled_weight_decay() {
        let mut p = Parameters::new();
        p.insert("w", Tensor::scalar(2.0));
        let mut state = AdamState::new(&p);
        let mut g = GradientMap::new();
        g.insert("w".into(), Tensor::scalar(0.0));
        adam_step(&mut state, &mut p, &g, 0.1, [0.0, 0.95], 1e-8, 0.5);
        assert!((p.get("w").unwrap().item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn piecewise_schedules() {
        let mut c = TrainConfig::new(Objective::Cafm, "gm1d2", 100);
        c.weights.lambda_ot = 0.5;
        c.schedules.lambda_ot = vec![(10, 1.0), (50, 0.0)];
        c.schedules.n = vec![(20, 8)];
        assert_eq!(c.lambda_ot_at(0), 0.5);
        assert_eq!(c.lambda_ot_at(10), 1.0);
        assert_eq!(c.lambda_ot_at(49), 1.0);
        assert_eq!(c.lambda_ot_at(50), 0.0);
        assert_eq!(c.n_at(19), 16);
        assert_eq!(c.n_at(20), 8);
        c.validate().unwrap();
        c.schedules.n = vec![(20, 8), (20, 4)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn posttrain_defaults() {
        let c = TrainConfig::posttrain("ring8", 1000);
        assert_eq!(c.n, 16);
        assert_eq!(c.weights.lambda_ot, 0.0);
        assert_eq!(c.weights.lambda_cp, 0.001);
        assert_eq!(c.ema_decay, 0.99);
        assert_eq!(c.adam_beta, [0.0, 0.95]);
        assert_eq!(c.weight_decay, 0.0);
        assert_eq!(c.time_sampler, TimeSampler::uniform());
        assert_eq!(c.g_lr, 1e-5);
    }

    #[test]
    fn config_rejects_bad_values_and_wrong_loop() {
        let mut c = small(Objective::Fm, "gm1d2", 5);
        c.ema_decay = 1.0;
        assert!(c.validate().is_err());
        let c = small(Objective::Fm, "nope", 5);
        assert!(matches!(c.validate(), Err(TrainError::Oracle(_))));
        let c = small(Objective::Fm, "gm1d2", 5);
        assert!(train_cafm(&c, None, &Reporting::default(), &mut Silent).is_err());
    }

    #[test]
    fn cafm_update_accounting() {
        let mut c = small(Objective::Cafm, "gm1d2", 170 + 7);
        c.d_warmup_steps = 7;
        let out = train_cafm(&c, None, &Reporting::default(), &mut Silent).unwrap();
        assert_eq!(
            out.state.counters,
            Counters {
                warmup_d: 7,
                d_updates: 160,
                g_updates: 10
            }
        );
        let g_rows = out.log.iter().filter(|r| r.phase == Phase::G).count();
        assert_eq!(g_rows, 10);
        // The first G-update follows warm-up and 16 D-updates.
        let first_g = out.log.iter().find(|r| r.phase == Phase::G).unwrap().step;
        assert_eq!(first_g, 7 + 17);
    }

    #[test]
    fn scheduled_n_changes_the_ratio() {
        let mut c = small(Objective::Cafm, "gm1d2", 34 + 18);
        c.schedules.n = vec![(34, 2)];
        let out = train_cafm(&c, None, &Reporting::default(), &mut Silent).unwrap();
        // Two cycles of 17, then six cycles of 3.
        assert_eq!(out.state.counters.g_updates, 2 + 6);
        assert_eq!(out.state.counters.d_updates, 32 + 12);
    }

    #[test]
    fn warmup_leaves_generator_untouched() {
        let mut c = small(Objective::Cafm, "ring8", 12);
        c.d_warmup_steps = 12;
        c.d_lr = 1e-2;
        let init = c
            .model
            .generator_spec(&Dataset::preset("ring8").unwrap(), Objective::Cafm)
            .init(99)
            .unwrap();
        let out = train_cafm(&c, Some(&init), &Reporting::default(), &mut Silent).unwrap();
        assert_eq!(out.state.g.max_abs_diff(&init), 0.0);
        assert_eq!(out.state.ema.shadow, init);
        assert_eq!(out.state.counters.warmup_d, 12);
        let d0 = c
            .model
            .discriminator_spec(&Dataset::preset("ring8").unwrap())
            .init_from(&mut substream(c.seed, Stream::Init, 1))
            .unwrap();
        assert!(out.state.d.unwrap().max_abs_diff(&d0) > 0.0);
    }

    #[test]
    fn init_layout_mismatch_names_parameter() {
        let c = small(Objective::Cafm, "gm1d2", 1);
        let mut p = c
            .model
            .generator_spec(&Dataset::preset("gm1d2").unwrap(), Objective::Cafm)
            .init(0)
            .unwrap();
        *p.get_mut("layer1.bias").unwrap() = Tensor::zeros(1, 3);
        match train_cafm(&c, Some(&p), &Reporting::default(), &mut Silent) {
            Err(TrainError::InitMismatch(name)) => assert_eq!(name, "layer1.bias"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ema_follows_unrolled_recursion() {
        let mut c = small(Objective::Cafm, "gm1d2", 3 * 3);
        c.n = 2;
        c.ema_decay = 0.9;
        c.d_lr = 1e-2;
        c.g_lr = 1e-2;
        // Record G after every G-update via checkpoints.
        struct Grab(Vec<Parameters>);
        impl Monitor for Grab {
            fn wants_checkpoint(&self, step: usize) -> bool {
                step % 3 == 0
            }
            fn checkpoint(&mut self, state: &TrainState) -> Result<(), String> {
                self.0.push(state.g.clone());
                Ok(())
            }
        }
        let mut grab = Grab(Vec::new());
        let out = train_cafm(&c, None, &Reporting::default(), &mut grab).unwrap();
        let init = c
            .model
            .generator_spec(&Dataset::preset("gm1d2").unwrap(), Objective::Cafm)
            .init(c.seed)
            .unwrap();
        let mut shadow = init;
        for g in &grab.0 {
            for ((_, s), (_, p)) in shadow.iter_mut().zip(g.iter()) {
                *s = s.scale(0.9).add(&p.scale(0.1));
            }
        }
        assert_eq!(grab.0.len(), 3);
        assert!(out.state.ema.shadow.max_abs_diff(&shadow) < 1e-12);
        assert!(out.state.g.max_abs_diff(&grab.0[0]) > 0.0);
    }

    #[test]
    fn runs_are_deterministic() {
        for objective in [Objective::Fm, Objective::Cafm, Objective::Afm] {
            let mut c = small(objective, "ring8-cond", 20);
            c.n = 3;
            let reporting = Reporting {
                log_every: 1,
                eval: Some(EvalSettings {
                    every: 10,
                    samples: 64,
                    sampler: SamplerConfig::new(SamplerKind::Euler, 4),
                    afm_steps: 2,
                    field_t_draws: 4,
                    field_x_draws: 16,
                }),
            };
            let a = train(&c, None, &reporting, &mut Silent).unwrap();
            let b = train(&c, None, &reporting, &mut Silent).unwrap();
            assert_eq!(a.log, b.log);
            assert_eq!(a.state, b.state);
            assert_eq!(a.log.iter().filter(|r| r.phase == Phase::Eval).count(), 2);
        }
    }

    #[test]
    fn fm_ignores_loss_weights() {
        let a = small(Objective::Fm, "gm1d2", 10);
        let mut b = a.clone();
        b.weights = LossWeights {
            lambda_cp: 3.0,
            lambda_ot: 2.0,
            lambda_gp: 0.0,
        };
        let ra = train_fm(&a, &Reporting::default(), &mut Silent).unwrap();
        let rb = train_fm(&b, &Reporting::default(), &mut Silent).unwrap();
        assert_eq!(ra.log, rb.log);
    }

    #[test]
    fn afm_losses_stay_at_ln2_with_frozen_zero_discriminator() {
        let mut c = small(Objective::Afm, "gm1d2", 30);
        c.n = 2;
        c.d_lr = 0.0;
        c.g_lr = 1e-2;
        c.weights = LossWeights {
            lambda_cp: 0.0,
            lambda_ot: 0.0,
            lambda_gp: 0.0,
        };
        let out = train_afm(&c, &Reporting::default(), &mut Silent).unwrap();
        let ln2 = std::f64::consts::LN_2;
        for row in &out.log {
            if let Some(l) = row.loss_d_adv.or(row.loss_g_adv) {
                assert!((l - ln2).abs() < 1e-15, "step {}: {l}", row.step);
            }
        }
    }

    #[test]
    fn metrics_rows_have_every_column() {
        let mut row = MetricsRow::new(3, Phase::D);
        row.loss_d_adv = Some(0.25);
        let f = row.fields();
        assert_eq!(f.len(), METRICS_COLUMNS.len());
        assert_eq!(f[0], "3");
        assert_eq!(f[1], "d");
        assert_eq!(f[3], "0.25");
        assert!(f[2].is_empty());
    }

    #[test]
    fn spike_watch_flags_outliers() {
        let mut w = SpikeWatch::new();
        for i in 0..50 {
            assert!(w.observe(1.0 + 0.01 * i as f64).is_none());
        }
        assert!(w.observe(100.0).is_some());
        assert!(w.observe(1.2).is_none());
    }

    #[test]
    fn fm_learns_standard_gaussian_field() {
        // 1-D standard Gaussian: the exact field is v = x_t·(2t − 1)/c(t)
        // with c(t) = (1 − t)² + t².
        let mut c = small(Objective::Fm, "gauss1d", 1500);
        c.batch = 128;
        c.g_lr = 3e-3;
        c.adam_beta = [0.9, 0.99];
        let reporting = Reporting {
            log_every: 100,
            eval: Some(EvalSettings {
                samples: 500,
                field_t_draws: 32,
                field_x_draws: 128,
                ..EvalSettings::default()
            }),
        };
        let out = train_fm(&c, &reporting, &mut Silent).unwrap();
        let last = out.log.last().unwrap();
        assert_eq!(last.phase, Phase::Eval);
        let mse = last.field_rel_mse.unwrap();
        assert!(mse <= 0.05, "field relative MSE {mse}");
    }
}
