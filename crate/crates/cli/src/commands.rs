//! The `train`, `posttrain`, `sample` and `eval` commands.

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::RunConfig;
use crate::io::{create_dir, write_atomic, write_json};
use crate::{CliError, Result};
use cafm::eval::{field_rel_mse, sample_distance_report, FieldErrorReport, SampleDistanceReport};
use cafm::flowpath::sample_noise;
use cafm::models::MlpSpec;
use cafm::oracle::Dataset;
use cafm::rng::{stream, Rng, Stream};
use cafm::samplers::{afm_model_sample, cfg_wrap, sample, ModelField, OracleField, SamplerConfig, SamplerKind, VelocityField};
use cafm::trainer::{
    self, Counters, MetricsRow, Monitor, Objective, Phase, Spike, TrainState, METRICS_COLUMNS,
};
use cafm::{Parameters, Tensor};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::path::{Path, PathBuf};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";
pub const EVAL_FILE: &str = "eval.json";
pub const FIELD_FILE: &str = "field.csv";

/// Times of the field dump.
pub const GRID_TIMES: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Points per axis of the field dump.
pub fn grid_points(dim: usize) -> usize {
    if dim == 1 {
        101
    } else {
        41
    }
}

pub fn intermediate_checkpoint_name(step: usize) -> String {
    format!("checkpoint-{step}.json")
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub init: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub objective: CheckpointKind,
    pub steps: usize,
    pub counters: Counters,
    /// Discriminator updates per generator update, outside warm-up.
    pub d_to_g_ratio: Option<f64>,
    pub trailing_d_adv: Option<f64>,
    pub spikes: Vec<Spike>,
    pub final_field_rel_mse: Option<f64>,
    pub final_energy_distance: Option<f64>,
    pub config_sha256: String,
}

/// Loads a run config and applies command-line overrides.
pub fn load_config(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    if let Some(out) = out {
        config.out_dir = out.to_path_buf();
    }
    Ok(config)
}

/// Streams metric rows to CSV and writes checkpoints at a fixed cadence.
struct FileMonitor<'a> {
    writer: csv::Writer<File>,
    config: &'a RunConfig,
    g_spec: MlpSpec,
    d_spec: Option<MlpSpec>,
}

impl Monitor for FileMonitor<'_> {
    fn row(&mut self, row: &MetricsRow) -> Result<(), String> {
        self.writer.write_record(row.fields()).map_err(|e| e.to_string())?;
        self.writer.flush().map_err(|e| e.to_string())
    }

    fn wants_checkpoint(&self, step: usize) -> bool {
        let every = self.config.checkpoint_every;
        every > 0 && step % every == 0 && step < self.config.train.total_steps
    }

    fn checkpoint(&mut self, state: &TrainState) -> Result<(), String> {
        let ck = Checkpoint::from_state(self.config, &self.g_spec, self.d_spec.as_ref(), state);
        let path = self.config.out_dir.join(intermediate_checkpoint_name(state.step));
        ck.save(&path).map_err(|e| e.to_string())
    }
}

/// Trains from scratch, or post-trains when the config names an init
/// checkpoint.
pub fn cmd_train(args: &TrainArgs) -> Result<RunSummary> {
    let mut config = load_config(&args.config, args.seed, args.out.as_deref())?;
    if let Some(init) = &args.init {
        config.init = Some(init.clone());
    }
    if config.init.is_some() {
        return posttrain(config);
    }
    run(&config, None)
}

/// Adversarial post-training from a flow-matching checkpoint. The generator
/// starts from that checkpoint's EMA weights.
pub fn cmd_posttrain(args: &TrainArgs) -> Result<RunSummary> {
    let mut config = load_config(&args.config, args.seed, args.out.as_deref())?;
    if let Some(init) = &args.init {
        config.init = Some(init.clone());
    }
    if config.init.is_none() {
        return Err(CliError::Usage("posttrain needs --init <fm checkpoint> or `init` in the config".into()));
    }
    posttrain(config)
}

fn posttrain(config: RunConfig) -> Result<RunSummary> {
    let init_path = config.init.clone().expect("caller checked");
    if config.train.objective != Objective::Cafm {
        return Err(CliError::Config {
            path: "train.objective".into(),
            message: format!("post-training runs the cafm objective, got {:?}", config.train.objective),
        });
    }
    let init = Checkpoint::load(&init_path)?;
    if init.objective != CheckpointKind::Fm {
        return Err(CliError::Checkpoint(format!(
            "{}: post-training starts from an fm checkpoint, this one is {}",
            init_path.display(),
            init.objective.as_str()
        )));
    }
    let (init_spec, init_params) = init.generator().expect("verified fm checkpoint has a generator");
    let dataset = Dataset::preset(&config.train.dataset).map_err(CliError::lib)?;
    let g_spec = config.model_spec(&dataset);
    let expected = g_spec.init(0).map_err(CliError::lib)?;
    if let Some(name) = expected.first_layout_mismatch(init_params) {
        return Err(trainer::TrainError::InitMismatch(name).into());
    }
    if *init_spec != g_spec {
        return Err(CliError::Checkpoint(format!(
            "{}: generator spec {init_spec:?} differs from the configured {g_spec:?}",
            init_path.display()
        )));
    }
    let params = init_params.clone();
    run(&config, Some(&params))
}

fn run(config: &RunConfig, init_g: Option<&Parameters>) -> Result<RunSummary> {
    let dataset = Dataset::preset(&config.train.dataset).map_err(CliError::lib)?;
    let out = &config.out_dir;
    create_dir(out)?;
    write_atomic(&out.join(CONFIG_FILE), format!("{}\n", config.to_json()).as_bytes())?;
    let metrics = out.join(METRICS_FILE);
    let file = File::create(&metrics).map_err(|e| CliError::io(&metrics, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(METRICS_COLUMNS)?;
    writer.flush().map_err(|e| CliError::io(&metrics, e))?;
    let d_spec = (config.train.objective != Objective::Fm).then(|| config.train.model.discriminator_spec(&dataset));
    let mut monitor = FileMonitor {
        writer,
        config,
        g_spec: config.model_spec(&dataset),
        d_spec,
    };
    let outcome = trainer::train(&config.train, init_g, &config.reporting(), &mut monitor)?;
    let ck = Checkpoint::from_state(config, &outcome.g_spec, outcome.d_spec.as_ref(), &outcome.state);
    ck.save(&out.join(CHECKPOINT_FILE))?;

    let last_eval = outcome.log.iter().rev().find(|r| r.phase == Phase::Eval);
    let c = outcome.state.counters;
    let summary = RunSummary {
        objective: config.train.objective.into(),
        steps: outcome.state.step,
        counters: c,
        d_to_g_ratio: (c.d_updates > 0 && c.g_updates > 0).then(|| c.d_updates as f64 / c.g_updates as f64),
        trailing_d_adv: outcome.trailing_d_adv,
        spikes: outcome.spikes,
        final_field_rel_mse: last_eval.and_then(|r| r.field_rel_mse),
        final_energy_distance: last_eval.and_then(|r| r.energy_distance),
        config_sha256: config.hash(),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub count: usize,
    pub out: PathBuf,
    pub sampler: Option<SamplerKind>,
    pub steps: Option<usize>,
    pub cfg: Option<f64>,
    pub seed: Option<u64>,
    /// Also write every intermediate state to this CSV.
    pub trajectory: Option<PathBuf>,
}

impl SampleArgs {
    pub fn new(checkpoint: impl Into<PathBuf>, count: usize, out: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            count,
            out: out.into(),
            sampler: None,
            steps: None,
            cfg: None,
            seed: None,
            trajectory: None,
        }
    }
}

fn sampler_config(base: &SamplerConfig, kind: Option<SamplerKind>, steps: Option<usize>) -> Result<SamplerConfig> {
    let mut c = base.clone();
    if let Some(k) = kind {
        c.kind = k;
    }
    if let Some(s) = steps {
        c.steps = s;
    }
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

/// A velocity field read from a checkpoint, with per-row class labels for
/// conditional models.
enum Field<'a> {
    Oracle(OracleField<'a>),
    Model(ModelField<'a>),
}

impl VelocityField for Field<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> cafm::samplers::Result<Tensor> {
        match self {
            Field::Oracle(f) => f.velocity(x, t),
            Field::Model(f) => f.velocity(x, t),
        }
    }
}

fn velocity_field<'a>(ck: &'a Checkpoint, dataset: &'a Dataset, classes: Option<Vec<usize>>) -> Field<'a> {
    match ck.generator() {
        Some((spec, params)) => Field::Model(ModelField { spec, params, classes }),
        None => Field::Oracle(OracleField(&dataset.mixture)),
    }
}

/// Generated samples and, for conditional models, their class labels.
#[derive(Clone, Debug)]
pub struct Samples {
    pub x: Tensor,
    pub classes: Option<Vec<usize>>,
}

/// Draws `count` samples from a checkpoint on the sampler stream of `seed`.
pub fn generate(
    ck: &Checkpoint,
    count: usize,
    sampler: &SamplerConfig,
    afm_steps: usize,
    cfg: Option<f64>,
    rng: &mut Rng,
) -> Result<Samples> {
    let dataset = ck.dataset()?;
    let dim = ck.dim()?;
    let conditional = ck.is_conditional();
    if cfg.is_some() && (!conditional || ck.objective == CheckpointKind::Afm) {
        let what = match ck.objective {
            CheckpointKind::Oracle => "an oracle",
            CheckpointKind::Afm => "a two-time afm generator",
            _ => "unconditional",
        };
        return Err(CliError::CfgUnconditional(what.into()));
    }
    if count == 0 {
        return Ok(Samples {
            x: Tensor::zeros(0, dim),
            classes: conditional.then(Vec::new),
        });
    }
    let classes = conditional.then(|| dataset.mixture.sample_labelled(rng, count).1);
    let x1 = sample_noise(rng, count, dim);
    let x = if ck.objective == CheckpointKind::Afm {
        let (spec, params) = ck.generator().expect("afm checkpoint has a generator");
        afm_model_sample(spec, params, &x1, afm_steps, classes.as_deref()).map_err(CliError::lib)?
    } else {
        let cond = velocity_field(ck, &dataset, classes.clone());
        match cfg {
            Some(w) => {
                let null = ck.g_spec.as_ref().and_then(MlpSpec::null_class).expect("conditional model");
                let uncond = velocity_field(ck, &dataset, Some(vec![null; count]));
                let guided = cfg_wrap(&cond, &uncond, w, sampler.cfg_interval);
                sample(&guided, &x1, sampler, rng).map_err(CliError::lib)?
            }
            None => sample(&cond, &x1, sampler, rng).map_err(CliError::lib)?,
        }
    };
    Ok(Samples { x, classes })
}

fn coordinate_header(prefix: &str, dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("{prefix}{i}")).collect()
}

fn samples_csv(samples: &Samples) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = coordinate_header("x", samples.x.cols());
    if samples.classes.is_some() {
        header.push("class".into());
    }
    w.write_record(&header)?;
    for r in 0..samples.x.rows() {
        let mut rec: Vec<String> = samples.x.row_slice(r).iter().map(f64::to_string).collect();
        if let Some(c) = &samples.classes {
            rec.push(c[r].to_string());
        }
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| CliError::lib(e.error()))
}

/// Writes a CSV of samples with columns `x1..xn` and, for conditional models,
/// `class`.
pub fn cmd_sample(args: &SampleArgs) -> Result<Samples> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let sampler = sampler_config(&ck.config.sampler, args.sampler, args.steps)?;
    let cfg = args.cfg.or(sampler.cfg_scale);
    let afm_steps = args.steps.unwrap_or(ck.config.eval.afm_steps);
    let seed = args.seed.unwrap_or(ck.config.train.seed);
    let samples = generate(&ck, args.count, &sampler, afm_steps, cfg, &mut stream(seed, Stream::Sampler))?;
    write_atomic(&args.out, &samples_csv(&samples)?)?;
    if let Some(path) = &args.trajectory {
        let bytes = trajectory_csv(&ck, args.count, &sampler, cfg, seed)?;
        write_atomic(path, &bytes)?;
    }
    Ok(samples)
}

/// Integrates one sampler step at a time and records every state, with
/// columns `sample,step,t,x1..xn`.
fn trajectory_csv(ck: &Checkpoint, count: usize, sampler: &SamplerConfig, cfg: Option<f64>, seed: u64) -> Result<Vec<u8>> {
    if ck.objective == CheckpointKind::Afm {
        return Err(CliError::Usage("trajectories are only recorded for velocity fields".into()));
    }
    let dataset = ck.dataset()?;
    let dim = ck.dim()?;
    let mut rng = stream(seed, Stream::Sampler);
    let classes = ck.is_conditional().then(|| dataset.mixture.sample_labelled(&mut rng, count).1);
    let mut x = sample_noise(&mut rng, count, dim);
    let cond = velocity_field(ck, &dataset, classes);
    let uncond = ck
        .g_spec
        .as_ref()
        .and_then(MlpSpec::null_class)
        .map(|null| velocity_field(ck, &dataset, Some(vec![null; count])));
    let guided = match (cfg, &uncond) {
        (Some(w), Some(u)) => Some(cfg_wrap(&cond, u, w, sampler.cfg_interval)),
        _ => None,
    };
    let field: &dyn VelocityField = match &guided {
        Some(g) => g,
        None => &cond,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample".to_string(), "step".into(), "t".into()];
    header.extend(coordinate_header("x", dim));
    w.write_record(&header)?;
    let h = (sampler.t_start - sampler.t_end) / sampler.steps as f64;
    let emit = |w: &mut csv::Writer<Vec<u8>>, x: &Tensor, step: usize, t: f64| -> Result<()> {
        for r in 0..x.rows() {
            let mut rec = vec![r.to_string(), step.to_string(), t.to_string()];
            rec.extend(x.row_slice(r).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        Ok(())
    };
    emit(&mut w, &x, 0, sampler.t_start)?;
    for i in 0..sampler.steps {
        let mut one = sampler.clone();
        one.steps = 1;
        one.t_start = sampler.t_start - i as f64 * h;
        one.t_end = if i + 1 == sampler.steps { sampler.t_end } else { sampler.t_start - (i + 1) as f64 * h };
        x = sample(field, &x, &one, &mut rng).map_err(CliError::lib)?;
        emit(&mut w, &x, i + 1, one.t_end)?;
    }
    w.into_inner().map_err(|e| CliError::lib(e.error()))
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub preset: Option<String>,
    pub grid: bool,
    /// Directory for `eval.json` and `field.csv`; defaults to the
    /// checkpoint's directory.
    pub out: Option<PathBuf>,
    pub sampler: Option<SamplerKind>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

impl EvalArgs {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            preset: None,
            grid: false,
            out: None,
            sampler: None,
            steps: None,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub objective: CheckpointKind,
    pub step: usize,
    pub preset: String,
    /// Absent for two-time generators, which have no velocity field.
    pub field: Option<FieldErrorReport>,
    pub samples: SampleDistanceReport,
}

/// Field error and sample distances against `preset` (default: the
/// checkpoint's own dataset), written as JSON.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let preset = args.preset.clone().unwrap_or_else(|| ck.config.train.dataset.clone());
    let dataset = Dataset::preset(&preset).map_err(CliError::lib)?;
    let dim = ck.dim()?;
    if dim != dataset.dim() {
        return Err(CliError::DimMismatch {
            checkpoint: dim,
            preset,
            preset_dim: dataset.dim(),
        });
    }
    if args.grid && ck.objective == CheckpointKind::Afm {
        return Err(CliError::Usage("--grid needs a velocity field; afm generators have none".into()));
    }
    let settings = &ck.config.eval;
    let sampler = sampler_config(&settings.sampler, args.sampler, args.steps)?;
    let afm_steps = args.steps.unwrap_or(settings.afm_steps);
    let seed = args.seed.unwrap_or(ck.config.train.seed);
    let mut rng = stream(seed, Stream::Eval);

    let unconditional = velocity_field(&ck, &dataset, None);
    let field = match ck.objective {
        CheckpointKind::Afm => None,
        _ => Some(
            field_rel_mse(&unconditional, &dataset.mixture, settings.field_t_draws, settings.field_x_draws, &mut rng)
                .map_err(CliError::lib)?,
        ),
    };
    let (truth, labels) = dataset.mixture.sample_labelled(&mut rng, settings.samples);
    let classes = (ck.is_conditional() && dataset.conditional).then_some(labels);
    let x1 = sample_noise(&mut rng, settings.samples, dim);
    let generated = match ck.generator() {
        Some((spec, params)) if ck.objective == CheckpointKind::Afm => {
            afm_model_sample(spec, params, &x1, afm_steps, classes.as_deref()).map_err(CliError::lib)?
        }
        _ => {
            let f = velocity_field(&ck, &dataset, classes);
            sample(&f, &x1, &sampler, &mut rng).map_err(CliError::lib)?
        }
    };
    let samples = sample_distance_report(&generated, &truth, &mut rng).map_err(CliError::lib)?;
    let report = EvalReport {
        objective: ck.objective,
        step: ck.step,
        preset,
        field,
        samples,
    };

    let out = match &args.out {
        Some(d) => d.clone(),
        None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    write_json(&out.join(EVAL_FILE), &report)?;
    if args.grid {
        write_atomic(&out.join(FIELD_FILE), &field_grid_csv(&unconditional, &dataset)?)?;
    }
    Ok(report)
}

/// Half-width of the field dump box: the farthest mean coordinate plus three
/// standard deviations, and at least 3.
fn grid_half_width(dataset: &Dataset) -> f64 {
    let gm = &dataset.mixture;
    let max_sd = gm.stds().iter().copied().fold(0.0, f64::max);
    (gm.means().max_abs() + 3.0 * max_sd).max(3.0)
}

/// The grid points in row-major order (last coordinate fastest).
pub fn grid_coordinates(dataset: &Dataset) -> Tensor {
    let dim = dataset.dim();
    let n = grid_points(dim);
    let hw = grid_half_width(dataset);
    let axis: Vec<f64> = (0..n).map(|i| -hw + 2.0 * hw * i as f64 / (n - 1) as f64).collect();
    let total = n.pow(dim as u32);
    let mut x = Tensor::zeros(total, dim);
    for r in 0..total {
        let mut rem = r;
        for d in (0..dim).rev() {
            x.set(r, d, axis[rem % n]);
            rem /= n;
        }
    }
    x
}

fn field_grid_csv(model: &dyn VelocityField, dataset: &Dataset) -> Result<Vec<u8>> {
    let dim = dataset.dim();
    let x = grid_coordinates(dataset);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = coordinate_header("x", dim);
    header.push("t".into());
    header.extend(coordinate_header("model_v", dim));
    header.extend(coordinate_header("oracle_v", dim));
    w.write_record(&header)?;
    for &t in &GRID_TIMES {
        let mv = model.velocity(&x, t).map_err(CliError::lib)?;
        let ov = dataset.mixture.marginal_velocity(&x, t).map_err(CliError::lib)?;
        for r in 0..x.rows() {
            let mut rec: Vec<String> = x.row_slice(r).iter().map(f64::to_string).collect();
            rec.push(t.to_string());
            rec.extend(mv.row_slice(r).iter().map(f64::to_string));
            rec.extend(ov.row_slice(r).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.into_inner().map_err(|e| CliError::lib(e.error()))
}

/// Writes an oracle pseudo-checkpoint for `preset`.
pub fn cmd_oracle_checkpoint(preset: &str, out: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::oracle(preset)?;
    ck.save(out)?;
    Ok(ck)
}
