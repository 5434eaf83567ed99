//! Generation by integrating a velocity field from noise (`t = 1`) to data
//! (`t = 0`).
//!
//! Along the linear path `dx_t/dt = v`, so walking time downwards by `h`
//! moves the state by `−h·v`.

use crate::models::{g_forward, MlpSpec, ModelError};
use crate::objectives::{afm_generate, ObjectiveError};
use crate::oracle::{velocity_to_score, GaussianMixture, OracleError};
use crate::params::Parameters;
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("non-finite state after step {step} at t = {t}")]
    NonFinite { step: usize, t: f64 },
    #[error("invalid time schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

/// A batched velocity field: every row of `x` is evaluated at the same `t`.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

/// Adapts a closure into a field.
pub struct FnField<F>(pub F);

impl<F: Fn(&Tensor, f64) -> Tensor> VelocityField for FnField<F> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok((self.0)(x, t))
    }
}

/// The exact marginal velocity of a mixture.
pub struct OracleField<'a>(pub &'a GaussianMixture);

impl VelocityField for OracleField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok(self.0.marginal_velocity(x, t)?)
    }
}

/// A trained velocity network, optionally with one class label per row.
pub struct ModelField<'a> {
    pub spec: &'a MlpSpec,
    pub params: &'a Parameters,
    pub classes: Option<Vec<usize>>,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let ts = vec![t; x.rows()];
        Ok(g_forward(self.spec, self.params, x, &ts, self.classes.as_deref())?)
    }
}

/// Classifier-free guidance: `v_u + w·(v_c − v_u)` for `t` inside the
/// interval, `v_c` outside it. `w = 1` returns `v_c` untouched.
pub struct CfgField<'a> {
    pub cond: &'a dyn VelocityField,
    pub uncond: &'a dyn VelocityField,
    pub scale: f64,
    pub interval: [f64; 2],
}

pub fn cfg_wrap<'a>(
    cond: &'a dyn VelocityField,
    uncond: &'a dyn VelocityField,
    scale: f64,
    interval: [f64; 2],
) -> CfgField<'a> {
    CfgField {
        cond,
        uncond,
        scale,
        interval,
    }
}

impl VelocityField for CfgField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let vc = self.cond.velocity(x, t)?;
        if self.scale == 1.0 || t < self.interval[0] || t > self.interval[1] {
            return Ok(vc);
        }
        let vu = self.uncond.velocity(x, t)?;
        let w = self.scale;
        Ok(vu.zip_map(&vc, |u, c| u + w * (c - u)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Euler,
    Heun,
    Sde,
}

impl std::str::FromStr for SamplerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "euler" => Ok(Self::Euler),
            "heun" => Ok(Self::Heun),
            "sde" => Ok(Self::Sde),
            other => Err(format!("unknown sampler {other:?} (expected euler, heun or sde)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    #[serde(default = "one")]
    pub t_start: f64,
    #[serde(default)]
    pub t_end: f64,
    #[serde(default = "default_floor")]
    pub sde_t_floor: f64,
    #[serde(default = "one")]
    pub sde_diffusion_scale: f64,
    #[serde(default)]
    pub cfg_scale: Option<f64>,
    #[serde(default = "full_interval")]
    pub cfg_interval: [f64; 2],
}

fn one() -> f64 {
    1.0
}

fn default_floor() -> f64 {
    crate::oracle::SCORE_T_FLOOR
}

fn full_interval() -> [f64; 2] {
    [0.0, 1.0]
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, steps: usize) -> Self {
        Self {
            kind,
            steps,
            t_start: 1.0,
            t_end: 0.0,
            sde_t_floor: default_floor(),
            sde_diffusion_scale: 1.0,
            cfg_scale: None,
            cfg_interval: full_interval(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SamplerError::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.t_end) || !(self.t_start <= 1.0 && self.t_start > self.t_end) {
            return bad(format!("need 0 <= t_end < t_start <= 1, got {} -> {}", self.t_start, self.t_end));
        }
        if !(self.sde_t_floor > 0.0) || !(self.sde_diffusion_scale >= 0.0) {
            return bad("sde_t_floor must be positive and sde_diffusion_scale non-negative".into());
        }
        if matches!(self.cfg_scale, Some(w) if !(w >= 0.0)) {
            return bad("cfg_scale must be non-negative".into());
        }
        let [lo, hi] = self.cfg_interval;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("cfg_interval [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"));
        }
        Ok(())
    }

    /// Time at the start of step `i` and the step size.
    fn grid(&self) -> (f64, impl Fn(usize) -> f64 + '_) {
        let h = (self.t_start - self.t_end) / self.steps as f64;
        (h, move |i: usize| self.t_start - i as f64 * h)
    }
}

fn finite(x: &Tensor, step: usize, t: f64) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(SamplerError::NonFinite { step, t })
    }
}

/// First-order steps `x ← x − h·v(x, t)`.
pub fn euler_ode(field: &dyn VelocityField, x1: &Tensor, config: &SamplerConfig) -> Result<Tensor> {
    config.validate()?;
    let (h, time) = config.grid();
    let mut x = x1.clone();
    for i in 0..config.steps {
        let t = time(i);
        let v = field.velocity(&x, t)?;
        x.add_scaled(&v, -h);
        finite(&x, i, t)?;
    }
    Ok(x)
}

/// Trapezoidal predictor-corrector steps.
pub fn heun_ode(field: &dyn VelocityField, x1: &Tensor, config: &SamplerConfig) -> Result<Tensor> {
    config.validate()?;
    let (h, time) = config.grid();
    let mut x = x1.clone();
    for i in 0..config.steps {
        let t = time(i);
        let k1 = field.velocity(&x, t)?;
        let mut pred = x.clone();
        pred.add_scaled(&k1, -h);
        let k2 = field.velocity(&pred, time(i + 1))?;
        x.add_scaled(&k1.add(&k2), -0.5 * h);
        finite(&x, i, t)?;
    }
    Ok(x)
}

/// Euler–Maruyama on the reverse-time SDE with diffusion `w(t) = scale·t`:
/// `x ← x + h·(−v + (w/2)·s) + sqrt(w·h)·ξ`, where the score `s` comes from
/// the velocity. Steps starting below `sde_t_floor` are plain Euler steps.
pub fn euler_maruyama_sde(
    field: &dyn VelocityField,
    x1: &Tensor,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    config.validate()?;
    let (h, time) = config.grid();
    let mut x = x1.clone();
    for i in 0..config.steps {
        let t = time(i);
        let v = field.velocity(&x, t)?;
        let w = config.sde_diffusion_scale * t;
        if w > 0.0 && t >= config.sde_t_floor {
            let s = velocity_to_score(&v, &x, t, config.sde_t_floor)?;
            let noise = (w * h).sqrt();
            for ((xi, vi), si) in x.data_mut().iter_mut().zip(v.data()).zip(s.data()) {
                let xi_noise: f64 = StandardNormal.sample(rng);
                *xi += h * (-vi + 0.5 * w * si) + noise * xi_noise;
            }
        } else {
            x.add_scaled(&v, -h);
        }
        finite(&x, i, t)?;
    }
    Ok(x)
}

/// Dispatches on `config.kind`; the generator is only read by the SDE.
pub fn sample(field: &dyn VelocityField, x1: &Tensor, config: &SamplerConfig, rng: &mut Rng) -> Result<Tensor> {
    match config.kind {
        SamplerKind::Euler => euler_ode(field, x1, config),
        SamplerKind::Heun => heun_ode(field, x1, config),
        SamplerKind::Sde => euler_maruyama_sde(field, x1, config, rng),
    }
}

/// `steps + 1` evenly spaced times `τ_0 = 0 < … < τ_S = 1`.
pub fn uniform_schedule(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Iterates `x ← step_fn(x, τ_i, τ_{i−1})` for `i = S … 1`. `tau` lists
/// `τ_0 = 0 < τ_1 < … < τ_S = 1`.
pub fn afm_difference_sampler(
    step_fn: &dyn Fn(&Tensor, f64, f64) -> Result<Tensor>,
    x1: &Tensor,
    tau: &[f64],
) -> Result<Tensor> {
    if tau.len() < 2 || tau[0] != 0.0 || *tau.last().expect("non-empty") != 1.0 {
        return Err(SamplerError::Schedule("need at least two times running from 0 to 1".into()));
    }
    if tau.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SamplerError::Schedule("times must be strictly increasing".into()));
    }
    let mut x = x1.clone();
    for i in (1..tau.len()).rev() {
        x = step_fn(&x, tau[i], tau[i - 1])?;
        finite(&x, tau.len() - 1 - i, tau[i - 1])?;
    }
    Ok(x)
}

/// Difference-equation sampling with a trained two-time generator.
pub fn afm_model_sample(
    spec: &MlpSpec,
    params: &Parameters,
    x1: &Tensor,
    steps: usize,
    classes: Option<&[usize]>,
) -> Result<Tensor> {
    let step = |x: &Tensor, s: f64, t: f64| -> Result<Tensor> {
        let rows = x.rows();
        Ok(afm_generate(spec, params, x, &vec![s; rows], &vec![t; rows], classes)?)
    };
    afm_difference_sampler(&step, x1, &uniform_schedule(steps))
}
