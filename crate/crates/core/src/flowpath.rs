//! Interpolation paths between data and noise, timestep distributions, and
//! training batch construction.

use crate::oracle::Dataset;
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("time {0} outside [0, 1]")]
    Time(f64),
    #[error("x has shape {x:?} but z has shape {z:?}")]
    Shape { x: Vec<usize>, z: Vec<usize> },
    #[error("{len} times for {rows} rows")]
    TimeCount { len: usize, rows: usize },
    #[error("invalid time sampler: {0}")]
    Sampler(String),
    #[error("cfg dropout probability {0} outside [0, 1]")]
    Dropout(f64),
}

/// `x_t = A(t)·x + B(t)·z` together with the time derivatives of `A` and `B`.
#[derive(Clone, Copy)]
pub struct FlowPath {
    pub a: fn(f64) -> f64,
    pub b: fn(f64) -> f64,
    pub da: fn(f64) -> f64,
    pub db: fn(f64) -> f64,
}

impl std::fmt::Debug for FlowPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowPath").finish_non_exhaustive()
    }
}

impl FlowPath {
    /// `A = 1 − t`, `B = t`.
    pub fn linear() -> Self {
        Self {
            a: |t| 1.0 - t,
            b: |t| t,
            da: |_| -1.0,
            db: |_| 1.0,
        }
    }
}

impl Default for FlowPath {
    fn default() -> Self {
        Self::linear()
    }
}

fn check(x: &Tensor, z: &Tensor, t: &[f64]) -> Result<(), FlowError> {
    if x.shape() != z.shape() {
        return Err(FlowError::Shape {
            x: x.shape().to_vec(),
            z: z.shape().to_vec(),
        });
    }
    if t.len() != x.rows() {
        return Err(FlowError::TimeCount {
            len: t.len(),
            rows: x.rows(),
        });
    }
    match t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        Some(&bad) => Err(FlowError::Time(bad)),
        None => Ok(()),
    }
}

fn rowwise(x: &Tensor, z: &Tensor, t: &[f64], fa: fn(f64) -> f64, fb: fn(f64) -> f64) -> Tensor {
    let cols = x.cols();
    let mut out = x.clone();
    for (r, &ti) in t.iter().enumerate() {
        let (a, b) = (fa(ti), fb(ti));
        let zr = z.row_slice(r);
        for (o, zi) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(zr) {
            *o = a * *o + b * zi;
        }
    }
    out
}

/// `A(t)·x + B(t)·z` row by row, with one time per row.
pub fn interpolate(path: &FlowPath, x: &Tensor, z: &Tensor, t: &[f64]) -> Result<Tensor, FlowError> {
    check(x, z, t)?;
    Ok(rowwise(x, z, t, path.a, path.b))
}

/// `A'(t)·x + B'(t)·z` row by row.
pub fn conditional_velocity(path: &FlowPath, x: &Tensor, z: &Tensor, t: &[f64]) -> Result<Tensor, FlowError> {
    check(x, z, t)?;
    Ok(rowwise(x, z, t, path.da, path.db))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeKind {
    Uniform,
    LogitNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSampler {
    pub kind: TimeKind,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default)]
    pub t_min: f64,
    #[serde(default = "one")]
    pub t_max: f64,
}

fn one() -> f64 {
    1.0
}

impl TimeSampler {
    pub fn uniform() -> Self {
        Self {
            kind: TimeKind::Uniform,
            mu: 0.0,
            sigma: 1.0,
            t_min: 0.0,
            t_max: 1.0,
        }
    }

    /// `sigmoid(n)` with `n ~ N(mu, sigma²)`.
    pub fn logit_normal(mu: f64, sigma: f64) -> Self {
        Self {
            kind: TimeKind::LogitNormal,
            mu,
            sigma,
            t_min: 0.0,
            t_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.sigma > 0.0) || !self.mu.is_finite() {
            return Err(FlowError::Sampler(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.t_min) || !(self.t_max > self.t_min && self.t_max <= 1.0) {
            return Err(FlowError::Sampler(format!(
                "need 0 <= t_min < t_max <= 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    /// Logit-normal draws before clamping, for inspection.
    pub fn raw_logit_normal(&self, rng: &mut Rng) -> f64 {
        let n = Normal::new(self.mu, self.sigma).expect("validated sigma").sample(rng);
        crate::autodiff::sigmoid(n)
    }

    fn draw(&self, rng: &mut Rng) -> f64 {
        match self.kind {
            TimeKind::Uniform => self.t_min + (self.t_max - self.t_min) * rng.random::<f64>(),
            TimeKind::LogitNormal => self.raw_logit_normal(rng).clamp(self.t_min, self.t_max),
        }
    }
}

/// `batch` independent timesteps.
pub fn sample_time(sampler: &TimeSampler, rng: &mut Rng, batch: usize) -> Vec<f64> {
    (0..batch).map(|_| sampler.draw(rng)).collect()
}

/// Standard normal noise of the given shape.
pub fn sample_noise(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub x: Tensor,
    pub z: Tensor,
    pub t: Vec<f64>,
    /// Class labels when the dataset is labelled; dropped labels are the null
    /// class.
    pub c: Option<Vec<usize>>,
    pub x_t: Tensor,
    pub v_bar: Tensor,
}

impl TrainingBatch {
    pub fn t_column(&self) -> Tensor {
        Tensor::column(&self.t)
    }
}

/// Draws data and noise independently, picks timesteps, and fills in the
/// interpolant and conditional velocity.
pub fn sample_batch(
    dataset: &Dataset,
    path: &FlowPath,
    sampler: &TimeSampler,
    rng: &mut Rng,
    batch: usize,
    cfg_dropout_prob: f64,
) -> Result<TrainingBatch, FlowError> {
    if !(0.0..=1.0).contains(&cfg_dropout_prob) {
        return Err(FlowError::Dropout(cfg_dropout_prob));
    }
    sampler.validate()?;
    let (x, labels) = dataset.mixture.sample_labelled(rng, batch);
    let z = sample_noise(rng, batch, dataset.dim());
    let t = sample_time(sampler, rng, batch);
    let c = dataset.null_class().map(|null| {
        labels
            .into_iter()
            .map(|k| if rng.random::<f64>() < cfg_dropout_prob { null } else { k })
            .collect()
    });
    let x_t = interpolate(path, &x, &z, &t)?;
    let v_bar = conditional_velocity(path, &x, &z, &t)?;
    Ok(TrainingBatch { x, z, t, c, x_t, v_bar })
}

/// A batch for the discrete-time adversarial baseline: a noisier point `x_s`
/// to be carried to an earlier time `t < s`, plus independent real samples of
/// the marginal at `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AfmBatch {
    pub x_s: Tensor,
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    pub real_xt: Tensor,
    pub c: Option<Vec<usize>>,
}

/// Draws `s ~ U(gap, 1)` and `t ~ U(0, s − gap)` per row.
pub fn sample_afm_batch(
    dataset: &Dataset,
    path: &FlowPath,
    rng: &mut Rng,
    batch: usize,
    gap: f64,
) -> Result<AfmBatch, FlowError> {
    if !(gap > 0.0 && gap < 1.0) {
        return Err(FlowError::Sampler(format!("time gap must lie in (0, 1), got {gap}")));
    }
    let s: Vec<f64> = (0..batch).map(|_| gap + (1.0 - gap) * rng.random::<f64>()).collect();
    let t: Vec<f64> = s.iter().map(|&si| (si - gap) * rng.random::<f64>()).collect();
    let (x, labels) = dataset.mixture.sample_labelled(rng, batch);
    let z = sample_noise(rng, batch, dataset.dim());
    let x_s = interpolate(path, &x, &z, &s)?;
    // Real samples at t come from the same class but an independent pair.
    let mut real_x = Tensor::zeros(batch, dataset.dim());
    for (r, &k) in labels.iter().enumerate() {
        let one = if dataset.conditional {
            dataset.mixture.sample_component(rng, k, 1)
        } else {
            dataset.mixture.sample(rng, 1)
        };
        for (d, v) in one.data().iter().enumerate() {
            real_x.set(r, d, *v);
        }
    }
    let real_z = sample_noise(rng, batch, dataset.dim());
    let real_xt = interpolate(path, &real_x, &real_z, &t)?;
    let c = dataset.conditional.then_some(labels);
    Ok(AfmBatch { x_s, s, t, real_xt, c })
}
