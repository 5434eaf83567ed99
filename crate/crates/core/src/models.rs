//! Time- and class-conditioned MLPs used for both generators and
//! discriminators.
//!
//! Input features are the data coordinates, each raw time input, a sinusoidal
//! embedding of each time input, and (when the network has classes) a learned
//! class embedding. Hidden layers are `linear → norm → SiLU`; the output layer
//! starts at zero so an untrained network is the zero function.

use crate::autodiff::{Dual, ParamVars, Tape, Var};
use crate::params::Parameters;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NORM_EPS: f64 = 1e-6;
/// Highest angular frequency of the sinusoidal time embedding.
pub const MAX_TIME_FREQUENCY: f64 = 30.0;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("class index {index} out of range for {classes} classes")]
    Class { index: usize, classes: usize },
    #[error("class labels given to a network without classes")]
    Unconditional,
    #[error("input has shape {actual:?}, expected {expected}")]
    Shape { expected: String, actual: Vec<usize> },
    #[error("expected {expected} time inputs, got {actual}")]
    TimeInputs { expected: usize, actual: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Rms,
    Layer,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub norm: Norm,
    pub time_embed_dim: usize,
    /// Class count including the reserved null class (the last index).
    #[serde(default)]
    pub num_classes: Option<usize>,
    pub out_dim: usize,
    /// Number of scalar time inputs: 1 for velocity fields and
    /// discriminators, 2 for a two-time generator `G(x_s, s, t)`.
    #[serde(default = "one")]
    pub time_inputs: usize,
}

fn one() -> usize {
    1
}

impl MlpSpec {
    /// Velocity network `n → n`.
    pub fn generator(in_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            in_dim,
            hidden,
            norm: Norm::Rms,
            time_embed_dim: 64,
            num_classes: None,
            out_dim: in_dim,
            time_inputs: 1,
        }
    }

    /// Scalar discriminator `n → 1`.
    pub fn discriminator(in_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            out_dim: 1,
            ..Self::generator(in_dim, hidden)
        }
    }

    pub fn with_classes(mut self, num_classes: Option<usize>) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Spec(m.to_string()));
        if self.in_dim == 0 {
            return bad("in_dim must be positive");
        }
        if self.out_dim != self.in_dim && self.out_dim != 1 {
            return bad("out_dim must equal in_dim or 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be non-empty and positive");
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and positive");
        }
        if self.time_inputs == 0 || self.time_inputs > 2 {
            return bad("time_inputs must be 1 or 2");
        }
        if matches!(self.num_classes, Some(c) if c < 2) {
            return bad("num_classes counts the null class and must be at least 2");
        }
        Ok(())
    }

    pub fn null_class(&self) -> Option<usize> {
        self.num_classes.map(|c| c - 1)
    }

    fn input_width(&self) -> usize {
        let classes = if self.num_classes.is_some() { self.time_embed_dim } else { 0 };
        self.in_dim + self.time_inputs * (1 + self.time_embed_dim) + classes
    }

    /// Geometric frequencies over `[1, 30]`.
    fn frequencies(&self) -> Vec<f64> {
        let half = self.time_embed_dim / 2;
        (0..half)
            .map(|j| {
                let f = if half == 1 { 0.0 } else { j as f64 / (half - 1) as f64 };
                MAX_TIME_FREQUENCY.powf(f)
            })
            .collect()
    }

    /// Fresh parameters: hidden weights `N(0, 1/fan_in)`, zero biases, unit
    /// norm gains, `N(0, 1)` class embeddings, and a zero output layer.
    pub fn init(&self, seed: u64) -> Result<Parameters, ModelError> {
        self.init_from(&mut rng::stream(seed, Stream::Init))
    }

    /// As [`MlpSpec::init`], drawing from a caller-supplied generator.
    pub fn init_from(&self, rng: &mut rng::Rng) -> Result<Parameters, ModelError> {
        self.validate()?;
        let mut p = Parameters::new();
        let mut fan_in = self.input_width();
        let normal = |rows: usize, cols: usize, std: f64, rng: &mut rng::Rng| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
        };
        if let Some(c) = self.num_classes {
            p.insert("class_embed", normal(c, self.time_embed_dim, 1.0, rng));
        }
        for (i, &w) in self.hidden.iter().enumerate() {
            p.insert(
                format!("layer{i}.weight"),
                normal(fan_in, w, (1.0 / fan_in as f64).sqrt(), rng),
            );
            p.insert(format!("layer{i}.bias"), Tensor::zeros(1, w));
            match self.norm {
                Norm::Rms => p.insert(format!("layer{i}.gain"), Tensor::full(1, w, 1.0)),
                Norm::Layer => {
                    p.insert(format!("layer{i}.gain"), Tensor::full(1, w, 1.0));
                    p.insert(format!("layer{i}.shift"), Tensor::zeros(1, w));
                }
                Norm::None => {}
            }
            fan_in = w;
        }
        p.insert("out.weight", Tensor::zeros(fan_in, self.out_dim));
        p.insert("out.bias", Tensor::zeros(1, self.out_dim));
        Ok(p)
    }

    fn class_one_hot(&self, rows: usize, classes: Option<&[usize]>) -> Result<Option<Tensor>, ModelError> {
        let Some(nc) = self.num_classes else {
            return match classes {
                Some(_) => Err(ModelError::Unconditional),
                None => Ok(None),
            };
        };
        let mut oh = Tensor::zeros(rows, nc);
        match classes {
            Some(c) => {
                if c.len() != rows {
                    return Err(ModelError::Shape {
                        expected: format!("{rows} class labels"),
                        actual: vec![c.len()],
                    });
                }
                for (r, &k) in c.iter().enumerate() {
                    if k >= nc {
                        return Err(ModelError::Class { index: k, classes: nc });
                    }
                    oh.set(r, k, 1.0);
                }
            }
            None => (0..rows).for_each(|r| oh.set(r, nc - 1, 1.0)),
        }
        Ok(Some(oh))
    }

    /// Applies the network on a tape. `x` is `B × in_dim`; each time input is
    /// `B × 1`. Tangents on `x` and the times propagate to the output.
    pub fn apply<'t>(
        &self,
        pv: &ParamVars<'t>,
        x: Dual<'t>,
        times: &[Dual<'t>],
        classes: Option<&[usize]>,
    ) -> Result<Dual<'t>, ModelError> {
        let (rows, cols) = x.primal.shape();
        if cols != self.in_dim {
            return Err(ModelError::Shape {
                expected: format!("[B, {}]", self.in_dim),
                actual: vec![rows, cols],
            });
        }
        if times.len() != self.time_inputs {
            return Err(ModelError::TimeInputs {
                expected: self.time_inputs,
                actual: times.len(),
            });
        }
        for t in times {
            if t.primal.shape() != (rows, 1) {
                return Err(ModelError::Shape {
                    expected: format!("[{rows}, 1]"),
                    actual: vec![t.primal.rows(), t.primal.cols()],
                });
            }
        }
        let tape = x.primal.tape();
        let freqs = tape.constant(Tensor::row(&self.frequencies()));
        let half = self.time_embed_dim / 2;

        let mut parts = vec![x];
        for &t in times {
            let phase = t.broadcast_cols(half).mul_gain(freqs);
            parts.push(t);
            parts.push(phase.sin());
            parts.push(phase.cos());
        }
        if let Some(oh) = self.class_one_hot(rows, classes)? {
            let emb = tape.constant(oh).matmul(pv.get("class_embed"));
            parts.push(Dual::constant(emb));
        }
        let mut h = Dual::concat_cols(&parts);
        for i in 0..self.hidden.len() {
            h = h
                .matmul(pv.get(&format!("layer{i}.weight")))
                .add_bias(pv.get(&format!("layer{i}.bias")));
            h = match self.norm {
                Norm::Rms => h.rms_norm(Some(pv.get(&format!("layer{i}.gain"))), NORM_EPS),
                Norm::Layer => h.layer_norm(
                    Some(pv.get(&format!("layer{i}.gain"))),
                    Some(pv.get(&format!("layer{i}.shift"))),
                    NORM_EPS,
                ),
                Norm::None => h,
            };
            h = h.silu();
        }
        Ok(h.matmul(pv.get("out.weight")).add_bias(pv.get("out.bias")))
    }
}

fn time_column(t: &[f64], rows: usize) -> Result<Tensor, ModelError> {
    if t.len() != rows {
        return Err(ModelError::Shape {
            expected: format!("{rows} times"),
            actual: vec![t.len()],
        });
    }
    Ok(Tensor::column(t))
}

fn forward(
    spec: &MlpSpec,
    params: &Parameters,
    x: &Tensor,
    times: &[&[f64]],
    classes: Option<&[usize]>,
) -> Result<Tensor, ModelError> {
    let tape = Tape::new();
    let pv = ParamVars::frozen(&tape, params);
    let xd = Dual::constant(tape.constant(x.clone()));
    let td = times
        .iter()
        .map(|t| Ok(Dual::constant(tape.constant(time_column(t, x.rows())?))))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(spec.apply(&pv, xd, &td, classes)?.primal.value())
}

/// Generator output for a batch, one time per row.
pub fn g_forward(
    spec: &MlpSpec,
    params: &Parameters,
    x_t: &Tensor,
    t: &[f64],
    classes: Option<&[usize]>,
) -> Result<Tensor, ModelError> {
    forward(spec, params, x_t, &[t], classes)
}

/// Two-time generator output `G(x_s, s, t)`.
pub fn g_forward2(
    spec: &MlpSpec,
    params: &Parameters,
    x_s: &Tensor,
    s: &[f64],
    t: &[f64],
    classes: Option<&[usize]>,
) -> Result<Tensor, ModelError> {
    forward(spec, params, x_s, &[s, t], classes)
}

/// Discriminator logits, a `B × 1` column.
pub fn d_forward(
    spec: &MlpSpec,
    params: &Parameters,
    x_t: &Tensor,
    t: &[f64],
    classes: Option<&[usize]>,
) -> Result<Tensor, ModelError> {
    forward(spec, params, x_t, &[t], classes)
}

/// On-tape discriminator evaluation with `k` stacked tangent directions on
/// `x_t` and tangent `t_dot` on `t` for every direction. Returns the dual
/// output; its tangent blocks are the JVPs.
pub fn d_jvp_on_tape<'t>(
    spec: &MlpSpec,
    pv: &ParamVars<'t>,
    x_t: Var<'t>,
    t: Var<'t>,
    x_dots: Var<'t>,
    t_dot: f64,
    k: usize,
    classes: Option<&[usize]>,
) -> Result<Dual<'t>, ModelError> {
    let tape = x_t.tape();
    let rows = x_t.rows();
    if x_dots.shape() != (k * rows, x_t.cols()) {
        return Err(ModelError::Shape {
            expected: format!("[{}, {}]", k * rows, x_t.cols()),
            actual: vec![x_dots.rows(), x_dots.cols()],
        });
    }
    let x = Dual::new(x_t, x_dots, k);
    let td = Dual::new(t, tape.constant(Tensor::full(k * rows, 1, t_dot)), k);
    spec.apply(pv, x, &[td], classes)
}

/// `(D(x_t, t), ∂D/∂x_t · x_dot + ∂D/∂t · t_dot)` per row.
pub fn d_jvp(
    spec: &MlpSpec,
    params: &Parameters,
    x_t: &Tensor,
    t: &[f64],
    x_dot: &Tensor,
    t_dot: f64,
    classes: Option<&[usize]>,
) -> Result<(Tensor, Tensor), ModelError> {
    let (d, mut jv) = d_jvp_multi(spec, params, x_t, t, &[x_dot], t_dot, classes)?;
    Ok((d, jv.pop().expect("one direction")))
}

/// Two JVPs sharing one primal evaluation.
pub fn d_jvp_pair(
    spec: &MlpSpec,
    params: &Parameters,
    x_t: &Tensor,
    t: &[f64],
    x_dot_real: &Tensor,
    x_dot_fake: &Tensor,
    t_dot: f64,
    classes: Option<&[usize]>,
) -> Result<(Tensor, Tensor, Tensor), ModelError> {
    let (d, jv) = d_jvp_multi(spec, params, x_t, t, &[x_dot_real, x_dot_fake], t_dot, classes)?;
    let mut it = jv.into_iter();
    Ok((d, it.next().expect("real"), it.next().expect("fake")))
}

fn d_jvp_multi(
    spec: &MlpSpec,
    params: &Parameters,
    x_t: &Tensor,
    t: &[f64],
    x_dots: &[&Tensor],
    t_dot: f64,
    classes: Option<&[usize]>,
) -> Result<(Tensor, Vec<Tensor>), ModelError> {
    for xd in x_dots {
        if xd.shape() != x_t.shape() {
            return Err(ModelError::Shape {
                expected: format!("{:?}", x_t.shape()),
                actual: xd.shape().to_vec(),
            });
        }
    }
    let k = x_dots.len();
    let tape = Tape::new();
    let pv = ParamVars::frozen(&tape, params);
    let out = d_jvp_on_tape(
        spec,
        &pv,
        tape.constant(x_t.clone()),
        tape.constant(time_column(t, x_t.rows())?),
        tape.constant(Tensor::vstack(x_dots)),
        t_dot,
        k,
        classes,
    )?;
    let rows = x_t.rows();
    let d = out.primal.value();
    let tangent = match out.tangent() {
        Some(v) => v.value(),
        None => Tensor::zeros(k * rows, 1),
    };
    Ok((d, (0..k).map(|i| tangent.slice_rows(i * rows, (i + 1) * rows)).collect()))
}

/// Exponential moving average of a parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub shadow: Parameters,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: &Parameters, decay: f64) -> Self {
        assert!((0.0..1.0).contains(&decay), "EMA decay must lie in [0, 1)");
        Self {
            shadow: params.clone(),
            decay,
        }
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`.
    pub fn update(&mut self, params: &Parameters) {
        assert!(self.shadow.same_layout(params), "EMA layout mismatch");
        let d = self.decay;
        for ((_, s), (_, p)) in self.shadow.iter_mut().zip(params.iter()) {
            for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }
}

/// `gain ⊙ x / sqrt(mean(x²) + ε)` per row.
pub fn rmsnorm(x: &Tensor, gain: &[f64]) -> Tensor {
    let cols = x.cols();
    assert_eq!(gain.len(), cols);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        row.iter_mut().zip(gain).for_each(|(v, g)| *v *= inv * g);
    }
    out
}
