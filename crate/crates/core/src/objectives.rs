//! Training losses.
//!
//! Flow matching regresses the conditional velocity. The continuous
//! adversarial objective scores velocities through discriminator JVPs
//! `∂D/∂x_t · v + ∂D/∂t · T`, contrasting the conditional velocity against the
//! generator's prediction. The discrete adversarial baseline scores generated
//! points directly and needs gradient penalties.
//!
//! The `*_step` functions build the whole loss on one tape and return the
//! reported terms together with parameter gradients. The scalar helpers are
//! the same formulas on plain numbers.

use crate::autodiff::{Dual, ParamVars, Tape, Var};
use crate::flowpath::{AfmBatch, TrainingBatch};
use crate::models::{d_jvp_on_tape, MlpSpec, ModelError};
use crate::params::{GradientMap, Parameters};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp applied to sigmoid outputs before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;
/// Smallest `|t − s|` accepted by [`ot_discrete`].
pub const MIN_TIME_GAP: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("time gap |t - s| = {0} is below 1e-6")]
    TimeGap(f64),
    #[error("invalid loss weight {name} = {value}")]
    Weight { name: &'static str, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = ObjectiveError> = std::result::Result<T, E>;

/// A symmetric positive definite metric for the generalized regression loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix {
    m: Tensor,
}

impl SpdMatrix {
    /// Checks symmetry to 1e-12 and positive definiteness by Cholesky.
    pub fn new(m: Tensor) -> Result<Self> {
        let (r, c) = m.dims();
        if r != c || r == 0 {
            return Err(ObjectiveError::NotSpd(format!("shape {:?} is not square", m.shape())));
        }
        for i in 0..r {
            for j in 0..i {
                if (m.get(i, j) - m.get(j, i)).abs() > 1e-12 {
                    return Err(ObjectiveError::NotSpd(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        let mut l = vec![0.0; r * r];
        for i in 0..r {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i * r + k] * l[j * r + k]).sum();
                if i == j {
                    let d = m.get(i, i) - s;
                    if !(d > 0.0) {
                        return Err(ObjectiveError::NotSpd(format!("Cholesky pivot {i} is {d}")));
                    }
                    l[i * r + i] = d.sqrt();
                } else {
                    l[i * r + j] = (m.get(i, j) - s) / l[j * r + j];
                }
            }
        }
        Ok(Self { m })
    }

    pub fn scaled_identity(n: usize, scale: f64) -> Result<Self> {
        let mut m = Tensor::zeros(n, n);
        (0..n).for_each(|i| m.set(i, i, scale));
        Self::new(m)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.m
    }

    pub fn dim(&self) -> usize {
        self.m.rows()
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ObjectiveError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Batch mean of `(v_hat − v_bar)ᵀ M (v_hat − v_bar)`.
pub fn spd_loss(v_hat: &Tensor, v_bar: &Tensor, m: &SpdMatrix) -> Result<f64> {
    same_shape(v_hat, v_bar)?;
    let n = v_hat.cols();
    if m.dim() != n {
        return Err(ObjectiveError::Shape(format!("metric is {0}x{0} for {n}-dim data", m.dim())));
    }
    let d = v_hat.sub(v_bar);
    let mut total = 0.0;
    for r in 0..d.rows() {
        let row = d.row_slice(r);
        let mut q = 0.0;
        for i in 0..n {
            let mi: f64 = (0..n).map(|j| m.m.get(i, j) * row[j]).sum();
            q += row[i] * mi;
        }
        total += q;
    }
    Ok(total / d.rows() as f64)
}

/// Batch mean of `(1/n)·‖v_hat − v_bar‖²`; the metric `I/n` case of
/// [`spd_loss`].
pub fn fm_loss(v_hat: &Tensor, v_bar: &Tensor) -> Result<f64> {
    same_shape(v_hat, v_bar)?;
    let n = v_hat.cols();
    spd_loss(v_hat, v_bar, &SpdMatrix::scaled_identity(n, 1.0 / n as f64)?)
}

/// Contrastive function applied to a pair of discriminator logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contrastive {
    /// `(a − 1)² + (b + 1)²`.
    #[default]
    Ls,
    /// `−log σ(a) − log(1 − σ(b))`.
    Ns,
    /// `max(0, 1 − a) + max(0, 1 + b)` for the discriminator and `−a + b` for
    /// the generator.
    Hinge,
}

pub fn f_ls(a: f64, b: f64) -> f64 {
    (a - 1.0).powi(2) + (b + 1.0).powi(2)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub fn f_ns(a: f64, b: f64) -> f64 {
    let sa = clamp_prob(crate::autodiff::sigmoid(a));
    let sb = clamp_prob(crate::autodiff::sigmoid(b));
    -sa.ln() - (1.0 - sb).ln()
}

pub fn f_hinge_d(a: f64, b: f64) -> f64 {
    (1.0 - a).max(0.0) + (1.0 + b).max(0.0)
}

pub fn f_hinge_g(a: f64, b: f64) -> f64 {
    -a + b
}

/// Which side of the game a contrastive term is evaluated for (only the hinge
/// function differs between the two).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Discriminator,
    Generator,
}

impl Contrastive {
    pub fn eval(self, side: Side, a: f64, b: f64) -> f64 {
        match (self, side) {
            (Contrastive::Ls, _) => f_ls(a, b),
            (Contrastive::Ns, _) => f_ns(a, b),
            (Contrastive::Hinge, Side::Discriminator) => f_hinge_d(a, b),
            (Contrastive::Hinge, Side::Generator) => f_hinge_g(a, b),
        }
    }

    /// Elementwise on two `B × 1` logit columns, then the batch mean.
    pub fn mean_on_tape<'t>(self, side: Side, a: Var<'t>, b: Var<'t>) -> Var<'t> {
        let per_row = match (self, side) {
            (Contrastive::Ls, _) => a.add_scalar(-1.0).square().add(b.add_scalar(1.0).square()),
            (Contrastive::Ns, _) => {
                let la = a.sigmoid().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).log();
                let lb = b.neg().sigmoid().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).log();
                la.add(lb).neg()
            }
            (Contrastive::Hinge, Side::Discriminator) => {
                a.neg().add_scalar(1.0).relu().add(b.add_scalar(1.0).relu())
            }
            (Contrastive::Hinge, Side::Generator) => b.sub(a),
        };
        per_row.mean()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_cp")]
    pub lambda_cp: f64,
    #[serde(default)]
    pub lambda_ot: f64,
    #[serde(default = "default_gp")]
    pub lambda_gp: f64,
}

fn default_cp() -> f64 {
    0.001
}

fn default_gp() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cp: default_cp(),
            lambda_ot: 0.0,
            lambda_gp: default_gp(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("lambda_cp", self.lambda_cp),
            ("lambda_ot", self.lambda_ot),
            ("lambda_gp", self.lambda_gp),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ObjectiveError::Weight { name, value });
            }
        }
        Ok(())
    }
}

/// Something the loss totals can be formed from: plain numbers for reporting
/// or tape nodes for training.
pub trait LossTerm: Copy {
    fn plus(self, other: Self) -> Self;
    fn times(self, w: f64) -> Self;
}

impl LossTerm for f64 {
    fn plus(self, other: Self) -> Self {
        self + other
    }
    fn times(self, w: f64) -> Self {
        self * w
    }
}

impl LossTerm for Var<'_> {
    fn plus(self, other: Self) -> Self {
        self.add(other)
    }
    fn times(self, w: f64) -> Self {
        self.scale(w)
    }
}

/// `L_adv + λ_cp·L_cp`.
pub fn cafm_total_d<L: LossTerm>(w: &LossWeights, adv: L, cp: L) -> L {
    if w.lambda_cp == 0.0 {
        adv
    } else {
        adv.plus(cp.times(w.lambda_cp))
    }
}

/// `L_adv + λ_ot·L_ot`; also the discrete generator total.
pub fn total_g<L: LossTerm>(w: &LossWeights, adv: L, ot: L) -> L {
    if w.lambda_ot == 0.0 {
        adv
    } else {
        adv.plus(ot.times(w.lambda_ot))
    }
}

/// `L_adv + λ_gp·(R1 + R2) + λ_cp·cp`.
pub fn afm_total_d<L: LossTerm>(w: &LossWeights, adv: L, r1: L, r2: L, cp: L) -> L {
    let mut total = adv;
    if w.lambda_gp != 0.0 {
        total = total.plus(r1.plus(r2).times(w.lambda_gp));
    }
    if w.lambda_cp != 0.0 {
        total = total.plus(cp.times(w.lambda_cp));
    }
    total
}

fn const_time<'t>(tape: &'t Tape, t: &[f64]) -> Var<'t> {
    tape.constant(Tensor::column(t))
}

/// On-tape `mean (1/n)·‖d‖²` or `mean dᵀMd`.
fn regression_on_tape<'t>(v_hat: Var<'t>, v_bar: Var<'t>, metric: Option<&SpdMatrix>) -> Var<'t> {
    let d = v_hat.sub(v_bar);
    match metric {
        None => d.square().row_sum().scale(1.0 / d.cols() as f64).mean(),
        Some(m) => {
            let md = d.matmul(d.tape().constant(m.m.clone()));
            md.mul(d).row_sum().mean()
        }
    }
}

/// Flow-matching loss and its gradient for one batch. A metric replaces the
/// default `I/n` weighting.
pub fn fm_step(
    g_spec: &MlpSpec,
    g_params: &Parameters,
    batch: &TrainingBatch,
    metric: Option<&SpdMatrix>,
) -> Result<(f64, GradientMap)> {
    let tape = Tape::new();
    let pv = ParamVars::trainable(&tape, g_params);
    let x = Dual::constant(tape.constant(batch.x_t.clone()));
    let t = Dual::constant(const_time(&tape, &batch.t));
    let v_hat = g_spec.apply(&pv, x, &[t], batch.c.as_deref())?.primal;
    let loss = regression_on_tape(v_hat, tape.constant(batch.v_bar.clone()), metric);
    let grads = tape.gradients(loss);
    Ok((loss.item(), pv.gradients(&grads)))
}

/// Reported terms of a discriminator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DTerms {
    pub adv: f64,
    pub cp: f64,
    pub total: f64,
    pub real_logit_mean: f64,
    pub fake_logit_mean: f64,
    /// Gradient penalties (discrete baseline only).
    pub r1: f64,
    pub r2: f64,
}

/// Reported terms of a generator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GTerms {
    pub adv: f64,
    pub ot: f64,
    pub total: f64,
}

fn check_batch_output(batch: &TrainingBatch, g_output: &Tensor) -> Result<()> {
    same_shape(&batch.v_bar, g_output)
}

/// Discriminator update for the continuous objective. The generator output
/// is a constant tangent; both JVPs share one primal pass.
pub fn cafm_d_step(
    d_spec: &MlpSpec,
    d_params: &Parameters,
    batch: &TrainingBatch,
    g_output: &Tensor,
    t_dot: f64,
    f: Contrastive,
    w: &LossWeights,
) -> Result<(DTerms, GradientMap)> {
    check_batch_output(batch, g_output)?;
    let tape = Tape::new();
    let pv = ParamVars::trainable(&tape, d_params);
    let rows = batch.x_t.rows();
    let tangents = tape.constant(Tensor::vstack(&[&batch.v_bar, g_output]));
    let out = d_jvp_on_tape(
        d_spec,
        &pv,
        tape.constant(batch.x_t.clone()),
        const_time(&tape, &batch.t),
        tangents,
        t_dot,
        2,
        batch.c.as_deref(),
    )?;
    let real = out.tangent_block(0).expect("tangent");
    let fake = out.tangent_block(1).expect("tangent");
    let adv = f.mean_on_tape(Side::Discriminator, real, fake);
    let cp = out.primal.square().mean();
    let total = cafm_total_d(w, adv, cp);
    let grads = tape.gradients(total);
    let terms = DTerms {
        adv: adv.item(),
        cp: cp.item(),
        total: total.item(),
        real_logit_mean: real.value().sum() / rows as f64,
        fake_logit_mean: fake.value().sum() / rows as f64,
        r1: 0.0,
        r2: 0.0,
    };
    Ok((terms, pv.gradients(&grads)))
}

/// Mean of `f(D_jvp(v̄), D_jvp(g_output))` without gradients.
pub fn cafm_d_loss(
    d_spec: &MlpSpec,
    d_params: &Parameters,
    batch: &TrainingBatch,
    g_output: &Tensor,
    t_dot: f64,
    f: Contrastive,
) -> Result<f64> {
    let w = LossWeights {
        lambda_cp: 0.0,
        ..LossWeights::default()
    };
    Ok(cafm_d_step(d_spec, d_params, batch, g_output, t_dot, f, &w)?.0.adv)
}

fn g_adv_on_tape<'t>(
    d_spec: &MlpSpec,
    pv_d: &ParamVars<'t>,
    batch: &TrainingBatch,
    g_out: Var<'t>,
    t_dot: f64,
    f: Contrastive,
) -> Result<Var<'t>> {
    let tape = g_out.tape();
    let tangents = Var::concat_rows(&[g_out, tape.constant(batch.v_bar.clone())]);
    let out = d_jvp_on_tape(
        d_spec,
        pv_d,
        tape.constant(batch.x_t.clone()),
        const_time(tape, &batch.t),
        tangents,
        t_dot,
        2,
        batch.c.as_deref(),
    )?;
    let fake = out.tangent_block(0).expect("tangent");
    let real = out.tangent_block(1).expect("tangent");
    Ok(f.mean_on_tape(Side::Generator, fake, real))
}

/// Generator update for the continuous objective. The discriminator is
/// frozen; gradients reach the generator through the JVP tangent slot.
/// Also returns the generator output for the batch.
pub fn cafm_g_step(
    g_spec: &MlpSpec,
    g_params: &Parameters,
    d_spec: &MlpSpec,
    d_params: &Parameters,
    batch: &TrainingBatch,
    t_dot: f64,
    f: Contrastive,
    w: &LossWeights,
) -> Result<(GTerms, GradientMap, Tensor)> {
    let tape = Tape::new();
    let pv_g = ParamVars::trainable(&tape, g_params);
    let pv_d = ParamVars::frozen(&tape, d_params);
    let x = Dual::constant(tape.constant(batch.x_t.clone()));
    let t = Dual::constant(const_time(&tape, &batch.t));
    let g_out = g_spec.apply(&pv_g, x, &[t], batch.c.as_deref())?.primal;
    let adv = g_adv_on_tape(d_spec, &pv_d, batch, g_out, t_dot, f)?;
    let ot = g_out.square().row_sum().scale(1.0 / g_out.cols() as f64).mean();
    let total = total_g(w, adv, ot);
    let grads = tape.gradients(total);
    let terms = GTerms {
        adv: adv.item(),
        ot: ot.item(),
        total: total.item(),
    };
    Ok((terms, pv_g.gradients(&grads), g_out.value()))
}

/// Mean of `f(D_jvp(G), D_jvp(v̄))` without gradients.
pub fn cafm_g_loss(
    g_spec: &MlpSpec,
    g_params: &Parameters,
    d_spec: &MlpSpec,
    d_params: &Parameters,
    batch: &TrainingBatch,
    t_dot: f64,
    f: Contrastive,
) -> Result<f64> {
    let w = LossWeights {
        lambda_ot: 0.0,
        ..LossWeights::default()
    };
    Ok(cafm_g_step(g_spec, g_params, d_spec, d_params, batch, t_dot, f, &w)?.0.adv)
}

/// Generator adversarial loss as a function of a given generator output, and
/// its gradient with respect to that output.
pub fn cafm_g_output_gradient(
    d_spec: &MlpSpec,
    d_params: &Parameters,
    batch: &TrainingBatch,
    g_output: &Tensor,
    t_dot: f64,
    f: Contrastive,
) -> Result<(f64, Tensor)> {
    check_batch_output(batch, g_output)?;
    let tape = Tape::new();
    let pv_d = ParamVars::frozen(&tape, d_params);
    let g = tape.var(g_output.clone());
    let adv = g_adv_on_tape(d_spec, &pv_d, batch, g, t_dot, f)?;
    let grads = tape.gradients(adv);
    Ok((adv.item(), grads.wrt_or_zeros(g)))
}

/// Batch mean of `D(x_t, t)²`.
pub fn centering_penalty(
    d_spec: &MlpSpec,
    d_params: &Parameters,
    x_t: &Tensor,
    t: &[f64],
    classes: Option<&[usize]>,
) -> Result<f64> {
    let d = crate::models::d_forward(d_spec, d_params, x_t, t, classes)?;
    Ok(d.sq_norm() / d.rows() as f64)
}

/// Batch mean of `(1/n)·‖g_output‖²`.
pub fn ot_reg_continuous(g_output: &Tensor) -> f64 {
    g_output.sq_norm() / g_output.cols() as f64 / g_output.rows() as f64
}

/// `−log σ(a − b)` with the sigmoid clamped.
pub fn relativistic(a: f64, b: f64) -> f64 {
    -clamp_prob(crate::autodiff::sigmoid(a - b)).ln()
}

fn relativistic_on_tape<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    a.sub(b)
        .sigmoid()
        .clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
        .log()
        .neg()
        .mean()
}

/// Batch mean of `(1/n)·‖g_out − x_s‖² / |t − s|`.
pub fn ot_discrete(g_out: &Tensor, x_s: &Tensor, s: &[f64], t: &[f64]) -> Result<f64> {
    same_shape(g_out, x_s)?;
    let n = g_out.cols() as f64;
    let mut total = 0.0;
    for r in 0..g_out.rows() {
        let gap = (t[r] - s[r]).abs();
        if gap < MIN_TIME_GAP {
            return Err(ObjectiveError::TimeGap(gap));
        }
        let d2: f64 = g_out
            .row_slice(r)
            .iter()
            .zip(x_s.row_slice(r))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += d2 / n / gap;
    }
    Ok(total / g_out.rows() as f64)
}

/// Discriminator logits and, when asked, per-row `‖∇_x D‖²` computed from
/// `n` unit-direction JVPs so it stays differentiable in the parameters.
fn d_logits_on_tape<'t>(
    d_spec: &MlpSpec,
    pv: &ParamVars<'t>,
    x: Var<'t>,
    t: Var<'t>,
    classes: Option<&[usize]>,
    with_grad: bool,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    if !with_grad {
        let out = d_spec.apply(pv, Dual::constant(x), &[Dual::constant(t)], classes)?;
        return Ok((out.primal, None));
    }
    let (rows, n) = x.shape();
    let mut dirs = Tensor::zeros(n * rows, n);
    for j in 0..n {
        for r in 0..rows {
            dirs.set(j * rows + r, j, 1.0);
        }
    }
    let out = d_spec.apply(
        pv,
        Dual::new(x, x.tape().constant(dirs), n),
        &[Dual::constant(t)],
        classes,
    )?;
    let tan = out.tangent().expect("input tangent");
    let mut sq = tan.slice_rows(0, rows).square();
    for j in 1..n {
        sq = sq.add(tan.slice_rows(j * rows, (j + 1) * rows).square());
    }
    Ok((out.primal, Some(sq)))
}

/// Batch mean of `‖∇_x D(x, t)‖²` (R1 on real points, R2 on generated ones).
pub fn gradient_penalty(
    d_spec: &MlpSpec,
    d_params: &Parameters,
    x: &Tensor,
    t: &[f64],
    classes: Option<&[usize]>,
) -> Result<f64> {
    let tape = Tape::new();
    let pv = ParamVars::frozen(&tape, d_params);
    let (_, sq) = d_logits_on_tape(d_spec, &pv, tape.constant(x.clone()), const_time(&tape, t), classes, true)?;
    Ok(sq.expect("requested").value().mean())
}

pub fn r1_penalty(d_spec: &MlpSpec, d_params: &Parameters, real_xt: &Tensor, t: &[f64], classes: Option<&[usize]>) -> Result<f64> {
    gradient_penalty(d_spec, d_params, real_xt, t, classes)
}

pub fn r2_penalty(d_spec: &MlpSpec, d_params: &Parameters, fake_xt: &Tensor, t: &[f64], classes: Option<&[usize]>) -> Result<f64> {
    gradient_penalty(d_spec, d_params, fake_xt, t, classes)
}

/// Batch mean of `(D(real) + D(fake))²`.
pub fn cp_penalty_discrete(
    d_spec: &MlpSpec,
    d_params: &Parameters,
    real_xt: &Tensor,
    fake_xt: &Tensor,
    t: &[f64],
    classes: Option<&[usize]>,
) -> Result<f64> {
    let a = crate::models::d_forward(d_spec, d_params, real_xt, t, classes)?;
    let b = crate::models::d_forward(d_spec, d_params, fake_xt, t, classes)?;
    Ok(a.add(&b).sq_norm() / a.rows() as f64)
}

/// Batch mean of `−log σ(D(real) − D(fake))`.
pub fn afm_adv_d(
    d_spec: &MlpSpec,
    d_params: &Parameters,
    real_xt: &Tensor,
    fake_xt: &Tensor,
    t: &[f64],
    classes: Option<&[usize]>,
) -> Result<f64> {
    let a = crate::models::d_forward(d_spec, d_params, real_xt, t, classes)?;
    let b = crate::models::d_forward(d_spec, d_params, fake_xt, t, classes)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| relativistic(*x, *y)).sum::<f64>() / a.rows() as f64)
}

/// Batch mean of `−log σ(D(fake) − D(real))`.
pub fn afm_adv_g(
    d_spec: &MlpSpec,
    d_params: &Parameters,
    real_xt: &Tensor,
    fake_xt: &Tensor,
    t: &[f64],
    classes: Option<&[usize]>,
) -> Result<f64> {
    afm_adv_d(d_spec, d_params, fake_xt, real_xt, t, classes)
}

/// On-tape two-time generator `x_s + (t − s)·net(x_s, s, t)`. Returns the
/// prediction and the raw network output.
fn afm_generate_on_tape<'t>(
    g_spec: &MlpSpec,
    pv: &ParamVars<'t>,
    x_s: Var<'t>,
    s: &[f64],
    t: &[f64],
    classes: Option<&[usize]>,
) -> Result<Var<'t>> {
    let tape = x_s.tape();
    let net = g_spec
        .apply(
            pv,
            Dual::constant(x_s),
            &[Dual::constant(const_time(tape, s)), Dual::constant(const_time(tape, t))],
            classes,
        )?
        .primal;
    let n = x_s.cols();
    let gaps: Vec<f64> = s.iter().zip(t).flat_map(|(s, t)| std::iter::repeat_n(t - s, n)).collect();
    let gaps = tape.constant(Tensor::from_vec(s.len(), n, gaps));
    Ok(x_s.add(net.mul(gaps)))
}

/// Discrete generator prediction `G(x_s, s, t)`.
pub fn afm_generate(
    g_spec: &MlpSpec,
    g_params: &Parameters,
    x_s: &Tensor,
    s: &[f64],
    t: &[f64],
    classes: Option<&[usize]>,
) -> Result<Tensor> {
    let tape = Tape::new();
    let pv = ParamVars::frozen(&tape, g_params);
    Ok(afm_generate_on_tape(g_spec, &pv, tape.constant(x_s.clone()), s, t, classes)?.value())
}

/// Discriminator update for the discrete baseline.
pub fn afm_d_step(
    g_spec: &MlpSpec,
    g_params: &Parameters,
    d_spec: &MlpSpec,
    d_params: &Parameters,
    batch: &AfmBatch,
    w: &LossWeights,
) -> Result<(DTerms, GradientMap)> {
    let fake = afm_generate(g_spec, g_params, &batch.x_s, &batch.s, &batch.t, batch.c.as_deref())?;
    let tape = Tape::new();
    let pv = ParamVars::trainable(&tape, d_params);
    let t = const_time(&tape, &batch.t);
    let gp = w.lambda_gp != 0.0;
    let c = batch.c.as_deref();
    let (real, r1) = d_logits_on_tape(d_spec, &pv, tape.constant(batch.real_xt.clone()), t, c, gp)?;
    let (fake_l, r2) = d_logits_on_tape(d_spec, &pv, tape.constant(fake), t, c, gp)?;
    let adv = relativistic_on_tape(real, fake_l);
    let cp = real.add(fake_l).square().mean();
    let zero = tape.constant(Tensor::scalar(0.0));
    let r1 = r1.map_or(zero, |v| v.mean());
    let r2 = r2.map_or(zero, |v| v.mean());
    let total = afm_total_d(w, adv, r1, r2, cp);
    let grads = tape.gradients(total);
    let rows = batch.real_xt.rows() as f64;
    Ok((
        DTerms {
            adv: adv.item(),
            cp: cp.item(),
            total: total.item(),
            real_logit_mean: real.value().sum() / rows,
            fake_logit_mean: fake_l.value().sum() / rows,
            r1: r1.item(),
            r2: r2.item(),
        },
        pv.gradients(&grads),
    ))
}

/// Generator update for the discrete baseline.
pub fn afm_g_step(
    g_spec: &MlpSpec,
    g_params: &Parameters,
    d_spec: &MlpSpec,
    d_params: &Parameters,
    batch: &AfmBatch,
    w: &LossWeights,
) -> Result<(GTerms, GradientMap)> {
    let tape = Tape::new();
    let pv_g = ParamVars::trainable(&tape, g_params);
    let pv_d = ParamVars::frozen(&tape, d_params);
    let c = batch.c.as_deref();
    let x_s = tape.constant(batch.x_s.clone());
    let fake = afm_generate_on_tape(g_spec, &pv_g, x_s, &batch.s, &batch.t, c)?;
    let t = const_time(&tape, &batch.t);
    let (real_l, _) = d_logits_on_tape(d_spec, &pv_d, tape.constant(batch.real_xt.clone()), t, c, false)?;
    let (fake_l, _) = d_logits_on_tape(d_spec, &pv_d, fake, t, c, false)?;
    let adv = relativistic_on_tape(fake_l, real_l);
    let n = batch.x_s.cols() as f64;
    let inv_gap: Vec<f64> = batch
        .s
        .iter()
        .zip(&batch.t)
        .map(|(s, t)| {
            let gap = (t - s).abs();
            if gap < MIN_TIME_GAP {
                Err(ObjectiveError::TimeGap(gap))
            } else {
                Ok(1.0 / (gap * n))
            }
        })
        .collect::<Result<_>>()?;
    let ot = fake
        .sub(x_s)
        .square()
        .row_sum()
        .mul(tape.constant(Tensor::column(&inv_gap)))
        .mean();
    let total = total_g(w, adv, ot);
    let grads = tape.gradients(total);
    Ok((
        GTerms {
            adv: adv.item(),
            ot: ot.item(),
            total: total.item(),
        },
        pv_g.gradients(&grads),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowpath::{sample_batch, FlowPath, TimeSampler};
    use crate::models::Norm;
    use crate::oracle::Dataset;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, Stream::Eval);
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    fn d_spec() -> MlpSpec {
        MlpSpec {
            in_dim: 2,
            hidden: vec![16, 16],
            norm: Norm::Rms,
            time_embed_dim: 8,
            num_classes: None,
            out_dim: 1,
            time_inputs: 1,
        }
    }

    fn g_spec() -> MlpSpec {
        MlpSpec { out_dim: 2, ..d_spec() }
    }

    fn randomized(spec: &MlpSpec, seed: u64) -> Parameters {
        let mut p = spec.init(seed).unwrap();
        let noise_seed = seed.wrapping_add(77);
        for (i, (_, t)) in p.iter_mut().enumerate() {
            let r = randn(t.rows(), t.cols(), noise_seed + i as u64);
            t.add_scaled(&r, 0.3);
        }
        p
    }

    fn batch(seed: u64, size: usize) -> TrainingBatch {
        let ds = Dataset::preset("ring8").unwrap();
        sample_batch(&ds, &FlowPath::linear(), &TimeSampler::uniform(), &mut stream(seed, Stream::Data), size, 0.0).unwrap()
    }

    /// Constant discriminator `D ≡ value`: zero weights, output bias `value`.
    fn constant_d(value: f64) -> Parameters {
        let mut p = d_spec().init(0).unwrap();
        for (name, t) in p.iter_mut() {
            if name != "out.bias" {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        p.get_mut("out.bias").unwrap().data_mut()[0] = value;
        p
    }

    #[test]
    fn fm_and_spd_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]);
        assert_eq!(fm_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(fm_loss(&a.map(|v| v + 1.0), &a).unwrap(), 1.0);
        assert_eq!(fm_loss(&Tensor::row(&[3.0, 4.0]), &Tensor::row(&[0.0, 0.0])).unwrap(), 12.5);

        let m = SpdMatrix::new(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]])).unwrap();
        assert_eq!(spd_loss(&Tensor::row(&[1.0, 1.0]), &Tensor::row(&[0.0, 0.0]), &m).unwrap(), 3.0);
        assert_eq!(spd_loss(&a, &a, &m).unwrap(), 0.0);

        let b = randn(7, 3, 1);
        let c = randn(7, 3, 2);
        let m3 = SpdMatrix::scaled_identity(3, 1.0 / 3.0).unwrap();
        assert_eq!(fm_loss(&b, &c).unwrap().to_bits(), spd_loss(&b, &c, &m3).unwrap().to_bits());

        assert!(SpdMatrix::new(Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]])).is_err());
        assert!(SpdMatrix::new(Tensor::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]])).is_err());
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(f_ls(1.0, -1.0), 0.0);
        assert_eq!(f_ls(0.0, 0.0), 2.0);
        assert_eq!(f_ls(2.0, 1.0), 5.0);
        assert!((f_ns(0.0, 0.0) - 1.386294).abs() < 1e-6);
        assert!(f_ns(-1e4, 1e4).is_finite());
        assert_eq!(f_hinge_d(2.0, -2.0), 0.0);
        assert_eq!(f_hinge_g(0.7, 0.7), 0.0);

        let tape = Tape::new();
        let a = tape.constant(Tensor::column(&[0.3, -1.2, 2.0]));
        let b = tape.constant(Tensor::column(&[-0.4, 0.8, 1.5]));
        for f in [Contrastive::Ls, Contrastive::Ns, Contrastive::Hinge] {
            for side in [Side::Discriminator, Side::Generator] {
                let on_tape = f.mean_on_tape(side, a, b).item();
                let av = a.value();
                let bv = b.value();
                let direct: f64 = (0..3).map(|i| f.eval(side, av.data()[i], bv.data()[i])).sum::<f64>() / 3.0;
                assert!((on_tape - direct).abs() < 1e-14, "{f:?} {side:?}");
            }
        }
    }

    #[test]
    fn cafm_losses_at_zero_discriminator() {
        let b = batch(1, 16);
        let d = d_spec().init(3).unwrap();
        let g_out = randn(16, 2, 4);
        assert_eq!(cafm_d_loss(&d_spec(), &d, &b, &g_out, 1.0, Contrastive::Ls).unwrap(), 2.0);

        let g = randomized(&g_spec(), 5);
        let w = LossWeights { lambda_ot: 0.0, ..LossWeights::default() };
        let (terms, grads, _) = cafm_g_step(&g_spec(), &g, &d_spec(), &d, &b, 1.0, Contrastive::Ls, &w).unwrap();
        assert_eq!(terms.adv, 2.0);
        assert!(grads.values().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn d_loss_with_matching_generator_is_at_least_two() {
        let b = batch(2, 16);
        let d = randomized(&d_spec(), 6);
        let loss = cafm_d_loss(&d_spec(), &d, &b, &b.v_bar, 1.0, Contrastive::Ls).unwrap();
        assert!(loss >= 2.0);
    }

    #[test]
    fn d_loss_vanishes_at_target_logits() {
        let tape = Tape::new();
        let real = tape.constant(Tensor::column(&[1.0, 1.0]));
        let fake = tape.constant(Tensor::column(&[-1.0, -1.0]));
        assert_eq!(Contrastive::Ls.mean_on_tape(Side::Discriminator, real, fake).item(), 0.0);
    }

    #[test]
    fn centering_and_ot_examples() {
        let b = batch(3, 2);
        assert_eq!(centering_penalty(&d_spec(), &constant_d(0.0), &b.x_t, &b.t, None).unwrap(), 0.0);
        assert_eq!(centering_penalty(&d_spec(), &constant_d(2.0), &b.x_t, &b.t, None).unwrap(), 4.0);
        assert_eq!(ot_reg_continuous(&Tensor::zeros(3, 2)), 0.0);
        assert_eq!(ot_reg_continuous(&Tensor::row(&[3.0, 4.0])), 12.5);
        let g = randn(5, 2, 9);
        assert!((ot_reg_continuous(&g.scale(3.0)) - 9.0 * ot_reg_continuous(&g)).abs() < 1e-12);
    }

    #[test]
    fn discrete_examples() {
        assert!((relativistic(0.4, 0.4) - 2f64.ln()).abs() < 1e-15);
        assert!(relativistic(50.0, -50.0) < 1e-11);
        assert!(relativistic(1.0, 0.0) < relativistic(0.5, 0.0));

        let x = Tensor::column(&[0.0]);
        assert_eq!(ot_discrete(&x, &x, &[0.5], &[0.2]).unwrap(), 0.0);
        assert_eq!(ot_discrete(&Tensor::column(&[1.0]), &x, &[1.0], &[0.5]).unwrap(), 2.0);
        assert_eq!(ot_discrete(&Tensor::column(&[1.0]), &x, &[1.0], &[0.75]).unwrap(), 4.0);
        assert!(matches!(ot_discrete(&x, &x, &[0.5], &[0.5]), Err(ObjectiveError::TimeGap(_))));

        let d = randomized(&d_spec(), 11);
        let real = randn(6, 2, 12);
        let fake = randn(6, 2, 13);
        let t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let ld = afm_adv_d(&d_spec(), &d, &real, &fake, &t, None).unwrap();
        let lg = afm_adv_g(&d_spec(), &d, &fake, &real, &t, None).unwrap();
        assert_eq!(ld, lg);
        assert!((afm_adv_d(&d_spec(), &d, &real, &real, &t, None).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradient_penalties() {
        // Linear D(x) = aᵀx through the same unit-direction construction.
        let tape = Tape::new();
        let x = tape.constant(randn(4, 2, 1));
        let dirs = {
            let mut d = Tensor::zeros(8, 2);
            (0..4).for_each(|r| {
                d.set(r, 0, 1.0);
                d.set(4 + r, 1, 1.0);
            });
            tape.constant(d)
        };
        let a = tape.constant(Tensor::column(&[0.6, -1.7]));
        let out = Dual::new(x, dirs, 2).matmul(a);
        let tan = out.tangent().unwrap().value();
        let sq: Vec<f64> = (0..4).map(|r| tan.get(r, 0).powi(2) + tan.get(4 + r, 0).powi(2)).collect();
        assert!(sq.iter().all(|v| (v - (0.36 + 2.89)).abs() < 1e-14));

        let b = batch(4, 6);
        let c = constant_d(1.3);
        assert_eq!(r1_penalty(&d_spec(), &c, &b.x_t, &b.t, None).unwrap(), 0.0);
        assert_eq!(r2_penalty(&d_spec(), &c, &b.x, &b.t, None).unwrap(), 0.0);
        // Antisymmetric logits cancel in the centering penalty.
        let z = constant_d(0.0);
        assert_eq!(cp_penalty_discrete(&d_spec(), &z, &b.x_t, &b.x, &b.t, None).unwrap(), 0.0);
    }

    #[test]
    fn gradient_penalty_matches_finite_differences() {
        let spec = d_spec();
        let d = randomized(&spec, 21);
        let x = randn(3, 2, 22);
        let t = [0.2, 0.5, 0.8];
        let gp = gradient_penalty(&spec, &d, &x, &t, None).unwrap();
        let h = 1e-6;
        let mut fd = 0.0;
        for r in 0..3 {
            for j in 0..2 {
                let mut xp = x.clone();
                xp.set(r, j, x.get(r, j) + h);
                let mut xm = x.clone();
                xm.set(r, j, x.get(r, j) - h);
                let dp = crate::models::d_forward(&spec, &d, &xp, &t, None).unwrap().get(r, 0);
                let dm = crate::models::d_forward(&spec, &d, &xm, &t, None).unwrap().get(r, 0);
                fd += ((dp - dm) / (2.0 * h)).powi(2);
            }
        }
        fd /= 3.0;
        assert!((gp - fd).abs() < 1e-6 * fd.max(1.0), "{gp} vs {fd}");
    }

    #[test]
    fn totals() {
        let zero = LossWeights { lambda_cp: 0.0, lambda_ot: 0.0, lambda_gp: 0.0 };
        assert_eq!(cafm_total_d(&zero, 1.5, 9.0), 1.5);
        assert_eq!(total_g(&zero, 1.5, 9.0), 1.5);
        assert_eq!(afm_total_d(&zero, 1.5, 9.0, 9.0, 9.0), 1.5);
        let w = LossWeights::default();
        assert!((cafm_total_d(&w, 1.0, 4.0) - 1.004).abs() < 1e-15);
        assert_eq!(total_g(&w, 0.7, 100.0), 0.7);
        assert!(LossWeights { lambda_cp: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn afm_steps_produce_finite_gradients() {
        let ds = Dataset::preset("ring8").unwrap();
        let b = crate::flowpath::sample_afm_batch(&ds, &FlowPath::linear(), &mut stream(5, Stream::Data), 8, 0.05).unwrap();
        let gs = MlpSpec { time_inputs: 2, ..g_spec() };
        let g = randomized(&gs, 1);
        let d = randomized(&d_spec(), 2);
        let w = LossWeights { lambda_ot: 0.1, ..LossWeights::default() };
        let (dt, dg) = afm_d_step(&gs, &g, &d_spec(), &d, &b, &w).unwrap();
        assert!(dt.total.is_finite() && dt.r1 > 0.0 && dt.r2 > 0.0);
        assert!(dg.values().all(|t| t.all_finite()));
        let fake = afm_generate(&gs, &g, &b.x_s, &b.s, &b.t, None).unwrap();
        let expect = afm_adv_d(&d_spec(), &d, &b.real_xt, &fake, &b.t, None).unwrap();
        assert!((dt.adv - expect).abs() < 1e-12);
        let (gt, gg) = afm_g_step(&gs, &g, &d_spec(), &d, &b, &w).unwrap();
        let ot = ot_discrete(&fake, &b.x_s, &b.s, &b.t).unwrap();
        assert!((gt.ot - ot).abs() < 1e-12);
        assert!(gg.values().all(|t| t.all_finite()));
    }

    #[test]
    fn constant_discriminator_gives_zero_generator_gradient() {
        let b = batch(6, 12);
        let g = randomized(&g_spec(), 8);
        for f in [Contrastive::Ls, Contrastive::Ns, Contrastive::Hinge] {
            let (_, grads, _) = cafm_g_step(&g_spec(), &g, &d_spec(), &constant_d(0.8), &b, 1.0, f, &LossWeights::default()).unwrap();
            assert!(grads.values().all(|t| t.max_abs() == 0.0), "{f:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn spd_minimizer_is_the_sample_mean(seed in 0u64..10_000, n in 2usize..=8) {
            // M = AᵀA + I/2 is SPD by construction.
            let a = randn(n, n, seed).scale(0.5);
            let mut m = a.transpose().matmul(&a);
            (0..n).for_each(|i| m.set(i, i, m.get(i, i) + 0.5));
            let m = SpdMatrix::new(m).unwrap();
            let bs = randn(256, n, seed + 1);
            // Step size below 1/λ_max (trace bounds λ_max).
            let trace: f64 = (0..n).map(|i| m.matrix().get(i, i)).sum();
            let step = 0.5 / trace;
            let mut x = vec![0.0; n];
            for _ in 0..200_000 {
                let tape = Tape::new();
                let xv = tape.var(Tensor::row(&x));
                let loss = regression_on_tape(xv.broadcast_rows(256), tape.constant(bs.clone()), Some(&m));
                let g = tape.gradients(loss).wrt_or_zeros(xv);
                if g.sq_norm().sqrt() < 1e-8 {
                    break;
                }
                x.iter_mut().zip(g.data()).for_each(|(xi, gi)| *xi -= step * gi);
            }
            let mean = bs.col_means();
            for (xi, mi) in x.iter().zip(&mean) {
                prop_assert!((xi - mi).abs() < 1e-6);
            }
        }

        #[test]
        fn jvp_of_mean_tangent_is_mean_of_jvps(seed in 0u64..10_000) {
            let spec = d_spec();
            let d = randomized(&spec, seed);
            let point = randn(1, 2, seed + 1);
            let rows = 32;
            let x_t = Tensor::vstack(&vec![&point; rows]);
            let t = vec![0.37; rows];
            let vs = randn(rows, 2, seed + 2);
            let (_, jv) = crate::models::d_jvp(&spec, &d, &x_t, &t, &vs, 1.0, None).unwrap();
            let mean_v = Tensor::row(&vs.col_means());
            let (_, jm) = crate::models::d_jvp(&spec, &d, &point, &t[..1], &mean_v, 1.0, None).unwrap();
            let lhs = jv.mean();
            prop_assert!((lhs - jm.item()).abs() <= 1e-10 * jm.item().abs().max(1e-3));
        }

        #[test]
        fn generator_output_gradient_identity(seed in 0u64..10_000) {
            let spec = d_spec();
            let d = randomized(&spec, seed);
            let b = batch(seed, 5);
            let g_out = randn(5, 2, seed + 3);
            let (_, grad) = cafm_g_output_gradient(&spec, &d, &b, &g_out, 1.0, Contrastive::Ls).unwrap();
            // Oracle: df_ls/da = 2(a − 1) at the fake logit, times ∇_x D, over B.
            let (_, fake_logit) = crate::models::d_jvp(&spec, &d, &b.x_t, &b.t, &g_out, 1.0, None).unwrap();
            let h = 1e-6;
            for r in 0..5 {
                for j in 0..2 {
                    let mut xp = b.x_t.clone();
                    xp.set(r, j, b.x_t.get(r, j) + h);
                    let mut xm = b.x_t.clone();
                    xm.set(r, j, b.x_t.get(r, j) - h);
                    let dp = crate::models::d_forward(&spec, &d, &xp, &b.t, None).unwrap().get(r, 0);
                    let dm = crate::models::d_forward(&spec, &d, &xm, &b.t, None).unwrap().get(r, 0);
                    let jx = (dp - dm) / (2.0 * h);
                    let expect = 2.0 * (fake_logit.get(r, 0) - 1.0) * jx / 5.0;
                    let got = grad.get(r, j);
                    prop_assert!((got - expect).abs() <= 1e-5 * expect.abs().max(1e-4), "{got} vs {expect}");
                }
            }
            // The loss itself, perturbed along one output coordinate.
            let mut gp = g_out.clone();
            gp.set(2, 1, g_out.get(2, 1) + h);
            let mut gm = g_out.clone();
            gm.set(2, 1, g_out.get(2, 1) - h);
            let lp = cafm_g_output_gradient(&spec, &d, &b, &gp, 1.0, Contrastive::Ls).unwrap().0;
            let lm = cafm_g_output_gradient(&spec, &d, &b, &gm, 1.0, Contrastive::Ls).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            prop_assert!((grad.get(2, 1) - fd).abs() <= 1e-5 * fd.abs().max(1e-4));
        }
    }
}
