//! Automatic differentiation over dense `f64` tensors.
//!
//! Reverse mode is a [`Tape`] of rank-2 tensor operations; forward mode is a
//! [`Dual`] whose tangent is itself a tape node. Because tangents live on the
//! tape, a loss defined on a Jacobian-vector product can be differentiated
//! again in reverse mode, which is what adversarial training on JVP logits
//! needs.
//!
//! The entry points in this module take a [`Program`]: a closure over named
//! parameters and dual inputs, together with a declared input signature that
//! is checked before evaluation.

mod dual;
mod tape;

pub use dual::{inject_jvp_fault, Dual};
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::sigmoid;

use crate::params::{GradientMap, Parameters};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("input {index}: expected shape {expected}, got {actual:?}")]
    ShapeMismatch {
        index: usize,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("expected {expected} inputs, got {actual}")]
    Arity { expected: usize, actual: usize },
    #[error("program output has {0} elements; a scalar is required")]
    NonScalar(usize),
    #[error("at least one tangent set is required")]
    NoTangents,
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// One dimension of a declared input shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dim {
    Any,
    Exactly(usize),
}

impl std::fmt::Display for Dim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dim::Any => write!(f, "*"),
            Dim::Exactly(n) => write!(f, "{n}"),
        }
    }
}

/// Declared `rows × cols` shape of a program input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape(pub Dim, pub Dim);

impl InputShape {
    pub fn exact(rows: usize, cols: usize) -> Self {
        Self(Dim::Exactly(rows), Dim::Exactly(cols))
    }

    /// Any number of rows with a fixed width (a batch of points).
    pub fn batch(cols: usize) -> Self {
        Self(Dim::Any, Dim::Exactly(cols))
    }

    fn accepts(&self, t: &Tensor) -> bool {
        let ok = |d: Dim, n: usize| matches!(d, Dim::Any) || d == Dim::Exactly(n);
        t.is_matrix() && ok(self.0, t.shape()[0]) && ok(self.1, t.shape()[1])
    }
}

impl std::fmt::Display for InputShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.0, self.1)
    }
}

/// Parameters loaded onto a tape, looked up by name inside a program body.
pub struct ParamVars<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> ParamVars<'t> {
    /// Loads every parameter as a differentiable leaf.
    pub fn trainable(tape: &'t Tape, params: &Parameters) -> Self {
        Self {
            vars: params
                .iter()
                .map(|(n, t)| (n.clone(), tape.var(t.clone())))
                .collect(),
        }
    }

    /// Loads every parameter as a constant (no gradients accumulated).
    pub fn frozen(tape: &'t Tape, params: &Parameters) -> Self {
        Self {
            vars: params
                .iter()
                .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }

    pub fn empty() -> Self {
        Self {
            vars: BTreeMap::new(),
        }
    }

    /// Looks up a parameter. Panics with the name when it is missing.
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    /// Collects the gradient for every parameter (zeros where unreached).
    pub fn gradients(&self, grads: &Gradients) -> GradientMap {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), grads.wrt_or_zeros(*v)))
            .collect()
    }
}

/// A differentiable program: named parameters plus dual inputs in, one dual
/// value out.
pub struct Program<F> {
    inputs: Vec<InputShape>,
    body: F,
}

impl<F> Program<F>
where
    F: for<'t> Fn(&ParamVars<'t>, &[Dual<'t>]) -> Dual<'t>,
{
    pub fn new(inputs: Vec<InputShape>, body: F) -> Self {
        Self { inputs, body }
    }

    pub fn signature(&self) -> &[InputShape] {
        &self.inputs
    }

    fn check(&self, inputs: &[Tensor]) -> Result<()> {
        if inputs.len() != self.inputs.len() {
            return Err(AutodiffError::Arity {
                expected: self.inputs.len(),
                actual: inputs.len(),
            });
        }
        for (index, (spec, t)) in self.inputs.iter().zip(inputs).enumerate() {
            if !spec.accepts(t) {
                return Err(AutodiffError::ShapeMismatch {
                    index,
                    expected: spec.to_string(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn run<'t>(&self, pv: &ParamVars<'t>, inputs: &[Dual<'t>]) -> Dual<'t> {
        (self.body)(pv, inputs)
    }
}

fn check_tangents(primals: &[Tensor], tangents: &[Tensor]) -> Result<()> {
    if primals.len() != tangents.len() {
        return Err(AutodiffError::Arity {
            expected: primals.len(),
            actual: tangents.len(),
        });
    }
    for (index, (p, t)) in primals.iter().zip(tangents).enumerate() {
        if p.shape() != t.shape() {
            return Err(AutodiffError::ShapeMismatch {
                index,
                expected: format!("{:?}", p.shape()),
                actual: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Evaluates a program with no derivative bookkeeping requested.
pub fn eval<F>(program: &Program<F>, params: &Parameters, inputs: &[Tensor]) -> Result<Tensor>
where
    F: for<'t> Fn(&ParamVars<'t>, &[Dual<'t>]) -> Dual<'t>,
{
    program.check(inputs)?;
    let tape = Tape::new();
    let pv = ParamVars::frozen(&tape, params);
    let duals: Vec<Dual<'_>> = inputs
        .iter()
        .map(|t| Dual::constant(tape.constant(t.clone())))
        .collect();
    Ok(program.run(&pv, &duals).primal.value())
}

/// Value and parameter gradient of a scalar-valued program.
pub fn grad<F>(
    program: &Program<F>,
    params: &Parameters,
    inputs: &[Tensor],
) -> Result<(f64, GradientMap)>
where
    F: for<'t> Fn(&ParamVars<'t>, &[Dual<'t>]) -> Dual<'t>,
{
    program.check(inputs)?;
    let tape = Tape::new();
    let pv = ParamVars::trainable(&tape, params);
    let duals: Vec<Dual<'_>> = inputs
        .iter()
        .map(|t| Dual::constant(tape.constant(t.clone())))
        .collect();
    let out = program.run(&pv, &duals).primal;
    let n = out.rows() * out.cols();
    if n != 1 {
        return Err(AutodiffError::NonScalar(n));
    }
    let grads = tape.gradients(out);
    Ok((out.item(), pv.gradients(&grads)))
}

/// Value and Jacobian-vector product in one forward pass.
pub fn jvp<F>(
    program: &Program<F>,
    params: &Parameters,
    primals: &[Tensor],
    tangents: &[Tensor],
) -> Result<(Tensor, Tensor)>
where
    F: for<'t> Fn(&ParamVars<'t>, &[Dual<'t>]) -> Dual<'t>,
{
    let mut out = jvp_multi(program, params, primals, &[tangents.to_vec()])?;
    Ok(out.pop().expect("one tangent set"))
}

/// JVPs along several tangent sets that share one primal evaluation.
pub fn jvp_multi<F>(
    program: &Program<F>,
    params: &Parameters,
    primals: &[Tensor],
    tangent_sets: &[Vec<Tensor>],
) -> Result<Vec<(Tensor, Tensor)>>
where
    F: for<'t> Fn(&ParamVars<'t>, &[Dual<'t>]) -> Dual<'t>,
{
    program.check(primals)?;
    if tangent_sets.is_empty() {
        return Err(AutodiffError::NoTangents);
    }
    for set in tangent_sets {
        check_tangents(primals, set)?;
    }
    let k = tangent_sets.len();
    let tape = Tape::new();
    let pv = ParamVars::frozen(&tape, params);
    let duals: Vec<Dual<'_>> = primals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let stacked: Vec<&Tensor> = tangent_sets.iter().map(|s| &s[i]).collect();
            Dual::new(
                tape.constant(p.clone()),
                tape.constant(Tensor::vstack(&stacked)),
                k,
            )
        })
        .collect();
    let out = program.run(&pv, &duals);
    let value = out.primal.value();
    let rows = value.rows();
    let tangent = match out.tangent() {
        Some(t) => t.value(),
        None => Tensor::zeros(k * rows, value.cols()),
    };
    Ok((0..k)
        .map(|i| (value.clone(), tangent.slice_rows(i * rows, (i + 1) * rows)))
        .collect())
}

/// A scalar loss whose body may read the tangents of its dual inputs.
pub struct LossProgram<F> {
    inputs: Vec<InputShape>,
    body: F,
}

impl<F> LossProgram<F>
where
    F: for<'t> Fn(&ParamVars<'t>, &[Dual<'t>]) -> Var<'t>,
{
    pub fn new(inputs: Vec<InputShape>, body: F) -> Self {
        Self { inputs, body }
    }
}

/// Gradients of a loss built on JVP outputs.
#[derive(Debug, Clone)]
pub struct JvpGradients {
    pub loss: f64,
    pub params: GradientMap,
    pub tangents: Vec<Tensor>,
}

/// Differentiates a loss defined on forward-mode tangents with respect to the
/// parameters and to the input tangents (reverse-over-forward).
pub fn grad_through_jvp<F>(
    program: &LossProgram<F>,
    params: &Parameters,
    primals: &[Tensor],
    tangents: &[Tensor],
) -> Result<JvpGradients>
where
    F: for<'t> Fn(&ParamVars<'t>, &[Dual<'t>]) -> Var<'t>,
{
    let shape_check = Program::new(program.inputs.clone(), |_: &ParamVars<'_>, x: &[Dual<'_>]| x[0]);
    shape_check.check(primals)?;
    check_tangents(primals, tangents)?;
    let tape = Tape::new();
    let pv = ParamVars::trainable(&tape, params);
    let tangent_vars: Vec<Var<'_>> = tangents.iter().map(|t| tape.var(t.clone())).collect();
    let duals: Vec<Dual<'_>> = primals
        .iter()
        .zip(&tangent_vars)
        .map(|(p, &t)| Dual::new(tape.constant(p.clone()), t, 1))
        .collect();
    let loss = (program.body)(&pv, &duals);
    let n = loss.rows() * loss.cols();
    if n != 1 {
        return Err(AutodiffError::NonScalar(n));
    }
    let grads = tape.gradients(loss);
    Ok(JvpGradients {
        loss: loss.item(),
        params: pv.gradients(&grads),
        tangents: tangent_vars.iter().map(|&v| grads.wrt_or_zeros(v)).collect(),
    })
}

/// Central-difference directional derivative
/// `(f(x + h·ẋ) − f(x − h·ẋ)) / 2h`.
pub fn finite_diff_jvp(
    f: impl Fn(&[Tensor]) -> Tensor,
    primals: &[Tensor],
    tangents: &[Tensor],
    step: f64,
) -> Result<Tensor> {
    if step.is_nan() || step <= 0.0 {
        return Err(AutodiffError::BadStep(step));
    }
    check_tangents(primals, tangents)?;
    let shifted = |sign: f64| -> Vec<Tensor> {
        primals
            .iter()
            .zip(tangents)
            .map(|(p, t)| {
                let mut q = p.clone();
                q.add_scaled(t, sign * step);
                q
            })
            .collect()
    };
    let plus = f(&shifted(1.0));
    let minus = f(&shifted(-1.0));
    Ok(plus.sub(&minus).scale(0.5 / step))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_prog() -> Program<impl for<'t> Fn(&ParamVars<'t>, &[Dual<'t>]) -> Dual<'t>> {
        Program::new(vec![InputShape::exact(1, 1)], |_: &ParamVars<'_>, x: &[Dual<'_>]| {
            x[0].square()
        })
    }

    #[test]
    fn eval_square_add_sum() {
        let p = Parameters::new();
        assert_eq!(eval(&square_prog(), &p, &[Tensor::scalar(3.0)]).unwrap().item(), 9.0);

        let add = Program::new(
            vec![InputShape::exact(1, 1), InputShape::exact(1, 1)],
            |_: &ParamVars<'_>, x: &[Dual<'_>]| x[0].add(x[1]),
        );
        let out = eval(&add, &p, &[Tensor::scalar(1.0), Tensor::scalar(2.0)]).unwrap();
        assert_eq!(out.item(), 3.0);

        let sum = Program::new(vec![InputShape::batch(3)], |_: &ParamVars<'_>, x: &[Dual<'_>]| {
            x[0].sum()
        });
        assert_eq!(eval(&sum, &p, &[Tensor::row(&[1.0, 2.0, 3.0])]).unwrap().item(), 6.0);
    }

    #[test]
    fn eval_rejects_shape_mismatch() {
        let err = eval(&square_prog(), &Parameters::new(), &[Tensor::zeros(2, 1)]).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                index: 0,
                expected: "[1, 1]".into(),
                actual: vec![2, 1]
            }
        );
        assert!(err.to_string().contains("expected shape [1, 1]"));
    }

    #[test]
    fn grad_of_simple_parametric_programs() {
        let mut params = Parameters::new();
        params.insert("p", Tensor::scalar(2.0));
        let linear = Program::new(vec![InputShape::exact(1, 1)], |pv: &ParamVars<'_>, x: &[Dual<'_>]| {
            x[0].matmul(pv.get("p"))
        });
        let (v, g) = grad(&linear, &params, &[Tensor::scalar(5.0)]).unwrap();
        assert_eq!(v, 10.0);
        assert_eq!(g["p"].item(), 5.0);

        let mut params = Parameters::new();
        params.insert("p", Tensor::scalar(3.0));
        let sq = Program::new(vec![], |pv: &ParamVars<'_>, _: &[Dual<'_>]| {
            Dual::constant(pv.get("p")).square()
        });
        assert_eq!(grad(&sq, &params, &[]).unwrap().1["p"].item(), 6.0);
    }

    #[test]
    fn grad_rejects_non_scalar() {
        let p = Parameters::new();
        let id = Program::new(vec![InputShape::batch(2)], |_: &ParamVars<'_>, x: &[Dual<'_>]| x[0]);
        assert_eq!(
            grad(&id, &p, &[Tensor::zeros(1, 2)]).unwrap_err(),
            AutodiffError::NonScalar(2)
        );
    }

    #[test]
    fn jvp_square_and_constant() {
        let p = Parameters::new();
        let (v, t) = jvp(&square_prog(), &p, &[Tensor::scalar(3.0)], &[Tensor::scalar(1.0)]).unwrap();
        assert_eq!((v.item(), t.item()), (9.0, 6.0));

        let c = Program::new(vec![InputShape::exact(1, 1)], |_: &ParamVars<'_>, x: &[Dual<'_>]| {
            Dual::constant(x[0].primal.tape().constant(Tensor::scalar(4.0)))
        });
        let (v, t) = jvp(&c, &p, &[Tensor::scalar(3.0)], &[Tensor::scalar(7.0)]).unwrap();
        assert_eq!((v.item(), t.item()), (4.0, 0.0));
    }

    #[test]
    fn jvp_rejects_mismatched_tangent() {
        let err = jvp(&square_prog(), &Parameters::new(), &[Tensor::scalar(3.0)], &[Tensor::zeros(1, 2)])
            .unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { .. }));
    }

    #[test]
    fn jvp_multi_on_linear_map_returns_columns() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mut params = Parameters::new();
        params.insert("at", a.transpose());
        let lin = Program::new(vec![InputShape::exact(1, 2)], |pv: &ParamVars<'_>, x: &[Dual<'_>]| {
            x[0].matmul(pv.get("at"))
        });
        let x = Tensor::row(&[0.5, -1.0]);
        let e1 = Tensor::row(&[1.0, 0.0]);
        let e2 = Tensor::row(&[0.0, 1.0]);
        let out = jvp_multi(&lin, &params, &[x.clone()], &[vec![e1], vec![e2]]).unwrap();
        assert_eq!(out[0].1.data(), &[1.0, 3.0]);
        assert_eq!(out[1].1.data(), &[2.0, 4.0]);
        assert_eq!(out[0].0, out[1].0);
        assert_eq!(
            jvp_multi(&lin, &params, &[x], &[]).unwrap_err(),
            AutodiffError::NoTangents
        );
    }

    #[test]
    fn grad_through_jvp_scalar_example() {
        // D(x; w) = w·x², loss = (D_jvp)², at w = x = ẋ = 1: D_jvp = 2, ∂loss/∂w = 8.
        let mut params = Parameters::new();
        params.insert("w", Tensor::scalar(1.0));
        let loss = LossProgram::new(vec![InputShape::exact(1, 1)], |pv: &ParamVars<'_>, x: &[Dual<'_>]| {
            let d = x[0].square().matmul(pv.get("w"));
            d.tangent().unwrap().square().sum()
        });
        let g = grad_through_jvp(&loss, &params, &[Tensor::scalar(1.0)], &[Tensor::scalar(1.0)]).unwrap();
        assert_eq!(g.loss, 4.0);
        assert!((g.params["w"].item() - 8.0).abs() < 1e-12);
        // ∂loss/∂ẋ = 2·D_jvp·2wx = 8.
        assert!((g.tangents[0].item() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn grad_through_jvp_tangent_independent_loss() {
        let params = Parameters::new();
        let loss = LossProgram::new(vec![InputShape::exact(1, 1)], |_: &ParamVars<'_>, x: &[Dual<'_>]| {
            x[0].primal.square().sum()
        });
        let g = grad_through_jvp(&loss, &params, &[Tensor::scalar(2.0)], &[Tensor::scalar(1.0)]).unwrap();
        assert_eq!(g.tangents[0].item(), 0.0);
    }

    #[test]
    fn grad_through_jvp_linear_d_gives_coefficients() {
        let mut params = Parameters::new();
        params.insert("a", Tensor::column(&[3.0, -2.0]));
        let loss = LossProgram::new(vec![InputShape::exact(1, 2)], |pv: &ParamVars<'_>, x: &[Dual<'_>]| {
            x[0].matmul(pv.get("a")).tangent().unwrap().sum()
        });
        let g = grad_through_jvp(&loss, &params, &[Tensor::row(&[0.3, 0.4])], &[Tensor::row(&[1.0, 1.0])])
            .unwrap();
        assert_eq!(g.tangents[0].data(), &[3.0, -2.0]);
    }

    #[test]
    fn finite_diff_examples() {
        let sq = |x: &[Tensor]| x[0].map(|v| v * v);
        let d = finite_diff_jvp(sq, &[Tensor::scalar(3.0)], &[Tensor::scalar(1.0)], 1e-5).unwrap();
        assert!((d.item() - 6.0).abs() <= 1e-8);

        let lin = |x: &[Tensor]| x[0].scale(2.5);
        for step in [1e-3, 0.5, 4.0] {
            let d = finite_diff_jvp(lin, &[Tensor::scalar(1.0)], &[Tensor::scalar(2.0)], step).unwrap();
            assert!((d.item() - 5.0).abs() < 1e-12);
        }

        let sin = |x: &[Tensor]| x[0].map(f64::sin);
        let d = finite_diff_jvp(sin, &[Tensor::scalar(0.0)], &[Tensor::scalar(1.0)], 1e-5).unwrap();
        assert!((d.item() - 1.0).abs() < 1e-9);

        assert_eq!(
            finite_diff_jvp(sin, &[Tensor::scalar(0.0)], &[Tensor::scalar(1.0)], 0.0).unwrap_err(),
            AutodiffError::BadStep(0.0)
        );
    }
}
