//! Numerical self-checks: derivative code against finite differences, loss
//! identities, the analytic oracle against quadrature, and sampler orders.
//!
//! Each suite returns the worst error it saw, so callers can apply their own
//! tolerance. [`run`] applies the defaults below.

use cafm::autodiff::{self, finite_diff_jvp, Dual, InputShape, ParamVars, Program};
use cafm::eval::{convergence_slope, path_consistency, path_terms, straight_path};
use cafm::flowpath::{sample_batch, sample_noise, FlowPath, TimeSampler, TrainingBatch};
use cafm::models::{d_forward, d_jvp, MlpSpec, Norm};
use cafm::objectives::{
    cafm_d_loss, cafm_d_step, cafm_g_loss, cafm_g_output_gradient, cafm_g_step, spd_loss, Contrastive, LossWeights,
    SpdMatrix,
};
use cafm::oracle::{
    quadrature_conditional_velocity, velocity_to_score, Dataset, GaussianMixture, GridSpec, SCORE_T_FLOOR,
};
use cafm::rng::{stream, substream, Stream};
use cafm::samplers::{euler_maruyama_sde, euler_ode, heun_ode, OracleField, SamplerConfig, SamplerKind};
use cafm::{Parameters, Tensor};
use std::time::Instant;

pub const JVP_FD_TOL: f64 = 1e-6;
pub const GRAD_FD_TOL: f64 = 1e-6;
pub const GRAD_THROUGH_JVP_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;
pub const SPD_TOL: f64 = 1e-6;
pub const LINEARITY_TOL: f64 = 1e-10;
pub const PATH_TOL: f64 = 1e-3;
pub const PATH_NODES: usize = 1024;
pub const IDENTITY_TOL: f64 = 1e-5;
pub const QUADRATURE_TOL: f64 = 1e-4;
pub const SCORE_FD_TOL: f64 = 1e-6;
pub const VELOCITY_SCORE_TOL: f64 = 1e-8;
pub const EULER_SLOPE: (f64, f64) = (1.0, 0.15);
pub const HEUN_SLOPE: (f64, f64) = (2.0, 0.25);
pub const SDE_VARIANCE_TOL: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<20} {} ({:.2}s)", self.name, self.detail, self.seconds)
    }
}

type Outcome = Result<(bool, String), String>;

fn timed(name: &'static str, body: impl FnOnce() -> Outcome) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
    sample_noise(&mut substream(seed, Stream::Init, 7), rows, cols)
}

/// Fresh parameters plus `0.3·N(0, 1)` noise on every entry, so that no
/// layer is left at zero.
pub fn randomized(spec: &MlpSpec, seed: u64) -> Parameters {
    let mut p = spec.init(seed).expect("valid spec");
    let mut rng = substream(seed, Stream::Init, 99);
    for (_, t) in p.iter_mut() {
        let noise = sample_noise(&mut rng, t.rows(), t.cols());
        t.add_scaled(&noise, 0.3);
    }
    p
}

fn mlp(out_dim: usize, hidden: Vec<usize>, norm: Norm) -> MlpSpec {
    MlpSpec {
        in_dim: 2,
        hidden,
        norm,
        time_embed_dim: 8,
        num_classes: None,
        out_dim,
        time_inputs: 1,
    }
}

fn ring_batch(seed: u64, size: usize) -> TrainingBatch {
    let ds = Dataset::preset("ring8").expect("preset");
    sample_batch(&ds, &FlowPath::linear(), &TimeSampler::uniform(), &mut stream(seed, Stream::Data), size, 0.0)
        .expect("valid batch")
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central differences of `loss` in every entry of `params`, compared with
/// `grads`; returns the worst relative error.
fn check_param_grads(
    params: &Parameters,
    grads: &cafm::GradientMap,
    loss: impl Fn(&Parameters) -> Result<f64, String>,
) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).expect("name").len();
        let zero = Tensor::zeros(params.get(&name).unwrap().rows(), params.get(&name).unwrap().cols());
        let g = grads.get(&name).unwrap_or(&zero);
        for i in 0..n {
            let base = params.get(&name).unwrap().data()[i];
            p.get_mut(&name).unwrap().data_mut()[i] = base + FD_STEP;
            let lp = loss(&p)?;
            p.get_mut(&name).unwrap().data_mut()[i] = base - FD_STEP;
            let lm = loss(&p)?;
            p.get_mut(&name).unwrap().data_mut()[i] = base;
            let fd = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(rel(g.data()[i], fd, 1e-3));
        }
    }
    Ok(worst)
}

/// Discriminator JVPs against central differences on random three-layer
/// networks, and generator parameter gradients against central differences.
/// Returns `(worst JVP error, worst gradient error)`.
pub fn jvp_and_grad_vs_fd(seed: u64) -> Result<(f64, f64), String> {
    let mut worst_jvp: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for (i, norm) in [Norm::Rms, Norm::Layer, Norm::None].into_iter().enumerate() {
        let s = seed + 10 * i as u64;
        let spec = mlp(1, vec![16, 16, 16], norm);
        let p = randomized(&spec, s);
        let x = randn(6, 2, s + 1);
        let t = vec![0.05, 0.2, 0.4, 0.6, 0.8, 0.95];
        let u = randn(6, 2, s + 2);
        let (_, jv) = d_jvp(&spec, &p, &x, &t, &u, 1.0, None).map_err(err)?;
        let fd = finite_diff_jvp(
            |inp| d_forward(&spec, &p, &inp[0], inp[1].data(), None).expect("forward"),
            &[x.clone(), Tensor::column(&t)],
            &[u, Tensor::full(6, 1, 1.0)],
            FD_STEP,
        )
        .map_err(err)?;
        worst_jvp = worst_jvp.max(jv.sub(&fd).max_abs() / fd.max_abs().max(1e-8));

        let g_spec = mlp(2, vec![16, 16, 16], norm);
        let gp = randomized(&g_spec, s + 3);
        let sp = g_spec.clone();
        let program = Program::new(
            vec![InputShape::batch(2), InputShape::batch(1)],
            move |pv: &ParamVars<'_>, inp: &[Dual<'_>]| sp.apply(pv, inp[0], &[inp[1]], None).expect("apply").square().sum(),
        );
        let inputs = [x, Tensor::column(&t)];
        let (_, grads) = autodiff::grad(&program, &gp, &inputs).map_err(err)?;
        let e = check_param_grads(&gp, &grads, |q| {
            autodiff::eval(&program, q, &inputs).map(|v| v.item()).map_err(err)
        })?;
        worst_grad = worst_grad.max(e);
    }
    Ok((worst_jvp, worst_grad))
}

/// Parameter gradients of losses defined on JVPs (both discriminator and
/// generator sides of the continuous adversarial objective) against central
/// differences of the loss values.
pub fn grad_through_jvp_vs_fd(seed: u64) -> Result<f64, String> {
    let d_spec = mlp(1, vec![12, 12, 12], Norm::Rms);
    let g_spec = mlp(2, vec![12, 12, 12], Norm::Rms);
    let mut worst: f64 = 0.0;
    for (i, f) in [Contrastive::Ls, Contrastive::Ns].into_iter().enumerate() {
        let s = seed + 20 * i as u64;
        let d = randomized(&d_spec, s);
        let g = randomized(&g_spec, s + 1);
        let b = ring_batch(s + 2, 6);
        let g_out = randn(6, 2, s + 3);
        let no_cp = LossWeights {
            lambda_cp: 0.0,
            ..LossWeights::default()
        };
        let (_, d_grads) = cafm_d_step(&d_spec, &d, &b, &g_out, 1.0, f, &no_cp).map_err(err)?;
        worst = worst.max(check_param_grads(&d, &d_grads, |q| {
            cafm_d_loss(&d_spec, q, &b, &g_out, 1.0, f).map_err(err)
        })?);
        let no_ot = LossWeights {
            lambda_ot: 0.0,
            ..LossWeights::default()
        };
        let (_, g_grads, _) = cafm_g_step(&g_spec, &g, &d_spec, &d, &b, 1.0, f, &no_ot).map_err(err)?;
        worst = worst.max(check_param_grads(&g, &g_grads, |q| {
            cafm_g_loss(&g_spec, q, &d_spec, &d, &b, 1.0, f).map_err(err)
        })?);
    }
    Ok(worst)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients on a function treated as a black box: central
/// difference gradients and a three-point parabolic line search.
fn minimize(f: &dyn Fn(&[f64]) -> f64, n: usize) -> Vec<f64> {
    let h = 1e-3;
    let grad = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    };
    let along = |x: &[f64], d: &[f64], a: f64| -> Vec<f64> { x.iter().zip(d).map(|(xi, di)| xi + a * di).collect() };
    let mut x = vec![0.0; n];
    for _restart in 0..4 {
        let mut g = grad(&x);
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        for _ in 0..n {
            let gg = dot(&g, &g);
            if gg < 1e-30 {
                break;
            }
            let s = 1.0 / dot(&d, &d).sqrt();
            let (fp, f0, fm) = (f(&along(&x, &d, s)), f(&x), f(&along(&x, &d, -s)));
            let curvature = fp - 2.0 * f0 + fm;
            if !(curvature > 0.0) {
                break;
            }
            x = along(&x, &d, s * (fm - fp) / (2.0 * curvature));
            let g_new = grad(&x);
            let beta = dot(&g_new, &g_new) / gg;
            d = d.iter().zip(&g_new).map(|(di, gi)| -gi + beta * di).collect();
            g = g_new;
        }
    }
    x
}

/// For random SPD metrics `M` (dimensions 2 to 8) and 256-point sets `b`,
/// numerically minimizes `mean_i (a − b_i)ᵀ M (a − b_i)` over `a` and
/// returns the worst L∞ distance from the sample mean.
pub fn spd_minimizer(seed: u64, cases: usize) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for case in 0..cases as u64 {
        let n = 2 + (case as usize) % 7;
        let a = randn(n, n, seed + case).scale(0.7);
        let mut m = a.transpose().matmul(&a);
        (0..n).for_each(|i| m.set(i, i, m.get(i, i) + 0.2));
        let metric = SpdMatrix::new(m).map_err(err)?;
        let b = randn(256, n, seed + 1000 + case).map(|v| 1.5 * v + 0.5);
        let loss = |x: &[f64]| -> f64 {
            let row = Tensor::row(x);
            let a = Tensor::vstack(&vec![&row; 256]);
            spd_loss(&a, &b, &metric).expect("shapes agree")
        };
        let x = minimize(&loss, n);
        let mean = b.col_means();
        worst = x.iter().zip(&mean).map(|(xi, mi)| (xi - mi).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

/// Linearity of the discriminator JVP in its tangent: the batch mean of JVPs
/// along conditional velocities through one point equals the JVP along their
/// mean, and `J(a·u + b·v) = a·J(u) + b·J(v)` in general. Returns the worst
/// relative error.
pub fn jvp_linearity(seed: u64) -> Result<f64, String> {
    let spec = mlp(1, vec![32, 32, 32], Norm::Rms);
    let data = Dataset::preset("ring8").map_err(err)?;
    let mut worst: f64 = 0.0;
    for trial in 0..5u64 {
        let s = seed + 7 * trial;
        let p = randomized(&spec, s);
        let mut rng = stream(s, Stream::Data);
        let point = randn(1, 2, s + 1).scale(2.0);
        let t = 0.1 + 0.8 * (trial as f64) / 4.0;
        let rows = 64;
        // Conditional velocities z − x of data points x whose interpolant
        // passes through `point` at time t.
        let x = data.mixture.sample(&mut rng, rows);
        let mut v = Tensor::zeros(rows, 2);
        for r in 0..rows {
            for d in 0..2 {
                let xd = x.get(r, d);
                let z = (point.get(0, d) - (1.0 - t) * xd) / t;
                v.set(r, d, z - xd);
            }
        }
        let x_t = Tensor::vstack(&vec![&point; rows]);
        let ts = vec![t; rows];
        let (_, jv) = d_jvp(&spec, &p, &x_t, &ts, &v, 1.0, None).map_err(err)?;
        let mean_v = Tensor::row(&v.col_means());
        let (_, jm) = d_jvp(&spec, &p, &point, &[t], &mean_v, 1.0, None).map_err(err)?;
        worst = worst.max(rel(jv.mean(), jm.item(), 1e-3));

        let xs = randn(4, 2, s + 2);
        let t4 = [0.2, 0.4, 0.6, 0.8];
        let u = randn(4, 2, s + 3);
        let w = randn(4, 2, s + 4);
        let (a, b) = (1.7, -0.6);
        let (_, ju) = d_jvp(&spec, &p, &xs, &t4, &u, 1.0, None).map_err(err)?;
        let (_, jw) = d_jvp(&spec, &p, &xs, &t4, &w, 0.5, None).map_err(err)?;
        let mut comb = u.scale(a);
        comb.add_scaled(&w, b);
        let (_, jc) = d_jvp(&spec, &p, &xs, &t4, &comb, a + 0.5 * b, None).map_err(err)?;
        let mut expect = ju.scale(a);
        expect.add_scaled(&jw, b);
        worst = worst.max(jc.sub(&expect).max_abs() / expect.max_abs().max(1e-3));
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathReport {
    /// Worst `|∫ − ΔD| / |ΔD|` over the random networks and paths.
    pub worst_relative: f64,
    /// `|ΔD|` on the path attaining `worst_relative`.
    pub delta_at_worst: f64,
    /// Worst `|∫ − ΔD| / ∫|D_jvp|`.
    pub worst_relative_to_variation: f64,
    /// Discrepancy for a linear and a constant potential, which must vanish.
    pub exact_gap: f64,
}

/// Trapezoid integral of `D_jvp` along straight paths against the change in
/// `D`, for three random networks with three paths each.
pub fn trajectory_consistency(seed: u64) -> Result<PathReport, String> {
    let mut worst = 0.0;
    let mut delta_at_worst = 0.0;
    let mut worst_tv: f64 = 0.0;
    for net in 0..3u64 {
        let spec = mlp(1, vec![16, 16], Norm::Rms);
        let p = randomized(&spec, seed + net);
        for path in 0..3u64 {
            let ends = randn(2, 2, seed + 100 + 3 * net + path).scale(1.5);
            let (pts, vel, ts) = straight_path(ends.row_slice(0), ends.row_slice(1), PATH_NODES);
            let terms = path_terms(&spec, &p, &pts, &vel, &ts).map_err(err)?;
            if terms.relative() > worst {
                worst = terms.relative();
                delta_at_worst = terms.delta.abs();
            }
            worst_tv = worst_tv.max(terms.relative_to_variation());
        }
    }

    // D(x, t) = x·w + c·t with dyadic coefficients: the JVP is the constant 2,
    // so the trapezoid sum telescopes without rounding.
    let mut lin = Parameters::new();
    lin.insert("w", Tensor::column(&[0.5, -0.25]));
    lin.insert("c", Tensor::scalar(0.75));
    let program = Program::new(
        vec![InputShape::batch(2), InputShape::batch(1)],
        |pv: &ParamVars<'_>, inp: &[Dual<'_>]| inp[0].matmul(pv.get("w")).add(inp[1].matmul(pv.get("c"))),
    );
    let (pts, vel, ts) = straight_path(&[-1.0, 0.5], &[1.0, -0.5], PATH_NODES);
    let t_col = Tensor::column(&ts);
    let (d, jv) = autodiff::jvp(&program, &lin, &[pts, t_col], &[vel, Tensor::full(ts.len(), 1, 1.0)]).map_err(err)?;
    let mut integral = 0.0;
    for i in 1..ts.len() {
        integral += 0.5 * (ts[i] - ts[i - 1]) * (jv.get(i, 0) + jv.get(i - 1, 0));
    }
    let delta = d.get(ts.len() - 1, 0) - d.get(0, 0);
    let mut exact = (integral - delta).abs() / (delta.abs() + 1e-9);

    let constant = mlp(1, vec![16, 16], Norm::Rms);
    let zero = constant.init(seed).map_err(err)?;
    let (pts, vel, ts) = straight_path(&[0.0, 0.0], &[1.0, 1.0], PATH_NODES);
    exact = exact.max(path_consistency(&constant, &zero, &pts, &vel, &ts).map_err(err)?);
    Ok(PathReport {
        worst_relative: worst,
        delta_at_worst,
        worst_relative_to_variation: worst_tv,
        exact_gap: exact,
    })
}

/// A discriminator that is identically `value`: all weights zero and the
/// output bias set.
pub fn constant_discriminator(spec: &MlpSpec, value: f64) -> Parameters {
    let mut p = spec.init(0).expect("valid spec");
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    p.get_mut("out.bias").expect("output bias").data_mut()[0] = value;
    p
}

/// Gradient of the least-squares generator loss with respect to the
/// generator output against `2(a − 1)·∇ₓD / B` (with `∇ₓD` by central
/// differences) and against central differences of the loss itself.
/// Returns `(worst relative error, largest gradient for a constant D)`.
pub fn gradient_identity(seed: u64) -> Result<(f64, f64), String> {
    let spec = mlp(1, vec![16, 16], Norm::Rms);
    let rows = 5;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for trial in 0..4u64 {
        let s = seed + 11 * trial;
        let d = randomized(&spec, s);
        let b = ring_batch(s + 1, rows);
        let g_out = randn(rows, 2, s + 2);
        let (_, grad) = cafm_g_output_gradient(&spec, &d, &b, &g_out, 1.0, Contrastive::Ls).map_err(err)?;
        let (_, fake) = d_jvp(&spec, &d, &b.x_t, &b.t, &g_out, 1.0, None).map_err(err)?;
        for r in 0..rows {
            for j in 0..2 {
                let mut xp = b.x_t.clone();
                xp.set(r, j, b.x_t.get(r, j) + h);
                let mut xm = b.x_t.clone();
                xm.set(r, j, b.x_t.get(r, j) - h);
                let dp = d_forward(&spec, &d, &xp, &b.t, None).map_err(err)?.get(r, 0);
                let dm = d_forward(&spec, &d, &xm, &b.t, None).map_err(err)?.get(r, 0);
                let expect = 2.0 * (fake.get(r, 0) - 1.0) * (dp - dm) / (2.0 * h) / rows as f64;
                worst = worst.max(rel(grad.get(r, j), expect, 1e-4));

                let mut gp = g_out.clone();
                gp.set(r, j, g_out.get(r, j) + h);
                let mut gm = g_out.clone();
                gm.set(r, j, g_out.get(r, j) - h);
                let lp = cafm_g_output_gradient(&spec, &d, &b, &gp, 1.0, Contrastive::Ls).map_err(err)?.0;
                let lm = cafm_g_output_gradient(&spec, &d, &b, &gm, 1.0, Contrastive::Ls).map_err(err)?.0;
                worst = worst.max(rel(grad.get(r, j), (lp - lm) / (2.0 * h), 1e-4));
            }
        }
    }
    let flat = constant_discriminator(&spec, 0.8);
    let b = ring_batch(seed + 99, 8);
    let g_out = randn(8, 2, seed + 98);
    let mut constant_max: f64 = 0.0;
    for f in [Contrastive::Ls, Contrastive::Ns, Contrastive::Hinge] {
        let (_, grad) = cafm_g_output_gradient(&spec, &flat, &b, &g_out, 1.0, f).map_err(err)?;
        constant_max = constant_max.max(grad.max_abs());
    }
    Ok((worst, constant_max))
}

/// Closed-form marginal velocity of the 1-D two-component preset against
/// brute-force quadrature on an 8 × 8 grid of `(x, t)`. Returns the worst
/// absolute error.
pub fn oracle_vs_quadrature() -> Result<f64, String> {
    let gm = Dataset::preset("gm1d2").map_err(err)?.mixture;
    let xs: Vec<f64> = (0..8).map(|j| -3.0 + 6.0 * j as f64 / 7.0).collect();
    let x = Tensor::column(&xs);
    let mut worst: f64 = 0.0;
    for i in 0..8 {
        let t = 0.05 + 0.9 * i as f64 / 7.0;
        let q = quadrature_conditional_velocity(&gm, &x, t, GridSpec::for_dim(1)).map_err(err)?;
        let c = gm.marginal_velocity(&x, t).map_err(err)?;
        worst = worst.max(q.sub(&c).max_abs());
    }
    Ok(worst)
}

/// Returns `(worst relative error of the marginal score against central
/// differences of the log density, worst absolute gap between the score
/// recovered from the velocity and the closed-form score for t ∈ [0.05, 1])`.
pub fn velocity_score() -> Result<(f64, f64), String> {
    let h = 1e-6;
    let presets: Vec<GaussianMixture> = ["gm1d2", "ring8"]
        .iter()
        .map(|n| Dataset::preset(n).map(|d| d.mixture))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let mut worst_fd: f64 = 0.0;
    let mut worst_id: f64 = 0.0;
    for (k, gm) in presets.iter().enumerate() {
        let x = gm.sample(&mut stream(40 + k as u64, Stream::Eval), 8).map(|v| 0.8 * v + 0.1);
        for i in 0..=19 {
            let t = 0.05 + 0.95 * i as f64 / 19.0;
            let score = gm.marginal_score(&x, t).map_err(err)?;
            let v = gm.marginal_velocity(&x, t).map_err(err)?;
            let from_v = velocity_to_score(&v, &x, t, SCORE_T_FLOOR).map_err(err)?;
            worst_id = worst_id.max(from_v.sub(&score).max_abs());
            if i % 4 != 0 {
                continue;
            }
            for r in 0..x.rows() {
                for d in 0..x.cols() {
                    let mut xp = x.slice_rows(r, r + 1);
                    let mut xm = xp.clone();
                    xp.set(0, d, x.get(r, d) + h);
                    xm.set(0, d, x.get(r, d) - h);
                    let lp = gm.log_density_t(&xp, t).map_err(err)?.item();
                    let lm = gm.log_density_t(&xm, t).map_err(err)?.item();
                    worst_fd = worst_fd.max(rel(score.get(r, d), (lp - lm) / (2.0 * h), 1.0));
                }
            }
        }
    }
    Ok((worst_fd, worst_id))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerOrders {
    pub euler_slope: f64,
    pub heun_slope: f64,
    pub sde_variance: f64,
    pub ode_variance: f64,
}

impl SamplerOrders {
    pub fn variance_gap(&self) -> f64 {
        (self.sde_variance - self.ode_variance).abs() / self.ode_variance
    }

    pub fn passes(&self) -> bool {
        (self.euler_slope - EULER_SLOPE.0).abs() <= EULER_SLOPE.1
            && (self.heun_slope - HEUN_SLOPE.0).abs() <= HEUN_SLOPE.1
            && self.variance_gap() <= SDE_VARIANCE_TOL
    }
}

/// Global-error slopes of Euler and Heun over 8 to 128 steps on the oracle
/// field of the single Gaussian `N(1, 0.5²)`, whose exact flow map is
/// `x₀ = 1 + 0.5·x₁`, and the terminal variance of the SDE sampler against the
/// ODE at 250 steps on the standard Gaussian.
///
/// The standard Gaussian is not used for the slopes: its field
/// `x(2t − 1)/((1 − t)² + t²)` is odd about `t = 1/2`, which cancels the
/// leading Heun error term and shows third-order convergence.
pub fn sampler_orders() -> Result<SamplerOrders, String> {
    let (mu, sd) = (1.0, 0.5);
    let gm = GaussianMixture::new(vec![1.0], Tensor::scalar(mu), vec![sd]).map_err(err)?;
    let field = OracleField(&gm);
    let x1 = Tensor::column(&[-1.5, -0.4, 0.7, 2.0]);
    let exact = x1.map(|v| mu + sd * v);
    let mut euler = Vec::new();
    let mut heun = Vec::new();
    for steps in [8, 16, 32, 64, 128] {
        let e = euler_ode(&field, &x1, &SamplerConfig::new(SamplerKind::Euler, steps)).map_err(err)?;
        let h = heun_ode(&field, &x1, &SamplerConfig::new(SamplerKind::Heun, steps)).map_err(err)?;
        euler.push((steps, e.sub(&exact).max_abs()));
        heun.push((steps, h.sub(&exact).max_abs()));
    }
    let gm = Dataset::preset("gauss1d").map_err(err)?.mixture;
    let field = OracleField(&gm);
    let noise = sample_noise(&mut stream(5, Stream::Sampler), 10_000, 1);
    let variance = |x: &Tensor| {
        let m = x.mean();
        x.map(|v| (v - m) * (v - m)).mean()
    };
    let ode = euler_ode(&field, &noise, &SamplerConfig::new(SamplerKind::Euler, 250)).map_err(err)?;
    let sde_cfg = SamplerConfig::new(SamplerKind::Sde, 250);
    let sde = euler_maruyama_sde(&field, &noise, &sde_cfg, &mut stream(6, Stream::Sampler)).map_err(err)?;
    Ok(SamplerOrders {
        euler_slope: convergence_slope(&euler).map_err(err)?,
        heun_slope: convergence_slope(&heun).map_err(err)?,
        sde_variance: variance(&sde),
        ode_variance: variance(&ode),
    })
}

/// Runs every suite and prints one line per suite. `inject_fault` corrupts
/// the forward-mode SiLU rule for the duration, as a negative control.
pub fn cmd_selftest(seed: u64, inject_fault: bool) -> Vec<SuiteResult> {
    autodiff::inject_jvp_fault(inject_fault);
    let results = run(seed);
    autodiff::inject_jvp_fault(false);
    for r in &results {
        println!("{r}");
    }
    results
}

/// Runs every suite at its default tolerance.
pub fn run(seed: u64) -> Vec<SuiteResult> {
    vec![
        timed("spd-minimizer", || {
            let e = spd_minimizer(seed, 20)?;
            Ok((e <= SPD_TOL, format!("max |argmin - mean| = {e:.2e} (tol {SPD_TOL:.0e})")))
        }),
        timed("jvp-linearity", || {
            let e = jvp_linearity(seed)?;
            Ok((e <= LINEARITY_TOL, format!("max rel err = {e:.2e} (tol {LINEARITY_TOL:.0e})")))
        }),
        timed("jvp-vs-fd", || {
            let (j, g) = jvp_and_grad_vs_fd(seed)?;
            Ok((
                j <= JVP_FD_TOL && g <= GRAD_FD_TOL,
                format!("jvp rel err = {j:.2e}, grad rel err = {g:.2e} (tol {JVP_FD_TOL:.0e})"),
            ))
        }),
        timed("grad-through-jvp", || {
            let e = grad_through_jvp_vs_fd(seed)?;
            Ok((e <= GRAD_THROUGH_JVP_TOL, format!("max rel err = {e:.2e} (tol {GRAD_THROUGH_JVP_TOL:.0e})")))
        }),
        timed("path-consistency", || {
            let r = trajectory_consistency(seed)?;
            Ok((
                r.worst_relative_to_variation <= PATH_TOL && r.exact_gap == 0.0,
                format!(
                    "gap / total variation = {:.2e} (tol {PATH_TOL:.0e}), gap / |dD| = {:.2e} at |dD| = {:.3}, linear D gap = {}",
                    r.worst_relative_to_variation, r.worst_relative, r.delta_at_worst, r.exact_gap
                ),
            ))
        }),
        timed("gradient-identity", || {
            let (e, flat) = gradient_identity(seed)?;
            Ok((
                e <= IDENTITY_TOL && flat == 0.0,
                format!("max rel err = {e:.2e} (tol {IDENTITY_TOL:.0e}), constant D grad = {flat}"),
            ))
        }),
        timed("oracle-quadrature", || {
            let e = oracle_vs_quadrature()?;
            Ok((e <= QUADRATURE_TOL, format!("max abs err = {e:.2e} (tol {QUADRATURE_TOL:.0e})")))
        }),
        timed("velocity-score", || {
            let (fd, id) = velocity_score()?;
            Ok((
                fd <= SCORE_FD_TOL && id <= VELOCITY_SCORE_TOL,
                format!("score vs fd = {fd:.2e}, velocity->score = {id:.2e}"),
            ))
        }),
        timed("sampler-orders", || {
            let o = sampler_orders()?;
            Ok((
                o.passes(),
                format!(
                    "euler {:.3}, heun {:.3}, sde/ode variance gap {:.2}%",
                    o.euler_slope,
                    o.heun_slope,
                    100.0 * o.variance_gap()
                ),
            ))
        }),
    ]
}
