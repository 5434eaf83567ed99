//! Evaluation: field error against the oracle, distances between sample
//! sets, discriminator path consistency, and convergence-order fits.

use crate::flowpath::{interpolate, sample_batch, sample_noise, FlowPath, TimeSampler};
use crate::models::{d_forward, d_jvp, MlpSpec, ModelError};
use crate::oracle::{Dataset, GaussianMixture, OracleError};
use crate::params::Parameters;
use crate::rng::Rng;
use crate::samplers::{SamplerError, VelocityField};
use crate::tensor::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("sample sets must be non-empty with equal dimension, got {a:?} and {b:?}")]
    Samples { a: Vec<usize>, b: Vec<usize> },
    #[error("convergence fit needs at least 3 points with positive errors and distinct step counts")]
    DegenerateFit,
    #[error("path needs at least 2 nodes")]
    Path,
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldErrorReport {
    pub n_points: usize,
    pub relative_mse: f64,
    /// `(t, relative MSE at that t)`.
    pub per_t: Vec<(f64, f64)>,
}

/// `Σ‖G − v‖² / Σ‖v‖²` over points `x_t ~ p_t`, with `t_draws` times drawn
/// uniformly and `x_draws_per_t` points per time.
pub fn field_rel_mse(
    field: &dyn VelocityField,
    gm: &GaussianMixture,
    t_draws: usize,
    x_draws_per_t: usize,
    rng: &mut Rng,
) -> Result<FieldErrorReport> {
    let path = FlowPath::linear();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut per_t = Vec::with_capacity(t_draws);
    for _ in 0..t_draws {
        let t: f64 = rng.random();
        let x = gm.sample(rng, x_draws_per_t);
        let z = sample_noise(rng, x_draws_per_t, gm.dim());
        let x_t = interpolate(&path, &x, &z, &vec![t; x_draws_per_t]).expect("t in [0, 1]");
        let truth = gm.marginal_velocity(&x_t, t)?;
        let pred = field.velocity(&x_t, t)?;
        let n = pred.sub(&truth).sq_norm();
        let d = truth.sq_norm();
        num += n;
        den += d;
        per_t.push((t, n / d));
    }
    per_t.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(FieldErrorReport {
        n_points: t_draws * x_draws_per_t,
        relative_mse: num / den,
        per_t,
    })
}

fn check_sets(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 || a.cols() != b.cols() {
        return Err(EvalError::Samples {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean pairwise distance within one set, excluding the diagonal.
fn within_mean(a: &Tensor) -> f64 {
    let n = a.rows();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let ai = a.row_slice(i);
        for j in (i + 1)..n {
            s += dist(ai, a.row_slice(j));
        }
    }
    2.0 * s / (n * (n - 1)) as f64
}

/// Mean cross distance. For equal-size sets the paired terms `i = j` are
/// excluded so that the estimator is exactly zero for identical arrays.
fn cross_mean(a: &Tensor, b: &Tensor) -> f64 {
    let (n, m) = (a.rows(), b.rows());
    let paired = n == m && n > 1;
    let mut s = 0.0;
    for i in 0..n {
        let ai = a.row_slice(i);
        for j in 0..m {
            if paired && i == j {
                continue;
            }
            s += dist(ai, b.row_slice(j));
        }
    }
    let count = if paired { n * (n - 1) } else { n * m };
    s / count as f64
}

/// `2·E‖a − b‖ − E‖a − a′‖ − E‖b − b′‖` with unbiased pairwise estimators,
/// clamped at zero.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_sets(a, b)?;
    let v = 2.0 * cross_mean(a, b) - within_mean(a) - within_mean(b);
    Ok(v.max(0.0))
}

/// Average 1-D Wasserstein-1 distance over random unit projections.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, projections: usize, rng: &mut Rng) -> Result<f64> {
    check_sets(a, b)?;
    let dim = a.cols();
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |x: &Tensor| -> Vec<f64> {
            let mut p: Vec<f64> = (0..x.rows())
                .map(|r| x.row_slice(r).iter().zip(&dir).map(|(u, v)| u * v).sum())
                .collect();
            p.sort_by(f64::total_cmp);
            p
        };
        total += wasserstein_1d(&project(a), &project(b));
    }
    Ok(total / projections as f64)
}

/// W1 between two sorted empirical distributions via their quantile
/// functions.
fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    // Merge the CDF breakpoints k/n and l/m.
    let (mut i, mut j) = (0, 0);
    let mut prev = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - prev) * (a[i] - b[j]).abs();
        prev = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

fn mean_cov(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = x.cols();
    let m = x.col_means();
    let mut cov = vec![0.0; n * n];
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] += (row[i] - m[i]) * (row[j] - m[j]);
            }
        }
    }
    let denom = (x.rows().max(2) - 1) as f64;
    cov.iter_mut().for_each(|c| *c /= denom);
    (m, cov)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDistanceReport {
    pub energy_distance: f64,
    pub sliced_wasserstein: f64,
    /// Euclidean norm of the mean difference.
    pub mean_gap: f64,
    /// Frobenius norm of the covariance difference.
    pub cov_gap: f64,
}

pub fn sample_distance_report(a: &Tensor, b: &Tensor, rng: &mut Rng) -> Result<SampleDistanceReport> {
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    Ok(SampleDistanceReport {
        energy_distance: energy_distance(a, b)?,
        sliced_wasserstein: sliced_wasserstein(a, b, 64, rng)?,
        mean_gap: dist(&ma, &mb),
        cov_gap: dist(&ca, &cb),
    })
}

/// Trapezoid integral of the JVP along a path next to the change in `D`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathTerms {
    /// `∫₀¹ D_jvp(x(t), t, v(t), 1) dt`.
    pub integral: f64,
    /// `D(x(1), 1) − D(x(0), 0)`.
    pub delta: f64,
    /// `∫₀¹ |D_jvp| dt`, the total variation of `D` along the path.
    pub variation: f64,
}

impl PathTerms {
    /// `|∫ − ΔD| / (|ΔD| + 1e-9)`.
    pub fn relative(&self) -> f64 {
        (self.integral - self.delta).abs() / (self.delta.abs() + 1e-9)
    }

    /// `|∫ − ΔD| / (∫|D_jvp| + 1e-9)`. Unlike [`relative`](Self::relative)
    /// this stays bounded when `D` happens to end near where it started.
    pub fn relative_to_variation(&self) -> f64 {
        (self.integral - self.delta).abs() / (self.variation + 1e-9)
    }
}

/// [`PathTerms`] with the trapezoid rule over the given nodes. `points` and
/// `velocities` hold one row per node; `times` runs from 0 to 1.
pub fn path_terms(
    spec: &MlpSpec,
    params: &Parameters,
    points: &Tensor,
    velocities: &Tensor,
    times: &[f64],
) -> Result<PathTerms> {
    if times.len() < 2 || points.rows() != times.len() {
        return Err(EvalError::Path);
    }
    let (d, jv) = d_jvp(spec, params, points, times, velocities, 1.0, None)?;
    let mut integral = 0.0;
    let mut variation = 0.0;
    for i in 1..times.len() {
        let h = 0.5 * (times[i] - times[i - 1]);
        integral += h * (jv.get(i, 0) + jv.get(i - 1, 0));
        variation += h * (jv.get(i, 0).abs() + jv.get(i - 1, 0).abs());
    }
    Ok(PathTerms {
        integral,
        delta: d.get(times.len() - 1, 0) - d.get(0, 0),
        variation,
    })
}

/// `|∫₀¹ D_jvp(x(t), t, v(t), 1) dt − (D(x(1), 1) − D(x(0), 0))| / (|ΔD| + 1e-9)`;
/// see [`path_terms`].
pub fn path_consistency(
    spec: &MlpSpec,
    params: &Parameters,
    points: &Tensor,
    velocities: &Tensor,
    times: &[f64],
) -> Result<f64> {
    Ok(path_terms(spec, params, points, velocities, times)?.relative())
}

/// Straight path `x(t) = x0 + (x1 − x0)·t` on `nodes` evenly spaced times.
pub fn straight_path(x0: &[f64], x1: &[f64], nodes: usize) -> (Tensor, Tensor, Vec<f64>) {
    let times: Vec<f64> = (0..nodes).map(|i| i as f64 / (nodes - 1) as f64).collect();
    let dim = x0.len();
    let v: Vec<f64> = x0.iter().zip(x1).map(|(a, b)| b - a).collect();
    let mut pts = Tensor::zeros(nodes, dim);
    let mut vel = Tensor::zeros(nodes, dim);
    for (r, &t) in times.iter().enumerate() {
        for d in 0..dim {
            pts.set(r, d, x0[d] + v[d] * t);
            vel.set(r, d, v[d]);
        }
    }
    (pts, vel, times)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub real_logit_mean: f64,
    pub fake_logit_mean: f64,
    pub d_mean: f64,
}

/// Batch means of the real and fake JVP logits and of `D` at fresh points.
pub fn equilibrium_report(
    d_spec: &MlpSpec,
    d_params: &Parameters,
    field: &dyn VelocityField,
    dataset: &Dataset,
    batch: usize,
    rng: &mut Rng,
) -> Result<EquilibriumReport> {
    let b = sample_batch(dataset, &FlowPath::linear(), &TimeSampler::uniform(), rng, batch, 0.0)
        .expect("valid batch parameters");
    // The field is evaluated row by row because each row has its own time.
    let mut g = Tensor::zeros(batch, dataset.dim());
    for r in 0..batch {
        let v = field.velocity(&b.x_t.slice_rows(r, r + 1), b.t[r])?;
        for (d, val) in v.data().iter().enumerate() {
            g.set(r, d, *val);
        }
    }
    let c = b.c.as_deref();
    let (d, real) = d_jvp(d_spec, d_params, &b.x_t, &b.t, &b.v_bar, 1.0, c)?;
    let (_, fake) = d_jvp(d_spec, d_params, &b.x_t, &b.t, &g, 1.0, c)?;
    Ok(EquilibriumReport {
        real_logit_mean: real.mean(),
        fake_logit_mean: fake.mean(),
        d_mean: d.mean(),
    })
}

/// Least-squares slope of `log(error)` against `log(1/steps)`.
pub fn convergence_slope(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 3 || points.iter().any(|p| !(p.1 > 0.0) || p.0 == 0) {
        return Err(EvalError::DegenerateFit);
    }
    let xs: Vec<f64> = points.iter().map(|p| -(p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(EvalError::DegenerateFit);
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// `D(x, t)` for a single time across a batch (for field dumps).
pub fn d_values(spec: &MlpSpec, params: &Parameters, x: &Tensor, t: f64) -> Result<Tensor> {
    Ok(d_forward(spec, params, x, &vec![t; x.rows()], None)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Norm;
    use crate::rng::{stream, Stream};
    use crate::samplers::{FnField, OracleField};

    #[test]
    fn field_error_extremes() {
        let gm = GaussianMixture::ring(8, 4.0, 0.3);
        let r = field_rel_mse(&OracleField(&gm), &gm, 16, 64, &mut stream(1, Stream::Eval)).unwrap();
        assert_eq!(r.relative_mse, 0.0);
        assert_eq!(r.n_points, 1024);
        let zero = FnField(|x: &Tensor, _| Tensor::zeros(x.rows(), x.cols()));
        let r = field_rel_mse(&zero, &gm, 16, 64, &mut stream(1, Stream::Eval)).unwrap();
        assert!((r.relative_mse - 1.0).abs() < 1e-15);
        let again = field_rel_mse(&zero, &gm, 16, 64, &mut stream(1, Stream::Eval)).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn energy_distance_examples() {
        let a = sample_noise(&mut stream(1, Stream::Eval), 300, 2);
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
        let gm = GaussianMixture::standard(1);
        let x = gm.sample(&mut stream(2, Stream::Eval), 10_000);
        let y = gm.sample(&mut stream(3, Stream::Eval), 10_000);
        assert!(energy_distance(&x, &y).unwrap() <= 0.01);
        let shifted = y.map(|v| v + 2.0);
        assert!(energy_distance(&x, &shifted).unwrap() >= 0.5);
        assert!(energy_distance(&Tensor::zeros(0, 1), &x).is_err());
    }

    #[test]
    fn energy_distance_symmetric_and_non_negative() {
        for seed in 0..10 {
            let a = sample_noise(&mut stream(seed, Stream::Eval), 40, 2);
            let b = sample_noise(&mut stream(seed + 100, Stream::Eval), 55, 2).map(|v| 0.5 * v + 0.2);
            let ab = energy_distance(&a, &b).unwrap();
            let ba = energy_distance(&b, &a).unwrap();
            assert!(ab >= 0.0);
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn sliced_wasserstein_and_report() {
        let a = Tensor::column(&[0.0, 1.0, 2.0]);
        let b = Tensor::column(&[1.0, 2.0, 3.0]);
        let w = sliced_wasserstein(&a, &b, 8, &mut stream(1, Stream::Eval)).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]) - 0.0).abs() < 1e-15);

        let x = sample_noise(&mut stream(2, Stream::Eval), 200, 2);
        let y = sample_noise(&mut stream(3, Stream::Eval), 150, 2).map(|v| v + 1.0);
        let r1 = sample_distance_report(&x, &y, &mut stream(4, Stream::Eval)).unwrap();
        let r2 = sample_distance_report(&y, &x, &mut stream(4, Stream::Eval)).unwrap();
        assert!((r1.energy_distance - r2.energy_distance).abs() < 1e-12);
        assert!((r1.sliced_wasserstein - r2.sliced_wasserstein).abs() < 1e-12);
        assert!((r1.mean_gap - r2.mean_gap).abs() < 1e-15 && (r1.cov_gap - r2.cov_gap).abs() < 1e-15);
    }

    fn smooth_d() -> (MlpSpec, Parameters) {
        let spec = MlpSpec {
            in_dim: 2,
            hidden: vec![16, 16],
            norm: Norm::Rms,
            time_embed_dim: 8,
            num_classes: None,
            out_dim: 1,
            time_inputs: 1,
        };
        let mut p = spec.init(3).unwrap();
        let mut rng = stream(9, Stream::Init);
        for (_, t) in p.iter_mut() {
            let noise = sample_noise(&mut rng, t.rows(), t.cols());
            t.add_scaled(&noise, 0.3);
        }
        (spec, p)
    }

    #[test]
    fn path_consistency_of_mlp_and_refinement() {
        let (spec, p) = smooth_d();
        let mut prev = f64::INFINITY;
        for nodes in [128, 256, 512, 1024] {
            let (pts, vel, ts) = straight_path(&[-1.0, 0.5], &[1.5, -2.0], nodes);
            let err = path_consistency(&spec, &p, &pts, &vel, &ts).unwrap();
            assert!(err <= prev * 1.05, "{nodes}: {err} after {prev}");
            prev = err;
        }
        assert!(prev <= 1e-3, "{prev}");

        let zero = spec.init(0).unwrap();
        let (pts, vel, ts) = straight_path(&[0.0, 0.0], &[1.0, 1.0], 256);
        assert_eq!(path_consistency(&spec, &zero, &pts, &vel, &ts).unwrap(), 0.0);

        let (pts, vel, ts) = straight_path(&[-1.0, 0.5], &[1.5, -2.0], 64);
        let terms = path_terms(&spec, &p, &pts, &vel, &ts).unwrap();
        assert!(terms.variation >= terms.integral.abs());
        assert!(terms.relative_to_variation() <= terms.relative());
    }

    #[test]
    fn equilibrium_at_zero_discriminator() {
        let (spec, _) = smooth_d();
        let zero = spec.init(0).unwrap();
        let ds = Dataset::preset("ring8").unwrap();
        let field = OracleField(&ds.mixture);
        let r = equilibrium_report(&spec, &zero, &field, &ds, 32, &mut stream(1, Stream::Eval)).unwrap();
        assert_eq!((r.real_logit_mean, r.fake_logit_mean, r.d_mean), (0.0, 0.0, 0.0));
        let (_, p) = smooth_d();
        let a = equilibrium_report(&spec, &p, &field, &ds, 32, &mut stream(2, Stream::Eval)).unwrap();
        let b = equilibrium_report(&spec, &p, &field, &ds, 32, &mut stream(2, Stream::Eval)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn slope_fits() {
        let first: Vec<(usize, f64)> = [8, 16, 32, 64].iter().map(|&s| (s, 3.0 / s as f64)).collect();
        assert!((convergence_slope(&first).unwrap() - 1.0).abs() < 1e-6);
        let second: Vec<(usize, f64)> = [8, 16, 32].iter().map(|&s| (s, 0.5 / (s * s) as f64)).collect();
        assert!((convergence_slope(&second).unwrap() - 2.0).abs() < 1e-6);
        assert_eq!(convergence_slope(&[(8, 1.0), (8, 0.5), (8, 0.2)]), Err(EvalError::DegenerateFit));
        assert_eq!(convergence_slope(&[(8, 1.0), (16, 0.5)]), Err(EvalError::DegenerateFit));
    }
}
