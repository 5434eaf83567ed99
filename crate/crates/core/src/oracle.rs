//! Closed-form ground truth for isotropic Gaussian mixtures under the linear
//! path `x_t = (1 − t)·x + t·z`, `z ~ N(0, I)`.
//!
//! Conditioned on component `k`, `x_t ~ N((1 − t)μ_k, c_k(t)·I)` with
//! `c_k(t) = (1 − t)²σ_k² + t²`. Every quantity below follows from that
//! Gaussian and the posterior responsibilities `r_k(x_t)`:
//!
//! * `E[z | x_t, k] = t·(x_t − (1 − t)μ_k) / c_k`
//! * `E[x | x_t, k] = μ_k + (1 − t)σ_k²·(x_t − (1 − t)μ_k) / c_k`
//! * marginal velocity `v = Σ_k r_k (E[z | x_t, k] − E[x | x_t, k])`
//! * marginal score `∇ log p_t = −Σ_k r_k (x_t − (1 − t)μ_k) / c_k`
//!
//! [`quadrature_conditional_velocity`] recomputes `E[z − x | x_t]` by brute
//! force numerical integration and is the independent check on the above.

use crate::rng::Rng;
use crate::tensor::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("mixture weights must be non-negative and sum to 1 (sum = {0})")]
    Weights(f64),
    #[error("component standard deviations must be positive")]
    Stds,
    #[error("mixture needs at least one component with consistent dimensions")]
    Layout,
    #[error("time {0} outside [0, 1]")]
    Time(f64),
    #[error("time {t} below the score floor {floor}")]
    BelowFloor { t: f64, floor: f64 },
    #[error("quadrature needs t at least 1e-3 away from 0 and 1, got {0}")]
    QuadratureTime(f64),
    #[error("quadrature supports dimension 1 or 2, got {0}")]
    QuadratureDim(usize),
    #[error("unknown mixture preset {0:?} (expected one of gm1d2, ring8, ring8-cond, gauss1d, gauss2d)")]
    UnknownPreset(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    /// `K × n`.
    means: Tensor,
    stds: Vec<f64>,
}

/// A mixture used as a training dataset, optionally labelled by component.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub mixture: GaussianMixture,
    /// When set, each sample carries its component index as a class label.
    pub conditional: bool,
}

impl Dataset {
    /// Looks up a named preset: `gm1d2`, `ring8`, `ring8-cond`, or the single
    /// standard Gaussians `gauss1d` / `gauss2d`.
    pub fn preset(name: &str) -> Result<Self, OracleError> {
        let (mixture, conditional) = match name {
            "gm1d2" => (GaussianMixture::two_component_1d(), false),
            "ring8" => (GaussianMixture::ring(8, 4.0, 0.3), false),
            "ring8-cond" => (GaussianMixture::ring(8, 4.0, 0.3), true),
            "gauss1d" => (GaussianMixture::standard(1), false),
            "gauss2d" => (GaussianMixture::standard(2), false),
            other => return Err(OracleError::UnknownPreset(other.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            mixture,
            conditional,
        })
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    /// Class count including the reserved null class, when labelled.
    pub fn num_classes(&self) -> Option<usize> {
        self.conditional.then(|| self.mixture.num_components() + 1)
    }

    /// Index of the null (unconditional) class.
    pub fn null_class(&self) -> Option<usize> {
        self.conditional.then(|| self.mixture.num_components())
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_time(t: f64) -> Result<(), OracleError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(OracleError::Time(t))
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Tensor, stds: Vec<f64>) -> Result<Self, OracleError> {
        let k = weights.len();
        if k == 0 || !means.is_matrix() || means.rows() != k || stds.len() != k || means.cols() == 0 {
            return Err(OracleError::Layout);
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(OracleError::Weights(sum));
        }
        if stds.iter().any(|s| !(*s > 0.0)) {
            return Err(OracleError::Stds);
        }
        Ok(Self {
            weights,
            means,
            stds,
        })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self::new(vec![1.0], Tensor::zeros(1, dim), vec![1.0]).expect("valid preset")
    }

    /// Two 1-D components at ±2 with σ = 0.5 and equal weights.
    pub fn two_component_1d() -> Self {
        Self::new(vec![0.5, 0.5], Tensor::column(&[-2.0, 2.0]), vec![0.5, 0.5]).expect("valid preset")
    }

    /// `count` equally weighted 2-D components evenly spaced on a circle.
    pub fn ring(count: usize, radius: f64, std: f64) -> Self {
        let means: Vec<Vec<f64>> = (0..count)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / count as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(
            vec![1.0 / count as f64; count],
            Tensor::from_rows(&means),
            vec![std; count],
        )
        .expect("valid preset")
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    /// Mixture mean `Σ_k w_k μ_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (k, w) in self.weights.iter().enumerate() {
            for (mi, mu) in m.iter_mut().zip(self.means.row_slice(k)) {
                *mi += w * mu;
            }
        }
        m
    }

    /// Mixture covariance (`n × n`, row-major).
    pub fn covariance(&self) -> Vec<f64> {
        let n = self.dim();
        let m = self.mean();
        let mut cov = vec![0.0; n * n];
        for (k, w) in self.weights.iter().enumerate() {
            let mu = self.means.row_slice(k);
            let s2 = self.stds[k] * self.stds[k];
            for i in 0..n {
                for j in 0..n {
                    let within = if i == j { s2 } else { 0.0 };
                    cov[i * n + j] += w * (within + (mu[i] - m[i]) * (mu[j] - m[j]));
                }
            }
        }
        cov
    }

    fn pick_component(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        // Rounding can leave `acc` a hair under 1; fall back to the last
        // component that has mass.
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    /// Samples with their component labels.
    pub fn sample_labelled(&self, rng: &mut Rng, count: usize) -> (Tensor, Vec<usize>) {
        let n = self.dim();
        let mut data = Vec::with_capacity(count * n);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let k = self.pick_component(rng);
            let mu = self.means.row_slice(k);
            for &m in mu {
                let e: f64 = StandardNormal.sample(rng);
                data.push(m + self.stds[k] * e);
            }
            labels.push(k);
        }
        (Tensor::from_vec(count, n, data), labels)
    }

    pub fn sample(&self, rng: &mut Rng, count: usize) -> Tensor {
        self.sample_labelled(rng, count).0
    }

    /// Samples from component `k` only.
    pub fn sample_component(&self, rng: &mut Rng, k: usize, count: usize) -> Tensor {
        let mu = self.means.row_slice(k);
        let mut data = Vec::with_capacity(count * mu.len());
        for _ in 0..count {
            for &m in mu {
                let e: f64 = StandardNormal.sample(rng);
                data.push(m + self.stds[k] * e);
            }
        }
        Tensor::from_vec(count, mu.len(), data)
    }

    /// The mixture restricted to a single component (used for class-conditional
    /// ground truth).
    pub fn component(&self, k: usize) -> GaussianMixture {
        GaussianMixture::new(
            vec![1.0],
            Tensor::row(self.means.row_slice(k)),
            vec![self.stds[k]],
        )
        .expect("single component is valid")
    }

    fn c(&self, k: usize, t: f64) -> f64 {
        let s = self.stds[k];
        (1.0 - t) * (1.0 - t) * s * s + t * t
    }

    /// Unnormalized log-posterior terms `log w_k + log N(x; (1−t)μ_k, c_k I)`.
    fn log_terms(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let n = x.len() as f64;
        for (k, o) in out.iter_mut().enumerate() {
            let c = self.c(k, t);
            let mu = self.means.row_slice(k);
            let d2: f64 = x
                .iter()
                .zip(mu)
                .map(|(xi, m)| {
                    let d = xi - (1.0 - t) * m;
                    d * d
                })
                .sum();
            *o = self.weights[k].ln() - 0.5 * n * (2.0 * PI * c).ln() - d2 / (2.0 * c);
        }
    }

    fn responsibilities_row(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.log_terms(x, t, out);
        let lse = log_sum_exp(out);
        out.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }

    /// Posterior component probabilities for each row (`B × K`).
    pub fn responsibilities(&self, x_t: &Tensor, t: f64) -> Result<Tensor, OracleError> {
        check_time(t)?;
        let k = self.num_components();
        let mut out = Tensor::zeros(x_t.rows(), k);
        for r in 0..x_t.rows() {
            let row = x_t.row_slice(r).to_vec();
            self.responsibilities_row(&row, t, &mut out.data_mut()[r * k..(r + 1) * k]);
        }
        Ok(out)
    }

    /// Marginal velocity `E[z − x | x_t]` for each row.
    pub fn marginal_velocity(&self, x_t: &Tensor, t: f64) -> Result<Tensor, OracleError> {
        check_time(t)?;
        let (rows, n) = x_t.dims();
        let kk = self.num_components();
        let mut resp = vec![0.0; kk];
        let mut out = Tensor::zeros(rows, n);
        for r in 0..rows {
            let x = x_t.row_slice(r).to_vec();
            self.responsibilities_row(&x, t, &mut resp);
            let dst = &mut out.data_mut()[r * n..(r + 1) * n];
            for (k, &rk) in resp.iter().enumerate() {
                if rk == 0.0 {
                    continue;
                }
                let c = self.c(k, t);
                let s2 = self.stds[k] * self.stds[k];
                for ((d, &xi), &m) in dst.iter_mut().zip(&x).zip(self.means.row_slice(k)) {
                    let resid = (xi - (1.0 - t) * m) / c;
                    let ez = t * resid;
                    let ex = m + (1.0 - t) * s2 * resid;
                    *d += rk * (ez - ex);
                }
            }
        }
        Ok(out)
    }

    /// Score `∇ log p_t(x_t)` for each row.
    pub fn marginal_score(&self, x_t: &Tensor, t: f64) -> Result<Tensor, OracleError> {
        check_time(t)?;
        let (rows, n) = x_t.dims();
        let kk = self.num_components();
        let mut resp = vec![0.0; kk];
        let mut out = Tensor::zeros(rows, n);
        for r in 0..rows {
            let x = x_t.row_slice(r).to_vec();
            self.responsibilities_row(&x, t, &mut resp);
            let dst = &mut out.data_mut()[r * n..(r + 1) * n];
            for (k, &rk) in resp.iter().enumerate() {
                let c = self.c(k, t);
                for ((d, &xi), &m) in dst.iter_mut().zip(&x).zip(self.means.row_slice(k)) {
                    *d -= rk * (xi - (1.0 - t) * m) / c;
                }
            }
        }
        Ok(out)
    }

    /// `log p_t(x_t)` for each row, as a column.
    pub fn log_density_t(&self, x_t: &Tensor, t: f64) -> Result<Tensor, OracleError> {
        check_time(t)?;
        let mut terms = vec![0.0; self.num_components()];
        let vals: Vec<f64> = (0..x_t.rows())
            .map(|r| {
                self.log_terms(x_t.row_slice(r), t, &mut terms);
                log_sum_exp(&terms)
            })
            .collect();
        Ok(Tensor::column(&vals))
    }

    /// Per-component posterior over the data point given `x_t`:
    /// `(mean, variance)` of `x | x_t, k`.
    fn data_posterior(&self, k: usize, x_t: &[f64], t: f64) -> (Vec<f64>, f64) {
        let s2 = self.stds[k] * self.stds[k];
        let lik_prec = (1.0 - t) * (1.0 - t) / (t * t);
        let var = 1.0 / (1.0 / s2 + lik_prec);
        let mean = self
            .means
            .row_slice(k)
            .iter()
            .zip(x_t)
            .map(|(m, xi)| var * (m / s2 + (1.0 - t) * xi / (t * t)))
            .collect();
        (mean, var)
    }
}

/// Default time floor for converting velocities into scores.
pub const SCORE_T_FLOOR: f64 = 1e-3;

/// Score implied by a velocity under the linear path with a standard normal
/// prior: `E[z | x_t] = x_t + (1 − t)·v`, so `s = −(x_t + (1 − t)·v) / t`.
pub fn velocity_to_score(v: &Tensor, x_t: &Tensor, t: f64, t_floor: f64) -> Result<Tensor, OracleError> {
    if t < t_floor {
        return Err(OracleError::BelowFloor { t, floor: t_floor });
    }
    check_time(t)?;
    Ok(x_t.zip_map(v, |x, vi| -(x + (1.0 - t) * vi) / t))
}

/// Grid used by [`quadrature_conditional_velocity`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    /// Trapezoid nodes per axis.
    pub nodes: usize,
    /// Half-width of the integration box in posterior standard deviations.
    pub half_width: f64,
}

impl GridSpec {
    pub fn for_dim(dim: usize) -> Self {
        match dim {
            1 => Self {
                nodes: 4096,
                half_width: 8.0,
            },
            _ => Self {
                nodes: 400,
                half_width: 8.0,
            },
        }
    }
}

/// Brute-force `E[z − x | x_t]` by trapezoid integration over the data point
/// `x`, weighting by `p(x)·N(x_t; (1 − t)x, t² I)`. Supports 1-D and 2-D.
pub fn quadrature_conditional_velocity(
    gm: &GaussianMixture,
    x_t: &Tensor,
    t: f64,
    grid: GridSpec,
) -> Result<Tensor, OracleError> {
    let n = gm.dim();
    if n > 2 {
        return Err(OracleError::QuadratureDim(n));
    }
    if !(1e-3..=1.0 - 1e-3).contains(&t) {
        return Err(OracleError::QuadratureTime(t));
    }
    let mut out = Tensor::zeros(x_t.rows(), n);
    for r in 0..x_t.rows() {
        let xt = x_t.row_slice(r);
        // Integration box: union over components of the per-component data
        // posterior ± half_width standard deviations.
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for k in 0..gm.num_components() {
            if gm.weights[k] == 0.0 {
                continue;
            }
            let (m, v) = gm.data_posterior(k, xt, t);
            let s = v.sqrt();
            for d in 0..n {
                lo[d] = lo[d].min(m[d] - grid.half_width * s);
                hi[d] = hi[d].max(m[d] + grid.half_width * s);
            }
        }
        let axes: Vec<Vec<(f64, f64)>> = (0..n)
            .map(|d| trapezoid_nodes(lo[d], hi[d], grid.nodes))
            .collect();

        let log_weight = |x: &[f64]| -> f64 {
            let mut prior_terms = Vec::with_capacity(gm.num_components());
            for k in 0..gm.num_components() {
                let s2 = gm.stds[k] * gm.stds[k];
                let d2: f64 = x
                    .iter()
                    .zip(gm.means.row_slice(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                prior_terms.push(gm.weights[k].ln() - 0.5 * n as f64 * (2.0 * PI * s2).ln() - d2 / (2.0 * s2));
            }
            let lik: f64 = x
                .iter()
                .zip(xt)
                .map(|(xi, xti)| {
                    let d = xti - (1.0 - t) * xi;
                    -d * d / (2.0 * t * t)
                })
                .sum();
            log_sum_exp(&prior_terms) + lik
        };

        // Two passes: find the max log-weight, then accumulate.
        let mut points: Vec<(Vec<f64>, f64, f64)> = Vec::new();
        let mut max_lw = f64::NEG_INFINITY;
        let mut visit = |x: Vec<f64>, w: f64| {
            let lw = log_weight(&x);
            max_lw = max_lw.max(lw);
            points.push((x, w, lw));
        };
        if n == 1 {
            for &(x, w) in &axes[0] {
                visit(vec![x], w);
            }
        } else {
            for &(x0, w0) in &axes[0] {
                for &(x1, w1) in &axes[1] {
                    visit(vec![x0, x1], w0 * w1);
                }
            }
        }
        let mut norm = 0.0;
        let mut acc = vec![0.0; n];
        for (x, w, lw) in &points {
            let p = w * (lw - max_lw).exp();
            norm += p;
            for d in 0..n {
                let z = (xt[d] - (1.0 - t) * x[d]) / t;
                acc[d] += p * (z - x[d]);
            }
        }
        for d in 0..n {
            out.set(r, d, acc[d] / norm);
        }
    }
    Ok(out)
}

fn trapezoid_nodes(lo: f64, hi: f64, nodes: usize) -> Vec<(f64, f64)> {
    let h = (hi - lo) / (nodes - 1) as f64;
    (0..nodes)
        .map(|i| {
            let w = if i == 0 || i == nodes - 1 { 0.5 * h } else { h };
            (lo + i as f64 * h, w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn symmetric() -> GaussianMixture {
        GaussianMixture::two_component_1d()
    }

    #[test]
    fn rejects_bad_mixtures() {
        assert!(matches!(
            GaussianMixture::new(vec![0.5, 0.6], Tensor::column(&[0.0, 1.0]), vec![1.0, 1.0]),
            Err(OracleError::Weights(_))
        ));
        assert_eq!(
            GaussianMixture::new(vec![1.0], Tensor::column(&[0.0]), vec![0.0]),
            Err(OracleError::Stds)
        );
        assert!(Dataset::preset("moons").is_err());
    }

    #[test]
    fn sampling_moments_and_degenerate_weights() {
        let gm = GaussianMixture::standard(1);
        let x = gm.sample(&mut stream(1, Stream::Data), 100_000);
        let m = x.mean();
        let var = x.map(|v| (v - m) * (v - m)).mean();
        assert!(m.abs() < 0.02, "mean {m}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");

        let gm = GaussianMixture::new(vec![1.0, 0.0], Tensor::column(&[0.0, 10.0]), vec![1.0, 1.0]).unwrap();
        let (_, labels) = gm.sample_labelled(&mut stream(2, Stream::Data), 1000);
        assert!(labels.iter().all(|&k| k == 0));

        let a = gm.sample(&mut stream(9, Stream::Data), 50);
        let b = gm.sample(&mut stream(9, Stream::Data), 50);
        assert_eq!(a, b);
    }

    #[test]
    fn responsibilities_examples() {
        let r = symmetric().responsibilities(&Tensor::column(&[0.0]), 0.4).unwrap();
        assert!((r.get(0, 0) - 0.5).abs() < 1e-15);
        let r = GaussianMixture::standard(2)
            .responsibilities(&Tensor::row(&[0.3, 2.0]), 0.7)
            .unwrap();
        assert_eq!(r.item(), 1.0);
        // At t = 1 every component collapses onto N(0, I).
        let gm = GaussianMixture::new(vec![0.3, 0.7], Tensor::column(&[-5.0, 1.0]), vec![0.2, 0.2]).unwrap();
        let r = gm.responsibilities(&Tensor::column(&[2.5]), 1.0).unwrap();
        assert!((r.get(0, 0) - 0.3).abs() < 1e-14);
    }

    #[test]
    fn velocity_boundary_values() {
        let gm = GaussianMixture::ring(8, 4.0, 0.3);
        let x = Tensor::from_rows(&[vec![0.5, -1.0], vec![3.0, 2.0]]);
        let v0 = gm.marginal_velocity(&x, 0.0).unwrap();
        for (a, b) in v0.data().iter().zip(x.data()) {
            assert!((a + b).abs() < 1e-12);
        }
        let v1 = gm.marginal_velocity(&x, 1.0).unwrap();
        let m = gm.mean();
        for r in 0..2 {
            for d in 0..2 {
                assert!((v1.get(r, d) - (x.get(r, d) - m[d])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_gaussian_velocity_values() {
        let gm = GaussianMixture::standard(1);
        let v = gm.marginal_velocity(&Tensor::column(&[1.3, -0.4]), 0.5).unwrap();
        assert!(v.max_abs() < 1e-15);
        let v = gm.marginal_velocity(&Tensor::column(&[1.0]), 0.25).unwrap();
        assert!((v.item() + 0.8).abs() < 1e-14);
    }

    #[test]
    fn log_density_examples() {
        let gm = GaussianMixture::standard(2);
        let l = gm.log_density_t(&Tensor::row(&[0.0, 0.0]), 1.0).unwrap();
        assert!((l.item() + (2.0 * PI).ln()).abs() < 1e-14);

        // Integrates to one on a fine grid (trapezoid).
        let gm = symmetric();
        let nodes = trapezoid_nodes(-10.0, 10.0, 20001);
        let xs = Tensor::column(&nodes.iter().map(|p| p.0).collect::<Vec<_>>());
        let l = gm.log_density_t(&xs, 0.3).unwrap();
        let total: f64 = nodes.iter().zip(l.data()).map(|((_, w), lv)| w * lv.exp()).sum();
        assert!((total - 1.0).abs() < 1e-4, "{total}");

        let gm = GaussianMixture::standard(1);
        let l = gm.log_density_t(&Tensor::column(&[0.0, 0.5, 1.0, 2.0]), 0.6).unwrap();
        assert!(l.data().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn score_single_gaussian_and_symmetric_center() {
        let gm = GaussianMixture::standard(1);
        let t: f64 = 0.3;
        let s = gm.marginal_score(&Tensor::column(&[0.7]), t).unwrap();
        let c = (1.0 - t).powi(2) + t * t;
        assert!((s.item() + 0.7 / c).abs() < 1e-14);
        let s = symmetric().marginal_score(&Tensor::column(&[0.0]), 0.5).unwrap();
        assert!(s.item().abs() < 1e-15);
    }

    #[test]
    fn velocity_to_score_examples() {
        let x = Tensor::column(&[0.4, -1.1]);
        let v = Tensor::column(&[2.0, 3.0]);
        let s = velocity_to_score(&v, &x, 1.0, SCORE_T_FLOOR).unwrap();
        assert_eq!(s.data(), &[-0.4, 1.1]);
        assert!(matches!(
            velocity_to_score(&v, &x, 1e-4, SCORE_T_FLOOR),
            Err(OracleError::BelowFloor { .. })
        ));
    }

    #[test]
    fn score_matches_log_density_gradient() {
        let h = 1e-6;
        for (gm, x) in [
            (symmetric(), Tensor::column(&[-1.3, 0.2, 2.4])),
            (
                GaussianMixture::ring(8, 4.0, 0.3),
                Tensor::from_rows(&[vec![1.0, -2.0], vec![3.5, 0.4]]),
            ),
        ] {
            for t in [0.1, 0.5, 0.9] {
                let s = gm.marginal_score(&x, t).unwrap();
                for r in 0..x.rows() {
                    for d in 0..x.cols() {
                        let mut xp = x.slice_rows(r, r + 1);
                        let mut xm = xp.clone();
                        xp.set(0, d, x.get(r, d) + h);
                        xm.set(0, d, x.get(r, d) - h);
                        let fd = (gm.log_density_t(&xp, t).unwrap().item() - gm.log_density_t(&xm, t).unwrap().item())
                            / (2.0 * h);
                        let an = s.get(r, d);
                        assert!((an - fd).abs() <= 1e-6 * an.abs().max(1.0), "t={t}: {an} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn velocity_to_score_agrees_with_marginal_score() {
        for gm in [GaussianMixture::standard(1), symmetric(), GaussianMixture::ring(8, 4.0, 0.3)] {
            let x = gm.sample(&mut stream(11, Stream::Eval), 16).map(|v| 0.8 * v + 0.1);
            for i in 0..=19 {
                let t = 0.05 + 0.95 * i as f64 / 19.0;
                let v = gm.marginal_velocity(&x, t).unwrap();
                let s = velocity_to_score(&v, &x, t, SCORE_T_FLOOR).unwrap();
                let exact = gm.marginal_score(&x, t).unwrap();
                assert!(s.sub(&exact).max_abs() <= 1e-8, "t={t}");
            }
        }
        let x = Tensor::column(&[0.9]);
        let t: f64 = 0.3;
        let v = GaussianMixture::standard(1).marginal_velocity(&x, t).unwrap();
        let s = velocity_to_score(&v, &x, t, SCORE_T_FLOOR).unwrap();
        assert!((s.item() + 0.9 / ((1.0 - t).powi(2) + t * t)).abs() < 1e-14);
    }

    #[test]
    fn velocity_at_time_zero_on_random_points() {
        let gm = GaussianMixture::new(
            vec![0.2, 0.5, 0.3],
            Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, -1.0]]),
            vec![0.4, 1.1, 0.7],
        )
        .unwrap();
        let x = gm.sample(&mut stream(12, Stream::Eval), 50);
        let v = gm.marginal_velocity(&x, 0.0).unwrap();
        assert!(v.add(&x).max_abs() < 1e-12);
    }

    #[test]
    fn quadrature_agrees_on_1d_grid() {
        let gm = symmetric();
        let mut worst: f64 = 0.0;
        for i in 0..8 {
            let t = 0.02 + 0.96 * i as f64 / 7.0;
            let xs: Vec<f64> = (0..8).map(|j| -3.0 + 6.0 * j as f64 / 7.0).collect();
            let x = Tensor::column(&xs);
            let q = quadrature_conditional_velocity(&gm, &x, t, GridSpec::for_dim(1)).unwrap();
            let c = gm.marginal_velocity(&x, t).unwrap();
            worst = worst.max(q.sub(&c).max_abs());
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn quadrature_rejects_out_of_range() {
        let gm = symmetric();
        let x = Tensor::column(&[0.0]);
        assert!(quadrature_conditional_velocity(&gm, &x, 1e-4, GridSpec::for_dim(1)).is_err());
        assert!(quadrature_conditional_velocity(&gm, &x, 0.9999, GridSpec::for_dim(1)).is_err());
        let gm3 = GaussianMixture::standard(3);
        assert_eq!(
            quadrature_conditional_velocity(&gm3, &Tensor::zeros(1, 3), 0.5, GridSpec::for_dim(3)),
            Err(OracleError::QuadratureDim(3))
        );
    }

    #[test]
    fn quadrature_single_gaussian_and_symmetry() {
        let gm = GaussianMixture::standard(1);
        let v = quadrature_conditional_velocity(&gm, &Tensor::column(&[1.0]), 0.25, GridSpec::for_dim(1)).unwrap();
        assert!((v.item() + 0.8).abs() < 1e-4, "{}", v.item());
        let v = quadrature_conditional_velocity(&symmetric(), &Tensor::column(&[0.0]), 0.4, GridSpec::for_dim(1)).unwrap();
        assert!(v.item().abs() < 1e-6);
    }

    #[test]
    fn quadrature_2d_matches_closed_form() {
        let gm = GaussianMixture::ring(8, 4.0, 0.3);
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-2.5, 0.3]]);
        for t in [0.2, 0.6] {
            let q = quadrature_conditional_velocity(&gm, &x, t, GridSpec::for_dim(2)).unwrap();
            let c = gm.marginal_velocity(&x, t).unwrap();
            assert!(q.sub(&c).max_abs() < 1e-4, "t={t}: {q:?} vs {c:?}");
        }
    }
}
