//! Forward-mode propagation layered on the reverse-mode tape.
//!
//! A [`Dual`] carries a primal node and, optionally, a tangent node. The
//! tangent holds `k` directions stacked vertically: for a `B × F` primal the
//! tangent is `kB × F`, block `i` being the directional derivative along the
//! `i`-th tangent set. All `k` directions share a single primal evaluation.
//!
//! Tangents are built from ordinary tape operations, so a loss computed from a
//! tangent can itself be differentiated in reverse mode (reverse-over-forward).

use super::tape::Var;
use crate::tensor::Tensor;
use std::sync::atomic::{AtomicBool, Ordering};

static JVP_FAULT: AtomicBool = AtomicBool::new(false);

/// Test-only fault injection: when enabled, SiLU tangents are squared, which
/// breaks linearity of every JVP that passes through a SiLU.
#[doc(hidden)]
pub fn inject_jvp_fault(enabled: bool) {
    JVP_FAULT.store(enabled, Ordering::SeqCst);
}

fn fault_enabled() -> bool {
    JVP_FAULT.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug)]
pub struct Dual<'t> {
    pub primal: Var<'t>,
    tangent: Option<(Var<'t>, usize)>,
}

impl<'t> Dual<'t> {
    /// A value with no tangent (its tangent is identically zero).
    pub fn constant(primal: Var<'t>) -> Self {
        Self {
            primal,
            tangent: None,
        }
    }

    /// A value with `k` stacked tangent directions.
    pub fn new(primal: Var<'t>, tangent: Var<'t>, k: usize) -> Self {
        let (r, c) = primal.shape();
        assert!(k >= 1, "at least one tangent direction");
        assert_eq!(
            tangent.shape(),
            (k * r, c),
            "tangent must stack {k} copies of the primal shape"
        );
        Self {
            primal,
            tangent: Some((tangent, k)),
        }
    }

    pub fn tangent(&self) -> Option<Var<'t>> {
        self.tangent.map(|(t, _)| t)
    }

    /// Number of stacked tangent directions (0 when there is no tangent).
    pub fn directions(&self) -> usize {
        self.tangent.map_or(0, |(_, k)| k)
    }

    /// Tangent block `i` as its own node.
    pub fn tangent_block(&self, i: usize) -> Option<Var<'t>> {
        let (t, k) = self.tangent?;
        assert!(i < k);
        if k == 1 {
            return Some(t);
        }
        let rows = self.primal.rows();
        Some(t.slice_rows(i * rows, (i + 1) * rows))
    }

    fn with(primal: Var<'t>, tangent: Option<(Var<'t>, usize)>) -> Self {
        Self { primal, tangent }
    }

    fn map_tangent(self, primal: Var<'t>, f: impl FnOnce(Var<'t>, usize) -> Var<'t>) -> Self {
        Self::with(primal, self.tangent.map(|(t, k)| (f(t, k), k)))
    }

    fn merge_k(a: &Self, b: &Self) -> Option<usize> {
        match (a.tangent, b.tangent) {
            (Some((_, ka)), Some((_, kb))) => {
                assert_eq!(ka, kb, "mixed tangent direction counts");
                Some(ka)
            }
            (Some((_, k)), None) | (None, Some((_, k))) => Some(k),
            (None, None) => None,
        }
    }

    /// `self · w` where `w` carries no tangent (a weight or constant).
    pub fn matmul(self, w: Var<'t>) -> Self {
        self.map_tangent(self.primal.matmul(w), |t, _| t.matmul(w))
    }

    /// Adds a `1 × F` bias row to every row.
    pub fn add_bias(self, bias: Var<'t>) -> Self {
        assert_eq!(bias.rows(), 1, "bias must be a single row");
        Self::with(self.primal.add_bcast(bias), self.tangent)
    }

    /// Multiplies every row by a `1 × F` gain row.
    pub fn mul_gain(self, gain: Var<'t>) -> Self {
        assert_eq!(gain.rows(), 1, "gain must be a single row");
        self.map_tangent(self.primal.mul_bcast(gain), |t, _| t.mul_bcast(gain))
    }

    pub fn add(self, other: Self) -> Self {
        let primal = self.primal.add(other.primal);
        let k = Self::merge_k(&self, &other);
        let tangent = match (self.tangent, other.tangent) {
            (Some((a, _)), Some((b, _))) => Some(a.add(b)),
            (Some((a, _)), None) | (None, Some((a, _))) => Some(a),
            (None, None) => None,
        };
        Self::with(primal, tangent.zip(k))
    }

    pub fn sub(self, other: Self) -> Self {
        self.add(other.scale(-1.0))
    }

    /// Elementwise product. Either factor may be a `B × 1` column, which is
    /// repeated across columns.
    pub fn mul(self, other: Self) -> Self {
        let primal = self.primal.mul_bcast(other.primal);
        let k = Self::merge_k(&self, &other);
        let term_a = self.tangent.map(|(ta, _)| ta.mul_bcast(other.primal));
        let term_b = other.tangent.map(|(tb, _)| tb.mul_bcast(self.primal));
        let tangent = match (term_a, term_b) {
            (Some(a), Some(b)) => Some(a.add(b)),
            (a, b) => a.or(b),
        };
        Self::with(primal, tangent.zip(k))
    }

    pub fn scale(self, s: f64) -> Self {
        self.map_tangent(self.primal.scale(s), |t, _| t.scale(s))
    }

    pub fn add_scalar(self, c: f64) -> Self {
        Self::with(self.primal.add_scalar(c), self.tangent)
    }

    pub fn square(self) -> Self {
        self.mul(self)
    }

    pub fn silu(self) -> Self {
        let x = self.primal;
        if self.tangent.is_none() {
            return Self::constant(x.silu());
        }
        // One sigmoid serves the value, the derivative and their gradients.
        let s = x.sigmoid();
        self.map_tangent(x.mul(s), |t, _| {
            let t = if fault_enabled() { t.mul(t) } else { t };
            t.mul_bcast(x.silu_grad_from_sigmoid(s))
        })
    }

    pub fn sigmoid(self) -> Self {
        let y = self.primal.sigmoid();
        self.map_tangent(y, |t, _| {
            let dy = y.mul(y.scale(-1.0).add_scalar(1.0));
            t.mul_bcast(dy)
        })
    }

    pub fn log(self) -> Self {
        let x = self.primal;
        self.map_tangent(x.log(), |t, _| {
            // d log x = dx / x, with 1/x = rsqrt(x)^2 for x > 0.
            let inv = x.rsqrt(0.0).square();
            t.mul_bcast(inv)
        })
    }

    pub fn sin(self) -> Self {
        let x = self.primal;
        self.map_tangent(x.sin(), |t, _| t.mul_bcast(x.cos()))
    }

    pub fn cos(self) -> Self {
        let x = self.primal;
        self.map_tangent(x.cos(), |t, _| t.mul_bcast(x.sin().neg()))
    }

    /// Per-row mean, `B × F` to `B × 1`.
    pub fn row_mean(self) -> Self {
        let f = 1.0 / self.primal.cols() as f64;
        self.map_tangent(self.primal.row_sum().scale(f), |t, _| t.row_sum().scale(f))
    }

    /// `(x + eps)^(-1/2)` elementwise.
    pub fn rsqrt(self, eps: f64) -> Self {
        let y = self.primal.rsqrt(eps);
        self.map_tangent(y, |t, _| {
            let dy = y.mul(y).mul(y).scale(-0.5);
            t.mul_bcast(dy)
        })
    }

    /// `B × 1` to `B × cols`.
    pub fn broadcast_cols(self, cols: usize) -> Self {
        self.map_tangent(self.primal.broadcast_cols(cols), |t, _| t.broadcast_cols(cols))
    }

    /// Sum of all entries. The tangent is `k × 1`, one sum per direction.
    pub fn sum(self) -> Self {
        self.map_tangent(self.primal.sum(), |t, k| {
            if k == 1 {
                t.sum()
            } else {
                t.block_sum(k).row_sum()
            }
        })
    }

    pub fn mean(self) -> Self {
        let (r, c) = self.primal.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    pub fn concat_cols(parts: &[Self]) -> Self {
        let primals: Vec<Var<'t>> = parts.iter().map(|p| p.primal).collect();
        let primal = Var::concat_cols(&primals);
        let k = parts.iter().fold(None, |acc: Option<usize>, p| match (acc, p.directions()) {
            (acc, 0) => acc,
            (None, k) => Some(k),
            (Some(a), k) => {
                assert_eq!(a, k, "mixed tangent direction counts");
                Some(a)
            }
        });
        let Some(k) = k else {
            return Self::constant(primal);
        };
        let tape = primal.tape();
        let tangents: Vec<Var<'t>> = parts
            .iter()
            .map(|p| {
                p.tangent().unwrap_or_else(|| {
                    let (r, c) = p.primal.shape();
                    tape.constant(Tensor::zeros(k * r, c))
                })
            })
            .collect();
        Self::with(primal, Some((Var::concat_cols(&tangents), k)))
    }

    /// Row-wise RMS normalization `x / sqrt(mean(x²) + eps)`, optionally
    /// followed by a gain.
    pub fn rms_norm(self, gain: Option<Var<'t>>, eps: f64) -> Self {
        let inv = self.square().row_mean().rsqrt(eps);
        let y = self.mul(inv);
        match gain {
            Some(g) => y.mul_gain(g),
            None => y,
        }
    }

    /// Row-wise layer normalization with optional affine parameters.
    pub fn layer_norm(self, gain: Option<Var<'t>>, bias: Option<Var<'t>>, eps: f64) -> Self {
        let cols = self.primal.cols();
        let centered = self.sub(self.row_mean().broadcast_cols(cols));
        let inv = centered.square().row_mean().rsqrt(eps);
        let mut y = centered.mul(inv);
        if let Some(g) = gain {
            y = y.mul_gain(g);
        }
        if let Some(b) = bias {
            y = y.add_bias(b);
        }
        y
    }
}
