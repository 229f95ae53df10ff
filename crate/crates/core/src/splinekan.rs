//! B-spline bases and the KAN layer built on them.
//!
//! Every edge `(i -> j)` of a [`KanLayer`] carries the univariate function
//!
//! ```text
//! phi(z) = w[j, i] * silu(z) + sum_k c[j, i, k] * B_k(z)
//! ```
//!
//! where `B_k` are degree-`p` B-splines on a uniform knot vector. A layer
//! output is the sum of its incoming edge activations.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, Bound, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

/// Scan resolution used for activation ranges.
pub const RANGE_RESOLUTION: usize = 256;

const KNOT_TOLERANCE: f64 = 1e-12;

/// Orders below this use the local evaluation scheme.
const LOCAL_MAX_ORDER: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("knots must be strictly increasing (gap {gap:e} at index {index})")]
    DegenerateKnots { index: usize, gap: f64 },
    #[error("spline grid needs at least one interval and {needed} knots, got {got}")]
    TooFewKnots { needed: usize, got: usize },
    #[error("edge ({input} -> {output}) outside a {in_dim}x{out_dim} layer")]
    InvalidEdge {
        input: usize,
        output: usize,
        in_dim: usize,
        out_dim: usize,
    },
    #[error("layer expects {expected} inputs, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Knot vector of a degree-`order` spline over `grid_size` intervals of
/// `[lo, hi]`, padded with `order` extra knots on each side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    grid_size: usize,
    order: usize,
    knots: Vec<f64>,
}

impl SplineGrid {
    /// Uniform knots with spacing `(hi - lo) / grid_size`, extended by the
    /// same spacing beyond both ends.
    pub fn uniform(grid_size: usize, order: usize, lo: f64, hi: f64) -> Result<Self, SplineError> {
        if grid_size == 0 {
            return Err(SplineError::TooFewKnots {
                needed: 2 * order + 2,
                got: 0,
            });
        }
        let h = (hi - lo) / grid_size as f64;
        let knots = (0..=grid_size + 2 * order)
            .map(|m| lo + (m as f64 - order as f64) * h)
            .collect();
        Self::from_knots(knots, order)
    }

    /// Arbitrary strictly increasing knots; the grid interval is
    /// `[knots[order], knots[len - 1 - order]]`.
    pub fn from_knots(knots: Vec<f64>, order: usize) -> Result<Self, SplineError> {
        let needed = 2 * order + 2;
        if knots.len() < needed {
            return Err(SplineError::TooFewKnots {
                needed,
                got: knots.len(),
            });
        }
        for (index, w) in knots.windows(2).enumerate() {
            let gap = w[1] - w[0];
            if !(gap > KNOT_TOLERANCE) {
                return Err(SplineError::DegenerateKnots { index, gap });
            }
        }
        Ok(Self {
            grid_size: knots.len() - 2 * order - 1,
            order,
            knots,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `grid_size + order`.
    pub fn num_basis(&self) -> usize {
        self.grid_size + self.order
    }

    /// Left end `t_0` of the grid interval.
    pub fn lo(&self) -> f64 {
        self.knots[self.order]
    }

    /// Right end `t_G` of the grid interval.
    pub fn hi(&self) -> f64 {
        self.knots[self.knots.len() - 1 - self.order]
    }

    /// All basis values at `z`.
    pub fn basis(&self, z: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_basis()];
        let mut scratch = vec![0.0; self.knots.len()];
        self.basis_into(z, &mut out, None, &mut scratch);
        out
    }

    /// Basis values (and optionally their derivatives) at `z` via the
    /// Cox-de Boor recursion. `scratch` must hold at least `knots.len()`
    /// values. Outside the padded knot span every basis is zero; no clamping
    /// is applied.
    pub fn basis_into(
        &self,
        z: f64,
        out: &mut [f64],
        deriv: Option<&mut [f64]>,
        scratch: &mut [f64],
    ) {
        let t = &self.knots;
        let p = self.order;
        let nb = self.num_basis();
        // span m with t[m] <= z < t[m + 1]
        let m = t.partition_point(|&k| k <= z).wrapping_sub(1);
        if p < LOCAL_MAX_ORDER && m != usize::MAX && m >= p && m + p + 1 < t.len() {
            self.basis_local(z, m, &mut out[..nb], deriv.map(|d| &mut d[..nb]));
        } else {
            self.basis_full(z, out, deriv, scratch);
        }
    }

    /// The `p + 1` nonzero bases on span `m`, triangular scheme.
    fn basis_local(&self, z: f64, m: usize, out: &mut [f64], deriv: Option<&mut [f64]>) {
        let t = &self.knots;
        let p = self.order;
        let mut n = [0.0; LOCAL_MAX_ORDER + 1];
        let mut lower = [0.0; LOCAL_MAX_ORDER + 1];
        let mut left = [0.0; LOCAL_MAX_ORDER + 1];
        let mut right = [0.0; LOCAL_MAX_ORDER + 1];
        n[0] = 1.0;
        for j in 1..=p {
            if j == p {
                lower[..p].copy_from_slice(&n[..p]);
            }
            left[j] = z - t[m + 1 - j];
            right[j] = t[m + j] - z;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        out.fill(0.0);
        out[m - p..=m].copy_from_slice(&n[..=p]);
        if let Some(dv) = deriv {
            dv.fill(0.0);
            if p > 0 {
                // lower[r] = B_{m-p+1+r, p-1}
                let pf = p as f64;
                for k in m - p..=m {
                    let a = if k > m - p {
                        lower[k - (m - p + 1)]
                    } else {
                        0.0
                    };
                    let b = if k < m {
                        lower[k + 1 - (m - p + 1)]
                    } else {
                        0.0
                    };
                    dv[k] = pf / (t[k + p] - t[k]) * a - pf / (t[k + p + 1] - t[k + 1]) * b;
                }
            }
        }
    }

    /// Full-table recursion over every knot interval.
    fn basis_full(&self, z: f64, out: &mut [f64], deriv: Option<&mut [f64]>, scratch: &mut [f64]) {
        let t = &self.knots;
        let p = self.order;
        let nb = self.num_basis();
        let b = &mut scratch[..t.len() - 1];
        for (m, v) in b.iter_mut().enumerate() {
            *v = if t[m] <= z && z < t[m + 1] { 1.0 } else { 0.0 };
        }
        let raise = |b: &mut [f64], d: usize| {
            for k in 0..t.len() - 1 - d {
                let left = (z - t[k]) / (t[k + d] - t[k]) * b[k];
                let right = (t[k + d + 1] - z) / (t[k + d + 1] - t[k + 1]) * b[k + 1];
                b[k] = left + right;
            }
        };
        for d in 1..p {
            raise(b, d);
        }
        if let Some(dv) = deriv {
            // B'_{k,p} = p/(t_{k+p}-t_k) B_{k,p-1} - p/(t_{k+p+1}-t_{k+1}) B_{k+1,p-1}
            if p == 0 {
                dv[..nb].iter_mut().for_each(|x| *x = 0.0);
            } else {
                let pf = p as f64;
                for k in 0..nb {
                    dv[k] =
                        pf / (t[k + p] - t[k]) * b[k] - pf / (t[k + p + 1] - t[k + 1]) * b[k + 1];
                }
            }
        }
        if p >= 1 {
            raise(b, p);
        }
        out[..nb].copy_from_slice(&b[..nb]);
    }

    /// `n` evenly spaced points covering `[lo, hi]` inclusive.
    pub fn scan_points(&self, n: usize) -> Vec<f64> {
        let (lo, hi) = (self.lo(), self.hi());
        if n <= 1 {
            return vec![lo];
        }
        (0..n)
            .map(|s| lo + (hi - lo) * s as f64 / (n - 1) as f64)
            .collect()
    }
}

/// One edge of a KAN layer: `input -> output` within layer `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeId {
    pub layer: usize,
    pub input: usize,
    pub output: usize,
}

impl EdgeId {
    pub fn new(layer: usize, input: usize, output: usize) -> Self {
        Self {
            layer,
            input,
            output,
        }
    }
}

/// A KAN layer whose parameters live in a [`ParamStore`].
///
/// `base_weight` is `[out_dim, in_dim]`; `spline_coeffs` is
/// `[out_dim, in_dim, num_basis]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KanLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: SplineGrid,
    pub base_weight: ParamId,
    pub spline_coeffs: ParamId,
}

impl KanLayer {
    /// Register a freshly initialized layer in `store` under `prefix`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        grid: SplineGrid,
        rng: &mut impl Rng,
    ) -> Self {
        let nb = grid.num_basis();
        let bound = 1.0 / (in_dim as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound);
        let w: Vec<f64> = (0..out_dim * in_dim).map(|_| uni.sample(rng)).collect();
        let normal = Normal::new(0.0, 0.1 / (nb as f64).sqrt()).expect("valid std");
        let c: Vec<f64> = (0..out_dim * in_dim * nb)
            .map(|_| normal.sample(rng))
            .collect();
        let base_weight = store.add(
            format!("{prefix}.base_weight"),
            Tensor::new(vec![out_dim, in_dim], w).expect("shape"),
        );
        let spline_coeffs = store.add(
            format!("{prefix}.spline_coeffs"),
            Tensor::new(vec![out_dim, in_dim, nb], c).expect("shape"),
        );
        Self {
            in_dim,
            out_dim,
            grid,
            base_weight,
            spline_coeffs,
        }
    }

    /// Re-draw this layer's parameters in place (all of them, or only the
    /// spline coefficients).
    pub fn reinit(&self, store: &mut ParamStore, spline_only: bool, rng: &mut impl Rng) {
        let mut scratch = ParamStore::new();
        let fresh = Self::init(
            &mut scratch,
            "reinit",
            self.in_dim,
            self.out_dim,
            self.grid.clone(),
            rng,
        );
        if !spline_only {
            *store.get_mut(self.base_weight) = scratch.get(fresh.base_weight).clone();
        }
        *store.get_mut(self.spline_coeffs) = scratch.get(fresh.spline_coeffs).clone();
    }

    pub fn num_edges(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn check_edge(&self, input: usize, output: usize) -> Result<(), SplineError> {
        if input >= self.in_dim || output >= self.out_dim {
            return Err(SplineError::InvalidEdge {
                input,
                output,
                in_dim: self.in_dim,
                out_dim: self.out_dim,
            });
        }
        Ok(())
    }

    fn weight(&self, store: &ParamStore, input: usize, output: usize) -> f64 {
        store.get(self.base_weight).data()[output * self.in_dim + input]
    }

    fn coeffs<'a>(&self, store: &'a ParamStore, input: usize, output: usize) -> &'a [f64] {
        let nb = self.grid.num_basis();
        let off = (output * self.in_dim + input) * nb;
        &store.get(self.spline_coeffs).data()[off..off + nb]
    }

    /// Edge activation `phi(z)`.
    pub fn edge_eval(
        &self,
        store: &ParamStore,
        input: usize,
        output: usize,
        z: f64,
    ) -> Result<f64, SplineError> {
        self.check_edge(input, output)?;
        let basis = self.grid.basis(z);
        let spline: f64 = self
            .coeffs(store, input, output)
            .iter()
            .zip(&basis)
            .map(|(c, b)| c * b)
            .sum();
        Ok(self.weight(store, input, output) * numerics::silu(z) + spline)
    }

    /// Edge activation with the spline term removed: `w * silu(z)`.
    pub fn spline_removed_eval(
        &self,
        store: &ParamStore,
        input: usize,
        output: usize,
        z: f64,
    ) -> Result<f64, SplineError> {
        self.check_edge(input, output)?;
        Ok(self.weight(store, input, output) * numerics::silu(z))
    }

    /// Layer output for one input vector, without a tape.
    pub fn forward_values(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>, SplineError> {
        if x.len() != self.in_dim {
            return Err(SplineError::LengthMismatch {
                expected: self.in_dim,
                got: x.len(),
            });
        }
        let nb = self.grid.num_basis();
        let mut scratch = vec![0.0; self.grid.knots().len()];
        let mut basis = vec![0.0; self.in_dim * nb];
        for (i, &z) in x.iter().enumerate() {
            self.grid
                .basis_into(z, &mut basis[i * nb..(i + 1) * nb], None, &mut scratch);
        }
        let silu: Vec<f64> = x.iter().map(|&z| numerics::silu(z)).collect();
        let w = store.get(self.base_weight).data();
        let c = store.get(self.spline_coeffs).data();
        let out = (0..self.out_dim)
            .map(|j| {
                let wrow = &w[j * self.in_dim..(j + 1) * self.in_dim];
                let crow = &c[j * self.in_dim * nb..(j + 1) * self.in_dim * nb];
                let base: f64 = wrow.iter().zip(&silu).map(|(a, b)| a * b).sum();
                let spl: f64 = crow.iter().zip(&basis).map(|(a, b)| a * b).sum();
                base + spl
            })
            .collect();
        Ok(out)
    }

    /// Record the layer on `tape` for a batch `z` of shape `[rows, in_dim]`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, z: Var) -> Result<Var, SplineError> {
        let (_, cols) = tape.value(z).dims2();
        if cols != self.in_dim {
            return Err(SplineError::LengthMismatch {
                expected: self.in_dim,
                got: cols,
            });
        }
        let nb = self.grid.num_basis();
        let act = tape.silu(z)?;
        let base = tape.matmul_t(act, params[self.base_weight])?;
        let grid = &self.grid;
        let mut scratch = vec![0.0; grid.knots().len()];
        let basis = tape.expand(z, nb, |x, v, d| {
            grid.basis_into(x, v, d, &mut scratch);
        })?;
        let coeffs = tape.reshape(
            params[self.spline_coeffs],
            &[self.out_dim, self.in_dim * nb],
        )?;
        let spline = tape.matmul_t(basis, coeffs)?;
        Ok(tape.add(base, spline)?)
    }

    /// `max phi - min phi` over a uniform scan of `[t_0, t_G]`.
    pub fn activation_range_with(
        &self,
        store: &ParamStore,
        input: usize,
        output: usize,
        resolution: usize,
    ) -> Result<f64, SplineError> {
        self.check_edge(input, output)?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for z in self.grid.scan_points(resolution) {
            let v = self.edge_eval(store, input, output, z)?;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Ok(hi - lo)
    }

    pub fn activation_range(
        &self,
        store: &ParamStore,
        input: usize,
        output: usize,
    ) -> Result<f64, SplineError> {
        self.activation_range_with(store, input, output, RANGE_RESOLUTION)
    }

    /// Activation ranges of every edge, indexed `[output * in_dim + input]`.
    /// Shares the basis evaluation across edges.
    pub fn all_activation_ranges(&self, store: &ParamStore, resolution: usize) -> Vec<f64> {
        let nb = self.grid.num_basis();
        let pts = self.grid.scan_points(resolution);
        let bases: Vec<Vec<f64>> = pts.iter().map(|&z| self.grid.basis(z)).collect();
        let silus: Vec<f64> = pts.iter().map(|&z| numerics::silu(z)).collect();
        let w = store.get(self.base_weight).data();
        let c = store.get(self.spline_coeffs).data();
        let mut ranges = vec![0.0; self.num_edges()];
        for e in 0..self.num_edges() {
            let we = w[e];
            let ce = &c[e * nb..(e + 1) * nb];
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (b, s) in bases.iter().zip(&silus) {
                let v = we * s + ce.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                lo = lo.min(v);
                hi = hi.max(v);
            }
            ranges[e] = hi - lo;
        }
        ranges
    }
}
