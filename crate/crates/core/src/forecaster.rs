//! The gated residual forecaster.
//!
//! A window of `L` steps and `C` channels is processed channel by channel
//! with shared weights. Each channel row goes through
//!
//! 1. reversible instance normalization,
//! 2. a learned affine rescaling driven by a small statistics network,
//! 3. moving-average decomposition into trend and residual,
//! 4. per component: a linear patch head plus a gated nonlinear core,
//!
//! and the normalized forecast is mapped back to the original scale:
//!
//! ```text
//! y = f_lin(x) + g_trend(x) * f_trend(x) + g_resid(x) * f_resid(x)
//! ```
//!
//! Batches are `[rows, L]` tensors whose rows are ordered window-major:
//! row `b * C + c` is channel `c` of window `b`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::splinekan::{KanLayer, SplineGrid};

/// Architecture variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreKind {
    LinearOnly,
    KanOnly,
    UngatedKan,
    GatedKan,
    GatedMlp,
}

impl CoreKind {
    pub const ALL: [CoreKind; 5] = [
        CoreKind::LinearOnly,
        CoreKind::KanOnly,
        CoreKind::UngatedKan,
        CoreKind::GatedKan,
        CoreKind::GatedMlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CoreKind::LinearOnly => "linear_only",
            CoreKind::KanOnly => "kan_only",
            CoreKind::UngatedKan => "ungated_kan",
            CoreKind::GatedKan => "gated_kan",
            CoreKind::GatedMlp => "gated_mlp",
        }
    }

    pub fn has_linear(self) -> bool {
        self != CoreKind::KanOnly
    }

    pub fn has_kan(self) -> bool {
        matches!(
            self,
            CoreKind::KanOnly | CoreKind::UngatedKan | CoreKind::GatedKan
        )
    }

    pub fn has_nonlinear(self) -> bool {
        self != CoreKind::LinearOnly
    }

    pub fn is_gated(self) -> bool {
        matches!(self, CoreKind::GatedKan | CoreKind::GatedMlp)
    }
}

impl fmt::Display for CoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CoreKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown core `{s}`")))
    }
}

/// Trend or residual component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Trend,
    Resid,
}

impl Component {
    pub const BOTH: [Component; 2] = [Component::Trend, Component::Resid];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Trend => "trend",
            Component::Resid => "resid",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub channels: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub kernel: usize,
    pub grid_size: usize,
    pub spline_order: usize,
    pub hidden_dim: usize,
    /// Number of hidden layers in each nonlinear core.
    pub kan_depth: usize,
    pub stats_dim: usize,
    pub stats_hidden: usize,
    pub revin_eps: f64,
    pub core: CoreKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 96,
            horizon: 16,
            channels: 1,
            patch_len: 16,
            stride: 8,
            d_model: 32,
            kernel: 25,
            grid_size: 5,
            spline_order: 3,
            hidden_dim: 64,
            kan_depth: 2,
            stats_dim: 8,
            stats_hidden: 32,
            revin_eps: 1e-5,
            core: CoreKind::GatedKan,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for examples and tests.
    pub fn tiny(channels: usize, input_len: usize) -> Self {
        Self {
            input_len,
            horizon: 2,
            channels,
            patch_len: 4,
            stride: 4,
            d_model: 2,
            kernel: 3,
            grid_size: 3,
            spline_order: 3,
            hidden_dim: 3,
            kan_depth: 1,
            stats_dim: 2,
            stats_hidden: 3,
            revin_eps: 1e-5,
            core: CoreKind::GatedKan,
        }
    }

    pub fn with_core(mut self, core: CoreKind) -> Self {
        self.core = core;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_len == 0 || self.horizon == 0 || self.channels == 0 {
            return fail("input_len, horizon and channels must be positive".into());
        }
        if self.patch_len == 0 || self.patch_len > self.input_len {
            return fail(format!(
                "patch_len {} must be in 1..={}",
                self.patch_len, self.input_len
            ));
        }
        if self.stride == 0 {
            return fail("stride must be at least 1".into());
        }
        if (self.input_len - self.patch_len) % self.stride != 0 {
            return fail(format!(
                "input_len - patch_len ({}) must be divisible by stride {}",
                self.input_len - self.patch_len,
                self.stride
            ));
        }
        if self.kernel % 2 == 0 {
            return fail(format!("moving-average kernel {} must be odd", self.kernel));
        }
        if self.kernel > self.input_len {
            return fail(format!(
                "moving-average kernel {} exceeds input_len {}",
                self.kernel, self.input_len
            ));
        }
        if self.d_model == 0
            || self.hidden_dim == 0
            || self.stats_dim == 0
            || self.stats_hidden == 0
        {
            return fail("layer widths must be positive".into());
        }
        if self.grid_size == 0 {
            return fail("grid_size must be positive".into());
        }
        if !(self.revin_eps > 0.0) {
            return fail("revin_eps must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.input_len - self.patch_len) / self.stride + 1
    }

    /// Width of the flattened patch embedding, `num_patches * d_model`.
    pub fn flat_dim(&self) -> usize {
        self.num_patches() * self.d_model
    }

    /// Layer widths of each nonlinear core.
    pub fn core_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.flat_dim()];
        dims.extend(std::iter::repeat(self.hidden_dim).take(self.kan_depth));
        dims.push(self.horizon);
        dims
    }

    /// Input positions `[start, end)` covered by patch `p`.
    pub fn patch_span(&self, p: usize) -> (usize, usize) {
        (p * self.stride, p * self.stride + self.patch_len)
    }

    /// Patch feeding flattened embedding coordinate `i`.
    pub fn patch_of_feature(&self, i: usize) -> usize {
        i / self.d_model
    }
}

/// Largest input length not above `len` that tiles exactly into patches.
/// Returns `None` when even one patch does not fit.
pub fn fit_input_len(len: usize, patch_len: usize, stride: usize) -> Option<usize> {
    if len < patch_len || stride == 0 {
        return None;
    }
    Some(len - (len - patch_len) % stride)
}

/// Per-row statistics stored by [`revin_normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct RevinState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standardize each row of `x` (population variance, `std = sqrt(var + eps)`).
pub fn revin_normalize(x: &Tensor, eps: f64) -> (Tensor, RevinState) {
    let (rows, cols) = x.dims2();
    let mut out = x.clone();
    let mut mean = Vec::with_capacity(rows);
    let mut std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let m = row.iter().sum::<f64>() / cols as f64;
        let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / cols as f64;
        let s = (v + eps).sqrt();
        row.iter_mut().for_each(|a| *a = (*a - m) / s);
        mean.push(m);
        std.push(s);
    }
    (out, RevinState { mean, std })
}

pub fn revin_denormalize(y: &Tensor, state: &RevinState) -> Tensor {
    let (rows, cols) = y.dims2();
    let mut out = y.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        row.iter_mut()
            .for_each(|a| *a = *a * state.std[r] + state.mean[r]);
    }
    out
}

/// `[L, L]` matrix of the centered moving average with replicated ends.
pub fn moving_average_matrix(len: usize, kernel: usize) -> Result<Tensor> {
    if kernel % 2 == 0 || kernel == 0 {
        return Err(Error::Config(format!(
            "moving-average kernel {kernel} must be odd"
        )));
    }
    let half = (kernel / 2) as isize;
    let mut m = vec![0.0; len * len];
    let w = 1.0 / kernel as f64;
    for t in 0..len {
        for o in -half..=half {
            let s = (t as isize + o).clamp(0, len as isize - 1) as usize;
            m[t * len + s] += w;
        }
    }
    Ok(Tensor::matrix(len, len, m)?)
}

/// Split each row of `x` into moving-average trend and residual.
pub fn decompose(x: &Tensor, kernel: usize) -> Result<(Tensor, Tensor)> {
    let (rows, cols) = x.dims2();
    let m = moving_average_matrix(cols, kernel)?;
    let trend = numerics::matmul(&x.clone().reshaped(&[rows, cols])?, &m, true)?;
    let mut resid = x.clone().reshaped(&[rows, cols])?;
    resid
        .data_mut()
        .iter_mut()
        .zip(trend.data())
        .for_each(|(a, t)| *a -= t);
    Ok((trend, resid))
}

/// Rows of overlapping patches, `[num_patches, patch_len]`.
pub fn patchify(x: &[f64], patch_len: usize, stride: usize) -> Result<Tensor> {
    if patch_len == 0 || patch_len > x.len() || stride == 0 || (x.len() - patch_len) % stride != 0 {
        return Err(Error::Config(format!(
            "length {} does not tile into patches of {patch_len} with stride {stride}",
            x.len()
        )));
    }
    let n = (x.len() - patch_len) / stride + 1;
    let data = (0..n)
        .flat_map(|p| x[p * stride..p * stride + patch_len].iter().copied())
        .collect();
    Ok(Tensor::matrix(n, patch_len, data)?)
}

/// Affine layer `x W^T + b` with `W: [out, in]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform `±1/sqrt(in_dim)` initialization of weights and bias.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound);
        let w = (0..in_dim * out_dim).map(|_| u.sample(rng)).collect();
        let b = (0..out_dim).map(|_| u.sample(rng)).collect();
        Self::with_values(
            store,
            prefix,
            Tensor::new(vec![out_dim, in_dim], w).expect("shape"),
            Tensor::new(vec![1, out_dim], b).expect("shape"),
        )
    }

    pub fn with_values(store: &mut ParamStore, prefix: &str, weight: Tensor, bias: Tensor) -> Self {
        let (out_dim, in_dim) = weight.dims2();
        Self {
            in_dim,
            out_dim,
            weight: store.add(format!("{prefix}.weight"), weight),
            bias: store.add(format!("{prefix}.bias"), bias),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul_t(x, p[self.weight])?;
        Ok(tape.add(y, p[self.bias])?)
    }
}

/// The nonlinear core of one component.
#[derive(Clone, Debug, PartialEq)]
pub enum Core {
    Kan(Vec<KanLayer>),
    Mlp(Vec<Linear>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearBranch {
    pub embed: Linear,
    pub core: Core,
}

impl NonlinearBranch {
    pub fn kan_layers(&self) -> &[KanLayer] {
        match &self.core {
            Core::Kan(l) => l,
            Core::Mlp(_) => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearBranch {
    pub embed: Linear,
    pub head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateNet {
    pub hidden: Linear,
    pub out: Linear,
}

/// Additive offsets on KAN layer outputs, keyed by component and layer.
pub type LayerOffsets = BTreeMap<(Component, usize), Vec<f64>>;

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Replace the gate of a component by a constant.
    pub gate_override: [Option<f64>; 2],
    pub layer_offsets: Option<&'a LayerOffsets>,
    /// Multiplicative `[rows, L]` mask applied after instance normalization.
    pub input_mask: Option<&'a Tensor>,
}

impl ForwardOptions<'_> {
    pub fn gates_fixed(value: f64) -> Self {
        Self {
            gate_override: [Some(value); 2],
            ..Self::default()
        }
    }
}

/// Normalized input and its decomposition on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Front {
    pub rows: usize,
    pub x_norm: Var,
    pub mean: Var,
    pub std: Var,
    pub trend: Var,
    pub resid: Var,
}

/// Handles to the intermediate values of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct Recorded {
    pub x_norm: Var,
    pub mean: Var,
    pub std: Var,
    pub trend: Var,
    pub resid: Var,
    pub linear: Option<Var>,
    /// Core outputs before gating, in normalized space.
    pub core_out: [Option<Var>; 2],
    pub gates: [Option<Var>; 2],
    /// Inputs to each KAN layer, per component.
    pub layer_inputs: [Vec<Var>; 2],
    /// Outputs of each KAN layer (after any offsets), per component.
    pub layer_outputs: [Vec<Var>; 2],
    pub y_norm: Var,
    pub y: Var,
}

/// Plain-tensor copies of the values in [`Recorded`].
#[derive(Clone, Debug)]
pub struct ForwardValues {
    pub y: Tensor,
    pub y_norm: Tensor,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub linear: Option<Tensor>,
    pub core_out: [Option<Tensor>; 2],
    pub gates: [Option<Vec<f64>>; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatedModel {
    config: ModelConfig,
    params: ParamStore,
    stats: [Linear; 2],
    affine: Linear,
    linear: Option<[LinearBranch; 2]>,
    nonlinear: Option<[NonlinearBranch; 2]>,
    gates: Option<[GateNet; 2]>,
    ma: Tensor,
}

const FORMAT_MAGIC: &[u8; 8] = b"GKANFILE";
const FORMAT_VERSION: u32 = 1;

impl GatedModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let l = config.input_len;
        let stats = [
            Linear::init(&mut p, "norm.stats.0", l, config.stats_hidden, rng),
            Linear::init(
                &mut p,
                "norm.stats.1",
                config.stats_hidden,
                config.stats_dim,
                rng,
            ),
        ];
        let affine = Linear::with_values(
            &mut p,
            "norm.affine",
            Tensor::zeros(&[2, config.stats_dim]),
            Tensor::new(vec![1, 2], vec![1.0, 0.0])?,
        );
        let linear = if config.core.has_linear() {
            Some(Component::BOTH.map(|c| LinearBranch {
                embed: Linear::init(
                    &mut p,
                    &format!("linear.{c}.embed"),
                    config.patch_len,
                    config.d_model,
                    rng,
                ),
                head: Linear::init(
                    &mut p,
                    &format!("linear.{c}.head"),
                    config.flat_dim(),
                    config.horizon,
                    rng,
                ),
            }))
        } else {
            None
        };
        let nonlinear = if config.core.has_nonlinear() {
            let dims = config.core_dims();
            let kan = config.core.has_kan();
            let family = if kan { "kan" } else { "mlp" };
            Some(Component::BOTH.map(|c| {
                let embed = Linear::init(
                    &mut p,
                    &format!("{family}.{c}.embed"),
                    config.patch_len,
                    config.d_model,
                    rng,
                );
                let core = if kan {
                    let grid =
                        SplineGrid::uniform(config.grid_size, config.spline_order, -1.0, 1.0)
                            .expect("validated grid");
                    Core::Kan(
                        dims.windows(2)
                            .enumerate()
                            .map(|(i, w)| {
                                KanLayer::init(
                                    &mut p,
                                    &format!("kan.{c}.layer{i}"),
                                    w[0],
                                    w[1],
                                    grid.clone(),
                                    rng,
                                )
                            })
                            .collect(),
                    )
                } else {
                    Core::Mlp(
                        dims.windows(2)
                            .enumerate()
                            .map(|(i, w)| {
                                Linear::init(&mut p, &format!("mlp.{c}.layer{i}"), w[0], w[1], rng)
                            })
                            .collect(),
                    )
                };
                NonlinearBranch { embed, core }
            }))
        } else {
            None
        };
        let gates = if config.core.is_gated() {
            Some(Component::BOTH.map(|c| GateNet {
                hidden: Linear::init(&mut p, &format!("gate.{c}.0"), l, config.hidden_dim, rng),
                out: Linear::init(&mut p, &format!("gate.{c}.1"), config.hidden_dim, 1, rng),
            }))
        } else {
            None
        };
        let ma = moving_average_matrix(l, config.kernel)?;
        Ok(Self {
            config,
            params: p,
            stats,
            affine,
            linear,
            nonlinear,
            gates,
            ma,
        })
    }

    /// Model initialized from the `init` stream of `seed`.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut numerics::substream(seed, "init"))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn affine(&self) -> &Linear {
        &self.affine
    }

    pub fn stats_net(&self) -> &[Linear; 2] {
        &self.stats
    }

    pub fn linear_branch(&self, c: Component) -> Option<&LinearBranch> {
        self.linear.as_ref().map(|l| &l[c.index()])
    }

    pub fn nonlinear_branch(&self, c: Component) -> Option<&NonlinearBranch> {
        self.nonlinear.as_ref().map(|n| &n[c.index()])
    }

    pub fn gate_net(&self, c: Component) -> Option<&GateNet> {
        self.gates.as_ref().map(|g| &g[c.index()])
    }

    /// KAN layers of a component (empty for non-KAN cores).
    pub fn kan_layers(&self, c: Component) -> &[KanLayer] {
        self.nonlinear_branch(c)
            .map(|b| b.kan_layers())
            .unwrap_or(&[])
    }

    /// Copy every parameter whose name also exists in `other`.
    pub fn copy_shared_params(&mut self, other: &GatedModel) -> Result<usize> {
        let mut n = 0;
        for (id, name, t) in other.params.iter() {
            let _ = id;
            if let Some(mine) = self.params.id_of(name) {
                if self.params.get(mine).shape() != t.shape() {
                    return Err(Error::Format(format!("shape mismatch for `{name}`")));
                }
                *self.params.get_mut(mine) = t.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    fn check_rows(&self, x: &Tensor) -> Result<usize> {
        let (rows, cols) = x.dims2();
        if x.shape().len() != 2 || cols != self.config.input_len || rows % self.config.channels != 0
        {
            return Err(Error::Shape {
                expected: vec![self.config.channels, self.config.input_len],
                got: x.shape().to_vec(),
            });
        }
        Ok(rows)
    }

    /// Record normalization and decomposition of `x` (`[rows, L]`).
    pub fn record_front(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<Front> {
        let xt = tape.value(x);
        let rows = self.check_rows(xt)?;
        let cfg = &self.config;

        let mean = tape.mean_cols(x)?;
        let centered = tape.sub(x, mean)?;
        let sq = tape.square(centered)?;
        let var = tape.mean_cols(sq)?;
        let var = tape.shift(var, cfg.revin_eps)?;
        let std = tape.sqrt(var)?;
        let mut x_norm = tape.div(centered, std)?;
        if let Some(mask) = opts.input_mask {
            if mask.shape() != [rows, cfg.input_len] {
                return Err(Error::Shape {
                    expected: vec![rows, cfg.input_len],
                    got: mask.shape().to_vec(),
                });
            }
            let m = tape.constant(mask.clone())?;
            x_norm = tape.mul(x_norm, m)?;
        }

        let h = self.stats[0].forward(tape, p, x_norm)?;
        let h = tape.silu(h)?;
        let s = self.stats[1].forward(tape, p, h)?;
        let ab = self.affine.forward(tape, p, s)?;
        let gamma = tape.slice(ab, 1, 0, 1)?;
        let beta = tape.slice(ab, 1, 1, 1)?;
        let scaled = tape.mul(x_norm, gamma)?;
        let x_adapt = tape.add(scaled, beta)?;

        let ma = tape.constant(self.ma.clone())?;
        let trend = tape.matmul_t(x_adapt, ma)?;
        let resid = tape.sub(x_adapt, trend)?;
        Ok(Front {
            rows,
            x_norm,
            mean,
            std,
            trend,
            resid,
        })
    }

    fn embed(
        &self,
        tape: &mut Tape,
        p: &Bound,
        lin: &Linear,
        src: Var,
        rows: usize,
    ) -> Result<Var> {
        let u = tape.unfold(src, self.config.patch_len, self.config.stride)?;
        let e = lin.forward(tape, p, u)?;
        Ok(tape.reshape(e, &[rows, self.config.flat_dim()])?)
    }

    /// Record the inputs of the nonlinear cores (the flattened patch
    /// embeddings) without evaluating the cores themselves.
    pub fn record_core_inputs(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<[Option<Var>; 2]> {
        let front = self.record_front(tape, p, x, opts)?;
        let parts = [front.trend, front.resid];
        let mut out = [None, None];
        if let Some(branches) = &self.nonlinear {
            for c in Component::BOTH {
                let b = &branches[c.index()];
                out[c.index()] =
                    Some(self.embed(tape, p, &b.embed, parts[c.index()], front.rows)?);
            }
        }
        Ok(out)
    }

    /// Record the forward pass of `x` (`[rows, L]`) on `tape`.
    pub fn record(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<Recorded> {
        let Front {
            rows,
            x_norm,
            mean,
            std,
            trend,
            resid,
        } = self.record_front(tape, p, x, opts)?;
        let parts = [trend, resid];

        let mut linear = None;
        if let Some(branches) = &self.linear {
            let mut acc: Option<Var> = None;
            for c in Component::BOTH {
                let b = &branches[c.index()];
                let f = self.embed(tape, p, &b.embed, parts[c.index()], rows)?;
                let o = b.head.forward(tape, p, f)?;
                acc = Some(match acc {
                    None => o,
                    Some(a) => tape.add(a, o)?,
                });
            }
            linear = acc;
        }

        let mut core_out = [None, None];
        let mut layer_inputs: [Vec<Var>; 2] = Default::default();
        let mut layer_outputs: [Vec<Var>; 2] = Default::default();
        if let Some(branches) = &self.nonlinear {
            for c in Component::BOTH {
                let b = &branches[c.index()];
                let mut z = self.embed(tape, p, &b.embed, parts[c.index()], rows)?;
                match &b.core {
                    Core::Kan(layers) => {
                        for (li, layer) in layers.iter().enumerate() {
                            layer_inputs[c.index()].push(z);
                            let mut out = layer.forward(tape, p, z)?;
                            if let Some(off) = opts.layer_offsets.and_then(|o| o.get(&(c, li))) {
                                let t =
                                    tape.constant(Tensor::new(vec![1, off.len()], off.clone())?)?;
                                out = tape.add(out, t)?;
                            }
                            layer_outputs[c.index()].push(out);
                            z = out;
                        }
                    }
                    Core::Mlp(layers) => {
                        for (li, layer) in layers.iter().enumerate() {
                            z = layer.forward(tape, p, z)?;
                            if li + 1 < layers.len() {
                                z = tape.silu(z)?;
                            }
                        }
                    }
                }
                core_out[c.index()] = Some(z);
            }
        }

        let mut gates = [None, None];
        for c in Component::BOTH {
            if core_out[c.index()].is_none() {
                continue;
            }
            gates[c.index()] = match (opts.gate_override[c.index()], &self.gates) {
                (Some(v), _) => Some(tape.constant(Tensor::full(&[rows, 1], v))?),
                (None, Some(nets)) => {
                    let g = &nets[c.index()];
                    let h = g.hidden.forward(tape, p, x_norm)?;
                    let h = tape.silu(h)?;
                    let o = g.out.forward(tape, p, h)?;
                    Some(tape.sigmoid(o)?)
                }
                (None, None) => None,
            };
        }

        let mut y_norm = linear;
        for c in Component::BOTH {
            if let Some(f) = core_out[c.index()] {
                let term = match gates[c.index()] {
                    Some(g) => tape.mul(f, g)?,
                    None => f,
                };
                y_norm = Some(match y_norm {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
        }
        let y_norm = y_norm.expect("every core has at least one branch");
        let y = tape.mul(y_norm, std)?;
        let y = tape.add(y, mean)?;

        Ok(Recorded {
            x_norm,
            mean,
            std,
            trend,
            resid,
            linear,
            core_out,
            gates,
            layer_inputs,
            layer_outputs,
            y_norm,
            y,
        })
    }

    /// Evaluate without gradients.
    pub fn evaluate(&self, x: &Tensor, opts: &ForwardOptions) -> Result<ForwardValues> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let r = self.record(&mut tape, &p, xv, opts)?;
        let val = |v: Var| tape.value(v).clone();
        Ok(ForwardValues {
            y: val(r.y),
            y_norm: val(r.y_norm),
            mean: tape.value(r.mean).data().to_vec(),
            std: tape.value(r.std).data().to_vec(),
            linear: r.linear.map(val),
            core_out: r.core_out.map(|v| v.map(val)),
            gates: r.gates.map(|v| v.map(|g| tape.value(g).data().to_vec())),
        })
    }

    /// Denormalized forecasts `[rows, H]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.predict_with(x, &ForwardOptions::default())
    }

    pub fn predict_with(&self, x: &Tensor, opts: &ForwardOptions) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let r = self.record(&mut tape, &p, xv, opts)?;
        Ok(tape.value(r.y).clone())
    }

    /// Forecast one window given time-major as `[L * C]` values; returns
    /// `[H * C]` time-major.
    pub fn forecast_window(&self, window: &[f64]) -> Result<Vec<f64>> {
        let (l, c, h) = (
            self.config.input_len,
            self.config.channels,
            self.config.horizon,
        );
        if window.len() != l * c {
            return Err(Error::Shape {
                expected: vec![l, c],
                got: vec![window.len()],
            });
        }
        let rows: Vec<f64> = (0..c)
            .flat_map(|ch| (0..l).map(move |t| window[t * c + ch]))
            .collect();
        let y = self.predict(&Tensor::matrix(c, l, rows)?)?;
        Ok((0..h)
            .flat_map(|t| (0..c).map(move |ch| (t, ch)))
            .map(|(t, ch)| y.data()[ch * h + t])
            .collect())
    }

    /// Mean gate value over windows, channels and both components.
    pub fn u_kan(&self, x: &Tensor) -> Result<f64> {
        let rows = self.check_rows(x)?;
        if rows == 0 {
            return Err(Error::Empty("dataset"));
        }
        if self.config.core == CoreKind::UngatedKan {
            return Ok(1.0);
        }
        if !self.config.core.is_gated() {
            return Err(Error::Unsupported(format!(
                "{} has no gates",
                self.config.core
            )));
        }
        let mut total = 0.0;
        for chunk in row_chunks(x, self.config.channels)? {
            let v = self.evaluate(&chunk, &ForwardOptions::default())?;
            for g in v.gates.iter().flatten() {
                total += g.iter().sum::<f64>();
            }
        }
        Ok(total / (2 * rows) as f64)
    }

    /// Mean over windows of `||std * sum_c g_c f_c|| / ||y||`.
    pub fn r_kan(&self, x: &Tensor) -> Result<f64> {
        let rows = self.check_rows(x)?;
        if rows == 0 {
            return Err(Error::Empty("dataset"));
        }
        let (c, h) = (self.config.channels, self.config.horizon);
        let mut total = 0.0;
        let mut windows = 0usize;
        for chunk in row_chunks(x, c)? {
            let v = self.evaluate(&chunk, &ForwardOptions::default())?;
            let n = chunk.dims2().0;
            for w in 0..n / c {
                let (mut num, mut den) = (0.0, 0.0);
                for r in w * c..(w + 1) * c {
                    for t in 0..h {
                        let mut k = 0.0;
                        for comp in 0..2 {
                            if let Some(f) = &v.core_out[comp] {
                                let g = v.gates[comp].as_ref().map_or(1.0, |g| g[r]);
                                k += g * f.data()[r * h + t];
                            }
                        }
                        k *= v.std[r];
                        num += k * k;
                        den += v.y.data()[r * h + t].powi(2);
                    }
                }
                total += num.sqrt() / den.sqrt().max(1e-12);
                windows += 1;
            }
        }
        Ok(total / windows as f64)
    }

    pub fn to_container(&self) -> Container {
        Container {
            meta: serde_json::json!({ "config": self.config }),
            tensors: self
                .params
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Rebuild from a container holding exactly this model's parameters.
    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("missing config".into()))?,
        )
        .map_err(|e| Error::Format(format!("bad config: {e}")))?;
        let mut model = Self::seeded(config, 0)?;
        let mut seen = 0;
        for (name, t) in &c.tensors {
            if name.starts_with("adam.") {
                continue;
            }
            let id = model
                .params
                .id_of(name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
            if model.params.get(id).shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = t.clone();
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {seen}",
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_container().to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Split `x` into row blocks of whole windows (about 256 windows each).
pub fn row_chunks(x: &Tensor, channels: usize) -> Result<Vec<Tensor>> {
    let (rows, cols) = x.dims2();
    let step = 256 * channels;
    let mut out = Vec::new();
    let mut start = 0;
    while start < rows {
        let end = (start + step).min(rows);
        out.push(Tensor::matrix(
            end - start,
            cols,
            x.data()[start * cols..end * cols].to_vec(),
        )?);
        start = end;
    }
    Ok(out)
}

/// Versioned binary file of a JSON header plus named little-endian `f64`
/// tensors.
///
/// Layout: 8-byte magic, `u32` version, `u64` header length, header JSON
/// (`{"meta": .., "tensors": [{"name", "shape"}, ..]}`), then each tensor's
/// values in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(FORMAT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        let mut magic = [0u8; 8];
        bytes
            .read_exact(&mut magic)
            .map_err(|_| bad("truncated file"))?;
        if &magic != FORMAT_MAGIC {
            return Err(bad("not a model file (bad magic)"));
        }
        let mut v = [0u8; 4];
        bytes
            .read_exact(&mut v)
            .map_err(|_| bad("truncated file"))?;
        let version = u32::from_le_bytes(v);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let mut n = [0u8; 8];
        bytes
            .read_exact(&mut n)
            .map_err(|_| bad("truncated file"))?;
        let hlen = u64::from_le_bytes(n) as usize;
        if hlen > bytes.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[..hlen])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        bytes = &bytes[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let count: usize = e.shape.iter().product();
            if bytes.len() < count * 8 {
                return Err(Error::Format(format!("truncated data for `{}`", e.name)));
            }
            let data = bytes[..count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            bytes = &bytes[count * 8..];
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        if !bytes.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
