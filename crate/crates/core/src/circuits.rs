//! Edge-level functional circuits: attribution, importance, interventions,
//! deletion curves and the diagnostics used to validate them.
//!
//! Attribution and importance are defined for first-layer KAN edges only.
//! Scalar outputs are the sum of the denormalized forecast over channels
//! and horizons. Expectations run over the rows (window, channel pairs) of
//! a sample.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{RegimeSpec, Windows};
use crate::error::{Error, Result};
use crate::forecaster::{
    row_chunks, Component, ForwardOptions, GatedModel, LayerOffsets, ModelConfig,
};
use crate::numerics::{self, Tape, Tensor};
use crate::splinekan::{EdgeId, KanLayer, SplineError, RANGE_RESOLUTION};
use crate::trainer::{self, TrainConfig};

/// Default deletion sizes.
pub const DEFAULT_KS: [usize; 4] = [5, 10, 20, 50];
/// Random deletion draws per curve.
pub const DEFAULT_DRAWS: usize = 50;
/// Windows used for attribution and importance expectations.
pub const ATTRIBUTION_SAMPLE: usize = 512;
pub const IG_STEPS: usize = 256;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const PERMUTATIONS: usize = 10_000;

/// A KAN edge within one component's core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KanEdge {
    pub component: Component,
    #[serde(flatten)]
    pub edge: EdgeId,
}

impl KanEdge {
    pub fn new(component: Component, layer: usize, input: usize, output: usize) -> Self {
        Self {
            component,
            edge: EdgeId::new(layer, input, output),
        }
    }

    /// Tie-break order: layer, output, input, then component.
    pub fn order_key(&self) -> (usize, usize, usize, usize) {
        (
            self.edge.layer,
            self.edge.output,
            self.edge.input,
            self.component.index(),
        )
    }
}

/// Every KAN edge of the model in index order, optionally only first-layer ones.
pub fn kan_edges(model: &GatedModel, first_layer_only: bool) -> Vec<KanEdge> {
    let mut out = Vec::new();
    for c in Component::BOTH {
        for (l, layer) in model.kan_layers(c).iter().enumerate() {
            if first_layer_only && l > 0 {
                break;
            }
            for j in 0..layer.out_dim {
                for i in 0..layer.in_dim {
                    out.push(KanEdge::new(c, l, i, j));
                }
            }
        }
    }
    out.sort_by_key(KanEdge::order_key);
    out
}

fn layer_of<'a>(model: &'a GatedModel, e: &KanEdge) -> Result<&'a KanLayer> {
    let layers = model.kan_layers(e.component);
    let layer = layers.get(e.edge.layer).ok_or_else(|| {
        Error::Unsupported(format!(
            "{} core has no KAN layer {} ({} layers)",
            e.component,
            e.edge.layer,
            layers.len()
        ))
    })?;
    layer.check_edge(e.edge.input, e.edge.output)?;
    Ok(layer)
}

fn first_layer_of<'a>(model: &'a GatedModel, e: &KanEdge) -> Result<&'a KanLayer> {
    if e.edge.layer != 0 {
        return Err(Error::Unsupported(format!(
            "attribution is defined for first-layer edges only, got layer {}",
            e.edge.layer
        )));
    }
    layer_of(model, e)
}

/// A fixed-seed subset of at most `n` windows, kept in time order.
pub fn attribution_sample(data: &Windows, n: usize, seed: u64) -> Result<Windows> {
    if data.is_empty() {
        return Err(Error::Empty("sample"));
    }
    if data.len() <= n {
        return Ok(data.clone());
    }
    let mut rng = numerics::substream(seed, "attribution-sample");
    let mut idx = index::sample(&mut rng, data.len(), n).into_vec();
    idx.sort_unstable();
    Ok(data.subset(&idx))
}

/// First-layer inputs `z` (`[rows, in]`) and sensitivities `s = d(sum y)/d out`
/// (`[rows, out]`) for each KAN component.
struct FirstLayerPass {
    z: [Option<Tensor>; 2],
    s: [Option<Tensor>; 2],
}

fn first_layer_pass(
    model: &GatedModel,
    x: &Tensor,
    opts: &ForwardOptions,
) -> Result<FirstLayerPass> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false)?;
    let xv = tape.input(x.clone())?;
    let r = model.record(&mut tape, &p, xv, opts)?;
    let total = tape.sum(r.y)?;
    let grads = tape.backward(total)?;
    let mut z = [None, None];
    let mut s = [None, None];
    for c in Component::BOTH {
        if let (Some(&zin), Some(&out)) = (
            r.layer_inputs[c.index()].first(),
            r.layer_outputs[c.index()].first(),
        ) {
            z[c.index()] = Some(tape.value(zin).clone());
            s[c.index()] = Some(grads.get_or_zeros(out));
        }
    }
    Ok(FirstLayerPass { z, s })
}

/// Per-input coefficient table `[in][out][1 + nb]` holding `(w, c_0..c_nb)`.
struct EdgeTable {
    in_dim: usize,
    out_dim: usize,
    width: usize,
    coef: Vec<f64>,
}

impl EdgeTable {
    fn new(layer: &KanLayer, model: &GatedModel) -> Self {
        let nb = layer.grid.num_basis();
        let w = model.params().get(layer.base_weight).data();
        let c = model.params().get(layer.spline_coeffs).data();
        let width = nb + 1;
        let mut coef = vec![0.0; layer.in_dim * layer.out_dim * width];
        for i in 0..layer.in_dim {
            for j in 0..layer.out_dim {
                let e = j * layer.in_dim + i;
                let dst = &mut coef[(i * layer.out_dim + j) * width..][..width];
                dst[0] = w[e];
                dst[1..].copy_from_slice(&c[e * nb..(e + 1) * nb]);
            }
        }
        Self {
            in_dim: layer.in_dim,
            out_dim: layer.out_dim,
            width,
            coef,
        }
    }

    /// `phi_{j,i}(z)` (or its derivative) for every output `j`, given the
    /// feature vector `(silu(z), B_0(z), ..)` or its derivative.
    fn eval(&self, i: usize, features: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.coef[(i * self.out_dim + j) * self.width..][..self.width];
            *o = row.iter().zip(features).map(|(a, b)| a * b).sum();
        }
    }
}

/// Visit every (row, input) of `z` with the activations of all edges from
/// that input, and optionally their derivatives.
fn visit_edges(
    layer: &KanLayer,
    table: &EdgeTable,
    z: &Tensor,
    with_deriv: bool,
    mut f: impl FnMut(usize, usize, &[f64], &[f64]),
) {
    let nb = layer.grid.num_basis();
    let (rows, cols) = z.dims2();
    debug_assert_eq!(cols, table.in_dim);
    let mut scratch = vec![0.0; layer.grid.knots().len()];
    let mut feat = vec![0.0; nb + 1];
    let mut dfeat = vec![0.0; nb + 1];
    let mut phi = vec![0.0; table.out_dim];
    let mut dphi = vec![0.0; if with_deriv { table.out_dim } else { 0 }];
    for n in 0..rows {
        for i in 0..cols {
            let zv = z.data()[n * cols + i];
            feat[0] = numerics::silu(zv);
            if with_deriv {
                dfeat[0] = numerics::silu_grad(zv);
                let (fb, db) = (&mut feat[1..], &mut dfeat[1..]);
                layer.grid.basis_into(zv, fb, Some(db), &mut scratch);
                table.eval(i, &dfeat, &mut dphi);
            } else {
                layer
                    .grid
                    .basis_into(zv, &mut feat[1..], None, &mut scratch);
            }
            table.eval(i, &feat, &mut phi);
            f(n, i, &phi, &dphi);
        }
    }
}

/// `C_e` for every row of `x` (`[rows, L]`).
pub fn edge_contribution(
    model: &GatedModel,
    edge: &KanEdge,
    x: &Tensor,
    opts: &ForwardOptions,
) -> Result<Vec<f64>> {
    let layer = first_layer_of(model, edge)?;
    let (i, j) = (edge.edge.input, edge.edge.output);
    let mut out = Vec::with_capacity(x.dims2().0);
    for chunk in row_chunks(x, model.config().channels)? {
        let pass = first_layer_pass(model, &chunk, opts)?;
        let c = edge.component.index();
        let (z, s) = (
            pass.z[c].as_ref().expect("KAN core"),
            pass.s[c].as_ref().expect("KAN core"),
        );
        for n in 0..z.dims2().0 {
            let a = layer.edge_eval(model.params(), i, j, z.get2(n, i))?;
            out.push(a * s.get2(n, j));
        }
    }
    Ok(out)
}

/// Per-edge importance `I_e = E|C_e|` for all first-layer edges, in the
/// order of [`kan_edges`] with `first_layer_only`.
pub fn importance_all(
    model: &GatedModel,
    sample: &Windows,
    opts: &ForwardOptions,
) -> Result<Vec<ScoredEdge>> {
    if sample.is_empty() {
        return Err(Error::Empty("sample"));
    }
    let mut sums: [Vec<f64>; 2] = Default::default();
    let tables: Vec<Option<(EdgeTable, &KanLayer)>> = Component::BOTH
        .iter()
        .map(|&c| {
            model
                .kan_layers(c)
                .first()
                .map(|l| (EdgeTable::new(l, model), l))
        })
        .collect();
    for c in Component::BOTH {
        if let Some(l) = model.kan_layers(c).first() {
            sums[c.index()] = vec![0.0; l.num_edges()];
        }
    }
    let mut rows = 0usize;
    for chunk in row_chunks(&sample.x, sample.channels)? {
        let pass = first_layer_pass(model, &chunk, opts)?;
        rows += chunk.dims2().0;
        for c in Component::BOTH {
            let Some((table, layer)) = &tables[c.index()] else {
                continue;
            };
            let (z, s) = (
                pass.z[c.index()].as_ref().expect("KAN core"),
                pass.s[c.index()].as_ref().expect("KAN core"),
            );
            let acc = &mut sums[c.index()];
            let in_dim = layer.in_dim;
            visit_edges(layer, table, z, false, |n, i, phi, _| {
                let srow = &s.data()[n * layer.out_dim..(n + 1) * layer.out_dim];
                for (j, (a, sv)) in phi.iter().zip(srow).enumerate() {
                    acc[j * in_dim + i] += (a * sv).abs();
                }
            });
        }
    }
    let mut out = Vec::new();
    for e in kan_edges(model, true) {
        let layer = &model.kan_layers(e.component)[0];
        let v = sums[e.component.index()][e.edge.output * layer.in_dim + e.edge.input];
        out.push(ScoredEdge {
            edge: e,
            score: v / rows as f64,
        });
    }
    Ok(out)
}

/// `I_e` of one first-layer edge.
pub fn importance(
    model: &GatedModel,
    edge: &KanEdge,
    sample: &Windows,
    opts: &ForwardOptions,
) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::Empty("sample"));
    }
    let c = edge_contribution(model, edge, &sample.x, opts)?;
    Ok(c.iter().map(|v| v.abs()).sum::<f64>() / c.len() as f64)
}

fn average_rows_by_channel(grad: &Tensor, channels: usize, acc: &mut [f64]) {
    let (rows, l) = grad.dims2();
    for r in 0..rows {
        let c = r % channels;
        for t in 0..l {
            acc[c * l + t] += grad.data()[r * l + t].abs();
        }
    }
}

/// `A_e(c, t) = E|dC_e / dx_{c,t}|`, shape `[C, L]`.
pub fn attribute_lags(
    model: &GatedModel,
    edge: &KanEdge,
    sample: &Windows,
    opts: &ForwardOptions,
) -> Result<Tensor> {
    if sample.is_empty() {
        return Err(Error::Empty("sample"));
    }
    let layer = first_layer_of(model, edge)?;
    let (i, j) = (edge.edge.input, edge.edge.output);
    let (ch, l) = (model.config().channels, model.config().input_len);
    let nb = layer.grid.num_basis();
    let w = model.params().get(layer.base_weight).data()[j * layer.in_dim + i];
    let coef = model.params().get(layer.spline_coeffs).data()[(j * layer.in_dim + i) * nb..][..nb]
        .to_vec();
    let mut acc = vec![0.0; ch * l];
    for chunk in row_chunks(&sample.x, ch)? {
        let pass = first_layer_pass(model, &chunk, opts)?;
        let s = pass.s[edge.component.index()].as_ref().expect("KAN core");
        let rows = chunk.dims2().0;
        let s_col: Vec<f64> = (0..rows).map(|n| s.get2(n, j)).collect();

        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false)?;
        let xv = tape.input(chunk.clone())?;
        let z = model.record_core_inputs(&mut tape, &p, xv, opts)?[edge.component.index()]
            .expect("KAN core");
        let zi = tape.slice(z, 1, i, 1)?;
        let base = tape.silu(zi)?;
        let base = tape.scale(base, w)?;
        let grid = &layer.grid;
        let mut scratch = vec![0.0; grid.knots().len()];
        let basis = tape.expand(zi, nb, |v, out, d| grid.basis_into(v, out, d, &mut scratch))?;
        let cv = tape.constant(Tensor::matrix(nb, 1, coef.clone())?)?;
        let spline = tape.matmul(basis, cv)?;
        let a = tape.add(base, spline)?;
        let sv = tape.constant(Tensor::matrix(rows, 1, s_col)?)?;
        let contrib = tape.mul(a, sv)?;
        let total = tape.sum(contrib)?;
        let grads = tape.backward(total)?;
        average_rows_by_channel(&grads.get_or_zeros(xv), ch, &mut acc);
    }
    let windows = sample.len() as f64;
    Ok(Tensor::matrix(
        ch,
        l,
        acc.into_iter().map(|v| v / windows).collect(),
    )?)
}

/// Branch-level attribution `E|d(sum_e C_e)/dx|` over every first-layer edge
/// of both components, shape `[C, L]`.
///
/// With the sensitivities held fixed, `d(sum_e C_e)/dx = sum_i v_i dz_i/dx`
/// where `v_i = sum_j s_j phi_{j,i}'(z_i)`, so one vector-Jacobian product per
/// chunk suffices.
pub fn aggregate_attribution(
    model: &GatedModel,
    sample: &Windows,
    opts: &ForwardOptions,
) -> Result<Tensor> {
    if sample.is_empty() {
        return Err(Error::Empty("sample"));
    }
    let (ch, l) = (model.config().channels, model.config().input_len);
    let mut acc = vec![0.0; ch * l];
    for chunk in row_chunks(&sample.x, ch)? {
        let pass = first_layer_pass(model, &chunk, opts)?;
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false)?;
        let xv = tape.input(chunk.clone())?;
        let inputs = model.record_core_inputs(&mut tape, &p, xv, opts)?;
        let mut total = None;
        for c in Component::BOTH {
            let (Some(layer), Some(zv)) = (model.kan_layers(c).first(), inputs[c.index()]) else {
                continue;
            };
            let table = EdgeTable::new(layer, model);
            let (z, s) = (
                pass.z[c.index()].as_ref().expect("KAN core"),
                pass.s[c.index()].as_ref().expect("KAN core"),
            );
            let mut v = vec![0.0; z.data().len()];
            visit_edges(layer, &table, z, true, |n, i, _, dphi| {
                let srow = &s.data()[n * layer.out_dim..(n + 1) * layer.out_dim];
                v[n * layer.in_dim + i] = dphi.iter().zip(srow).map(|(d, sv)| d * sv).sum();
            });
            let vv = tape.constant(Tensor::matrix(z.dims2().0, layer.in_dim, v)?)?;
            let prod = tape.mul(zv, vv)?;
            let part = tape.sum(prod)?;
            total = Some(match total {
                Some(t) => tape.add(t, part)?,
                None => part,
            });
        }
        let Some(total) = total else {
            continue;
        };
        let grads = tape.backward(total)?;
        let jac = grads.get_or_zeros(xv);
        for (n, row) in jac.data().chunks(l).enumerate() {
            let cc = n % ch;
            for (a, g) in acc[cc * l..(cc + 1) * l].iter_mut().zip(row) {
                *a += g.abs();
            }
        }
    }
    let windows = sample.len() as f64;
    Ok(Tensor::matrix(
        ch,
        l,
        acc.into_iter().map(|v| v / windows).collect(),
    )?)
}

/// An edge with a ranking score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredEdge {
    pub edge: KanEdge,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RankMethod {
    /// Activation range, data-free.
    #[serde(rename = "R_e")]
    Range,
    /// Expected absolute contribution.
    #[serde(rename = "I_e")]
    Importance,
}

impl RankMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RankMethod::Range => "R_e",
            RankMethod::Importance => "I_e",
        }
    }
}

/// Descending by score; equal scores keep [`KanEdge::order_key`] order.
pub fn sort_ranking(edges: &mut [ScoredEdge]) {
    edges.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.edge.order_key().cmp(&b.edge.order_key()))
    });
}

/// Activation ranges `R_e`, in index order.
pub fn activation_ranges(model: &GatedModel, first_layer_only: bool) -> Vec<ScoredEdge> {
    let mut by_layer: BTreeMap<(Component, usize), Vec<f64>> = BTreeMap::new();
    for c in Component::BOTH {
        for (li, layer) in model.kan_layers(c).iter().enumerate() {
            if first_layer_only && li > 0 {
                break;
            }
            by_layer.insert(
                (c, li),
                layer.all_activation_ranges(model.params(), RANGE_RESOLUTION),
            );
        }
    }
    kan_edges(model, first_layer_only)
        .into_iter()
        .map(|e| {
            let in_dim = model.kan_layers(e.component)[e.edge.layer].in_dim;
            ScoredEdge {
                edge: e,
                score: by_layer[&(e.component, e.edge.layer)]
                    [e.edge.output * in_dim + e.edge.input],
            }
        })
        .collect()
}

/// First-layer edges ranked by `method`; `I_e` needs a sample.
pub fn rank_edges(
    model: &GatedModel,
    method: RankMethod,
    sample: Option<&Windows>,
) -> Result<Vec<ScoredEdge>> {
    let mut scored = match method {
        RankMethod::Range => activation_ranges(model, true),
        RankMethod::Importance => {
            let sample =
                sample.ok_or_else(|| Error::Config("I_e ranking needs a data sample".into()))?;
            importance_all(model, sample, &ForwardOptions::default())?
        }
    };
    sort_ranking(&mut scored);
    Ok(scored)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionType {
    Zero,
    Mean,
    SplineRemoval,
}

impl InterventionType {
    pub const ALL: [InterventionType; 3] = [
        InterventionType::Zero,
        InterventionType::Mean,
        InterventionType::SplineRemoval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InterventionType::Zero => "zero",
            InterventionType::Mean => "mean",
            InterventionType::SplineRemoval => "spline_removal",
        }
    }
}

/// Population means `E[a_e]` of every KAN edge, per layer `[out * in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMeans {
    means: BTreeMap<(Component, usize), Vec<f64>>,
}

impl EdgeMeans {
    /// Fit on `data` (the validation split).
    pub fn fit(model: &GatedModel, data: &Windows) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("split"));
        }
        let mut means: BTreeMap<(Component, usize), Vec<f64>> = BTreeMap::new();
        let tables: BTreeMap<(Component, usize), EdgeTable> = Component::BOTH
            .iter()
            .flat_map(|&c| {
                model
                    .kan_layers(c)
                    .iter()
                    .enumerate()
                    .map(move |(li, l)| ((c, li), l))
            })
            .map(|(k, l)| (k, EdgeTable::new(l, model)))
            .collect();
        let mut rows = 0usize;
        for chunk in row_chunks(&data.x, data.channels)? {
            rows += chunk.dims2().0;
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape, false)?;
            let xv = tape.constant(chunk)?;
            let r = model.record(&mut tape, &p, xv, &ForwardOptions::default())?;
            for c in Component::BOTH {
                for (li, layer) in model.kan_layers(c).iter().enumerate() {
                    let z = tape.value(r.layer_inputs[c.index()][li]);
                    let acc = means
                        .entry((c, li))
                        .or_insert_with(|| vec![0.0; layer.num_edges()]);
                    visit_edges(layer, &tables[&(c, li)], z, false, |_, i, phi, _| {
                        for (j, a) in phi.iter().enumerate() {
                            acc[j * layer.in_dim + i] += a;
                        }
                    });
                }
            }
        }
        for v in means.values_mut() {
            v.iter_mut().for_each(|m| *m /= rows as f64);
        }
        Ok(Self { means })
    }

    pub fn get(&self, model: &GatedModel, e: &KanEdge) -> Option<f64> {
        let in_dim = model.kan_layers(e.component).get(e.edge.layer)?.in_dim;
        self.means
            .get(&(e.component, e.edge.layer))
            .and_then(|v| v.get(e.edge.output * in_dim + e.edge.input))
            .copied()
    }
}

/// An edited copy of a model plus the layer offsets it needs.
#[derive(Clone, Debug)]
pub struct Intervened {
    pub model: GatedModel,
    pub offsets: LayerOffsets,
}

impl Intervened {
    pub fn options(&self) -> ForwardOptions<'_> {
        ForwardOptions {
            layer_offsets: if self.offsets.is_empty() {
                None
            } else {
                Some(&self.offsets)
            },
            ..ForwardOptions::default()
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.model.predict_with(x, &self.options())
    }
}

/// Apply `kind` to `edges`, leaving `model` untouched.
pub fn intervene(
    model: &GatedModel,
    edges: &[KanEdge],
    kind: InterventionType,
    means: Option<&EdgeMeans>,
) -> Result<Intervened> {
    if kind == InterventionType::Mean && means.is_none() {
        return Err(Error::Undefined(
            "mean intervention needs population means fitted on validation data".into(),
        ));
    }
    let mut edited = model.clone();
    let mut offsets = LayerOffsets::new();
    for e in edges {
        let layer = layer_of(model, e)?;
        let nb = layer.grid.num_basis();
        let idx = e.edge.output * layer.in_dim + e.edge.input;
        let params = edited.params_mut();
        params.get_mut(layer.spline_coeffs).data_mut()[idx * nb..(idx + 1) * nb].fill(0.0);
        if kind != InterventionType::SplineRemoval {
            params.get_mut(layer.base_weight).data_mut()[idx] = 0.0;
        }
        if kind == InterventionType::Mean {
            let m = means
                .and_then(|m| m.get(model, e))
                .ok_or_else(|| Error::Undefined(format!("no fitted mean for edge {e:?}")))?;
            offsets
                .entry((e.component, e.edge.layer))
                .or_insert_with(|| vec![0.0; layer.out_dim])[e.edge.output] += m;
        }
    }
    Ok(Intervened {
        model: edited,
        offsets,
    })
}

/// Mean squared error of each window (over channels and horizons).
pub fn window_losses(
    model: &GatedModel,
    data: &Windows,
    opts: &ForwardOptions,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("split"));
    }
    let c = data.channels;
    let h = data.horizon();
    let mut out = Vec::with_capacity(data.len());
    for (x, y) in row_chunks(&data.x, c)?.iter().zip(row_chunks(&data.y, c)?) {
        let pred = model.predict_with(x, opts)?;
        for (pw, yw) in pred.data().chunks(c * h).zip(y.data().chunks(c * h)) {
            let se: f64 = pw.iter().zip(yw).map(|(a, b)| (a - b) * (a - b)).sum();
            out.push(se / (c * h) as f64);
        }
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (zero for fewer than two values).
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// `MSE(intervened) - MSE(model)` on `test`.
pub fn delta_edge(
    model: &GatedModel,
    edges: &[KanEdge],
    kind: InterventionType,
    test: &Windows,
    means: Option<&EdgeMeans>,
) -> Result<f64> {
    let base = mean(&window_losses(model, test, &ForwardOptions::default())?);
    let iv = intervene(model, edges, kind, means)?;
    Ok(mean(&window_losses(&iv.model, test, &iv.options())?) - base)
}

/// Effect of closing both gates.
pub fn delta_all_kan(model: &GatedModel, test: &Windows) -> Result<f64> {
    if !model.config().core.has_nonlinear() {
        return Err(Error::Unsupported(format!(
            "{} has no nonlinear core",
            model.config().core
        )));
    }
    let base = mean(&window_losses(model, test, &ForwardOptions::default())?);
    Ok(mean(&window_losses(
        model,
        test,
        &ForwardOptions::gates_fixed(0.0),
    )?) - base)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionConfig {
    pub ks: Vec<usize>,
    pub draws: usize,
    /// Draw `g` uses seed `seed + g`.
    pub seed: u64,
    pub bootstrap: usize,
}

impl Default for DeletionConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            draws: DEFAULT_DRAWS,
            seed: 0,
            bootstrap: BOOTSTRAP_RESAMPLES,
        }
    }
}

/// Deletion effects (zero intervention) per `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionCurve {
    pub ranking_method: String,
    pub ks: Vec<usize>,
    pub base_mse: f64,
    pub delta_top: Vec<f64>,
    pub delta_bottom: Vec<f64>,
    pub delta_random_mean: Vec<f64>,
    pub delta_random_std: Vec<f64>,
    /// `delta_random[g][k]` for draw `g`.
    pub delta_random: Vec<Vec<f64>>,
    /// 95% bootstrap interval of `delta_top` over test windows.
    pub delta_top_ci: Vec<[f64; 2]>,
    /// One-sided p-value of `delta_top` against the random draws.
    pub p_value: Vec<f64>,
}

impl DeletionCurve {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "k,delta_top,delta_random_mean,delta_random_std,delta_bottom"
        )?;
        for (n, k) in self.ks.iter().enumerate() {
            writeln!(
                f,
                "{k},{},{},{},{}",
                self.delta_top[n],
                self.delta_random_mean[n],
                self.delta_random_std[n],
                self.delta_bottom[n]
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Deletion curve for a ranking computed elsewhere (normally on validation).
pub fn deletion_curve(
    model: &GatedModel,
    ranking: &[ScoredEdge],
    test: &Windows,
    cfg: &DeletionConfig,
) -> Result<DeletionCurve> {
    let n = ranking.len();
    if let Some(&k) = cfg.ks.iter().find(|&&k| k > n) {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {n} ranked edges"
        )));
    }
    let base = window_losses(model, test, &ForwardOptions::default())?;
    let base_mse = mean(&base);
    let deltas = |edges: &[KanEdge]| -> Result<(f64, Vec<f64>)> {
        if edges.is_empty() {
            return Ok((0.0, vec![0.0; base.len()]));
        }
        let iv = intervene(model, edges, InterventionType::Zero, None)?;
        let losses = window_losses(&iv.model, test, &iv.options())?;
        let diff: Vec<f64> = losses.iter().zip(&base).map(|(a, b)| a - b).collect();
        Ok((mean(&losses) - base_mse, diff))
    };
    let ordered: Vec<KanEdge> = ranking.iter().map(|s| s.edge).collect();

    let mut delta_random = Vec::with_capacity(cfg.draws);
    let kmax = cfg.ks.iter().copied().max().unwrap_or(0);
    for g in 0..cfg.draws {
        let mut rng = numerics::substream(cfg.seed.wrapping_add(g as u64), "deletion-draws");
        let picks = index::sample(&mut rng, n, kmax).into_vec();
        let mut row = Vec::with_capacity(cfg.ks.len());
        for &k in &cfg.ks {
            let edges: Vec<KanEdge> = picks[..k].iter().map(|&p| ordered[p]).collect();
            row.push(deltas(&edges)?.0);
        }
        delta_random.push(row);
    }

    let mut curve = DeletionCurve {
        ranking_method: String::new(),
        ks: cfg.ks.clone(),
        base_mse,
        delta_top: Vec::new(),
        delta_bottom: Vec::new(),
        delta_random_mean: Vec::new(),
        delta_random_std: Vec::new(),
        delta_random: delta_random.clone(),
        delta_top_ci: Vec::new(),
        p_value: Vec::new(),
    };
    for (ki, &k) in cfg.ks.iter().enumerate() {
        let (top, diff) = deltas(&ordered[..k])?;
        let (bottom, _) = deltas(&ordered[n - k..])?;
        let draws: Vec<f64> = delta_random.iter().map(|r| r[ki]).collect();
        curve.delta_top.push(top);
        curve.delta_bottom.push(bottom);
        curve
            .delta_random_mean
            .push(if draws.is_empty() { 0.0 } else { mean(&draws) });
        curve.delta_random_std.push(std_dev(&draws));
        let mut rng = numerics::substream(cfg.seed, &format!("bootstrap/{k}"));
        curve
            .delta_top_ci
            .push(bootstrap_mean_ci(&diff, cfg.bootstrap, 0.95, &mut rng));
        curve.p_value.push(one_sided_p(top, &draws));
    }
    Ok(curve)
}

/// Rank on `rank_data` with `method`, then run [`deletion_curve`] on `test`.
pub fn ranked_deletion_curve(
    model: &GatedModel,
    method: RankMethod,
    rank_data: &Windows,
    test: &Windows,
    cfg: &DeletionConfig,
) -> Result<DeletionCurve> {
    let ranking = rank_edges(model, method, Some(rank_data))?;
    let mut curve = deletion_curve(model, &ranking, test, cfg)?;
    curve.ranking_method = method.as_str().to_string();
    Ok(curve)
}

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_mean_ci(
    values: &[f64],
    resamples: usize,
    level: f64,
    rng: &mut impl Rng,
) -> [f64; 2] {
    if values.is_empty() || resamples == 0 {
        return [f64::NAN, f64::NAN];
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    [at(tail), at(1.0 - tail)]
}

/// `(1 + #{draws >= observed}) / (1 + #draws)`.
pub fn one_sided_p(observed: f64, draws: &[f64]) -> f64 {
    let hits = draws.iter().filter(|&&d| d >= observed).count();
    (hits + 1) as f64 / (draws.len() + 1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub k: usize,
    pub delta_top: f64,
    /// `None` when the all-KAN effect is not positive.
    pub eta: Option<f64>,
    /// `delta_top / base_mse * 100`.
    pub rel_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaReport {
    pub base_mse: f64,
    pub delta_all_kan: f64,
    pub rel_deg_all_kan: f64,
    pub rows: Vec<EtaRow>,
    pub diagnostic: Option<String>,
}

/// Fraction of the all-KAN effect captured by the top-`k` edges.
pub fn eta_fraction(
    model: &GatedModel,
    ranking: &[ScoredEdge],
    test: &Windows,
    ks: &[usize],
) -> Result<EtaReport> {
    if let Some(&k) = ks.iter().find(|&&k| k > ranking.len()) {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {} ranked edges",
            ranking.len()
        )));
    }
    let base_mse = mean(&window_losses(model, test, &ForwardOptions::default())?);
    let all = delta_all_kan(model, test)?;
    let diagnostic = (all <= 0.0).then(|| {
        format!("closing both gates does not increase test MSE (delta {all:.3e}); eta is undefined")
    });
    let mut rows = Vec::new();
    for &k in ks {
        let edges: Vec<KanEdge> = ranking[..k].iter().map(|s| s.edge).collect();
        let d = if k == 0 {
            0.0
        } else {
            delta_edge(model, &edges, InterventionType::Zero, test, None)?
        };
        rows.push(EtaRow {
            k,
            delta_top: d,
            eta: (all > 0.0).then(|| d / all),
            rel_deg: d / base_mse * 100.0,
        });
    }
    Ok(EtaReport {
        base_mse,
        delta_all_kan: all,
        rel_deg_all_kan: all / base_mse * 100.0,
        rows,
        diagnostic,
    })
}

fn validate_baseline(x: &Tensor, baseline: Option<&Tensor>) -> Result<Tensor> {
    match baseline {
        None => Ok(Tensor::zeros(x.shape())),
        Some(b) if b.shape() == x.shape() => Ok(b.clone()),
        Some(b) => Err(Error::Shape {
            expected: x.shape().to_vec(),
            got: b.shape().to_vec(),
        }),
    }
}

/// Gradient of the summed forecast with respect to every input row.
pub fn input_gradient(model: &GatedModel, x: &Tensor, opts: &ForwardOptions) -> Result<Tensor> {
    let mut data = Vec::with_capacity(x.numel());
    for chunk in row_chunks(x, model.config().channels)? {
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false)?;
        let xv = tape.input(chunk)?;
        let r = model.record(&mut tape, &p, xv, opts)?;
        let total = tape.sum(r.y)?;
        let grads = tape.backward(total)?;
        data.extend_from_slice(grads.get_or_zeros(xv).data());
    }
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

/// Integrated gradients of the summed forecast along the straight path from
/// `baseline` (zeros by default) to `x`, midpoint rule with `steps` nodes.
pub fn integrated_gradients(
    model: &GatedModel,
    x: &Tensor,
    baseline: Option<&Tensor>,
    steps: usize,
    opts: &ForwardOptions,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Config(
            "integrated gradients need at least one step".into(),
        ));
    }
    let b = validate_baseline(x, baseline)?;
    let mut acc = vec![0.0; x.numel()];
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        let point: Vec<f64> = x
            .data()
            .iter()
            .zip(b.data())
            .map(|(xv, bv)| bv + alpha * (xv - bv))
            .collect();
        let g = input_gradient(model, &Tensor::new(x.shape().to_vec(), point)?, opts)?;
        acc.iter_mut().zip(g.data()).for_each(|(a, gv)| *a += gv);
    }
    let out = acc
        .iter()
        .zip(x.data().iter().zip(b.data()))
        .map(|(a, (xv, bv))| (xv - bv) * a / steps as f64)
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// Gradient at `x` times `x - baseline`.
pub fn grad_x_input(
    model: &GatedModel,
    x: &Tensor,
    baseline: Option<&Tensor>,
    opts: &ForwardOptions,
) -> Result<Tensor> {
    let b = validate_baseline(x, baseline)?;
    let g = input_gradient(model, x, opts)?;
    let out = g
        .data()
        .iter()
        .zip(x.data().iter().zip(b.data()))
        .map(|(gv, (xv, bv))| gv * (xv - bv))
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// Per-window sum of the forecast.
pub fn summed_forecast(model: &GatedModel, x: &Tensor, opts: &ForwardOptions) -> Result<Vec<f64>> {
    let c = model.config().channels;
    let h = model.config().horizon;
    let mut out = Vec::new();
    for chunk in row_chunks(x, c)? {
        let y = model.predict_with(&chunk, opts)?;
        out.extend(y.data().chunks(c * h).map(|w| w.iter().sum::<f64>()));
    }
    Ok(out)
}

/// Mean absolute attribution per `(channel, position)`, shape `[C, L]`.
pub fn mean_abs_by_channel(attr: &Tensor, channels: usize) -> Result<Tensor> {
    let (rows, l) = attr.dims2();
    if rows == 0 || rows % channels != 0 {
        return Err(Error::Empty("attribution"));
    }
    let mut acc = vec![0.0; channels * l];
    average_rows_by_channel(attr, channels, &mut acc);
    let windows = (rows / channels) as f64;
    Ok(Tensor::matrix(
        channels,
        l,
        acc.into_iter().map(|v| v / windows).collect(),
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingRow {
    pub k: usize,
    /// Relative MSE increase (%) when masking the top-`k` positions.
    pub method_pct: f64,
    pub random_mean_pct: f64,
    pub random_std_pct: f64,
}

fn top_positions(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn mask_for(positions: &[usize], rows: usize, channels: usize, l: usize) -> Tensor {
    let mut m = vec![1.0; rows * l];
    for &p in positions {
        let (c, t) = (p / l, p % l);
        for r in (c..rows).step_by(channels) {
            m[r * l + t] = 0.0;
        }
    }
    Tensor::matrix(rows, l, m).expect("mask shape")
}

/// Zero the top-`k` attributed positions (after instance normalization) in
/// every test window and compare with random position sets.
pub fn input_masking_test(
    model: &GatedModel,
    scores: &Tensor,
    ks: &[usize],
    test: &Windows,
    draws: usize,
    seed: u64,
) -> Result<Vec<MaskingRow>> {
    let (c, l) = (model.config().channels, model.config().input_len);
    if scores.shape() != [c, l] {
        return Err(Error::Shape {
            expected: vec![c, l],
            got: scores.shape().to_vec(),
        });
    }
    if let Some(&k) = ks.iter().find(|&&k| k > c * l) {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {} input positions",
            c * l
        )));
    }
    let rows = test.x.dims2().0;
    let base = mean(&window_losses(model, test, &ForwardOptions::default())?);
    let masked = |pos: &[usize]| -> Result<f64> {
        if pos.is_empty() {
            return Ok(0.0);
        }
        let m = mask_for(pos, rows, c, l);
        let opts = ForwardOptions {
            input_mask: Some(&m),
            ..ForwardOptions::default()
        };
        Ok((mean(&masked_losses(model, test, &opts)?) - base) / base * 100.0)
    };
    let mut out = Vec::new();
    for &k in ks {
        let method_pct = masked(&top_positions(scores.data(), k))?;
        let mut rand = Vec::with_capacity(draws);
        for g in 0..draws {
            let mut rng = numerics::substream(seed.wrapping_add(g as u64), "mask-draws");
            rand.push(masked(&index::sample(&mut rng, c * l, k).into_vec())?);
        }
        out.push(MaskingRow {
            k,
            method_pct,
            random_mean_pct: if rand.is_empty() { 0.0 } else { mean(&rand) },
            random_std_pct: std_dev(&rand),
        });
    }
    Ok(out)
}

/// Window losses with a full-split input mask (masks are not chunked).
fn masked_losses(model: &GatedModel, data: &Windows, opts: &ForwardOptions) -> Result<Vec<f64>> {
    let pred = model.predict_with(&data.x, opts)?;
    let w = data.channels * data.horizon();
    Ok(pred
        .data()
        .chunks(w)
        .zip(data.y.data().chunks(w))
        .map(|(p, y)| p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / w as f64)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Randomization {
    AllKanWeights,
    SplineOnly,
}

impl Randomization {
    pub fn as_str(self) -> &'static str {
        match self {
            Randomization::AllKanWeights => "all_kan_weights",
            Randomization::SplineOnly => "spline_only",
        }
    }
}

/// A copy of `model` with its KAN layers re-initialized.
pub fn randomize_kan(model: &GatedModel, which: Randomization, seed: u64) -> GatedModel {
    let mut out = model.clone();
    let mut rng = numerics::substream(seed, &format!("sanity/{}", which.as_str()));
    for c in Component::BOTH {
        for layer in model.kan_layers(c) {
            layer.reinit(
                out.params_mut(),
                which == Randomization::SplineOnly,
                &mut rng,
            );
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityResult {
    pub condition: Randomization,
    pub curve: DeletionCurve,
}

/// Deletion curves after re-initializing all KAN weights and after
/// re-initializing spline coefficients only.
pub fn sanity_randomization(
    model: &GatedModel,
    method: RankMethod,
    rank_data: &Windows,
    test: &Windows,
    cfg: &DeletionConfig,
) -> Result<Vec<SanityResult>> {
    [Randomization::AllKanWeights, Randomization::SplineOnly]
        .into_iter()
        .map(|which| {
            let randomized = randomize_kan(model, which, cfg.seed);
            let curve = ranked_deletion_curve(&randomized, method, rank_data, test, cfg)?;
            Ok(SanityResult {
                condition: which,
                curve,
            })
        })
        .collect()
}

/// `(MSE_linear - MSE_mlp) / MSE_linear`.
pub fn s_nonlin(mse_linear: f64, mse_mlp: f64) -> Result<f64> {
    if mse_linear == 0.0 {
        return Err(Error::Undefined("linear MSE is zero".into()));
    }
    Ok((mse_linear - mse_mlp) / mse_linear)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config(format!(
            "need two equal series of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    /// Two-sided permutation p-value.
    pub p_value: f64,
    pub n: usize,
    pub permutations: usize,
}

/// Spearman correlation with a permutation p-value.
pub fn spearman(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> Result<Correlation> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Config(format!(
            "need at least 3 pairs, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let rx = average_ranks(x);
    let mut ry = average_ranks(y);
    let rho = pearson(&rx, &ry)?;
    let mut rng = numerics::substream(seed, "spearman");
    let mut hits = 0usize;
    for _ in 0..permutations {
        ry.shuffle(&mut rng);
        if pearson(&rx, &ry)?.abs() >= rho.abs() - 1e-12 {
            hits += 1;
        }
    }
    Ok(Correlation {
        rho,
        p_value: (hits + 1) as f64 / (permutations + 1) as f64,
        n: x.len(),
        permutations,
    })
}

/// Input positions (0-based, of `input_len`) of the given lags, widened by
/// `dilation` on each side.
pub fn lag_positions(input_len: usize, lags: &[usize], dilation: usize) -> Vec<usize> {
    let mut out: Vec<usize> = lags
        .iter()
        .filter(|&&lag| lag >= 1 && lag <= input_len)
        .flat_map(|&lag| {
            let p = input_len - lag;
            p.saturating_sub(dilation)..=(p + dilation).min(input_len - 1)
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagMetrics {
    /// `(k, recall@k)`.
    pub recall: Vec<(usize, f64)>,
    pub auprc: f64,
}

/// Recall at each `k` and average precision of a per-position score vector.
pub fn lag_recovery_metrics(scores: &[f64], truth: &[usize], ks: &[usize]) -> Result<LagMetrics> {
    if truth.is_empty() {
        return Err(Error::Empty("truth set"));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= scores.len()) {
        return Err(Error::Config(format!(
            "true position {t} outside {} scores",
            scores.len()
        )));
    }
    let order = top_positions(scores, scores.len());
    let is_true = |p: usize| truth.contains(&p);
    let recall = ks
        .iter()
        .map(|&k| {
            let hit = order.iter().take(k).filter(|&&p| is_true(p)).count();
            (k, hit as f64 / truth.len() as f64)
        })
        .collect();
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &p) in order.iter().enumerate() {
        if is_true(p) {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(LagMetrics {
        recall,
        auprc: ap / truth.len() as f64,
    })
}

/// Metrics of uniformly random scores, averaged over `draws`.
pub fn random_lag_metrics(
    len: usize,
    truth: &[usize],
    ks: &[usize],
    draws: usize,
    seed: u64,
) -> Result<LagMetrics> {
    if draws == 0 {
        return Err(Error::Config(
            "random baseline needs at least one draw".into(),
        ));
    }
    let mut rng = numerics::substream(seed, "random-attribution");
    let mut recall = vec![0.0; ks.len()];
    let mut auprc = 0.0;
    for _ in 0..draws {
        let scores: Vec<f64> = (0..len).map(|_| rng.gen::<f64>()).collect();
        let m = lag_recovery_metrics(&scores, truth, ks)?;
        auprc += m.auprc;
        recall
            .iter_mut()
            .zip(&m.recall)
            .for_each(|(a, (_, r))| *a += r);
    }
    Ok(LagMetrics {
        recall: ks
            .iter()
            .zip(recall)
            .map(|(&k, r)| (k, r / draws as f64))
            .collect(),
        auprc: auprc / draws as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_g: f64,
    pub seed: u64,
    pub u_kan: f64,
    pub r_kan: f64,
    pub mse: f64,
    pub delta_all_kan: f64,
}

/// Train one gated model per `(lambda_g, seed)` on `regime` and report the
/// gate usage, KAN share, test MSE and all-KAN deletion effect.
pub fn gate_sweep(
    regime: &RegimeSpec,
    lambdas: &[f64],
    seeds: &[u64],
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    regime.validate()?;
    let mut rows = Vec::new();
    for &lambda_g in lambdas {
        for &seed in seeds {
            let spec = RegimeSpec {
                seed,
                ..regime.clone()
            };
            let tc = TrainConfig {
                lambda_g,
                seed,
                ..train.clone()
            };
            let run = trainer::train_regime(&spec, model, &tc)?;
            let test = &run.windows.test;
            rows.push(SweepRow {
                lambda_g,
                seed,
                u_kan: run.model.u_kan(&test.x)?,
                r_kan: run.model.r_kan(&test.x)?,
                mse: trainer::evaluate_mse(&run.model, test)?,
                delta_all_kan: delta_all_kan(&run.model, test)?,
            });
        }
    }
    Ok(rows)
}

/// Everything known about one edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitTuple {
    pub edge: KanEdge,
    /// `(z, phi(z))` over the knot span.
    pub phi_snapshot: Vec<[f64; 2]>,
    /// `[C][L]`.
    pub attribution: Vec<Vec<f64>>,
    pub importance: f64,
    pub range: f64,
    /// Test-set effect per intervention type.
    pub deltas: BTreeMap<InterventionType, f64>,
}

/// Build the full tuple of a first-layer edge. `sample` drives attribution,
/// importance and the population mean; `test` drives the deltas.
pub fn circuit_tuple(
    model: &GatedModel,
    edge: &KanEdge,
    sample: &Windows,
    test: &Windows,
) -> Result<CircuitTuple> {
    let layer = first_layer_of(model, edge)?;
    let (i, j) = (edge.edge.input, edge.edge.output);
    let phi_snapshot = layer
        .grid
        .scan_points(RANGE_RESOLUTION)
        .into_iter()
        .map(|z| Ok([z, layer.edge_eval(model.params(), i, j, z)?]))
        .collect::<std::result::Result<Vec<_>, SplineError>>()?;
    let opts = ForwardOptions::default();
    let a = attribute_lags(model, edge, sample, &opts)?;
    let l = model.config().input_len;
    let means = EdgeMeans::fit(model, sample)?;
    let mut deltas = BTreeMap::new();
    for kind in InterventionType::ALL {
        deltas.insert(kind, delta_edge(model, &[*edge], kind, test, Some(&means))?);
    }
    Ok(CircuitTuple {
        edge: *edge,
        phi_snapshot,
        attribution: a.data().chunks(l).map(<[f64]>::to_vec).collect(),
        importance: importance(model, edge, sample, &opts)?,
        range: layer.activation_range(model.params(), i, j)?,
        deltas,
    })
}
