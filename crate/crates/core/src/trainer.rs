//! Adam training with a cosine schedule, gradient clipping and early
//! stopping on validation MSE.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, RegimeSpec, SplitWindows, Windows};
use crate::error::{Error, Result};
use crate::forecaster::{row_chunks, Container, ForwardOptions, GatedModel, ModelConfig};
use crate::numerics::{self, NumericsError, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lambda_g: f64,
    pub seed: u64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 50,
            patience: 10,
            batch_size: 256,
            lambda_g: 0.0,
            seed: 42,
            warmup_frac: 0.05,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_g >= 0.0) {
            return fail("lambda_g must be non-negative");
        }
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.patience > self.epochs {
            return fail("patience must not exceed epochs");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return fail("warmup_frac must be in [0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return fail("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub gate_penalty: f64,
}

/// `mse + lambda_g * (E sum_c g_trend + E sum_c g_resid)` from plain values.
///
/// `gates` hold one value per row; rows are grouped into windows of
/// `channels` rows.
pub fn loss_value(
    y_hat: &Tensor,
    y: &Tensor,
    gates: [Option<&[f64]>; 2],
    channels: usize,
    lambda_g: f64,
) -> Result<LossParts> {
    if lambda_g < 0.0 {
        return Err(Error::Config("lambda_g must be non-negative".into()));
    }
    if y_hat.shape() != y.shape() {
        return Err(Error::Shape {
            expected: y.shape().to_vec(),
            got: y_hat.shape().to_vec(),
        });
    }
    let n = y.numel() as f64;
    let mse = y_hat
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let windows = (y.dims2().0 / channels.max(1)).max(1) as f64;
    let gate_penalty = gates
        .iter()
        .flatten()
        .map(|g| g.iter().sum::<f64>() / windows)
        .sum();
    Ok(LossParts {
        total: mse + lambda_g * gate_penalty,
        mse,
        gate_penalty,
    })
}

/// Record the training loss; returns `(total, mse, penalty)` handles.
pub fn record_loss(
    tape: &mut Tape,
    y_hat: Var,
    y: Var,
    gates: [Option<Var>; 2],
    channels: usize,
    lambda_g: f64,
) -> Result<(Var, Var, Option<Var>)> {
    if lambda_g < 0.0 {
        return Err(Error::Config("lambda_g must be non-negative".into()));
    }
    let d = tape.sub(y_hat, y)?;
    let sq = tape.square(d)?;
    let mse = tape.mean(sq)?;
    let windows = (tape.value(y).dims2().0 / channels.max(1)).max(1) as f64;
    let mut penalty: Option<Var> = None;
    for g in gates.into_iter().flatten() {
        let s = tape.sum(g)?;
        let s = tape.scale(s, 1.0 / windows)?;
        penalty = Some(match penalty {
            None => s,
            Some(p) => tape.add(p, s)?,
        });
    }
    let total = match penalty {
        Some(p) if lambda_g > 0.0 => {
            let w = tape.scale(p, lambda_g)?;
            tape.add(mse, w)?
        }
        _ => mse,
    };
    Ok((total, mse, penalty))
}

/// Linear warmup to `lr0` over `warmup` steps, then cosine decay to 0 at
/// `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, warmup: usize) -> f64 {
    if step < warmup {
        return lr0 * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr0;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam moments for every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer state for {} tensors, got {} gradients for {} parameters",
                self.m.len(),
                grads.len(),
                params.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        for (k, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::Diverged {
                    epoch: 0,
                    step: self.t as usize,
                    detail: format!("non-finite gradient for `{}`", params.name(ids[k])),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, &g) in grads[k].data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Mean squared error over every window, channel and horizon step.
pub fn evaluate_mse(model: &GatedModel, data: &Windows) -> Result<f64> {
    evaluate_mse_with(model, data, &ForwardOptions::default())
}

pub fn evaluate_mse_with(model: &GatedModel, data: &Windows, opts: &ForwardOptions) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("split"));
    }
    let c = data.channels;
    let mut total = 0.0;
    for (x, y) in row_chunks(&data.x, c)?.iter().zip(row_chunks(&data.y, c)?) {
        let pred = model.predict_with(x, opts)?;
        total += pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / data.y.numel() as f64)
}

/// Training history.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub steps: Vec<LossParts>,
    pub val_mse: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: GatedModel,
    pub adam: Adam,
    pub best: Option<ParamStore>,
    pub epoch: usize,
    pub step: usize,
    pub bad_epochs: usize,
    pub report: LossReport,
}

impl TrainState {
    pub fn new(model: GatedModel) -> Self {
        let adam = Adam::new(model.params());
        Self {
            model,
            adam,
            best: None,
            epoch: 0,
            step: 0,
            bad_epochs: 0,
            report: LossReport::default(),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.model.to_container();
        let names: Vec<String> = self
            .model
            .params()
            .iter()
            .map(|(_, n, _)| n.to_string())
            .collect();
        for (k, n) in names.iter().enumerate() {
            c.tensors
                .push((format!("adam.m.{n}"), self.adam.m[k].clone()));
            c.tensors
                .push((format!("adam.v.{n}"), self.adam.v[k].clone()));
        }
        if let Some(best) = &self.best {
            for (_, n, t) in best.iter() {
                c.tensors.push((format!("adam.best.{n}"), t.clone()));
            }
        }
        c.meta["checkpoint"] = serde_json::json!({
            "epoch": self.epoch,
            "step": self.step,
            "adam_t": self.adam.t,
            "bad_epochs": self.bad_epochs,
            "report": self.report,
        });
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let model = GatedModel::from_container(c)?;
        let cp = c
            .meta
            .get("checkpoint")
            .ok_or_else(|| Error::Format("not a checkpoint (no optimizer state)".into()))?;
        let field = |k: &str| {
            cp.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Format(format!("checkpoint field `{k}` missing")))
        };
        let mut state = TrainState::new(model);
        state.epoch = field("epoch")? as usize;
        state.step = field("step")? as usize;
        state.adam.t = field("adam_t")?;
        state.bad_epochs = field("bad_epochs")? as usize;
        state.report = serde_json::from_value(cp.get("report").cloned().unwrap_or_default())
            .map_err(|e| Error::Format(format!("checkpoint report: {e}")))?;
        let lookup = |name: &str| {
            c.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
        };
        let names: Vec<String> = state
            .model
            .params()
            .iter()
            .map(|(_, n, _)| n.to_string())
            .collect();
        for (k, n) in names.iter().enumerate() {
            state.adam.m[k] = lookup(&format!("adam.m.{n}"))
                .ok_or_else(|| Error::Format(format!("missing adam.m.{n}")))?;
            state.adam.v[k] = lookup(&format!("adam.v.{n}"))
                .ok_or_else(|| Error::Format(format!("missing adam.v.{n}")))?;
        }
        if state.report.best_epoch.is_some() {
            let mut best = state.model.params().clone();
            let ids: Vec<_> = best.ids().collect();
            for (id, n) in ids.into_iter().zip(&names) {
                *best.get_mut(id) = lookup(&format!("adam.best.{n}"))
                    .ok_or_else(|| Error::Format(format!("missing adam.best.{n}")))?;
            }
            state.best = Some(best);
        }
        Ok(state)
    }
}

/// Side outputs of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Line-delimited JSON log of steps and epochs.
    pub log: Option<PathBuf>,
    /// Checkpoint rewritten after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Stop (without restoring the best parameters) after this many epochs
    /// in total; used to exercise resumption.
    pub halt_after: Option<usize>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogRecord<'a> {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        #[serde(flatten)]
        loss: &'a LossParts,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        val_mse: f64,
        best_val_mse: f64,
        best_epoch: usize,
    },
}

/// Train from scratch; returns the best-validation model.
pub fn train(
    model: GatedModel,
    train: &Windows,
    val: &Windows,
    config: &TrainConfig,
) -> Result<(GatedModel, LossReport)> {
    train_with(
        TrainState::new(model),
        train,
        val,
        config,
        &TrainOutputs::default(),
    )
}

/// A model trained on one synthetic regime, with its windows.
#[derive(Clone, Debug)]
pub struct RegimeRun {
    pub model: GatedModel,
    pub windows: SplitWindows,
    pub report: LossReport,
}

/// Generate `spec`, window it for `model`, and train a model initialized
/// from `train.seed`.
pub fn train_regime(
    spec: &RegimeSpec,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<RegimeRun> {
    let ds = datagen::generate_regime(spec)?;
    if model.channels != ds.channels {
        return Err(Error::Config(format!(
            "model expects {} channels, regime has {}",
            model.channels, ds.channels
        )));
    }
    let windows = datagen::window_split(&ds, model.input_len, model.horizon)?;
    let init = GatedModel::seeded(model.clone(), train_cfg.seed)?;
    let (model, report) = train(init, &windows.train, &windows.val, train_cfg)?;
    Ok(RegimeRun {
        model,
        windows,
        report,
    })
}

/// Continue `state` until early stopping or `config.epochs`.
pub fn train_with(
    mut state: TrainState,
    train: &Windows,
    val: &Windows,
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<(GatedModel, LossReport)> {
    config.validate()?;
    if config.epochs == 0 {
        return Ok((state.model, state.report));
    }
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let channels = state.model.config().channels;
    let n = train.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let warmup = (config.warmup_frac * total_steps as f64).round() as usize;
    let mut log = match &outputs.log {
        Some(p) => {
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(state.epoch > 0)
                .write(true)
                .truncate(state.epoch == 0)
                .open(p)?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };

    while state.epoch < config.epochs && state.bad_epochs < config.patience.max(1) {
        if outputs.halt_after.is_some_and(|h| state.epoch >= h) {
            return Ok((state.model, state.report));
        }
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut numerics::substream(
            config.seed,
            &format!("shuffle/{epoch}"),
        ));
        for batch in order.chunks(config.batch_size) {
            let (x, y) = train.batch(batch);
            let lr = cosine_lr(state.step, total_steps, config.lr, warmup);
            let (parts, mut grads) =
                batch_gradients(&state.model, &x, &y, channels, config.lambda_g)
                    .map_err(|e| diverged(e, epoch, state.step))?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: state.step,
                    detail: "non-finite loss".into(),
                });
            }
            let grad_norm = clip_global_norm(&mut grads, config.grad_clip);
            state
                .adam
                .step(state.model.params_mut(), &grads, lr)
                .map_err(|e| diverged(e, epoch, state.step))?;
            if let Some(w) = log.as_mut() {
                let rec = LogRecord::Step {
                    epoch,
                    step: state.step,
                    lr,
                    loss: &parts,
                    grad_norm,
                };
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
            state.report.steps.push(parts);
            state.step += 1;
        }
        let v = evaluate_mse(&state.model, val)?;
        state.report.val_mse.push(v);
        if state.report.best_val_mse.is_none_or(|b| v < b) {
            state.report.best_val_mse = Some(v);
            state.report.best_epoch = Some(epoch);
            state.best = Some(state.model.params().clone());
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
        }
        state.epoch += 1;
        state.report.epochs_run = state.epoch;
        if let Some(w) = log.as_mut() {
            let rec = LogRecord::Epoch {
                epoch,
                val_mse: v,
                best_val_mse: state.report.best_val_mse.unwrap_or(v),
                best_epoch: state.report.best_epoch.unwrap_or(epoch),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            w.flush()?;
        }
        if let Some(p) = &outputs.checkpoint {
            state.to_container().write(p)?;
        }
    }
    state.report.stopped_early = state.epoch < config.epochs;
    if let Some(best) = state.best.take() {
        *state.model.params_mut() = best;
    }
    Ok((state.model, state.report))
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numerics(NumericsError::NonFinite { op }) => Error::Diverged {
            epoch,
            step,
            detail: format!("non-finite value in {op}"),
        },
        Error::Diverged { detail, .. } => Error::Diverged {
            epoch,
            step,
            detail,
        },
        other => other,
    }
}

/// Loss and per-parameter gradients on one batch.
pub fn batch_gradients(
    model: &GatedModel,
    x: &Tensor,
    y: &Tensor,
    channels: usize,
    lambda_g: f64,
) -> Result<(LossParts, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true)?;
    let xv = tape.constant(x.clone())?;
    let yv = tape.constant(y.clone())?;
    let r = model.record(&mut tape, &p, xv, &ForwardOptions::default())?;
    let (total, mse, pen) = record_loss(&mut tape, r.y, yv, r.gates, channels, lambda_g)?;
    let parts = LossParts {
        total: tape.value(total).item(),
        mse: tape.value(mse).item(),
        gate_penalty: pen.map_or(0.0, |v| tape.value(v).item()),
    };
    let mut grads = tape.backward(total)?;
    let g = model
        .params()
        .ids()
        .map(|id| {
            let v = p[id];
            if grads.get(v).is_some() {
                grads.take(v)
            } else {
                Tensor::zeros(model.params().get(id).shape())
            }
        })
        .collect();
    Ok((parts, g))
}

/// Load a checkpoint written by [`train_with`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    TrainState::from_container(&Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_regime, window_split, RegimeKind, RegimeSpec, SplitWindows};
    use crate::forecaster::{CoreKind, ModelConfig};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_data(kind: RegimeKind, len: usize, l: usize, h: usize) -> SplitWindows {
        let ds = generate_regime(&RegimeSpec {
            length: len,
            ..RegimeSpec::new(kind, 3)
        })
        .unwrap();
        window_split(&ds, l, h).unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_len: 16,
            horizon: 4,
            patch_len: 8,
            stride: 4,
            d_model: 4,
            kernel: 5,
            hidden_dim: 8,
            kan_depth: 1,
            stats_hidden: 4,
            stats_dim: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn loss_examples() {
        let y = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let ones = [1.0, 1.0];
        let p = loss_value(&y, &y, [Some(&ones), Some(&ones)], 1, 0.05).unwrap();
        // two windows of one channel: mean over windows of the gate sum is 1
        assert!((p.total - 0.1).abs() < 1e-15);
        let yh = Tensor::matrix(2, 3, vec![1.5, 2.0, 3.0, 4.0, 5.0, 4.0]).unwrap();
        let p = loss_value(&yh, &y, [None, None], 1, 0.0).unwrap();
        assert!((p.mse - (0.25 + 4.0) / 6.0).abs() < 1e-15);
        assert_eq!(p.total, p.mse);
        assert!(loss_value(&yh, &y, [None, None], 1, -1.0).is_err());
    }

    #[test]
    fn loss_matches_hand_oracle_and_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (b, c, h) = (
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..5),
            );
            let rows = b * c;
            let mk = |rng: &mut ChaCha8Rng, n| {
                (0..n)
                    .map(|_| rng.gen_range(-2.0..2.0))
                    .collect::<Vec<f64>>()
            };
            let yh = Tensor::matrix(rows, h, mk(&mut rng, rows * h)).unwrap();
            let y = Tensor::matrix(rows, h, mk(&mut rng, rows * h)).unwrap();
            let gt: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.0..1.0)).collect();
            let gr: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.0..1.0)).collect();
            let lam = rng.gen_range(0.0..0.2);
            let mut mse = 0.0;
            for i in 0..rows * h {
                mse += (yh.data()[i] - y.data()[i]).powi(2);
            }
            mse /= (rows * h) as f64;
            let mut pen = 0.0;
            for w in 0..b {
                for ch in 0..c {
                    pen += gt[w * c + ch] + gr[w * c + ch];
                }
            }
            pen /= b as f64;
            let p = loss_value(&yh, &y, [Some(&gt), Some(&gr)], c, lam).unwrap();
            assert!((p.total - (mse + lam * pen)).abs() < 1e-12);
            assert!((p.total - (p.mse + lam * p.gate_penalty)).abs() < 1e-12);

            let mut tape = Tape::new();
            let a = tape.constant(yh.clone()).unwrap();
            let t = tape.constant(y.clone()).unwrap();
            let g1 = tape
                .constant(Tensor::matrix(rows, 1, gt.clone()).unwrap())
                .unwrap();
            let g2 = tape
                .constant(Tensor::matrix(rows, 1, gr.clone()).unwrap())
                .unwrap();
            let (tot, _, _) = record_loss(&mut tape, a, t, [Some(g1), Some(g2)], c, lam).unwrap();
            assert!((tape.value(tot).item() - p.total).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_examples() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.0]));
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Tensor::vector(vec![1.0])], 0.1)
            .unwrap();
        assert!((store.get(id).data()[0] + 0.1).abs() < 1e-6);

        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![0.3, 0.3]));
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Tensor::vector(vec![0.5, 0.5])], 0.01)
            .unwrap();
        let m_before = adam.m[0].clone();
        let snapshot = store.clone();
        adam.step(&mut store, &[Tensor::vector(vec![0.0, 0.0])], 0.0)
            .unwrap();
        assert_eq!(store, snapshot);
        assert!((adam.m[0].data()[0] - 0.9 * m_before.data()[0]).abs() < 1e-15);
        let v = store.get(a).data();
        assert_eq!(v[0], v[1]);

        let bad = adam.step(&mut store, &[Tensor::vector(vec![f64::NAN, 0.0])], 0.1);
        assert!(matches!(bad, Err(Error::Diverged { .. })));
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![2.0, -1.0, 0.5]));
        let mut adam = Adam::new(&store);
        let loss = |s: &ParamStore| s.get(id).data().iter().map(|v| v * v).sum::<f64>();
        let before = loss(&store);
        let g = Tensor::vector(store.get(id).data().iter().map(|v| 2.0 * v).collect());
        adam.step(&mut store, &[g], 0.01).unwrap();
        assert!(loss(&store) < before);
    }

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_lr(10, 100, 1e-3, 10), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3, 10).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 0) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(4, 100, 1e-3, 10) < 1e-3);
        assert!(cosine_lr(200, 100, 1e-3, 10).abs() < 1e-18);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 0.0]), Tensor::vector(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::vector(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.1);
    }

    #[test]
    fn evaluate_mse_examples() {
        let data = small_data(RegimeKind::ThresholdAr, 1200, 16, 4);
        let model = GatedModel::seeded(small_config().with_core(CoreKind::LinearOnly), 1).unwrap();
        // zero the heads: the forecast is then the window mean
        let mut zero = model.clone();
        for c in crate::forecaster::Component::BOTH {
            let h = zero.linear_branch(c).unwrap().head.clone();
            zero.params_mut().get_mut(h.weight).data_mut().fill(0.0);
            zero.params_mut().get_mut(h.bias).data_mut().fill(0.0);
        }
        let mse = evaluate_mse(&zero, &data.test).unwrap();
        let mut oracle = 0.0;
        for r in 0..data.test.x.dims2().0 {
            let m = data.test.x.data()[r * 16..(r + 1) * 16].iter().sum::<f64>() / 16.0;
            for t in 0..4 {
                oracle += (data.test.y.get2(r, t) - m).powi(2);
            }
        }
        oracle /= data.test.y.numel() as f64;
        assert!((mse - oracle).abs() < 1e-10);
        // the threshold process has unit innovations, so its variance is above one
        assert!(mse > 1.0 && mse < 2.5, "{mse}");
        assert!(matches!(
            evaluate_mse(&model, &data.test.head(0)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let data = small_data(RegimeKind::LinearSine, 600, 16, 4);
        let model = GatedModel::seeded(small_config(), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            patience: 0,
            ..TrainConfig::default()
        };
        let (m, report) = train(model.clone(), &data.train, &data.val, &cfg).unwrap();
        assert_eq!(m, model);
        assert!(report.steps.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_restores_best() {
        let data = small_data(RegimeKind::Multifreq, 900, 16, 4);
        let cfg = TrainConfig {
            epochs: 4,
            patience: 2,
            batch_size: 32,
            lambda_g: 0.01,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let model = GatedModel::seeded(small_config(), 3).unwrap();
        let (a, ra) = train(model.clone(), &data.train, &data.val, &cfg).unwrap();
        let (b, rb) = train(model, &data.train, &data.val, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let best = ra.best_val_mse.unwrap();
        assert_eq!(
            best,
            ra.val_mse.iter().cloned().fold(f64::INFINITY, f64::min)
        );
        assert_eq!(evaluate_mse(&a, &data.val).unwrap(), best);
        for s in &ra.steps {
            assert!((s.total - (s.mse + cfg.lambda_g * s.gate_penalty)).abs() < 1e-12);
        }
        assert!(ra.val_mse.last().unwrap() < &ra.val_mse[0] || ra.best_epoch != Some(0));
    }

    #[test]
    fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
        let data = small_data(RegimeKind::LinearSine, 700, 16, 4);
        let cfg = TrainConfig {
            epochs: 3,
            patience: 3,
            batch_size: 50,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("ck.bin");
        let log = dir.path().join("log.jsonl");
        let model = GatedModel::seeded(small_config(), 4).unwrap();
        let (full, full_report) = train(model.clone(), &data.train, &data.val, &cfg).unwrap();
        let outs = TrainOutputs {
            log: Some(log.clone()),
            checkpoint: Some(ck.clone()),
            halt_after: Some(1),
        };
        train_with(TrainState::new(model), &data.train, &data.val, &cfg, &outs).unwrap();
        let state = load_checkpoint(&ck).unwrap();
        assert_eq!(state.epoch, 1);
        let outs = TrainOutputs {
            halt_after: None,
            ..outs
        };
        let (resumed, report) = train_with(state, &data.train, &data.val, &cfg, &outs).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(report, full_report);
        let lines = std::fs::read_to_string(&log).unwrap();
        let epochs = lines
            .lines()
            .filter(|l| l.contains("\"kind\":\"epoch\""))
            .count();
        assert_eq!(epochs, 3);
        for l in lines.lines() {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            assert!(v.get("kind").is_some());
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                lambda_g: -0.1,
                ..TrainConfig::default()
            },
            TrainConfig {
                patience: 60,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn schedule_stays_within_bounds(step in 0usize..2000, total in 1usize..1000, warm in 0usize..100) {
            let lr = cosine_lr(step, total, 1e-3, warm);
            prop_assert!((0.0..=1e-3 + 1e-18).contains(&lr));
        }
    }
}
