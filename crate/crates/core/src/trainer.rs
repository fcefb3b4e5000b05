//! Masked-MAE training with Adam, global-norm clipping and early stopping,
//! plus evaluation and the historical-inertia baseline.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::ConFormerConfig;
use crate::data::{make_windows, DatasetBundle, Metrics, MetricsAccumulator, NormalizationStats, SplitSpec, Window};
use crate::embeddings::{CalendarIndexer, WindowInput};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, PropagationOperator};
use crate::model::{ConFormer, Mode};
use crate::params::{GradientRecord, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Training windows drawn (without replacement) per epoch; all if unset.
    pub windows_per_epoch: Option<usize>,
    /// Use every `val_stride`-th validation window.
    pub val_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 100,
            patience: 20,
            seed: 0,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            windows_per_epoch: None,
            val_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.val_stride == 0 {
            return bad("batch_size, max_epochs, patience and val_stride must be >= 1".into());
        }
        if self.windows_per_epoch == Some(0) {
            return bad("windows_per_epoch must be >= 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam moments must lie in [0, 1) and adam_eps must be positive".into());
        }
        Ok(())
    }
}

/// Adam state aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, e)| vec![0.0; e.tensor.len()]).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradientRecord) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *p -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut GradientRecord, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records one epoch's score; returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score < self.best {
            self.best = score;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,train_mae,val_mae` with one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mae,val_mae\n");
        for r in &self.epochs {
            writeln!(s, "{},{},{}", r.epoch, r.train_mae, r.val_mae).unwrap();
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ConFormer,
    pub stats: NormalizationStats,
    pub history: History,
    pub best_epoch: usize,
}

/// Everything needed to run the model on one dataset.
pub struct Context {
    pub cal: CalendarIndexer,
    pub op: PropagationOperator,
    pub splits: SplitSpec,
}

impl Context {
    pub fn new(bundle: &DatasetBundle, cfg: &ConFormerConfig) -> Result<Self> {
        if bundle.n_nodes() != cfg.n_nodes
            || bundle.meta.steps_per_day() != cfg.steps_per_day
            || bundle.meta.acc_vocab != cfg.acc_vocab
            || bundle.meta.reg_vocab != cfg.reg_vocab
        {
            return Err(Error::Config(format!(
                "dataset (N={}, steps/day={}, vocab={}/{}) does not match model (N={}, steps/day={}, vocab={}/{})",
                bundle.n_nodes(),
                bundle.meta.steps_per_day(),
                bundle.meta.acc_vocab,
                bundle.meta.reg_vocab,
                cfg.n_nodes,
                cfg.steps_per_day,
                cfg.acc_vocab,
                cfg.reg_vocab
            )));
        }
        Ok(Self {
            cal: bundle.calendar()?,
            op: normalize_adjacency(&bundle.graph, cfg.model.self_loops)?,
            splits: SplitSpec::chronological(bundle.n_steps()),
        })
    }
}

fn node_tensor(stats: &NormalizationStats, n: usize, f: impl Fn(&NormalizationStats, usize) -> f64) -> Tensor {
    Tensor::from_fn(&[1, n, 1], |i| f(stats, i))
}

/// Masked MAE of one window in original units, as a graph node.
fn window_loss(
    model: &ConFormer,
    g: &mut Graph,
    ctx: &Context,
    stats: &NormalizationStats,
    input: &WindowInput,
    target: &Tensor,
    mode: Mode<'_>,
) -> Result<Var> {
    let n = model.cfg.n_nodes;
    let out = model.forward(g, input, &ctx.cal, &ctx.op, mode)?;
    let std = g.input(node_tensor(stats, n, |s, i| s.denormalize(1.0, i) - s.denormalize(0.0, i)));
    let mean = g.input(node_tensor(stats, n, |s, i| s.denormalize(0.0, i)));
    let scaled = g.mul(out.prediction, std)?;
    let pred = g.add(scaled, mean)?;
    g.masked_mae(pred, target)
}

/// Per-window loss and parameter gradients, `None` when the target is fully masked.
pub fn window_gradients(
    model: &ConFormer,
    ctx: &Context,
    stats: &NormalizationStats,
    input: &WindowInput,
    target: &Tensor,
    mode: Mode<'_>,
) -> Result<Option<(f64, usize, GradientRecord)>> {
    let count = target.data().iter().filter(|&&y| y != 0.0).count();
    if count == 0 {
        return Ok(None);
    }
    let mut g = Graph::new();
    let loss = window_loss(model, &mut g, ctx, stats, input, target, mode)?;
    let grads = g.backward(loss, &model.params)?;
    Ok(Some((g.value(loss).item(), count, grads)))
}

fn dropout_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_D80F);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

#[cfg(feature = "parallel")]
fn map_ordered<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_ordered<T, R>(items: &[T], f: impl Fn(usize, &T) -> R) -> Vec<R> {
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Trains from a fresh model seeded by `tcfg.seed` and returns the parameters
/// with the lowest validation MAE.
pub fn train(bundle: &DatasetBundle, cfg: &ConFormerConfig, tcfg: &TrainConfig) -> Result<Trained> {
    train_with(bundle, cfg, tcfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    bundle: &DatasetBundle,
    cfg: &ConFormerConfig,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trained> {
    tcfg.validate()?;
    let ctx = Context::new(bundle, cfg)?;
    let m = &cfg.model;
    let train_w = make_windows(bundle, ctx.splits.train.clone(), m.t_in, m.t_out)
        .map_err(|e| Error::Config(format!("train split: {e}")))?;
    let val_w = make_windows(bundle, ctx.splits.val.clone(), m.t_in, m.t_out)
        .map_err(|e| Error::Config(format!("val split: {e}")))?;
    let val_w: Vec<Window> = val_w.into_iter().step_by(tcfg.val_stride).collect();
    let stats = NormalizationStats::fit(bundle, ctx.splits.train.clone(), m.per_node_norm)?;
    let inputs: Vec<WindowInput> = train_w.iter().map(|w| w.model_input(&stats)).collect::<Result<_>>()?;

    let mut model = ConFormer::new(cfg.clone(), tcfg.seed)?;
    let mut adam = Adam::new(&model.params, tcfg);
    let mut stopper = EarlyStopping::new(tcfg.patience);
    let mut best = model.params.clone();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train_w.len()).collect();

    for epoch in 1..=tcfg.max_epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(tcfg.seed);
        shuffle.set_stream(epoch as u64);
        order.shuffle(&mut shuffle);
        let take = tcfg.windows_per_epoch.unwrap_or(order.len()).min(order.len());
        let (mut abs_sum, mut count_sum) = (0.0, 0usize);

        for (b, batch) in order[..take].chunks(tcfg.batch_size).enumerate() {
            let results = map_ordered(batch, |k, &wi| {
                let mut rng = dropout_rng(tcfg.seed, epoch, b * tcfg.batch_size + k);
                window_gradients(&model, &ctx, &stats, &inputs[wi], &train_w[wi].target, Mode::Train(&mut rng))
            });
            let mut grads = GradientRecord::zeros_like(&model.params);
            let (mut batch_abs, mut batch_count) = (0.0, 0usize);
            for r in results {
                let Some((loss, count, mut g)) = r? else { continue };
                g.scale(count as f64);
                grads.accumulate(&g);
                batch_abs += loss * count as f64;
                batch_count += count;
            }
            if batch_count == 0 {
                continue;
            }
            if !batch_abs.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            grads.scale(1.0 / batch_count as f64);
            clip_global_norm(&mut grads, tcfg.clip_norm);
            adam.step(&mut model.params, &grads);
            abs_sum += batch_abs;
            count_sum += batch_count;
        }

        let val = evaluate_windows(&model, &ctx, &stats, &val_w, &[])?
            .average
            .map_or(f64::INFINITY, |m| m.mae);
        let train_mae = if count_sum > 0 { abs_sum / count_sum as f64 } else { f64::NAN };
        let rec = EpochRecord {
            epoch,
            train_mae,
            val_mae: val,
        };
        history.epochs.push(rec);
        on_epoch(&rec);
        if stopper.observe(epoch, val) {
            best = model.params.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }

    model.params = best;
    Ok(Trained {
        model,
        stats,
        history,
        best_epoch: stopper.best_epoch().unwrap_or(0),
    })
}

/// Forecast `[T′, N, 1]` in original units.
pub fn predict_window(model: &ConFormer, ctx: &Context, stats: &NormalizationStats, w: &Window) -> Result<Tensor> {
    let z = model.predict(&w.model_input(stats)?, &ctx.cal, &ctx.op)?;
    stats.denormalize_tensor(&z)
}

/// Last nonzero observation of each node, repeated over the horizon.
pub fn historical_inertia(w: &Window, t_out: usize) -> Tensor {
    let (t_in, n) = (w.input.shape()[0], w.input.shape()[1]);
    let last: Vec<f64> = (0..n)
        .map(|v| {
            (0..t_in)
                .rev()
                .map(|t| w.input.data()[t * n + v])
                .find(|&x| x != 0.0)
                .unwrap_or(0.0)
        })
        .collect();
    Tensor::from_fn(&[t_out, n, 1], |i| last[i % n])
}

/// Per-horizon and pooled masked metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub horizons: Vec<(usize, Option<Metrics>)>,
    /// Pooled over every horizon `1..=T′`.
    pub average: Option<Metrics>,
}

impl EvalReport {
    /// `horizon,mae,rmse,mape,count`; the pooled row is labelled `avg`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,mae,rmse,mape,count\n");
        let rows = self.horizons.iter().map(|(h, m)| (h.to_string(), m)).chain([("avg".to_string(), &self.average)]);
        for (label, m) in rows {
            match m {
                Some(m) => writeln!(s, "{label},{},{},{},{}", m.mae, m.rmse, m.mape, m.count).unwrap(),
                None => writeln!(s, "{label},,,,0").unwrap(),
            }
        }
        s
    }
}

fn check_horizons(horizons: &[usize], t_out: usize) -> Result<()> {
    match horizons.iter().find(|&&h| h == 0 || h > t_out) {
        Some(h) => Err(Error::Config(format!("horizon {h} outside 1..={t_out}"))),
        None => Ok(()),
    }
}

/// Scores predictions from `f` over `windows`.
pub fn evaluate_predictions(
    windows: &[Window],
    horizons: &[usize],
    t_out: usize,
    f: impl Fn(&Window) -> Result<Tensor> + Sync + Send,
) -> Result<EvalReport> {
    check_horizons(horizons, t_out)?;
    let preds = map_ordered(windows, |_, w| f(w));
    let mut per = vec![MetricsAccumulator::new(); t_out];
    for (w, p) in windows.iter().zip(preds) {
        let p = p?;
        if p.shape() != w.target.shape() {
            return Err(Error::dim("evaluate", p.shape(), w.target.shape()));
        }
        let n = w.target.len() / t_out;
        for (h, acc) in per.iter_mut().enumerate() {
            acc.push_slices(&w.target.data()[h * n..(h + 1) * n], &p.data()[h * n..(h + 1) * n]);
        }
    }
    let mut all = MetricsAccumulator::new();
    per.iter().for_each(|a| all.merge(a));
    Ok(EvalReport {
        horizons: horizons.iter().map(|&h| (h, per[h - 1].finish())).collect(),
        average: all.finish(),
    })
}

pub fn evaluate_windows(
    model: &ConFormer,
    ctx: &Context,
    stats: &NormalizationStats,
    windows: &[Window],
    horizons: &[usize],
) -> Result<EvalReport> {
    evaluate_predictions(windows, horizons, model.cfg.model.t_out, |w| predict_window(model, ctx, stats, w))
}

/// Which windows of a split to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowFilter {
    #[default]
    All,
    /// Only windows whose input carries an accident id.
    Accident,
}

/// Windows of one split, optionally restricted to accident windows.
pub fn split_windows(
    bundle: &DatasetBundle,
    split: crate::data::Split,
    t_in: usize,
    t_out: usize,
    filter: WindowFilter,
) -> Result<Vec<Window>> {
    let range = SplitSpec::chronological(bundle.n_steps()).range(split);
    let mut windows = make_windows(bundle, range, t_in, t_out)?;
    if filter == WindowFilter::Accident {
        windows.retain(Window::has_accident);
    }
    Ok(windows)
}

/// Model metrics on one split of `bundle`.
pub fn evaluate(
    model: &ConFormer,
    stats: &NormalizationStats,
    bundle: &DatasetBundle,
    split: crate::data::Split,
    horizons: &[usize],
    filter: WindowFilter,
) -> Result<EvalReport> {
    let m = &model.cfg.model;
    check_horizons(horizons, m.t_out)?;
    let ctx = Context::new(bundle, &model.cfg)?;
    let windows = split_windows(bundle, split, m.t_in, m.t_out, filter)?;
    evaluate_windows(model, &ctx, stats, &windows, horizons)
}

/// Caps worker threads from `CONFORMER_THREADS` when set. Safe to call more
/// than once; only the first call configures the pool.
#[cfg(feature = "parallel")]
pub fn init_threads_from_env() -> Result<()> {
    if let Ok(v) = std::env::var("CONFORMER_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("CONFORMER_THREADS='{v}' is not a thread count")))?;
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
