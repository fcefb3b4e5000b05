//! The `conformer` command line: `synth`, `train`, `evaluate`, `predict`, `flops`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Ablation, ModelSettings};
use crate::data::{load_dataset, make_windows, save_dataset, synth_generate, Split, SynthConfig};
use crate::graph::GraphSpec;
use crate::model::{estimate_flops, ConFormer};
use crate::trainer::{self, historical_inertia, split_windows, Context, TrainConfig, WindowFilter};

/// Everything a run needs. Loaded from `--config`, then overridden by flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the generator and training; copied into `train.seed`.
    pub seed: u64,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(dir.join("config.json"), s)?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "conformer", version, about = "Incident-aware spatiotemporal traffic forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Expected accidents per node per day.
        #[arg(long)]
        incident_rate: Option<f64>,
    },
    /// Train a model and write checkpoint.bin, history.csv and config.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked metrics of a checkpoint per horizon, plus the pooled average.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated horizons in 1..=T′.
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Score only windows whose input contains an accident.
        #[arg(long)]
        accident_windows: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Forecast the T′ steps after the window starting at `--at`.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        at: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print the per-block FLOPs estimate and the parameter count.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Read N, |E| and vocabularies from a dataset instead of the generator config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the edge count.
        #[arg(long)]
        edges: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable a component; repeatable.
    #[arg(long = "ablate")]
    ablate: Vec<Ablation>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            run.seed = seed;
        }
        run.train.seed = run.seed;
        for &a in &self.ablate {
            run.model.add_ablation(a);
        }
        run.model.validate()?;
        Ok(run)
    }
}

fn write_metrics(out: &mut dyn Write, label: &str, csv: &str) -> Result<()> {
    writeln!(out, "# {label}")?;
    out.write_all(csv.as_bytes())?;
    Ok(())
}

pub fn cmd_synth(common: &Common, out_dir: &Path, incident_rate: Option<f64>, out: &mut dyn Write) -> Result<()> {
    let mut run = common.resolve()?;
    if let Some(r) = incident_rate {
        run.synth.incident_rate = r;
    }
    let bundle = synth_generate(&run.synth, run.seed)?;
    save_dataset(out_dir, &bundle)?;
    run.write(out_dir)?;
    let (acc, reg) = bundle.incident_cells();
    writeln!(
        out,
        "nodes={} steps={} edges={} accident_cells={acc} regulation_cells={reg}",
        bundle.n_nodes(),
        bundle.n_steps(),
        bundle.graph.n_edges()
    )?;
    Ok(())
}

pub fn cmd_train(common: &Common, data: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let run = common.resolve()?;
    let bundle = load_dataset(data).context("loading dataset")?;
    let cfg = bundle.model_config(run.model.clone())?;
    fs::create_dir_all(out_dir)?;
    let trained = trainer::train_with(&bundle, &cfg, &run.train, |r| {
        let _ = writeln!(out, "epoch {} train_mae {:.4} val_mae {:.4}", r.epoch, r.train_mae, r.val_mae);
    })?;
    save_checkpoint(out_dir.join("checkpoint.bin"), &trained.model, &trained.stats)?;
    fs::write(out_dir.join("history.csv"), trained.history.to_csv())?;
    run.write(out_dir)?;
    writeln!(out, "best epoch {} of {}", trained.best_epoch, trained.history.epochs.len())?;
    Ok(())
}

/// Loads a checkpoint, rejecting it when `--config` describes a different model.
fn checkpoint_for(common: &Common, path: &Path) -> Result<(ConFormer, crate::data::NormalizationStats)> {
    let (model, stats) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if common.config.is_some() || !common.ablate.is_empty() {
        let run = common.resolve()?;
        if run.model != model.cfg.model {
            bail!("checkpoint model settings differ from the given configuration");
        }
    }
    Ok((model, stats))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    horizons: &[usize],
    split: Split,
    filter: WindowFilter,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let (model, stats) = checkpoint_for(common, checkpoint)?;
    let bundle = load_dataset(data).context("loading dataset")?;
    let m = &model.cfg.model;
    let horizons: Vec<usize> = if horizons.is_empty() { (1..=m.t_out).collect() } else { horizons.to_vec() };
    let report = trainer::evaluate(&model, &stats, &bundle, split, &horizons, filter)?;
    let windows = split_windows(&bundle, split, m.t_in, m.t_out, filter)?;
    let hi = trainer::evaluate_predictions(&windows, &horizons, m.t_out, |w| Ok(historical_inertia(w, m.t_out)))?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("metrics.csv"), report.to_csv())?;
    fs::write(out_dir.join("metrics_hi.csv"), hi.to_csv())?;
    write_metrics(out, &format!("model ({split})"), &report.to_csv())?;
    write_metrics(out, &format!("historical inertia ({split})"), &hi.to_csv())?;
    Ok(())
}

pub fn cmd_predict(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    at: usize,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let (model, stats) = checkpoint_for(common, checkpoint)?;
    let bundle = load_dataset(data).context("loading dataset")?;
    let m = &model.cfg.model;
    let n = bundle.n_nodes();
    if at + m.t_in > bundle.n_steps() {
        bail!("window at {at} needs {} input steps but the dataset has {}", m.t_in, bundle.n_steps());
    }
    let ctx = Context::new(&bundle, &model.cfg)?;
    // Targets past the end of the data are unknown; pad with zeros.
    let mut padded = bundle.clone();
    let need = at + m.t_in + m.t_out;
    if need > bundle.n_steps() {
        let extra = need - bundle.n_steps();
        let mut values = bundle.values.data().to_vec();
        values.resize(need * n, 0.0);
        padded.values = crate::tensor::Tensor::new(vec![need, n], values)?;
        padded.acc_ids.resize(need * n, 0);
        padded.reg_ids.resize(need * n, 0);
        padded.meta.n_steps += extra;
    }
    let window = make_windows(&padded, at..need, m.t_in, m.t_out)?.remove(0);
    let pred = trainer::predict_window(&model, &ctx, &stats, &window)?;

    let mut csv = (0..n).map(|v| format!("node_{v}")).collect::<Vec<_>>().join(",");
    csv.push('\n');
    for row in pred.data().chunks(n) {
        csv.push_str(&row.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("predictions.csv"), &csv)?;
    out.write_all(csv.as_bytes())?;
    Ok(())
}

pub fn cmd_flops(common: &Common, data: Option<&Path>, edges: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let run = common.resolve()?;
    let (cfg, graph): (_, GraphSpec) = match data {
        Some(d) => {
            let b = load_dataset(d).context("loading dataset")?;
            (b.model_config(run.model.clone())?, b.graph)
        }
        None => {
            let s = &run.synth;
            let small = SynthConfig { days: 1, ..s.clone() };
            let b = synth_generate(&small, run.seed)?;
            (b.model_config(run.model.clone())?, b.graph)
        }
    };
    let n_edges = edges.unwrap_or(graph.n_edges());
    let model = ConFormer::new(cfg.clone(), run.seed)?;
    writeln!(out, "flops={}", estimate_flops(&cfg, n_edges))?;
    writeln!(out, "params={}", model.count_params())?;
    Ok(())
}

/// Parses `args` (including the program name) and runs one command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    #[cfg(feature = "parallel")]
    trainer::init_threads_from_env()?;
    match &cli.command {
        Command::Synth {
            common,
            out: dir,
            incident_rate,
        } => cmd_synth(common, dir, *incident_rate, out),
        Command::Train { common, data, out: dir } => cmd_train(common, data, dir, out),
        Command::Evaluate {
            common,
            checkpoint,
            data,
            horizons,
            split,
            accident_windows,
            out: dir,
        } => {
            let filter = if *accident_windows { WindowFilter::Accident } else { WindowFilter::All };
            cmd_evaluate(common, checkpoint, data, horizons, *split, filter, dir, out)
        }
        Command::Predict {
            common,
            checkpoint,
            data,
            at,
            out: dir,
        } => cmd_predict(common, checkpoint, data, *at, dir, out),
        Command::Flops { common, data, edges } => cmd_flops(common, data.as_deref(), *edges, out),
    }
}
