//! Datasets: the in-memory bundle, on-disk format, normalization, chronological
//! splits, window extraction, masked metrics and a synthetic generator.

mod io;
mod metrics;
mod synth;
mod windows;

pub use io::{load_dataset, save_dataset};
pub use metrics::{masked_metrics, MetricsAccumulator, Metrics};
pub use synth::{synth_generate, SynthConfig, Topology};
pub use windows::{make_windows, NormalizationStats, Split, SplitSpec, Window};

use serde::{Deserialize, Serialize};

use crate::config::{ConFormerConfig, ModelSettings};
use crate::embeddings::{CalendarIndexer, MINUTES_PER_DAY};
use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub interval_minutes: usize,
    pub start_weekday: usize,
    pub start_slot: usize,
    pub n_nodes: usize,
    pub n_steps: usize,
    /// Number of accident ids including the "none" id 0.
    pub acc_vocab: usize,
    pub reg_vocab: usize,
}

impl DatasetMeta {
    pub fn steps_per_day(&self) -> usize {
        MINUTES_PER_DAY / self.interval_minutes
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval_minutes == 0 || !MINUTES_PER_DAY.is_multiple_of(self.interval_minutes) {
            return Err(Error::Validation(format!(
                "interval_minutes {} does not divide 1440",
                self.interval_minutes
            )));
        }
        if self.start_weekday > 6 {
            return Err(Error::Validation(format!("start_weekday {} > 6", self.start_weekday)));
        }
        if self.start_slot >= self.steps_per_day() {
            return Err(Error::Validation(format!(
                "start_slot {} >= steps per day {}",
                self.start_slot,
                self.steps_per_day()
            )));
        }
        if self.n_nodes == 0 || self.n_steps == 0 {
            return Err(Error::Validation("n_nodes and n_steps must be >= 1".into()));
        }
        if self.acc_vocab == 0 || self.reg_vocab == 0 {
            return Err(Error::Validation("vocabularies must include id 0".into()));
        }
        Ok(())
    }
}

/// Observations `[T_total, N]` with aligned incident ids and the road graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub meta: DatasetMeta,
    pub values: Tensor,
    /// Row-major `[T_total, N]`.
    pub acc_ids: Vec<usize>,
    pub reg_ids: Vec<usize>,
    pub graph: GraphSpec,
}

impl DatasetBundle {
    pub fn new(
        meta: DatasetMeta,
        values: Tensor,
        acc_ids: Vec<usize>,
        reg_ids: Vec<usize>,
        graph: GraphSpec,
    ) -> Result<Self> {
        let b = Self {
            meta,
            values,
            acc_ids,
            reg_ids,
            graph,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        let (t, n) = (self.meta.n_steps, self.meta.n_nodes);
        if self.values.shape() != [t, n] {
            return Err(Error::dim("dataset values", self.values.shape(), &[t, n]));
        }
        if self.acc_ids.len() != t * n || self.reg_ids.len() != t * n {
            return Err(Error::dim(
                "dataset ids",
                &[self.acc_ids.len(), self.reg_ids.len()],
                &[t * n],
            ));
        }
        if self.graph.n_nodes() != n {
            return Err(Error::Validation(format!(
                "graph has {} nodes, meta declares {n}",
                self.graph.n_nodes()
            )));
        }
        if let Some(i) = self.values.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at t={}, node={}",
                i / n,
                i % n
            )));
        }
        for (ids, vocab, what) in [
            (&self.acc_ids, self.meta.acc_vocab, "accident"),
            (&self.reg_ids, self.meta.reg_vocab, "regulation"),
        ] {
            if let Some(i) = ids.iter().position(|&id| id >= vocab) {
                return Err(Error::Validation(format!(
                    "{what} id {} at t={}, node={} outside vocabulary of {vocab}",
                    ids[i],
                    i / n,
                    i % n
                )));
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        self.meta.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.meta.n_nodes
    }

    pub fn calendar(&self) -> Result<CalendarIndexer> {
        CalendarIndexer::new(
            self.meta.interval_minutes,
            self.meta.start_weekday,
            self.meta.start_slot,
        )
    }

    /// Model shape for these settings on this dataset.
    pub fn model_config(&self, settings: ModelSettings) -> Result<ConFormerConfig> {
        ConFormerConfig::new(
            settings,
            self.meta.n_nodes,
            self.meta.steps_per_day(),
            self.meta.acc_vocab,
            self.meta.reg_vocab,
        )
    }

    /// Number of (t, node) cells with a nonzero accident id.
    pub fn incident_cells(&self) -> (usize, usize) {
        let count = |ids: &[usize]| ids.iter().filter(|&&id| id != 0).count();
        (count(&self.acc_ids), count(&self.reg_ids))
    }
}
