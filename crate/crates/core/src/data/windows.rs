use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DatasetBundle;
use crate::embeddings::WindowInput;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Z-score statistics fitted on nonzero training values. Holds one pair, or
/// one pair per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn fit(bundle: &DatasetBundle, range: Range<usize>, per_node: bool) -> Result<Self> {
        let n = bundle.n_nodes();
        if range.is_empty() || range.end > bundle.n_steps() {
            return Err(Error::Config(format!("cannot fit normalization on steps {range:?}")));
        }
        let groups = if per_node { n } else { 1 };
        let mut sums = vec![(0.0, 0.0, 0usize); groups];
        let rows = &bundle.values.data()[range.start * n..range.end * n];
        for (i, &v) in rows.iter().enumerate() {
            if v != 0.0 {
                let s = &mut sums[if per_node { i % n } else { 0 }];
                s.0 += v;
                s.2 += 1;
            }
        }
        let mean: Vec<f64> = sums.iter().map(|s| if s.2 > 0 { s.0 / s.2 as f64 } else { 0.0 }).collect();
        for (i, &v) in rows.iter().enumerate() {
            if v != 0.0 {
                let g = if per_node { i % n } else { 0 };
                sums[g].1 += (v - mean[g]).powi(2);
            }
        }
        let std = sums
            .iter()
            .map(|s| {
                let sd = if s.2 > 0 { (s.1 / s.2 as f64).sqrt() } else { 0.0 };
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    fn group(&self, node: usize) -> usize {
        if self.mean.len() == 1 {
            0
        } else {
            node
        }
    }

    pub fn normalize(&self, v: f64, node: usize) -> f64 {
        let g = self.group(node);
        (v - self.mean[g]) / self.std[g]
    }

    pub fn denormalize(&self, z: f64, node: usize) -> f64 {
        let g = self.group(node);
        z * self.std[g] + self.mean[g]
    }

    fn map_nodes(&self, x: &Tensor, f: impl Fn(f64, usize) -> f64) -> Result<Tensor> {
        if x.ndim() < 2 {
            return Err(Error::dim("normalization", x.shape(), &[0, 0]));
        }
        let n = x.shape()[1];
        if self.mean.len() != 1 && self.mean.len() != n {
            return Err(Error::dim("normalization", x.shape(), &[self.mean.len()]));
        }
        let inner: usize = x.shape()[2..].iter().product();
        let data = x.data().iter().enumerate().map(|(i, &v)| f(v, (i / inner) % n)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Applies the z-score to a `[T, N, ...]` tensor.
    pub fn normalize_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.map_nodes(x, |v, n| self.normalize(v, n))
    }

    pub fn denormalize_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.map_nodes(x, |v, n| self.denormalize(v, n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }
}

/// Contiguous chronological step ranges partitioning `[0, T_total)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitSpec {
    /// 6:2:2 by step count, boundaries rounded to the nearest step.
    pub fn chronological(n_steps: usize) -> Self {
        let a = (n_steps as f64 * 0.6).round() as usize;
        let b = (n_steps as f64 * 0.8).round() as usize;
        Self {
            train: 0..a,
            val: a..b,
            test: b..n_steps,
        }
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

/// One input/target pair in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub t0: usize,
    /// `[T, N, 1]`
    pub input: Tensor,
    /// `[T′, N, 1]`
    pub target: Tensor,
    pub acc_ids: Vec<usize>,
    pub reg_ids: Vec<usize>,
}

impl Window {
    pub fn model_input(&self, stats: &NormalizationStats) -> Result<WindowInput> {
        Ok(WindowInput {
            x: stats.normalize_tensor(&self.input)?,
            acc_ids: self.acc_ids.clone(),
            reg_ids: self.reg_ids.clone(),
            t0: self.t0,
        })
    }

    /// True when any input cell carries an accident id.
    pub fn has_accident(&self) -> bool {
        self.acc_ids.iter().any(|&id| id != 0)
    }
}

/// Stride-1 windows whose input and target both lie inside `range`.
pub fn make_windows(bundle: &DatasetBundle, range: Range<usize>, t_in: usize, t_out: usize) -> Result<Vec<Window>> {
    if range.end > bundle.n_steps() {
        return Err(Error::Config(format!(
            "range {range:?} exceeds {} steps",
            bundle.n_steps()
        )));
    }
    if range.len() < t_in + t_out {
        return Err(Error::Config(format!(
            "range {range:?} is shorter than T + T′ = {}",
            t_in + t_out
        )));
    }
    let n = bundle.n_nodes();
    let vals = bundle.values.data();
    let rows = |a: usize, len: usize| Tensor::new(vec![len, n, 1], vals[a * n..(a + len) * n].to_vec());
    (range.start..=range.end - t_in - t_out)
        .map(|t0| {
            Ok(Window {
                t0,
                input: rows(t0, t_in)?,
                target: rows(t0 + t_in, t_out)?,
                acc_ids: bundle.acc_ids[t0 * n..(t0 + t_in) * n].to_vec(),
                reg_ids: bundle.reg_ids[t0 * n..(t0 + t_in) * n].to_vec(),
            })
        })
        .collect()
}
