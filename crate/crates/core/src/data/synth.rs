use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, DatasetMeta};
use crate::embeddings::MINUTES_PER_DAY;
use crate::error::{Error, Result};
use crate::graph::{Edge, GraphSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Ring,
    Grid,
    RandomGeometric,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::Ring => "ring",
            Topology::Grid => "grid",
            Topology::RandomGeometric => "random-geometric",
        })
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(Topology::Ring),
            "grid" => Ok(Topology::Grid),
            "random-geometric" => Ok(Topology::RandomGeometric),
            _ => Err(Error::Config(format!("unknown topology '{s}'"))),
        }
    }
}

/// Knobs for the synthetic speed generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub days: usize,
    pub interval_minutes: usize,
    pub topology: Topology,
    /// Connection radius in the unit square, random-geometric only.
    pub radius: f64,
    pub start_weekday: usize,
    pub start_slot: usize,
    pub base_speed: f64,
    /// Node offsets are uniform in `±node_spread`.
    pub node_spread: f64,
    pub daily_amplitude: f64,
    /// Amplitude multiplier on Saturdays and Sundays (weekday 5 and 6).
    pub weekend_factor: f64,
    pub noise_std: f64,
    /// Expected accidents per node per day.
    pub incident_rate: f64,
    /// Regulations per node per day, as a fraction of `incident_rate`.
    pub regulation_share: f64,
    /// Speed multiplier at the source at full severity.
    pub drop_factor: f64,
    /// Severity attenuation per hop.
    pub decay: f64,
    pub decay_hops: usize,
    /// Steps over which an accident builds to full severity.
    pub onset_steps: usize,
    /// Steps of linear recovery after full severity.
    pub recovery_steps: usize,
    /// Speed cap under regulation, as a fraction of the node's base speed.
    pub reg_cap_factor: f64,
    pub reg_duration: usize,
    /// Probability of an observation being recorded as 0 (missing).
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nodes: 30,
            days: 14,
            interval_minutes: 5,
            topology: Topology::RandomGeometric,
            radius: 0.3,
            start_weekday: 0,
            start_slot: 0,
            base_speed: 60.0,
            node_spread: 10.0,
            daily_amplitude: 15.0,
            weekend_factor: 0.4,
            noise_std: 2.0,
            incident_rate: 0.15,
            regulation_share: 0.5,
            drop_factor: 0.4,
            decay: 0.6,
            decay_hops: 2,
            onset_steps: 3,
            recovery_steps: 24,
            reg_cap_factor: 0.7,
            reg_duration: 36,
            missing_rate: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_nodes == 0 || self.days == 0 {
            return bad("n_nodes and days must be >= 1".into());
        }
        if self.interval_minutes == 0 || !MINUTES_PER_DAY.is_multiple_of(self.interval_minutes) {
            return bad(format!("interval_minutes {} does not divide 1440", self.interval_minutes));
        }
        if self.start_weekday > 6 || self.start_slot >= MINUTES_PER_DAY / self.interval_minutes {
            return bad("start_weekday or start_slot out of range".into());
        }
        let unit = [
            ("drop_factor", self.drop_factor),
            ("decay", self.decay),
            ("weekend_factor", self.weekend_factor),
            ("regulation_share", self.regulation_share),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.reg_cap_factor > 0.0 && self.reg_cap_factor <= 1.0) {
            return bad(format!("reg_cap_factor {} outside (0, 1]", self.reg_cap_factor));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate {} outside [0, 1)", self.missing_rate));
        }
        if !(self.incident_rate >= 0.0 && self.incident_rate.is_finite()) {
            return bad(format!("incident_rate {} must be a finite non-negative number", self.incident_rate));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        if !(self.radius > 0.0) {
            return bad(format!("radius {} must be positive", self.radius));
        }
        if self.recovery_steps == 0 || self.reg_duration == 0 {
            return bad("recovery_steps and reg_duration must be >= 1".into());
        }
        if self.base_speed - self.node_spread - self.daily_amplitude <= 0.0 {
            return bad("base_speed must exceed node_spread + daily_amplitude".into());
        }
        Ok(())
    }

    pub fn steps_per_day(&self) -> usize {
        MINUTES_PER_DAY / self.interval_minutes
    }

    /// Ids `1 + hop` for hops `0..=decay_hops`, plus id 0.
    pub fn vocab(&self) -> usize {
        self.decay_hops + 2
    }

    /// Severity in `(0, 1]` at `tau` steps after an accident starts.
    fn severity(&self, tau: usize) -> f64 {
        let onset = self.onset_steps;
        if tau < onset {
            (tau + 1) as f64 / (onset + 1) as f64
        } else {
            1.0 - (tau - onset) as f64 / self.recovery_steps as f64
        }
    }

    fn accident_len(&self) -> usize {
        self.onset_steps + self.recovery_steps
    }
}

fn both_ways(edges: &mut Vec<Edge>, a: usize, b: usize, weight: f64) {
    edges.push(Edge { src: a, dst: b, weight });
    edges.push(Edge { src: b, dst: a, weight });
}

fn build_graph(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<GraphSpec> {
    let n = cfg.n_nodes;
    let mut edges = Vec::new();
    match cfg.topology {
        Topology::Ring => {
            if n == 2 {
                both_ways(&mut edges, 0, 1, 1.0);
            } else if n > 2 {
                for i in 0..n {
                    both_ways(&mut edges, i, (i + 1) % n, 1.0);
                }
            }
        }
        Topology::Grid => {
            let cols = (n as f64).sqrt().ceil() as usize;
            for i in 0..n {
                if (i + 1) % cols != 0 && i + 1 < n {
                    both_ways(&mut edges, i, i + 1, 1.0);
                }
                if i + cols < n {
                    both_ways(&mut edges, i, i + cols, 1.0);
                }
            }
        }
        Topology::RandomGeometric => {
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
            let dist = |a: usize, b: usize| ((pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2)).sqrt();
            let kernel = |d: f64| (-(d / cfg.radius).powi(2)).exp();
            let mut linked = std::collections::BTreeSet::new();
            for a in 0..n {
                for b in a + 1..n {
                    if dist(a, b) <= cfg.radius {
                        linked.insert((a, b));
                    }
                }
                // Link every node to its nearest neighbour so none is isolated.
                if let Some(b) = (0..n).filter(|&b| b != a).min_by(|&x, &y| dist(a, x).total_cmp(&dist(a, y))) {
                    linked.insert((a.min(b), a.max(b)));
                }
            }
            for (a, b) in linked {
                both_ways(&mut edges, a, b, kernel(dist(a, b)));
            }
        }
    }
    GraphSpec::new(n, edges)
}

/// Generates a dataset with periodic speeds, Gaussian noise, accidents that
/// depress speed around their source and regulations that cap it.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_nodes;
    let spd = cfg.steps_per_day();
    let n_steps = cfg.days * spd;
    let graph = build_graph(cfg, &mut rng)?;
    let hops: Vec<Vec<Option<usize>>> = (0..n).map(|v| graph.hop_distances(v)).collect();

    let base: Vec<f64> = (0..n).map(|_| cfg.base_speed + cfg.node_spread * rng.random_range(-1.0..=1.0)).collect();
    let amp: Vec<f64> = (0..n).map(|_| cfg.daily_amplitude * rng.random_range(0.7..=1.3)).collect();
    let phase: Vec<f64> = (0..n).map(|_| rng.random_range(-0.03..=0.03)).collect();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let mut values = vec![0.0; n_steps * n];
    for t in 0..n_steps {
        let slot = cfg.start_slot + t;
        let tau = (slot % spd) as f64 / spd as f64;
        let dow = (cfg.start_weekday + slot / spd) % 7;
        let w = if dow >= 5 { cfg.weekend_factor } else { 1.0 };
        for v in 0..n {
            let x = tau + phase[v];
            let profile = 0.7 * (TAU * x).cos() + 0.3 * (2.0 * TAU * x).cos();
            values[t * n + v] = base[v] + amp[v] * w * profile + noise.sample(&mut rng);
        }
    }

    let p_acc = cfg.incident_rate / spd as f64;
    let p_reg = p_acc * cfg.regulation_share;
    let mut accidents = Vec::new();
    let mut regulations = Vec::new();
    for t in 0..n_steps {
        for v in 0..n {
            if rng.random::<f64>() < p_acc {
                accidents.push((t, v));
            }
            if rng.random::<f64>() < p_reg {
                regulations.push((t, v));
            }
        }
    }

    let mut mult = vec![1.0f64; n_steps * n];
    let mut acc_ids = vec![0usize; n_steps * n];
    for &(t0, v) in &accidents {
        for (u, h) in hops[v].iter().enumerate() {
            let Some(h) = *h else { continue };
            if h > cfg.decay_hops {
                continue;
            }
            let reach = (1.0 - cfg.drop_factor) * cfg.decay.powi(h as i32);
            for tau in 0..cfg.accident_len().min(n_steps - t0) {
                let i = (t0 + tau) * n + u;
                mult[i] = mult[i].min(1.0 - reach * cfg.severity(tau));
                let code = 1 + h;
                if acc_ids[i] == 0 || code < acc_ids[i] {
                    acc_ids[i] = code;
                }
            }
        }
    }

    let mut cap = vec![f64::INFINITY; n_steps * n];
    let mut reg_ids = vec![0usize; n_steps * n];
    for &(t0, v) in &regulations {
        for (u, h) in hops[v].iter().enumerate() {
            let Some(h) = *h else { continue };
            if h > cfg.decay_hops {
                continue;
            }
            let limit = base[u] * (1.0 - (1.0 - cfg.reg_cap_factor) * cfg.decay.powi(h as i32));
            for tau in 0..cfg.reg_duration.min(n_steps - t0) {
                let i = (t0 + tau) * n + u;
                cap[i] = cap[i].min(limit);
                let code = 1 + h;
                if reg_ids[i] == 0 || code < reg_ids[i] {
                    reg_ids[i] = code;
                }
            }
        }
    }

    for i in 0..values.len() {
        let v = (values[i] * mult[i]).min(cap[i]).max(1.0);
        let missing = cfg.missing_rate > 0.0 && rng.random::<f64>() < cfg.missing_rate;
        values[i] = if missing { 0.0 } else { v };
    }

    let meta = DatasetMeta {
        interval_minutes: cfg.interval_minutes,
        start_weekday: cfg.start_weekday,
        start_slot: cfg.start_slot,
        n_nodes: n,
        n_steps,
        acc_vocab: cfg.vocab(),
        reg_vocab: cfg.vocab(),
    };
    DatasetBundle::new(meta, Tensor::new(vec![n_steps, n], values)?, acc_ids, reg_ids, graph)
}
