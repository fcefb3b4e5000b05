//! Input embedding: projected traffic values, incident lookups, calendar
//! lookups and the learnable spatiotemporal table, concatenated and fused.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{Ablation, ConFormerConfig};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const MINUTES_PER_DAY: usize = 1440;

/// Maps absolute step indices to (day-of-week, time-of-day slot).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalendarIndexer {
    steps_per_day: usize,
    start_weekday: usize,
    start_slot: usize,
}

impl CalendarIndexer {
    pub fn new(interval_minutes: usize, start_weekday: usize, start_slot: usize) -> Result<Self> {
        if interval_minutes == 0 || !MINUTES_PER_DAY.is_multiple_of(interval_minutes) {
            return Err(Error::Validation(format!(
                "interval of {interval_minutes} minutes does not divide a day"
            )));
        }
        Self::with_steps(MINUTES_PER_DAY / interval_minutes, start_weekday, start_slot)
    }

    pub fn with_steps(steps_per_day: usize, start_weekday: usize, start_slot: usize) -> Result<Self> {
        if steps_per_day == 0 || start_weekday > 6 || start_slot >= steps_per_day {
            return Err(Error::Validation(format!(
                "invalid calendar: steps_per_day={steps_per_day}, weekday={start_weekday}, slot={start_slot}"
            )));
        }
        Ok(Self {
            steps_per_day,
            start_weekday,
            start_slot,
        })
    }

    pub fn steps_per_day(&self) -> usize {
        self.steps_per_day
    }

    /// `(dow in 0..7, tod in 0..steps_per_day)` for absolute step `t`.
    pub fn index(&self, t: usize) -> (usize, usize) {
        let slot = self.start_slot + t;
        let tod = slot % self.steps_per_day;
        let dow = (self.start_weekday + slot / self.steps_per_day) % 7;
        (dow, tod)
    }
}

/// One model input window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowInput {
    /// Normalized observations `[T, N, D_in]`.
    pub x: Tensor,
    /// Accident ids, row-major `[T, N]`.
    pub acc_ids: Vec<usize>,
    /// Regulation ids, row-major `[T, N]`.
    pub reg_ids: Vec<usize>,
    /// Absolute step index of the first input row.
    pub t0: usize,
}

#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub data_proj: Linear,
    pub acc: ParamId,
    pub reg: ParamId,
    pub dow: ParamId,
    pub tod: ParamId,
    pub adaptive: ParamId,
    pub fuse: Mlp,
}

fn lookup_table(
    store: &mut ParamStore,
    name: &str,
    vocab: usize,
    dim: usize,
    zero_first_row: bool,
    rng: &mut impl Rng,
) -> ParamId {
    let mut t = Tensor::from_fn(&[vocab, dim], |_| rng.random_range(-0.1..=0.1));
    if zero_first_row {
        t.data_mut()[..dim].fill(0.0);
    }
    store.add(name, t)
}

impl EmbeddingTables {
    pub fn new(store: &mut ParamStore, cfg: &ConFormerConfig, rng: &mut impl Rng) -> Self {
        let m = &cfg.model;
        let data_proj = Linear::new(store, "embed.data", m.d_in, m.d_data, rng);
        let acc = lookup_table(store, "embed.acc", cfg.acc_vocab, m.d_acc, true, rng);
        let reg = lookup_table(store, "embed.reg", cfg.reg_vocab, m.d_reg, true, rng);
        let dow = lookup_table(store, "embed.dow", 7, m.d_dow, false, rng);
        let tod = lookup_table(store, "embed.tod", cfg.steps_per_day, m.d_tod, false, rng);
        let adaptive = store.add(
            "embed.adaptive",
            Tensor::from_fn(&[m.t_in, cfg.n_nodes, m.d_stae], |_| rng.random_range(-0.1..=0.1)),
        );
        let fuse = Mlp::new(store, "embed.fuse", m.embed_width(), m.d_model, m.d_model, rng);
        Self {
            data_proj,
            acc,
            reg,
            dow,
            tod,
            adaptive,
            fuse,
        }
    }
}

pub fn index_time(t: usize, cal: &CalendarIndexer) -> (usize, usize) {
    cal.index(t)
}

fn check_ids(ids: &[usize], vocab: usize, n_nodes: usize, what: &str) -> Result<()> {
    for (k, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::Validation(format!(
                "{what} id {id} at (t={}, n={}) outside vocabulary of {vocab}",
                k / n_nodes,
                k % n_nodes
            )));
        }
    }
    Ok(())
}

/// The pre-fusion concatenation `X^data ∥ X^acc ∥ X^reg ∥ X^dow ∥ X^tod ∥ X^stae`.
pub fn embed_concat(
    g: &mut Graph,
    store: &ParamStore,
    tables: &EmbeddingTables,
    cfg: &ConFormerConfig,
    cal: &CalendarIndexer,
    input: &WindowInput,
) -> Result<Var> {
    let m = &cfg.model;
    let (t_len, n) = (m.t_in, cfg.n_nodes);
    if input.x.shape() != [t_len, n, m.d_in] {
        return Err(Error::dim("embed_all", input.x.shape(), &[t_len, n, m.d_in]));
    }
    if input.acc_ids.len() != t_len * n || input.reg_ids.len() != t_len * n {
        return Err(Error::dim(
            "embed_all ids",
            &[input.acc_ids.len(), input.reg_ids.len()],
            &[t_len * n],
        ));
    }
    check_ids(&input.acc_ids, cfg.acc_vocab, n, "accident")?;
    check_ids(&input.reg_ids, cfg.reg_vocab, n, "regulation")?;

    let none = vec![0usize; t_len * n];
    let acc_ids = if m.ablated(Ablation::NoAccident) { &none } else { &input.acc_ids };
    let reg_ids = if m.ablated(Ablation::NoRegulation) { &none } else { &input.reg_ids };

    let mut dow_ids = Vec::with_capacity(t_len * n);
    let mut tod_ids = Vec::with_capacity(t_len * n);
    for t in 0..t_len {
        let (dow, tod) = cal.index(input.t0 + t);
        dow_ids.extend(std::iter::repeat_n(dow, n));
        tod_ids.extend(std::iter::repeat_n(tod, n));
    }

    let x = g.input(input.x.clone());
    let x_data = tables.data_proj.forward(g, store, x)?;
    let lead = [t_len, n];
    let acc_t = g.param(store, tables.acc);
    let x_acc = g.gather(acc_t, acc_ids, &lead)?;
    let reg_t = g.param(store, tables.reg);
    let x_reg = g.gather(reg_t, reg_ids, &lead)?;
    let dow_t = g.param(store, tables.dow);
    let x_dow = g.gather(dow_t, &dow_ids, &lead)?;
    let tod_t = g.param(store, tables.tod);
    let x_tod = g.gather(tod_t, &tod_ids, &lead)?;
    let x_stae = g.param(store, tables.adaptive);
    g.concat(&[x_data, x_acc, x_reg, x_dow, x_tod, x_stae])
}

/// Fused input embedding `X^o: [T, N, D_model]`.
pub fn embed_all(
    g: &mut Graph,
    store: &ParamStore,
    tables: &EmbeddingTables,
    cfg: &ConFormerConfig,
    cal: &CalendarIndexer,
    input: &WindowInput,
) -> Result<Var> {
    let cat = embed_concat(g, store, tables, cfg, cal, input)?;
    tables.fuse.forward(g, store, cat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelSettings;
    use crate::tensor::slice_last_axis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn steps_per_day_from_interval() {
        assert_eq!(CalendarIndexer::new(5, 0, 0).unwrap().steps_per_day(), 288);
        assert_eq!(CalendarIndexer::new(10, 0, 0).unwrap().steps_per_day(), 144);
        assert!(CalendarIndexer::new(7, 0, 0).is_err());
    }

    #[test]
    fn wrap_advances_day() {
        let cal = CalendarIndexer::new(5, 3, 287).unwrap();
        assert_eq!(index_time(0, &cal), (3, 287));
        assert_eq!(index_time(1, &cal), (4, 0));
        let cal = CalendarIndexer::new(5, 6, 287).unwrap();
        assert_eq!(index_time(1, &cal), (0, 0));
    }

    fn tiny() -> (ConFormerConfig, ParamStore, EmbeddingTables, CalendarIndexer) {
        let model = ModelSettings {
            t_in: 3,
            t_out: 2,
            d_model: 8,
            n_heads: 2,
            ..ModelSettings::default()
        };
        let cfg = ConFormerConfig::new(model, 2, 4, 3, 2).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tables = EmbeddingTables::new(&mut store, &cfg, &mut rng);
        let cal = CalendarIndexer::with_steps(4, 0, 0).unwrap();
        (cfg, store, tables, cal)
    }

    fn input(t0: usize) -> WindowInput {
        WindowInput {
            x: Tensor::from_fn(&[3, 2, 1], |i| i as f64 * 0.1),
            acc_ids: vec![0; 6],
            reg_ids: vec![0; 6],
            t0,
        }
    }

    #[test]
    fn concat_width_and_zero_accident_block() {
        let (cfg, store, tables, cal) = tiny();
        let mut g = Graph::new();
        let c = embed_concat(&mut g, &store, &tables, &cfg, &cal, &input(0)).unwrap();
        let m = &cfg.model;
        assert_eq!(g.shape(c), &[3, 2, m.embed_width()]);
        let acc = slice_last_axis(g.value(c), m.d_data, m.d_acc).unwrap();
        assert!(acc.data().iter().all(|&v| v == 0.0));
        let out = embed_all(&mut g, &store, &tables, &cfg, &cal, &input(0)).unwrap();
        assert_eq!(g.shape(out), &[3, 2, 8]);
    }

    #[test]
    fn same_time_of_day_one_day_apart() {
        let (cfg, store, tables, cal) = tiny();
        let m = &cfg.model;
        let mut g = Graph::new();
        let a = embed_concat(&mut g, &store, &tables, &cfg, &cal, &input(1)).unwrap();
        let b = embed_concat(&mut g, &store, &tables, &cfg, &cal, &input(1 + 4)).unwrap();
        let dow_at = m.d_data + m.d_acc + m.d_reg;
        let tod_at = dow_at + m.d_dow;
        let tod_a = slice_last_axis(g.value(a), tod_at, m.d_tod).unwrap();
        let tod_b = slice_last_axis(g.value(b), tod_at, m.d_tod).unwrap();
        assert_eq!(tod_a, tod_b);
        let dow_a = slice_last_axis(g.value(a), dow_at, m.d_dow).unwrap();
        let dow_b = slice_last_axis(g.value(b), dow_at, m.d_dow).unwrap();
        assert_ne!(dow_a, dow_b);
    }

    #[test]
    fn out_of_vocabulary_names_position() {
        let (cfg, store, tables, cal) = tiny();
        let mut inp = input(0);
        inp.acc_ids[3] = 9;
        let mut g = Graph::new();
        let err = embed_all(&mut g, &store, &tables, &cfg, &cal, &inp).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("t=1") && msg.contains("n=1") && msg.contains("id 9"), "{msg}");
    }
}
