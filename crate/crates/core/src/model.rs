//! The full conditional spatiotemporal block stack, readout, parameter
//! accounting and the FLOPs estimate.
//!
//! Per layer, with input `X^o`:
//!
//! ```text
//! X^c          = propagate(X^o, L̃, K)
//! [γc, βc, αc] = MLP_c(X^c)          [γf, βf, αf] = MLP_f(X^c)
//! X^gln        = GLN(X^o, γc, βc)
//! X^att        = fuse(spatial(Q,K,V) ∥ temporal(Q,K,V)),  (Q,K,V) from X^gln and X^c
//! X^res        = X^o + αc ⊙ X^att
//! X^ff         = FeedForward(GLN(X^res, γf, βf))
//! out          = X^res + αf ⊙ X^ff
//! ```
//!
//! The last layer's output `[T, N, D]` is flattened per node and mapped to
//! `T′` values by a shared affine readout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionConfig, AttentionParams};
use crate::autodiff::{Graph, Var};
use crate::conditioning::{self, FactorGenerator, StaticNorm};
use crate::config::{Ablation, ConFormerConfig};
use crate::embeddings::{self, CalendarIndexer, EmbeddingTables, WindowInput};
use crate::error::{Result, StageExt};
use crate::graph::PropagationOperator;
use crate::nn::{Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub cond_gen: FactorGenerator,
    pub ff_gen: FactorGenerator,
    pub attention: AttentionParams,
    pub feedforward: Mlp,
    /// Present only under the `plain-ln` ablation.
    pub static_norms: Option<(StaticNorm, StaticNorm)>,
}

/// Model parameters plus the layout that addresses them.
#[derive(Debug, Clone)]
pub struct ConFormer {
    pub cfg: ConFormerConfig,
    pub params: ParamStore,
    pub embed: EmbeddingTables,
    pub layers: Vec<LayerParams>,
    pub readout: Linear,
}

/// Whether dropout is active. Training masks are drawn from the given RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Fused input embedding `X^o`.
    pub embedding: Var,
    /// Output of the last layer, before the readout.
    pub hidden: Var,
    /// Normalized forecast `[T′, N, 1]`.
    pub prediction: Var,
}

impl ConFormer {
    pub fn new(cfg: ConFormerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let m = &cfg.model;
        let embed = EmbeddingTables::new(&mut params, &cfg, &mut rng);
        let att_cfg = AttentionConfig::from_settings(m);
        let layers = (0..m.n_layers)
            .map(|l| {
                let name = format!("layer{l}");
                let cond_gen = FactorGenerator::new(&mut params, &format!("{name}.cond_factors"), m, &mut rng);
                let ff_gen = FactorGenerator::new(&mut params, &format!("{name}.ff_factors"), m, &mut rng);
                let attention = AttentionParams::new(&mut params, &format!("{name}.attention"), att_cfg, &mut rng);
                let feedforward = Mlp::new(
                    &mut params,
                    &format!("{name}.feedforward"),
                    m.d_model,
                    4 * m.d_model,
                    m.d_model,
                    &mut rng,
                );
                let static_norms = m.ablated(Ablation::PlainLn).then(|| {
                    (
                        StaticNorm::new(&mut params, &format!("{name}.norm_att"), m.d_model),
                        StaticNorm::new(&mut params, &format!("{name}.norm_ff"), m.d_model),
                    )
                });
                LayerParams {
                    cond_gen,
                    ff_gen,
                    attention,
                    feedforward,
                    static_norms,
                }
            })
            .collect();
        let readout = Linear::new(&mut params, "readout", m.t_in * m.d_model, m.t_out, &mut rng);
        Ok(Self {
            cfg,
            params,
            embed,
            layers,
            readout,
        })
    }

    /// Exact number of scalar learnables.
    pub fn count_params(&self) -> usize {
        self.params.count_scalars()
    }

    fn dropout(&self, g: &mut Graph, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let p = self.cfg.model.dropout;
        match mode {
            Mode::Train(rng) if p > 0.0 => {
                let keep = 1.0 - p;
                let mask = Tensor::from_fn(g.shape(x), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = g.input(mask);
                g.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    fn layer(
        &self,
        g: &mut Graph,
        layer: &LayerParams,
        x_o: Var,
        op: &PropagationOperator,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let m = &self.cfg.model;
        let store = &self.params;
        let x_c = conditioning::compute_condition(g, x_o, op, m.hops).stage("graph propagation")?;
        let fc = conditioning::generate_factors(g, store, &layer.cond_gen, x_c, m).stage("condition factors")?;
        let ff = conditioning::generate_factors(g, store, &layer.ff_gen, x_c, m).stage("feedforward factors")?;

        let x_gln = match &layer.static_norms {
            Some((norm, _)) => norm.forward(g, store, x_o, m.eps),
            None => conditioning::gln(g, x_o, fc.gamma, fc.beta, m.eps),
        }
        .stage("guided layer norm")?;

        let att = &layer.attention;
        let (q, k, v) = attention::conditional_qkv(g, store, att, x_gln, x_c).stage("conditional qkv")?;
        let zeros = |g: &mut Graph| g.input(Tensor::zeros(g.shape(x_o)));
        let x_sp = if m.ablated(Ablation::NoSpatial) {
            zeros(g)
        } else {
            attention::spatial_attention(g, q, k, v, m.n_heads).stage("spatial attention")?
        };
        let x_te = if m.ablated(Ablation::NoTemporal) {
            zeros(g)
        } else {
            attention::temporal_attention(g, q, k, v, m.n_heads).stage("temporal attention")?
        };
        let x_att = attention::fuse(g, store, &att.fuse, x_sp, x_te).stage("attention fusion")?;
        let x_att = self.dropout(g, x_att, mode)?;
        let x_res = conditioning::modulated_residual(g, x_o, x_att, fc.alpha).stage("attention residual")?;

        let x_gln2 = match &layer.static_norms {
            Some((_, norm)) => norm.forward(g, store, x_res, m.eps),
            None => conditioning::gln(g, x_res, ff.gamma, ff.beta, m.eps),
        }
        .stage("feedforward norm")?;
        let x_ff = layer.feedforward.forward(g, store, x_gln2).stage("feedforward")?;
        let x_ff = self.dropout(g, x_ff, mode)?;
        conditioning::modulated_residual(g, x_res, x_ff, ff.alpha).stage("feedforward residual")
    }

    /// Maps `[T, N, D]` to `[T′, N, 1]` with one affine map shared by all nodes.
    pub fn readout(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let m = &self.cfg.model;
        let n = self.cfg.n_nodes;
        let per_node = g.permute(hidden, &[1, 0, 2])?;
        let flat = g.reshape(per_node, &[n, m.t_in * m.d_model])?;
        let y = self.readout.forward(g, &self.params, flat)?; // [N, T′]
        let y = g.permute(y, &[1, 0])?;
        g.reshape(y, &[m.t_out, n, 1])
    }

    pub fn embed(&self, g: &mut Graph, cal: &CalendarIndexer, input: &WindowInput) -> Result<Var> {
        embeddings::embed_all(g, &self.params, &self.embed, &self.cfg, cal, input)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        input: &WindowInput,
        cal: &CalendarIndexer,
        op: &PropagationOperator,
        mut mode: Mode<'_>,
    ) -> Result<ForwardOutput> {
        let embedding = self.embed(g, cal, input).stage("input embedding")?;
        let mut hidden = embedding;
        for layer in &self.layers {
            hidden = self.layer(g, layer, hidden, op, &mut mode)?;
        }
        let prediction = self.readout(g, hidden).stage("readout")?;
        Ok(ForwardOutput {
            embedding,
            hidden,
            prediction,
        })
    }

    /// Normalized forecast `[T′, N, 1]` without recording gradients for reuse.
    pub fn predict(&self, input: &WindowInput, cal: &CalendarIndexer, op: &PropagationOperator) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input, cal, op, Mode::Eval)?;
        Ok(g.value(out.prediction).clone())
    }
}

/// `K|ℰ|D + (T·N²·D + N·T²·D) + N·T·D²`.
pub fn flops_formula(k_hops: u64, n_edges: u64, d: u64, n: u64, t: u64) -> u64 {
    k_hops * n_edges * d + (t * n * n * d + n * t * t * d) + n * t * d * d
}

/// FLOPs estimate for one block at this configuration, with `D = D_model`
/// and `T` the input window length.
pub fn estimate_flops(cfg: &ConFormerConfig, n_edges: usize) -> u64 {
    let m = &cfg.model;
    flops_formula(
        m.hops as u64,
        n_edges as u64,
        m.d_model as u64,
        cfg.n_nodes as u64,
        m.t_in as u64,
    )
}
