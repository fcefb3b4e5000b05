//! Condition representation, factor generation, guided layer normalization
//! and modulated residuals.
//!
//! A factor generator maps the propagated condition `X^c` to
//! `[Δγ (D) | β (D) | α (1)]` per token. Its output layer starts at zero, so a
//! fresh generator yields `γ = 1 + Δγ = 1`, `β = 0` and `α = 0`: GLN reduces
//! to plain layer normalization and every modulated residual branch is closed.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{Ablation, ModelSettings};
use crate::error::{Error, Result};
use crate::graph::{propagate_var, PropagationOperator};
use crate::nn::Mlp;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// `X^c = [X^o ∥ L̃X^o ∥ … ∥ L̃ᴷX^o]`.
pub fn compute_condition(
    g: &mut Graph,
    x_o: Var,
    op: &PropagationOperator,
    k_hops: usize,
) -> Result<Var> {
    propagate_var(g, x_o, op, k_hops)
}

/// Per-token modulation factors, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct ConditionFactors {
    /// `[T, N, D]`
    pub gamma: Var,
    /// `[T, N, D]`
    pub beta: Var,
    /// `[T, N, 1]`
    pub alpha: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FactorGenerator {
    pub mlp: Mlp,
    pub d_model: usize,
}

impl FactorGenerator {
    pub fn new(store: &mut ParamStore, name: &str, settings: &ModelSettings, rng: &mut impl Rng) -> Self {
        let d = settings.d_model;
        Self {
            mlp: Mlp::zero_output(store, name, settings.cond_width(), d, 2 * d + 1, rng),
            d_model: d,
        }
    }

    pub fn input_width(&self) -> usize {
        self.mlp.hidden.d_in
    }
}

/// Splits the generator output into `(γ, β, α)`, honouring the factor
/// ablations (`γ = 1`, `β = 0`, `α = 1` when frozen).
pub fn generate_factors(
    g: &mut Graph,
    store: &ParamStore,
    gen: &FactorGenerator,
    x_c: Var,
    settings: &ModelSettings,
) -> Result<ConditionFactors> {
    let width = *g.shape(x_c).last().unwrap();
    if width != gen.input_width() {
        return Err(Error::dim("generate_factors", g.shape(x_c), &[gen.input_width()]));
    }
    let d = gen.d_model;
    let raw = gen.mlp.forward(g, store, x_c)?;
    let lead = g.shape(raw)[..g.shape(raw).len() - 1].to_vec();
    let constant = |g: &mut Graph, width: usize, value: f64| {
        let mut shape = lead.clone();
        shape.push(width);
        g.input(Tensor::filled(&shape, value))
    };
    let gamma = if settings.ablated(Ablation::NoGamma) {
        constant(g, d, 1.0)
    } else {
        let dg = g.slice(raw, 0, d)?;
        g.add_scalar(dg, 1.0)?
    };
    let beta = if settings.ablated(Ablation::NoBeta) {
        constant(g, d, 0.0)
    } else {
        g.slice(raw, d, d)?
    };
    let alpha = if settings.ablated(Ablation::NoAlpha) {
        constant(g, 1, 1.0)
    } else {
        g.slice(raw, 2 * d, 1)?
    };
    Ok(ConditionFactors { gamma, beta, alpha })
}

/// `γ ⊙ (x − μ)/σ + β` per token over the feature axis.
pub fn gln(g: &mut Graph, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    if g.shape(gamma) != g.shape(x) && g.shape(gamma).len() != 1 {
        return Err(Error::dim("gln", g.shape(x), g.shape(gamma)));
    }
    let n = g.normalize(x, eps)?;
    let scaled = g.mul(n, gamma)?;
    g.add(scaled, beta)
}

/// `x_in + α ⊙ branch`, with `α: [T, N, 1]` broadcast over features.
pub fn modulated_residual(g: &mut Graph, x_in: Var, branch: Var, alpha: Var) -> Result<Var> {
    if g.shape(x_in) != g.shape(branch) {
        return Err(Error::dim("modulated_residual", g.shape(x_in), g.shape(branch)));
    }
    let scaled = g.mul(branch, alpha)?;
    g.add(x_in, scaled)
}

/// Static-affine LayerNorm used by the `plain-ln` ablation.
#[derive(Debug, Clone, Copy)]
pub struct StaticNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl StaticNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, eps: f64) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        gln(g, x, gamma, beta, eps)
    }
}

/// Plain-tensor GLN, for inspection outside a graph.
pub fn gln_tensor(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    tensor::normalize_last_axis(x, eps)?.mul(gamma)?.add(beta)
}

/// The four terms of the expanded score `Q′K′ᵀ` with
/// `Q′ = γ⊙N_Q + β`, `K′ = γ⊙N_K + β`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTerms {
    /// `(γ⊙N_Q)(γ⊙N_K)ᵀ`, `[m, n]`
    pub scale: Tensor,
    /// `(γ⊙N_Q)βᵀ`, one value per query row, `[m, 1]`
    pub query_shift: Tensor,
    /// `β(γ⊙N_K)ᵀ`, one value per key row, `[1, n]`
    pub key_shift: Tensor,
    /// `ββᵀ`
    pub shift: f64,
}

impl ScoreTerms {
    /// Expands `(gq + β)(gk + β)ᵀ` where `gq = γ⊙N_Q` and `gk = γ⊙N_K` are
    /// already scaled.
    pub fn from_parts(gq: &Tensor, gk: &Tensor, beta: &Tensor) -> Result<Self> {
        let dk = gq.last_dim();
        if gq.ndim() != 2 || gk.ndim() != 2 || gk.last_dim() != dk || beta.shape() != [dk] {
            return Err(Error::dim("expanded_score", gq.shape(), gk.shape()));
        }
        let gk_t = gk.transpose_last()?;
        Ok(Self {
            scale: gq.matmul(&gk_t)?,
            query_shift: gq.matmul(&beta.reshape(&[dk, 1])?)?,
            key_shift: beta.reshape(&[1, dk])?.matmul(&gk_t)?,
            shift: beta.data().iter().map(|b| b * b).sum(),
        })
    }

    pub fn total(&self) -> Result<Tensor> {
        self.scale
            .add(&self.query_shift)?
            .add(&self.key_shift)?
            .add(&Tensor::scalar(self.shift))
    }
}

pub fn expanded_score_terms(
    q: &Tensor,
    k: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<ScoreTerms> {
    let dk = q.last_dim();
    if q.ndim() != 2 || k.ndim() != 2 || k.last_dim() != dk {
        return Err(Error::dim("expanded_score", q.shape(), k.shape()));
    }
    if gamma.shape() != [dk] || beta.shape() != [dk] {
        return Err(Error::dim("expanded_score", gamma.shape(), beta.shape()));
    }
    let gq = tensor::normalize_last_axis(q, eps)?.mul(gamma)?;
    let gk = tensor::normalize_last_axis(k, eps)?.mul(gamma)?;
    ScoreTerms::from_parts(&gq, &gk, beta)
}

/// Returns `(Q′K′ᵀ, expanded four-term sum)` for equality checks.
pub fn expanded_score_identity(
    q: &Tensor,
    k: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor)> {
    let q_mod = gln_tensor(q, gamma, beta, eps)?;
    let k_mod = gln_tensor(k, gamma, beta, eps)?;
    let lhs = q_mod.matmul(&k_mod.transpose_last()?)?;
    let rhs = expanded_score_terms(q, k, gamma, beta, eps)?.total()?;
    Ok((lhs, rhs))
}
