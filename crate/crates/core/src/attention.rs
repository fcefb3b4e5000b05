//! Conditional Q/K/V projections and multi-head attention along the node axis
//! (per timestep) and the time axis (per node).

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelSettings;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_head: usize,
    pub cond_width: usize,
}

impl AttentionConfig {
    pub fn from_settings(s: &ModelSettings) -> Self {
        Self {
            n_heads: s.n_heads,
            d_head: s.d_head(),
            cond_width: s.cond_width(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }
}

/// Projections of one attention block. Only K and V see the condition.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub fuse: Linear,
    pub cfg: AttentionConfig,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model();
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d + cfg.cond_width, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d + cfg.cond_width, d, rng),
            fuse: Linear::new(store, &format!("{name}.fuse"), 2 * d, d, rng),
            cfg,
        }
    }
}

/// `Q = X·W_Q`, `K = (X ∥ X^c)·W_K`, `V = (X ∥ X^c)·W_V`.
pub fn conditional_qkv(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    x_gln: Var,
    x_c: Var,
) -> Result<(Var, Var, Var)> {
    let d = p.cfg.d_model();
    let (xs, cs) = (g.shape(x_gln), g.shape(x_c));
    if xs.last() != Some(&d) || cs.last() != Some(&p.cfg.cond_width) || xs[..xs.len() - 1] != cs[..cs.len() - 1] {
        return Err(Error::dim("conditional_qkv", xs, cs));
    }
    let q = p.query.forward(g, store, x_gln)?;
    let joined = g.concat(&[x_gln, x_c])?;
    let k = p.key.forward(g, store, joined)?;
    let v = p.value.forward(g, store, joined)?;
    Ok((q, k, v))
}

fn check_qkv(g: &Graph, q: Var, k: Var, v: Var, n_heads: usize) -> Result<(usize, usize, usize)> {
    let s = g.shape(q).to_vec();
    if s.len() != 3 || g.shape(k) != s.as_slice() || g.shape(v) != s.as_slice() || !s[2].is_multiple_of(n_heads) {
        return Err(Error::dim("attention", &s, g.shape(k)));
    }
    Ok((s[0], s[1], s[2]))
}

/// Softmax attention over axis 2 of `[B0, B1, L, D]`-shaped heads.
fn attend(g: &mut Graph, q: Var, k_t: Var, v: Var, d_head: usize) -> Result<Var> {
    let scores = g.matmul(q, k_t)?;
    let scores = g.scale(scores, 1.0 / (d_head as f64).sqrt())?;
    let weights = g.softmax(scores)?;
    g.matmul(weights, v)
}

/// Per timestep and head: `softmax(Q_t K_tᵀ/√d) V_t` over the node axis.
pub fn spatial_attention(g: &mut Graph, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
    let (t, n, d) = check_qkv(g, q, k, v, n_heads)?;
    let dh = d / n_heads;
    let split = [t, n, n_heads, dh];
    let q4 = g.reshape(q, &split)?;
    let k4 = g.reshape(k, &split)?;
    let v4 = g.reshape(v, &split)?;
    let qh = g.permute(q4, &[0, 2, 1, 3])?; // [T,H,N,dh]
    let kh = g.permute(k4, &[0, 2, 3, 1])?; // [T,H,dh,N]
    let vh = g.permute(v4, &[0, 2, 1, 3])?;
    let out = attend(g, qh, kh, vh, dh)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, &[t, n, d])
}

/// Per node and head: `softmax(Q_n K_nᵀ/√d) V_n` over the time axis.
pub fn temporal_attention(g: &mut Graph, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
    let (t, n, d) = check_qkv(g, q, k, v, n_heads)?;
    let dh = d / n_heads;
    let split = [t, n, n_heads, dh];
    let q4 = g.reshape(q, &split)?;
    let k4 = g.reshape(k, &split)?;
    let v4 = g.reshape(v, &split)?;
    let qh = g.permute(q4, &[1, 2, 0, 3])?; // [N,H,T,dh]
    let kh = g.permute(k4, &[1, 2, 3, 0])?; // [N,H,dh,T]
    let vh = g.permute(v4, &[1, 2, 0, 3])?;
    let out = attend(g, qh, kh, vh, dh)?;
    let out = g.permute(out, &[2, 0, 1, 3])?;
    g.reshape(out, &[t, n, d])
}

/// `fuse(X^Sp ∥ X^Te)` back to `D_model`.
pub fn fuse(g: &mut Graph, store: &ParamStore, fuse: &Linear, x_sp: Var, x_te: Var) -> Result<Var> {
    if g.shape(x_sp) != g.shape(x_te) {
        return Err(Error::dim("fuse", g.shape(x_sp), g.shape(x_te)));
    }
    let cat = g.concat(&[x_sp, x_te])?;
    fuse.forward(g, store, cat)
}
