use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map `x · W + b` over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Uniform init in `±1/sqrt(d_in)`, bias zero.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[d_in, d_out], bound, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.affine(x, w, b)
    }
}

/// Two affine layers with a GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), d_in, d_hidden, rng),
            out: Linear::new(store, &format!("{name}.1"), d_hidden, d_out, rng),
        }
    }

    /// Like [`Mlp::new`] but with an all-zero output layer.
    pub fn zero_output(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), d_in, d_hidden, rng),
            out: Linear::zeros(store, &format!("{name}.1"), d_hidden, d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.out.forward(g, store, h)
    }
}
