use rand::Rng;

use super::{AttentionSpec, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), Tensor::randn(&[in_dim, out_dim], std, rng))?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(&format!("{name}.weight"), Tensor::full(&[dim], S::one()))?,
            beta: store.add(&format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Position-wise feed-forward block: `Linear → GELU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        hidden: usize,
        out: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, hidden, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out, true)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Two-layer GELU classifier head.
pub type Mlp = FeedForward;

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {d} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, true)?,
            // A key bias shifts every score in a row equally, so it would
            // never receive a gradient.
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, false)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, true)?,
            o: Linear::new(store, rng, &format!("{name}.o"), d, d, true)?,
            heads,
        })
    }

    /// `q_in: [batch·q_len, d]`, `kv_in: [batch·k_len, d]`; `bias` is
    /// `[heads, q_len, k_len]` and is added to the scaled scores.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        q_in: Var,
        kv_in: Var,
        batch: usize,
        key_mask: Option<Vec<bool>>,
        causal: bool,
        bias: Option<Var>,
    ) -> Result<Var> {
        let q_len = g.value(q_in).rows() / batch.max(1);
        let k_len = g.value(kv_in).rows() / batch.max(1);
        let q = self.q.forward(g, store, q_in)?;
        let k = self.k.forward(g, store, kv_in)?;
        let v = self.v.forward(g, store, kv_in)?;
        let spec = AttentionSpec {
            batch,
            q_len,
            k_len,
            heads: self.heads,
            key_mask,
            causal,
        };
        let ctx = g.attention(q, k, v, bias, spec)?;
        self.o.forward(g, store, ctx)
    }
}
