//! Building blocks shared by the featurizer, the residual encoder and the
//! diffusion transformer.
//!
//! Layers only remember [`ParamId`]s; values live in a [`ParamStore`], so the
//! same layer runs in `f32` for training and `f64` for gradient checks.

use std::sync::Arc;

use crate::error::Result;
use crate::numerics::{
    AttnLayout, Graph, ParamId, ParamStore, Real, Rng, RotaryTable, Tensor, Var,
};

/// A tape bound to the store its parameters come from.
pub struct Session<'a, T: Real = f32> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self { g, store }
    }

    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        self.g.param(self.store, id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Fan(f64),
    Normal(f64),
    Zeros,
    Ones,
}

pub fn init_param<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut Rng,
) -> Result<ParamId> {
    let n: usize = shape.iter().product();
    let t = match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, T::one()),
        Init::Normal(std) => Tensor::new(
            shape.to_vec(),
            rng.normal_vec::<f64>(n)
                .iter()
                .map(|&x| T::lit(x * std))
                .collect(),
        )?,
        Init::Fan(gain) => {
            let std = gain / (fan_in.max(1) as f64).sqrt();
            Tensor::new(
                shape.to_vec(),
                rng.normal_vec::<f64>(n)
                    .iter()
                    .map(|&x| T::lit(x * std))
                    .collect(),
            )?
        }
    };
    store.add(name, t)
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = init_param(
            store,
            &format!("{name}.w"),
            &[in_dim, out_dim],
            in_dim,
            init,
            rng,
        )?;
        let b = if bias {
            Some(init_param(
                store,
                &format!("{name}.b"),
                &[out_dim],
                in_dim,
                Init::Zeros,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.p(self.w)?;
        let y = s.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.p(b)?;
                s.g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub weight: Option<ParamId>,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        affine: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = if affine {
            Some(init_param(
                store,
                &format!("{name}.g"),
                &[dim],
                dim,
                Init::Ones,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self { weight, eps: 1e-6 })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = self.weight.map(|w| s.p(w)).transpose()?;
        s.g.rms_norm(x, w, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(
                store,
                &format!("{name}.fc1"),
                dim,
                hidden,
                true,
                Init::Fan(1.0),
                rng,
            )?,
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                hidden,
                dim,
                true,
                Init::Fan(1.0),
                rng,
            )?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.g.gelu(h)?;
        self.fc2.forward(s, h)
    }
}

/// Multi-head self-attention with grouped key/value heads over packed sequences.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl SelfAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        kv_heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let head_dim = dim / heads;
        let kv = kv_heads * head_dim;
        Ok(Self {
            q: Linear::new(
                store,
                &format!("{name}.q"),
                dim,
                dim,
                false,
                Init::Fan(1.0),
                rng,
            )?,
            k: Linear::new(
                store,
                &format!("{name}.k"),
                dim,
                kv,
                false,
                Init::Fan(1.0),
                rng,
            )?,
            v: Linear::new(
                store,
                &format!("{name}.v"),
                dim,
                kv,
                false,
                Init::Fan(1.0),
                rng,
            )?,
            o: Linear::new(
                store,
                &format!("{name}.o"),
                dim,
                dim,
                false,
                Init::Fan(1.0),
                rng,
            )?,
            heads,
            kv_heads,
            head_dim,
        })
    }

    pub fn layout(&self, segments: Vec<(usize, usize)>) -> Arc<AttnLayout> {
        Arc::new(AttnLayout {
            segments,
            heads: self.heads,
            kv_heads: self.kv_heads,
            head_dim: self.head_dim,
        })
    }

    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        x: Var,
        layout: &Arc<AttnLayout>,
        rope: Option<&Arc<RotaryTable<T>>>,
    ) -> Result<Var> {
        let mut q = self.q.forward(s, x)?;
        let mut k = self.k.forward(s, x)?;
        let v = self.v.forward(s, x)?;
        if let Some(table) = rope {
            q = s.g.rotary(q, table.clone())?;
            k = s.g.rotary(k, table.clone())?;
        }
        let a = s.g.attention(q, k, v, layout.clone())?;
        self.o.forward(s, a)
    }
}

/// Pre-norm transformer block without conditioning.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: RmsNorm,
    pub attn: SelfAttention,
    pub norm2: RmsNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: RmsNorm::new(store, &format!("{name}.norm1"), dim, true, rng)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, heads, rng)?,
            norm2: RmsNorm::new(store, &format!("{name}.norm2"), dim, true, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 4 * dim, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        x: Var,
        layout: &Arc<AttnLayout>,
        rope: Option<&Arc<RotaryTable<T>>>,
    ) -> Result<Var> {
        let h = self.norm1.forward(s, x)?;
        let h = self.attn.forward(s, h, layout, rope)?;
        let x = s.g.add(x, h)?;
        let h = self.norm2.forward(s, x)?;
        let h = self.mlp.forward(s, h)?;
        s.g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check_params;

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = Rng::new(11);
        let mut store = ParamStore::<f64>::new();
        let block = Block::new(&mut store, "b", 8, 2, &mut rng).unwrap();
        let x = Tensor::<f64>::new(vec![5, 8], rng.normal_vec(40)).unwrap();
        let w = Tensor::<f64>::new(vec![5, 8], rng.normal_vec(40)).unwrap();
        let err = finite_diff_check_params(
            |g, st| {
                let mut s = Session::new(g, st);
                let xv = s.g.constant(x.clone())?;
                let layout = block.attn.layout(vec![(0, 3), (3, 2)]);
                let y = block.forward(&mut s, xv, &layout, None)?;
                let wv = s.g.constant(w.clone())?;
                let p = s.g.mul(y, wv)?;
                s.g.sum(p)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }
}
