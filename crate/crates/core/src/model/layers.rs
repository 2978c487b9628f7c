//! Linear maps, feed-forward blocks, layer norm and multi-head attention.

use super::params::{Owner, ParamId, ParamKind, ParamStore};
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights ~ N(0, 1/d_in), zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        owner: Owner,
        kind: ParamKind,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        Self::with_init(store, name, owner, kind, d_in, d_out, bias, Tensor::randn(&[d_in, d_out], std, rng))
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        owner: Owner,
        kind: ParamKind,
        d_in: usize,
        d_out: usize,
        bias: bool,
        w: Tensor,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), owner.clone(), kind, w)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), owner, kind, Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    /// Registers a copy of `src` under a new name.
    pub fn copy_of(store: &mut ParamStore, src: &Linear, name: &str, owner: Owner, kind: ParamKind) -> Result<Self> {
        let mut w = store.tensor(src.w).clone();
        w.set_requires_grad(false);
        let w = store.add(format!("{name}.w"), owner.clone(), kind, w)?;
        let b = match src.b {
            Some(b) => {
                let mut t = store.tensor(b).clone();
                t.set_requires_grad(false);
                Some(store.add(format!("{name}.b"), owner, kind, t)?)
            }
            None => None,
        };
        Ok(Self {
            w,
            b,
            d_in: src.d_in,
            d_out: src.d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(g, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = store.bind(g, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.b);
        v
    }
}

/// `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub w1: Linear,
    pub w2: Linear,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        owner: Owner,
        kind: ParamKind,
        d_model: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(store, &format!("{name}.w1"), owner.clone(), kind, d_model, d_ff, true, rng)?,
            w2: Linear::new(store, &format!("{name}.w2"), owner, kind, d_ff, d_model, true, rng)?,
        })
    }

    pub fn copy_of(store: &mut ParamStore, src: &Ffn, name: &str, owner: Owner, kind: ParamKind) -> Result<Self> {
        Ok(Self {
            w1: Linear::copy_of(store, &src.w1, &format!("{name}.w1"), owner.clone(), kind)?,
            w2: Linear::copy_of(store, &src.w2, &format!("{name}.w2"), owner, kind)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.w1.forward(g, store, x)?;
        let h = g.relu(h);
        self.w2.forward(g, store, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.w1.ids();
        v.extend(self.w2.ids());
        v
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Owner::Shared, ParamKind::Base, Tensor::full(&[d], 1.0))?,
            bias: store.add(format!("{name}.bias"), Owner::Shared, ParamKind::Base, Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = store.bind(g, self.gain);
        let bias = store.bind(g, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        let mk = |store: &mut ParamStore, part: &str, rng: &mut R| {
            Linear::new(store, &format!("{name}.{part}"), Owner::Shared, ParamKind::Base, d_model, d_model, true, rng)
        };
        Ok(Self {
            q: mk(store, "q", rng)?,
            k: mk(store, "k", rng)?,
            v: mk(store, "v", rng)?,
            o: mk(store, "o", rng)?,
            n_heads,
        })
    }

    /// Scaled dot-product attention. `q_in: [B, Tq, d]`, `kv_in: [B, Tk, d]`;
    /// `mask` has `B·Tq·Tk` entries, `true` meaning "may not attend".
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_in: Var, kv_in: Var, mask: &[bool]) -> Result<Var> {
        let qs = g.shape(q_in).to_vec();
        let ks = g.shape(kv_in).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
            return dim_err(format!("attention inputs {qs:?} and {ks:?} are incompatible"));
        }
        let (b, tq, d) = (qs[0], qs[1], qs[2]);
        let tk = ks[1];
        let h = self.n_heads;
        if d % h != 0 {
            return dim_err(format!("d_model {d} cannot be split into {h} heads"));
        }
        let dh = d / h;
        if mask.len() != b * tq * tk {
            return dim_err(format!("attention mask has {} entries, expected {}", mask.len(), b * tq * tk));
        }
        let q = self.q.forward(g, store, q_in)?;
        let q = g.reshape(q, &[b, tq, h, dh])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = self.k.forward(g, store, kv_in)?;
        let k = g.reshape(k, &[b, tk, h, dh])?;
        let kt = g.permute(k, &[0, 2, 3, 1])?;
        let v = self.v.forward(g, store, kv_in)?;
        let v = g.reshape(v, &[b, tk, h, dh])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;

        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let mut full = Vec::with_capacity(b * h * tq * tk);
        for bi in 0..b {
            let m = &mask[bi * tq * tk..(bi + 1) * tq * tk];
            for _ in 0..h {
                full.extend_from_slice(m);
            }
        }
        let scores = g.masked_fill(scores, &full, f64::NEG_INFINITY)?;
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, tq, d])?;
        self.o.forward(g, store, ctx)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.ids()).collect()
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
