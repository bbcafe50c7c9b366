//! Parameterised layers shared by every module.
//!
//! Layers hold only [`ParamId`]s; values live in a [`ParamStore`], so one
//! model definition runs against stores of any precision.

use dynprompt_autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Registers freshly initialised parameters under dotted names.
pub struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn add(&mut self, name: &str, t: Tensor<f32>) -> Result<ParamId> {
        Ok(self.store.add(name, t)?)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound) as f32).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<ParamId> {
        self.add(name, Tensor::full(shape.to_vec(), value))
    }

    pub fn tensor(&mut self, name: &str, t: Tensor<f32>) -> Result<ParamId> {
        self.add(name, t)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = init.uniform(&join(name, "w"), &[in_dim, out_dim], bound)?;
        let b = Some(init.constant(&join(name, "b"), &[out_dim], 0.0)?);
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn without_bias(init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = init.uniform(&join(name, "w"), &[in_dim, out_dim], bound)?;
        Ok(Self { w, b: None, in_dim, out_dim })
    }

    /// Zero weight and bias: the layer starts out contributing nothing.
    pub fn zeroed(init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = init.constant(&join(name, "w"), &[in_dim, out_dim], 0.0)?;
        let b = Some(init.constant(&join(name, "b"), &[out_dim], 0.0)?);
        Ok(Self { w, b, in_dim, out_dim })
    }

    /// `x [R, in] -> [R, out]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(s, b);
                Ok(g.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Layer normalisation over the last axis with a learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        Ok(Self { gamma: init.constant(&join(name, "gamma"), &[dim], 1.0)?, beta: init.constant(&join(name, "beta"), &[dim], 0.0)? })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.normalize_rows(x, 1e-5)?;
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        let y = g.mul_row(n, gamma)?;
        Ok(g.add_row(y, beta)?)
    }
}

/// Group normalisation over all positions of a feature map: channels are
/// split into `groups` contiguous groups, each normalised jointly over every
/// position and its channels, followed by a per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize, groups: usize) -> Result<Self> {
        if groups == 0 || dim % groups != 0 {
            return Err(Error::Config(format!("{name}: {dim} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            gamma: init.constant(&join(name, "gamma"), &[dim], 1.0)?,
            beta: init.constant(&join(name, "beta"), &[dim], 0.0)?,
            groups,
        })
    }

    /// `x [..., C]`; every leading axis counts as a position.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        let p = g.value(x).numel() / c.max(1);
        let cg = c / self.groups;
        let y = g.reshape(x, &[p, self.groups, cg])?;
        let y = g.permute(y, &[1, 0, 2])?;
        let y = g.reshape(y, &[self.groups, p * cg])?;
        let y = g.normalize_rows(y, 1e-5)?;
        let y = g.reshape(y, &[self.groups, p, cg])?;
        let y = g.permute(y, &[1, 0, 2])?;
        let y = g.reshape(y, &[p, c])?;
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        let y = g.mul_row(y, gamma)?;
        let y = g.add_row(y, beta)?;
        Ok(g.reshape(y, &shape)?)
    }
}

/// Multi-head attention with separate query and key/value widths and an
/// inner width that may differ from both (a bottleneck when smaller).
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Attention result: output rows and, when requested, the head-averaged
/// post-softmax weights `[Nq, Nk]`.
pub struct AttentionOut {
    pub out: Var,
    pub map: Option<Var>,
}

impl Attention {
    pub fn new(init: &mut Init, name: &str, q_dim: usize, kv_dim: usize, inner: usize, out_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(init, &join(name, "q"), q_dim, inner)?,
            k: Linear::without_bias(init, &join(name, "k"), kv_dim, inner)?,
            v: Linear::new(init, &join(name, "v"), kv_dim, inner)?,
            o: Linear::new(init, &join(name, "o"), inner, out_dim)?,
            heads,
        })
    }

    /// Same as [`Attention::new`] with a zero-initialised output projection.
    pub fn with_zero_output(init: &mut Init, name: &str, q_dim: usize, kv_dim: usize, inner: usize, out_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(init, &join(name, "q"), q_dim, inner)?,
            k: Linear::without_bias(init, &join(name, "k"), kv_dim, inner)?,
            v: Linear::new(init, &join(name, "v"), kv_dim, inner)?,
            o: Linear::zeroed(init, &join(name, "o"), inner, out_dim)?,
            heads,
        })
    }

    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (n, c) = (g.shape(x)[0], g.shape(x)[1]);
        let d = c / self.heads;
        let x = g.reshape(x, &[n, self.heads, d])?;
        Ok(g.permute(x, &[1, 0, 2])?)
    }

    /// `query [Nq, q_dim]` attends to `kv [Nk, kv_dim]`. `keep` is an
    /// optional row-major `[Nq, Nk]` mask; see `Graph::masked_softmax`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        query: Var,
        kv: Var,
        keep: Option<&[bool]>,
        want_map: bool,
    ) -> Result<AttentionOut> {
        let nq = g.shape(query)[0];
        let inner = self.q.out_dim;
        let d = inner / self.heads;
        let q = self.q.forward(g, s, query)?;
        let k = self.k.forward(g, s, kv)?;
        let v = self.v.forward(g, s, kv)?;
        let q = g.scale(q, 1.0 / (d as f64).sqrt());
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let scores = g.bmm(q, k, false, true)?;
        let a = match keep {
            Some(keep) => g.masked_softmax(scores, keep)?,
            None => g.softmax(scores, 2)?,
        };
        let ctx = g.bmm(a, v, false, false)?;
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        let ctx = g.reshape(ctx, &[nq, inner])?;
        let out = self.o.forward(g, s, ctx)?;
        let map = if want_map { Some(g.mean_axis(a, 0)?) } else { None };
        Ok(AttentionOut { out, map })
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn new(init: &mut Init, name: &str, dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self { l1: Linear::new(init, &join(name, "l1"), dim, hidden)?, l2: Linear::new(init, &join(name, "l2"), hidden, out_dim)? })
    }

    pub fn with_zero_output(init: &mut Init, name: &str, dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self { l1: Linear::new(init, &join(name, "l1"), dim, hidden)?, l2: Linear::zeroed(init, &join(name, "l2"), hidden, out_dim)? })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, s, x)?;
        let h = g.gelu(h);
        self.l2.forward(g, s, h)
    }
}

/// Square-kernel convolution on `[H, W, C]` maps.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let bound = (6.0 / (k * k * cin) as f64).sqrt();
        let w = init.uniform(&join(name, "w"), &[k * k * cin, cout], bound)?;
        let b = init.constant(&join(name, "b"), &[cout], 0.0)?;
        Ok(Self { w, b, k, stride, cin, cout })
    }

    /// Zero weight and bias.
    pub fn zeroed(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let w = init.constant(&join(name, "w"), &[k * k * cin, cout], 0.0)?;
        let b = init.constant(&join(name, "b"), &[cout], 0.0)?;
        Ok(Self { w, b, k, stride, cin, cout })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        let y = g.conv2d(x, w, self.k, self.stride, self.k / 2)?;
        Ok(g.add_row(y, b)?)
    }
}

/// Multiplies by a scalar parameter `a` and adds a scalar parameter `b`.
pub(crate) fn affine<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, x: Var, a: ParamId, b: ParamId) -> Result<Var> {
    let a = g.param(s, a);
    let b = g.param(s, b);
    let y = g.mul_scalar(x, a)?;
    let c = *g.shape(y).last().expect("non-scalar");
    let ones = g.constant(Tensor::full([c], T::one()));
    let row = g.mul_scalar(ones, b)?;
    Ok(g.add_row(y, row)?)
}

/// Resizes a `[h*w, C]` token matrix on an `h x w` grid to `out_h x out_w`.
pub(crate) fn resize_tokens<T: Real>(g: &mut Graph<T>, x: Var, (h, w): (usize, usize), (out_h, out_w): (usize, usize)) -> Result<Var> {
    if (h, w) == (out_h, out_w) {
        return Ok(x);
    }
    let c = g.shape(x)[1];
    let m = g.reshape(x, &[h, w, c])?;
    let r = g.resize_bilinear(m, out_h, out_w)?;
    Ok(g.reshape(r, &[out_h * out_w, c])?)
}

/// Keep-mask `[N, P]` (row-major) from logits laid out `[P, N]`: a pixel is
/// kept where the logit is non-negative. The decision goes through the
/// graph's branch log so finite-difference checks replay it.
pub(crate) fn threshold_keep<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Vec<bool>> {
    let (p, n) = (g.shape(logits)[0], g.shape(logits)[1]);
    let data = g.value(logits).data().to_vec();
    let d = g.branch(|| {
        let mut keep = vec![0i32; n * p];
        for (pix, row) in data.chunks(n.max(1)).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                keep[j * p + pix] = (v >= T::zero()) as i32;
            }
        }
        keep
    })?;
    if d.len() != n * p {
        return Err(dynprompt_autodiff::Error::Replay(d.len()).into());
    }
    Ok(d.into_iter().map(|v| v != 0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_single_key_is_value_projection() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 1);
        let att = Attention::new(&mut init, "a", 4, 3, 4, 4, 2).unwrap();
        let mut g = Graph::inference();
        let q = g.constant(Tensor::from_f64([5, 4], &(0..20).map(|i| i as f64 * 0.1).collect::<Vec<_>>()).unwrap());
        let kv = g.constant(Tensor::from_f64([1, 3], &[0.3, -0.2, 0.9]).unwrap());
        let r = att.forward(&mut g, &store, q, kv, None, true).unwrap();
        let map = g.value(r.map.unwrap()).clone();
        assert!(map.data().iter().all(|&v| v == 1.0));
        let v = att.v.forward(&mut g, &store, kv).unwrap();
        let o = att.o.forward(&mut g, &store, v).unwrap();
        let expect = g.value(o).data().to_vec();
        for row in g.value(r.out).data().chunks(4) {
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn threshold_keep_layout() {
        let mut g = Graph::<f32>::inference();
        // P = 3 pixels, N = 2 phrases.
        let x = g.constant(Tensor::from_f64([3, 2], &[0.5, -1.0, -0.1, 0.0, 2.0, -3.0]).unwrap());
        let keep = threshold_keep(&mut g, x).unwrap();
        assert_eq!(keep, vec![true, false, true, false, true, false]);
    }
}
