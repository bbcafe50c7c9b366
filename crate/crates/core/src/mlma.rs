//! Multi-level mutual aggregation of image and phrase features.

use dynprompt_autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::config::{MlmaConfig, UNetConfig};
use crate::error::Result;
use crate::nn::{join, Attention, Conv, Ffn, GroupNorm, Init, LayerNorm, Linear};

/// One similarity matrix between phrase and pixel tokens, normalised over
/// pixels to update phrases and over phrases to update pixels.
#[derive(Clone, Debug)]
pub struct BiAttention {
    ln_r: LayerNorm,
    ln_f: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v_f: Linear,
    pub v_r: Linear,
    pub out_r: Linear,
    pub out_f: Linear,
}

pub struct BiOut {
    pub pixels: Var,
    pub phrases: Var,
    /// `softmax` over pixels, `[R, P]`.
    pub phrase_weights: Var,
    /// `softmax` over phrases, `[R, P]` (columns sum to one).
    pub pixel_weights: Var,
}

impl BiAttention {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            ln_r: LayerNorm::new(init, &join(name, "ln_r"), d)?,
            ln_f: LayerNorm::new(init, &join(name, "ln_f"), d)?,
            q: Linear::new(init, &join(name, "q"), d, d)?,
            k: Linear::new(init, &join(name, "k"), d, d)?,
            v_f: Linear::new(init, &join(name, "v_f"), d, d)?,
            v_r: Linear::new(init, &join(name, "v_r"), d, d)?,
            out_r: Linear::new(init, &join(name, "out_r"), d, d)?,
            out_f: Linear::new(init, &join(name, "out_f"), d, d)?,
        })
    }

    /// `phrases [R, d]`, `pixels [P, d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, phrases: Var, pixels: Var) -> Result<BiOut> {
        let d = self.q.out_dim;
        let nr = self.ln_r.forward(g, s, phrases)?;
        let nf = self.ln_f.forward(g, s, pixels)?;
        let q = self.q.forward(g, s, nr)?;
        let k = self.k.forward(g, s, nf)?;
        let q = g.scale(q, 1.0 / (d as f64).sqrt());
        let sim = g.matmul_ex(q, k, false, true)?;
        let over_pixels = g.softmax(sim, 1)?;
        let over_phrases = g.softmax(sim, 0)?;
        let vf = self.v_f.forward(g, s, nf)?;
        let vr = self.v_r.forward(g, s, nr)?;
        let to_r = g.matmul(over_pixels, vf)?;
        let to_f = g.matmul_ex(over_phrases, vr, true, false)?;
        let to_r = self.out_r.forward(g, s, to_r)?;
        let to_f = self.out_f.forward(g, s, to_f)?;
        Ok(BiOut {
            phrases: g.add(phrases, to_r)?,
            pixels: g.add(pixels, to_f)?,
            phrase_weights: over_pixels,
            pixel_weights: over_phrases,
        })
    }
}

/// Multi-scale deformable attention over the three pixel levels.
#[derive(Clone, Debug)]
pub struct Deformable {
    ln: LayerNorm,
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub out: Linear,
    ln_ff: LayerNorm,
    ffn: Ffn,
    pub heads: usize,
    pub points: usize,
}

/// Initial offset bias: head `m` looks along direction `2 pi m / heads`,
/// point `k` at `k + 1` pixels (in chessboard distance).
pub fn offset_bias(heads: usize, levels: usize, points: usize) -> Vec<f64> {
    let mut b = Vec::with_capacity(heads * levels * points * 2);
    for m in 0..heads {
        let th = 2.0 * std::f64::consts::PI * m as f64 / heads as f64;
        let (c, s) = (th.cos(), th.sin());
        let norm = c.abs().max(s.abs());
        for _ in 0..levels {
            for k in 0..points {
                b.push(c / norm * (k + 1) as f64);
                b.push(s / norm * (k + 1) as f64);
            }
        }
    }
    b
}

impl Deformable {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize, points: usize) -> Result<Self> {
        let n_off = heads * 3 * points * 2;
        let offsets = Linear {
            w: init.constant(&join(name, "offsets.w"), &[d, n_off], 0.0)?,
            b: Some(init.tensor(&join(name, "offsets.b"), Tensor::from_f64([n_off], &offset_bias(heads, 3, points))?)?),
            in_dim: d,
            out_dim: n_off,
        };
        Ok(Self {
            ln: LayerNorm::new(init, &join(name, "ln"), d)?,
            offsets,
            weights: Linear::new(init, &join(name, "weights"), d, heads * 3 * points)?,
            value: Linear::new(init, &join(name, "value"), d, d)?,
            out: Linear::new(init, &join(name, "out"), d, d)?,
            ln_ff: LayerNorm::new(init, &join(name, "ln_ff"), d)?,
            ffn: Ffn::new(init, &join(name, "ffn"), d, 2 * d, d)?,
            heads,
            points,
        })
    }

    /// Normalised reference point of every pixel token, in level order.
    pub fn reference_points(dims: &[(usize, usize); 3]) -> Vec<[f64; 2]> {
        let mut r = Vec::new();
        for &(h, w) in dims {
            for y in 0..h {
                for x in 0..w {
                    r.push([(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64]);
                }
            }
        }
        r
    }

    /// Sampling locations `[P, heads, 3, K, 2]` and softmaxed weights
    /// `[P, heads, 3, K]` for queries `[P, d]`.
    pub fn sampling<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, q: Var, dims: &[(usize, usize); 3]) -> Result<(Var, Var)> {
        let p = g.shape(q)[0];
        let (m, k) = (self.heads, self.points);
        let off = self.offsets.forward(g, s, q)?;
        let mut per_level = Vec::with_capacity(m * 3 * k * 2);
        for _ in 0..m {
            for &(h, w) in dims {
                for _ in 0..k {
                    per_level.push(1.0 / w as f64);
                    per_level.push(1.0 / h as f64);
                }
            }
        }
        let scale = g.constant(Tensor::from_f64([per_level.len()], &per_level)?);
        let off = g.mul_row(off, scale)?;
        let refs = Self::reference_points(dims);
        let mut base = Vec::with_capacity(p * per_level.len());
        for r in &refs {
            for _ in 0..m * 3 * k {
                base.extend_from_slice(r);
            }
        }
        let base = g.constant(Tensor::from_f64([p, per_level.len()], &base)?);
        let locs = g.add(base, off)?;
        let locs = g.reshape(locs, &[p, m, 3, k, 2])?;
        let w = self.weights.forward(g, s, q)?;
        let w = g.reshape(w, &[p, m, 3 * k])?;
        let w = g.softmax(w, 2)?;
        let w = g.reshape(w, &[p, m, 3, k])?;
        Ok((locs, w))
    }

    /// Refines concatenated pixel tokens `[P, d]` laid out by `dims`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, pixels: Var, dims: &[(usize, usize); 3]) -> Result<Var> {
        let d = g.shape(pixels)[1];
        let n = self.ln.forward(g, s, pixels)?;
        let (locs, w) = self.sampling(g, s, n, dims)?;
        let v = self.value.forward(g, s, n)?;
        let sizes: Vec<usize> = dims.iter().map(|&(h, w)| h * w).collect();
        let parts = g.split(v, 0, &sizes)?;
        let mut levels = Vec::with_capacity(3);
        for (part, &(h, ww)) in parts.into_iter().zip(dims) {
            levels.push(g.reshape(part, &[h, ww, d])?);
        }
        let agg = g.deformable_sample(&levels, locs, w, self.heads)?;
        let o = self.out.forward(g, s, agg)?;
        let x = g.add(pixels, o)?;
        let n = self.ln_ff.forward(g, s, x)?;
        let f = self.ffn.forward(g, s, n)?;
        Ok(g.add(x, f)?)
    }
}

#[derive(Clone, Debug)]
pub struct PhraseSelfAttention {
    ln_sa: LayerNorm,
    sa: Attention,
    ln_ff: LayerNorm,
    ffn: Ffn,
}

impl PhraseSelfAttention {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_sa: LayerNorm::new(init, &join(name, "ln_sa"), d)?,
            sa: Attention::new(init, &join(name, "sa"), d, d, d, d, heads)?,
            ln_ff: LayerNorm::new(init, &join(name, "ln_ff"), d)?,
            ffn: Ffn::new(init, &join(name, "ffn"), d, 2 * d, d)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = self.ln_sa.forward(g, s, x)?;
        let a = self.sa.forward(g, s, n, n, None, false)?.out;
        let x = g.add(x, a)?;
        let n = self.ln_ff.forward(g, s, x)?;
        let f = self.ffn.forward(g, s, n)?;
        Ok(g.add(x, f)?)
    }
}

/// Upsamples the level-3 output and fuses it with `F̂_2`; the result is
/// group-normalised.
#[derive(Clone, Debug)]
pub struct FuseMask {
    pub proj3: Linear,
    pub proj2: Linear,
    pub conv: Conv,
    pub norm: GroupNorm,
}

impl FuseMask {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            proj3: Linear::new(init, &join(name, "proj3"), d, d)?,
            proj2: Linear::new(init, &join(name, "proj2"), d, d)?,
            conv: Conv::new(init, &join(name, "conv"), d, d, 3, 1)?,
            norm: GroupNorm::new(init, &join(name, "norm"), d, (1..=8).rev().find(|k| d % k == 0).unwrap_or(1))?,
        })
    }

    /// `f3 [h, w, d]`, `f2 [2h, 2w, d]` -> `[2h, 2w, d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, f3: Var, f2: Var) -> Result<Var> {
        let (h, w, d) = (g.shape(f3)[0], g.shape(f3)[1], g.shape(f3)[2]);
        let (h2, w2) = (g.shape(f2)[0], g.shape(f2)[1]);
        let t3 = g.reshape(f3, &[h * w, d])?;
        let t3 = self.proj3.forward(g, s, t3)?;
        let t3 = g.reshape(t3, &[h, w, d])?;
        let up = g.resize_bilinear(t3, h2, w2)?;
        let t2 = g.reshape(f2, &[h2 * w2, d])?;
        let t2 = self.proj2.forward(g, s, t2)?;
        let t2 = g.reshape(t2, &[h2, w2, d])?;
        let sum = g.add(up, t2)?;
        let y = self.conv.forward(g, s, sum)?;
        self.norm.forward(g, s, y)
    }
}

#[derive(Clone, Debug)]
pub struct Mlma {
    pub level_proj: [Linear; 3],
    pub level_embed: ParamId,
    pub phrase_proj: Linear,
    pub bi: Option<BiAttention>,
    pub deform: Option<Deformable>,
    pub text_sa: Option<PhraseSelfAttention>,
    pub fuse: FuseMask,
    pub dim: usize,
}

pub struct MlmaOut {
    /// `F̂_3, F̂_4, F̂_5` as `[h*w, C_m]` tokens.
    pub levels: [Var; 3],
    pub dims: [(usize, usize); 3],
    /// `R̂_3, R̂_4, R̂_5`, each `[N, C_m]`.
    pub phrases: [Var; 3],
    /// `F_m [H0/4, W0/4, C_m]`.
    pub f_m: Var,
    pub bi: Option<BiOut>,
}

impl Mlma {
    /// Parameters go under `mlma.`. With `cfg.enabled` false only the
    /// projections and the mask-feature fusion are built.
    pub fn new(init: &mut Init, cfg: &MlmaConfig, unet: &UNetConfig, text_dim: usize) -> Result<Self> {
        let d = cfg.dim;
        let level_proj = [
            Linear::new(init, "mlma.proj3", unet.channels[0], d)?,
            Linear::new(init, "mlma.proj4", unet.channels[1], d)?,
            Linear::new(init, "mlma.proj5", unet.channels[2], d)?,
        ];
        let level_embed = init.uniform("mlma.level_embed", &[3, d], 0.1)?;
        let phrase_proj = Linear::new(init, "mlma.phrase_proj", text_dim, d)?;
        let on = cfg.enabled;
        Ok(Self {
            level_proj,
            level_embed,
            phrase_proj,
            bi: if on && cfg.bi_attention { Some(BiAttention::new(init, "mlma.bi", d)?) } else { None },
            deform: if on { Some(Deformable::new(init, "mlma.deform", d, cfg.deformable_heads, cfg.deformable_points)?) } else { None },
            text_sa: if on && cfg.text_self_attention { Some(PhraseSelfAttention::new(init, "mlma.text_sa", d, cfg.heads)?) } else { None },
            fuse: FuseMask::new(init, "mlma.fuse", d)?,
            dim: d,
        })
    }

    /// `levels` are raw `[h, w, C_v]` UNet features, `phrases` the
    /// `[N, C_t]` phrase states at the matching blocks, `f_hat2` the latent
    /// decoder output.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, levels: [Var; 3], phrases: [Var; 3], f_hat2: Var) -> Result<MlmaOut> {
        let d = self.dim;
        let embed = g.param(s, self.level_embed);
        let mut dims = [(0, 0); 3];
        let mut toks = Vec::with_capacity(3);
        for (i, &f) in levels.iter().enumerate() {
            let (h, w, c) = (g.shape(f)[0], g.shape(f)[1], g.shape(f)[2]);
            dims[i] = (h, w);
            let t = g.reshape(f, &[h * w, c])?;
            let t = self.level_proj[i].forward(g, s, t)?;
            let e = g.narrow(embed, 0, i, 1)?;
            let e = g.reshape(e, &[d])?;
            toks.push(g.add_row(t, e)?);
        }
        let mut rs = Vec::with_capacity(3);
        for (i, &r) in phrases.iter().enumerate() {
            let p = self.phrase_proj.forward(g, s, r)?;
            let e = g.narrow(embed, 0, i, 1)?;
            let e = g.reshape(e, &[d])?;
            rs.push(g.add_row(p, e)?);
        }
        let n = g.shape(rs[0])[0];
        let sizes: Vec<usize> = dims.iter().map(|&(h, w)| h * w).collect();
        let mut pixels = g.concat(&toks, 0)?;
        let mut words = g.concat(&rs, 0)?;
        let mut bi_out = None;
        if let Some(bi) = &self.bi {
            if n > 0 {
                let o = bi.forward(g, s, words, pixels)?;
                pixels = o.pixels;
                words = o.phrases;
                bi_out = Some(o);
            }
        }
        if let Some(df) = &self.deform {
            pixels = df.forward(g, s, pixels, &dims)?;
        }
        if let Some(sa) = &self.text_sa {
            if n > 0 {
                words = sa.forward(g, s, words)?;
            }
        }
        let lv = g.split(pixels, 0, &sizes)?;
        let ph = g.split(words, 0, &[n, n, n])?;
        let f3 = g.reshape(lv[0], &[dims[0].0, dims[0].1, d])?;
        let f_m = self.fuse.forward(g, s, f3, f_hat2)?;
        Ok(MlmaOut { levels: [lv[0], lv[1], lv[2]], dims, phrases: [ph[0], ph[1], ph[2]], f_m, bi: bi_out })
    }
}
