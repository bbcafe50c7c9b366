//! Miniature latent UNet: strided latent encoder, ResBlock + TransBlock
//! stages with text cross-attention, and a 2x latent decoder.

use dynprompt_autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::config::{BlockKind, BlockSpec, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::{join, Attention, Conv, Ffn, GroupNorm, Init, LayerNorm, Linear};

/// Supplies the conditioning rows each block's cross-attention reads.
pub trait PromptProvider<T: Real> {
    /// Called once per block, after the block's self-attention produced
    /// `f_itm [h*w, C_v]`. `done` holds the outputs of blocks already run.
    /// Returns the `[N, C_t]` keys/values for this block.
    fn prompt(&mut self, g: &mut Graph<T>, s: &ParamStore<T>, block: usize, f_itm: Var, hw: (usize, usize), done: &[BlockOut]) -> Result<Var>;
}

/// Static prompting: every block sees the same phrase features.
pub struct StaticPrompt(pub Var);

impl<T: Real> PromptProvider<T> for StaticPrompt {
    fn prompt(&mut self, _: &mut Graph<T>, _: &ParamStore<T>, _: usize, _: Var, _: (usize, usize), _: &[BlockOut]) -> Result<Var> {
        Ok(self.0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOut {
    /// `[h, w, C_v]`.
    pub f: Var,
    /// Post-self-attention tokens `[h*w, C_v]`.
    pub f_itm: Var,
    /// Head-averaged cross-attention weights `[h*w, N]`; `None` when `N = 0`.
    pub map: Option<Var>,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
    pub cin: usize,
    pub cout: usize,
}

impl ResBlock {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(init, &join(name, "norm1"), cin, groups)?,
            conv1: Conv::new(init, &join(name, "conv1"), cin, cout, 3, 1)?,
            time: Linear::new(init, &join(name, "time"), time_dim, cout)?,
            norm2: GroupNorm::new(init, &join(name, "norm2"), cout, groups)?,
            conv2: Conv::zeroed(init, &join(name, "conv2"), cout, cout, 3, 1)?,
            skip: if cin != cout { Some(Conv::new(init, &join(name, "skip"), cin, cout, 1, 1)?) } else { None },
            cin,
            cout,
        })
    }

    /// `x [h, w, cin]`, `temb [1, time_dim]` (already activated).
    fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(g, s, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, s, h)?;
        let t = self.time.forward(g, s, temb)?;
        let t = g.reshape(t, &[self.cout])?;
        let h = g.add_row(h, t)?;
        let h = self.norm2.forward(g, s, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, s, h)?;
        let x = match &self.skip {
            Some(c) => c.forward(g, s, x)?,
            None => x,
        };
        Ok(g.add(x, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct TransBlock {
    ln_sa: LayerNorm,
    sa: Attention,
    ln_ca: LayerNorm,
    pub ca: Attention,
    ln_ff: LayerNorm,
    ffn: Ffn,
}

impl TransBlock {
    fn new(init: &mut Init, name: &str, c: usize, text_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_sa: LayerNorm::new(init, &join(name, "ln_sa"), c)?,
            sa: Attention::new(init, &join(name, "sa"), c, c, c, c, heads)?,
            ln_ca: LayerNorm::new(init, &join(name, "ln_ca"), c)?,
            ca: Attention::new(init, &join(name, "ca"), c, text_dim, c, c, heads)?,
            ln_ff: LayerNorm::new(init, &join(name, "ln_ff"), c)?,
            ffn: Ffn::new(init, &join(name, "ffn"), c, 2 * c, c)?,
        })
    }
}

#[derive(Clone, Debug)]
enum Resample {
    None,
    Down(Conv),
    Up(Conv),
}

#[derive(Clone, Debug)]
pub struct UNetBlock {
    pub spec: BlockSpec,
    resample: Resample,
    pub res: ResBlock,
    pub trans: TransBlock,
}

impl UNetBlock {
    /// Resample, skip concat, ResBlock and self-attention. Returns `F_itm`.
    pub fn pre_cross<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, skip: Option<Var>, temb: Var) -> Result<(Var, (usize, usize))> {
        let x = match &self.resample {
            Resample::None => x,
            Resample::Down(c) => c.forward(g, s, x)?,
            Resample::Up(c) => {
                let (h, w) = (g.shape(x)[0], g.shape(x)[1]);
                let up = g.resize_bilinear(x, 2 * h, 2 * w)?;
                c.forward(g, s, up)?
            }
        };
        let x = match skip {
            Some(k) => g.concat(&[x, k], 2)?,
            None => x,
        };
        if g.shape(x)[2] != self.res.cin {
            return Err(Error::Validation(format!("block input has {} channels, expected {}", g.shape(x)[2], self.res.cin)));
        }
        let x = self.res.forward(g, s, x, temb)?;
        let (h, w, c) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
        let tok = g.reshape(x, &[h * w, c])?;
        let n = self.trans.ln_sa.forward(g, s, tok)?;
        let a = self.trans.sa.forward(g, s, n, n, None, false)?.out;
        Ok((g.add(tok, a)?, (h, w)))
    }

    /// Cross-attention from image tokens to `prompt [N, C_t]`, then the FFN.
    pub fn post_cross<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, f_itm: Var, prompt: Var, (h, w): (usize, usize)) -> Result<(Var, Option<Var>)> {
        let (x, map) = if g.shape(prompt)[0] == 0 {
            (f_itm, None)
        } else {
            let n = self.trans.ln_ca.forward(g, s, f_itm)?;
            let r = self.trans.ca.forward(g, s, n, prompt, None, true)?;
            (g.add(f_itm, r.out)?, r.map)
        };
        let n = self.trans.ln_ff.forward(g, s, x)?;
        let f = self.trans.ffn.forward(g, s, n)?;
        let x = g.add(x, f)?;
        let c = g.shape(x)[1];
        Ok((g.reshape(x, &[h, w, c])?, map))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    latent_enc: [Conv; 3],
    conv_in: Conv,
    time_table: ParamId,
    time_step: usize,
    pub blocks: Vec<UNetBlock>,
    dec_conv1: Conv,
    dec_conv2: Conv,
    /// Index of the block supplying the level-3, 4 and 5 features.
    pub level_source: [usize; 3],
    pub mask_dim: usize,
}

/// Everything downstream modules read from the backbone.
pub struct BackboneOut {
    pub blocks: Vec<BlockOut>,
    /// Raw `F_3, F_4, F_5` as `[h, w, C_v]`.
    pub levels: [Var; 3],
    /// `F̂_2 [H0/4, W0/4, C_m]`.
    pub f_hat2: Var,
}

impl Backbone {
    /// Parameters go under `latent_enc.`, `unet.` and `latent_dec.`.
    pub fn new(init: &mut Init, cfg: &UNetConfig, text_dim: usize, mask_dim: usize) -> Result<Self> {
        let [s1, s2] = cfg.stem_channels;
        let lc = cfg.latent_channels;
        let latent_enc = [
            Conv::new(init, "latent_enc.conv1", 3, s1, 3, 2)?,
            Conv::new(init, "latent_enc.conv2", s1, s2, 3, 2)?,
            Conv::new(init, "latent_enc.conv3", s2, lc, 3, 2)?,
        ];
        let c3 = cfg.channels_at(3);
        let conv_in = Conv::new(init, "unet.conv_in", lc, c3, 3, 1)?;
        let time_table = init.uniform("unet.time_embedding", &[cfg.num_timesteps, cfg.time_dim], 1.0)?;
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        let mut prev = (3usize, c3);
        let mut skips = Vec::new();
        for (i, &spec) in cfg.blocks.iter().enumerate() {
            let name = format!("unet.block{i}");
            let cout = cfg.channels_at(spec.level);
            let resample = match spec.level.cmp(&prev.0) {
                std::cmp::Ordering::Equal => Resample::None,
                std::cmp::Ordering::Greater => Resample::Down(Conv::new(init, &join(&name, "down"), prev.1, prev.1, 3, 2)?),
                std::cmp::Ordering::Less => Resample::Up(Conv::new(init, &join(&name, "up"), prev.1, prev.1, 3, 1)?),
            };
            let mut cin = prev.1;
            if spec.kind == BlockKind::Decoder {
                cin += skips.pop().ok_or_else(|| Error::Config(format!("block {i} has no skip")))?;
            }
            let res = ResBlock::new(init, &join(&name, "res"), cin, cout, cfg.time_dim, cfg.norm_groups)?;
            let trans = TransBlock::new(init, &join(&name, "trans"), cout, text_dim, cfg.heads)?;
            if spec.kind == BlockKind::Encoder {
                skips.push(cout);
            }
            blocks.push(UNetBlock { spec, resample, res, trans });
            prev = (spec.level, cout);
        }
        let mut level_source = [0; 3];
        for (k, src) in level_source.iter_mut().enumerate() {
            *src = cfg
                .blocks
                .iter()
                .rposition(|b| b.level == k + 3)
                .ok_or_else(|| Error::Config(format!("no block at level {}", k + 3)))?;
        }
        let dec_conv1 = Conv::new(init, "latent_dec.conv1", prev.1, mask_dim, 3, 1)?;
        let dec_conv2 = Conv::new(init, "latent_dec.conv2", mask_dim, mask_dim, 3, 1)?;
        Ok(Self { latent_enc, conv_in, time_table, time_step: cfg.time_step, blocks, dec_conv1, dec_conv2, level_source, mask_dim })
    }

    /// `image [H0, W0, 3] -> [H0/8, W0/8, latent_channels]`.
    pub fn encode_latent<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, image: Var) -> Result<Var> {
        let sh = g.shape(image).to_vec();
        if sh.len() != 3 || sh[2] != 3 || sh[0] % 32 != 0 || sh[1] % 32 != 0 || sh[0] == 0 || sh[1] == 0 {
            return Err(Error::Config(format!("image shape {sh:?} must be [H, W, 3] with H, W positive multiples of 32")));
        }
        let mut x = image;
        for (i, c) in self.latent_enc.iter().enumerate() {
            x = c.forward(g, s, x)?;
            if i < 2 {
                x = g.silu(x);
            }
        }
        Ok(x)
    }

    /// Runs every block, asking `prompt` for each block's conditioning.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, latent: Var, prompt: &mut dyn PromptProvider<T>) -> Result<BackboneOut> {
        let table = g.param(s, self.time_table);
        let temb = g.gather_rows(table, &[self.time_step])?;
        let temb = g.silu(temb);
        let mut x = self.conv_in.forward(g, s, latent)?;
        let mut skips: Vec<Var> = Vec::new();
        let mut outs: Vec<BlockOut> = Vec::with_capacity(self.blocks.len());
        let mut n_prompt = None;
        for (i, b) in self.blocks.iter().enumerate() {
            let skip = if b.spec.kind == BlockKind::Decoder { skips.pop() } else { None };
            let (f_itm, hw) = b.pre_cross(g, s, x, skip, temb)?;
            let r = prompt.prompt(g, s, i, f_itm, hw, &outs)?;
            let n = g.shape(r)[0];
            if *n_prompt.get_or_insert(n) != n {
                return Err(Error::Validation(format!("prompt for block {i} has {n} rows, earlier blocks had {}", n_prompt.unwrap_or(0))));
            }
            let (f, map) = b.post_cross(g, s, f_itm, r, hw)?;
            if b.spec.kind == BlockKind::Encoder {
                skips.push(f);
            }
            outs.push(BlockOut { f, f_itm, map, h: hw.0, w: hw.1 });
            x = f;
        }
        let levels = self.level_source.map(|i| outs[i].f);
        let h = self.dec_conv1.forward(g, s, x)?;
        let h = g.silu(h);
        let (hh, ww) = (g.shape(h)[0], g.shape(h)[1]);
        let h = g.resize_bilinear(h, 2 * hh, 2 * ww)?;
        let f_hat2 = self.dec_conv2.forward(g, s, h)?;
        Ok(BackboneOut { blocks: outs, levels, f_hat2 })
    }

    pub fn channels(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.res.cout).collect()
    }

    /// Decoder-side ResBlock input widths, for structural checks.
    pub fn res_inputs(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.res.cin).collect()
    }
}

/// Constant image input helper.
/// Places an image with values in `[0, 1]` on the tape, rescaled to `[-1, 1]`.
pub fn image_var<T: Real>(g: &mut Graph<T>, image: &Tensor<f32>) -> Var {
    g.constant(image.map(|v| 2.0 * v - 1.0).cast())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backbone(cfg: &UNetConfig) -> (Backbone, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let b = Backbone::new(&mut Init::new(&mut store, 5), cfg, 8, 8).unwrap();
        (b, store)
    }

    #[test]
    fn latent_shapes() {
        let (b, s) = backbone(&UNetConfig::default());
        for (hw, out) in [(128, 16), (64, 8)] {
            let mut g = Graph::inference();
            let img = g.constant(Tensor::zeros([hw, hw, 3]));
            let z = b.encode_latent(&mut g, &s, img).unwrap();
            assert_eq!(g.shape(z), &[out, out, 4]);
            assert!(g.value(z).all_finite());
        }
        let mut g = Graph::inference();
        let img = g.constant(Tensor::zeros([48, 48, 3]));
        assert!(matches!(b.encode_latent(&mut g, &s, img), Err(Error::Config(_))));
    }

    #[test]
    fn skip_widths_follow_config() {
        let (b, _) = backbone(&UNetConfig::default());
        assert_eq!(b.res_inputs(), vec![32, 32, 32, 64, 64, 96, 96 + 64, 64 + 64, 64 + 32, 32 + 32]);
        assert_eq!(b.level_source, [9, 7, 5]);
    }

    #[test]
    fn pyramid_shapes_and_singleton_map() {
        let cfg = UNetConfig::default();
        let (b, s) = backbone(&cfg);
        let mut g = Graph::inference();
        let z = g.constant(Tensor::zeros([16, 16, 4]));
        let r = g.constant(Tensor::full([1, 8], 0.3));
        let out = b.forward(&mut g, &s, z, &mut StaticPrompt(r)).unwrap();
        let shapes: Vec<_> = out.levels.iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 16, 32], vec![8, 8, 64], vec![4, 4, 96]]);
        assert_eq!(g.shape(out.f_hat2), &[32, 32, 8]);
        for bo in &out.blocks {
            let m = g.value(bo.map.unwrap());
            assert!(m.data().iter().all(|&v| v == 1.0));
        }
    }
}
