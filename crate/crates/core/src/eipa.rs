//! Phrase adapter bypass running alongside the UNet blocks.

use dynprompt_autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::config::{AdapterConfig, UNetConfig};
use crate::data::NUM_CATEGORIES;
use crate::error::{Error, Result};
use crate::heads::{combine_maps, resize_map, DiffusionHead, GridMap};
use crate::nn::{join, threshold_keep, Attention, Ffn, Init, LayerNorm, Linear};
use crate::unet::{BlockOut, PromptProvider};

#[derive(Clone, Debug)]
pub struct AdapterBlock {
    ln_sa: LayerNorm,
    pub sa: Attention,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    pub ca: Attention,
    ln_ff: LayerNorm,
    pub ffn: Ffn,
}

/// Intermediate and output phrase features of one adapter block.
pub struct AdapterState {
    pub r_itm: Var,
    pub r: Var,
    /// Post-softmax weights `[N, h*w]`, averaged over heads.
    pub map: Var,
}

impl AdapterBlock {
    pub fn new(init: &mut Init, name: &str, text_dim: usize, image_dim: usize, cfg: &AdapterConfig) -> Result<Self> {
        let (t, b, h) = (text_dim, cfg.bottleneck, cfg.heads);
        Ok(Self {
            ln_sa: LayerNorm::new(init, &join(name, "ln_sa"), t)?,
            sa: Attention::new(init, &join(name, "sa"), t, t, b, t, h)?,
            ln_q: LayerNorm::new(init, &join(name, "ln_q"), t)?,
            ln_kv: LayerNorm::new(init, &join(name, "ln_kv"), image_dim)?,
            ca: Attention::with_zero_output(init, &join(name, "ca"), t, image_dim, b, t, h)?,
            ln_ff: LayerNorm::new(init, &join(name, "ln_ff"), t)?,
            ffn: Ffn::with_zero_output(init, &join(name, "ffn"), t, b, t)?,
        })
    }

    /// Self-attention update of the incoming phrase state.
    pub fn self_attend<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, r_prev: Var) -> Result<Var> {
        let n = self.ln_sa.forward(g, s, r_prev)?;
        let a = self.sa.forward(g, s, n, n, None, false)?.out;
        Ok(g.add(r_prev, a)?)
    }

    /// Masked cross-attention to the image intermediates, then the FFN.
    /// `keep` is row-major `[N, h*w]`.
    pub fn extract<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, r_itm: Var, f_itm: Var, keep: Option<&[bool]>) -> Result<(Var, Var)> {
        let q = self.ln_q.forward(g, s, r_itm)?;
        let kv = self.ln_kv.forward(g, s, f_itm)?;
        let a = self.ca.forward(g, s, q, kv, keep, true)?;
        let r_bar = g.add(r_itm, a.out)?;
        let n = self.ln_ff.forward(g, s, r_bar)?;
        let f = self.ffn.forward(g, s, n)?;
        Ok((g.add(r_bar, f)?, a.map.expect("map requested")))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, r_prev: Var, f_itm: Var, keep: Option<&[bool]>) -> Result<AdapterState> {
        let r_itm = self.self_attend(g, s, r_prev)?;
        let (r, map) = self.extract(g, s, r_itm, f_itm, keep)?;
        Ok(AdapterState { r_itm, r, map })
    }

    /// Output projections whose zeroing turns the block into the identity.
    pub fn output_params(&self) -> Vec<ParamId> {
        [self.sa.o.ids(), self.ca.o.ids(), self.ffn.l2.ids()].concat()
    }
}

/// Integrates adapter cross-attention maps into mask logits and classifies
/// each phrase from the adapter output.
#[derive(Clone, Debug)]
pub struct AdapterHead {
    pub weights: ParamId,
    pub scale: ParamId,
    pub bias: ParamId,
    ln: LayerNorm,
    class: Linear,
}

impl AdapterHead {
    fn new(init: &mut Init, name: &str, blocks: usize, text_dim: usize) -> Result<Self> {
        Ok(Self {
            weights: init.constant(&join(name, "weights"), &[blocks.max(1)], 0.0)?,
            scale: init.constant(&join(name, "scale"), &[1], 2.0)?,
            bias: init.constant(&join(name, "bias"), &[1], -1.0)?,
            ln: LayerNorm::new(init, &join(name, "ln"), text_dim)?,
            class: Linear::new(init, &join(name, "class"), text_dim, NUM_CATEGORIES + 1)?,
        })
    }

    pub fn classify<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, r: Var) -> Result<Var> {
        let n = self.ln.forward(g, s, r)?;
        self.class.forward(g, s, n)
    }

    /// A phrase-to-pixel map `[N, h*w]` as a `[h*w, N]` grid map scaled so
    /// that uniform attention reads 1.
    fn grid<T: Real>(g: &mut Graph<T>, rec: &AdapterRecord) -> Result<GridMap> {
        let t = g.transpose(rec.map)?;
        let m = g.scale(t, (rec.h * rec.w) as f64);
        Ok(GridMap { map: m, h: rec.h, w: rec.w })
    }

    /// One prediction per adapter block: mask logits `[H0*W0, N]` from the
    /// maps of that block and all earlier ones, and class logits from the
    /// block's output phrases.
    pub fn predictions<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, records: &[AdapterRecord], out_hw: (usize, usize)) -> Result<Vec<(Var, Var)>> {
        let mut full = Vec::with_capacity(records.len());
        for rec in records {
            let gm = Self::grid(g, rec)?;
            full.push(resize_map(g, gm, out_hw.0, out_hw.1)?);
        }
        let mut out = Vec::with_capacity(records.len());
        for (k, rec) in records.iter().enumerate() {
            let mask = combine_maps(g, s, &full[..=k], self.weights, self.scale, self.bias)?;
            let cls = self.classify(g, s, rec.r)?;
            out.push((mask, cls));
        }
        Ok(out)
    }

    /// Final integration over all blocks, at `out_hw`.
    pub fn integrate<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, records: &[AdapterRecord], out_hw: (usize, usize)) -> Result<Var> {
        let mut full = Vec::with_capacity(records.len());
        for rec in records {
            let gm = Self::grid(g, rec)?;
            full.push(resize_map(g, gm, out_hw.0, out_hw.1)?);
        }
        combine_maps(g, s, &full, self.weights, self.scale, self.bias)
    }
}

/// The adapter blocks (one slot per UNet block) and the adapter head.
#[derive(Clone, Debug)]
pub struct Eipa {
    pub blocks: Vec<Option<AdapterBlock>>,
    pub head: AdapterHead,
    pub use_mask: bool,
}

impl Eipa {
    /// Parameters go under `eipa.`.
    pub fn new(init: &mut Init, unet: &UNetConfig, text_dim: usize, cfg: &AdapterConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(unet.blocks.len());
        for (i, b) in unet.blocks.iter().enumerate() {
            blocks.push(if cfg.position.covers(b.kind) {
                Some(AdapterBlock::new(init, &format!("eipa.block{i}"), text_dim, unet.channels_at(b.level), cfg)?)
            } else {
                None
            });
        }
        let n = blocks.iter().filter(|b| b.is_some()).count();
        let head = AdapterHead::new(init, "eipa.head", n, text_dim)?;
        Ok(Self { blocks, head, use_mask: cfg.use_attention_mask })
    }

    pub fn count(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_some()).count()
    }

    /// Zeroes every adapter output projection so the bypass passes phrase
    /// features through unchanged.
    pub fn make_identity<T: Real>(&self, store: &mut ParamStore<T>) {
        for b in self.blocks.iter().flatten() {
            for id in b.output_params() {
                let p = store.get_mut(id);
                p.value = Tensor::zeros(p.value.shape().to_vec());
            }
        }
    }
}

pub struct AdapterRecord {
    pub block: usize,
    pub r_itm: Var,
    pub r: Var,
    pub map: Var,
    pub h: usize,
    pub w: usize,
    /// Attention mask applied, row-major `[N, h*w]`.
    pub keep: Option<Vec<bool>>,
}

/// Dynamic prompting: each block's conditioning is the adapter's
/// self-attended phrase state, and the adapter extracts from the block's
/// intermediate image tokens.
pub struct Bypass<'m> {
    eipa: &'m Eipa,
    dif: &'m DiffusionHead,
    state: Var,
    /// Prompt state after each block.
    pub states: Vec<Var>,
    pub records: Vec<AdapterRecord>,
}

impl<'m> Bypass<'m> {
    pub fn new(eipa: &'m Eipa, dif: &'m DiffusionHead, phrases: Var) -> Self {
        Self { eipa, dif, state: phrases, states: Vec::new(), records: Vec::new() }
    }

    fn mask<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, hw: (usize, usize), done: &[BlockOut]) -> Result<Option<Vec<bool>>> {
        if !self.eipa.use_mask || done.is_empty() {
            return Ok(None);
        }
        let maps: Vec<GridMap> = done
            .iter()
            .map(|b| b.map.map(|m| GridMap { map: m, h: b.h, w: b.w }))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Validation("attention map missing for a block with phrases".into()))?;
        let logits = self.dif.forward(g, s, &maps, hw)?;
        Ok(Some(threshold_keep(g, logits)?))
    }
}

impl<T: Real> PromptProvider<T> for Bypass<'_> {
    fn prompt(&mut self, g: &mut Graph<T>, s: &ParamStore<T>, block: usize, f_itm: Var, hw: (usize, usize), done: &[BlockOut]) -> Result<Var> {
        let adapter = self.eipa.blocks.get(block).ok_or_else(|| Error::Validation(format!("no adapter slot for block {block}")))?;
        let out = match adapter {
            Some(a) if g.shape(self.state)[0] > 0 => {
                let keep = self.mask(g, s, hw, done)?;
                let st = a.forward(g, s, self.state, f_itm, keep.as_deref())?;
                self.records.push(AdapterRecord { block, r_itm: st.r_itm, r: st.r, map: st.map, h: hw.0, w: hw.1, keep });
                self.state = st.r;
                st.r_itm
            }
            _ => self.state,
        };
        self.states.push(self.state);
        Ok(out)
    }
}
