//! Masked-attention transformer decoder over the phrase queries.

use dynprompt_autodiff::{Graph, ParamStore, Real, Var};

use crate::config::DecoderConfig;
use crate::data::NUM_CATEGORIES;
use crate::error::Result;
use crate::nn::{join, resize_tokens, threshold_keep, Attention, Ffn, Init, LayerNorm, Linear};

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    ln_ca: LayerNorm,
    pub ca: Attention,
    ln_sa: LayerNorm,
    sa: Attention,
    ln_ff: LayerNorm,
    ffn: Ffn,
    /// Index into the level triple (0 = level 3).
    pub level: usize,
}

/// Mask embedding MLP and class head shared by every prediction.
#[derive(Clone, Debug)]
pub struct MaskHead {
    ln: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
    pub class: Linear,
}

/// One decoder-head prediction.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// Mask logits `[H0*W0, N]`.
    pub mask: Var,
    /// Mask logits on the `F_m` grid, `[h*w, N]`.
    pub mask_low: Var,
    /// `[N, K+1]` including the no-object class.
    pub class: Var,
}

impl MaskHead {
    fn new(init: &mut Init, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(init, &join(name, "ln"), d)?,
            mlp1: Linear::new(init, &join(name, "mlp1"), d, d)?,
            mlp2: Linear::new(init, &join(name, "mlp2"), d, d)?,
            class: Linear::new(init, &join(name, "class"), d, NUM_CATEGORIES + 1)?,
        })
    }

    /// `queries [N, d]`, `f_m [h, w, d]`.
    pub fn predict<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, queries: Var, f_m: Var, out_hw: (usize, usize)) -> Result<Prediction> {
        let (h, w, d) = (g.shape(f_m)[0], g.shape(f_m)[1], g.shape(f_m)[2]);
        let n = self.ln.forward(g, s, queries)?;
        let class = self.class.forward(g, s, n)?;
        let e = self.mlp1.forward(g, s, n)?;
        let e = g.gelu(e);
        let e = self.mlp2.forward(g, s, e)?;
        let fm = g.reshape(f_m, &[h * w, d])?;
        let mask_low = g.matmul_ex(fm, e, false, true)?;
        let mask = resize_tokens(g, mask_low, (h, w), out_hw)?;
        Ok(Prediction { mask, mask_low, class })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub head: MaskHead,
}

pub struct DecoderOut {
    /// Prediction from the initial queries followed by one per layer.
    pub predictions: Vec<Prediction>,
    pub queries: Var,
    /// Attention masks used by each layer, row-major `[N, h*w]`.
    pub masks: Vec<Vec<bool>>,
}

impl Decoder {
    /// Parameters go under `decoder.`. Layers cycle levels 5, 4, 3.
    pub fn new(init: &mut Init, cfg: &DecoderConfig, layers: usize, d: usize) -> Result<Self> {
        let mut ls = Vec::with_capacity(layers);
        for i in 0..layers {
            let name = format!("decoder.layer{i}");
            ls.push(DecoderLayer {
                ln_ca: LayerNorm::new(init, &join(&name, "ln_ca"), d)?,
                ca: Attention::new(init, &join(&name, "ca"), d, d, d, d, cfg.heads)?,
                ln_sa: LayerNorm::new(init, &join(&name, "ln_sa"), d)?,
                sa: Attention::new(init, &join(&name, "sa"), d, d, d, d, cfg.heads)?,
                ln_ff: LayerNorm::new(init, &join(&name, "ln_ff"), d)?,
                ffn: Ffn::new(init, &join(&name, "ffn"), d, 2 * d, d)?,
                level: 2 - i % 3,
            });
        }
        Ok(Self { layers: ls, head: MaskHead::new(init, "decoder.head", d)? })
    }

    /// `levels` are `[h*w, d]` tokens with grid sizes `dims`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        queries: Var,
        levels: &[Var; 3],
        dims: &[(usize, usize); 3],
        f_m: Var,
        out_hw: (usize, usize),
    ) -> Result<DecoderOut> {
        let fm_hw = (g.shape(f_m)[0], g.shape(f_m)[1]);
        let mut q = queries;
        let mut preds = vec![self.head.predict(g, s, q, f_m, out_hw)?];
        let mut masks = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let prev = preds.last().expect("initial prediction").mask_low;
            let lv = layer.level;
            let low = resize_tokens(g, prev, fm_hw, dims[lv])?;
            let keep = threshold_keep(g, low)?;
            let n = layer.ln_ca.forward(g, s, q)?;
            let a = layer.ca.forward(g, s, n, levels[lv], Some(&keep), false)?.out;
            q = g.add(q, a)?;
            let n = layer.ln_sa.forward(g, s, q)?;
            let a = layer.sa.forward(g, s, n, n, None, false)?.out;
            q = g.add(q, a)?;
            let n = layer.ln_ff.forward(g, s, q)?;
            let f = layer.ffn.forward(g, s, n)?;
            q = g.add(q, f)?;
            masks.push(keep);
            preds.push(self.head.predict(g, s, q, f_m, out_hw)?);
        }
        Ok(DecoderOut { predictions: preds, queries: q, masks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dynprompt_autodiff::Tensor;

    #[test]
    fn levels_cycle_coarse_to_fine() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut Init::new(&mut store, 1), &DecoderConfig::default(), 4, 8).unwrap();
        let lv: Vec<_> = dec.layers.iter().map(|l| l.level).collect();
        assert_eq!(lv, vec![2, 1, 0, 2]);
    }

    #[test]
    fn zero_query_gives_constant_mask() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut Init::new(&mut store, 1), &DecoderConfig::default(), 0, 8).unwrap();
        let mut g = Graph::<f32>::inference();
        let q = g.constant(Tensor::zeros([2, 8]));
        let fm = g.constant(Tensor::from_f64([2, 2, 8], &(0..32).map(|i| (i % 5) as f64 * 0.1).collect::<Vec<_>>()).unwrap());
        let p = dec.head.predict(&mut g, &store, q, fm, (4, 4)).unwrap();
        let m = g.value(p.mask).data().to_vec();
        // Both phrases identical, and each column is the bias response.
        for row in m.chunks(2) {
            assert_eq!(row[0], row[1]);
        }
    }
}
