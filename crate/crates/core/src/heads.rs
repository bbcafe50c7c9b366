//! Attention-map mask heads and the three-term grounding loss.

use dynprompt_autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::config::LossConfig;
use crate::data::{GroundingSample, NUM_CATEGORIES};
use crate::error::{Error, Result};
use crate::nn::{affine, join, Init};

/// One attention map laid out `[h*w, N]` on an `h x w` grid.
#[derive(Clone, Copy, Debug)]
pub struct GridMap {
    pub map: Var,
    pub h: usize,
    pub w: usize,
}

/// Resizes a `[h*w, N]` map to `out_h x out_w`.
pub fn resize_map<T: Real>(g: &mut Graph<T>, m: GridMap, out_h: usize, out_w: usize) -> Result<Var> {
    crate::nn::resize_tokens(g, m.map, (m.h, m.w), (out_h, out_w))
}

/// Learned softmax-weighted sum of maps already on a common grid, followed
/// by a scalar affine calibration to logits. `weights` is a parameter of
/// length at least `maps.len()`; only its first `maps.len()` entries enter
/// the softmax.
pub fn combine_maps<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, maps: &[Var], weights: ParamId, a: ParamId, b: ParamId) -> Result<Var> {
    if maps.is_empty() {
        return Err(Error::Validation("no attention maps to combine".into()));
    }
    let w = g.param(s, weights);
    let w = g.narrow(w, 0, 0, maps.len())?;
    let w = g.softmax(w, 0)?;
    let m = g.weighted_sum(maps, w)?;
    affine(g, s, m, a, b)
}

/// Fuses the UNet cross-attention maps of all blocks into mask logits.
#[derive(Clone, Debug)]
pub struct DiffusionHead {
    pub weights: ParamId,
    pub scale: ParamId,
    pub bias: ParamId,
}

impl DiffusionHead {
    pub fn new(init: &mut Init, name: &str, blocks: usize) -> Result<Self> {
        Ok(Self {
            weights: init.constant(&join(name, "weights"), &[blocks], 0.0)?,
            scale: init.constant(&join(name, "scale"), &[1], 10.0)?,
            bias: init.constant(&join(name, "bias"), &[1], -5.0)?,
        })
    }

    /// Logits `[out_h*out_w, N]` from the maps of the first `maps.len()`
    /// blocks, each resized to the output grid.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, maps: &[GridMap], out_hw: (usize, usize)) -> Result<Var> {
        let resized = maps.iter().map(|&m| resize_map(g, m, out_hw.0, out_hw.1)).collect::<Result<Vec<_>>>()?;
        combine_maps(g, s, &resized, self.weights, self.scale, self.bias)
    }
}

/// Per-sample supervision in the `[H0*W0, N]` column layout.
#[derive(Clone, Debug)]
pub struct Targets {
    pub pixels: usize,
    pub phrases: usize,
    /// Binary masks `[P, N]`; ungrounded columns are zero.
    pub masks: Tensor<f64>,
    pub grounded: Vec<bool>,
    /// Class target per phrase; `NUM_CATEGORIES` is the no-object class.
    pub classes: Vec<usize>,
}

impl Targets {
    pub fn from_sample(sample: &GroundingSample) -> Result<Self> {
        let p = sample.height() * sample.width();
        let n = sample.phrases.len();
        let mut masks = vec![0.0; p * n];
        let mut classes = Vec::with_capacity(n);
        for (j, ph) in sample.phrases.iter().enumerate() {
            if ph.category_id >= NUM_CATEGORIES {
                return Err(Error::Validation(format!("category {} out of range", ph.category_id)));
            }
            match (&ph.mask, ph.grounded) {
                (Some(m), true) => {
                    for (i, &bit) in m.bits.iter().enumerate() {
                        masks[i * n + j] = bit as u8 as f64;
                    }
                    classes.push(ph.category_id);
                }
                _ => classes.push(NUM_CATEGORIES),
            }
        }
        Ok(Self {
            pixels: p,
            phrases: n,
            masks: Tensor::new(vec![p, n], masks)?,
            grounded: sample.phrases.iter().map(|ph| ph.grounded).collect(),
            classes,
        })
    }

    pub fn num_grounded(&self) -> usize {
        self.grounded.iter().filter(|&&g| g).count()
    }

    fn column_weights(&self, w: f64) -> Tensor<f64> {
        Tensor::new(vec![self.phrases], self.grounded.iter().map(|&g| if g { w } else { 0.0 }).collect()).expect("length matches")
    }
}

/// Scalar loss parts for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossParts {
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.bce += o.bce;
        self.dice += o.dice;
        self.cls += o.cls;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub loss_dif: f64,
    pub loss_ada: f64,
    pub loss_dec: f64,
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub cls: f64,
    /// The sample had no grounded phrase, so the Diffusion term is zero.
    pub no_grounded: bool,
}

impl LossReport {
    pub fn accumulate(&mut self, o: &LossReport) {
        self.loss_dif += o.loss_dif;
        self.loss_ada += o.loss_ada;
        self.loss_dec += o.loss_dec;
        self.total += o.total;
        self.bce += o.bce;
        self.dice += o.dice;
        self.cls += o.cls;
        self.no_grounded |= o.no_grounded;
    }

    pub fn scaled(mut self, f: f64) -> Self {
        for v in [&mut self.loss_dif, &mut self.loss_ada, &mut self.loss_dec, &mut self.total, &mut self.bce, &mut self.dice, &mut self.cls] {
            *v *= f;
        }
        self
    }
}

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].as_f64()
}

fn weights_t<T: Real>(t: &Tensor<f64>) -> Tensor<T> {
    t.cast()
}

/// Full binary cross-entropy per pixel, averaged over the pixels of
/// grounded phrases. Returns `None` when nothing is grounded.
pub fn loss_dif<T: Real>(g: &mut Graph<T>, logits: Var, t: &Targets) -> Result<Option<Var>> {
    let ng = t.num_grounded();
    if ng == 0 {
        return Ok(None);
    }
    let bce = g.bce_logits_cols(logits, &weights_t(&t.masks))?;
    Ok(Some(g.dot_const(bce, &weights_t(&t.column_weights(1.0 / ng as f64)))?))
}

/// Mask classification loss: weighted cross-entropy on every phrase (the
/// no-object target weighted by `no_object_weight`) plus BCE and Dice mask
/// terms on grounded phrases.
pub fn loss_mask_cls<T: Real>(g: &mut Graph<T>, logits: Var, class_logits: Var, t: &Targets, cfg: &LossConfig) -> Result<(Var, LossParts)> {
    let k1 = g.shape(class_logits)[1];
    if g.shape(class_logits)[0] != t.phrases || g.shape(logits) != [t.pixels, t.phrases] {
        return Err(Error::Validation(format!(
            "prediction shapes {:?} / {:?} do not match {} pixels x {} phrases",
            g.shape(logits),
            g.shape(class_logits),
            t.pixels,
            t.phrases
        )));
    }
    let mut pick = vec![0.0; t.phrases * k1];
    for (j, &c) in t.classes.iter().enumerate() {
        if c >= k1 {
            return Err(Error::Validation(format!("class target {c} outside {k1} logits")));
        }
        let w = if c == k1 - 1 { cfg.no_object_weight } else { 1.0 };
        pick[j * k1 + c] = -w * cfg.class_weight;
    }
    let lp = g.log_softmax(class_logits)?;
    let cls = g.dot_const(lp, &Tensor::new(vec![t.phrases, k1], pick)?.cast())?;
    let x = logits;
    let target = weights_t(&t.masks);
    let bce = g.bce_logits_cols(x, &target)?;
    let bce = g.dot_const(bce, &weights_t(&t.column_weights(cfg.bce_weight)))?;
    let dice = g.dice_cols(x, &target, cfg.dice_smooth)?;
    let dice = g.dot_const(dice, &weights_t(&t.column_weights(cfg.dice_weight)))?;
    let parts = LossParts { bce: scalar(g, bce), dice: scalar(g, dice), cls: scalar(g, cls) };
    let sum = g.add(cls, bce)?;
    Ok((g.add(sum, dice)?, parts))
}
