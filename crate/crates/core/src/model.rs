//! The full grounding model: text encoder, UNet with phrase-adapter
//! bypass, multi-level aggregation, decoder and the three mask heads.

use dynprompt_autodiff::{Graph, ParamStore, Real, Tensor, Var};

use crate::config::{Head, ModelConfig};
use crate::data::{GroundingSample, Vocabulary};
use crate::decoder::{Decoder, Prediction};
use crate::eipa::{AdapterRecord, Bypass, Eipa};
use crate::error::{Error, Result};
use crate::heads::{loss_dif, loss_mask_cls, DiffusionHead, GridMap, LossParts, LossReport, Targets};
use crate::mlma::Mlma;
use crate::nn::Init;
use crate::textenc::{pool_phrases, TextEncoder};
use crate::unet::{Backbone, BlockOut, StaticPrompt};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub text: TextEncoder,
    pub backbone: Backbone,
    pub eipa: Eipa,
    pub dif: DiffusionHead,
    pub mlma: Mlma,
    pub decoder: Decoder,
}

/// A sample converted to model inputs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub image: Tensor<f32>,
    pub ids: Vec<usize>,
    pub spans: Vec<[usize; 2]>,
    pub targets: Targets,
    pub height: usize,
    pub width: usize,
}

impl Prepared {
    pub fn new(sample: &GroundingSample, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self {
            image: sample.image.clone(),
            ids: vocab.encode(&sample.caption)?,
            spans: sample.phrases.iter().map(|p| p.word_span).collect(),
            targets: Targets::from_sample(sample)?,
            height: sample.height(),
            width: sample.width(),
        })
    }

    pub fn phrases(&self) -> usize {
        self.spans.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prompting {
    /// Every block is conditioned on the pooled phrase features.
    Static,
    /// Conditioning flows through the adapter bypass.
    Dynamic,
}

/// Handles to everything a forward pass produced.
pub struct ModelOutput {
    pub phrases: Var,
    pub blocks: Vec<BlockOut>,
    pub adapters: Vec<AdapterRecord>,
    /// Diffusion-head logits `[H0*W0, N]`; `None` when `N = 0`.
    pub dif: Option<Var>,
    /// One `(mask logits, class logits)` pair per adapter block.
    pub ada: Vec<(Var, Var)>,
    /// Initial plus per-layer decoder predictions.
    pub dec: Vec<Prediction>,
    pub level_phrases: [Var; 3],
    pub f_m: Option<Var>,
}

impl ModelOutput {
    /// Mask logits `[H0*W0, N]` of the selected head.
    pub fn head_logits(&self, head: Head) -> Option<Var> {
        match head {
            Head::Diffusion => self.dif,
            Head::Adapter => self.ada.last().map(|p| p.0),
            Head::Decoder => self.dec.last().map(|p| p.mask),
        }
    }

    /// Name of the first non-finite tensor, scanning parameters and then
    /// the forward outputs in computation order.
    pub fn first_non_finite<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>) -> Option<String> {
        if let Some((_, p)) = s.iter().find(|(_, p)| !p.value.all_finite()) {
            return Some(format!("parameter {}", p.name));
        }
        let mut named: Vec<(String, Var)> = vec![("phrase features".into(), self.phrases)];
        let mut adapters = self.adapters.iter().peekable();
        for (i, b) in self.blocks.iter().enumerate() {
            named.push((format!("unet block {i} F_itm"), b.f_itm));
            while let Some(a) = adapters.next_if(|a| a.block == i) {
                named.push((format!("adapter block {i} R_itm"), a.r_itm));
                named.push((format!("adapter block {i} attention map"), a.map));
                named.push((format!("adapter block {i} output"), a.r));
            }
            if let Some(m) = b.map {
                named.push((format!("unet block {i} attention map"), m));
            }
            named.push((format!("unet block {i} output"), b.f));
        }
        named.extend(self.dif.map(|v| ("diffusion head logits".to_string(), v)));
        for (k, &(m, c)) in self.ada.iter().enumerate() {
            named.push((format!("adapter head {k} mask logits"), m));
            named.push((format!("adapter head {k} class logits"), c));
        }
        named.extend(self.f_m.map(|v| ("mask feature F_m".to_string(), v)));
        for (k, p) in self.dec.iter().enumerate() {
            named.push((format!("decoder prediction {k} mask logits"), p.mask));
            named.push((format!("decoder prediction {k} class logits"), p.class));
        }
        named.into_iter().find(|(_, v)| !g.value(*v).all_finite()).map(|(n, _)| n)
    }
}

/// Loss value on the tape plus its logged breakdown.
pub struct Loss {
    pub total: Var,
    pub report: LossReport,
}

impl Model {
    /// Builds the model and a freshly initialised parameter store.
    pub fn new(cfg: &ModelConfig, vocab_len: usize, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let text = TextEncoder::new(&mut init, "text", vocab_len, &cfg.text)?;
        let backbone = Backbone::new(&mut init, &cfg.unet, cfg.text.dim, cfg.mlma.dim)?;
        let eipa = Eipa::new(&mut init, &cfg.unet, cfg.text.dim, &cfg.adapter)?;
        let dif = DiffusionHead::new(&mut init, "heads.dif", cfg.unet.blocks.len())?;
        let mlma = Mlma::new(&mut init, &cfg.mlma, &cfg.unet, cfg.text.dim)?;
        let layers = if cfg.mlma.enabled { cfg.decoder.layers } else { 0 };
        let decoder = Decoder::new(&mut init, &cfg.decoder, layers, cfg.mlma.dim)?;
        Ok((Self { cfg: cfg.clone(), text, backbone, eipa, dif, mlma, decoder }, store))
    }

    /// Dynamic when any block carries an adapter.
    pub fn default_prompting(&self) -> Prompting {
        if self.eipa.count() > 0 {
            Prompting::Dynamic
        } else {
            Prompting::Static
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: &Prepared, mode: Prompting) -> Result<ModelOutput> {
        let out_hw = (x.height, x.width);
        let image = g.constant(x.image.cast());
        let latent = self.backbone.encode_latent(g, s, image)?;
        let words = self.text.encode_words(g, s, &x.ids)?;
        let phrases = pool_phrases(g, words, &x.spans)?;
        let n = x.phrases();
        let (bb, states, records) = match mode {
            Prompting::Static => {
                let bb = self.backbone.forward(g, s, latent, &mut StaticPrompt(phrases))?;
                (bb, vec![phrases; self.backbone.blocks.len()], Vec::new())
            }
            Prompting::Dynamic => {
                let mut bypass = Bypass::new(&self.eipa, &self.dif, phrases);
                let bb = self.backbone.forward(g, s, latent, &mut bypass)?;
                (bb, bypass.states, bypass.records)
            }
        };
        let level_phrases = self.backbone.level_source.map(|i| states[i]);
        let mut out = ModelOutput {
            phrases,
            blocks: bb.blocks,
            adapters: records,
            dif: None,
            ada: Vec::new(),
            dec: Vec::new(),
            level_phrases,
            f_m: None,
        };
        if n == 0 {
            return Ok(out);
        }
        let maps = out
            .blocks
            .iter()
            .map(|b| b.map.map(|m| GridMap { map: m, h: b.h, w: b.w }))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Validation("missing cross-attention map".into()))?;
        out.dif = Some(self.dif.forward(g, s, &maps, out_hw)?);
        if !out.adapters.is_empty() {
            out.ada = self.eipa.head.predictions(g, s, &out.adapters, out_hw)?;
        }
        let m = self.mlma.forward(g, s, bb.levels, level_phrases, bb.f_hat2)?;
        let dec = self.decoder.forward(g, s, m.phrases[2], &m.levels, &m.dims, m.f_m, out_hw)?;
        out.dec = dec.predictions;
        out.f_m = Some(m.f_m);
        Ok(out)
    }

    /// Total loss: Diffusion term plus mask-classification terms for every
    /// adapter block and every decoder prediction.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, out: &ModelOutput, t: &Targets) -> Result<Loss> {
        let cfg = &self.cfg.loss;
        let mut report = LossReport::default();
        let mut terms: Vec<Var> = Vec::new();
        if let Some(dif) = out.dif {
            match loss_dif(g, dif, t)? {
                Some(l) => {
                    report.loss_dif = g.value(l).data()[0].as_f64();
                    terms.push(l);
                }
                None => report.no_grounded = true,
            }
        }
        let mut parts = LossParts::default();
        for (preds, slot) in [(out.ada.clone(), &mut report.loss_ada), (out.dec.iter().map(|p| (p.mask, p.class)).collect(), &mut report.loss_dec)] {
            for (mask, class) in preds {
                let (l, p) = loss_mask_cls(g, mask, class, t, cfg)?;
                *slot += g.value(l).data()[0].as_f64();
                parts += p;
                terms.push(l);
            }
        }
        report.bce = parts.bce;
        report.dice = parts.dice;
        report.cls = parts.cls;
        let total = match terms.split_first() {
            None => g.constant(Tensor::zeros([1])),
            Some((&first, rest)) => {
                let mut acc = first;
                for &t in rest {
                    acc = g.add(acc, t)?;
                }
                acc
            }
        };
        report.total = g.value(total).data()[0].as_f64();
        Ok(Loss { total, report })
    }

    /// Binary masks (sigmoid >= 0.5) from the selected head, one row-major
    /// `H0*W0` vector per phrase.
    pub fn predict_masks(&self, s: &ParamStore<f32>, x: &Prepared, head: Head) -> Result<Vec<Vec<bool>>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, s, x, self.default_prompting())?;
        let n = x.phrases();
        let Some(v) = out.head_logits(head) else {
            return Ok(vec![vec![false; x.height * x.width]; n]);
        };
        let data = g.value(v).data();
        Ok((0..n).map(|j| data.chunks(n).map(|row| row[j] >= 0.0).collect()).collect())
    }

    /// Parameter-name prefixes, for summaries.
    pub const PREFIXES: [&'static str; 8] = ["text.", "latent_enc.", "unet.", "latent_dec.", "eipa.", "heads.", "mlma.", "decoder."];
}
