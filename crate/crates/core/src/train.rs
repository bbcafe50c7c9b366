//! AdamW training loop with per-sample tapes and freeze handling.

use dynprompt_autodiff::{Graph, ParamGrads, ParamId, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{FreezeConfig, OptimConfig, RunConfig};
use crate::data::{GroundingSample, Vocabulary};
use crate::error::{Error, Result};
use crate::heads::LossReport;
use crate::model::{Model, Prepared};

/// Prefixes frozen by `freeze.backbone`.
pub const BACKBONE_PREFIXES: [&str; 2] = ["latent_enc.", "unet."];
pub const TEXT_PREFIX: &str = "text.";

/// Sets frozen flags from the config; `active` false unfreezes everything
/// the config would freeze. Returns the number of frozen parameters.
pub fn apply_freeze(store: &mut ParamStore<f32>, f: &FreezeConfig, active: bool) -> usize {
    let mut n = 0;
    for p in BACKBONE_PREFIXES {
        let hit = store.set_frozen(p, active && f.backbone);
        if active && f.backbone {
            n += hit;
        }
    }
    let hit = store.set_frozen(TEXT_PREFIX, active && f.text_encoder);
    if active && f.text_encoder {
        n += hit;
    }
    n
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update at learning rate `lr` of every non-frozen parameter that
    /// received a gradient.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &ParamGrads<f32>, cfg: &OptimConfig, lr: f64) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = (b1 * *mi as f64 + (1.0 - b1) * gi) as f32;
                *vi = (b2 * *vi as f64 + (1.0 - b2) * gi * gi) as f32;
                let mhat = *mi as f64 / bc1;
                let vhat = *vi as f64 / bc2;
                let wd = *w as f64 * (1.0 - lr * cfg.weight_decay);
                *w = (wd - lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
            }
        }
    }
}

/// Model, parameters and optimiser of one training run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub opt: AdamW,
    pub step: usize,
    corpus: Vec<Prepared>,
}

/// Corpus indices of the batch at `step`: consecutive slices of a fresh
/// seeded permutation per epoch, so a resumed run sees the same order.
pub fn batch_indices(seed: u64, len: usize, batch: usize, step: usize) -> Vec<usize> {
    let mut order: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|j| {
            let pos = step * batch + j;
            let epoch = pos / len;
            if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                order = Some((epoch, epoch_order(seed, epoch, len)));
            }
            order.as_ref().map(|(_, o)| o[pos % len]).unwrap_or(0)
        })
        .collect()
}

fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut o: Vec<usize> = (0..len).collect();
    o.shuffle(&mut rng);
    o
}

impl Trainer {
    pub fn new(cfg: &RunConfig, corpus: &[GroundingSample], vocab: &Vocabulary) -> Result<Self> {
        let (model, store) = Model::new(&cfg.model, vocab.len(), cfg.seed)?;
        let opt = AdamW::new(&store);
        Self::resume(cfg, model, store, opt, 0, corpus, vocab)
    }

    pub fn resume(
        cfg: &RunConfig,
        model: Model,
        mut store: ParamStore<f32>,
        opt: AdamW,
        step: usize,
        corpus: &[GroundingSample],
        vocab: &Vocabulary,
    ) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::Validation("training corpus is empty".into()));
        }
        let corpus = corpus.iter().map(|s| Prepared::new(s, vocab)).collect::<Result<Vec<_>>>()?;
        apply_freeze(&mut store, &cfg.freeze, step >= cfg.freeze.after_steps);
        Ok(Self { cfg: cfg.clone(), model, store, opt, step, corpus })
    }

    fn next_batch(&self) -> Vec<usize> {
        batch_indices(self.cfg.seed, self.corpus.len(), self.cfg.optim.batch_size, self.step)
    }

    pub fn corpus(&self) -> &[Prepared] {
        &self.corpus
    }

    /// Loss and gradients of one sample.
    pub fn sample_grads(&self, index: usize) -> Result<(LossReport, ParamGrads<f32>)> {
        let x = &self.corpus[index];
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, &self.store, x, self.model.default_prompting())?;
        let loss = self.model.loss(&mut g, &out, &x.targets)?;
        if !loss.report.total.is_finite() {
            let what = out.first_non_finite(&g, &self.store).unwrap_or_else(|| "total loss".into());
            return Err(Error::NonFinite(format!("sample {index}: {what}")));
        }
        let grads = g.backward(loss.total)?.into_params();
        for (id, t) in grads.iter() {
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("sample {index}: gradient of {}", self.store.get(id).name)));
            }
        }
        Ok((loss.report, grads))
    }

    /// One optimiser step on the next batch. On a non-finite value the
    /// parameters are left untouched and the error names the tensor.
    pub fn train_step(&mut self) -> Result<LossReport> {
        if self.step == self.cfg.freeze.after_steps {
            apply_freeze(&mut self.store, &self.cfg.freeze, true);
        }
        let batch = self.next_batch();
        let mut report = LossReport::default();
        let mut acc = ParamGrads::empty(self.store.len());
        for &i in &batch {
            let (r, g) = self.sample_grads(i)?;
            report.accumulate(&r);
            acc.accumulate(&g);
        }
        let inv = 1.0 / batch.len() as f64;
        acc.scale(inv as f32);
        let norm = acc.global_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite("accumulated gradient".into()));
        }
        if self.cfg.optim.grad_clip > 0.0 && norm > self.cfg.optim.grad_clip {
            acc.scale((self.cfg.optim.grad_clip / norm) as f32);
        }
        let mut store = self.store.clone();
        let mut opt = self.opt.clone();
        opt.update(&mut store, &acc, &self.cfg.optim, self.cfg.optim.lr_at(self.step));
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.value.all_finite()) {
            return Err(Error::NonFinite(format!("parameter {} after update", p.name)));
        }
        self.store = store;
        self.opt = opt;
        self.step += 1;
        Ok(report.scaled(inv))
    }

    /// Mean loss over the whole corpus without updating anything.
    pub fn corpus_loss(&self) -> Result<LossReport> {
        let mut report = LossReport::default();
        for (i, x) in self.corpus.iter().enumerate() {
            let mut g = Graph::inference();
            let out = self.model.forward(&mut g, &self.store, x, self.model.default_prompting())?;
            let l = self.model.loss(&mut g, &out, &x.targets)?;
            if !l.report.total.is_finite() {
                return Err(Error::NonFinite(format!("sample {i}: total loss")));
            }
            report.accumulate(&l.report);
        }
        Ok(report.scaled(1.0 / self.corpus.len() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dynprompt_autodiff::Tensor;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_f64([2], &[1.0, -1.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&s);
        let cfg = OptimConfig { weight_decay: 0.0, ..Default::default() };
        let mut g = ParamGrads::empty(1);
        let mut gr = Graph::new();
        let w = gr.param(&s, id);
        let l = gr.sum(w);
        g.accumulate(gr.backward(l).unwrap().params());
        opt.update(&mut s, &g, &cfg, cfg.lr);
        let v = s.get(id).value.data();
        assert!((v[0] - (1.0 - 1e-4)).abs() < 1e-6);
        assert!((v[1] - (-1.0 - 1e-4)).abs() < 1e-6);
    }

    #[test]
    fn freeze_sets_prefixes() {
        let mut s = ParamStore::new();
        for n in ["unet.a", "latent_enc.b", "text.c", "eipa.d", "latent_dec.e"] {
            s.add(n, Tensor::<f32>::zeros([1])).unwrap();
        }
        let f = FreezeConfig { backbone: true, text_encoder: true, after_steps: 0 };
        assert_eq!(apply_freeze(&mut s, &f, true), 3);
        let frozen: Vec<_> = s.iter().filter(|(_, p)| p.frozen).map(|(_, p)| p.name.clone()).collect();
        assert_eq!(frozen, vec!["unet.a", "latent_enc.b", "text.c"]);
        assert_eq!(apply_freeze(&mut s, &f, false), 0);
        assert!(s.iter().all(|(_, p)| !p.frozen));
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let mut o = epoch_order(3, 1, 7);
        o.sort();
        assert_eq!(o, (0..7).collect::<Vec<_>>());
    }
}
