//! Run orchestration: corpora, the training loop with checkpoints and loss
//! logs, and corpus digests.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{hex, RunConfig};
use crate::data::{generate_corpus_parallel, GroundingSample, Vocabulary};
use crate::error::{io_err, Error, Result};
use crate::heads::LossReport;
use crate::train::{batch_indices, Trainer};

/// Mixed into the run seed for the held-out corpus.
const EVAL_SEED_SALT: u64 = 0x5eed_e7a1_0000_0001;

/// Environment variable overriding every output directory.
pub const OUT_DIR_ENV: &str = "DYNPROMPT_OUT_DIR";

/// `DYNPROMPT_OUT_DIR` when set, otherwise `default`.
pub fn output_dir(default: &Path) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| default.to_path_buf())
}

pub fn train_corpus(cfg: &RunConfig, threads: usize) -> Result<Vec<GroundingSample>> {
    generate_corpus_parallel(&cfg.data, cfg.seed, cfg.data.train_samples, threads)
}

pub fn eval_corpus(cfg: &RunConfig, threads: usize) -> Result<Vec<GroundingSample>> {
    generate_corpus_parallel(&cfg.data, cfg.seed ^ EVAL_SEED_SALT, cfg.data.eval_samples, threads)
}

/// Digest of the training data a run sees: every sample and the order in
/// which the configured step budget visits them.
pub fn corpus_digest(cfg: &RunConfig, corpus: &[GroundingSample]) -> String {
    let mut h = Sha256::new();
    for s in corpus {
        for v in s.image.data() {
            h.update(v.to_le_bytes());
        }
        for w in &s.caption {
            h.update(w.as_bytes());
            h.update([0]);
        }
        for p in &s.phrases {
            h.update(format!("{:?}{}{}{}{}", p.word_span, p.category_id, p.is_thing, p.is_plural, p.grounded).as_bytes());
            if let Some(m) = &p.mask {
                h.update(m.bits.iter().map(|&b| b as u8).collect::<Vec<u8>>());
            }
        }
    }
    for step in 0..cfg.optim.steps {
        for i in batch_indices(cfg.seed, corpus.len().max(1), cfg.optim.batch_size, step) {
            h.update((i as u64).to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Where a run writes its checkpoints and loss log.
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn checkpoint_path(&self, step: Option<usize>) -> PathBuf {
        match step {
            Some(s) => self.dir.join(format!("checkpoint-{s:06}.json")),
            None => self.dir.join("checkpoint.json"),
        }
    }

    pub fn last_good_path(&self) -> PathBuf {
        self.dir.join("checkpoint-last-good.json")
    }
}

fn save(trainer: &Trainer, vocab: &Vocabulary, path: &Path) -> Result<()> {
    Checkpoint::capture(&trainer.cfg, vocab, &trainer.store, &trainer.opt, trainer.step).save(path)?;
    info!("saved {}", path.display());
    Ok(())
}

/// Runs `trainer` up to `cfg.optim.steps`, calling `on_step` with each
/// step's mean loss. With an output directory, losses go to `losses.csv`,
/// checkpoints are written every `checkpoint_every` steps and at the end,
/// and a failing step leaves the last good state in
/// `checkpoint-last-good.json`.
pub fn run_training(
    trainer: &mut Trainer,
    vocab: &Vocabulary,
    out: Option<&RunOutput>,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<Vec<LossReport>> {
    let total = trainer.cfg.optim.steps;
    let every = trainer.cfg.optim.checkpoint_every;
    let mut log = match out {
        Some(o) => {
            let path = o.dir.join("losses.csv");
            let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
            writeln!(f, "step,total,loss_dif,loss_ada,loss_dec,bce,dice,cls").map_err(io_err(&path))?;
            Some((f, path))
        }
        None => None,
    };
    let mut reports = Vec::with_capacity(total.saturating_sub(trainer.step));
    while trainer.step < total {
        let step = trainer.step;
        let report = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                if let Some(o) = out {
                    let path = o.last_good_path();
                    save(trainer, vocab, &path)?;
                    warn!("step {step} failed; last good state in {}", path.display());
                }
                return Err(e);
            }
        };
        if let Some((f, path)) = log.as_mut() {
            writeln!(
                f,
                "{step},{},{},{},{},{},{},{}",
                report.total, report.loss_dif, report.loss_ada, report.loss_dec, report.bce, report.dice, report.cls
            )
            .map_err(io_err(path.as_path()))?;
        }
        on_step(step, &report);
        reports.push(report);
        if let Some(o) = out {
            if every > 0 && trainer.step % every == 0 && trainer.step < total {
                save(trainer, vocab, &o.checkpoint_path(Some(trainer.step)))?;
            }
        }
    }
    if let Some(o) = out {
        save(trainer, vocab, &o.checkpoint_path(None))?;
    }
    Ok(reports)
}

/// Trains a fresh model on `corpus` for the configured budget.
pub fn train_new(cfg: &RunConfig, corpus: &[GroundingSample], vocab: &Vocabulary, out: Option<&RunOutput>) -> Result<(Trainer, Vec<LossReport>)> {
    if corpus.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    let mut trainer = Trainer::new(cfg, corpus, vocab)?;
    let log_every = (cfg.optim.steps / 20).max(1);
    let reports = run_training(&mut trainer, vocab, out, |step, r| {
        if step % log_every == 0 {
            info!("step {step} loss {:.4} (dif {:.4} ada {:.4} dec {:.4})", r.total, r.loss_dif, r.loss_ada, r.loss_dec);
        }
    })?;
    Ok((trainer, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::param_hash;
    use crate::gradcheck::micro_config;

    fn small() -> (RunConfig, Vec<GroundingSample>) {
        let mut cfg = micro_config();
        cfg.optim.steps = 2;
        cfg.optim.batch_size = 1;
        let corpus = crate::data::generate_corpus(&cfg.data, 1, 2).unwrap();
        (cfg, corpus)
    }

    #[test]
    fn zero_steps_keep_initialisation() {
        let (mut cfg, corpus) = small();
        cfg.optim.steps = 0;
        let vocab = Vocabulary::builtin();
        let (t, reports) = train_new(&cfg, &corpus, &vocab, None).unwrap();
        assert!(reports.is_empty());
        let (_, init) = crate::model::Model::new(&cfg.model, vocab.len(), cfg.seed).unwrap();
        assert_eq!(param_hash(&t.store, |_| true), param_hash(&init, |_| true));
    }

    #[test]
    fn outputs_are_written() {
        let (mut cfg, corpus) = small();
        cfg.optim.checkpoint_every = 1;
        let dir = std::env::temp_dir().join(format!("dynprompt-run-{}", std::process::id()));
        let out = RunOutput::new(&dir).unwrap();
        train_new(&cfg, &corpus, &Vocabulary::builtin(), Some(&out)).unwrap();
        assert!(out.checkpoint_path(None).exists());
        assert!(out.checkpoint_path(Some(1)).exists());
        let log = std::fs::read_to_string(dir.join("losses.csv")).unwrap();
        assert_eq!(log.lines().count(), 3);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn digest_tracks_budget_and_data() {
        let (cfg, corpus) = small();
        let d = corpus_digest(&cfg, &corpus);
        assert_eq!(d, corpus_digest(&cfg, &corpus));
        let mut longer = cfg.clone();
        longer.optim.steps += 1;
        assert_ne!(d, corpus_digest(&longer, &corpus));
        assert_ne!(d, corpus_digest(&cfg, &corpus[..1]));
    }
}
