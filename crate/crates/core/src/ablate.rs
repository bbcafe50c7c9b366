//! Ablation driver: trains each variant of one axis under the same seed,
//! data order and step budget, and tabulates held-out AR.

use std::fmt::Write as _;
use std::str::FromStr;

use log::info;
use serde::Serialize;

use crate::config::{AdapterPosition, Head, RunConfig};
use crate::data::{GroundingSample, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Predictor};
use crate::harness::{corpus_digest, train_new};
use crate::metrics::{Evaluation, Subset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Adapter on/off crossed with MLMA on/off.
    Eipa,
    /// Cumulative MLMA components.
    Mlma,
    /// Where adapters sit in the UNet.
    AdapterPosition,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eipa" => Ok(Axis::Eipa),
            "mlma" => Ok(Axis::Mlma),
            "adapter_position" | "adapter-position" => Ok(Axis::AdapterPosition),
            other => Err(Error::Config(format!("unknown ablation axis {other:?} (expected eipa, mlma or adapter_position)"))),
        }
    }
}

/// Named configurations of one axis, derived from `base`.
pub fn variants(base: &RunConfig, axis: Axis) -> Vec<(&'static str, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Eipa => vec![
            ("Static", with(&|c| {
                c.model.adapter.position = AdapterPosition::None;
                c.model.mlma.enabled = false;
            })),
            ("EIPA", with(&|c| {
                c.model.adapter.position = AdapterPosition::Both;
                c.model.mlma.enabled = false;
            })),
            ("MLMA", with(&|c| {
                c.model.adapter.position = AdapterPosition::None;
                c.model.mlma.enabled = true;
            })),
            ("EIPA+MLMA", with(&|c| {
                c.model.adapter.position = AdapterPosition::Both;
                c.model.mlma.enabled = true;
            })),
        ],
        Axis::Mlma => vec![
            ("Deform", with(&|c| {
                c.model.mlma.enabled = true;
                c.model.mlma.bi_attention = false;
                c.model.mlma.text_self_attention = false;
            })),
            ("Deform+BiAttn", with(&|c| {
                c.model.mlma.enabled = true;
                c.model.mlma.bi_attention = true;
                c.model.mlma.text_self_attention = false;
            })),
            ("Deform+BiAttn+TextSA", with(&|c| {
                c.model.mlma.enabled = true;
                c.model.mlma.bi_attention = true;
                c.model.mlma.text_self_attention = true;
            })),
        ],
        Axis::AdapterPosition => [
            ("No-Adapter", AdapterPosition::None),
            ("Encoder", AdapterPosition::Encoder),
            ("Decoder", AdapterPosition::Decoder),
            ("Encoder-Decoder", AdapterPosition::Both),
        ]
        .into_iter()
        .map(|(name, p)| (name, with(&|c| c.model.adapter.position = p)))
        .collect(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub final_loss: f64,
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub axis: Axis,
    /// Shared by every variant.
    pub corpus_digest: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn ar(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).and_then(|r| r.evaluation.overall())
    }

    /// `variant,overall,things,stuff,singulars,plurals`; empty subsets read `empty`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant");
        for s in Subset::ALL {
            write!(out, ",{}", s.name()).unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.variant);
            for s in Subset::ALL {
                match r.evaluation.get(s).ar() {
                    Some(v) => write!(out, ",{v:.4}").unwrap(),
                    None => out.push_str(",empty"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trains every variant of `axis` on `train` and evaluates it on `held_out`
/// with `head`. Fails if two variants would see different data or budgets.
pub fn ablate(
    base: &RunConfig,
    axis: Axis,
    train: &[GroundingSample],
    held_out: &[GroundingSample],
    vocab: &Vocabulary,
    head: Head,
) -> Result<AblationTable> {
    let vs = variants(base, axis);
    let digest = corpus_digest(base, train);
    let mut rows = Vec::with_capacity(vs.len());
    for (name, cfg) in vs {
        let d = corpus_digest(&cfg, train);
        if d != digest {
            return Err(Error::Validation(format!("variant {name} sees corpus digest {d}, expected {digest}")));
        }
        info!("ablation {axis:?}: training {name} (corpus digest {d})");
        let (trainer, reports) = train_new(&cfg, train, vocab, None)?;
        let (_, evaluation) = evaluate(Predictor::Model { model: &trainer.model, store: &trainer.store, head }, held_out, vocab)?;
        info!("ablation {axis:?}: {name} {}", evaluation.summary());
        rows.push(AblationRow { variant: name.into(), final_loss: reports.last().map_or(f64::NAN, |r| r.total), evaluation });
    }
    Ok(AblationTable { axis, corpus_digest: digest, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_sets() {
        let base = RunConfig::default();
        let names = |a| variants(&base, a).into_iter().map(|(n, _)| n).collect::<Vec<_>>();
        assert_eq!(names(Axis::AdapterPosition), ["No-Adapter", "Encoder", "Decoder", "Encoder-Decoder"]);
        assert_eq!(names(Axis::Mlma), ["Deform", "Deform+BiAttn", "Deform+BiAttn+TextSA"]);
        assert_eq!(names(Axis::Eipa), ["Static", "EIPA", "MLMA", "EIPA+MLMA"]);
        for a in [Axis::Eipa, Axis::Mlma, Axis::AdapterPosition] {
            for (_, c) in variants(&base, a) {
                c.validate().unwrap();
                assert_eq!((c.seed, c.optim.steps, c.optim.batch_size), (base.seed, base.optim.steps, base.optim.batch_size));
            }
        }
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("adapter_position".parse::<Axis>().unwrap(), Axis::AdapterPosition);
        assert!("decoder".parse::<Axis>().is_err());
    }
}
