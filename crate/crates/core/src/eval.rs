//! Per-phrase evaluation of a model (or of the ground truth itself).

use dynprompt_autodiff::ParamStore;

use crate::config::Head;
use crate::data::{GroundingSample, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{iou, EvalRecord, Evaluation};
use crate::model::{Model, Prepared};

/// Where predicted masks come from.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Model { model: &'a Model, store: &'a ParamStore<f32>, head: Head },
    /// Ground truth scored against itself.
    GroundTruth,
}

/// One record per grounded phrase with a non-empty mask; `preds` holds a
/// row-major mask per phrase of `sample`.
pub fn sample_records(index: usize, sample: &GroundingSample, preds: &[Vec<bool>]) -> Result<Vec<EvalRecord>> {
    if preds.len() != sample.phrases.len() {
        return Err(Error::Validation(format!("{} predictions for {} phrases", preds.len(), sample.phrases.len())));
    }
    let mut out = Vec::new();
    for (j, (p, pred)) in sample.phrases.iter().zip(preds).enumerate() {
        let Some(gt) = p.mask.as_ref().filter(|m| p.grounded && m.area() > 0) else { continue };
        out.push(EvalRecord::new(index, j, iou(pred, &gt.bits)?, p.is_thing, p.is_plural)?);
    }
    Ok(out)
}

/// Predicts every sample and scores it.
pub fn evaluate(predictor: Predictor<'_>, samples: &[GroundingSample], vocab: &Vocabulary) -> Result<(Vec<EvalRecord>, Evaluation)> {
    let mut records = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let preds = match predictor {
            Predictor::Model { model, store, head } => model.predict_masks(store, &Prepared::new(s, vocab)?, head)?,
            Predictor::GroundTruth => s
                .phrases
                .iter()
                .map(|p| p.mask.as_ref().map_or_else(|| vec![false; s.height() * s.width()], |m| m.bits.clone()))
                .collect(),
        };
        records.extend(sample_records(i, s, &preds)?);
    }
    let ev = Evaluation::new(&records)?;
    Ok((records, ev))
}
