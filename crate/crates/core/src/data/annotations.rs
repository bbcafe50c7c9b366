//! Versioned JSON annotation container.
//!
//! Images are stored as base64 little-endian `f32` arrays, so round trips are
//! bit-exact. Masks are run-length encoded over row-major order as
//! `(value, run_length)` pairs whose runs cover `H * W` exactly.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use dynprompt_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::{GroundingSample, Mask, PhraseAnnotation, CATEGORIES};
use crate::error::{io_err, parse_json, Error, Result};

pub const ANNOTATION_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRecord {
    version: u32,
    categories: Vec<CategoryRecord>,
    samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct CategoryRecord {
    id: usize,
    name: String,
    is_thing: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    height: usize,
    width: usize,
    image: String,
    caption: Vec<String>,
    phrases: Vec<PhraseRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhraseRecord {
    word_span: [usize; 2],
    category_id: usize,
    is_thing: bool,
    is_plural: bool,
    grounded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<(u8, usize)>>,
}

/// Run-length encodes a mask as `(value, run_length)` pairs.
pub fn rle_encode(mask: &Mask) -> Vec<(u8, usize)> {
    let mut runs: Vec<(u8, usize)> = Vec::new();
    for &b in &mask.bits {
        match runs.last_mut() {
            Some((v, n)) if *v == b as u8 => *n += 1,
            _ => runs.push((b as u8, 1)),
        }
    }
    runs
}

pub fn rle_decode(runs: &[(u8, usize)], height: usize, width: usize) -> Result<Mask> {
    let mut bits = Vec::with_capacity(height * width);
    for &(v, n) in runs {
        if v > 1 || n == 0 {
            return Err(Error::Validation(format!("bad run ({v}, {n})")));
        }
        if bits.len() + n > height * width {
            return Err(Error::Validation(format!("runs exceed {height}x{width} pixels")));
        }
        bits.extend(std::iter::repeat(v == 1).take(n));
    }
    if bits.len() != height * width {
        return Err(Error::Validation(format!("runs cover {} of {} pixels", bits.len(), height * width)));
    }
    Ok(Mask { height, width, bits })
}

fn encode_image(image: &Tensor<f32>) -> String {
    let bytes: Vec<u8> = image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_image(text: &str, h: usize, w: usize) -> Result<Tensor<f32>> {
    let bytes = STANDARD.decode(text).map_err(|e| Error::Validation(format!("image is not base64: {e}")))?;
    if bytes.len() != h * w * 3 * 4 {
        return Err(Error::Validation(format!("image holds {} bytes, expected {}", bytes.len(), h * w * 12)));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Tensor::new(vec![h, w, 3], data)?)
}

fn category_table() -> Vec<CategoryRecord> {
    CATEGORIES.iter().map(|c| CategoryRecord { id: c.id, name: c.name.into(), is_thing: c.is_thing }).collect()
}

pub fn save_annotations(samples: &[GroundingSample], path: &Path) -> Result<()> {
    let records = samples
        .iter()
        .map(|s| SampleRecord {
            height: s.height(),
            width: s.width(),
            image: encode_image(&s.image),
            caption: s.caption.clone(),
            phrases: s
                .phrases
                .iter()
                .map(|p| PhraseRecord {
                    word_span: p.word_span,
                    category_id: p.category_id,
                    is_thing: p.is_thing,
                    is_plural: p.is_plural,
                    grounded: p.grounded,
                    mask: p.mask.as_ref().map(rle_encode),
                })
                .collect(),
        })
        .collect();
    let file = FileRecord { version: ANNOTATION_VERSION, categories: category_table(), samples: records };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string(&file).expect("annotations serialize");
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn load_annotations(path: &Path) -> Result<Vec<GroundingSample>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let file: FileRecord = parse_json(path, &text)?;
    if file.version != ANNOTATION_VERSION {
        return Err(Error::Validation(format!("annotation version {} (expected {ANNOTATION_VERSION})", file.version)));
    }
    if file.categories != category_table() {
        return Err(Error::Validation("category table differs from the built-in one".into()));
    }
    file.samples
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let ctx = |e: Error| Error::Validation(format!("sample {i}: {e}"));
            let image = decode_image(&r.image, r.height, r.width).map_err(ctx)?;
            let phrases = r
                .phrases
                .into_iter()
                .map(|p| {
                    let mask = p.mask.map(|runs| rle_decode(&runs, r.height, r.width)).transpose()?;
                    Ok(PhraseAnnotation {
                        word_span: p.word_span,
                        category_id: p.category_id,
                        is_thing: p.is_thing,
                        is_plural: p.is_plural,
                        grounded: p.grounded,
                        mask,
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(ctx)?;
            let sample = GroundingSample { image, caption: r.caption, phrases };
            sample.validate().map_err(ctx)?;
            for (j, p) in sample.phrases.iter().enumerate() {
                if p.is_thing != CATEGORIES[p.category_id].is_thing {
                    return Err(Error::Validation(format!("sample {i}: phrase {j}: is_thing disagrees with category")));
                }
            }
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_round_trip_and_coverage() {
        let m = Mask { height: 2, width: 3, bits: vec![true, true, false, false, false, true] };
        let runs = rle_encode(&m);
        assert_eq!(runs, vec![(1, 2), (0, 3), (1, 1)]);
        assert_eq!(rle_decode(&runs, 2, 3).unwrap(), m);
        assert!(rle_decode(&[(1, 2), (0, 3)], 2, 3).is_err());
        assert!(rle_decode(&[(1, 7)], 2, 3).is_err());
        assert!(rle_decode(&[(2, 6)], 2, 3).is_err());
    }
}
