//! Rendered figures: argmax-phrase attention panels and mask overlays.

use std::path::{Path, PathBuf};

use dynprompt_autodiff::{Graph, ParamStore, Tensor};
use image::{Rgb, RgbImage};

use crate::config::Head;
use crate::data::{GroundingSample, Vocabulary};
use crate::error::{io_err, Error, Result};
use crate::model::{Model, Prepared};

/// Distinct colour for phrase `i`.
pub fn palette(i: usize) -> [u8; 3] {
    const BASE: [[u8; 3]; 10] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [0, 128, 128],
    ];
    let c = BASE[i % BASE.len()];
    let shade = 1.0 / (1.0 + (i / BASE.len()) as f32 * 0.5);
    c.map(|v| (v as f32 * shade) as u8)
}

/// Per-pixel argmax over phrases of `map [N, h*w]`, scaled by nearest
/// neighbour to `out_h x out_w`. Ties go to the lowest phrase index.
pub fn argmax_panel(map: &[f64], n: usize, (h, w): (usize, usize), (out_h, out_w): (usize, usize)) -> Result<RgbImage> {
    if n == 0 || map.len() != n * h * w {
        return Err(Error::Validation(format!("attention map of {} values is not [{n}, {h}x{w}]", map.len())));
    }
    let labels: Vec<usize> = (0..h * w)
        .map(|p| (1..n).fold(0, |best, j| if map[j * h * w + p] > map[best * h * w + p] { j } else { best }))
        .collect();
    Ok(RgbImage::from_fn(out_w as u32, out_h as u32, |x, y| {
        let (sy, sx) = (y as usize * h / out_h, x as usize * w / out_w);
        Rgb(palette(labels[sy * w + sx]))
    }))
}

/// Blends each phrase's mask colour over the image (`[H, W, 3]` in `[0, 1]`).
pub fn overlay(image: &Tensor<f32>, masks: &[Vec<bool>], alpha: f32) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Validation(format!("image shape {s:?} is not [H, W, 3]")));
    }
    let (h, w) = (s[0], s[1]);
    if let Some(m) = masks.iter().find(|m| m.len() != h * w) {
        return Err(Error::Validation(format!("mask of {} pixels on a {h}x{w} image", m.len())));
    }
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let mut px = [0, 1, 2].map(|c| d[p * 3 + c].clamp(0.0, 1.0) * 255.0);
        for (j, m) in masks.iter().enumerate() {
            if m[p] {
                let col = palette(j);
                for c in 0..3 {
                    px[c] = (1.0 - alpha) * px[c] + alpha * col[c] as f32;
                }
            }
        }
        Rgb(px.map(|v| v.round() as u8))
    }))
}

/// Ground-truth masks per phrase (empty for ungrounded phrases).
pub fn ground_truth_masks(sample: &GroundingSample) -> Vec<Vec<bool>> {
    let p = sample.height() * sample.width();
    sample.phrases.iter().map(|ph| ph.mask.as_ref().filter(|_| ph.grounded).map_or_else(|| vec![false; p], |m| m.bits.clone())).collect()
}

fn save(img: &RgbImage, path: PathBuf, written: &mut Vec<PathBuf>) -> Result<()> {
    img.save(&path)?;
    written.push(path);
    Ok(())
}

/// Writes `image.png`, `gt.png`, `pred.png` (the `head` masks) and one
/// `attention_blockNN.png` per adapter block (per UNet block when the model
/// has no adapters). Returns the written paths.
pub fn visualize(model: &Model, store: &ParamStore<f32>, sample: &GroundingSample, vocab: &Vocabulary, head: Head, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let x = Prepared::new(sample, vocab)?;
    let hw = (x.height, x.width);
    let n = x.phrases();
    let mut written = Vec::new();
    save(&overlay(&sample.image, &[], 0.0)?, dir.join("image.png"), &mut written)?;
    save(&overlay(&sample.image, &ground_truth_masks(sample), 0.6)?, dir.join("gt.png"), &mut written)?;
    let preds = model.predict_masks(store, &x, head)?;
    save(&overlay(&sample.image, &preds, 0.6)?, dir.join("pred.png"), &mut written)?;
    if n == 0 {
        return Ok(written);
    }
    let mut g = Graph::inference();
    let out = model.forward(&mut g, store, &x, model.default_prompting())?;
    if out.adapters.is_empty() {
        for (i, b) in out.blocks.iter().enumerate() {
            let Some(m) = b.map else { continue };
            let t = g.transpose(m)?;
            let map = g.value(t).to_f64_vec();
            save(&argmax_panel(&map, n, (b.h, b.w), hw)?, dir.join(format!("attention_block{i:02}.png")), &mut written)?;
        }
    } else {
        for r in &out.adapters {
            let map = g.value(r.map).to_f64_vec();
            save(&argmax_panel(&map, n, (r.h, r.w), hw)?, dir.join(format!("attention_block{:02}.png", r.block)), &mut written)?;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_attention_is_one_colour() {
        let img = argmax_panel(&[0.25; 8], 2, (2, 2), (8, 8)).unwrap();
        assert!(img.pixels().all(|p| p.0 == palette(0)));
    }

    #[test]
    fn argmax_follows_the_larger_phrase() {
        // Phrase 1 dominates the right column.
        let map = [0.9, 0.1, 0.9, 0.1, 0.1, 0.9, 0.1, 0.9];
        let img = argmax_panel(&map, 2, (2, 2), (2, 2)).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, palette(0));
        assert_eq!(img.get_pixel(1, 1).0, palette(1));
    }

    #[test]
    fn overlay_with_no_masks_is_the_image() {
        let t = Tensor::from_f64([1, 2, 3], &[0.0, 0.5, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let img = overlay(&t, &[], 0.6).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [0, 128, 255]);
        assert_eq!(img.get_pixel(1, 0).0, [255, 255, 255]);
    }
}
