//! Grounding samples: procedurally generated scenes of coloured shapes over
//! background bands, templated captions, and per-phrase masks.

mod annotations;
mod generate;
mod vocab;

pub use annotations::{load_annotations, rle_decode, rle_encode, save_annotations, ANNOTATION_VERSION};
pub use generate::{generate_corpus, generate_corpus_parallel, generate_sample, GeneratorConfig, SceneSpec};
pub use vocab::Vocabulary;

use dynprompt_autodiff::Tensor;

use crate::error::{Error, Result};

/// Binary mask in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.height, self.width), (other.height, other.width), "mask shapes differ");
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        Mask { bits, ..*self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Category {
    pub id: usize,
    pub name: &'static str,
    pub plural: &'static str,
    pub is_thing: bool,
}

/// Six thing categories (shapes) followed by four stuff categories (bands).
pub const CATEGORIES: [Category; 10] = [
    Category { id: 0, name: "circle", plural: "circles", is_thing: true },
    Category { id: 1, name: "square", plural: "squares", is_thing: true },
    Category { id: 2, name: "triangle", plural: "triangles", is_thing: true },
    Category { id: 3, name: "diamond", plural: "diamonds", is_thing: true },
    Category { id: 4, name: "cross", plural: "crosses", is_thing: true },
    Category { id: 5, name: "ring", plural: "rings", is_thing: true },
    Category { id: 6, name: "sky", plural: "sky", is_thing: false },
    Category { id: 7, name: "field", plural: "field", is_thing: false },
    Category { id: 8, name: "water", plural: "water", is_thing: false },
    Category { id: 9, name: "sand", plural: "sand", is_thing: false },
];

pub const NUM_THING_CATEGORIES: usize = 6;
pub const NUM_CATEGORIES: usize = CATEGORIES.len();

#[derive(Clone, Debug, PartialEq)]
pub struct PhraseAnnotation {
    /// Half-open `[start, end)` word range in the caption.
    pub word_span: [usize; 2],
    pub category_id: usize,
    pub is_thing: bool,
    pub is_plural: bool,
    pub grounded: bool,
    /// Present exactly when the phrase is grounded; plurals hold the union.
    pub mask: Option<Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    /// `[H0, W0, 3]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub caption: Vec<String>,
    pub phrases: Vec<PhraseAnnotation>,
}

impl GroundingSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn num_grounded(&self) -> usize {
        self.phrases.iter().filter(|p| p.grounded).count()
    }

    /// Checks the structural invariants of a sample.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        let s = self.image.shape();
        if s.len() != 3 || s[2] != 3 {
            return bad(format!("image shape {s:?} is not [H, W, 3]"));
        }
        let (h, w) = (s[0], s[1]);
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return bad(format!("image size {h}x{w} is not a positive multiple of 32"));
        }
        if !self.image.all_finite() {
            return bad("image has non-finite pixels".into());
        }
        let m = self.caption.len();
        let mut spans: Vec<[usize; 2]> = Vec::with_capacity(self.phrases.len());
        for (j, p) in self.phrases.iter().enumerate() {
            let [a, b] = p.word_span;
            if a >= b || b > m {
                return bad(format!("phrase {j}: span [{a}, {b}) out of range for {m} words"));
            }
            if p.category_id >= NUM_CATEGORIES {
                return bad(format!("phrase {j}: category {} out of range", p.category_id));
            }
            if p.grounded != p.mask.is_some() {
                return bad(format!("phrase {j}: grounded={} but mask present={}", p.grounded, p.mask.is_some()));
            }
            if let Some(mask) = &p.mask {
                if (mask.height, mask.width) != (h, w) || mask.bits.len() != h * w {
                    return bad(format!("phrase {j}: mask {}x{} on a {h}x{w} image", mask.height, mask.width));
                }
            }
            if spans.iter().any(|&[c, d]| a < d && c < b) {
                return bad(format!("phrase {j}: span [{a}, {b}) overlaps another phrase"));
            }
            spans.push(p.word_span);
        }
        Ok(())
    }
}
