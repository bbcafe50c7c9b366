//! Procedural scenes: horizontal stuff bands with non-overlapping coloured
//! shapes on top, and a templated caption naming them.

use dynprompt_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GroundingSample, Mask, PhraseAnnotation, CATEGORIES, NUM_THING_CATEGORIES};
use crate::config::DataConfig;
use crate::error::{Error, Result};

pub(crate) const THING_COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.90, 0.12, 0.12]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("purple", [0.55, 0.20, 0.70]),
    ("orange", [1.00, 0.55, 0.00]),
    ("white", [0.97, 0.97, 0.97]),
    ("black", [0.08, 0.08, 0.08]),
];

/// Band colours for categories 6..10 (sky, field, water, sand).
const STUFF_COLORS: [[f32; 3]; 4] = [[0.55, 0.75, 0.95], [0.25, 0.60, 0.20], [0.10, 0.30, 0.65], [0.85, 0.75, 0.50]];

const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

pub(crate) const INTROS: [&[&str]; 3] = [&["in", "this", "picture", "we", "can", "see"], &["this", "image", "shows"], &["we", "can", "see"]];

pub(crate) const CONNECTORS: [&[&str]; 6] = [&[","], &["and"], &["with"], &["along", "with"], &["as", "well", "as"], &["and", "also"]];

pub(crate) const COUNT_WORDS: [&str; 2] = ["two", "three"];

pub(crate) const ARTICLES: [&str; 2] = ["a", "the"];

pub(crate) const FULL_STOP: &str = ".";

const MARGIN: usize = 2;
const PLACEMENT_ATTEMPTS: usize = 500;

/// Parameters of one scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Number of drawn thing instances (plural groups count each instance).
    pub num_things: usize,
    pub num_stuff: usize,
    pub plural_probability: f64,
    pub distractor_phrase_probability: f64,
}

/// Corpus-wide rendering and caption limits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub canvas: usize,
    pub thing_size: [f64; 2],
    pub distractor_slots: usize,
    pub max_phrases: usize,
    pub max_words: usize,
}

impl From<&DataConfig> for GeneratorConfig {
    fn from(d: &DataConfig) -> Self {
        Self {
            canvas: d.canvas,
            thing_size: d.thing_size,
            distractor_slots: d.distractor_slots,
            max_phrases: d.max_phrases,
            max_words: d.max_words,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mention {
    /// Thing group: colour index, shape category, instance count.
    Thing { color: usize, shape: usize, count: usize },
    Stuff { category: usize },
}

impl Mention {
    fn category(self) -> usize {
        match self {
            Mention::Thing { shape, .. } => shape,
            Mention::Stuff { category } => category,
        }
    }

    fn words(self) -> Vec<String> {
        match self {
            Mention::Thing { color, shape, count: 1 } => {
                vec!["a".into(), THING_COLORS[color].0.into(), CATEGORIES[shape].name.into()]
            }
            Mention::Thing { color, shape, count } => vec![
                COUNT_WORDS[(count - 2).min(1)].into(),
                THING_COLORS[color].0.into(),
                CATEGORIES[shape].plural.into(),
            ],
            Mention::Stuff { category } => vec!["the".into(), CATEGORIES[category].name.into()],
        }
    }
}

/// Whether the pixel centre `(px, py)` lies in `shape` drawn in the square
/// box with top-left corner `(x0, y0)` and side `s`.
fn inside(shape: usize, px: f64, py: f64, x0: f64, y0: f64, s: f64) -> bool {
    let r = s / 2.0;
    let (dx, dy) = (px - (x0 + r), py - (y0 + r));
    match CATEGORIES[shape].name {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= r && dy.abs() <= r,
        "triangle" => {
            let t = (py - y0) / s;
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        "diamond" => dx.abs() + dy.abs() <= r,
        "cross" => {
            let arm = s / 6.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        "ring" => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.4 * r) * (0.4 * r)
        }
        other => unreachable!("{other} is not a thing category"),
    }
}

/// Renders one scene. Deterministic in `spec.seed`.
pub fn generate_sample(spec: &SceneSpec, gen: &GeneratorConfig) -> Result<GroundingSample> {
    let fail = |msg: String| Err(Error::Generation(msg));
    for (k, p) in [("plural_probability", spec.plural_probability), ("distractor_phrase_probability", spec.distractor_phrase_probability)] {
        if !(0.0..=1.0).contains(&p) {
            return fail(format!("{k} must lie in [0, 1], got {p}"));
        }
    }
    let n = gen.canvas;
    if n == 0 || n % 32 != 0 {
        return fail(format!("canvas {n} is not a positive multiple of 32"));
    }
    if spec.num_stuff > 4 {
        return fail(format!("at most 4 stuff categories exist, {} requested", spec.num_stuff));
    }
    let smin = (gen.thing_size[0] * n as f64).round().max(4.0) as usize;
    let smax = ((gen.thing_size[1] * n as f64).round() as usize).max(smin);
    if spec.num_things * (smin + MARGIN) * (smin + MARGIN) > n * n {
        return fail(format!("{} things of side >= {smin} cannot fit a {n}x{n} canvas", spec.num_things));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Stuff bands, top to bottom in category order.
    let mut stuff: Vec<usize> = (NUM_THING_CATEGORIES..CATEGORIES.len()).collect();
    stuff.shuffle(&mut rng);
    stuff.truncate(spec.num_stuff);
    stuff.sort_unstable();
    let mut bounds = vec![0usize];
    for k in 1..stuff.len() {
        let band = n as f64 / stuff.len() as f64;
        let jitter = rng.gen_range(-0.25..0.25) * band;
        bounds.push((k as f64 * band + jitter).round() as usize);
    }
    bounds.push(n);

    // Thing groups with distinct (colour, shape).
    let mut combos: Vec<(usize, usize)> = (0..THING_COLORS.len()).flat_map(|c| (0..NUM_THING_CATEGORIES).map(move |s| (c, s))).collect();
    combos.shuffle(&mut rng);
    let mut groups = Vec::new();
    let mut remaining = spec.num_things;
    while remaining > 0 {
        let count = if remaining >= 2 && rng.gen_bool(spec.plural_probability) {
            if remaining >= 3 && rng.gen_bool(0.3) {
                3
            } else {
                2
            }
        } else {
            1
        };
        let Some((color, shape)) = combos.pop() else {
            return fail("ran out of distinct colour/shape pairs".into());
        };
        groups.push(Mention::Thing { color, shape, count });
        remaining -= count;
    }

    // Non-overlapping boxes.
    let mut boxes: Vec<(usize, usize, usize)> = Vec::with_capacity(spec.num_things);
    for g in &groups {
        let Mention::Thing { count, .. } = *g else { unreachable!() };
        let side = rng.gen_range(smin..=smax);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let x = rng.gen_range(0..=n - side);
                let y = rng.gen_range(0..=n - side);
                let clear = boxes.iter().all(|&(bx, by, bs)| {
                    x + side + MARGIN <= bx || bx + bs + MARGIN <= x || y + side + MARGIN <= by || by + bs + MARGIN <= y
                });
                if clear {
                    boxes.push((x, y, side));
                    placed = true;
                    break;
                }
            }
            if !placed {
                return fail(format!("could not place thing {} of {} on a {n}x{n} canvas", boxes.len() + 1, spec.num_things));
            }
        }
    }

    // Render: stuff first, things overwrite.
    let mut image = vec![0f32; n * n * 3];
    let mut owner: Vec<Option<usize>> = vec![None; n * n];
    let mut mentions: Vec<Mention> = Vec::new();
    for (k, &cat) in stuff.iter().enumerate() {
        mentions.push(Mention::Stuff { category: cat });
        for y in bounds[k]..bounds[k + 1] {
            for x in 0..n {
                owner[y * n + x] = Some(k);
            }
        }
    }
    let mut box_iter = boxes.iter();
    for g in &groups {
        let Mention::Thing { count, shape, .. } = *g else { unreachable!() };
        let id = mentions.len();
        mentions.push(*g);
        for &(bx, by, bs) in box_iter.by_ref().take(count) {
            for y in by..by + bs {
                for x in bx..bx + bs {
                    if inside(shape, x as f64 + 0.5, y as f64 + 0.5, bx as f64, by as f64, bs as f64) {
                        owner[y * n + x] = Some(id);
                    }
                }
            }
        }
    }
    for (pix, o) in owner.iter().enumerate() {
        let rgb = match o.map(|i| mentions[i]) {
            None => BACKGROUND,
            Some(Mention::Stuff { category }) => STUFF_COLORS[category - NUM_THING_CATEGORIES],
            Some(Mention::Thing { color, .. }) => THING_COLORS[color].1,
        };
        image[pix * 3..pix * 3 + 3].copy_from_slice(&rgb);
    }
    let mut masks: Vec<Mask> = vec![Mask::empty(n, n); mentions.len()];
    for (pix, o) in owner.iter().enumerate() {
        if let Some(i) = o {
            masks[*i].bits[pix] = true;
        }
    }
    if let Some(i) = masks.iter().position(|m| m.area() < 4) {
        return fail(format!("mention {i} covers fewer than 4 pixels"));
    }

    // Distractors: mentions of categories absent from the scene.
    let mut pool: Vec<Mention> = combos.iter().map(|&(color, shape)| Mention::Thing { color, shape, count: 1 }).collect();
    pool.extend((NUM_THING_CATEGORIES..CATEGORIES.len()).filter(|c| !stuff.contains(c)).map(|category| Mention::Stuff { category }));
    pool.shuffle(&mut rng);
    let drawn = (0..gen.distractor_slots).filter(|_| rng.gen_bool(spec.distractor_phrase_probability)).count();
    let room = gen.max_phrases.saturating_sub(mentions.len());
    if mentions.len() > gen.max_phrases {
        return fail(format!("{} grounded phrases exceed the cap of {}", mentions.len(), gen.max_phrases));
    }
    let mut distractors: Vec<Mention> = pool.into_iter().take(drawn.min(room)).collect();
    for d in &mut distractors {
        if let Mention::Thing { count, .. } = d {
            if rng.gen_bool(spec.plural_probability) {
                *count = if rng.gen_bool(0.3) { 3 } else { 2 };
            }
        }
    }

    // Caption in shuffled mention order.
    let mut order: Vec<(Mention, Option<Mask>)> =
        mentions.into_iter().zip(masks.into_iter().map(Some)).chain(distractors.into_iter().map(|d| (d, None))).collect();
    order.shuffle(&mut rng);
    let mut caption: Vec<String> = INTROS[rng.gen_range(0..INTROS.len())].iter().map(|w| w.to_string()).collect();
    let mut phrases = Vec::with_capacity(order.len());
    for (i, (m, mask)) in order.into_iter().enumerate() {
        if i > 0 {
            caption.extend(CONNECTORS[rng.gen_range(0..CONNECTORS.len())].iter().map(|w| w.to_string()));
        }
        let start = caption.len();
        caption.extend(m.words());
        let category_id = m.category();
        phrases.push(PhraseAnnotation {
            word_span: [start, caption.len()],
            category_id,
            is_thing: CATEGORIES[category_id].is_thing,
            is_plural: matches!(m, Mention::Thing { count, .. } if count > 1),
            grounded: mask.is_some(),
            mask,
        });
    }
    caption.push(FULL_STOP.into());
    if caption.len() > gen.max_words {
        return fail(format!("caption of {} words exceeds the cap of {}", caption.len(), gen.max_words));
    }
    let sample = GroundingSample { image: Tensor::new(vec![n, n, 3], image)?, caption, phrases };
    sample.validate()?;
    Ok(sample)
}

/// Seed for sample `index` of a corpus.
fn sub_seed(seed: u64, index: u64) -> u64 {
    // SplitMix64 finaliser over the pair.
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws the scene parameters for sample `index` from the corpus ranges.
pub(crate) fn scene_for(data: &DataConfig, seed: u64, index: u64) -> SceneSpec {
    let s = sub_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    SceneSpec {
        seed: s,
        num_things: rng.gen_range(data.things[0]..=data.things[1]),
        num_stuff: rng.gen_range(data.stuff[0]..=data.stuff[1]),
        plural_probability: data.plural_probability,
        distractor_phrase_probability: data.distractor_probability,
    }
}

/// Generates `count` samples. Scenes whose shapes cannot be placed are
/// redrawn with a derived seed, so the result depends only on `seed`.
pub fn generate_corpus(data: &DataConfig, seed: u64, count: usize) -> Result<Vec<GroundingSample>> {
    (0..count).map(|i| corpus_sample(data, seed, count, i)).collect()
}

/// Same samples as [`generate_corpus`], generated on `threads` threads.
pub fn generate_corpus_parallel(data: &DataConfig, seed: u64, count: usize, threads: usize) -> Result<Vec<GroundingSample>> {
    let threads = threads.clamp(1, count.max(1));
    let chunk = count.div_ceil(threads);
    let parts: Vec<Result<Vec<GroundingSample>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let range = (t * chunk).min(count)..((t + 1) * chunk).min(count);
                scope.spawn(move || range.map(|i| corpus_sample(data, seed, count, i)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn corpus_sample(data: &DataConfig, seed: u64, count: usize, i: usize) -> Result<GroundingSample> {
    let gen = GeneratorConfig::from(data);
    let mut last = None;
    for attempt in 0..16u64 {
        let spec = scene_for(data, seed, i as u64 + attempt * (count as u64 + 1) * 0x1_0000);
        match generate_sample(&spec, &gen) {
            Ok(s) => return Ok(s),
            Err(e @ Error::Generation(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}
