//! Run configuration, loaded from TOML.
//!
//! Every section has defaults, so an empty file (or no file) is a valid
//! configuration. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub freeze: FreezeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            freeze: FreezeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Square canvas side in pixels; must be a multiple of 32.
    pub canvas: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Inclusive range of drawn thing instances per scene.
    pub things: [usize; 2],
    /// Inclusive range of stuff bands per scene (at most 4).
    pub stuff: [usize; 2],
    pub plural_probability: f64,
    pub distractor_probability: f64,
    /// Number of Bernoulli draws for distractor phrases per caption.
    pub distractor_slots: usize,
    /// Thing size range as a fraction of the canvas side.
    pub thing_size: [f64; 2],
    pub max_words: usize,
    pub max_phrases: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            canvas: 128,
            train_samples: 200,
            eval_samples: 50,
            things: [1, 5],
            stuff: [1, 4],
            plural_probability: 0.3,
            distractor_probability: 0.62,
            distractor_slots: 10,
            thing_size: [0.2, 0.32],
            max_words: 230,
            max_phrases: 30,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub text: TextConfig,
    pub unet: UNetConfig,
    pub adapter: AdapterConfig,
    pub mlma: MlmaConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    /// Phrase channel width C_t.
    pub dim: usize,
    pub heads: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { dim: 64, heads: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Encoder,
    Middle,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    /// Resolution level: features are at 1/2^level of the input.
    pub level: usize,
}

impl BlockSpec {
    pub const fn new(kind: BlockKind, level: usize) -> Self {
        Self { kind, level }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub blocks: Vec<BlockSpec>,
    /// C_v at levels 3, 4 and 5.
    pub channels: [usize; 3],
    pub heads: usize,
    /// Channels of the two stride-2 convs ahead of the latent projection.
    pub stem_channels: [usize; 2],
    pub latent_channels: usize,
    pub time_step: usize,
    pub num_timesteps: usize,
    pub time_dim: usize,
    /// Channel groups of the residual-block normalisations.
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        use BlockKind::*;
        Self {
            blocks: vec![
                BlockSpec::new(Encoder, 3),
                BlockSpec::new(Encoder, 3),
                BlockSpec::new(Encoder, 4),
                BlockSpec::new(Encoder, 4),
                BlockSpec::new(Middle, 5),
                BlockSpec::new(Middle, 5),
                BlockSpec::new(Decoder, 4),
                BlockSpec::new(Decoder, 4),
                BlockSpec::new(Decoder, 3),
                BlockSpec::new(Decoder, 3),
            ],
            channels: [32, 64, 96],
            heads: 4,
            stem_channels: [16, 32],
            latent_channels: 4,
            time_step: 0,
            num_timesteps: 2,
            time_dim: 32,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn channels_at(&self, level: usize) -> usize {
        self.channels[level - 3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterPosition {
    None,
    Encoder,
    Decoder,
    Both,
}

impl AdapterPosition {
    /// Whether a block of this kind carries an adapter. Middle blocks count
    /// as encoder-side.
    pub fn covers(self, kind: BlockKind) -> bool {
        match self {
            Self::None => false,
            Self::Both => true,
            Self::Encoder => kind != BlockKind::Decoder,
            Self::Decoder => kind == BlockKind::Decoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub position: AdapterPosition,
    /// Bottleneck width C_b.
    pub bottleneck: usize,
    pub heads: usize,
    pub use_attention_mask: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { position: AdapterPosition::Both, bottleneck: 64, heads: 4, use_attention_mask: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlmaConfig {
    /// Multi-level aggregation plus the transformer decoder. When off, the
    /// decoder head is the inner product of the level-5 phrase features with
    /// a mask feature built from the raw backbone output.
    pub enabled: bool,
    /// Common width C_m.
    pub dim: usize,
    pub bi_attention: bool,
    pub text_self_attention: bool,
    /// Sampling points per head and level (K).
    pub deformable_points: usize,
    pub deformable_heads: usize,
    pub heads: usize,
}

impl Default for MlmaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            dim: 64,
            bi_attention: true,
            text_self_attention: true,
            deformable_points: 4,
            deformable_heads: 4,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { layers: 3, heads: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub class_weight: f64,
    pub no_object_weight: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            bce_weight: 5.0,
            dice_weight: 5.0,
            class_weight: 1.0,
            no_object_weight: 0.1,
            dice_smooth: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over `steps`.
    Cosine,
}

impl OptimConfig {
    /// Learning rate applied by update number `step` (zero-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let f = step.min(self.steps) as f64 / self.steps.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * f).cos())
            }
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            steps: 2000,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            checkpoint_every: 0,
            schedule: LrSchedule::Constant,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezeConfig {
    /// Freeze the latent encoder and the UNet.
    pub backbone: bool,
    pub text_encoder: bool,
    /// Train everything for this many steps before the freeze takes effect.
    pub after_steps: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Diffusion,
    Adapter,
    #[default]
    Decoder,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub head: Head,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        let d = &self.data;
        if d.canvas == 0 || d.canvas % 32 != 0 {
            return bad(format!("data.canvas must be a positive multiple of 32, got {}", d.canvas));
        }
        if d.things[0] > d.things[1] || d.stuff[0] > d.stuff[1] || d.stuff[1] > 4 {
            return bad(format!("bad scene ranges things={:?} stuff={:?}", d.things, d.stuff));
        }
        for (k, p) in [("plural_probability", d.plural_probability), ("distractor_probability", d.distractor_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("data.{k} must lie in [0, 1], got {p}"));
            }
        }
        if !(d.thing_size[0] > 0.0 && d.thing_size[0] <= d.thing_size[1] && d.thing_size[1] < 1.0) {
            return bad(format!("data.thing_size must satisfy 0 < min <= max < 1, got {:?}", d.thing_size));
        }
        if d.max_phrases == 0 {
            return bad("data.max_phrases must be positive".into());
        }
        self.model.validate()?;
        if self.optim.batch_size == 0 {
            return bad("optim.batch_size must be positive".into());
        }
        Ok(())
    }

    /// Digest of everything that determines parameter shapes and semantics.
    pub fn fingerprint(&self, vocab: &[String]) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.model).expect("model config serializes"));
        for w in vocab {
            h.update(w.as_bytes());
            h.update([0]);
        }
        hex(&h.finalize())
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let u = &self.unet;
        if u.blocks.is_empty() {
            return bad("model.unet.blocks is empty".into());
        }
        if u.blocks.iter().any(|b| !(3..=5).contains(&b.level)) {
            return bad("block levels must lie in 3..=5".into());
        }
        if u.blocks[0].level != 3 {
            return bad("the first block must run at level 3".into());
        }
        for w in u.blocks.windows(2) {
            if w[0].level.abs_diff(w[1].level) > 1 {
                return bad(format!("level jump {} -> {} between consecutive blocks", w[0].level, w[1].level));
            }
        }
        let mut stack = Vec::new();
        for (i, b) in u.blocks.iter().enumerate() {
            match b.kind {
                BlockKind::Encoder => stack.push(b.level),
                BlockKind::Middle => {}
                BlockKind::Decoder => match stack.pop() {
                    Some(l) if l == b.level => {}
                    Some(l) => return bad(format!("decoder block {i} at level {} pops a level-{l} skip", b.level)),
                    None => return bad(format!("decoder block {i} has no matching encoder skip")),
                },
            }
        }
        if !stack.is_empty() {
            return bad(format!("{} encoder skips are never consumed", stack.len()));
        }
        for level in 3..=5 {
            if !u.blocks.iter().any(|b| b.level == level) {
                return bad(format!("no block at level {level}"));
            }
        }
        for (name, width, heads) in [
            ("unet level-3", u.channels[0], u.heads),
            ("unet level-4", u.channels[1], u.heads),
            ("unet level-5", u.channels[2], u.heads),
            ("text", self.text.dim, self.text.heads),
            ("adapter", self.adapter.bottleneck, self.adapter.heads),
            ("mlma", self.mlma.dim, self.mlma.heads),
            ("deformable", self.mlma.dim, self.mlma.deformable_heads),
            ("decoder", self.mlma.dim, self.decoder.heads),
        ] {
            if width == 0 || heads == 0 || width % heads != 0 {
                return bad(format!("{name} width {width} not divisible by {heads} heads"));
            }
        }
        if u.time_step >= u.num_timesteps {
            return bad(format!("time_step {} outside 0..{}", u.time_step, u.num_timesteps));
        }
        if self.mlma.enabled && self.mlma.deformable_points == 0 {
            return bad("mlma.deformable_points must be positive when mlma is enabled".into());
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn documented_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.adapter.bottleneck, 64);
        assert_eq!(cfg.data.max_phrases, 30);
        assert_eq!(cfg.data.max_words, 230);
        assert_eq!(cfg.optim.lr, 1e-4);
        assert_eq!(cfg.model.unet.blocks.len(), 10);
        assert_eq!(cfg.model.unet.time_step, 0);
        assert_eq!(cfg.model.decoder.layers, 3);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("[model.adapter]\nposition = \"sideways\"").is_err());
        assert!(RunConfig::from_toml("[optim]\nlearning_rate = 1.0").is_err());
        assert!(RunConfig::from_toml("[data]\ncanvas = 100").is_err());
        assert!(RunConfig::from_toml("version = 7").is_err());
        let partial = RunConfig::from_toml("seed = 3\n[model.adapter]\nposition = \"encoder\"").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.model.adapter.position, AdapterPosition::Encoder);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let o = OptimConfig { lr: 2e-3, steps: 100, schedule: LrSchedule::Cosine, ..Default::default() };
        assert_eq!(o.lr_at(0), 2e-3);
        assert!((o.lr_at(50) - 1e-3).abs() < 1e-15);
        assert!(o.lr_at(100).abs() < 1e-18);
        assert_eq!(OptimConfig::default().lr_at(1999), 1e-4);
    }

    #[test]
    fn skip_structure_is_checked() {
        let mut m = ModelConfig::default();
        m.unet.blocks.swap(6, 8);
        assert!(m.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_model_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.optim.lr = 1.0;
        let words = vec!["a".to_string()];
        assert_eq!(a.fingerprint(&words), b.fingerprint(&words));
        b.model.mlma.dim = 32;
        assert_ne!(a.fingerprint(&words), b.fingerprint(&words));
    }
}
