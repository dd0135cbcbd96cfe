//! Architecture and training configuration, the shipped presets, and the
//! `key = value` text format.
//!
//! Config files hold one `key = value` pair per line; `#` starts a comment.
//! An optional `preset = <name>` line, which must come before any other
//! key, starts from a shipped preset so the file only needs overrides.
//! Without it every model key must be present. Unknown and repeated keys are
//! rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Dense,
    Sparse,
}

/// Where the sparse blocks sit in the stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Positions {
    /// Dense blocks first, sparse blocks last.
    Last,
    /// Sparse blocks first.
    First,
    /// Explicit order, one entry per block.
    Custom(Vec<BlockKind>),
}

impl Positions {
    fn encode(&self) -> String {
        match self {
            Positions::Last => "last".into(),
            Positions::First => "first".into(),
            Positions::Custom(kinds) => kinds
                .iter()
                .map(|k| match k {
                    BlockKind::Dense => 'd',
                    BlockKind::Sparse => 's',
                })
                .collect(),
        }
    }

    fn decode(s: &str) -> Option<Self> {
        match s {
            "last" => Some(Positions::Last),
            "first" => Some(Positions::First),
            _ => s
                .chars()
                .map(|c| match c {
                    'd' => Some(BlockKind::Dense),
                    's' => Some(BlockKind::Sparse),
                    _ => None,
                })
                .collect::<Option<Vec<_>>>()
                .filter(|v| !v.is_empty())
                .map(Positions::Custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Hidden size `C`.
    pub hidden: usize,
    pub classes: usize,
    /// Dense block count `L1`.
    pub dense_blocks: usize,
    /// Token-mixing MLP width `D_S`.
    pub token_mlp_dim: usize,
    /// Channel-mixing MLP width `D_C`.
    pub channel_mlp_dim: usize,
    /// Sparse block count `L2`.
    pub sparse_blocks: usize,
    /// Patches inside sparse blocks, `S'`.
    pub sparse_patches: usize,
    /// Hidden size inside sparse blocks, `C'`.
    pub sparse_hidden: usize,
    pub experts_s: usize,
    /// 0 replaces the channel-mixing MoE with a dense MLP.
    pub experts_c: usize,
    pub top_k_s: usize,
    /// Must be 0 when `experts_c` is 0.
    pub top_k_c: usize,
    /// Expert hidden width in the token-mixing MoE, `D_S'`.
    pub moe_s_dim: usize,
    /// Expert hidden width in the channel-mixing MoE, `D_C'`.
    pub moe_c_dim: usize,
    pub positions: Positions,
    /// Re-represent layers around each sparse block.
    pub rescale: bool,
    /// Fraction of token-mixing items dropped by importance score.
    pub elimination_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the balance losses; 0.01 reproduces the published setting.
    pub aux_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 32,
            epochs: 10,
            seed: 0,
            aux_weight: crate::moe::AUX_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const PRESETS: [&str; 9] = [
    "sparse_s",
    "sparse_b",
    "sparse_l",
    "mixer_s",
    "mixer_b",
    "mixer_l",
    "tiny_test",
    "tiny_dense",
    "tiny_first",
];

fn mixer(hidden: usize, blocks: usize, token_dim: usize, channel_dim: usize) -> ModelConfig {
    ModelConfig {
        image_height: 224,
        image_width: 224,
        channels: 3,
        patch: 16,
        hidden,
        classes: 1000,
        dense_blocks: blocks,
        token_mlp_dim: token_dim,
        channel_mlp_dim: channel_dim,
        sparse_blocks: 0,
        sparse_patches: 0,
        sparse_hidden: 0,
        experts_s: 0,
        experts_c: 0,
        top_k_s: 0,
        top_k_c: 0,
        moe_s_dim: 0,
        moe_c_dim: 0,
        positions: Positions::Last,
        rescale: true,
        elimination_fraction: 0.0,
    }
}

impl ModelConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let base = mixer(768, 10, 384, 3072);
        let sparse_b = ModelConfig {
            sparse_blocks: 2,
            sparse_patches: 392,
            sparse_hidden: 384,
            experts_s: 8,
            experts_c: 4,
            top_k_s: 1,
            top_k_c: 2,
            moe_s_dim: 768,
            moe_c_dim: 1536,
            ..base
        };
        let tiny = ModelConfig {
            image_height: 8,
            image_width: 8,
            channels: 1,
            patch: 4,
            hidden: 8,
            classes: 4,
            dense_blocks: 1,
            token_mlp_dim: 8,
            channel_mlp_dim: 16,
            sparse_blocks: 1,
            sparse_patches: 8,
            sparse_hidden: 4,
            experts_s: 2,
            experts_c: 2,
            top_k_s: 1,
            top_k_c: 1,
            moe_s_dim: 16,
            moe_c_dim: 8,
            positions: Positions::Last,
            rescale: true,
            elimination_fraction: 0.0,
        };
        Some(match name {
            "sparse_s" => ModelConfig {
                hidden: 512,
                dense_blocks: 6,
                token_mlp_dim: 256,
                channel_mlp_dim: 2048,
                sparse_hidden: 512,
                experts_s: 4,
                experts_c: 0,
                top_k_c: 0,
                moe_s_dim: 512,
                moe_c_dim: 2048,
                ..sparse_b
            },
            "sparse_b" => sparse_b,
            "sparse_l" => ModelConfig {
                dense_blocks: 8,
                sparse_blocks: 6,
                experts_s: 16,
                ..sparse_b
            },
            "mixer_s" => mixer(512, 8, 256, 2048),
            "mixer_b" => mixer(768, 12, 384, 3072),
            "mixer_l" => mixer(1024, 24, 512, 4096),
            "tiny_first" => ModelConfig {
                positions: Positions::First,
                ..tiny.clone()
            },
            "tiny_test" => tiny,
            "tiny_dense" => ModelConfig {
                dense_blocks: 2,
                sparse_blocks: 0,
                sparse_patches: 0,
                sparse_hidden: 0,
                experts_s: 0,
                experts_c: 0,
                top_k_s: 0,
                top_k_c: 0,
                moe_s_dim: 0,
                moe_c_dim: 0,
                ..tiny
            },
            _ => return None,
        })
    }

    /// Number of patches `S = HW / P^2`.
    pub fn patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    /// Flattened patch length `P * P * Ch`.
    pub fn patch_features(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn block_kinds(&self) -> Vec<BlockKind> {
        let dense = std::iter::repeat_n(BlockKind::Dense, self.dense_blocks);
        let sparse = std::iter::repeat_n(BlockKind::Sparse, self.sparse_blocks);
        match &self.positions {
            Positions::Last => dense.chain(sparse).collect(),
            Positions::First => sparse.chain(dense).collect(),
            Positions::Custom(kinds) => kinds.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("channels", self.channels),
            ("patch", self.patch),
            ("hidden", self.hidden),
            ("classes", self.classes),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config_key(key, "must be positive"));
            }
        }
        if !self.image_height.is_multiple_of(self.patch) || !self.image_width.is_multiple_of(self.patch) {
            return Err(Error::config_key(
                "patch",
                format!(
                    "{}x{} images do not split into {p}x{p} patches",
                    self.image_height,
                    self.image_width,
                    p = self.patch
                ),
            ));
        }
        if self.dense_blocks + self.sparse_blocks == 0 {
            return Err(Error::config_key("dense_blocks", "model has no blocks"));
        }
        if self.dense_blocks > 0 {
            for (key, v) in [("token_mlp_dim", self.token_mlp_dim), ("channel_mlp_dim", self.channel_mlp_dim)] {
                if v == 0 {
                    return Err(Error::config_key(key, "must be positive when dense blocks are present"));
                }
            }
        }
        if let Positions::Custom(kinds) = &self.positions {
            let sparse = kinds.iter().filter(|k| **k == BlockKind::Sparse).count();
            if sparse != self.sparse_blocks || kinds.len() - sparse != self.dense_blocks {
                return Err(Error::config_key(
                    "positions",
                    format!(
                        "pattern has {} dense and {sparse} sparse blocks, expected {} and {}",
                        kinds.len() - sparse,
                        self.dense_blocks,
                        self.sparse_blocks
                    ),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.elimination_fraction) {
            return Err(Error::config_key("elimination_fraction", "must lie in [0, 1)"));
        }
        if self.sparse_blocks > 0 {
            self.validate_sparse()?;
        }
        Ok(())
    }

    fn validate_sparse(&self) -> Result<()> {
        let s = self.patches();
        if self.rescale {
            if self.sparse_patches != 2 * s {
                return Err(Error::config_key(
                    "sparse_patches",
                    format!("must be twice the patch count ({}), got {}", 2 * s, self.sparse_patches),
                ));
            }
            if !self.hidden.is_multiple_of(2) {
                return Err(Error::config_key("hidden", "must be even when rescale is enabled"));
            }
            if self.sparse_hidden == 0 {
                return Err(Error::config_key("sparse_hidden", "must be positive"));
            }
        } else if self.sparse_patches != s || self.sparse_hidden != self.hidden {
            return Err(Error::config_key(
                "rescale",
                "without rescale layers sparse_patches and sparse_hidden must equal the patch count and hidden size",
            ));
        }
        if self.experts_s == 0 {
            return Err(Error::config_key("experts_s", "sparse blocks need at least one token-mixing expert"));
        }
        if self.top_k_s == 0 || self.top_k_s > self.experts_s {
            return Err(Error::config_key("top_k_s", format!("must lie in 1..={}", self.experts_s)));
        }
        if self.experts_c == 0 {
            if self.top_k_c != 0 {
                return Err(Error::config_key("top_k_c", "must be 0 when experts_c is 0"));
            }
        } else if self.top_k_c == 0 || self.top_k_c > self.experts_c {
            return Err(Error::config_key("top_k_c", format!("must lie in 1..={}", self.experts_c)));
        }
        for (key, v) in [("moe_s_dim", self.moe_s_dim), ("moe_c_dim", self.moe_c_dim)] {
            if v == 0 {
                return Err(Error::config_key(key, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Keys that describe the model. All are required without a preset.
const MODEL_KEYS: [&str; 21] = [
    "image_height",
    "image_width",
    "channels",
    "patch",
    "hidden",
    "classes",
    "dense_blocks",
    "token_mlp_dim",
    "channel_mlp_dim",
    "sparse_blocks",
    "sparse_patches",
    "sparse_hidden",
    "experts_s",
    "experts_c",
    "top_k_s",
    "top_k_c",
    "moe_s_dim",
    "moe_c_dim",
    "positions",
    "rescale",
    "elimination_fraction",
];

const TRAIN_KEYS: [&str; 5] = ["lr", "batch", "epochs", "seed", "aux_weight"];

impl RunConfig {
    pub fn preset(name: &str) -> Option<Self> {
        ModelConfig::preset(name).map(|model| Self {
            model,
            train: TrainConfig::default(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Option<RunConfig> = None;
        let mut blank = RunConfig {
            model: mixer(1, 1, 1, 1),
            train: TrainConfig::default(),
        };
        let mut seen: Vec<String> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |key: &str, msg: String| Error::Config {
                key: Some(key.to_string()),
                line: Some(line_no),
                message: msg,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config {
                    key: None,
                    line: Some(line_no),
                    message: format!("expected `key = value`, got `{line}`"),
                })?;
            if seen.iter().any(|k| k == key) {
                return Err(err(key, "repeated key".into()));
            }
            if key == "preset" {
                if !seen.is_empty() {
                    return Err(err(key, "preset must precede all other keys".into()));
                }
                cfg = Some(
                    RunConfig::preset(value)
                        .ok_or_else(|| err(key, format!("unknown preset `{value}`")))?,
                );
                seen.push(key.to_string());
                continue;
            }
            let target = cfg.as_mut().unwrap_or(&mut blank);
            target.set(key, value).map_err(|m| err(key, m))?;
            seen.push(key.to_string());
        }

        let cfg = match cfg {
            Some(c) => c,
            None => {
                if let Some(missing) = MODEL_KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
                    return Err(Error::config_key(missing, "missing (and no preset given)"));
                }
                blank
            }
        };
        cfg.model.validate()?;
        if !cfg.train.lr.is_finite() || cfg.train.lr < 0.0 {
            return Err(Error::config_key("lr", "must be a finite non-negative number"));
        }
        if !cfg.train.aux_weight.is_finite() || cfg.train.aux_weight < 0.0 {
            return Err(Error::config_key("aux_weight", "must be a finite non-negative number"));
        }
        if cfg.train.batch == 0 {
            return Err(Error::config_key("batch", "must be positive"));
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}`"))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "image_height" => m.image_height = num(value)?,
            "image_width" => m.image_width = num(value)?,
            "channels" => m.channels = num(value)?,
            "patch" => m.patch = num(value)?,
            "hidden" => m.hidden = num(value)?,
            "classes" => m.classes = num(value)?,
            "dense_blocks" => m.dense_blocks = num(value)?,
            "token_mlp_dim" => m.token_mlp_dim = num(value)?,
            "channel_mlp_dim" => m.channel_mlp_dim = num(value)?,
            "sparse_blocks" => m.sparse_blocks = num(value)?,
            "sparse_patches" => m.sparse_patches = num(value)?,
            "sparse_hidden" => m.sparse_hidden = num(value)?,
            "experts_s" => m.experts_s = num(value)?,
            "experts_c" => m.experts_c = num(value)?,
            "top_k_s" => m.top_k_s = num(value)?,
            "top_k_c" => m.top_k_c = num(value)?,
            "moe_s_dim" => m.moe_s_dim = num(value)?,
            "moe_c_dim" => m.moe_c_dim = num(value)?,
            "positions" => {
                m.positions = Positions::decode(value)
                    .ok_or_else(|| format!("expected `last`, `first` or a d/s pattern, got `{value}`"))?
            }
            "rescale" => m.rescale = num(value)?,
            "elimination_fraction" => m.elimination_fraction = num(value)?,
            "lr" => t.lr = num(value)?,
            "batch" => t.batch = num(value)?,
            "epochs" => t.epochs = num(value)?,
            "seed" => t.seed = num(value)?,
            "aux_weight" => t.aux_weight = num(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key, in a fixed order; floats use the shortest exact form.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in MODEL_KEYS.iter().chain(TRAIN_KEYS.iter()) {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    pub(crate) fn value_of(&self, key: &str) -> String {
        let m = &self.model;
        let t = &self.train;
        match key {
            "image_height" => m.image_height.to_string(),
            "image_width" => m.image_width.to_string(),
            "channels" => m.channels.to_string(),
            "patch" => m.patch.to_string(),
            "hidden" => m.hidden.to_string(),
            "classes" => m.classes.to_string(),
            "dense_blocks" => m.dense_blocks.to_string(),
            "token_mlp_dim" => m.token_mlp_dim.to_string(),
            "channel_mlp_dim" => m.channel_mlp_dim.to_string(),
            "sparse_blocks" => m.sparse_blocks.to_string(),
            "sparse_patches" => m.sparse_patches.to_string(),
            "sparse_hidden" => m.sparse_hidden.to_string(),
            "experts_s" => m.experts_s.to_string(),
            "experts_c" => m.experts_c.to_string(),
            "top_k_s" => m.top_k_s.to_string(),
            "top_k_c" => m.top_k_c.to_string(),
            "moe_s_dim" => m.moe_s_dim.to_string(),
            "moe_c_dim" => m.moe_c_dim.to_string(),
            "positions" => m.positions.encode(),
            "rescale" => m.rescale.to_string(),
            "elimination_fraction" => m.elimination_fraction.to_string(),
            "lr" => t.lr.to_string(),
            "batch" => t.batch.to_string(),
            "epochs" => t.epochs.to_string(),
            "seed" => t.seed.to_string(),
            "aux_weight" => t.aux_weight.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    Ok(RunConfig::load(path)?.model)
}
