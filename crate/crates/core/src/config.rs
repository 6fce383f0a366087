//! Model, training and experiment configuration.
//!
//! All configs deserialize from JSON with unknown keys rejected. Missing
//! keys take the desk-scale defaults.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which positional-label heads are attached to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    None,
    Apl,
    Rpl,
    Both,
}

impl HeadMode {
    pub fn absolute(self) -> bool {
        matches!(self, HeadMode::Apl | HeadMode::Both)
    }

    pub fn relative(self) -> bool {
        matches!(self, HeadMode::Rpl | HeadMode::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::None => "none",
            HeadMode::Apl => "apl",
            HeadMode::Rpl => "rpl",
            HeadMode::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    Crop,
    Hflip,
    Vflip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of each block MLP, as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Output width of the positional MLP head.
    pub pos_dim: usize,
    pub use_pe: bool,
    pub head_mode: HeadMode,
    pub num_classes: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 32,
            image_width: 32,
            channels: 1,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            pos_dim: 64,
            use_pe: false,
            head_mode: HeadMode::Apl,
            num_classes: 10,
            decoder_depth: 1,
            decoder_heads: 2,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn decoder_dim(&self) -> usize {
        self.embed_dim / 2
    }

    /// Number of relative-position classes, `(2·rows − 1)(2·cols − 1)`.
    pub fn relative_classes(&self) -> usize {
        let (r, c) = self.grid();
        (2 * r - 1) * (2 * c - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("pos_dim", self.pos_dim),
            ("num_classes", self.num_classes),
            ("decoder_heads", self.decoder_heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!("embed_dim {} must be even", self.embed_dim)));
        }
        if self.decoder_dim() % self.decoder_heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} is not divisible by {} decoder heads",
                self.decoder_dim(),
                self.decoder_heads
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: f64,
    pub augment: Vec<Augmentation>,
    pub mask_ratio: f64,
    /// Random subsample of ordered pairs for the relative loss; `None` uses all N² pairs.
    pub pair_budget: Option<usize>,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Per-patch normalised reconstruction targets during MAE pretraining.
    pub norm_pix_loss: bool,
    /// Record wall-clock seconds in the metrics CSV. Off by default so
    /// reruns produce byte-identical files.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Desk-scale preset.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 2,
            base_lr: 1e-3,
            weight_decay: 0.05,
            batch_size: 32,
            seed: 0,
            lambda: 0.5,
            augment: Vec::new(),
            mask_ratio: 0.75,
            pair_budget: None,
            grad_clip: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            norm_pix_loss: false,
            log_wall_time: false,
        }
    }

    /// Full-scale ImageNet recipe: 300 epochs, 20 warmup, batch 256.
    pub fn full_schedule() -> Self {
        TrainConfig { epochs: 300, warmup_epochs: 20, batch_size: 256, ..TrainConfig::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.pair_budget == Some(0) {
            return Err(Error::Config("pair_budget must be positive when set".into()));
        }
        Ok(())
    }

    pub fn has(&self, a: Augmentation) -> bool {
        self.augment.contains(&a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub recipe: String,
    /// `synthetic:<seed>:<count>` or an IDX image file path (optionally `images,labels`).
    pub dataset: String,
    pub val_dataset: Option<String>,
    pub output_dir: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Second-stage schedule for pretrain → fine-tune runs.
    pub finetune: Option<TrainConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            recipe: "train".into(),
            dataset: "synthetic:1:512".into(),
            val_dataset: Some("synthetic:2:256".into()),
            output_dir: "runs/default".into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text`, applies `key=value` overrides, and validates.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        // Overrides resolve against the full key set, including defaulted ones.
        let defaults = serde_json::to_value(ExperimentConfig::default())?;
        merge_missing(&mut value, &defaults);
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(ft) = &self.finetune {
            ft.validate()?;
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn merge_missing(target: &mut Value, defaults: &Value) {
    if let (Value::Object(t), Value::Object(d)) = (target, defaults) {
        for (k, dv) in d {
            match t.get_mut(k) {
                Some(tv) => merge_missing(tv, dv),
                None => {
                    t.insert(k.clone(), dv.clone());
                }
            }
        }
    }
}

/// Applies one `key=value` override. Keys are dotted paths (`train.lambda`)
/// or bare field names that are unique across sections (`lambda`).
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_owned).collect()
    } else {
        let mut hits = Vec::new();
        if let Value::Object(top) = &*root {
            if top.contains_key(key) {
                hits.push(vec![key.to_owned()]);
            }
            for (section, v) in top {
                if let Value::Object(inner) = v {
                    if inner.contains_key(key) {
                        hits.push(vec![section.clone(), key.to_owned()]);
                    }
                }
            }
        }
        match hits.len() {
            1 => hits.pop().expect("one hit"),
            0 => return Err(Error::Config(format!("unknown config key `{key}`"))),
            _ => {
                return Err(Error::Config(format!(
                    "config key `{key}` is ambiguous; qualify it (e.g. train.{key})"
                )))
            }
        }
    };

    let mut slot = &mut *root;
    for part in &path {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *slot = parse_override_value(slot, raw.trim());
    Ok(())
}

fn parse_override_value(existing: &Value, raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        if !(existing.is_array() && !v.is_array()) {
            return v;
        }
    }
    if existing.is_array() {
        let items = raw.split(',').map(str::trim).filter(|s| !s.is_empty());
        return Value::Array(items.map(|s| Value::String(s.to_owned())).collect());
    }
    Value::String(raw.to_owned())
}
