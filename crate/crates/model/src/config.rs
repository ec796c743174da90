//! Model and training configuration, loadable from TOML with dotted-key overrides.

use serde::{Deserialize, Serialize};

use crate::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub encoder_layers: usize,
    pub idm_layers: usize,
    pub fdm_layers: usize,
    pub pose_layers: usize,
    /// Bottleneck width `d` between the inverse and forward dynamics models.
    pub latent_dim: usize,
    pub patch: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    pub codebook_size: usize,
    pub clip_frames: usize,
    pub time_frequencies: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            heads: 4,
            mlp_ratio: 4,
            encoder_layers: 4,
            idm_layers: 4,
            fdm_layers: 4,
            pose_layers: 2,
            latent_dim: 8,
            patch: 8,
            frame_width: 64,
            frame_height: 32,
            codebook_size: 256,
            clip_frames: 16,
            time_frequencies: 16,
        }
    }
}

impl ModelConfig {
    /// Reduced widths and depths that train in minutes on a single CPU core.
    pub fn desk() -> Self {
        ModelConfig { d_model: 64, encoder_layers: 2, idm_layers: 2, fdm_layers: 2, ..Default::default() }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.frame_height / self.patch, self.frame_width / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.patch == 0 || self.frame_width % self.patch != 0 || self.frame_height % self.patch != 0 {
            return bad(format!("frame {}x{} not divisible by patch {}", self.frame_width, self.frame_height, self.patch));
        }
        if self.latent_dim == 0 || self.latent_dim > self.d_model {
            return bad(format!("latent_dim {} must be in 1..={}", self.latent_dim, self.d_model));
        }
        if self.clip_frames < 2 {
            return bad("clip_frames must be at least 2".into());
        }
        if self.codebook_size < 2 || self.mlp_ratio == 0 || self.time_frequencies == 0 {
            return bad("codebook_size, mlp_ratio and time_frequencies must be positive".into());
        }
        Ok(())
    }

    /// Fields that must agree for two checkpoints to share parameters.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self == other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Posttrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub translation: f64,
    pub rotation: f64,
    pub fov: f64,
    pub scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { translation: 1.0, rotation: 1.0, fov: 1.0, scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub end_lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub freeze_backbone: bool,
    pub fps_choices: Vec<f64>,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Intermediate checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub loss_weights: LossWeights,
    /// Patches subsampled for codebook fitting.
    pub codebook_samples: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            steps: 20_000,
            batch_size: 16,
            peak_lr: 5e-4,
            end_lr: 2.25e-4,
            warmup_steps: 1_500,
            seed: 0,
            freeze_backbone: true,
            fps_choices: vec![1.0, 2.0, 3.0, 4.0],
            weight_decay: 0.01,
            grad_clip: 1.0,
            checkpoint_every: 0,
            loss_weights: LossWeights::default(),
            codebook_samples: 20_000,
            model: ModelConfig::default(),
        }
    }

    pub fn posttrain() -> Self {
        TrainConfig { stage: Stage::Posttrain, steps: 5_000, batch_size: 32, end_lr: 0.0, warmup_steps: 200, ..Self::pretrain() }
    }

    /// Budgets sized for a single CPU core with the [`ModelConfig::desk`] network.
    pub fn desk(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => TrainConfig {
                steps: 2_000,
                batch_size: 8,
                peak_lr: 1e-3,
                end_lr: 4.5e-4,
                warmup_steps: 150,
                codebook_samples: 8_000,
                model: ModelConfig::desk(),
                ..Self::pretrain()
            },
            Stage::Posttrain => TrainConfig {
                steps: 2_000,
                batch_size: 32,
                peak_lr: 1e-3,
                warmup_steps: 100,
                model: ModelConfig::desk(),
                ..Self::posttrain()
            },
        }
    }

    pub fn for_profile(stage: Stage, profile: Profile) -> Self {
        match profile {
            Profile::Toy => Self::for_stage(stage),
            Profile::Desk => Self::desk(stage),
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Self::pretrain(),
            Stage::Posttrain => Self::posttrain(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.model.validate()?;
        let bad = |m: String| Err(ModelError::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if self.warmup_steps >= self.steps {
            return bad(format!("warmup_steps {} must be below steps {}", self.warmup_steps, self.steps));
        }
        if !(self.peak_lr > 0.0) || !(self.end_lr >= 0.0) || self.end_lr > self.peak_lr {
            return bad(format!("need 0 <= end_lr {} <= peak_lr {} with peak_lr > 0", self.end_lr, self.peak_lr));
        }
        if self.fps_choices.is_empty() || self.fps_choices.iter().any(|f| !(*f >= 1.0)) {
            return bad("fps_choices must be non-empty and each at least 1".into());
        }
        if self.grad_clip <= 0.0 || self.weight_decay < 0.0 {
            return bad("grad_clip must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies every key present in a TOML document on top of the current values.
    pub fn merge_toml(&mut self, text: &str) -> Result<Vec<String>, ModelError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut leaves = Vec::new();
        flatten("", &table, &mut leaves);
        for (key, value) in &leaves {
            self.set(key, &value.to_string())?;
        }
        Ok(leaves.into_iter().map(|(k, _)| k).collect())
    }

    /// Sets a dotted key such as `model.latent_dim` from its TOML literal form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| ModelError::Config(e.to_string()))?;
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node.as_table_mut().ok_or_else(|| ModelError::Config(format!("{key}: not a table")))?;
            if !table.contains_key(*part) {
                return Err(ModelError::Config(format!("unknown config key {key}")));
            }
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            node = table.get_mut(*part).expect("checked");
        }
        *self = root.try_into().map_err(|e: toml::de::Error| ModelError::Config(format!("{key}: {e}")))?;
        Ok(())
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Named size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full toy scale: D = 128, four layers per module, 20k/5k steps.
    Toy,
    /// Reduced network and budgets for one CPU core.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy" => Ok(Profile::Toy),
            "desk" => Ok(Profile::Desk),
            _ => Err(format!("unknown profile `{s}` (expected toy|desk)")),
        }
    }
}
