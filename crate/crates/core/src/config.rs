//! Run configuration, read from TOML. Every section is optional and
//! defaults to the best configuration reported for the method; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::synthetic::SyntheticSpec;
use crate::corpus::{SplitRatios, DEFAULT_MIN_COUNT};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::geo_prompt::PromptSpec;
use crate::objectives::{MatchFusion, MiningKind, MiningPolicy};
use crate::user_repr::{FieldFilter, FusionKind, IntegrationKind, IntegrationStrategy};

/// Learning rate reported for pretrained backbones.
pub const PRETRAINED_LR: f64 = 8e-6;
/// Learning rate used with the toy encoder (not a reported value).
pub const TOY_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// JSON-lines corpus; relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    /// Generated corpus used when `path` is absent.
    pub synthetic: Option<SyntheticSpec>,
    pub min_count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: None,
            min_count: DEFAULT_MIN_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    pub seed: u64,
    pub dev_cap: Option<usize>,
    pub subset_seeds: [u64; 3],
    /// Training users per class; 0 runs zero-shot inference.
    pub shots: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: SplitRatios::default(),
            seed: 0,
            dev_cap: None,
            subset_seeds: [11, 22, 33],
            shots: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepresentationConfig {
    pub strategy: IntegrationKind,
    #[serde(rename = "T")]
    pub num_posts: usize,
    /// Defaults to `All` for FewUser and `NoPostTime` for ClassUser.
    pub field_filter: Option<FieldFilter>,
    pub fusion: FusionKind,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self {
            strategy: IntegrationKind::In1,
            num_posts: 6,
            field_filter: None,
            fusion: FusionKind::MeanPool,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    FewUser,
    ClassUser,
}

/// Which labels form the contrastive softmax denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastScope {
    AllLabels,
    BatchLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub model: ModelKind,
    pub tau: f64,
    /// Mined negatives per user; 0 disables the matching loss.
    pub k: usize,
    pub mining: MiningKind,
    pub fusion_kind: MatchFusion,
    pub contrast_over: ContrastScope,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::FewUser,
            tau: 0.03,
            k: 6,
            mining: MiningKind::Multinomial,
            fusion_kind: MatchFusion::Concat,
            contrast_over: ContrastScope::AllLabels,
        }
    }
}

impl ObjectiveConfig {
    pub fn mining_policy(&self) -> MiningPolicy {
        MiningPolicy { kind: self.mining, k: self.k }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    /// Unset: [`TOY_LR`] for the toy encoder, [`PRETRAINED_LR`] otherwise.
    pub lr: Option<f64>,
    pub opt_beta1: f64,
    pub opt_beta2: f64,
    pub opt_eps: f64,
    pub weight_decay: f64,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Train the three subsets on separate threads.
    pub parallel_subsets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            eval_batch_size: 1,
            epochs: 100,
            lr: None,
            opt_beta1: 0.85,
            opt_beta2: 0.999,
            opt_eps: 1e-8,
            weight_decay: 0.01,
            patience: 10,
            seed: 0,
            parallel_subsets: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub backbone: Backbone,
    /// Parameters loaded from an encoder checkpoint instead of `toy`.
    pub checkpoint: Option<PathBuf>,
    pub toy: EncoderConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Toy,
            checkpoint: None,
            toy: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Worker threads for embedding evaluation users; 0 picks the core count.
    pub threads: usize,
    pub per_class: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threads: 0, per_class: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub representation: RepresentationConfig,
    pub prompt: PromptSpec,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub encoder: BackboneConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, resolving relative dataset and checkpoint paths
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset.path, &mut cfg.encoder.checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.train;
        if t.batch_size == 0 || t.eval_batch_size == 0 {
            return bad("train.batch_size and train.eval_batch_size must be positive".into());
        }
        if let Some(lr) = t.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("train.lr must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&t.opt_beta1) || !(0.0..1.0).contains(&t.opt_beta2) {
            return bad("train.opt_beta1 and train.opt_beta2 must lie in [0, 1)".into());
        }
        if !(t.opt_eps > 0.0) {
            return bad("train.opt_eps must be positive".into());
        }
        if !(t.weight_decay >= 0.0) {
            return bad("train.weight_decay must be non-negative".into());
        }
        if !(self.objective.tau > 0.0 && self.objective.tau.is_finite()) {
            return bad(format!("objective.tau must be positive, got {}", self.objective.tau));
        }
        if self.split.shots > 8 {
            return bad(format!("split.shots must be 0..=8, got {}", self.split.shots));
        }
        let r = self.split.ratios;
        if [r.train, r.dev, r.test].iter().any(|x| !(*x >= 0.0)) || (r.train + r.dev + r.test - 1.0).abs() > 1e-9 {
            return bad("split.ratios must be non-negative and sum to 1".into());
        }
        if self.dataset.path.is_some() && self.dataset.synthetic.is_some() {
            return bad("dataset.path and dataset.synthetic are mutually exclusive".into());
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.train.lr.unwrap_or(match self.encoder.backbone {
            Backbone::Toy => TOY_LR,
        })
    }

    pub fn strategy(&self) -> IntegrationStrategy {
        let default_filter = match self.objective.model {
            ModelKind::FewUser => FieldFilter::All,
            ModelKind::ClassUser => FieldFilter::NoPostTime,
        };
        IntegrationStrategy {
            kind: self.representation.strategy,
            field_filter: self.representation.field_filter.unwrap_or(default_filter),
            num_posts: self.representation.num_posts,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.strategy(), IntegrationStrategy::default());
        assert_eq!(cfg.learning_rate(), TOY_LR);
        assert_eq!(cfg.objective.mining_policy(), MiningPolicy::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.prompt = PromptSpec::Soft { m: 4, sigma: 0.02 };
        cfg.objective.fusion_kind = MatchFusion::CrossAttention;
        cfg.representation.field_filter = Some(FieldFilter::NoPostMeta);
        cfg.dataset.synthetic = Some(SyntheticSpec::default());
        cfg.train.lr = Some(5e-4);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml_str("[train]\nbatch_sise = 4\n").unwrap_err();
        assert!(err.to_string().contains("batch_sise"), "{err}");
        let err = RunConfig::from_toml_str("[prompt]\nkind = \"hard\"\ntemplate = \"[CLASS]\"\nm = 3\n").unwrap_err();
        assert!(err.to_string().contains('m'), "{err}");
        assert!(RunConfig::from_toml_str("[objective]\ntau = 0.0\n").is_err());
    }

    #[test]
    fn sections_parse() {
        let text = r#"
[representation]
strategy = "InUserPlusT"
T = 4
fusion = "GRU"

[prompt]
kind = "hard"
template = "A local from [CLASS]."

[objective]
model = "ClassUser"
mining = "top"
fusion_kind = "CA"
k = 3

[split]
ratios = [0.6, 0.2, 0.2]
shots = 1
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.strategy().field_filter, FieldFilter::NoPostTime);
        assert_eq!(cfg.strategy().num_posts, 4);
        assert_eq!(cfg.representation.fusion, FusionKind::Gru);
        assert_eq!(cfg.objective.fusion_kind, MatchFusion::CrossAttention);
        assert_eq!(cfg.split.shots, 1);
    }
}
