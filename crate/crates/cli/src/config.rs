//! Experiment configuration: one TOML document per run, versioned, with
//! unknown keys rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cpsca_core::attention::ScaConfig;
use cpsca_core::baselines::Scorer;
use cpsca_core::checkpoint::sha256_hex;
use cpsca_core::data::{Dataset, DatasetName};
use cpsca_core::model::ArchSpec;
use cpsca_core::model::{AttentionKind, AttentionSite, Family};
use cpsca_core::pruner::Ratios;
use cpsca_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    /// Directory holding the CIFAR binary archives (or their standard subdirectory).
    pub root: PathBuf,
    /// Total training images kept, taken as the first `subset / classes` of each class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
    /// Total test images kept, same per-class rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset> {
        let full = Dataset::load(self.name, &self.root)?;
        match (self.subset, self.test_subset) {
            (None, None) => Ok(full),
            (train, test) => Ok(full.subset(train.unwrap_or(full.train.len()), test)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub scorer: Scorer,
    /// Fraction of channels removed from every prunable layer.
    #[serde(default)]
    pub ratio: f64,
    /// Per-layer ratios that replace `ratio` for the named convs.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, f64>,
    /// Training images used for the gate statistics pass; all when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_images: Option<usize>,
    #[serde(default = "default_stats_batch")]
    pub stats_batch_size: usize,
}

fn default_stats_batch() -> usize {
    128
}

impl PruneConfig {
    pub fn new(scorer: Scorer, ratio: f64) -> Self {
        Self { scorer, ratio, overrides: BTreeMap::new(), stats_images: None, stats_batch_size: default_stats_batch() }
    }

    pub fn ratios(&self) -> Ratios {
        Ratios { uniform: self.ratio, overrides: self.overrides.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Row label used in reports.
    pub name: String,
    /// Seeds weight initialization; training seeds live in `train` and `finetune`.
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ArchSpec,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub finetune: TrainConfig,
    /// Absent for a baseline-only run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Digest of the canonical serialized form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// Sets the master seed and both training seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.schema_version != SCHEMA_VERSION {
            return usage(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let m = &self.model;
        match m.family {
            Family::Vgg if !matches!(m.depth, 16 | 19) => {
                return usage(format!("vgg depth {} (expected 16 or 19)", m.depth))
            }
            Family::Resnet if m.depth < 8 || !(m.depth - 2).is_multiple_of(6) => {
                return usage(format!("resnet depth {} (expected 6n+2, at least 8)", m.depth))
            }
            _ => {}
        }
        if m.num_classes != self.dataset.name.num_classes() {
            return usage(format!(
                "model has {} classes but {} has {}",
                m.num_classes,
                self.dataset.name,
                self.dataset.name.num_classes()
            ));
        }
        self.train.validate()?;
        self.finetune.validate()?;
        if let Some(p) = &self.prune {
            for (id, &r) in std::iter::once((&String::from("ratio"), &p.ratio)).chain(&p.overrides) {
                if !(0.0..1.0).contains(&r) {
                    return usage(format!("pruning ratio {id} = {r} must lie in [0, 1)"));
                }
            }
            match (p.scorer, &m.attention) {
                (Scorer::Cpsca, AttentionKind::Sca(c)) if !c.arrangement.has_channel() => {
                    return usage("cpsca needs an SCA arrangement with a channel submodule".into())
                }
                (Scorer::Cpsca, AttentionKind::Sca(_)) | (Scorer::Cpse, AttentionKind::Se { .. }) => {}
                (Scorer::Cpsca, _) => return usage("scorer cpsca needs model.attention.type = \"sca\"".into()),
                (Scorer::Cpse, _) => return usage("scorer cpse needs model.attention.type = \"se\"".into()),
                _ => {}
            }
            if p.scorer.needs_attention() && m.family == Family::Resnet && m.site != AttentionSite::BlockFirstConv {
                return usage(
                    "attention scorers on resnet need model.site = \"block_first_conv\": only the first conv of a block is prunable"
                        .into(),
                );
            }
            if p.stats_batch_size == 0 {
                return usage("prune.stats_batch_size must be positive".into());
            }
        }
        Ok(())
    }

    /// A small ready-to-edit config.
    pub fn example(out_dir: PathBuf, data_root: PathBuf) -> Self {
        let sca = ScaConfig { groups: 16, gn_groups: 4, ..ScaConfig::default() };
        let model = ArchSpec::resnet(20, 10, AttentionKind::Sca(sca)).with_site(AttentionSite::BlockFirstConv);
        Self {
            schema_version: SCHEMA_VERSION,
            name: "resnet20-cpsca".into(),
            seed: 0,
            out_dir,
            model,
            dataset: DatasetConfig { name: DatasetName::Cifar10, root: data_root, subset: None, test_subset: None },
            train: TrainConfig::default(),
            finetune: TrainConfig { epochs: 15, lr: 0.01, ..TrainConfig::default() },
            prune: Some(PruneConfig::new(Scorer::Cpsca, 0.3)),
        }
    }
}
