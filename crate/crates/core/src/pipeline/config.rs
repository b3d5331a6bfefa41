//! Pipeline configuration: one JSON document with a `version` field.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adapter::{AdapterBinding, Role};
use crate::cyclemix::CycleMixConfig;
use crate::data::{derive_seed, EmbeddingDims, SyntheticWorld, WorldConfig};
use crate::error::{Error, Result};
use crate::manifold::{ManifoldArch, ManifoldTrainConfig};
use crate::metrics::{ProbeConfig, DEFAULT_TOP_N};
use crate::remixer::{RemixerArch, RemixerTrainConfig};
use crate::temporal::{TaArch, TaTrainConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Architecture preset shared by every stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Full,
    Desk,
    Tiny,
}

impl Scale {
    pub fn manifold_arch(self) -> ManifoldArch {
        match self {
            Scale::Full => ManifoldArch::full(),
            Scale::Desk => ManifoldArch::desk(),
            Scale::Tiny => ManifoldArch::tiny(),
        }
    }

    pub fn remixer_arch(self) -> RemixerArch {
        match self {
            Scale::Full => RemixerArch::full(),
            Scale::Desk => RemixerArch::desk(),
            Scale::Tiny => RemixerArch::tiny(),
        }
    }

    pub fn ta_arch(self) -> TaArch {
        match self {
            Scale::Full => TaArch::full(),
            Scale::Desk => TaArch::desk(),
            Scale::Tiny => TaArch::tiny(),
        }
    }

    pub fn dims(self) -> EmbeddingDims {
        self.manifold_arch().dims
    }
}

/// Synthetic backend settings; the world's seed is the pipeline seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub num_classes: usize,
    pub pairs_per_class: usize,
    pub noise_sigma: f64,
    pub noisy_fraction: f64,
    /// Frame sequences generated for temporal aggregation.
    pub videos: usize,
    /// Two-source evaluation scenes emitted by `synth`.
    pub eval_multi_source_scenes: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            num_classes: 16,
            pairs_per_class: 40,
            noise_sigma: 0.1,
            noisy_fraction: 0.0,
            videos: 400,
            eval_multi_source_scenes: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemixerSection {
    pub train: RemixerTrainConfig,
    /// Extra synthetic multi-source scenes added to the single-source ones.
    pub multi_source_scenes: usize,
    pub sources_per_scene: usize,
    pub audio_fraction: f64,
}

impl Default for RemixerSection {
    fn default() -> Self {
        Self {
            train: RemixerTrainConfig::default(),
            multi_source_scenes: 640,
            sources_per_scene: 2,
            audio_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub top_n: usize,
    pub probe: ProbeConfig,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_TOP_N,
            probe: ProbeConfig::default(),
        }
    }
}

fn default_adapters() -> BTreeMap<Role, AdapterBinding> {
    Role::ALL
        .iter()
        .filter(|&&r| r != Role::ImageMapper)
        .map(|&r| (r, AdapterBinding::Synthetic {}))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    #[serde(default)]
    pub scale: Scale,
    /// Every stage seed is derived from this one.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub world: WorldSection,
    #[serde(default)]
    pub manifold: ManifoldTrainConfig,
    #[serde(default)]
    pub remixer: RemixerSection,
    #[serde(default)]
    pub ta: TaTrainConfig,
    #[serde(default)]
    pub cyclemix: CycleMixConfig,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default = "default_adapters")]
    pub adapters: BTreeMap<Role, AdapterBinding>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            scale: Scale::default(),
            seed: 0,
            world: WorldSection::default(),
            manifold: ManifoldTrainConfig::default(),
            remixer: RemixerSection::default(),
            ta: TaTrainConfig::default(),
            cyclemix: CycleMixConfig::default(),
            evaluate: EvaluateSection::default(),
            adapters: default_adapters(),
        }
    }
}

impl PipelineConfig {
    /// The reference synthetic run: desk architectures, a 30% noisy world,
    /// lr 1e-3 throughout.
    pub fn desk() -> Self {
        Self {
            scale: Scale::Desk,
            world: WorldSection {
                noisy_fraction: 0.3,
                ..WorldSection::default()
            },
            manifold: ManifoldTrainConfig::desk(),
            remixer: RemixerSection {
                train: RemixerTrainConfig {
                    epochs: 15,
                    ..RemixerTrainConfig::desk()
                },
                ..RemixerSection::default()
            },
            ta: TaTrainConfig::desk(),
            evaluate: EvaluateSection {
                top_n: 2,
                ..EvaluateSection::default()
            },
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        for (role, binding) in &self.adapters {
            binding.validate(*role)?;
        }
        if !(0.0..=1.0).contains(&self.world.noisy_fraction) {
            return Err(Error::Config("world.noisy_fraction must lie in [0, 1]".into()));
        }
        if self.evaluate.top_n == 0 {
            return Err(Error::Config("evaluate.top_n must be at least 1".into()));
        }
        Ok(())
    }

    /// Copy with every stage seed derived from `seed`. This is the form
    /// echoed into outputs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.manifold.seed = derive_seed(self.seed, 101);
        c.remixer.train.seed = derive_seed(self.seed, 102);
        c.ta.seed = derive_seed(self.seed, 103);
        c.cyclemix.seed = derive_seed(self.seed, 104);
        c
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.resolved()
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            num_classes: self.world.num_classes,
            dims: self.scale.dims(),
            noise_sigma: self.world.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn world(&self) -> Result<SyntheticWorld> {
        SyntheticWorld::new(self.world_config())
    }

    pub fn binding(&self, role: Role) -> Option<&AdapterBinding> {
        self.adapters.get(&role)
    }

    pub fn require(&self, role: Role) -> Result<&AdapterBinding> {
        self.binding(role)
            .ok_or_else(|| Error::Config(format!("adapter role `{}` is not bound", role.name())))
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
