use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoding::{DecodeConfig, PositivePath, Strategy};
use crate::digest::{sha256_hex, to_canonical_json};
use crate::error::{Error, Result};
use crate::eval::Regime;
use crate::model::ModelConfig;
use crate::rng::derive_seed;
use crate::training::{DecoupledConfig, DpoConfig, SftConfig};
use crate::world::{DatasetConfig, Split, Vocabulary};

/// A row of the comparison report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Greedy,
    Vcd,
    OtherImage,
    Dpo,
    DcdNeg,
    DcdPos,
    DcdBoth,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Greedy,
        Method::Vcd,
        Method::OtherImage,
        Method::Dpo,
        Method::DcdNeg,
        Method::DcdPos,
        Method::DcdBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::Vcd => "vcd",
            Method::OtherImage => "other-image",
            Method::Dpo => "dpo",
            Method::DcdNeg => "dcd-neg",
            Method::DcdPos => "dcd-pos",
            Method::DcdBoth => "dcd-both",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == name.trim()).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown method '{name}'; valid methods: {}", valid.join(", ")))
        })
    }

    /// Comma-separated list, order preserved, duplicates rejected.
    pub fn parse_list(list: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for name in list.split(',').filter(|s| !s.trim().is_empty()) {
            let m = Method::parse(name)?;
            if out.contains(&m) {
                return Err(Error::Config(format!("method '{}' listed twice", m.name())));
            }
            out.push(m);
        }
        if out.is_empty() {
            return Err(Error::Config("methods list is empty".into()));
        }
        Ok(out)
    }

    /// Training stage whose checkpoint this method reads besides SFT.
    pub fn stage(self) -> Option<&'static str> {
        match self {
            Method::Dpo => Some("dpo"),
            Method::DcdNeg | Method::DcdPos | Method::DcdBoth => Some("dcd"),
            _ => None,
        }
    }

    /// Strategy and positive path are fixed by the method; the remaining
    /// decode settings come from the config.
    pub fn decode_config(self, base: &DecodeConfig) -> DecodeConfig {
        let (strategy, positive_path) = match self {
            Method::Greedy | Method::Dpo => (Strategy::Greedy, PositivePath::SftProj),
            Method::Vcd => (Strategy::Vcd, PositivePath::SftProj),
            Method::OtherImage => (Strategy::OtherImage, PositivePath::SftProj),
            Method::DcdNeg => (Strategy::Dcd, PositivePath::SftProj),
            Method::DcdPos | Method::DcdBoth => (Strategy::Dcd, PositivePath::TrainedPosProj),
        };
        DecodeConfig {
            strategy,
            positive_path,
            ..base.clone()
        }
    }
}

impl Serialize for Method {
    fn serialize<Se: serde::Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        Method::parse(&name).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSelection {
    pub methods: Vec<Method>,
    pub regimes: Vec<Regime>,
    /// Split whose preference pairs feed the held-out likelihood columns.
    pub heldout: Split,
}

impl Default for EvalSelection {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            regimes: Regime::ALL.to_vec(),
            heldout: Split::Validation,
        }
    }
}

/// Everything one experiment needs. Only `seed` is required in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub sft: SftConfig,
    /// Only used when `dcd.init_source = "pretrain_stage"`.
    #[serde(default)]
    pub pretrain: SftConfig,
    #[serde(default)]
    pub dpo: DpoConfig,
    #[serde(default)]
    pub dcd: DecoupledConfig,
    /// Shared decode settings; strategy and positive path are set per method.
    #[serde(default)]
    pub decode: DecodeConfig,
    /// Per-method replacements for `decode`, keyed by method name.
    #[serde(default)]
    pub decode_overrides: BTreeMap<Method, DecodeConfig>,
    #[serde(default)]
    pub eval: EvalSelection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Stage labels whose seeds derive from the master seed.
pub const STAGES: [&str; 5] = ["data", "sft", "dpo", "dcd", "eval"];

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            out_dir: default_out_dir(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            sft: SftConfig::default(),
            pretrain: SftConfig::default(),
            dpo: DpoConfig::default(),
            dcd: DecoupledConfig::default(),
            decode: DecodeConfig::default(),
            decode_overrides: BTreeMap::new(),
            eval: EvalSelection::default(),
        }
    }

    /// Parses TOML; errors carry the offending key and line.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Parses TOML after overwriting top-level keys, as command-line flags do.
    pub fn from_toml_with(text: &str, overrides: toml::Table) -> Result<Self> {
        if overrides.is_empty() {
            return Self::from_toml(text);
        }
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        table.extend(overrides);
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let config: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, toml::Table::new())
    }

    pub fn load_with(path: &Path, overrides: toml::Table) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_with(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.sft.validate()?;
        self.dpo.validate()?;
        self.dcd.validate()?;
        if self.dcd.init_source == crate::training::InitSource::PretrainStage {
            self.pretrain.validate()?;
        }
        self.decode.validate()?;
        for d in self.decode_overrides.values() {
            d.validate()?;
        }
        let vocab_size = Vocabulary::new(self.dataset.num_objects).size();
        if self.model.vocab_size != vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size must be {vocab_size} for {} objects, got {}",
                self.dataset.num_objects, self.model.vocab_size
            )));
        }
        if self.model.image_dim != self.dataset.image_dim {
            return Err(Error::Config(format!(
                "model.image_dim ({}) must equal dataset.image_dim ({})",
                self.model.image_dim, self.dataset.image_dim
            )));
        }
        // longest training sequence: visual prefix, 4-token prompt, list with separators
        let longest = self.model.visual_tokens + 4 + 2 * self.dataset.max_objects;
        if self.model.max_context < longest {
            return Err(Error::Config(format!(
                "model.max_context must be at least {longest} for these scenes, got {}",
                self.model.max_context
            )));
        }
        if self.eval.methods.is_empty() || self.eval.regimes.is_empty() {
            return Err(Error::Config("eval.methods and eval.regimes must be non-empty".into()));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut out: BTreeMap<String, u64> = STAGES.iter().map(|s| (s.to_string(), self.stage_seed(s))).collect();
        out.insert("master".into(), self.seed);
        out
    }

    pub fn decode_for(&self, method: Method) -> DecodeConfig {
        method.decode_config(self.decode_overrides.get(&method).unwrap_or(&self.decode))
    }

    /// Hash of everything except the output location.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(sha256_hex(&to_canonical_json(&c)?))
    }
}
