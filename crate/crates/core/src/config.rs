//! Experiment configuration: one TOML document covering every module,
//! layered over a named profile.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::gradcheck::GradCheckConfig;
use crate::model::train::TrainConfig;
use crate::model::{ArchConfig, Variant};
use crate::retrieval::DEFAULT_KS;
use crate::synth::SynthSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Desk,
    PaperShape,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::PaperShape => "paper-shape",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper-shape" => Ok(Profile::PaperShape),
            _ => Err(Error::Config(format!("unknown profile {s:?}; expected desk or paper-shape"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Drop each query's own image when queries and gallery coincide.
    pub exclude_self: bool,
    /// Include per-query attention weights in the report.
    pub export_alphas: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: DEFAULT_KS.to_vec(), exclude_self: true, export_alphas: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sketch_dims: Vec<usize>,
    pub input_dims: Vec<usize>,
    pub trials: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { sketch_dims: vec![8, 16, 32, 64, 128, 256], input_dims: vec![64], trials: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { variants: Variant::ALL.to_vec() }
    }
}

/// Thresholds checked in `--assert` mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub min_top1: f64,
    pub max_baseline_confusable_top1: f64,
    pub max_train_seconds: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { min_top1: 0.9, max_baseline_confusable_top1: 0.6, max_train_seconds: 300.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    /// Master seed, copied into the train, synth and gradcheck sections.
    pub seed: u64,
    pub variant: Variant,
    /// Excluded from the config hash.
    pub output_dir: String,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
    pub bench: BenchConfig,
    pub ablate: AblateConfig,
    pub thresholds: Thresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::for_profile(Profile::Desk)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (arch, train) = match profile {
            Profile::Desk => (ArchConfig::default(), TrainConfig::desk()),
            Profile::PaperShape => (ArchConfig::paper_shape(), TrainConfig::full_size()),
        };
        ExperimentConfig {
            profile,
            seed: 0,
            variant: Variant::FullAhbn,
            output_dir: format!("runs/{}", profile.name()),
            arch,
            train,
            synth: SynthSpec::default(),
            eval: EvalConfig::default(),
            gradcheck: GradCheckConfig::default(),
            bench: BenchConfig::default(),
            ablate: AblateConfig::default(),
            thresholds: Thresholds::default(),
        }
    }

    /// Parses `text` over the defaults of its profile. `profile` and `seed`
    /// override the document.
    pub fn from_toml_str(text: &str, profile: Option<Profile>, seed: Option<u64>) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let profile = match (profile, doc.get("profile")) {
            (Some(p), _) => p,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(v)) => return Err(Error::Config(format!("profile must be a string, got {v}"))),
            (None, None) => Profile::Desk,
        };
        let mut base =
            toml::Table::try_from(ExperimentConfig::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, doc);
        base.insert("profile".into(), toml::Value::String(profile.name().into()));
        let mut cfg: ExperimentConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Loads `path` (or the bare profile defaults) and validates the result.
    pub fn load(path: Option<&Path>, profile: Option<Profile>, seed: Option<u64>) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, profile, seed)
    }

    /// Propagates the master seed and checks cross-module consistency.
    pub fn resolve(&mut self) -> Result<()> {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self.gradcheck.seed = self.seed;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        let pairs = [
            ("image_size", self.arch.image_size, self.synth.image_size),
            ("num_attributes", self.arch.num_attributes, self.synth.num_attributes),
            ("num_landmarks", self.arch.num_landmarks, self.synth.num_landmarks),
            ("num_classes / num_items", self.arch.num_classes, self.synth.num_items),
        ];
        for (name, a, s) in pairs {
            if a != s {
                return Err(Error::Config(format!("{name}: arch has {a}, synth has {s}")));
            }
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be nonempty and positive".into()));
        }
        let b = &self.bench;
        if b.trials == 0 || b.sketch_dims.is_empty() || b.input_dims.is_empty() {
            return Err(Error::Config("bench needs trials, sketch_dims and input_dims".into()));
        }
        if b.sketch_dims.contains(&0) || b.input_dims.contains(&0) {
            return Err(Error::Config("bench dimensions must be positive".into()));
        }
        if !(self.gradcheck.h > 0.0) || self.gradcheck.min_coordinates == 0 {
            return Err(Error::Config("gradcheck needs h > 0 and at least one coordinate".into()));
        }
        if self.ablate.variants.is_empty() {
            return Err(Error::Config("ablate.variants is empty".into()));
        }
        Ok(())
    }

    /// Architecture after applying the selected variant.
    pub fn variant_arch(&self, variant: Variant) -> ArchConfig {
        variant.apply(&self.arch)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir.clear();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_desk_defaults() {
        let cfg = ExperimentConfig::from_toml_str("", None, None).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn overrides_layer_over_profile() {
        let text = "profile = \"paper-shape\"\nseed = 4\n[train]\nmax_epochs = 3\n[arch.fusion]\nd = 1024\n";
        let cfg = ExperimentConfig::from_toml_str(text, None, None).unwrap();
        assert_eq!(cfg.profile, Profile::PaperShape);
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.arch.fusion.d, 1024);
        assert_eq!(cfg.arch.attribute_channels, vec![32, 64, 128, 1536]);
        assert_eq!((cfg.train.seed, cfg.synth.seed), (4, 4));
        let cli = ExperimentConfig::from_toml_str(text, Some(Profile::Desk), Some(9)).unwrap();
        assert_eq!(cli.profile, Profile::Desk);
        assert_eq!(cli.seed, 9);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::for_profile(Profile::PaperShape);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap(), None, None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn inconsistent_or_unknown_is_config_error() {
        let bad = ["[synth]\nnum_items = 20\n", "nonsense = 1\n", "variant = \"fancy\"\n", "profile = \"huge\"\n"];
        for text in bad {
            let err = ExperimentConfig::from_toml_str(text, None, None).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }
}
