//! Run configuration: every field has a default, a TOML file can override
//! the defaults and command-line flags override the file. The effective
//! configuration is echoed next to the reports as `config.toml`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use pirl_core::data::Dataset;
use pirl_core::losses::PretrainMode;
use pirl_core::models::Preset;
use pirl_core::training::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "dann")]
    Dann,
    #[serde(rename = "mmd")]
    Mmd,
    #[serde(rename = "triplet")]
    Triplet,
    #[serde(rename = "mmd+triplet")]
    MmdTriplet,
    #[serde(rename = "person-specific")]
    PersonSpecific,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Dann,
        Variant::Mmd,
        Variant::Triplet,
        Variant::MmdTriplet,
        Variant::PersonSpecific,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Dann => "dann",
            Variant::Mmd => "mmd",
            Variant::Triplet => "triplet",
            Variant::MmdTriplet => "mmd+triplet",
            Variant::PersonSpecific => "person-specific",
        }
    }

    pub fn pretrain_mode(self) -> PretrainMode {
        match self {
            Variant::Dann => PretrainMode::Dann,
            Variant::Mmd | Variant::MmdTriplet => PretrainMode::Mmd,
            _ => PretrainMode::None,
        }
    }

    pub fn finetune_triplet(self) -> bool {
        matches!(self, Variant::Triplet | Variant::MmdTriplet)
    }

    /// The training configuration this variant runs under.
    pub fn training(self, base: &TrainingConfig) -> TrainingConfig {
        TrainingConfig {
            pretrain_mode: self.pretrain_mode(),
            finetune_triplet: self.finetune_triplet(),
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            format!("unknown variant '{s}'; valid names: {}", names.join(", "))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Canonical dataset CSV.
    pub data: String,
    /// Output directory.
    pub output: String,
    pub preset: Preset,
    pub variants: Vec<Variant>,
    /// Subjects held out for testing. When empty, the first
    /// `train_fraction` of the sorted subject ids train and the rest test.
    pub test_subjects: Vec<String>,
    pub train_fraction: f64,
    /// Per-sample min-max normalization before training.
    pub normalize: bool,
    /// Trials trained concurrently; never changes the results.
    pub parallel_trials: usize,
    pub training: TrainingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: String::new(),
            output: "pirl-out".into(),
            preset: Preset::Clas,
            variants: Variant::ALL.to_vec(),
            test_subjects: Vec::new(),
            train_fraction: 0.7,
            normalize: true,
            parallel_trials: 1,
            training: TrainingConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML. A missing `training.batch_size` follows the preset.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let has_batch = raw
            .get("training")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("batch_size"));
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !has_batch {
            cfg.training.batch_size = TrainingConfig::for_preset(cfg.preset).batch_size;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.variants.is_empty() {
            return Err(Error::Config("no variants requested".into()));
        }
        let mut seen = self.variants.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.variants.len() {
            return Err(Error::Config("variants listed more than once".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.parallel_trials == 0 {
            return Err(Error::Config("parallel_trials must be positive".into()));
        }
        Ok(())
    }

    /// Training subject ids for `dataset`.
    pub fn train_subjects(&self, dataset: &Dataset) -> Result<Vec<String>> {
        let all = dataset.subjects();
        if !self.test_subjects.is_empty() {
            if let Some(bad) = self.test_subjects.iter().find(|s| !all.contains(s)) {
                return Err(pirl_core::Error::UnknownSubject(bad.clone()).into());
            }
            return Ok(all.into_iter().filter(|s| !self.test_subjects.contains(s)).collect());
        }
        if all.len() < 2 {
            return Err(Error::Config("need at least two subjects to hold one out".into()));
        }
        let n = ((all.len() as f64 * self.train_fraction).round() as usize).clamp(1, all.len() - 1);
        Ok(all[..n].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>(), Ok(v));
        }
        let err = "mmd-triplet".parse::<Variant>().unwrap_err();
        assert!(err.contains("mmd+triplet") && err.contains("person-specific"));
    }

    #[test]
    fn toml_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.test_subjects = vec!["s05".into()];
        cfg.training.kernel = pirl_core::losses::KernelConfig::fixed(1.5);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn batch_size_follows_preset_unless_given() {
        let cfg = RunConfig::from_toml("preset = \"apnea\"").unwrap();
        assert_eq!(cfg.training.batch_size, 256);
        let cfg = RunConfig::from_toml("preset = \"apnea\"\n[training]\nbatch_size = 8").unwrap();
        assert_eq!(cfg.training.batch_size, 8);
        assert!(RunConfig::from_toml("epoch = 3").is_err());
    }
}
