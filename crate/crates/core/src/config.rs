//! TOML run configuration with `section.key=value` overrides.
//!
//! ```toml
//! [encoder]
//! embed_dim = 16
//! num_blocks = 2
//!
//! [adapters]
//! blocks = "all"      # 1-based: "1-3", "1,4-6", "none"
//! kinds = "mlp"       # "mlp+atten", "all", "none", ...
//! bottleneck = 8
//!
//! [protocol]
//! steps = 5
//! seed = 7
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{self, AdapterConfig};
use crate::cil::TrainRecipe;
use crate::data::{SplitPlan, SyntheticSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub blocks: String,
    pub kinds: String,
    pub bottleneck: usize,
    pub alpha: f64,
    pub biases: bool,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            blocks: "all".into(),
            kinds: "mlp".into(),
            bottleneck: 64,
            alpha: adapters::DEFAULT_ALPHA,
            biases: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub spread: f64,
    pub noise: f64,
    pub test_fraction: f64,
    /// 1 keeps the training split balanced.
    pub imb_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            source: DataSource::Synthetic,
            num_classes: s.num_classes,
            samples_per_class: s.samples_per_class,
            spread: s.spread,
            noise: s.noise,
            test_fraction: s.test_fraction,
            imb_factor: 1.0,
            raw_dir: None,
            train_manifest: None,
            test_manifest: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub steps: usize,
    pub base_classes: usize,
    pub seed: u64,
    /// Seed of the randomly initialised backbone, independent of `seed`.
    pub encoder_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_weights: Option<PathBuf>,
    pub concat: bool,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            steps: 5,
            base_classes: 0,
            seed: 0,
            encoder_seed: 0,
            encoder_weights: None,
            concat: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub adapters: AdapterSection,
    pub recipe: TrainRecipe,
    pub data: DataSection,
    pub protocol: ProtocolSection,
}

fn toml_error(e: impl std::fmt::Display) -> Error {
    let msg = e.to_string();
    let key = msg
        .split('`')
        .nth(1)
        .map_or_else(|| "config".to_string(), str::to_string);
    Error::config(key, msg.trim().replace('\n', " "))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(toml_error)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config("config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `section.key=value`; the value is parsed as TOML, falling
    /// back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "expected section.key=value"))?;
        let key = key.trim();
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::config(key, "expected section.key"))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut table = toml::Table::try_from(&*self).expect("config serialises");
        let sec = table
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::config(key, format!("unknown section `{section}`")))?;
        sec.insert(field.to_string(), value);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(key, e.message().to_string()))?;
        Ok(())
    }

    pub fn adapter_config(&self) -> Result<AdapterConfig> {
        let a = &self.adapters;
        let blocks = adapters::parse_blocks(&a.blocks, self.encoder.num_blocks)?;
        let kinds = adapters::parse_kinds(&a.kinds)?;
        let cfg = AdapterConfig {
            alpha: a.alpha,
            biases: a.biases,
            ..AdapterConfig::uniform(blocks, &kinds, a.bottleneck)
        };
        cfg.validate(self.encoder.num_blocks)?;
        Ok(cfg)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let d = &self.data;
        SyntheticSpec {
            num_classes: d.num_classes,
            samples_per_class: d.samples_per_class,
            channels: self.encoder.channels,
            image_size: self.encoder.image_size,
            spread: d.spread,
            noise: d.noise,
            test_fraction: d.test_fraction,
        }
    }

    pub fn split_plan(&self) -> Result<SplitPlan> {
        SplitPlan::even(
            self.data.num_classes,
            self.protocol.steps,
            self.protocol.base_classes,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter_config()?;
        self.recipe.validate()?;
        let d = &self.data;
        if !(d.imb_factor > 0.0 && d.imb_factor <= 1.0) {
            return Err(Error::config(
                "data.imb_factor",
                format!("must be in (0, 1], got {}", d.imb_factor),
            ));
        }
        match d.source {
            DataSource::Synthetic => self.synthetic_spec().validate()?,
            DataSource::Raw => {
                for (key, v) in [
                    ("data.raw_dir", &d.raw_dir),
                    ("data.train_manifest", &d.train_manifest),
                    ("data.test_manifest", &d.test_manifest),
                ] {
                    if v.is_none() {
                        return Err(Error::config(key, "required when source = \"raw\""));
                    }
                }
            }
        }
        self.split_plan()?.validate(d.num_classes)
    }

    /// SHA-256 of the canonical TOML with the master seed cleared, so runs
    /// differing only in seed share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.protocol.seed = 0;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected_with_name() {
        let err = RunConfig::from_toml_str("[adapters]\nalpah = 0.1\n").unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("alpah"), "{err}");
    }

    #[test]
    fn override_sets_and_validates() {
        let mut c = RunConfig::default();
        c.set("adapters.bottleneck=8").unwrap();
        assert_eq!(c.adapters.bottleneck, 8);
        c.set("adapters.kinds=mlp+atten").unwrap();
        assert_eq!(c.adapters.kinds, "mlp+atten");
        c.set("adapters.alpha=-1").unwrap();
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
        assert!(c.set("adapters.nope=1").is_err());
        assert!(c.set("nosection.x=1").is_err());
    }

    #[test]
    fn fingerprint_ignores_seed_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.protocol.seed = 99;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.adapters.bottleneck = 4;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }
}
