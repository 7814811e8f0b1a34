//! JSON model configuration.
//!
//! A config names a preset variant or spells out a custom one, plus the
//! kernel protocol, the parts to build, the seed and the element precision.
//! Unknown keys are rejected. The schema is published at
//! `docs/config.schema.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{KernelProtocol, ModelVariant, Parts, BASE_CHANNELS};
use crate::blocks::{BranchKind, QUERY_DIM_DEFAULT};
use crate::error::{Error, Result};

/// Element precision selector for the CLI surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config {
                detail: format!("unknown precision `{other}` (expected f32 or f64)"),
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariantSpec {
    /// One of the preset names: "xs", "s", "m".
    Name(String),
    Custom(CustomVariant),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomVariant {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_widen")]
    pub widen: f64,
    #[serde(default = "default_base_channels")]
    pub base_channels: [usize; 5],
    /// Branch-operator family per stage half: "sibm" or "ibm".
    #[serde(default = "default_module_types")]
    pub module_types: [String; 2],
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: [usize; 4],
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    #[serde(default = "default_branches")]
    pub branches: usize,
    #[serde(default = "default_gql_stages")]
    pub gql_stages: Vec<usize>,
    #[serde(default = "default_query_dim")]
    pub query_dim: usize,
}

fn default_name() -> String {
    "custom".into()
}
fn default_widen() -> f64 {
    1.0
}
fn default_base_channels() -> [usize; 5] {
    BASE_CHANNELS
}
fn default_module_types() -> [String; 2] {
    ["sibm".into(), "sibm".into()]
}
fn default_blocks() -> [usize; 4] {
    [2, 2, 2, 2]
}
fn default_expansion() -> usize {
    2
}
fn default_branches() -> usize {
    3
}
fn default_gql_stages() -> Vec<usize> {
    vec![2, 3, 4]
}
fn default_query_dim() -> usize {
    QUERY_DIM_DEFAULT
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub variant: VariantSpec,
    #[serde(default = "default_protocol")]
    pub protocol: [usize; 4],
    #[serde(default = "default_parts")]
    pub parts: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: String,
}

fn default_protocol() -> [usize; 4] {
    [3, 5, 7, 9]
}
fn default_parts() -> String {
    "full".into()
}
fn default_precision() -> String {
    "f32".into()
}

/// Everything a subcommand needs to build a model.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub variant: ModelVariant,
    pub protocol: KernelProtocol,
    pub parts: Parts,
    pub seed: u64,
    pub precision: Precision,
}

fn parse_kind(text: &str) -> Result<BranchKind> {
    match text {
        "ibm" => Ok(BranchKind::Ibm),
        "sibm" => Ok(BranchKind::Sibm),
        other => Err(Error::Config {
            detail: format!("unknown module type `{other}` (expected ibm or sibm)"),
        }),
    }
}

impl ConfigFile {
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let variant = match &self.variant {
            VariantSpec::Name(name) => ModelVariant::by_name(name)
                .map_err(|e| Error::Config { detail: e.to_string() })?,
            VariantSpec::Custom(c) => ModelVariant {
                name: c.name.clone(),
                widen: c.widen,
                base_channels: c.base_channels,
                block_kinds: [parse_kind(&c.module_types[0])?, parse_kind(&c.module_types[1])?],
                blocks_per_stage: c.blocks_per_stage,
                expansion: c.expansion,
                branches: c.branches,
                gql_stages: c.gql_stages.clone(),
                query_dim: c.query_dim,
            },
        };
        variant.validate().map_err(|e| Error::Config { detail: e.to_string() })?;
        let protocol = KernelProtocol([
            self.protocol[0],
            self.protocol[1],
            self.protocol[2],
            self.protocol[3],
        ]);
        protocol.validate().map_err(|e| Error::Config { detail: e.to_string() })?;
        Ok(ResolvedConfig {
            variant,
            protocol,
            parts: Parts::parse(&self.parts).map_err(|e| Error::Config { detail: e.to_string() })?,
            seed: self.seed,
            precision: Precision::parse(&self.precision)?,
        })
    }
}

pub fn load_config(path: &Path) -> Result<ResolvedConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ResolvedConfig> {
    let cfg: ConfigFile =
        serde_json::from_str(text).map_err(|e| Error::Config { detail: e.to_string() })?;
    cfg.resolve()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_by_name() {
        let cfg = parse_config(r#"{"variant": "xs", "protocol": [3,5,7,9], "seed": 7}"#).unwrap();
        assert_eq!(cfg.variant.name, "xs");
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.parts, Parts::Full);
        assert_eq!(cfg.precision, Precision::F32);
    }

    #[test]
    fn custom_variant_with_defaults() {
        let cfg = parse_config(
            r#"{
                "variant": {"widen": 0.5, "module_types": ["sibm", "ibm"]},
                "parts": "backbone",
                "precision": "f64"
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.variant.name, "custom");
        assert_eq!(cfg.variant.block_kinds[1], BranchKind::Ibm);
        assert_eq!(cfg.parts, Parts::Backbone);
        assert_eq!(cfg.precision, Precision::F64);
        assert_eq!(cfg.protocol, KernelProtocol([3, 5, 7, 9]));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_config(r#"{"variant": "xs", "bogus": 1}"#).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
        let err =
            parse_config(r#"{"variant": {"widen": 1.0, "bogus": true}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse_config(r#"{"variant": "xl"}"#).is_err());
        assert!(parse_config(r#"{"variant": "xs", "protocol": [2,5,7,9]}"#).is_err());
        assert!(parse_config(r#"{"variant": "xs", "parts": "heads"}"#).is_err());
        assert!(parse_config(r#"{"variant": "xs", "precision": "f16"}"#).is_err());
    }
}
