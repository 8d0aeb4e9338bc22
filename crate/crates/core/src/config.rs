//! TOML run configuration.
//!
//! A run file has four sections: `[model]`, `[population]`, `[federation]`
//! and an optional `[run]`. Unknown keys anywhere are rejected, and every
//! error names the offending field path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_synth::PopulationSpec;
use crate::error::{Error, Result};
use crate::fed_engine::FederationConfig;
use crate::models::ModelSpec;

/// Scalar type the simulation runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub precision: Precision,
    /// Train on the IID reshuffle of the generated population.
    #[serde(default)]
    pub iid_shuffle: bool,
    /// ParamTree JSON to start from, relative to the working directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_model: Option<PathBuf>,
    /// Check the per-delta norm bound every round.
    #[serde(default = "yes")]
    pub check_invariants: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            precision: Precision::default(),
            iid_shuffle: false,
            seed_model: None,
            check_invariants: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub population: PopulationSpec,
    pub federation: FederationConfig,
    #[serde(default)]
    pub run: RunSection,
}

impl RunConfig {
    /// Validates every section and the constraints between them.
    pub fn validate(&self) -> Result<()> {
        let prefixed = |e: Error, p: &str| match e {
            Error::Config { field, reason } if !field.starts_with(p) => Error::Config {
                field: format!("{p}{field}"),
                reason,
            },
            other => other,
        };
        self.model.validate().map_err(|e| prefixed(e, "model."))?;
        self.population.validate()?;
        self.federation.validate(self.population.num_clients)?;
        let (m, p) = (&self.model, &self.population);
        if m.input_dim != p.input_dim {
            return Err(Error::config(
                "model.input_dim",
                format!("{} differs from population.input_dim = {}", m.input_dim, p.input_dim),
            ));
        }
        if m.seq_len != p.seq_len {
            return Err(Error::config(
                "model.seq_len",
                format!("{} differs from population.seq_len = {}", m.seq_len, p.seq_len),
            ));
        }
        if m.num_classes < p.num_classes {
            return Err(Error::config(
                "model.num_classes",
                format!("{} is fewer than population.num_classes = {}", m.num_classes, p.num_classes),
            ));
        }
        Ok(())
    }

    /// Copy with every derived field written out explicitly.
    pub fn resolved(&self) -> Self {
        let mut r = self.clone();
        r.federation.privacy.clip = Some(r.federation.clip.bound);
        r.federation.privacy.population = Some(r.population.num_clients as u64);
        r
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse {
            what: "config serialization".into(),
            reason: e.to_string(),
        })
    }
}

/// Parses and validates a config document; defaults are applied but not resolved.
pub fn parse_config_str(s: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(s).map_err(|e| Error::config("<document>", e.to_string()))?;
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<document>".to_string() } else { path };
        Error::config(field, e.inner().message().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Population spec from either a full run config or a bare population document.
pub fn parse_population_str(s: &str) -> Result<PopulationSpec> {
    let table: toml::Table = s.parse().map_err(|e: toml::de::Error| Error::config("<document>", e.to_string()))?;
    let (value, base) = match table.get("population") {
        Some(v) => (v.clone(), "population."),
        None => (toml::Value::Table(table), ""),
    };
    let spec: PopulationSpec = serde_path_to_error::deserialize(value).map_err(|e| {
        Error::config(format!("{base}{}", e.path()), e.inner().message().to_string())
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let s = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    parse_config_str(&s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
kind = "linear_softmax"
input_dim = 4
num_classes = 3

[population]
num_clients = 10
examples_per_client = { kind = "uniform", k = 5 }
label_skew_alpha = 0.5
num_classes = 3
input_dim = 4

[federation]
rounds = 3
cohort = { mode = "fixed_size", size = 4 }
local = { mode = "steps", count = 2, batch_size = 4, lr = 0.1 }
clip = { bound = 0.5, variant = "global" }
privacy = { sigma = 0.01 }
central = { optimizer = "sgd", schedule = { base_lr = 1.0, kind = "constant" } }
"#;

    fn field_of(r: Result<RunConfig>) -> String {
        match r {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str(MINIMAL).unwrap();
        assert_eq!(c.federation.local.clip, 1.0);
        assert_eq!(c.federation.privacy.delta, 1e-9);
        assert_eq!(c.federation.fedprox_mu, 0.0);
        assert_eq!(c.population.probe_size, 256);
        assert_eq!(c.run, RunSection::default());
        let r = c.resolved();
        assert_eq!(r.federation.privacy.clip, Some(0.5));
        assert_eq!(r.federation.privacy.population, Some(10));
    }

    #[test]
    fn resolved_config_round_trips() {
        let r = parse_config_str(MINIMAL).unwrap().resolved();
        let text = r.to_toml().unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), r);
        let mut inf = r.clone();
        inf.federation.local.clip = f64::INFINITY;
        inf.federation.clip.bound = f64::INFINITY;
        inf.federation.privacy.clip = Some(f64::INFINITY);
        inf.population.label_skew_alpha = f64::INFINITY;
        assert_eq!(parse_config_str(&inf.to_toml().unwrap()).unwrap(), inf);
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let bad = MINIMAL.replace("rounds = 3", "rounds = 3\nroundz = 4");
        assert_eq!(field_of(parse_config_str(&bad)), "federation.roundz");
        let bad = MINIMAL.replace("lr = 0.1 }", "lr = 0.1, momentum = 0.9 }");
        assert_eq!(field_of(parse_config_str(&bad)), "federation.local.momentum");
    }

    #[test]
    fn type_errors_name_the_field() {
        let bad = MINIMAL.replace("rounds = 3", "rounds = \"three\"");
        assert_eq!(field_of(parse_config_str(&bad)), "federation.rounds");
    }

    #[test]
    fn privacy_clip_must_match_clip_bound() {
        let bad = MINIMAL.replace("sigma = 0.01", "sigma = 0.01, clip = 0.4");
        match parse_config_str(&bad) {
            Err(Error::Config { field, reason }) => {
                assert_eq!(field, "federation.privacy.clip");
                assert!(reason.contains("federation.clip.bound"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cross_section_checks() {
        let bad = MINIMAL.replace("population]\nnum_clients = 10", "population]\nnum_clients = 3");
        assert_eq!(field_of(parse_config_str(&bad)), "federation.cohort.size");
        let bad = MINIMAL.replace("input_dim = 4\nnum_classes = 3", "input_dim = 5\nnum_classes = 3");
        assert_eq!(field_of(parse_config_str(&bad)), "model.input_dim");
        let bad = MINIMAL.replace("sigma = 0.01", "sigma = 0.01, population = 11");
        assert_eq!(field_of(parse_config_str(&bad)), "federation.privacy.population");
    }

    #[test]
    fn population_from_either_document() {
        let full = parse_population_str(MINIMAL).unwrap();
        assert_eq!(full.num_clients, 10);
        let bare = "num_clients = 10\nexamples_per_client = { kind = \"uniform\", k = 5 }\n\
                    label_skew_alpha = 0.5\nnum_classes = 3\ninput_dim = 4\n";
        assert_eq!(parse_population_str(bare).unwrap(), full);
        assert!(parse_population_str("num_clients = 10").is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(parse_config("/nonexistent/run.toml"), Err(Error::Io { .. })));
    }
}
