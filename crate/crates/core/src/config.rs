//! Run configuration: one JSON document with a section per component.
//!
//! A file only needs the keys it changes; everything else comes from the
//! chosen profile. Unknown keys are rejected at every level.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::atom_decoder::DecoderConfig;
use crate::flow::FlowConfig;
use crate::mbo::EsConfig;
use crate::model::ModelConfig;
use crate::toy::ToyConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-size model and schedule.
    Paper,
    /// Reduced model and schedule for a single CPU core.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { dataset: None, checkpoint: None, out_dir: PathBuf::from("out") }
    }
}

/// Sizes of the experiment commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Held-out records used by reconstruct, optimize, ablate and eval.
    pub n_eval: usize,
    pub omegas: Vec<f64>,
    pub timing_sizes: Vec<usize>,
    pub interp_steps: usize,
    pub decay_sweep: Vec<f64>,
    /// Geometry tolerances of the strict reconstruction match.
    pub length_rel_tol: f64,
    pub angle_tol_deg: f64,
    pub position_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_eval: 100,
            omegas: vec![0.0, 2.0, 4.0],
            timing_sizes: vec![100, 500, 1000],
            interp_steps: 8,
            decay_sweep: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            length_rel_tol: 0.02,
            angle_tol_deg: 2.0,
            position_tol: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    pub paths: Paths,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub flow: FlowConfig,
    pub decoding: DecoderConfig,
    pub es: EsConfig,
    pub toy: ToyConfig,
    pub experiments: ExperimentConfig,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (model, training) = match profile {
            Profile::Paper => (ModelConfig::paper(), TrainConfig::paper()),
            Profile::Desk => (ModelConfig::desk(), TrainConfig::desk()),
        };
        RunConfig {
            seed: 0,
            profile,
            paths: Paths::default(),
            model,
            training,
            flow: FlowConfig::default(),
            decoding: DecoderConfig::default(),
            es: EsConfig::default(),
            toy: ToyConfig::default(),
            experiments: ExperimentConfig::default(),
        }
    }

    /// Parses a JSON document over the defaults of `profile`, or of the
    /// document's own `profile` key when none is forced.
    pub fn from_json(text: &str, profile: Option<Profile>) -> Result<Self, ConfigError> {
        let over: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if !over.is_object() {
            return Err(ConfigError::Parse("top level must be a JSON object".into()));
        }
        let named = match over.get("profile") {
            Some(p) => Some(serde_json::from_value::<Profile>(p.clone()).map_err(|e| ConfigError::Parse(format!("profile: {e}")))?),
            None => None,
        };
        let profile = profile.or(named).unwrap_or(Profile::Desk);
        let mut base = serde_json::to_value(Self::for_profile(profile)).expect("config serializes");
        merge(&mut base, over);
        base["profile"] = serde_json::to_value(profile).expect("profile serializes");
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_json(&text, profile)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = ConfigError::Invalid;
        self.model.validate().map_err(inv)?;
        self.training.validate().map_err(inv)?;
        self.flow.validate().map_err(inv)?;
        if self.decoding.beam_width == 0 {
            return Err(inv("N_beam must be at least 1".into()));
        }
        self.es.validate().map_err(|e| inv(e.to_string()))?;
        if self.experiments.n_eval == 0 || self.experiments.interp_steps == 0 {
            return Err(inv("experiment sizes must be positive".into()));
        }
        Ok(())
    }

    /// Canonical single-line JSON.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_profile_defaults() {
        assert_eq!(RunConfig::from_json("{}", None).unwrap(), RunConfig::for_profile(Profile::Desk));
        assert_eq!(RunConfig::from_json("{}", Some(Profile::Paper)).unwrap(), RunConfig::for_profile(Profile::Paper));
        let named = RunConfig::from_json(r#"{"profile": "paper"}"#, None).unwrap();
        assert_eq!(named.model.transformer_dim, 256);
    }

    #[test]
    fn overrides_merge_per_key() {
        let c = RunConfig::from_json(r#"{"seed": 7, "training": {"batch_size": 8}, "flow": {"w_cfg": 4.0}}"#, None).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.training.batch_size, 8);
        assert_eq!(c.training.gradient_steps, TrainConfig::desk().gradient_steps);
        assert_eq!(c.flow.omega, 4.0);
        assert_eq!(c.flow.n_step, 1000);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for doc in [r#"{"sead": 1}"#, r#"{"model": {"n_clique": 3}}"#, r#"{"es": {"sigma": 0.1}}"#, r#"{"decoding": {"beam": 3}}"#] {
            assert!(RunConfig::from_json(doc, None).is_err(), "{doc}");
        }
    }

    #[test]
    fn every_table_key_is_representable() {
        let v = serde_json::to_value(RunConfig::default()).unwrap();
        for (section, keys) in [
            ("model", &["n_cliques", "clique_dim", "knot_dim", "transformer_dim", "n_blocks", "n_heads", "n_registers", "mlp_dim", "n_mlp", "dropout_rate"][..]),
            ("training", &["gradient_steps", "alpha_vae", "alpha_mse", "beta_mse", "temp_atom", "warmup", "learning_rate"][..]),
            ("flow", &["temp_flow", "w_cfg", "N_step"][..]),
            ("decoding", &["N_beam"][..]),
            ("es", &["algorithm", "antithetic", "n_pert", "pert_scale", "learning_rate", "design_steps", "decay"][..]),
        ] {
            for k in keys {
                assert!(v[section].get(*k).is_some(), "{section}.{k}");
            }
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_values_are_caught() {
        assert!(RunConfig::from_json(r#"{"es": {"n_pert": 0}}"#, None).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"n_heads": 3}}"#, None).is_err());
        assert!(RunConfig::from_json("[1]", None).is_err());
    }
}
