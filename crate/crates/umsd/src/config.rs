//! Run configuration: one TOML file drives every subcommand.
//!
//! Sections mirror the pipeline modules; every section and every field is
//! optional and falls back to its module default, so an empty file (or no
//! file at all) is a valid desk-scale configuration. Flag overrides and the
//! seed fan-out happen in [`RunConfig::resolve`], after which (hash, seed)
//! fully determine every output the commands produce.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::ExtractorConfig;
use crate::nn::ModelConfig;
use crate::synth::{fnv1a, SynthConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub schedule: ScheduleKind,
    pub steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            schedule: ScheduleKind::Cosine,
            steps: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Random pairs sampled by the diversity metric.
    pub diversity_pairs: usize,
    pub extractor: ExtractorConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            diversity_pairs: 1000,
            extractor: ExtractorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; [`RunConfig::resolve`] fans it out to every section.
    pub seed: u64,
    pub out: String,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub loss_weights: LossWeights,
    pub diffusion: DiffusionConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: "out".into(),
            data: SynthConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            loss_weights: LossWeights::default(),
            diffusion: DiffusionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Applies flag overrides, then pushes the master seed into every
    /// section so one value controls the whole run.
    pub fn resolve(&mut self, seed: Option<u64>, steps: Option<usize>, out: Option<&str>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(s) = steps {
            self.training.steps = s;
        }
        if let Some(o) = out {
            self.out = o.to_string();
        }
        self.data.seed = self.seed;
        self.training.seed = self.seed;
        self.eval.extractor.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        self.loss_weights.validate()?;
        self.eval.extractor.validate()?;
        if self.diffusion.steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if self.model.t_max < self.diffusion.steps {
            return Err(Error::Config(format!(
                "model t_max {} cannot embed diffusion timestep {}",
                self.model.t_max, self.diffusion.steps
            )));
        }
        if self.model.max_len < self.data.frame_range.1 {
            return Err(Error::Config(format!(
                "positional table holds {} frames but clips may reach {}",
                self.model.max_len, self.data.frame_range.1
            )));
        }
        if self.out.is_empty() {
            return Err(Error::Config("output directory is empty".into()));
        }
        Ok(())
    }

    /// Stable digest over the canonical JSON form; recorded in checkpoints
    /// and output files so artifacts can be traced to their configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }

    /// Digest over the sections a checkpoint must agree on to be loadable:
    /// model architecture and diffusion schedule. Seeds and paths stay out,
    /// so re-running with a different seed still accepts the checkpoint.
    pub fn model_hash(&self) -> String {
        let text =
            serde_json::to_string(&(&self.model, &self.diffusion)).expect("config serializes");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }
}

/// Loads a TOML run configuration. Unknown keys are rejected so typos fail
/// loudly instead of silently falling back to defaults.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
    let config: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_defaults() {
        let config: RunConfig = toml::from_str("").unwrap();
        assert_eq!(config, RunConfig::default());
        assert!(config.validate().is_ok());
    }

    #[test]
    fn partial_sections_override_only_their_fields() {
        let text = r#"
            seed = 7
            [model]
            d_model = 32
            [training]
            steps = 10
            [diffusion]
            schedule = "linear"
            steps = 25
        "#;
        let config: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.model.d_model, 32);
        assert_eq!(config.model.joints, ModelConfig::default().joints);
        assert_eq!(config.training.steps, 10);
        assert_eq!(config.diffusion.schedule, ScheduleKind::Linear);
        assert_eq!(config.diffusion.steps, 25);
        assert_eq!(config.data, SynthConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[model]\nd_mdoel = 8").is_err());
        assert!(toml::from_str::<RunConfig>("[training]\nlr = 0.1").is_err());
    }

    #[test]
    fn resolve_applies_overrides_and_fans_out_seed() {
        let mut config = RunConfig::default();
        config.resolve(Some(42), Some(3), Some("workdir"));
        assert_eq!(config.seed, 42);
        assert_eq!(config.data.seed, 42);
        assert_eq!(config.training.seed, 42);
        assert_eq!(config.eval.extractor.seed, 42);
        assert_eq!(config.training.steps, 3);
        assert_eq!(config.out, "workdir");

        let mut untouched = RunConfig {
            seed: 5,
            ..RunConfig::default()
        };
        untouched.resolve(None, None, None);
        assert_eq!(untouched.seed, 5);
        assert_eq!(untouched.training.seed, 5);
        assert_eq!(
            untouched.training.steps,
            RunConfig::default().training.steps
        );
    }

    #[test]
    fn validate_checks_cross_section_consistency() {
        let mut config = RunConfig::default();
        config.diffusion.steps = config.model.t_max + 1;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.model.max_len = config.data.frame_range.1 - 1;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.out.clear();
        assert!(config.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn model_hash_ignores_seeds_but_tracks_architecture() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.resolve(Some(99), None, Some("elsewhere"));
        assert_eq!(a.model_hash(), b.model_hash());
        let mut c = RunConfig::default();
        c.model.d_model = 16;
        assert_ne!(a.model_hash(), c.model_hash());
        let mut d = RunConfig::default();
        d.diffusion.steps = 10;
        assert_ne!(a.model_hash(), d.model_hash());
    }

    #[test]
    fn load_config_reports_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\n[model]\nd_model = 16\nmax_len = 64\n").unwrap();
        let config = load_config(&path).unwrap();
        assert_eq!(config.seed, 3);
        assert_eq!(config.model.d_model, 16);

        std::fs::write(&path, "seed = [broken").unwrap();
        assert!(matches!(load_config(&path), Err(Error::Malformed { .. })));
        assert!(load_config(&dir.path().join("absent.toml")).is_err());
    }
}
