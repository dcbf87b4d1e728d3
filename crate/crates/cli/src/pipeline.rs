//! `cftraj pipeline`: every stage in order, driven by one TOML file.
//!
//! ```toml
//! seed = 0
//! surrogate_seeds = [0, 1, 2, 3]
//! tasks = [1, 2]
//! divergence_samples = 1000
//!
//! [pipeline]
//! conditions = ["random", "critical", "counterfactual"]
//!
//! [pipeline.training]
//! seed = 0
//! ```

use std::path::{Path, PathBuf};

use cftraj::divergence::DEFAULT_EPSILON;
use cftraj::pipeline::PipelineConfig;
use cftraj::study::{Task, DEFAULT_QUESTIONS};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::{write_text, RunManifest};
use crate::stages::{self, to_json, EstimatorArg, SessionSizes, Setting};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for rollouts, explanation selection, divergence sampling and
    /// study sessions. Training uses `pipeline.training.seed`.
    pub seed: u64,
    pub surrogate_seeds: Vec<u64>,
    pub tasks: Vec<u8>,
    pub divergence_samples: usize,
    pub questions: usize,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            surrogate_seeds: (0..20).collect(),
            tasks: vec![1, 2],
            divergence_samples: 1000,
            questions: DEFAULT_QUESTIONS,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.surrogate_seeds.len() < 2 {
            return Err(CliError::Config("surrogate_seeds needs at least two seeds".into()));
        }
        if let Some(t) = self.tasks.iter().find(|t| Task::from_number(**t).is_none()) {
            return Err(CliError::Config(format!("unknown task {t}")));
        }
        if self.divergence_samples == 0 || self.questions == 0 {
            return Err(CliError::Config("divergence_samples and questions must be positive".into()));
        }
        Ok(())
    }

    pub fn sizes(&self) -> SessionSizes {
        SessionSizes {
            dataset_episodes: self.pipeline.dataset_episodes,
            explanations: self.pipeline.explanations,
            questions: self.questions,
        }
    }
}

/// File names inside the output directory.
pub mod layout {
    pub const POLICY: &str = "policy.json";
    pub const TRAINING_LOG: &str = "training-log.jsonl";
    pub const DATASET: &str = "dataset.json";
    pub const SURROGATE: &str = "surrogate.json";
    pub const MANIFEST: &str = "manifest.json";

    pub fn explanations(c: cftraj::selection::Condition) -> String {
        format!("explanations-{c}.json")
    }

    pub fn divergence(c: cftraj::selection::Condition) -> String {
        format!("divergence-{c}.json")
    }

    pub fn session(task: u8, c: cftraj::selection::Condition) -> String {
        format!("sessions/task{task}-{c}.json")
    }
}

struct Run<'a> {
    out: &'a Path,
    manifest: RunManifest,
    quiet: bool,
}

impl Run<'_> {
    fn write(&mut self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        write_text(&path, text)?;
        self.manifest.output(self.out, &path)?;
        if !self.quiet {
            eprintln!("wrote {}", path.display());
        }
        Ok(path)
    }
}

/// Runs every stage into `out`. On failure the manifest is still written,
/// marked partial and listing what was produced.
pub fn run(cfg: &RunConfig, config_path: &Path, out: &Path, quiet: bool) -> Result<RunManifest, CliError> {
    let mut manifest = RunManifest::new("pipeline", Some(cfg.seed), serde_json::to_value(cfg).expect("config serializes"));
    manifest.input(config_path)?;
    let mut run = Run { out, manifest, quiet };
    let result = stages_into(cfg, &mut run);
    if let Err(e) = &result {
        run.manifest.status = "partial".into();
        run.manifest.error = Some(e.to_string());
    }
    run.manifest.write(&out.join(layout::MANIFEST))?;
    result.map(|()| run.manifest)
}

fn stages_into(cfg: &RunConfig, run: &mut Run<'_>) -> Result<(), CliError> {
    let setting = Setting::of(&cfg.pipeline);
    let trained = stages::train(&setting, &cfg.pipeline.training)?;
    let policy_path = run.write(layout::POLICY, &(trained.file.to_json() + "\n"))?;
    run.write(layout::TRAINING_LOG, &trained.log.to_jsonl())?;
    let l = stages::load_policy(&policy_path, &setting)?;

    let dataset = stages::rollout(&l, &l.train_env, cfg.pipeline.dataset_episodes, cfg.seed)?;
    run.write(layout::DATASET, &to_json(&dataset))?;

    for c in &cfg.pipeline.conditions {
        let set = stages::explain(&l, *c, Some(&dataset), cfg.pipeline.explanations, cfg.pipeline.show_full, cfg.seed)?;
        run.write(&layout::explanations(*c), &to_json(&set))?;
        let kl = stages::divergence(&l, EstimatorArg::SmoothedEmpirical, Some(&set), cfg.divergence_samples, DEFAULT_EPSILON, cfg.seed)?;
        run.write(&layout::divergence(*c), &to_json(&kl))?;
    }

    let report = stages::surrogate(&l, &cfg.pipeline, &cfg.surrogate_seeds)?;
    run.write(layout::SURROGATE, &to_json(&report))?;

    for t in &cfg.tasks {
        let task = Task::from_number(*t).expect("validated");
        for c in &cfg.pipeline.conditions {
            let s = stages::study_build(&l, task, *c, cfg.sizes(), cfg.seed)?;
            run.write(&layout::session(*t, *c), &(s.to_json() + "\n"))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn nested_tables_override() {
        let cfg =
            RunConfig::parse("seed = 7\nsurrogate_seeds = [1, 2]\n[pipeline]\nexplanations = 4\n[pipeline.training]\nseed = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pipeline.explanations, 4);
        assert_eq!(cfg.pipeline.training.seed, 3);
        assert_eq!(cfg.pipeline.training.episodes, 20_000);
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            "[pipeline]\nconditions = [\"random\", \"saliency\"]\n",
            "surrogate_seeds = [1]\n",
            "tasks = [3]\n",
            "colour = 1\n",
            "[pipeline]\nconditions = []\n",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Config(_))), "{text}");
        }
    }
}
