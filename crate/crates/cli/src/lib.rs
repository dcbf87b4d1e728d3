//! The `cftraj` command line.
//!
//! Every stage is a subcommand; each writes its output plus a
//! `<out>.manifest.json` recording inputs, outputs and hashes. Failures print
//! a one-line JSON error record on stderr and exit 1; usage errors exit 2.

pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod stages;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use cftraj::divergence::DEFAULT_EPSILON;
use cftraj::gridworld::{build_four_rooms, DoorOffsets, BOTTOM_RIGHT, DEFAULT_HORIZON, TOP_LEFT};
use cftraj::pipeline::PipelineConfig;
use cftraj::render::{svg_frame, trajectory_frames, FrameDescriptor, SvgStyle};
use cftraj::selection::{Condition, ExplanationSet, DEFAULT_EXPLANATIONS};
use cftraj::study::{aggregate_report, ResponseLog, StudySession, Task, DEFAULT_QUESTIONS};
use cftraj::training::TrainConfig;
use cftraj::trajectory::{RolloutDataset, Trajectory};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub use error::CliError;
use manifest::{sidecar, write_text, RunManifest};
use stages::{read_json, to_json, EstimatorArg, SessionSizes, Setting};

#[derive(Debug, Parser)]
#[command(name = "cftraj", version, about = "Counterfactual-trajectory explanations: train, explain, measure, study")]
pub struct Cli {
    /// Seed for every random draw of the command. Required by commands
    /// that sample.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Session store directory (sessions/, responses/, policies/, envs/).
    #[arg(long, global = true, env = cftraj_service::DATA_DIR_VAR)]
    pub data_dir: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SettingArgs {
    /// Side length of the four-rooms layout.
    #[arg(long, default_value_t = 13)]
    pub size: usize,
    #[arg(long, default_value = TOP_LEFT)]
    pub train_room: String,
    #[arg(long, default_value = BOTTOM_RIGHT)]
    pub test_room: String,
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    pub horizon: usize,
}

impl SettingArgs {
    fn setting(&self) -> Setting {
        Setting { size: self.size, train_room: self.train_room.clone(), test_room: self.test_room.clone(), horizon: self.horizon }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvChoice {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderFormat {
    Svg,
    Frames,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the behavioral policy with A2C.
    Train {
        #[command(flatten)]
        setting: SettingArgs,
        #[arg(long, default_value_t = 20_000)]
        episodes: usize,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        /// Policy file to write.
        #[arg(long)]
        out: PathBuf,
        /// Training log (JSON lines) to write.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Collect rollouts of a saved policy.
    Rollout {
        #[command(flatten)]
        setting: SettingArgs,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, value_enum, default_value_t = EnvChoice::Train)]
        env: EnvChoice,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an explanation set under one condition.
    Explain {
        #[command(flatten)]
        setting: SettingArgs,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        condition: Condition,
        /// Rollout dataset (random and critical conditions).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EXPLANATIONS)]
        count: usize,
        /// Show counterfactual items from their first step instead of the
        /// counterfactual state.
        #[arg(long)]
        show_full: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// KL divergence between test-time and explanation start states.
    Divergence {
        #[command(flatten)]
        setting: SettingArgs,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, value_enum)]
        estimator: EstimatorArg,
        /// Compare against this set's displayed start states instead of the
        /// training start distribution.
        #[arg(long)]
        explanations: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare conditions with behavior-cloning surrogate users.
    Surrogate {
        #[command(flatten)]
        setting: SettingArgs,
        /// Saved policy; trained from `--seed` when absent.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Comma-separated list or half-open range, e.g. `0..20`.
        #[arg(long, value_parser = parse_seeds)]
        seeds: Seeds,
        #[arg(long, value_delimiter = ',')]
        conditions: Option<Vec<Condition>>,
        /// Rollouts offered to the random and critical selectors per seed.
        #[arg(long, default_value_t = 100)]
        dataset_episodes: usize,
        #[arg(long, default_value_t = DEFAULT_EXPLANATIONS)]
        explanations: usize,
        #[arg(long)]
        show_full: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build or score study sessions.
    Study {
        #[command(subcommand)]
        action: StudyCommand,
    },
    /// Render a trajectory as frame descriptors or SVG images.
    Render {
        /// Trajectory, rollout dataset or explanation set.
        #[arg(long)]
        input: PathBuf,
        /// Item index within a dataset or explanation set.
        #[arg(long, default_value_t = 0)]
        item: usize,
        /// First step to render; explanation items default to their
        /// display start.
        #[arg(long)]
        from: Option<usize>,
        #[arg(long, value_enum, default_value_t = RenderFormat::Frames)]
        format: RenderFormat,
        #[arg(long, default_value_t = 13)]
        size: usize,
        /// Frame file (`frames`) or directory (`svg`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = cftraj_service::ADDR_VAR, default_value = cftraj_service::DEFAULT_ADDR)]
        addr: SocketAddr,
    },
    /// Run every stage from a TOML config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum StudyCommand {
    /// Build one session.
    Build {
        #[command(flatten)]
        setting: SettingArgs,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        task: u8,
        #[arg(long)]
        condition: Condition,
        #[arg(long, default_value_t = DEFAULT_QUESTIONS)]
        questions: usize,
        #[arg(long, default_value_t = DEFAULT_EXPLANATIONS)]
        explanations: usize,
        #[arg(long, default_value_t = 100)]
        dataset_episodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score sessions against response logs and compare conditions.
    Score {
        /// Session file; pair each with a `--responses` file.
        #[arg(long)]
        session: Vec<PathBuf>,
        /// Response log (JSON) for the matching `--session`.
        #[arg(long)]
        responses: Vec<PathBuf>,
        /// Also score every session in `--data-dir`.
        #[arg(long)]
        from_store: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds(pub Vec<u64>);

pub fn parse_seeds(s: &str) -> Result<Seeds, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
        if b <= a {
            return Err("empty seed range".into());
        }
        return Ok(Seeds((a..b).collect()));
    }
    s.split(',').map(|p| p.trim().parse().map_err(|e| format!("bad seed `{p}`: {e}"))).collect::<Result<_, _>>().map(Seeds)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.record());
            e.exit_code()
        }
    }
}

fn need_seed(seed: Option<u64>) -> Result<u64, CliError> {
    seed.ok_or_else(|| CliError::usage("this command samples; pass --seed"))
}

/// Writes one output file plus its sidecar manifest.
fn finish(mut m: RunManifest, out: &Path, text: &str, quiet: bool) -> Result<(), CliError> {
    write_text(out, text)?;
    let side = sidecar(out);
    let base = side.parent().map(Path::to_path_buf).unwrap_or_default();
    m.output(&base, out)?;
    m.write(&side)?;
    if !quiet {
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

fn cfg_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Train { setting, episodes, threshold, out, log } => {
            let seed = need_seed(cli.seed)?;
            let cfg = TrainConfig { episodes, success_threshold: threshold, seed, ..TrainConfig::default() };
            let trained = stages::train(&setting.setting(), &cfg)?;
            let mut m =
                RunManifest::new("train", Some(seed), serde_json::json!({ "setting": cfg_json(&setting), "training": cfg_json(&cfg) }));
            if let Some(log) = &log {
                write_text(log, &trained.log.to_jsonl())?;
                let base = sidecar(&out).parent().map(Path::to_path_buf).unwrap_or_default();
                m.output(&base, log)?;
            }
            if !quiet {
                eprintln!(
                    "trained {} in {} episodes, success rate {:.3}",
                    trained.file.policy_id,
                    trained.log.episodes_run,
                    trained.log.final_success_rate.unwrap_or(f64::NAN)
                );
            }
            finish(m, &out, &(trained.file.to_json() + "\n"), quiet)
        }
        Command::Rollout { setting, policy, episodes, env, out } => {
            let seed = need_seed(cli.seed)?;
            let l = stages::load_policy(&policy, &setting.setting())?;
            let e = match env {
                EnvChoice::Train => &l.train_env,
                EnvChoice::Test => &l.test_env,
            };
            let d = stages::rollout(&l, e, episodes, seed)?;
            let mut m = RunManifest::new(
                "rollout",
                Some(seed),
                serde_json::json!({ "setting": cfg_json(&setting), "episodes": episodes, "env": env }),
            );
            m.input(&policy)?;
            finish(m, &out, &to_json(&d), quiet)
        }
        Command::Explain { setting, policy, condition, dataset, count, show_full, out } => {
            let seed = need_seed(cli.seed)?;
            let l = stages::load_policy(&policy, &setting.setting())?;
            let mut m = RunManifest::new(
                "explain",
                Some(seed),
                serde_json::json!({ "setting": cfg_json(&setting), "condition": condition, "count": count, "show_full": show_full }),
            );
            m.input(&policy)?;
            let d: Option<RolloutDataset> = match &dataset {
                Some(p) => {
                    m.input(p)?;
                    Some(read_json(p)?)
                }
                None if condition != Condition::CounterfactualStates => {
                    return Err(CliError::usage(format!("condition `{condition}` needs --dataset")));
                }
                None => None,
            };
            let set = stages::explain(&l, condition, d.as_ref(), count, show_full, seed)?;
            finish(m, &out, &to_json(&set), quiet)
        }
        Command::Divergence { setting, policy, estimator, explanations, samples, epsilon, out } => {
            let seed = need_seed(cli.seed)?;
            let l = stages::load_policy(&policy, &setting.setting())?;
            let mut m = RunManifest::new(
                "divergence",
                Some(seed),
                serde_json::json!({ "setting": cfg_json(&setting), "estimator": estimator, "samples": samples, "epsilon": epsilon }),
            );
            m.input(&policy)?;
            let set: Option<ExplanationSet> = match &explanations {
                Some(p) => {
                    m.input(p)?;
                    Some(read_json(p)?)
                }
                None => None,
            };
            let report = stages::divergence(&l, estimator, set.as_ref(), samples, epsilon, seed)?;
            finish(m, &out, &to_json(&report), quiet)
        }
        Command::Surrogate { setting, policy, seeds, conditions, dataset_episodes, explanations, show_full, out } => {
            let s = setting.setting();
            let mut config = PipelineConfig {
                conditions: conditions.unwrap_or_else(|| Condition::ALL.to_vec()),
                dataset_episodes,
                explanations,
                show_full,
                ..s.pipeline_config()
            };
            config.validate()?;
            let mut m = RunManifest::new("surrogate", cli.seed, serde_json::json!({ "pipeline": cfg_json(&config), "seeds": seeds.0 }));
            let policy_path = match policy {
                Some(p) => p,
                None => {
                    // train into a sibling file so the run stays traceable
                    let seed = need_seed(cli.seed)?;
                    config.training.seed = seed;
                    let trained = stages::train(&s, &config.training)?;
                    let p = out.with_extension("policy.json");
                    write_text(&p, &(trained.file.to_json() + "\n"))?;
                    let base = sidecar(&out).parent().map(Path::to_path_buf).unwrap_or_default();
                    m.output(&base, &p)?;
                    p
                }
            };
            m.input(&policy_path)?;
            let l = stages::load_policy(&policy_path, &s)?;
            let report = stages::surrogate(&l, &config, &seeds.0)?;
            if !quiet {
                for c in &report.conditions {
                    eprintln!(
                        "{:<15} agreement {:.4}  nll {:.4}  prediction {:.3}",
                        c.condition, c.mean_agreement, c.mean_nll, c.mean_prediction_accuracy
                    );
                }
            }
            finish(m, &out, &to_json(&report), quiet)
        }
        Command::Study { action } => study(action, cli.seed, cli.data_dir, quiet),
        Command::Render { input, item, from, format, size, out } => render(&input, item, from, format, size, &out, quiet),
        Command::Serve { addr } => {
            let dir = cli.data_dir.ok_or_else(|| CliError::usage(format!("serve needs --data-dir or {}", cftraj_service::DATA_DIR_VAR)))?;
            let state = cftraj_service::AppState::open(&dir).map_err(|e| CliError::input(&dir, e))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
            rt.block_on(cftraj_service::serve(addr, state)).map_err(|e| CliError::Runtime(format!("{addr}: {e}")))
        }
        Command::Pipeline { config, out } => {
            let text = std::fs::read_to_string(&config).map_err(|e| CliError::input(&config, e))?;
            let cfg = pipeline::RunConfig::parse(&text)?;
            pipeline::run(&cfg, &config, &out, quiet)?;
            if !quiet {
                eprintln!("pipeline complete: {}", out.display());
            }
            Ok(())
        }
    }
}

fn study(action: StudyCommand, seed: Option<u64>, data_dir: Option<PathBuf>, quiet: bool) -> Result<(), CliError> {
    match action {
        StudyCommand::Build { setting, policy, task, condition, questions, explanations, dataset_episodes, out } => {
            let seed = need_seed(seed)?;
            let l = stages::load_policy(&policy, &setting.setting())?;
            let sizes = SessionSizes { dataset_episodes, explanations, questions };
            let task = Task::from_number(task).expect("clap checks the range");
            let mut m = RunManifest::new(
                "study build",
                Some(seed),
                serde_json::json!({ "setting": cfg_json(&setting), "task": task, "condition": condition, "sizes": sizes }),
            );
            m.input(&policy)?;
            let s = stages::study_build(&l, task, condition, sizes, seed)?;
            finish(m, &out, &(s.to_json() + "\n"), quiet)
        }
        StudyCommand::Score { session, responses, from_store, out } => {
            if session.len() != responses.len() {
                return Err(CliError::usage("pass one --responses file per --session"));
            }
            let mut m = RunManifest::new("study score", None, serde_json::json!({ "from_store": from_store }));
            let mut entries: Vec<(StudySession, ResponseLog)> = Vec::new();
            for (sp, rp) in session.iter().zip(&responses) {
                m.input(sp)?;
                m.input(rp)?;
                entries.push((read_json(sp)?, read_json(rp)?));
            }
            if from_store {
                let dir = data_dir.ok_or_else(|| CliError::usage("--from-store needs --data-dir"))?;
                let store = cftraj_service::Store::open(&dir).map_err(|e| CliError::input(&dir, e))?;
                for id in store.session_ids().map_err(|e| CliError::input(&dir, e))? {
                    let Some(s) = store.session(&id).map_err(|e| CliError::input(&dir, e))? else { continue };
                    for log in store.responses(&id).map_err(|e| CliError::input(&dir, e))? {
                        entries.push((s.clone(), log));
                    }
                }
            }
            if entries.is_empty() {
                return Err(CliError::usage("nothing to score"));
            }
            let report = aggregate_report(&entries)?;
            if !quiet {
                eprint!("{}", report.to_table());
            }
            finish(m, &out, &to_json(&report), quiet)
        }
    }
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, v: serde_json::Value) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::input(path, e))
}

#[derive(Debug, Serialize)]
struct FrameFile {
    version: u32,
    from: usize,
    frames: Vec<FrameDescriptor>,
}

fn render(
    input: &Path,
    item: usize,
    from: Option<usize>,
    format: RenderFormat,
    size: usize,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    let value: serde_json::Value = read_json(input)?;
    let pick = |n: usize| CliError::input(input, format!("item {item} out of range ({n} items)"));
    let (traj, default_from): (Trajectory, usize) = if value.get("items").is_some() {
        let set: ExplanationSet = parse(input, value)?;
        let n = set.items.len();
        let it = set.items.into_iter().nth(item).ok_or_else(|| pick(n))?;
        (it.trajectory, it.display_start)
    } else if value.get("trajectories").is_some() {
        let d: RolloutDataset = parse(input, value)?;
        let n = d.trajectories.len();
        (d.trajectories.into_iter().nth(item).ok_or_else(|| pick(n))?, 0)
    } else {
        (parse(input, value)?, 0)
    };
    let spec = build_four_rooms(size, DoorOffsets::centered(size))?;
    traj.validate(&spec).map_err(|e| CliError::input(input, e))?;
    let from = from.unwrap_or(default_from);
    let frames = trajectory_frames(&traj, &spec, from)?;
    let mut m = RunManifest::new("render", None, serde_json::json!({ "item": item, "from": from, "format": format, "size": size }));
    m.input(input)?;
    match format {
        RenderFormat::Frames => finish(m, out, &to_json(&FrameFile { version: cftraj::render::FRAME_VERSION, from, frames }), quiet),
        RenderFormat::Svg => {
            let side = sidecar(out);
            let base = side.parent().map(Path::to_path_buf).unwrap_or_default();
            let style = SvgStyle::default();
            for f in &frames {
                let p = out.join(format!("frame-{:04}.svg", f.step_index));
                write_text(&p, &svg_frame(f, &style))?;
                m.output(&base, &p)?;
            }
            m.write(&side)?;
            if !quiet {
                eprintln!("wrote {} frames to {}", frames.len(), out.display());
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..3").unwrap(), Seeds(vec![0, 1, 2]));
        assert_eq!(parse_seeds("4, 9").unwrap(), Seeds(vec![4, 9]));
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book {}
