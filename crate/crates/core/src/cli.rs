//! Command-line entry points: run configuration, persistence and the five
//! pipeline commands (generate, search, distill, train, eval).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{behavior_report, trace_from_dialog_text, BehaviorReport, RuleJudge};
use crate::distill::{deduplicate, linearize, stats, CropConfig, DatasetRecord, DistillError, DistillStats};
use crate::grammar::{parse_trace, validate_dialog, validate_single_turn};
use crate::optim::policy::{Mode, OraclePolicy, Policy, TabularSoftmaxPolicy, DEFAULT_BUCKETS};
use crate::optim::rollout::{Episode, RolloutConfig};
use crate::optim::train::{
    demonstrations, evaluate, likelihood_fit, summarize, train, Checkpoint, GrpoConfig, IterMetrics, WarmStartConfig,
};
use crate::scene::{generate_task, Difficulty, TaskInstance, TaskKind};
use crate::search::{linear_rollout, oracle_verifier, run_search, ScriptedTeacher, SearchConfig, SearchTree};
use crate::seed;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Io(source) => CliError::Io { path: "dataset".into(), source },
            other => invalid(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    /// Probability that a teacher step looks at the queried glyph.
    pub p: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self { p: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub lambda_fmt: f64,
    pub lambda_task: f64,
    pub diversity_bonus: bool,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self { lambda_fmt: 1.0, lambda_task: 1.0, diversity_bonus: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub temperature: f64,
    pub top_p: f64,
    /// Code only traces whose answer is correct.
    pub correct_only: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { temperature: 0.5, top_p: 0.99, correct_only: true }
    }
}

/// Full run configuration. Every hyperparameter table value is a named key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub scene: Difficulty,
    pub mcts: SearchConfig,
    pub teacher: TeacherSection,
    pub grpo: GrpoConfig,
    pub grpo_multiturn: GrpoConfig,
    pub crop: CropConfig,
    pub reward: RewardSection,
    pub eval: EvalSection,
    pub sft: WarmStartConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            scene: Difficulty::default(),
            mcts: SearchConfig::default(),
            teacher: TeacherSection::default(),
            grpo: GrpoConfig::single(),
            grpo_multiturn: GrpoConfig::multiturn(),
            crop: CropConfig::default(),
            reward: RewardSection::default(),
            eval: EvalSection::default(),
            sft: WarmStartConfig::default(),
        }
    }
}

/// Keys owned by `[reward]` and `[crop]`; the GRPO sections may not set them.
const SHARED_GRPO_KEYS: [&str; 4] = ["lambda_fmt", "lambda_task", "diversity_bonus", "crop"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: toml::Table = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        for section in ["grpo", "grpo_multiturn"] {
            if let Some(toml::Value::Table(t)) = value.get(section) {
                if let Some(k) = SHARED_GRPO_KEYS.iter().find(|k| t.contains_key(**k)) {
                    let home = if *k == "crop" { "[crop]" } else { "[reward]" };
                    return Err(invalid(format!("config: set {k} in {home}, not [{section}]")));
                }
            }
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.mcts.validate().map_err(|e| invalid(e.to_string()))?;
        for mode in [Mode::Single, Mode::Multi] {
            self.grpo_for(mode).validate().map_err(|e| invalid(e.to_string()))?;
        }
        if !(0.0..=1.0).contains(&self.teacher.p) {
            return Err(invalid("teacher.p must lie in [0, 1]"));
        }
        if self.crop.window == 0 || self.crop.resize == 0 {
            return Err(invalid("crop window and resize must be positive"));
        }
        if self.eval.temperature < 0.0 || !(self.eval.top_p > 0.0 && self.eval.top_p <= 1.0) {
            return Err(invalid("eval temperature must be nonnegative and top_p in (0, 1]"));
        }
        if self.scene.num_glyphs < 2 {
            return Err(invalid("scene.num_glyphs must be at least 2"));
        }
        Ok(())
    }

    /// GRPO settings for `mode` with the shared reward and crop sections applied.
    pub fn grpo_for(&self, mode: Mode) -> GrpoConfig {
        let base = match mode {
            Mode::Single => self.grpo,
            Mode::Multi => self.grpo_multiturn,
        };
        GrpoConfig {
            lambda_fmt: self.reward.lambda_fmt,
            lambda_task: self.reward.lambda_task,
            diversity_bonus: self.reward.diversity_bonus,
            crop: self.crop,
            ..base
        }
    }

    pub fn eval_rollout(&self, mode: Mode) -> RolloutConfig {
        RolloutConfig { temperature: self.eval.temperature, top_p: self.eval.top_p, ..self.grpo_for(mode).rollout() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Single,
    Multiturn,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Single => Mode::Single,
            ModeArg::Multiturn => Mode::Multi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    MultipleChoice,
    PointGrounding,
    ActionPrediction,
}

impl From<KindArg> for TaskKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::MultipleChoice => TaskKind::MultipleChoice,
            KindArg::PointGrounding => TaskKind::PointGrounding,
            KindArg::ActionPrediction => TaskKind::ActionPrediction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Checkpoint,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Parser)]
#[command(name = "grounded-rl", version, about = "Grounded reasoning pipeline on synthetic glyph scenes")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct GlobalArgs {
    /// Root seed; all randomness derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for searches and rollouts.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Refuse to overwrite or duplicate existing outputs.
    #[arg(long, global = true)]
    pub no_clobber: bool,
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum Command {
    /// Generate synthetic tasks as JSON lines.
    Generate(GenerateArgs),
    /// Run tree search on every task and write trees plus a summary.
    Search(SearchArgs),
    /// Linearize search trees into a reasoning dataset.
    Distill(DistillArgs),
    /// Optionally warm start from a dataset, then run GRPO.
    Train(TrainArgs),
    /// Evaluate a policy and code its reasoning behaviors.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct GenerateArgs {
    /// First task seed.
    #[arg(long, default_value_t = 0)]
    pub start: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 100)]
    pub count: u64,
    /// Task kind; by default kinds cycle with the seed.
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Glyphs per scene; overrides [scene].
    #[arg(long)]
    pub num_glyphs: Option<usize>,
    /// Task file, one JSON object per line.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct SearchArgs {
    /// Task file from `generate`.
    #[arg(long)]
    pub tasks: PathBuf,
    /// Simulations per task; overrides [mcts].
    #[arg(long)]
    pub simulations: Option<usize>,
    /// Probability that a teacher step looks at the queried glyph.
    #[arg(long)]
    pub teacher_p: Option<f64>,
    /// Output directory for trees and summary.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct DistillArgs {
    /// Directory written by `search`.
    #[arg(long)]
    pub trees: PathBuf,
    /// Task file the trees were searched on.
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long, value_enum, default_value = "single")]
    pub mode: ModeArg,
    /// Dataset file, one JSON record per line.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct TrainArgs {
    /// Training tasks.
    #[arg(long)]
    pub tasks: PathBuf,
    /// Distilled dataset used for the likelihood warm start.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "single")]
    pub mode: ModeArg,
    /// Peak learning rate; 0 leaves the policy unchanged.
    #[arg(long)]
    pub lr: Option<f64>,
    /// GRPO iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Rollouts per task.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Drop the tool-call diversity bonus from the reward.
    #[arg(long)]
    pub no_diversity_bonus: bool,
    /// Checkpoint path; metrics go to the same path with `.metrics.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log path; one JSON object per iteration.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct EvalArgs {
    /// Evaluation tasks.
    #[arg(long)]
    pub tasks: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a checkpoint or the scripted oracle.
    #[arg(long, value_enum, default_value = "checkpoint")]
    pub policy: PolicyArg,
    #[arg(long, value_enum, default_value = "single")]
    pub mode: ModeArg,
    /// Sampling temperature; overrides [eval].
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Code every trace, not only correct ones.
    #[arg(long)]
    pub all_traces: bool,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Settings shared by every command after flags and config are merged.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub config: RunConfig,
    pub seed: u64,
    pub workers: Option<usize>,
    pub no_clobber: bool,
}

impl Context {
    /// Merges flag > config file > default.
    pub fn resolve(global: &GlobalArgs) -> Result<Self, CliError> {
        let config = match &global.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if global.workers == Some(0) {
            return Err(invalid("--workers must be positive"));
        }
        Ok(Self {
            seed: global.seed.unwrap_or(config.run.seed),
            workers: global.workers.or(config.run.workers),
            no_clobber: global.no_clobber,
            config,
        })
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
        match self.workers {
            None => Ok(f()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| invalid(format!("worker pool: {e}")))?;
                Ok(pool.install(f))
            }
        }
    }
}

fn guard_clobber(ctx: &Context, path: &Path) -> Result<(), CliError> {
    if ctx.no_clobber && path.exists() {
        return Err(invalid(format!("{} exists and --no-clobber is set", path.display())));
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

fn to_json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskInstance>, CliError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut tasks = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let task = serde_json::from_str(&line).map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        tasks.push(task);
    }
    Ok(tasks)
}

fn kind_for(seed: u64, kind: Option<KindArg>) -> TaskKind {
    kind.map(TaskKind::from).unwrap_or(TaskKind::ALL[(seed % TaskKind::ALL.len() as u64) as usize])
}

/// Writes one task per seed. Without `--no-clobber` the file is replaced;
/// with it, new seeds are appended and any seed already present is an error.
pub fn cmd_generate(ctx: &Context, args: &GenerateArgs) -> Result<usize, CliError> {
    let difficulty =
        Difficulty { num_glyphs: args.num_glyphs.unwrap_or(ctx.config.scene.num_glyphs), ..ctx.config.scene };
    let seeds: Vec<u64> = (args.start..args.start.saturating_add(args.count)).collect();
    let mut existing = String::new();
    if ctx.no_clobber && args.out.exists() {
        let present: BTreeSet<u64> = load_tasks(&args.out)?.iter().map(|t| t.seed).collect();
        if let Some(s) = seeds.iter().find(|s| present.contains(s)) {
            return Err(invalid(format!("seed {s} already in {} and --no-clobber is set", args.out.display())));
        }
        existing = fs::read_to_string(&args.out).map_err(io_err(&args.out))?;
    }
    let tasks: Vec<TaskInstance> = ctx
        .install(|| {
            seeds.par_iter().map(|&s| generate_task(s, kind_for(s, args.kind), difficulty)).collect::<Result<_, _>>()
        })?
        .map_err(|e| invalid(e.to_string()))?;
    let mut text = existing;
    for t in &tasks {
        text.push_str(&to_json(t));
        text.push('\n');
    }
    write_file(&args.out, &text)?;
    Ok(tasks.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub tasks: usize,
    pub teacher_p: f64,
    pub config: SearchConfig,
    /// Accuracy of one linear teacher rollout per task.
    pub top1_accuracy: f64,
    pub mcts_accuracy: f64,
}

pub const SUMMARY_FILE: &str = "summary.json";

fn tree_file(dir: &Path, task_id: &str) -> PathBuf {
    dir.join(format!("tree-{task_id}.json"))
}

pub fn cmd_search(ctx: &Context, args: &SearchArgs) -> Result<SearchSummary, CliError> {
    let tasks = load_tasks(&args.tasks)?;
    let config =
        SearchConfig { simulations: args.simulations.unwrap_or(ctx.config.mcts.simulations), ..ctx.config.mcts };
    config.validate().map_err(|e| invalid(e.to_string()))?;
    let teacher_p = args.teacher_p.unwrap_or(ctx.config.teacher.p);
    if !(0.0..=1.0).contains(&teacher_p) {
        return Err(invalid("teacher p must lie in [0, 1]"));
    }
    guard_clobber(ctx, &args.out.join(SUMMARY_FILE))?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let teacher = ScriptedTeacher::new(teacher_p);
    let root = ctx.seed;
    type Outcome = (SearchTree<f64>, bool, bool);
    let outcomes: Vec<Outcome> = ctx.install(|| {
        tasks
            .par_iter()
            .map(|t| {
                let key = seed::fnv1a(t.id().as_bytes());
                let tree = run_search(t, &teacher, &oracle_verifier, &config, &mut seed::rng(root, &[0x5EA, key]))
                    .map_err(|e| invalid(format!("{}: {e}", t.id())))?;
                let mcts_ok = crate::search::search_answer(&tree).is_ok_and(|a| oracle_verifier::<f64>(t, &a) >= 1.0);
                let (_, answer) = linear_rollout(
                    t,
                    &teacher,
                    config.rollout_depth_limit,
                    config.temperature,
                    &mut seed::rng(root, &[0x70B1, key]),
                )
                .map_err(|e| invalid(format!("{}: {e}", t.id())))?;
                let top1_ok = answer.is_some_and(|a| oracle_verifier::<f64>(t, &a) >= 1.0);
                Ok((tree, top1_ok, mcts_ok))
            })
            .collect::<Result<_, CliError>>()
    })??;
    for (tree, _, _) in &outcomes {
        let path = tree_file(&args.out, &tree.task_id);
        guard_clobber(ctx, &path)?;
        write_file(&path, &tree.to_json())?;
    }
    let n = outcomes.len();
    let rate =
        |f: fn(&Outcome) -> bool| if n == 0 { 0.0 } else { outcomes.iter().filter(|o| f(o)).count() as f64 / n as f64 };
    let summary =
        SearchSummary { tasks: n, teacher_p, config, top1_accuracy: rate(|o| o.1), mcts_accuracy: rate(|o| o.2) };
    write_file(&args.out.join(SUMMARY_FILE), &to_json_pretty(&summary))?;
    Ok(summary)
}

fn load_trees(dir: &Path) -> Result<Vec<SearchTree<f64>>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("tree-") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Linearizes every tree, validates each emitted line against the grammar
/// and writes the dataset. Returns chain counts.
pub fn cmd_distill(ctx: &Context, args: &DistillArgs) -> Result<DistillStats, CliError> {
    let mode = Mode::from(args.mode);
    let tasks = load_tasks(&args.tasks)?;
    let by_id: HashMap<String, &TaskInstance> = tasks.iter().map(|t| (t.id(), t)).collect();
    let trees = load_trees(&args.trees)?;
    guard_clobber(ctx, &args.out)?;
    let crop = ctx.config.crop;
    let per_tree: Vec<(Vec<DatasetRecord>, DistillStats)> = ctx.install(|| {
        trees
            .par_iter()
            .map(|tree| {
                let task = by_id
                    .get(&tree.task_id)
                    .ok_or_else(|| invalid(format!("tree {} has no task in {}", tree.task_id, args.tasks.display())))?;
                let chains = deduplicate(linearize(tree)?);
                let records = chains
                    .iter()
                    .map(|c| match mode {
                        Mode::Single => DatasetRecord::single(task, c),
                        Mode::Multi => DatasetRecord::dialog(task, c, crop),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                for r in &records {
                    let report = match mode {
                        Mode::Single => validate_single_turn(&r.text, &task.raster),
                        Mode::Multi => validate_dialog(&r.text, &task.raster),
                    };
                    if !report.valid {
                        return Err(invalid(format!("{}: emitted text fails the grammar: {report:?}", r.task_id)));
                    }
                }
                Ok((records, stats(&chains)))
            })
            .collect::<Result<_, CliError>>()
    })??;
    let mut text = String::new();
    let mut total = DistillStats { direct: 0, corrected: 0, mean_steps: 0.0 };
    let mut steps = 0.0;
    for (records, s) in &per_tree {
        for r in records {
            text.push_str(&to_json(r));
            text.push('\n');
        }
        total.direct += s.direct;
        total.corrected += s.corrected;
        steps += s.mean_steps * (s.direct + s.corrected) as f64;
    }
    let chains = total.direct + total.corrected;
    total.mean_steps = if chains == 0 { 0.0 } else { steps / chains as f64 };
    write_file(&args.out, &text)?;
    Ok(total)
}

pub fn metrics_path(args: &TrainArgs) -> PathBuf {
    args.metrics.clone().unwrap_or_else(|| {
        let mut name = args.out.as_os_str().to_owned();
        name.push(".metrics.jsonl");
        PathBuf::from(name)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub demonstrations: usize,
    pub skipped_records: usize,
    pub warm_start_nll: Vec<f64>,
    pub iterations: usize,
    pub final_metrics: Option<IterMetrics>,
}

pub fn cmd_train(ctx: &Context, args: &TrainArgs) -> Result<TrainSummary, CliError> {
    let mode = Mode::from(args.mode);
    let tasks = load_tasks(&args.tasks)?;
    let mut cfg = ctx.config.grpo_for(mode);
    cfg.learning_rate = args.lr.unwrap_or(cfg.learning_rate);
    cfg.iterations = args.iterations.unwrap_or(cfg.iterations);
    cfg.group_size = args.group_size.unwrap_or(cfg.group_size);
    cfg.diversity_bonus &= !args.no_diversity_bonus;
    cfg.validate().map_err(|e| invalid(e.to_string()))?;
    let metrics = metrics_path(args);
    guard_clobber(ctx, &args.out)?;
    guard_clobber(ctx, &metrics)?;
    let mut policy = TabularSoftmaxPolicy::<f64>::new(DEFAULT_BUCKETS);
    let (mut demos, mut skipped, mut nll) = (0, 0, Vec::new());
    if let Some(path) = &args.warm_start {
        let records = crate::distill::load_dataset(path).map_err(|e| match e {
            DistillError::Io(source) => CliError::Io { path: path.display().to_string(), source },
            other => invalid(format!("{}: {other}", path.display())),
        })?;
        let (d, s) = demonstrations(&records, &tasks, mode, cfg.crop.resize);
        (demos, skipped) = (d.len(), s);
        nll = likelihood_fit(&mut policy, &d, &ctx.config.sft, seed::derive(ctx.seed, &[0x5F7]));
    }
    let reference = policy.clone();
    let mut log = String::new();
    let history = ctx
        .install(|| {
            train(&mut policy, &reference, &tasks, mode, &cfg, ctx.seed, |m| {
                log.push_str(&to_json(m));
                log.push('\n');
            })
        })?
        .map_err(|e| invalid(e.to_string()))?;
    write_file(&metrics, &log)?;
    write_file(&args.out, &to_json(&Checkpoint::new(&policy, mode, cfg)))?;
    Ok(TrainSummary {
        demonstrations: demos,
        skipped_records: skipped,
        warm_start_nll: nll,
        iterations: history.len(),
        final_metrics: history.last().copied(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub policy: String,
    pub tasks: usize,
    pub temperature: f64,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub fmt_rate: f64,
    pub mean_turns: f64,
    pub mean_tool_calls: f64,
    /// Episodes whose text could not be parsed into a trace for coding.
    pub uncoded: usize,
    pub behavior: BehaviorReport,
}

pub fn cmd_eval(ctx: &Context, args: &EvalArgs) -> Result<EvalReport, CliError> {
    let mode = Mode::from(args.mode);
    let tasks = load_tasks(&args.tasks)?;
    let mut rollout = ctx.config.eval_rollout(mode);
    rollout.temperature = args.temperature.unwrap_or(rollout.temperature);
    if rollout.temperature < 0.0 {
        return Err(invalid("temperature must be nonnegative"));
    }
    let checkpoint_policy;
    let (policy, name): (&dyn Policy<f64>, String) = match args.policy {
        PolicyArg::Oracle => (&OraclePolicy, "oracle".into()),
        PolicyArg::Checkpoint => {
            let path =
                args.checkpoint.as_ref().ok_or_else(|| invalid("--checkpoint is required unless --policy oracle"))?;
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let ck: Checkpoint =
                serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            checkpoint_policy = ck.policy::<f64>().map_err(|e| invalid(e.to_string()))?;
            (&checkpoint_policy, path.display().to_string())
        }
    };
    let episodes: Vec<Episode<f64>> =
        ctx.install(|| evaluate(policy, &tasks, mode, &rollout, seed::derive(ctx.seed, &[0xE7A1])))?;
    let stats = summarize(&episodes);
    let traces: Vec<Option<_>> = episodes
        .iter()
        .map(|e| {
            let trace = match mode {
                Mode::Single => parse_trace(&e.trajectory.text).ok(),
                Mode::Multi => trace_from_dialog_text(&e.trajectory.text),
            };
            trace.map(|t| t.with_reward(e.reward.r_task))
        })
        .collect();
    let coded: Vec<_> = traces.iter().flatten().cloned().collect();
    let correct_only = ctx.config.eval.correct_only && !args.all_traces;
    let report = EvalReport {
        mode,
        policy: name,
        tasks: tasks.len(),
        temperature: rollout.temperature,
        accuracy: stats.accuracy,
        mean_reward: stats.mean_reward,
        fmt_rate: stats.fmt_rate,
        mean_turns: stats.mean_turns,
        mean_tool_calls: stats.mean_tool_calls,
        uncoded: traces.len() - coded.len(),
        behavior: behavior_report(&coded, &RuleJudge::default(), correct_only),
    };
    if let Some(out) = &args.out {
        guard_clobber(ctx, out)?;
        write_file(out, &to_json_pretty(&report))?;
    }
    Ok(report)
}

/// Parses arguments, runs the command and prints its result as JSON.
/// Returns the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return 2;
            }
            let _ = write!(stdout, "{e}");
            return 0;
        }
    };
    match dispatch(&cli) {
        Ok(json) => {
            let _ = writeln!(stdout, "{json}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<String, CliError> {
    let ctx = Context::resolve(&cli.global)?;
    Ok(match &cli.command {
        Command::Generate(a) => to_json(&serde_json::json!({ "tasks": cmd_generate(&ctx, a)?, "out": a.out })),
        Command::Search(a) => to_json(&cmd_search(&ctx, a)?),
        Command::Distill(a) => to_json(&cmd_distill(&ctx, a)?),
        Command::Train(a) => to_json(&cmd_train(&ctx, a)?),
        Command::Eval(a) => to_json(&cmd_eval(&ctx, a)?),
    })
}
