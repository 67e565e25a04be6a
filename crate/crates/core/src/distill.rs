//! Linearization of search trees into warm-start data: direct chains,
//! backtrack-corrected chains, deduplication, dialog conversion and JSONL
//! datasets.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;
use crate::scene::{crop, SceneError, TaskInstance, TaskKind};
use crate::search::{NodeStep, SearchTree, ROOT};
use crate::trace::{
    clean_step_text, render_dialog, render_trace, Coordinate, Dialog, GroundedStep, ReasonTrace, Segment, TraceError,
    BACKTRACK_PHRASE,
};

/// Most corrected chains taken from one tree.
pub const MAX_CORRECTED_PER_TREE: usize = 3;
/// Terminal reward at or above which a rollout counts as correct.
pub const CORRECT_THRESHOLD: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("paths come from different trees")]
    IncompatiblePaths,
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}

/// A root-to-terminal path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct TreePath<S> {
    pub tree_id: String,
    pub nodes: Vec<usize>,
    pub reward: S,
}

pub fn enumerate_paths<S: Scalar>(tree: &SearchTree<S>) -> Vec<TreePath<S>> {
    let mut out = Vec::new();
    let mut stack = vec![ROOT];
    while let Some(id) = stack.pop() {
        let node = tree.node(id);
        if node.terminal {
            out.push(TreePath {
                tree_id: tree.task_id.clone(),
                nodes: tree.path_to(id),
                reward: node.reward.unwrap_or_else(S::zero),
            });
        }
        stack.extend(node.children.iter().rev());
    }
    out
}

pub fn classify_rollouts<S: Scalar>(paths: Vec<TreePath<S>>) -> (Vec<TreePath<S>>, Vec<TreePath<S>>) {
    paths.into_iter().partition(|p| p.reward >= S::of(CORRECT_THRESHOLD))
}

fn path_steps<S: Scalar>(tree: &SearchTree<S>, path: &TreePath<S>) -> Vec<GroundedStep> {
    path.nodes
        .iter()
        .filter_map(|&i| match &tree.node(i).step {
            NodeStep::Step { step } => Some(step.clone()),
            _ => None,
        })
        .collect()
}

fn path_answer<S: Scalar>(tree: &SearchTree<S>, path: &TreePath<S>) -> String {
    path.nodes.last().and_then(|&i| tree.answer_of(i)).unwrap_or_default().to_string()
}

/// The trace read directly off a path.
pub fn direct_chain<S: Scalar>(tree: &SearchTree<S>, path: &TreePath<S>) -> ReasonTrace {
    ReasonTrace::new(path_steps(tree, path), path_answer(tree, path)).with_reward(path.reward.as_f64())
}

/// Incorrect steps, one backtrack step, then the full correct path.
pub fn synthesize_corrected_chain<S: Scalar>(
    tree: &SearchTree<S>,
    incorrect: &TreePath<S>,
    correct: &TreePath<S>,
) -> Result<ReasonTrace, DistillError> {
    if incorrect.tree_id != correct.tree_id || incorrect.tree_id != tree.task_id {
        return Err(DistillError::IncompatiblePaths);
    }
    let mut steps = path_steps(tree, incorrect);
    steps.push(GroundedStep::new(BACKTRACK_PHRASE, None)?);
    steps.extend(path_steps(tree, correct));
    Ok(ReasonTrace::new(steps, path_answer(tree, correct)).with_reward(correct.reward.as_f64()))
}

fn common_prefix(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Direct,
    Corrected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub trace: ReasonTrace,
    pub provenance: Provenance,
}

/// All direct chains of a tree plus up to [`MAX_CORRECTED_PER_TREE`]
/// corrected ones. Each incorrect path is paired with the correct path
/// sharing its deepest common ancestor, preferring the higher-valued branch.
/// Chains without steps are skipped.
pub fn linearize<S: Scalar>(tree: &SearchTree<S>) -> Result<Vec<Chain>, DistillError> {
    let (correct, incorrect) = classify_rollouts(enumerate_paths(tree));
    let mut out: Vec<Chain> = correct
        .iter()
        .map(|p| direct_chain(tree, p))
        .filter(|t| !t.steps.is_empty())
        .map(|trace| Chain { trace, provenance: Provenance::Direct })
        .collect();
    let mut corrected = 0;
    for bad in &incorrect {
        if corrected == MAX_CORRECTED_PER_TREE {
            break;
        }
        let mut best: Option<(&TreePath<S>, usize, S)> = None;
        for good in &correct {
            let depth = common_prefix(&bad.nodes, &good.nodes);
            let branch_q = tree.node(good.nodes[depth.min(good.nodes.len() - 1)]).q;
            let better = match best {
                None => true,
                Some((_, d, q)) => depth > d || (depth == d && branch_q > q),
            };
            if better {
                best = Some((good, depth, branch_q));
            }
        }
        if let Some((good, _, _)) = best {
            out.push(Chain { trace: synthesize_corrected_chain(tree, bad, good)?, provenance: Provenance::Corrected });
            corrected += 1;
        }
    }
    Ok(out)
}

/// Key used for deduplication: rendered text with tags removed and
/// whitespace collapsed. Coordinates are untouched.
pub fn dedup_key(trace: &ReasonTrace) -> String {
    let text = render_trace(trace).unwrap_or_else(|_| format!("{} {}", trace.think_text(), trace.answer));
    clean_step_text(&text)
}

/// Keeps the first occurrence of every distinct normalized text.
pub fn deduplicate(chains: Vec<Chain>) -> Vec<Chain> {
    let mut seen = HashSet::new();
    chains.into_iter().filter(|c| seen.insert(dedup_key(&c.trace))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    pub window: u32,
    pub resize: u32,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { window: 100, resize: 384 }
    }
}

/// Splits a single-turn trace into a tool-use dialog. Every anchored step
/// becomes a think block followed by a crop call and its observation.
/// Unanchored text is carried into the next think block; the text left after
/// the last anchor forms the final think block before the answer.
pub fn to_multiturn_dialog(trace: &ReasonTrace, task: &TaskInstance, cfg: CropConfig) -> Result<Dialog, DistillError> {
    let mut segments = Vec::new();
    let mut pending: Vec<String> = Vec::new();
    for step in &trace.steps {
        pending.push(step.render());
        if let Some(anchor) = step.anchor() {
            segments.push(Segment::Think(pending.join("\n")));
            pending.clear();
            segments.push(Segment::ToolCall(anchor));
            segments.push(Segment::Observation(crop(&task.raster, anchor, cfg.window, cfg.resize)?));
        }
    }
    segments.push(Segment::Think(pending.join("\n")));
    segments.push(Segment::Answer(trace.answer.clone()));
    Ok(Dialog::from_segments(segments))
}

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub task_id: String,
    pub kind: TaskKind,
    pub text: String,
    pub anchors: Vec<Coordinate>,
    pub reward: f64,
    pub provenance: Provenance,
    /// Digests of the observation crops, for dialog records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations: Option<Vec<String>>,
}

impl DatasetRecord {
    pub fn single(task: &TaskInstance, chain: &Chain) -> Result<Self, DistillError> {
        Ok(Self {
            task_id: task.id(),
            kind: task.kind,
            text: render_trace(&chain.trace)?,
            anchors: chain.trace.anchors(),
            reward: chain.trace.reward.unwrap_or(0.0),
            provenance: chain.provenance,
            observations: None,
        })
    }

    pub fn dialog(task: &TaskInstance, chain: &Chain, cfg: CropConfig) -> Result<Self, DistillError> {
        let dialog = to_multiturn_dialog(&chain.trace, task, cfg)?;
        let observations = dialog
            .segments
            .iter()
            .filter_map(|s| match s {
                Segment::Observation(img) => Some(img.digest()),
                _ => None,
            })
            .collect();
        Ok(Self {
            task_id: task.id(),
            kind: task.kind,
            text: render_dialog(&dialog)?,
            anchors: dialog.tool_calls(),
            reward: chain.trace.reward.unwrap_or(0.0),
            provenance: chain.provenance,
            observations: Some(observations),
        })
    }
}

/// Appends records to `path`, one JSON object per line.
pub fn emit_dataset(records: &[DatasetRecord], path: &Path) -> Result<(), DistillError> {
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>, DistillError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DistillError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillStats {
    pub direct: usize,
    pub corrected: usize,
    pub mean_steps: f64,
}

pub fn stats(chains: &[Chain]) -> DistillStats {
    let direct = chains.iter().filter(|c| c.provenance == Provenance::Direct).count();
    let steps: usize = chains.iter().map(|c| c.trace.steps.len()).sum();
    DistillStats {
        direct,
        corrected: chains.len() - direct,
        mean_steps: if chains.is_empty() { 0.0 } else { steps as f64 / chains.len() as f64 },
    }
}
