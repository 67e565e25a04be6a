//! Monte Carlo tree search over grounded reasoning steps.
//!
//! Each simulation selects a leaf by UCB (`Q + c·sqrt(ln N / n)`, natural
//! log, unvisited children first, ties to the lowest index), expands it with
//! up to `k` proposals, rolls out every new child `rollouts_per_node` times
//! and backpropagates each rollout as an incremental mean. Rollouts never
//! modify the tree.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;
use crate::rewards::task_reward;
use crate::scene::{Ask, GlyphClass, TaskInstance};
use crate::seed::Rng;
use crate::trace::{Coordinate, GroundedStep, Phrase};

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("node {0} is at the maximum depth")]
    AtMaxDepth(usize),
    #[error("node {0} is terminal")]
    TerminalNode(usize),
    #[error("proposer failed: {0}")]
    ProposerFailure(String),
    #[error("tree has no terminal node")]
    NoTerminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub simulations: usize,
    pub max_depth: usize,
    pub rollouts_per_node: usize,
    pub children_per_expansion: usize,
    pub c_puct: f64,
    pub rollout_depth_limit: usize,
    pub temperature: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            simulations: 20,
            max_depth: 10,
            rollouts_per_node: 2,
            children_per_expansion: 3,
            c_puct: 2.0,
            rollout_depth_limit: 10,
            temperature: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let counts = [
            ("simulations", self.simulations),
            ("max_depth", self.max_depth),
            ("rollouts_per_node", self.rollouts_per_node),
            ("children_per_expansion", self.children_per_expansion),
            ("rollout_depth_limit", self.rollout_depth_limit),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(SearchError::InvalidConfig(format!("{name} must be positive")));
        }
        if !(self.c_puct > 0.0 && self.c_puct.is_finite()) {
            return Err(SearchError::InvalidConfig("c_puct must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(SearchError::InvalidConfig("temperature must be nonnegative".into()));
        }
        Ok(())
    }
}

/// What a proposer returns: another step or a final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposal {
    Step(GroundedStep),
    Answer(String),
}

pub trait Proposer: Sync {
    fn propose(
        &self,
        path: &[GroundedStep],
        task: &TaskInstance,
        temperature: f64,
        rng: &mut Rng,
    ) -> Result<Proposal, SearchError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NodeStep {
    Root,
    Step { step: GroundedStep },
    Answer { answer: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct SearchNode<S> {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub depth: usize,
    pub step: NodeStep,
    pub n: u64,
    pub q: S,
    pub terminal: bool,
    /// Verifier score, set on terminal nodes.
    pub reward: Option<S>,
    /// Anchors accumulated along the path from the root.
    pub visited: Vec<Coordinate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct SearchTree<S> {
    pub task_id: String,
    pub nodes: Vec<SearchNode<S>>,
    /// Number of backpropagation calls.
    pub backprops: u64,
}

pub const ROOT: usize = 0;

impl<S: Scalar> SearchTree<S> {
    pub fn new(task_id: impl Into<String>) -> Self {
        let root = SearchNode {
            id: ROOT,
            parent: None,
            children: vec![],
            depth: 0,
            step: NodeStep::Root,
            n: 0,
            q: S::zero(),
            terminal: false,
            reward: None,
            visited: vec![],
        };
        Self { task_id: task_id.into(), nodes: vec![root], backprops: 0 }
    }

    pub fn node(&self, id: usize) -> &SearchNode<S> {
        &self.nodes[id]
    }

    /// Appends a child and returns its id.
    pub fn add_child(&mut self, parent: usize, proposal: Proposal, reward: Option<S>) -> usize {
        let id = self.nodes.len();
        let p = &self.nodes[parent];
        let mut visited = p.visited.clone();
        let (step, terminal) = match proposal {
            Proposal::Step(step) => {
                visited.extend(step.anchor());
                (NodeStep::Step { step }, false)
            }
            Proposal::Answer(answer) => (NodeStep::Answer { answer }, true),
        };
        let node = SearchNode {
            id,
            parent: Some(parent),
            children: vec![],
            depth: p.depth + 1,
            step,
            n: 0,
            q: S::zero(),
            terminal,
            reward: if terminal { reward } else { None },
            visited,
        };
        self.nodes.push(node);
        self.nodes[parent].children.push(id);
        id
    }

    /// Node ids from the root to `id`, inclusive.
    pub fn path_to(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Grounded steps on the path from the root to `id`.
    pub fn steps_to(&self, id: usize) -> Vec<GroundedStep> {
        self.path_to(id)
            .into_iter()
            .filter_map(|i| match &self.nodes[i].step {
                NodeStep::Step { step } => Some(step.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn answer_of(&self, id: usize) -> Option<&str> {
        match &self.nodes[id].step {
            NodeStep::Answer { answer } => Some(answer),
            _ => None,
        }
    }

    pub fn terminals(&self) -> impl Iterator<Item = &SearchNode<S>> {
        self.nodes.iter().filter(|n| n.terminal)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serializes")
    }
}

/// UCB score of a visited child.
pub fn ucb_score<S: Scalar>(q: S, n: u64, parent_n: u64, c: S) -> S {
    let n = S::of(n as f64);
    let big_n = S::of(parent_n.max(1) as f64);
    q + c * (big_n.ln() / n).sqrt()
}

/// Descends from the root. Stops at a terminal node, an unexpanded node, or
/// the first unvisited child (lowest index).
pub fn select<S: Scalar>(tree: &SearchTree<S>, c: S) -> Vec<usize> {
    let mut path = vec![ROOT];
    let mut cur = ROOT;
    loop {
        let node = &tree.nodes[cur];
        if node.terminal || node.children.is_empty() {
            return path;
        }
        if let Some(&unvisited) = node.children.iter().find(|&&ch| tree.nodes[ch].n == 0) {
            path.push(unvisited);
            return path;
        }
        let mut best = node.children[0];
        let mut best_score = S::neg_infinity();
        for &ch in &node.children {
            let child = &tree.nodes[ch];
            let s = ucb_score(child.q, child.n, node.n, c);
            if s > best_score {
                best = ch;
                best_score = s;
            }
        }
        path.push(best);
        cur = best;
    }
}

/// Adds up to `k` proposals as children of `node`.
#[allow(clippy::too_many_arguments)]
pub fn expand<S: Scalar, P: Proposer + ?Sized, V: Fn(&TaskInstance, &str) -> S>(
    tree: &mut SearchTree<S>,
    node: usize,
    proposer: &P,
    verifier: &V,
    task: &TaskInstance,
    k: usize,
    config: &SearchConfig,
    rng: &mut Rng,
) -> Result<Vec<usize>, SearchError> {
    if tree.nodes[node].terminal {
        return Err(SearchError::TerminalNode(node));
    }
    if tree.nodes[node].depth >= config.max_depth {
        return Err(SearchError::AtMaxDepth(node));
    }
    let path = tree.steps_to(node);
    let mut added = Vec::with_capacity(k);
    for _ in 0..k {
        let proposal = proposer.propose(&path, task, config.temperature, rng)?;
        let reward = match &proposal {
            Proposal::Answer(a) => Some(verifier(task, a)),
            Proposal::Step(_) => None,
        };
        added.push(tree.add_child(node, proposal, reward));
    }
    Ok(added)
}

/// Simulates from `node` without touching the tree. Exhausting the depth
/// limit without an answer scores 0.
#[allow(clippy::too_many_arguments)]
pub fn rollout<S: Scalar, P: Proposer + ?Sized, V: Fn(&TaskInstance, &str) -> S>(
    tree: &SearchTree<S>,
    node: usize,
    proposer: &P,
    verifier: &V,
    task: &TaskInstance,
    depth_limit: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<S, SearchError> {
    let n = &tree.nodes[node];
    if n.terminal {
        return Ok(n.reward.unwrap_or_else(S::zero));
    }
    let mut path = tree.steps_to(node);
    for _ in 0..depth_limit {
        match proposer.propose(&path, task, temperature, rng)? {
            Proposal::Answer(a) => return Ok(verifier(task, &a)),
            Proposal::Step(s) => path.push(s),
        }
    }
    Ok(S::zero())
}

/// Incremental-mean update of every node on `path`.
pub fn backpropagate<S: Scalar>(tree: &mut SearchTree<S>, path: &[usize], reward: S) {
    for &id in path {
        let node = &mut tree.nodes[id];
        node.n += 1;
        node.q += (reward - node.q) / S::of(node.n as f64);
    }
    tree.backprops += 1;
}

/// Runs `config.simulations` select/expand/rollout/backpropagate iterations.
pub fn run_search<S: Scalar, P: Proposer + ?Sized, V: Fn(&TaskInstance, &str) -> S>(
    task: &TaskInstance,
    proposer: &P,
    verifier: &V,
    config: &SearchConfig,
    rng: &mut Rng,
) -> Result<SearchTree<S>, SearchError> {
    config.validate()?;
    let mut tree = SearchTree::new(task.id());
    let c = S::of(config.c_puct);
    for _ in 0..config.simulations {
        let path = select(&tree, c);
        let leaf = *path.last().expect("path holds the root");
        let node = &tree.nodes[leaf];
        if node.terminal {
            let r = node.reward.unwrap_or_else(S::zero);
            backpropagate(&mut tree, &path, r);
        } else if node.depth < config.max_depth {
            let children =
                expand(&mut tree, leaf, proposer, verifier, task, config.children_per_expansion, config, rng)?;
            for child in children {
                let mut child_path = path.clone();
                child_path.push(child);
                for _ in 0..config.rollouts_per_node {
                    let r = rollout(
                        &tree,
                        child,
                        proposer,
                        verifier,
                        task,
                        config.rollout_depth_limit,
                        config.temperature,
                        rng,
                    )?;
                    backpropagate(&mut tree, &child_path, r);
                }
            }
        } else {
            let r =
                rollout(&tree, leaf, proposer, verifier, task, config.rollout_depth_limit, config.temperature, rng)?;
            backpropagate(&mut tree, &path, r);
        }
    }
    Ok(tree)
}

/// Answer of the terminal with the highest Q; ties go to the higher visit
/// count, then to the earliest discovered node.
pub fn search_answer<S: Scalar>(tree: &SearchTree<S>) -> Result<String, SearchError> {
    let mut best: Option<&SearchNode<S>> = None;
    for node in tree.terminals() {
        best = match best {
            Some(b) if !(node.q > b.q || (node.q == b.q && node.n > b.n)) => Some(b),
            _ => Some(node),
        };
    }
    let node = best.ok_or(SearchError::NoTerminal)?;
    Ok(tree.answer_of(node.id).unwrap_or_default().to_string())
}

/// The top-1 baseline: one linear rollout from an empty path.
pub fn linear_rollout<P: Proposer + ?Sized>(
    task: &TaskInstance,
    proposer: &P,
    depth_limit: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<(Vec<GroundedStep>, Option<String>), SearchError> {
    let mut path = Vec::new();
    for _ in 0..depth_limit {
        match proposer.propose(&path, task, temperature, rng)? {
            Proposal::Answer(a) => return Ok((path, Some(a))),
            Proposal::Step(s) => path.push(s),
        }
    }
    Ok((path, None))
}

/// Verifier backed by the task's oracle answer key.
pub fn oracle_verifier<S: Scalar>(task: &TaskInstance, answer: &str) -> S {
    task_reward(task, answer)
}

/// Synthetic noisy teacher. Each step looks at the queried glyph with
/// probability `p` and at a random distractor class otherwise; anchors sit
/// on the canonical glyph of the chosen class. The answer is read off the
/// glyph perceived at the last anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTeacher {
    pub p: f64,
}

impl ScriptedTeacher {
    pub fn new(p: f64) -> Self {
        Self { p: p.clamp(0.0, 1.0) }
    }

    /// Probability of answering after `steps` grounded steps.
    pub fn answer_probability(steps: usize) -> f64 {
        if steps == 0 {
            0.0
        } else {
            (0.3 + 0.2 * (steps - 1) as f64).min(1.0)
        }
    }

    fn answer(path: &[GroundedStep], task: &TaskInstance, rng: &mut Rng) -> String {
        let anchor = path.iter().rev().find_map(GroundedStep::anchor);
        let seen = anchor.and_then(|a| task.raster.glyph_at(a));
        let Some(spec) = task.spec() else {
            return String::from("unknown");
        };
        match spec.ask {
            Ask::Color | Ask::Material => {
                let choices = task.choices.clone().unwrap_or_default();
                let attr = seen.map(|g| match spec.ask {
                    Ask::Color => g.color.name(),
                    _ => g.material.name(),
                });
                match attr {
                    Some(a) if choices.iter().any(|c| c == a) => a.to_string(),
                    _ => choices.choose(rng).cloned().unwrap_or_default(),
                }
            }
            Ask::Point => anchor.unwrap_or_else(|| task.raster.center()).to_string(),
            Ask::Action(verb) => format!("{} id_{}", verb, seen.map_or(0, |g| g.id)),
        }
    }
}

impl Proposer for ScriptedTeacher {
    fn propose(
        &self,
        path: &[GroundedStep],
        task: &TaskInstance,
        _temperature: f64,
        rng: &mut Rng,
    ) -> Result<Proposal, SearchError> {
        if rng.gen_bool(Self::answer_probability(path.len())) {
            return Ok(Proposal::Answer(Self::answer(path, task, rng)));
        }
        let spec = task.spec().ok_or_else(|| SearchError::ProposerFailure("unparseable query".into()))?;
        let mut distractors: Vec<GlyphClass> =
            GlyphClass::all().filter(|&c| c != spec.target && task.raster.resolve_class(c).is_some()).collect();
        distractors.dedup();
        let class = if distractors.is_empty() || rng.gen_bool(self.p) {
            spec.target
        } else {
            distractors[rng.gen_range(0..distractors.len())]
        };
        let glyph = task
            .raster
            .resolve_class(class)
            .ok_or_else(|| SearchError::ProposerFailure(format!("no {class} in scene")))?;
        let anchor = glyph.center;
        let phrase = if path.is_empty() {
            Phrase::See
        } else if path.iter().any(|s| s.anchor() == Some(anchor)) {
            Phrase::Confirm
        } else {
            Phrase::Check
        };
        let step = GroundedStep::new(format!("{} the {}", phrase.text(), class), Some(anchor))
            .map_err(|e| SearchError::ProposerFailure(e.to_string()))?;
        Ok(Proposal::Step(step))
    }
}
