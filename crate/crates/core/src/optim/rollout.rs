//! Single-turn and multi-turn rollout engines.
//!
//! A single-turn episode samples until the closing answer tag and then one
//! more token, which should be end-of-sequence. A multi-turn episode runs
//! assistant turns that end at a closing tool-call or answer tag; each valid
//! crop call is executed and its observation appended by the environment.
//! After `max_turns` tool-call turns the soft termination prompt is appended
//! and exactly one more assistant turn is allowed.

use serde::{Deserialize, Serialize};

use super::policy::{sample_index, ContextTracker, Mode, Policy, PolicyInput};
use super::vocab::{render_tokens, render_with_blocks, resolve, Block, Token};
use crate::distill::CropConfig;
use crate::grammar::extract_answer;
use crate::num::Scalar;
use crate::rewards::{
    diversity_bonus_for, format_reward_single, grammar_reward, task_reward, RewardBreakdown, RewardWeights,
};
use crate::scene::{crop, crop_header, ObservationImage, TaskInstance};
use crate::seed::Rng;
use crate::trace::{Coordinate, Dialog, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub max_turns: usize,
    pub turn_token_cap: usize,
    pub single_token_cap: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub crop: CropConfig,
    pub diversity_bonus: bool,
    pub lambda_fmt: f64,
    pub lambda_task: f64,
    /// Keep observation pixels in returned dialogs.
    pub keep_observations: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_turns: 5,
            turn_token_cap: 24,
            single_token_cap: 48,
            temperature: 1.0,
            top_p: 0.99,
            crop: CropConfig::default(),
            diversity_bonus: true,
            lambda_fmt: 1.0,
            lambda_task: 1.0,
            keep_observations: true,
        }
    }
}

/// One sampled episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<Token>,
    pub mask: Vec<bool>,
    pub text: String,
    pub turns: usize,
    pub tool_calls: Vec<Coordinate>,
    pub soft_prompt_turn: Option<usize>,
}

impl Trajectory {
    pub fn ended_with_eos(&self) -> bool {
        self.tokens.last() == Some(&Token::Eos)
    }
}

/// 1 on policy tokens, 0 on environment tokens, and 0 everywhere when the
/// sequence does not end with end-of-sequence.
pub fn build_token_masks(tokens: &[Token]) -> Vec<bool> {
    let complete = tokens.last() == Some(&Token::Eos);
    tokens.iter().map(|t| complete && !t.is_env()).collect()
}

struct Sampler<'a, P: ?Sized> {
    policy: &'a P,
    task: &'a TaskInstance,
    mode: Mode,
    tokens: Vec<Token>,
    tracker: ContextTracker<'a>,
}

impl<'a, P: ?Sized> Sampler<'a, P> {
    fn new(policy: &'a P, task: &'a TaskInstance, mode: Mode) -> Self {
        Self { policy, task, mode, tokens: Vec::new(), tracker: ContextTracker::new(task, mode) }
    }

    fn push(&mut self, tok: Token) {
        self.tokens.push(tok);
        self.tracker.push(tok);
    }

    fn sample<S: Scalar>(&mut self, cfg: &RolloutConfig, rng: &mut Rng) -> Token
    where
        P: Policy<S>,
    {
        let input = PolicyInput { task: self.task, mode: self.mode, prefix: &self.tokens, ctx: self.tracker.context() };
        let dist = self.policy.distribution(&input);
        let tok = Token::from_policy_index(sample_index(&dist, cfg.temperature, cfg.top_p, rng));
        self.push(tok);
        tok
    }
}

fn answer_reward<S: Scalar>(text: &str, task: &TaskInstance) -> S {
    extract_answer(text).map(|a| task_reward(task, &a)).unwrap_or_else(|_| S::zero())
}

fn weights<S: Scalar>(cfg: &RolloutConfig) -> RewardWeights<S> {
    RewardWeights { lambda_fmt: S::of(cfg.lambda_fmt), lambda_task: S::of(cfg.lambda_task) }
}

pub fn score_single<S: Scalar>(text: &str, task: &TaskInstance, cfg: &RolloutConfig) -> RewardBreakdown<S> {
    RewardBreakdown::single(format_reward_single(text, &task.raster), answer_reward(text, task), weights(cfg))
}

pub fn score_multi<S: Scalar>(
    text: &str,
    calls: &[Coordinate],
    task: &TaskInstance,
    cfg: &RolloutConfig,
) -> RewardBreakdown<S> {
    let r_div = if cfg.diversity_bonus { diversity_bonus_for(calls) } else { S::zero() };
    RewardBreakdown::multi(grammar_reward(text, &task.raster), r_div, answer_reward(text, task), weights(cfg))
}

/// Samples one single-turn trace and scores it.
pub fn run_single_turn<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    task: &TaskInstance,
    cfg: &RolloutConfig,
    rng: &mut Rng,
) -> (Trajectory, RewardBreakdown<S>) {
    let mut s = Sampler::new(policy, task, Mode::Single);
    while s.tokens.len() < cfg.single_token_cap {
        match s.sample::<S>(cfg, rng) {
            Token::Eos => break,
            Token::AnswerClose => {
                s.sample::<S>(cfg, rng);
                break;
            }
            _ => {}
        }
    }
    let text = render_tokens(&s.tokens, task, cfg.crop.resize);
    let reward = score_single(&text, task, cfg);
    let tokens = s.tokens;
    let traj = Trajectory {
        mask: build_token_masks(&tokens),
        tokens,
        text,
        turns: 1,
        tool_calls: vec![],
        soft_prompt_turn: None,
    };
    (traj, reward)
}

fn tool_target(tokens: &[Token], task: &TaskInstance) -> Option<Coordinate> {
    let open = tokens.iter().rposition(|&t| t == Token::ToolOpen)?;
    match &tokens[open + 1..] {
        [Token::Look(class), Token::ToolClose] => Some(resolve(task, *class).0),
        _ => None,
    }
}

/// Samples one multi-turn dialog against the crop environment and scores it.
pub fn run_multi_turn<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    task: &TaskInstance,
    cfg: &RolloutConfig,
    rng: &mut Rng,
) -> (Trajectory, Dialog, RewardBreakdown<S>) {
    let mut s = Sampler::new(policy, task, Mode::Multi);
    let mut turns = 0;
    let mut calls = Vec::new();
    let mut observations: Vec<ObservationImage> = Vec::new();
    let mut soft_prompt_turn = None;
    'episode: loop {
        turns += 1;
        let mut emitted = 0;
        loop {
            if emitted == cfg.turn_token_cap {
                break 'episode;
            }
            emitted += 1;
            match s.sample::<S>(cfg, rng) {
                Token::Eos => break 'episode,
                Token::AnswerClose => {
                    s.sample::<S>(cfg, rng);
                    break 'episode;
                }
                Token::ToolClose => break,
                _ => {}
            }
        }
        if soft_prompt_turn.is_some() {
            break;
        }
        let Some(center) = tool_target(&s.tokens, task) else { break };
        let shot = if cfg.keep_observations { crop } else { crop_header };
        let Ok(obs) = shot(&task.raster, center, cfg.crop.window, cfg.crop.resize) else { break };
        calls.push(center);
        observations.push(obs);
        s.push(Token::ObsOpen);
        s.push(Token::ObsImage);
        s.push(Token::ObsClose);
        if turns == cfg.max_turns {
            s.push(Token::SoftPrompt);
            soft_prompt_turn = Some(turns);
        }
    }
    let (text, blocks) = render_with_blocks(&s.tokens, task, cfg.crop.resize);
    let reward = score_multi(&text, &calls, task, cfg);
    let dialog = assemble_dialog(&blocks, &calls, observations);
    let tokens = s.tokens;
    let traj =
        Trajectory { mask: build_token_masks(&tokens), tokens, text, turns, tool_calls: calls, soft_prompt_turn };
    (traj, dialog, reward)
}

fn assemble_dialog(blocks: &[super::vocab::RenderedBlock], calls: &[Coordinate], obs: Vec<ObservationImage>) -> Dialog {
    let mut calls = calls.iter();
    let mut obs = obs.into_iter();
    let mut segments = Vec::new();
    for b in blocks {
        match b.block {
            Block::Think => segments.push(Segment::Think(b.body.clone())),
            Block::Answer => segments.push(Segment::Answer(b.body.clone())),
            Block::Tool => {
                if let Some(c) = calls.next() {
                    segments.push(Segment::ToolCall(*c));
                }
            }
            Block::Obs => {
                if let Some(o) = obs.next() {
                    segments.push(Segment::Observation(o));
                }
            }
            Block::None => {}
        }
    }
    Dialog::from_segments(segments)
}

/// A rollout of either mode, reduced to what training needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Episode<S> {
    pub trajectory: Trajectory,
    pub reward: RewardBreakdown<S>,
}

pub fn run_episode<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    task: &TaskInstance,
    mode: Mode,
    cfg: &RolloutConfig,
    rng: &mut Rng,
) -> Episode<S> {
    match mode {
        Mode::Single => {
            let (trajectory, reward) = run_single_turn(policy, task, cfg, rng);
            Episode { trajectory, reward }
        }
        Mode::Multi => {
            let (trajectory, _, reward) = run_multi_turn(policy, task, cfg, rng);
            Episode { trajectory, reward }
        }
    }
}

/// Replays a stored token sequence to its reward. Used to check that rewards
/// are pure functions of the trajectory.
pub fn replay_reward<S: Scalar>(
    traj: &Trajectory,
    task: &TaskInstance,
    mode: Mode,
    cfg: &RolloutConfig,
) -> RewardBreakdown<S> {
    let text = render_tokens(&traj.tokens, task, cfg.crop.resize);
    match mode {
        Mode::Single => score_single(&text, task, cfg),
        Mode::Multi => score_multi(&text, &traj.tool_calls, task, cfg),
    }
}
