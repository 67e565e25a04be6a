//! Scalar rewards: single-turn format, dialog grammar, tool-call diversity,
//! the three task rewards and their weighted total.

use serde::{Deserialize, Serialize};

use crate::grammar::{extract_coordinates, validate_dialog, validate_single_turn};
use crate::num::Scalar;
use crate::scene::{AnswerKey, Raster, TaskInstance};
use crate::trace::{Coordinate, Dialog};

/// Minimum Euclidean distance for a tool call to count as a new location.
pub const DIVERSITY_MIN_SEPARATION: f64 = 10.0;
/// Bonus per distinct tool call is `1 / DIVERSITY_DENOMINATOR` (0.2).
pub const DIVERSITY_DENOMINATOR: usize = 5;
pub const DIVERSITY_MAX_CALLS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct RewardWeights<S> {
    pub lambda_fmt: S,
    pub lambda_task: S,
}

impl<S: Scalar> Default for RewardWeights<S> {
    fn default() -> Self {
        Self { lambda_fmt: S::one(), lambda_task: S::one() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct RewardBreakdown<S> {
    pub r_fmt: S,
    pub r_grammar: S,
    pub r_div: S,
    pub r_task: S,
    pub total: S,
    pub lambda_fmt: S,
    pub lambda_task: S,
}

impl<S: Scalar> RewardBreakdown<S> {
    /// Single-turn breakdown; the grammar term carries the format reward and
    /// there is no diversity term.
    pub fn single(r_fmt: S, r_task: S, w: RewardWeights<S>) -> Self {
        Self::multi(r_fmt, S::zero(), r_task, w)
    }

    /// Multi-turn breakdown with `r_fmt = r_grammar + r_div`.
    pub fn multi(r_grammar: S, r_div: S, r_task: S, w: RewardWeights<S>) -> Self {
        let r_fmt = r_grammar + r_div;
        Self {
            r_fmt,
            r_grammar,
            r_div,
            r_task,
            total: w.lambda_fmt * r_fmt + w.lambda_task * r_task,
            lambda_fmt: w.lambda_fmt,
            lambda_task: w.lambda_task,
        }
    }
}

fn indicator<S: Scalar>(b: bool) -> S {
    if b {
        S::one()
    } else {
        S::zero()
    }
}

pub fn format_reward_single<S: Scalar>(trace_text: &str, raster: &Raster) -> S {
    indicator(validate_single_turn(trace_text, raster).valid)
}

pub fn grammar_reward<S: Scalar>(dialog_text: &str, raster: &Raster) -> S {
    indicator(validate_dialog(dialog_text, raster).valid)
}

/// Number of calls that are at least the minimum separation from every
/// earlier call, capped. The first call always counts.
pub fn distinct_call_count(calls: &[Coordinate]) -> usize {
    let k = calls
        .iter()
        .enumerate()
        .filter(|(i, c)| calls[..*i].iter().all(|p| p.distance(c) >= DIVERSITY_MIN_SEPARATION))
        .count();
    k.min(DIVERSITY_MAX_CALLS)
}

pub fn diversity_bonus_for<S: Scalar>(calls: &[Coordinate]) -> S {
    S::of_usize(distinct_call_count(calls)) / S::of_usize(DIVERSITY_DENOMINATOR)
}

pub fn diversity_bonus<S: Scalar>(dialog: &Dialog) -> S {
    diversity_bonus_for(&dialog.tool_calls())
}

/// Task reward for an extracted answer string. Unparseable answers score 0.
pub fn task_reward<S: Scalar>(task: &TaskInstance, answer: &str) -> S {
    let answer = answer.trim();
    match &task.answer_key {
        AnswerKey::Choice(key) => indicator(answer.eq_ignore_ascii_case(key.trim())),
        AnswerKey::Box(_) => match extract_coordinates(answer).first() {
            Some(c) => indicator(task.answer_key.contains(*c)),
            None => S::zero(),
        },
        AnswerKey::Action { action_type, argument } => {
            let mut parts = answer.splitn(2, char::is_whitespace);
            let ty = parts.next().unwrap_or("");
            let arg = parts.next().unwrap_or("").trim();
            let half = S::of(0.5);
            indicator::<S>(ty.eq_ignore_ascii_case(action_type)) * half + indicator::<S>(arg == argument) * half
        }
    }
}
