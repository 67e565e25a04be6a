//! Domain types shared across the pipeline and the canonical text format for
//! single-turn traces and multi-turn dialogs.
//!
//! A single-turn trace renders as one think block followed by one answer
//! block:
//!
//! ```text
//! <think> I see the small triangle (40, 50).
//! Now I will check the large circle (200, 310). </think>
//! <answer> red </answer>
//! ```
//!
//! Steps are separated by newlines; an anchored step ends with its
//! coordinate rendered as `(x, y).`. Dialog segments are separated by
//! newlines, and tool calls carry a fixed JSON body.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{ObservationImage, Raster};

pub const BACKTRACK_PHRASE: &str = "Wait, this seems off. Let's try something else.";

/// Literal think-block text appended when a dialog hits the turn cap.
pub const SOFT_PROMPT_TEXT: &str = "Please provide your response now";

/// Tag literals of the trace/dialog format.
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const TOOL_OPEN: &str = "<tool_call>";
pub const TOOL_CLOSE: &str = "</tool_call>";
pub const OBS_OPEN: &str = "<observation>";
pub const OBS_CLOSE: &str = "</observation>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Fixed step openers used by the scripted teacher and the token language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phrase {
    See,
    Check,
    Confirm,
    Backtrack,
}

impl Phrase {
    pub const ALL: [Phrase; 4] = [Phrase::See, Phrase::Check, Phrase::Confirm, Phrase::Backtrack];

    pub fn text(self) -> &'static str {
        match self {
            Phrase::See => "I see",
            Phrase::Check => "Now I will check",
            Phrase::Confirm => "I can confirm",
            Phrase::Backtrack => BACKTRACK_PHRASE,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("trace has no steps or an empty answer")]
    EmptyTrace,
    #[error("invalid step text: {0}")]
    InvalidStep(String),
    #[error("malformed dialog: {0}")]
    MalformedDialog(String),
}

/// Pixel position in a raster. Validity is always relative to a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coordinate {
    pub x: i64,
    pub y: i64,
}

impl Coordinate {
    pub const fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }

    pub fn in_bounds(&self, raster: &Raster) -> bool {
        self.x >= 0 && self.y >= 0 && self.x < raster.width as i64 && self.y < raster.height as i64
    }

    pub fn distance(&self, other: &Coordinate) -> f64 {
        let dx = (self.x - other.x) as f64;
        let dy = (self.y - other.y) as f64;
        dx.hypot(dy)
    }
}

impl fmt::Display for Coordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

fn coordinate_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\((-?\d+), (-?\d+)\)").expect("static regex"))
}

const TAGS: [&str; 8] =
    [THINK_OPEN, THINK_CLOSE, TOOL_OPEN, TOOL_CLOSE, OBS_OPEN, OBS_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

/// Removes residual tag markers and collapses whitespace.
pub fn clean_step_text(text: &str) -> String {
    let mut out = text.to_string();
    for tag in TAGS {
        out = out.replace(tag, " ");
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One reasoning step: a thought optionally anchored to a pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedStep {
    text: String,
    anchor: Option<Coordinate>,
}

impl GroundedStep {
    /// Builds a step. The text is trimmed and must be a single non-empty line
    /// without tag markup or embedded coordinates (a step carries at most one
    /// anchor, and it lives in `anchor`).
    pub fn new(text: impl Into<String>, anchor: Option<Coordinate>) -> Result<Self, TraceError> {
        let text = text.into().trim().to_string();
        if text.is_empty() {
            return Err(TraceError::InvalidStep("empty text".into()));
        }
        if text.contains('\n') || text.contains('\r') {
            return Err(TraceError::InvalidStep("text spans several lines".into()));
        }
        if TAGS.iter().any(|t| text.contains(t)) {
            return Err(TraceError::InvalidStep("text contains tag markup".into()));
        }
        if coordinate_pattern().is_match(&text) {
            return Err(TraceError::InvalidStep("text embeds a coordinate".into()));
        }
        Ok(Self { text, anchor })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn anchor(&self) -> Option<Coordinate> {
        self.anchor
    }

    /// Canonical rendering: `text (x, y).` when anchored, the bare text otherwise.
    pub fn render(&self) -> String {
        match self.anchor {
            Some(c) => format!("{} {}.", self.text, c),
            None => self.text.clone(),
        }
    }
}

/// Renders steps one per line.
pub fn render_steps(steps: &[GroundedStep]) -> String {
    steps.iter().map(GroundedStep::render).collect::<Vec<_>>().join("\n")
}

/// Inverse of [`render_steps`] for canonical input.
pub fn parse_steps(body: &str) -> Result<Vec<GroundedStep>, TraceError> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^(.*) \((-?\d+), (-?\d+)\)\.$").expect("static regex"));
    let mut steps = Vec::new();
    for line in body.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let step = match re.captures(line) {
            Some(cap) => {
                let x = cap[2].parse().unwrap_or(i64::MAX);
                let y = cap[3].parse().unwrap_or(i64::MAX);
                GroundedStep::new(&cap[1], Some(Coordinate::new(x, y)))?
            }
            None => GroundedStep::new(line, None)?,
        };
        steps.push(step);
    }
    Ok(steps)
}

/// A complete single-turn reasoning trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonTrace {
    pub steps: Vec<GroundedStep>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

impl ReasonTrace {
    pub fn new(steps: Vec<GroundedStep>, answer: impl Into<String>) -> Self {
        Self { steps, answer: answer.into().trim().to_string(), reward: None }
    }

    pub fn with_reward(mut self, reward: f64) -> Self {
        self.reward = Some(reward);
        self
    }

    pub fn anchors(&self) -> Vec<Coordinate> {
        self.steps.iter().filter_map(GroundedStep::anchor).collect()
    }

    /// Text of the think block (steps joined by newlines).
    pub fn think_text(&self) -> String {
        render_steps(&self.steps)
    }
}

/// Canonical text for a trace: one think block, then one answer block.
pub fn render_trace(trace: &ReasonTrace) -> Result<String, TraceError> {
    let answer = trace.answer.trim();
    if trace.steps.is_empty() || answer.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    Ok(format!("{THINK_OPEN} {} {THINK_CLOSE}\n{ANSWER_OPEN} {answer} {ANSWER_CLOSE}", render_steps(&trace.steps)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Think,
    ToolCall,
    Observation,
    Answer,
}

/// One emission in a dialog. Tool calls are always the `crop` call.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Think(String),
    ToolCall(Coordinate),
    Observation(ObservationImage),
    Answer(String),
}

impl Segment {
    pub fn kind(&self) -> SegmentKind {
        match self {
            Segment::Think(_) => SegmentKind::Think,
            Segment::ToolCall(_) => SegmentKind::ToolCall,
            Segment::Observation(_) => SegmentKind::Observation,
            Segment::Answer(_) => SegmentKind::Answer,
        }
    }
}

/// JSON body of a crop tool call, with fixed key order and spacing.
pub fn crop_call_json(c: Coordinate) -> String {
    format!(r#"{{"name": "crop", "arguments": {{"coordinate": [{}, {}]}}}}"#, c.x, c.y)
}

/// Placeholder text standing in for observation pixels in rendered dialogs.
pub fn observation_placeholder(width: u32, height: u32) -> String {
    format!("image {width}x{height}")
}

fn render_block(open: &str, body: &str, close: &str) -> String {
    let body = body.trim();
    if body.is_empty() {
        format!("{open}{close}")
    } else {
        format!("{open} {body} {close}")
    }
}

impl Segment {
    pub fn render(&self) -> String {
        match self {
            Segment::Think(t) => render_block(THINK_OPEN, t, THINK_CLOSE),
            Segment::ToolCall(c) => format!("{TOOL_OPEN}{}{TOOL_CLOSE}", crop_call_json(*c)),
            Segment::Observation(img) => {
                format!("{OBS_OPEN}{}{OBS_CLOSE}", observation_placeholder(img.width, img.height))
            }
            Segment::Answer(a) => render_block(ANSWER_OPEN, a, ANSWER_CLOSE),
        }
    }
}

/// An ordered multi-turn exchange.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dialog {
    pub segments: Vec<Segment>,
    pub terminated: bool,
}

impl Dialog {
    /// Builds a dialog; `terminated` is set when the final segment is an answer.
    pub fn from_segments(segments: Vec<Segment>) -> Self {
        let terminated = matches!(segments.last(), Some(Segment::Answer(_)));
        Self { segments, terminated }
    }

    pub fn tool_calls(&self) -> Vec<Coordinate> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::ToolCall(c) => Some(*c),
                _ => None,
            })
            .collect()
    }

    pub fn answer(&self) -> Option<&str> {
        self.segments.iter().rev().find_map(|s| match s {
            Segment::Answer(a) => Some(a.as_str()),
            _ => None,
        })
    }

    /// Checks the structural invariants: every observation directly answers a
    /// tool call, and a terminated dialog ends with an answer.
    pub fn check(&self) -> Result<(), TraceError> {
        for (i, seg) in self.segments.iter().enumerate() {
            if let Segment::Observation(_) = seg {
                let prev = i.checked_sub(1).map(|j| self.segments[j].kind());
                if prev != Some(SegmentKind::ToolCall) {
                    return Err(TraceError::MalformedDialog(format!(
                        "observation at segment {i} does not follow a tool call"
                    )));
                }
            }
        }
        if self.terminated && !matches!(self.segments.last(), Some(Segment::Answer(_))) {
            return Err(TraceError::MalformedDialog("terminated dialog must end with an answer".into()));
        }
        Ok(())
    }
}

/// Canonical dialog text: segments joined by newlines.
pub fn render_dialog(dialog: &Dialog) -> Result<String, TraceError> {
    dialog.check()?;
    Ok(dialog.segments.iter().map(Segment::render).collect::<Vec<_>>().join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(text: &str, anchor: Option<(i64, i64)>) -> GroundedStep {
        GroundedStep::new(text, anchor.map(|(x, y)| Coordinate::new(x, y))).unwrap()
    }

    #[test]
    fn renders_single_step_trace() {
        let trace = ReasonTrace::new(vec![step("I see a red square", Some((10, 20)))], "red");
        assert_eq!(
            render_trace(&trace).unwrap(),
            "<think> I see a red square (10, 20). </think>\n<answer> red </answer>"
        );
    }

    #[test]
    fn empty_trace_is_rejected() {
        let trace = ReasonTrace::new(vec![], "red");
        assert_eq!(render_trace(&trace), Err(TraceError::EmptyTrace));
        let trace = ReasonTrace::new(vec![step("a", None)], "  ");
        assert_eq!(render_trace(&trace), Err(TraceError::EmptyTrace));
    }

    #[test]
    fn step_text_validation() {
        assert!(GroundedStep::new("   ", None).is_err());
        assert!(GroundedStep::new("a\nb", None).is_err());
        assert!(GroundedStep::new("look <think>", None).is_err());
        assert!(GroundedStep::new("at (3, 4) there", None).is_err());
        assert_eq!(GroundedStep::new("  padded ", None).unwrap().text(), "padded");
    }

    #[test]
    fn steps_round_trip_including_backtrack() {
        let steps = vec![
            step("Now I will check the small cross", Some((5, 6))),
            step(BACKTRACK_PHRASE, None),
            step("I see the large circle", Some((100, 7))),
        ];
        assert_eq!(parse_steps(&render_steps(&steps)).unwrap(), steps);
    }

    #[test]
    fn tool_call_body_is_byte_stable() {
        let d = Dialog::from_segments(vec![
            Segment::Think("locate icon".into()),
            Segment::ToolCall(Coordinate::new(30, 40)),
        ]);
        let text = render_dialog(&d).unwrap();
        assert!(text.contains(r#"<tool_call>{"name": "crop", "arguments": {"coordinate": [30, 40]}}</tool_call>"#));
        assert!(!d.terminated);
    }

    #[test]
    fn empty_dialog_renders_empty() {
        assert_eq!(render_dialog(&Dialog::default()).unwrap(), "");
    }

    #[test]
    fn observation_before_tool_call_is_malformed() {
        let img = ObservationImage::blank(Coordinate::new(1, 1), 10, 4);
        let d = Dialog::from_segments(vec![Segment::Think("x".into()), Segment::Observation(img)]);
        assert!(matches!(render_dialog(&d), Err(TraceError::MalformedDialog(_))));
    }

    #[test]
    fn cleanup_strips_residual_tags() {
        assert_eq!(clean_step_text("<think> I see  it </think>"), "I see it");
        assert_eq!(clean_step_text("</answer>done<answer>"), "done");
    }
}
