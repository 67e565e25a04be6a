//! Tag tokenizer and finite-state validators for the trace and dialog formats.
//!
//! The dialog automaton accepts
//!
//! ```text
//! (<think></think> <tool_call></tool_call> <observation></observation>)* <think></think> <answer></answer>
//! ```
//!
//! with whitespace permitted between blocks and nothing after the final
//! closing answer tag. The single-turn automaton is the special case with no
//! tool-call rounds.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{ObservationImage, Raster};
use crate::trace::{
    parse_steps, Coordinate, Dialog, ReasonTrace, Segment, TraceError, ANSWER_CLOSE, ANSWER_OPEN, OBS_CLOSE, OBS_OPEN,
    THINK_CLOSE, THINK_OPEN, TOOL_CLOSE, TOOL_OPEN,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("no complete answer block")]
    MissingAnswer,
    #[error("text is not well formed: {0:?}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagKind {
    OpenThink,
    CloseThink,
    OpenTool,
    CloseTool,
    OpenObs,
    CloseObs,
    OpenAnswer,
    CloseAnswer,
    TextRun,
}

impl TagKind {
    const TAGS: [(TagKind, &'static str); 8] = [
        (TagKind::OpenThink, THINK_OPEN),
        (TagKind::CloseThink, THINK_CLOSE),
        (TagKind::OpenTool, TOOL_OPEN),
        (TagKind::CloseTool, TOOL_CLOSE),
        (TagKind::OpenObs, OBS_OPEN),
        (TagKind::CloseObs, OBS_CLOSE),
        (TagKind::OpenAnswer, ANSWER_OPEN),
        (TagKind::CloseAnswer, ANSWER_CLOSE),
    ];

    pub fn literal(self) -> Option<&'static str> {
        Self::TAGS.iter().find(|(k, _)| *k == self).map(|(_, s)| *s)
    }

    fn is_observation(self) -> bool {
        matches!(self, TagKind::OpenObs | TagKind::CloseObs)
    }
}

/// A tag or a run of text between tags. `span` is a half-open byte range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagToken {
    pub kind: TagKind,
    pub span: (usize, usize),
}

impl TagToken {
    pub fn text<'a>(&self, source: &'a str) -> &'a str {
        &source[self.span.0..self.span.1]
    }
}

/// Splits `text` into tags and text runs. Total: never fails, and the spans
/// tile the input exactly.
pub fn tokenize_tags(text: &str) -> Vec<TagToken> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut run_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            if let Some((kind, lit)) = TagKind::TAGS.iter().find(|(_, lit)| bytes[i..].starts_with(lit.as_bytes())) {
                if run_start < i {
                    out.push(TagToken { kind: TagKind::TextRun, span: (run_start, i) });
                }
                out.push(TagToken { kind: *kind, span: (i, i + lit.len()) });
                i += lit.len();
                run_start = i;
                continue;
            }
        }
        i += 1;
    }
    if run_start < bytes.len() {
        out.push(TagToken { kind: TagKind::TextRun, span: (run_start, bytes.len()) });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    MalformedTag,
    OutOfOrder,
    MissingAnswer,
    TrailingContent,
    InvalidCoordinate,
    PrematureObservation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub failure: Option<FailureKind>,
    pub failure_offset: Option<usize>,
}

impl ValidationReport {
    pub const VALID: ValidationReport = ValidationReport { valid: true, failure: None, failure_offset: None };

    fn fail(kind: FailureKind, offset: usize) -> Self {
        Self { valid: false, failure: Some(kind), failure_offset: Some(offset) }
    }
}

fn integer_coordinate() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\((-?\d+), (-?\d+)\)").expect("static regex"))
}

fn tag_fragment() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"</?\s*(thi|too|obs|ans)[a-z_]*").expect("static regex"))
}

/// All `(x, y)` integer coordinates in order of appearance.
pub fn extract_coordinates(text: &str) -> Vec<Coordinate> {
    integer_coordinate()
        .captures_iter(text)
        .map(|cap| {
            let x = cap[1].parse().unwrap_or(i64::MAX);
            let y = cap[2].parse().unwrap_or(i64::MAX);
            Coordinate::new(x, y)
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CropCall {
    name: String,
    arguments: CropArguments,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CropArguments {
    coordinate: [i64; 2],
}

/// Parses a tool-call body; only the `crop` call is recognised.
pub fn parse_crop_call(body: &str) -> Option<Coordinate> {
    let call: CropCall = serde_json::from_str(body.trim()).ok()?;
    (call.name == "crop").then(|| Coordinate::new(call.arguments.coordinate[0], call.arguments.coordinate[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Start,
    InThink,
    AfterThink,
    InTool,
    AfterTool,
    InObs,
    AfterObs,
    InAnswer,
    Done,
}

struct Automaton<'a> {
    text: &'a str,
    raster: &'a Raster,
    allow_tools: bool,
}

impl Automaton<'_> {
    fn expected(&self, state: State, tag: TagKind) -> Option<State> {
        use State::*;
        use TagKind::*;
        match (state, tag) {
            (Start | AfterObs, OpenThink) => Some(InThink),
            (InThink, CloseThink) => Some(AfterThink),
            (AfterThink, OpenTool) if self.allow_tools => Some(InTool),
            (AfterThink, OpenAnswer) => Some(InAnswer),
            (InTool, CloseTool) => Some(AfterTool),
            (AfterTool, OpenObs) => Some(InObs),
            (InObs, CloseObs) => Some(AfterObs),
            (InAnswer, CloseAnswer) => Some(Done),
            _ => None,
        }
    }

    fn check_coordinates(&self, body: &str, offset: usize) -> Result<(), ValidationReport> {
        match extract_coordinates(body).into_iter().find(|c| !self.raster.contains(*c)) {
            Some(_) => Err(ValidationReport::fail(FailureKind::InvalidCoordinate, offset)),
            None => Ok(()),
        }
    }

    fn run(&self) -> ValidationReport {
        let tokens = tokenize_tags(self.text);
        let mut state = State::Start;
        let mut body_start = 0usize;
        for tok in &tokens {
            let offset = tok.span.0;
            if tok.kind == TagKind::TextRun {
                let s = tok.text(self.text);
                if let Some(m) = tag_fragment().find(s) {
                    return ValidationReport::fail(FailureKind::MalformedTag, offset + m.start());
                }
                let inside = matches!(state, State::InThink | State::InTool | State::InObs | State::InAnswer);
                if !inside && !s.trim().is_empty() {
                    let kind =
                        if state == State::Done { FailureKind::TrailingContent } else { FailureKind::OutOfOrder };
                    return ValidationReport::fail(kind, offset);
                }
                continue;
            }
            let Some(next) = self.expected(state, tok.kind) else {
                let kind = if state == State::Done {
                    FailureKind::TrailingContent
                } else if tok.kind.is_observation() && self.allow_tools {
                    FailureKind::PrematureObservation
                } else {
                    FailureKind::OutOfOrder
                };
                return ValidationReport::fail(kind, offset);
            };
            match tok.kind {
                TagKind::CloseThink => {
                    if let Err(r) = self.check_coordinates(&self.text[body_start..offset], body_start) {
                        return r;
                    }
                }
                TagKind::CloseTool => {
                    let ok = parse_crop_call(&self.text[body_start..offset]).is_some_and(|c| self.raster.contains(c));
                    if !ok {
                        return ValidationReport::fail(FailureKind::InvalidCoordinate, body_start);
                    }
                }
                _ => {}
            }
            body_start = tok.span.1;
            state = next;
        }
        if state == State::Done {
            ValidationReport::VALID
        } else {
            ValidationReport::fail(FailureKind::MissingAnswer, self.text.len())
        }
    }
}

/// Valid iff `text` is one think block then one answer block and every think
/// coordinate lies inside `raster`.
pub fn validate_single_turn(text: &str, raster: &Raster) -> ValidationReport {
    Automaton { text, raster, allow_tools: false }.run()
}

/// Valid iff `dialog_text` is accepted by the dialog automaton, every tool call
/// is an in-bounds crop call and every think coordinate is in bounds.
pub fn validate_dialog(dialog_text: &str, raster: &Raster) -> ValidationReport {
    Automaton { text: dialog_text, raster, allow_tools: true }.run()
}

/// Trimmed contents of the first complete answer block.
pub fn extract_answer(text: &str) -> Result<String, GrammarError> {
    let tokens = tokenize_tags(text);
    let open = tokens.iter().position(|t| t.kind == TagKind::OpenAnswer).ok_or(GrammarError::MissingAnswer)?;
    let mut body = String::new();
    for tok in &tokens[open + 1..] {
        match tok.kind {
            TagKind::CloseAnswer => return Ok(body.trim().to_string()),
            TagKind::TextRun => body.push_str(tok.text(text)),
            _ => return Err(GrammarError::MissingAnswer),
        }
    }
    Err(GrammarError::MissingAnswer)
}

fn blocks(text: &str) -> Vec<(TagKind, String)> {
    let tokens = tokenize_tags(text);
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = tokens[i];
        if matches!(tok.kind, TagKind::OpenThink | TagKind::OpenTool | TagKind::OpenObs | TagKind::OpenAnswer) {
            let body = match tokens.get(i + 1) {
                Some(t) if t.kind == TagKind::TextRun => {
                    i += 1;
                    t.text(text).to_string()
                }
                _ => String::new(),
            };
            out.push((tok.kind, body));
        }
        i += 1;
    }
    out
}

/// Parses a canonical single-turn trace back into its structure.
pub fn parse_trace(text: &str) -> Result<ReasonTrace, GrammarError> {
    let structural = Raster::new(u32::MAX, u32::MAX, vec![]);
    let report = validate_single_turn(text, &structural);
    if !report.valid {
        return Err(GrammarError::Invalid(report));
    }
    let parts = blocks(text);
    let steps = parse_steps(&parts[0].1)?;
    Ok(ReasonTrace::new(steps, parts[1].1.trim()))
}

fn parse_placeholder(body: &str) -> Option<(u32, u32)> {
    let dims = body.trim().strip_prefix("image ")?;
    let (w, h) = dims.split_once('x')?;
    Some((w.parse().ok()?, h.parse().ok()?))
}

/// Parses a canonical dialog. Observation pixels are not carried by the text,
/// so parsed observations keep only their dimensions and crop center.
pub fn parse_dialog(text: &str) -> Result<Dialog, GrammarError> {
    let structural = Raster::new(u32::MAX, u32::MAX, vec![]);
    let report = validate_dialog(text, &structural);
    if !report.valid {
        return Err(GrammarError::Invalid(report));
    }
    let mut segments = Vec::new();
    let mut last_call = Coordinate::new(0, 0);
    for (kind, body) in blocks(text) {
        let seg = match kind {
            TagKind::OpenThink => Segment::Think(body.trim().to_string()),
            TagKind::OpenTool => {
                last_call = parse_crop_call(&body).ok_or(GrammarError::Invalid(report))?;
                Segment::ToolCall(last_call)
            }
            TagKind::OpenObs => {
                let (w, h) = parse_placeholder(&body).unwrap_or((0, 0));
                Segment::Observation(ObservationImage {
                    center: last_call,
                    window: 0,
                    width: w,
                    height: h,
                    pixels: vec![],
                })
            }
            _ => Segment::Answer(body.trim().to_string()),
        };
        segments.push(seg);
    }
    Ok(Dialog::from_segments(segments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::render_dialog;

    fn raster(w: u32, h: u32) -> Raster {
        Raster::new(w, h, vec![])
    }

    fn kinds(text: &str) -> Vec<TagKind> {
        tokenize_tags(text).iter().map(|t| t.kind).collect()
    }

    #[test]
    fn tokenizer_minimal_cases() {
        use TagKind::*;
        assert_eq!(kinds("<think>a</think>"), vec![OpenThink, TextRun, CloseThink]);
        assert_eq!(kinds("<think><think>"), vec![OpenThink, OpenThink]);
        assert_eq!(kinds("a <b> c"), vec![TextRun]);
        assert_eq!(kinds(""), Vec::<TagKind>::new());
    }

    #[test]
    fn single_turn_examples() {
        let r = raster(100, 100);
        assert!(validate_single_turn("<think> step (5, 5). </think><answer> A </answer>", &r).valid);
        let bad = validate_single_turn("<think> step (5, 500). </think><answer> A </answer>", &r);
        assert_eq!(bad.failure, Some(FailureKind::InvalidCoordinate));
        let swapped = validate_single_turn("<answer> A </answer><think> x </think>", &r);
        assert_eq!(swapped.failure, Some(FailureKind::OutOfOrder));
        let missing = validate_single_turn("<think> x </think>", &r);
        assert_eq!(missing.failure, Some(FailureKind::MissingAnswer));
        let trailing = validate_single_turn("<think> x </think><answer> A </answer> more", &r);
        assert_eq!(trailing.failure, Some(FailureKind::TrailingContent));
        let nested = validate_single_turn("<think><think> x </think><answer> A </answer>", &r);
        assert_eq!(nested.failure, Some(FailureKind::OutOfOrder));
        let broken = validate_single_turn("<think> x </thin <answer> A </answer>", &r);
        assert_eq!(broken.failure, Some(FailureKind::MalformedTag));
        assert!(validate_single_turn("  \n<think> x </think>\n\n<answer> A </answer>\n", &r).valid);
    }

    #[test]
    fn dialog_examples() {
        let r = raster(100, 100);
        let call =
            |x: i64, y: i64| format!("<tool_call>{}</tool_call>", crate::trace::crop_call_json(Coordinate::new(x, y)));
        let ok = format!(
            "<think> a </think>{}<observation>image 4x4</observation><think> b </think><answer> c </answer>",
            call(3, 4)
        );
        assert!(validate_dialog(&ok, &r).valid);
        let no_answer = format!("<think> a </think>{}", call(3, 4));
        assert_eq!(validate_dialog(&no_answer, &r).failure, Some(FailureKind::MissingAnswer));
        let premature = "<think> a </think><observation>x</observation>";
        assert_eq!(validate_dialog(premature, &r).failure, Some(FailureKind::PrematureObservation));
        let oob =
            format!("<think> a </think>{}<observation></observation><think></think><answer>c</answer>", call(300, 4));
        assert_eq!(validate_dialog(&oob, &r).failure, Some(FailureKind::InvalidCoordinate));
        assert!(validate_dialog("<think></think><answer> x </answer>", &r).valid);
        assert_eq!(validate_dialog("", &r).failure, Some(FailureKind::MissingAnswer));
    }

    #[test]
    fn coordinate_extraction() {
        assert_eq!(
            extract_coordinates("look at (10, 20) then (30, 40)"),
            vec![Coordinate::new(10, 20), Coordinate::new(30, 40)]
        );
        assert!(extract_coordinates("ratio (3.5, 2)").is_empty());
        assert!(extract_coordinates("(3,4)").is_empty());
    }

    #[test]
    fn answer_extraction() {
        assert_eq!(extract_answer("<answer> blue </answer>").unwrap(), "blue");
        assert_eq!(extract_answer("<answer>(40, 40)</answer>").unwrap(), "(40, 40)");
        assert_eq!(extract_answer("<think> x </think>"), Err(GrammarError::MissingAnswer));
        assert_eq!(extract_answer("<answer> open"), Err(GrammarError::MissingAnswer));
    }

    #[test]
    fn crop_call_parsing_is_strict() {
        assert_eq!(
            parse_crop_call(r#"{"name": "crop", "arguments": {"coordinate": [1, 2]}}"#),
            Some(Coordinate::new(1, 2))
        );
        assert_eq!(parse_crop_call(r#"{"name": "zoom", "arguments": {"coordinate": [1, 2]}}"#), None);
        assert_eq!(parse_crop_call(r#"{"name": "crop", "arguments": {"coordinate": [1.5, 2]}}"#), None);
        assert_eq!(parse_crop_call("crop(1, 2)"), None);
    }

    #[test]
    fn dialog_parse_round_trip() {
        let d = Dialog::from_segments(vec![
            Segment::Think("I see the small circle (3, 4).".into()),
            Segment::ToolCall(Coordinate::new(3, 4)),
            Segment::Observation(ObservationImage::blank(Coordinate::new(3, 4), 10, 8)),
            Segment::Think(String::new()),
            Segment::Answer("red".into()),
        ]);
        let text = render_dialog(&d).unwrap();
        assert!(validate_dialog(&text, &raster(100, 100)).valid);
        let parsed = parse_dialog(&text).unwrap();
        assert_eq!(render_dialog(&parsed).unwrap(), text);
        assert_eq!(parsed.tool_calls(), d.tool_calls());
        assert!(parsed.terminated);
    }
}
