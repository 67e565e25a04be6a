//! Rule-based behavioral coding of reasoning traces: regions explored,
//! subgoals, verifications and backtracks, counted with marker lexicons.

use std::path::Path;

use rayon::prelude::*;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::parse_dialog;
use crate::rewards::DIVERSITY_MIN_SEPARATION;
use crate::trace::{parse_steps, Coordinate, Dialog, GroundedStep, ReasonTrace, Segment};

/// Default region separation, shared with the diversity bonus.
pub const DEFAULT_MIN_SEPARATION: f64 = DIVERSITY_MIN_SEPARATION;
/// Marker between the two halves of an ordered gap pattern.
pub const GAP: &str = "…";

#[derive(Debug, Error)]
pub enum BehaviorError {
    #[error("lexicon {name} has no phrases")]
    EmptyLexicon { name: String },
    #[error("lexicon {name}: {source}")]
    Pattern { name: String, source: regex::Error },
    #[error("reading lexicon {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// A compiled marker lexicon. Phrases match case-insensitively on word
/// boundaries; `a … b` matches `a` followed later on the same line by `b`.
/// Occurrences are non-overlapping, longest phrase first at each position.
#[derive(Debug, Clone)]
pub struct Lexicon {
    name: String,
    phrases: Vec<String>,
    pattern: Regex,
}

fn phrase_pattern(phrase: &str) -> String {
    let edge = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
    let parts: Vec<String> = phrase
        .split(GAP)
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let lead = if edge(p.chars().next()) { r"\b" } else { "" };
            let trail = if edge(p.chars().last()) { r"\b" } else { "" };
            let words: Vec<String> = p.split_whitespace().map(regex::escape).collect();
            format!("{lead}{}{trail}", words.join(r"\s+"))
        })
        .collect();
    parts.join(r"[^\n]*?")
}

impl Lexicon {
    pub fn new(
        name: impl Into<String>,
        phrases: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, BehaviorError> {
        let name = name.into();
        let mut phrases: Vec<String> = phrases
            .into_iter()
            .map(Into::into)
            .map(|p: String| p.trim().to_string())
            .filter(|p| !p.is_empty() && !p.starts_with('#'))
            .collect();
        if phrases.is_empty() {
            return Err(BehaviorError::EmptyLexicon { name });
        }
        phrases.sort_by_key(|p| std::cmp::Reverse(p.len()));
        let alternation: Vec<String> = phrases.iter().map(|p| format!("(?:{})", phrase_pattern(p))).collect();
        let pattern = RegexBuilder::new(&alternation.join("|"))
            .case_insensitive(true)
            .build()
            .map_err(|source| BehaviorError::Pattern { name: name.clone(), source })?;
        Ok(Self { name, phrases, pattern })
    }

    /// Parses one phrase per line; blank lines and `#` comments are skipped.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, BehaviorError> {
        Self::new(name, text.lines())
    }

    pub fn load(name: impl Into<String>, path: &Path) -> Result<Self, BehaviorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| BehaviorError::Io { path: path.display().to_string(), source })?;
        Self::parse(name, &text)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn count(&self, text: &str) -> usize {
        self.pattern.find_iter(text).count()
    }
}

/// The three marker lexicons used by the coder.
#[derive(Debug, Clone)]
pub struct Lexicons {
    pub subgoal: Lexicon,
    pub verification: Lexicon,
    pub backtrack: Lexicon,
}

impl Default for Lexicons {
    fn default() -> Self {
        let build = |name, text| Lexicon::parse(name, text).expect("bundled lexicon");
        Self {
            subgoal: build("subgoal", include_str!("../lexicons/subgoal.txt")),
            verification: build("verification", include_str!("../lexicons/verification.txt")),
            backtrack: build("backtrack", include_str!("../lexicons/backtrack.txt")),
        }
    }
}

impl Lexicons {
    /// Loads `subgoal.txt`, `verification.txt` and `backtrack.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, BehaviorError> {
        Ok(Self {
            subgoal: Lexicon::load("subgoal", &dir.join("subgoal.txt"))?,
            verification: Lexicon::load("verification", &dir.join("verification.txt"))?,
            backtrack: Lexicon::load("backtrack", &dir.join("backtrack.txt"))?,
        })
    }
}

/// Reasoning text of a trace without coordinates, one step per line.
fn step_text(trace: &ReasonTrace) -> String {
    trace.steps.iter().map(GroundedStep::text).collect::<Vec<_>>().join("\n")
}

/// Greedy clustering of anchors: an anchor opens a new region when it lies
/// at least `min_separation` from every anchor that opened one before.
pub fn count_regions(trace: &ReasonTrace, min_separation: f64) -> usize {
    let mut opened: Vec<Coordinate> = Vec::new();
    for a in trace.anchors() {
        if opened.iter().all(|p| p.distance(&a) >= min_separation) {
            opened.push(a);
        }
    }
    opened.len()
}

pub fn count_backtracks(trace: &ReasonTrace, lex: &Lexicons) -> usize {
    lex.backtrack.count(&step_text(trace))
}

pub fn count_subgoals(trace: &ReasonTrace, lex: &Lexicons) -> usize {
    lex.subgoal.count(&step_text(trace))
}

pub fn count_verifications(trace: &ReasonTrace, lex: &Lexicons) -> usize {
    lex.verification.count(&step_text(trace))
}

/// Behavior counts for one trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorCounts {
    pub regions: usize,
    pub subgoals: usize,
    pub verifications: usize,
    pub backtracks: usize,
}

/// Codes traces. The rule-based coder is the default; an external model
/// can stand in by implementing this trait.
pub trait Judge: Sync {
    fn code(&self, trace: &ReasonTrace) -> BehaviorCounts;
}

#[derive(Debug, Clone)]
pub struct RuleJudge {
    pub lexicons: Lexicons,
    pub min_separation: f64,
}

impl Default for RuleJudge {
    fn default() -> Self {
        Self { lexicons: Lexicons::default(), min_separation: DEFAULT_MIN_SEPARATION }
    }
}

impl Judge for RuleJudge {
    fn code(&self, trace: &ReasonTrace) -> BehaviorCounts {
        BehaviorCounts {
            regions: count_regions(trace, self.min_separation),
            subgoals: count_subgoals(trace, &self.lexicons),
            verifications: count_verifications(trace, &self.lexicons),
            backtracks: count_backtracks(trace, &self.lexicons),
        }
    }
}

/// Mean behavior counts over the coded traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub traces: usize,
    pub regions: f64,
    pub subgoals: f64,
    pub verifications: f64,
    pub backtracks: f64,
    pub accuracy: f64,
}

/// Reward at or above which a trace counts as correct.
pub const CORRECT_REWARD: f64 = 1.0;

fn is_correct(trace: &ReasonTrace) -> bool {
    trace.reward.is_some_and(|r| r >= CORRECT_REWARD)
}

/// Averages behavior counts. With `correct_only`, only traces whose reward
/// reaches the maximum are coded; accuracy is over the coded traces.
pub fn behavior_report<J: Judge + ?Sized>(traces: &[ReasonTrace], judge: &J, correct_only: bool) -> BehaviorReport {
    let coded: Vec<&ReasonTrace> = traces.iter().filter(|t| !correct_only || is_correct(t)).collect();
    let counts: Vec<BehaviorCounts> = coded.par_iter().map(|t| judge.code(t)).collect();
    let n = coded.len();
    let mean = |f: fn(&BehaviorCounts) -> usize| {
        if n == 0 {
            0.0
        } else {
            counts.iter().map(f).sum::<usize>() as f64 / n as f64
        }
    };
    BehaviorReport {
        traces: n,
        regions: mean(|c| c.regions),
        subgoals: mean(|c| c.subgoals),
        verifications: mean(|c| c.verifications),
        backtracks: mean(|c| c.backtracks),
        accuracy: if n == 0 { 0.0 } else { coded.iter().filter(|t| is_correct(t)).count() as f64 / n as f64 },
    }
}

/// Flattens a dialog into a trace: think steps keep their anchors and each
/// tool call becomes an anchored step. Unparseable think lines are kept as
/// unanchored steps.
pub fn trace_from_dialog(dialog: &Dialog) -> ReasonTrace {
    let mut steps = Vec::new();
    for seg in &dialog.segments {
        match seg {
            Segment::Think(body) => match parse_steps(body) {
                Ok(parsed) => steps.extend(parsed),
                Err(_) => steps.extend(body.lines().filter_map(|l| GroundedStep::new(l, None).ok())),
            },
            Segment::ToolCall(c) => steps.extend(GroundedStep::new("crop", Some(*c)).ok()),
            Segment::Observation(_) | Segment::Answer(_) => {}
        }
    }
    ReasonTrace::new(steps, dialog.answer().unwrap_or_default())
}

/// Trace for dialog text; `None` when the text is not a parseable dialog.
pub fn trace_from_dialog_text(text: &str) -> Option<ReasonTrace> {
    parse_dialog(text).ok().map(|d| trace_from_dialog(&d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::BACKTRACK_PHRASE;
    use proptest::prelude::*;

    fn step(text: &str, xy: Option<(i64, i64)>) -> GroundedStep {
        GroundedStep::new(text, xy.map(|(x, y)| Coordinate::new(x, y))).unwrap()
    }

    #[test]
    fn region_clustering() {
        let t = ReasonTrace::new(
            vec![step("a", Some((10, 10))), step("b", Some((200, 200))), step("c", Some((12, 11)))],
            "x",
        );
        assert_eq!(count_regions(&t, 10.0), 2);
        assert_eq!(count_regions(&ReasonTrace::new(vec![], "x"), 10.0), 0);
    }

    #[test]
    fn marker_counts() {
        let lex = Lexicons::default();
        // A pricing-page walk-through of my own, not taken from anywhere.
        let t = ReasonTrace::new(
            vec![
                step("First I locate the pricing table, then the signup link", Some((40, 60))),
                step("Now I will check whether the monthly toggle is on", Some((300, 80))),
                step("I can confirm the toggle reads monthly", Some((302, 81))),
                step("wait, THIS seems off, the price is yearly", None),
                step("Let me verify the footnote; this matches the banner", Some((500, 700))),
            ],
            "monthly",
        );
        assert!(count_subgoals(&t, &lex) >= 2);
        assert_eq!(count_verifications(&t, &lex), 3);
        assert_eq!(count_backtracks(&t, &lex), 1);
        assert_eq!(count_regions(&t, 10.0), 3);
    }

    #[test]
    fn gap_patterns_stay_on_one_line() {
        let lex = Lexicon::new("s", ["first … then"]).unwrap();
        assert_eq!(lex.count("first the header, then the body"), 1);
        assert_eq!(lex.count("first the header\nthen the body"), 0);
        assert_eq!(lex.count("firstly then"), 0);
    }

    #[test]
    fn backtrack_phrase_is_counted_once() {
        let lex = Lexicons::default();
        let t = ReasonTrace::new(vec![step("I see the red cross", Some((1, 1))), step(BACKTRACK_PHRASE, None)], "x");
        assert_eq!(count_backtracks(&t, &lex), 1);
        let direct = ReasonTrace::new(vec![step("I see the red cross", Some((1, 1)))], "x");
        assert_eq!(count_backtracks(&direct, &lex), 0);
    }

    #[test]
    fn empty_trace_scores_zero() {
        let judge = RuleJudge::default();
        let c = judge.code(&ReasonTrace::new(vec![], "x"));
        assert_eq!(c, BehaviorCounts { regions: 0, subgoals: 0, verifications: 0, backtracks: 0 });
    }

    #[test]
    fn report_filters_and_averages() {
        let judge = RuleJudge::default();
        let good = ReasonTrace::new(vec![step("I can confirm it", Some((5, 5)))], "x").with_reward(1.0);
        let bad = ReasonTrace::new(vec![step(BACKTRACK_PHRASE, None)], "y").with_reward(0.0);
        let r = behavior_report(std::slice::from_ref(&good), &judge, true);
        assert_eq!((r.traces, r.regions, r.verifications, r.backtracks, r.accuracy), (1, 1.0, 1.0, 0.0, 1.0));
        let all = behavior_report(&[good.clone(), bad.clone()], &judge, false);
        assert_eq!((all.traces, all.backtracks, all.accuracy), (2, 0.5, 0.5));
        let filtered = behavior_report(&[good, bad], &judge, true);
        assert_eq!(filtered.traces, 1);
        assert_eq!(behavior_report(&[], &judge, true).traces, 0);
    }

    #[test]
    fn lexicon_loading() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["subgoal.txt", "verification.txt", "backtrack.txt"] {
            std::fs::write(dir.path().join(f), "# comment\nzebra\n\n").unwrap();
        }
        let lex = Lexicons::load_dir(dir.path()).unwrap();
        assert_eq!(lex.subgoal.phrases(), ["zebra"]);
        assert_eq!(lex.backtrack.count("Zebra and zebras"), 1);
        assert!(matches!(Lexicon::parse("x", "\n# only\n"), Err(BehaviorError::EmptyLexicon { .. })));
        assert!(matches!(Lexicons::load_dir(&dir.path().join("missing")), Err(BehaviorError::Io { .. })));
    }

    proptest! {
        #[test]
        fn counts_ignore_coordinates(xs in proptest::collection::vec((0i64..900, 0i64..700), 1..6), dx in -50i64..50) {
            let judge = RuleJudge::default();
            let texts = ["Now I will check the cross", "I can confirm the circle", BACKTRACK_PHRASE, "I see the square"];
            let mk = |shift: i64| ReasonTrace::new(
                xs.iter().enumerate().map(|(i, &(x, y))| step(texts[i % texts.len()], Some((x + shift, y)))).collect(),
                "a",
            );
            let (a, b) = (judge.code(&mk(0)), judge.code(&mk(dx)));
            prop_assert_eq!((a.subgoals, a.verifications, a.backtracks), (b.subgoals, b.verifications, b.backtracks));
            prop_assert_eq!(a.regions, b.regions);
            prop_assert!(a.regions <= xs.len());
        }

        #[test]
        fn report_sums_are_linear(n in 1usize..6, m in 1usize..6) {
            let judge = RuleJudge::default();
            let a = ReasonTrace::new(vec![step("I can confirm", Some((1, 1)))], "x").with_reward(1.0);
            let b = ReasonTrace::new(vec![step("verify then verify", Some((100, 1)))], "x").with_reward(1.0);
            let mut all = vec![a.clone(); n];
            all.extend(vec![b.clone(); m]);
            let ra = behavior_report(&vec![a; n], &judge, true);
            let rb = behavior_report(&vec![b; m], &judge, true);
            let r = behavior_report(&all, &judge, true);
            let total = ra.verifications * n as f64 + rb.verifications * m as f64;
            prop_assert!((r.verifications * (n + m) as f64 - total).abs() < 1e-9);
        }
    }
}
