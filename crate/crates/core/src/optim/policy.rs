//! Policies over the token language: the trainable log-linear tabular
//! policy, scripted reference policies and nucleus sampling.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::vocab::{Block, Token, POLICY_VOCAB};
use crate::num::{log_softmax, softmax, Scalar};
use crate::scene::{Ask, Color, GlyphClass, Material, TaskInstance, TaskKind};
use crate::seed::{fnv1a, Rng};
use crate::trace::Phrase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "single")]
    Single,
    #[serde(rename = "multiturn")]
    Multi,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" => Some(Mode::Single),
            "multiturn" | "multi" => Some(Mode::Multi),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Multi => "multiturn",
        }
    }
}

/// What the policy has perceived of the scene so far: the glyph under its
/// most recent look (single-turn) or crop (multi-turn).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Perception {
    Nothing,
    Seen { matches_query: bool, attribute: u8 },
}

/// Summary of a token prefix that the tabular policy conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Context {
    pub mode: Mode,
    pub kind: TaskKind,
    pub ask: u8,
    pub target: u8,
    pub last1: Option<Token>,
    pub last2: Option<Token>,
    pub block: Block,
    pub block_len: u8,
    pub looks: u8,
    pub perceived: Perception,
    pub turn: u8,
}

/// Incrementally maintains the [`Context`] of a growing token sequence.
#[derive(Debug, Clone)]
pub struct ContextTracker<'a> {
    task: &'a TaskInstance,
    target: GlyphClass,
    ask: Ask,
    ctx: Context,
}

impl<'a> ContextTracker<'a> {
    pub fn new(task: &'a TaskInstance, mode: Mode) -> Self {
        let spec = task.spec();
        let target = spec.map_or(GlyphClass::from_index(0), |s| s.target);
        let ask = spec.map_or(Ask::Point, |s| s.ask);
        let ctx = Context {
            mode,
            kind: task.kind,
            ask: ask.index() as u8,
            target: target.index() as u8,
            last1: None,
            last2: None,
            block: Block::None,
            block_len: 0,
            looks: 0,
            perceived: Perception::Nothing,
            turn: 0,
        };
        Self { task, target, ask, ctx }
    }

    pub fn context(&self) -> &Context {
        &self.ctx
    }

    fn perceive(&mut self, class: GlyphClass) {
        self.ctx.perceived = match self.task.raster.resolve_class(class) {
            Some(g) => Perception::Seen {
                matches_query: class == self.target,
                attribute: match self.ask {
                    Ask::Color => g.color.index() as u8,
                    Ask::Material => g.material.index() as u8,
                    _ => 0,
                },
            },
            None => Perception::Nothing,
        };
    }

    pub fn push(&mut self, tok: Token) {
        let c = &mut self.ctx;
        match tok {
            Token::ThinkOpen => (c.block, c.block_len) = (Block::Think, 0),
            Token::ToolOpen => (c.block, c.block_len) = (Block::Tool, 0),
            Token::AnswerOpen => (c.block, c.block_len) = (Block::Answer, 0),
            Token::ObsOpen => (c.block, c.block_len) = (Block::Obs, 0),
            Token::ThinkClose | Token::ToolClose | Token::AnswerClose | Token::ObsClose | Token::SoftPrompt => {
                (c.block, c.block_len) = (Block::None, 0)
            }
            _ => c.block_len = c.block_len.saturating_add(1).min(3),
        }
        if matches!(tok, Token::ObsClose | Token::SoftPrompt) {
            c.turn = c.turn.saturating_add(1);
        }
        if let Token::Look(class) = tok {
            let perceptive = match c.mode {
                Mode::Single => c.block == Block::Think,
                Mode::Multi => c.block == Block::Tool,
            };
            if perceptive {
                c.looks = c.looks.saturating_add(1).min(4);
                self.perceive(class);
            }
        }
        let c = &mut self.ctx;
        c.last2 = c.last1;
        c.last1 = Some(tok);
    }
}

/// Everything a policy may look at when choosing the next token.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub task: &'a TaskInstance,
    pub mode: Mode,
    pub prefix: &'a [Token],
    pub ctx: &'a Context,
}

pub trait Policy<S: Scalar>: Sync {
    /// Next-token distribution over the policy vocabulary.
    fn distribution(&self, input: &PolicyInput<'_>) -> Vec<S>;
}

/// A policy with parameters and an analytic gradient through its logits.
pub trait DifferentiablePolicy<S: Scalar>: Policy<S> + Clone + Send {
    fn logits(&self, ctx: &Context) -> Vec<S>;
    /// Adds `dlogits` (the gradient of some scalar with respect to the logits
    /// at `ctx`) into `grad` through the chain rule.
    fn backprop(&self, ctx: &Context, dlogits: &[S], grad: &mut [S]);
    fn parameters(&self) -> &[S];
    fn parameters_mut(&mut self) -> &mut [S];
    /// Indices of the parameters that influence the logits at `ctx`.
    fn active_parameters(&self, ctx: &Context) -> Vec<usize>;

    fn log_distribution(&self, ctx: &Context) -> Vec<S> {
        log_softmax(&self.logits(ctx))
    }
}

const FEATURES: usize = 4;

fn code(t: Option<Token>) -> u8 {
    match t {
        None => 255,
        Some(Token::ObsOpen) => 200,
        Some(Token::ObsImage) => 201,
        Some(Token::ObsClose) => 202,
        Some(Token::SoftPrompt) => 203,
        Some(t) => t.policy_index().expect("policy token") as u8,
    }
}

fn perception_code(p: Perception) -> [u8; 2] {
    match p {
        Perception::Nothing => [2, 0],
        Perception::Seen { matches_query, attribute } => [u8::from(matches_query), attribute],
    }
}

/// Log-linear policy: the logits are the sum of one parameter row per hashed
/// context feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct TabularSoftmaxPolicy<S> {
    pub buckets: usize,
    pub params: Vec<S>,
}

pub const DEFAULT_BUCKETS: usize = 4096;

impl<S: Scalar> TabularSoftmaxPolicy<S> {
    /// All-zero parameters, i.e. the uniform policy.
    pub fn new(buckets: usize) -> Self {
        assert!(buckets > 0, "at least one bucket");
        Self { buckets, params: vec![S::zero(); buckets * POLICY_VOCAB] }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    /// Row index of each feature at `ctx`.
    pub fn rows(&self, ctx: &Context) -> [usize; FEATURES] {
        let mode = ctx.mode as u8;
        let block = ctx.block as u8;
        let kind = ctx.kind.index() as u8;
        let (l1, l2) = (code(ctx.last1), code(ctx.last2));
        let [pm, pa] = perception_code(ctx.perceived);
        let keys: [Vec<u8>; FEATURES] = [
            vec![0, mode, block, l2, l1],
            vec![1, mode, ctx.ask, ctx.target, block, l1, ctx.looks],
            vec![2, mode, ctx.ask, pm, pa, block, l1],
            vec![3, mode, kind, block, ctx.block_len, l1, ctx.turn.min(6)],
        ];
        keys.map(|k| (fnv1a(&k) % self.buckets as u64) as usize)
    }
}

impl<S: Scalar> Policy<S> for TabularSoftmaxPolicy<S> {
    fn distribution(&self, input: &PolicyInput<'_>) -> Vec<S> {
        softmax(&self.logits(input.ctx))
    }
}

impl<S: Scalar> DifferentiablePolicy<S> for TabularSoftmaxPolicy<S> {
    fn logits(&self, ctx: &Context) -> Vec<S> {
        let mut z = vec![S::zero(); POLICY_VOCAB];
        for r in self.rows(ctx) {
            let row = &self.params[r * POLICY_VOCAB..(r + 1) * POLICY_VOCAB];
            for (zi, &w) in z.iter_mut().zip(row) {
                *zi += w;
            }
        }
        z
    }

    fn backprop(&self, ctx: &Context, dlogits: &[S], grad: &mut [S]) {
        for r in self.rows(ctx) {
            for (g, &d) in grad[r * POLICY_VOCAB..(r + 1) * POLICY_VOCAB].iter_mut().zip(dlogits) {
                *g += d;
            }
        }
    }

    fn parameters(&self) -> &[S] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    fn active_parameters(&self, ctx: &Context) -> Vec<usize> {
        let mut rows = self.rows(ctx).to_vec();
        rows.sort_unstable();
        rows.dedup();
        rows.into_iter().flat_map(|r| r * POLICY_VOCAB..(r + 1) * POLICY_VOCAB).collect()
    }
}

/// Samples an index from `dist` after temperature scaling and nucleus
/// truncation. Temperature 0 is greedy (ties to the lowest index).
pub fn sample_index<S: Scalar>(dist: &[S], temperature: f64, top_p: f64, rng: &mut Rng) -> usize {
    let probs: Vec<f64> = dist.iter().map(|p| p.as_f64().max(0.0)).collect();
    if temperature <= 0.0 {
        return probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0;
    }
    let weights: Vec<f64> = probs.iter().map(|&p| if p > 0.0 { p.powf(1.0 / temperature) } else { 0.0 }).collect();
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        if weights[i] <= 0.0 {
            break;
        }
        kept.push(i);
        mass += weights[i];
        if mass >= top_p * total {
            break;
        }
    }
    let mut u = rng.gen::<f64>() * mass;
    for &i in &kept {
        u -= weights[i];
        if u < 0.0 {
            return i;
        }
    }
    *kept.last().unwrap_or(&0)
}

/// Log-probability of every token in `tokens` under `policy`, replaying the
/// contexts from the start. Environment tokens get 0.
pub fn sequence_log_probs<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    task: &TaskInstance,
    mode: Mode,
    tokens: &[Token],
) -> Vec<S> {
    let mut tracker = ContextTracker::new(task, mode);
    let mut out = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        match tok.policy_index() {
            Some(i) => {
                let input = PolicyInput { task, mode, prefix: &tokens[..t], ctx: tracker.context() };
                let p = policy.distribution(&input)[i];
                out.push(if p > S::zero() { p.ln() } else { S::neg_infinity() });
            }
            None => out.push(S::zero()),
        }
        tracker.push(tok);
    }
    out
}

fn one_hot<S: Scalar>(tok: Token) -> Vec<S> {
    let mut d = vec![S::zero(); POLICY_VOCAB];
    d[tok.policy_index().expect("policy token")] = S::one();
    d
}

/// Tokens of the correct answer for `task`.
pub fn answer_tokens(task: &TaskInstance) -> Vec<Token> {
    let target = task.spec().map_or(GlyphClass::from_index(0), |s| s.target);
    match &task.answer_key {
        crate::scene::AnswerKey::Choice(c) => {
            vec![Color::parse(c)
                .map(Token::Color)
                .or_else(|| Material::parse(c).map(Token::Material))
                .unwrap_or(Token::Eos)]
        }
        crate::scene::AnswerKey::Box(_) => vec![Token::Look(target)],
        crate::scene::AnswerKey::Action { action_type, .. } => {
            let verb = crate::scene::ActionVerb::parse(action_type).unwrap_or(crate::scene::ActionVerb::Click);
            vec![Token::Act(verb), Token::Look(target)]
        }
    }
}

/// The canonical correct token sequence for a task, including the
/// environment's observation tokens in multi-turn mode.
pub fn oracle_script(task: &TaskInstance, mode: Mode) -> Vec<Token> {
    let target = task.spec().map_or(GlyphClass::from_index(0), |s| s.target);
    let mut s = vec![Token::ThinkOpen, Token::Phrase(Phrase::See), Token::Look(target), Token::ThinkClose];
    if mode == Mode::Multi {
        s.extend([Token::ToolOpen, Token::Look(target), Token::ToolClose]);
        s.extend([Token::ObsOpen, Token::ObsImage, Token::ObsClose, Token::ThinkOpen, Token::ThinkClose]);
    }
    s.push(Token::AnswerOpen);
    s.extend(answer_tokens(task));
    s.extend([Token::AnswerClose, Token::Eos]);
    s
}

/// Follows [`oracle_script`]; emits end-of-sequence off script.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePolicy;

impl<S: Scalar> Policy<S> for OraclePolicy {
    fn distribution(&self, input: &PolicyInput<'_>) -> Vec<S> {
        let script = oracle_script(input.task, input.mode);
        let next = if script.starts_with(input.prefix) { script.get(input.prefix.len()).copied() } else { None };
        one_hot(next.filter(|t| !t.is_env()).unwrap_or(Token::Eos))
    }
}

/// Crops the queried glyph every turn and never answers.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeverAnswerPolicy;

impl<S: Scalar> Policy<S> for NeverAnswerPolicy {
    fn distribution(&self, input: &PolicyInput<'_>) -> Vec<S> {
        let target = input.task.spec().map_or(GlyphClass::from_index(0), |s| s.target);
        let next = match input.prefix.last() {
            None | Some(Token::ObsClose) | Some(Token::SoftPrompt) => Token::ThinkOpen,
            Some(Token::ThinkOpen) => Token::ThinkClose,
            Some(Token::ThinkClose) => Token::ToolOpen,
            Some(Token::ToolOpen) => Token::Look(target),
            Some(Token::Look(_)) => Token::ToolClose,
            _ => Token::Eos,
        };
        one_hot(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_task, Difficulty};
    use crate::seed;

    #[test]
    fn uniform_at_init_and_rows_stable() {
        let task = generate_task(1, TaskKind::MultipleChoice, Difficulty::default()).unwrap();
        let p = TabularSoftmaxPolicy::<f64>::new(64);
        let tracker = ContextTracker::new(&task, Mode::Single);
        let input = PolicyInput { task: &task, mode: Mode::Single, prefix: &[], ctx: tracker.context() };
        let d = p.distribution(&input);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.iter().all(|&x| (x - 1.0 / POLICY_VOCAB as f64).abs() < 1e-12));
        assert_eq!(p.rows(tracker.context()), p.rows(tracker.context()));
    }

    #[test]
    fn perception_follows_mode() {
        let task = generate_task(1, TaskKind::MultipleChoice, Difficulty::default()).unwrap();
        let target = task.spec().unwrap().target;
        let mut single = ContextTracker::new(&task, Mode::Single);
        let mut multi = ContextTracker::new(&task, Mode::Multi);
        for t in [Token::ThinkOpen, Token::Look(target)] {
            single.push(t);
            multi.push(t);
        }
        assert!(matches!(single.context().perceived, Perception::Seen { matches_query: true, .. }));
        assert_eq!(multi.context().perceived, Perception::Nothing);
        for t in [Token::ThinkClose, Token::ToolOpen, Token::Look(target)] {
            multi.push(t);
        }
        assert!(matches!(multi.context().perceived, Perception::Seen { matches_query: true, .. }));
    }

    #[test]
    fn sampling_rules() {
        let mut rng = seed::rng(0, &[]);
        let d = [0.1f64, 0.6, 0.3];
        assert_eq!(sample_index(&d, 0.0, 1.0, &mut rng), 1);
        for _ in 0..200 {
            assert_eq!(sample_index(&d, 1.0, 0.5, &mut rng), 1);
            assert_ne!(sample_index(&d, 1.0, 0.85, &mut rng), 0);
        }
        let one_hot = [0.0f64, 0.0, 1.0];
        assert_eq!(sample_index(&one_hot, 1.0, 0.99, &mut rng), 2);
        let mut counts = [0usize; 3];
        for _ in 0..20000 {
            counts[sample_index(&d, 1.0, 1.0, &mut rng)] += 1;
        }
        assert!((counts[0] as f64 / 20000.0 - 0.1).abs() < 0.02);
    }

    #[test]
    fn oracle_log_probs_are_zero_on_script() {
        let task = generate_task(2, TaskKind::ActionPrediction, Difficulty::default()).unwrap();
        for mode in [Mode::Single, Mode::Multi] {
            let script = oracle_script(&task, mode);
            let lp: Vec<f64> = sequence_log_probs(&OraclePolicy, &task, mode, &script);
            assert!(lp.iter().all(|&x| x == 0.0));
        }
    }
}
