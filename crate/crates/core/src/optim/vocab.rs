//! Closed token language for the toy policy.
//!
//! Tokens map onto canonical text through [`render_tokens`]; the encoder
//! maps canonical dataset text back to tokens and is checked to be an exact
//! inverse. A `Look` token names a glyph class and renders according to the
//! block it appears in: an anchored mention in a think block, a crop call in
//! a tool block, and a coordinate or element id in an answer block.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{parse_crop_call, tokenize_tags, TagKind};
use crate::scene::{ActionVerb, Color, GlyphClass, Material, TaskInstance, TaskKind};
use crate::trace::{
    crop_call_json, observation_placeholder, Coordinate, Phrase, ANSWER_CLOSE, ANSWER_OPEN, OBS_CLOSE, OBS_OPEN,
    SOFT_PROMPT_TEXT, THINK_CLOSE, THINK_OPEN, TOOL_CLOSE, TOOL_OPEN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Token {
    ThinkOpen,
    ThinkClose,
    ToolOpen,
    ToolClose,
    AnswerOpen,
    AnswerClose,
    Eos,
    Phrase(Phrase),
    Look(GlyphClass),
    Color(Color),
    Material(Material),
    Act(ActionVerb),
    /// Environment-only tokens below; never sampled by a policy.
    ObsOpen,
    ObsImage,
    ObsClose,
    SoftPrompt,
}

const FIXED: [Token; 7] = [
    Token::ThinkOpen,
    Token::ThinkClose,
    Token::ToolOpen,
    Token::ToolClose,
    Token::AnswerOpen,
    Token::AnswerClose,
    Token::Eos,
];

/// Number of tokens a policy can emit.
pub const POLICY_VOCAB: usize = FIXED.len() + 4 + GlyphClass::COUNT + 8 + 2 + 2;

impl Token {
    pub fn is_env(self) -> bool {
        matches!(self, Token::ObsOpen | Token::ObsImage | Token::ObsClose | Token::SoftPrompt)
    }

    /// Position in the policy vocabulary; `None` for environment tokens.
    pub fn policy_index(self) -> Option<usize> {
        const P: usize = FIXED.len();
        const L: usize = P + 4;
        const C: usize = L + GlyphClass::COUNT;
        const M: usize = C + 8;
        const A: usize = M + 2;
        Some(match self {
            Token::Phrase(p) => P + Phrase::ALL.iter().position(|&q| q == p).expect("phrase listed"),
            Token::Look(c) => L + c.index(),
            Token::Color(c) => C + c.index(),
            Token::Material(m) => M + m.index(),
            Token::Act(a) => A + a.index(),
            t if t.is_env() => return None,
            t => FIXED.iter().position(|&f| f == t).expect("fixed token"),
        })
    }

    pub fn from_policy_index(i: usize) -> Token {
        policy_tokens()[i]
    }
}

/// The policy vocabulary in index order.
pub fn policy_tokens() -> &'static [Token; POLICY_VOCAB] {
    use std::sync::OnceLock;
    static ALL: OnceLock<[Token; POLICY_VOCAB]> = OnceLock::new();
    ALL.get_or_init(|| {
        let mut v: Vec<Token> = FIXED.to_vec();
        v.extend(Phrase::ALL.iter().map(|&p| Token::Phrase(p)));
        v.extend(GlyphClass::all().map(Token::Look));
        v.extend(Color::ALL.iter().map(|&c| Token::Color(c)));
        v.extend(Material::ALL.iter().map(|&m| Token::Material(m)));
        v.extend(ActionVerb::ALL.iter().map(|&a| Token::Act(a)));
        v.try_into().expect("vocabulary size")
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    None,
    Think,
    Tool,
    Obs,
    Answer,
}

/// Where a class points in a given task: its canonical glyph, or the raster
/// center when the class is absent.
pub fn resolve(task: &TaskInstance, class: GlyphClass) -> (Coordinate, u32) {
    match task.raster.resolve_class(class) {
        Some(g) => (g.center, g.id),
        None => (task.raster.center(), 0),
    }
}

fn content_text(task: &TaskInstance, block: Block, tok: Token) -> String {
    match tok {
        Token::Phrase(p) => p.text().to_string(),
        Token::Color(c) => c.name().to_string(),
        Token::Material(m) => m.name().to_string(),
        Token::Act(a) => a.name().to_string(),
        Token::Look(class) => {
            let (c, id) = resolve(task, class);
            match block {
                Block::Tool => crop_call_json(c),
                Block::Answer => match task.kind {
                    TaskKind::PointGrounding => c.to_string(),
                    TaskKind::ActionPrediction => format!("id_{id}"),
                    TaskKind::MultipleChoice => class.to_string(),
                },
                _ => format!("the {class} {c}."),
            }
        }
        _ => String::new(),
    }
}

/// A closed block and its trimmed body text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedBlock {
    pub block: Block,
    pub body: String,
}

/// Deterministic text for a token sequence. `obs_size` is the side of the
/// observation image named in observation placeholders.
pub fn render_tokens(tokens: &[Token], task: &TaskInstance, obs_size: u32) -> String {
    render_with_blocks(tokens, task, obs_size).0
}

pub fn render_with_blocks(tokens: &[Token], task: &TaskInstance, obs_size: u32) -> (String, Vec<RenderedBlock>) {
    let mut out = String::new();
    let mut blocks = Vec::new();
    let mut block = Block::None;
    let mut content = 0usize;
    let mut body_start = 0usize;
    for &tok in tokens {
        let open = match tok {
            Token::ThinkOpen => Some((Block::Think, THINK_OPEN)),
            Token::ToolOpen => Some((Block::Tool, TOOL_OPEN)),
            Token::AnswerOpen => Some((Block::Answer, ANSWER_OPEN)),
            Token::ObsOpen => Some((Block::Obs, OBS_OPEN)),
            _ => None,
        };
        let close = match tok {
            Token::ThinkClose => Some(THINK_CLOSE),
            Token::ToolClose => Some(TOOL_CLOSE),
            Token::AnswerClose => Some(ANSWER_CLOSE),
            Token::ObsClose => Some(OBS_CLOSE),
            _ => None,
        };
        if let Some((b, lit)) = open {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(lit);
            block = b;
            content = 0;
            body_start = out.len();
        } else if let Some(lit) = close {
            let body = out[body_start.min(out.len())..].trim().to_string();
            if matches!(block, Block::Think | Block::Answer) && content > 0 {
                out.push(' ');
            }
            out.push_str(lit);
            if block != Block::None {
                blocks.push(RenderedBlock { block, body });
            }
            block = Block::None;
            content = 0;
        } else if tok == Token::SoftPrompt {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("{THINK_OPEN} {SOFT_PROMPT_TEXT} {THINK_CLOSE}"));
            blocks.push(RenderedBlock { block: Block::Think, body: SOFT_PROMPT_TEXT.to_string() });
            block = Block::None;
        } else if tok == Token::ObsImage {
            out.push_str(&observation_placeholder(obs_size, obs_size));
            content += 1;
        } else if tok != Token::Eos {
            let sep = match block {
                Block::Think if content > 0 && matches!(tok, Token::Phrase(_)) => "\n",
                Block::Tool if content == 0 => "",
                Block::None if out.is_empty() => "",
                _ => " ",
            };
            out.push_str(sep);
            out.push_str(&content_text(task, block, tok));
            content += 1;
        }
    }
    (out, blocks)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("cannot encode {0:?}")]
    Unrecognized(String),
    #[error("text is not in canonical form")]
    NotCanonical,
}

fn class_at(task: &TaskInstance, c: Coordinate) -> Option<GlyphClass> {
    GlyphClass::all().find(|&k| task.raster.resolve_class(k).is_some_and(|g| g.center == c))
}

fn encode_think_line(line: &str, out: &mut Vec<Token>) -> Result<(), EncodeError> {
    let unknown = || EncodeError::Unrecognized(line.to_string());
    let mut rest = line;
    let mut phrases: Vec<Phrase> = Phrase::ALL.to_vec();
    phrases.sort_by_key(|p| std::cmp::Reverse(p.text().len()));
    if let Some(p) = phrases.iter().find(|p| rest.starts_with(p.text())) {
        out.push(Token::Phrase(*p));
        rest = rest[p.text().len()..].trim_start();
    }
    if rest.is_empty() {
        return Ok(());
    }
    let mention = rest.strip_prefix("the ").ok_or_else(unknown)?;
    let class = GlyphClass::all().find(|k| mention.starts_with(&format!("{k} ("))).ok_or_else(unknown)?;
    out.push(Token::Look(class));
    Ok(())
}

fn encode_answer(task: &TaskInstance, body: &str, out: &mut Vec<Token>) -> Result<(), EncodeError> {
    let unknown = || EncodeError::Unrecognized(body.to_string());
    let body = body.trim();
    match task.kind {
        TaskKind::MultipleChoice => {
            let tok = Color::parse(body)
                .map(Token::Color)
                .or_else(|| Material::parse(body).map(Token::Material))
                .ok_or_else(unknown)?;
            out.push(tok);
        }
        TaskKind::PointGrounding => {
            let c = crate::grammar::extract_coordinates(body).first().copied().ok_or_else(unknown)?;
            out.push(Token::Look(class_at(task, c).ok_or_else(unknown)?));
        }
        TaskKind::ActionPrediction => {
            let (verb, arg) = body.split_once(' ').ok_or_else(unknown)?;
            out.push(Token::Act(ActionVerb::parse(verb).ok_or_else(unknown)?));
            let id: u32 = arg.strip_prefix("id_").and_then(|s| s.parse().ok()).ok_or_else(unknown)?;
            let glyph = task.raster.glyph_by_id(id).ok_or_else(unknown)?;
            out.push(Token::Look(glyph.class()));
        }
    }
    Ok(())
}

/// Encodes canonical trace or dialog text, appending the end-of-sequence
/// token. Fails unless rendering the tokens reproduces `text` exactly.
pub fn encode(text: &str, task: &TaskInstance, obs_size: u32) -> Result<Vec<Token>, EncodeError> {
    let tags = tokenize_tags(text);
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        let tag = tags[i];
        let body = match tags.get(i + 1) {
            Some(t) if t.kind == TagKind::TextRun && tag.kind != TagKind::TextRun => t.text(text),
            _ => "",
        };
        match tag.kind {
            TagKind::OpenThink if body.trim() == SOFT_PROMPT_TEXT => out.push(Token::SoftPrompt),
            TagKind::OpenThink => {
                out.push(Token::ThinkOpen);
                for line in body.lines().map(str::trim).filter(|l| !l.is_empty()) {
                    encode_think_line(line, &mut out)?;
                }
            }
            TagKind::OpenTool => {
                out.push(Token::ToolOpen);
                let c = parse_crop_call(body).ok_or_else(|| EncodeError::Unrecognized(body.to_string()))?;
                let class = class_at(task, c).ok_or_else(|| EncodeError::Unrecognized(body.to_string()))?;
                out.push(Token::Look(class));
            }
            TagKind::OpenObs => out.extend([Token::ObsOpen, Token::ObsImage]),
            TagKind::OpenAnswer => {
                out.push(Token::AnswerOpen);
                encode_answer(task, body, &mut out)?;
            }
            TagKind::CloseThink => {
                if out.last() != Some(&Token::SoftPrompt) {
                    out.push(Token::ThinkClose);
                }
            }
            TagKind::CloseTool => out.push(Token::ToolClose),
            TagKind::CloseObs => out.push(Token::ObsClose),
            TagKind::CloseAnswer => out.push(Token::AnswerClose),
            TagKind::TextRun => {
                let consumed = i > 0
                    && matches!(
                        tags[i - 1].kind,
                        TagKind::OpenThink | TagKind::OpenTool | TagKind::OpenObs | TagKind::OpenAnswer
                    );
                if !consumed && !tag.text(text).trim().is_empty() {
                    return Err(EncodeError::Unrecognized(tag.text(text).to_string()));
                }
            }
        }
        i += 1;
    }
    out.push(Token::Eos);
    if render_tokens(&out, task, obs_size) != text {
        return Err(EncodeError::NotCanonical);
    }
    Ok(out)
}
