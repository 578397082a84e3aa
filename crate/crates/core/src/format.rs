//! Vocabulary and the Decompose-Look-Reason token grammar.
//!
//! A rendered sequence is
//!
//! ```text
//! <bos> question... ( <premise> p... </premise> <vis_thought> <VIS0> .. <VIS{L-1}> </vis_thought>
//!                     <rationale> r... </rationale> )+ answer... <eos>
//! ```
//!
//! The answer is emitted bare between the last `</rationale>` and `<eos>`.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = usize;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PREMISE_OPEN: &str = "<premise>";
pub const PREMISE_CLOSE: &str = "</premise>";
pub const VIS_OPEN: &str = "<vis_thought>";
pub const VIS_CLOSE: &str = "</vis_thought>";
pub const RATIONALE_OPEN: &str = "<rationale>";
pub const RATIONALE_CLOSE: &str = "</rationale>";

const SPECIALS: [&str; 9] =
    [PAD, BOS, EOS, PREMISE_OPEN, PREMISE_CLOSE, VIS_OPEN, VIS_CLOSE, RATIONALE_OPEN, RATIONALE_CLOSE];

/// Every word the synthetic task language can produce.
pub const WORDS: &[&str] = &[
    "?", "a", "above", "all", "are", "at", "below", "black", "blue", "circle", "color", "column", "dominant",
    "green", "is", "it", "left", "locate", "look", "most", "object", "objects", "of", "red", "right", "row",
    "shape", "square", "star", "survey", "the", "triangle", "what", "white", "yellow", "0", "1", "2", "3", "4",
    "5", "6", "7", "8", "9", "10", "11", "12", "13", "14", "15",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("word `{0}` is not in the vocabulary")]
    OovWord(String),
    #[error("token `{0}` appears twice")]
    Duplicate(String),
    #[error("special token `{0}` missing")]
    MissingSpecial(String),
    #[error("placeholders must run <VIS0>..<VIS{{L-1}}> without gaps")]
    BadPlaceholders,
}

/// Closed word-level vocabulary with the grammar's special tokens and `L`
/// latent placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    latents: usize,
    first_placeholder: TokenId,
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub premise_open: TokenId,
    pub premise_close: TokenId,
    pub vis_open: TokenId,
    pub vis_close: TokenId,
    pub rationale_open: TokenId,
    pub rationale_close: TokenId,
}

pub fn placeholder(k: usize) -> String {
    format!("<VIS{k}>")
}

impl Vocab {
    /// Specials, then `<VIS0>`..`<VIS{latents-1}>`, then [`WORDS`].
    pub fn new(latents: usize) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..latents).map(placeholder));
        tokens.extend(WORDS.iter().map(|s| s.to_string()));
        Self::from_tokens(tokens).expect("built-in vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        let get = |s: &str| index.get(s).copied().ok_or_else(|| VocabError::MissingSpecial(s.to_string()));
        let latents = tokens.iter().filter(|t| t.starts_with("<VIS")).count();
        let first_placeholder = if latents == 0 { tokens.len() } else { get(&placeholder(0))? };
        for k in 0..latents {
            if index.get(&placeholder(k)) != Some(&(first_placeholder + k)) {
                return Err(VocabError::BadPlaceholders);
            }
        }
        Ok(Self {
            pad: get(PAD)?,
            bos: get(BOS)?,
            eos: get(EOS)?,
            premise_open: get(PREMISE_OPEN)?,
            premise_close: get(PREMISE_CLOSE)?,
            vis_open: get(VIS_OPEN)?,
            vis_close: get(VIS_CLOSE)?,
            rationale_open: get(RATIONALE_OPEN)?,
            rationale_close: get(RATIONALE_CLOSE)?,
            tokens,
            index,
            latents,
            first_placeholder,
        })
    }

    /// One token per line; the token id is the 0-based line number.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        Self::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn latents(&self) -> usize {
        self.latents
    }

    pub fn id(&self, word: &str) -> Result<TokenId, VocabError> {
        self.index.get(word).copied().ok_or_else(|| VocabError::OovWord(word.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn placeholder_id(&self, k: usize) -> TokenId {
        assert!(k < self.latents);
        self.first_placeholder + k
    }

    pub fn is_placeholder(&self, id: TokenId) -> bool {
        id >= self.first_placeholder && id < self.first_placeholder + self.latents
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < SPECIALS.len() || self.is_placeholder(id)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>, VocabError> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Space-joined surface form; unknown ids print as `<unk:N>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).map(str::to_string).unwrap_or_else(|| format!("<unk:{i}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One Decompose-Look-Reason step. `latent` is `None` until a grounder fills it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub premise: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<Vec<f64>>>,
    pub rationale: Vec<String>,
}

impl Step {
    pub fn new<S: AsRef<str>>(premise: &[S], rationale: &[S]) -> Self {
        Self {
            premise: premise.iter().map(|s| s.as_ref().to_string()).collect(),
            latent: None,
            rationale: rationale.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub answer: Vec<String>,
}

impl Trajectory {
    pub fn answer_text(&self) -> String {
        self.answer.join(" ")
    }

    pub fn without_latents(&self) -> Self {
        let mut t = self.clone();
        t.steps.iter_mut().for_each(|s| s.latent = None);
        t
    }
}

/// Why a token sequence is not a well-formed trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatReason {
    MissingBos,
    UnknownToken,
    UnexpectedToken,
    NestedTag,
    UnclosedTag,
    BadLatentBlock,
    StrayPlaceholder,
    NoSteps,
    MissingAnswer,
    TextAfterEos,
}

impl fmt::Display for FormatReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::MissingBos => "missing_bos",
            Self::UnknownToken => "unknown_token",
            Self::UnexpectedToken => "unexpected_token",
            Self::NestedTag => "nested_tag",
            Self::UnclosedTag => "unclosed_tag",
            Self::BadLatentBlock => "bad_latent_block",
            Self::StrayPlaceholder => "stray_placeholder",
            Self::NoSteps => "no_steps",
            Self::MissingAnswer => "missing_answer",
            Self::TextAfterEos => "text_after_eos",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("format error at token {position}: {reason}")]
pub struct FormatError {
    pub position: usize,
    pub reason: FormatReason,
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("word `{0}` is a special token and cannot appear in text")]
    SpecialInText(String),
}

/// A parsed sequence: the question prefix and the trajectory after it.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub question: Vec<String>,
    pub trajectory: Trajectory,
}

/// Token positions of one step inside a rendered sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSpan {
    pub premise_open: usize,
    pub premise_close: usize,
    /// First placeholder position; the block covers `L` positions.
    pub block_start: usize,
    pub rationale_close: usize,
}

fn push_words(out: &mut Vec<TokenId>, words: &[String], vocab: &Vocab) -> Result<(), RenderError> {
    for w in words {
        let id = vocab.id(w)?;
        if vocab.is_special(id) {
            return Err(RenderError::SpecialInText(w.clone()));
        }
        out.push(id);
    }
    Ok(())
}

/// Renders question and trajectory to token ids. Latent blocks always render
/// as the `L` placeholder ids whether filled or not.
pub fn render<S: AsRef<str>>(question: &[S], traj: &Trajectory, vocab: &Vocab) -> Result<Vec<TokenId>, RenderError> {
    let question: Vec<String> = question.iter().map(|s| s.as_ref().to_string()).collect();
    let mut out = vec![vocab.bos];
    push_words(&mut out, &question, vocab)?;
    for step in &traj.steps {
        out.push(vocab.premise_open);
        push_words(&mut out, &step.premise, vocab)?;
        out.push(vocab.premise_close);
        out.push(vocab.vis_open);
        out.extend((0..vocab.latents()).map(|k| vocab.placeholder_id(k)));
        out.push(vocab.vis_close);
        out.push(vocab.rationale_open);
        push_words(&mut out, &step.rationale, vocab)?;
        out.push(vocab.rationale_close);
    }
    push_words(&mut out, &traj.answer, vocab)?;
    out.push(vocab.eos);
    Ok(out)
}

/// Strict single-pass parse. Trailing `<pad>` after `<eos>` is tolerated.
pub fn parse(tokens: &[TokenId], vocab: &Vocab) -> Result<Parsed, FormatError> {
    parse_spans(tokens, vocab).map(|(p, _)| p)
}

/// Like [`parse`], also returning each step's token positions.
pub fn parse_spans(tokens: &[TokenId], vocab: &Vocab) -> Result<(Parsed, Vec<StepSpan>), FormatError> {
    let err = |position, reason| FormatError { position, reason };
    let word = |pos: usize| -> Result<Option<String>, FormatError> {
        let id = tokens[pos];
        match vocab.token(id) {
            None => Err(err(pos, FormatReason::UnknownToken)),
            Some(_) if vocab.is_special(id) => Ok(None),
            Some(w) => Ok(Some(w.to_string())),
        }
    };
    // Reason for an unexpected special token inside a text span.
    let misplaced = |pos: usize| -> FormatError {
        let id = tokens[pos];
        let reason = if vocab.is_placeholder(id) {
            FormatReason::StrayPlaceholder
        } else if id == vocab.eos {
            FormatReason::UnclosedTag
        } else if id == vocab.premise_open || id == vocab.rationale_open || id == vocab.vis_open {
            FormatReason::NestedTag
        } else {
            FormatReason::UnexpectedToken
        };
        err(pos, reason)
    };

    if tokens.first() != Some(&vocab.bos) {
        return Err(err(0, FormatReason::MissingBos));
    }
    let n = tokens.len();
    let mut pos = 1;
    let mut question = Vec::new();
    while pos < n && tokens[pos] != vocab.premise_open {
        match word(pos)? {
            Some(w) => question.push(w),
            None if vocab.is_placeholder(tokens[pos]) => return Err(err(pos, FormatReason::StrayPlaceholder)),
            None if tokens[pos] == vocab.eos => return Err(err(pos, FormatReason::NoSteps)),
            None => return Err(err(pos, FormatReason::UnexpectedToken)),
        }
        pos += 1;
    }
    if pos == n {
        return Err(err(pos, FormatReason::NoSteps));
    }

    let mut steps = Vec::new();
    let mut spans = Vec::new();
    let mut answer = Vec::new();
    loop {
        // at <premise>
        let premise_open = pos;
        pos += 1;
        let mut premise = Vec::new();
        loop {
            if pos == n {
                return Err(err(pos, FormatReason::UnclosedTag));
            }
            if tokens[pos] == vocab.premise_close {
                break;
            }
            match word(pos)? {
                Some(w) => premise.push(w),
                None => return Err(misplaced(pos)),
            }
            pos += 1;
        }
        let premise_close = pos;
        pos += 1;
        if pos == n || tokens[pos] != vocab.vis_open {
            return Err(err(pos, if pos == n { FormatReason::UnclosedTag } else { FormatReason::BadLatentBlock }));
        }
        pos += 1;
        let block_start = pos;
        let mut k = 0;
        while pos < n && vocab.is_placeholder(tokens[pos]) {
            if tokens[pos] != vocab.placeholder_id(k.min(vocab.latents() - 1)) || k >= vocab.latents() {
                return Err(err(pos, FormatReason::BadLatentBlock));
            }
            k += 1;
            pos += 1;
        }
        if pos == n {
            return Err(err(pos, FormatReason::UnclosedTag));
        }
        if k != vocab.latents() || tokens[pos] != vocab.vis_close {
            return Err(err(pos, FormatReason::BadLatentBlock));
        }
        pos += 1;
        if pos == n {
            return Err(err(pos, FormatReason::UnclosedTag));
        }
        if tokens[pos] != vocab.rationale_open {
            return Err(err(pos, FormatReason::UnexpectedToken));
        }
        pos += 1;
        let mut rationale = Vec::new();
        loop {
            if pos == n {
                return Err(err(pos, FormatReason::UnclosedTag));
            }
            if tokens[pos] == vocab.rationale_close {
                break;
            }
            match word(pos)? {
                Some(w) => rationale.push(w),
                None => return Err(misplaced(pos)),
            }
            pos += 1;
        }
        spans.push(StepSpan { premise_open, premise_close, block_start, rationale_close: pos });
        steps.push(Step { premise, latent: None, rationale });
        pos += 1;
        if pos < n && tokens[pos] == vocab.premise_open {
            continue;
        }
        // answer span
        while pos < n && tokens[pos] != vocab.eos {
            match word(pos)? {
                Some(w) => answer.push(w),
                None if vocab.is_placeholder(tokens[pos]) => return Err(err(pos, FormatReason::StrayPlaceholder)),
                None => return Err(err(pos, FormatReason::UnexpectedToken)),
            }
            pos += 1;
        }
        if pos == n {
            return Err(err(pos, FormatReason::UnclosedTag));
        }
        if answer.is_empty() {
            return Err(err(pos, FormatReason::MissingAnswer));
        }
        pos += 1;
        if let Some(extra) = (pos..n).find(|&p| tokens[p] != vocab.pad) {
            return Err(err(extra, FormatReason::TextAfterEos));
        }
        break;
    }
    Ok((Parsed { question, trajectory: Trajectory { steps, answer } }, spans))
}

/// Per-position supervision flags: off for `<bos>`, the question and every
/// placeholder; on for premise, rationale, tags, answer and `<eos>`.
pub fn supervision_mask(tokens: &[TokenId], vocab: &Vocab) -> Result<Vec<bool>, FormatError> {
    let (_, spans) = parse_spans(tokens, vocab)?;
    let first = spans[0].premise_open;
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| i >= first && !vocab.is_placeholder(t) && t != vocab.pad)
        .collect())
}
