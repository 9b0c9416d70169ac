//! Structured prompt strings: parsing, canonical formatting, and the fixed
//! numeric embedding that stands in for a learned text encoder.
//!
//! Grammar (case-insensitive, any whitespace):
//!
//! ```text
//! prompt  := ["generate"] "a tau image with" ["a"] stage "stage" "," "mmse" score
//!            ["," "amyloid" ("positive" | "negative")] ["," ("male" | "female")] ["."]
//! stage   := "early" | "later"
//! score   := 0..=30
//! ```

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MMSE_MAX: u8 = 30;
/// Length of every [`ConditionVector`].
pub const COND_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Early,
    Later,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Amyloid {
    Positive,
    Negative,
}

/// Parsed text condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub stage: Stage,
    pub mmse: u8,
    pub gender: Option<Gender>,
    pub amyloid: Option<Amyloid>,
}

impl PromptSpec {
    pub fn new(stage: Stage, mmse: u8) -> Result<Self> {
        let s = PromptSpec { stage, mmse, gender: None, amyloid: None };
        s.validate()?;
        Ok(s)
    }

    pub fn later(mmse: u8) -> Result<Self> {
        Self::new(Stage::Later, mmse)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mmse > MMSE_MAX {
            return Err(Error::InvalidPrompt(alloc::format!("MMSE {} outside 0..=30", self.mmse)));
        }
        Ok(())
    }

    /// Every valid combination: 31 scores × 2 stages × 3 amyloid × 3 gender states.
    pub fn all() -> impl Iterator<Item = PromptSpec> {
        let amyloids = [None, Some(Amyloid::Positive), Some(Amyloid::Negative)];
        let genders = [None, Some(Gender::Male), Some(Gender::Female)];
        (0..=MMSE_MAX).flat_map(move |mmse| {
            [Stage::Early, Stage::Later].into_iter().flat_map(move |stage| {
                amyloids.into_iter().flat_map(move |amyloid| {
                    genders.into_iter().map(move |gender| PromptSpec { stage, mmse, gender, amyloid })
                })
            })
        })
    }
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Early => "early",
            Stage::Later => "later",
        }
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a tau image with {} stage, mmse {}", self.stage.as_str(), self.mmse)?;
        match self.amyloid {
            Some(Amyloid::Positive) => f.write_str(", amyloid positive")?,
            Some(Amyloid::Negative) => f.write_str(", amyloid negative")?,
            None => {}
        }
        match self.gender {
            Some(Gender::Male) => f.write_str(", male"),
            Some(Gender::Female) => f.write_str(", female"),
            None => Ok(()),
        }
    }
}

/// Canonical lower-case form; `parse(&format(s)) == Ok(s)`.
pub fn format(spec: &PromptSpec) -> String {
    alloc::format!("{spec}")
}

struct Token<'a> {
    text: &'a str,
    pos: usize,
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() || ch == ',' || ch == '.' {
            if let Some(s) = start.take() {
                out.push(Token { text: &text[s..i], pos: s });
            }
            if ch == ',' || ch == '.' {
                out.push(Token { text: &text[i..i + 1], pos: i });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token { text: &text[s..], pos: s });
    }
    out
}

struct Cursor<'a> {
    tokens: Vec<Token<'a>>,
    at: usize,
    end: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&Token<'a>> {
        self.tokens.get(self.at)
    }

    fn pos(&self) -> usize {
        self.peek().map_or(self.end, |t| t.pos)
    }

    fn fail<T>(&self, message: &str) -> Result<T> {
        let found = self.peek().map_or("end of input", |t| t.text);
        Err(Error::MalformedPrompt {
            position: self.pos(),
            message: alloc::format!("{message}, found '{found}'"),
        })
    }

    fn eat(&mut self, word: &str) -> bool {
        match self.peek() {
            Some(t) if t.text.eq_ignore_ascii_case(word) => {
                self.at += 1;
                true
            }
            _ => false,
        }
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        if self.eat(word) {
            Ok(())
        } else {
            self.fail(&alloc::format!("expected '{word}'"))
        }
    }

    fn one_of<T: Copy>(&mut self, choices: &[(&str, T)], what: &str) -> Result<T> {
        for (word, v) in choices {
            if self.eat(word) {
                return Ok(*v);
            }
        }
        self.fail(&alloc::format!("expected {what}"))
    }
}

pub fn parse(text: &str) -> Result<PromptSpec> {
    let mut cur = Cursor { tokens: tokenize(text), at: 0, end: text.len() };
    cur.eat("generate");
    for w in ["a", "tau", "image", "with"] {
        cur.expect(w)?;
    }
    cur.eat("a");
    let stage = cur.one_of(&[("early", Stage::Early), ("later", Stage::Later)], "'early' or 'later'")?;
    cur.expect("stage")?;
    cur.expect(",")?;
    cur.expect("mmse")?;
    let score_pos = cur.pos();
    let mmse = match cur.peek() {
        Some(t) if !t.text.is_empty() && t.text.len() <= 2 && t.text.bytes().all(|b| b.is_ascii_digit()) => {
            let v: u8 = t.text.parse().unwrap_or(u8::MAX);
            if v > MMSE_MAX {
                return Err(Error::MalformedPrompt {
                    position: score_pos,
                    message: alloc::format!("MMSE {v} outside 0..=30"),
                });
            }
            cur.at += 1;
            v
        }
        _ => return cur.fail("expected an MMSE score 0..=30"),
    };
    let mut spec = PromptSpec { stage, mmse, gender: None, amyloid: None };
    let genders = [("male", Gender::Male), ("female", Gender::Female)];
    while cur.eat(",") {
        if spec.amyloid.is_none() && spec.gender.is_none() && cur.eat("amyloid") {
            let a = cur.one_of(
                &[("positive", Amyloid::Positive), ("negative", Amyloid::Negative)],
                "'positive' or 'negative'",
            )?;
            spec.amyloid = Some(a);
        } else if spec.gender.is_none() {
            spec.gender = Some(cur.one_of(&genders, "'amyloid', 'male' or 'female'")?);
        } else {
            return cur.fail("unexpected field after gender");
        }
    }
    cur.eat(".");
    if cur.peek().is_some() {
        return cur.fail("unexpected trailing text");
    }
    Ok(spec)
}

/// Fixed numeric carrier of a text condition.
///
/// Slots: `0` impairment `(30 - mmse) / 30`, `1` stage (later = 1), `2..4`
/// amyloid one-hot (positive, negative), `4..6` gender one-hot (male, female),
/// `6` packed presence flags `(2·amyloid + gender) / 3`, `7` non-null marker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub values: [f32; COND_DIM],
    pub null_flag: bool,
}

pub fn embed(spec: &PromptSpec) -> ConditionVector {
    let mut v = [0.0f32; COND_DIM];
    v[0] = (MMSE_MAX - spec.mmse.min(MMSE_MAX)) as f32 / MMSE_MAX as f32;
    v[1] = match spec.stage {
        Stage::Early => 0.0,
        Stage::Later => 1.0,
    };
    match spec.amyloid {
        Some(Amyloid::Positive) => v[2] = 1.0,
        Some(Amyloid::Negative) => v[3] = 1.0,
        None => {}
    }
    match spec.gender {
        Some(Gender::Male) => v[4] = 1.0,
        Some(Gender::Female) => v[5] = 1.0,
        None => {}
    }
    let flags = 2 * spec.amyloid.is_some() as u8 + spec.gender.is_some() as u8;
    v[6] = flags as f32 / 3.0;
    v[7] = 1.0;
    ConditionVector { values: v, null_flag: false }
}

/// The dropped-out condition used for classifier-free guidance.
pub fn null_condition() -> ConditionVector {
    ConditionVector { values: [0.0; COND_DIM], null_flag: true }
}
