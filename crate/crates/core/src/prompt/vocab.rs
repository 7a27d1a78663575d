use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SCENE_SLOT: u32 = 3;
pub const OBJ_SLOT: u32 = 4;
pub const UNK: u32 = 5;

const SPECIALS: [(&str, &str); 6] = [
    ("pad", "<pad>"),
    ("bos", "<bos>"),
    ("eos", "<eos>"),
    ("scene_slot", "<scene>"),
    ("obj_slot", "<obj>"),
    ("unk", "<unk>"),
];

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"-?\d+(?:\.\d+)?|[A-Za-z_][A-Za-z0-9_]*|[^\sA-Za-z0-9_]").expect("valid regex")
    })
}

/// Word-level split: signed decimals, identifiers (`obj_3`), and single
/// punctuation marks each form one token.
pub fn split_words(text: &str) -> Vec<&str> {
    token_regex().find_iter(text).map(|m| m.as_str()).collect()
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "," | "." | "?" | "!" | ":" | ";" | ")" | "]")
}

fn attaches_right(tok: &str) -> bool {
    matches!(tok, "(" | "[")
}

/// Joins word tokens back into text with conventional punctuation spacing.
pub fn join_words<'a>(tokens: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for tok in tokens {
        if !glue_next && !attaches_left(tok) {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = attaches_right(tok);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: BTreeMap<String, u32>,
    tokens: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Specials first, then corpus words by descending frequency (ties
    /// lexicographic), truncated so the whole vocabulary has `max_size` entries.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in corpus {
            for w in split_words(text.as_ref()) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|(_, t)| t.to_string()).collect();
        let room = max_size.saturating_sub(tokens.len());
        tokens.extend(ranked.into_iter().take(room).map(|(w, _)| w.to_string()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Text of the given ids; padding, BOS and EOS are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        join_words(
            ids.iter()
                .filter(|&&id| !matches!(id, PAD | BOS | EOS))
                .map(|&id| self.token(id)),
        )
    }

    pub fn to_json(&self) -> String {
        let specials = SPECIALS
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.to_string(), i as u32))
            .collect();
        let tokens = self
            .tokens
            .iter()
            .enumerate()
            .skip(SPECIALS.len())
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        serde_json::to_string_pretty(&VocabFile { specials, tokens }).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        for (i, (name, _)) in SPECIALS.iter().enumerate() {
            if file.specials.get(*name) != Some(&(i as u32)) {
                return Err(Error::Config(format!("vocabulary special '{name}' must have id {i}")));
            }
        }
        let n = SPECIALS.len() + file.tokens.len();
        let mut tokens: Vec<Option<String>> = vec![None; n];
        for (i, (_, t)) in SPECIALS.iter().enumerate() {
            tokens[i] = Some(t.to_string());
        }
        for (t, &id) in &file.tokens {
            let slot = tokens
                .get_mut(id as usize)
                .filter(|s| s.is_none())
                .ok_or_else(|| Error::Config(format!("vocabulary id {id} out of range or duplicated")))?;
            *slot = Some(t.clone());
        }
        let tokens = tokens
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Config("vocabulary ids are not dense".into()))?;
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
