use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::DataError;
use crate::ctc::{TokenId, BLANK};

pub const PAD: TokenId = 1;
pub const UNK: TokenId = 2;

const RESERVED: [&str; 3] = ["<blank>", "<pad>", "<unk>"];
const HEADER: &str = "# ctc-nmt vocabulary v1";

/// Splits lines into tokens and joins them back.
pub trait Tokenizer {
    fn split<'a>(&self, line: &'a str) -> Vec<&'a str>;
    fn join(&self, tokens: &[&str]) -> String;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Whitespace;

impl Tokenizer for Whitespace {
    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        line.split_whitespace().collect()
    }

    fn join(&self, tokens: &[&str]) -> String {
        tokens.join(" ")
    }
}

/// Token inventory. Ids 0, 1 and 2 are the blank, pad and unknown symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }

    /// Reserved symbols followed by `tokens` in order. Duplicates and
    /// reserved names are dropped.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        };
        for (i, t) in RESERVED.iter().enumerate() {
            v.index.insert(t.to_string(), i as TokenId);
        }
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len() as TokenId);
                v.tokens.push(t);
            }
        }
        v
    }

    /// Counts whitespace tokens and keeps the most frequent ones, ties
    /// broken lexicographically. `max_size` includes the reserved ids.
    pub fn from_lines<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        max_size: usize,
        min_freq: usize,
    ) -> Result<Self, DataError> {
        if max_size < RESERVED.len() + 1 {
            return Err(DataError::Config(format!(
                "vocabulary max_size {max_size} leaves no room beyond the {} reserved ids",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in Whitespace.split(line) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq.max(1) && !RESERVED.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    /// Total size, reserved ids included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn blank(&self) -> TokenId {
        BLANK
    }

    pub fn pad(&self) -> TokenId {
        PAD
    }

    pub fn unk(&self) -> TokenId {
        UNK
    }

    /// Whitespace split; unknown and reserved-looking tokens map to `<unk>`.
    pub fn tokenize(&self, line: &str) -> Vec<TokenId> {
        Whitespace
            .split(line)
            .into_iter()
            .map(|t| match self.id(t) {
                Some(id) if id as usize >= RESERVED.len() => id,
                _ => UNK,
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK as usize]))
            .collect();
        Whitespace.join(&toks)
    }

    /// SHA-256 over the token list, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(*b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER}\nblank = {BLANK}\npad = {PAD}\nunk = {UNK}\nsize = {}\n---\n",
            self.len()
        );
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_text()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Parses the [`to_text`](Self::to_text) format; `origin` names the
    /// source in errors.
    pub fn from_text(text: &str, origin: &Path) -> Result<Self, DataError> {
        Self::parse(text).map_err(|(line, message)| DataError::Format {
            path: origin.to_path_buf(),
            line,
            message,
        })
    }

    fn parse(text: &str) -> Result<Self, (usize, String)> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err((1, format!("expected header `{HEADER}`"))),
        }
        let mut declared = HashMap::new();
        for (no, line) in lines.by_ref() {
            if line == "---" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| (no, format!("expected `key = value`, got `{line}`")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| (no, format!("`{}` is not a number", v.trim())))?;
            declared.insert(k.trim().to_string(), (no, v));
        }
        for (key, want) in [("blank", BLANK), ("pad", PAD), ("unk", UNK)] {
            match declared.get(key) {
                Some(&(_, v)) if v == want as usize => {}
                Some(&(no, v)) => return Err((no, format!("{key} id must be {want}, found {v}"))),
                None => return Err((1, format!("missing reserved id `{key}`"))),
            }
        }
        let tokens: Vec<(usize, &str)> = lines.collect();
        for (i, name) in RESERVED.iter().enumerate() {
            match tokens.get(i) {
                Some(&(_, t)) if t == *name => {}
                Some(&(no, t)) => return Err((no, format!("expected reserved token {name}, found `{t}`"))),
                None => return Err((0, "token list is missing reserved entries".into())),
            }
        }
        let v = Self::from_tokens(tokens.iter().skip(RESERVED.len()).map(|&(_, t)| t));
        if v.len() != tokens.len() {
            return Err((0, "duplicate tokens in vocabulary".into()));
        }
        if let Some(&(no, size)) = declared.get("size") {
            if size != v.len() {
                return Err((no, format!("size {size} but {} tokens listed", v.len())));
            }
        }
        Ok(v)
    }
}

/// Builds a vocabulary from whitespace-tokenized text files.
pub fn build_vocab<P: AsRef<Path>>(files: &[P], max_size: usize, min_freq: usize) -> Result<Vocabulary, DataError> {
    let mut texts = Vec::with_capacity(files.len());
    for f in files {
        let f = f.as_ref();
        texts.push(fs::read_to_string(f).map_err(|e| DataError::io(f, e))?);
    }
    Vocabulary::from_lines(texts.iter().flat_map(|t| t.lines()), max_size, min_freq)
}
