//! Word-level tokenizer with the relation-aware `[ENT]` / `[REL]` tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

pub type TokenId = u32;

pub const ENT: &str = "[ENT]";
pub const REL: &str = "[REL]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const AND: &str = "and";
pub const COMMA: &str = ",";

const SPECIALS: [&str; 7] = [ENT, REL, UNK, BOS, EOS, AND, COMMA];

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("token id {id} at position {position} is out of range")]
    IdOutOfRange { position: usize, id: TokenId },
    #[error("vocabulary line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
    #[error("vocabulary line {line}: empty or whitespace-bearing token")]
    BadToken { line: usize },
    #[error("vocabulary is missing special token {0}")]
    MissingSpecial(&'static str),
    #[error("categories tokenize entirely to [UNK]: {0:?}")]
    Untokenizable(Vec<String>),
    #[error("empty category name at index {0}")]
    EmptyCategory(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Ids of the reserved tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub ent: TokenId,
    pub rel: TokenId,
    pub unk: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub and: TokenId,
    pub comma: TokenId,
}

/// Ordered token list, line number = id.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: SpecialIds,
    max_token_len: usize,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = Vec::new();
        let mut index = HashMap::new();
        for (line, tok) in tokens.into_iter().enumerate() {
            let tok: String = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(TokenizerError::BadToken { line: line + 1 });
            }
            let tok = if SPECIALS.contains(&tok.as_str()) || is_bracketed(&tok) {
                tok
            } else {
                tok.to_lowercase()
            };
            if index.insert(tok.clone(), list.len() as TokenId).is_some() {
                return Err(TokenizerError::DuplicateToken {
                    line: line + 1,
                    token: tok,
                });
            }
            list.push(tok);
        }
        let get = |s: &'static str| {
            index
                .get(s)
                .copied()
                .ok_or(TokenizerError::MissingSpecial(s))
        };
        let specials = SpecialIds {
            ent: get(ENT)?,
            rel: get(REL)?,
            unk: get(UNK)?,
            bos: get(BOS)?,
            eos: get(EOS)?,
            and: get(AND)?,
            comma: get(COMMA)?,
        };
        let max_token_len = list.iter().map(String::len).max().unwrap_or(0);
        Ok(Self {
            tokens: list,
            index,
            specials,
            max_token_len,
        })
    }

    /// Loads `vocab.txt`: one token per line, line number (from 0) is the id.
    /// A trailing newline is allowed.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(text.lines())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// True for ids that may appear inside an entity or predicate name.
    pub fn is_content(&self, id: TokenId) -> bool {
        let s = self.specials;
        ![s.ent, s.rel, s.bos, s.eos, s.and, s.comma].contains(&id)
    }

    /// Lowercases, splits on whitespace, and maps each chunk to ids. A chunk
    /// missing from the vocabulary is segmented by greedy longest-prefix
    /// match (so `horse[ENT],` works); if that fails the chunk becomes one
    /// `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            self.tokenize_chunk(chunk, &mut out);
        }
        out
    }

    fn tokenize_chunk(&self, chunk: &str, out: &mut Vec<TokenId>) {
        if let Some(id) = self.lookup(chunk) {
            out.push(id);
            return;
        }
        let mut pieces = Vec::new();
        let mut rest = chunk;
        while !rest.is_empty() {
            let mut found = None;
            let mut end = rest.len().min(self.max_token_len);
            while end > 0 {
                if rest.is_char_boundary(end) {
                    if let Some(id) = self.lookup(&rest[..end]) {
                        found = Some((id, end));
                        break;
                    }
                }
                end -= 1;
            }
            match found {
                Some((id, len)) => {
                    pieces.push(id);
                    rest = &rest[len..];
                }
                None => {
                    out.push(self.specials.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    fn lookup(&self, piece: &str) -> Option<TokenId> {
        if is_bracketed(piece) {
            let upper = piece.to_uppercase();
            if let Some(id) = self.index.get(&upper) {
                return Some(*id);
            }
        }
        self.index.get(&piece.to_lowercase()).copied()
    }

    /// Space-joins the token strings.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut parts = Vec::with_capacity(ids.len());
        for (position, &id) in ids.iter().enumerate() {
            parts.push(
                self.token(id)
                    .ok_or(TokenizerError::IdOutOfRange { position, id })?,
            );
        }
        Ok(parts.join(" "))
    }

    /// Tokenizes every category name. Fails listing all categories that
    /// tokenize to nothing but `[UNK]`, since those could never be predicted.
    pub fn tokenize_category_set<S: AsRef<str>>(
        &self,
        names: &[S],
    ) -> Result<CategoryTokenTable, TokenizerError> {
        let mut sequences = Vec::with_capacity(names.len());
        let mut unknown = Vec::new();
        for (i, name) in names.iter().enumerate() {
            let name = name.as_ref();
            if name.trim().is_empty() {
                return Err(TokenizerError::EmptyCategory(i));
            }
            let ids = self.tokenize(name);
            if ids.iter().all(|&t| t == self.specials.unk) {
                unknown.push(name.to_string());
            }
            sequences.push(ids);
        }
        if !unknown.is_empty() {
            return Err(TokenizerError::Untokenizable(unknown));
        }
        Ok(CategoryTokenTable { sequences })
    }
}

fn is_bracketed(s: &str) -> bool {
    s.len() > 2 && s.starts_with('[') && s.ends_with(']')
}

/// Token id sequence per category, indexed by category id.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTokenTable {
    sequences: Vec<Vec<TokenId>>,
}

impl CategoryTokenTable {
    /// Builds a table directly from id sequences; every sequence must be
    /// non-empty.
    pub fn from_sequences(sequences: Vec<Vec<TokenId>>) -> Option<Self> {
        if sequences.iter().any(Vec::is_empty) {
            return None;
        }
        Some(Self { sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn get(&self, category: usize) -> &[TokenId] {
        &self.sequences[category]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[TokenId]> {
        self.sequences.iter().map(Vec::as_slice)
    }
}
