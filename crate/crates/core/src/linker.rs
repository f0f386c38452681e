//! Exact-match gazetteer entity linking over case-preserving tokens.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

const SPLIT_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '(', ')'];

/// Whitespace split with leading/trailing punctuation peeled into separate
/// tokens. Internal punctuation (`Madrid's`) stays attached; case is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let lead = chars.iter().take_while(|c| SPLIT_PUNCT.contains(c)).count();
        if lead == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| SPLIT_PUNCT.contains(c)).count();
        out.extend(chars[..lead].iter().map(|c| c.to_string()));
        out.push(chars[lead..chars.len() - trail].iter().collect());
        out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub entity_id: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinkedDocument {
    pub tokens: Vec<String>,
    pub spans: Vec<EntitySpan>,
}

impl LinkedDocument {
    pub fn link(tokens: Vec<String>, gazetteer: &Gazetteer) -> Self {
        let spans = gazetteer.link(&tokens);
        LinkedDocument { tokens, spans }
    }
}

/// Surface form (token sequence joined by single spaces) → entity id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gazetteer {
    entries: HashMap<String, usize>,
    max_surface_len: usize,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a surface form; it is tokenized first so matching ignores the
    /// original whitespace.
    pub fn insert(&mut self, surface: &str, entity_id: usize) -> Result<()> {
        let tokens = tokenize(surface);
        if tokens.is_empty() {
            return Err(Error::Invalid("empty gazetteer surface form".into()));
        }
        let key = tokens.join(" ");
        if self.entries.contains_key(&key) {
            return Err(Error::Invalid(format!("duplicate surface form {key:?}")));
        }
        self.max_surface_len = self.max_surface_len.max(tokens.len());
        self.entries.insert(key, entity_id);
        Ok(())
    }

    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, usize)>) -> Result<Self> {
        let mut g = Gazetteer::new();
        for (surface, id) in entries {
            g.insert(surface, id)?;
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_surface_len(&self) -> usize {
        self.max_surface_len
    }

    pub fn get(&self, surface: &str) -> Option<usize> {
        self.entries.get(surface).copied()
    }

    pub fn max_entity_id(&self) -> Option<usize> {
        self.entries.values().copied().max()
    }

    /// Sorted `(surface, id)` pairs.
    pub fn entries(&self) -> Vec<(&str, usize)> {
        let mut v: Vec<(&str, usize)> = self.entries.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        v.sort();
        v
    }

    /// Every id must fall below `entity_count`.
    pub fn check_ids(&self, entity_count: usize) -> Result<()> {
        match self.entries.iter().find(|(_, &id)| id >= entity_count) {
            Some((k, id)) => Err(Error::Invalid(format!(
                "gazetteer entry {k:?} -> {id} outside {entity_count} entities"
            ))),
            None => Ok(()),
        }
    }

    /// Greedy left-to-right longest match. Spans come out sorted and disjoint.
    pub fn link<T: AsRef<str>>(&self, tokens: &[T]) -> Vec<EntitySpan> {
        let mut spans = Vec::new();
        let mut i = 0;
        let mut key = String::new();
        while i < tokens.len() {
            let longest = self.max_surface_len.min(tokens.len() - i);
            let mut hit = None;
            for len in (1..=longest).rev() {
                key.clear();
                for (k, t) in tokens[i..i + len].iter().enumerate() {
                    if k > 0 {
                        key.push(' ');
                    }
                    key.push_str(t.as_ref());
                }
                if let Some(&id) = self.entries.get(&key) {
                    hit = Some((len, id));
                    break;
                }
            }
            match hit {
                Some((len, entity_id)) => {
                    spans.push(EntitySpan {
                        start: i,
                        end: i + len,
                        entity_id,
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        spans
    }

    /// Decoder-side linking: nothing until `min_tokens` tokens exist.
    pub fn link_prefix<T: AsRef<str>>(&self, generated: &[T], min_tokens: usize) -> Vec<EntitySpan> {
        if generated.len() < min_tokens {
            Vec::new()
        } else {
            self.link(generated)
        }
    }

    /// TSV `surface form<TAB>entity_id`; blank lines and `#` comments skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut g = Gazetteer::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (surface, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::parse(origin, n + 1, "expected surface<TAB>id"))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, n + 1, format!("bad entity id {id:?}")))?;
            g.insert(surface, id)
                .map_err(|e| Error::parse(origin, n + 1, e.to_string()))?;
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_tsv(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}\t{v}\n"))
            .collect()
    }
}
