use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;
pub const RESERVED_TOKENS: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token string used for a language tag, e.g. `<de>`.
pub fn tag_token(lang: &str) -> String {
    format!("<{lang}>")
}

fn is_bracketed(tok: &str) -> bool {
    tok.len() > 2 && tok.starts_with('<') && tok.ends_with('>')
}

/// Dense token↔id map: `<pad>`, `</s>`, `<unk>`, one `<lang>` tag per language
/// in sorted order, then subword tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    langs: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from languages and subword tokens. Duplicate or
    /// reserved-looking subwords are rejected.
    pub fn new<S: AsRef<str>>(langs: &[S], subwords: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut langs: Vec<String> = langs.iter().map(|l| l.as_ref().to_string()).collect();
        langs.sort();
        langs.dedup();
        let mut tokens: Vec<String> = vec![PAD_TOKEN.into(), EOS_TOKEN.into(), UNK_TOKEN.into()];
        tokens.extend(langs.iter().map(|l| tag_token(l)));
        for s in subwords {
            if is_bracketed(&s) {
                return Err(Error::config(format!("subword {s:?} collides with the reserved tag syntax")));
            }
            tokens.push(s);
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, ids, langs })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn langs(&self) -> &[String] {
        &self.langs
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    /// Id of `token`, falling back to `<unk>`.
    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tag(&self, lang: &str) -> Result<TokenId> {
        self.id(&tag_token(lang))
            .filter(|_| self.langs.iter().any(|l| l == lang))
            .ok_or_else(|| Error::config(format!("unknown language {lang:?}")))
    }

    pub fn is_tag(&self, id: TokenId) -> bool {
        (RESERVED_TOKENS..RESERVED_TOKENS + self.langs.len()).contains(&id)
    }

    /// Reserved control tokens and language tags: never emitted as output text.
    pub fn is_special(&self, id: TokenId) -> bool {
        id < RESERVED_TOKENS + self.langs.len()
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    /// Token strings for `ids`, dropping specials.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !self.is_special(i))
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let reserved = [PAD_TOKEN, EOS_TOKEN, UNK_TOKEN];
        if lines.len() < RESERVED_TOKENS || lines[..RESERVED_TOKENS] != reserved {
            return Err(Error::config("vocabulary must start with <pad>, </s>, <unk>"));
        }
        let rest = &lines[RESERVED_TOKENS..];
        let n_tags = rest.iter().take_while(|t| is_bracketed(t)).count();
        let langs: Vec<&str> = rest[..n_tags].iter().map(|t| &t[1..t.len() - 1]).collect();
        let vocab = Self::new(&langs, rest[n_tags..].iter().map(|s| s.to_string()))?;
        if vocab.tokens != lines {
            return Err(Error::config("vocabulary tags are not in sorted order"));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
