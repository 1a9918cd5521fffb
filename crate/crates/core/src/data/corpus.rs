use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Line-aligned sentence pairs for one language pair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

/// `<split>.<src>-<tgt>.<lang>`
pub fn corpus_file(dir: &Path, split: &str, src_lang: &str, tgt_lang: &str, lang: &str) -> PathBuf {
    dir.join(format!("{split}.{src_lang}-{tgt_lang}.{lang}"))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl ParallelCorpus {
    pub fn new(src_lang: &str, tgt_lang: &str) -> Self {
        Self {
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, src: String, tgt: String) {
        self.src.push(src);
        self.tgt.push(tgt);
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// The same pairs read in the opposite direction.
    pub fn reversed(&self) -> Self {
        Self {
            src_lang: self.tgt_lang.clone(),
            tgt_lang: self.src_lang.clone(),
            src: self.tgt.clone(),
            tgt: self.src.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.src.len() != self.tgt.len() {
            return Err(Error::config(format!(
                "{}-{} corpus has {} source but {} target lines",
                self.src_lang,
                self.tgt_lang,
                self.src.len(),
                self.tgt.len()
            )));
        }
        for (i, (s, t)) in self.src.iter().zip(&self.tgt).enumerate() {
            if s.split_whitespace().next().is_none() || t.split_whitespace().next().is_none() {
                return Err(Error::config(format!(
                    "{}-{} corpus line {} is empty",
                    self.src_lang,
                    self.tgt_lang,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path, split: &str) -> Result<()> {
        write_lines(&corpus_file(dir, split, &self.src_lang, &self.tgt_lang, &self.src_lang), &self.src)?;
        write_lines(&corpus_file(dir, split, &self.src_lang, &self.tgt_lang, &self.tgt_lang), &self.tgt)
    }

    pub fn read(dir: &Path, split: &str, src_lang: &str, tgt_lang: &str) -> Result<Self> {
        let c = Self {
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
            src: read_lines(&corpus_file(dir, split, src_lang, tgt_lang, src_lang))?,
            tgt: read_lines(&corpus_file(dir, split, src_lang, tgt_lang, tgt_lang))?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Reads `<split>.<a>-<b>` in either file orientation.
    pub fn read_either(dir: &Path, split: &str, src_lang: &str, tgt_lang: &str) -> Result<Self> {
        if corpus_file(dir, split, src_lang, tgt_lang, src_lang).exists() {
            Self::read(dir, split, src_lang, tgt_lang)
        } else {
            Ok(Self::read(dir, split, tgt_lang, src_lang)?.reversed())
        }
    }
}
