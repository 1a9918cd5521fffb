//! Artifacts on disk: data directories written by `gen-data` and run
//! directories written by `train`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lm4mt::data::corpus::corpus_file;
use lm4mt::data::{build_vocab, gen_synthetic_corpus, BpeModel, ParallelCorpus, Tokenizer, Vocabulary};
use lm4mt::decode::System;
use lm4mt::eval::LangIdModel;
use lm4mt::model::ModelConfig;
use lm4mt::train::{train_loop, PairData, RunDir, TrainData, TrainOutput, TrainPlan, MODEL_FILE};

use crate::config::{read_json, write_json, DataSpec, Direction};
use crate::{CliError, Result};

pub const DATA_SPEC_FILE: &str = "data.json";
pub const BPE_FILE: &str = "bpe.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LANGID_FILE: &str = "langid.json";

/// Writes corpora, BPE merges, vocabulary and a language identifier for
/// `spec` under `dir`; returns the file names written, sorted.
pub fn generate_data(spec: &DataSpec, seed: u64, dir: &Path) -> Result<Vec<String>> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(CliError::Config(problems.join("; ")));
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let corpora = gen_synthetic_corpus(&spec.synth, seed)?;
    let mut files = Vec::new();
    let mut train_lines: Vec<&str> = Vec::new();
    let mut by_lang: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (split, c) in &corpora {
        c.write(dir, split)?;
        for lang in [&c.src_lang, &c.tgt_lang] {
            let p = corpus_file(dir, split, &c.src_lang, &c.tgt_lang, lang);
            files.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
        if split != "test" {
            by_lang.entry(c.src_lang.clone()).or_default().extend(c.src.iter().cloned());
            by_lang.entry(c.tgt_lang.clone()).or_default().extend(c.tgt.iter().cloned());
        }
        if split == "train" {
            train_lines.extend(c.src.iter().map(String::as_str));
            train_lines.extend(c.tgt.iter().map(String::as_str));
        }
    }
    let bpe = BpeModel::train(&train_lines, spec.bpe_merges)?;
    bpe.save(&dir.join(BPE_FILE))?;
    let vocab = build_vocab(&spec.languages(), &bpe, &train_lines)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let langid = LangIdModel::train(&by_lang.into_iter().collect::<Vec<_>>(), spec.langid_alpha)?;
    let path = dir.join(LANGID_FILE);
    fs::write(&path, langid.to_json()?).map_err(|e| CliError::io(&path, e))?;
    write_json(&dir.join(DATA_SPEC_FILE), spec)?;
    files.extend([BPE_FILE, VOCAB_FILE, LANGID_FILE, DATA_SPEC_FILE].map(String::from));
    files.sort();
    Ok(files)
}

pub fn load_tokenizer(dir: &Path) -> Result<Tokenizer> {
    Ok(Tokenizer {
        bpe: BpeModel::load(&dir.join(BPE_FILE))?,
        vocab: Vocabulary::load(&dir.join(VOCAB_FILE))?,
    })
}

/// A directory written by [`generate_data`].
#[derive(Clone, Debug)]
pub struct DataDir {
    pub path: PathBuf,
    pub spec: DataSpec,
    pub tokenizer: Tokenizer,
}

impl DataDir {
    pub fn open(path: &Path) -> Result<Self> {
        let spec_path = path.join(DATA_SPEC_FILE);
        if !spec_path.exists() {
            return Err(CliError::Config(format!("{} is not a data directory (no {DATA_SPEC_FILE})", path.display())));
        }
        Ok(Self {
            path: path.to_path_buf(),
            spec: read_json(&spec_path)?,
            tokenizer: load_tokenizer(path)?,
        })
    }

    pub fn langid(&self) -> Result<LangIdModel> {
        load_langid(&self.path.join(LANGID_FILE))
    }

    pub fn has(&self, split: &str, d: &Direction) -> bool {
        corpus_file(&self.path, split, &d.src, &d.tgt, &d.src).exists() || corpus_file(&self.path, split, &d.tgt, &d.src, &d.tgt).exists()
    }

    pub fn corpus(&self, split: &str, d: &Direction) -> Result<ParallelCorpus> {
        if !self.has(split, d) {
            return Err(CliError::Config(format!("no {split} data for {d} in {}", self.path.display())));
        }
        Ok(ParallelCorpus::read_either(&self.path, split, &d.src, &d.tgt)?)
    }

    /// Problems with `directions` for this data, all at once.
    pub fn direction_problems(&self, directions: &[Direction]) -> Vec<String> {
        let mut p = Vec::new();
        if directions.is_empty() {
            p.push("no training directions".to_string());
        }
        for d in directions {
            for l in [&d.src, &d.tgt] {
                if self.tokenizer.vocab.tag(l).is_err() {
                    p.push(format!("direction {d}: language {l} has no tag in the vocabulary"));
                }
            }
            if !self.has("train", d) {
                p.push(format!("direction {d}: no training corpus"));
            }
        }
        p
    }

    /// Encoded training (and, where present, validation) data per direction.
    pub fn train_data(&self, directions: &[Direction]) -> Result<TrainData> {
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for d in directions {
            train.push(PairData::encode(&self.corpus("train", d)?, &self.tokenizer, 1.0));
            if self.has("valid", d) {
                valid.push(PairData::encode(&self.corpus("valid", d)?, &self.tokenizer, 1.0));
            }
        }
        Ok(TrainData {
            vocab: self.tokenizer.vocab.clone(),
            train,
            valid,
        })
    }
}

pub fn load_langid(path: &Path) -> Result<LangIdModel> {
    let path = if path.is_dir() { path.join(LANGID_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(LangIdModel::from_json(&text)?)
}

/// Every problem with training `model` on `directions` of `data`, as one
/// config error.
pub fn check_training(data: &DataDir, model: &ModelConfig, plan: &TrainPlan, directions: &[Direction]) -> Result<()> {
    let mut problems = data.direction_problems(directions);
    let model = ModelConfig {
        vocab_size: data.tokenizer.vocab.len(),
        ..model.clone()
    };
    problems.extend(model.problems());
    problems.extend(plan.problems());
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(problems.join("; ")))
    }
}

/// Trains `model` (its vocabulary size taken from the data) on `directions`
/// into `out`, which afterwards also holds the tokenizer files.
pub fn train_system(data: &DataDir, model: &ModelConfig, plan: &TrainPlan, directions: &[Direction], out: &Path, resume: bool) -> Result<TrainOutput> {
    check_training(data, model, plan, directions)?;
    let model = ModelConfig {
        vocab_size: data.tokenizer.vocab.len(),
        ..model.clone()
    };
    let td = data.train_data(directions)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    for f in [BPE_FILE, VOCAB_FILE] {
        let (from, to) = (data.path.join(f), out.join(f));
        fs::copy(&from, &to).map_err(|e| CliError::io(&from, e))?;
    }
    let run = RunDir {
        path: Some(out.to_path_buf()),
        resume,
    };
    Ok(train_loop(&model, plan, &td, &run)?)
}

/// A trained system from a run directory, or from a model file whose
/// directory holds the tokenizer files.
pub fn load_system(path: &Path) -> Result<System> {
    if !path.exists() {
        return Err(CliError::Config(format!("no trained system at {}", path.display())));
    }
    let (dir, model) = if path.is_dir() {
        (path.to_path_buf(), path.join(MODEL_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    Ok(System::load(&model, load_tokenizer(&dir)?)?)
}
