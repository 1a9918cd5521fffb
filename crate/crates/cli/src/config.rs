//! JSON config files. Every struct fills missing keys with defaults and
//! rejects unknown ones; the resolved form (defaults included) is what gets
//! hashed and written to manifests.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use lm4mt::data::SynthSpec;
use lm4mt::decode::DecodeConfig;
use lm4mt::model::{matched_encoder_decoder, Family, ModelConfig};
use lm4mt::train::{LossMode, TrainPlan};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Direction {
    pub src: String,
    pub tgt: String,
}

impl Direction {
    pub fn new(src: &str, tgt: &str) -> Self {
        Self {
            src: src.to_string(),
            tgt: tgt.to_string(),
        }
    }

    pub fn reversed(&self) -> Self {
        Self::new(&self.tgt, &self.src)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once('-') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains('-') => Ok(Self::new(a, b)),
            _ => Err(format!("direction {s:?} is not of the form src-tgt")),
        }
    }
}

/// What `gen-data` produces: synthetic corpora plus the subword model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub synth: SynthSpec,
    pub bpe_merges: i64,
    /// Use every pair in both orientations (training and test).
    pub bidirectional: bool,
    /// Additive smoothing of the language identifier.
    pub langid_alpha: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            bpe_merges: 200,
            bidirectional: false,
            langid_alpha: 0.5,
        }
    }
}

impl DataSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.synth.problems();
        if self.bpe_merges < 0 {
            p.push(format!("bpe_merges must be nonnegative, got {}", self.bpe_merges));
        }
        if !(self.langid_alpha > 0.0 && self.langid_alpha.is_finite()) {
            p.push(format!("langid_alpha must be positive, got {}", self.langid_alpha));
        }
        if self.synth.pairs.iter().all(|pair| pair.train == 0) {
            p.push("no pair has training data".to_string());
        }
        p
    }

    fn directions(&self, size: impl Fn(&lm4mt::data::synth::PairSpec) -> usize) -> Vec<Direction> {
        let mut out = Vec::new();
        for pair in self.synth.pairs.iter().filter(|p| size(p) > 0) {
            let d = Direction::new(&pair.src, &pair.tgt);
            if self.bidirectional {
                out.push(d.reversed());
            }
            out.push(d);
        }
        let mut seen = BTreeSet::new();
        out.retain(|d| seen.insert(d.clone()));
        out.sort();
        out
    }

    pub fn train_directions(&self) -> Vec<Direction> {
        self.directions(|p| p.train)
    }

    pub fn test_directions(&self) -> Vec<Direction> {
        self.directions(|p| p.test)
    }

    pub fn languages(&self) -> Vec<String> {
        self.synth.languages.iter().map(|l| l.name.clone()).collect()
    }
}

/// Input of `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Output directory of `gen-data`.
    pub data_dir: Option<PathBuf>,
    /// `vocab_size` is always taken from the data.
    pub model: ModelConfig,
    pub plan: TrainPlan,
    /// Defaults to every training direction of the data.
    pub directions: Option<Vec<Direction>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            model: ModelConfig {
                dropout: 0.1,
                ..ModelConfig::default()
            },
            plan: TrainPlan::default(),
            directions: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Standard,
    Pivot,
    Zeroshot,
    AblationTags,
    AblationLayers,
    AblationLoss,
    Robustness,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::Pivot => "pivot",
            Mode::Zeroshot => "zeroshot",
            Mode::AblationTags => "ablation-tags",
            Mode::AblationLayers => "ablation-layers",
            Mode::AblationLoss => "ablation-loss",
            Mode::Robustness => "robustness",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PivotSpec {
    pub src: String,
    pub pivot: String,
    pub tgt: String,
}

/// Input of `experiment`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub mode: Mode,
    pub data: DataSpec,
    /// Decoder-only system; also the width every other system is matched to.
    pub model: ModelConfig,
    /// Encoder-decoder baseline; defaults to the parameter-matched
    /// counterpart of `model`.
    pub baseline: Option<ModelConfig>,
    pub plan: TrainPlan,
    pub decode: DecodeConfig,
    pub seeds: Vec<u64>,
    /// Families compared in standard, pivot, zeroshot and robustness modes.
    pub families: Vec<Family>,
    /// Decoder-only depths for ablation-layers.
    pub layers: Vec<usize>,
    /// Decoder-only loss variants for ablation-loss and zeroshot; defaults to
    /// all three, or decay-ae+mt and mt for zeroshot.
    pub losses: Option<Vec<LossMode>>,
    /// Missing-word ratios for robustness.
    pub ratios: Vec<f64>,
    pub pivot: Option<PivotSpec>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".to_string(),
            mode: Mode::Standard,
            data: DataSpec::default(),
            model: ModelConfig::default(),
            baseline: None,
            plan: TrainPlan::default(),
            decode: DecodeConfig::default(),
            seeds: vec![1, 2, 3],
            families: vec![Family::DecoderOnly, Family::EncoderDecoder],
            layers: vec![1, 2, 4],
            losses: None,
            ratios: lm4mt::eval::DEFAULT_MISSING_RATIOS.to_vec(),
            pivot: None,
        }
    }
}

impl ExperimentSpec {
    /// Fills in mode-dependent defaults so the manifest shows what ran.
    pub fn resolved(&self) -> Self {
        let mut s = self.clone();
        if s.baseline.is_none() {
            s.baseline = Some(matched_encoder_decoder(&ModelConfig {
                family: Family::DecoderOnly,
                ..s.model.clone()
            }));
        }
        if s.losses.is_none() {
            s.losses = Some(match s.mode {
                Mode::Zeroshot => vec![LossMode::DecayAeMt, LossMode::Mt],
                _ => vec![LossMode::Mt, LossMode::AeMt, LossMode::DecayAeMt],
            });
        }
        s
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.name.is_empty() || self.name.contains(['/', ',', '\n']) {
            p.push(format!("experiment name {:?} must be nonempty without '/', ',' or newlines", self.name));
        }
        p.extend(self.data.problems().into_iter().map(|e| format!("data: {e}")));
        if self.model.family != Family::DecoderOnly {
            p.push("model must be the decoder-only system; put the baseline under `baseline`".to_string());
        }
        // vocab_size comes from the data, so do not report it here
        let sized = |m: &ModelConfig| ModelConfig {
            vocab_size: m.vocab_size.max(lm4mt::data::RESERVED_TOKENS),
            ..m.clone()
        };
        p.extend(sized(&self.model).problems().into_iter().map(|e| format!("model: {e}")));
        if let Some(b) = &self.baseline {
            if b.family != Family::EncoderDecoder {
                p.push("baseline must be an encoder-decoder config".to_string());
            }
            p.extend(sized(b).problems().into_iter().map(|e| format!("baseline: {e}")));
        }
        p.extend(self.plan.problems().into_iter().map(|e| format!("plan: {e}")));
        p.extend(self.decode.problems().into_iter().map(|e| format!("decode: {e}")));
        if self.seeds.is_empty() {
            p.push("seeds must not be empty".to_string());
        }
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            p.push("seeds must be distinct".to_string());
        }
        let needs_families = matches!(self.mode, Mode::Standard | Mode::Pivot | Mode::Robustness);
        if needs_families && self.families.is_empty() {
            p.push(format!("mode {} needs at least one family", self.mode.as_str()));
        }
        let trained: BTreeSet<Direction> = self.data.train_directions().into_iter().collect();
        let tested = self.data.test_directions();
        if tested.is_empty() {
            p.push("no pair has test data".to_string());
        }
        match self.mode {
            Mode::AblationLayers => {
                if self.layers.is_empty() || self.layers.contains(&0) {
                    p.push("ablation-layers needs a nonempty list of positive depths".to_string());
                }
            }
            Mode::AblationLoss | Mode::Zeroshot => {
                if matches!(&self.losses, Some(l) if l.is_empty()) {
                    p.push("losses must not be empty".to_string());
                }
                if self.mode == Mode::Zeroshot && tested.iter().all(|d| trained.contains(d)) {
                    p.push("zeroshot needs a test direction that is absent from training".to_string());
                }
            }
            Mode::Robustness => {
                if self.ratios.is_empty() || self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
                    p.push("robustness needs missing-word ratios in [0, 1]".to_string());
                }
            }
            Mode::Pivot => match &self.pivot {
                None => p.push("pivot mode needs a `pivot` section (src, pivot, tgt)".to_string()),
                Some(pv) => {
                    let langs = self.data.languages();
                    for l in [&pv.src, &pv.pivot, &pv.tgt] {
                        if !langs.contains(l) {
                            p.push(format!("pivot language {l} is not defined in the data"));
                        }
                    }
                    let has = |split: fn(&lm4mt::data::synth::PairSpec) -> usize, a: &str, b: &str| {
                        self.data
                            .synth
                            .pairs
                            .iter()
                            .any(|x| split(x) > 0 && ((x.src == a && x.tgt == b) || (x.src == b && x.tgt == a)))
                    };
                    for (a, b) in [(&pv.src, &pv.pivot), (&pv.pivot, &pv.tgt), (&pv.src, &pv.tgt)] {
                        if !has(|x| x.train, a, b) {
                            p.push(format!("pivot mode needs training data for {a}-{b}"));
                        }
                    }
                    if !has(|x| x.test, &pv.src, &pv.tgt) {
                        p.push(format!("pivot mode needs test data for {}-{}", pv.src, pv.tgt));
                    }
                }
            },
            Mode::Standard | Mode::AblationTags => {}
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(p.join("; ")))
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(lm4mt::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical (compact, defaults filled) JSON form.
pub fn spec_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config types serialize"))
}
