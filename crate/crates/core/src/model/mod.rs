//! Transformer blocks and the two architectures compared here: a causal
//! decoder-only translation LM and an encoder-decoder baseline built from the
//! same pre-norm/GELU blocks.

pub mod checkpoint;
mod layers;
#[cfg(test)]
mod tests;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::RESERVED_TOKENS;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

pub use layers::{multi_head_attention, AttentionParams, EncoderMemory, LayerCache};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    DecoderOnly,
    EncoderDecoder,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::DecoderOnly => "decoder-only",
            Family::EncoderDecoder => "encoder-decoder",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    /// Depth of the decoder-only stack.
    pub num_layers: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::DecoderOnly,
            num_layers: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_model: 128,
            n_heads: 4,
            d_ffn: 512,
            dropout: 0.1,
            vocab_size: 64,
            max_positions: 64,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    /// Collects every problem with the config rather than stopping at the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d_model == 0 {
            out.push("d_model must be positive".to_string());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads.max(1) != 0 {
            out.push(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ffn == 0 {
            out.push("d_ffn must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("dropout {} is outside [0, 1)", self.dropout));
        }
        if self.vocab_size < RESERVED_TOKENS {
            out.push(format!(
                "vocab_size {} is smaller than the {RESERVED_TOKENS} reserved tokens",
                self.vocab_size
            ));
        }
        if self.max_positions == 0 {
            out.push("max_positions must be positive".to_string());
        }
        match self.family {
            Family::DecoderOnly if self.num_layers == 0 => out.push("num_layers must be positive".to_string()),
            Family::EncoderDecoder if self.enc_layers == 0 || self.dec_layers == 0 => {
                out.push("enc_layers and dec_layers must be positive".to_string())
            }
            _ => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Number of decoder blocks (the only stack for the decoder-only family).
    pub fn decoder_depth(&self) -> usize {
        match self.family {
            Family::DecoderOnly => self.num_layers,
            Family::EncoderDecoder => self.dec_layers,
        }
    }
}

/// What a parameter is, which fixes its initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    /// Positions start at the magnitude of the √d-scaled token embeddings, so
    /// order information is not drowned out early in training.
    Position,
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LnIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockIdx {
    pub ln_attn: LnIdx,
    pub attn: AttnIdx,
    pub cross: Option<(LnIdx, AttnIdx)>,
    pub ln_ffn: LnIdx,
    pub ffn: FfnIdx,
}

/// Positions of every parameter in the flat parameter list.
#[derive(Clone, Debug)]
pub(crate) struct ParamIndex {
    pub tok: usize,
    pub pos: usize,
    pub out: Option<usize>,
    pub enc: Vec<BlockIdx>,
    pub enc_ln: Option<LnIdx>,
    pub dec: Vec<BlockIdx>,
    pub ln_f: LnIdx,
}

struct Spec {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Spec {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        LnIdx {
            g: self.add(format!("{prefix}.g"), vec![d], Init::Ones),
            b: self.add(format!("{prefix}.b"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let mut pair = |w: &str| {
            (
                self.add(format!("{prefix}.w{w}"), vec![d, d], Init::Normal),
                self.add(format!("{prefix}.b{w}"), vec![d], Init::Zeros),
            )
        };
        let (wq, bq) = pair("q");
        let (wk, bk) = pair("k");
        let (wv, bv) = pair("v");
        let (wo, bo) = pair("o");
        AttnIdx {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig, cross: bool) -> BlockIdx {
        let d = cfg.d_model;
        let ln_attn = self.ln(&format!("{prefix}.ln_attn"), d);
        let attn = self.attn(&format!("{prefix}.attn"), d);
        let cross = cross.then(|| (self.ln(&format!("{prefix}.ln_cross"), d), self.attn(&format!("{prefix}.cross"), d)));
        let ln_ffn = self.ln(&format!("{prefix}.ln_ffn"), d);
        let ffn = FfnIdx {
            w1: self.add(format!("{prefix}.ffn.w1"), vec![d, cfg.d_ffn], Init::Normal),
            b1: self.add(format!("{prefix}.ffn.b1"), vec![cfg.d_ffn], Init::Zeros),
            w2: self.add(format!("{prefix}.ffn.w2"), vec![cfg.d_ffn, d], Init::Normal),
            b2: self.add(format!("{prefix}.ffn.b2"), vec![d], Init::Zeros),
        };
        BlockIdx {
            ln_attn,
            attn,
            cross,
            ln_ffn,
            ffn,
        }
    }

    fn build(cfg: &ModelConfig) -> (Spec, ParamIndex) {
        let mut s = Spec {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        };
        let d = cfg.d_model;
        let tok = s.add("tok_emb".into(), vec![cfg.vocab_size, d], Init::Normal);
        let pos = s.add("pos_emb".into(), vec![cfg.max_positions, d], Init::Position);
        let (enc, enc_ln, dec) = match cfg.family {
            Family::DecoderOnly => {
                let dec = (0..cfg.num_layers).map(|i| s.block(&format!("dec.{i}"), cfg, false)).collect();
                (Vec::new(), None, dec)
            }
            Family::EncoderDecoder => {
                let enc = (0..cfg.enc_layers).map(|i| s.block(&format!("enc.{i}"), cfg, false)).collect();
                let enc_ln = Some(s.ln("enc.ln_f", d));
                let dec = (0..cfg.dec_layers).map(|i| s.block(&format!("dec.{i}"), cfg, true)).collect();
                (enc, enc_ln, dec)
            }
        };
        let ln_f = s.ln("ln_f", d);
        let out = (!cfg.tie_embeddings).then(|| s.add("out_emb".into(), vec![cfg.vocab_size, d], Init::Normal));
        let index = ParamIndex {
            tok,
            pos,
            out,
            enc,
            enc_ln,
            dec,
            ln_f,
        };
        (s, index)
    }
}

/// Exact number of trainable scalars for `cfg`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (spec, _) = Spec::build(cfg);
    spec.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
}

/// Decoder-only depth whose parameter count is closest to `encdec`'s at the
/// same width: the single stack is deepened until it carries the encoder's
/// and the cross-attention sublayers' share of the parameters.
pub fn matched_decoder_only(encdec: &ModelConfig) -> ModelConfig {
    let target = count_params(encdec) as f64;
    let mut best = ModelConfig {
        family: Family::DecoderOnly,
        num_layers: 1,
        ..encdec.clone()
    };
    let mut best_gap = f64::INFINITY;
    for layers in 1..=4 * (encdec.enc_layers + encdec.dec_layers).max(1) {
        let cand = ModelConfig {
            num_layers: layers,
            ..best.clone()
        };
        let gap = (count_params(&cand) as f64 - target).abs();
        if gap < best_gap {
            best_gap = gap;
            best = cand;
        }
    }
    best
}

/// Encoder-decoder baseline with roughly the parameter budget of a decoder-only
/// config at the same width: searches encoder/decoder depths and FFN width.
pub fn matched_encoder_decoder(lm: &ModelConfig) -> ModelConfig {
    let target = count_params(lm) as f64;
    let base = ModelConfig {
        family: Family::EncoderDecoder,
        ..lm.clone()
    };
    let mut best = base.clone();
    let mut best_gap = f64::INFINITY;
    let max_depth = lm.num_layers.max(1);
    for enc in 1..=max_depth {
        for dec in 1..=max_depth {
            for ffn_step in 1..=(4 * lm.d_ffn / lm.d_model.max(1)).max(1) {
                let cand = ModelConfig {
                    enc_layers: enc,
                    dec_layers: dec,
                    d_ffn: ffn_step * lm.d_model / 2,
                    ..base.clone()
                };
                let gap = (count_params(&cand) as f64 - target).abs();
                // strict improvement only, so ties keep the shallower candidate
                if gap + 1e-9 < best_gap {
                    best_gap = gap;
                    best = cand;
                }
            }
        }
    }
    best
}

/// Parameters of one model, stored as a flat named list.
#[derive(Clone, Debug)]
pub struct Model<T: Float = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    pub(crate) index: ParamIndex,
}

impl<T: Float> Model<T> {
    /// Fresh model with N(0, 0.02) weights and embeddings, zero biases and unit
    /// layer-norm gains, drawn in parameter order from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (spec, index) = Spec::build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = spec
            .shapes
            .iter()
            .zip(&spec.inits)
            .map(|(shape, init)| {
                let n = shape.iter().product();
                let data: Vec<T> = match init {
                    Init::Normal => (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect(),
                    Init::Position => {
                        let scale = (config.d_model as f64).sqrt();
                        (0..n).map(|_| T::lit(scale * normal.sample(&mut rng))).collect()
                    }
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                };
                Tensor::new(shape.clone(), data).expect("shape from spec")
            })
            .collect();
        Ok(Self {
            config,
            names: spec.names,
            params,
            index,
        })
    }

    /// Builds a model from named arrays, which must match the config's layout
    /// exactly (same names, order and shapes).
    pub fn from_arrays(config: ModelConfig, arrays: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (spec, index) = Spec::build(&config);
        if arrays.len() != spec.names.len() {
            return Err(Error::contract(format!(
                "expected {} parameter arrays, found {}",
                spec.names.len(),
                arrays.len()
            )));
        }
        let mut params = Vec::with_capacity(arrays.len());
        for ((name, t), (want, shape)) in arrays.into_iter().zip(spec.names.iter().zip(&spec.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter {name} {:?} does not match expected {want} {shape:?}",
                    t.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self {
            config,
            names: spec.names,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Marks every parameter as trainable (or not) for the next [`Model::bind`].
    pub fn set_trainable(&mut self, on: bool) {
        for p in &mut self.params {
            p.set_requires_grad(on);
        }
    }

    /// Records every parameter as a tape leaf; the returned vars are indexed
    /// like [`Model::params`].
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p)).collect()
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}
