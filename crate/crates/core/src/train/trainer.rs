//! The training loop: batching, loss assembly, optimization, validation,
//! checkpoints and resume.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::adam::{adam_step, clip_grad_norm, AdamConfig, OptimizerState};
use super::loss::{batch_loss, row_nll};
use super::schedule::{lr_at, LossMode, LrSchedule};
use crate::data::{
    build_encdec_example, build_example, decoder_input, derive_seed, BatchStream, ItemRef, ParallelCorpus, Part, Role,
    SequenceFormat, TokenId, Tokenizer, Vocabulary,
};
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, NamedArray};
use crate::model::{Family, Model, ModelConfig};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub total_steps: usize,
    /// Token budget per batch (`examples × longest example`).
    pub max_tokens: usize,
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    pub loss: LossMode,
    /// Flat fraction of `beta`.
    pub alpha: f64,
    /// Step at which the auto-encoding weight reaches 0.
    pub beta: f64,
    /// Overrides the model's dropout when set.
    pub dropout: Option<f64>,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub checkpoint_interval: usize,
    /// Validation cadence; defaults to the checkpoint cadence.
    pub valid_interval: Option<usize>,
    pub average_last_k: usize,
    /// Language tags in the decoder-only layout.
    pub tags: bool,
    /// Target tag on the baseline's source; by default on when training has
    /// more than one target language.
    pub multilingual: Option<bool>,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            max_tokens: 2048,
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::default(),
            loss: LossMode::DecayAeMt,
            alpha: 0.1,
            beta: 1000.0,
            dropout: None,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            checkpoint_interval: 250,
            valid_interval: None,
            average_last_k: 5,
            tags: true,
            multilingual: None,
            seed: 1,
        }
    }
}

impl TrainPlan {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.total_steps == 0 {
            p.push("total_steps must be positive".to_string());
        }
        if self.max_tokens == 0 {
            p.push("max_tokens must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            p.push(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            p.push(format!("beta must be a nonnegative step count, got {}", self.beta));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            p.push("adam betas must lie in [0, 1)".to_string());
        }
        if !(a.eps > 0.0) {
            p.push("adam eps must be positive".to_string());
        }
        match self.lr_schedule {
            LrSchedule::InverseSqrt { peak, warmup } => {
                if !(peak > 0.0 && peak.is_finite()) {
                    p.push(format!("peak learning rate must be positive, got {peak}"));
                }
                if warmup >= self.total_steps {
                    p.push(format!("warmup {warmup} must be below total_steps {}", self.total_steps));
                }
            }
            LrSchedule::Cosine {
                peak,
                warmup,
                floor,
                total,
            } => {
                if !(peak > 0.0 && peak.is_finite()) {
                    p.push(format!("peak learning rate must be positive, got {peak}"));
                }
                if !(floor >= 0.0 && floor <= peak) {
                    p.push(format!("cosine floor must lie in [0, peak], got {floor}"));
                }
                if warmup >= self.total_steps || warmup >= total {
                    p.push(format!("warmup {warmup} must be below total_steps {} and the cosine cycle {total}", self.total_steps));
                }
            }
        }
        if let Some(d) = self.dropout {
            if !(0.0..1.0).contains(&d) {
                p.push(format!("dropout must lie in [0, 1), got {d}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            p.push(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                p.push(format!("clip_norm must be positive, got {c}"));
            }
        }
        if self.checkpoint_interval == 0 {
            p.push("checkpoint_interval must be positive".to_string());
        }
        if self.valid_interval == Some(0) {
            p.push("valid_interval must be positive".to_string());
        }
        if self.average_last_k == 0 {
            p.push("average_last_k must be at least 1".to_string());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn weight_at(&self, step: usize) -> f64 {
        self.loss.weight(step, self.alpha, self.beta)
    }
}

/// Token ids for one translation direction.
#[derive(Clone, Debug, PartialEq)]
pub struct PairData {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: Vec<Vec<TokenId>>,
    pub tgt: Vec<Vec<TokenId>>,
    /// Upsampling weight when mixed with other directions.
    pub weight: f64,
}

impl PairData {
    pub fn encode(corpus: &ParallelCorpus, tokenizer: &Tokenizer, weight: f64) -> Self {
        Self {
            src_lang: corpus.src_lang.clone(),
            tgt_lang: corpus.tgt_lang.clone(),
            src: corpus.src.iter().map(|l| tokenizer.encode(l)).collect(),
            tgt: corpus.tgt.iter().map(|l| tokenizer.encode(l)).collect(),
            weight,
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Length key shared by both families: `S + T + 3`.
    fn item_len(&self, i: usize) -> usize {
        self.src[i].len() + self.tgt[i].len() + 3
    }
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub vocab: Vocabulary,
    pub train: Vec<PairData>,
    pub valid: Vec<PairData>,
}

impl TrainData {
    /// Layout both families use for this data under `plan`.
    pub fn format(&self, plan: &TrainPlan) -> SequenceFormat {
        let targets: BTreeSet<&str> = self.train.iter().map(|p| p.tgt_lang.as_str()).collect();
        SequenceFormat {
            tags: plan.tags,
            multilingual: plan.multilingual.unwrap_or(targets.len() > 1),
        }
    }
}

/// One line of the metrics log. Validation columns are empty on steps
/// without validation; `wall_ms` is the only nondeterministic column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub lambda_d: f64,
    pub loss_total: f64,
    pub loss_ae: f64,
    pub loss_mt: f64,
    pub valid_ppl_mt: Option<f64>,
    pub valid_ppl_ae: Option<f64>,
    pub wall_ms: u64,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: format!("metrics log: {e}"),
    }
}

/// Where a run writes its artifacts, and whether to pick up an earlier run.
#[derive(Clone, Debug, Default)]
pub struct RunDir {
    pub path: Option<PathBuf>,
    pub resume: bool,
}

impl RunDir {
    pub fn at(path: impl Into<PathBuf>) -> Self {
        Self {
            path: Some(path.into()),
            resume: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Mean of the last `average_last_k` checkpoints.
    pub model: Model<f32>,
    pub last: Model<f32>,
    pub metrics: Vec<MetricsRow>,
    pub format: SequenceFormat,
    /// Steps of the checkpoints that went into `model`.
    pub averaged_steps: Vec<usize>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const PLAN_FILE: &str = "plan.json";
pub const MODEL_FILE: &str = "model.bin";

fn ckpt_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt-{step:07}.bin"))
}

fn adam_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("adam-{step:07}.bin"))
}

/// A packed batch ready for either family.
struct Prepared {
    /// Decoder-only inputs, or baseline decoder inputs.
    inputs: Vec<Vec<TokenId>>,
    /// Baseline encoder inputs (empty for decoder-only).
    sources: Vec<Vec<TokenId>>,
    targets: Vec<TokenId>,
    roles: Vec<Role>,
}

fn prepare(family: Family, format: SequenceFormat, vocab: &Vocabulary, parts: &[PairData], items: &[ItemRef]) -> Result<Prepared> {
    let mut p = Prepared {
        inputs: Vec::with_capacity(items.len()),
        sources: Vec::new(),
        targets: Vec::new(),
        roles: Vec::new(),
    };
    for it in items {
        let d = &parts[it.part];
        let (src, tgt) = (&d.src[it.index], &d.tgt[it.index]);
        match family {
            Family::DecoderOnly => {
                let ex = build_example(src, tgt, &d.src_lang, &d.tgt_lang, vocab, format.tags)?;
                p.targets.extend_from_slice(ex.targets());
                p.roles.extend_from_slice(&ex.roles);
                p.inputs.push(ex.input().to_vec());
            }
            Family::EncoderDecoder => {
                let (s, t) = build_encdec_example(src, tgt, &d.tgt_lang, vocab, format.multilingual)?;
                p.inputs.push(decoder_input(&t));
                p.roles.extend(std::iter::repeat_n(Role::Mt, t.len()));
                p.targets.extend(t);
                p.sources.push(s);
            }
        }
    }
    Ok(p)
}

fn logits(model: &Model<f32>, tape: &mut Tape<f32>, pv: &[Var], p: &Prepared, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let inputs: Vec<&[usize]> = p.inputs.iter().map(Vec::as_slice).collect();
    match model.family() {
        Family::DecoderOnly => model.lm_logits(tape, pv, &inputs, rng),
        Family::EncoderDecoder => {
            let sources: Vec<&[usize]> = p.sources.iter().map(Vec::as_slice).collect();
            model.encdec_logits(tape, pv, &sources, &inputs, rng)
        }
    }
}

/// Items whose layout fits the position table, per part; the same for both
/// families so their batch streams match.
fn usable_items(parts: &[PairData], max_positions: usize) -> Vec<Vec<usize>> {
    parts
        .iter()
        .map(|d| {
            let keep: Vec<usize> = (0..d.len())
                .filter(|&i| !d.src[i].is_empty() && !d.tgt[i].is_empty() && d.item_len(i) - 1 <= max_positions)
                .collect();
            if keep.len() < d.len() {
                log::warn!(
                    "{}-{}: skipping {} of {} pairs that are empty or exceed {} positions",
                    d.src_lang,
                    d.tgt_lang,
                    d.len() - keep.len(),
                    d.len(),
                    max_positions
                );
            }
            keep
        })
        .collect()
}

/// Teacher-forced sums over a data set: (Σ nll_ae, n_ae, Σ nll_mt, n_mt, correct_mt).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ValidStats {
    pub nll_ae: f64,
    pub n_ae: usize,
    pub nll_mt: f64,
    pub n_mt: usize,
    pub correct_mt: usize,
}

impl ValidStats {
    pub fn ppl_mt(&self) -> Option<f64> {
        (self.n_mt > 0).then(|| (self.nll_mt / self.n_mt as f64).exp())
    }

    pub fn ppl_ae(&self) -> Option<f64> {
        (self.n_ae > 0).then(|| (self.nll_ae / self.n_ae as f64).exp())
    }

    /// Argmax accuracy over translation positions.
    pub fn mt_accuracy(&self) -> f64 {
        if self.n_mt == 0 {
            0.0
        } else {
            self.correct_mt as f64 / self.n_mt as f64
        }
    }
}

/// Scores `parts` without dropout, `max_tokens` at a time.
pub fn validate(model: &Model<f32>, format: SequenceFormat, vocab: &Vocabulary, parts: &[PairData], max_tokens: usize) -> Result<ValidStats> {
    let keep = usable_items(parts, model.config().max_positions);
    let mut stats = ValidStats::default();
    let mut chunk: Vec<ItemRef> = Vec::new();
    let mut longest = 0;
    let v = model.config().vocab_size;
    let flush = |chunk: &mut Vec<ItemRef>, stats: &mut ValidStats| -> Result<()> {
        if chunk.is_empty() {
            return Ok(());
        }
        let p = prepare(model.family(), format, vocab, parts, chunk)?;
        let mut tape = Tape::inference();
        let pv = model.bind(&mut tape);
        let out = logits(model, &mut tape, &pv, &p, None)?;
        let vals = tape.value(out);
        let nll = row_nll(vals, v, &p.targets);
        for (r, ((l, role), &t)) in nll.iter().zip(&p.roles).zip(&p.targets).enumerate() {
            match role {
                Role::Ae => {
                    stats.nll_ae += l;
                    stats.n_ae += 1;
                }
                Role::Mt => {
                    stats.nll_mt += l;
                    stats.n_mt += 1;
                    let row = &vals[r * v..(r + 1) * v];
                    let best = row
                        .iter()
                        .enumerate()
                        .fold((0, f32::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
                    stats.correct_mt += usize::from(best.0 == t);
                }
                Role::None => {}
            }
        }
        chunk.clear();
        Ok(())
    };
    for (pi, idx) in keep.iter().enumerate() {
        for &i in idx {
            let len = parts[pi].item_len(i);
            if !chunk.is_empty() && (chunk.len() + 1) * longest.max(len) > max_tokens {
                flush(&mut chunk, &mut stats)?;
                longest = 0;
            }
            longest = longest.max(len);
            chunk.push(ItemRef { part: pi, index: i });
        }
    }
    flush(&mut chunk, &mut stats)?;
    Ok(stats)
}

fn adam_checkpoint(model: &Model<f32>, state: &OptimizerState, step: usize) -> Checkpoint {
    let mut arrays = Vec::with_capacity(2 * state.m.len());
    for (prefix, bufs) in [("m", &state.m), ("v", &state.v)] {
        for ((name, p), b) in model.names().iter().zip(model.params()).zip(bufs) {
            arrays.push(NamedArray {
                name: format!("{prefix}/{name}"),
                shape: p.shape().to_vec(),
                data: b.clone(),
            });
        }
    }
    Checkpoint {
        config: None,
        meta: json!({ "t": state.t, "step": step, "adam": state.config }),
        arrays,
    }
}

fn restore_adam(ckpt: &Checkpoint, model: &Model<f32>, config: AdamConfig, path: &Path) -> Result<OptimizerState> {
    let n = model.params().len();
    let bad = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    if ckpt.arrays.len() != 2 * n {
        return Err(bad(format!("{} moment arrays for {} parameters", ckpt.arrays.len(), n)));
    }
    let mut state = OptimizerState::new(config, model.params());
    for (k, a) in ckpt.arrays.iter().enumerate() {
        let (prefix, i) = if k < n { ("m", k) } else { ("v", k - n) };
        let want = format!("{prefix}/{}", model.names()[i]);
        if a.name != want || a.data.len() != model.params()[i].numel() {
            return Err(bad(format!("expected array {want}, found {}", a.name)));
        }
        if k < n {
            state.m[i].clone_from(&a.data);
        } else {
            state.v[i].clone_from(&a.data);
        }
    }
    state.t = ckpt.meta["t"].as_u64().ok_or_else(|| bad("missing step counter".into()))?;
    Ok(state)
}

/// Mean of each array across `ckpts`, accumulated in f64.
pub fn average_checkpoint_data(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts.first().ok_or_else(|| Error::contract("no checkpoints to average"))?;
    for (i, c) in ckpts.iter().enumerate().skip(1) {
        if let Some(name) = first.first_mismatch(c) {
            return Err(Error::contract(format!("checkpoint {i} differs from checkpoint 0 at array {name}")));
        }
        if c.config != first.config {
            return Err(Error::contract(format!("checkpoint {i} has a different model config")));
        }
    }
    let k = ckpts.len() as f64;
    let arrays = first
        .arrays
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let mut acc = vec![0f64; a.data.len()];
            for c in ckpts {
                for (s, x) in acc.iter_mut().zip(&c.arrays[j].data) {
                    *s += *x as f64;
                }
            }
            NamedArray {
                name: a.name.clone(),
                shape: a.shape.clone(),
                data: acc.into_iter().map(|s| (s / k) as f32).collect(),
            }
        })
        .collect();
    Ok(Checkpoint {
        config: first.config.clone(),
        meta: first.meta.clone(),
        arrays,
    })
}

/// Loads and averages checkpoint files.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Checkpoint> {
    let ckpts = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    average_checkpoint_data(&ckpts).map_err(|e| match e {
        Error::Contract(detail) => Error::Checkpoint {
            path: paths.first().cloned().unwrap_or_default(),
            detail,
        },
        other => other,
    })
}

/// Latest step with both a model and an optimizer checkpoint in `dir`.
fn latest_checkpoint(dir: &Path) -> Result<Vec<usize>> {
    let mut steps = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(steps),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(step) = name
            .strip_prefix("ckpt-")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            if adam_path(dir, step).exists() {
                steps.push(step);
            }
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

/// Trains a fresh model of `cfg` on `data`.
///
/// The run is a pure function of `(cfg, plan, data)`: parameters are
/// initialized from `plan.seed`, batches come from a stream seeded by it,
/// and dropout at step `s` draws from its own stream, so a resumed run
/// continues exactly where the original would have gone.
pub fn train_loop(cfg: &ModelConfig, plan: &TrainPlan, data: &TrainData, run: &RunDir) -> Result<TrainOutput> {
    let mut problems = cfg.problems();
    problems.extend(plan.problems());
    if cfg.vocab_size != data.vocab.len() {
        problems.push(format!("model vocab_size {} but the vocabulary has {} tokens", cfg.vocab_size, data.vocab.len()));
    }
    if data.train.iter().all(PairData::is_empty) {
        problems.push("no training pairs".to_string());
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let mut cfg = cfg.clone();
    if let Some(d) = plan.dropout {
        cfg.dropout = d;
    }
    let format = data.format(plan);
    let valid_every = plan.valid_interval.unwrap_or(plan.checkpoint_interval);

    let keep = usable_items(&data.train, cfg.max_positions);
    let parts: Vec<Part> = data
        .train
        .iter()
        .zip(&keep)
        .map(|(d, k)| Part {
            lengths: k.iter().map(|&i| d.item_len(i)).collect(),
            weight: d.weight,
        })
        .collect();
    let mut stream = BatchStream::new(parts, plan.max_tokens, derive_seed(plan.seed, "batches"))?;

    if let Some(dir) = &run.path {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut model = Model::new(cfg.clone(), derive_seed(plan.seed, "init"))?;
    model.set_trainable(true);
    let mut state = OptimizerState::new(plan.adam, model.params());
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut recent: VecDeque<(usize, Checkpoint)> = VecDeque::new();
    let mut start = 0;

    if let (Some(dir), true) = (&run.path, run.resume) {
        let steps = latest_checkpoint(dir)?;
        if let Some(&step) = steps.last() {
            let ck = Checkpoint::load(&ckpt_path(dir, step))?;
            model = Model::from_checkpoint(&ck)?;
            if model.config() != &cfg {
                return Err(Error::Config(format!("checkpoint at step {step} was trained with a different model config")));
            }
            let apath = adam_path(dir, step);
            state = restore_adam(&Checkpoint::load(&apath)?, &model, plan.adam, &apath)?;
            let mpath = dir.join(METRICS_FILE);
            if mpath.exists() {
                metrics = read_metrics(&mpath)?;
                metrics.retain(|r| r.step <= step);
            }
            for &s in steps.iter().rev().take(plan.average_last_k).rev() {
                let c = if s == step { ck.clone() } else { Checkpoint::load(&ckpt_path(dir, s))? };
                recent.push_back((s, c));
            }
            stream.skip(step);
            start = step;
            model.set_trainable(true);
            log::info!("resuming from step {step}");
        }
    }

    if let Some(dir) = &run.path {
        let plan_path = dir.join(PLAN_FILE);
        let sidecar = json!({ "plan": plan, "model": cfg, "format": format });
        let text = serde_json::to_string_pretty(&sidecar)?;
        fs::write(&plan_path, text).map_err(|e| Error::io(&plan_path, e))?;
    }

    let clock = Instant::now();
    let meta = |step: usize| json!({ "step": step, "format": format });
    for step in start + 1..=plan.total_steps {
        let batch = stream.next_batch();
        let items: Vec<ItemRef> = batch
            .items
            .iter()
            .map(|it| ItemRef {
                part: it.part,
                index: keep[it.part][it.index],
            })
            .collect();
        let lambda = plan.weight_at(step);
        let lr = lr_at(step, &plan.lr_schedule);

        let prepared = prepare(cfg.family, format, &data.vocab, &data.train, &items)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, &format!("dropout/{step}")));
        let mut tape = Tape::new();
        let pv = model.bind(&mut tape);
        let out = logits(&model, &mut tape, &pv, &prepared, Some(&mut rng))?;
        let loss = batch_loss(&mut tape, out, &prepared.targets, &prepared.roles, lambda)?;
        let total = tape.scalar(loss.total) as f64;
        let step_result = if !total.is_finite() {
            Err(format!("loss is {total}"))
        } else {
            tape.backward(loss.total)?;
            let mut grads: Vec<Vec<f32>> = pv
                .iter()
                .zip(model.params())
                .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f32]>::to_vec))
                .collect();
            drop(tape);
            if let Some(c) = plan.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            match adam_step(model.params_mut(), &grads, &mut state, lr, plan.weight_decay) {
                Ok(()) => Ok(()),
                Err(Error::NonFinite(d)) => Err(d),
                Err(e) => return Err(e),
            }
        };
        if let Err(detail) = step_result {
            if let Some(dir) = &run.path {
                write_metrics(&dir.join(METRICS_FILE), &metrics)?;
            }
            log::error!("diverged at step {step}: {detail}");
            return Err(Error::Divergence { step, detail });
        }

        let mut row = MetricsRow {
            step,
            lr,
            lambda_d: lambda,
            loss_total: lambda * loss.ae + loss.mt,
            loss_ae: loss.ae,
            loss_mt: loss.mt,
            valid_ppl_mt: None,
            valid_ppl_ae: None,
            wall_ms: clock.elapsed().as_millis() as u64,
        };
        let last = step == plan.total_steps;
        if (step % valid_every == 0 || last) && data.valid.iter().any(|d| !d.is_empty()) {
            let v = validate(&model, format, &data.vocab, &data.valid, plan.max_tokens)?;
            row.valid_ppl_mt = v.ppl_mt();
            row.valid_ppl_ae = v.ppl_ae();
            log::info!(
                "step {step} lr {lr:.3e} loss {:.4} valid ppl mt {:.3}",
                row.loss_total,
                row.valid_ppl_mt.unwrap_or(f64::NAN)
            );
        }
        metrics.push(row);

        if step % plan.checkpoint_interval == 0 || last {
            let ck = model.to_checkpoint(meta(step));
            if let Some(dir) = &run.path {
                ck.save(&ckpt_path(dir, step))?;
                adam_checkpoint(&model, &state, step).save(&adam_path(dir, step))?;
                write_metrics(&dir.join(METRICS_FILE), &metrics)?;
            }
            recent.push_back((step, ck));
            while recent.len() > plan.average_last_k {
                recent.pop_front();
            }
        }
    }

    let last = model;
    let (averaged_steps, ckpts): (Vec<usize>, Vec<Checkpoint>) = recent.into_iter().unzip();
    let mut avg = average_checkpoint_data(&ckpts)?;
    avg.meta = json!({ "format": format, "steps": plan.total_steps, "averaged": averaged_steps });
    let model = Model::from_checkpoint(&avg)?;
    if let Some(dir) = &run.path {
        avg.save(&dir.join(MODEL_FILE))?;
        write_metrics(&dir.join(METRICS_FILE), &metrics)?;
    }
    Ok(TrainOutput {
        model,
        last,
        metrics,
        format,
        averaged_steps,
    })
}

/// The sequence format stored with a trained model.
pub fn checkpoint_format(ckpt: &Checkpoint) -> SequenceFormat {
    serde_json::from_value(ckpt.meta["format"].clone()).unwrap_or_default()
}
