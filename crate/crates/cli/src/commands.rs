use std::fs;
use std::path::{Path, PathBuf};

use lm4mt::data::corpus::write_lines;
use lm4mt::decode::{pivot_lines, translate_file, DecodeConfig};
use lm4mt::eval::{corpus_bleu, correct_language_subset, off_target_report, subset_bleu};
use lm4mt::model::{matched_encoder_decoder, Family};
use lm4mt::train::{LossMode, TrainOutput, MODEL_FILE};
use serde_json::json;

use crate::config::{read_json, spec_hash, write_json, DataSpec, ExperimentSpec, TrainConfig};
use crate::experiment::{run_experiment, ExperimentOutput};
use crate::pipeline::{check_training, generate_data, load_langid, load_system, train_system, DataDir};
use crate::report::{report_string, write_report, ReportRow, Value};
use crate::rundir::{file_hashes, prepare_out, write_manifest, MANIFEST_FILE};
use crate::{CliError, Result};

pub const CONFIG_FILE: &str = "config.json";

/// `gen-data`: synthetic corpora, BPE, vocabulary and language identifier.
pub fn cmd_gen_data(spec_file: &Path, out: &Path, seed: u64, force: bool) -> Result<serde_json::Value> {
    let spec: DataSpec = read_json(spec_file)?;
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(CliError::Config(problems.join("; ")));
    }
    prepare_out(out, force)?;
    let files = generate_data(&spec, seed, out)?;
    let manifest = json!({
        "command": "gen-data",
        "seed": seed,
        "spec_sha256": spec_hash(&spec),
        "spec": spec,
        "files": file_hashes(out, &files)?,
    });
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

/// Command-line overrides for `train`.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub data_dir: Option<PathBuf>,
    pub loss: Option<LossMode>,
    pub family: Option<Family>,
    pub seed: Option<u64>,
}

pub fn parse_family(s: &str) -> Result<Family, String> {
    match s {
        "decoder-only" | "lm" | "lm4mt" => Ok(Family::DecoderOnly),
        "encoder-decoder" | "encdec" | "transformer" => Ok(Family::EncoderDecoder),
        other => Err(format!("unknown family {other:?} (expected lm4mt or encdec)")),
    }
}

/// Applies overrides. Switching a decoder-only config to the baseline family
/// picks the parameter-matched encoder-decoder shape.
pub fn resolve_train_config(mut cfg: TrainConfig, o: &TrainOverrides) -> Result<TrainConfig> {
    if let Some(d) = &o.data_dir {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(l) = o.loss {
        cfg.plan.loss = l;
    }
    if let Some(s) = o.seed {
        cfg.plan.seed = s;
    }
    match (o.family, cfg.model.family) {
        (Some(Family::EncoderDecoder), Family::DecoderOnly) => cfg.model = matched_encoder_decoder(&cfg.model),
        (Some(f), _) => cfg.model.family = f,
        (None, _) => {}
    }
    if cfg.data_dir.is_none() {
        return Err(CliError::Config("no data directory: set data_dir in the config or pass --data".to_string()));
    }
    Ok(cfg)
}

/// `train`: trains one system into `out` and averages its last checkpoints.
pub fn cmd_train(config_file: &Path, overrides: &TrainOverrides, out: &Path, force: bool, resume: bool) -> Result<TrainOutput> {
    let cfg = resolve_train_config(read_json(config_file)?, overrides)?;
    let data = DataDir::open(cfg.data_dir.as_deref().expect("resolved"))?;
    let directions = cfg.directions.clone().unwrap_or_else(|| data.spec.train_directions());
    check_training(&data, &cfg.model, &cfg.plan, &directions)?;
    if !resume {
        prepare_out(out, force)?;
    } else if !out.join(MANIFEST_FILE).exists() {
        return Err(CliError::Config(format!("nothing to resume in {}", out.display())));
    }
    let resolved = TrainConfig {
        model: lm4mt::ModelConfig {
            vocab_size: data.tokenizer.vocab.len(),
            ..cfg.model.clone()
        },
        directions: Some(directions.clone()),
        ..cfg.clone()
    };
    write_json(&out.join(CONFIG_FILE), &resolved)?;
    let mut manifest = json!({
        "command": "train",
        "config_sha256": spec_hash(&resolved),
        "config": resolved,
        "resume": resume,
        "status": "running",
    });
    write_manifest(out, &manifest)?;
    let trained = train_system(&data, &resolved.model, &resolved.plan, &directions, out, resume)?;
    manifest["status"] = json!("ok");
    manifest["averaged_steps"] = json!(trained.averaged_steps);
    manifest["parameters"] = json!(trained.model.num_params());
    manifest["files"] = json!(file_hashes(out, &[MODEL_FILE.to_string()])?);
    write_manifest(out, &manifest)?;
    Ok(trained)
}

#[derive(Clone, Debug)]
pub struct TranslateArgs {
    /// Run directory (or model file) of the system.
    pub model: PathBuf,
    /// Second hop for pivot translation, `src → via → tgt`.
    pub pivot: Option<(PathBuf, String)>,
    pub input: PathBuf,
    pub output: PathBuf,
    pub src: String,
    pub tgt: String,
    pub decode: DecodeConfig,
}

/// `translate`: file in, file out, one line per line. Returns the line count.
pub fn cmd_translate(args: &TranslateArgs) -> Result<usize> {
    args.decode.validate()?;
    let first = load_system(&args.model)?;
    match &args.pivot {
        None => Ok(translate_file(&first, &args.input, &args.output, &args.src, &args.tgt, &args.decode)?),
        Some((second, via)) => {
            let second = load_system(second)?;
            let text = fs::read_to_string(&args.input).map_err(|e| CliError::io(&args.input, e))?;
            let lines: Vec<&str> = text.lines().collect();
            let out = pivot_lines(&first, &second, &lines, (&args.src, via, &args.tgt), &args.decode)?;
            write_lines(&args.output, &out)?;
            Ok(out.len())
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvaluateArgs {
    pub hyp: PathBuf,
    pub reference: PathBuf,
    pub name: String,
    /// `src-tgt` label for the report; `-` when absent.
    pub direction: Option<String>,
    /// Expected output language; required for the language-id columns.
    pub lang: Option<String>,
    pub off_target: bool,
    /// `langid.json`, or a data directory holding one.
    pub langid: Option<PathBuf>,
    /// Two hypothesis files scored on their common correct-language subset.
    pub both_systems: Option<(PathBuf, PathBuf)>,
    pub seed: Option<u64>,
    pub report: Option<PathBuf>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn eval_err(e: lm4mt::Error) -> CliError {
    match e {
        lm4mt::Error::Io { .. } => CliError::Core(e),
        other => CliError::Eval(other.to_string()),
    }
}

/// `evaluate`: BLEU, optionally off-target ratios and common-subset BLEU,
/// as report rows. Writes CSV to `report` or stdout.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Vec<ReportRow>> {
    let refs = read_lines(&args.reference)?;
    let dir = args.direction.clone().unwrap_or_else(|| "-".to_string());
    let name = if args.name.is_empty() { "evaluate" } else { args.name.as_str() };
    let needs_langid = args.off_target || args.both_systems.is_some();
    let (lang, langid) = if needs_langid {
        let lang = args
            .lang
            .clone()
            .ok_or_else(|| CliError::Config("--lang is required with --off-target and --both-systems".to_string()))?;
        let path = args
            .langid
            .as_ref()
            .ok_or_else(|| CliError::Config("--langid is required with --off-target and --both-systems".to_string()))?;
        (lang, Some(load_langid(path)?))
    } else {
        (String::new(), None)
    };
    let mut rows = Vec::new();
    let row = |exp: &str, metric: String, v: f64| ReportRow::new(exp, &dir, metric, Value::Num(v), args.seed);
    let hyps = read_lines(&args.hyp)?;
    rows.push(row(name, "bleu".to_string(), corpus_bleu(&hyps, &refs).map_err(eval_err)?));
    if let (true, Some(m)) = (args.off_target, &langid) {
        let rep = off_target_report(&hyps, &lang, m);
        rows.push(row(name, "offtarget_acc".to_string(), rep.accuracy));
        for (l, r) in &rep.ratios {
            rows.push(row(name, format!("ratio:{l}"), *r));
        }
    }
    if let (Some((a, b)), Some(m)) = (&args.both_systems, &langid) {
        let (ha, hb) = (read_lines(a)?, read_lines(b)?);
        let idx = correct_language_subset(&ha, &hb, &refs, &lang, m).map_err(eval_err)?;
        for (label, h) in [(a, &ha), (b, &hb)] {
            let exp = format!("{name}/{}", label.display());
            rows.push(row(&exp, "subset_bleu".to_string(), subset_bleu(h, &refs, &idx).map_err(eval_err)?));
            rows.push(row(&exp, "subset_n".to_string(), idx.len() as f64));
        }
    }
    match &args.report {
        Some(p) => write_report(p, &rows)?,
        None => print!("{}", report_string(&rows)),
    }
    Ok(rows)
}

/// `experiment`: the full protocol of a spec file. `seed` replaces the
/// spec's seed list with a single seed.
pub fn cmd_experiment(spec_file: &Path, out: &Path, seed: Option<u64>, force: bool) -> Result<ExperimentOutput> {
    let mut spec: ExperimentSpec = read_json(spec_file)?;
    if let Some(s) = seed {
        spec.seeds = vec![s];
    }
    run_experiment(&spec, out, force)
}
