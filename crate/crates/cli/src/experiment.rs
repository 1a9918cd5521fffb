//! Experiment protocols: which systems a mode trains, what each is scored
//! on, and how per-seed results become report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use lm4mt::data::corpus::write_lines;
use lm4mt::decode::{pivot_lines, DecodeConfig, System};
use lm4mt::eval::{corpus_bleu, correct_language_subset, off_target_report, perturbed_sources, subset_bleu, LangIdModel, UNDETERMINED};
use lm4mt::model::{count_params, Family, ModelConfig};
use lm4mt::train::TrainPlan;
use serde_json::json;

use crate::config::{spec_hash, write_json, Direction, ExperimentSpec, Mode, PivotSpec};
use crate::pipeline::{generate_data, train_system, DataDir};
use crate::report::{self, ReportRow, Summary, Value};
use crate::rundir::{file_hashes, prepare_out, write_manifest};
use crate::{CliError, Result};

pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TABLE_FILE: &str = "table.md";
pub const ROBUSTNESS_FILE: &str = "robustness.csv";
pub const OFF_TARGET_FILE: &str = "offtarget.csv";
pub const SPEC_FILE: &str = "spec.json";

/// One trained system in an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemSetup {
    pub name: String,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub directions: Vec<Direction>,
    /// Pivot route scored as `src-tgt` in addition to direct directions.
    pub pivot: Option<PivotSpec>,
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::DecoderOnly => "lm4mt",
        Family::EncoderDecoder => "transformer",
    }
}

/// The compared systems of `spec` (which must be resolved). All share data,
/// vocabulary, decode settings and seeds; they differ only in the listed way.
pub fn systems(spec: &ExperimentSpec) -> Vec<SystemSetup> {
    let lm = ModelConfig {
        family: Family::DecoderOnly,
        ..spec.model.clone()
    };
    let baseline = spec.baseline.clone().expect("resolved spec");
    let config_for = |f: Family| match f {
        Family::DecoderOnly => lm.clone(),
        Family::EncoderDecoder => baseline.clone(),
    };
    let losses = spec.losses.clone().expect("resolved spec");
    let train_dirs = spec.data.train_directions();
    let setup = |name: String, model: ModelConfig, plan: TrainPlan| SystemSetup {
        name,
        model,
        plan,
        directions: train_dirs.clone(),
        pivot: None,
    };
    let plan = spec.plan.clone();
    match spec.mode {
        Mode::Standard | Mode::Robustness => spec
            .families
            .iter()
            .map(|&f| setup(family_name(f).to_string(), config_for(f), plan.clone()))
            .collect(),
        Mode::AblationTags => [(true, "tags"), (false, "no-tags")]
            .into_iter()
            .map(|(tags, label)| setup(format!("lm4mt/{label}"), lm.clone(), TrainPlan { tags, ..plan.clone() }))
            .collect(),
        Mode::AblationLayers => spec
            .layers
            .iter()
            .map(|&n| {
                setup(
                    format!("lm4mt/L{n}"),
                    ModelConfig {
                        num_layers: n,
                        ..lm.clone()
                    },
                    plan.clone(),
                )
            })
            .collect(),
        Mode::AblationLoss | Mode::Zeroshot => {
            let mut out = Vec::new();
            if spec.mode == Mode::Zeroshot && spec.families.contains(&Family::EncoderDecoder) {
                out.push(setup("transformer".to_string(), baseline.clone(), plan.clone()));
            }
            for &loss in &losses {
                out.push(setup(format!("lm4mt/{}", loss.as_str()), lm.clone(), TrainPlan { loss, ..plan.clone() }));
            }
            out
        }
        Mode::Pivot => {
            let pv = spec.pivot.clone().expect("validated");
            let mut out = Vec::new();
            for &f in &spec.families {
                out.push(SystemSetup {
                    name: format!("{}/pivot", family_name(f)),
                    model: config_for(f),
                    plan: plan.clone(),
                    directions: vec![Direction::new(&pv.src, &pv.pivot), Direction::new(&pv.pivot, &pv.tgt)],
                    pivot: Some(pv.clone()),
                });
                out.push(SystemSetup {
                    name: format!("{}/direct", family_name(f)),
                    model: config_for(f),
                    plan: plan.clone(),
                    directions: vec![Direction::new(&pv.src, &pv.tgt)],
                    pivot: None,
                });
            }
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Task {
    Direct(Direction),
    Pivot(PivotSpec),
}

impl Task {
    fn label(&self) -> String {
        match self {
            Task::Direct(d) => d.to_string(),
            Task::Pivot(p) => format!("{}-{}", p.src, p.tgt),
        }
    }

    fn test_direction(&self) -> Direction {
        match self {
            Task::Direct(d) => d.clone(),
            Task::Pivot(p) => Direction::new(&p.src, &p.tgt),
        }
    }
}

/// What a system is scored on, and with which metrics.
struct Scoring {
    task: Task,
    metrics: Vec<String>,
    zero_shot: bool,
}

fn ratio_metric(r: f64) -> String {
    format!("bleu@{r}")
}

fn scoring(spec: &ExperimentSpec, sys: &SystemSetup, data_langs: &[String]) -> Vec<Scoring> {
    let trained: BTreeSet<&Direction> = sys.directions.iter().collect();
    let mut tasks: Vec<Task> = match (&spec.mode, &sys.pivot) {
        (Mode::Pivot, Some(pv)) => {
            let mut t: Vec<Task> = sys.directions.iter().cloned().map(Task::Direct).collect();
            t.push(Task::Pivot(pv.clone()));
            t
        }
        (Mode::Pivot, None) => sys.directions.iter().cloned().map(Task::Direct).collect(),
        _ => spec.data.test_directions().into_iter().map(Task::Direct).collect(),
    };
    let tested: BTreeSet<Direction> = spec.data.test_directions().into_iter().collect();
    // a test pair can be read in either orientation
    tasks.retain(|t| tested.contains(&t.test_direction()) || tested.contains(&t.test_direction().reversed()));
    tasks
        .into_iter()
        .map(|task| {
            let zero_shot = matches!(&task, Task::Direct(d) if !trained.contains(d));
            let mut metrics = if spec.mode == Mode::Robustness {
                spec.ratios.iter().map(|&r| ratio_metric(r)).collect()
            } else {
                vec!["bleu".to_string()]
            };
            if zero_shot {
                metrics.push("offtarget_acc".to_string());
                metrics.extend(data_langs.iter().map(|l| format!("ratio:{l}")));
                metrics.push(format!("ratio:{UNDETERMINED}"));
            }
            Scoring { task, metrics, zero_shot }
        })
        .collect()
}

fn dir_name(system: &str) -> String {
    system.replace('/', "_")
}

#[derive(Clone, Debug)]
pub struct Failure {
    pub seed: u64,
    pub system: String,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<Summary>,
    pub failures: Vec<Failure>,
}

impl ExperimentOutput {
    /// Median across seeds for one cell; `system` is the part after the
    /// experiment name.
    pub fn median(&self, name: &str, system: &str, direction: &str, metric: &str) -> Option<f64> {
        report::find(&self.summary, &format!("{name}/{system}"), direction, metric).filter(|s| s.n > 0).map(|s| s.median)
    }
}

struct Scored {
    rows: Vec<(String, String, f64)>,
    /// Zero-shot hypotheses kept for the common-subset pass.
    zero_shot_hyps: BTreeMap<String, Vec<String>>,
}

fn score_system(system: &System, data: &DataDir, langid: &LangIdModel, plan: &[Scoring], spec: &ExperimentSpec, seed: u64, hyp_dir: &Path) -> Result<Scored> {
    let cfg: &DecodeConfig = &spec.decode;
    let mut out = Scored {
        rows: Vec::new(),
        zero_shot_hyps: BTreeMap::new(),
    };
    for s in plan {
        let label = s.task.label();
        let test = data.corpus("test", &s.task.test_direction())?;
        if spec.mode == Mode::Robustness {
            for &r in &spec.ratios {
                let src = perturbed_sources(&test.src, r, seed);
                let hyps = system.translate_lines(&src, &test.src_lang, &test.tgt_lang, cfg)?;
                write_lines(&hyp_dir.join(format!("hyp.{label}.missing-{r}.txt")), &hyps)?;
                out.rows.push((label.clone(), ratio_metric(r), corpus_bleu(&hyps, &test.tgt)?));
            }
            continue;
        }
        let hyps = match &s.task {
            Task::Direct(d) => system.translate_lines(&test.src, &d.src, &d.tgt, cfg)?,
            Task::Pivot(p) => pivot_lines(system, system, &test.src, (&p.src, &p.pivot, &p.tgt), cfg)?,
        };
        let file = match &s.task {
            Task::Pivot(p) => format!("hyp.{}-{}-{}.txt", p.src, p.pivot, p.tgt),
            Task::Direct(_) => format!("hyp.{label}.txt"),
        };
        write_lines(&hyp_dir.join(file), &hyps)?;
        out.rows.push((label.clone(), "bleu".to_string(), corpus_bleu(&hyps, &test.tgt)?));
        if s.zero_shot {
            let rep = off_target_report(&hyps, &test.tgt_lang, langid);
            out.rows.push((label.clone(), "offtarget_acc".to_string(), rep.accuracy));
            for m in s.metrics.iter().filter_map(|m| m.strip_prefix("ratio:")) {
                out.rows.push((label.clone(), format!("ratio:{m}"), rep.ratio(m)));
            }
            out.zero_shot_hyps.insert(label, hyps);
        }
    }
    Ok(out)
}

/// Runs every seed of `spec` under `out` and writes the report tree.
///
/// A system that fails to train or decode becomes a `failed` cell; only
/// configuration errors abort the whole experiment.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path, force: bool) -> Result<ExperimentOutput> {
    let spec = spec.resolved();
    spec.validate()?;
    prepare_out(out, force)?;
    let hash = spec_hash(&spec);
    let mut manifest = json!({
        "command": "experiment",
        "name": spec.name,
        "mode": spec.mode,
        "spec_sha256": hash,
        "seeds": spec.seeds,
        "status": "running",
        "spec": spec,
    });
    write_manifest(out, &manifest)?;
    write_json(&out.join(SPEC_FILE), &spec)?;

    let setups = systems(&spec);
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut failures: Vec<Failure> = Vec::new();
    for &seed in &spec.seeds {
        let seed_dir = out.join(format!("seed-{seed}"));
        let data_path = seed_dir.join("data");
        generate_data(&spec.data, seed, &data_path)?;
        let data = DataDir::open(&data_path)?;
        let langid = data.langid()?;
        let langs: Vec<String> = langid.langs().to_vec();
        let mut zero_shot: Vec<(usize, BTreeMap<String, Vec<String>>)> = Vec::new();
        for (si, sys) in setups.iter().enumerate() {
            let experiment = format!("{}/{}", spec.name, sys.name);
            let plan = TrainPlan { seed, ..sys.plan.clone() };
            let run_dir = seed_dir.join("runs").join(dir_name(&sys.name));
            let scoring_plan = scoring(&spec, sys, &langs);
            let params = count_params(&ModelConfig {
                vocab_size: data.tokenizer.vocab.len(),
                ..sys.model.clone()
            });
            rows.push(ReportRow::new(&experiment, "-", "params", Value::Num(params as f64), Some(seed)));
            log::info!("seed {seed}: training {} ({params} parameters)", sys.name);
            let result = train_system(&data, &sys.model, &plan, &sys.directions, &run_dir, false).and_then(|trained| {
                let system = System {
                    model: trained.model,
                    tokenizer: data.tokenizer.clone(),
                    format: trained.format,
                };
                score_system(&system, &data, &langid, &scoring_plan, &spec, seed, &run_dir)
            });
            match result {
                Ok(scored) => {
                    for (d, m, v) in scored.rows {
                        rows.push(ReportRow::new(&experiment, d, m, Value::Num(v), Some(seed)));
                    }
                    if !scored.zero_shot_hyps.is_empty() {
                        zero_shot.push((si, scored.zero_shot_hyps));
                    }
                }
                Err(e @ CliError::Config(_)) => return Err(e),
                Err(CliError::Core(e @ lm4mt::Error::Config(_))) => return Err(e.into()),
                Err(e) => {
                    log::warn!("seed {seed}: {} failed: {e}", sys.name);
                    failures.push(Failure {
                        seed,
                        system: sys.name.clone(),
                        error: e.to_string(),
                        exit_code: e.exit_code(),
                    });
                    for s in &scoring_plan {
                        for m in &s.metrics {
                            rows.push(ReportRow::new(&experiment, s.task.label(), m, Value::Failed, Some(seed)));
                        }
                    }
                }
            }
        }
        // common correct-language subset across the systems that finished
        if let Some((_, first)) = zero_shot.first() {
            for label in first.keys() {
                let d: Direction = label.parse().map_err(CliError::Config)?;
                let refs = data.corpus("test", &d)?.tgt;
                let hyps: Vec<(usize, &Vec<String>)> = zero_shot.iter().filter_map(|(si, m)| m.get(label).map(|h| (*si, h))).collect();
                let mut common: BTreeSet<usize> = (0..refs.len()).collect();
                for (_, h) in &hyps {
                    let idx = correct_language_subset(h, h, &refs, &d.tgt, &langid)?;
                    common = common.intersection(&idx.into_iter().collect()).copied().collect();
                }
                let common: Vec<usize> = common.into_iter().collect();
                for (si, h) in &hyps {
                    let experiment = format!("{}/{}", spec.name, setups[*si].name);
                    rows.push(ReportRow::new(&experiment, label, "subset_bleu", Value::Num(subset_bleu(h, &refs, &common)?), Some(seed)));
                    rows.push(ReportRow::new(&experiment, label, "subset_n", Value::Num(common.len() as f64), Some(seed)));
                }
            }
        }
    }

    let summary = report::summarize(&rows);
    report::write_report(&out.join(REPORT_FILE), &rows)?;
    report::write_summary(&out.join(SUMMARY_FILE), &summary)?;
    let table = report::markdown_tables(&format!("{} ({})", spec.name, spec.mode.as_str()), &summary);
    fs::write(out.join(TABLE_FILE), table).map_err(|e| CliError::io(&out.join(TABLE_FILE), e))?;
    let mut files = [REPORT_FILE, SUMMARY_FILE, TABLE_FILE, SPEC_FILE].map(String::from).to_vec();
    if spec.mode == Mode::Robustness {
        let metrics: Vec<String> = spec.ratios.iter().map(|&r| ratio_metric(r)).collect();
        report::write_wide(&out.join(ROBUSTNESS_FILE), &summary, &metrics, |m| format!("missing_{}", m.trim_start_matches("bleu@")))?;
        files.push(ROBUSTNESS_FILE.to_string());
    }
    if rows.iter().any(|r| r.metric == "offtarget_acc") {
        let mut metrics = vec!["offtarget_acc".to_string()];
        let langs: BTreeSet<&str> = rows.iter().filter_map(|r| r.metric.strip_prefix("ratio:")).collect();
        metrics.extend(langs.into_iter().map(|l| format!("ratio:{l}")));
        report::write_wide(&out.join(OFF_TARGET_FILE), &summary, &metrics, |m| m.trim_start_matches("ratio:").to_string())?;
        files.push(OFF_TARGET_FILE.to_string());
    }
    manifest["status"] = json!(if failures.is_empty() { "ok" } else { "partial" });
    manifest["failed"] = json!(failures
        .iter()
        .map(|f| json!({ "seed": f.seed, "system": f.system, "error": f.error, "exit_code": f.exit_code }))
        .collect::<Vec<_>>());
    manifest["systems"] = json!(setups
        .iter()
        .map(|s| json!({ "name": s.name, "model": s.model, "loss": s.plan.loss, "tags": s.plan.tags, "directions": s.directions }))
        .collect::<Vec<_>>());
    manifest["files"] = json!(file_hashes(out, &files)?);
    write_manifest(out, &manifest)?;
    Ok(ExperimentOutput {
        dir: out.to_path_buf(),
        rows,
        summary,
        failures,
    })
}
