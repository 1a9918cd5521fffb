use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lm4mt::decode::DecodeConfig;
use lm4mt::train::LossMode;
use lm4mt_cli::commands::{parse_family, TrainOverrides};
use lm4mt_cli::{cmd_evaluate, cmd_experiment, cmd_gen_data, cmd_train, cmd_translate, CliError, EvaluateArgs, TranslateArgs, EXIT_OTHER};

#[derive(Parser, Debug)]
#[command(name = "lm4mt", version, about = "Decoder-only translation models at desk scale")]
struct Cli {
    /// Seed for data generation / training (experiment: run only this seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (run directory, data directory or report file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory written by an earlier run.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for decoding (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic corpora, BPE, vocabulary and language id.
    GenData {
        /// Data spec (JSON).
        spec: PathBuf,
    },
    /// Train one system.
    Train {
        /// Train config (JSON).
        config: PathBuf,
        /// Data directory (overrides data_dir in the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// mt | ae+mt | decay-ae+mt
        #[arg(long, value_parser = |s: &str| s.parse::<LossMode>())]
        loss: Option<LossMode>,
        /// lm4mt | encdec
        #[arg(long, value_parser = parse_family)]
        family: Option<lm4mt::model::Family>,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Translate a file line by line.
    Translate {
        /// Run directory of the trained system.
        #[arg(long, required_unless_present = "pivot")]
        model: Option<PathBuf>,
        /// Two run directories `first,second` chained through --via.
        #[arg(long, value_delimiter = ',', requires = "via")]
        pivot: Option<Vec<PathBuf>>,
        /// Pivot language.
        #[arg(long)]
        via: Option<String>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        src: String,
        #[arg(long)]
        tgt: String,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Score hypotheses against references.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Experiment label in the report.
        #[arg(long, default_value = "evaluate")]
        name: String,
        /// Direction label, e.g. aa-bb.
        #[arg(long)]
        direction: Option<String>,
        /// Expected output language.
        #[arg(long)]
        lang: Option<String>,
        /// Add translation-language accuracy and per-language ratios.
        #[arg(long)]
        off_target: bool,
        /// langid.json or the data directory holding it.
        #[arg(long)]
        langid: Option<PathBuf>,
        /// Two hypothesis files `a,b` scored on their common correct-language subset.
        #[arg(long, value_delimiter = ',')]
        both_systems: Option<Vec<PathBuf>>,
    },
    /// Run a full experiment spec over its seeds.
    Experiment {
        /// Experiment spec (JSON).
        spec: PathBuf,
    },
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Beam width (default 4).
    #[arg(long, conflicts_with = "greedy")]
    beam: Option<usize>,
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 0.6)]
    length_penalty: f64,
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
}

impl DecodeArgs {
    fn config(&self) -> DecodeConfig {
        if self.greedy {
            DecodeConfig::greedy(self.max_new_tokens)
        } else {
            DecodeConfig::beam(self.beam.unwrap_or(4), self.length_penalty, self.max_new_tokens)
        }
    }
}

fn pair(flag: &str, v: Vec<PathBuf>) -> Result<(PathBuf, PathBuf), CliError> {
    match <[PathBuf; 2]>::try_from(v) {
        Ok([a, b]) => Ok((a, b)),
        Err(v) => Err(CliError::Config(format!("--{flag} takes two comma-separated paths, got {}", v.len()))),
    }
}

fn need_out(out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.ok_or_else(|| CliError::Config("--out is required".to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::GenData { spec } => {
            let out = need_out(cli.out)?;
            let m = cmd_gen_data(&spec, &out, cli.seed.unwrap_or(1), cli.force)?;
            println!("{}", m["spec_sha256"].as_str().unwrap_or_default());
        }
        Command::Train {
            config,
            data,
            loss,
            family,
            resume,
        } => {
            let out = need_out(cli.out)?;
            let o = TrainOverrides {
                data_dir: data,
                loss,
                family,
                seed: cli.seed,
            };
            let t = cmd_train(&config, &o, &out, cli.force, resume)?;
            if let Some(last) = t.metrics.last() {
                println!("step {} loss {:.4} averaged {:?}", last.step, last.loss_total, t.averaged_steps);
            }
        }
        Command::Translate {
            model,
            pivot,
            via,
            input,
            src,
            tgt,
            decode,
        } => {
            let out = need_out(cli.out)?;
            let (model, pivot) = match pivot {
                Some(p) => {
                    let (a, b) = pair("pivot", p)?;
                    (a, Some((b, via.expect("clap requires --via"))))
                }
                None => (model.expect("clap requires --model"), None),
            };
            let args = TranslateArgs {
                model,
                pivot,
                input,
                output: out,
                src,
                tgt,
                decode: decode.config(),
            };
            cmd_translate(&args)?;
        }
        Command::Evaluate {
            hyp,
            reference,
            name,
            direction,
            lang,
            off_target,
            langid,
            both_systems,
        } => {
            let args = EvaluateArgs {
                hyp,
                reference,
                name,
                direction,
                lang,
                off_target,
                langid,
                both_systems: both_systems.map(|v| pair("both-systems", v)).transpose()?,
                seed: cli.seed,
                report: cli.out,
            };
            cmd_evaluate(&args)?;
        }
        Command::Experiment { spec } => {
            let out = need_out(cli.out)?;
            let res = cmd_experiment(&spec, &out, cli.seed, cli.force)?;
            print!("{}", std::fs::read_to_string(out.join(lm4mt_cli::experiment::TABLE_FILE)).unwrap_or_default());
            for f in &res.failures {
                eprintln!("failed: seed {} {}: {}", f.seed, f.system, f.error);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            ExitCode::from(u8::try_from(code).unwrap_or(EXIT_OTHER as u8))
        }
    }
}
