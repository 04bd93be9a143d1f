use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metaphor_core::data::{synthetic, LabeledCorpus, Vocab};
use metaphor_core::embed_io::{save_vec, Pretrained};
use metaphor_core::experiment::{self, gradcheck, RunConfig, RunReport};
use metaphor_core::models::{load_checkpoint, save_checkpoint};
use metaphor_core::tensor::{Fault, OpKind, Precision};
use metaphor_core::{Error, ErrorKind};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_GRADCHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "metaphor", version, about = "Sentence-level metaphor detection")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any configuration key as `--key value`, overriding the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the whole corpus and write a checkpoint and its training log.
    Train(RunArgs),
    /// k-fold cross-validation of one configuration.
    Crossval(RunArgs),
    /// Cross-validate every architecture × D × fine-tune cell.
    Sweep(RunArgs),
    /// Score sentences (one per line) with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// TSV destination; standard output when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference check of every op, layer and architecture.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Negate the backward rule of one op (e.g. `gru`) to see the check fail.
        #[arg(long, value_name = "OP")]
        negate_backward: Option<String>,
        /// Write the per-component results as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write synthetic corpora or random `.vec` files.
    #[command(subcommand)]
    Generate(Generate),
}

#[derive(Subcommand)]
enum Generate {
    /// 32 short sentences over 40 words with random labels.
    Overfit {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sentences labelled metaphor exactly when a marker word and a verb
    /// word both occur.
    Learnable {
        #[arg(long, default_value_t = 1000)]
        sentences: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Random vectors for every word of a corpus, one file per dimension.
    Vectors {
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated dimensions.
        #[arg(long, value_delimiter = ',', default_value = "50,100,150,200,250,300,350,400,450,500")]
        dims: Vec<usize>,
        /// Output path with `{D}` standing for the dimension.
        #[arg(long)]
        pattern: String,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Runtime => EXIT_RUNTIME,
            })
        }
    }
}

fn run(command: Command) -> metaphor_core::Result<u8> {
    match command {
        Command::Train(args) => train(&load_config(&args)?),
        Command::Crossval(args) => {
            let cfg = load_config(&args)?;
            let report = match cfg.precision {
                Precision::F64 => experiment::crossval::<f64>(&cfg)?,
                Precision::F32 => experiment::crossval::<f32>(&cfg)?,
            };
            finish_report(&cfg, &report, "report.csv")
        }
        Command::Sweep(args) => {
            let cfg = load_config(&args)?;
            let report = match cfg.precision {
                Precision::F64 => experiment::sweep::<f64>(&cfg)?,
                Precision::F32 => experiment::sweep::<f32>(&cfg)?,
            };
            finish_report(&cfg, &report, "sweep.csv")
        }
        Command::Predict {
            checkpoint,
            input,
            output,
        } => predict(&checkpoint, &input, output.as_deref()),
        Command::Gradcheck {
            trials,
            seed,
            negate_backward,
            json,
        } => run_gradcheck(trials, seed, negate_backward.as_deref(), json.as_deref()),
        Command::Generate(g) => generate(g),
    }
}

fn load_config(args: &RunArgs) -> metaphor_core::Result<RunConfig> {
    let overrides = parse_overrides(&args.overrides)?;
    RunConfig::load(args.config.as_deref(), &overrides)
}

// `--key value`, `--key=value`, or a bare `--flag` meaning true.
fn parse_overrides(raw: &[String]) -> metaphor_core::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < raw.len() {
        let Some(key) = raw[i].strip_prefix("--") else {
            return Err(Error::Config(format!("expected `--key value`, found `{}`", raw[i])));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else if i + 1 < raw.len() && !raw[i + 1].starts_with("--") {
            out.push((key.to_string(), raw[i + 1].clone()));
            i += 2;
        } else {
            out.push((key.to_string(), "true".to_string()));
            i += 1;
        }
    }
    Ok(out)
}

fn train(cfg: &RunConfig) -> metaphor_core::Result<u8> {
    match cfg.precision {
        Precision::F64 => train_as::<f64>(cfg),
        Precision::F32 => train_as::<f32>(cfg),
    }
}

fn train_as<T: metaphor_core::tensor::Real>(cfg: &RunConfig) -> metaphor_core::Result<u8> {
    let (model, log) = experiment::fit::<T>(cfg)?;
    let path = cfg.output.clone().unwrap_or_else(|| PathBuf::from("model.json"));
    save_checkpoint(&model, cfg.tokenizer(), &path)?;
    let log_path = experiment::sidecar(&path, "log");
    experiment::write_log(&log_path, &log)?;
    if let Some(last) = log.last() {
        log::info!("epoch {}: loss {:.6}, train accuracy {:.4}", last.epoch, last.mean_loss, last.train_accuracy);
    }
    println!("{}", path.display());
    if let Some(eval) = &cfg.eval_corpus {
        let corpus = LabeledCorpus::load(eval, cfg.tokenizer())?;
        let m = experiment::evaluate(&model, &corpus)?;
        println!(
            "{}: accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}",
            eval.display(),
            m.accuracy,
            m.precision,
            m.recall,
            m.f1
        );
    }
    Ok(0)
}

fn finish_report(cfg: &RunConfig, report: &RunReport, default: &str) -> metaphor_core::Result<u8> {
    let path = cfg.output.clone().unwrap_or_else(|| PathBuf::from(default));
    report.write(&path, cfg.timing)?;
    print!("{}", report.summary_table());
    println!("report: {}", path.display());
    Ok(0)
}

fn predict(checkpoint: &Path, input: &Path, output: Option<&Path>) -> metaphor_core::Result<u8> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;
    let precision = metaphor_core::models::Checkpoint::read(checkpoint)?.precision;
    let rows = match precision {
        Precision::F64 => {
            let (model, tok) = load_checkpoint::<f64>(checkpoint)?;
            experiment::score_lines(&model, tok, &text)?
        }
        Precision::F32 => {
            let (model, tok) = load_checkpoint::<f32>(checkpoint)?;
            experiment::score_lines(&model, tok, &text)?
        }
    };
    let tsv = experiment::format_scored(&rows);
    match output {
        Some(p) => std::fs::write(p, tsv).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?,
        None => print!("{tsv}"),
    }
    Ok(0)
}

fn run_gradcheck(trials: usize, seed: u64, negate: Option<&str>, json: Option<&Path>) -> metaphor_core::Result<u8> {
    let fault = negate
        .map(|name| {
            OpKind::ALL
                .iter()
                .find(|k| k.name() == name)
                .map(|&k| Fault::NegateBackward(k))
                .ok_or_else(|| Error::Config(format!("unknown op `{name}`")))
        })
        .transpose()?;
    let opts = gradcheck::SuiteOptions {
        trials,
        seed,
        fault,
        ..Default::default()
    };
    let start = std::time::Instant::now();
    let results = gradcheck::run_suite(&opts, |r| {
        println!(
            "{:<28} {:>4} trials {:>4} redrawn  worst {:.3e}  {}",
            r.component,
            r.trials,
            r.rejected,
            r.worst_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    })?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.component.as_str()).collect();
    println!(
        "{} components, {} failed, {:.1}s",
        results.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if let Some(p) = json {
        let text = serde_json::to_string_pretty(&results)?;
        std::fs::write(p, text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
    }
    if failed.is_empty() {
        Ok(0)
    } else {
        println!("failed: {}", failed.join(", "));
        Ok(EXIT_GRADCHECK)
    }
}

fn write_text(path: &Path, text: &str) -> metaphor_core::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn generate(g: Generate) -> metaphor_core::Result<u8> {
    match g {
        Generate::Overfit { seed, output } => write_text(&output, &synthetic::overfit_corpus(seed).to_tsv())?,
        Generate::Learnable { sentences, seed, output } => {
            write_text(&output, &synthetic::learnable_corpus(sentences, seed).to_tsv())?
        }
        Generate::Vectors {
            corpus,
            dims,
            pattern,
            seed,
        } => {
            if !pattern.contains("{D}") {
                return Err(Error::Config("--pattern must contain `{D}`".into()));
            }
            let corpus = LabeledCorpus::load(&corpus, Default::default())?;
            let vocab = Vocab::build(corpus.sentences(), 1)?;
            let words: Vec<String> = vocab.words().map(|(_, w)| w.to_string()).collect();
            for d in dims {
                let p = Pretrained::from_pairs(d, synthetic::random_vectors(&words, d, seed ^ d as u64))?;
                let path = PathBuf::from(pattern.replace("{D}", &d.to_string()));
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
                }
                save_vec(&p, &path)?;
                println!("{}", path.display());
            }
        }
    }
    Ok(0)
}
