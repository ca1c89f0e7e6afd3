use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use safechat::config::ServiceConfig;
use safechat::corpus::{compute_stats, load_corpus, Corpus};
use safechat::evalharness::simulate::run_simulation;
use safechat::evalharness::PopulationSpec;
use safechat::nlu::{classify, train, IntentModel};
use safechat::paraphrase::{paraphrase_corpus, to_csv, RuleParaphraser, DEFAULT_K};
use safechat::safety::{guard, replay, verify_chain, SafetyPolicy};

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "safechat", version, about = "Grounded election FAQ chatbot")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus CSV and print its digest.
    Ingest {
        file: PathBuf,
        #[arg(long, default_value = "")]
        state: String,
    },
    /// Print corpus statistics as JSON.
    Stats {
        file: PathBuf,
        #[arg(long, default_value = "")]
        state: String,
    },
    /// Write k paraphrases per question as CSV to stdout.
    Paraphrase {
        corpus: PathBuf,
        #[arg(short, long, default_value_t = DEFAULT_K)]
        k: usize,
    },
    /// Train an intent model and save it.
    Train {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(short, long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value = "")]
        state: String,
    },
    /// Print ranked intents for one utterance, and the guarded decision when
    /// the corpus is given.
    Ask {
        model: PathBuf,
        utterance: String,
        /// Corpus the model was trained on.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Audit log tools.
    Audit {
        #[command(subcommand)]
        command: AuditCommand,
    },
    /// Evaluation tools.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "SAFECHAT_CONFIG")]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Recompute the hash chain; exits 1 if it is broken.
    Verify { log: PathBuf },
    /// Print one session's turns as JSON.
    Replay {
        log: PathBuf,
        #[arg(long)]
        session: String,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Simulate a trial and write the report JSON.
    Rct {
        #[arg(long)]
        corpus: PathBuf,
        /// Population spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(short, long, default_value_t = DEFAULT_K)]
        k: usize,
    },
}

fn load_policy(path: Option<&PathBuf>) -> Result<SafetyPolicy, Box<dyn std::error::Error>> {
    Ok(match path {
        Some(p) => SafetyPolicy::load(p)?,
        None => SafetyPolicy::builtin(),
    })
}

fn train_model(corpus: &Corpus, k: usize) -> Result<IntentModel, Box<dyn std::error::Error>> {
    let sets = paraphrase_corpus(&RuleParaphraser::builtin(), corpus, k)?;
    Ok(train(corpus, &sets)?)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Ingest { file, state } => {
            let corpus = load_corpus(&file, &state)?;
            println!("{} entries, {} topics, digest {}", corpus.len(), corpus.topics().len(), corpus.digest());
        }
        Command::Stats { file, state } => {
            let stats = compute_stats(&load_corpus(&file, &state)?)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Paraphrase { corpus, k } => {
            let corpus = load_corpus(&corpus, "")?;
            print!("{}", to_csv(&paraphrase_corpus(&RuleParaphraser::builtin(), &corpus, k)?));
        }
        Command::Train { corpus, out, k, state } => {
            let corpus = load_corpus(&corpus, &state)?;
            let model = train_model(&corpus, k)?;
            model.save(&out)?;
            eprintln!(
                "trained {} intents on {} utterances -> {}",
                model.intents().len(),
                model.utterances().len(),
                out.display()
            );
        }
        Command::Ask { model, utterance, corpus, policy } => {
            let model = IntentModel::load(&model)?;
            let classification = classify(&model, &utterance);
            let mut out = serde_json::json!({ "ranked": classification.ranked.iter().take(5).collect::<Vec<_>>() });
            if let Some(corpus) = corpus {
                let corpus = load_corpus(&corpus, "")?;
                if corpus.digest() != model.corpus_hash() {
                    return Err("model was trained on a different corpus".into());
                }
                let policy = load_policy(policy.as_ref())?;
                let decision = guard(&classification, &utterance, &policy, &model, &corpus, 0);
                out["decision"] = serde_json::to_value(&decision)?;
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Audit { command: AuditCommand::Verify { log } } => {
            let report = verify_chain(&log)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.is_valid() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Audit { command: AuditCommand::Replay { log, session } } => {
            println!("{}", serde_json::to_string_pretty(&replay(&log, &session)?)?);
        }
        Command::Eval { command: EvalCommand::Rct { corpus, spec, seed, out, policy, k } } => {
            let corpus = load_corpus(&corpus, "")?;
            let spec: PopulationSpec = serde_json::from_str(&std::fs::read_to_string(&spec)?)?;
            let policy = load_policy(policy.as_ref())?;
            let model = train_model(&corpus, k)?;
            let sim = run_simulation(&corpus, &model, &policy, &spec, seed)?;
            std::fs::write(&out, sim.report.to_json())?;
            eprintln!(
                "verdict {:?}: {} of {} questions significant",
                sim.report.verdict, sim.report.questions_significant, sim.report.questions_tested
            );
        }
        Command::Serve { config } => {
            let config = ServiceConfig::load(&config)?;
            tokio::runtime::Runtime::new()?.block_on(safechat::service::serve(config))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
