use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use cogen_core::config::{RunConfig, Stage};
use cogen_core::engine::Engine;
use cogen_core::explicit::{ExternalSummarizer, GrammarSummarizer, Summarizer};
use cogen_core::pipeline::{self, RunPaths};
use cogen_core::scene;
use cogen_core::session::{Choice, SessionMode, SessionStore};
use cogen_core::user::build_traces;
use cogen_core::Result;
use cogen_service::{router, AppState};

#[derive(Parser)]
#[command(name = "cogen", about = "Dialogue-driven scene generation")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the embedder and the denoiser; writes checkpoints and the loss curve.
    TrainSft,
    /// Simulate multi-round dialogue traces.
    BuildTraces,
    /// Twin-pathway training over the traces, starting from the SFT checkpoint.
    TwinTrain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Terminal conversation.
    Chat {
        #[arg(long, value_enum, default_value = "inference")]
        mode: ModeArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Attend-and-excite threshold sweep.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rounds-to-satisfaction with and without clarification.
    Eval {
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a synthetic dataset as JSONL with base64 PNGs.
    Export {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Inference,
    Training,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let paths = RunPaths::new(&cfg.data_dir);
    match cli.command {
        Command::TrainSft => {
            let out = pipeline::train_sft(&cfg, |step, loss| eprintln!("step {step} loss/px {loss:.5}"))?;
            out.save(&paths)?;
            println!("{}", paths.sft().display());
        }
        Command::BuildTraces => {
            let traces = build_traces(cfg.twin.traces, cfg.twin.rounds_per_trace, cfg.stage_seed(Stage::Traces));
            pipeline::write_traces_file(&paths.traces(), &traces)?;
            println!("{} traces, {} prompts -> {}", traces.len(), traces.iter().map(|t| t.utterances.len()).sum::<usize>(), paths.traces().display());
        }
        Command::TwinTrain { checkpoint } => {
            let embedder = Arc::new(pipeline::load_embedder(&paths.embedder())?);
            let reference = pipeline::load_denoiser(&checkpoint.unwrap_or_else(|| paths.sft()))?;
            let traces = pipeline::read_traces_file(&paths.traces())?;
            let out = pipeline::twin_train(&cfg, embedder, &reference, &traces, |r| {
                eprintln!("trace {} round {} delta {:.3} ae {} loss {:?}", r.trace, r.round, r.ambiguity.delta, r.activation.iterations_used, r.d3po_loss)
            })?;
            out.save(&paths)?;
            println!("{}", paths.twin().display());
        }
        Command::Serve { addr, checkpoint } => {
            let engine = engine(&cfg, &paths, checkpoint.as_deref())?;
            let app = router(AppState::new(engine, cfg.stage_seed(Stage::Service)));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                eprintln!("listening on {}", listener.local_addr()?);
                axum::serve(listener, app).await
            })?;
        }
        Command::Chat { mode, checkpoint } => chat(&cfg, &paths, mode, checkpoint.as_deref())?,
        Command::Sweep { thresholds, checkpoint } => {
            let g = generator(&cfg, &paths, checkpoint.as_deref())?;
            let ks = thresholds.unwrap_or_else(|| cfg.sweep.thresholds.clone());
            for row in pipeline::sweep_ae_threshold(&cfg, &g, &ks)? {
                println!("{}", serde_json::to_string(&row)?);
            }
        }
        Command::Eval { sessions, checkpoint } => {
            let g = generator(&cfg, &paths, checkpoint.as_deref())?;
            let store = SessionStore::new(&cfg.data_dir)?;
            let n = sessions.unwrap_or(cfg.eval.sessions);
            for with_implicit in [false, true] {
                let s = pipeline::eval_rounds_to_satisfaction(&cfg, &g, n, with_implicit, Some(&store))?;
                println!("{}", serde_json::to_string(&s)?);
            }
        }
        Command::Export { n, out } => {
            let data = scene::sample_dataset(n, cfg.stage_seed(Stage::Dataset));
            match out {
                Some(p) => scene::export_dataset(&data, std::io::BufWriter::new(std::fs::File::create(p)?))?,
                None => scene::export_dataset(&data, std::io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn generator(cfg: &RunConfig, paths: &RunPaths, checkpoint: Option<&Path>) -> Result<cogen_core::generator::Generator> {
    let embedder = Arc::new(pipeline::load_embedder(&paths.embedder())?);
    let default = if paths.twin().exists() { paths.twin() } else { paths.sft() };
    let denoiser = Arc::new(pipeline::load_denoiser(checkpoint.unwrap_or(&default))?);
    Ok(pipeline::generator_for(cfg, embedder, denoiser))
}

fn engine(cfg: &RunConfig, paths: &RunPaths, checkpoint: Option<&Path>) -> Result<Engine> {
    let summarizer: Arc<dyn Summarizer> = match &cfg.summarizer {
        Some(s) => Arc::new(ExternalSummarizer::new(s.url.clone(), Duration::from_millis(s.timeout_ms))?),
        None => Arc::new(GrammarSummarizer),
    };
    let default = if paths.twin().exists() { paths.twin() } else { paths.sft() };
    Ok(Engine {
        generator: generator(cfg, paths, checkpoint)?,
        summarizer,
        tau: cfg.tau,
        store: SessionStore::new(&cfg.data_dir)?,
        checkpoint: checkpoint.unwrap_or(&default).display().to_string(),
    })
}

fn chat(cfg: &RunConfig, paths: &RunPaths, mode: ModeArg, checkpoint: Option<&Path>) -> Result<()> {
    let engine = engine(cfg, paths, checkpoint)?;
    let mode = match mode {
        ModeArg::Inference => SessionMode::Inference,
        ModeArg::Training => SessionMode::Training,
    };
    let seed = cfg.stage_seed(Stage::Service);
    let id = format!("chat-{seed:016x}");
    let mut session = match engine.store.load(&id) {
        Ok(s) if s.mode == mode => s,
        _ => engine.create_session(&id, mode, seed)?,
    };
    let images = engine.store.root().join("images");
    println!("session {id}; type a description, 'a'/'b' to pick a candidate, empty line to quit");
    let stdin = std::io::stdin();
    loop {
        print!("> ");
        std::io::stdout().flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 || line.trim().is_empty() {
            break;
        }
        let text = line.trim();
        let pick = match text {
            "a" | "A" => Some(Choice::A),
            "b" | "B" => Some(Choice::B),
            _ => None,
        };
        match pick {
            Some(choice) if mode == SessionMode::Training => {
                let round = session.rounds.len();
                match engine.record_preference(&mut session, round, choice) {
                    Ok(_) => println!("noted {choice:?} for round {round}"),
                    Err(e) => println!("{e}"),
                }
            }
            _ => {
                let turn = engine.message(&mut session, text)?;
                println!("[{}] {}", turn.round, turn.response);
                for (k, p) in turn.images.iter().enumerate() {
                    println!("  {}: {}", ['A', 'B'][k], images.join(p).display());
                }
                if let Some(q) = turn.question {
                    println!("  {q}");
                }
            }
        }
    }
    Ok(())
}
