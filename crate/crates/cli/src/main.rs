use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use kg2mmkg_cli::server::{self, AppState, Sources};
use kg2mmkg_core::annotation::Store;
use kg2mmkg_core::pipeline::{Pipeline, PipelineConfig, PipelineError, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "kg2mmkg", version, about = "Turn a knowledge graph into a multi-modal knowledge graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate the dataset.
    Load(StageArgs),
    /// Train the structural encoder.
    TrainEmbed(StageArgs),
    /// Score relation visualizability.
    ScoreRelations(StageArgs),
    /// Pick neighbors for every method.
    SelectNeighbors(StageArgs),
    /// Write prompts from the selected neighbors.
    GenPrompts(StageArgs),
    /// Generate images and manifests (resumable).
    GenImages(StageArgs),
    /// FID / CLIPscore comparison against real images.
    Eval(StageArgs),
    /// Link prediction with and without image features.
    Kgc(StageArgs),
    /// Every stage in order.
    All(StageArgs),
    /// Serve the human-evaluation questionnaire API.
    ServeAnnotations(ServeArgs),
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Compare only entities whose selections differ between methods.
    #[arg(long)]
    paired_only: bool,
    /// Only generate images for entities with outgoing edges.
    #[arg(long)]
    heads_only: bool,
}

#[derive(Args)]
struct ServeArgs {
    /// Pipeline config whose outputs provide the images.
    #[arg(long)]
    config: PathBuf,
    /// Append-only event log; replayed on start.
    #[arg(long, default_value = "annotations.jsonl")]
    log: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Directory with the built questionnaire UI.
    #[arg(long)]
    ui: Option<PathBuf>,
}

fn load_config(path: &std::path::Path) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(path)?;
    cfg.apply_env(|k| std::env::var(k).ok());
    Ok(cfg)
}

fn run_stage(stage: Stage, args: StageArgs) -> Result<(), PipelineError> {
    let cfg = load_config(&args.config)?;
    let opts = RunOptions {
        seed: args.seed,
        paired_only: args.paired_only,
        heads_only: args.heads_only,
    };
    let pipeline = Pipeline::new(cfg, &opts)?;
    for o in pipeline.run(stage)? {
        if o.cached {
            println!("{:<17} cached", o.stage.name());
        } else {
            println!("{:<17} done in {:.2}s", o.stage.name(), o.seconds);
        }
    }
    println!("outputs in {}", pipeline.layout().root.display());
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(&args.config)?;
    let sources = Sources {
        layout: pipeline_layout(&cfg),
        methods: cfg.methods(),
        reals: cfg.dataset.reals.clone(),
    };
    let store = Store::open(&args.log)?;
    let app = server::router(AppState::new(store, sources), args.ui);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.addr).await?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}

fn pipeline_layout(cfg: &PipelineConfig) -> kg2mmkg_core::pipeline::Layout {
    kg2mmkg_core::pipeline::Layout {
        root: cfg.output.dir.clone(),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("KG2MMKG_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let (stage, args) = match cli.command {
        Command::Load(a) => (Stage::Load, a),
        Command::TrainEmbed(a) => (Stage::TrainEmbed, a),
        Command::ScoreRelations(a) => (Stage::ScoreRelations, a),
        Command::SelectNeighbors(a) => (Stage::SelectNeighbors, a),
        Command::GenPrompts(a) => (Stage::GenPrompts, a),
        Command::GenImages(a) => (Stage::GenImages, a),
        Command::Eval(a) => (Stage::Eval, a),
        Command::Kgc(a) => (Stage::Kgc, a),
        Command::All(a) => (Stage::All, a),
        Command::ServeAnnotations(a) => {
            return match serve(a) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            };
        }
    };
    match run_stage(stage, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
