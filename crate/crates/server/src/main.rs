use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use tsexplain_core::counterfactuals::CfMethod;
use tsexplain_core::data::{Delimiter, Split, TimeSeriesDataset};
use tsexplain_core::nn::{train, Model, TrainConfig};
use tsexplain_server::api::{router, AppState};
use tsexplain_server::config::SessionConfig;
use tsexplain_server::explore::{CounterfactualRequest, SessionView};
use tsexplain_server::jobs::JobQueue;
use tsexplain_server::pipeline::run_automatic_phase;
use tsexplain_server::store::{SessionStore, Status};
use tsexplain_server::ServerError;

#[derive(Parser)]
#[command(name = "tsexplain", version, about = "Explainability workbench for time-series classifiers")]
struct Cli {
    /// Session store directory.
    #[arg(long, global = true, env = "TSEXPLAIN_STORE", default_value = "sessions")]
    store: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchitectureArg {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum CfMethodArg {
    Native,
    Wachter,
}

#[derive(Subcommand)]
enum Command {
    /// Create a session from a config file and run its automatic phase.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve the HTTP API and, optionally, the UI's static assets.
    Serve {
        /// Listening port; the APP_PORT environment variable takes precedence.
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Directory with the built UI.
        #[arg(long)]
        assets: Option<PathBuf>,
        /// Concurrent automatic phases; defaults to the number of cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print a session's perturbation ranking table.
    Rank {
        #[arg(long)]
        session: String,
    },
    /// Train a model on a UCR file and write its manifest.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Held-out UCR file to report accuracy on.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "a")]
        architecture: ArchitectureArg,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a counterfactual for one sample of a done session as JSON.
    Cf {
        #[arg(long)]
        session: String,
        #[arg(long)]
        index: usize,
        #[arg(long, value_enum)]
        method: CfMethodArg,
    },
}

fn read(path: &std::path::Path) -> Result<String, ServerError> {
    std::fs::read_to_string(path).map_err(|e| ServerError::io(path, e))
}

fn run(store: &SessionStore, config_path: &std::path::Path) -> Result<ExitCode, ServerError> {
    let mut config = SessionConfig::from_json(&read(config_path)?)?;
    config.resolve_paths(config_path.parent().unwrap_or(std::path::Path::new(".")));
    let id = store.create(config)?;
    println!("session {id}");
    let manifest = run_automatic_phase(store, &id)?;
    println!("status {}", manifest.status);
    Ok(if manifest.status == Status::Done {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn train_command(
    dataset: &std::path::Path,
    test: Option<&std::path::Path>,
    out: &std::path::Path,
    architecture: ArchitectureArg,
    config: TrainConfig,
) -> Result<(), ServerError> {
    let data = match test {
        Some(t) => TimeSeriesDataset::parse_ucr_splits(&read(dataset)?, &read(t)?, Delimiter::Auto)?,
        None => TimeSeriesDataset::parse_ucr(&read(dataset)?, Delimiter::Auto)?,
    };
    let (length, classes) = (data.series_length(), data.class_count());
    let init = match architecture {
        ArchitectureArg::A => Model::architecture_a(length, classes, config.seed)?,
        ArchitectureArg::B => Model::architecture_b(length, classes, config.seed)?,
    };
    let split = |s| -> (Vec<Vec<f32>>, Vec<usize>) {
        let idx = data.indices(s);
        (
            idx.iter().map(|&i| data.sample(i).to_vec()).collect(),
            idx.iter().map(|&i| data.labels()[i]).collect(),
        )
    };
    let (xs, ys) = split(Split::Train);
    let (model, history) = train(&init, &xs, &ys, &config)?;
    if let Some(last) = history.epochs.last() {
        println!("epoch {} loss {:.4} train accuracy {:.4}", last.epoch, last.loss, last.accuracy);
    }
    let (tx, ty) = split(Split::Test);
    if !tx.is_empty() {
        let preds = model.predict_all(&tx)?;
        let correct = preds.iter().zip(&ty).filter(|(p, y)| p == y).count();
        println!("test accuracy {:.4}", correct as f64 / ty.len() as f64);
    }
    model.save(out).map_err(|e| ServerError::io(out, e))
}

async fn serve(store: SessionStore, addr: SocketAddr, assets: Option<PathBuf>, workers: usize) -> Result<(), ServerError> {
    let store = Arc::new(store);
    let jobs = JobQueue::start(store.clone(), workers);
    jobs.recover(&store)?;
    let app = router(AppState { store, jobs }, assets);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServerError::Internal(format!("cannot bind {addr}: {e}")))?;
    tracing::info!("listening on {addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServerError::Internal(e.to_string()))
}

fn port_from_env(flag: u16) -> Result<u16, ServerError> {
    match std::env::var("APP_PORT") {
        Ok(v) if !v.is_empty() => v
            .parse()
            .map_err(|_| ServerError::InvalidConfig(format!("APP_PORT {v:?} is not a port number"))),
        _ => Ok(flag),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let outcome = (|| -> Result<ExitCode, ServerError> {
        let store = SessionStore::open(&cli.store)?;
        match cli.command {
            Command::Run { config } => run(&store, &config),
            Command::Serve {
                port,
                host,
                assets,
                workers,
            } => {
                let port = port_from_env(port)?;
                let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
                let runtime = tokio::runtime::Runtime::new().map_err(|e| ServerError::Internal(e.to_string()))?;
                runtime.block_on(serve(store, SocketAddr::new(host, port), assets, workers))?;
                Ok(ExitCode::SUCCESS)
            }
            Command::Rank { session } => {
                let view = SessionView::open(&store, &session)?;
                print!("{}", view.ranking_table()?.render());
                Ok(ExitCode::SUCCESS)
            }
            Command::Train {
                dataset,
                test,
                out,
                architecture,
                epochs,
                seed,
            } => {
                let config = TrainConfig {
                    epochs,
                    seed,
                    ..TrainConfig::default()
                };
                train_command(&dataset, test.as_deref(), &out, architecture, config)?;
                Ok(ExitCode::SUCCESS)
            }
            Command::Cf { session, index, method } => {
                let view = SessionView::open(&store, &session)?;
                let method = match method {
                    CfMethodArg::Native => CfMethod::Native,
                    CfMethodArg::Wachter => CfMethod::Wachter,
                };
                let result = view.counterfactual(&CounterfactualRequest { idx: index, method })?;
                println!("{}", serde_json::to_string_pretty(&result).expect("result serializes"));
                Ok(ExitCode::SUCCESS)
            }
        }
    })();
    outcome.unwrap_or_else(|e| {
        eprintln!("error [{}]: {e}", e.code());
        ExitCode::FAILURE
    })
}
