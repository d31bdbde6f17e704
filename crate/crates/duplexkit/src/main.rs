use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use duplexkit::script::{parse_script, run_script};
use duplexkit::server::ADMIN_TOKEN_ENV;
use duplexkit::{router, GatewayOptions, Hub};
use duplexkit_core::export::{export_csv, export_json, CsvTable};
use duplexkit_core::StudyConfig;

#[derive(Parser)]
#[command(name = "duplexkit", version, about = "Full-duplex persona dialogue server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the websocket gateway and admin API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, default_value = "configs")]
        configs: PathBuf,
        /// Directory for per-session JSON and study-wide CSV exports.
        #[arg(long, default_value = "exports")]
        exports: PathBuf,
    },
    /// Replay a session script against the mock providers.
    RunScript {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory for <session_id>.json, events.csv and survey.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "configs")]
        configs: PathBuf,
    },
    /// Check a configuration directory and report every violation.
    Validate {
        #[arg(long, default_value = "configs")]
        configs: PathBuf,
    },
}

type Error = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    let result = runtime.block_on(async {
        match cli.command {
            Command::Serve {
                bind,
                configs,
                exports,
            } => serve(bind, &configs, exports).await,
            Command::RunScript {
                script,
                seed,
                out,
                configs,
            } => run(&script, seed, &out, &configs).await,
            Command::Validate { configs } => validate(&configs),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

async fn serve(bind: SocketAddr, configs: &Path, exports: PathBuf) -> Result<(), Error> {
    let study = StudyConfig::load_dir(configs)?;
    let admin_token = std::env::var(ADMIN_TOKEN_ENV).ok().filter(|t| !t.is_empty());
    if admin_token.is_none() {
        tracing::warn!("{ADMIN_TOKEN_ENV} is not set; admin endpoints are disabled");
    }
    let hub = Arc::new(Hub::new(
        study,
        GatewayOptions {
            admin_token,
            exports_dir: Some(exports),
            ..GatewayOptions::default()
        },
    ));
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(%bind, "listening");
    let shutdown_hub = hub.clone();
    axum::serve(listener, router(hub.clone()))
        .with_graceful_shutdown(async move {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
            shutdown_hub.begin_shutdown();
        })
        .await?;

    // Upgraded websockets outlive the listener; give them time to abort
    // their sessions and write exports.
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    while hub.active_sessions() > 0 && tokio::time::Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    Ok(())
}

async fn run(script: &Path, seed: u64, out: &Path, configs: &Path) -> Result<(), Error> {
    let study = StudyConfig::load_dir(configs)?;
    let script = parse_script(&std::fs::read_to_string(script)?)?;
    let record = run_script(&script, &study, seed).await?;
    std::fs::create_dir_all(out)?;
    let json_path = out.join(format!("{}.json", record.session_id));
    std::fs::write(&json_path, export_json(&record)?)?;
    let records = [record];
    std::fs::write(out.join("events.csv"), export_csv(&records, CsvTable::Events)?)?;
    std::fs::write(out.join("survey.csv"), export_csv(&records, CsvTable::Survey)?)?;
    println!("{}", json_path.display());
    Ok(())
}

fn validate(configs: &Path) -> Result<(), Error> {
    let study = StudyConfig::load_dir(configs)?;
    println!(
        "ok: {} personas, {} persona matrices, {} survey questions, max_turns {}",
        study.personas.len(),
        study.persona_matrices.len(),
        study.session.survey.len(),
        study.session.max_turns
    );
    Ok(())
}
