use std::process::ExitCode;

use clap::Parser;
use tracing::{error, info, warn};

use grin_transfer::cli::{read_barcodes_file, Cli, Command, SyncAction};
use grin_transfer::config::{config_dir, load_config, RunConfig};
use grin_transfer::pipeline::{
    self, PipelineError, Session, StatusReport, SyncPlan,
};
use grin_transfer::shutdown::Shutdown;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let dir = config_dir(cli.config.as_deref());
    let cfg = match load_config(&dir, &cli.overrides()) {
        Ok(cfg) => cfg,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(2);
        }
    };

    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            error!("could not start async runtime: {e}");
            return ExitCode::from(1);
        }
    };

    match runtime.block_on(dispatch(cli.command, cfg)) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

async fn dispatch(command: Command, cfg: RunConfig) -> Result<ExitCode, PipelineError> {
    match command {
        Command::Collect => {
            let session = begin(cfg)?;
            let summary = pipeline::run_collect(&session).await?;
            println!("{}", pipeline::summarize("collect", &summary));
            Ok(ExitCode::SUCCESS)
        }
        Command::Sync {
            action:
                SyncAction::Pipeline {
                    queues,
                    barcodes,
                    barcodes_file,
                    limit,
                    dry_run,
                },
        } => {
            let mut explicit = barcodes;
            if let Some(path) = &barcodes_file {
                let from_file = read_barcodes_file(path).map_err(|source| {
                    PipelineError::Io {
                        context: format!("reading {}", path.display()),
                        source,
                    }
                })?;
                explicit.extend(from_file);
            }
            let plan = SyncPlan {
                queues: queues.into_iter().map(Into::into).collect(),
                explicit,
                limit,
                dry_run,
            };
            let session = begin(cfg)?;
            let summary = pipeline::run_sync(&session, &plan).await?;
            for note in &summary.notes {
                println!("{note}");
            }
            println!("{}", pipeline::summarize("sync", &summary));
            Ok(ExitCode::SUCCESS)
        }
        Command::Enrich {
            barcodes,
            limit,
            refresh_all,
        } => {
            let explicit = (!barcodes.is_empty()).then_some(barcodes);
            let session = begin(cfg)?;
            let summary =
                pipeline::run_enrich(&session, explicit.as_deref(), limit, refresh_all).await?;
            println!("{}", pipeline::summarize("enrich", &summary));
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportCsv { csv } => {
            let rows = if csv == "-" {
                let stdout = std::io::stdout().lock();
                pipeline::run_export(&cfg, stdout)?
            } else {
                let file = std::fs::File::create(&csv).map_err(|source| PipelineError::Io {
                    context: format!("creating {csv}"),
                    source,
                })?;
                let rows = pipeline::run_export(&cfg, std::io::BufWriter::new(file))?;
                println!("wrote {rows} rows to {csv}");
                rows
            };
            info!(rows, "export finished");
            Ok(ExitCode::SUCCESS)
        }
        Command::Status => {
            let report = pipeline::run_status(&cfg)?;
            print_status(&report);
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Opens the session and wires Ctrl-C to a graceful stop. A second Ctrl-C
/// aborts immediately; the next run cleans up.
fn begin(cfg: RunConfig) -> Result<Session, PipelineError> {
    let shutdown = Shutdown::default();
    let session = match Session::begin(cfg, shutdown.clone()) {
        Ok(session) => session,
        Err(PipelineError::LockBusy { pid, since }) => {
            warn!(pid, since, "another session is already running, skipping");
            return Err(PipelineError::LockBusy { pid, since });
        }
        Err(e) => return Err(e),
    };

    let flag = session.shutdown_handle();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            warn!("interrupt received, finishing in-flight volumes (interrupt again to abort)");
            flag.trigger();
            if tokio::signal::ctrl_c().await.is_ok() {
                std::process::exit(130);
            }
        }
    });
    Ok(session)
}

fn print_status(report: &StatusReport) {
    println!("volumes: {} total, {} synced", report.counts.total, report.counts.synced);
    for (state, count) in &report.counts.by_state {
        let label = if state.is_empty() { "(unconverted)" } else { state };
        println!("  {label}: {count}");
    }
    if report.recent_runs.is_empty() {
        println!("no runs recorded");
    } else {
        println!("recent runs:");
        for run in &report.recent_runs {
            println!(
                "  {} {} {}",
                run.started_at,
                run.stage,
                pipeline::summarize(&run.stage, &run.summary)
            );
        }
    }
}
