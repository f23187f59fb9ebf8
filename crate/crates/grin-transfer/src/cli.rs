//! Command-line surface. Parsing lives here so integration tests can build
//! invocations without spawning a process.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::Overrides;
use crate::store::QueueKind;

#[derive(Debug, Parser)]
#[command(
    name = "grin-transfer",
    version,
    about = "Mirrors a library's digitized volumes from GRIN into local storage"
)]
pub struct Cli {
    /// Config directory holding config.toml and secret files
    #[arg(long, global = true, value_name = "DIR")]
    pub config: Option<PathBuf>,

    /// Service base URL (overrides the config file)
    #[arg(long, global = true, value_name = "URL")]
    pub base_url: Option<String>,

    /// Catalog database path (overrides the config file)
    #[arg(long, global = true, value_name = "PATH")]
    pub store_path: Option<PathBuf>,

    /// Scratch directory for in-flight packages
    #[arg(long, global = true, value_name = "DIR")]
    pub staging_root: Option<PathBuf>,

    /// Pause downloads when staging use reaches this fraction of capacity
    #[arg(long, global = true, value_name = "FRACTION")]
    pub staging_threshold: Option<f64>,

    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            base_url: self.base_url.clone(),
            store_path: self.store_path.clone(),
            staging_root: self.staging_root.clone(),
            staging_threshold: self.staging_threshold,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Walk the full service listing into the catalog
    Collect,

    /// Move volumes through conversion, download, and storage
    Sync {
        #[command(subcommand)]
        action: SyncAction,
    },

    /// Fetch per-volume detail metadata into the catalog
    Enrich {
        /// Only these barcodes (repeatable)
        #[arg(long = "barcode", value_name = "BARCODE")]
        barcodes: Vec<String>,

        /// At most this many volumes
        #[arg(long, value_name = "N")]
        limit: Option<usize>,

        /// Re-fetch details for every volume, not just undescribed ones
        #[arg(long)]
        refresh_all: bool,
    },

    /// Write the catalog as CSV
    #[command(name = "export-csv")]
    ExportCsv {
        /// Output path; `-` streams to standard output
        #[arg(long, value_name = "PATH", default_value = "-")]
        csv: String,
    },

    /// Show catalog counts and recent runs
    Status,
}

#[derive(Debug, Subcommand)]
pub enum SyncAction {
    /// Run the conversion/download/storage pipeline over selected queues
    Pipeline {
        /// Queue to process, in the order given (repeatable)
        #[arg(long = "queue", value_name = "QUEUE")]
        queues: Vec<QueueArg>,

        /// Individual barcode to sync (repeatable)
        #[arg(long = "barcode", value_name = "BARCODE")]
        barcodes: Vec<String>,

        /// File with one barcode per line; `#` starts a comment
        #[arg(long, value_name = "PATH")]
        barcodes_file: Option<PathBuf>,

        /// At most this many volumes per queue
        #[arg(long, value_name = "N")]
        limit: Option<usize>,

        /// Probe and report without changing anything
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QueueArg {
    /// Volumes never converted: request conversion
    Unconverted,
    /// Volumes with packages ready: download and store
    Converted,
    /// Volumes downloaded in an earlier pass: probe first, reconvert if gone
    Previous,
}

impl From<QueueArg> for QueueKind {
    fn from(arg: QueueArg) -> Self {
        match arg {
            QueueArg::Unconverted => QueueKind::Unconverted,
            QueueArg::Converted => QueueKind::Converted,
            QueueArg::Previous => QueueKind::PreviouslyDownloaded,
        }
    }
}

/// Reads a barcode list file: one barcode per line, blank lines and
/// `#` comments ignored, order preserved.
pub fn read_barcodes_file(path: &std::path::Path) -> std::io::Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|line| line.split('#').next().unwrap_or("").trim())
        .filter(|line| !line.is_empty())
        .map(str::to_owned)
        .collect())
}
