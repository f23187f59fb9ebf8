//! Run orchestration. Each CLI invocation becomes one run: open the
//! catalog, take the session lock, execute the requested stages, persist a
//! run summary, snapshot the catalog on the way out. Only one mutating run
//! per catalog at a time; a second launcher finds the lock busy and exits
//! with a distinct status so cron overlaps are harmless.

use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::StreamExt;
use tracing::{info, warn};
use uuid::Uuid;

use crate::clock::SystemClock;
use crate::config::{RunConfig, StorageChoice};
use crate::conversion::{feed_conversions, reconcile_failures, submit_conversions, FeedError};
use crate::enrich::{self, EnrichError};
use crate::inventory::{self, CollectError};
use crate::protocol::client::{GrinClient, GrinClientConfig, StaticToken};
use crate::protocol::limiter::RateBudget;
use crate::retrieval::decrypt::GpgCliDecryptor;
use crate::retrieval::staging::StagingMonitor;
use crate::retrieval::{StageBudgets, SyncDeps, SyncEngine, SyncOptions, SyncOutcome};
use crate::shutdown::Shutdown;
use crate::storage::localfs::LocalFs;
use crate::storage::s3::{S3Client, S3Config};
use crate::storage::sigv4::Credentials;
use crate::storage::StorageBackend;
use crate::store::csv_export::export_csv;
use crate::store::lock::{LockError, LockOutcome, SessionLock};
use crate::store::{
    now_utc, QueueKind, RunRecord, RunSummary, StateCounts, Store, StoreError,
};

/// How long an unreadable lock file blocks new runs. A readable lock with a
/// dead owner is reclaimed immediately regardless.
const LOCK_STALENESS: Duration = Duration::from_secs(15 * 60);

/// Mid-run snapshot cadence for long runs; every run also snapshots at end.
const SNAPSHOT_INTERVAL: Duration = Duration::from_secs(6 * 60 * 60);

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("another session holds the lock (pid {pid}, since {since})")]
    LockBusy { pid: u32, since: String },
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("listing failed: {0}")]
    Collect(#[from] CollectError),
    #[error("conversion feed failed: {0}")]
    Feed(#[from] FeedError),
    #[error("enrichment failed: {0}")]
    Enrich(#[from] EnrichError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 3 when another session already runs, 1 for
    /// anything systemic. Config problems exit 2 before a pipeline exists,
    /// and per-volume failures never surface here at all.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::LockBusy { .. } => 3,
            _ => 1,
        }
    }
}

fn io_ctx(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

/// What a sync run should work through: queues in the order given, then an
/// explicit barcode list. Empty plan defaults to the everyday recipe,
/// unconverted then converted.
#[derive(Debug, Clone, Default)]
pub struct SyncPlan {
    pub queues: Vec<QueueKind>,
    pub explicit: Vec<String>,
    pub limit: Option<usize>,
    pub dry_run: bool,
}

impl SyncPlan {
    fn effective_queues(&self) -> Vec<QueueKind> {
        if self.queues.is_empty() && self.explicit.is_empty() {
            vec![QueueKind::Unconverted, QueueKind::Converted]
        } else {
            self.queues.clone()
        }
    }
}

fn queue_label(queue: QueueKind) -> &'static str {
    match queue {
        QueueKind::Unconverted => "unconverted",
        QueueKind::Converted => "converted",
        QueueKind::PreviouslyDownloaded => "previous",
    }
}

/// Everything a locked run needs, built once from the config. Dropping the
/// session releases the lock.
pub struct Session {
    cfg: RunConfig,
    store: Arc<Store>,
    client: Arc<GrinClient>,
    engine: Arc<SyncEngine>,
    shutdown: Shutdown,
    _lock: SessionLock,
}

impl Session {
    /// Opens the catalog and takes the session lock. `LockBusy` means
    /// another run is active; callers exit with the skip status.
    pub fn begin(cfg: RunConfig, shutdown: Shutdown) -> Result<Self, PipelineError> {
        let lock_path = cfg.lock_path();
        if let Some(parent) = lock_path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(io_ctx(format!("creating {}", parent.display())))?;
            }
        }
        let lock = match SessionLock::acquire(&lock_path, LOCK_STALENESS)? {
            LockOutcome::Acquired(lock) => lock,
            LockOutcome::Busy { pid, acquired_at } => {
                return Err(PipelineError::LockBusy {
                    pid,
                    since: acquired_at,
                });
            }
        };

        let store = Arc::new(Store::open(&cfg.store_path)?);
        let client = build_client(&cfg);
        let engine = build_engine(&cfg, client.clone(), store.clone());
        Ok(Self {
            cfg,
            store,
            client,
            engine,
            shutdown,
            _lock: lock,
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn shutdown_handle(&self) -> Shutdown {
        self.shutdown.clone()
    }

    /// Clears staging leftovers from runs that died mid-volume. Every live
    /// volume gets a fresh directory anyway; anything present at run start
    /// is garbage.
    fn clean_staging(&self) -> Result<(), PipelineError> {
        let root = &self.cfg.staging_root;
        std::fs::create_dir_all(root).map_err(io_ctx(format!("creating {}", root.display())))?;
        for entry in
            std::fs::read_dir(root).map_err(io_ctx(format!("reading {}", root.display())))?
        {
            let entry = entry.map_err(io_ctx(format!("reading {}", root.display())))?;
            let path = entry.path();
            info!(path = %path.display(), "removing staging leftover");
            let result = if entry.file_type().map(|t| t.is_dir()).unwrap_or(false) {
                std::fs::remove_dir_all(&path)
            } else {
                std::fs::remove_file(&path)
            };
            result.map_err(io_ctx(format!("removing {}", path.display())))?;
        }
        Ok(())
    }

    /// Writes the run record (store and a JSON copy under runs/) and takes
    /// the end-of-run snapshot. Snapshot trouble is reported but does not
    /// fail a run that already did its work.
    fn finish_run(
        &self,
        scope: RunScope,
        summary: RunSummary,
    ) -> Result<RunSummary, PipelineError> {
        let record = RunRecord {
            run_id: scope.run_id,
            stage: scope.stage.to_owned(),
            started_at: scope.started_at,
            ended_at: Some(now_utc()),
            summary,
        };
        self.store.write_run(&record)?;

        let runs_dir = self.cfg.runs_dir();
        if let Err(e) = std::fs::create_dir_all(&runs_dir).and_then(|()| {
            let path = runs_dir.join(format!("{}.json", record.run_id));
            let json = serde_json::to_vec_pretty(&record).expect("run record serializes");
            std::fs::write(path, json)
        }) {
            warn!(error = %e, "could not write run summary file");
        }

        self.snapshot();
        Ok(record.summary)
    }

    fn snapshot(&self) {
        match self
            .store
            .snapshot(&self.cfg.snapshot_dir(), self.cfg.snapshot_retain)
        {
            Ok(path) => info!(path = %path.display(), "catalog snapshot written"),
            Err(e) => warn!(error = %e, "catalog snapshot failed"),
        }
    }

    fn maybe_snapshot(&self, last: &mut Instant) {
        if last.elapsed() >= SNAPSHOT_INTERVAL {
            self.snapshot();
            *last = Instant::now();
        }
    }

    /// How many volumes move through the pipeline at once. Wide enough to
    /// keep every stage pool busy, narrow enough to bound staging use.
    fn sync_width(&self) -> usize {
        self.cfg.download_workers + self.cfg.decrypt_workers + self.cfg.upload_workers
    }
}

fn build_client(cfg: &RunConfig) -> Arc<GrinClient> {
    let mut cc = GrinClientConfig::new(cfg.base_url.clone(), cfg.library_directory.clone());
    cc.budget = RateBudget {
        max_requests_per_second: cfg.rate,
        burst: cfg.burst,
    };
    Arc::new(GrinClient::new(
        cc,
        Arc::new(StaticToken(cfg.token.expose().to_owned())),
    ))
}

fn build_engine(cfg: &RunConfig, client: Arc<GrinClient>, store: Arc<Store>) -> Arc<SyncEngine> {
    let (storage, prefix): (Arc<dyn StorageBackend>, String) = match &cfg.storage {
        StorageChoice::Local { root, prefix } => {
            (Arc::new(LocalFs::new(root.clone())), prefix.clone())
        }
        StorageChoice::S3 {
            endpoint,
            bucket,
            region,
            prefix,
            access_key_id,
            secret_key,
        } => (
            Arc::new(S3Client::new(S3Config {
                endpoint: endpoint.clone(),
                bucket: bucket.clone(),
                region: region.clone(),
                credentials: Credentials {
                    access_key: access_key_id.clone(),
                    secret_key: secret_key.expose().to_owned(),
                },
            })),
            prefix.clone(),
        ),
    };

    let monitor = match cfg.staging_capacity {
        Some(capacity) => StagingMonitor::fixed_capacity(&cfg.staging_root, capacity),
        None => StagingMonitor::filesystem(&cfg.staging_root),
    }
    .with_threshold(cfg.staging_threshold);

    let decryptor = GpgCliDecryptor::new(cfg.passphrase.expose().to_owned())
        .with_binary(cfg.gpg_binary.clone());

    let deps = SyncDeps {
        client,
        store,
        storage,
        decryptor: Arc::new(decryptor),
        monitor: Arc::new(monitor),
        clock: Arc::new(SystemClock),
        storage_prefix: prefix,
    };
    let budgets = StageBudgets {
        probe: Arc::new(tokio::sync::Semaphore::new(cfg.head_workers)),
        download: Arc::new(tokio::sync::Semaphore::new(cfg.download_workers)),
        decrypt: Arc::new(tokio::sync::Semaphore::new(cfg.decrypt_workers)),
        upload: Arc::new(tokio::sync::Semaphore::new(cfg.upload_workers)),
    };
    let options = SyncOptions {
        extract_marc: cfg.extract_marc,
        extract_ocr: cfg.extract_ocr,
    };
    Arc::new(
        SyncEngine::new(deps)
            .with_budgets(budgets)
            .with_options(options),
    )
}

struct RunScope {
    run_id: String,
    stage: &'static str,
    started_at: String,
}

impl RunScope {
    fn begin(stage: &'static str) -> Self {
        let scope = Self {
            run_id: Uuid::new_v4().to_string(),
            stage,
            started_at: now_utc(),
        };
        info!(run_id = %scope.run_id, stage, "run started");
        scope
    }
}

/// Walks the full service listing into the catalog.
pub async fn run_collect(session: &Session) -> Result<RunSummary, PipelineError> {
    let scope = RunScope::begin("collect");
    let report = inventory::run_collect(&session.client, &session.store, &session.shutdown).await?;

    let mut summary = RunSummary {
        volumes_listed: report.listed,
        volumes_new: report.inserted,
        volumes_updated: report.updated,
        ..Default::default()
    };
    if report.resumed {
        summary.notes.push("resumed from saved listing cursor".to_owned());
    }
    if report.interrupted {
        summary
            .notes
            .push("interrupted by shutdown, listing cursor saved".to_owned());
    }
    session.finish_run(scope, summary)
}

/// Works through the planned queues in order, then the explicit list.
pub async fn run_sync(session: &Session, plan: &SyncPlan) -> Result<RunSummary, PipelineError> {
    let scope = RunScope::begin("sync");
    if !plan.dry_run {
        session.clean_staging()?;
    }

    let mut summary = RunSummary::default();
    let mut last_snapshot = Instant::now();

    for queue in plan.effective_queues() {
        if session.shutdown.is_triggered() {
            break;
        }
        match queue {
            QueueKind::Unconverted => {
                let candidates = session.store.select_queue(queue, plan.limit)?;
                if plan.dry_run {
                    summary.notes.push(format!(
                        "dry-run unconverted: would request conversion of {} volumes",
                        candidates.len()
                    ));
                    continue;
                }
                let report = feed_conversions(
                    &session.client,
                    &session.store,
                    plan.limit,
                    &session.shutdown,
                )
                .await?;
                summary.conversions_requested += report.accepted;
                summary.conversion_queue_full |= report.queue_full;

                let failures = reconcile_failures(&session.client, &session.store).await?;
                summary.conversion_failures_seen += failures.reported;
            }
            QueueKind::Converted => {
                let barcodes = session.store.select_queue(queue, plan.limit)?;
                if plan.dry_run {
                    dry_run_probe(session, queue_label(queue), &barcodes, &mut summary).await;
                    continue;
                }
                sync_batch(session, &barcodes, &mut summary, &mut last_snapshot).await;
            }
            QueueKind::PreviouslyDownloaded => {
                let barcodes = session.store.select_queue(queue, plan.limit)?;
                if plan.dry_run {
                    dry_run_probe(session, queue_label(queue), &barcodes, &mut summary).await;
                    continue;
                }
                // Packages from an earlier pass may still be on the service;
                // take those directly, and only ask for a fresh conversion
                // where the probe came back empty.
                let missing =
                    sync_batch(session, &barcodes, &mut summary, &mut last_snapshot).await;
                if !missing.is_empty() && !session.shutdown.is_triggered() {
                    info!(
                        count = missing.len(),
                        "previously downloaded volumes without packages, requesting conversion"
                    );
                    let report = submit_conversions(
                        &session.client,
                        &session.store,
                        &missing,
                        &session.shutdown,
                    )
                    .await?;
                    summary.conversions_requested += report.accepted;
                    summary.conversion_queue_full |= report.queue_full;
                }
            }
        }
    }

    if !plan.explicit.is_empty() && !session.shutdown.is_triggered() {
        let mut explicit = plan.explicit.clone();
        if let Some(limit) = plan.limit {
            explicit.truncate(limit);
        }
        let (known, unknown) = session.store.filter_known(&explicit)?;
        for barcode in &unknown {
            warn!(barcode = %barcode, "requested barcode is not in the catalog");
            summary.notes.push(format!("unknown barcode: {barcode}"));
        }
        if plan.dry_run {
            dry_run_probe(session, "explicit", &known, &mut summary).await;
        } else {
            sync_batch(session, &known, &mut summary, &mut last_snapshot).await;
        }
    }

    summary.staging_pauses = session.engine.staging_pauses();
    if plan.dry_run {
        // Nothing moved; leave no run record or snapshot behind.
        info!("dry run complete");
        return Ok(summary);
    }
    session.finish_run(scope, summary)
}

/// Syncs a set of barcodes with bounded concurrency, tallying outcomes.
/// Returns the ones the service has no package for right now.
async fn sync_batch(
    session: &Session,
    barcodes: &[String],
    summary: &mut RunSummary,
    last_snapshot: &mut Instant,
) -> Vec<String> {
    let engine = &session.engine;
    let shutdown = &session.shutdown;
    let mut missing = Vec::new();

    // Stop pulling new volumes once shutdown triggers; whatever is already
    // in flight drains to a terminal state.
    let mut outcomes = futures::stream::iter(
        barcodes
            .iter()
            .take_while(|_| !shutdown.is_triggered())
            .map(|barcode| {
                let engine = engine.clone();
                let barcode = barcode.clone();
                async move {
                    let outcome = engine.sync_volume(&barcode).await;
                    (barcode, outcome)
                }
            }),
    )
    .buffer_unordered(session.sync_width());

    while let Some((barcode, outcome)) = outcomes.next().await {
        tally(summary, &outcome);
        if matches!(outcome, SyncOutcome::NotAvailable) {
            missing.push(barcode);
        }
        session.maybe_snapshot(last_snapshot);
    }
    drop(outcomes);

    missing.sort();
    missing
}

fn tally(summary: &mut RunSummary, outcome: &SyncOutcome) {
    match outcome {
        SyncOutcome::Synced { bytes, .. } => {
            summary.synced += 1;
            summary.bytes_downloaded += bytes;
        }
        SyncOutcome::SkippedIdentical => summary.skipped_identical += 1,
        SyncOutcome::Healed => summary.healed += 1,
        SyncOutcome::NotAvailable => summary.unavailable += 1,
        SyncOutcome::Failed { .. } => summary.failed += 1,
    }
}

/// Probes availability without mutating anything, for `--dry-run`.
async fn dry_run_probe(
    session: &Session,
    label: &str,
    barcodes: &[String],
    summary: &mut RunSummary,
) {
    let client = &session.client;
    let mut probes = futures::stream::iter(barcodes.iter().map(|barcode| async move {
        let available = match client.probe_package(barcode).await {
            Ok(probe) => probe.available,
            Err(e) => {
                warn!(barcode = %barcode, error = %e, "probe failed");
                false
            }
        };
        (barcode, available)
    }))
    .buffer_unordered(session.cfg.head_workers);

    let mut available = 0u64;
    while let Some((barcode, is_available)) = probes.next().await {
        info!(
            barcode = %barcode,
            available = is_available,
            "dry-run: would sync if available"
        );
        available += u64::from(is_available);
    }
    drop(probes);

    summary.notes.push(format!(
        "dry-run {label}: {} candidates, {available} with packages available",
        barcodes.len()
    ));
}

/// Fetches detail metadata for volumes that still lack it (or everything,
/// with `refresh_all`).
pub async fn run_enrich(
    session: &Session,
    explicit: Option<&[String]>,
    limit: Option<usize>,
    refresh_all: bool,
) -> Result<RunSummary, PipelineError> {
    let scope = RunScope::begin("enrich");
    let report = enrich::run_enrich(
        &session.client,
        &session.store,
        explicit,
        limit,
        refresh_all,
        &session.shutdown,
    )
    .await?;

    let mut summary = RunSummary {
        enriched: report.enriched,
        ..Default::default()
    };
    if report.unanswered > 0 {
        summary.notes.push(format!(
            "{} volumes got no answer from the detail endpoint",
            report.unanswered
        ));
    }
    session.finish_run(scope, summary)
}

/// Streams the catalog as CSV. Read-only: no lock, so exports can run while
/// a sync is active.
pub fn run_export<W: std::io::Write>(cfg: &RunConfig, out: W) -> Result<u64, PipelineError> {
    let store = Store::open(&cfg.store_path)?;
    Ok(export_csv(&store, out)?)
}

#[derive(Debug, Clone)]
pub struct StatusReport {
    pub counts: StateCounts,
    pub recent_runs: Vec<RunRecord>,
}

/// Read-only snapshot of catalog state and recent runs; takes no lock.
pub fn run_status(cfg: &RunConfig) -> Result<StatusReport, PipelineError> {
    let store = Store::open(&cfg.store_path)?;
    Ok(StatusReport {
        counts: store.state_counts()?,
        recent_runs: store.list_runs(5)?,
    })
}

/// What a single-volume sync produced. Unknown barcodes are reported, not
/// attempted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SingleOutcome {
    Volume(SyncOutcome),
    NotInCatalog,
}

/// Library-style entry point: sync one volume with full run bookkeeping.
/// Equivalent to a sync run over a one-element explicit list.
pub async fn sync_one_volume(
    cfg: RunConfig,
    barcode: &str,
) -> Result<SingleOutcome, PipelineError> {
    let session = Session::begin(cfg, Shutdown::default())?;
    let scope = RunScope::begin("sync");
    session.clean_staging()?;

    let (known, _unknown) = session.store.filter_known(&[barcode.to_owned()])?;
    let mut summary = RunSummary::default();
    let outcome = if known.is_empty() {
        warn!(barcode, "requested barcode is not in the catalog");
        summary.notes.push(format!("unknown barcode: {barcode}"));
        SingleOutcome::NotInCatalog
    } else {
        let outcome = session.engine.sync_volume(barcode).await;
        tally(&mut summary, &outcome);
        SingleOutcome::Volume(outcome)
    };

    summary.staging_pauses = session.engine.staging_pauses();
    info!(
        barcode,
        synced = summary.synced,
        skipped = summary.skipped_identical,
        failed = summary.failed,
        "single volume sync finished"
    );
    session.finish_run(scope, summary)?;
    Ok(outcome)
}

/// Convenience for tests and embedding: a summary line like the CLI prints.
pub fn summarize(stage: &str, summary: &RunSummary) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut push = |label: &str, value: u64| {
        if value > 0 {
            parts.push(format!("{label} {value}"));
        }
    };
    push("listed", summary.volumes_listed);
    push("new", summary.volumes_new);
    push("updated", summary.volumes_updated);
    push("conversions", summary.conversions_requested);
    push("conversion-failures", summary.conversion_failures_seen);
    push("synced", summary.synced);
    push("skipped-identical", summary.skipped_identical);
    push("healed", summary.healed);
    push("unavailable", summary.unavailable);
    push("failed", summary.failed);
    push("enriched", summary.enriched);
    push("rows", summary.exported_rows);
    push("bytes", summary.bytes_downloaded);
    push("staging-pauses", summary.staging_pauses);
    if summary.conversion_queue_full {
        parts.push("conversion-queue-full".to_owned());
    }
    if parts.is_empty() {
        parts.push("nothing to do".to_owned());
    }
    format!("{stage}: {}", parts.join(", "))
}
