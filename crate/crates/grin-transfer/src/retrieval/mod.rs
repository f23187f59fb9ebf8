//! The per-volume sync engine: probe, download, decrypt, unpack, extract,
//! upload, record. Each stage holds a permit from its own budget so slow
//! stages (decryption, upload) cannot be starved or overrun by fast ones,
//! and the whole pipeline stays inside a fixed resource envelope.

pub mod decrypt;
pub mod staging;
pub mod unpack;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use tokio::sync::Semaphore;
use tracing::{info, warn};

use crate::clock::Clock;
use crate::extraction::{collate_ocr, extract_marc};
use crate::protocol::client::{DownloadOutcome, GrinClient};
use crate::storage::{package_key, text_key, StorageBackend, META_SOURCE_ETAG};
use crate::store::{now_utc, Store};
use decrypt::GpgCliDecryptor;
use staging::StagingMonitor;

/// Stage concurrency budgets. Probes are cheap but rate-limited; downloads
/// saturate bandwidth; decryption burns CPU; uploads compete with downloads
/// for the network.
pub struct StageBudgets {
    pub probe: Arc<Semaphore>,
    pub download: Arc<Semaphore>,
    pub decrypt: Arc<Semaphore>,
    pub upload: Arc<Semaphore>,
}

impl Default for StageBudgets {
    fn default() -> Self {
        Self {
            probe: Arc::new(Semaphore::new(3)),
            download: Arc::new(Semaphore::new(4)),
            decrypt: Arc::new(Semaphore::new(2)),
            upload: Arc::new(Semaphore::new(4)),
        }
    }
}

/// Ordered record of staging-gate activity. Admission decisions and pause
/// transitions append under one lock, so the sequence itself proves that no
/// download was admitted during a pause.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StagingEvent {
    Paused { used: u64, capacity: u64 },
    Resumed,
    DownloadAdmitted { barcode: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SyncOutcome {
    /// Full pipeline ran and the catalog now points at fresh artifacts.
    /// `bytes` counts what came over the network (the encrypted package).
    Synced { pages: usize, bytes: u64 },
    /// Service etag matches what we already stored; nothing moved.
    SkippedIdentical,
    /// The catalog row had no sync record but storage already held an
    /// artifact built from the exact package the service is offering, so
    /// the record was rebuilt from object metadata without a download.
    Healed,
    /// The service has no package for this volume yet.
    NotAvailable,
    Failed { code: String, message: String },
}

impl SyncOutcome {
    /// Stable short label for run summaries.
    pub fn label(&self) -> &'static str {
        match self {
            SyncOutcome::Synced { .. } => "synced",
            SyncOutcome::SkippedIdentical => "skipped_identical",
            SyncOutcome::Healed => "healed",
            SyncOutcome::NotAvailable => "not_available",
            SyncOutcome::Failed { .. } => "failed",
        }
    }
}

struct StageFailure {
    code: &'static str,
    message: String,
}

fn fail<E: std::fmt::Display>(code: &'static str) -> impl FnOnce(E) -> StageFailure {
    move |e| StageFailure {
        code,
        message: e.to_string(),
    }
}

pub struct SyncDeps {
    pub client: Arc<GrinClient>,
    pub store: Arc<Store>,
    pub storage: Arc<dyn StorageBackend>,
    pub decryptor: Arc<GpgCliDecryptor>,
    pub monitor: Arc<StagingMonitor>,
    pub clock: Arc<dyn Clock>,
    /// Key prefix inside the storage backend, may be empty.
    pub storage_prefix: String,
}

/// Serializes watermark checks against admissions: the check, the pause
/// bookkeeping, and the admission record happen under one mutex, so a
/// download can never slip in between "paused" being observed and logged.
struct StagingGate {
    state: std::sync::Mutex<GateState>,
}

#[derive(Default)]
struct GateState {
    paused: bool,
    events: Vec<StagingEvent>,
}

impl StagingGate {
    fn new() -> Self {
        Self {
            state: std::sync::Mutex::new(GateState::default()),
        }
    }

    /// One admission attempt. `Ok(true)`: admitted (and recorded).
    /// `Ok(false)`: staging is at the watermark; try again later.
    fn try_admit(&self, monitor: &StagingMonitor, barcode: &str) -> std::io::Result<bool> {
        let mut state = self.state.lock().unwrap();
        let status = monitor.check()?;
        if status.paused {
            if !state.paused {
                state.paused = true;
                state.events.push(StagingEvent::Paused {
                    used: status.used,
                    capacity: status.capacity,
                });
                warn!(
                    used = status.used,
                    capacity = status.capacity,
                    "staging at watermark, pausing downloads"
                );
            }
            return Ok(false);
        }
        if state.paused {
            state.paused = false;
            state.events.push(StagingEvent::Resumed);
            info!(used = status.used, "staging drained, downloads resume");
        }
        state.events.push(StagingEvent::DownloadAdmitted {
            barcode: barcode.to_owned(),
        });
        Ok(true)
    }

    fn events(&self) -> Vec<StagingEvent> {
        self.state.lock().unwrap().events.clone()
    }

    fn pauses(&self) -> u64 {
        self.state
            .lock()
            .unwrap()
            .events
            .iter()
            .filter(|e| matches!(e, StagingEvent::Paused { .. }))
            .count() as u64
    }
}

/// Which derived artifacts a sync produces besides the package itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncOptions {
    pub extract_marc: bool,
    pub extract_ocr: bool,
}

impl Default for SyncOptions {
    fn default() -> Self {
        Self {
            extract_marc: true,
            extract_ocr: true,
        }
    }
}

pub struct SyncEngine {
    deps: SyncDeps,
    budgets: StageBudgets,
    staging_poll: Duration,
    gate: StagingGate,
    options: SyncOptions,
}

impl SyncEngine {
    pub fn new(deps: SyncDeps) -> Self {
        Self {
            deps,
            budgets: StageBudgets::default(),
            staging_poll: Duration::from_millis(500),
            gate: StagingGate::new(),
            options: SyncOptions::default(),
        }
    }

    pub fn with_staging_poll(mut self, poll: Duration) -> Self {
        self.staging_poll = poll;
        self
    }

    pub fn with_options(mut self, options: SyncOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_budgets(mut self, budgets: StageBudgets) -> Self {
        self.budgets = budgets;
        self
    }

    /// Times the staging watermark pause has engaged.
    pub fn staging_pauses(&self) -> u64 {
        self.gate.pauses()
    }

    /// Ordered staging-gate activity for this engine's lifetime.
    pub fn staging_events(&self) -> Vec<StagingEvent> {
        self.gate.events()
    }

    /// Runs one volume through the full mirror pipeline. Failures are
    /// recorded against the volume in the catalog and folded into the
    /// returned outcome; only the catalog itself failing is irrecoverable
    /// here, and that also surfaces as a `Failed` outcome.
    pub async fn sync_volume(&self, barcode: &str) -> SyncOutcome {
        match self.sync_inner(barcode).await {
            Ok(outcome) => {
                info!(barcode, outcome = outcome.label(), "volume processed");
                outcome
            }
            Err(stage) => {
                warn!(barcode, code = stage.code, error = %stage.message, "volume failed");
                if let Err(e) =
                    self.deps
                        .store
                        .record_error(barcode, stage.code, &stage.message, &now_utc())
                {
                    warn!(barcode, error = %e, "could not record failure in catalog");
                }
                SyncOutcome::Failed {
                    code: stage.code.to_owned(),
                    message: stage.message,
                }
            }
        }
    }

    async fn sync_inner(&self, barcode: &str) -> Result<SyncOutcome, StageFailure> {
        let store = &self.deps.store;
        store
            .ensure_volume(barcode, &now_utc())
            .map_err(fail("catalog"))?;

        let probe = {
            let _permit = self.budgets.probe.acquire().await.expect("budget open");
            self.deps
                .client
                .probe_package(barcode)
                .await
                .map_err(fail("probe"))?
        };
        if !probe.available {
            return Ok(SyncOutcome::NotAvailable);
        }

        let record = store
            .get_volume(barcode)
            .map_err(fail("catalog"))?
            .expect("row ensured above");
        let pkg_key = package_key(&self.deps.storage_prefix, barcode);

        if let (Some(stored), Some(offered)) = (&record.stored_etag, &probe.etag) {
            if stored == offered {
                return Ok(SyncOutcome::SkippedIdentical);
            }
        }

        // Catalog has no sync record (fresh or rebuilt database) but the
        // object store may still hold the artifact. Its metadata names the
        // encrypted package it came from; when that matches what the service
        // is offering now, adopt it instead of re-downloading.
        if record.stored_etag.is_none() {
            if let Some(offered) = &probe.etag {
                let head = self
                    .deps
                    .storage
                    .head_artifact(&pkg_key)
                    .await
                    .map_err(fail("storage"))?;
                if let Some(head) = head {
                    if head.metadata.get(META_SOURCE_ETAG) == Some(offered) {
                        store
                            .record_sync(barcode, offered, &pkg_key, &now_utc())
                            .map_err(fail("catalog"))?;
                        return Ok(SyncOutcome::Healed);
                    }
                }
            }
        }

        self.run_full_pipeline(barcode, &pkg_key, probe.etag.as_deref())
            .await
    }

    async fn run_full_pipeline(
        &self,
        barcode: &str,
        pkg_key: &str,
        probed_etag: Option<&str>,
    ) -> Result<SyncOutcome, StageFailure> {
        let work = self.deps.monitor.root().join(barcode);
        if work.exists() {
            // Leftover from a run that died mid-volume; start clean.
            tokio::fs::remove_dir_all(&work)
                .await
                .map_err(fail("staging"))?;
        }
        tokio::fs::create_dir_all(&work)
            .await
            .map_err(fail("staging"))?;

        let result = self
            .pipeline_stages(barcode, pkg_key, probed_etag, &work)
            .await;
        // Staging space is the scarce resource; reclaim it no matter what.
        if let Err(e) = tokio::fs::remove_dir_all(&work).await {
            if e.kind() != std::io::ErrorKind::NotFound {
                warn!(barcode, error = %e, "could not clean staging dir");
            }
        }
        result
    }

    async fn pipeline_stages(
        &self,
        barcode: &str,
        pkg_key: &str,
        probed_etag: Option<&str>,
        work: &Path,
    ) -> Result<SyncOutcome, StageFailure> {
        let encrypted = work.join("package.tar.gz.gpg");
        let (downloaded_etag, downloaded_bytes) = {
            let _permit = self.budgets.download.acquire().await.expect("budget open");
            // Admission is checked as the last thing before the GET goes
            // out, while holding a download slot, so the watermark bounds
            // actual network activity and not just intent.
            while !self
                .gate
                .try_admit(&self.deps.monitor, barcode)
                .map_err(fail("staging"))?
            {
                self.deps.clock.sleep(self.staging_poll).await;
            }
            match self
                .deps
                .client
                .download_package(barcode, &encrypted)
                .await
                .map_err(fail("download"))?
            {
                DownloadOutcome::Unavailable => return Ok(SyncOutcome::NotAvailable),
                DownloadOutcome::Downloaded { etag, bytes } => (etag, bytes),
            }
        };

        // The etag of record is whatever the GET reported; the probe's
        // answer may be a conversion behind. A service that sends none gets
        // a digest of the encrypted bytes so the sync record stays complete,
        // though skip-if-identical then never fires for it.
        let etag = match downloaded_etag.or_else(|| probed_etag.map(str::to_owned)) {
            Some(etag) => etag,
            None => format!("sha256:{}", file_sha256(&encrypted).await.map_err(fail("download"))?),
        };

        let decrypted = work.join("package.tar.gz");
        {
            let _permit = self.budgets.decrypt.acquire().await.expect("budget open");
            self.deps
                .decryptor
                .decrypt(&encrypted, &decrypted)
                .await
                .map_err(fail("decrypt"))?;
        }
        // The ciphertext has served its purpose; free its staging footprint
        // before unpacking doubles the plaintext.
        let _ = tokio::fs::remove_file(&encrypted).await;

        let unpacked = work.join("unpacked");
        {
            let decrypted = decrypted.clone();
            let unpacked = unpacked.clone();
            tokio::task::spawn_blocking(move || unpack::unpack_archive(&decrypted, &unpacked))
                .await
                .expect("unpack task not cancelled")
                .map_err(fail("unpack"))?
        };

        let volume_dir = locate_volume_dir(&unpacked).map_err(fail("extract"))?;
        let marc = if self.options.extract_marc {
            let mets_path = find_mets(&volume_dir).ok_or(StageFailure {
                code: "extract",
                message: format!("no METS xml under {}", volume_dir.display()),
            })?;
            let xml = tokio::fs::read_to_string(&mets_path)
                .await
                .map_err(fail("extract"))?;
            Some(extract_marc(&xml).map_err(fail("extract"))?)
        } else {
            None
        };

        let text_path = work.join("text.jsonl");
        let ocr = if self.options.extract_ocr {
            let artifact = {
                let volume_dir = volume_dir.clone();
                let text_path = text_path.clone();
                tokio::task::spawn_blocking(move || collate_ocr(&volume_dir, &text_path))
                    .await
                    .expect("collate task not cancelled")
                    .map_err(fail("ocr"))?
            };
            if artifact.reindexed {
                warn!(barcode, pages = artifact.pages, "page numbering had gaps, order rebuilt");
            }
            Some(artifact)
        } else {
            None
        };

        let mut metadata = std::collections::BTreeMap::new();
        metadata.insert(META_SOURCE_ETAG.to_owned(), etag.clone());
        {
            let _permit = self.budgets.upload.acquire().await.expect("budget open");
            self.deps
                .storage
                .put_artifact(pkg_key, &decrypted, &metadata)
                .await
                .map_err(fail("upload"))?;
            if ocr.is_some() {
                self.deps
                    .storage
                    .put_artifact(
                        &text_key(&self.deps.storage_prefix, barcode),
                        &text_path,
                        &metadata,
                    )
                    .await
                    .map_err(fail("upload"))?;
            }
        }

        // Metadata first, then the sync record: the record is the commit
        // point, and a crash between the two leaves a volume that simply
        // re-syncs next run.
        if let Some(marc) = &marc {
            self.deps
                .store
                .set_marc(barcode, marc)
                .map_err(fail("catalog"))?;
        }
        self.deps
            .store
            .record_sync(barcode, &etag, pkg_key, &now_utc())
            .map_err(fail("catalog"))?;

        Ok(SyncOutcome::Synced {
            pages: ocr.map(|o| o.pages).unwrap_or(0),
            bytes: downloaded_bytes,
        })
    }
}

/// Packages usually wrap everything in a single top-level directory; accept
/// that or a flat layout.
fn locate_volume_dir(unpacked: &Path) -> std::io::Result<PathBuf> {
    let entries: Vec<_> = std::fs::read_dir(unpacked)?.collect::<Result<_, _>>()?;
    if entries.len() == 1 && entries[0].file_type()?.is_dir() {
        return Ok(entries[0].path());
    }
    Ok(unpacked.to_owned())
}

fn find_mets(volume_dir: &Path) -> Option<PathBuf> {
    let mut xml_fallback = None;
    for entry in std::fs::read_dir(volume_dir).ok()?.flatten() {
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().to_lowercase();
        if !name.ends_with(".xml") {
            continue;
        }
        if name.contains("mets") {
            return Some(path);
        }
        xml_fallback.get_or_insert(path);
    }
    xml_fallback
}

async fn file_sha256(path: &Path) -> std::io::Result<String> {
    let path = path.to_owned();
    tokio::task::spawn_blocking(move || {
        use sha2::Digest;
        use std::io::Read;
        let mut file = std::fs::File::open(path)?;
        let mut hasher = sha2::Sha256::new();
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        Ok(hex::encode(hasher.finalize()))
    })
    .await
    .expect("hash task not cancelled")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_dir_descends_into_single_wrapper() {
        let dir = tempfile::tempdir().unwrap();
        let inner = dir.path().join("B0042");
        std::fs::create_dir(&inner).unwrap();
        std::fs::write(inner.join("B0042_METS.xml"), "<mets/>").unwrap();
        assert_eq!(locate_volume_dir(dir.path()).unwrap(), inner);
    }

    #[test]
    fn volume_dir_accepts_flat_layout() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("METS.xml"), "<mets/>").unwrap();
        std::fs::write(dir.path().join("00000001.txt"), "page").unwrap();
        assert_eq!(locate_volume_dir(dir.path()).unwrap(), dir.path());
    }

    #[test]
    fn mets_discovery_prefers_mets_named_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("other.xml"), "<x/>").unwrap();
        std::fs::write(dir.path().join("B1_METS.xml"), "<mets/>").unwrap();
        assert_eq!(
            find_mets(dir.path()).unwrap().file_name().unwrap(),
            "B1_METS.xml"
        );

        let flat = tempfile::tempdir().unwrap();
        std::fs::write(flat.path().join("meta.xml"), "<x/>").unwrap();
        assert_eq!(find_mets(flat.path()).unwrap().file_name().unwrap(), "meta.xml");
        assert_eq!(find_mets(Path::new("/nonexistent")), None);
    }
}
