//! Local catalog of every volume the service lists, what was synced where,
//! and what each run did. One SQLite file, opened through versioned
//! migrations, guarded by a session lock file next to it.

pub mod csv_export;
pub mod lock;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, Utc};
use rusqlite::{params, Connection, OptionalExtension, TransactionBehavior};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::extraction::MarcMetadata;
use crate::protocol::types::{DetailFields, VolumeListing, VolumeState, DETAIL_FIELD_NAMES};

/// Newest schema this build reads and writes.
pub const SCHEMA_VERSION: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(
        "catalog schema is version {found} but this build supports up to {supported}; \
         use a newer build or restore the matching snapshot"
    )]
    SchemaTooNew { found: i32, supported: i32 },
    #[error(
        "catalog failed its integrity check ({detail}); restore the most recent \
         snapshot before running again"
    )]
    Corrupt { detail: String },
    #[error("barcode {0:?} is not in the catalog")]
    UnknownBarcode(String),
    #[error("snapshot failed: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Sqlite(#[from] rusqlite::Error),
    #[error("catalog io: {0}")]
    Io(#[from] std::io::Error),
}

pub struct Store {
    conn: Mutex<Connection>,
    path: PathBuf,
}

/// Which volumes a sync run should consider.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueKind {
    /// Never converted: candidates for conversion requests.
    Unconverted,
    /// Converted and (as far as the catalog knows) retrievable now.
    Converted,
    /// Previously downloaded: may need a fresh conversion before retrieval.
    PreviouslyDownloaded,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VolumeRecord {
    pub barcode: String,
    pub state: String,
    pub title: Option<String>,
    pub google_books_url: Option<String>,
    /// (raw as listed, normalized RFC 3339 UTC) per lifecycle date.
    pub scanned_date: DateColumn,
    pub converted_date: DateColumn,
    pub downloaded_date: DateColumn,
    pub processed_date: DateColumn,
    pub analyzed_date: DateColumn,
    pub ocr_date: DateColumn,
    pub stored_etag: Option<String>,
    pub last_synced_at: Option<String>,
    pub storage_key: Option<String>,
    pub last_error_code: Option<String>,
    pub last_error_message: Option<String>,
    pub last_error_at: Option<String>,
    pub marc_json: Option<String>,
    pub details: DetailFields,
    pub enriched_at: Option<String>,
    pub missing_from_listing: bool,
    pub extra_fields: BTreeMap<String, String>,
    pub first_seen_at: String,
    pub updated_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DateColumn {
    pub raw: Option<String>,
    pub parsed: Option<String>,
}

impl VolumeRecord {
    pub fn marc(&self) -> Option<MarcMetadata> {
        self.marc_json
            .as_deref()
            .and_then(|j| serde_json::from_str(j).ok())
    }

    /// The three sync fields are all set or all absent; enforced by a table
    /// constraint, re-checked here for readers.
    pub fn synced(&self) -> bool {
        debug_assert_eq!(self.stored_etag.is_some(), self.last_synced_at.is_some());
        debug_assert_eq!(self.stored_etag.is_some(), self.storage_key.is_some());
        self.stored_etag.is_some()
    }
}

/// Counters a run reports when it finishes. Stored as one JSON document per
/// run, both in the catalog and as a standalone file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(default)]
    pub volumes_listed: u64,
    #[serde(default)]
    pub volumes_new: u64,
    #[serde(default)]
    pub volumes_updated: u64,
    #[serde(default)]
    pub conversions_requested: u64,
    #[serde(default)]
    pub conversion_queue_full: bool,
    #[serde(default)]
    pub conversion_failures_seen: u64,
    #[serde(default)]
    pub synced: u64,
    #[serde(default)]
    pub skipped_identical: u64,
    /// Volumes re-adopted from object storage metadata after catalog loss.
    #[serde(default)]
    pub healed: u64,
    #[serde(default)]
    pub unavailable: u64,
    #[serde(default)]
    pub failed: u64,
    #[serde(default)]
    pub enriched: u64,
    #[serde(default)]
    pub exported_rows: u64,
    #[serde(default)]
    pub bytes_downloaded: u64,
    #[serde(default)]
    pub staging_pauses: u64,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub stage: String,
    pub started_at: String,
    pub ended_at: Option<String>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateCounts {
    pub total: u64,
    pub synced: u64,
    /// (state label, count), labels as the service reports them.
    pub by_state: Vec<(String, u64)>,
}

pub fn now_utc() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true)
}

impl Store {
    /// Opens (creating if needed) the catalog and brings it to the current
    /// schema version. A catalog from a newer build or one that fails the
    /// integrity check is refused with instructions, never modified.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Self::open_at_version(path, SCHEMA_VERSION)
    }

    /// Test seam: stops migrating at `version` so older fixtures can be built.
    #[doc(hidden)]
    pub fn open_at_version(path: &Path, version: i32) -> Result<Self, StoreError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let conn = Connection::open(path).map_err(map_open_error)?;
        conn.busy_timeout(std::time::Duration::from_secs(10))?;

        // First statement to touch the file; surfaces both garbage files
        // (NotADatabase) and internal damage before anything is written.
        let quick_check: String =
            conn.query_row("PRAGMA quick_check", [], |row| row.get(0))
                .map_err(map_open_error)?;
        if quick_check != "ok" {
            return Err(StoreError::Corrupt {
                detail: quick_check,
            });
        }

        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "foreign_keys", "ON")?;

        let found: i32 = conn.query_row("PRAGMA user_version", [], |row| row.get(0))?;
        if found > SCHEMA_VERSION {
            return Err(StoreError::SchemaTooNew {
                found,
                supported: SCHEMA_VERSION,
            });
        }
        let store = Self {
            conn: Mutex::new(conn),
            path: path.to_path_buf(),
        };
        store.migrate(found, version)?;
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn migrate(&self, from: i32, to: i32) -> Result<(), StoreError> {
        let mut conn = self.conn.lock().unwrap();
        for version in (from + 1)..=to {
            let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
            match version {
                1 => tx.execute_batch(SCHEMA_V1)?,
                2 => tx.execute_batch(SCHEMA_V2)?,
                other => unreachable!("no migration defined for version {other}"),
            }
            tx.pragma_update(None, "user_version", version)?;
            tx.commit()?;
            if from > 0 {
                info!(from = version - 1, to = version, "migrated catalog schema");
            }
        }
        Ok(())
    }

    /// Applies one listing page: new volumes inserted, known ones updated,
    /// the resume cursor advanced, all in a single transaction. When
    /// `next_cursor` is `None` the pass is complete: the cursor is cleared
    /// and volumes not seen in this generation are flagged as missing.
    pub fn apply_listing_page(
        &self,
        listings: &[VolumeListing],
        generation: i64,
        next_cursor: Option<&str>,
        now: &str,
    ) -> Result<(u64, u64), StoreError> {
        let mut conn = self.conn.lock().unwrap();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let mut inserted = 0u64;
        let mut updated = 0u64;
        {
            let mut exists_stmt = tx.prepare_cached("SELECT 1 FROM volumes WHERE barcode = ?1")?;
            let mut insert_stmt = tx.prepare_cached(
                "INSERT INTO volumes (
                    barcode, state, title, google_books_url,
                    scanned_date_raw, scanned_date,
                    converted_date_raw, converted_date,
                    downloaded_date_raw, downloaded_date,
                    processed_date_raw, processed_date,
                    analyzed_date_raw, analyzed_date,
                    ocr_date_raw, ocr_date,
                    last_seen_generation, missing_from_listing,
                    first_seen_at, updated_at
                 ) VALUES (?1,?2,?3,?4,?5,?6,?7,?8,?9,?10,?11,?12,?13,?14,?15,?16,?17,0,?18,?18)",
            )?;
            let mut update_stmt = tx.prepare_cached(
                "UPDATE volumes SET
                    state = ?2, title = ?3, google_books_url = ?4,
                    scanned_date_raw = ?5, scanned_date = ?6,
                    converted_date_raw = ?7, converted_date = ?8,
                    downloaded_date_raw = ?9, downloaded_date = ?10,
                    processed_date_raw = ?11, processed_date = ?12,
                    analyzed_date_raw = ?13, analyzed_date = ?14,
                    ocr_date_raw = ?15, ocr_date = ?16,
                    last_seen_generation = ?17, missing_from_listing = 0,
                    updated_at = ?18
                 WHERE barcode = ?1",
            )?;
            let mut clear_extra =
                tx.prepare_cached("DELETE FROM volume_raw_fields WHERE barcode = ?1")?;
            let mut insert_extra = tx.prepare_cached(
                "INSERT INTO volume_raw_fields (barcode, field, value) VALUES (?1, ?2, ?3)",
            )?;

            for listing in listings {
                let exists = exists_stmt
                    .query_row(params![listing.barcode], |_| Ok(()))
                    .optional()?
                    .is_some();
                let dates = [
                    date_pair(&listing.scanned_date),
                    date_pair(&listing.converted_date),
                    date_pair(&listing.downloaded_date),
                    date_pair(&listing.processed_date),
                    date_pair(&listing.analyzed_date),
                    date_pair(&listing.ocr_date),
                ];
                let row = params![
                    listing.barcode,
                    listing.state.as_label(),
                    listing.title,
                    listing.google_books_url,
                    dates[0].0,
                    dates[0].1,
                    dates[1].0,
                    dates[1].1,
                    dates[2].0,
                    dates[2].1,
                    dates[3].0,
                    dates[3].1,
                    dates[4].0,
                    dates[4].1,
                    dates[5].0,
                    dates[5].1,
                    generation,
                    now,
                ];
                if exists {
                    update_stmt.execute(row)?;
                    updated += 1;
                } else {
                    insert_stmt.execute(row)?;
                    inserted += 1;
                }
                clear_extra.execute(params![listing.barcode])?;
                for (field, value) in &listing.extra {
                    insert_extra.execute(params![listing.barcode, field, value])?;
                }
            }

            set_meta_tx(&tx, "collect_generation", &generation.to_string())?;
            match next_cursor {
                Some(cursor) => set_meta_tx(&tx, "collect_cursor", cursor)?,
                None => {
                    tx.execute("DELETE FROM meta WHERE key = 'collect_cursor'", [])?;
                    let flagged = tx.execute(
                        "UPDATE volumes SET missing_from_listing = 1, updated_at = ?2
                         WHERE (last_seen_generation IS NULL OR last_seen_generation <> ?1)
                           AND missing_from_listing = 0",
                        params![generation, now],
                    )?;
                    if flagged > 0 {
                        warn!(flagged, "volumes disappeared from the service listing");
                    }
                }
            }
        }
        tx.commit()?;
        Ok((inserted, updated))
    }

    /// Resume point of an interrupted listing pass, if any.
    pub fn collect_cursor(&self) -> Result<Option<(String, i64)>, StoreError> {
        let cursor = self.get_meta("collect_cursor")?;
        match cursor {
            None => Ok(None),
            Some(cursor) => {
                let generation = self
                    .get_meta("collect_generation")?
                    .and_then(|g| g.parse().ok())
                    .unwrap_or(0);
                Ok(Some((cursor, generation)))
            }
        }
    }

    pub fn current_generation(&self) -> Result<i64, StoreError> {
        Ok(self
            .get_meta("collect_generation")?
            .and_then(|g| g.parse().ok())
            .unwrap_or(0))
    }

    pub fn get_volume(&self, barcode: &str) -> Result<Option<VolumeRecord>, StoreError> {
        let conn = self.conn.lock().unwrap();
        let record = conn
            .query_row(
                &format!("SELECT {} FROM volumes WHERE barcode = ?1", RECORD_COLUMNS),
                params![barcode],
                row_to_record,
            )
            .optional()?;
        let Some(mut record) = record else {
            return Ok(None);
        };
        let mut stmt =
            conn.prepare_cached("SELECT field, value FROM volume_raw_fields WHERE barcode = ?1")?;
        let rows = stmt.query_map(params![barcode], |row| {
            Ok((row.get::<_, String>(0)?, row.get::<_, String>(1)?))
        })?;
        for row in rows {
            let (field, value) = row?;
            record.extra_fields.insert(field, value);
        }
        Ok(Some(record))
    }

    pub fn volume_count(&self) -> Result<u64, StoreError> {
        let conn = self.conn.lock().unwrap();
        Ok(conn.query_row("SELECT COUNT(*) FROM volumes", [], |r| r.get::<_, i64>(0))? as u64)
    }

    pub fn counts_by_state(&self) -> Result<BTreeMap<String, u64>, StoreError> {
        let conn = self.conn.lock().unwrap();
        let mut stmt = conn.prepare("SELECT state, COUNT(*) FROM volumes GROUP BY state")?;
        let rows = stmt.query_map([], |row| {
            Ok((row.get::<_, String>(0)?, row.get::<_, i64>(1)? as u64))
        })?;
        let mut out = BTreeMap::new();
        for row in rows {
            let (state, count) = row?;
            out.insert(state, count);
        }
        Ok(out)
    }

    pub fn synced_count(&self) -> Result<u64, StoreError> {
        let conn = self.conn.lock().unwrap();
        Ok(conn.query_row(
            "SELECT COUNT(*) FROM volumes WHERE stored_etag IS NOT NULL",
            [],
            |r| r.get::<_, i64>(0),
        )? as u64)
    }

    /// Barcodes for a sync queue, ordered by barcode for stable runs.
    /// Volumes that vanished from the listing are excluded.
    pub fn select_queue(
        &self,
        queue: QueueKind,
        limit: Option<usize>,
    ) -> Result<Vec<String>, StoreError> {
        let state = match queue {
            QueueKind::Unconverted => VolumeState::Unconverted,
            QueueKind::Converted => VolumeState::Converted,
            QueueKind::PreviouslyDownloaded => VolumeState::PreviouslyDownloaded,
        };
        let conn = self.conn.lock().unwrap();
        let mut stmt = conn.prepare_cached(
            "SELECT barcode FROM volumes
             WHERE state = ?1 AND missing_from_listing = 0
             ORDER BY barcode
             LIMIT ?2",
        )?;
        let limit = limit.map(|l| l as i64).unwrap_or(-1);
        let rows = stmt.query_map(params![state.as_label(), limit], |row| row.get(0))?;
        rows.collect::<Result<Vec<String>, _>>().map_err(Into::into)
    }

    /// Splits explicit barcodes into (known, unknown) against the catalog.
    /// Inserts a stub row for a barcode the listings have not delivered yet,
    /// so a directed sync can record results before the next collect run.
    /// Returns true when the row was created.
    pub fn ensure_volume(&self, barcode: &str, at: &str) -> Result<bool, StoreError> {
        let conn = self.conn.lock().unwrap();
        let n = conn.execute(
            "INSERT OR IGNORE INTO volumes
                (barcode, state, last_seen_generation, missing_from_listing,
                 first_seen_at, updated_at)
             VALUES (?1, ?2, 0, 0, ?3, ?3)",
            params![barcode, VolumeState::Unconverted.as_label(), at],
        )?;
        Ok(n > 0)
    }

    pub fn filter_known(&self, barcodes: &[String]) -> Result<(Vec<String>, Vec<String>), StoreError> {
        let conn = self.conn.lock().unwrap();
        let mut known = Vec::new();
        let mut unknown = Vec::new();
        let mut stmt = conn.prepare_cached("SELECT 1 FROM volumes WHERE barcode = ?1")?;
        for barcode in barcodes {
            if stmt
                .query_row(params![barcode], |_| Ok(()))
                .optional()?
                .is_some()
            {
                known.push(barcode.clone());
            } else {
                unknown.push(barcode.clone());
            }
        }
        Ok((known, unknown))
    }

    /// Records a completed sync: the stored etag, where the artifact lives,
    /// and when. One UPDATE, so the three fields move together; any prior
    /// error on the volume is cleared.
    pub fn record_sync(
        &self,
        barcode: &str,
        etag: &str,
        storage_key: &str,
        at: &str,
    ) -> Result<(), StoreError> {
        let conn = self.conn.lock().unwrap();
        let n = conn.execute(
            "UPDATE volumes SET
                stored_etag = ?2, storage_key = ?3, last_synced_at = ?4,
                last_error_code = NULL, last_error_message = NULL, last_error_at = NULL,
                updated_at = ?4
             WHERE barcode = ?1",
            params![barcode, etag, storage_key, at],
        )?;
        if n == 0 {
            return Err(StoreError::UnknownBarcode(barcode.to_owned()));
        }
        Ok(())
    }

    pub fn set_marc(&self, barcode: &str, marc: &MarcMetadata) -> Result<(), StoreError> {
        let json = serde_json::to_string(marc).expect("marc serializes");
        let conn = self.conn.lock().unwrap();
        let n = conn.execute(
            "UPDATE volumes SET marc_json = ?2 WHERE barcode = ?1",
            params![barcode, json],
        )?;
        if n == 0 {
            return Err(StoreError::UnknownBarcode(barcode.to_owned()));
        }
        Ok(())
    }

    pub fn record_error(
        &self,
        barcode: &str,
        code: &str,
        message: &str,
        at: &str,
    ) -> Result<(), StoreError> {
        let conn = self.conn.lock().unwrap();
        let n = conn.execute(
            "UPDATE volumes SET
                last_error_code = ?2, last_error_message = ?3, last_error_at = ?4,
                updated_at = ?4
             WHERE barcode = ?1",
            params![barcode, code, message, at],
        )?;
        if n == 0 {
            return Err(StoreError::UnknownBarcode(barcode.to_owned()));
        }
        Ok(())
    }

    /// Volumes the detail endpoint has never described, oldest first.
    pub fn needing_enrichment(&self, limit: Option<usize>) -> Result<Vec<String>, StoreError> {
        let conn = self.conn.lock().unwrap();
        let mut stmt = conn.prepare_cached(
            "SELECT barcode FROM volumes
             WHERE enriched_at IS NULL AND missing_from_listing = 0
             ORDER BY barcode
             LIMIT ?1",
        )?;
        let limit = limit.map(|l| l as i64).unwrap_or(-1);
        let rows = stmt.query_map(params![limit], |row| row.get(0))?;
        rows.collect::<Result<Vec<String>, _>>().map_err(Into::into)
    }

    /// Marks a batch of accepted conversion requests in one transaction, so
    /// a kill mid-batch cannot leave half the acceptances unrecorded.
    pub fn mark_states(
        &self,
        barcodes: &[String],
        state: VolumeState,
        at: &str,
    ) -> Result<(), StoreError> {
        let mut conn = self.conn.lock().unwrap();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        {
            let mut stmt = tx.prepare_cached(
                "UPDATE volumes SET state = ?2, updated_at = ?3 WHERE barcode = ?1",
            )?;
            for barcode in barcodes {
                if stmt.execute(params![barcode, state.as_label(), at])? == 0 {
                    return Err(StoreError::UnknownBarcode(barcode.clone()));
                }
            }
        }
        tx.commit()?;
        Ok(())
    }

    /// Local state transition (e.g. marking a conversion request in-process
    /// or a reported failure). Listing refreshes overwrite this.
    pub fn set_state(&self, barcode: &str, state: VolumeState, at: &str) -> Result<(), StoreError> {
        let conn = self.conn.lock().unwrap();
        let n = conn.execute(
            "UPDATE volumes SET state = ?2, updated_at = ?3 WHERE barcode = ?1",
            params![barcode, state.as_label(), at],
        )?;
        if n == 0 {
            return Err(StoreError::UnknownBarcode(barcode.to_owned()));
        }
        Ok(())
    }

    pub fn apply_details(
        &self,
        barcode: &str,
        details: &DetailFields,
        at: &str,
    ) -> Result<(), StoreError> {
        let conn = self.conn.lock().unwrap();
        let mut sets = vec!["enriched_at = ?2".to_owned(), "updated_at = ?2".to_owned()];
        let mut values: Vec<&dyn rusqlite::types::ToSql> = vec![&barcode, &at];
        let mut idx = 3;
        for name in DETAIL_FIELD_NAMES {
            if let Some(value) = details.fields.get(name) {
                sets.push(format!("{name} = ?{idx}"));
                values.push(value);
                idx += 1;
            }
        }
        let sql = format!(
            "UPDATE volumes SET {} WHERE barcode = ?1",
            sets.join(", ")
        );
        let n = conn.execute(&sql, values.as_slice())?;
        if n == 0 {
            return Err(StoreError::UnknownBarcode(barcode.to_owned()));
        }
        Ok(())
    }

    pub fn write_run(&self, record: &RunRecord) -> Result<(), StoreError> {
        let conn = self.conn.lock().unwrap();
        conn.execute(
            "INSERT INTO runs (run_id, stage, started_at, ended_at, summary_json)
             VALUES (?1, ?2, ?3, ?4, ?5)
             ON CONFLICT(run_id) DO UPDATE SET
                ended_at = excluded.ended_at, summary_json = excluded.summary_json",
            params![
                record.run_id,
                record.stage,
                record.started_at,
                record.ended_at,
                serde_json::to_string(&record.summary).expect("summary serializes"),
            ],
        )?;
        Ok(())
    }

    pub fn list_runs(&self, limit: usize) -> Result<Vec<RunRecord>, StoreError> {
        let conn = self.conn.lock().unwrap();
        let mut stmt = conn.prepare_cached(
            "SELECT run_id, stage, started_at, ended_at, summary_json
             FROM runs ORDER BY started_at DESC, run_id DESC LIMIT ?1",
        )?;
        let rows = stmt.query_map(params![limit as i64], |row| {
            Ok(RunRecord {
                run_id: row.get(0)?,
                stage: row.get(1)?,
                started_at: row.get(2)?,
                ended_at: row.get(3)?,
                summary: serde_json::from_str(&row.get::<_, String>(4)?).unwrap_or_default(),
            })
        })?;
        rows.collect::<Result<Vec<_>, _>>().map_err(Into::into)
    }

    pub fn get_meta(&self, key: &str) -> Result<Option<String>, StoreError> {
        let conn = self.conn.lock().unwrap();
        conn.query_row(
            "SELECT value FROM meta WHERE key = ?1",
            params![key],
            |row| row.get(0),
        )
        .optional()
        .map_err(Into::into)
    }

    pub fn set_meta(&self, key: &str, value: &str) -> Result<(), StoreError> {
        let conn = self.conn.lock().unwrap();
        conn.execute(
            "INSERT INTO meta (key, value) VALUES (?1, ?2)
             ON CONFLICT(key) DO UPDATE SET value = excluded.value",
            params![key, value],
        )?;
        Ok(())
    }

    /// Point-in-time consistent copy of the catalog into `dir`, pruning all
    /// but the newest `retain` snapshots. Returns the snapshot path.
    pub fn snapshot(&self, dir: &Path, retain: usize) -> Result<PathBuf, StoreError> {
        std::fs::create_dir_all(dir)?;
        let stamp = Utc::now().format("%Y%m%dT%H%M%S%6fZ");
        let dest = dir.join(format!("catalog-{stamp}.db"));
        {
            let conn = self.conn.lock().unwrap();
            conn.execute(
                "VACUUM INTO ?1",
                params![dest.to_str().ok_or_else(|| StoreError::Snapshot(format!(
                    "snapshot path {} is not valid UTF-8",
                    dest.display()
                )))?],
            )
            .map_err(|e| StoreError::Snapshot(e.to_string()))?;
        }

        let mut snapshots: Vec<PathBuf> = std::fs::read_dir(dir)?
            .flatten()
            .map(|e| e.path())
            .filter(|p| {
                p.extension().and_then(|e| e.to_str()) == Some("db")
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("catalog-"))
            })
            .collect();
        snapshots.sort();
        while snapshots.len() > retain {
            let oldest = snapshots.remove(0);
            if let Err(err) = std::fs::remove_file(&oldest) {
                warn!(path = %oldest.display(), %err, "could not prune old snapshot");
            }
        }
        info!(path = %dest.display(), "catalog snapshot written");
        Ok(dest)
    }

    /// Every barcode in the catalog, ordered. Used by enrichment and export.
    pub fn all_barcodes(&self) -> Result<Vec<String>, StoreError> {
        let conn = self.conn.lock().unwrap();
        let mut stmt = conn.prepare("SELECT barcode FROM volumes ORDER BY barcode")?;
        let rows = stmt.query_map([], |row| row.get(0))?;
        rows.collect::<Result<Vec<String>, _>>().map_err(Into::into)
    }

    /// Volume counts grouped by service state, plus how many carry a sync
    /// record. Drives the status display.
    pub fn state_counts(&self) -> Result<StateCounts, StoreError> {
        let conn = self.conn.lock().unwrap();
        let mut stmt = conn.prepare(
            "SELECT state, COUNT(*) FROM volumes GROUP BY state ORDER BY state",
        )?;
        let by_state = stmt
            .query_map([], |row| {
                Ok((row.get::<_, String>(0)?, row.get::<_, i64>(1)? as u64))
            })?
            .collect::<Result<Vec<_>, _>>()?;
        let synced: i64 = conn.query_row(
            "SELECT COUNT(*) FROM volumes WHERE stored_etag IS NOT NULL",
            [],
            |row| row.get(0),
        )?;
        let total: i64 = conn.query_row("SELECT COUNT(*) FROM volumes", [], |row| row.get(0))?;
        Ok(StateCounts {
            total: total as u64,
            synced: synced as u64,
            by_state,
        })
    }

    pub(crate) fn for_each_record<F>(&self, mut f: F) -> Result<u64, StoreError>
    where
        F: FnMut(VolumeRecord) -> Result<(), StoreError>,
    {
        let conn = self.conn.lock().unwrap();
        let mut extra_stmt =
            conn.prepare("SELECT field, value FROM volume_raw_fields WHERE barcode = ?1")?;
        let mut stmt = conn.prepare(&format!(
            "SELECT {} FROM volumes ORDER BY barcode",
            RECORD_COLUMNS
        ))?;
        let rows = stmt.query_map([], row_to_record)?;
        let mut count = 0u64;
        for row in rows {
            let mut record = row?;
            let extras = extra_stmt.query_map(params![record.barcode], |row| {
                Ok((row.get::<_, String>(0)?, row.get::<_, String>(1)?))
            })?;
            for extra in extras {
                let (field, value) = extra?;
                record.extra_fields.insert(field, value);
            }
            f(record)?;
            count += 1;
        }
        Ok(count)
    }
}

fn map_open_error(err: rusqlite::Error) -> StoreError {
    if let rusqlite::Error::SqliteFailure(code, ref message) = err {
        if code.code == rusqlite::ErrorCode::NotADatabase {
            return StoreError::Corrupt {
                detail: message.clone().unwrap_or_else(|| "not a database".into()),
            };
        }
    }
    StoreError::Sqlite(err)
}

fn date_pair(raw: &Option<String>) -> (Option<String>, Option<String>) {
    match raw {
        None => (None, None),
        Some(raw) => (Some(raw.clone()), normalize_date(raw)),
    }
}

/// Normalizes the date formats seen in listings to RFC 3339 UTC. Values
/// that do not parse are kept raw-only.
pub fn normalize_date(raw: &str) -> Option<String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return None;
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.with_timezone(&Utc).to_rfc3339_opts(SecondsFormat::Secs, true));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y/%m/%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt.and_utc().to_rfc3339_opts(SecondsFormat::Secs, true));
        }
    }
    for fmt in ["%Y-%m-%d", "%Y/%m/%d"] {
        if let Ok(d) = NaiveDate::parse_from_str(raw, fmt) {
            return Some(
                d.and_hms_opt(0, 0, 0)
                    .expect("midnight is valid")
                    .and_utc()
                    .to_rfc3339_opts(SecondsFormat::Secs, true),
            );
        }
    }
    None
}

fn set_meta_tx(tx: &rusqlite::Transaction<'_>, key: &str, value: &str) -> Result<(), StoreError> {
    tx.execute(
        "INSERT INTO meta (key, value) VALUES (?1, ?2)
         ON CONFLICT(key) DO UPDATE SET value = excluded.value",
        params![key, value],
    )?;
    Ok(())
}

const RECORD_COLUMNS: &str = "barcode, state, title, google_books_url, \
    scanned_date_raw, scanned_date, converted_date_raw, converted_date, \
    downloaded_date_raw, downloaded_date, processed_date_raw, processed_date, \
    analyzed_date_raw, analyzed_date, ocr_date_raw, ocr_date, \
    stored_etag, last_synced_at, storage_key, \
    last_error_code, last_error_message, last_error_at, \
    marc_json, enriched_at, missing_from_listing, first_seen_at, updated_at, \
    biblio_condition, physical_condition, binding_condition, text_condition, \
    page_condition, foldout_condition, tight_margin, brittle, water_damage, \
    mold, missing_pages, duplicate_scan, color_content, handwriting, \
    marginalia, special_handling";

fn row_to_record(row: &rusqlite::Row<'_>) -> rusqlite::Result<VolumeRecord> {
    let mut details = DetailFields::default();
    for (i, name) in DETAIL_FIELD_NAMES.iter().enumerate() {
        if let Some(value) = row.get::<_, Option<String>>(27 + i)? {
            details.fields.insert((*name).to_owned(), value);
        }
    }
    Ok(VolumeRecord {
        barcode: row.get(0)?,
        state: row.get(1)?,
        title: row.get(2)?,
        google_books_url: row.get(3)?,
        scanned_date: DateColumn {
            raw: row.get(4)?,
            parsed: row.get(5)?,
        },
        converted_date: DateColumn {
            raw: row.get(6)?,
            parsed: row.get(7)?,
        },
        downloaded_date: DateColumn {
            raw: row.get(8)?,
            parsed: row.get(9)?,
        },
        processed_date: DateColumn {
            raw: row.get(10)?,
            parsed: row.get(11)?,
        },
        analyzed_date: DateColumn {
            raw: row.get(12)?,
            parsed: row.get(13)?,
        },
        ocr_date: DateColumn {
            raw: row.get(14)?,
            parsed: row.get(15)?,
        },
        stored_etag: row.get(16)?,
        last_synced_at: row.get(17)?,
        storage_key: row.get(18)?,
        last_error_code: row.get(19)?,
        last_error_message: row.get(20)?,
        last_error_at: row.get(21)?,
        marc_json: row.get(22)?,
        enriched_at: row.get(23)?,
        missing_from_listing: row.get::<_, i64>(24)? != 0,
        first_seen_at: row.get(25)?,
        updated_at: row.get(26)?,
        details,
        extra_fields: BTreeMap::new(),
    })
}

/// Initial schema. The sync-state constraint makes "etag, location, and
/// time move together" a property of the file, not just of this code.
const SCHEMA_V1: &str = "
CREATE TABLE volumes (
    barcode TEXT PRIMARY KEY,
    state TEXT NOT NULL DEFAULT 'UNCONVERTED',
    title TEXT,
    google_books_url TEXT,
    scanned_date_raw TEXT, scanned_date TEXT,
    converted_date_raw TEXT, converted_date TEXT,
    downloaded_date_raw TEXT, downloaded_date TEXT,
    processed_date_raw TEXT, processed_date TEXT,
    analyzed_date_raw TEXT, analyzed_date TEXT,
    ocr_date_raw TEXT, ocr_date TEXT,
    stored_etag TEXT,
    last_synced_at TEXT,
    storage_key TEXT,
    last_error_code TEXT,
    last_error_message TEXT,
    last_error_at TEXT,
    marc_json TEXT,
    biblio_condition TEXT,
    physical_condition TEXT,
    binding_condition TEXT,
    text_condition TEXT,
    page_condition TEXT,
    foldout_condition TEXT,
    tight_margin TEXT,
    brittle TEXT,
    water_damage TEXT,
    mold TEXT,
    missing_pages TEXT,
    duplicate_scan TEXT,
    color_content TEXT,
    handwriting TEXT,
    marginalia TEXT,
    special_handling TEXT,
    first_seen_at TEXT NOT NULL,
    updated_at TEXT NOT NULL,
    CHECK ((stored_etag IS NULL) = (last_synced_at IS NULL)
       AND (last_synced_at IS NULL) = (storage_key IS NULL))
);
CREATE INDEX idx_volumes_state ON volumes(state);

CREATE TABLE volume_raw_fields (
    barcode TEXT NOT NULL REFERENCES volumes(barcode) ON DELETE CASCADE,
    field TEXT NOT NULL,
    value TEXT NOT NULL,
    PRIMARY KEY (barcode, field)
);

CREATE TABLE runs (
    run_id TEXT PRIMARY KEY,
    stage TEXT NOT NULL,
    started_at TEXT NOT NULL,
    ended_at TEXT,
    summary_json TEXT NOT NULL
);

CREATE TABLE meta (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
";

/// Adds enrichment bookkeeping and listing-presence tracking.
const SCHEMA_V2: &str = "
ALTER TABLE volumes ADD COLUMN enriched_at TEXT;
ALTER TABLE volumes ADD COLUMN missing_from_listing INTEGER NOT NULL DEFAULT 0;
ALTER TABLE volumes ADD COLUMN last_seen_generation INTEGER;
";

#[cfg(test)]
mod tests {
    use super::*;

    fn listing(barcode: &str, state: VolumeState) -> VolumeListing {
        VolumeListing {
            barcode: barcode.to_owned(),
            state,
            title: Some(format!("Title of {barcode}")),
            scanned_date: Some("2019-03-02".to_owned()),
            ..VolumeListing::default()
        }
    }

    fn open_temp() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(&dir.path().join("catalog.db")).unwrap();
        (dir, store)
    }

    #[test]
    fn fresh_catalog_is_at_current_version() {
        let (_dir, store) = open_temp();
        let conn = store.conn.lock().unwrap();
        let v: i32 = conn.query_row("PRAGMA user_version", [], |r| r.get(0)).unwrap();
        assert_eq!(v, SCHEMA_VERSION);
    }

    #[test]
    fn v1_catalog_migrates_forward_with_data_intact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.db");
        {
            // Write the fixture the way a v1 binary would have: v1 schema
            // only, rows inserted without the later columns.
            let store = Store::open_at_version(&path, 1).unwrap();
            let conn = store.conn.lock().unwrap();
            conn.execute(
                "INSERT INTO volumes (barcode, state, title, stored_etag, last_synced_at,
                                      storage_key, first_seen_at, updated_at)
                 VALUES ('B1', 'CONVERTED', 'Old title', '\"abc\"',
                         '2024-01-01T00:00:00Z', 'packages/B1.tar.gz',
                         '2024-01-01T00:00:00Z', '2024-01-01T00:00:00Z')",
                [],
            )
            .unwrap();
        }
        let store = Store::open(&path).unwrap();
        let record = store.get_volume("B1").unwrap().unwrap();
        assert_eq!(record.stored_etag.as_deref(), Some("\"abc\""));
        assert_eq!(record.title.as_deref(), Some("Old title"));
        assert_eq!(record.enriched_at, None);
        assert!(!record.missing_from_listing);
        let conn = store.conn.lock().unwrap();
        let v: i32 = conn.query_row("PRAGMA user_version", [], |r| r.get(0)).unwrap();
        assert_eq!(v, SCHEMA_VERSION);
    }

    #[test]
    fn newer_catalog_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.db");
        {
            let store = Store::open(&path).unwrap();
            let conn = store.conn.lock().unwrap();
            conn.pragma_update(None, "user_version", SCHEMA_VERSION + 1).unwrap();
        }
        match Store::open(&path) {
            Err(StoreError::SchemaTooNew { found, supported }) => {
                assert_eq!(found, SCHEMA_VERSION + 1);
                assert_eq!(supported, SCHEMA_VERSION);
            }
            Err(other) => panic!("expected SchemaTooNew, got {other:?}"),
            Ok(_) => panic!("newer catalog must be refused"),
        }
    }

    #[test]
    fn corrupt_file_is_refused_with_restore_instruction() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.db");
        std::fs::write(&path, b"this is not a sqlite database, not even close").unwrap();
        match Store::open(&path) {
            Err(StoreError::Corrupt { .. }) => {}
            Err(other) => panic!("expected Corrupt, got {other:?}"),
            Ok(_) => panic!("corrupt catalog must be refused"),
        }
    }

    #[test]
    fn listing_upsert_reports_new_vs_updated() {
        let (_dir, store) = open_temp();
        let now = now_utc();
        let (ins, upd) = store
            .apply_listing_page(
                &[listing("B1", VolumeState::Unconverted), listing("B2", VolumeState::Converted)],
                1,
                Some("offset=2"),
                &now,
            )
            .unwrap();
        assert_eq!((ins, upd), (2, 0));
        assert_eq!(
            store.collect_cursor().unwrap(),
            Some(("offset=2".to_owned(), 1))
        );

        let mut second = listing("B2", VolumeState::PreviouslyDownloaded);
        second.extra.insert("scan_center".into(), "north".into());
        let (ins, upd) = store
            .apply_listing_page(&[second, listing("B3", VolumeState::Unconverted)], 1, None, &now)
            .unwrap();
        assert_eq!((ins, upd), (1, 1));
        assert_eq!(store.collect_cursor().unwrap(), None);

        let b2 = store.get_volume("B2").unwrap().unwrap();
        assert_eq!(b2.state, "PREVIOUSLY_DOWNLOADED");
        assert_eq!(b2.extra_fields.get("scan_center").map(String::as_str), Some("north"));
        // B1 was in the first page but not the second (final) page of the
        // same generation pass, so it survives; only volumes from older
        // generations get flagged.
        assert!(!store.get_volume("B1").unwrap().unwrap().missing_from_listing);
    }

    #[test]
    fn completed_pass_flags_vanished_volumes() {
        let (_dir, store) = open_temp();
        let now = now_utc();
        store
            .apply_listing_page(
                &[listing("B1", VolumeState::Converted), listing("B2", VolumeState::Converted)],
                1,
                None,
                &now,
            )
            .unwrap();
        // Next pass only lists B2.
        store
            .apply_listing_page(&[listing("B2", VolumeState::Converted)], 2, None, &now)
            .unwrap();
        assert!(store.get_volume("B1").unwrap().unwrap().missing_from_listing);
        assert!(!store.get_volume("B2").unwrap().unwrap().missing_from_listing);
        // Queues skip missing volumes.
        assert_eq!(
            store.select_queue(QueueKind::Converted, None).unwrap(),
            vec!["B2".to_owned()]
        );
        // A later pass that lists B1 again clears the flag.
        store
            .apply_listing_page(
                &[listing("B1", VolumeState::Converted), listing("B2", VolumeState::Converted)],
                3,
                None,
                &now,
            )
            .unwrap();
        assert!(!store.get_volume("B1").unwrap().unwrap().missing_from_listing);
    }

    #[test]
    fn sync_fields_move_together() {
        let (_dir, store) = open_temp();
        let now = now_utc();
        store
            .apply_listing_page(&[listing("B1", VolumeState::Converted)], 1, None, &now)
            .unwrap();
        store.record_error("B1", "download", "boom", &now).unwrap();
        store
            .record_sync("B1", "\"etag-1\"", "packages/B1.tar.gz", &now)
            .unwrap();
        let record = store.get_volume("B1").unwrap().unwrap();
        assert!(record.synced());
        assert_eq!(record.storage_key.as_deref(), Some("packages/B1.tar.gz"));
        assert_eq!(record.last_error_code, None, "sync clears the error");

        // The constraint holds at the SQL level too.
        let conn = store.conn.lock().unwrap();
        let err = conn.execute(
            "UPDATE volumes SET stored_etag = NULL WHERE barcode = 'B1'",
            [],
        );
        assert!(err.is_err(), "partial sync state must be rejected");
    }

    #[test]
    fn record_sync_on_unknown_barcode_errors() {
        let (_dir, store) = open_temp();
        assert!(matches!(
            store.record_sync("NOPE", "\"e\"", "k", &now_utc()),
            Err(StoreError::UnknownBarcode(_))
        ));
    }

    #[test]
    fn details_land_in_condition_columns() {
        let (_dir, store) = open_temp();
        let now = now_utc();
        store
            .apply_listing_page(&[listing("B1", VolumeState::Converted)], 1, None, &now)
            .unwrap();
        let mut details = DetailFields::default();
        details.fields.insert("brittle".into(), "severe".into());
        details.fields.insert("mold".into(), "none detected".into());
        store.apply_details("B1", &details, &now).unwrap();
        let record = store.get_volume("B1").unwrap().unwrap();
        assert_eq!(record.details.fields.get("brittle").map(String::as_str), Some("severe"));
        assert_eq!(record.enriched_at.as_deref(), Some(now.as_str()));
    }

    #[test]
    fn date_normalization_handles_listing_formats() {
        assert_eq!(normalize_date("2019-03-02"), Some("2019-03-02T00:00:00Z".into()));
        assert_eq!(
            normalize_date("2019/03/02 13:14:15"),
            Some("2019-03-02T13:14:15Z".into())
        );
        assert_eq!(
            normalize_date("2019-03-02T13:14:15+02:00"),
            Some("2019-03-02T11:14:15Z".into())
        );
        assert_eq!(normalize_date("last tuesday"), None);
        assert_eq!(normalize_date(""), None);
    }

    #[test]
    fn snapshots_rotate_keeping_newest() {
        let (_dir, store) = open_temp();
        let snapdir = _dir.path().join("snapshots");
        let now = now_utc();
        store
            .apply_listing_page(&[listing("B1", VolumeState::Converted)], 1, None, &now)
            .unwrap();
        let mut paths = Vec::new();
        for _ in 0..7 {
            paths.push(store.snapshot(&snapdir, 5).unwrap());
            std::thread::sleep(std::time::Duration::from_millis(2));
        }
        let remaining: Vec<_> = std::fs::read_dir(&snapdir)
            .unwrap()
            .flatten()
            .map(|e| e.path())
            .collect();
        assert_eq!(remaining.len(), 5);
        assert!(remaining.contains(paths.last().unwrap()));
        assert!(!remaining.contains(&paths[0]));
        assert!(!remaining.contains(&paths[1]));

        // Reopening a snapshot yields the same rows.
        let copy = Store::open(paths.last().unwrap()).unwrap();
        assert_eq!(copy.volume_count().unwrap(), 1);
        assert!(copy.get_volume("B1").unwrap().is_some());
    }

    #[test]
    fn runs_round_trip() {
        let (_dir, store) = open_temp();
        let record = RunRecord {
            run_id: "run-1".into(),
            stage: "sync".into(),
            started_at: now_utc(),
            ended_at: Some(now_utc()),
            summary: RunSummary {
                synced: 3,
                skipped_identical: 2,
                conversion_queue_full: true,
                ..RunSummary::default()
            },
        };
        store.write_run(&record).unwrap();
        let listed = store.list_runs(10).unwrap();
        assert_eq!(listed, vec![record]);
    }

    #[test]
    fn queue_selection_orders_and_limits() {
        let (_dir, store) = open_temp();
        let now = now_utc();
        store
            .apply_listing_page(
                &[
                    listing("B3", VolumeState::Converted),
                    listing("B1", VolumeState::Converted),
                    listing("B2", VolumeState::Unconverted),
                ],
                1,
                None,
                &now,
            )
            .unwrap();
        assert_eq!(
            store.select_queue(QueueKind::Converted, None).unwrap(),
            vec!["B1".to_owned(), "B3".to_owned()]
        );
        assert_eq!(
            store.select_queue(QueueKind::Converted, Some(1)).unwrap(),
            vec!["B1".to_owned()]
        );
        assert_eq!(
            store.select_queue(QueueKind::Unconverted, None).unwrap(),
            vec!["B2".to_owned()]
        );

        let (known, unknown) = store
            .filter_known(&["B1".to_owned(), "NOPE".to_owned()])
            .unwrap();
        assert_eq!(known, vec!["B1".to_owned()]);
        assert_eq!(unknown, vec!["NOPE".to_owned()]);
    }

    #[test]
    fn marc_round_trips_through_json_column() {
        let (_dir, store) = open_temp();
        let now = now_utc();
        store
            .apply_listing_page(&[listing("B1", VolumeState::Converted)], 1, None, &now)
            .unwrap();
        let marc = MarcMetadata {
            title: Some("A title".into()),
            isbns: vec!["123".into()],
            ..MarcMetadata::default()
        };
        store.set_marc("B1", &marc).unwrap();
        let record = store.get_volume("B1").unwrap().unwrap();
        assert_eq!(record.marc(), Some(marc));
    }
}
