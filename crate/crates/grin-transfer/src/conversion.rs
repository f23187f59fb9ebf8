//! Conversion queue feeding. The service converts volumes asynchronously
//! through a bounded queue; this module keeps that queue fed from the local
//! backlog without overfilling it, and folds reported conversion failures
//! back into the catalog.

use tracing::{info, warn};

use crate::protocol::client::{GrinClient, GrinError};
use crate::protocol::types::{ConversionOutcome, VolumeState};
use crate::shutdown::Shutdown;
use crate::store::{now_utc, QueueKind, Store, StoreError};

/// Barcodes per conversion request. Large enough to amortize the request
/// against the rate limit, small enough that a partially accepted batch
/// wastes little.
pub const CONVERSION_BATCH: usize = 100;

/// Error code recorded on a volume when the service reports its conversion
/// failed.
pub const CONVERSION_FAILURE_CODE: &str = "conversion_failed";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeedReport {
    /// Barcodes submitted in accepted batches.
    pub submitted: u64,
    /// Barcodes the service accepted and we marked in-process.
    pub accepted: u64,
    /// True when the run stopped because the service queue was full.
    pub queue_full: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum FeedError {
    #[error(transparent)]
    Service(#[from] GrinError),
    #[error(transparent)]
    Catalog(#[from] StoreError),
}

/// Submits unconverted volumes for conversion until the backlog, the
/// optional limit, or the service queue runs out.
pub async fn feed_conversions(
    client: &GrinClient,
    store: &Store,
    limit: Option<usize>,
    shutdown: &Shutdown,
) -> Result<FeedReport, FeedError> {
    let candidates = store.select_queue(QueueKind::Unconverted, limit)?;
    submit_conversions(client, store, &candidates, shutdown).await
}

/// Submits an explicit list of barcodes for conversion, stopping when the
/// service queue fills.
pub async fn submit_conversions(
    client: &GrinClient,
    store: &Store,
    candidates: &[String],
    shutdown: &Shutdown,
) -> Result<FeedReport, FeedError> {
    let mut report = FeedReport::default();

    for chunk in candidates.chunks(CONVERSION_BATCH) {
        if shutdown.is_triggered() {
            break;
        }
        report.submitted += chunk.len() as u64;
        match client.request_conversion(chunk).await? {
            ConversionOutcome::Accepted(accepted) => {
                // Accepted counts from the front of the batch, in order.
                // Only those flips to in-process; the tail stays eligible
                // for the next run.
                store.mark_states(&chunk[..accepted], VolumeState::InProcess, &now_utc())?;
                report.accepted += accepted as u64;
                if accepted < chunk.len() {
                    info!(
                        accepted,
                        submitted = chunk.len(),
                        "conversion queue filled mid-batch"
                    );
                    report.queue_full = true;
                    break;
                }
            }
            ConversionOutcome::QueueFull => {
                info!("conversion queue full, stopping feed");
                report.queue_full = true;
                break;
            }
        }
    }

    info!(
        submitted = report.submitted,
        accepted = report.accepted,
        queue_full = report.queue_full,
        "conversion feed finished"
    );
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FailureReport {
    pub reported: u64,
    /// Failures for barcodes the catalog does not know (ignored).
    pub unknown: u64,
}

/// Pulls the service's conversion failure list and records each failure on
/// its volume.
pub async fn reconcile_failures(
    client: &GrinClient,
    store: &Store,
) -> Result<FailureReport, FeedError> {
    let failures = client.fetch_failures().await?;
    let mut report = FailureReport {
        reported: failures.len() as u64,
        unknown: 0,
    };
    let now = now_utc();
    for failure in &failures {
        match store.record_error(
            &failure.barcode,
            CONVERSION_FAILURE_CODE,
            &failure.reason,
            &now,
        ) {
            Ok(()) => {
                store.set_state(&failure.barcode, VolumeState::Failed, &now)?;
            }
            Err(StoreError::UnknownBarcode(_)) => {
                warn!(barcode = %failure.barcode, "failure reported for unknown volume");
                report.unknown += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(report)
}
