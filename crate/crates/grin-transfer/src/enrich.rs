//! Detail enrichment: the listing gives lifecycle dates, the detail
//! endpoint gives per-volume quality and condition assessments. This pass
//! batches detail lookups for volumes that have never been described and
//! folds the answers into the catalog.

use tracing::{info, warn};

use crate::protocol::client::{GrinClient, GrinError};
use crate::shutdown::Shutdown;
use crate::store::{now_utc, Store, StoreError};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnrichReport {
    pub requested: u64,
    pub enriched: u64,
    /// Barcodes we asked about that the service did not describe.
    pub unanswered: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum EnrichError {
    #[error(transparent)]
    Service(#[from] GrinError),
    #[error(transparent)]
    Catalog(#[from] StoreError),
}

/// Enriches volumes missing detail data. An explicit barcode list narrows
/// the pass to those volumes; `refresh_all` re-fetches the whole catalog.
pub async fn run_enrich(
    client: &GrinClient,
    store: &Store,
    explicit: Option<&[String]>,
    limit: Option<usize>,
    refresh_all: bool,
    shutdown: &Shutdown,
) -> Result<EnrichReport, EnrichError> {
    let candidates = if let Some(explicit) = explicit {
        let (known, unknown) = store.filter_known(explicit)?;
        for barcode in &unknown {
            warn!(barcode = %barcode, "requested barcode is not in the catalog");
        }
        let mut known = known;
        if let Some(limit) = limit {
            known.truncate(limit);
        }
        known
    } else if refresh_all {
        let mut all = store.all_barcodes()?;
        if let Some(limit) = limit {
            all.truncate(limit);
        }
        all
    } else {
        store.needing_enrichment(limit)?
    };

    let mut report = EnrichReport::default();
    for chunk in candidates.chunks(client.detail_batch_limit()) {
        if shutdown.is_triggered() {
            break;
        }
        report.requested += chunk.len() as u64;
        let details = client.fetch_book_details(chunk).await?;
        let now = now_utc();
        let mut answered = std::collections::HashSet::new();
        for (barcode, fields) in &details {
            match store.apply_details(barcode, fields, &now) {
                Ok(()) => {
                    answered.insert(barcode.clone());
                    report.enriched += 1;
                }
                Err(StoreError::UnknownBarcode(_)) => {
                    warn!(barcode, "details for a volume the catalog does not know");
                }
                Err(e) => return Err(e.into()),
            }
        }
        report.unanswered += chunk.iter().filter(|b| !answered.contains(*b)).count() as u64;
    }

    info!(
        requested = report.requested,
        enriched = report.enriched,
        unanswered = report.unanswered,
        "enrichment finished"
    );
    Ok(report)
}
