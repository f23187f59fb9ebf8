//! Listing collection: walk the service's paged volume listing into the
//! catalog. Every page lands in its own transaction together with the page
//! cursor, so a kill at any moment leaves a catalog that resumes from the
//! last committed page instead of starting over.

use tracing::info;

use crate::protocol::client::GrinClient;
use crate::shutdown::Shutdown;
use crate::store::{now_utc, Store, StoreError};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CollectReport {
    pub pages: u64,
    pub listed: u64,
    pub inserted: u64,
    pub updated: u64,
    /// True when this run picked up the cursor of an interrupted one.
    pub resumed: bool,
    /// True when shutdown stopped the walk early; the cursor is saved.
    pub interrupted: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CollectError {
    #[error(transparent)]
    Service(#[from] crate::protocol::client::GrinError),
    #[error(transparent)]
    Catalog(#[from] StoreError),
    #[error("listing repeated page cursor {0:?}, refusing to loop")]
    StuckCursor(String),
}

pub async fn run_collect(
    client: &GrinClient,
    store: &Store,
    shutdown: &Shutdown,
) -> Result<CollectReport, CollectError> {
    let mut report = CollectReport::default();

    let (mut cursor, generation) = match store.collect_cursor()? {
        Some((cursor, generation)) => {
            info!(generation, "resuming interrupted listing walk");
            report.resumed = true;
            (Some(cursor), generation)
        }
        None => (None, store.current_generation()? + 1),
    };

    loop {
        let page = client.list_books_page(cursor.as_deref()).await?;
        if page.next_page_token == cursor && page.next_page_token.is_some() {
            return Err(CollectError::StuckCursor(cursor.unwrap_or_default()));
        }

        let (inserted, updated) = store.apply_listing_page(
            &page.volumes,
            generation,
            page.next_page_token.as_deref(),
            &now_utc(),
        )?;
        report.pages += 1;
        report.listed += page.volumes.len() as u64;
        report.inserted += inserted;
        report.updated += updated;

        cursor = page.next_page_token;
        if cursor.is_none() {
            break;
        }
        if shutdown.is_triggered() {
            info!(pages = report.pages, "shutdown during listing walk, cursor saved");
            report.interrupted = true;
            break;
        }
    }

    info!(
        pages = report.pages,
        listed = report.listed,
        inserted = report.inserted,
        updated = report.updated,
        "listing walk finished"
    );
    Ok(report)
}
