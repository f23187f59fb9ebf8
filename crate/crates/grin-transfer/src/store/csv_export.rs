//! Full-catalog CSV export. One row per volume, stable column order,
//! RFC 4180 quoting. List-valued fields (ISBNs, authors, subjects, ...)
//! are joined with `|`; literal pipes and backslashes inside items are
//! escaped so the list splits back unambiguously.

use std::io::Write;

use crate::extraction::MarcMetadata;
use crate::protocol::types::DETAIL_FIELD_NAMES;
use crate::store::{Store, StoreError, VolumeRecord};

/// Separator for list-valued cells.
pub const LIST_SEPARATOR: char = '|';

/// Joins list items for a CSV cell: `\` becomes `\\`, `|` becomes `\|`.
pub fn join_list(items: &[String]) -> String {
    let mut out = String::new();
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push(LIST_SEPARATOR);
        }
        for ch in item.chars() {
            match ch {
                '\\' => out.push_str("\\\\"),
                LIST_SEPARATOR => {
                    out.push('\\');
                    out.push(LIST_SEPARATOR);
                }
                other => out.push(other),
            }
        }
    }
    out
}

/// Inverse of [`join_list`]. An empty cell is an empty list.
pub fn split_list(cell: &str) -> Vec<String> {
    if cell.is_empty() {
        return Vec::new();
    }
    let mut items = Vec::new();
    let mut item = String::new();
    let mut chars = cell.chars();
    while let Some(ch) = chars.next() {
        match ch {
            '\\' => match chars.next() {
                Some(escaped) => item.push(escaped),
                None => item.push('\\'),
            },
            LIST_SEPARATOR => items.push(std::mem::take(&mut item)),
            other => item.push(other),
        }
    }
    items.push(item);
    items
}

/// Header of the export, in emission order.
pub fn csv_columns() -> Vec<&'static str> {
    let mut cols = vec![
        "barcode",
        "state",
        "title",
        "google_books_url",
        "scanned_date",
        "converted_date",
        "downloaded_date",
        "processed_date",
        "analyzed_date",
        "ocr_date",
        "stored_etag",
        "storage_key",
        "last_synced_at",
        "last_error_code",
        "last_error_message",
        "last_error_at",
        "enriched_at",
        "missing_from_listing",
        "marc_control_number",
        "marc_date_type",
        "marc_date_1",
        "marc_date_2",
        "marc_language",
        "marc_lccn",
        "marc_lc_call_number",
        "marc_title",
        "marc_isbns",
        "marc_oclc_numbers",
        "marc_subtitles",
        "marc_personal_authors",
        "marc_corporate_authors",
        "marc_meeting_authors",
        "marc_subjects",
        "marc_genres",
        "marc_general_notes",
    ];
    cols.extend(DETAIL_FIELD_NAMES);
    cols.push("first_seen_at");
    cols.push("updated_at");
    cols
}

/// Writes the whole catalog as CSV. Returns the number of volume rows.
pub fn export_csv<W: Write>(store: &Store, out: W) -> Result<u64, StoreError> {
    let mut writer = csv::Writer::from_writer(out);
    writer
        .write_record(csv_columns())
        .map_err(csv_to_store_error)?;
    let count = store.for_each_record(|record| {
        let row = record_to_row(&record);
        writer.write_record(&row).map_err(csv_to_store_error)
    })?;
    writer.flush()?;
    Ok(count)
}

fn csv_to_store_error(err: csv::Error) -> StoreError {
    match err.into_kind() {
        csv::ErrorKind::Io(io) => StoreError::Io(io),
        other => StoreError::Io(std::io::Error::other(format!("csv: {other:?}"))),
    }
}

fn record_to_row(record: &VolumeRecord) -> Vec<String> {
    let marc = record.marc().unwrap_or_else(MarcMetadata::default);
    let opt = |v: &Option<String>| v.clone().unwrap_or_default();
    // Normalized date when it parsed, otherwise the raw listing value.
    let date = |d: &crate::store::DateColumn| {
        d.parsed.clone().or_else(|| d.raw.clone()).unwrap_or_default()
    };

    let mut row = vec![
        record.barcode.clone(),
        record.state.clone(),
        opt(&record.title),
        opt(&record.google_books_url),
        date(&record.scanned_date),
        date(&record.converted_date),
        date(&record.downloaded_date),
        date(&record.processed_date),
        date(&record.analyzed_date),
        date(&record.ocr_date),
        opt(&record.stored_etag),
        opt(&record.storage_key),
        opt(&record.last_synced_at),
        opt(&record.last_error_code),
        opt(&record.last_error_message),
        opt(&record.last_error_at),
        opt(&record.enriched_at),
        if record.missing_from_listing { "true" } else { "false" }.to_owned(),
        opt(&marc.control_number),
        opt(&marc.date_type),
        opt(&marc.date_1),
        opt(&marc.date_2),
        opt(&marc.language),
        opt(&marc.lccn),
        opt(&marc.lc_call_number),
        opt(&marc.title),
        join_list(&marc.isbns),
        join_list(&marc.oclc_numbers),
        join_list(&marc.subtitles),
        join_list(&marc.personal_authors),
        join_list(&marc.corporate_authors),
        join_list(&marc.meeting_authors),
        join_list(&marc.subjects),
        join_list(&marc.genres),
        join_list(&marc.general_notes),
    ];
    for name in DETAIL_FIELD_NAMES {
        row.push(
            record
                .details
                .fields
                .get(name)
                .cloned()
                .unwrap_or_default(),
        );
    }
    row.push(record.first_seen_at.clone());
    row.push(record.updated_at.clone());
    row
}
