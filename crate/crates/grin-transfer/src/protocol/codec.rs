//! Parsers for the tab-separated bodies the service returns.
//!
//! Wire format, shared by listings, failure reports, and detail lookups:
//! the first line is a header naming each column; every following line is
//! one record. Cells are escaped with `\t`, `\n`, `\r`, and `\\`; any other
//! backslash sequence is an error. A trailing newline is optional.

use std::collections::BTreeMap;

use crate::protocol::types::{
    DetailFields, FailureEntry, VolumeListing, VolumeState, DETAIL_FIELD_NAMES,
};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("response body is empty")]
    Empty,
    #[error("header is missing required column {0:?}")]
    MissingColumn(&'static str),
    #[error("line {line}: expected {expected} cells, found {found}")]
    CellCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: bad escape sequence `\\{}`", *found as char)]
    BadEscape { line: usize, found: u8 },
    #[error("line {line}: truncated escape at end of cell")]
    TruncatedEscape { line: usize },
    #[error("line {line}: {source}")]
    State {
        line: usize,
        #[source]
        source: crate::protocol::types::UnknownState,
    },
    #[error("line {line}: empty barcode")]
    EmptyBarcode { line: usize },
    #[error("line {line}: duplicate column {column:?}")]
    DuplicateColumn { line: usize, column: String },
}

pub fn parse_listing(body: &str) -> Result<Vec<VolumeListing>, CodecError> {
    let table = parse_table(body)?;
    let barcode_idx = table.require("barcode")?;
    let state_idx = table.column("state");

    let known: &[&str] = &[
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
    ];

    let mut out = Vec::with_capacity(table.rows.len());
    for (line, row) in table.rows {
        let mut listing = VolumeListing {
            barcode: row[barcode_idx].clone(),
            ..VolumeListing::default()
        };
        if listing.barcode.is_empty() {
            return Err(CodecError::EmptyBarcode { line });
        }
        if let Some(idx) = state_idx {
            listing.state = VolumeState::from_wire(&row[idx])
                .map_err(|source| CodecError::State { line, source })?;
        }
        for (idx, name) in table.header.iter().enumerate() {
            let value = &row[idx];
            if value.is_empty() {
                continue;
            }
            match name.as_str() {
                "barcode" | "state" => {}
                "title" => listing.title = Some(value.clone()),
                "google_books_url" => listing.google_books_url = Some(value.clone()),
                "scanned_date" => listing.scanned_date = Some(value.clone()),
                "converted_date" => listing.converted_date = Some(value.clone()),
                "downloaded_date" => listing.downloaded_date = Some(value.clone()),
                "processed_date" => listing.processed_date = Some(value.clone()),
                "analyzed_date" => listing.analyzed_date = Some(value.clone()),
                "ocr_date" => listing.ocr_date = Some(value.clone()),
                other => {
                    debug_assert!(!known.contains(&other));
                    listing.extra.insert(other.to_owned(), value.clone());
                }
            }
        }
        out.push(listing);
    }
    Ok(out)
}

pub fn parse_failures(body: &str) -> Result<Vec<FailureEntry>, CodecError> {
    let table = parse_table(body)?;
    let barcode_idx = table.require("barcode")?;
    let reason_idx = table.require("reason")?;
    let mut out = Vec::with_capacity(table.rows.len());
    for (line, row) in table.rows {
        if row[barcode_idx].is_empty() {
            return Err(CodecError::EmptyBarcode { line });
        }
        out.push(FailureEntry {
            barcode: row[barcode_idx].clone(),
            reason: row[reason_idx].clone(),
        });
    }
    Ok(out)
}

pub fn parse_details(body: &str) -> Result<Vec<(String, DetailFields)>, CodecError> {
    let table = parse_table(body)?;
    let barcode_idx = table.require("barcode")?;
    let mut out = Vec::with_capacity(table.rows.len());
    for (line, row) in table.rows {
        if row[barcode_idx].is_empty() {
            return Err(CodecError::EmptyBarcode { line });
        }
        let mut fields = BTreeMap::new();
        for (idx, name) in table.header.iter().enumerate() {
            if idx == barcode_idx || row[idx].is_empty() {
                continue;
            }
            if DETAIL_FIELD_NAMES.contains(&name.as_str()) {
                fields.insert(name.clone(), row[idx].clone());
            }
        }
        out.push((row[barcode_idx].clone(), DetailFields { fields }));
    }
    Ok(out)
}

struct Table {
    header: Vec<String>,
    /// (1-based source line, cells) pairs.
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn require(&self, name: &'static str) -> Result<usize, CodecError> {
        self.column(name).ok_or(CodecError::MissingColumn(name))
    }
}

fn parse_table(body: &str) -> Result<Table, CodecError> {
    let mut lines = body.split('\n').enumerate();
    let (_, header_line) = lines.next().filter(|(_, l)| !l.is_empty()).ok_or(CodecError::Empty)?;
    let header = split_cells(header_line, 1)?;
    {
        let mut seen = std::collections::HashSet::new();
        for name in &header {
            if !seen.insert(name) {
                return Err(CodecError::DuplicateColumn {
                    line: 1,
                    column: name.clone(),
                });
            }
        }
    }

    let mut rows = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.is_empty() {
            // Only a trailing newline may produce an empty segment.
            continue;
        }
        let cells = split_cells(raw, line)?;
        if cells.len() != header.len() {
            return Err(CodecError::CellCount {
                line,
                expected: header.len(),
                found: cells.len(),
            });
        }
        rows.push((line, cells));
    }
    Ok(Table { header, rows })
}

fn split_cells(line: &str, line_no: usize) -> Result<Vec<String>, CodecError> {
    let mut cells = Vec::new();
    let mut cell = String::new();
    let mut chars = line.chars();
    while let Some(ch) = chars.next() {
        match ch {
            '\t' => cells.push(std::mem::take(&mut cell)),
            '\\' => match chars.next() {
                Some('t') => cell.push('\t'),
                Some('n') => cell.push('\n'),
                Some('r') => cell.push('\r'),
                Some('\\') => cell.push('\\'),
                Some(other) => {
                    return Err(CodecError::BadEscape {
                        line: line_no,
                        found: if other.is_ascii() { other as u8 } else { b'?' },
                    })
                }
                None => return Err(CodecError::TruncatedEscape { line: line_no }),
            },
            other => cell.push(other),
        }
    }
    cells.push(cell);
    Ok(cells)
}

/// Escapes one cell for the wire format. The client only parses, but the
/// inverse lives here so round-trip properties can be stated in one place.
pub fn escape_cell(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for ch in value.chars() {
        match ch {
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\\' => out.push_str("\\\\"),
            other => out.push(other),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_a_listing_page() {
        let body = "barcode\tstate\ttitle\tscanned_date\tscan_center\n\
                    B001\t\tA plain title\t2019-03-02\tcenter-1\n\
                    B002\tCONVERTED\tTabs\\there\t\tcenter-2\n\
                    B003\tPREVIOUSLY_DOWNLOADED\t\t2020-11-30\t\n";
        let rows = parse_listing(body).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].barcode, "B001");
        assert_eq!(rows[0].state, VolumeState::Unconverted);
        assert_eq!(rows[0].title.as_deref(), Some("A plain title"));
        assert_eq!(rows[0].extra.get("scan_center").map(String::as_str), Some("center-1"));
        assert_eq!(rows[1].state, VolumeState::Converted);
        assert_eq!(rows[1].title.as_deref(), Some("Tabs\there"));
        assert_eq!(rows[1].scanned_date, None);
        assert_eq!(rows[2].state, VolumeState::PreviouslyDownloaded);
        assert!(rows[2].extra.is_empty());
    }

    #[test]
    fn rejects_malformed_bodies() {
        assert_eq!(parse_listing(""), Err(CodecError::Empty));
        assert_eq!(
            parse_listing("title\tstate\nX\t\n"),
            Err(CodecError::MissingColumn("barcode"))
        );
        assert!(matches!(
            parse_listing("barcode\tstate\nB1\tCONVERTED\textra\n"),
            Err(CodecError::CellCount { line: 2, expected: 2, found: 3 })
        ));
        assert!(matches!(
            parse_listing("barcode\tstate\nB1\tNOT_A_STATE\n"),
            Err(CodecError::State { line: 2, .. })
        ));
        assert!(matches!(
            parse_listing("barcode\nB\\q\n"),
            Err(CodecError::BadEscape { line: 2, found: b'q' })
        ));
        assert!(matches!(
            parse_listing("barcode\nB1\\"),
            Err(CodecError::TruncatedEscape { line: 2 })
        ));
        assert!(matches!(
            parse_listing("barcode\tbarcode\nB1\tB2\n"),
            Err(CodecError::DuplicateColumn { .. })
        ));
        assert!(matches!(
            parse_listing("barcode\tstate\n\tCONVERTED\n"),
            Err(CodecError::EmptyBarcode { line: 2 })
        ));
    }

    #[test]
    fn parses_failures_and_details() {
        let fails = parse_failures("barcode\treason\nB009\tSOURCE_IMAGE_MISSING\n").unwrap();
        assert_eq!(
            fails,
            vec![FailureEntry {
                barcode: "B009".into(),
                reason: "SOURCE_IMAGE_MISSING".into()
            }]
        );

        let details =
            parse_details("barcode\tbrittle\tmold\tunknown_col\nB001\tsevere\t\tx\n").unwrap();
        assert_eq!(details.len(), 1);
        assert_eq!(details[0].0, "B001");
        assert_eq!(
            details[0].1.fields.get("brittle").map(String::as_str),
            Some("severe")
        );
        assert!(!details[0].1.fields.contains_key("mold"));
        assert!(!details[0].1.fields.contains_key("unknown_col"));
    }

    proptest! {
        /// Any cell survives escape -> embed in a row -> parse.
        #[test]
        fn escape_round_trips(value in "(?s).{0,64}", extra in "[a-z0-9_]{1,12}") {
            prop_assume!(extra != "barcode" && extra != "state");
            let body = format!(
                "barcode\tstate\t{extra}\nB1\tCONVERTED\t{}\n",
                escape_cell(&value)
            );
            let rows = parse_listing(&body).unwrap();
            prop_assert_eq!(rows.len(), 1);
            let got = rows[0].extra.get(&extra).cloned().unwrap_or_default();
            prop_assert_eq!(got, value);
        }

        /// The parser never panics on arbitrary input.
        #[test]
        fn parser_is_total(body in "(?s).{0,256}") {
            let _ = parse_listing(&body);
            let _ = parse_failures(&body);
            let _ = parse_details(&body);
        }
    }
}
