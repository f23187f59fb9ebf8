//! Wire-facing types shared by the client, store, and pipeline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Conversion state a volume reports in listings. The service encodes
/// "not yet requested" as an empty string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VolumeState {
    Unconverted,
    InProcess,
    Converted,
    PreviouslyDownloaded,
    Failed,
}

impl VolumeState {
    pub fn as_wire(&self) -> &'static str {
        match self {
            VolumeState::Unconverted => "",
            VolumeState::InProcess => "IN_PROCESS",
            VolumeState::Converted => "CONVERTED",
            VolumeState::PreviouslyDownloaded => "PREVIOUSLY_DOWNLOADED",
            VolumeState::Failed => "FAILED",
        }
    }

    pub fn from_wire(s: &str) -> Result<Self, UnknownState> {
        match s {
            "" => Ok(VolumeState::Unconverted),
            "IN_PROCESS" => Ok(VolumeState::InProcess),
            "CONVERTED" => Ok(VolumeState::Converted),
            "PREVIOUSLY_DOWNLOADED" => Ok(VolumeState::PreviouslyDownloaded),
            "FAILED" => Ok(VolumeState::Failed),
            other => Err(UnknownState(other.to_owned())),
        }
    }

    /// Column value used in the local database and CSV export.
    pub fn as_label(&self) -> &'static str {
        match self {
            VolumeState::Unconverted => "UNCONVERTED",
            VolumeState::InProcess => "IN_PROCESS",
            VolumeState::Converted => "CONVERTED",
            VolumeState::PreviouslyDownloaded => "PREVIOUSLY_DOWNLOADED",
            VolumeState::Failed => "FAILED",
        }
    }

    pub fn from_label(s: &str) -> Result<Self, UnknownState> {
        match s {
            "UNCONVERTED" => Ok(VolumeState::Unconverted),
            other => Self::from_wire(other),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("unknown volume state {0:?}")]
pub struct UnknownState(pub String);

/// One row of the library listing as parsed off the wire. Date columns are
/// kept verbatim; normalization happens when the row is stored.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VolumeListing {
    pub barcode: String,
    pub state: VolumeState,
    pub title: Option<String>,
    pub google_books_url: Option<String>,
    pub scanned_date: Option<String>,
    pub converted_date: Option<String>,
    pub downloaded_date: Option<String>,
    pub processed_date: Option<String>,
    pub analyzed_date: Option<String>,
    pub ocr_date: Option<String>,
    /// Columns the parser does not recognize, preserved name -> value.
    pub extra: BTreeMap<String, String>,
}

impl Default for VolumeState {
    fn default() -> Self {
        VolumeState::Unconverted
    }
}

/// Result of a HEAD probe against a volume's package.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackageProbe {
    pub barcode: String,
    pub available: bool,
    pub etag: Option<String>,
    pub content_length: Option<u64>,
}

impl PackageProbe {
    pub fn available(barcode: String, etag: Option<String>, content_length: Option<u64>) -> Self {
        Self {
            barcode,
            available: true,
            etag,
            content_length,
        }
    }

    pub fn missing(barcode: String) -> Self {
        Self {
            barcode,
            available: false,
            etag: None,
            content_length: None,
        }
    }
}

/// Outcome of submitting a batch of barcodes for conversion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConversionOutcome {
    /// The service accepted this many barcodes, in submission order. Fewer
    /// than submitted means the conversion queue filled mid-batch.
    Accepted(usize),
    /// The conversion queue is full; nothing was accepted.
    QueueFull,
}

/// A conversion failure reported by the service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailureEntry {
    pub barcode: String,
    pub reason: String,
}

/// Per-volume descriptive fields returned by the detail endpoint. All are
/// free-text assessments and are stored verbatim.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetailFields {
    pub fields: BTreeMap<String, String>,
}

/// Columns the detail endpoint may return, in export order.
pub const DETAIL_FIELD_NAMES: [&str; 16] = [
    "biblio_condition",
    "physical_condition",
    "binding_condition",
    "text_condition",
    "page_condition",
    "foldout_condition",
    "tight_margin",
    "brittle",
    "water_damage",
    "mold",
    "missing_pages",
    "duplicate_scan",
    "color_content",
    "handwriting",
    "marginalia",
    "special_handling",
];

/// Addressable service endpoints, relative to the library directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Paged listing of every volume in the library directory.
    AllBooks { page_token: Option<String> },
    /// Conversion request; barcodes go in the body, one per line.
    ConversionRequest,
    /// Listing of conversion failures with reasons.
    Failures,
    /// Detail fields for up to a batch of barcodes.
    BookDetails { barcodes: Vec<String> },
    /// Encrypted package for one volume.
    Package { barcode: String },
}

/// Percent-encode everything outside RFC 3986 unreserved characters.
const URL_UNSAFE: &percent_encoding::AsciiSet = &percent_encoding::NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'.')
    .remove(b'_')
    .remove(b'~');

impl Endpoint {
    /// Path and query under the service root for the given directory.
    pub fn path(&self, library_directory: &str) -> String {
        use percent_encoding::utf8_percent_encode;
        let dir = utf8_percent_encode(library_directory, URL_UNSAFE);
        match self {
            Endpoint::AllBooks { page_token } => match page_token {
                Some(token) => format!(
                    "/libraries/{dir}/_all_books?page_token={}",
                    utf8_percent_encode(token, URL_UNSAFE)
                ),
                None => format!("/libraries/{dir}/_all_books"),
            },
            Endpoint::ConversionRequest => format!("/libraries/{dir}/_convert"),
            Endpoint::Failures => format!("/libraries/{dir}/_failures"),
            Endpoint::BookDetails { barcodes } => {
                let joined = barcodes.join(",");
                format!(
                    "/libraries/{dir}/_book_details?barcodes={}",
                    utf8_percent_encode(&joined, URL_UNSAFE)
                )
            }
            Endpoint::Package { barcode } => {
                format!(
                    "/libraries/{dir}/{}.tar.gz.gpg",
                    utf8_percent_encode(barcode, URL_UNSAFE)
                )
            }
        }
    }
}

/// Validates a barcode before it is put on the wire or used as a path
/// component. Barcodes are opaque identifiers, but whitespace, slashes, or
/// control characters would corrupt URLs, listings, and staging paths.
pub fn validate_barcode(barcode: &str) -> Result<(), InvalidBarcode> {
    if barcode.is_empty() {
        return Err(InvalidBarcode {
            barcode: barcode.to_owned(),
            problem: "empty",
        });
    }
    if barcode.len() > 128 {
        return Err(InvalidBarcode {
            barcode: barcode.to_owned(),
            problem: "longer than 128 bytes",
        });
    }
    for ch in barcode.chars() {
        if ch.is_whitespace() || ch.is_control() || ch == '/' || ch == '\\' || ch == ',' {
            return Err(InvalidBarcode {
                barcode: barcode.to_owned(),
                problem: "contains whitespace, separator, or control characters",
            });
        }
    }
    Ok(())
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("invalid barcode {barcode:?}: {problem}")]
pub struct InvalidBarcode {
    pub barcode: String,
    pub problem: &'static str,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_round_trips_through_wire_form() {
        for state in [
            VolumeState::Unconverted,
            VolumeState::InProcess,
            VolumeState::Converted,
            VolumeState::PreviouslyDownloaded,
            VolumeState::Failed,
        ] {
            assert_eq!(VolumeState::from_wire(state.as_wire()), Ok(state));
            assert_eq!(VolumeState::from_label(state.as_label()), Ok(state));
        }
        assert!(VolumeState::from_wire("BOGUS").is_err());
    }

    #[test]
    fn endpoint_paths_are_stable() {
        assert_eq!(
            Endpoint::AllBooks { page_token: None }.path("HVD"),
            "/libraries/HVD/_all_books"
        );
        assert_eq!(
            Endpoint::AllBooks {
                page_token: Some("offset=200".into())
            }
            .path("HVD"),
            "/libraries/HVD/_all_books?page_token=offset%3D200"
        );
        assert_eq!(
            Endpoint::Package {
                barcode: "32044001234567".into()
            }
            .path("HVD"),
            "/libraries/HVD/32044001234567.tar.gz.gpg"
        );
        assert_eq!(
            Endpoint::BookDetails {
                barcodes: vec!["A1".into(), "A2".into()]
            }
            .path("HVD"),
            "/libraries/HVD/_book_details?barcodes=A1%2CA2"
        );
    }

    #[test]
    fn barcode_validation_rejects_path_hazards() {
        assert!(validate_barcode("32044-001_234.567").is_ok());
        assert!(validate_barcode("").is_err());
        assert!(validate_barcode("a b").is_err());
        assert!(validate_barcode("a/b").is_err());
        assert!(validate_barcode("a\tb").is_err());
        assert!(validate_barcode("a,b").is_err());
        assert!(validate_barcode(&"x".repeat(200)).is_err());
    }
}
