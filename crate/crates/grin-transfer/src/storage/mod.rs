//! Artifact storage behind one trait so the pipeline does not care whether
//! packages land on a local filesystem or in an S3-compatible bucket.
//! Object metadata carries the service etag of the encrypted package, which
//! is what makes skip-if-identical survive a lost catalog.

pub mod localfs;
pub mod s3;
pub mod sigv4;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use async_trait::async_trait;

/// Metadata key holding the service's etag for the encrypted package an
/// artifact was derived from.
pub const META_SOURCE_ETAG: &str = "grin_encrypted_etag";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactHead {
    pub size: u64,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutReceipt {
    pub key: String,
    pub size: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("storage io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid storage key {key:?}: {problem}")]
    InvalidKey { key: String, problem: &'static str },
    #[error("object store request failed: {0}")]
    Remote(String),
    #[error("multipart upload of {key} aborted after part failures: {detail}")]
    MultipartAborted { key: String, detail: String },
}

#[async_trait]
pub trait StorageBackend: Send + Sync {
    /// Uploads the file at `source` to `key`, attaching `metadata`.
    /// Replaces any existing object. Readers never observe a partial
    /// object: implementations stage or multipart-commit atomically.
    async fn put_artifact(
        &self,
        key: &str,
        source: &Path,
        metadata: &BTreeMap<String, String>,
    ) -> Result<PutReceipt, StorageError>;

    /// Size and metadata if the object exists.
    async fn head_artifact(&self, key: &str) -> Result<Option<ArtifactHead>, StorageError>;

    /// Downloads the object to `dest`. `Ok(None)` when absent.
    async fn get_artifact(&self, key: &str, dest: &Path) -> Result<Option<u64>, StorageError>;
}

/// Keys are forward-slash paths, no empty, `.` or `..` segments, so both
/// backends can map them to their native namespaces safely.
pub fn validate_key(key: &str) -> Result<(), StorageError> {
    let fail = |problem| {
        Err(StorageError::InvalidKey {
            key: key.to_owned(),
            problem,
        })
    };
    if key.is_empty() {
        return fail("empty");
    }
    if key.starts_with('/') || key.ends_with('/') {
        return fail("leading or trailing slash");
    }
    for segment in key.split('/') {
        if segment.is_empty() {
            return fail("empty path segment");
        }
        if segment == "." || segment == ".." {
            return fail("relative path segment");
        }
    }
    if key.chars().any(|c| c.is_control()) {
        return fail("control character");
    }
    Ok(())
}

/// Storage key for a volume's decrypted package archive.
pub fn package_key(prefix: &str, barcode: &str) -> String {
    prefixed(prefix, &format!("packages/{barcode}.tar.gz"))
}

/// Storage key for a volume's collated OCR text artifact.
pub fn text_key(prefix: &str, barcode: &str) -> String {
    prefixed(prefix, &format!("text/{barcode}.jsonl"))
}

fn prefixed(prefix: &str, rest: &str) -> String {
    let prefix = prefix.trim_matches('/');
    if prefix.is_empty() {
        rest.to_owned()
    } else {
        format!("{prefix}/{rest}")
    }
}
