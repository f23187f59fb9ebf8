//! Minimal S3-compatible object client: path-style addressing, SigV4 header
//! signing with unsigned payloads, and multipart uploads for large packages.
//! Metadata rides as `x-amz-meta-*` headers so a later HEAD can recover the
//! source etag without touching the catalog.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use async_trait::async_trait;
use futures::{StreamExt, TryStreamExt};
use percent_encoding::percent_encode;
use reqwest::header::{HeaderName, HeaderValue, CONTENT_LENGTH, ETAG};
use reqwest::{Method, StatusCode};
use tokio::io::{AsyncReadExt, AsyncSeekExt, AsyncWriteExt};
use url::Url;

use super::sigv4::{authorization_header, Credentials, SigningInput, UNSIGNED_PAYLOAD};
use super::{ArtifactHead, PutReceipt, StorageBackend, StorageError};

const DEFAULT_PART_SIZE: u64 = 64 * 1024 * 1024;
const PART_CONCURRENCY: usize = 4;
const PART_ATTEMPTS: u32 = 3;
const META_HEADER_PREFIX: &str = "x-amz-meta-";

#[derive(Clone)]
pub struct S3Config {
    pub endpoint: Url,
    pub bucket: String,
    pub region: String,
    pub credentials: Credentials,
}

pub struct S3Client {
    http: reqwest::Client,
    cfg: S3Config,
    part_size: u64,
    part_concurrency: usize,
}

impl S3Client {
    pub fn new(cfg: S3Config) -> Self {
        Self {
            http: reqwest::Client::new(),
            cfg,
            part_size: DEFAULT_PART_SIZE,
            part_concurrency: PART_CONCURRENCY,
        }
    }

    /// Shrinks part size so tests can exercise the multipart path without
    /// gigabyte fixtures.
    pub fn with_part_size(mut self, part_size: u64) -> Self {
        assert!(part_size >= 1024, "parts below 1 KiB are pathological");
        self.part_size = part_size;
        self
    }

    fn host_header(&self) -> String {
        let host = self.cfg.endpoint.host_str().expect("endpoint has a host");
        match self.cfg.endpoint.port() {
            Some(port) => format!("{host}:{port}"),
            None => host.to_owned(),
        }
    }

    fn canonical_uri(&self, key: &str) -> String {
        let mut uri = String::new();
        for segment in std::iter::once(self.cfg.bucket.as_str()).chain(key.split('/')) {
            uri.push('/');
            uri.push_str(
                &percent_encode(segment.as_bytes(), super::sigv4::path_encode_set()).to_string(),
            );
        }
        uri
    }

    fn object_url(&self, key: &str, query: &[(String, String)]) -> Url {
        let mut url = self.cfg.endpoint.clone();
        url.set_path(&self.canonical_uri(key));
        if !query.is_empty() {
            let mut pairs = url.query_pairs_mut();
            for (k, v) in query {
                pairs.append_pair(k, v);
            }
        }
        url
    }

    async fn request(
        &self,
        method: Method,
        key: &str,
        query: &[(String, String)],
        meta_headers: &[(String, String)],
        body: Option<Vec<u8>>,
    ) -> Result<reqwest::Response, StorageError> {
        let amz_date = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
        let mut signed: Vec<(String, String)> = vec![
            ("host".into(), self.host_header()),
            ("x-amz-content-sha256".into(), UNSIGNED_PAYLOAD.into()),
            ("x-amz-date".into(), amz_date.clone()),
        ];
        signed.extend(meta_headers.iter().cloned());

        let canonical_uri = self.canonical_uri(key);
        let auth = authorization_header(
            &self.cfg.credentials,
            &SigningInput {
                method: method.as_str(),
                canonical_uri: &canonical_uri,
                query,
                headers: &signed,
                payload_hash: UNSIGNED_PAYLOAD,
                amz_date: &amz_date,
                region: &self.cfg.region,
                service: "s3",
            },
        );

        let mut req = self
            .http
            .request(method, self.object_url(key, query))
            .header("authorization", auth);
        for (k, v) in &signed {
            if k != "host" {
                req = req.header(
                    HeaderName::try_from(k.as_str()).expect("valid header name"),
                    HeaderValue::try_from(v.as_str()).expect("valid header value"),
                );
            }
        }
        if let Some(body) = body {
            req = req.header(CONTENT_LENGTH, body.len()).body(body);
        }
        req.send()
            .await
            .map_err(|e| StorageError::Remote(format!("request failed: {e}")))
    }

    async fn expect_success(
        resp: reqwest::Response,
        context: &str,
    ) -> Result<reqwest::Response, StorageError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let body = resp.text().await.unwrap_or_default();
        let snippet: String = body.chars().take(200).collect();
        Err(StorageError::Remote(format!(
            "{context}: status {status}, body {snippet:?}"
        )))
    }

    async fn put_single(
        &self,
        key: &str,
        source: &Path,
        meta_headers: &[(String, String)],
    ) -> Result<u64, StorageError> {
        let body = tokio::fs::read(source).await.map_err(|e| StorageError::Io {
            path: source.to_owned(),
            source: e,
        })?;
        let size = body.len() as u64;
        let resp = self
            .request(Method::PUT, key, &[], meta_headers, Some(body))
            .await?;
        Self::expect_success(resp, &format!("PUT {key}")).await?;
        Ok(size)
    }

    async fn put_multipart(
        &self,
        key: &str,
        source: &Path,
        size: u64,
        meta_headers: &[(String, String)],
    ) -> Result<u64, StorageError> {
        let initiate = self
            .request(
                Method::POST,
                key,
                &[("uploads".into(), String::new())],
                meta_headers,
                None,
            )
            .await?;
        let initiate = Self::expect_success(initiate, &format!("initiate multipart {key}")).await?;
        let body = initiate
            .text()
            .await
            .map_err(|e| StorageError::Remote(format!("initiate multipart {key}: {e}")))?;
        let upload_id = parse_upload_id(&body).ok_or_else(|| {
            StorageError::Remote(format!("initiate multipart {key}: no UploadId in {body:?}"))
        })?;

        let parts: Vec<(u32, u64, u64)> = (0..)
            .map(|i| (i as u32 + 1, i * self.part_size))
            .take_while(|(_, offset)| *offset < size)
            .map(|(number, offset)| (number, offset, self.part_size.min(size - offset)))
            .collect();

        let uploaded: Result<Vec<(u32, String)>, StorageError> =
            futures::stream::iter(parts.into_iter().map(|(number, offset, len)| {
                let upload_id = upload_id.clone();
                async move {
                    self.upload_part(key, &upload_id, number, source, offset, len)
                        .await
                        .map(|etag| (number, etag))
                }
            }))
            .buffered(self.part_concurrency)
            .try_collect()
            .await;

        let uploaded = match uploaded {
            Ok(parts) => parts,
            Err(e) => {
                // Leave nothing dangling server-side; the abort itself is
                // best effort since we are already failing.
                let _ = self
                    .request(
                        Method::DELETE,
                        key,
                        &[("uploadId".into(), upload_id.clone())],
                        &[],
                        None,
                    )
                    .await;
                return Err(StorageError::MultipartAborted {
                    key: key.to_owned(),
                    detail: e.to_string(),
                });
            }
        };

        let mut complete = String::from("<CompleteMultipartUpload>");
        for (number, etag) in &uploaded {
            let _ = write!(
                complete,
                "<Part><PartNumber>{number}</PartNumber><ETag>{etag}</ETag></Part>"
            );
        }
        complete.push_str("</CompleteMultipartUpload>");

        let resp = self
            .request(
                Method::POST,
                key,
                &[("uploadId".into(), upload_id)],
                &[],
                Some(complete.into_bytes()),
            )
            .await?;
        Self::expect_success(resp, &format!("complete multipart {key}")).await?;
        Ok(size)
    }

    async fn upload_part(
        &self,
        key: &str,
        upload_id: &str,
        number: u32,
        source: &Path,
        offset: u64,
        len: u64,
    ) -> Result<String, StorageError> {
        let io_err = |e| StorageError::Io {
            path: source.to_owned(),
            source: e,
        };
        let mut file = tokio::fs::File::open(source).await.map_err(io_err)?;
        file.seek(std::io::SeekFrom::Start(offset))
            .await
            .map_err(io_err)?;
        let mut buf = vec![0u8; len as usize];
        file.read_exact(&mut buf).await.map_err(io_err)?;

        let query = [
            ("partNumber".to_string(), number.to_string()),
            ("uploadId".to_string(), upload_id.to_string()),
        ];
        let mut last_err = None;
        for attempt in 0..PART_ATTEMPTS {
            if attempt > 0 {
                tokio::time::sleep(std::time::Duration::from_millis(200u64 << attempt)).await;
            }
            let sent = self
                .request(Method::PUT, key, &query, &[], Some(buf.clone()))
                .await
                .and_then(|resp| {
                    let status = resp.status();
                    if !status.is_success() {
                        return Err(StorageError::Remote(format!(
                            "part {number} of {key}: status {status}"
                        )));
                    }
                    resp.headers()
                        .get(ETAG)
                        .and_then(|v| v.to_str().ok())
                        .map(str::to_owned)
                        .ok_or_else(|| {
                            StorageError::Remote(format!("part {number} of {key}: no etag"))
                        })
                });
            match sent {
                Ok(etag) => return Ok(etag),
                Err(e) => {
                    tracing::warn!(part = number, attempt, error = %e, "part upload failed");
                    last_err = Some(e);
                }
            }
        }
        Err(last_err.expect("at least one attempt ran"))
    }
}

fn meta_headers(metadata: &BTreeMap<String, String>) -> Vec<(String, String)> {
    metadata
        .iter()
        .map(|(k, v)| (format!("{META_HEADER_PREFIX}{k}"), v.clone()))
        .collect()
}

/// Pulls the UploadId out of an InitiateMultipartUploadResult document.
pub fn parse_upload_id(xml: &str) -> Option<String> {
    let mut reader = quick_xml::Reader::from_str(xml);
    let mut inside = false;
    let mut value = String::new();
    loop {
        match reader.read_event().ok()? {
            quick_xml::events::Event::Start(e) if e.local_name().as_ref() == b"UploadId" => {
                inside = true;
            }
            quick_xml::events::Event::Text(t) if inside => {
                value.push_str(&t.decode().ok()?);
            }
            quick_xml::events::Event::End(e) if e.local_name().as_ref() == b"UploadId" => {
                return (!value.is_empty()).then_some(value);
            }
            quick_xml::events::Event::Eof => return None,
            _ => {}
        }
    }
}

#[async_trait]
impl StorageBackend for S3Client {
    async fn put_artifact(
        &self,
        key: &str,
        source: &Path,
        metadata: &BTreeMap<String, String>,
    ) -> Result<PutReceipt, StorageError> {
        super::validate_key(key)?;
        let size = tokio::fs::metadata(source)
            .await
            .map_err(|e| StorageError::Io {
                path: source.to_owned(),
                source: e,
            })?
            .len();
        let headers = meta_headers(metadata);
        let size = if size > self.part_size {
            self.put_multipart(key, source, size, &headers).await?
        } else {
            self.put_single(key, source, &headers).await?
        };
        Ok(PutReceipt {
            key: key.to_owned(),
            size,
        })
    }

    async fn head_artifact(&self, key: &str) -> Result<Option<ArtifactHead>, StorageError> {
        super::validate_key(key)?;
        let resp = self.request(Method::HEAD, key, &[], &[], None).await?;
        if resp.status() == StatusCode::NOT_FOUND {
            return Ok(None);
        }
        let resp = Self::expect_success(resp, &format!("HEAD {key}")).await?;
        // `content_length()` reflects the (empty) response body on HEAD, not
        // the object; the header carries the real size.
        let size = resp
            .headers()
            .get(CONTENT_LENGTH)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        let metadata = resp
            .headers()
            .iter()
            .filter_map(|(name, value)| {
                let stripped = name.as_str().strip_prefix(META_HEADER_PREFIX)?;
                Some((stripped.to_owned(), value.to_str().ok()?.to_owned()))
            })
            .collect();
        Ok(Some(ArtifactHead { size, metadata }))
    }

    async fn get_artifact(&self, key: &str, dest: &Path) -> Result<Option<u64>, StorageError> {
        super::validate_key(key)?;
        let resp = self.request(Method::GET, key, &[], &[], None).await?;
        if resp.status() == StatusCode::NOT_FOUND {
            return Ok(None);
        }
        let resp = Self::expect_success(resp, &format!("GET {key}")).await?;

        let io_err = |e: std::io::Error| StorageError::Io {
            path: dest.to_owned(),
            source: e,
        };
        let staged = dest.with_extension("s3part");
        let mut file = tokio::fs::File::create(&staged).await.map_err(io_err)?;
        let mut stream = resp.bytes_stream();
        let mut written = 0u64;
        while let Some(chunk) = stream.next().await {
            let chunk = chunk.map_err(|e| StorageError::Remote(format!("GET {key} body: {e}")))?;
            file.write_all(&chunk).await.map_err(io_err)?;
            written += chunk.len() as u64;
        }
        file.flush().await.map_err(io_err)?;
        drop(file);
        tokio::fs::rename(&staged, dest).await.map_err(io_err)?;
        Ok(Some(written))
    }
}
