//! HTTP client for the digitization service. Every request, including
//! retries, passes through one shared rate limiter; credential rejection is
//! terminal while transport-level failures retry with jittered backoff.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use reqwest::header::{HeaderValue, AUTHORIZATION, CONTENT_LENGTH, CONTENT_TYPE, ETAG};
use reqwest::{Method, Response, StatusCode};
use tokio::io::AsyncWriteExt;
use tracing::{debug, warn};
use url::Url;

use crate::clock::{Clock, SystemClock};
use crate::protocol::backoff::BackoffPolicy;
use crate::protocol::codec;
use crate::protocol::limiter::{RateBudget, RateLimiter};
use crate::protocol::types::{
    validate_barcode, ConversionOutcome, DetailFields, Endpoint, FailureEntry, PackageProbe,
    VolumeListing,
};

/// Response header carrying the next page token; absent on the last page.
pub const NEXT_PAGE_HEADER: &str = "x-grin-next-page";

#[derive(Debug, thiserror::Error)]
pub enum GrinError {
    #[error("service rejected credentials (HTTP {status})")]
    Credential { status: u16 },
    #[error("credential source failed: {0}")]
    CredentialSource(String),
    #[error("request failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("unexpected response (HTTP {status}): {message}")]
    Protocol { status: u16, message: String },
    #[error(transparent)]
    Codec(#[from] codec::CodecError),
    #[error(transparent)]
    InvalidBarcode(#[from] crate::protocol::types::InvalidBarcode),
    #[error("batch of {got} exceeds the detail endpoint limit of {limit}")]
    DetailBatchTooLarge { got: usize, limit: usize },
    #[error("download of {barcode} wrote {actual} bytes, server declared {expected}")]
    Integrity {
        barcode: String,
        expected: u64,
        actual: u64,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub trait CredentialProvider: Send + Sync {
    fn bearer_token(&self) -> Result<String, String>;
}

pub struct StaticToken(pub String);

impl CredentialProvider for StaticToken {
    fn bearer_token(&self) -> Result<String, String> {
        Ok(self.0.clone())
    }
}

#[derive(Clone)]
pub struct GrinClientConfig {
    pub base_url: Url,
    pub library_directory: String,
    pub budget: RateBudget,
    pub backoff: BackoffPolicy,
    /// Max barcodes per detail request.
    pub detail_batch_limit: usize,
    /// Applied to every request except package downloads.
    pub request_timeout: Duration,
    /// Seeds retry jitter; None draws from entropy.
    pub backoff_seed: Option<u64>,
}

impl GrinClientConfig {
    pub fn new(base_url: Url, library_directory: String) -> Self {
        Self {
            base_url,
            library_directory,
            budget: RateBudget::default(),
            backoff: BackoffPolicy::default(),
            detail_batch_limit: 50,
            request_timeout: Duration::from_secs(30),
            backoff_seed: None,
        }
    }
}

pub struct ListingPage {
    pub volumes: Vec<VolumeListing>,
    pub next_page_token: Option<String>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum DownloadOutcome {
    Downloaded { etag: Option<String>, bytes: u64 },
    /// The service has no package for this volume right now (404).
    Unavailable,
}

pub struct GrinClient {
    http: reqwest::Client,
    cfg: GrinClientConfig,
    limiter: Arc<RateLimiter>,
    creds: Arc<dyn CredentialProvider>,
    clock: Arc<dyn Clock>,
    backoff_rng: std::sync::Mutex<rand::rngs::StdRng>,
}

impl GrinClient {
    pub fn new(cfg: GrinClientConfig, creds: Arc<dyn CredentialProvider>) -> Self {
        Self::with_clock(cfg, creds, Arc::new(SystemClock))
    }

    pub fn with_clock(
        cfg: GrinClientConfig,
        creds: Arc<dyn CredentialProvider>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        cfg.budget.validate().expect("invalid rate budget");
        cfg.backoff.validate().expect("invalid backoff policy");
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(10))
            .build()
            .expect("reqwest client");
        let limiter = Arc::new(RateLimiter::new(cfg.budget, clock.clone()));
        let seed = cfg.backoff_seed.unwrap_or_else(rand::random);
        Self {
            http,
            cfg,
            limiter,
            creds,
            clock,
            backoff_rng: std::sync::Mutex::new(BackoffPolicy::rng(seed)),
        }
    }

    /// The limiter every request of this client flows through. Shared here
    /// so callers can gate non-HTTP work on the same budget if needed.
    pub fn limiter(&self) -> Arc<RateLimiter> {
        self.limiter.clone()
    }

    pub fn detail_batch_limit(&self) -> usize {
        self.cfg.detail_batch_limit
    }

    pub fn library_directory(&self) -> &str {
        &self.cfg.library_directory
    }

    fn url_for(&self, endpoint: &Endpoint) -> Url {
        let path = endpoint.path(&self.cfg.library_directory);
        let mut url = self.cfg.base_url.clone();
        url.set_path("");
        url.set_query(None);
        // Endpoint::path returns a rooted path+query that is already encoded.
        Url::parse(&format!("{}{}", url.as_str().trim_end_matches('/'), path))
            .expect("endpoint path always yields a valid url")
    }

    fn auth_header(&self) -> Result<HeaderValue, GrinError> {
        let token = self
            .creds
            .bearer_token()
            .map_err(GrinError::CredentialSource)?;
        HeaderValue::from_str(&format!("Bearer {token}"))
            .map_err(|e| GrinError::CredentialSource(e.to_string()))
    }

    /// Sends one request with rate limiting and retry. `accept_404` lets
    /// package probes and downloads observe missing packages; any other
    /// non-2xx status is classified and handled here.
    async fn send(
        &self,
        method: Method,
        endpoint: &Endpoint,
        body: Option<String>,
        accept_404: bool,
        timeout: Option<Duration>,
    ) -> Result<Response, GrinError> {
        let url = self.url_for(endpoint);
        let mut attempt: u32 = 0;
        loop {
            self.limiter.acquire().await;
            let mut req = self
                .http
                .request(method.clone(), url.clone())
                .header(AUTHORIZATION, self.auth_header()?);
            if let Some(t) = timeout {
                req = req.timeout(t);
            }
            if let Some(b) = &body {
                req = req
                    .header(CONTENT_TYPE, "text/plain; charset=utf-8")
                    .body(b.clone());
            }

            let failure: String = match req.send().await {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return Ok(resp);
                    }
                    if status == StatusCode::NOT_FOUND && accept_404 {
                        return Ok(resp);
                    }
                    if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
                        return Err(GrinError::Credential {
                            status: status.as_u16(),
                        });
                    }
                    if status == StatusCode::TOO_MANY_REQUESTS
                        && matches!(endpoint, Endpoint::ConversionRequest)
                    {
                        // Conversion backpressure is an outcome, not an error.
                        return Ok(resp);
                    }
                    if status.is_server_error()
                        || status == StatusCode::REQUEST_TIMEOUT
                        || status == StatusCode::TOO_MANY_REQUESTS
                    {
                        format!("HTTP {status}")
                    } else {
                        let message = resp.text().await.unwrap_or_default();
                        return Err(GrinError::Protocol {
                            status: status.as_u16(),
                            message: truncate(&message, 200),
                        });
                    }
                }
                Err(err) => err.to_string(),
            };

            attempt += 1;
            if attempt >= self.cfg.backoff.max_attempts {
                return Err(GrinError::Transport {
                    attempts: attempt,
                    message: failure,
                });
            }
            let delay = {
                let mut rng = self.backoff_rng.lock().unwrap();
                self.cfg.backoff.delay(attempt - 1, &mut rng)
            };
            warn!(%url, attempt, ?delay, error = %failure, "transient request failure, backing off");
            self.clock.sleep(delay).await;
        }
    }

    pub async fn list_books_page(
        &self,
        page_token: Option<&str>,
    ) -> Result<ListingPage, GrinError> {
        let endpoint = Endpoint::AllBooks {
            page_token: page_token.map(str::to_owned),
        };
        let resp = self
            .send(
                Method::GET,
                &endpoint,
                None,
                false,
                Some(self.cfg.request_timeout),
            )
            .await?;
        let next_page_token = resp
            .headers()
            .get(NEXT_PAGE_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned);
        let body = resp
            .text()
            .await
            .map_err(|e| GrinError::Transport {
                attempts: 1,
                message: format!("reading listing body: {e}"),
            })?;
        let volumes = codec::parse_listing(&body)?;
        debug!(page = volumes.len(), more = next_page_token.is_some(), "fetched listing page");
        Ok(ListingPage {
            volumes,
            next_page_token,
        })
    }

    /// Submits barcodes for conversion, one per line. The count in a
    /// successful response says how many were accepted, in submission
    /// order; 429 means the conversion queue is full.
    pub async fn request_conversion(
        &self,
        barcodes: &[String],
    ) -> Result<ConversionOutcome, GrinError> {
        for b in barcodes {
            validate_barcode(b)?;
        }
        let body = barcodes.join("\n");
        let resp = self
            .send(
                Method::POST,
                &Endpoint::ConversionRequest,
                Some(body),
                false,
                Some(self.cfg.request_timeout),
            )
            .await?;
        if resp.status() == StatusCode::TOO_MANY_REQUESTS {
            return Ok(ConversionOutcome::QueueFull);
        }
        let status = resp.status().as_u16();
        let text = resp.text().await.unwrap_or_default();
        let accepted: usize = text.trim().parse().map_err(|_| GrinError::Protocol {
            status,
            message: format!("unparseable conversion response {:?}", truncate(&text, 80)),
        })?;
        if accepted > barcodes.len() {
            return Err(GrinError::Protocol {
                status,
                message: format!("service accepted {accepted} of {} barcodes", barcodes.len()),
            });
        }
        Ok(ConversionOutcome::Accepted(accepted))
    }

    pub async fn fetch_failures(&self) -> Result<Vec<FailureEntry>, GrinError> {
        let resp = self
            .send(
                Method::GET,
                &Endpoint::Failures,
                None,
                false,
                Some(self.cfg.request_timeout),
            )
            .await?;
        let body = resp.text().await.map_err(|e| GrinError::Transport {
            attempts: 1,
            message: format!("reading failures body: {e}"),
        })?;
        Ok(codec::parse_failures(&body)?)
    }

    pub async fn fetch_book_details(
        &self,
        barcodes: &[String],
    ) -> Result<Vec<(String, DetailFields)>, GrinError> {
        if barcodes.len() > self.cfg.detail_batch_limit {
            return Err(GrinError::DetailBatchTooLarge {
                got: barcodes.len(),
                limit: self.cfg.detail_batch_limit,
            });
        }
        for b in barcodes {
            validate_barcode(b)?;
        }
        let resp = self
            .send(
                Method::GET,
                &Endpoint::BookDetails {
                    barcodes: barcodes.to_vec(),
                },
                None,
                false,
                Some(self.cfg.request_timeout),
            )
            .await?;
        let body = resp.text().await.map_err(|e| GrinError::Transport {
            attempts: 1,
            message: format!("reading details body: {e}"),
        })?;
        Ok(codec::parse_details(&body)?)
    }

    /// HEAD probe for a volume's package: availability, etag, size.
    pub async fn probe_package(&self, barcode: &str) -> Result<PackageProbe, GrinError> {
        validate_barcode(barcode)?;
        let endpoint = Endpoint::Package {
            barcode: barcode.to_owned(),
        };
        let resp = self
            .send(
                Method::HEAD,
                &endpoint,
                None,
                true,
                Some(self.cfg.request_timeout),
            )
            .await?;
        if resp.status() == StatusCode::NOT_FOUND {
            return Ok(PackageProbe::missing(barcode.to_owned()));
        }
        Ok(PackageProbe::available(
            barcode.to_owned(),
            header_string(&resp, ETAG.as_str()),
            resp.headers()
                .get(CONTENT_LENGTH)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse().ok()),
        ))
    }

    /// Streams a package to `dest`, writing through a temporary file so a
    /// failed download never leaves a plausible-looking package behind.
    /// Short bodies are detected against the declared length and retried
    /// from byte zero.
    pub async fn download_package(
        &self,
        barcode: &str,
        dest: &Path,
    ) -> Result<DownloadOutcome, GrinError> {
        validate_barcode(barcode)?;
        let endpoint = Endpoint::Package {
            barcode: barcode.to_owned(),
        };
        let tmp = PathBuf::from(format!("{}.part", dest.display()));

        let mut attempt: u32 = 0;
        loop {
            // `send` retries connection-level failures itself; this outer
            // loop re-runs the whole request when the body breaks mid-stream.
            let resp = self
                .send(Method::GET, &endpoint, None, true, None)
                .await?;
            if resp.status() == StatusCode::NOT_FOUND {
                return Ok(DownloadOutcome::Unavailable);
            }
            let etag = header_string(&resp, ETAG.as_str());
            let declared: Option<u64> = resp
                .headers()
                .get(CONTENT_LENGTH)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse().ok());

            match self.stream_to_file(resp, &tmp).await {
                Ok(written) => {
                    if let Some(expected) = declared {
                        if written != expected {
                            let _ = tokio::fs::remove_file(&tmp).await;
                            attempt += 1;
                            if attempt >= self.cfg.backoff.max_attempts {
                                return Err(GrinError::Integrity {
                                    barcode: barcode.to_owned(),
                                    expected,
                                    actual: written,
                                });
                            }
                            warn!(barcode, expected, written, "short download, retrying");
                            continue;
                        }
                    }
                    tokio::fs::rename(&tmp, dest).await.map_err(|source| {
                        GrinError::Io {
                            path: dest.to_path_buf(),
                            source,
                        }
                    })?;
                    return Ok(DownloadOutcome::Downloaded {
                        etag,
                        bytes: written,
                    });
                }
                Err(err) => {
                    let _ = tokio::fs::remove_file(&tmp).await;
                    attempt += 1;
                    if attempt >= self.cfg.backoff.max_attempts {
                        return Err(GrinError::Transport {
                            attempts: attempt,
                            message: format!("download of {barcode}: {err}"),
                        });
                    }
                    let delay = {
                        let mut rng = self.backoff_rng.lock().unwrap();
                        self.cfg.backoff.delay(attempt - 1, &mut rng)
                    };
                    warn!(barcode, attempt, ?delay, error = %err, "package download failed, backing off");
                    self.clock.sleep(delay).await;
                }
            }
        }
    }

    async fn stream_to_file(&self, resp: Response, tmp: &Path) -> Result<u64, String> {
        use futures::StreamExt;
        let mut file = tokio::fs::File::create(tmp)
            .await
            .map_err(|e| format!("creating {}: {e}", tmp.display()))?;
        let mut written: u64 = 0;
        let mut stream = resp.bytes_stream();
        while let Some(chunk) = stream.next().await {
            let chunk = chunk.map_err(|e| format!("body stream: {e}"))?;
            file.write_all(&chunk)
                .await
                .map_err(|e| format!("writing {}: {e}", tmp.display()))?;
            written += chunk.len() as u64;
        }
        file.flush().await.map_err(|e| e.to_string())?;
        Ok(written)
    }
}

fn header_string(resp: &Response, name: &str) -> Option<String> {
    resp.headers()
        .get(name)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned)
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_owned()
    } else {
        let mut end = max;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &s[..end])
    }
}
