//! The HTTP test double. Serves a generated corpus over the same surface
//! the real service exposes: paged TSV listings, a capped conversion queue,
//! a failures page, a detail view, and encrypted packages behind bearer
//! auth. Time is split in two: a virtual clock drives conversion latency
//! and retention so tests control it, while the rate limiter runs on the
//! wall clock because that is the thing being measured.
//!
//! Every service request lands in a log with its arrival offset, and
//! concurrency gauges track simultaneous package probes and downloads, so
//! a test can audit client behavior from the server's side after a run.
//! `/_control/*` routes (unauthenticated, unlogged, unmetered) expose the
//! manifest, the log, the audit, fault injection, and the virtual clock.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, Method, StatusCode};
use axum::response::Response;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use tracing::{debug, info};

use crate::corpus::{encryption_seed, Corpus, CorpusManifest, MockCorpusSpec, DETAIL_COLUMNS};
use crate::encrypt::encrypt_symmetric;

pub const NEXT_PAGE_HEADER: &str = "x-grin-next-page";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub token: String,
    pub library_directory: String,
    pub listing_page_size: usize,
    /// Service time simulated inside package HEAD/GET handlers. Nonzero so
    /// concurrent client requests actually overlap on the gauges.
    pub package_delay: Duration,
    /// Package bodies stream in chunks of this size...
    pub chunk_size: usize,
    /// ...with this pause between chunks.
    pub chunk_delay: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            token: "test-token".to_owned(),
            library_directory: "MOCK".to_owned(),
            listing_page_size: 100,
            package_delay: Duration::from_millis(20),
            chunk_size: 16 * 1024,
            chunk_delay: Duration::from_millis(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Listing,
    Convert,
    Failures,
    Details,
    PackageHead,
    PackageGet,
}

#[derive(Debug, Clone, Serialize)]
pub struct LoggedRequest {
    /// Arrival offset in wall-clock milliseconds since server start.
    pub at_ms: u64,
    pub method: String,
    pub kind: RequestKind,
    pub path: String,
    pub status: u16,
    /// Extra classification: "rate_limited", "queue_full", "injected_error".
    pub note: Option<String>,
}

/// Server-side view of client compliance, computed from the request log and
/// the concurrency gauges.
#[derive(Debug, Clone, Serialize)]
pub struct ComplianceReport {
    pub total_requests: usize,
    /// Most requests observed in any sliding 1000 ms arrival window.
    pub worst_second_window: usize,
    pub rate_429s: usize,
    pub convert_requests: usize,
    pub queue_full_429s: usize,
    /// Conversion requests arriving after the first queue-full 429. A
    /// compliant client stops feeding, so this must be zero.
    pub convert_requests_after_queue_full: usize,
    pub head_requests: usize,
    pub get_requests: usize,
    pub max_concurrent_heads: usize,
    pub max_concurrent_gets: usize,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SettleCounts {
    pub completed: usize,
    pub failed: usize,
    pub expired: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TimelineEvent {
    pub at_virtual_ms: u64,
    pub state: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotState {
    Unconverted,
    InProcess,
    Converted,
    PreviouslyDownloaded,
    Failed,
}

impl SlotState {
    fn wire(self) -> &'static str {
        match self {
            SlotState::Unconverted => "",
            SlotState::InProcess => "IN_PROCESS",
            SlotState::Converted => "CONVERTED",
            SlotState::PreviouslyDownloaded => "PREVIOUSLY_DOWNLOADED",
            SlotState::Failed => "FAILED",
        }
    }

    fn label(self) -> &'static str {
        match self {
            SlotState::Unconverted => "UNCONVERTED",
            other => other.wire(),
        }
    }
}

struct Slot {
    truth: crate::corpus::VolumeTruth,
    plaintext: Arc<Vec<u8>>,
    encrypted: Arc<Vec<u8>>,
    etag: String,
    index: usize,
    reencrypt_generation: u64,
    state: SlotState,
    due_at_ms: Option<u64>,
    available_until_ms: Option<u64>,
    ever_converted: bool,
    initially_downloaded: bool,
    timeline: Vec<TimelineEvent>,
}

#[derive(Debug, Default)]
struct Faults {
    /// Listing requests to fail with 503 before serving normally again.
    listing_errors: u32,
    /// Per-barcode count of GETs to truncate mid-body.
    truncate_gets: HashMap<String, u32>,
}

#[derive(Default)]
struct Gauge {
    current: AtomicUsize,
    max: AtomicUsize,
}

impl Gauge {
    fn enter(self: &Arc<Self>) -> GaugeGuard {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.max.fetch_max(now, Ordering::SeqCst);
        GaugeGuard {
            gauge: Arc::clone(self),
        }
    }

    fn max(&self) -> usize {
        self.max.load(Ordering::SeqCst)
    }
}

struct GaugeGuard {
    gauge: Arc<Gauge>,
}

impl Drop for GaugeGuard {
    fn drop(&mut self) {
        self.gauge.current.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Clone)]
struct Pending {
    at_ms: u64,
    method: String,
    kind: RequestKind,
    path: String,
}

pub struct ServerState {
    cfg: ServerConfig,
    spec: MockCorpusSpec,
    manifest: CorpusManifest,
    order: Vec<String>,
    slots: Mutex<BTreeMap<String, Slot>>,
    started: Instant,
    virtual_now_ms: AtomicU64,
    log: Mutex<Vec<LoggedRequest>>,
    /// Wall-clock instants of admitted requests in the trailing second.
    admitted: Mutex<VecDeque<Instant>>,
    rate_cap: usize,
    head_gauge: Arc<Gauge>,
    get_gauge: Arc<Gauge>,
    faults: Mutex<Faults>,
}

impl ServerState {
    fn new(corpus: Corpus, cfg: ServerConfig) -> Self {
        let manifest = corpus.manifest();
        let spec = corpus.spec.clone();
        let retention = spec.package_retention_ms;
        let mut slots = BTreeMap::new();
        let mut order = Vec::with_capacity(corpus.volumes.len());
        for (index, volume) in corpus.volumes.into_iter().enumerate() {
            let state = match volume.truth.initial_state.as_str() {
                "" => SlotState::Unconverted,
                "CONVERTED" => SlotState::Converted,
                "PREVIOUSLY_DOWNLOADED" => SlotState::PreviouslyDownloaded,
                other => unreachable!("corpus generated initial state {other:?}"),
            };
            // Volumes that start with a package behave as if converted at
            // the virtual epoch: downloadable until retention runs out.
            let has_package =
                matches!(state, SlotState::Converted | SlotState::PreviouslyDownloaded);
            order.push(volume.truth.barcode.clone());
            slots.insert(
                volume.truth.barcode.clone(),
                Slot {
                    etag: volume.truth.etag.clone(),
                    plaintext: volume.package,
                    encrypted: volume.encrypted,
                    index,
                    reencrypt_generation: 0,
                    state,
                    due_at_ms: None,
                    available_until_ms: has_package.then_some(retention),
                    ever_converted: has_package,
                    initially_downloaded: state == SlotState::PreviouslyDownloaded,
                    timeline: vec![TimelineEvent {
                        at_virtual_ms: 0,
                        state: state.label().to_owned(),
                    }],
                    truth: volume.truth,
                },
            );
        }
        let rate_cap = (spec.rate_limit.floor() as usize).max(1);
        Self {
            cfg,
            spec,
            manifest,
            order,
            slots: Mutex::new(slots),
            started: Instant::now(),
            virtual_now_ms: AtomicU64::new(0),
            log: Mutex::new(Vec::new()),
            admitted: Mutex::new(VecDeque::new()),
            rate_cap,
            head_gauge: Arc::new(Gauge::default()),
            get_gauge: Arc::new(Gauge::default()),
            faults: Mutex::new(Faults::default()),
        }
    }

    pub fn virtual_now_ms(&self) -> u64 {
        self.virtual_now_ms.load(Ordering::SeqCst)
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    /// Moves the virtual clock and applies every due conversion and
    /// retention expiry.
    pub fn advance(&self, ms: u64) -> SettleCounts {
        let now = self.virtual_now_ms.fetch_add(ms, Ordering::SeqCst) + ms;
        let counts = self.settle_all(now);
        info!(
            virtual_now_ms = now,
            completed = counts.completed,
            failed = counts.failed,
            expired = counts.expired,
            "virtual clock advanced"
        );
        counts
    }

    fn settle_all(&self, now: u64) -> SettleCounts {
        let mut slots = self.slots.lock().unwrap();
        let mut counts = SettleCounts::default();
        for slot in slots.values_mut() {
            settle_slot(slot, now, self.spec.package_retention_ms, &mut counts);
        }
        counts
    }

    pub fn log_snapshot(&self) -> Vec<LoggedRequest> {
        self.log.lock().unwrap().clone()
    }

    /// Clears the request log and the gauge maxima so a test can audit one
    /// phase of a longer scenario in isolation.
    pub fn reset_log(&self) {
        self.log.lock().unwrap().clear();
        self.head_gauge.max.store(0, Ordering::SeqCst);
        self.get_gauge.max.store(0, Ordering::SeqCst);
    }

    pub fn audit(&self) -> ComplianceReport {
        let log = self.log.lock().unwrap();
        let mut arrivals: Vec<u64> = log.iter().map(|r| r.at_ms).collect();
        arrivals.sort_unstable();
        let mut worst = 0usize;
        let mut lo = 0usize;
        for hi in 0..arrivals.len() {
            while arrivals[hi] - arrivals[lo] >= 1000 {
                lo += 1;
            }
            worst = worst.max(hi - lo + 1);
        }

        let mut converts: Vec<&LoggedRequest> =
            log.iter().filter(|r| r.kind == RequestKind::Convert).collect();
        converts.sort_by_key(|r| r.at_ms);
        let first_full = converts
            .iter()
            .position(|r| r.note.as_deref() == Some("queue_full"));
        let after_full = match first_full {
            Some(i) => converts.len() - i - 1,
            None => 0,
        };

        ComplianceReport {
            total_requests: log.len(),
            worst_second_window: worst,
            rate_429s: log
                .iter()
                .filter(|r| r.note.as_deref() == Some("rate_limited"))
                .count(),
            convert_requests: converts.len(),
            queue_full_429s: converts
                .iter()
                .filter(|r| r.note.as_deref() == Some("queue_full"))
                .count(),
            convert_requests_after_queue_full: after_full,
            head_requests: log
                .iter()
                .filter(|r| r.kind == RequestKind::PackageHead)
                .count(),
            get_requests: log
                .iter()
                .filter(|r| r.kind == RequestKind::PackageGet)
                .count(),
            max_concurrent_heads: self.head_gauge.max(),
            max_concurrent_gets: self.get_gauge.max(),
        }
    }

    pub fn stats(&self) -> MockStats {
        let now = self.virtual_now_ms();
        let mut slots = self.slots.lock().unwrap();
        let mut counts = SettleCounts::default();
        for slot in slots.values_mut() {
            settle_slot(slot, now, self.spec.package_retention_ms, &mut counts);
        }
        let mut states: BTreeMap<String, usize> = BTreeMap::new();
        let mut available = 0usize;
        for slot in slots.values() {
            *states.entry(slot.state.label().to_owned()).or_default() += 1;
            if slot.available_until_ms.is_some() {
                available += 1;
            }
        }
        MockStats {
            virtual_now_ms: now,
            in_process: *states.get("IN_PROCESS").unwrap_or(&0),
            available_packages: available,
            states,
        }
    }

    pub fn volume_state(&self, barcode: &str) -> Option<String> {
        let now = self.virtual_now_ms();
        let mut slots = self.slots.lock().unwrap();
        let slot = slots.get_mut(barcode)?;
        let mut counts = SettleCounts::default();
        settle_slot(slot, now, self.spec.package_retention_ms, &mut counts);
        Some(slot.state.label().to_owned())
    }

    pub fn timeline(&self, barcode: &str) -> Vec<TimelineEvent> {
        self.slots
            .lock()
            .unwrap()
            .get(barcode)
            .map(|s| s.timeline.clone())
            .unwrap_or_default()
    }

    /// Queues listing failures: the next `count` listing requests answer 503.
    pub fn inject_listing_errors(&self, count: u32) {
        self.faults.lock().unwrap().listing_errors += count;
    }

    /// The next `times` GETs for `barcode` declare the full length but stop
    /// streaming halfway through.
    pub fn inject_truncated_get(&self, barcode: &str, times: u32) {
        *self
            .faults
            .lock()
            .unwrap()
            .truncate_gets
            .entry(barcode.to_owned())
            .or_default() += times;
    }

    /// Re-encrypts one volume's package in place, as if the service ran a
    /// fresh encryption pass: same cleartext, new ciphertext, new etag.
    /// Returns the new etag.
    pub fn reencrypt(&self, barcode: &str) -> Option<String> {
        let mut slots = self.slots.lock().unwrap();
        let slot = slots.get_mut(barcode)?;
        slot.reencrypt_generation += 1;
        let seed = encryption_seed(self.spec.seed, slot.index, slot.reencrypt_generation);
        let fresh = encrypt_symmetric(&slot.plaintext, &self.spec.passphrase, seed);
        let etag = format!("\"{}\"", hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&fresh)));
        slot.encrypted = Arc::new(fresh);
        slot.etag = etag.clone();
        Some(etag)
    }

    fn begin(&self, method: &Method, kind: RequestKind, path: String) -> Pending {
        Pending {
            at_ms: self.started.elapsed().as_millis() as u64,
            method: method.to_string(),
            kind,
            path,
        }
    }

    fn finish(&self, pending: &Pending, status: StatusCode, note: Option<&str>) {
        debug!(
            at_ms = pending.at_ms,
            method = %pending.method,
            path = %pending.path,
            status = status.as_u16(),
            note,
            "request"
        );
        self.log.lock().unwrap().push(LoggedRequest {
            at_ms: pending.at_ms,
            method: pending.method.clone(),
            kind: pending.kind,
            path: pending.path.clone(),
            status: status.as_u16(),
            note: note.map(str::to_owned),
        });
    }

    /// Admission control in arrival order: sliding one-second window over
    /// admitted requests. Rejected requests do not consume window space.
    fn admit(&self) -> bool {
        let mut window = self.admitted.lock().unwrap();
        let now = Instant::now();
        while let Some(front) = window.front() {
            if now.duration_since(*front) >= Duration::from_millis(1000) {
                window.pop_front();
            } else {
                break;
            }
        }
        if window.len() >= self.rate_cap {
            return false;
        }
        window.push_back(now);
        true
    }

    /// Rate limit, bearer auth, and directory check, in that order. On
    /// rejection the request is logged here and the error response returned.
    fn gate(
        &self,
        pending: &Pending,
        headers: &HeaderMap,
        dir: &str,
    ) -> Result<(), Box<Response>> {
        if !self.admit() {
            self.finish(pending, StatusCode::TOO_MANY_REQUESTS, Some("rate_limited"));
            return Err(Box::new(text_response(
                StatusCode::TOO_MANY_REQUESTS,
                "request rate exceeded\n",
            )));
        }
        let expected = format!("Bearer {}", self.cfg.token);
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok());
        if presented != Some(expected.as_str()) {
            self.finish(pending, StatusCode::UNAUTHORIZED, None);
            return Err(Box::new(text_response(
                StatusCode::UNAUTHORIZED,
                "missing or bad token\n",
            )));
        }
        if dir != self.cfg.library_directory {
            self.finish(pending, StatusCode::NOT_FOUND, Some("unknown_directory"));
            return Err(Box::new(text_response(
                StatusCode::NOT_FOUND,
                "unknown library directory\n",
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MockStats {
    pub virtual_now_ms: u64,
    pub states: BTreeMap<String, usize>,
    pub in_process: usize,
    pub available_packages: usize,
}

fn settle_slot(slot: &mut Slot, now: u64, retention: u64, counts: &mut SettleCounts) {
    if slot.state == SlotState::InProcess
        && let Some(due) = slot.due_at_ms
        && due <= now
    {
        slot.due_at_ms = None;
        if slot.truth.failure_reason.is_some() {
            slot.state = SlotState::Failed;
            slot.timeline.push(TimelineEvent {
                at_virtual_ms: due,
                state: "FAILED".to_owned(),
            });
            counts.failed += 1;
        } else {
            slot.state = SlotState::Converted;
            slot.ever_converted = true;
            slot.available_until_ms = Some(due + retention);
            slot.timeline.push(TimelineEvent {
                at_virtual_ms: due,
                state: "CONVERTED".to_owned(),
            });
            counts.completed += 1;
        }
    }
    if let Some(until) = slot.available_until_ms
        && until <= now
    {
        slot.available_until_ms = None;
        counts.expired += 1;
        if slot.state == SlotState::Converted {
            slot.state = SlotState::PreviouslyDownloaded;
            slot.timeline.push(TimelineEvent {
                at_virtual_ms: until,
                state: "PREVIOUSLY_DOWNLOADED".to_owned(),
            });
        }
    }
}

/// Escapes one TSV cell: tabs, newlines, carriage returns, backslashes.
fn escape_cell(value: &str) -> String {
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

fn text_response(status: StatusCode, body: &str) -> Response {
    Response::builder()
        .status(status)
        .header(header::CONTENT_TYPE, "text/plain; charset=utf-8")
        .body(Body::from(body.to_owned()))
        .expect("static response")
}

fn tsv_response(body: String) -> Response {
    Response::builder()
        .status(StatusCode::OK)
        .header(
            header::CONTENT_TYPE,
            "text/tab-separated-values; charset=utf-8",
        )
        .body(Body::from(body))
        .expect("tsv response")
}

#[derive(Deserialize)]
struct ListingParams {
    page_token: Option<String>,
}

async fn listing_handler(
    State(st): State<Arc<ServerState>>,
    UrlPath(dir): UrlPath<String>,
    Query(params): Query<ListingParams>,
    headers: HeaderMap,
) -> Response {
    let pending = st.begin(
        &Method::GET,
        RequestKind::Listing,
        format!("/libraries/{dir}/_all_books"),
    );
    if let Err(resp) = st.gate(&pending, &headers, &dir) {
        return *resp;
    }

    {
        let mut faults = st.faults.lock().unwrap();
        if faults.listing_errors > 0 {
            faults.listing_errors -= 1;
            drop(faults);
            st.finish(&pending, StatusCode::SERVICE_UNAVAILABLE, Some("injected_error"));
            return text_response(StatusCode::SERVICE_UNAVAILABLE, "temporary listing outage\n");
        }
    }

    let offset = match &params.page_token {
        None => 0usize,
        Some(token) => match token.parse() {
            Ok(n) => n,
            Err(_) => {
                st.finish(&pending, StatusCode::BAD_REQUEST, None);
                return text_response(StatusCode::BAD_REQUEST, "bad page token\n");
            }
        },
    };

    st.settle_all(st.virtual_now_ms());
    let slots = st.slots.lock().unwrap();
    let mut body = String::from(
        "barcode\tstate\ttitle\tgoogle_books_url\tscanned_date\tconverted_date\t\
         downloaded_date\tprocessed_date\tanalyzed_date\tocr_date\tscan_center\n",
    );
    let end = (offset + st.cfg.listing_page_size).min(st.order.len());
    for barcode in &st.order[offset.min(st.order.len())..end] {
        let slot = &slots[barcode];
        let t = &slot.truth;
        let converted_date = if slot.ever_converted { t.converted_date.as_str() } else { "" };
        let downloaded_date = if slot.initially_downloaded { t.downloaded_date.as_str() } else { "" };
        let row = [
            t.barcode.as_str(),
            slot.state.wire(),
            t.title.as_str(),
            t.google_books_url.as_str(),
            t.scanned_date.as_str(),
            converted_date,
            downloaded_date,
            t.processed_date.as_str(),
            t.analyzed_date.as_str(),
            t.ocr_date.as_str(),
            // A column the client has no mapping for; real listings carry
            // several of these.
            "SRC-1",
        ];
        let mut first = true;
        for cell in row {
            if !first {
                body.push('\t');
            }
            body.push_str(&escape_cell(cell));
            first = false;
        }
        body.push('\n');
    }
    drop(slots);

    let mut resp = tsv_response(body);
    if end < st.order.len() {
        resp.headers_mut().insert(
            NEXT_PAGE_HEADER,
            end.to_string().parse().expect("numeric header"),
        );
    }
    st.finish(&pending, StatusCode::OK, None);
    resp
}

async fn convert_handler(
    State(st): State<Arc<ServerState>>,
    UrlPath(dir): UrlPath<String>,
    headers: HeaderMap,
    body: String,
) -> Response {
    let pending = st.begin(
        &Method::POST,
        RequestKind::Convert,
        format!("/libraries/{dir}/_convert"),
    );
    if let Err(resp) = st.gate(&pending, &headers, &dir) {
        return *resp;
    }

    let now = st.virtual_now_ms();
    let mut slots = st.slots.lock().unwrap();
    let mut counts = SettleCounts::default();
    for slot in slots.values_mut() {
        settle_slot(slot, now, st.spec.package_retention_ms, &mut counts);
    }

    let in_process = slots
        .values()
        .filter(|s| s.state == SlotState::InProcess)
        .count();
    let mut room = st.spec.conversion_cap.saturating_sub(in_process);
    if room == 0 {
        drop(slots);
        st.finish(&pending, StatusCode::TOO_MANY_REQUESTS, Some("queue_full"));
        return text_response(StatusCode::TOO_MANY_REQUESTS, "conversion queue full\n");
    }

    // The batch is consumed front to back; the response says how long the
    // accepted prefix is. Volumes already queued or already downloadable
    // extend the prefix without consuming queue room.
    let mut accepted = 0usize;
    for barcode in body.lines().map(str::trim).filter(|l| !l.is_empty()) {
        match slots.get_mut(barcode) {
            None => accepted += 1,
            Some(slot) => match slot.state {
                SlotState::InProcess => accepted += 1,
                SlotState::Converted | SlotState::PreviouslyDownloaded
                    if slot.available_until_ms.is_some() =>
                {
                    accepted += 1
                }
                _ => {
                    if room == 0 {
                        break;
                    }
                    room -= 1;
                    slot.state = SlotState::InProcess;
                    slot.due_at_ms = Some(now + slot.truth.conversion_latency_ms);
                    slot.timeline.push(TimelineEvent {
                        at_virtual_ms: now,
                        state: "IN_PROCESS".to_owned(),
                    });
                    accepted += 1;
                }
            },
        }
    }
    drop(slots);

    st.finish(&pending, StatusCode::OK, None);
    text_response(StatusCode::OK, &format!("{accepted}\n"))
}

async fn failures_handler(
    State(st): State<Arc<ServerState>>,
    UrlPath(dir): UrlPath<String>,
    headers: HeaderMap,
) -> Response {
    let pending = st.begin(
        &Method::GET,
        RequestKind::Failures,
        format!("/libraries/{dir}/_failures"),
    );
    if let Err(resp) = st.gate(&pending, &headers, &dir) {
        return *resp;
    }

    st.settle_all(st.virtual_now_ms());
    let slots = st.slots.lock().unwrap();
    let mut body = String::from("barcode\treason\n");
    for barcode in &st.order {
        let slot = &slots[barcode];
        if slot.state == SlotState::Failed {
            let reason = slot.truth.failure_reason.as_deref().unwrap_or("UNKNOWN");
            body.push_str(&escape_cell(barcode));
            body.push('\t');
            body.push_str(&escape_cell(reason));
            body.push('\n');
        }
    }
    drop(slots);

    st.finish(&pending, StatusCode::OK, None);
    tsv_response(body)
}

#[derive(Deserialize)]
struct DetailsParams {
    barcodes: Option<String>,
}

async fn details_handler(
    State(st): State<Arc<ServerState>>,
    UrlPath(dir): UrlPath<String>,
    Query(params): Query<DetailsParams>,
    headers: HeaderMap,
) -> Response {
    let pending = st.begin(
        &Method::GET,
        RequestKind::Details,
        format!("/libraries/{dir}/_book_details"),
    );
    if let Err(resp) = st.gate(&pending, &headers, &dir) {
        return *resp;
    }

    let slots = st.slots.lock().unwrap();
    let mut body = String::from("barcode");
    for column in DETAIL_COLUMNS {
        body.push('\t');
        body.push_str(column);
    }
    body.push('\n');
    for barcode in params
        .barcodes
        .as_deref()
        .unwrap_or_default()
        .split(',')
        .map(str::trim)
        .filter(|b| !b.is_empty())
    {
        let Some(slot) = slots.get(barcode) else {
            continue;
        };
        body.push_str(&escape_cell(barcode));
        for column in DETAIL_COLUMNS {
            body.push('\t');
            if let Some(value) = slot.truth.detail_fields.get(column) {
                body.push_str(&escape_cell(value));
            }
        }
        body.push('\n');
    }
    drop(slots);

    st.finish(&pending, StatusCode::OK, None);
    tsv_response(body)
}

async fn package_handler(
    State(st): State<Arc<ServerState>>,
    UrlPath((dir, file)): UrlPath<(String, String)>,
    method: Method,
    headers: HeaderMap,
) -> Response {
    let is_head = method == Method::HEAD;
    let kind = if is_head {
        RequestKind::PackageHead
    } else {
        RequestKind::PackageGet
    };
    let pending = st.begin(&method, kind, format!("/libraries/{dir}/{file}"));
    if let Err(resp) = st.gate(&pending, &headers, &dir) {
        return *resp;
    }

    let Some(barcode) = file.strip_suffix(".tar.gz.gpg") else {
        st.finish(&pending, StatusCode::NOT_FOUND, None);
        return text_response(StatusCode::NOT_FOUND, "no such file\n");
    };

    let now = st.virtual_now_ms();
    let package = {
        let mut slots = st.slots.lock().unwrap();
        match slots.get_mut(barcode) {
            None => None,
            Some(slot) => {
                let mut counts = SettleCounts::default();
                settle_slot(slot, now, st.spec.package_retention_ms, &mut counts);
                // Cloning the Arc freezes these bytes for this response even
                // if the package is re-encrypted mid-transfer.
                slot.available_until_ms
                    .map(|_| (slot.etag.clone(), Arc::clone(&slot.encrypted)))
            }
        }
    };

    let Some((etag, bytes)) = package else {
        st.finish(&pending, StatusCode::NOT_FOUND, None);
        return text_response(StatusCode::NOT_FOUND, "package not available\n");
    };

    let gauge = if is_head { &st.head_gauge } else { &st.get_gauge };
    let guard = gauge.enter();
    if !st.cfg.package_delay.is_zero() {
        tokio::time::sleep(st.cfg.package_delay).await;
    }

    let full_len = bytes.len();
    let builder = Response::builder()
        .status(StatusCode::OK)
        .header(header::ETAG, &etag)
        .header(header::CONTENT_LENGTH, full_len)
        .header(header::CONTENT_TYPE, "application/octet-stream");

    if is_head {
        drop(guard);
        st.finish(&pending, StatusCode::OK, None);
        return builder.body(Body::empty()).expect("head response");
    }

    let truncated = {
        let mut faults = st.faults.lock().unwrap();
        match faults.truncate_gets.get_mut(barcode) {
            Some(left) if *left > 0 => {
                *left -= 1;
                true
            }
            _ => false,
        }
    };
    let serve_len = if truncated { full_len / 2 } else { full_len };

    let chunk_size = st.cfg.chunk_size.max(1);
    let chunk_delay = st.cfg.chunk_delay;
    let stream = futures::stream::unfold(
        (0usize, bytes, Some(guard)),
        move |(pos, bytes, guard)| async move {
            if pos >= serve_len {
                drop(guard);
                return None;
            }
            if !chunk_delay.is_zero() {
                tokio::time::sleep(chunk_delay).await;
            }
            let end = (pos + chunk_size).min(serve_len);
            let piece = Bytes::copy_from_slice(&bytes[pos..end]);
            Some((Ok::<Bytes, std::convert::Infallible>(piece), (end, bytes, guard)))
        },
    );

    st.finish(
        &pending,
        StatusCode::OK,
        truncated.then_some("truncated"),
    );
    builder
        .body(Body::from_stream(stream))
        .expect("package response")
}

#[derive(Deserialize)]
struct AdvanceRequest {
    ms: u64,
}

#[derive(Serialize)]
struct AdvanceResponse {
    virtual_now_ms: u64,
    #[serde(flatten)]
    counts: SettleCounts,
}

async fn control_advance(
    State(st): State<Arc<ServerState>>,
    Json(req): Json<AdvanceRequest>,
) -> Json<AdvanceResponse> {
    let counts = st.advance(req.ms);
    Json(AdvanceResponse {
        virtual_now_ms: st.virtual_now_ms(),
        counts,
    })
}

#[derive(Deserialize, Default)]
struct InjectRequest {
    #[serde(default)]
    listing_errors: u32,
    #[serde(default)]
    truncate_gets: Vec<TruncateSpec>,
    #[serde(default)]
    reencrypt: Vec<String>,
}

#[derive(Deserialize)]
struct TruncateSpec {
    barcode: String,
    #[serde(default = "one")]
    times: u32,
}

fn one() -> u32 {
    1
}

async fn control_inject(
    State(st): State<Arc<ServerState>>,
    Json(req): Json<InjectRequest>,
) -> Json<BTreeMap<String, String>> {
    if req.listing_errors > 0 {
        st.inject_listing_errors(req.listing_errors);
    }
    for spec in &req.truncate_gets {
        st.inject_truncated_get(&spec.barcode, spec.times);
    }
    let mut new_etags = BTreeMap::new();
    for barcode in &req.reencrypt {
        if let Some(etag) = st.reencrypt(barcode) {
            new_etags.insert(barcode.clone(), etag);
        }
    }
    Json(new_etags)
}

async fn control_manifest(State(st): State<Arc<ServerState>>) -> Json<CorpusManifest> {
    Json(st.manifest.clone())
}

async fn control_log(State(st): State<Arc<ServerState>>) -> Json<Vec<LoggedRequest>> {
    Json(st.log_snapshot())
}

async fn control_audit(State(st): State<Arc<ServerState>>) -> Json<ComplianceReport> {
    Json(st.audit())
}

async fn control_stats(State(st): State<Arc<ServerState>>) -> Json<MockStats> {
    Json(st.stats())
}

async fn control_reset_log(State(st): State<Arc<ServerState>>) -> StatusCode {
    st.reset_log();
    StatusCode::NO_CONTENT
}

async fn control_timeline(
    State(st): State<Arc<ServerState>>,
    UrlPath(barcode): UrlPath<String>,
) -> Json<Vec<TimelineEvent>> {
    Json(st.timeline(&barcode))
}

pub fn router(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/libraries/{dir}/_all_books", get(listing_handler))
        .route("/libraries/{dir}/_convert", post(convert_handler))
        .route("/libraries/{dir}/_failures", get(failures_handler))
        .route("/libraries/{dir}/_book_details", get(details_handler))
        .route("/libraries/{dir}/{file}", get(package_handler))
        .route("/_control/advance_time", post(control_advance))
        .route("/_control/inject", post(control_inject))
        .route("/_control/manifest", get(control_manifest))
        .route("/_control/log", get(control_log))
        .route("/_control/audit", get(control_audit))
        .route("/_control/stats", get(control_stats))
        .route("/_control/reset_log", post(control_reset_log))
        .route("/_control/timeline/{barcode}", get(control_timeline))
        .with_state(state)
}

/// A running mock service bound to a local port. Tests in the same process
/// reach the shared [`ServerState`] directly; subprocesses use the HTTP
/// control routes.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<ServerState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<()>,
}

impl MockServer {
    pub async fn start(corpus: Corpus, cfg: ServerConfig) -> std::io::Result<MockServer> {
        Self::start_on(corpus, cfg, "127.0.0.1:0".parse().expect("literal addr")).await
    }

    pub async fn start_on(
        corpus: Corpus,
        cfg: ServerConfig,
        addr: SocketAddr,
    ) -> std::io::Result<MockServer> {
        let state = Arc::new(ServerState::new(corpus, cfg));
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let app = router(Arc::clone(&state));
        let (tx, rx) = oneshot::channel();
        let task = tokio::spawn(async move {
            let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = serve.await {
                tracing::error!(error = %e, "mock server exited abnormally");
            }
        });
        info!(%addr, "mock service listening");
        Ok(MockServer {
            addr,
            state,
            shutdown: Some(tx),
            task,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> Arc<ServerState> {
        Arc::clone(&self.state)
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, StateMix};

    fn quiet_config() -> ServerConfig {
        ServerConfig {
            package_delay: Duration::ZERO,
            chunk_delay: Duration::ZERO,
            ..ServerConfig::default()
        }
    }

    fn corpus_spec(count: usize) -> MockCorpusSpec {
        MockCorpusSpec {
            volume_count: count,
            seed: 77,
            rate_limit: 1000.0,
            ..MockCorpusSpec::default()
        }
    }

    async fn authed(
        client: &reqwest::Client,
        url: &str,
    ) -> reqwest::Response {
        client
            .get(url)
            .header("authorization", "Bearer test-token")
            .send()
            .await
            .expect("request")
    }

    #[tokio::test]
    async fn rejects_bad_bearer_token() {
        let server = MockServer::start(generate_corpus(&corpus_spec(2)), quiet_config())
            .await
            .unwrap();
        let client = reqwest::Client::new();
        let url = format!("{}/libraries/MOCK/_all_books", server.base_url());

        let resp = client.get(&url).send().await.unwrap();
        assert_eq!(resp.status(), 401);
        let resp = client
            .get(&url)
            .header("authorization", "Bearer wrong")
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 401);
        let resp = authed(&client, &url).await;
        assert_eq!(resp.status(), 200);
        server.stop().await;
    }

    #[tokio::test]
    async fn sixth_request_in_a_second_gets_429_and_is_logged() {
        let mut spec = corpus_spec(2);
        spec.rate_limit = 5.0;
        let server = MockServer::start(generate_corpus(&spec), quiet_config())
            .await
            .unwrap();
        let client = reqwest::Client::new();
        let url = format!("{}/libraries/MOCK/_all_books", server.base_url());

        let mut statuses = Vec::new();
        for _ in 0..6 {
            statuses.push(authed(&client, &url).await.status().as_u16());
        }
        assert_eq!(statuses, vec![200, 200, 200, 200, 200, 429]);

        let audit = server.state().audit();
        assert_eq!(audit.rate_429s, 1);
        assert_eq!(audit.total_requests, 6);
        assert!(audit.worst_second_window >= 6);
        server.stop().await;
    }

    #[tokio::test]
    async fn listing_paginates_with_next_page_header() {
        let cfg = ServerConfig {
            listing_page_size: 3,
            ..quiet_config()
        };
        let server = MockServer::start(generate_corpus(&corpus_spec(7)), cfg)
            .await
            .unwrap();
        let client = reqwest::Client::new();
        let base = format!("{}/libraries/MOCK/_all_books", server.base_url());

        let mut token: Option<String> = None;
        let mut barcodes = Vec::new();
        loop {
            let url = match &token {
                Some(t) => format!("{base}?page_token={t}"),
                None => base.clone(),
            };
            let resp = authed(&client, &url).await;
            assert_eq!(resp.status(), 200);
            token = resp
                .headers()
                .get(NEXT_PAGE_HEADER)
                .map(|v| v.to_str().unwrap().to_owned());
            let body = resp.text().await.unwrap();
            for line in body.lines().skip(1) {
                barcodes.push(line.split('\t').next().unwrap().to_owned());
            }
            if token.is_none() {
                break;
            }
        }
        assert_eq!(barcodes.len(), 7);
        assert_eq!(barcodes[0], "B000001");
        assert_eq!(barcodes[6], "B000007");
        server.stop().await;
    }

    #[tokio::test]
    async fn conversion_respects_cap_and_dedup() {
        let mut spec = corpus_spec(6);
        spec.conversion_cap = 3;
        let server = MockServer::start(generate_corpus(&spec), quiet_config())
            .await
            .unwrap();
        let client = reqwest::Client::new();
        let url = format!("{}/libraries/MOCK/_convert", server.base_url());
        let post = |body: String| {
            client
                .post(&url)
                .header("authorization", "Bearer test-token")
                .body(body)
                .send()
        };

        // Two of three queue slots fill.
        let resp = post("B000001\nB000002".into()).await.unwrap();
        assert_eq!(resp.status(), 200);
        assert_eq!(resp.text().await.unwrap().trim(), "2");

        // Duplicates of queued volumes extend the accepted prefix without
        // consuming room; the walk stops at the first new volume that finds
        // the queue full.
        let resp = post("B000001\nB000002\nB000003\nB000004".into()).await.unwrap();
        assert_eq!(resp.status(), 200);
        assert_eq!(resp.text().await.unwrap().trim(), "3");

        // A full-at-arrival queue answers 429 outright.
        let resp = post("B000004".into()).await.unwrap();
        assert_eq!(resp.status(), 429);

        // Everything settles after the max latency and the queue drains.
        server.state().advance((spec.latency_t_ms as f64 * 2.5) as u64 + 1);
        assert_eq!(server.state().stats().in_process, 0);

        // Converted volumes count as already done; only the new one takes a
        // slot.
        let resp = post("B000001\nB000004".into()).await.unwrap();
        assert_eq!(resp.status(), 200);
        assert_eq!(resp.text().await.unwrap().trim(), "2");
        assert_eq!(server.state().stats().in_process, 1);

        let audit = server.state().audit();
        assert_eq!(audit.convert_requests, 4);
        assert_eq!(audit.queue_full_429s, 1);
        assert_eq!(audit.convert_requests_after_queue_full, 1);
        server.stop().await;
    }

    #[tokio::test]
    async fn packages_serve_manifest_bytes_with_stable_etags() {
        let mut spec = corpus_spec(3);
        spec.initial_state_mix = StateMix {
            converted: 1.0,
            previously_downloaded: 0.0,
        };
        let corpus = generate_corpus(&spec);
        let manifest = corpus.manifest();
        let server = MockServer::start(corpus, quiet_config()).await.unwrap();
        let client = reqwest::Client::new();

        for truth in &manifest.volumes {
            let url = format!(
                "{}/libraries/MOCK/{}.tar.gz.gpg",
                server.base_url(),
                truth.barcode
            );
            let head = client
                .head(&url)
                .header("authorization", "Bearer test-token")
                .send()
                .await
                .unwrap();
            assert_eq!(head.status(), 200);
            assert_eq!(
                head.headers().get("etag").unwrap().to_str().unwrap(),
                truth.etag
            );
            assert_eq!(
                head.headers()
                    .get("content-length")
                    .unwrap()
                    .to_str()
                    .unwrap(),
                truth.encrypted_len.to_string()
            );

            let got = authed(&client, &url).await;
            assert_eq!(got.status(), 200);
            let bytes = got.bytes().await.unwrap();
            assert_eq!(bytes.len() as u64, truth.encrypted_len);
            use sha2::Digest;
            assert_eq!(hex::encode(sha2::Sha256::digest(&bytes)), truth.encrypted_sha256);
        }

        let audit = server.state().audit();
        assert_eq!(audit.head_requests, 3);
        assert_eq!(audit.get_requests, 3);
        server.stop().await;
    }

    #[tokio::test]
    async fn retention_expiry_turns_package_into_404_previously_downloaded() {
        let mut spec = corpus_spec(2);
        spec.initial_state_mix = StateMix {
            converted: 1.0,
            previously_downloaded: 0.0,
        };
        let server = MockServer::start(generate_corpus(&spec), quiet_config())
            .await
            .unwrap();
        let client = reqwest::Client::new();
        let url = format!("{}/libraries/MOCK/B000001.tar.gz.gpg", server.base_url());

        assert_eq!(authed(&client, &url).await.status(), 200);
        let counts = server.state().advance(spec.package_retention_ms + 1);
        assert_eq!(counts.expired, 2);
        assert_eq!(authed(&client, &url).await.status(), 404);
        assert_eq!(
            server.state().volume_state("B000001").as_deref(),
            Some("PREVIOUSLY_DOWNLOADED")
        );

        let listing = authed(
            &client,
            &format!("{}/libraries/MOCK/_all_books", server.base_url()),
        )
        .await
        .text()
        .await
        .unwrap();
        let row = listing.lines().nth(1).unwrap();
        assert_eq!(row.split('\t').nth(1).unwrap(), "PREVIOUSLY_DOWNLOADED");
        server.stop().await;
    }

    #[tokio::test]
    async fn advance_zero_changes_nothing() {
        let server = MockServer::start(generate_corpus(&corpus_spec(4)), quiet_config())
            .await
            .unwrap();
        let client = reqwest::Client::new();
        client
            .post(format!("{}/libraries/MOCK/_convert", server.base_url()))
            .header("authorization", "Bearer test-token")
            .body("B000001\nB000002")
            .send()
            .await
            .unwrap();
        let counts = server.state().advance(0);
        assert_eq!(counts, SettleCounts::default());
        assert_eq!(server.state().stats().in_process, 2);
        server.stop().await;
    }

    #[tokio::test]
    async fn failure_injection_fails_conversion_and_reports_it() {
        let mut spec = corpus_spec(3);
        spec.failure_injections
            .insert("B000002".to_owned(), "SOURCE_IMAGE_MISSING".to_owned());
        let server = MockServer::start(generate_corpus(&spec), quiet_config())
            .await
            .unwrap();
        let client = reqwest::Client::new();
        client
            .post(format!("{}/libraries/MOCK/_convert", server.base_url()))
            .header("authorization", "Bearer test-token")
            .body("B000001\nB000002\nB000003")
            .send()
            .await
            .unwrap();
        let counts = server.state().advance((spec.latency_t_ms as f64 * 2.5) as u64 + 1);
        assert_eq!(counts.completed, 2);
        assert_eq!(counts.failed, 1);

        let failures = authed(
            &client,
            &format!("{}/libraries/MOCK/_failures", server.base_url()),
        )
        .await
        .text()
        .await
        .unwrap();
        assert_eq!(failures, "barcode\treason\nB000002\tSOURCE_IMAGE_MISSING\n");

        // The timeline never passes through CONVERTED, and its package 404s.
        let timeline = server.state().timeline("B000002");
        assert!(timeline.iter().all(|e| e.state != "CONVERTED"));
        assert_eq!(timeline.last().unwrap().state, "FAILED");
        let resp = authed(
            &client,
            &format!("{}/libraries/MOCK/B000002.tar.gz.gpg", server.base_url()),
        )
        .await;
        assert_eq!(resp.status(), 404);
        server.stop().await;
    }

    #[tokio::test]
    async fn details_cover_requested_barcodes_only() {
        let spec = corpus_spec(4);
        let corpus = generate_corpus(&spec);
        let manifest = corpus.manifest();
        let server = MockServer::start(corpus, quiet_config()).await.unwrap();
        let client = reqwest::Client::new();
        let body = authed(
            &client,
            &format!(
                "{}/libraries/MOCK/_book_details?barcodes=B000002%2CB000004",
                server.base_url()
            ),
        )
        .await
        .text()
        .await
        .unwrap();

        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines.len(), 3);
        let header: Vec<&str> = lines[0].split('\t').collect();
        assert_eq!(header[0], "barcode");
        let row: Vec<&str> = lines[1].split('\t').collect();
        assert_eq!(row[0], "B000002");
        let truth = manifest.truth("B000002").unwrap();
        for (column, value) in &truth.detail_fields {
            let idx = header.iter().position(|h| h == column).unwrap();
            assert_eq!(row[idx], value.as_str(), "{column}");
        }
        server.stop().await;
    }

    #[tokio::test]
    async fn truncation_fault_breaks_exactly_one_download() {
        let mut spec = corpus_spec(1);
        spec.initial_state_mix = StateMix {
            converted: 1.0,
            previously_downloaded: 0.0,
        };
        let cfg = ServerConfig {
            chunk_size: 64,
            ..quiet_config()
        };
        let server = MockServer::start(generate_corpus(&spec), cfg).await.unwrap();
        server.state().inject_truncated_get("B000001", 1);
        let client = reqwest::Client::new();
        let url = format!("{}/libraries/MOCK/B000001.tar.gz.gpg", server.base_url());

        let resp = authed(&client, &url).await;
        let declared = resp.content_length().unwrap();
        // The body ends before the declared length: either a transport error
        // or a short byte count, depending on how the stack surfaces it.
        let short = match resp.bytes().await {
            Ok(b) => (b.len() as u64) < declared,
            Err(_) => true,
        };
        assert!(short, "truncated body should not arrive complete");

        let resp = authed(&client, &url).await;
        let bytes = resp.bytes().await.unwrap();
        assert_eq!(bytes.len() as u64, declared);
        server.stop().await;
    }

    #[tokio::test]
    async fn reencryption_changes_etag_but_not_cleartext_len() {
        let mut spec = corpus_spec(1);
        spec.initial_state_mix = StateMix {
            converted: 1.0,
            previously_downloaded: 0.0,
        };
        let corpus = generate_corpus(&spec);
        let old_etag = corpus.volumes[0].truth.etag.clone();
        let server = MockServer::start(corpus, quiet_config()).await.unwrap();

        let new_etag = server.state().reencrypt("B000001").unwrap();
        assert_ne!(new_etag, old_etag);

        let client = reqwest::Client::new();
        let url = format!("{}/libraries/MOCK/B000001.tar.gz.gpg", server.base_url());
        let resp = authed(&client, &url).await;
        assert_eq!(
            resp.headers().get("etag").unwrap().to_str().unwrap(),
            new_etag
        );
        server.stop().await;
    }

    #[tokio::test]
    async fn gauges_see_simultaneous_streams() {
        let mut spec = corpus_spec(4);
        spec.initial_state_mix = StateMix {
            converted: 1.0,
            previously_downloaded: 0.0,
        };
        let cfg = ServerConfig {
            package_delay: Duration::from_millis(30),
            chunk_size: 64,
            chunk_delay: Duration::from_millis(2),
            ..ServerConfig::default()
        };
        let server = MockServer::start(generate_corpus(&spec), cfg).await.unwrap();
        let client = reqwest::Client::new();

        let mut tasks = Vec::new();
        for i in 1..=4 {
            let client = client.clone();
            let url = format!(
                "{}/libraries/MOCK/B{:06}.tar.gz.gpg",
                server.base_url(),
                i
            );
            tasks.push(tokio::spawn(async move {
                let resp = client
                    .get(&url)
                    .header("authorization", "Bearer test-token")
                    .send()
                    .await
                    .unwrap();
                resp.bytes().await.unwrap().len()
            }));
        }
        for task in tasks {
            assert!(task.await.unwrap() > 0);
        }
        let audit = server.state().audit();
        assert!(
            audit.max_concurrent_gets >= 2,
            "overlapping downloads should register, saw {}",
            audit.max_concurrent_gets
        );
        assert!(audit.max_concurrent_gets <= 4);
        server.stop().await;
    }

    #[tokio::test]
    async fn control_routes_round_trip_json() {
        let server = MockServer::start(generate_corpus(&corpus_spec(3)), quiet_config())
            .await
            .unwrap();
        let client = reqwest::Client::new();

        let manifest: CorpusManifest = client
            .get(format!("{}/_control/manifest", server.base_url()))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(manifest.volumes.len(), 3);

        let resp = client
            .post(format!("{}/_control/advance_time", server.base_url()))
            .json(&serde_json::json!({"ms": 1000}))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 200);
        let advanced: serde_json::Value = resp.json().await.unwrap();
        assert_eq!(advanced["virtual_now_ms"], 1000);

        let resp = client
            .post(format!("{}/_control/inject", server.base_url()))
            .json(&serde_json::json!({"listing_errors": 1}))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 200);

        let listing = client
            .get(format!("{}/libraries/MOCK/_all_books", server.base_url()))
            .header("authorization", "Bearer test-token")
            .send()
            .await
            .unwrap();
        assert_eq!(listing.status(), 503);

        let audit: serde_json::Value = client
            .get(format!("{}/_control/audit", server.base_url()))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(audit["total_requests"], 1);
        server.stop().await;
    }
}
