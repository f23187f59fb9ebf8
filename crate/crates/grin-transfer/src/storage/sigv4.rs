//! AWS Signature Version 4 request signing, the minimal subset an
//! S3-compatible object store needs: header signing with a fixed payload
//! hash (we always send UNSIGNED-PAYLOAD and stream bodies). Presigned URLs
//! and chunked signing are out of scope.

use hmac::{Hmac, KeyInit, Mac};
use percent_encoding::{percent_encode, AsciiSet, NON_ALPHANUMERIC};
use sha2::{Digest, Sha256};

type HmacSha256 = Hmac<Sha256>;

/// Payload hash marker for bodies we stream without buffering.
pub const UNSIGNED_PAYLOAD: &str = "UNSIGNED-PAYLOAD";

/// Everything except RFC 3986 unreserved characters gets percent-encoded in
/// canonical query strings.
const QUERY_ENCODE: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'.')
    .remove(b'_')
    .remove(b'~');

#[derive(Clone)]
pub struct Credentials {
    pub access_key: String,
    pub secret_key: String,
}

impl std::fmt::Debug for Credentials {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Credentials")
            .field("access_key", &self.access_key)
            .field("secret_key", &"<redacted>")
            .finish()
    }
}

pub struct SigningInput<'a> {
    pub method: &'a str,
    /// Path as it will appear on the wire, already percent-encoded.
    pub canonical_uri: &'a str,
    /// Query pairs, unencoded; sorted and encoded here.
    pub query: &'a [(String, String)],
    /// Headers to sign, unencoded values. `host` must be present.
    pub headers: &'a [(String, String)],
    /// Hex sha256 of the payload, or [`UNSIGNED_PAYLOAD`].
    pub payload_hash: &'a str,
    /// `YYYYMMDDTHHMMSSZ`.
    pub amz_date: &'a str,
    pub region: &'a str,
    pub service: &'a str,
}

/// Computes the `Authorization` header value for the request.
pub fn authorization_header(creds: &Credentials, input: &SigningInput<'_>) -> String {
    let date = &input.amz_date[..8];
    let scope = format!("{date}/{}/{}/aws4_request", input.region, input.service);

    let mut headers: Vec<(String, String)> = input
        .headers
        .iter()
        .map(|(k, v)| (k.to_ascii_lowercase(), v.trim().to_owned()))
        .collect();
    headers.sort();
    let signed_headers = headers
        .iter()
        .map(|(k, _)| k.as_str())
        .collect::<Vec<_>>()
        .join(";");

    let mut query: Vec<(String, String)> = input
        .query
        .iter()
        .map(|(k, v)| (encode_query(k), encode_query(v)))
        .collect();
    query.sort();
    let canonical_query = query
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("&");

    let mut canonical = String::new();
    canonical.push_str(input.method);
    canonical.push('\n');
    canonical.push_str(input.canonical_uri);
    canonical.push('\n');
    canonical.push_str(&canonical_query);
    canonical.push('\n');
    for (k, v) in &headers {
        canonical.push_str(k);
        canonical.push(':');
        canonical.push_str(v);
        canonical.push('\n');
    }
    canonical.push('\n');
    canonical.push_str(&signed_headers);
    canonical.push('\n');
    canonical.push_str(input.payload_hash);

    let canonical_hash = hex::encode(Sha256::digest(canonical.as_bytes()));
    let string_to_sign =
        format!("AWS4-HMAC-SHA256\n{}\n{scope}\n{canonical_hash}", input.amz_date);

    let key = signing_key(&creds.secret_key, date, input.region, input.service);
    let signature = hex::encode(hmac(&key, string_to_sign.as_bytes()));

    format!(
        "AWS4-HMAC-SHA256 Credential={}/{scope}, SignedHeaders={signed_headers}, Signature={signature}",
        creds.access_key
    )
}

/// Percent-encodes one query key or value per the canonical form.
pub fn encode_query(raw: &str) -> String {
    percent_encode(raw.as_bytes(), QUERY_ENCODE).to_string()
}

/// Encode set for path segments: same unreserved set, since callers join
/// segments with literal slashes themselves.
pub(crate) fn path_encode_set() -> &'static AsciiSet {
    QUERY_ENCODE
}

fn signing_key(secret: &str, date: &str, region: &str, service: &str) -> Vec<u8> {
    let k = hmac(format!("AWS4{secret}").as_bytes(), date.as_bytes());
    let k = hmac(&k, region.as_bytes());
    let k = hmac(&k, service.as_bytes());
    hmac(&k, b"aws4_request")
}

fn hmac(key: &[u8], data: &[u8]) -> Vec<u8> {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().to_vec()
}
