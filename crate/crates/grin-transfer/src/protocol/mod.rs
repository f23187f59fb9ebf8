//! Client-side protocol layer: endpoint addressing, wire parsing, rate
//! limiting, and the HTTP client itself.

pub mod backoff;
pub mod client;
pub mod codec;
pub mod limiter;
pub mod types;

pub use client::{DownloadOutcome, GrinClient, GrinClientConfig, GrinError, ListingPage};
pub use limiter::{RateBudget, RateLimiter};
pub use types::{
    ConversionOutcome, DetailFields, Endpoint, FailureEntry, PackageProbe, VolumeListing,
    VolumeState,
};
