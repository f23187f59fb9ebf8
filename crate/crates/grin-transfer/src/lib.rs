//! Mirror digitized volumes from a library digitization service into local
//! or object storage, with a SQLite catalog of what was fetched and why.
//!
//! The crate is organized as a pipeline of mostly independent layers:
//!
//! * [`protocol`] talks to the service: rate limiting, paging, conversion
//!   requests, package probes and downloads.
//! * [`store`] is the local catalog: volume records, sync bookkeeping, run
//!   summaries, snapshots, and the session lock.
//! * [`retrieval`] turns one remote package into verified artifacts in
//!   storage: download, decrypt, unpack, extract, upload.
//! * [`storage`] abstracts the artifact destination (local filesystem or an
//!   S3-compatible object store).
//! * [`pipeline`] wires the layers into the operations the CLI exposes.

pub mod cli;
pub mod clock;
pub mod config;
pub mod conversion;
pub mod enrich;
pub mod extraction;
pub mod inventory;
pub mod pipeline;
pub mod protocol;
pub mod retrieval;
pub mod shutdown;
pub mod storage;
pub mod store;
