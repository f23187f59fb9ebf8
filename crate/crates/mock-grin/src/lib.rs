//! An in-process stand-in for the digitization service: deterministic
//! corpus generation, the HTTP surface the mirroring pipeline talks to,
//! and a small S3-compatible object store. Everything is seeded so test
//! runs are reproducible and a manifest describes every artifact the
//! server will ever hand out.

pub mod corpus;
pub mod encrypt;
pub mod s3;
pub mod server;
