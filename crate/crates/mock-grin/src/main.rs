use std::collections::BTreeMap;
use std::net::SocketAddr;

use anyhow::{bail, Context};
use clap::Parser;
use mock_grin::corpus::{generate_corpus, MockCorpusSpec, StateMix};
use mock_grin::s3::{MockS3, S3MockConfig};
use mock_grin::server::{MockServer, ServerConfig};

/// Serves a deterministic digitized-book corpus over the service's HTTP
/// surface, for development and load testing against a known dataset.
#[derive(Parser)]
#[command(name = "mock-grin", version)]
struct Args {
    /// Port to listen on; 0 picks a free one.
    #[arg(long, default_value_t = 0)]
    port: u16,

    #[arg(long, default_value_t = 100)]
    volumes: usize,

    /// Corpus seed; the same seed always yields byte-identical packages.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    #[arg(long, default_value = "test-token")]
    token: String,

    /// Passphrase the packages are encrypted to.
    #[arg(long, default_value = "correct-horse")]
    passphrase: String,

    #[arg(long, default_value = "MOCK")]
    library: String,

    #[arg(long, default_value_t = 100)]
    page_size: usize,

    /// Typical conversion latency in virtual milliseconds.
    #[arg(long)]
    latency_t: Option<u64>,

    /// Conversion queue capacity.
    #[arg(long)]
    cap: Option<usize>,

    /// Requests per second before the service answers 429.
    #[arg(long)]
    rate: Option<f64>,

    /// Package retention in virtual milliseconds.
    #[arg(long)]
    retention: Option<u64>,

    /// Fraction of volumes that start converted.
    #[arg(long, default_value_t = 0.0)]
    converted: f64,

    /// Fraction of volumes that start previously downloaded.
    #[arg(long, default_value_t = 0.0)]
    previously_downloaded: f64,

    /// BARCODE=REASON pairs whose conversions will fail.
    #[arg(long = "fail", value_name = "BARCODE=REASON")]
    failures: Vec<String>,

    /// Production-scale cap, latency, and retention instead of desk scale.
    #[arg(long)]
    production_profile: bool,

    /// Also serve an object store on this port (0 picks a free one).
    #[arg(long)]
    s3_port: Option<u16>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .init();

    let args = Args::parse();

    let mut spec = if args.production_profile {
        MockCorpusSpec::production_profile()
    } else {
        MockCorpusSpec::default()
    };
    spec.volume_count = args.volumes;
    spec.seed = args.seed;
    spec.passphrase = args.passphrase;
    spec.initial_state_mix = StateMix {
        converted: args.converted,
        previously_downloaded: args.previously_downloaded,
    };
    if let Some(t) = args.latency_t {
        spec.latency_t_ms = t;
    }
    if let Some(cap) = args.cap {
        spec.conversion_cap = cap;
    }
    if let Some(rate) = args.rate {
        spec.rate_limit = rate;
    }
    if let Some(retention) = args.retention {
        spec.package_retention_ms = retention;
    }
    let mut failures = BTreeMap::new();
    for pair in &args.failures {
        let Some((barcode, reason)) = pair.split_once('=') else {
            bail!("--fail wants BARCODE=REASON, got {pair:?}");
        };
        failures.insert(barcode.to_owned(), reason.to_owned());
    }
    spec.failure_injections = failures;

    let corpus = generate_corpus(&spec);
    let cfg = ServerConfig {
        token: args.token,
        library_directory: args.library.clone(),
        listing_page_size: args.page_size,
        ..ServerConfig::default()
    };
    let addr: SocketAddr = ([127, 0, 0, 1], args.port).into();
    let server = MockServer::start_on(corpus, cfg, addr)
        .await
        .context("bind mock service")?;
    println!("service   {}/libraries/{}", server.base_url(), args.library);
    println!("controls  {}/_control/manifest", server.base_url());

    let s3 = match args.s3_port {
        None => None,
        Some(port) => {
            let s3 = MockS3::start_on(S3MockConfig::default(), ([127, 0, 0, 1], port).into())
                .await
                .context("bind mock object store")?;
            println!("objects   {}/mirror (mock-access / mock-secret)", s3.base_url());
            Some(s3)
        }
    };

    tokio::signal::ctrl_c().await.context("wait for ctrl-c")?;
    server.stop().await;
    if let Some(s3) = s3 {
        s3.stop().await;
    }
    Ok(())
}
