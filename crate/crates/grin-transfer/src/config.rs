//! Configuration loading. Settings live in `config.toml` inside a config
//! directory (`~/.config/grin-transfer` by default); secrets are referenced
//! as files next to it and can be overridden by environment variables, so
//! neither the bearer token nor the decryption passphrase ever appears in
//! the config file, the process list, or the logs.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use url::Url;

pub const CONFIG_FILE: &str = "config.toml";
pub const TOKEN_ENV: &str = "GRIN_TRANSFER_TOKEN";
pub const PASSPHRASE_ENV: &str = "GRIN_TRANSFER_PASSPHRASE";
pub const S3_SECRET_ENV: &str = "GRIN_TRANSFER_S3_SECRET_KEY";
pub const CONFIG_DIR_ENV: &str = "GRIN_TRANSFER_CONFIG_DIR";

/// A resolved secret. Displays and debugs as a placeholder; the value is
/// only reachable through [`Secret::expose`].
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: String) -> Self {
        Self(value)
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Debug for Secret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Secret(<redacted>)")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {path} unreadable: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path} invalid: {source}")]
    Malformed {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("missing required parameter `{parameter}`{hint}")]
    Missing { parameter: &'static str, hint: String },
    #[error("invalid value for `{parameter}`: {reason}")]
    Invalid { parameter: &'static str, reason: String },
}

fn missing(parameter: &'static str, hint: impl Into<String>) -> ConfigError {
    ConfigError::Missing {
        parameter,
        hint: hint.into(),
    }
}

fn invalid(parameter: &'static str, reason: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        parameter,
        reason: reason.to_string(),
    }
}

/// On-disk shape of `config.toml`. Everything except `library_directory`
/// has a default.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    library_directory: Option<String>,
    base_url: Option<String>,
    token_file: Option<PathBuf>,
    passphrase_file: Option<PathBuf>,
    store_path: Option<PathBuf>,
    staging_root: Option<PathBuf>,
    staging_threshold: Option<f64>,
    /// Treat staging as a volume of this many bytes instead of asking the
    /// filesystem. Intended for tests and constrained shared hosts.
    staging_capacity: Option<u64>,
    rate: Option<f64>,
    burst: Option<u32>,
    head_workers: Option<usize>,
    download_workers: Option<usize>,
    decrypt_workers: Option<usize>,
    upload_workers: Option<usize>,
    /// Acknowledges that raising download_workers above its default risks
    /// service-side throttling.
    accept_throttling_risk: Option<bool>,
    conversion_cap_hint: Option<usize>,
    snapshot_retain: Option<usize>,
    extract_marc: Option<bool>,
    extract_ocr: Option<bool>,
    gpg_binary: Option<String>,
    storage: Option<RawStorage>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
enum RawStorage {
    Local {
        root: PathBuf,
        #[serde(default)]
        prefix: String,
    },
    S3 {
        endpoint: String,
        bucket: String,
        #[serde(default = "default_region")]
        region: String,
        #[serde(default)]
        prefix: String,
        access_key_id: String,
        secret_key_file: Option<PathBuf>,
    },
}

fn default_region() -> String {
    "us-east-1".to_owned()
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub base_url: Option<String>,
    pub store_path: Option<PathBuf>,
    pub staging_root: Option<PathBuf>,
    pub staging_threshold: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum StorageChoice {
    Local {
        root: PathBuf,
        prefix: String,
    },
    S3 {
        endpoint: Url,
        bucket: String,
        region: String,
        prefix: String,
        access_key_id: String,
        secret_key: Secret,
    },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub library_directory: String,
    pub base_url: Url,
    pub token: Secret,
    pub passphrase: Secret,
    pub store_path: PathBuf,
    pub staging_root: PathBuf,
    pub staging_threshold: f64,
    pub staging_capacity: Option<u64>,
    pub rate: f64,
    pub burst: u32,
    pub head_workers: usize,
    pub download_workers: usize,
    pub decrypt_workers: usize,
    pub upload_workers: usize,
    pub conversion_cap_hint: usize,
    pub snapshot_retain: usize,
    pub extract_marc: bool,
    pub extract_ocr: bool,
    pub gpg_binary: String,
    pub storage: StorageChoice,
}

impl RunConfig {
    pub fn lock_path(&self) -> PathBuf {
        let mut name = self
            .store_path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_else(|| "grin-transfer.db".into());
        name.push(".lock");
        self.store_path.with_file_name(name)
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.store_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("runs")
    }

    pub fn snapshot_dir(&self) -> PathBuf {
        self.store_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("snapshots")
    }
}

/// The active config directory: explicit flag, then environment, then
/// `~/.config/grin-transfer`.
pub fn config_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_owned();
    }
    if let Ok(dir) = std::env::var(CONFIG_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    let home = std::env::var("HOME").unwrap_or_else(|_| ".".to_owned());
    Path::new(&home).join(".config").join("grin-transfer")
}

pub fn load_config(dir: &Path, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let path = dir.join(CONFIG_FILE);
    let raw: RawConfig = match std::fs::read_to_string(&path) {
        Ok(text) => toml::from_str(&text).map_err(|source| ConfigError::Malformed {
            path: path.clone(),
            source,
        })?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(missing(
                "library_directory",
                format!(" (no config file at {})", path.display()),
            ));
        }
        Err(source) => return Err(ConfigError::Unreadable { path, source }),
    };

    let library_directory = raw
        .library_directory
        .filter(|s| !s.is_empty())
        .ok_or_else(|| missing("library_directory", format!(" in {}", path.display())))?;

    let base_url_str = overrides
        .base_url
        .clone()
        .or(raw.base_url)
        .unwrap_or_else(|| "https://books.google.com".to_owned());
    let base_url = Url::parse(&base_url_str).map_err(|e| invalid("base_url", e))?;

    let token = resolve_secret(
        TOKEN_ENV,
        raw.token_file.as_deref(),
        dir,
        "token",
        "token_file",
    )?;
    let passphrase = resolve_secret(
        PASSPHRASE_ENV,
        raw.passphrase_file.as_deref(),
        dir,
        "passphrase",
        "passphrase_file",
    )?;

    let staging_threshold = overrides
        .staging_threshold
        .or(raw.staging_threshold)
        .unwrap_or(0.90);
    if !(0.0..=1.0).contains(&staging_threshold) || staging_threshold == 0.0 {
        return Err(invalid(
            "staging_threshold",
            format!("{staging_threshold} is not a fraction in (0, 1]"),
        ));
    }

    let rate = raw.rate.unwrap_or(5.0);
    if !(rate > 0.0) {
        return Err(invalid("rate", format!("{rate} requests/second")));
    }

    let head_workers = raw.head_workers.unwrap_or(3);
    if !(1..=3).contains(&head_workers) {
        return Err(invalid(
            "head_workers",
            format!("{head_workers}, must be between 1 and 3"),
        ));
    }
    let download_workers = raw.download_workers.unwrap_or(4);
    if download_workers == 0 {
        return Err(invalid("download_workers", "0"));
    }
    if download_workers > 4 && !raw.accept_throttling_risk.unwrap_or(false) {
        return Err(invalid(
            "download_workers",
            format!(
                "{download_workers} exceeds the safe default of 4; set accept_throttling_risk = true to override"
            ),
        ));
    }
    let decrypt_workers = raw.decrypt_workers.unwrap_or(2).max(1);
    let upload_workers = raw.upload_workers.unwrap_or(4).max(1);

    let storage = match raw.storage {
        None => StorageChoice::Local {
            root: dir.join("mirror"),
            prefix: String::new(),
        },
        Some(RawStorage::Local { root, prefix }) => StorageChoice::Local { root, prefix },
        Some(RawStorage::S3 {
            endpoint,
            bucket,
            region,
            prefix,
            access_key_id,
            secret_key_file,
        }) => {
            let endpoint = Url::parse(&endpoint).map_err(|e| invalid("storage.endpoint", e))?;
            if bucket.is_empty() {
                return Err(missing("storage.bucket", ""));
            }
            let secret_key = resolve_secret(
                S3_SECRET_ENV,
                secret_key_file.as_deref(),
                dir,
                "s3-secret-key",
                "storage.secret_key_file",
            )?;
            StorageChoice::S3 {
                endpoint,
                bucket,
                region,
                prefix,
                access_key_id,
                secret_key,
            }
        }
    };

    Ok(RunConfig {
        library_directory,
        base_url,
        token,
        passphrase,
        store_path: overrides
            .store_path
            .clone()
            .or(raw.store_path)
            .unwrap_or_else(|| PathBuf::from("./grin-transfer.db")),
        staging_root: overrides
            .staging_root
            .clone()
            .or(raw.staging_root)
            .unwrap_or_else(|| PathBuf::from("./staging")),
        staging_threshold,
        staging_capacity: raw.staging_capacity,
        rate,
        burst: raw.burst.unwrap_or(5),
        head_workers,
        download_workers,
        decrypt_workers,
        upload_workers,
        conversion_cap_hint: raw.conversion_cap_hint.unwrap_or(50_000),
        snapshot_retain: raw.snapshot_retain.unwrap_or(5),
        extract_marc: raw.extract_marc.unwrap_or(true),
        extract_ocr: raw.extract_ocr.unwrap_or(true),
        gpg_binary: raw.gpg_binary.unwrap_or_else(|| "gpg".to_owned()),
        storage,
    })
}

/// Environment variable wins; otherwise read the referenced file (relative
/// paths resolve against the config directory). The error names both the
/// file parameter and the variable so the fix is obvious.
fn resolve_secret(
    env_var: &'static str,
    file: Option<&Path>,
    dir: &Path,
    default_name: &str,
    parameter: &'static str,
) -> Result<Secret, ConfigError> {
    if let Ok(value) = std::env::var(env_var) {
        if !value.is_empty() {
            return Ok(Secret::new(value));
        }
    }
    let path = match file {
        Some(p) if p.is_absolute() => p.to_owned(),
        Some(p) => dir.join(p),
        None => dir.join(default_name),
    };
    match std::fs::read_to_string(&path) {
        Ok(text) => {
            let trimmed = text.trim();
            if trimmed.is_empty() {
                Err(invalid(parameter, format!("{} is empty", path.display())))
            } else {
                Ok(Secret::new(trimmed.to_owned()))
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(missing(
            parameter,
            format!(
                " (no file at {}, and {env_var} is unset)",
                path.display()
            ),
        )),
        Err(source) => Err(ConfigError::Unreadable { path, source }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_minimal(dir: &Path) {
        std::fs::write(
            dir.join(CONFIG_FILE),
            "library_directory = \"Harvard\"\n",
        )
        .unwrap();
        std::fs::write(dir.join("token"), "tok-123\n").unwrap();
        std::fs::write(dir.join("passphrase"), "pass-456\n").unwrap();
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(dir.path());
        let cfg = load_config(dir.path(), &Overrides::default()).unwrap();
        assert_eq!(cfg.library_directory, "Harvard");
        assert_eq!(cfg.base_url.as_str(), "https://books.google.com/");
        assert_eq!(cfg.token.expose(), "tok-123");
        assert_eq!(cfg.passphrase.expose(), "pass-456");
        assert_eq!(cfg.rate, 5.0);
        assert_eq!(cfg.burst, 5);
        assert_eq!(cfg.staging_threshold, 0.90);
        assert_eq!(cfg.head_workers, 3);
        assert_eq!(cfg.download_workers, 4);
        assert_eq!(cfg.decrypt_workers, 2);
        assert_eq!(cfg.conversion_cap_hint, 50_000);
        assert_eq!(cfg.store_path, PathBuf::from("./grin-transfer.db"));
        assert!(cfg.extract_marc && cfg.extract_ocr);
        assert!(matches!(cfg.storage, StorageChoice::Local { .. }));
    }

    #[test]
    fn missing_library_directory_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(CONFIG_FILE), "rate = 2.0\n").unwrap();
        let err = load_config(dir.path(), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("library_directory"), "{err}");
    }

    #[test]
    fn missing_token_file_names_parameter_and_env() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join(CONFIG_FILE),
            "library_directory = \"X\"\n",
        )
        .unwrap();
        let err = load_config(dir.path(), &Overrides::default()).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("token_file"), "{text}");
        assert!(text.contains(TOKEN_ENV), "{text}");
    }

    #[test]
    fn overrides_win_over_file_values() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(dir.path());
        let cfg = load_config(
            dir.path(),
            &Overrides {
                base_url: Some("http://127.0.0.1:9999".to_owned()),
                staging_threshold: Some(0.80),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(cfg.base_url.as_str(), "http://127.0.0.1:9999/");
        assert_eq!(cfg.staging_threshold, 0.80);
    }

    #[test]
    fn head_worker_bounds_enforced() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(dir.path());
        std::fs::write(
            dir.path().join(CONFIG_FILE),
            "library_directory = \"X\"\nhead_workers = 4\n",
        )
        .unwrap();
        let err = load_config(dir.path(), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("head_workers"), "{err}");
    }

    #[test]
    fn raising_download_workers_requires_explicit_acknowledgement() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(dir.path());
        std::fs::write(
            dir.path().join(CONFIG_FILE),
            "library_directory = \"X\"\ndownload_workers = 8\n",
        )
        .unwrap();
        let err = load_config(dir.path(), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("accept_throttling_risk"), "{err}");

        std::fs::write(
            dir.path().join(CONFIG_FILE),
            "library_directory = \"X\"\ndownload_workers = 8\naccept_throttling_risk = true\n",
        )
        .unwrap();
        let cfg = load_config(dir.path(), &Overrides::default()).unwrap();
        assert_eq!(cfg.download_workers, 8);
    }

    #[test]
    fn s3_storage_block_parses_and_resolves_secret() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(dir.path());
        std::fs::write(
            dir.path().join(CONFIG_FILE),
            concat!(
                "library_directory = \"X\"\n",
                "[storage]\n",
                "backend = \"s3\"\n",
                "endpoint = \"http://127.0.0.1:9000\"\n",
                "bucket = \"mirror\"\n",
                "access_key_id = \"AK\"\n",
            ),
        )
        .unwrap();
        std::fs::write(dir.path().join("s3-secret-key"), "sk-789\n").unwrap();
        let cfg = load_config(dir.path(), &Overrides::default()).unwrap();
        match cfg.storage {
            StorageChoice::S3 {
                bucket, secret_key, region, ..
            } => {
                assert_eq!(bucket, "mirror");
                assert_eq!(region, "us-east-1");
                assert_eq!(secret_key.expose(), "sk-789");
            }
            other => panic!("wrong backend: {other:?}"),
        }
    }

    #[test]
    fn secrets_never_render_in_debug_output() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(dir.path());
        let cfg = load_config(dir.path(), &Overrides::default()).unwrap();
        let dump = format!("{cfg:?}");
        assert!(!dump.contains("tok-123"), "token leaked: {dump}");
        assert!(!dump.contains("pass-456"), "passphrase leaked: {dump}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(dir.path());
        std::fs::write(
            dir.path().join(CONFIG_FILE),
            "library_directory = \"X\"\nratee = 2.0\n",
        )
        .unwrap();
        let err = load_config(dir.path(), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("invalid"), "{err}");
    }
}
