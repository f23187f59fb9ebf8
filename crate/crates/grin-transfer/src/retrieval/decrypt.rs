//! Package decryption by shelling out to gpg. Packages are symmetrically
//! encrypted; the passphrase goes to gpg over a pipe, never on the command
//! line and never into logs or error text.

use std::path::{Path, PathBuf};
use std::process::Stdio;

use tokio::io::AsyncWriteExt;

#[derive(Debug, thiserror::Error)]
pub enum DecryptError {
    #[error("failed to launch {gpg}: {source}")]
    Spawn {
        gpg: String,
        #[source]
        source: std::io::Error,
    },
    #[error("gpg exited with {status}: {stderr}")]
    Gpg { status: String, stderr: String },
    #[error("io during decrypt of {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub struct GpgCliDecryptor {
    gpg: String,
    passphrase: String,
}

impl std::fmt::Debug for GpgCliDecryptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GpgCliDecryptor")
            .field("gpg", &self.gpg)
            .field("passphrase", &"<redacted>")
            .finish()
    }
}

impl GpgCliDecryptor {
    pub fn new(passphrase: String) -> Self {
        Self {
            gpg: "gpg".to_owned(),
            passphrase,
        }
    }

    pub fn with_binary(mut self, gpg: impl Into<String>) -> Self {
        self.gpg = gpg.into();
        self
    }

    /// Decrypts `input` to `output`, replacing any existing file there.
    pub async fn decrypt(&self, input: &Path, output: &Path) -> Result<(), DecryptError> {
        let mut child = tokio::process::Command::new(&self.gpg)
            .arg("--batch")
            .arg("--yes")
            .arg("--quiet")
            .arg("--pinentry-mode")
            .arg("loopback")
            .arg("--passphrase-fd")
            .arg("0")
            .arg("--output")
            .arg(output)
            .arg("--decrypt")
            .arg(input)
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| DecryptError::Spawn {
                gpg: self.gpg.clone(),
                source,
            })?;

        let mut stdin = child.stdin.take().expect("stdin was piped");
        let passphrase = format!("{}\n", self.passphrase);
        let io_err = |source| DecryptError::Io {
            path: input.to_owned(),
            source,
        };
        stdin.write_all(passphrase.as_bytes()).await.map_err(io_err)?;
        drop(stdin);

        let out = child.wait_with_output().await.map_err(io_err)?;
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            // gpg never echoes the passphrase, but cap the quote anyway.
            let snippet: String = stderr.chars().take(400).collect();
            return Err(DecryptError::Gpg {
                status: out.status.to_string(),
                stderr: snippet,
            });
        }
        Ok(())
    }
}
