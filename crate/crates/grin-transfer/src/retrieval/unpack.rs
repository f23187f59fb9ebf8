//! Safe extraction of package archives. The archive comes from an external
//! service, so entry paths are treated as hostile: anything that could land
//! outside the destination is rejected and the destination is only renamed
//! into place after the whole archive extracted cleanly.

use std::io::Read;
use std::path::{Component, Path, PathBuf};

use flate2::read::GzDecoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UnpackReport {
    pub files: usize,
    pub bytes: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum UnpackError {
    #[error("archive entry {path:?} escapes the destination")]
    EscapingPath { path: String },
    #[error("archive entry {path:?} is a {kind}, only files and directories are allowed")]
    ForbiddenEntryKind { path: String, kind: &'static str },
    #[error("corrupt archive: {0}")]
    Archive(#[source] std::io::Error),
    #[error("io under {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("destination {0} already exists")]
    DestinationExists(PathBuf),
}

/// Extracts a gzipped tar archive file into a fresh directory at `dest`.
/// `dest` must not exist; on any failure it still will not.
pub fn unpack_archive(archive: &Path, dest: &Path) -> Result<UnpackReport, UnpackError> {
    let file = std::fs::File::open(archive).map_err(|source| UnpackError::Io {
        path: archive.to_owned(),
        source,
    })?;
    unpack_tar_gz(std::io::BufReader::new(file), dest)
}

/// Reader-based variant of [`unpack_archive`].
pub fn unpack_tar_gz(reader: impl Read, dest: &Path) -> Result<UnpackReport, UnpackError> {
    if dest.exists() {
        return Err(UnpackError::DestinationExists(dest.to_owned()));
    }
    let parent = dest.parent().unwrap_or(Path::new("."));
    let staged = tempfile::Builder::new()
        .prefix(".unpack-")
        .tempdir_in(parent)
        .map_err(|source| UnpackError::Io {
            path: parent.to_owned(),
            source,
        })?;

    let report = extract_into(reader, staged.path())?;

    // keep() disarms the cleanup guard; from here the rename owns the dir.
    let staged = staged.keep();
    std::fs::rename(&staged, dest).map_err(|source| {
        let _ = std::fs::remove_dir_all(&staged);
        UnpackError::Io {
            path: dest.to_owned(),
            source,
        }
    })?;
    Ok(report)
}

fn extract_into(reader: impl Read, dir: &Path) -> Result<UnpackReport, UnpackError> {
    let mut archive = tar::Archive::new(GzDecoder::new(reader));
    let mut report = UnpackReport::default();

    for entry in archive.entries().map_err(UnpackError::Archive)? {
        let mut entry = entry.map_err(UnpackError::Archive)?;
        let raw_path = entry.path().map_err(UnpackError::Archive)?.into_owned();
        let rel = sanitize_entry_path(&raw_path)?;

        use tar::EntryType;
        match entry.header().entry_type() {
            EntryType::Directory => {
                let target = dir.join(&rel);
                std::fs::create_dir_all(&target).map_err(|source| UnpackError::Io {
                    path: target,
                    source,
                })?;
            }
            EntryType::Regular | EntryType::Continuous => {
                let target = dir.join(&rel);
                if let Some(parent) = target.parent() {
                    std::fs::create_dir_all(parent).map_err(|source| UnpackError::Io {
                        path: parent.to_owned(),
                        source,
                    })?;
                }
                let mut out =
                    std::fs::File::create(&target).map_err(|source| UnpackError::Io {
                        path: target.clone(),
                        source,
                    })?;
                let copied =
                    std::io::copy(&mut entry, &mut out).map_err(UnpackError::Archive)?;
                report.files += 1;
                report.bytes += copied;
            }
            EntryType::Symlink | EntryType::Link => {
                return Err(UnpackError::ForbiddenEntryKind {
                    path: raw_path.display().to_string(),
                    kind: "link",
                });
            }
            other => {
                return Err(UnpackError::ForbiddenEntryKind {
                    path: raw_path.display().to_string(),
                    kind: entry_kind_name(other),
                });
            }
        }
    }
    Ok(report)
}

fn entry_kind_name(kind: tar::EntryType) -> &'static str {
    use tar::EntryType;
    match kind {
        EntryType::Char | EntryType::Block => "device node",
        EntryType::Fifo => "fifo",
        _ => "special entry",
    }
}

/// Accepts only plain relative paths: no root, no drive, no `..`, no empty.
fn sanitize_entry_path(raw: &Path) -> Result<PathBuf, UnpackError> {
    let mut clean = PathBuf::new();
    for component in raw.components() {
        match component {
            Component::Normal(part) => clean.push(part),
            Component::CurDir => {}
            Component::RootDir | Component::Prefix(_) | Component::ParentDir => {
                return Err(UnpackError::EscapingPath {
                    path: raw.display().to_string(),
                });
            }
        }
    }
    if clean.as_os_str().is_empty() {
        return Err(UnpackError::EscapingPath {
            path: raw.display().to_string(),
        });
    }
    Ok(clean)
}
