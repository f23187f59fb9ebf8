//! Staging disk watermark. Downloads pause while the staging volume sits at
//! or above 90% so a burst of large packages cannot wedge the host, and
//! resume once decryption and upload drain the directory.

use std::path::{Path, PathBuf};

/// Fraction of capacity at which intake pauses.
pub const PAUSE_THRESHOLD: f64 = 0.90;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagingStatus {
    pub used: u64,
    pub capacity: u64,
    pub paused: bool,
}

enum CapacityMode {
    /// Ask the filesystem hosting the staging root.
    Filesystem,
    /// Pretend the staging directory is a volume of this size and measure
    /// usage as the directory's contents. Lets tests hit the watermark with
    /// kilobytes instead of a dedicated mount.
    Fixed(u64),
}

pub struct StagingMonitor {
    root: PathBuf,
    mode: CapacityMode,
    threshold: f64,
}

impl StagingMonitor {
    pub fn filesystem(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            mode: CapacityMode::Filesystem,
            threshold: PAUSE_THRESHOLD,
        }
    }

    pub fn fixed_capacity(root: impl Into<PathBuf>, capacity: u64) -> Self {
        assert!(capacity > 0, "zero-capacity staging is always paused");
        Self {
            root: root.into(),
            mode: CapacityMode::Fixed(capacity),
            threshold: PAUSE_THRESHOLD,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        assert!(
            threshold > 0.0 && threshold <= 1.0,
            "threshold is a fraction of capacity"
        );
        self.threshold = threshold;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn check(&self) -> std::io::Result<StagingStatus> {
        let (used, capacity) = match self.mode {
            CapacityMode::Filesystem => fs_usage(&self.root)?,
            CapacityMode::Fixed(capacity) => (dir_size(&self.root)?, capacity),
        };
        Ok(StagingStatus {
            used,
            capacity,
            paused: used as f64 >= capacity as f64 * self.threshold,
        })
    }
}

fn fs_usage(root: &Path) -> std::io::Result<(u64, u64)> {
    use std::os::unix::ffi::OsStrExt;
    let path = std::ffi::CString::new(root.as_os_str().as_bytes())
        .map_err(|_| std::io::Error::other("staging path contains NUL"))?;
    let mut stat: libc::statvfs = unsafe { std::mem::zeroed() };
    if unsafe { libc::statvfs(path.as_ptr(), &mut stat) } != 0 {
        return Err(std::io::Error::last_os_error());
    }
    let frsize = stat.f_frsize as u64;
    let capacity = stat.f_blocks as u64 * frsize;
    // bavail, not bfree: root-reserved blocks are not ours to fill.
    let available = stat.f_bavail as u64 * frsize;
    Ok((capacity.saturating_sub(available), capacity))
}

fn dir_size(root: &Path) -> std::io::Result<u64> {
    let mut total = 0;
    let mut stack = vec![root.to_owned()];
    while let Some(dir) = stack.pop() {
        let entries = match std::fs::read_dir(&dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
            Err(e) => return Err(e),
        };
        for entry in entries {
            let entry = entry?;
            let meta = entry.metadata()?;
            if meta.is_dir() {
                stack.push(entry.path());
            } else {
                total += meta.len();
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_mode_pauses_at_ninety_percent() {
        let dir = tempfile::tempdir().unwrap();
        let monitor = StagingMonitor::fixed_capacity(dir.path(), 1000);

        let status = monitor.check().unwrap();
        assert_eq!(status.used, 0);
        assert!(!status.paused);

        std::fs::write(dir.path().join("a"), vec![0u8; 899]).unwrap();
        assert!(!monitor.check().unwrap().paused);

        std::fs::write(dir.path().join("b"), vec![0u8; 1]).unwrap();
        let status = monitor.check().unwrap();
        assert_eq!(status.used, 900);
        assert!(status.paused, "900/1000 is exactly the watermark");

        std::fs::remove_file(dir.path().join("a")).unwrap();
        assert!(!monitor.check().unwrap().paused);
    }

    #[test]
    fn fixed_mode_descends_into_subdirectories() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("B1/unpacked")).unwrap();
        std::fs::write(dir.path().join("B1/pkg.gpg"), vec![0u8; 300]).unwrap();
        std::fs::write(dir.path().join("B1/unpacked/p.txt"), vec![0u8; 200]).unwrap();
        let monitor = StagingMonitor::fixed_capacity(dir.path(), 10_000);
        assert_eq!(monitor.check().unwrap().used, 500);
    }

    #[test]
    fn filesystem_mode_reports_sane_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let monitor = StagingMonitor::filesystem(dir.path());
        let status = monitor.check().unwrap();
        assert!(status.capacity > 0);
        assert!(status.used <= status.capacity);
    }

    #[test]
    fn missing_root_counts_as_empty() {
        let dir = tempfile::tempdir().unwrap();
        let monitor = StagingMonitor::fixed_capacity(dir.path().join("nonexistent"), 100);
        assert_eq!(monitor.check().unwrap().used, 0);
    }
}
