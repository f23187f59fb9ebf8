//! Single-session lock next to the catalog so overlapping scheduled runs
//! (cron firing while the previous run is still going) skip instead of
//! fighting over the catalog and staging area.
//!
//! The lock file records the owner's PID and its kernel start time, which
//! together survive PID reuse. A lock whose owner is provably dead is
//! reclaimed immediately no matter how old it is, so a crashed run never
//! blocks the next one. The staleness window only applies when the file is
//! unreadable and liveness cannot be determined.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct LockContents {
    pid: u32,
    /// Kernel start time of the owning process (clock ticks since boot).
    starttime: Option<u64>,
    acquired_at: String,
}

#[derive(Debug)]
pub enum LockOutcome {
    Acquired(SessionLock),
    /// Another live session holds the lock.
    Busy { pid: u32, acquired_at: String },
}

#[derive(Debug, thiserror::Error)]
pub enum LockError {
    #[error("lock file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gave up acquiring {0} after repeated reclaim races")]
    Contention(PathBuf),
}

/// Held lock; removing the file on drop releases it.
#[derive(Debug)]
pub struct SessionLock {
    path: PathBuf,
    pid: u32,
}

impl SessionLock {
    /// Tries to take the lock at `path`. `staleness` bounds how long an
    /// *undecipherable* lock file is honored; a readable lock with a dead
    /// owner is reclaimed at once.
    pub fn acquire(path: &Path, staleness: Duration) -> Result<LockOutcome, LockError> {
        let io_err = |source| LockError::Io {
            path: path.to_path_buf(),
            source,
        };
        for _ in 0..5 {
            match std::fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(path)
            {
                Ok(mut file) => {
                    let pid = std::process::id();
                    let contents = LockContents {
                        pid,
                        starttime: proc_starttime(pid),
                        acquired_at: crate::store::now_utc(),
                    };
                    file.write_all(serde_json::to_string(&contents).unwrap().as_bytes())
                        .and_then(|_| file.sync_all())
                        .map_err(io_err)?;
                    return Ok(LockOutcome::Acquired(SessionLock {
                        path: path.to_path_buf(),
                        pid,
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    match Self::examine(path, staleness).map_err(io_err)? {
                        Examination::OwnerAlive { pid, acquired_at } => {
                            return Ok(LockOutcome::Busy { pid, acquired_at });
                        }
                        Examination::Reclaimable { reason } => {
                            warn!(path = %path.display(), reason, "reclaiming abandoned session lock");
                            match std::fs::remove_file(path) {
                                Ok(()) => {}
                                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                                Err(e) => return Err(io_err(e)),
                            }
                            // Retry the create; a concurrent reclaimer may
                            // win, in which case we see Busy next round.
                        }
                        Examination::Vanished => {}
                    }
                }
                Err(e) => return Err(io_err(e)),
            }
        }
        Err(LockError::Contention(path.to_path_buf()))
    }

    fn examine(path: &Path, staleness: Duration) -> std::io::Result<Examination> {
        let raw = match std::fs::read_to_string(path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(Examination::Vanished)
            }
            Err(e) => return Err(e),
        };
        match serde_json::from_str::<LockContents>(&raw) {
            Ok(contents) => {
                if process_alive(contents.pid, contents.starttime) {
                    Ok(Examination::OwnerAlive {
                        pid: contents.pid,
                        acquired_at: contents.acquired_at,
                    })
                } else {
                    Ok(Examination::Reclaimable {
                        reason: "owning process is gone",
                    })
                }
            }
            Err(_) => {
                // Can't identify the owner; honor the file until it ages out.
                let age = std::fs::metadata(path)
                    .and_then(|m| m.modified())
                    .ok()
                    .and_then(|m| m.elapsed().ok())
                    .unwrap_or(Duration::MAX);
                if age >= staleness {
                    Ok(Examination::Reclaimable {
                        reason: "unreadable lock file past the staleness window",
                    })
                } else {
                    Ok(Examination::OwnerAlive {
                        pid: 0,
                        acquired_at: String::new(),
                    })
                }
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Explicit release for callers that want the error.
    pub fn release(self) -> Result<(), LockError> {
        let path = self.path.clone();
        // Drop does the removal; this just surfaces failures.
        drop(self);
        if path.exists() {
            return Err(LockError::Io {
                path: path.clone(),
                source: std::io::Error::other("lock file still present after release"),
            });
        }
        Ok(())
    }
}

impl Drop for SessionLock {
    fn drop(&mut self) {
        // Only remove the file if it is still ours; a reclaimer that raced a
        // dying process must not lose its fresh lock.
        let ours = std::fs::read_to_string(&self.path)
            .ok()
            .and_then(|raw| serde_json::from_str::<LockContents>(&raw).ok())
            .map(|c| c.pid == self.pid)
            .unwrap_or(false);
        if ours {
            if let Err(err) = std::fs::remove_file(&self.path) {
                warn!(path = %self.path.display(), %err, "could not remove session lock");
            } else {
                info!(path = %self.path.display(), "session lock released");
            }
        }
    }
}

enum Examination {
    OwnerAlive { pid: u32, acquired_at: String },
    Reclaimable { reason: &'static str },
    Vanished,
}

/// Start time (field 22 of /proc/<pid>/stat) of a process, if it exists.
/// The comm field may contain spaces or parens, so parsing starts after the
/// last closing paren.
fn proc_starttime(pid: u32) -> Option<u64> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    let rest = &stat[stat.rfind(')')? + 1..];
    rest.split_whitespace().nth(19)?.parse().ok()
}

fn process_alive(pid: u32, expected_starttime: Option<u64>) -> bool {
    match proc_starttime(pid) {
        Some(actual) => match expected_starttime {
            // Same PID but a different start time is a reused PID.
            Some(expected) => actual == expected,
            None => probe_alive(pid),
        },
        None => {
            // No /proc entry: gone, unless /proc itself is unavailable.
            if Path::new("/proc/self").exists() {
                false
            } else {
                probe_alive(pid)
            }
        }
    }
}

fn probe_alive(pid: u32) -> bool {
    // kill(pid, 0) checks existence without signaling.
    unsafe { libc::kill(pid as libc::pid_t, 0) == 0 }
}
