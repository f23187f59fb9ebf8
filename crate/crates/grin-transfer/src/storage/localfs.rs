//! Filesystem storage backend. Each object is a file under the root plus a
//! `<name>.meta` sidecar holding `key=value` metadata lines. Writes stage to
//! a temp file and rename so a crash never leaves a half-written object
//! visible under its final name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use async_trait::async_trait;

use super::{validate_key, ArtifactHead, PutReceipt, StorageBackend, StorageError};

pub struct LocalFs {
    root: PathBuf,
}

impl LocalFs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn object_path(&self, key: &str) -> Result<PathBuf, StorageError> {
        validate_key(key)?;
        let mut path = self.root.clone();
        for segment in key.split('/') {
            path.push(segment);
        }
        Ok(path)
    }

    fn meta_path(object: &Path) -> PathBuf {
        let mut name = object
            .file_name()
            .expect("validated keys have a file name")
            .to_os_string();
        name.push(".meta");
        object.with_file_name(name)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_owned(),
        source,
    }
}

fn encode_meta(metadata: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in metadata {
        // Keys are fixed identifiers and values are etags; neither side
        // legitimately contains newlines, so reject rather than mangle.
        debug_assert!(!k.contains(['\n', '=']) && !v.contains('\n'));
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

fn decode_meta(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|line| {
            let (k, v) = line.split_once('=')?;
            Some((k.to_owned(), v.to_owned()))
        })
        .collect()
}

#[async_trait]
impl StorageBackend for LocalFs {
    async fn put_artifact(
        &self,
        key: &str,
        source: &Path,
        metadata: &BTreeMap<String, String>,
    ) -> Result<PutReceipt, StorageError> {
        let object = self.object_path(key)?;
        let parent = object.parent().expect("object path has a parent");
        tokio::fs::create_dir_all(parent)
            .await
            .map_err(io_err(parent))?;

        let staged = object.with_extension("part");
        tokio::fs::copy(source, &staged)
            .await
            .map_err(io_err(source))?;
        let size = tokio::fs::metadata(&staged)
            .await
            .map_err(io_err(&staged))?
            .len();

        // Sidecar lands before the object so a reader that sees the object
        // also sees its metadata.
        let meta = Self::meta_path(&object);
        tokio::fs::write(&meta, encode_meta(metadata))
            .await
            .map_err(io_err(&meta))?;
        tokio::fs::rename(&staged, &object)
            .await
            .map_err(io_err(&object))?;

        Ok(PutReceipt {
            key: key.to_owned(),
            size,
        })
    }

    async fn head_artifact(&self, key: &str) -> Result<Option<ArtifactHead>, StorageError> {
        let object = self.object_path(key)?;
        let stat = match tokio::fs::metadata(&object).await {
            Ok(stat) => stat,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&object)(e)),
        };
        // A hand-deleted sidecar degrades to empty metadata: the object is
        // still usable, it just cannot prove which upstream etag produced it.
        let metadata = match tokio::fs::read_to_string(Self::meta_path(&object)).await {
            Ok(text) => decode_meta(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(io_err(&object)(e)),
        };
        Ok(Some(ArtifactHead {
            size: stat.len(),
            metadata,
        }))
    }

    async fn get_artifact(&self, key: &str, dest: &Path) -> Result<Option<u64>, StorageError> {
        let object = self.object_path(key)?;
        match tokio::fs::copy(&object, dest).await {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&object)(e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[tokio::test]
    async fn round_trips_object_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let fs = LocalFs::new(dir.path().join("store"));
        let src = dir.path().join("payload");
        std::fs::write(&src, b"package bytes").unwrap();

        let m = meta(&[(super::super::META_SOURCE_ETAG, "\"abc123\"")]);
        let receipt = fs.put_artifact("packages/B1.tar.gz", &src, &m).await.unwrap();
        assert_eq!(receipt.size, 13);

        let head = fs.head_artifact("packages/B1.tar.gz").await.unwrap().unwrap();
        assert_eq!(head.size, 13);
        assert_eq!(
            head.metadata.get(super::super::META_SOURCE_ETAG).unwrap(),
            "\"abc123\""
        );

        let out = dir.path().join("fetched");
        let got = fs.get_artifact("packages/B1.tar.gz", &out).await.unwrap();
        assert_eq!(got, Some(13));
        assert_eq!(std::fs::read(&out).unwrap(), b"package bytes");
    }

    #[tokio::test]
    async fn absent_object_heads_and_gets_as_none() {
        let dir = tempfile::tempdir().unwrap();
        let fs = LocalFs::new(dir.path());
        assert_eq!(fs.head_artifact("missing/x").await.unwrap(), None);
        let out = dir.path().join("out");
        assert_eq!(fs.get_artifact("missing/x", &out).await.unwrap(), None);
    }

    #[tokio::test]
    async fn overwrite_replaces_both_object_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let fs = LocalFs::new(dir.path().join("store"));
        let src1 = dir.path().join("v1");
        let src2 = dir.path().join("v2");
        std::fs::write(&src1, b"one").unwrap();
        std::fs::write(&src2, b"two-two").unwrap();

        fs.put_artifact("a/b", &src1, &meta(&[("grin_encrypted_etag", "e1")]))
            .await
            .unwrap();
        fs.put_artifact("a/b", &src2, &meta(&[("grin_encrypted_etag", "e2")]))
            .await
            .unwrap();

        let head = fs.head_artifact("a/b").await.unwrap().unwrap();
        assert_eq!(head.size, 7);
        assert_eq!(head.metadata.get("grin_encrypted_etag").unwrap(), "e2");
    }

    #[tokio::test]
    async fn deleted_sidecar_degrades_to_empty_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("store");
        let fs = LocalFs::new(&root);
        let src = dir.path().join("payload");
        std::fs::write(&src, b"bytes").unwrap();
        fs.put_artifact("a/b", &src, &meta(&[("grin_encrypted_etag", "e1")]))
            .await
            .unwrap();

        std::fs::remove_file(root.join("a/b.meta")).unwrap();
        let head = fs.head_artifact("a/b").await.unwrap().unwrap();
        assert_eq!(head.size, 5);
        assert!(head.metadata.is_empty());
    }
}
