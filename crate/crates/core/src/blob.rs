//! Content-addressed blob storage (SHA-256), one file per distinct payload.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::record::{ContentAddress, CONTENT_ALGORITHM};
use crate::segment::sync_dir;

#[derive(Debug, thiserror::Error)]
pub enum BlobError {
    #[error("blob {0} not found")]
    NotFound(String),
    #[error("unsupported content address: {0}")]
    BadAddress(String),
    #[error("blob {0} failed its integrity check")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug)]
pub struct BlobStore {
    dir: PathBuf,
    tmp_counter: AtomicU64,
}

fn valid_digest(d: &str) -> bool {
    d.len() == 64 && d.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

impl BlobStore {
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(BlobStore {
            dir,
            tmp_counter: AtomicU64::new(0),
        })
    }

    fn path_of(&self, digest: &str) -> PathBuf {
        self.dir.join(&digest[..2]).join(digest)
    }

    /// Store `bytes` once; the address depends only on the content.
    pub fn put(&self, bytes: &[u8]) -> io::Result<ContentAddress> {
        let addr = ContentAddress::of(bytes);
        let path = self.path_of(&addr.digest);
        if path.exists() {
            return Ok(addr);
        }
        let shard = path.parent().expect("sharded path");
        fs::create_dir_all(shard)?;
        let tmp = self.dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        sync_dir(shard)?;
        Ok(addr)
    }

    pub fn get(&self, addr: &ContentAddress) -> Result<Vec<u8>, BlobError> {
        if addr.algorithm != CONTENT_ALGORITHM || !valid_digest(&addr.digest) {
            return Err(BlobError::BadAddress(addr.to_string()));
        }
        let bytes = match fs::read(self.path_of(&addr.digest)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(BlobError::NotFound(addr.digest.clone()))
            }
            Err(e) => return Err(e.into()),
        };
        if ContentAddress::of(&bytes).digest != addr.digest {
            return Err(BlobError::Corrupt(addr.digest.clone()));
        }
        Ok(bytes)
    }

    pub fn contains(&self, digest: &str) -> bool {
        valid_digest(digest) && self.path_of(digest).exists()
    }

    /// Returns whether a blob was removed.
    pub fn delete(&self, digest: &str) -> io::Result<bool> {
        if !valid_digest(digest) {
            return Ok(false);
        }
        match fs::remove_file(self.path_of(digest)) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(e),
        }
    }

    /// Digests of every stored blob, sorted.
    pub fn list(&self) -> io::Result<Vec<String>> {
        let mut out = Vec::new();
        for shard in fs::read_dir(&self.dir)? {
            let shard = shard?;
            if !shard.file_type()?.is_dir() {
                continue;
            }
            for f in fs::read_dir(shard.path())? {
                let name = f?.file_name();
                if let Some(n) = name.to_str() {
                    if valid_digest(n) {
                        out.push(n.to_owned());
                    }
                }
            }
        }
        out.sort();
        Ok(out)
    }
}
