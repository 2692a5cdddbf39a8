use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ImageError, ImageTensor};

/// Source of images for queries that miss the cache.
pub trait RetrievalBackend: Send + Sync {
    fn name(&self) -> &str;
    fn fetch(&self, query: &str) -> Result<ImageTensor, ImageError>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub backend_calls: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    query: String,
    source: String,
    timestamp: u64,
}

/// Trimmed, lowercased, single-spaced form used as the cache key.
pub fn canonical_query(query: &str) -> String {
    query.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

pub fn query_hash(query: &str) -> String {
    hex::encode(Sha256::digest(canonical_query(query).as_bytes()))
}

/// Content-addressed image cache:
///
/// ```text
/// <root>/index.json          canonical query -> hash
/// <root>/blobs/<hash>.png
/// <root>/blobs/<hash>.json   sidecar: query, source, timestamp
/// ```
pub struct ImageCache {
    root: PathBuf,
    size: usize,
    index: RwLock<BTreeMap<String, String>>,
    writer: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
    backend_calls: AtomicU64,
}

fn io_err(path: &Path, e: std::io::Error) -> ImageError {
    ImageError::Io(format!("{}: {e}", path.display()))
}

impl ImageCache {
    /// Opens (creating if needed) a cache whose images are `size x size`.
    pub fn open(root: impl Into<PathBuf>, size: usize) -> Result<Self, ImageError> {
        let root = root.into();
        let blobs = root.join("blobs");
        fs::create_dir_all(&blobs).map_err(|e| io_err(&blobs, e))?;
        let index_path = root.join("index.json");
        let index = if index_path.exists() {
            let text = fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
            serde_json::from_str(&text).map_err(|e| ImageError::Decode(format!("index.json: {e}")))?
        } else {
            BTreeMap::new()
        };
        Ok(ImageCache {
            root,
            size,
            index: RwLock::new(index),
            writer: Mutex::new(()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            backend_calls: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
        }
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("index lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, query: &str) -> bool {
        self.index.read().expect("index lock").contains_key(&canonical_query(query))
    }

    fn blob_path(&self, hash: &str, ext: &str) -> PathBuf {
        self.root.join("blobs").join(format!("{hash}.{ext}"))
    }

    fn read_entry(&self, hash: &str) -> Result<ImageTensor, String> {
        let bytes = fs::read(self.blob_path(hash, "png")).map_err(|e| e.to_string())?;
        let image = ImageTensor::from_png(&bytes).map_err(|e| e.to_string())?;
        if image.height != self.size || image.width != self.size {
            return Err(format!("stored image is {}x{}", image.width, image.height));
        }
        Ok(image)
    }

    /// Returns the image for `query`, calling the backend only on a miss.
    /// Results are quantized to 8 bits so hits and misses agree exactly.
    pub fn fetch(&self, query: &str, backend: &dyn RetrievalBackend) -> Result<ImageTensor, ImageError> {
        let key = canonical_query(query);
        let cached = self.index.read().expect("index lock").get(&key).cloned();
        if let Some(hash) = cached {
            match self.read_entry(&hash) {
                Ok(image) => {
                    self.hits.fetch_add(1, Ordering::SeqCst);
                    return Ok(image);
                }
                Err(_) => self.evict(&key)?,
            }
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        let image = backend
            .fetch(&key)
            .map_err(|e| ImageError::BackendUnavailable { query: key.clone(), detail: e.to_string() })?;
        let image = image.to_canonical(self.size).quantized();
        self.store(&key, &image, backend.name())?;
        let hash = query_hash(&key);
        self.read_entry(&hash).map_err(|detail| ImageError::CorruptCacheEntry { query: key, detail })
    }

    fn store(&self, key: &str, image: &ImageTensor, source: &str) -> Result<(), ImageError> {
        let _guard = self.writer.lock().expect("writer lock");
        let hash = query_hash(key);
        let png = self.blob_path(&hash, "png");
        fs::write(&png, image.to_png()).map_err(|e| io_err(&png, e))?;
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let sidecar = Sidecar { query: key.to_string(), source: source.to_string(), timestamp };
        let json = self.blob_path(&hash, "json");
        fs::write(&json, serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"))
            .map_err(|e| io_err(&json, e))?;
        let mut index = self.index.write().expect("index lock");
        index.insert(key.to_string(), hash);
        self.persist(&index)
    }

    fn evict(&self, key: &str) -> Result<(), ImageError> {
        let _guard = self.writer.lock().expect("writer lock");
        let mut index = self.index.write().expect("index lock");
        if let Some(hash) = index.remove(key) {
            let _ = fs::remove_file(self.blob_path(&hash, "png"));
            let _ = fs::remove_file(self.blob_path(&hash, "json"));
        }
        self.persist(&index)
    }

    fn persist(&self, index: &BTreeMap<String, String>) -> Result<(), ImageError> {
        let path = self.root.join("index.json");
        let tmp = self.root.join("index.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(index).expect("index serializes")).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }

    /// Removes every entry and resets the statistics.
    pub fn clear(&self) -> Result<(), ImageError> {
        let _guard = self.writer.lock().expect("writer lock");
        let blobs = self.root.join("blobs");
        if blobs.exists() {
            fs::remove_dir_all(&blobs).map_err(|e| io_err(&blobs, e))?;
        }
        fs::create_dir_all(&blobs).map_err(|e| io_err(&blobs, e))?;
        let mut index = self.index.write().expect("index lock");
        index.clear();
        self.hits.store(0, Ordering::SeqCst);
        self.misses.store(0, Ordering::SeqCst);
        self.backend_calls.store(0, Ordering::SeqCst);
        self.persist(&index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicBool;

    struct Flaky {
        online: AtomicBool,
    }

    impl RetrievalBackend for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn fetch(&self, query: &str) -> Result<ImageTensor, ImageError> {
            if !self.online.load(Ordering::SeqCst) {
                return Err(ImageError::Io("offline".into()));
            }
            let v = (query.len() % 7) as f64 / 7.0 + 0.013;
            Ok(ImageTensor::filled(4, 4, v))
        }
    }

    #[test]
    fn miss_then_hit() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ImageCache::open(dir.path(), 4).unwrap();
        let backend = Flaky { online: AtomicBool::new(true) };
        let first = cache.fetch("patio chair at backyard", &backend).unwrap();
        assert_eq!(cache.stats(), CacheStats { hits: 0, misses: 1, backend_calls: 1 });
        assert!(dir.path().join("index.json").exists());
        backend.online.store(false, Ordering::SeqCst);
        let again = cache.fetch("  Patio chair at   backyard", &backend).unwrap();
        assert_eq!(again.to_png(), first.to_png());
        assert_eq!(cache.stats().backend_calls, 1);
        assert!(matches!(cache.fetch("new", &backend), Err(ImageError::BackendUnavailable { .. })));
    }

    #[test]
    fn reopened_cache_serves_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Flaky { online: AtomicBool::new(true) };
        let first = ImageCache::open(dir.path(), 4).unwrap().fetch("red ball", &backend).unwrap();
        let cache = ImageCache::open(dir.path(), 4).unwrap();
        backend.online.store(false, Ordering::SeqCst);
        assert_eq!(cache.fetch("red ball", &backend).unwrap(), first);
        assert_eq!(cache.stats().hits, 1);
    }

    #[test]
    fn corrupt_entry_is_refetched() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ImageCache::open(dir.path(), 4).unwrap();
        let backend = Flaky { online: AtomicBool::new(true) };
        cache.fetch("lamp", &backend).unwrap();
        fs::write(dir.path().join("blobs").join(format!("{}.png", query_hash("lamp"))), b"junk").unwrap();
        cache.fetch("lamp", &backend).unwrap();
        assert_eq!(cache.stats(), CacheStats { hits: 0, misses: 2, backend_calls: 2 });
    }

    #[test]
    fn resizes_backend_output() {
        struct Big;
        impl RetrievalBackend for Big {
            fn name(&self) -> &str {
                "big"
            }
            fn fetch(&self, _: &str) -> Result<ImageTensor, ImageError> {
                Ok(ImageTensor::filled(16, 12, 0.2))
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let cache = ImageCache::open(dir.path(), 4).unwrap();
        let image = cache.fetch("anything", &Big).unwrap();
        assert_eq!((image.height, image.width), (4, 4));
    }

    #[test]
    fn clear_empties_index() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ImageCache::open(dir.path(), 4).unwrap();
        let backend = Flaky { online: AtomicBool::new(true) };
        cache.fetch("cup", &backend).unwrap();
        cache.clear().unwrap();
        assert!(cache.is_empty());
        assert_eq!(cache.stats(), CacheStats::default());
    }
}
