use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::{ImageryProvider, ImageryRequest};
use crate::error::Result;
use crate::raster::RasterImage;

/// PNG cache laid out as `<root>/<source>/<request-hash>.png`.
#[derive(Debug, Clone)]
pub struct DiskCache {
    root: PathBuf,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DiskCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, request: &ImageryRequest, fingerprint: &str) -> PathBuf {
        self.root
            .join(request.source.as_str())
            .join(format!("{}.png", request.cache_key(fingerprint)))
    }

    pub fn get(&self, request: &ImageryRequest, fingerprint: &str) -> Option<RasterImage> {
        let path = self.path_for(request, fingerprint);
        if !path.exists() {
            return None;
        }
        match RasterImage::load(&path) {
            Ok(img) => Some(img),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                None
            }
        }
    }

    pub fn put(&self, request: &ImageryRequest, fingerprint: &str, img: &RasterImage) -> Result<PathBuf> {
        let path = self.path_for(request, fingerprint);
        img.save_png(&path)?;
        Ok(path)
    }
}

/// Wraps a provider with a [`DiskCache`]. Only successful fetches are
/// stored; at most one thread fetches a given key at a time.
pub struct CachedProvider<P> {
    inner: P,
    cache: DiskCache,
    in_flight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl<P: ImageryProvider> CachedProvider<P> {
    pub fn new(inner: P, cache: DiskCache) -> Self {
        CachedProvider {
            inner,
            cache,
            in_flight: Mutex::new(HashMap::new()),
        }
    }

    pub fn cache(&self) -> &DiskCache {
        &self.cache
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        let mut map = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(key.to_string()).or_default().clone()
    }
}

impl<P: ImageryProvider> ImageryProvider for CachedProvider<P> {
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn fetch(&self, request: &ImageryRequest) -> Result<RasterImage> {
        let fp = self.inner.fingerprint();
        if let Some(img) = self.cache.get(request, &fp) {
            return Ok(img);
        }
        let key = request.cache_key(&fp);
        let lock = self.key_lock(&key);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        // another writer may have filled it while we waited
        if let Some(img) = self.cache.get(request, &fp) {
            return Ok(img);
        }
        let img = self.inner.fetch(request)?;
        self.cache.put(request, &fp, &img)?;
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::geo::{LocationKind, SampleLocation};
    use crate::imagery::Source;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        calls: AtomicUsize,
        fail: bool,
    }

    impl ImageryProvider for Counting {
        fn fingerprint(&self) -> String {
            "counting".into()
        }
        fn fetch(&self, r: &ImageryRequest) -> Result<RasterImage> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail {
                return Err(Error::ProviderUnavailable("down".into()));
            }
            Ok(RasterImage::filled(r.width, r.height, [(r.location.lat as u8), 3, 4]))
        }
    }

    fn req() -> ImageryRequest {
        let loc = SampleLocation { city_id: "a".into(), kind: LocationKind::Grid, lat: 12.0, lon: 3.0 };
        ImageryRequest::new(loc, Source::Satellite).with_size(8, 8)
    }

    #[test]
    fn second_fetch_hits_cache_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = CachedProvider::new(Counting { calls: AtomicUsize::new(0), fail: false }, DiskCache::new(dir.path()));
        let a = p.fetch(&req()).unwrap();
        let path = p.cache().path_for(&req(), "counting");
        assert!(path.starts_with(dir.path().join("satellite")));
        let bytes = std::fs::read(&path).unwrap();
        let b = p.fetch(&req()).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.inner().calls.load(Ordering::SeqCst), 1);
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn failures_leave_no_entry() {
        let dir = tempfile::tempdir().unwrap();
        let p = CachedProvider::new(Counting { calls: AtomicUsize::new(0), fail: true }, DiskCache::new(dir.path()));
        assert!(p.fetch(&req()).is_err());
        assert!(!p.cache().path_for(&req(), "counting").exists());
    }
}
