//! HTTP imagery provider for static-map and street-level image endpoints.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use super::{ImageryProvider, ImageryRequest, Source};
use crate::error::{Error, Result};
use crate::raster::RasterImage;

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

/// Minimal blocking GET, so tests can swap the network out.
pub trait HttpTransport: Send + Sync {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        UreqTransport::new(Duration::from_secs(30))
    }
}

impl HttpTransport for UreqTransport {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, String> {
        let mut resp = self.agent.get(url).call().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(32 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

/// Spaces requests at least `1/rps` apart across all threads.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Result<Self> {
        if !(requests_per_second.is_finite() && requests_per_second > 0.0) {
            return Err(Error::invalid(format!("rate limit must be positive, got {requests_per_second}")));
        }
        Ok(RateLimiter {
            interval: Duration::from_secs_f64(1.0 / requests_per_second),
            next: Mutex::new(Instant::now()),
        })
    }

    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

pub struct RemoteProvider {
    base_url: String,
    api_key: Option<String>,
    transport: Box<dyn HttpTransport>,
    limiter: Option<RateLimiter>,
    max_attempts: usize,
    backoff: Duration,
}

impl RemoteProvider {
    pub fn new(base_url: impl Into<String>, transport: Box<dyn HttpTransport>) -> Self {
        RemoteProvider {
            base_url: base_url.into(),
            api_key: None,
            transport,
            limiter: None,
            max_attempts: 3,
            backoff: Duration::from_millis(250),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_rate_limit(mut self, limiter: Option<RateLimiter>) -> Self {
        self.limiter = limiter;
        self
    }

    pub fn with_retries(mut self, max_attempts: usize, backoff: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn url_for(&self, r: &ImageryRequest) -> String {
        let base = if self.base_url.contains("{source}") {
            self.base_url.replace("{source}", r.source.as_str())
        } else {
            format!("{}/{}", self.base_url.trim_end_matches('/'), r.source)
        };
        let loc = format!("{:.6},{:.6}", r.location.lat, r.location.lon);
        let size = format!("{}x{}", r.width, r.height);
        let mut url = match r.source {
            Source::Map | Source::Satellite => format!(
                "{base}?center={loc}&zoom={}&size={size}&maptype={}",
                r.zoom,
                if r.source == Source::Map { "roadmap" } else { "satellite" }
            ),
            Source::Streetview => format!(
                "{base}?location={loc}&size={size}&heading={}&pitch={}&fov={}",
                r.heading, r.pitch, r.fov
            ),
        };
        if let Some(key) = &self.api_key {
            url.push_str("&key=");
            url.push_str(key);
        }
        url
    }
}

impl ImageryProvider for RemoteProvider {
    fn fingerprint(&self) -> String {
        // the key is deliberately left out
        let mut h = Sha256::new();
        h.update(self.base_url.as_bytes());
        format!("remote:{}", hex::encode(h.finalize()))
    }

    fn fetch(&self, request: &ImageryRequest) -> Result<RasterImage> {
        let url = self.url_for(request);
        let mut last_err = String::new();
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * attempt as u32);
            }
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            match self.transport.get(&url) {
                Ok(resp) if resp.status == 200 => match RasterImage::from_encoded(&resp.body) {
                    Ok(img) => return Ok(img),
                    Err(e) => last_err = format!("undecodable image payload: {e}"),
                },
                Ok(resp) if resp.status == 404 => {
                    return Err(Error::NoImagery {
                        lat: request.location.lat,
                        lon: request.location.lon,
                    });
                }
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    last_err = format!("HTTP {}", resp.status);
                }
                Ok(resp) => {
                    return Err(Error::ProviderUnavailable(format!("HTTP {}", resp.status)));
                }
                Err(e) => last_err = e,
            }
            log::debug!("imagery attempt {} failed: {last_err}", attempt + 1);
        }
        Err(Error::ProviderUnavailable(format!(
            "{} attempts failed, last error: {last_err}",
            self.max_attempts
        )))
    }
}
