use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ImageryProvider, RateLimiter, RemoteProvider, StylesFile, SyntheticProvider, UreqTransport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Remote,
    Synthetic,
}

fn default_in_flight() -> usize {
    8
}

/// Provider config file. Credentials are only ever read from the
/// environment variable named by `api_key_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit_rps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub styles_file: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl ProviderConfig {
    pub fn synthetic(styles_file: impl Into<String>) -> Self {
        ProviderConfig {
            provider: ProviderKind::Synthetic,
            base_url: None,
            api_key_env: None,
            rate_limit_rps: None,
            styles_file: Some(styles_file.into()),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Builds the provider. Relative `styles_file` paths resolve against
    /// `base_dir` (normally the directory holding the config).
    pub fn build(&self, base_dir: &Path, seed: u64) -> Result<Box<dyn ImageryProvider>> {
        match self.provider {
            ProviderKind::Synthetic => {
                let styles = self
                    .styles_file
                    .as_ref()
                    .ok_or_else(|| Error::invalid("synthetic provider needs styles_file"))?;
                let file = StylesFile::load(&base_dir.join(styles))?;
                Ok(Box::new(SyntheticProvider::new(file, seed)?))
            }
            ProviderKind::Remote => {
                let base = self
                    .base_url
                    .as_ref()
                    .ok_or_else(|| Error::invalid("remote provider needs base_url"))?;
                let key = match &self.api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        Error::invalid(format!("environment variable {var} is not set"))
                    })?),
                    None => None,
                };
                let limiter = self.rate_limit_rps.map(RateLimiter::new).transpose()?;
                Ok(Box::new(
                    RemoteProvider::new(base.clone(), Box::new(UreqTransport::new(Duration::from_secs(30))))
                        .with_api_key(key)
                        .with_rate_limit(limiter),
                ))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_configs() {
        let c: ProviderConfig = serde_json::from_str(r#"{"provider":"synthetic","styles_file":"s.json"}"#).unwrap();
        assert_eq!(c.provider, ProviderKind::Synthetic);
        assert_eq!(c.max_in_flight, 8);
        let c: ProviderConfig = serde_json::from_str(
            r#"{"provider":"remote","base_url":"http://x","api_key_env":"CITYLIKE_TEST_UNSET_KEY","rate_limit_rps":5}"#,
        )
        .unwrap();
        assert!(c.build(Path::new("."), 0).is_err());
    }
}
