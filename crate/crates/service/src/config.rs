use std::path::{Path, PathBuf};

use attend_core::analytics::AnalyticsConfig;
use attend_core::attnindex::IndexConfig;
use attend_core::facegate::DetectParams;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on an encoded frame payload.
pub const MAX_FRAME_BYTES: usize = 256 * 1024;
/// Lower bound on the interval between two analytics updates to one subscriber.
pub const MIN_UPDATE_INTERVAL_MS: u64 = 1000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("environment variable {name}: {msg}")]
    Env { name: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Event logs, session records and reports live under `data_dir/sessions`.
    pub data_dir: PathBuf,
    /// Affect model weights; frame uploads are refused when absent.
    pub model_path: Option<PathBuf>,
    /// Haar cascade XML; frame uploads are refused when absent.
    pub cascade_path: Option<PathBuf>,
    pub analytics: AnalyticsConfig,
    pub index: IndexConfig,
    pub detect: DetectParams,
    /// Uploads from one learner closer together than this are acknowledged but discarded.
    pub min_frame_interval_ms: u64,
    pub max_frame_bytes: usize,
    /// Frames whose longer side exceeds this are downscaled before detection.
    pub max_frame_side: usize,
    pub update_interval_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("attend-data"),
            model_path: None,
            cascade_path: None,
            analytics: AnalyticsConfig::default(),
            index: IndexConfig::default(),
            detect: DetectParams::default(),
            min_frame_interval_ms: 250,
            max_frame_bytes: MAX_FRAME_BYTES,
            max_frame_side: 320,
            update_interval_ms: MIN_UPDATE_INTERVAL_MS,
        }
    }
}

impl ServiceConfig {
    /// Reads a TOML or JSON file (chosen by extension), then applies `ATTEND_*` overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let parse_err = |msg: String| ConfigError::Parse {
            path: path.to_owned(),
            msg,
        };
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string())),
            _ => toml::from_str(&text).map_err(|e| parse_err(e.to_string())),
        }
    }

    /// Applies recognised `ATTEND_*` variables; others are ignored.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        fn parse<T: std::str::FromStr>(name: &str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.trim().parse().map_err(|e: T::Err| ConfigError::Env {
                name: name.into(),
                msg: e.to_string(),
            })
        }
        for (k, v) in vars {
            let (k, v) = (k.as_ref(), v.as_ref());
            match k {
                "ATTEND_HOST" => self.host = v.into(),
                "ATTEND_PORT" => self.port = parse(k, v)?,
                "ATTEND_DATA_DIR" => self.data_dir = v.into(),
                "ATTEND_MODEL" => self.model_path = Some(v.into()),
                "ATTEND_CASCADE" => self.cascade_path = Some(v.into()),
                "ATTEND_DISENGAGED_THRESHOLD" => self.analytics.disengaged_threshold = parse(k, v)?,
                "ATTEND_HYSTERESIS" => self.analytics.hysteresis = parse(k, v)?,
                "ATTEND_COOLDOWN_MS" => self.analytics.cooldown_ms = parse(k, v)?,
                "ATTEND_WINDOW_MS" => self.analytics.window_ms = parse(k, v)?,
                "ATTEND_MIN_FRAME_INTERVAL_MS" => self.min_frame_interval_ms = parse(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.analytics.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.index.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.update_interval_ms < MIN_UPDATE_INTERVAL_MS {
            return Err(ConfigError::Invalid(format!(
                "update_interval_ms must be at least {MIN_UPDATE_INTERVAL_MS}"
            )));
        }
        if self.max_frame_bytes == 0 || self.max_frame_bytes > MAX_FRAME_BYTES {
            return Err(ConfigError::Invalid(format!("max_frame_bytes must lie in 1..={MAX_FRAME_BYTES}")));
        }
        if self.max_frame_side < 24 {
            return Err(ConfigError::Invalid("max_frame_side must be at least 24".into()));
        }
        if self.detect.scale_factor.is_nan() || self.detect.scale_factor <= 1.0 || self.detect.min_neighbors == 0 {
            return Err(ConfigError::Invalid("detect.scale_factor must exceed 1 and min_neighbors be positive".into()));
        }
        Ok(())
    }

    pub fn bind_addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.data_dir.join("sessions")
    }
}
