//! Server and timing configuration.

use std::path::Path;

use kaas_core::backend::TimingModel;
use kaas_core::router::{Router, RoutingPolicy};
use thiserror::Error;

use crate::store::StoreSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid capacity {0:?}")]
    Capacity(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read timing config {path}: {source}")]
    TimingFile {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed timing config: {0}")]
    TimingJson(#[from] serde_json::Error),
}

/// Parses a byte count with an optional `B`, `KiB`, `MiB` or `GiB` suffix
/// (`K`, `M`, `G` are accepted as binary shorthands).
pub fn parse_capacity(s: &str) -> Result<u64, ConfigError> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (digits, unit) = t.split_at(split);
    let mult: u64 = match unit.trim() {
        "" | "B" => 1,
        "K" | "KiB" => 1 << 10,
        "M" | "MiB" => 1 << 20,
        "G" | "GiB" => 1 << 30,
        _ => return Err(ConfigError::Capacity(s.into())),
    };
    digits
        .parse::<u64>()
        .ok()
        .and_then(|n| n.checked_mul(mult))
        .ok_or_else(|| ConfigError::Capacity(s.into()))
}

/// Reads a JSON file holding all five [`TimingModel`] fields.
pub fn load_timing(path: &Path) -> Result<TimingModel, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::TimingFile {
        path: path.display().to_string(),
        source,
    })?;
    let timing: TimingModel = serde_json::from_str(&text)?;
    timing.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(timing)
}

/// Per-field overrides applied on top of a base timing model.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TimingOverrides {
    pub h2d_bandwidth: Option<f64>,
    pub d2h_bandwidth: Option<f64>,
    pub fetch_latency: Option<f64>,
    pub launch_overhead: Option<f64>,
    pub flop_rate: Option<f64>,
}

impl TimingOverrides {
    pub fn apply(&self, mut t: TimingModel) -> TimingModel {
        if let Some(v) = self.h2d_bandwidth {
            t.h2d_bandwidth = v;
        }
        if let Some(v) = self.d2h_bandwidth {
            t.d2h_bandwidth = v;
        }
        if let Some(v) = self.fetch_latency {
            t.fetch_latency = v;
        }
        if let Some(v) = self.launch_overhead {
            t.launch_overhead = v;
        }
        if let Some(v) = self.flop_rate {
            t.flop_rate = v;
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub executors: usize,
    /// Device memory per executor, bytes.
    pub capacity: u64,
    pub timing: TimingModel,
    pub policy: RoutingPolicy,
    pub digest_cap: usize,
    pub strict_schema: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            executors: 1,
            capacity: 1 << 20,
            timing: TimingModel::default(),
            policy: RoutingPolicy::Affinity { q_max: 8 },
            digest_cap: Router::DEFAULT_DIGEST_CAP,
            strict_schema: false,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.executors == 0 {
            return Err(ConfigError::Invalid("executors must be >= 1".into()));
        }
        if self.capacity == 0 {
            return Err(ConfigError::Invalid("capacity must be > 0".into()));
        }
        if self.digest_cap == 0 {
            return Err(ConfigError::Invalid("digest cap must be >= 1".into()));
        }
        if let RoutingPolicy::Affinity { q_max: 0 } = self.policy {
            return Err(ConfigError::Invalid("q_max must be >= 1".into()));
        }
        self.timing
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub bind: String,
    pub port: u16,
    pub store: StoreSpec,
    pub service: ServiceConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            store: StoreSpec::Mem,
            service: ServiceConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacities() {
        assert_eq!(parse_capacity("1MiB").unwrap(), 1 << 20);
        assert_eq!(parse_capacity("64KiB").unwrap(), 64 << 10);
        assert_eq!(parse_capacity("4096").unwrap(), 4096);
        assert_eq!(parse_capacity("2G").unwrap(), 2 << 30);
        assert_eq!(parse_capacity("0").unwrap(), 0);
        for bad in ["", "MiB", "1.5MiB", "12PB", "-1", "99999999999999999999GiB"] {
            assert!(parse_capacity(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn zero_capacity_is_invalid() {
        let c = ServiceConfig {
            capacity: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(ServiceConfig::default().validate().is_ok());
    }

    #[test]
    fn timing_file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("timing.json");
        std::fs::write(
            &path,
            r#"{"h2d_bandwidth":1e9,"d2h_bandwidth":2e9,"fetch_latency":0.001,"launch_overhead":1e-5,"flop_rate":1e12}"#,
        )
        .unwrap();
        let t = load_timing(&path).unwrap();
        assert_eq!(t.h2d_bandwidth, 1e9);
        let t = TimingOverrides {
            flop_rate: Some(5.0),
            ..Default::default()
        }
        .apply(t);
        assert_eq!((t.flop_rate, t.d2h_bandwidth), (5.0, 2e9));

        std::fs::write(&path, r#"{"h2d_bandwidth":1e9}"#).unwrap();
        assert!(load_timing(&path).is_err());
        std::fs::write(
            &path,
            r#"{"h2d_bandwidth":-1,"d2h_bandwidth":2e9,"fetch_latency":0.001,"launch_overhead":1e-5,"flop_rate":1e12}"#,
        )
        .unwrap();
        assert!(load_timing(&path).is_err());
    }
}
