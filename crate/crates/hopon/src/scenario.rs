//! Scenario files are TOML documents carrying every section of a
//! [`Scenario`]: infrastructure, slices, policy, cm, devices, traffic, sim.

use std::fs;
use std::path::{Path, PathBuf};

use hopon_core::sim::Scenario;
use thiserror::Error;

/// Test-only override: relative paths starting with `fixtures/` resolve
/// under this directory instead of the working directory.
pub const FIXTURE_DIR_ENV: &str = "HOPON_FIXTURE_DIR";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
}

pub fn resolve_path(path: &Path) -> PathBuf {
    if let (Ok(rest), Some(dir)) = (path.strip_prefix("fixtures"), std::env::var_os(FIXTURE_DIR_ENV)) {
        return Path::new(&dir).join(rest);
    }
    path.to_path_buf()
}

pub fn parse_scenario(text: &str) -> Result<Scenario, toml::de::Error> {
    toml::from_str(text)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let path = resolve_path(path);
    let text = fs::read_to_string(&path).map_err(|source| ScenarioError::Io { path: path.clone(), source })?;
    parse_scenario(&text).map_err(|source| ScenarioError::Parse { path, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[infrastructure.nodes]]
id = 1
kind = "core"
domain = 1

[[infrastructure.nodes]]
id = 2
kind = "core"
domain = 1

[[infrastructure.links]]
id = 1
a = 1
b = 2
capacity_bps = 1e6
delay_s = 0.001

[[slices]]
id = 1
device_cos = { rate_bps = 1e5, latency_s = 0.1 }
nodes = [{ id = 1, nn = 1, domain = 1 }, { id = 2, nn = 2 }]
tunnels = [{ id = 1, ingress = 1, egress = 2, qos = { rate_bps = 5e5 } }]
"#;

    #[test]
    fn minimal_scenario_takes_defaults() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.slices.len(), 1);
        assert_eq!(s.sim.duration_s, 10.0);
        assert_eq!(s.sim.session_setup_messages, 10);
        assert!(s.devices.is_empty());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[sim]\nduration = 3\n");
        assert!(parse_scenario(&text).is_err());
    }

    #[test]
    fn fixture_prefix_follows_env_override() {
        // Only this test touches the variable.
        std::env::set_var(FIXTURE_DIR_ENV, "/tmp/fx");
        assert_eq!(resolve_path(Path::new("fixtures/a.scn")), PathBuf::from("/tmp/fx/a.scn"));
        assert_eq!(resolve_path(Path::new("other/a.scn")), PathBuf::from("other/a.scn"));
        std::env::remove_var(FIXTURE_DIR_ENV);
    }
}
