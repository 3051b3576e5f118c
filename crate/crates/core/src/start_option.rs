//! The persisted Start Option Config: how the service starts next, and why.

use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lifecycle::StartupMode;
use crate::storage;

/// File name of the config under the daemon's state directory.
pub const START_OPTION_FILE: &str = "start_option.conf";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartOptionConfig {
    pub mode: StartupMode,
    #[serde(default)]
    pub app_command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_location: Option<PathBuf>,
    #[serde(default)]
    pub reason: String,
    #[serde(default)]
    pub generation: u64,
    #[serde(default = "Utc::now")]
    pub written_at: DateTime<Utc>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InvalidConfig {
    #[error("restore mode requires a non-empty checkpoint_location")]
    RestoreWithoutLocation,
}

impl StartOptionConfig {
    /// What the daemon assumes when nothing has been persisted yet.
    pub fn standby_default() -> Self {
        StartOptionConfig::standby("default")
    }

    pub fn standby(reason: impl Into<String>) -> Self {
        StartOptionConfig {
            mode: StartupMode::Standby,
            app_command: Vec::new(),
            checkpoint_location: None,
            reason: reason.into(),
            generation: 0,
            written_at: Utc::now(),
        }
    }

    pub fn new(mode: StartupMode, app_command: Vec<String>, reason: impl Into<String>) -> Self {
        StartOptionConfig {
            mode,
            app_command,
            checkpoint_location: None,
            reason: reason.into(),
            generation: 0,
            written_at: Utc::now(),
        }
    }

    pub fn with_checkpoint(mut self, location: impl Into<PathBuf>) -> Self {
        self.checkpoint_location = Some(location.into());
        self
    }

    pub fn validate(&self) -> Result<(), InvalidConfig> {
        if self.mode == StartupMode::Restore {
            match &self.checkpoint_location {
                Some(p) if !p.as_os_str().is_empty() => {}
                _ => return Err(InvalidConfig::RestoreWithoutLocation),
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("config serializes");
        out.push(b'\n');
        out
    }
}

/// The persisted bytes could not be used. Carries the STANDBY config the caller
/// should persist and run with instead.
#[derive(Debug, Error)]
#[error("malformed start option config: {detail}")]
pub struct MalformedConfig {
    pub detail: String,
    pub fallback: StartOptionConfig,
}

/// Decode the config file contents; `None` means no file exists.
pub fn parse_start_option(raw: Option<&[u8]>) -> Result<StartOptionConfig, MalformedConfig> {
    let Some(raw) = raw else {
        return Ok(StartOptionConfig::standby_default());
    };
    let malformed = |detail: String| MalformedConfig {
        detail,
        fallback: StartOptionConfig::standby("malformed-config"),
    };
    let config: StartOptionConfig =
        serde_json::from_slice(raw).map_err(|e| malformed(e.to_string()))?;
    config.validate().map_err(|e| malformed(e.to_string()))?;
    Ok(config)
}

/// Read and decode the config at `location`. A missing file is the default.
pub fn read_start_option(location: &Path) -> Result<StartOptionConfig, MalformedConfig> {
    match std::fs::read(location) {
        Ok(bytes) => parse_start_option(Some(&bytes)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => parse_start_option(None),
        Err(e) => Err(MalformedConfig {
            detail: format!("unreadable: {e}"),
            fallback: StartOptionConfig::standby("malformed-config"),
        }),
    }
}

#[derive(Debug, Error)]
pub enum WriteError {
    #[error(transparent)]
    Invalid(#[from] InvalidConfig),
    #[error("storage failure writing {path}: {source}")]
    StorageFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Atomically persist `config` at `location`. The stored generation is one
/// past the previously persisted one (or past `config.generation` when that
/// is larger). Returns the config as written.
pub fn write_start_option(
    config: &StartOptionConfig,
    location: &Path,
) -> Result<StartOptionConfig, WriteError> {
    config.validate()?;
    let previous = std::fs::read(location)
        .ok()
        .and_then(|b| serde_json::from_slice::<StartOptionConfig>(&b).ok())
        .map(|c| c.generation)
        .unwrap_or(0);
    let mut next = config.clone();
    next.generation = previous.max(config.generation) + 1;
    next.written_at = Utc::now();
    storage::atomic_replace(location, &next.to_bytes()).map_err(|source| {
        WriteError::StorageFailure {
            path: location.to_path_buf(),
            source,
        }
    })?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_is_standby_default() {
        let c = parse_start_option(None).unwrap();
        assert_eq!(c.mode, StartupMode::Standby);
        assert_eq!(c.generation, 0);
        assert_eq!(c.reason, "default");
    }

    #[test]
    fn restore_with_location_parses() {
        let c = parse_start_option(Some(br#"{"mode":"restore","checkpoint_location":"/ckpt/a"}"#))
            .unwrap();
        assert_eq!(c.mode, StartupMode::Restore);
        assert_eq!(c.checkpoint_location.as_deref(), Some(Path::new("/ckpt/a")));
    }

    #[test]
    fn restore_without_location_falls_back() {
        let err = parse_start_option(Some(br#"{"mode":"restore"}"#)).unwrap_err();
        assert_eq!(err.fallback.mode, StartupMode::Standby);
        assert_eq!(err.fallback.reason, "malformed-config");
        let err = parse_start_option(Some(b"{not json")).unwrap_err();
        assert_eq!(err.fallback.reason, "malformed-config");
        let err =
            parse_start_option(Some(br#"{"mode":"restore","checkpoint_location":""}"#)).unwrap_err();
        assert_eq!(err.fallback.mode, StartupMode::Standby);
    }

    #[test]
    fn write_then_parse_bumps_generation() {
        let dir = tempfile::tempdir().unwrap();
        let loc = dir.path().join(START_OPTION_FILE);
        let cfg = StartOptionConfig::new(
            StartupMode::FromScratch,
            vec!["memhog".into(), "--processes".into(), "2".into()],
            "test",
        );
        let written = write_start_option(&cfg, &loc).unwrap();
        let back = read_start_option(&loc).unwrap();
        assert_eq!(back, written);
        assert_eq!(back.generation, cfg.generation + 1);

        write_start_option(&back, &loc).unwrap();
        write_start_option(&back, &loc).unwrap();
        assert_eq!(read_start_option(&loc).unwrap().generation, back.generation + 2);
    }

    #[cfg(unix)]
    #[test]
    fn read_only_location_is_storage_failure() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let loc = dir.path().join(START_OPTION_FILE);
        let first = write_start_option(&StartOptionConfig::standby("x"), &loc).unwrap();
        std::fs::set_permissions(dir.path(), std::fs::Permissions::from_mode(0o555)).unwrap();
        let probe = dir.path().join("probe");
        let writable = std::fs::write(&probe, b"").is_ok();
        let res = write_start_option(&StartOptionConfig::standby("y"), &loc);
        std::fs::set_permissions(dir.path(), std::fs::Permissions::from_mode(0o755)).unwrap();
        let expected = if writable {
            // Running as root: permissions are not enforced; use the quota instead.
            let _ = std::fs::remove_file(&probe);
            let landed = res.unwrap();
            std::fs::write(dir.path().join(storage::QUOTA_FILE), "1").unwrap();
            let res = write_start_option(&StartOptionConfig::standby("z"), &loc);
            assert!(matches!(res, Err(WriteError::StorageFailure { .. })));
            landed
        } else {
            assert!(matches!(res, Err(WriteError::StorageFailure { .. })));
            first
        };
        assert_eq!(read_start_option(&loc).unwrap(), expected);
    }

    #[test]
    fn invalid_config_is_not_written() {
        let dir = tempfile::tempdir().unwrap();
        let loc = dir.path().join(START_OPTION_FILE);
        let cfg = StartOptionConfig::new(StartupMode::Restore, vec![], "bad");
        assert!(matches!(
            write_start_option(&cfg, &loc),
            Err(WriteError::Invalid(_))
        ));
        assert!(!loc.exists());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn config_strategy() -> impl Strategy<Value = StartOptionConfig> {
            (
                prop_oneof![
                    Just(StartupMode::FromScratch),
                    Just(StartupMode::Restore),
                    Just(StartupMode::Standby)
                ],
                proptest::collection::vec("[ -~]{0,12}", 0..5),
                proptest::option::of("/[a-z0-9/_.-]{1,24}"),
                "[ -~]{0,40}",
                0u64..1_000_000,
            )
                .prop_map(|(mode, app_command, loc, reason, generation)| {
                    let loc = match mode {
                        StartupMode::Restore => Some(loc.unwrap_or_else(|| "/ckpt/x".into())),
                        _ => loc,
                    };
                    StartOptionConfig {
                        mode,
                        app_command,
                        checkpoint_location: loc.map(PathBuf::from),
                        reason,
                        generation,
                        written_at: Utc::now(),
                    }
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]
            #[test]
            fn write_parse_roundtrip(cfg in config_strategy()) {
                let dir = tempfile::tempdir().unwrap();
                let loc = dir.path().join(START_OPTION_FILE);
                write_start_option(&cfg, &loc).unwrap();
                let back = read_start_option(&loc).unwrap();
                prop_assert_eq!(back.mode, cfg.mode);
                prop_assert_eq!(&back.app_command, &cfg.app_command);
                prop_assert_eq!(&back.checkpoint_location, &cfg.checkpoint_location);
                prop_assert_eq!(&back.reason, &cfg.reason);
                prop_assert_eq!(back.generation, cfg.generation + 1);
            }
        }
    }
}
