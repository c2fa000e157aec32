//! Configuration file. Every section is optional and every key has a default;
//! unknown keys are rejected. Relative paths resolve against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use cuelens_core::affect::Hyperparams;
use cuelens_core::events::EventsConfig;
use cuelens_core::vision::MIN_CALIBRATION_FRAMES;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub vision: VisionSection,
    pub affect: AffectSection,
    pub events: EventsConfig,
    pub storage: StorageSection,
    pub service: ServiceSection,
    pub link: LinkSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionSection {
    /// Reference 3D face model; `None` uses the built-in one.
    pub face_model: Option<PathBuf>,
    /// 0 disables neutral calibration.
    pub calibration_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffectSection {
    /// Trained classifier; `None` trains one on the synthetic set at startup.
    pub model: Option<PathBuf>,
    pub hyperparams: Hyperparams,
    pub synth_per_class: usize,
    pub synth_noise_sigma: f64,
}

impl Default for AffectSection {
    fn default() -> Self {
        Self {
            model: None,
            hyperparams: Hyperparams::default(),
            synth_per_class: 50,
            synth_noise_sigma: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StorageSection {
    pub data_dir: PathBuf,
}

impl Default for StorageSection {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceSection {
    pub bind: String,
    pub port: u16,
    pub highlight_pad_ms: u64,
    pub max_track_points: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            highlight_pad_ms: 3_000,
            max_track_points: 2_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkTransport {
    Memory,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkSection {
    pub transport: LinkTransport,
    pub host: String,
    pub port: u16,
    pub heartbeat_timeout_ms: u64,
}

impl Default for LinkSection {
    fn default() -> Self {
        Self {
            transport: LinkTransport::Memory,
            host: "127.0.0.1".into(),
            port: 7070,
            heartbeat_timeout_ms: 5_000,
        }
    }
}

impl Config {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        let mut config: Config = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config file {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.vision.face_model {
            fix(p);
        }
        if let Some(p) = &mut self.affect.model {
            fix(p);
        }
        fix(&mut self.storage.data_dir);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |section: &str, msg: String| CliError::Config(format!("{section}: {msg}"));
        self.events.validate().map_err(|e| bad("events", e.to_string()))?;
        self.affect
            .hyperparams
            .validate()
            .map_err(|e| bad("affect", e.to_string()))?;
        if self.affect.synth_per_class == 0 {
            return Err(bad("affect", "synth_per_class must be > 0".into()));
        }
        if !(self.affect.synth_noise_sigma >= 0.0 && self.affect.synth_noise_sigma.is_finite()) {
            return Err(bad("affect", "synth_noise_sigma must be finite and >= 0".into()));
        }
        let cal = self.vision.calibration_frames;
        if cal != 0 && cal < MIN_CALIBRATION_FRAMES {
            return Err(bad(
                "vision",
                format!("calibration_frames must be 0 or >= {MIN_CALIBRATION_FRAMES}"),
            ));
        }
        if self.service.max_track_points == 0 {
            return Err(bad("service", "max_track_points must be > 0".into()));
        }
        if self.link.heartbeat_timeout_ms == 0 {
            return Err(bad("link", "heartbeat_timeout_ms must be > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_file_is_the_defaults() {
        let text = include_str!("../config.example.json");
        let parsed: Config = serde_json::from_str(text).unwrap();
        assert_eq!(parsed, Config::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"extra": 1}"#,
            r#"{"events": {"alpha": 0.3, "beta": 1}}"#,
            r#"{"affect": {"hyperparams": {"momentum": 0.9}}}"#,
            r#"{"link": {"transport": "carrier-pigeon"}}"#,
        ] {
            assert!(serde_json::from_str::<Config>(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c: Config = serde_json::from_str(r#"{"events": {"alpha": 0.5}, "service": {"port": 9000}}"#).unwrap();
        assert_eq!(c.events.alpha, 0.5);
        assert_eq!(c.events.enter_threshold, 0.65);
        assert_eq!(c.service.port, 9000);
        assert_eq!(c.service.bind, "127.0.0.1");
    }

    #[test]
    fn semantic_validation() {
        let mut c = Config::default();
        c.vision.calibration_frames = 5;
        assert!(c.validate().is_err());
        c.vision.calibration_frames = 10;
        assert!(c.validate().is_ok());
        c.events.exit_threshold = 0.9;
        assert!(c.validate().is_err());
    }
}
