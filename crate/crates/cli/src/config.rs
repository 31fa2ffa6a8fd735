use std::path::{Path, PathBuf};

use percept_tok::bench::PlacementConfig;
use percept_tok::datagen::scene::SceneConfig;
use percept_tok::losses::LOG_EPSILON;
use percept_tok::Result;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_TAU0: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_STEPS: u64 = 10_000;

/// Settings read from `--config`. Every field is optional; a value present
/// here wins over the matching command-line flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<PlacementConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Every knob at its default value.
    pub fn defaults() -> Self {
        Self {
            seed: Some(DEFAULT_SEED),
            jobs: None,
            vocab: Some("vocab.json".into()),
            codebook: Some("codebook.json".into()),
            templates: None,
            out_dir: Some(".".into()),
            placement: Some(PlacementConfig::default()),
            scene: Some(SceneConfig::default()),
            tau0: Some(DEFAULT_TAU0),
            lambda: Some(DEFAULT_LAMBDA),
            steps: Some(DEFAULT_STEPS),
            epsilon: Some(LOG_EPSILON),
        }
    }
}

/// Config value, else flag, else default.
pub fn pick<T>(config: Option<T>, flag: Option<T>, default: T) -> T {
    config.or(flag).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        for config in [RunConfig::default(), RunConfig::defaults()] {
            let text = serde_json::to_string_pretty(&config).unwrap();
            assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), config);
        }
    }

    #[test]
    fn config_beats_flag_beats_default() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None, None, 3), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 3}"#).is_err());
    }
}
