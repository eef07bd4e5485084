//! Run configuration: a JSON object holding every training field plus the
//! CLI-only keys `output_dir` and `pattern`.
//!
//! ```json
//! {
//!   "task": "teacher_regression",
//!   "backbone": "mlp",
//!   "adapter": {"variant": "dora", "rank": 4},
//!   "lr": 0.01,
//!   "steps": 500,
//!   "seed": 7,
//!   "overrides": {"fc2": "magnitude_only"},
//!   "output_dir": "runs/dora-7"
//! }
//! ```

use std::path::{Path, PathBuf};

use dora_core::analysis::AnalysisOptions;
use dora_core::trainer::TrainConfig;
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub output_dir: Option<PathBuf>,
    /// Layer-name regex for analysis.
    pub pattern: Option<String>,
}

fn take_string(obj: &mut serde_json::Map<String, Value>, key: &str) -> Result<Option<String>, CliError> {
    match obj.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(CliError::Config(format!("{key}: expected a string, found {other}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("malformed config: {e}")))?;
        let Value::Object(mut obj) = value else {
            return Err(CliError::Config("config must be a JSON object".into()));
        };
        let output_dir = take_string(&mut obj, "output_dir")?.map(PathBuf::from);
        let pattern = take_string(&mut obj, "pattern")?;
        let train: TrainConfig = serde_path_to_error::deserialize(Value::Object(obj))
            .map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?;
        train.validate()?;
        if let Some(p) = &pattern {
            AnalysisOptions::with_pattern(p).map_err(|e| CliError::Config(format!("pattern: {e}")))?;
        }
        Ok(Self {
            train,
            output_dir,
            pattern,
        })
    }

    /// Reads and validates a config file. A missing file is a usage error.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dora_core::adapters::Variant;

    const MINIMAL: &str = r#"{"task": "teacher_regression", "backbone": "mlp", "adapter": {"variant": "dora"}}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.train.adapter.variant, Variant::Dora);
        assert_eq!(cfg.train.adapter.rank, 4);
        assert_eq!(cfg.train.steps, 500);
        assert_eq!(cfg.output_dir, None);
    }

    #[test]
    fn errors_carry_field_paths() {
        let cases = [
            (r#"{"task": "teacher_regression", "backbone": "mlp", "adapter": {"variant": "dora", "rank": "four"}}"#, "adapter.rank"),
            (r#"{"task": "teacher_regression", "backbone": "mlp", "adapter": {"variant": "dora"}, "lrr": 1}"#, "lrr"),
            (r#"{"task": "regression", "backbone": "mlp", "adapter": {"variant": "dora"}}"#, "task"),
            (r#"{"task": "teacher_regression", "backbone": "mlp", "adapter": {"variant": "dora"}, "output_dir": 3}"#, "output_dir"),
            (r#"{"task": "teacher_regression", "backbone": "mlp", "adapter": {"variant": "dora"}, "overrides": {"fc9": "lora"}}"#, "fc9"),
        ];
        for (text, needle) in cases {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{text}");
            assert!(err.to_string().contains(needle), "{err} lacks {needle}");
        }
    }

    #[test]
    fn cli_keys_are_extracted() {
        let text = r#"{"task": "attention_copy", "backbone": "attn", "adapter": {"variant": "lora", "rank": 2},
                       "output_dir": "out", "pattern": "^q$"}"#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.output_dir, Some(PathBuf::from("out")));
        assert_eq!(cfg.pattern.as_deref(), Some("^q$"));
        assert!(RunConfig::parse(&text.replace("^q$", "(")).is_err());
    }
}
