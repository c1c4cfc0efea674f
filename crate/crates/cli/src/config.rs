use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use evofilter_core::engine::EngineConfig;
use evofilter_core::llm::BackendConfig;

/// Reads a TOML run configuration. Unknown keys are rejected, and a
/// relative mock script path is taken relative to the file.
pub fn load(path: &Path) -> Result<EngineConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: EngineConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(BackendConfig::Mock { script }) = &mut cfg.llm.backend {
        if script.is_relative() {
            let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            *script = base.join(&*script);
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use evofilter_core::dynsys::Scenario;
    use evofilter_core::engine::Method;

    #[test]
    fn reads_nested_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
method = "llm"
task = "update-12.5"
seed = 4

[scenario]
kind = "delayed"
lo = 0.0
hi = 0.5

[llm.backend]
kind = "mock"
script = "replies.txt"
"#,
        )
        .unwrap();
        let cfg = load(&path).unwrap();
        assert_eq!(cfg.method, Method::Llm);
        assert_eq!(cfg.scenario, Scenario::Delayed { lo: 0.0, hi: 0.5 });
        assert_eq!(cfg.llm.backend, Some(BackendConfig::Mock { script: dir.path().join("replies.txt") }));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "iterations = 3\nislnds = 2\n").unwrap();
        assert!(load(&path).is_err());
        std::fs::write(&path, "[cgp]\nrate = 0.2\n").unwrap();
        assert!(load(&path).is_err());
    }
}
