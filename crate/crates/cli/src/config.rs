use std::fs;
use std::path::Path;

use velc_core::{ScoreParams, TrainConfig, VelcError};

use crate::{CliError, CliResult, WeightArgs};

/// Reads `key = value` lines; blank lines and `#` comments are skipped.
pub fn load_key_values(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| VelcError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| VelcError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            detail: format!("expected key = value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Preset, then config file, then `--set` overrides, then `--seed`.
pub fn resolve_train_config(
    preset: &str,
    config: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::preset(preset)?;
    if let Some(path) = config {
        for (k, v) in load_key_values(path)? {
            cfg.set(&k, &v)?;
        }
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn score_params(w: &WeightArgs) -> CliResult<ScoreParams> {
    Ok(match w.beta {
        Some(b) => ScoreParams::new(w.alpha, b, w.phi)?,
        None => ScoreParams::from_alpha(w.alpha, w.phi)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn precedence_and_errors() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# comment\nbatch_size = 8\nhidden=16  # trailing\n\nseed = 3").unwrap();
        let cfg = resolve_train_config("ucr", Some(f.path()), &["hidden=12".into()], None).unwrap();
        assert_eq!((cfg.batch_size, cfg.hidden, cfg.seed), (8, 12, 3));
        let cfg = resolve_train_config("ucr", Some(f.path()), &[], Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);

        assert!(matches!(
            resolve_train_config("ucr", None, &["hidden".into()], None),
            Err(CliError::Usage(_))
        ));
        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, "batch_size 8").unwrap();
        let err = resolve_train_config("ucr", Some(bad.path()), &[], None).unwrap_err();
        assert_eq!(err.code(), "E_PARSE");
        let err = resolve_train_config("ucr", None, &["iterations=0".into()], None).unwrap_err();
        assert_eq!(err.code(), "E_CONFIG");
    }

    #[test]
    fn weights() {
        let p = score_params(&WeightArgs { alpha: 0.2, beta: None, phi: 0.5 }).unwrap();
        assert_eq!(p.beta, 0.8);
        assert!(score_params(&WeightArgs { alpha: 0.2, beta: Some(0.7), phi: 0.5 }).is_err());
    }
}
