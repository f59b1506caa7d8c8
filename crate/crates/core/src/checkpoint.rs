//! Plain-text model checkpoints.
//!
//! ```text
//! velc-checkpoint v1
//! series_len = 136
//! ...
//! params 24
//! param encoder.fwd.w_input 1 256
//! <row-major values, tab separated>
//! ...
//! end
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Result, VelcError};
use crate::model::{ModelConfig, VelcModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "v1";
const MAGIC: &str = "velc-checkpoint";

fn config_lines(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("series_len", c.series_len.to_string()),
        ("hidden", c.hidden.to_string()),
        ("z_dim", c.z_dim.to_string()),
        ("memory_rows", c.memory_rows.to_string()),
        ("threshold", format!("{:.16e}", c.threshold)),
        ("reencoder_constraint", c.reencoder_constraint.to_string()),
        ("latent_target", c.latent_target.to_string()),
        ("squared_norms", c.squared_norms.to_string()),
    ]
}

/// Serializes every config field and parameter; floats carry 17
/// significant digits, which is exact for `f64`.
pub fn checkpoint_to_text(m: &VelcModel) -> String {
    let mut s = format!("{MAGIC} {CHECKPOINT_VERSION}\n");
    for (k, v) in config_lines(&m.config) {
        let _ = writeln!(s, "{k} = {v}");
    }
    let _ = writeln!(s, "params {}", m.params.len());
    for (_, p) in m.params.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(s, "param {} {}", p.name, shape.join(" "));
        let mut first = true;
        for v in p.value.data() {
            if !first {
                s.push('\t');
            }
            first = false;
            let _ = write!(s, "{v:.16e}");
        }
        s.push('\n');
    }
    s.push_str("end\n");
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    origin: &'a str,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(VelcError::parse(
                self.origin,
                self.last + 1,
                format!("unexpected end of file, expected {what}"),
            )),
        }
    }
}

/// Rebuilds a model from checkpoint text. Nothing is returned unless the
/// whole document parses and matches the declared architecture.
pub fn checkpoint_from_text(text: &str, origin: &str) -> Result<VelcModel> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        origin,
        last: 0,
    };
    let (_, header) = lines.next("header")?;
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| VelcError::parse(origin, 1, "not a checkpoint file"))?;
    if version != CHECKPOINT_VERSION {
        return Err(VelcError::Version {
            expected: CHECKPOINT_VERSION.into(),
            found: version.into(),
        });
    }

    let mut config = ModelConfig::new(1);
    let mut seen = HashSet::new();
    let n_params = loop {
        let (no, line) = lines.next("config or params line")?;
        if let Some(n) = line.strip_prefix("params ") {
            break n
                .trim()
                .parse::<usize>()
                .map_err(|_| VelcError::parse(origin, no, "bad parameter count"))?;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| VelcError::parse(origin, no, format!("bad config line {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let bad = || VelcError::parse(origin, no, format!("bad value {v:?} for {k}"));
        match k {
            "series_len" => config.series_len = v.parse().map_err(|_| bad())?,
            "hidden" => config.hidden = v.parse().map_err(|_| bad())?,
            "z_dim" => config.z_dim = v.parse().map_err(|_| bad())?,
            "memory_rows" => config.memory_rows = v.parse().map_err(|_| bad())?,
            "threshold" => config.threshold = v.parse().map_err(|_| bad())?,
            "reencoder_constraint" => config.reencoder_constraint = v.parse().map_err(|_| bad())?,
            "latent_target" => config.latent_target = v.parse().map_err(|_| bad())?,
            "squared_norms" => config.squared_norms = v.parse().map_err(|_| bad())?,
            _ => return Err(VelcError::parse(origin, no, format!("unknown config key {k}"))),
        }
        seen.insert(k.to_string());
    };
    for (k, _) in config_lines(&config) {
        if !seen.contains(k) {
            return Err(VelcError::parse(origin, lines.last, format!("config lacks {k}")));
        }
    }

    let mut model = VelcModel::new(config, 0)?;
    if n_params != model.params.len() {
        return Err(VelcError::parse(
            origin,
            lines.last,
            format!("expected {} parameters, file declares {n_params}", model.params.len()),
        ));
    }
    let mut loaded = HashSet::new();
    for _ in 0..n_params {
        let (no, head) = lines.next("param line")?;
        let mut f = head.split_whitespace();
        if f.next() != Some("param") {
            return Err(VelcError::parse(origin, no, "expected a param line"));
        }
        let name = f
            .next()
            .ok_or_else(|| VelcError::parse(origin, no, "param line lacks a name"))?
            .to_string();
        let shape = f
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| VelcError::parse(origin, no, "bad shape"))?;
        let (no, body) = lines.next("parameter values")?;
        let values = body
            .split('\t')
            .filter(|v| !v.is_empty())
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| VelcError::parse(origin, no, format!("non-numeric value in {name}")))?;
        let value = Tensor::new(shape, values)
            .map_err(|e| VelcError::parse(origin, no, format!("{name}: {e}")))?;
        if !value.is_finite() {
            return Err(VelcError::parse(origin, no, format!("{name} has non-finite values")));
        }
        model.params.assign(&name, value)?;
        if !loaded.insert(name.clone()) {
            return Err(VelcError::parse(origin, no, format!("duplicate parameter {name}")));
        }
    }
    let (no, end) = lines.next("end marker")?;
    if end.trim() != "end" {
        return Err(VelcError::parse(origin, no, "missing end marker"));
    }
    Ok(model)
}

pub fn save_checkpoint(m: &VelcModel, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_text(m)).map_err(|e| VelcError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<VelcModel> {
    let text = fs::read_to_string(path).map_err(|e| VelcError::io(path, e))?;
    checkpoint_from_text(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LatentTarget;

    fn toy(seed: u64) -> VelcModel {
        let mut cfg = ModelConfig::new(5);
        cfg.hidden = 3;
        cfg.z_dim = 2;
        cfg.memory_rows = 4;
        cfg.threshold = 0.1;
        cfg.latent_target = LatentTarget::Raw;
        VelcModel::new(cfg, seed).unwrap()
    }

    #[test]
    fn round_trip_is_exact_and_idempotent() {
        let m = toy(11);
        let text = checkpoint_to_text(&m);
        let back = checkpoint_from_text(&text, "mem").unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params, m.params);
        assert_eq!(checkpoint_to_text(&back), text);
    }

    #[test]
    fn disabled_second_matrix_round_trips() {
        let mut cfg = toy(1).config;
        cfg.reencoder_constraint = false;
        let m = VelcModel::new(cfg, 3).unwrap();
        let back = checkpoint_from_text(&checkpoint_to_text(&m), "mem").unwrap();
        assert!(back.c2.is_none());
        assert_eq!(back.params, m.params);
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let text = checkpoint_to_text(&toy(2));
        let lines: Vec<&str> = text.lines().collect();
        for keep in [0, 1, 5, lines.len() / 2, lines.len() - 1] {
            let cut = lines[..keep].join("\n");
            let err = checkpoint_from_text(&cut, "cut").unwrap_err();
            assert!(matches!(err, VelcError::Parse { .. }), "{keep}: {err}");
        }
        // A value line cut mid-way.
        let cut = &text[..text.len() - 40];
        assert!(checkpoint_from_text(cut, "cut").is_err());
    }

    #[test]
    fn version_mismatch() {
        let text = checkpoint_to_text(&toy(2)).replacen("v1", "v9", 1);
        assert!(matches!(
            checkpoint_from_text(&text, "x"),
            Err(VelcError::Version { .. })
        ));
    }

    #[test]
    fn shape_mismatch() {
        let text = checkpoint_to_text(&toy(2)).replacen("hidden = 3", "hidden = 4", 1);
        assert!(checkpoint_from_text(&text, "x").is_err());
    }
}
