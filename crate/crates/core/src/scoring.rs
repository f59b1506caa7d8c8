//! Anomaly scores over the input space and the latent space, min-max
//! normalization and thresholded flags.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::diff::Graph;
use crate::error::{Result, VelcError};
use crate::model::VelcModel;
use crate::tensor::Tensor;

/// Rows scored per forward pass.
const SCORE_CHUNK: usize = 64;

/// Weights of the two error terms and the decision threshold on the
/// normalized score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParams {
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams {
            alpha: 0.6,
            beta: 0.4,
            phi: 0.5,
        }
    }
}

impl ScoreParams {
    /// `alpha, beta > 0` with `alpha + beta = 1`; `phi ∈ [0, 1]`.
    pub fn new(alpha: f64, beta: f64, phi: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(VelcError::Config(format!(
                "alpha and beta must be positive, got {alpha} and {beta}"
            )));
        }
        Self::checked(alpha, beta, phi)
    }

    /// `beta = 1 − alpha`.
    pub fn from_alpha(alpha: f64, phi: f64) -> Result<Self> {
        Self::new(alpha, 1.0 - alpha, phi)
    }

    /// Like [`ScoreParams::from_alpha`] but admits the limits `alpha = 0`
    /// and `alpha = 1`, where one term drops out.
    pub fn boundary(alpha: f64, phi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(VelcError::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Self::checked(alpha, 1.0 - alpha, phi)
    }

    fn checked(alpha: f64, beta: f64, phi: f64) -> Result<Self> {
        if (alpha + beta - 1.0).abs() > 1e-12 {
            return Err(VelcError::Config(format!(
                "alpha + beta must equal 1, got {}",
                alpha + beta
            )));
        }
        if !(0.0..=1.0).contains(&phi) {
            return Err(VelcError::Config(format!("phi {phi} outside [0, 1]")));
        }
        Ok(ScoreParams { alpha, beta, phi })
    }

    /// `α·rec + β·lat`.
    pub fn combine(&self, c: ScoreComponents) -> f64 {
        self.alpha * c.rec_l1 + self.beta * c.lat_l1
    }
}

/// Per-sample error terms: `‖x − x′‖₁` and `‖z′ − re_z′‖₁`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreComponents {
    pub rec_l1: f64,
    pub lat_l1: f64,
}

/// Eval-mode error components for every row of `series`.
pub fn score_components(model: &VelcModel, series: &[Vec<f64>]) -> Result<Vec<ScoreComponents>> {
    let t_len = model.series_len();
    if let Some((i, s)) = series.iter().enumerate().find(|(_, s)| s.len() != t_len) {
        return Err(VelcError::Config(format!(
            "series {i} has length {} but the model expects {t_len}",
            s.len()
        )));
    }
    let chunks: Vec<Result<Vec<ScoreComponents>>> = series
        .par_chunks(SCORE_CHUNK)
        .map(|chunk| {
            let x = Tensor::from_rows(chunk)?;
            let mut g = Graph::new();
            let (xv, out) = model.forward_eval(&mut g, &x)?;
            let rec = g.sub(xv, out.x_recon.series)?;
            let rec = g.l1_norm(rec, Some(1))?;
            let lat = g.sub(out.z_tilde, out.re_z_tilde)?;
            let lat = g.l1_norm(lat, Some(1))?;
            Ok(g.value(rec)
                .data()
                .iter()
                .zip(g.value(lat).data())
                .map(|(&rec_l1, &lat_l1)| ScoreComponents { rec_l1, lat_l1 })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(series.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// `A(x) = α‖x − x′‖₁ + β‖z′ − re_z′‖₁` with eval-mode (mean) latents.
pub fn raw_score(model: &VelcModel, x: &[f64], p: &ScoreParams) -> Result<f64> {
    let c = score_components(model, std::slice::from_ref(&x.to_vec()))?;
    Ok(p.combine(c[0]))
}

/// Min-max scaling to `[0, 1]`; a constant list maps to all zeros.
pub fn normalize_scores(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(VelcError::Empty("no scores to normalize".into()));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range == 0.0 {
        return Ok(vec![0.0; scores.len()]);
    }
    Ok(scores.iter().map(|s| ((s - min) / range).clamp(0.0, 1.0)).collect())
}

/// `A′ > φ`.
pub fn classify(normalized: &[f64], phi: f64) -> Vec<bool> {
    normalized.iter().map(|&a| a > phi).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSeries {
    pub id: usize,
    pub raw: f64,
    pub normalized: f64,
    pub label: Option<u8>,
    pub flag: bool,
    pub components: ScoreComponents,
}

/// Builds scored records from cached components.
pub fn score_from_components(
    components: &[ScoreComponents],
    labels: Option<&[u8]>,
    p: &ScoreParams,
) -> Result<Vec<ScoredSeries>> {
    if let Some(l) = labels {
        if l.len() != components.len() {
            return Err(VelcError::Shape {
                op: "score labels",
                left: vec![components.len()],
                right: vec![l.len()],
            });
        }
    }
    let raw: Vec<f64> = components.iter().map(|&c| p.combine(c)).collect();
    let normalized = normalize_scores(&raw)?;
    let flags = classify(&normalized, p.phi);
    Ok((0..components.len())
        .map(|i| ScoredSeries {
            id: i,
            raw: raw[i],
            normalized: normalized[i],
            label: labels.map(|l| l[i]),
            flag: flags[i],
            components: components[i],
        })
        .collect())
}

pub fn score_dataset(
    model: &VelcModel,
    series: &[Vec<f64>],
    labels: Option<&[u8]>,
    p: &ScoreParams,
) -> Result<Vec<ScoredSeries>> {
    let comps = score_components(model, series)?;
    score_from_components(&comps, labels, p)
}

/// Contents of a score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    pub dataset: String,
    pub params: ScoreParams,
    pub records: Vec<ScoredSeries>,
}

const SCORE_MAGIC: &str = "# velc-scores";
const SCORE_COLUMNS: &str = "id\traw\tnormalized\tlabel\tflag\trec_l1\tlat_l1";

impl ScoreFile {
    pub fn labels(&self) -> Option<Vec<u8>> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn components(&self) -> Vec<ScoreComponents> {
        self.records.iter().map(|r| r.components).collect()
    }

    /// Tab-separated text: a header line with the dataset name and score
    /// parameters, a column line, then one record per sample. Unknown labels
    /// are written as `-1`; floats carry 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        let _ = writeln!(
            s,
            "{SCORE_MAGIC} dataset={} alpha={:.16e} beta={:.16e} phi={:.16e}",
            self.dataset, p.alpha, p.beta, p.phi
        );
        s.push_str(SCORE_COLUMNS);
        s.push('\n');
        for r in &self.records {
            let label = r.label.map_or(-1, i32::from);
            let _ = writeln!(
                s,
                "{}\t{:.16e}\t{:.16e}\t{}\t{}\t{:.16e}\t{:.16e}",
                r.id,
                r.raw,
                r.normalized,
                label,
                u8::from(r.flag),
                r.components.rec_l1,
                r.components.lat_l1
            );
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| VelcError::parse(origin, 1, "empty score file"))?;
        let rest = header
            .strip_prefix(SCORE_MAGIC)
            .ok_or_else(|| VelcError::parse(origin, 1, "missing score file header"))?;
        let mut dataset = None;
        let (mut alpha, mut beta, mut phi) = (None, None, None);
        for kv in rest.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| VelcError::parse(origin, 1, format!("bad header field {kv}")))?;
            let num = || {
                v.parse::<f64>()
                    .map_err(|_| VelcError::parse(origin, 1, format!("bad number {v}")))
            };
            match k {
                "dataset" => dataset = Some(v.to_string()),
                "alpha" => alpha = Some(num()?),
                "beta" => beta = Some(num()?),
                "phi" => phi = Some(num()?),
                _ => {}
            }
        }
        let missing = |what: &str| VelcError::parse(origin, 1, format!("header lacks {what}"));
        let params = ScoreParams {
            alpha: alpha.ok_or_else(|| missing("alpha"))?,
            beta: beta.ok_or_else(|| missing("beta"))?,
            phi: phi.ok_or_else(|| missing("phi"))?,
        };
        match lines.next() {
            Some((_, cols)) if cols == SCORE_COLUMNS => {}
            _ => return Err(VelcError::parse(origin, 2, "missing column line")),
        }
        let mut records = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(VelcError::parse(origin, lineno, format!("expected 7 fields, got {}", f.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| VelcError::parse(origin, lineno, format!("bad number {s}")))
            };
            let id = f[0]
                .parse::<usize>()
                .map_err(|_| VelcError::parse(origin, lineno, format!("bad id {}", f[0])))?;
            let label = match f[3] {
                "-1" => None,
                "0" => Some(0),
                "1" => Some(1),
                other => return Err(VelcError::parse(origin, lineno, format!("bad label {other}"))),
            };
            let flag = match f[4] {
                "0" => false,
                "1" => true,
                other => return Err(VelcError::parse(origin, lineno, format!("bad flag {other}"))),
            };
            records.push(ScoredSeries {
                id,
                raw: num(f[1])?,
                normalized: num(f[2])?,
                label,
                flag,
                components: ScoreComponents {
                    rec_l1: num(f[5])?,
                    lat_l1: num(f[6])?,
                },
            });
        }
        Ok(ScoreFile {
            dataset: dataset.unwrap_or_default(),
            params,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| VelcError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| VelcError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_model() -> VelcModel {
        let mut cfg = ModelConfig::new(8);
        cfg.hidden = 5;
        cfg.z_dim = 3;
        cfg.memory_rows = 6;
        VelcModel::new(cfg, 3).unwrap()
    }

    fn series(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..8).map(|t| ((i * 8 + t) as f64 * 0.31).sin() * 0.5 + 0.5).collect())
            .collect()
    }

    #[test]
    fn score_params_validation() {
        assert!(ScoreParams::new(0.6, 0.4, 0.5).is_ok());
        assert!(ScoreParams::new(0.0, 1.0, 0.5).is_err());
        assert!(ScoreParams::new(0.6, 0.5, 0.5).is_err());
        assert!(ScoreParams::new(0.6, 0.4, 1.5).is_err());
        assert!(ScoreParams::boundary(1.0, 0.5).is_ok());
        assert!(ScoreParams::boundary(1.1, 0.5).is_err());
        let p = ScoreParams::from_alpha(0.2, 0.5).unwrap();
        assert_eq!(p.beta, 1.0 - 0.2);
    }

    #[test]
    fn combine_direct_value() {
        let p = ScoreParams::new(0.6, 0.4, 0.5).unwrap();
        let a = p.combine(ScoreComponents {
            rec_l1: 2.0,
            lat_l1: 1.0,
        });
        assert!((a - 1.6).abs() < 1e-15);
        assert_eq!(p.combine(ScoreComponents::default()), 0.0);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_scores(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_scores(&[3.0, 3.0, 3.0]).unwrap(), vec![0.0; 3]);
        assert!(matches!(normalize_scores(&[]), Err(VelcError::Empty(_))));
    }

    #[test]
    fn classify_examples() {
        let n = [0.0, 0.5, 1.0];
        assert_eq!(classify(&n, 1.0), vec![false, false, false]);
        assert_eq!(classify(&n, 0.0), vec![false, true, true]);
        assert_eq!(classify(&n, 0.5), vec![false, false, true]);
    }

    #[test]
    fn raw_score_is_repeatable_and_non_negative() {
        let m = small_model();
        let p = ScoreParams::default();
        let s = &series(1)[0];
        let a = raw_score(&m, s, &p).unwrap();
        let b = raw_score(&m, s, &p).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a >= 0.0);
    }

    #[test]
    fn raw_scores_do_not_depend_on_batch_composition() {
        let m = small_model();
        let all = series(150);
        let full = score_components(&m, &all).unwrap();
        let subset: Vec<Vec<f64>> = all.iter().skip(37).step_by(3).cloned().collect();
        let part = score_components(&m, &subset).unwrap();
        for (k, c) in part.iter().enumerate() {
            assert_eq!(*c, full[37 + 3 * k]);
        }
        for (i, s) in all.iter().enumerate().take(5) {
            let single = score_components(&m, std::slice::from_ref(s)).unwrap();
            assert_eq!(single[0], full[i]);
        }
    }

    #[test]
    fn alpha_one_limit_is_pure_reconstruction() {
        let m = small_model();
        let all = series(4);
        let comps = score_components(&m, &all).unwrap();
        let p = ScoreParams::boundary(1.0, 0.5).unwrap();
        for (s, c) in all.iter().zip(&comps) {
            assert_eq!(raw_score(&m, s, &p).unwrap(), c.rec_l1);
        }
    }

    #[test]
    fn length_mismatch_is_config_error() {
        let m = small_model();
        let bad = vec![vec![0.0; 7]];
        assert!(matches!(score_components(&m, &bad), Err(VelcError::Config(_))));
    }

    #[test]
    fn score_file_round_trip() {
        let comps = vec![
            ScoreComponents { rec_l1: 1.0 / 3.0, lat_l1: 2.5e-7 },
            ScoreComponents { rec_l1: 0.1, lat_l1: 0.2 },
            ScoreComponents { rec_l1: 7.0, lat_l1: 0.0 },
        ];
        let p = ScoreParams::default();
        let records = score_from_components(&comps, Some(&[0, 1, 1]), &p).unwrap();
        let f = ScoreFile { dataset: "toy".into(), params: p, records };
        let back = ScoreFile::parse(&f.to_text(), "mem").unwrap();
        assert_eq!(back, f);

        let unlabeled = ScoreFile {
            records: score_from_components(&comps, None, &p).unwrap(),
            ..f
        };
        let text = unlabeled.to_text();
        assert!(text.lines().nth(2).unwrap().contains("\t-1\t"));
        assert_eq!(ScoreFile::parse(&text, "mem").unwrap().labels(), None);
    }

    #[test]
    fn score_file_rejects_garbage() {
        assert!(ScoreFile::parse("", "x").is_err());
        assert!(ScoreFile::parse("id\traw\n", "x").is_err());
        let text = format!("{SCORE_MAGIC} dataset=a alpha=0.5 beta=0.5 phi=0.5\n{SCORE_COLUMNS}\n0\t1\t2\n");
        assert!(matches!(ScoreFile::parse(&text, "x"), Err(VelcError::Parse { line: 3, .. })));
    }
}
