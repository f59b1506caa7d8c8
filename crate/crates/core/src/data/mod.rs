//! Datasets, loaders and the train/test protocol.

mod kdd99;
mod split;
mod synthetic;
mod ucr;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Result, VelcError};

pub use kdd99::{load_kdd99, parse_kdd99, Kdd99Vocab, KDD99_WIDTH};
pub use split::{scale_and_split, Scaler, Split, SplitSpec};
pub use synthetic::{synthetic_sines, SyntheticSpec};
pub use ucr::{load_ucr, minority_class, parse_ucr, relabel_minority, RawDataset};

/// Fixed-length series with binary labels (1 = anomalous).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub series: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    length: usize,
}

impl Dataset {
    /// Checks that every series has the same length and every label is 0 or 1.
    pub fn new(name: &str, series: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self> {
        if series.is_empty() {
            return Err(VelcError::Empty(format!("dataset {name} has no series")));
        }
        if series.len() != labels.len() {
            return Err(VelcError::Shape {
                op: "dataset",
                left: vec![series.len()],
                right: vec![labels.len()],
            });
        }
        let length = series[0].len();
        if length == 0 {
            return Err(VelcError::Empty(format!("dataset {name} has zero-length series")));
        }
        if let Some(i) = series.iter().position(|s| s.len() != length) {
            return Err(VelcError::Shape {
                op: "dataset",
                left: vec![length],
                right: vec![series[i].len()],
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(VelcError::Config(format!("label {l} is not 0 or 1")));
        }
        Ok(Dataset {
            name: sanitize_name(name),
            series,
            labels,
            length,
        })
    }

    /// Series length `T`.
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn n_anomalous(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn n_normal(&self) -> usize {
        self.len() - self.n_anomalous()
    }

    pub fn anomaly_ratio(&self) -> f64 {
        self.n_anomalous() as f64 / self.len() as f64
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, name: &str, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            name,
            indices.iter().map(|&i| self.series[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Canonical text form: a header line, then one `label<TAB>values…` row
    /// per series. Floats use the shortest exact decimal form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{DATASET_MAGIC} name={} length={} size={} anomaly_ratio={}",
            self.name,
            self.length,
            self.len(),
            self.anomaly_ratio()
        );
        for (x, l) in self.series.iter().zip(&self.labels) {
            let _ = write!(s, "{l}");
            for v in x {
                let _ = write!(s, "\t{v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Dataset> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| VelcError::parse(origin, 1, "empty dataset file"))?;
        let rest = header
            .strip_prefix(DATASET_MAGIC)
            .ok_or_else(|| VelcError::parse(origin, 1, "missing dataset header"))?;
        let mut name = None;
        let mut length = None;
        let mut size = None;
        for kv in rest.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| VelcError::parse(origin, 1, format!("bad header field {kv}")))?;
            let count = || {
                v.parse::<usize>()
                    .map_err(|_| VelcError::parse(origin, 1, format!("bad count {v}")))
            };
            match k {
                "name" => name = Some(v.to_string()),
                "length" => length = Some(count()?),
                "size" => size = Some(count()?),
                _ => {}
            }
        }
        let name = name.ok_or_else(|| VelcError::parse(origin, 1, "header lacks name"))?;
        let length = length.ok_or_else(|| VelcError::parse(origin, 1, "header lacks length"))?;
        let size = size.ok_or_else(|| VelcError::parse(origin, 1, "header lacks size"))?;

        let mut series = Vec::with_capacity(size);
        let mut labels = Vec::with_capacity(size);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let mut fields = line.split('\t');
            let label = match fields.next() {
                Some("0") => 0,
                Some("1") => 1,
                other => {
                    return Err(VelcError::parse(
                        origin,
                        lineno,
                        format!("bad label {}", other.unwrap_or("")),
                    ))
                }
            };
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| VelcError::parse(origin, lineno, format!("non-numeric field {f:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != length {
                return Err(VelcError::parse(
                    origin,
                    lineno,
                    format!("expected {length} values, got {}", values.len()),
                ));
            }
            series.push(values);
            labels.push(label);
        }
        if series.len() != size {
            return Err(VelcError::parse(
                origin,
                text.lines().count(),
                format!("header declares {size} rows, found {}", series.len()),
            ));
        }
        Dataset::new(&name, series, labels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| VelcError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(path).map_err(|e| VelcError::io(path, e))?;
        Dataset::parse(&text, &path.display().to_string())
    }
}

const DATASET_MAGIC: &str = "# velc-dataset";

fn sanitize_name(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_whitespace() || c == '=' { '_' } else { c })
        .collect();
    if s.is_empty() {
        "dataset".into()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset::new(
            "toy set",
            vec![vec![0.1, 1.0 / 3.0, -2.5e-300], vec![1e300, 0.0, -0.0]],
            vec![0, 1],
        )
        .unwrap()
    }

    #[test]
    fn validation() {
        assert!(Dataset::new("a", vec![], vec![]).is_err());
        assert!(Dataset::new("a", vec![vec![1.0], vec![1.0, 2.0]], vec![0, 0]).is_err());
        assert!(Dataset::new("a", vec![vec![1.0]], vec![2]).is_err());
        assert!(Dataset::new("a", vec![vec![1.0]], vec![0, 1]).is_err());
        let d = toy();
        assert_eq!(d.name, "toy_set");
        assert_eq!(d.length(), 3);
        assert_eq!(d.anomaly_ratio(), 0.5);
    }

    #[test]
    fn canonical_round_trip_is_exact() {
        let d = toy();
        let text = d.to_text();
        let back = Dataset::parse(&text, "mem").unwrap();
        assert_eq!(back, d);
        for (a, b) in back.series.iter().flatten().zip(d.series.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn canonical_parse_errors() {
        assert!(Dataset::parse("", "x").is_err());
        assert!(Dataset::parse("0\t1\n", "x").is_err());
        let ragged = "# velc-dataset name=a length=2 size=1 anomaly_ratio=0\n0\t1\n";
        assert!(matches!(Dataset::parse(ragged, "x"), Err(VelcError::Parse { line: 2, .. })));
        let truncated = "# velc-dataset name=a length=1 size=2 anomaly_ratio=0\n0\t1\n";
        assert!(Dataset::parse(truncated, "x").is_err());
    }
}
