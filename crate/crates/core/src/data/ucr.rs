use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, VelcError};

use super::Dataset;

/// Series with their original class identifiers, before relabeling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub name: String,
    pub classes: Vec<String>,
    pub series: Vec<Vec<f64>>,
    length: usize,
}

impl RawDataset {
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Count per class identifier.
    pub fn histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for c in &self.classes {
            *h.entry(c.clone()).or_insert(0) += 1;
        }
        h
    }

    /// Appends the rows of `other`, which must have the same length.
    pub fn extend(&mut self, other: RawDataset) -> Result<()> {
        if other.length != self.length {
            return Err(VelcError::Shape {
                op: "concatenate",
                left: vec![self.length],
                right: vec![other.length],
            });
        }
        self.classes.extend(other.classes);
        self.series.extend(other.series);
        Ok(())
    }
}

/// Parses UCR-style delimited text: one series per line, class label first,
/// fields separated by tabs, commas or spaces.
pub fn parse_ucr(text: &str, name: &str, origin: &str) -> Result<RawDataset> {
    let mut classes = Vec::new();
    let mut series: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line
            .split(['\t', ',', ' '])
            .filter(|f| !f.is_empty());
        let class = fields.next().unwrap_or_default();
        if class.parse::<f64>().is_err() {
            return Err(VelcError::parse(origin, lineno, format!("non-numeric class label {class:?}")));
        }
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| VelcError::parse(origin, lineno, format!("non-numeric field {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(VelcError::parse(origin, lineno, "row has no values"));
        }
        if let Some(first) = series.first() {
            if first.len() != values.len() {
                return Err(VelcError::parse(
                    origin,
                    lineno,
                    format!("ragged row: expected {} values, got {}", first.len(), values.len()),
                ));
            }
        }
        classes.push(canonical_class(class));
        series.push(values);
    }
    if series.is_empty() {
        return Err(VelcError::parse(origin, 1, "file contains no rows"));
    }
    Ok(RawDataset {
        name: name.to_string(),
        classes,
        length: series[0].len(),
        series,
    })
}

/// Reads a UCR file. The dataset name is the file stem without a
/// `_TRAIN`/`_TEST` suffix.
pub fn load_ucr(path: &Path) -> Result<RawDataset> {
    let text = fs::read_to_string(path).map_err(|e| VelcError::io(path, e))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let name = stem
        .strip_suffix("_TRAIN")
        .or_else(|| stem.strip_suffix("_TEST"))
        .unwrap_or(stem);
    parse_ucr(&text, name, &path.display().to_string())
}

/// `"1.0"` and `"1"` name the same class.
fn canonical_class(s: &str) -> String {
    match s.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.abs() < 1e15 => format!("{}", v as i64),
        _ => s.to_string(),
    }
}

fn class_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.partial_cmp(&y).unwrap_or(Ordering::Equal),
        _ => a.cmp(b),
    }
}

/// The least frequent class; equal counts go to the numerically smaller
/// identifier.
pub fn minority_class(raw: &RawDataset) -> Result<String> {
    let hist = raw.histogram();
    if hist.len() < 2 {
        return Err(VelcError::SingleClass(format!(
            "{} has a single class",
            raw.name
        )));
    }
    Ok(hist
        .iter()
        .min_by(|(a, na), (b, nb)| na.cmp(nb).then_with(|| class_order(a, b)))
        .map(|(c, _)| c.clone())
        .expect("non-empty histogram"))
}

/// Marks the [`minority_class`] as anomalous (1) and every other class as
/// normal (0).
pub fn relabel_minority(raw: &RawDataset) -> Result<Dataset> {
    let minority = minority_class(raw)?;
    let labels = raw.classes.iter().map(|c| u8::from(*c == minority)).collect();
    Dataset::new(&raw.name, raw.series.clone(), labels)
}
