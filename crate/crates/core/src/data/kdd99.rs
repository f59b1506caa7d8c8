use std::fs;
use std::path::Path;

use crate::error::{Result, VelcError};

use super::Dataset;

const VOCAB_TEXT: &str = include_str!("kdd99_vocab.txt");

/// Raw feature columns per record, excluding the label.
const N_FEATURES: usize = 41;

/// Width of an encoded record.
pub const KDD99_WIDTH: usize = 121;

/// Category vocabularies of the one-hot encoded columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Kdd99Vocab {
    /// `(column index, column name, categories)` in column order.
    pub columns: Vec<(usize, String, Vec<String>)>,
}

impl Kdd99Vocab {
    /// The vocabulary shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(VOCAB_TEXT).expect("built-in vocabulary is well formed")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let col = it
                .next()
                .and_then(|c| c.parse::<usize>().ok())
                .filter(|&c| c < N_FEATURES)
                .ok_or_else(|| VelcError::parse("kdd99 vocabulary", idx + 1, "bad column index"))?;
            let name = it
                .next()
                .ok_or_else(|| VelcError::parse("kdd99 vocabulary", idx + 1, "missing name"))?;
            let values: Vec<String> = it.map(str::to_string).collect();
            if values.is_empty() {
                return Err(VelcError::parse("kdd99 vocabulary", idx + 1, "no categories"));
            }
            columns.push((col, name.to_string(), values));
        }
        columns.sort_by_key(|c| c.0);
        Ok(Kdd99Vocab { columns })
    }

    /// Encoded record width: numeric columns plus one slot per category.
    pub fn width(&self) -> usize {
        N_FEATURES - self.columns.len() + self.columns.iter().map(|c| c.2.len()).sum::<usize>()
    }

    fn encode(&self, fields: &[&str], origin: &str, lineno: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.width());
        let mut cat = self.columns.iter().peekable();
        for (j, raw) in fields.iter().enumerate() {
            match cat.peek() {
                Some((col, name, values)) if *col == j => {
                    let k = values.iter().position(|v| v == raw).ok_or_else(|| {
                        VelcError::parse(origin, lineno, format!("unknown {name} category {raw:?}"))
                    })?;
                    out.extend((0..values.len()).map(|i| if i == k { 1.0 } else { 0.0 }));
                    cat.next();
                }
                _ => {
                    let v = raw
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| {
                            VelcError::parse(origin, lineno, format!("non-numeric field {raw:?} in column {j}"))
                        })?;
                    out.push(v);
                }
            }
        }
        Ok(out)
    }
}

/// Parses KDD Cup 99 records (41 comma-separated features plus a label).
/// Records labeled `normal` become the anomalous class (1); attacks are 0.
pub fn parse_kdd99(text: &str, vocab: &Kdd99Vocab, name: &str, origin: &str) -> Result<Dataset> {
    let mut series = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != N_FEATURES + 1 {
            return Err(VelcError::parse(
                origin,
                lineno,
                format!("malformed record: expected {} fields, got {}", N_FEATURES + 1, fields.len()),
            ));
        }
        series.push(vocab.encode(&fields[..N_FEATURES], origin, lineno)?);
        let label = fields[N_FEATURES].trim_end_matches('.');
        labels.push(u8::from(label == "normal"));
    }
    if series.is_empty() {
        return Err(VelcError::parse(origin, 1, "file contains no records"));
    }
    Dataset::new(name, series, labels)
}

pub fn load_kdd99(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| VelcError::io(path, e))?;
    parse_kdd99(&text, &Kdd99Vocab::builtin(), "kdd99", &path.display().to_string())
}
