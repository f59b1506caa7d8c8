use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VelcError};

use super::Dataset;

/// How a labeled dataset is divided into a normal-only training set and a
/// mixed test set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    /// Fraction of the normal series held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Per-dimension min-max scaler.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    pub fn fit(series: &[Vec<f64>]) -> Result<Self> {
        let first = series
            .first()
            .ok_or_else(|| VelcError::Empty("cannot fit a scaler on no series".into()))?;
        let mut min = first.clone();
        let mut max = first.clone();
        for s in &series[1..] {
            for (j, &v) in s.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(Scaler { min, max })
    }

    /// `(x − min) / (max − min)`, or `x − min` where the range is zero.
    /// Values outside the fitted range are not clipped.
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| {
                let range = hi - lo;
                if range > 0.0 {
                    (v - lo) / range
                } else {
                    v - lo
                }
            })
            .collect()
    }

    pub fn transform_dataset(&self, d: &Dataset) -> Result<Dataset> {
        if d.length() != self.min.len() {
            return Err(VelcError::Shape {
                op: "scale",
                left: vec![self.min.len()],
                right: vec![d.length()],
            });
        }
        Dataset::new(
            &d.name,
            d.series.iter().map(|s| self.transform(s)).collect(),
            d.labels.clone(),
        )
    }
}

/// Result of [`scale_and_split`]; index lists refer to rows of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub scaler: Scaler,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Holds out a seeded random `test_fraction` of the normal series and every
/// anomalous series as the test set; the remaining normals form the
/// training set. A min-max scaler fitted on the training rows is applied to
/// both sets.
pub fn scale_and_split(d: &Dataset, spec: &SplitSpec) -> Result<Split> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(VelcError::Config(format!(
            "test fraction must lie in (0, 1), got {}",
            spec.test_fraction
        )));
    }
    let mut normals: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == 0).collect();
    if normals.is_empty() {
        return Err(VelcError::Empty(format!("{} has no normal series", d.name)));
    }
    let n_test = ((normals.len() as f64) * spec.test_fraction).round() as usize;
    let n_test = n_test.clamp(1, normals.len().saturating_sub(1).max(1));
    if n_test >= normals.len() {
        return Err(VelcError::Empty(format!(
            "{} has too few normal series to split",
            d.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    normals.shuffle(&mut rng);
    let (held, kept) = normals.split_at(n_test);

    let mut train_indices = kept.to_vec();
    train_indices.sort_unstable();
    let mut test_indices: Vec<usize> = held
        .iter()
        .copied()
        .chain((0..d.len()).filter(|&i| d.labels[i] == 1))
        .collect();
    test_indices.sort_unstable();

    let train_raw = d.subset(&format!("{}_train", d.name), &train_indices)?;
    let test_raw = d.subset(&format!("{}_test", d.name), &test_indices)?;
    let scaler = Scaler::fit(&train_raw.series)?;
    Ok(Split {
        train: scaler.transform_dataset(&train_raw)?,
        test: scaler.transform_dataset(&test_raw)?,
        scaler,
        train_indices,
        test_indices,
    })
}
