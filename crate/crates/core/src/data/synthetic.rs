use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, VelcError};

use super::Dataset;

/// Noisy sine windows, some of which carry injected spikes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    /// Total number of windows.
    pub size: usize,
    pub length: usize,
    /// Windows with spikes (label 1).
    pub anomalies: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Spike height in units of the sine amplitude.
    pub spike: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: 500,
            length: 64,
            anomalies: 50,
            noise: 0.05,
            spike: 2.0,
            seed: 0,
        }
    }
}

/// Each window is `sin(2π f t / T + θ)` with `f ∈ [2, 3]` cycles and a
/// random phase, plus noise. Anomalous windows add 1 to 3 spikes of height
/// `±spike` at random positions. Anomalies are spread evenly through the
/// output.
pub fn synthetic_sines(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.size == 0 || spec.length == 0 {
        return Err(VelcError::Config("synthetic size and length must be positive".into()));
    }
    if spec.anomalies >= spec.size {
        return Err(VelcError::Config(format!(
            "{} anomalies leave no normal windows out of {}",
            spec.anomalies, spec.size
        )));
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| VelcError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t_len = spec.length as f64;
    let mut series = Vec::with_capacity(spec.size);
    let mut labels = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        // Spread: window i is anomalous when the running quota advances.
        let anomalous = (i + 1) * spec.anomalies / spec.size > i * spec.anomalies / spec.size;
        let freq = rng.random_range(2.0..=3.0);
        let phase = rng.random_range(0.0..TAU);
        let mut x: Vec<f64> = (0..spec.length)
            .map(|t| (TAU * freq * t as f64 / t_len + phase).sin() + noise.sample(&mut rng))
            .collect();
        if anomalous {
            let n_spikes = rng.random_range(1..=3usize);
            for _ in 0..n_spikes {
                let at = rng.random_range(0..spec.length);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                x[at] += sign * spec.spike;
            }
        }
        series.push(x);
        labels.push(u8::from(anomalous));
    }
    Dataset::new("synthetic_sines", series, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_shape() {
        let d = synthetic_sines(&SyntheticSpec::default()).unwrap();
        assert_eq!(d.len(), 500);
        assert_eq!(d.length(), 64);
        assert_eq!(d.n_anomalous(), 50);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec { size: 40, anomalies: 4, ..Default::default() };
        assert_eq!(synthetic_sines(&spec).unwrap(), synthetic_sines(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec };
        assert_ne!(synthetic_sines(&spec).unwrap(), synthetic_sines(&other).unwrap());
    }

    #[test]
    fn spikes_exceed_normal_range() {
        let spec = SyntheticSpec { noise: 0.0, ..Default::default() };
        let d = synthetic_sines(&spec).unwrap();
        for (x, &l) in d.series.iter().zip(&d.labels) {
            let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if l == 0 {
                assert!(peak <= 1.0);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let spec = SyntheticSpec { anomalies: 500, ..Default::default() };
        assert!(synthetic_sines(&spec).is_err());
    }
}
