//! Mini-batch training: hyperparameter presets, the adaptive-moment
//! optimizer and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::diff::{GradientMap, Graph};
use crate::error::{Result, VelcError};
use crate::model::{loss, LatentTarget, LossBreakdown, Mode, ModelConfig, VelcModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Rows `N` of each constraint matrix.
    pub memory_rows: usize,
    /// Sparsity threshold `ths`.
    pub threshold: f64,
    pub seed: u64,
    pub z_dim: usize,
    pub hidden: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global L2 norm above which gradients are rescaled.
    pub clip_norm: f64,
    /// Iterations averaged into each log entry.
    pub log_interval: usize,
    pub reencoder_constraint: bool,
    pub latent_target: LatentTarget,
    pub squared_norms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::ucr()
    }
}

impl TrainConfig {
    /// Univariate archive datasets: batch 32, lr 0.005, 5000 iterations, N = 50.
    pub fn ucr() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 0.005,
            iterations: 5000,
            memory_rows: 50,
            threshold: 0.025,
            seed: 0,
            z_dim: 20,
            hidden: 64,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            log_interval: 50,
            reencoder_constraint: true,
            latent_target: LatentTarget::Constrained,
            squared_norms: false,
        }
    }

    /// Batch 32, lr 0.01, 10000 iterations, N = 10.
    pub fn arrhythmia() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            iterations: 10_000,
            memory_rows: 10,
            ..Self::ucr()
        }
    }

    /// Batch 50, lr 1e-5, 150000 iterations, N = 50.
    pub fn kdd99() -> Self {
        TrainConfig {
            batch_size: 50,
            learning_rate: 1e-5,
            iterations: 150_000,
            ..Self::ucr()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ucr" => Ok(Self::ucr()),
            "arrhythmia" => Ok(Self::arrhythmia()),
            "kdd99" => Ok(Self::kdd99()),
            other => Err(VelcError::Config(format!("unknown preset {other}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(VelcError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(VelcError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(VelcError::Config("iterations must be at least 1".into()));
        }
        if self.log_interval == 0 {
            return Err(VelcError::Config("log_interval must be at least 1".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(VelcError::Config("moment decay rates must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0 && self.clip_norm > 0.0) {
            return Err(VelcError::Config("epsilon and clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, series_len: usize) -> ModelConfig {
        ModelConfig {
            series_len,
            hidden: self.hidden,
            z_dim: self.z_dim,
            memory_rows: self.memory_rows,
            threshold: self.threshold,
            reencoder_constraint: self.reencoder_constraint,
            latent_target: self.latent_target,
            squared_norms: self.squared_norms,
        }
    }

    /// Every field as `key = value` lines, in declaration order.
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("iterations", self.iterations.to_string()),
            ("memory_rows", self.memory_rows.to_string()),
            ("threshold", self.threshold.to_string()),
            ("seed", self.seed.to_string()),
            ("z_dim", self.z_dim.to_string()),
            ("hidden", self.hidden.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("reencoder_constraint", self.reencoder_constraint.to_string()),
            ("latent_target", self.latent_target.to_string()),
            ("squared_norms", self.squared_norms.to_string()),
        ]
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| VelcError::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "memory_rows" => self.memory_rows = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "z_dim" => self.z_dim = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "log_interval" => self.log_interval = num(key, value)?,
            "reencoder_constraint" => self.reencoder_constraint = num(key, value)?,
            "latent_target" => self.latent_target = value.trim().parse()?,
            "squared_norms" => self.squared_norms = num(key, value)?,
            other => return Err(VelcError::Config(format!("unknown training key {other}"))),
        }
        Ok(())
    }
}

/// Adaptive-moment gradient descent with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update; parameters without a gradient see a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradientMap) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for id in store.ids().collect::<Vec<_>>() {
            let k = id.index();
            let Some(g) = grads.get(id) else {
                // Zero gradient: moments decay, the update uses the decayed moments.
                let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
                let p = store.get_mut(id).data_mut();
                for i in 0..p.len() {
                    m[i] *= b1;
                    v[i] *= b2;
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
                continue;
            };
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = store.get_mut(id).data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// One log line: mean loss terms over the iterations since the last entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    /// Zero-based index of the last iteration in the interval.
    pub iteration: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iteration\tl_rec_x\tl_kl_1\tl_kl_2\tl_lat\ttotal";

    pub fn to_text(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for e in &self.entries {
            let l = &e.loss;
            let _ = writeln!(
                s,
                "{}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}",
                e.iteration, l.l_rec_x, l.l_kl_1, l.l_kl_2, l.l_lat, l.total
            );
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| VelcError::io(path, e))
    }

    /// Mean total loss over entries whose iteration lies in `[from, to)`.
    pub fn mean_total(&self, from: usize, to: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| (from..to).contains(&e.iteration))
            .map(|e| e.loss.total)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn tag_loss_error(e: VelcError, iteration: usize) -> VelcError {
    match e {
        VelcError::NonFinite { term, value, .. } => VelcError::NonFinite {
            term,
            iteration,
            value,
        },
        other => other,
    }
}

/// Trains `model` on the normal-only `data` for `cfg.iterations` steps.
pub fn train(model: VelcModel, data: &Dataset, cfg: &TrainConfig) -> Result<(VelcModel, TrainLog)> {
    train_with(model, data, cfg, |_| {})
}

/// [`train`] with a callback invoked on every log entry.
pub fn train_with(
    mut model: VelcModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<(VelcModel, TrainLog)> {
    cfg.validate()?;
    if data.n_anomalous() > 0 {
        return Err(VelcError::Contract(format!(
            "training set {} contains {} anomalous series",
            data.name,
            data.n_anomalous()
        )));
    }
    if data.length() != model.series_len() {
        return Err(VelcError::Config(format!(
            "dataset length {} does not match model length {}",
            data.length(),
            model.series_len()
        )));
    }

    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let mut adam = Adam::new(&model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut log = TrainLog::default();
    let mut acc = LossBreakdown::default();
    let mut acc_n = 0usize;
    let mut rows: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);

    for it in 0..cfg.iterations {
        rows.clear();
        for _ in 0..cfg.batch_size {
            rows.push(&data.series[batch_rng.random_range(0..data.len())]);
        }
        let x = Tensor::from_rows(&rows)?;
        let mut g = Graph::new();
        let xv = g.input(x);
        let out = model.forward(&mut g, xv, Mode::Train, &mut noise_rng)?;
        let lv = loss(&mut g, &model.config, xv, &out).map_err(|e| tag_loss_error(e, it))?;
        let b = lv.breakdown(&g);
        if let Some((term, value)) = b.first_non_finite() {
            return Err(VelcError::NonFinite {
                term,
                iteration: it,
                value,
            });
        }
        let mut grads = g.backward(lv.total)?.into_param_map();
        drop(g);
        grads.clip_global_norm(cfg.clip_norm);
        adam.step(&mut model.params, &grads);

        acc.l_rec_x += b.l_rec_x;
        acc.l_kl_1 += b.l_kl_1;
        acc.l_kl_2 += b.l_kl_2;
        acc.l_lat += b.l_lat;
        acc.total += b.total;
        acc_n += 1;
        if acc_n == cfg.log_interval || it + 1 == cfg.iterations {
            let n = acc_n as f64;
            let entry = LogEntry {
                iteration: it,
                loss: LossBreakdown {
                    l_rec_x: acc.l_rec_x / n,
                    l_kl_1: acc.l_kl_1 / n,
                    l_kl_2: acc.l_kl_2 / n,
                    l_lat: acc.l_lat / n,
                    total: acc.total / n,
                },
            };
            on_log(&entry);
            log.entries.push(entry);
            acc = LossBreakdown::default();
            acc_n = 0;
        }
    }
    if !model.params.all_finite() {
        return Err(VelcError::NonFinite {
            term: "parameters",
            iteration: cfg.iterations - 1,
            value: f64::NAN,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_sines, SyntheticSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            iterations: 6,
            hidden: 4,
            z_dim: 3,
            memory_rows: 5,
            log_interval: 2,
            ..TrainConfig::ucr()
        }
    }

    fn tiny_data() -> Dataset {
        let spec = SyntheticSpec {
            size: 12,
            length: 8,
            anomalies: 0,
            ..Default::default()
        };
        synthetic_sines(&spec).unwrap()
    }

    #[test]
    fn presets() {
        let u = TrainConfig::ucr();
        assert_eq!((u.batch_size, u.learning_rate, u.iterations, u.memory_rows), (32, 0.005, 5000, 50));
        let a = TrainConfig::arrhythmia();
        assert_eq!((a.batch_size, a.learning_rate, a.iterations, a.memory_rows), (32, 0.01, 10_000, 10));
        let k = TrainConfig::kdd99();
        assert_eq!((k.batch_size, k.learning_rate, k.iterations, k.memory_rows), (50, 1e-5, 150_000, 50));
        assert_eq!(u.threshold, 0.025);
        assert!(TrainConfig::preset("nope").is_err());
    }

    #[test]
    fn key_values_round_trip() {
        let mut c = TrainConfig::kdd99();
        c.latent_target = LatentTarget::Raw;
        let mut d = TrainConfig::ucr();
        for (k, v) in c.to_key_values() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert!(d.set("bogus", "1").is_err());
        assert!(d.set("batch_size", "x").is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let m = VelcModel::new(tiny_cfg().model_config(8), 0).unwrap();
        let cfg = TrainConfig { iterations: 0, ..tiny_cfg() };
        assert!(matches!(train(m, &tiny_data(), &cfg), Err(VelcError::Config(_))));
    }

    #[test]
    fn anomalous_training_data_rejected() {
        let m = VelcModel::new(tiny_cfg().model_config(8), 0).unwrap();
        let spec = SyntheticSpec { size: 12, length: 8, anomalies: 2, ..Default::default() };
        let d = synthetic_sines(&spec).unwrap();
        assert!(matches!(train(m, &d, &tiny_cfg()), Err(VelcError::Contract(_))));
    }

    #[test]
    fn fixed_seed_gives_identical_log() {
        let cfg = tiny_cfg();
        let run = || {
            let m = VelcModel::new(cfg.model_config(8), 1).unwrap();
            train(m, &tiny_data(), &cfg).unwrap()
        };
        let (ma, la) = run();
        let (mb, lb) = run();
        assert_eq!(la.to_text(), lb.to_text());
        assert_eq!(ma.params, mb.params);
        let iters: Vec<usize> = la.entries.iter().map(|e| e.iteration).collect();
        assert_eq!(iters, vec![1, 3, 5]);
        for e in &la.entries {
            assert!(e.loss.first_non_finite().is_none());
        }
    }

    #[test]
    fn zero_learning_rate_step_is_identity() {
        let m = VelcModel::new(tiny_cfg().model_config(8), 2).unwrap();
        let mut store = m.params.clone();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&tiny_data().series[..3]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.forward(&mut g, x, Mode::Train, &mut rng).unwrap();
        let l = loss(&mut g, &m.config, x, &out).unwrap();
        let grads = g.backward(l.total).unwrap().into_param_map();
        let mut adam = Adam::new(&store, 0.0, 0.9, 0.999, 1e-8);
        adam.step(&mut store, &grads);
        assert_eq!(store, m.params);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![1.0, -1.0, 0.5]));
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let l = g.sum(w, None).unwrap();
        let grads = g.backward(l).unwrap().into_param_map();
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut store, &grads);
        for (after, before) in store.get(id).data().iter().zip([1.0, -1.0, 0.5]) {
            assert!((before - after - 0.1).abs() < 1e-8);
        }
    }

    #[test]
    fn log_text_and_means() {
        let mut log = TrainLog::default();
        for (i, t) in [(0, 4.0), (1, 2.0), (2, 1.0)] {
            log.entries.push(LogEntry {
                iteration: i,
                loss: LossBreakdown { total: t, ..Default::default() },
            });
        }
        assert_eq!(log.mean_total(0, 2), Some(3.0));
        assert_eq!(log.mean_total(5, 9), None);
        let text = log.to_text();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with(TrainLog::HEADER));
    }
}
