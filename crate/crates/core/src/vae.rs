//! Gaussian latent heads, reparameterized sampling, decoding and re-encoding.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{Graph, Var};
use crate::error::{Result, VelcError};
use crate::params::ParamStore;
use crate::recurrent::{bilstm_forward, bilstm_states, BiLstmParams, Linear};
use crate::tensor::Tensor;

/// Encoder heads emit `log σ²`, clamped to this range.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Diagonal Gaussian for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn standard(z_dim: usize) -> Self {
        GaussianParams {
            mu: vec![0.0; z_dim],
            log_var: vec![0.0; z_dim],
        }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    pub fn z_dim(&self) -> usize {
        self.mu.len()
    }
}

/// `½ Σ (μ² + σ² − 1 − log σ²)`, the divergence from the standard normal.
pub fn kl_divergence(g: &GaussianParams) -> f64 {
    0.5 * g
        .mu
        .iter()
        .zip(&g.log_var)
        .map(|(m, lv)| m * m + (lv.exp_m1() - lv))
        .sum::<f64>()
}

/// Batched Gaussian parameters living on a graph, each `[batch × z_dim]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_var: Var,
}

impl GaussianVars {
    /// Per-row values.
    pub fn to_params(&self, g: &Graph) -> Vec<GaussianParams> {
        let mu = g.value(self.mu);
        let lv = g.value(self.log_var);
        (0..mu.rows())
            .map(|r| GaussianParams {
                mu: mu.row(r).to_vec(),
                log_var: lv.row(r).to_vec(),
            })
            .collect()
    }
}

/// Per-sample KL term as a `[batch × 1]` node.
pub fn kl_per_sample(g: &mut Graph, gv: GaussianVars) -> Result<Var> {
    let mu2 = g.square(gv.mu)?;
    let var = g.exp(gv.log_var)?;
    let s = g.add(mu2, var)?;
    let s = g.sub(s, gv.log_var)?;
    let s = g.add_scalar(s, -1.0)?;
    let s = g.sum(s, Some(1))?;
    g.scale(s, 0.5)
}

/// A reparameterized draw `z = μ + ε⊙σ`.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z: Var,
    /// The standard-normal noise used, `[batch × z_dim]`; a constant on the tape.
    pub eps: Tensor,
}

pub fn reparameterize<R: Rng + ?Sized>(
    g: &mut Graph,
    gv: GaussianVars,
    rng: &mut R,
) -> Result<LatentSample> {
    let shape = g.shape(gv.mu).to_vec();
    let mut eps = Tensor::zeros(&shape);
    for v in eps.data_mut() {
        *v = StandardNormal.sample(rng);
    }
    let eps_node = g.input(eps.clone());
    let half = g.scale(gv.log_var, 0.5)?;
    let sigma = g.exp(half)?;
    let noise = g.mul(eps_node, sigma)?;
    let z = g.add(gv.mu, noise)?;
    Ok(LatentSample { z, eps })
}

/// Bi-LSTM over a univariate series followed by linear `μ` and `log σ²`
/// heads on the sequence summary. Used for both the encoder and the
/// re-encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEncoder {
    pub rnn: BiLstmParams,
    pub mu_head: Linear,
    pub log_var_head: Linear,
    pub series_len: usize,
    pub z_dim: usize,
}

impl GaussianEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        z_dim: usize,
        series_len: usize,
        rng: &mut R,
    ) -> Self {
        let rnn = BiLstmParams::new(store, &format!("{name}.rnn"), 1, hidden, rng);
        let mu_head = Linear::new(store, &format!("{name}.mu"), 2 * hidden, z_dim, rng);
        let log_var_head = Linear::new(store, &format!("{name}.log_var"), 2 * hidden, z_dim, rng);
        GaussianEncoder {
            rnn,
            mu_head,
            log_var_head,
            series_len,
            z_dim,
        }
    }

    /// Encodes a `[batch × T]` series.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<GaussianVars> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.series_len {
            return Err(VelcError::Shape {
                op: "encode",
                left: shape,
                right: vec![self.series_len],
            });
        }
        let steps = (0..self.series_len)
            .map(|t| g.slice_cols(x, t, t + 1))
            .collect::<Result<Vec<_>>>()?;
        self.encode_steps(g, store, &steps)
    }

    /// Encodes a series given as `T` nodes of shape `[batch × 1]`.
    pub fn encode_steps(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        steps: &[Var],
    ) -> Result<GaussianVars> {
        if steps.len() != self.series_len {
            return Err(VelcError::Shape {
                op: "encode",
                left: vec![steps.len()],
                right: vec![self.series_len],
            });
        }
        let states = bilstm_states(g, store, &self.rnn, steps)?;
        let summary = states.summary(g)?;
        let mu = self.mu_head.forward(g, store, summary)?;
        let lv = self.log_var_head.forward(g, store, summary)?;
        let log_var = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(GaussianVars { mu, log_var })
    }
}

/// Encode a series into latent Gaussian parameters.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    encoder: &GaussianEncoder,
    x: Var,
) -> Result<GaussianVars> {
    encoder.encode(g, store, x)
}

/// Re-encode a reconstruction given step by step (as produced by [`decode`]).
pub fn reencode(
    g: &mut Graph,
    store: &ParamStore,
    reencoder: &GaussianEncoder,
    recon: &Reconstruction,
) -> Result<GaussianVars> {
    reencoder.encode_steps(g, store, &recon.steps)
}

/// Bi-LSTM decoder fed the latent vector at every step, with a per-step
/// linear head producing one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub rnn: BiLstmParams,
    pub head: Linear,
    pub z_dim: usize,
}

/// Decoder output: per-step `[batch × 1]` nodes and their `[batch × T]`
/// concatenation.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub steps: Vec<Var>,
    pub series: Var,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        z_dim: usize,
        rng: &mut R,
    ) -> Self {
        let rnn = BiLstmParams::new(store, &format!("{name}.rnn"), z_dim, hidden, rng);
        let head = Linear::new(store, &format!("{name}.head"), 2 * hidden, 1, rng);
        Decoder { rnn, head, z_dim }
    }

    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_hat: Var,
        len: usize,
    ) -> Result<Reconstruction> {
        let shape = g.shape(z_hat);
        if shape.len() != 2 || shape[1] != self.z_dim {
            return Err(VelcError::Shape {
                op: "decode",
                left: shape.to_vec(),
                right: vec![self.z_dim],
            });
        }
        if len == 0 {
            return Err(VelcError::Empty("decode length".into()));
        }
        let inputs = vec![z_hat; len];
        let steps = bilstm_forward(g, store, &self.rnn, &self.head, &inputs)?;
        let series = g.concat_cols(&steps)?;
        Ok(Reconstruction { steps, series })
    }
}

pub fn decode(
    g: &mut Graph,
    store: &ParamStore,
    decoder: &Decoder,
    z_hat: Var,
    len: usize,
) -> Result<Reconstruction> {
    decoder.decode(g, store, z_hat, len)
}
