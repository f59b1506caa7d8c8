//! The full VELC network: encoder → constraint → decoder → re-encoder →
//! constraint, and its four-term training loss.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constraint::{constrain, ConstraintMatrix};
use crate::diff::{Graph, Var};
use crate::error::{Result, VelcError};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vae::{
    decode, encode, kl_per_sample, reencode, reparameterize, Decoder, GaussianEncoder,
    GaussianVars, Reconstruction,
};

/// Which latent pair the latent-consistency loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentTarget {
    /// Constrained vectors on both paths (`z̃` vs `re_z̃`).
    Constrained,
    /// Raw samples (`z` vs `re_z`).
    Raw,
}

impl fmt::Display for LatentTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentTarget::Constrained => "constrained",
            LatentTarget::Raw => "raw",
        })
    }
}

impl FromStr for LatentTarget {
    type Err = VelcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constrained" => Ok(LatentTarget::Constrained),
            "raw" => Ok(LatentTarget::Raw),
            other => Err(VelcError::Config(format!("unknown latent target {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub series_len: usize,
    pub hidden: usize,
    pub z_dim: usize,
    /// Rows of each constraint matrix.
    pub memory_rows: usize,
    /// Sparsity threshold of the constraint network.
    pub threshold: f64,
    /// Constrain the re-encoder latent with a second matrix.
    pub reencoder_constraint: bool,
    pub latent_target: LatentTarget,
    /// Use squared Euclidean norms in the reconstruction and latent losses.
    pub squared_norms: bool,
}

impl ModelConfig {
    pub fn new(series_len: usize) -> Self {
        ModelConfig {
            series_len,
            hidden: 64,
            z_dim: 20,
            memory_rows: 50,
            threshold: 0.025,
            reencoder_constraint: true,
            latent_target: LatentTarget::Constrained,
            squared_norms: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("series_len", self.series_len),
            ("hidden", self.hidden),
            ("z_dim", self.z_dim),
            ("memory_rows", self.memory_rows),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(VelcError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(VelcError::Config(format!(
                "threshold must be finite and non-negative, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Reparameterized sampling of both latents.
    Train,
    /// Deterministic means in place of samples.
    Eval,
}

/// Parameters and structure of a VELC model.
#[derive(Debug, Clone, PartialEq)]
pub struct VelcModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: GaussianEncoder,
    pub decoder: Decoder,
    pub reencoder: GaussianEncoder,
    pub c1: ConstraintMatrix,
    pub c2: Option<ConstraintMatrix>,
}

/// Intermediate nodes of one forward pass, all batched.
#[derive(Debug, Clone)]
pub struct VelcOutput {
    pub x_recon: Reconstruction,
    pub g_enc: GaussianVars,
    pub z: Var,
    pub z_tilde: Var,
    pub g_re: GaussianVars,
    pub re_z: Var,
    pub re_z_tilde: Var,
}

impl VelcModel {
    /// Builds a freshly initialized model; the same seed gives identical
    /// parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (h, zd, t) = (config.hidden, config.z_dim, config.series_len);
        let encoder = GaussianEncoder::new(&mut params, "encoder", h, zd, t, &mut rng);
        let decoder = Decoder::new(&mut params, "decoder", h, zd, &mut rng);
        let reencoder = GaussianEncoder::new(&mut params, "reencoder", h, zd, t, &mut rng);
        let bound = 1.0 / (h as f64).sqrt();
        let c1 = ConstraintMatrix::new(
            &mut params,
            "c1",
            config.memory_rows,
            zd,
            config.threshold,
            bound,
            &mut rng,
        )?;
        let c2 = if config.reencoder_constraint {
            Some(ConstraintMatrix::new(
                &mut params,
                "c2",
                config.memory_rows,
                zd,
                config.threshold,
                bound,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(VelcModel {
            config,
            params,
            encoder,
            decoder,
            reencoder,
            c1,
            c2,
        })
    }

    pub fn series_len(&self) -> usize {
        self.config.series_len
    }

    /// Full forward pass over a `[batch × T]` series node. `rng` is only
    /// drawn from in [`Mode::Train`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<VelcOutput> {
        self.forward_with(g, &self.params, x, mode, rng)
    }

    /// Forward pass reading parameter values from `store` instead of
    /// `self.params` (used by gradient checks).
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<VelcOutput> {
        let g_enc = encode(g, store, &self.encoder, x)?;
        let z = match mode {
            Mode::Train => reparameterize(g, g_enc, rng)?.z,
            Mode::Eval => g_enc.mu,
        };
        let z_tilde = constrain(g, store, z, &self.c1)?.z_hat;
        let x_recon = decode(g, store, &self.decoder, z_tilde, self.config.series_len)?;
        let g_re = reencode(g, store, &self.reencoder, &x_recon)?;
        let re_z = match mode {
            Mode::Train => reparameterize(g, g_re, rng)?.z,
            Mode::Eval => g_re.mu,
        };
        let re_z_tilde = match &self.c2 {
            Some(c2) => constrain(g, store, re_z, c2)?.z_hat,
            None => re_z,
        };
        Ok(VelcOutput {
            x_recon,
            g_enc,
            z,
            z_tilde,
            g_re,
            re_z,
            re_z_tilde,
        })
    }

    /// Deterministic evaluation of a batch of series given as rows.
    pub fn forward_eval(&self, g: &mut Graph, x: &Tensor) -> Result<(Var, VelcOutput)> {
        let xv = g.input(x.clone());
        // Never drawn from in eval mode.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(g, xv, Mode::Eval, &mut unused)?;
        Ok((xv, out))
    }
}

/// Loss nodes, each a batch mean of the per-sample term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub rec_x: Var,
    pub kl_1: Var,
    pub kl_2: Var,
    pub lat: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_rec_x: f64,
    pub l_kl_1: f64,
    pub l_kl_2: f64,
    pub l_lat: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("l_rec_x", self.l_rec_x),
            ("l_kl_1", self.l_kl_1),
            ("l_kl_2", self.l_kl_2),
            ("l_lat", self.l_lat),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_rec_x: g.value(self.rec_x).item(),
            l_kl_1: g.value(self.kl_1).item(),
            l_kl_2: g.value(self.kl_2).item(),
            l_lat: g.value(self.lat).item(),
            total: g.value(self.total).item(),
        }
    }
}

fn per_sample_distance(g: &mut Graph, a: Var, b: Var, squared: bool) -> Result<Var> {
    let d = g.sub(a, b)?;
    if squared {
        let sq = g.square(d)?;
        g.sum(sq, Some(1))
    } else {
        g.l2_norm(d, Some(1))
    }
}

/// `L = ‖x − x′‖₂ + KL(μ,σ) + KL(μ′,σ′) + ‖z − z′‖₂`, each term averaged over
/// the batch and summed without weights.
pub fn loss(g: &mut Graph, config: &ModelConfig, x: Var, out: &VelcOutput) -> Result<LossVars> {
    let rec = per_sample_distance(g, x, out.x_recon.series, config.squared_norms)?;
    let rec_x = g.mean(rec, None)?;
    let kl1 = kl_per_sample(g, out.g_enc)?;
    let kl_1 = g.mean(kl1, None)?;
    let kl2 = kl_per_sample(g, out.g_re)?;
    let kl_2 = g.mean(kl2, None)?;
    let (za, zb) = match config.latent_target {
        LatentTarget::Constrained => (out.z_tilde, out.re_z_tilde),
        LatentTarget::Raw => (out.z, out.re_z),
    };
    let lat = per_sample_distance(g, za, zb, config.squared_norms)?;
    let lat = g.mean(lat, None)?;
    let t = g.add(rec_x, kl_1)?;
    let t = g.add(t, kl_2)?;
    let total = g.add(t, lat)?;
    Ok(LossVars {
        rec_x,
        kl_1,
        kl_2,
        lat,
        total,
    })
}
