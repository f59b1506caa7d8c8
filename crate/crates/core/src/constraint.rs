//! Latent constraint network.
//!
//! A latent vector is compared with each row of a trainable matrix `C` by
//! cosine similarity, the similarities are normalized to unit length, entries
//! not strictly above a threshold are zeroed, and the surviving weights
//! recombine the rows of `C` into the constrained latent. Rows of `C` are
//! latent-sized "representative vectors".

use rand::Rng;

use crate::diff::{Graph, Var};
use crate::error::{Result, VelcError};
use crate::params::{ParamId, ParamStore};

/// Rows re-drawn at initialization when their norm falls below this.
const MIN_ROW_NORM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMatrix {
    /// `[rows × z_dim]`
    pub matrix: ParamId,
    pub rows: usize,
    pub z_dim: usize,
    pub threshold: f64,
}

impl ConstraintMatrix {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        z_dim: usize,
        threshold: f64,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rows == 0 || z_dim == 0 {
            return Err(VelcError::Config(
                "constraint matrix needs at least one row and column".into(),
            ));
        }
        if threshold.is_nan() || threshold < 0.0 {
            return Err(VelcError::Config(format!(
                "sparsity threshold must be non-negative, got {threshold}"
            )));
        }
        let matrix = store.insert_uniform(name, &[rows, z_dim], bound, rng);
        let t = store.get_mut(matrix);
        for row in t.data_mut().chunks_mut(z_dim) {
            while row.iter().map(|v| v * v).sum::<f64>().sqrt() < MIN_ROW_NORM {
                for v in row.iter_mut() {
                    *v = rng.random_range(-bound..=bound);
                }
            }
        }
        Ok(ConstraintMatrix {
            matrix,
            rows,
            z_dim,
            threshold,
        })
    }
}

/// Addressing weights for a batch, each `[batch × rows]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressWeights {
    /// Cosine similarities.
    pub raw: Var,
    /// Unit-normalized similarities.
    pub w: Var,
    /// After the sparsity gate.
    pub w_hat: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Constrained {
    pub weights: AddressWeights,
    /// `[batch × z_dim]`
    pub z_hat: Var,
}

fn check_nonzero_rows(g: &Graph, v: Var, op: &'static str, what: &str) -> Result<()> {
    let t = g.value(v);
    for r in 0..t.rows() {
        if t.row(r).iter().all(|&x| x == 0.0) {
            return Err(VelcError::Degenerate {
                op,
                detail: format!("{what} row {r} has zero norm"),
            });
        }
    }
    Ok(())
}

/// Cosine similarity between each latent row and each row of `C`.
pub fn address(g: &mut Graph, store: &ParamStore, z: Var, c: &ConstraintMatrix) -> Result<Var> {
    let shape = g.shape(z);
    if shape.len() != 2 || shape[1] != c.z_dim {
        return Err(VelcError::Shape {
            op: "address",
            left: shape.to_vec(),
            right: vec![c.rows, c.z_dim],
        });
    }
    let cm = g.param(store, c.matrix);
    check_nonzero_rows(g, z, "address", "latent")?;
    check_nonzero_rows(g, cm, "address", "constraint matrix")?;
    let zn = g.normalize_rows(z)?;
    let cn = g.normalize_rows(cm)?;
    let ct = g.transpose(cn)?;
    g.matmul(zn, ct)
}

/// `w / ‖w‖₂` per row.
pub fn normalize(g: &mut Graph, w: Var) -> Result<Var> {
    check_nonzero_rows(g, w, "normalize", "weight")?;
    g.normalize_rows(w)
}

/// Keeps `w[i]` when `w[i] > ths`, zero otherwise. No renormalization.
pub fn sparsify(g: &mut Graph, w: Var, ths: f64) -> Result<Var> {
    g.threshold(w, ths)
}

/// `ẑ = ŵ·C`, the weighted sum of the rows of `C`.
pub fn recombine(
    g: &mut Graph,
    store: &ParamStore,
    w_hat: Var,
    c: &ConstraintMatrix,
) -> Result<Var> {
    let shape = g.shape(w_hat);
    if shape.len() != 2 || shape[1] != c.rows {
        return Err(VelcError::Shape {
            op: "recombine",
            left: shape.to_vec(),
            right: vec![c.rows],
        });
    }
    let cm = g.param(store, c.matrix);
    g.matmul(w_hat, cm)
}

/// address → normalize → sparsify → recombine.
pub fn constrain(
    g: &mut Graph,
    store: &ParamStore,
    z: Var,
    c: &ConstraintMatrix,
) -> Result<Constrained> {
    let raw = address(g, store, z, c)?;
    let w = normalize(g, raw)?;
    let w_hat = sparsify(g, w, c.threshold)?;
    let z_hat = recombine(g, store, w_hat, c)?;
    Ok(Constrained {
        weights: AddressWeights { raw, w, w_hat },
        z_hat,
    })
}
