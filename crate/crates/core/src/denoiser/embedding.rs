//! Noise-level conditioning input.
//!
//! The scalar noise level enters the network as a sinusoidal embedding of
//! `sqrt(gamma)` over log-spaced frequencies (sin half, cos half); a small
//! MLP inside the denoiser maps it to per-block scale/shift.

use crate::error::{CoreError, Result};

const FREQ_MIN: f64 = 1.0;
const FREQ_MAX: f64 = 1.0e4;

/// Embed one noise level into `dim` values.
pub fn gamma_embedding(gamma: f64, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(CoreError::InvalidArgument {
            op: "gamma_embedding",
            msg: format!("dim must be even and >= 2, got {dim}"),
        });
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(CoreError::InvalidArgument {
            op: "gamma_embedding",
            msg: format!("gamma must be in (0, 1], got {gamma}"),
        });
    }
    let half = dim / 2;
    let x = gamma.sqrt();
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = if half == 1 {
            FREQ_MIN
        } else {
            FREQ_MIN * (FREQ_MAX / FREQ_MIN).powf(k as f64 / (half - 1) as f64)
        };
        out[k] = (x * freq).sin();
        out[half + k] = (x * freq).cos();
    }
    Ok(out)
}

/// Stack embeddings for a batch of noise levels into a row-major `[N, dim]`
/// buffer.
pub fn gamma_embedding_batch(gammas: &[f64], dim: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(gammas.len() * dim);
    for &g in gammas {
        out.extend(gamma_embedding(g, dim)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_injective_on_grid() {
        let a = gamma_embedding(0.1, 16).unwrap();
        let b = gamma_embedding(0.1, 16).unwrap();
        assert_eq!(a, b);
        let c = gamma_embedding(0.9, 16).unwrap();
        let dist: f64 = a
            .iter()
            .zip(&c)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn matches_direct_formula() {
        let dim = 8;
        let gamma: f64 = 0.25;
        let emb = gamma_embedding(gamma, dim).unwrap();
        let x = gamma.sqrt();
        for k in 0..4usize {
            let freq = 1.0f64 * (1.0e4f64).powf(k as f64 / 3.0);
            assert!((emb[k] - (x * freq).sin()).abs() < 1e-12);
            assert!((emb[4 + k] - (x * freq).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gamma_embedding(0.5, 7).is_err());
        assert!(gamma_embedding(0.5, 0).is_err());
        assert!(gamma_embedding(0.0, 8).is_err());
        assert!(gamma_embedding(1.5, 8).is_err());
    }
}
