//! Analytic cost primitives: flop counts, affine step latencies, the geometric
//! acceptance utility and the verifier's memory footprint.
//!
//! Flop counts are `f64` because they only ever feed the affine latency model,
//! where values around 1e11 are multiplied by coefficients around 1e-11.
//! Memory footprints stay exact `u64` since they gate hard feasibility checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a decoder-only transformer: block count, hidden width and FFN width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub blocks: u64,
    pub hidden: u64,
    pub ffn_hidden: u64,
}

impl ModelDims {
    pub fn new(blocks: u64, hidden: u64, ffn_hidden: u64) -> Result<Self> {
        let dims = ModelDims {
            blocks,
            hidden,
            ffn_hidden,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.hidden == 0 || self.ffn_hidden == 0 {
            return Err(Error::Domain(format!(
                "model dimensions must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Affine latency coefficients: `latency = c * b * flops + beta` (ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyCoeffs {
    pub c: f64,
    pub beta: f64,
}

impl LatencyCoeffs {
    pub fn new(c: f64, beta: f64) -> Result<Self> {
        if !(c.is_finite() && beta.is_finite() && c >= 0.0 && beta >= 0.0) {
            return Err(Error::Domain(format!(
                "latency coefficients must be finite and nonnegative, got c={c}, beta={beta}"
            )));
        }
        Ok(LatencyCoeffs { c, beta })
    }

    /// Both coefficients multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        LatencyCoeffs {
            c: self.c * k,
            beta: self.beta * k,
        }
    }
}

/// Verifier memory budget: parameter bytes plus the capacity of the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub param_bytes: u64,
    pub cap_bytes: u64,
}

impl MemoryModel {
    pub fn for_model(dims: &ModelDims, cap_bytes: u64) -> Self {
        MemoryModel {
            param_bytes: param_memory(dims),
            cap_bytes,
        }
    }

    /// Total footprint of a batch of `batch_size` requests with maximum prefix `prefix`.
    pub fn batch_bytes(&self, batch_size: u64, prefix: u64, dims: &ModelDims) -> u64 {
        self.param_bytes + kv_memory(batch_size, prefix, dims)
    }

    /// Bytes by which a batch exceeds the cap, or `None` if it fits.
    pub fn overshoot(&self, batch_size: u64, prefix: u64, dims: &ModelDims) -> Option<u64> {
        let total = self.batch_bytes(batch_size, prefix, dims);
        (total > self.cap_bytes).then(|| total - self.cap_bytes)
    }

    pub fn fits(&self, batch_size: u64, prefix: u64, dims: &ModelDims) -> bool {
        self.overshoot(batch_size, prefix, dims).is_none()
    }
}

/// Flops of one drafting step at context length `prefix`.
pub fn draft_flops(prefix: u64, dims: &ModelDims) -> f64 {
    let (j, h1, h2) = (
        dims.blocks as f64,
        dims.hidden as f64,
        dims.ffn_hidden as f64,
    );
    4.0 * j * h1 * (2.0 * h1 + prefix as f64 + 1.0 + h2)
}

/// Flops of verifying `draft_len` tokens at context length `prefix`.
///
/// `draft_len == 0` returns zero; it only arises in internal encodings.
pub fn verify_flops(draft_len: u32, prefix: u64, dims: &ModelDims) -> f64 {
    let (j, h1, h2) = (
        dims.blocks as f64,
        dims.hidden as f64,
        dims.ffn_hidden as f64,
    );
    let len = draft_len as f64;
    4.0 * j * h1 * len * (2.0 * h1 + prefix as f64 + len + h2)
}

/// Latency of one forward over a batch of `batch_size` requests costing `flops` each.
pub fn step_latency(batch_size: u64, flops: f64, coeffs: &LatencyCoeffs) -> f64 {
    coeffs.c * batch_size as f64 * flops + coeffs.beta
}

/// Rejects acceptance rates outside the open unit interval.
pub fn check_accept_rate(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "acceptance rate must lie in (0, 1), got {alpha}"
        )))
    }
}

/// Expected tokens emitted per round with draft length `len`: the accepted
/// prefix plus the bonus token, `(1 - alpha^(len+1)) / (1 - alpha)`.
pub fn expected_accepted(len: u32, alpha: f64) -> Result<f64> {
    check_accept_rate(alpha)?;
    Ok(expected_accepted_unchecked(len, alpha))
}

#[inline]
pub(crate) fn expected_accepted_unchecked(len: u32, alpha: f64) -> f64 {
    (1.0 - alpha.powi(len as i32 + 1)) / (1.0 - alpha)
}

/// Sum of [`expected_accepted`] across users.
pub fn total_utility(lengths: &[u32], alphas: &[f64]) -> Result<f64> {
    if lengths.len() != alphas.len() {
        return Err(Error::Domain(format!(
            "{} lengths but {} acceptance rates",
            lengths.len(),
            alphas.len()
        )));
    }
    lengths
        .iter()
        .zip(alphas)
        .map(|(&l, &a)| expected_accepted(l, a))
        .sum()
}

/// FP16 parameter footprint of the verifier in bytes.
pub fn param_memory(dims: &ModelDims) -> u64 {
    let (h1, h2) = (dims.hidden, dims.ffn_hidden);
    dims.blocks * (8 * h1 * h1 + 4 * h1 * h2)
}

/// KV-cache bytes for `batch_size` requests padded to prefix length `prefix`.
pub fn kv_memory(batch_size: u64, prefix: u64, dims: &ModelDims) -> u64 {
    4 * dims.blocks * dims.hidden * batch_size * prefix
}
