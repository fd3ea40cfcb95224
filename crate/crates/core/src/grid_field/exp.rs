//! Scaling and squaring of stationary velocity fields.

use super::{compose_raw, FieldKind, Transform, VectorField};
use crate::error::{invalid, Error, Result};

/// Squaring steps used when no data-driven value was precomputed.
pub const DEFAULT_SCALING_STEPS: u32 = 4;

/// Largest per-voxel displacement (in voxels) allowed after scaling.
pub const SCALING_THRESHOLD: f64 = 0.5;

/// `exp(v)` via `phi_0 = id + v / 2^n`, then `n` self-compositions.
pub fn exponentiate(v: &VectorField, n: u32) -> Result<Transform> {
    if v.vectors().iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("velocity field"));
    }
    let dims = v.grid().dims();
    let scale = (-(n as f64)).exp2();
    let mut u: Vec<f64> = v.vectors().iter().map(|c| c * scale).collect();
    for _ in 0..n {
        u = compose_raw(dims, &u, &u);
    }
    Ok(Transform::from_displacement(VectorField::new(
        v.grid().clone(),
        u,
        FieldKind::Displacement,
    )?))
}

/// Smallest `n` such that the largest sample norm times `2^-n` is at most
/// [`SCALING_THRESHOLD`] voxels.
pub fn choose_scaling_n(samples: &[VectorField]) -> Result<u32> {
    if samples.is_empty() {
        return Err(invalid("samples", "need at least one velocity field"));
    }
    let max = samples.iter().map(VectorField::max_norm).fold(0.0, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("velocity samples"));
    }
    let mut n = 0;
    while max * (-(n as f64)).exp2() > SCALING_THRESHOLD {
        n += 1;
    }
    Ok(n)
}
