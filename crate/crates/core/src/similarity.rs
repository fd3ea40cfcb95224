//! Training criteria and evaluation metrics.
//!
//! The local cross-correlation used here is the un-centred form
//!
//! ```text
//! lcc = 1/P * sum_x  <F'M'>_x^2 / (<F'^2>_x <M'^2>_x + eps)
//! ```
//!
//! where `F' = F o exp(-v/2)`, `M' = M o exp(v/2)` and `<.>` is a Gaussian
//! local mean. It lies in `[0, 1)` and grows with similarity, so the
//! reconstruction term minimised during training is `-lambda * lcc`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid_field::{
    displacement_gradient, exponentiate, gaussian_kernel, smooth::smooth_buffer, Grid, Mask, ScalarImage, VectorField,
};

/// Local-mean parameters for [`lcc`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LccConfig {
    pub sigma_g: f64,
    pub kernel_size: usize,
    pub epsilon: f64,
}

impl Default for LccConfig {
    fn default() -> Self {
        Self {
            sigma_g: 2.0,
            kernel_size: 9,
            epsilon: 1e-5,
        }
    }
}

impl LccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_g > 0.0) {
            return Err(invalid("sigma_g", "must be positive"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(invalid("kernel_size", "must be odd"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Symmetric LCC between `f` and `m` under the half-way warps `exp(-v/2)`
/// and `exp(v/2)`, each computed with `n` squaring steps.
pub fn lcc(f: &ScalarImage, m: &ScalarImage, v: &VectorField, cfg: &LccConfig, n: u32) -> Result<f64> {
    f.grid().check_same(m.grid())?;
    f.grid().check_same(v.grid())?;
    let back = exponentiate(&v.scaled(-0.5), n)?;
    let fwd = exponentiate(&v.scaled(0.5), n)?;
    lcc_aligned(&f.warp(&back)?, &m.warp(&fwd)?, cfg)
}

/// LCC between two images that are already resampled onto a common frame.
pub fn lcc_aligned(f: &ScalarImage, m: &ScalarImage, cfg: &LccConfig) -> Result<f64> {
    cfg.validate()?;
    f.grid().check_same(m.grid())?;
    let kernel = gaussian_kernel(cfg.sigma_g, cfg.kernel_size)?;
    let dims = f.grid().dims();
    let local = |g: &dyn Fn(f64, f64) -> f64| {
        let prod: Vec<f64> = f.values().iter().zip(m.values()).map(|(&a, &b)| g(a, b)).collect();
        smooth_buffer(&prod, dims, 1, &kernel)
    };
    let fm = local(&|a, b| a * b);
    let ff = local(&|a, _| a * a);
    let mm = local(&|_, b| b * b);
    let total: f64 = (0..fm.len())
        .map(|i| fm[i] * fm[i] / (ff[i] * mm[i] + cfg.epsilon))
        .sum();
    Ok(total / fm.len() as f64)
}

/// Reconstruction negative log-likelihood term, `-lambda * lcc`.
pub fn lcc_loss_term(
    f: &ScalarImage,
    m: &ScalarImage,
    v: &VectorField,
    cfg: &LccConfig,
    n: u32,
    lambda: f64,
) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(invalid("lambda", "must be positive"));
    }
    Ok(-lambda * lcc(f, m, v, cfg, n)?)
}

/// `KL(N(mu, diag exp(logvar)) || N(0, I))` in closed form.
pub fn kl_diag_gaussian(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(crate::error::shape(
            "kl_diag_gaussian",
            format!("mu has {} entries, logvar {}", mu.len(), logvar.len()),
        ));
    }
    if mu.iter().chain(logvar).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("kl inputs"));
    }
    Ok(0.5
        * mu.iter()
            .zip(logvar)
            .map(|(&m, &lv)| m * m + lv.exp() - lv - 1.0)
            .sum::<f64>())
}

/// Mean squared intensity difference.
pub fn ssd(f: &ScalarImage, m_warped: &ScalarImage) -> Result<f64> {
    f.grid().check_same(m_warped.grid())?;
    let sum: f64 = f
        .values()
        .iter()
        .zip(m_warped.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / f.values().len() as f64)
}

pub fn rmse(f: &ScalarImage, m_warped: &ScalarImage) -> Result<f64> {
    Ok(ssd(f, m_warped)?.sqrt())
}

/// `2|A n B| / (|A| + |B|)`, defined as 1 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    a.grid().check_same(b.grid())?;
    let inter = a.values().iter().zip(b.values()).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Symmetric 95th-percentile Hausdorff distance between mask boundaries in
/// physical units.
///
/// Each directed set of nearest-boundary distances is reduced by the
/// nearest-rank percentile, and the larger of the two directions is
/// returned.
pub fn hausdorff95(a: &Mask, b: &Mask) -> Result<f64> {
    a.grid().check_same(b.grid())?;
    if a.is_empty() || b.is_empty() {
        return Err(invalid("mask", "hausdorff distance needs non-empty masks"));
    }
    let grid = a.grid();
    let pa = physical_points(grid, &a.boundary());
    let pb = physical_points(grid, &b.boundary());
    Ok(directed_percentile(&pa, &pb, 0.95).max(directed_percentile(&pb, &pa, 0.95)))
}

fn physical_points(grid: &Grid, voxels: &[usize]) -> Vec<[f64; 3]> {
    let mut coords = vec![0; grid.ndim()];
    voxels
        .iter()
        .map(|&i| {
            grid.unravel(i, &mut coords);
            let mut p = [0.0; 3];
            for (a, (&c, &s)) in coords.iter().zip(grid.spacing()).enumerate() {
                p[a] = c as f64 * s;
            }
            p
        })
        .collect()
}

fn directed_percentile(from: &[[f64; 3]], to: &[[f64; 3]], q: f64) -> f64 {
    let mut dists: Vec<f64> = from
        .iter()
        .map(|p| {
            to.iter()
                .map(|r| (0..3).map(|a| (p[a] - r[a]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    dists.sort_by(f64::total_cmp);
    let rank = ((q * dists.len() as f64).ceil() as usize).clamp(1, dists.len());
    dists[rank - 1]
}

/// Mean deformation magnitude and mean gradient (Frobenius) magnitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldStats {
    pub mean_magnitude: f64,
    pub mean_gradient_magnitude: f64,
}

pub fn field_stats(u: &VectorField) -> FieldStats {
    let d = u.grid().ndim();
    let n = u.grid().num_voxels() as f64;
    let mean_magnitude = u
        .vectors()
        .chunks_exact(d)
        .map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt())
        .sum::<f64>()
        / n;
    let mean_gradient_magnitude = displacement_gradient(u)
        .chunks_exact(d * d)
        .map(|m| m.iter().map(|c| c * c).sum::<f64>().sqrt())
        .sum::<f64>()
        / n;
    FieldStats {
        mean_magnitude,
        mean_gradient_magnitude,
    }
}
