//! Separable truncated-Gaussian smoothing with edge replication.

use super::{ScalarImage, VectorField};
use crate::error::{invalid, Result};

/// Normalized discrete Gaussian of odd length `size`.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma", format!("must be positive, got {sigma}")));
    }
    if size.is_multiple_of(2) {
        return Err(invalid("kernel_size", format!("must be odd, got {size}")));
    }
    let r = (size / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    Ok(k)
}

/// Convolves along `axis` of a buffer holding `ncomp` interleaved
/// components per voxel. Out-of-range taps read the nearest edge voxel.
pub(crate) fn convolve_axis(src: &[f64], dims: &[usize], ncomp: usize, axis: usize, kernel: &[f64]) -> Vec<f64> {
    let mut dst = vec![0.0; src.len()];
    let (outer, n, inner) = axis_split(dims, axis);
    let inner = inner * ncomp;
    let r = (kernel.len() / 2) as isize;
    let last = n as isize - 1;
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..n {
            let out = &mut dst[base + i * inner..base + (i + 1) * inner];
            for (j, &w) in kernel.iter().enumerate() {
                let s = (i as isize + j as isize - r).clamp(0, last) as usize;
                let row = &src[base + s * inner..base + (s + 1) * inner];
                for (d, v) in out.iter_mut().zip(row) {
                    *d += w * v;
                }
            }
        }
    }
    dst
}

/// Adjoint of [`convolve_axis`]: scatters each output back onto its taps.
pub(crate) fn convolve_axis_adjoint(
    grad: &[f64],
    dims: &[usize],
    ncomp: usize,
    axis: usize,
    kernel: &[f64],
) -> Vec<f64> {
    let mut dst = vec![0.0; grad.len()];
    let (outer, n, inner) = axis_split(dims, axis);
    let inner = inner * ncomp;
    let r = (kernel.len() / 2) as isize;
    let last = n as isize - 1;
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..n {
            for (j, &w) in kernel.iter().enumerate() {
                let s = (i as isize + j as isize - r).clamp(0, last) as usize;
                for c in 0..inner {
                    dst[base + s * inner + c] += w * grad[base + i * inner + c];
                }
            }
        }
    }
    dst
}

fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Smooths every axis in turn.
pub(crate) fn smooth_buffer(src: &[f64], dims: &[usize], ncomp: usize, kernel: &[f64]) -> Vec<f64> {
    let mut buf = src.to_vec();
    for axis in 0..dims.len() {
        buf = convolve_axis(&buf, dims, ncomp, axis, kernel);
    }
    buf
}

pub(crate) fn smooth_buffer_adjoint(grad: &[f64], dims: &[usize], ncomp: usize, kernel: &[f64]) -> Vec<f64> {
    let mut buf = grad.to_vec();
    for axis in (0..dims.len()).rev() {
        buf = convolve_axis_adjoint(&buf, dims, ncomp, axis, kernel);
    }
    buf
}

/// Anything [`gaussian_smooth`] can act on.
pub trait Smoothable: Sized {
    fn smoothed(&self, kernel: &[f64]) -> Self;
}

impl Smoothable for ScalarImage {
    fn smoothed(&self, kernel: &[f64]) -> Self {
        ScalarImage {
            grid: self.grid.clone(),
            values: smooth_buffer(&self.values, self.grid.dims(), 1, kernel),
        }
    }
}

impl Smoothable for VectorField {
    fn smoothed(&self, kernel: &[f64]) -> Self {
        VectorField {
            grid: self.grid.clone(),
            vectors: smooth_buffer(&self.vectors, self.grid.dims(), self.grid.ndim(), kernel),
            kind: self.kind,
        }
    }
}

/// Component-wise Gaussian smoothing.
pub fn gaussian_smooth<T: Smoothable>(field: &T, sigma: f64, kernel_size: usize) -> Result<T> {
    let kernel = gaussian_kernel(sigma, kernel_size)?;
    Ok(field.smoothed(&kernel))
}

/// Convenience alias for vector fields.
pub fn gaussian_smooth_field(field: &VectorField, sigma: f64, kernel_size: usize) -> Result<VectorField> {
    gaussian_smooth(field, sigma, kernel_size)
}
