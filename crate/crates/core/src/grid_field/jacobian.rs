use super::{ScalarImage, Transform, VectorField};

/// Per-voxel gradient `du_c/dx_a`, central differences inside and one-sided
/// at the borders. Returned as a row-major `D x D` block per voxel.
pub(crate) fn displacement_gradient(field: &VectorField) -> Vec<f64> {
    let grid = field.grid();
    let d = grid.ndim();
    let dims = grid.dims();
    let strides = grid.strides();
    let u = field.vectors();
    let mut coords = vec![0usize; d];
    let mut out = vec![0.0; grid.num_voxels() * d * d];
    for i in 0..grid.num_voxels() {
        grid.unravel(i, &mut coords);
        for a in 0..d {
            let (lo, hi, h) = if coords[a] == 0 {
                (i, i + strides[a], 1.0)
            } else if coords[a] == dims[a] - 1 {
                (i - strides[a], i, 1.0)
            } else {
                (i - strides[a], i + strides[a], 2.0)
            };
            for c in 0..d {
                out[i * d * d + c * d + a] = (u[hi * d + c] - u[lo * d + c]) / h;
            }
        }
    }
    out
}

fn det(m: &[f64], d: usize) -> f64 {
    match d {
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => unreachable!("grids are 2-D or 3-D"),
    }
}

/// Determinant of `I + grad u` at every voxel.
pub fn jacobian_map(phi: &Transform) -> ScalarImage {
    let field = phi.displacement();
    let d = field.grid().ndim();
    let mut grad = displacement_gradient(field);
    let values = grad
        .chunks_exact_mut(d * d)
        .map(|m| {
            for a in 0..d {
                m[a * d + a] += 1.0;
            }
            det(m, d)
        })
        .collect();
    ScalarImage {
        grid: field.grid().clone(),
        values,
    }
}

/// Fraction of voxels whose Jacobian determinant is negative.
pub fn negative_jacobian_fraction(phi: &Transform) -> f64 {
    let jac = jacobian_map(phi);
    let neg = jac.values().iter().filter(|&&j| j < 0.0).count();
    neg as f64 / jac.values().len() as f64
}
