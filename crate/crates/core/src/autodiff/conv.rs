//! Strided "same" cross-correlation kernels over up to three spatial axes.
//!
//! Everything is expressed in terms of one convolution geometry mapping a
//! large grid to a small one. The transposed convolution reuses the
//! input-gradient kernel, so the two are exact adjoints.

use crate::error::{shape, Result};

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub large: [usize; 3],
    pub small: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Geometry for a convolution of a `large` spatial grid with `stride`;
    /// the output extent per axis is `ceil(n / stride)`.
    pub fn same(cin: usize, cout: usize, large: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        if large.len() != kernel.len() || !(1..=3).contains(&large.len()) {
            return Err(shape(
                "conv",
                format!("spatial rank {} vs kernel rank {}", large.len(), kernel.len()),
            ));
        }
        if stride == 0 {
            return Err(shape("conv", "stride must be >= 1"));
        }
        let off = 3 - large.len();
        let mut g = ConvGeom {
            cin,
            cout,
            large: [1; 3],
            small: [1; 3],
            kernel: [1; 3],
            stride: [1; 3],
            pad: [0; 3],
        };
        for a in 0..large.len() {
            let n = large[a];
            let k = kernel[a];
            if k == 0 || n == 0 {
                return Err(shape("conv", "empty kernel or input"));
            }
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            g.large[off + a] = n;
            g.small[off + a] = out;
            g.kernel[off + a] = k;
            g.stride[off + a] = stride;
            g.pad[off + a] = total / 2;
        }
        Ok(g)
    }

    pub fn large_len(&self) -> usize {
        self.large.iter().product()
    }

    pub fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output positions `o` along `axis` with `o*s + k - pad` inside the
    /// large grid.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (n, out, s, p) = (self.large[axis], self.small[axis], self.stride[axis], self.pad[axis]);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if n - 1 + p >= k {
            ((n - 1 + p - k) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(kernel_offset, large_offset, small_offset, count, step)` for
    /// every contiguous row of matching positions.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [_, lh, lw] = self.large;
        let [_, sh, sw] = self.small;
        let [kd, kh, kw] = self.kernel;
        for kz in 0..kd {
            let (z0, z1) = self.valid(0, kz);
            for ky in 0..kh {
                let (y0, y1) = self.valid(1, ky);
                for kx in 0..kw {
                    let (x0, x1) = self.valid(2, kx);
                    if x1 <= x0 {
                        continue;
                    }
                    let koff = (kz * kh + ky) * kw + kx;
                    for oz in z0..z1 {
                        let iz = oz * self.stride[0] + kz - self.pad[0];
                        for oy in y0..y1 {
                            let iy = oy * self.stride[1] + ky - self.pad[1];
                            let ix = x0 * self.stride[2] + kx - self.pad[2];
                            let large = (iz * lh + iy) * lw + ix;
                            let small = (oz * sh + oy) * sw + x0;
                            f(koff, large, small, x1 - x0, self.stride[2]);
                        }
                    }
                }
            }
        }
    }
}

/// `small[co] += sum_ci w[co, ci] * large[ci]` (cross-correlation).
pub(crate) fn forward(g: &ConvGeom, large: &[f64], w: &[f64], small: &mut [f64]) {
    let (ll, sl, kl) = (g.large_len(), g.small_len(), g.kernel_len());
    for co in 0..g.cout {
        let out = &mut small[co * sl..(co + 1) * sl];
        for ci in 0..g.cin {
            let inp = &large[ci * ll..(ci + 1) * ll];
            let wk = &w[(co * g.cin + ci) * kl..(co * g.cin + ci + 1) * kl];
            g.for_each_row(|k, li, si, count, step| {
                let wv = wk[k];
                let dst = &mut out[si..si + count];
                if step == 1 {
                    for (d, s) in dst.iter_mut().zip(&inp[li..li + count]) {
                        *d += wv * s;
                    }
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += wv * inp[li + j * step];
                    }
                }
            });
        }
    }
}

/// Adjoint of [`forward`] with respect to `large`.
pub(crate) fn backward_input(g: &ConvGeom, small: &[f64], w: &[f64], large: &mut [f64]) {
    let (ll, sl, kl) = (g.large_len(), g.small_len(), g.kernel_len());
    for ci in 0..g.cin {
        let out = &mut large[ci * ll..(ci + 1) * ll];
        for co in 0..g.cout {
            let gs = &small[co * sl..(co + 1) * sl];
            let wk = &w[(co * g.cin + ci) * kl..(co * g.cin + ci + 1) * kl];
            g.for_each_row(|k, li, si, count, step| {
                let wv = wk[k];
                let src = &gs[si..si + count];
                if step == 1 {
                    for (d, s) in out[li..li + count].iter_mut().zip(src) {
                        *d += wv * s;
                    }
                } else {
                    for (j, s) in src.iter().enumerate() {
                        out[li + j * step] += wv * s;
                    }
                }
            });
        }
    }
}

/// Gradient of [`forward`] with respect to the weights.
pub(crate) fn backward_weight(g: &ConvGeom, large: &[f64], small: &[f64], gw: &mut [f64]) {
    let (ll, sl, kl) = (g.large_len(), g.small_len(), g.kernel_len());
    for co in 0..g.cout {
        let gs = &small[co * sl..(co + 1) * sl];
        for ci in 0..g.cin {
            let inp = &large[ci * ll..(ci + 1) * ll];
            let gk = &mut gw[(co * g.cin + ci) * kl..(co * g.cin + ci + 1) * kl];
            g.for_each_row(|k, li, si, count, step| {
                let src = &gs[si..si + count];
                let acc: f64 = if step == 1 {
                    src.iter().zip(&inp[li..li + count]).map(|(a, b)| a * b).sum()
                } else {
                    src.iter().enumerate().map(|(j, a)| a * inp[li + j * step]).sum()
                };
                gk[k] += acc;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_shapes() {
        let g = ConvGeom::same(1, 1, &[8, 8], &[3, 3], 2).unwrap();
        assert_eq!(g.small, [1, 4, 4]);
        let g = ConvGeom::same(1, 1, &[7, 5], &[3, 3], 2).unwrap();
        assert_eq!(g.small, [1, 4, 3]);
        let g = ConvGeom::same(1, 1, &[16, 16, 8], &[3, 3, 3], 1).unwrap();
        assert_eq!(g.small, [16, 16, 8]);
        assert_eq!(g.pad, [1, 1, 1]);
    }

    #[test]
    fn one_dimensional_by_hand() {
        let g = ConvGeom::same(1, 1, &[5], &[3], 1).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let w = [1.0, 10.0, 100.0];
        let mut y = [0.0; 5];
        forward(&g, &x, &w, &mut y);
        assert_eq!(y, [210.0, 321.0, 432.0, 543.0, 54.0]);
    }
}
