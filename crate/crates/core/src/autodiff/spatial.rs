//! Channel-first warp and composition kernels with their adjoints.

use super::Tensor;
use crate::grid_field::interp::{unravel, Stencil};

fn for_each_sample(disp: &Tensor, mut f: impl FnMut(usize, &Stencil)) {
    let dims = disp.spatial();
    let d = dims.len();
    let n: usize = dims.iter().product();
    let u = disp.data();
    let mut coords = [0usize; 3];
    let mut point = [0.0; 3];
    for i in 0..n {
        unravel(dims, i, &mut coords[..d]);
        for a in 0..d {
            point[a] = coords[a] as f64 + u[a * n + i];
        }
        f(i, &Stencil::new(dims, &point[..d]));
    }
}

pub(super) fn warp_forward(image: &Tensor, disp: &Tensor) -> Tensor {
    let n: usize = image.spatial().iter().product();
    let c = image.channels();
    let src = image.data();
    let mut out = vec![0.0; image.len()];
    for_each_sample(disp, |i, st| {
        for ch in 0..c {
            out[ch * n + i] = st.apply_scalar(&src[ch * n..(ch + 1) * n]);
        }
    });
    Tensor::from_parts(image.shape().to_vec(), out)
}

pub(super) fn warp_backward(image: &Tensor, disp: &Tensor, g: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n: usize = image.spatial().iter().product();
    let d = disp.channels();
    let c = image.channels();
    let (src, gd) = (image.data(), g.data());
    let mut gi = vec![0.0; image.len()];
    let mut gu = vec![0.0; disp.len()];
    for_each_sample(disp, |i, st| {
        for ch in 0..c {
            let gv = gd[ch * n + i];
            if gv == 0.0 {
                continue;
            }
            let plane = &src[ch * n..(ch + 1) * n];
            for k in 0..st.len() {
                gi[ch * n + st.index[k]] += st.weight[k] * gv;
                for a in 0..d {
                    gu[a * n + i] += gv * st.dweight[k][a] * plane[st.index[k]];
                }
            }
        }
    });
    (gi, gu)
}

pub(super) fn compose_forward(outer: &Tensor, inner: &Tensor) -> Tensor {
    let n: usize = inner.spatial().iter().product();
    let d = inner.channels();
    let (o, u) = (outer.data(), inner.data());
    let mut out = vec![0.0; inner.len()];
    for_each_sample(inner, |i, st| {
        for a in 0..d {
            out[a * n + i] = u[a * n + i] + st.apply_scalar(&o[a * n..(a + 1) * n]);
        }
    });
    Tensor::from_parts(inner.shape().to_vec(), out)
}

pub(super) fn compose_backward(outer: &Tensor, inner: &Tensor, g: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n: usize = inner.spatial().iter().product();
    let d = inner.channels();
    let (o, gd) = (outer.data(), g.data());
    let mut go = vec![0.0; outer.len()];
    let mut gin = gd.to_vec();
    for_each_sample(inner, |i, st| {
        for a in 0..d {
            let gv = gd[a * n + i];
            let plane = &o[a * n..(a + 1) * n];
            for k in 0..st.len() {
                go[a * n + st.index[k]] += st.weight[k] * gv;
                for b in 0..d {
                    gin[b * n + i] += gv * st.dweight[k][b] * plane[st.index[k]];
                }
            }
        }
    });
    (go, gin)
}
