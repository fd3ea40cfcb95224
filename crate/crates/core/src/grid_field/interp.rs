//! Multilinear interpolation stencils shared by the field routines and the
//! differentiable warp/compose nodes.

/// Corner indices, weights and weight derivatives for one sample point.
///
/// `dweight[k][a]` is the derivative of `weight[k]` with respect to the
/// sample coordinate along axis `a`. It is zero along axes where the point
/// was clamped to the border.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
    pub dweight: [[f64; 3]; 8],
    corners: usize,
}

impl Stencil {
    pub fn new(dims: &[usize], point: &[f64]) -> Self {
        let d = dims.len();
        let mut lo = [0usize; 3];
        let mut t = [0.0f64; 3];
        let mut live = [0.0f64; 3];
        let mut stride = [1usize; 3];
        for a in (0..d).rev() {
            if a + 1 < d {
                stride[a] = stride[a + 1] * dims[a + 1];
            }
            let n = dims[a];
            let max = (n - 1) as f64;
            let p = point[a];
            let (pc, inside) = if p < 0.0 {
                (0.0, 0.0)
            } else if p > max {
                (max, 0.0)
            } else {
                (p, 1.0)
            };
            let i0 = (pc.floor() as usize).min(n - 2);
            lo[a] = i0;
            t[a] = pc - i0 as f64;
            live[a] = inside;
        }

        let corners = 1usize << d;
        let mut st = Stencil {
            index: [0; 8],
            weight: [0.0; 8],
            dweight: [[0.0; 3]; 8],
            corners,
        };
        for k in 0..corners {
            let mut idx = 0;
            let mut w = 1.0;
            let mut factors = [0.0; 3];
            let mut dfactors = [0.0; 3];
            for a in 0..d {
                let upper = (k >> (d - 1 - a)) & 1 == 1;
                idx += (lo[a] + upper as usize) * stride[a];
                let (f, df) = if upper { (t[a], 1.0) } else { (1.0 - t[a], -1.0) };
                factors[a] = f;
                dfactors[a] = df * live[a];
                w *= f;
            }
            st.index[k] = idx;
            st.weight[k] = w;
            for a in 0..d {
                let mut dw = dfactors[a];
                for b in 0..d {
                    if b != a {
                        dw *= factors[b];
                    }
                }
                st.dweight[k][a] = dw;
            }
        }
        st
    }

    pub fn len(&self) -> usize {
        self.corners
    }

    pub fn apply_scalar(&self, values: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.corners {
            acc += self.weight[k] * values[self.index[k]];
        }
        acc
    }
}

pub(crate) fn unravel(dims: &[usize], mut index: usize, coords: &mut [usize]) {
    for a in (0..dims.len()).rev() {
        coords[a] = index % dims[a];
        index /= dims[a];
    }
}
