//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are
//! appended in evaluation order, so walking them backwards from the seed is
//! a valid reverse topological order. Gradients accumulate additively,
//! which handles fan-out.
//!
//! ```
//! use probreg::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let y = g.sum(sq);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod check;
pub(crate) mod conv;
mod spatial;
mod tensor;

pub use check::{check_gradient, gradient_check, relative_error, GradCheckConfig, GradCheckReport};
pub use tensor::Tensor;

use std::rc::Rc;

use crate::error::{shape, Error, Result};
use crate::grid_field::smooth::{smooth_buffer, smooth_buffer_adjoint};
use conv::ConvGeom;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// Leaky rectifier with the given negative slope.
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    pub const DEFAULT_LEAK: f64 = 0.2;

    pub fn leaky() -> Self {
        Activation::LeakyRelu(Self::DEFAULT_LEAK)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    Deconv { x: Var, w: Var, b: Var, geom: ConvGeom },
    Dense { x: Var, w: Var, b: Var },
    Act { x: Var, kind: Activation },
    Concat { a: Var, b: Var },
    Downsample { x: Var, factor: usize },
    Reshape { x: Var },
    Reparam { mu: Var, logvar: Var, noise: Vec<f64> },
    Warp { image: Var, disp: Var },
    Compose { outer: Var, inner: Var },
    Smooth { x: Var, kernel: Rc<Vec<f64>> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    Exp { x: Var },
    Sum { x: Var },
    Mean { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations and replays them backwards.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar seed with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Strided same-padded cross-correlation.
    ///
    /// `x: [cin, s...]`, `w: [cout, cin, k...]`, `b: [cout]`; output spatial
    /// extent is `ceil(s / stride)` per axis.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() < 2 || ws.len() != xs.len() + 1 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(shape("conv", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let geom = ConvGeom::same(ws[1], ws[0], &xs[1..], &ws[2..], stride)?;
        let mut out = vec![0.0; geom.cout * geom.small_len()];
        conv::forward(&geom, self.value(x).data(), self.value(w).data(), &mut out);
        add_bias(&mut out, self.value(b).data());
        let mut shape = vec![geom.cout];
        shape.extend_from_slice(&geom.small[3 - (xs.len() - 1)..]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    /// Transposed convolution: the adjoint of [`Graph::conv`] plus a bias.
    ///
    /// `x: [cin, s...]`, `w: [cin, cout, k...]`, `b: [cout]`; output
    /// spatial extent is `s * stride`.
    pub fn deconv(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() < 2 || ws.len() != xs.len() + 1 || ws[0] != xs[0] || bs != [ws[1]] {
            return Err(shape("deconv", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let large: Vec<usize> = xs[1..].iter().map(|n| n * stride).collect();
        // As a convolution this maps `cout` large channels onto `cin` small ones.
        let geom = ConvGeom::same(ws[1], ws[0], &large, &ws[2..], stride)?;
        let mut out = vec![0.0; geom.cin * geom.large_len()];
        conv::backward_input(&geom, self.value(x).data(), self.value(w).data(), &mut out);
        add_bias(&mut out, self.value(b).data());
        let mut shape = vec![geom.cin];
        shape.extend_from_slice(&large);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Deconv { x, w, b, geom }, &[x, w, b]))
    }

    /// Affine map of the flattened input: `w: [out, n]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = self.value(x).len();
        let (ws, bs) = (self.value(w).shape(), self.value(b).shape());
        if ws.len() != 2 || ws[1] != n || bs != [ws[0]] {
            return Err(shape("dense", format!("input {n}, w {ws:?}, b {bs:?}")));
        }
        let rows = ws[0];
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out: Vec<f64> = (0..rows)
            .map(|r| bv[r] + wv[r * n..(r + 1) * n].iter().zip(xv).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Ok(self.push(Tensor::from_vec(out), Op::Dense { x, w, b }, &[x, w, b]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let data = match kind {
            Activation::Identity => self.value(x).data().to_vec(),
            Activation::LeakyRelu(slope) => self
                .value(x)
                .data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { slope * v })
                .collect(),
        };
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Act { x, kind }, &[x])
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(shape("concat", format!("{sa:?} vs {sb:?}")));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { a, b }, &[a, b]))
    }

    /// Average pooling with window and stride `factor` on every spatial axis.
    pub fn downsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if factor == 0 || xs.len() < 2 || xs[1..].iter().any(|n| n % factor != 0) {
            return Err(shape("downsample", format!("{xs:?} by {factor}")));
        }
        let (shape, data) = pool_forward(self.value(x), factor);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Downsample { x, factor }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// `z = mu + exp(logvar / 2) * noise`; `noise` is held constant.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, noise: &[f64]) -> Result<Var> {
        same_shape("reparameterize", self.value(mu), self.value(logvar))?;
        if noise.len() != self.value(mu).len() {
            return Err(shape("reparameterize", "noise length differs from mu"));
        }
        let data: Vec<f64> = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(logvar).data())
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let shape = self.value(mu).shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Reparam {
                mu,
                logvar,
                noise: noise.to_vec(),
            },
            &[mu, logvar],
        ))
    }

    /// Spatial transformer: samples `image: [c, s...]` at `x + disp(x)` with
    /// `disp: [D, s...]` in voxels.
    pub fn warp(&mut self, image: Var, disp: Var) -> Result<Var> {
        let (is, ds) = (self.value(image).shape(), self.value(disp).shape());
        check_field("warp", is, ds)?;
        let out = spatial::warp_forward(self.value(image), self.value(disp));
        Ok(self.push(out, Op::Warp { image, disp }, &[image, disp]))
    }

    /// Displacement of `outer o inner`, both `[D, s...]`.
    pub fn compose(&mut self, outer: Var, inner: Var) -> Result<Var> {
        let (os, is) = (self.value(outer).shape(), self.value(inner).shape());
        if os != is {
            return Err(shape("compose", format!("{os:?} vs {is:?}")));
        }
        check_field("compose", os, is)?;
        let out = spatial::compose_forward(self.value(outer), self.value(inner));
        Ok(self.push(out, Op::Compose { outer, inner }, &[outer, inner]))
    }

    /// Scaling and squaring inside the graph.
    pub fn exponentiate(&mut self, velocity: Var, steps: u32) -> Result<Var> {
        let mut u = self.scale(velocity, (-(steps as f64)).exp2());
        for _ in 0..steps {
            u = self.compose(u, u)?;
        }
        Ok(u)
    }

    /// Fixed separable smoothing of each channel with edge replication.
    pub fn smooth(&mut self, x: Var, kernel: Rc<Vec<f64>>) -> Var {
        let t = self.value(x);
        let spatial = t.spatial().to_vec();
        let n: usize = spatial.iter().product();
        let mut data = Vec::with_capacity(t.len());
        for c in 0..t.channels() {
            data.extend(smooth_buffer(&t.data()[c * n..(c + 1) * n], &spatial, 1, &kernel));
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Smooth { x, kernel }, &[x])
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(op_name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), op, &[a, b]))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Back-propagates from the scalar `seed`.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        if self.value(seed).len() != 1 {
            return Err(shape("backward", "seed must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(Tensor::from_parts(self.value(seed).shape().to_vec(), vec![1.0]));
        for i in (0..=seed.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut acc = |v: Var, data: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.data_mut().iter_mut().zip(&data).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(Tensor::from_parts(self.value(v).shape().to_vec(), data)),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                if self.wants(*x) {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    conv::backward_input(geom, gd, self.value(*w).data(), &mut gx);
                    acc(*x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; self.value(*w).len()];
                    conv::backward_weight(geom, self.value(*x).data(), gd, &mut gw);
                    acc(*w, gw);
                }
                acc(*b, bias_grad(gd, geom.cout));
            }
            Op::Deconv { x, w, b, geom } => {
                if self.wants(*x) {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    conv::forward(geom, gd, self.value(*w).data(), &mut gx);
                    acc(*x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; self.value(*w).len()];
                    conv::backward_weight(geom, gd, self.value(*x).data(), &mut gw);
                    acc(*w, gw);
                }
                acc(*b, bias_grad(gd, geom.cin));
            }
            Op::Dense { x, w, b } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let n = xv.len();
                if self.wants(*x) {
                    let mut gx = vec![0.0; n];
                    for (r, &gr) in gd.iter().enumerate() {
                        for (gxi, wi) in gx.iter_mut().zip(&wv[r * n..(r + 1) * n]) {
                            *gxi += gr * wi;
                        }
                    }
                    acc(*x, gx);
                }
                if self.wants(*w) {
                    let gw = gd.iter().flat_map(|&gr| xv.iter().map(move |&xi| gr * xi)).collect();
                    acc(*w, gw);
                }
                acc(*b, gd.to_vec());
            }
            Op::Act { x, kind } => {
                let gx = match kind {
                    Activation::Identity => gd.to_vec(),
                    Activation::LeakyRelu(slope) => self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv })
                        .collect(),
                };
                acc(*x, gx);
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).len();
                acc(*a, gd[..na].to_vec());
                acc(*b, gd[na..].to_vec());
            }
            Op::Downsample { x, factor } => {
                acc(*x, pool_backward(self.value(*x), g, *factor));
            }
            Op::Reshape { x } => acc(*x, gd.to_vec()),
            Op::Reparam { mu, logvar, noise } => {
                acc(*mu, gd.to_vec());
                let glv = self
                    .value(*logvar)
                    .data()
                    .iter()
                    .zip(noise)
                    .zip(gd)
                    .map(|((lv, e), gv)| gv * 0.5 * (0.5 * lv).exp() * e)
                    .collect();
                acc(*logvar, glv);
            }
            Op::Warp { image, disp } => {
                let (gi, gdisp) = spatial::warp_backward(self.value(*image), self.value(*disp), g);
                acc(*image, gi);
                acc(*disp, gdisp);
            }
            Op::Compose { outer, inner } => {
                let (go, gin) = spatial::compose_backward(self.value(*outer), self.value(*inner), g);
                acc(*outer, go);
                acc(*inner, gin);
            }
            Op::Smooth { x, kernel } => {
                let t = self.value(*x);
                let spatial = t.spatial().to_vec();
                let n: usize = spatial.iter().product();
                let mut gx = Vec::with_capacity(t.len());
                for c in 0..t.channels() {
                    gx.extend(smooth_buffer_adjoint(&gd[c * n..(c + 1) * n], &spatial, 1, kernel));
                }
                acc(*x, gx);
            }
            Op::Add { a, b } => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub { a, b } => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Div { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().zip(bv).map(|(g, y)| g / y).collect());
                acc(
                    *b,
                    gd.iter().zip(av).zip(bv).map(|((g, x), y)| -g * x / (y * y)).collect(),
                );
            }
            Op::Scale { x, factor } => acc(*x, gd.iter().map(|v| v * factor).collect()),
            Op::AddScalar { x } => acc(*x, gd.to_vec()),
            Op::Exp { x } => acc(*x, gd.iter().zip(node.value.data()).map(|(g, e)| g * e).collect()),
            Op::Sum { x } => acc(*x, vec![gd[0]; self.value(*x).len()]),
            Op::Mean { x } => {
                let n = self.value(*x).len();
                acc(*x, vec![gd[0] / n as f64; n]);
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    let per = out.len() / bias.len().max(1);
    for (chunk, &b) in out.chunks_mut(per).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(g: &[f64], channels: usize) -> Vec<f64> {
    let per = g.len() / channels;
    g.chunks(per).map(|c| c.iter().sum()).collect()
}

fn check_field(op: &'static str, image: &[usize], disp: &[usize]) -> Result<()> {
    let rank = disp.len().saturating_sub(1);
    if !(2..=3).contains(&rank) || disp[0] != rank || image.len() != disp.len() || image[1..] != disp[1..] {
        return Err(Error::Shape {
            op,
            detail: format!("image {image:?}, displacement {disp:?}"),
        });
    }
    Ok(())
}

fn pool_forward(t: &Tensor, factor: usize) -> (Vec<usize>, Vec<f64>) {
    let spatial = t.spatial();
    let small: Vec<usize> = spatial.iter().map(|n| n / factor).collect();
    let n_small: usize = small.iter().product();
    let n_large: usize = spatial.iter().product();
    let inv = 1.0 / (factor.pow(spatial.len() as u32) as f64);
    let mut out = vec![0.0; t.channels() * n_small];
    let mut coords = vec![0usize; spatial.len()];
    for c in 0..t.channels() {
        for i in 0..n_large {
            crate::grid_field::interp::unravel(spatial, i, &mut coords);
            let j = coords.iter().zip(&small).fold(0, |acc, (&x, &n)| acc * n + x / factor);
            out[c * n_small + j] += t.data()[c * n_large + i] * inv;
        }
    }
    let mut shape = vec![t.channels()];
    shape.extend(small);
    (shape, out)
}

fn pool_backward(x: &Tensor, g: &Tensor, factor: usize) -> Vec<f64> {
    let spatial = x.spatial();
    let small = g.spatial();
    let n_small: usize = small.iter().product();
    let n_large: usize = spatial.iter().product();
    let inv = 1.0 / (factor.pow(spatial.len() as u32) as f64);
    let mut out = vec![0.0; x.len()];
    let mut coords = vec![0usize; spatial.len()];
    for c in 0..x.channels() {
        for i in 0..n_large {
            crate::grid_field::interp::unravel(spatial, i, &mut coords);
            let j = coords.iter().zip(small).fold(0, |acc, (&x, &n)| acc * n + x / factor);
            out[c * n_large + i] = g.data()[c * n_small + j] * inv;
        }
    }
    out
}
