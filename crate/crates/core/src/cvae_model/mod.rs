//! Conditional variational registration network.
//!
//! The encoder maps a `(fixed, moving)` pair to a diagonal Gaussian over a
//! small latent code. The decoder turns a code into a stationary velocity
//! field, conditioned on the moving image at every scale; a fixed Gaussian
//! layer smooths the velocity and scaling and squaring turns it into a
//! displacement.
//!
//! ```
//! use probreg::cvae_model::{register, ModelConfig, ModelParams, RegistrationMode};
//! use probreg::grid_field::{Grid, ScalarImage};
//! use rand::SeedableRng;
//!
//! let cfg = ModelConfig { dims: vec![16, 16], ..ModelConfig::default() };
//! let params = ModelParams::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
//! let grid = Grid::unit(&[16, 16]).unwrap();
//! let m = ScalarImage::from_fn(grid.clone(), |c| (c[0] * c[1]) as f64);
//! let f = ScalarImage::from_fn(grid, |c| (c[0] + c[1]) as f64);
//! let out = register(&m, &f, &params, &RegistrationMode::Deterministic).unwrap();
//! assert_eq!(out.velocity.grid().dims(), &[16, 16]);
//! assert_eq!(out.latent.z.len(), 16);
//! ```

mod params;

pub use params::{layout, ModelParams};

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Tensor, Var};
use crate::error::{invalid, shape, Error, Result};
use crate::grid_field::{
    exponentiate, gaussian_kernel, negative_jacobian_fraction, FieldKind, Grid, ScalarImage, Transform, VectorField,
    DEFAULT_SCALING_STEPS,
};
use crate::similarity::{field_stats, lcc_aligned, rmse, LccConfig};
use params::slot;

/// Architecture and loss hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input grid extent; every axis must be a multiple of 8.
    pub dims: Vec<usize>,
    pub latent_dim: usize,
    /// Weight of the similarity term.
    pub lambda: f64,
    pub sigma_s: f64,
    pub smoothing_kernel: usize,
    pub scaling_steps: u32,
    pub lcc: LccConfig,
    pub encoder_widths: [usize; 4],
    /// Three deconvolution widths followed by the width of the two
    /// full-resolution convolutions.
    pub decoder_widths: [usize; 4],
    pub weight_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: vec![64, 64],
            latent_dim: 16,
            lambda: 5000.0,
            sigma_s: 3.0,
            smoothing_kernel: 15,
            scaling_steps: DEFAULT_SCALING_STEPS,
            lcc: LccConfig::default(),
            encoder_widths: [16, 32, 32, 4],
            decoder_widths: [32, 32, 16, 16],
            weight_decay: 1e-4,
        }
    }
}

const ENCODER_STRIDES: [usize; 4] = [2, 2, 2, 1];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dims.len()) || self.dims.iter().any(|&n| n < 8 || n % 8 != 0) {
            return Err(invalid(
                "dims",
                format!("{:?}: need 2 or 3 axes, each a multiple of 8", self.dims),
            ));
        }
        if self.latent_dim == 0 {
            return Err(invalid("latent_dim", "must be at least 1"));
        }
        if !(self.lambda > 0.0) {
            return Err(invalid("lambda", "must be positive"));
        }
        if !(self.sigma_s > 0.0) || self.smoothing_kernel.is_multiple_of(2) {
            return Err(invalid("sigma_s", "smoothing needs sigma > 0 and an odd kernel size"));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return Err(invalid("encoder_widths", "channel widths must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        self.lcc.validate()
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::unit(&self.dims)
    }

    /// Spatial extent after the encoder's strided convolutions.
    pub fn coarse_dims(&self) -> Vec<usize> {
        let factor: usize = ENCODER_STRIDES.iter().product();
        self.dims.iter().map(|n| n.div_ceil(factor)).collect()
    }

    fn smoothing(&self) -> Result<Rc<Vec<f64>>> {
        Ok(Rc::new(gaussian_kernel(self.sigma_s, self.smoothing_kernel)?))
    }
}

/// Posterior statistics and the code actually decoded.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RegistrationMode {
    /// Decode the posterior mean.
    Deterministic,
    /// Decode `mu + exp(logvar / 2) * noise`.
    Stochastic { noise: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationMetrics {
    /// Only available when a fixed image was given.
    pub rmse: Option<f64>,
    pub lcc: Option<f64>,
    pub mean_magnitude: f64,
    pub mean_gradient: f64,
    pub neg_jac_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    /// Smoothed velocity.
    pub velocity: VectorField,
    pub phi: Transform,
    /// Normalized moving image resampled by `phi`.
    pub warped: ScalarImage,
    pub latent: LatentCode,
    pub metrics: RegistrationMetrics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// `reconstruction + kl`.
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    /// `0.5 * weight_decay * |theta|^2`, not part of `total`.
    pub weight_penalty: f64,
}

fn check_image(cfg: &ModelConfig, img: &ScalarImage) -> Result<()> {
    if img.grid().dims() != cfg.dims.as_slice() {
        return Err(Error::GridMismatch {
            left: img.grid().dims().to_vec(),
            right: cfg.dims.clone(),
        });
    }
    Ok(())
}

fn image_tensor(img: &ScalarImage) -> Tensor {
    let mut s = vec![1];
    s.extend_from_slice(img.grid().dims());
    Tensor::new(s, img.normalized().into_values()).expect("normalized image is finite")
}

struct Net<'a> {
    cfg: &'a ModelConfig,
    p: &'a [Var],
}

impl Net<'_> {
    fn encode(&self, g: &mut Graph, f: Var, m: Var) -> Result<(Var, Var)> {
        let mut h = g.concat(f, m)?;
        for (i, &stride) in ENCODER_STRIDES.iter().enumerate() {
            let s = slot::ENC_CONV[i];
            h = g.conv(h, self.p[s], self.p[s + 1], stride)?;
            h = g.activation(h, Activation::leaky());
        }
        let mu = g.dense(h, self.p[slot::MU], self.p[slot::MU + 1])?;
        let logvar = g.dense(h, self.p[slot::LOGVAR], self.p[slot::LOGVAR + 1])?;
        Ok((mu, logvar))
    }

    fn decode(&self, g: &mut Graph, z: Var, m: Var, kernel: Rc<Vec<f64>>) -> Result<Var> {
        let mut pyramid = vec![m];
        for _ in 0..3 {
            let last = *pyramid.last().unwrap();
            let down = g.downsample(last, 2)?;
            pyramid.push(down);
        }
        let h = g.dense(z, self.p[slot::DEC_DENSE], self.p[slot::DEC_DENSE + 1])?;
        let h = g.activation(h, Activation::leaky());
        let mut coarse = vec![self.cfg.encoder_widths[3]];
        coarse.extend(self.cfg.coarse_dims());
        let mut h = g.reshape(h, &coarse)?;
        for (i, &s) in slot::DECONV.iter().enumerate() {
            h = g.concat(h, pyramid[3 - i])?;
            h = g.deconv(h, self.p[s], self.p[s + 1], 2)?;
            h = g.activation(h, Activation::leaky());
        }
        h = g.concat(h, pyramid[0])?;
        for &s in &slot::DEC_CONV {
            h = g.conv(h, self.p[s], self.p[s + 1], 1)?;
            h = g.activation(h, Activation::leaky());
        }
        let v = g.conv(h, self.p[slot::HEAD], self.p[slot::HEAD + 1], 1)?;
        let v = g.activation(v, Activation::Identity);
        Ok(g.smooth(v, kernel))
    }

    /// Symmetric local cross-correlation of the half-way warped pair.
    fn lcc(&self, g: &mut Graph, f: Var, m: Var, v: Var) -> Result<Var> {
        let cfg = &self.cfg.lcc;
        let kernel = Rc::new(gaussian_kernel(cfg.sigma_g, cfg.kernel_size)?);
        let n = self.cfg.scaling_steps;
        let back = g.scale(v, -0.5);
        let back = g.exponentiate(back, n)?;
        let fwd = g.scale(v, 0.5);
        let fwd = g.exponentiate(fwd, n)?;
        let fw = g.warp(f, back)?;
        let mw = g.warp(m, fwd)?;
        let fm = g.mul(fw, mw)?;
        let ff = g.mul(fw, fw)?;
        let mm = g.mul(mw, mw)?;
        let fm = g.smooth(fm, kernel.clone());
        let ff = g.smooth(ff, kernel.clone());
        let mm = g.smooth(mm, kernel);
        let num = g.mul(fm, fm)?;
        let den = g.mul(ff, mm)?;
        let den = g.add_scalar(den, cfg.epsilon);
        let ratio = g.div(num, den)?;
        Ok(g.mean(ratio))
    }

    fn kl(&self, g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
        let m2 = g.mul(mu, mu)?;
        let var = g.exp(logvar);
        let t = g.add(m2, var)?;
        let t = g.sub(t, logvar)?;
        let t = g.add_scalar(t, -1.0);
        let s = g.sum(t);
        Ok(g.scale(s, 0.5))
    }
}

struct LossVars {
    total: Var,
    reconstruction: Var,
    kl: Var,
}

fn loss_graph(g: &mut Graph, p: &[Var], cfg: &ModelConfig, f: &Tensor, m: &Tensor, noise: &[f64]) -> Result<LossVars> {
    let net = Net { cfg, p };
    let fv = g.constant(f.clone());
    let mv = g.constant(m.clone());
    let (mu, logvar) = net.encode(g, fv, mv)?;
    let z = g.reparameterize(mu, logvar, noise)?;
    let v = net.decode(g, z, mv, cfg.smoothing()?)?;
    let lcc = net.lcc(g, fv, mv, v)?;
    let reconstruction = g.scale(lcc, -cfg.lambda);
    let kl = net.kl(g, mu, logvar)?;
    let total = g.add(reconstruction, kl)?;
    Ok(LossVars {
        total,
        reconstruction,
        kl,
    })
}

fn check_noise(cfg: &ModelConfig, noise: &[f64]) -> Result<()> {
    if noise.len() != cfg.latent_dim {
        return Err(shape(
            "noise",
            format!("{} values for latent size {}", noise.len(), cfg.latent_dim),
        ));
    }
    if noise.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("noise"));
    }
    Ok(())
}

fn breakdown(g: &Graph, vars: &LossVars, params: &ModelParams) -> LossBreakdown {
    let sq: f64 = params.tensors().iter().map(|t| t.dot(t)).sum();
    LossBreakdown {
        total: g.value(vars.total).data()[0],
        reconstruction: g.value(vars.reconstruction).data()[0],
        kl: g.value(vars.kl).data()[0],
        weight_penalty: 0.5 * params.config().weight_decay * sq,
    }
}

/// Two-term objective for the pair `(f, m)` with externally drawn `noise`.
pub fn loss(f: &ScalarImage, m: &ScalarImage, params: &ModelParams, noise: &[f64]) -> Result<LossBreakdown> {
    let cfg = params.config();
    check_image(cfg, f)?;
    check_image(cfg, m)?;
    check_noise(cfg, noise)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let vars = loss_graph(&mut g, &p, cfg, &image_tensor(f), &image_tensor(m), noise)?;
    Ok(breakdown(&g, &vars, params))
}

/// [`loss`] plus the gradient of `total` with respect to every parameter
/// tensor (weight decay not included).
pub fn loss_and_gradients(
    f: &ScalarImage,
    m: &ScalarImage,
    params: &ModelParams,
    noise: &[f64],
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let cfg = params.config();
    check_image(cfg, f)?;
    check_image(cfg, m)?;
    check_noise(cfg, noise)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let vars = loss_graph(&mut g, &p, cfg, &image_tensor(f), &image_tensor(m), noise)?;
    let mut grads = g.backward(vars.total)?;
    let out = p
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((breakdown(&g, &vars, params), out))
}

/// Builds the loss for a caller-owned graph, so that its gradient can be
/// checked against finite differences. `p` must come from binding the
/// tensors of a model with configuration `cfg`.
pub fn loss_node(
    g: &mut Graph,
    p: &[Var],
    cfg: &ModelConfig,
    f: &ScalarImage,
    m: &ScalarImage,
    noise: &[f64],
) -> Result<Var> {
    check_image(cfg, f)?;
    check_image(cfg, m)?;
    check_noise(cfg, noise)?;
    if p.len() != slot::COUNT {
        return Err(shape("loss_node", format!("{} parameter nodes", p.len())));
    }
    Ok(loss_graph(g, p, cfg, &image_tensor(f), &image_tensor(m), noise)?.total)
}

/// Posterior mean and log-variance for the ordered pair `(f, m)`.
pub fn encode(f: &ScalarImage, m: &ScalarImage, params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = params.config();
    check_image(cfg, f)?;
    check_image(cfg, m)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let fv = g.constant(image_tensor(f));
    let mv = g.constant(image_tensor(m));
    let (mu, logvar) = Net { cfg, p: &p }.encode(&mut g, fv, mv)?;
    Ok((g.value(mu).data().to_vec(), g.value(logvar).data().to_vec()))
}

/// Smoothed velocity decoded from `z`, conditioned on `m`.
pub fn decode(z: &[f64], m: &ScalarImage, params: &ModelParams) -> Result<VectorField> {
    let cfg = params.config();
    check_image(cfg, m)?;
    if z.len() != cfg.latent_dim {
        return Err(shape(
            "decode",
            format!("z has {} entries, latent size is {}", z.len(), cfg.latent_dim),
        ));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("z"));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let zv = g.constant(Tensor::from_vec(z.to_vec()));
    let mv = g.constant(image_tensor(m));
    let v = Net { cfg, p: &p }.decode(&mut g, zv, mv, cfg.smoothing()?)?;
    VectorField::from_channels_first(m.grid().clone(), g.value(v).data(), FieldKind::Velocity)
}

/// Exponentiates a decoded velocity, warps the normalized `m` and computes
/// the quality metrics (`f`-dependent ones only when `f` is given).
pub fn complete(
    velocity: VectorField,
    m: &ScalarImage,
    f: Option<&ScalarImage>,
    latent: LatentCode,
    params: &ModelParams,
) -> Result<RegistrationResult> {
    let cfg = params.config();
    let phi = exponentiate(&velocity, cfg.scaling_steps)?;
    let warped = m.normalized().warp(&phi)?;
    let (rmse_v, lcc_v) = match f {
        Some(f) => {
            let fixed = f.normalized();
            (
                Some(rmse(&fixed, &warped)?),
                Some(lcc_aligned(&fixed, &warped, &cfg.lcc)?),
            )
        }
        None => (None, None),
    };
    let stats = field_stats(phi.displacement());
    let metrics = RegistrationMetrics {
        rmse: rmse_v,
        lcc: lcc_v,
        mean_magnitude: stats.mean_magnitude,
        mean_gradient: stats.mean_gradient_magnitude,
        neg_jac_fraction: negative_jacobian_fraction(&phi),
    };
    Ok(RegistrationResult {
        velocity,
        phi,
        warped,
        latent,
        metrics,
    })
}

/// Registers `m` onto `f` in one forward pass.
pub fn register(
    m: &ScalarImage,
    f: &ScalarImage,
    params: &ModelParams,
    mode: &RegistrationMode,
) -> Result<RegistrationResult> {
    let (mu, logvar) = encode(f, m, params)?;
    let z = match mode {
        RegistrationMode::Deterministic => mu.clone(),
        RegistrationMode::Stochastic { noise } => {
            check_noise(params.config(), noise)?;
            mu.iter()
                .zip(&logvar)
                .zip(noise)
                .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                .collect()
        }
    };
    let velocity = decode(&z, m, params)?;
    complete(velocity, m, Some(f), LatentCode { z, mu, logvar }, params)
}

#[cfg(test)]
mod tests;
