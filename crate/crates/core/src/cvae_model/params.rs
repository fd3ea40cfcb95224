use rand::Rng;

use super::ModelConfig;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{shape, Error, Result};

/// Index of each layer's weight tensor in [`ModelParams::tensors`]; the
/// bias follows immediately.
pub(super) mod slot {
    pub const ENC_CONV: [usize; 4] = [0, 2, 4, 6];
    pub const MU: usize = 8;
    pub const LOGVAR: usize = 10;
    pub const DEC_DENSE: usize = 12;
    pub const DECONV: [usize; 3] = [14, 16, 18];
    pub const DEC_CONV: [usize; 2] = [20, 22];
    pub const HEAD: usize = 24;
    pub const COUNT: usize = 26;
    /// First decoder tensor; everything before it belongs to the encoder.
    pub const DECODER_START: usize = DEC_DENSE;
}

pub(super) const KERNEL: usize = 3;

/// Names and shapes of every trainable tensor, in storage order.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dims.len();
    let k = vec![KERNEL; d];
    let coarse: usize = cfg.coarse_dims().iter().product();
    let conv = |cout: usize, cin: usize| {
        let mut s = vec![cout, cin];
        s.extend(&k);
        s
    };
    let e = &cfg.encoder_widths;
    let w = &cfg.decoder_widths;
    let flat = e[3] * coarse;
    let mut out = Vec::with_capacity(slot::COUNT);
    let mut push = |name: String, wshape: Vec<usize>, bias: usize| {
        out.push((format!("{name}.weight"), wshape));
        out.push((format!("{name}.bias"), vec![bias]));
    };
    let mut cin = 2;
    for (i, &c) in e.iter().enumerate() {
        push(format!("encoder.conv{i}"), conv(c, cin), c);
        cin = c;
    }
    push("encoder.mu".into(), vec![cfg.latent_dim, flat], cfg.latent_dim);
    push("encoder.logvar".into(), vec![cfg.latent_dim, flat], cfg.latent_dim);
    push("decoder.dense".into(), vec![flat, cfg.latent_dim], flat);
    // Every decoder stage sees its feature maps plus one conditioning channel.
    let mut cin = e[3] + 1;
    for (i, &c) in w[..3].iter().enumerate() {
        push(format!("decoder.deconv{i}"), conv(cin, c), c);
        cin = c + 1;
    }
    push("decoder.conv0".into(), conv(w[3], cin), w[3]);
    push("decoder.conv1".into(), conv(w[3], w[3]), w[3]);
    push("decoder.velocity".into(), conv(d, w[3]), d);
    out
}

/// All trainable tensors of the encoder and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, s) in layout(config) {
            let t = if s.len() == 1 {
                Tensor::zeros(&s)
            } else {
                let (fan_in, fan_out) = fans(&name, &s);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n = s.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(s, data)?
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking them against the
    /// layout implied by `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(config);
        if named.len() != expected.len() {
            return Err(shape(
                "ModelParams",
                format!("expected {} tensors, found {}", expected.len(), named.len()),
            ));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, t), (ename, eshape)) in named.into_iter().zip(expected) {
            if name != ename || t.shape() != eshape.as_slice() {
                return Err(shape(
                    "ModelParams",
                    format!("{name} {:?} where {ename} {eshape:?} was expected", t.shape()),
                ));
            }
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("model parameters"));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Indices of the decoder tensors within [`ModelParams::tensors`].
    pub fn decoder_tensors(&self) -> std::ops::Range<usize> {
        slot::DECODER_START..slot::COUNT
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    pub(super) fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }
}

fn fans(name: &str, s: &[usize]) -> (usize, usize) {
    let receptive: usize = s[2..].iter().product();
    if name.contains("deconv") {
        (s[0] * receptive, s[1] * receptive)
    } else {
        (s[1] * receptive, s[0] * receptive)
    }
}
