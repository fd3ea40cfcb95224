//! Synthetic image pairs with known deformations.
//!
//! The moving image is a bright disk inside a dark ring on a mid-grey,
//! lightly textured background. The fixed image is the moving image
//! resampled by the exponential of one of four analytic velocity fields
//! (two contraction strengths, a rotation and a shear), all confined to a
//! Gaussian envelope around the ring centre. Labels are 0 for background,
//! [`DISK_LABEL`] for the inner disk and [`RING_LABEL`] for the ring.
//!
//! ```
//! use probreg::synth_data::{generate_dataset, DatasetConfig};
//!
//! let cfg = DatasetConfig { dims: vec![32, 32], per_class: 2, ..DatasetConfig::default() };
//! let data = generate_dataset(&cfg).unwrap();
//! assert_eq!(data.pairs.len(), 8);
//! assert_eq!(data.train().count(), 4);
//! ```

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid_field::{choose_scaling_n, exponentiate, FieldKind, Grid, Mask, ScalarImage, Transform, VectorField};

pub const DISK_LABEL: f64 = 1.0;
pub const RING_LABEL: f64 = 2.0;

/// Extent the default geometry is expressed for; other grids scale it.
const REFERENCE_EXTENT: f64 = 64.0;
const EDGE_WIDTH: f64 = 0.6;
const TEXTURE_WAVES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeformationClass {
    ContractionStrong,
    ContractionWeak,
    Rotation,
    Shear,
}

impl DeformationClass {
    pub const ALL: [DeformationClass; 4] = [
        DeformationClass::ContractionStrong,
        DeformationClass::ContractionWeak,
        DeformationClass::Rotation,
        DeformationClass::Shear,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DeformationClass::ContractionStrong => "contraction-strong",
            DeformationClass::ContractionWeak => "contraction-weak",
            DeformationClass::Rotation => "rotation",
            DeformationClass::Shear => "shear",
        }
    }
}

/// Parameter ranges of the generator. Lengths are in voxels of a 64-voxel
/// grid and scale with the smallest grid extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassRanges {
    pub contraction_strong: (f64, f64),
    pub contraction_weak: (f64, f64),
    /// Angular rate in radians at the envelope centre.
    pub rotation: (f64, f64),
    pub shear: (f64, f64),
    pub envelope_sigma: f64,
    pub inner_radius: (f64, f64),
    pub ring_width: (f64, f64),
    pub center_jitter: f64,
}

impl Default for ClassRanges {
    fn default() -> Self {
        Self {
            contraction_strong: (0.25, 0.32),
            contraction_weak: (0.08, 0.14),
            rotation: (0.15, 0.25),
            shear: (0.15, 0.25),
            envelope_sigma: 18.0,
            inner_radius: (9.0, 12.0),
            ring_width: (4.0, 6.0),
            center_jitter: 3.0,
        }
    }
}

impl ClassRanges {
    fn magnitude(&self, class: DeformationClass) -> (f64, f64) {
        match class {
            DeformationClass::ContractionStrong => self.contraction_strong,
            DeformationClass::ContractionWeak => self.contraction_weak,
            DeformationClass::Rotation => self.rotation,
            DeformationClass::Shear => self.shear,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub dims: Vec<usize>,
    pub class: DeformationClass,
    pub ranges: ClassRanges,
    /// Standard deviation of the additive Gaussian noise on the fixed image.
    pub noise_sigma: f64,
}

impl SynthSpec {
    pub fn new(dims: &[usize], class: DeformationClass) -> Self {
        Self {
            dims: dims.to_vec(),
            class,
            ranges: ClassRanges::default(),
            noise_sigma: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Wave {
    freq: [f64; 3],
    phase: f64,
    amplitude: f64,
}

/// Everything drawn at random for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairParams {
    pub center: Vec<f64>,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub envelope_sigma: f64,
    /// Contraction rate, angular rate or shear rate depending on the class.
    pub magnitude: f64,
    pub background: f64,
    pub ring: f64,
    pub disk: f64,
    texture: Vec<Wave>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub index: usize,
    pub class: DeformationClass,
    pub moving: ScalarImage,
    pub fixed: ScalarImage,
    pub velocity: VectorField,
    /// Ground truth: `fixed = moving o phi` before noise.
    pub phi: Transform,
    pub moving_labels: ScalarImage,
    pub fixed_labels: ScalarImage,
    pub params: PairParams,
}

impl SynthPair {
    pub fn moving_mask(&self, label: f64) -> Mask {
        Mask::from_labels(&self.moving_labels, label)
    }

    pub fn fixed_mask(&self, label: f64) -> Mask {
        Mask::from_labels(&self.fixed_labels, label)
    }

    pub fn is_train(&self) -> bool {
        self.index.is_multiple_of(2)
    }
}

fn scale_of(dims: &[usize]) -> f64 {
    *dims.iter().min().unwrap() as f64 / REFERENCE_EXTENT
}

pub fn draw_params(spec: &SynthSpec, rng: &mut impl Rng) -> PairParams {
    let r = &spec.ranges;
    let s = scale_of(&spec.dims);
    let mut uniform = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let jitter = r.center_jitter * s;
    let center: Vec<f64> = spec
        .dims
        .iter()
        .map(|&n| (n as f64 - 1.0) / 2.0 + uniform((-jitter, jitter)))
        .collect();
    let inner_radius = uniform(r.inner_radius) * s;
    let outer_radius = inner_radius + uniform(r.ring_width) * s;
    let magnitude = uniform(r.magnitude(spec.class));
    let background = uniform((0.45, 0.55));
    let ring = uniform((0.1, 0.25));
    let disk = uniform((0.8, 0.9));
    let texture = (0..TEXTURE_WAVES)
        .map(|_| {
            let wavelength = uniform((6.0, 16.0)) * s;
            let theta = uniform((0.0, 2.0 * PI));
            let tilt = if spec.dims.len() == 3 {
                uniform((-0.5 * PI, 0.5 * PI))
            } else {
                0.0
            };
            let k = 2.0 * PI / wavelength;
            Wave {
                freq: [
                    k * theta.cos() * tilt.cos(),
                    k * theta.sin() * tilt.cos(),
                    k * tilt.sin(),
                ],
                phase: uniform((0.0, 2.0 * PI)),
                amplitude: uniform((0.01, 0.025)),
            }
        })
        .collect();
    PairParams {
        center,
        inner_radius,
        outer_radius,
        envelope_sigma: r.envelope_sigma * s,
        magnitude,
        background,
        ring,
        disk,
        texture,
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn radius(p: &PairParams, x: &[f64]) -> f64 {
    x.iter()
        .zip(&p.center)
        .map(|(a, c)| (a - c) * (a - c))
        .sum::<f64>()
        .sqrt()
}

fn intensity(p: &PairParams, x: &[f64]) -> f64 {
    let rho = radius(p, x);
    let outer = sigmoid((p.outer_radius - rho) / EDGE_WIDTH);
    let inner = sigmoid((p.inner_radius - rho) / EDGE_WIDTH);
    let base = p.background * (1.0 - outer) + p.ring * (outer - inner) + p.disk * inner;
    let texture: f64 = p
        .texture
        .iter()
        .map(|w| {
            let arg: f64 = x.iter().zip(&w.freq).map(|(a, k)| a * k).sum();
            w.amplitude * (arg + w.phase).sin()
        })
        .sum();
    (base + texture).clamp(0.0, 1.0)
}

fn label(p: &PairParams, x: &[f64]) -> f64 {
    let rho = radius(p, x);
    if rho < p.inner_radius {
        DISK_LABEL
    } else if rho < p.outer_radius {
        RING_LABEL
    } else {
        0.0
    }
}

/// Analytic class velocity at `x`, written into `out`.
pub fn class_velocity(class: DeformationClass, p: &PairParams, x: &[f64], out: &mut [f64]) {
    let rel: Vec<f64> = x.iter().zip(&p.center).map(|(a, c)| a - c).collect();
    let rho2: f64 = rel.iter().map(|r| r * r).sum();
    let w = (-rho2 / (2.0 * p.envelope_sigma * p.envelope_sigma)).exp();
    out.fill(0.0);
    match class {
        DeformationClass::ContractionStrong | DeformationClass::ContractionWeak => {
            // Outward sampling, so the structures shrink in the fixed image.
            for (o, r) in out.iter_mut().zip(&rel) {
                *o = p.magnitude * r * w;
            }
        }
        DeformationClass::Rotation => {
            out[0] = -p.magnitude * rel[1] * w;
            out[1] = p.magnitude * rel[0] * w;
        }
        DeformationClass::Shear => {
            out[0] = p.magnitude * rel[1] * w;
        }
    }
}

/// Renders a pair from fixed parameters; `rng` only drives the noise.
pub fn render(spec: &SynthSpec, p: &PairParams, index: usize, rng: &mut impl Rng) -> Result<SynthPair> {
    if !(spec.noise_sigma >= 0.0) {
        return Err(invalid("noise_sigma", "must be non-negative"));
    }
    let grid = Grid::unit(&spec.dims)?;
    let d = grid.ndim();
    let mut x = vec![0.0; d];
    let mut to_f64 = |c: &[usize]| -> Vec<f64> {
        for (xa, &ca) in x.iter_mut().zip(c) {
            *xa = ca as f64;
        }
        x.clone()
    };
    let moving = ScalarImage::from_fn(grid.clone(), |c| intensity(p, &to_f64(c)));
    let moving_labels = ScalarImage::from_fn(grid.clone(), |c| label(p, &to_f64(c)));
    let velocity = VectorField::from_fn(grid.clone(), FieldKind::Velocity, |c, out| {
        class_velocity(spec.class, p, &to_f64(c), out)
    });
    let steps = choose_scaling_n(std::slice::from_ref(&velocity))?.max(4);
    let phi = exponentiate(&velocity, steps)?;
    let mut fixed = moving.warp(&phi)?;
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| invalid("noise_sigma", e.to_string()))?;
        for v in fixed.values_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    let mut mapped = vec![0.0; d];
    let mut coords = vec![0usize; d];
    let fixed_labels = ScalarImage::from_fn(grid.clone(), |c| {
        coords.copy_from_slice(c);
        phi.apply(&coords, &mut mapped);
        label(p, &mapped)
    });
    Ok(SynthPair {
        index,
        class: spec.class,
        moving,
        fixed,
        velocity,
        phi,
        moving_labels,
        fixed_labels,
        params: p.clone(),
    })
}

pub fn generate_pair(spec: &SynthSpec, index: usize, rng: &mut impl Rng) -> Result<SynthPair> {
    Grid::unit(&spec.dims)?;
    let p = draw_params(spec, rng);
    render(spec, &p, index, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub dims: Vec<usize>,
    pub per_class: usize,
    pub noise_sigma: f64,
    pub ranges: ClassRanges,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            dims: vec![64, 64],
            per_class: 50,
            noise_sigma: 0.02,
            ranges: ClassRanges::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Class-major order; even indices form the training split.
    pub pairs: Vec<SynthPair>,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &SynthPair> {
        self.pairs.iter().filter(|p| p.is_train())
    }

    pub fn test(&self) -> impl Iterator<Item = &SynthPair> {
        self.pairs.iter().filter(|p| !p.is_train())
    }
}

/// Random stream for pair `index`, independent of every other pair.
pub fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let mut pairs = Vec::with_capacity(cfg.per_class * DeformationClass::ALL.len());
    for class in DeformationClass::ALL {
        let spec = SynthSpec {
            dims: cfg.dims.clone(),
            class,
            ranges: cfg.ranges.clone(),
            noise_sigma: cfg.noise_sigma,
        };
        for _ in 0..cfg.per_class {
            let index = pairs.len();
            pairs.push(generate_pair(&spec, index, &mut pair_rng(cfg.seed, index))?);
        }
    }
    Ok(Dataset { pairs })
}
