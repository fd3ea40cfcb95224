use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid_field::{FieldKind, Grid, Mask, ScalarImage, Transform, VectorField};

/// Ranges of the random similarity transform applied to training pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Maximum shift per axis as a fraction of that axis' extent.
    pub shift_fraction: f64,
    /// Maximum in-plane rotation (first two axes).
    pub rotation_degrees: f64,
    pub scale: (f64, f64),
    /// Probability of mirroring each axis independently.
    pub mirror_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shift_fraction: 0.1,
            rotation_degrees: 15.0,
            scale: (0.9, 1.1),
            mirror_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn off() -> Self {
        Self {
            shift_fraction: 0.0,
            rotation_degrees: 0.0,
            scale: (1.0, 1.0),
            mirror_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shift_fraction >= 0.0) || !(self.rotation_degrees >= 0.0) {
            return Err(invalid(
                "augmentation",
                "shift and rotation ranges must be non-negative",
            ));
        }
        if !(self.scale.0 > 0.0 && self.scale.1 >= self.scale.0) {
            return Err(invalid("augmentation", "scale range must be positive and ordered"));
        }
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return Err(invalid("augmentation", "mirror probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Sampling map `x -> centre + A (x - centre) + shift` shared by a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    matrix: [[f64; 3]; 3],
    shift: [f64; 3],
    center: [f64; 3],
    ndim: usize,
}

fn symmetric(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

impl Augmentation {
    pub fn identity(dims: &[usize]) -> Self {
        let mut matrix = [[0.0; 3]; 3];
        for (a, row) in matrix.iter_mut().enumerate() {
            row[a] = 1.0;
        }
        let mut center = [0.0; 3];
        for (c, &n) in center.iter_mut().zip(dims) {
            *c = (n as f64 - 1.0) / 2.0;
        }
        Self {
            matrix,
            shift: [0.0; 3],
            center,
            ndim: dims.len(),
        }
    }

    /// Draws rotation, scale, shifts and mirrors in that fixed order.
    pub fn draw(cfg: &AugmentConfig, dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut aug = Self::identity(dims);
        let angle = symmetric(rng, cfg.rotation_degrees).to_radians();
        let scale = if cfg.scale.1 > cfg.scale.0 {
            rng.random_range(cfg.scale.0..=cfg.scale.1)
        } else {
            cfg.scale.0
        };
        for (a, &n) in dims.iter().enumerate() {
            aug.shift[a] = symmetric(rng, cfg.shift_fraction * n as f64);
        }
        let mut mirror = [1.0; 3];
        for m in mirror.iter_mut().take(dims.len()) {
            if rng.random::<f64>() < cfg.mirror_probability {
                *m = -1.0;
            }
        }
        let (s, c) = angle.sin_cos();
        let mut rot = [[0.0; 3]; 3];
        for (a, row) in rot.iter_mut().enumerate() {
            row[a] = 1.0;
        }
        rot[0][0] = c;
        rot[0][1] = -s;
        rot[1][0] = s;
        rot[1][1] = c;
        for a in 0..3 {
            for b in 0..3 {
                aug.matrix[a][b] = scale * rot[a][b] * mirror[b];
            }
        }
        aug
    }

    /// Where output voxel `x` samples the input.
    pub fn map_point(&self, x: &[f64], out: &mut [f64]) {
        let d = self.ndim;
        for a in 0..d {
            let mut acc = self.center[a] + self.shift[a];
            for b in 0..d {
                acc += self.matrix[a][b] * (x[b] - self.center[b]);
            }
            out[a] = acc;
        }
    }

    pub fn transform(&self, grid: &Grid) -> Transform {
        let mut x = [0.0; 3];
        let mut y = [0.0; 3];
        let d = grid.ndim();
        let field = VectorField::from_fn(grid.clone(), FieldKind::Displacement, |c, out| {
            for a in 0..d {
                x[a] = c[a] as f64;
            }
            self.map_point(&x[..d], &mut y[..d]);
            for a in 0..d {
                out[a] = y[a] - x[a];
            }
        });
        Transform::from_displacement(field)
    }
}

/// Pair after augmentation, with masks resampled by nearest neighbour.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub moving: ScalarImage,
    pub fixed: ScalarImage,
    pub masks: Vec<Mask>,
}

/// Applies one random similarity transform to both images and all masks.
pub fn augment(
    moving: &ScalarImage,
    fixed: &ScalarImage,
    masks: &[Mask],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedPair> {
    cfg.validate()?;
    let aug = Augmentation::draw(cfg, moving.grid().dims(), rng);
    apply(&aug, moving, fixed, masks)
}

pub fn apply(aug: &Augmentation, moving: &ScalarImage, fixed: &ScalarImage, masks: &[Mask]) -> Result<AugmentedPair> {
    let phi = aug.transform(moving.grid());
    Ok(AugmentedPair {
        moving: moving.warp(&phi)?,
        fixed: fixed.warp(&phi)?,
        masks: masks.iter().map(|m| m.warp_nearest(&phi)).collect::<Result<_>>()?,
    })
}
