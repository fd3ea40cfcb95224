//! Dense scalar and vector fields on regular 2-D / 3-D grids.
//!
//! Values are stored axis-major (last axis fastest). Vector fields keep
//! their `D` components interleaved per voxel, and component `a` is the
//! displacement along grid axis `a`, measured in voxels. Spacing only
//! matters for physical distances such as the Hausdorff metric.
//!
//! Every resampling routine uses multilinear interpolation with the sample
//! coordinate clamped to the grid (edge replication).

mod exp;
pub(crate) mod interp;
mod jacobian;
mod mask;
pub(crate) mod smooth;

pub use exp::{choose_scaling_n, exponentiate, DEFAULT_SCALING_STEPS, SCALING_THRESHOLD};
pub(crate) use jacobian::displacement_gradient;
pub use jacobian::{jacobian_map, negative_jacobian_fraction};
pub use mask::Mask;
pub use smooth::{gaussian_kernel, gaussian_smooth, gaussian_smooth_field, Smoothable};

use crate::error::{Error, Result};
use interp::Stencil;

/// Regular sampling grid: per-axis voxel counts and physical spacing (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    dims: Vec<usize>,
    spacing: Vec<f64>,
}

impl Grid {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::InvalidGrid(format!("expected 2 or 3 axes, got {}", dims.len())));
        }
        if spacing.len() != dims.len() {
            return Err(Error::InvalidGrid("spacing length differs from dims".into()));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidGrid(format!("all dims must be >= 2, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { dims, spacing })
    }

    /// Grid with unit spacing.
    pub fn unit(dims: &[usize]) -> Result<Self> {
        Self::new(dims.to_vec(), vec![1.0; dims.len()])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major strides in voxels.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for a in (0..self.dims.len() - 1).rev() {
            strides[a] = strides[a + 1] * self.dims[a + 1];
        }
        strides
    }

    /// Writes the coordinates of flat voxel `index` into `coords`.
    pub fn unravel(&self, mut index: usize, coords: &mut [usize]) {
        for a in (0..self.dims.len()).rev() {
            coords[a] = index % self.dims[a];
            index /= self.dims[a];
        }
    }

    pub fn ravel(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.dims).fold(0, |acc, (&c, &d)| acc * d + c)
    }

    /// True when the voxel lies at least `margin` voxels from every border.
    pub fn is_interior(&self, coords: &[usize], margin: usize) -> bool {
        coords
            .iter()
            .zip(&self.dims)
            .all(|(&c, &d)| c >= margin && c + margin < d)
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::GridMismatch {
                left: self.dims.clone(),
                right: other.dims.clone(),
            });
        }
        Ok(())
    }
}

/// One real intensity per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarImage {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarImage {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_voxels() {
            return Err(crate::error::shape(
                "ScalarImage::new",
                format!("{} values for {} voxels", values.len(), grid.num_voxels()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image values"));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.num_voxels();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut coords = vec![0; grid.ndim()];
        let values = (0..grid.num_voxels())
            .map(|i| {
                grid.unravel(i, &mut coords);
                f(&coords)
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, coords: &[usize]) -> f64 {
        self.values[self.grid.ravel(coords)]
    }

    /// Min-max rescale to `[0, 1]`; a constant image maps to zeros.
    pub fn normalized(&self) -> ScalarImage {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        let values = if range > 0.0 {
            self.values.iter().map(|v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        ScalarImage {
            grid: self.grid.clone(),
            values,
        }
    }

    /// Resamples at `x + u(x)` for every voxel `x`.
    pub fn warp(&self, phi: &Transform) -> Result<ScalarImage> {
        warp_image(self, phi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Velocity,
    Displacement,
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Velocity => "velocity",
            FieldKind::Displacement => "displacement",
        }
    }
}

/// One `D`-vector per voxel, in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    vectors: Vec<f64>,
    kind: FieldKind,
}

impl VectorField {
    pub fn new(grid: Grid, vectors: Vec<f64>, kind: FieldKind) -> Result<Self> {
        let expected = grid.num_voxels() * grid.ndim();
        if vectors.len() != expected {
            return Err(crate::error::shape(
                "VectorField::new",
                format!("{} components, expected {expected}", vectors.len()),
            ));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector field components"));
        }
        Ok(Self { grid, vectors, kind })
    }

    pub fn zeros(grid: Grid, kind: FieldKind) -> Self {
        let n = grid.num_voxels() * grid.ndim();
        Self {
            grid,
            vectors: vec![0.0; n],
            kind,
        }
    }

    /// Builds a field by evaluating `f(coords, out)` at every voxel.
    pub fn from_fn(grid: Grid, kind: FieldKind, mut f: impl FnMut(&[usize], &mut [f64])) -> Self {
        let d = grid.ndim();
        let mut coords = vec![0; d];
        let mut vectors = vec![0.0; grid.num_voxels() * d];
        for (i, chunk) in vectors.chunks_exact_mut(d).enumerate() {
            grid.unravel(i, &mut coords);
            f(&coords, chunk);
        }
        Self { grid, vectors, kind }
    }

    /// Builds a field from channel-first storage `[D, voxels...]`.
    pub fn from_channels_first(grid: Grid, data: &[f64], kind: FieldKind) -> Result<Self> {
        let d = grid.ndim();
        let n = grid.num_voxels();
        if data.len() != n * d {
            return Err(crate::error::shape(
                "VectorField::from_channels_first",
                format!("{} values, expected {}", data.len(), n * d),
            ));
        }
        let mut vectors = vec![0.0; n * d];
        for c in 0..d {
            for i in 0..n {
                vectors[i * d + c] = data[c * n + i];
            }
        }
        Self::new(grid, vectors, kind)
    }

    pub fn to_channels_first(&self) -> Vec<f64> {
        let d = self.grid.ndim();
        let n = self.grid.num_voxels();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for c in 0..d {
                out[c * n + i] = self.vectors[i * d + c];
            }
        }
        out
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut [f64] {
        &mut self.vectors
    }

    pub fn vector(&self, voxel: usize) -> &[f64] {
        let d = self.grid.ndim();
        &self.vectors[voxel * d..(voxel + 1) * d]
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn scaled(&self, factor: f64) -> VectorField {
        VectorField {
            grid: self.grid.clone(),
            vectors: self.vectors.iter().map(|v| v * factor).collect(),
            kind: self.kind,
        }
    }

    /// Largest per-voxel Euclidean norm.
    pub fn max_norm(&self) -> f64 {
        self.vectors
            .chunks_exact(self.grid.ndim())
            .map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Multilinear sample of every component at continuous position `point`.
    pub fn sample(&self, point: &[f64], out: &mut [f64]) {
        let d = self.grid.ndim();
        let st = Stencil::new(self.grid.dims(), point);
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..st.len() {
            let base = st.index[k] * d;
            for c in 0..d {
                out[c] += st.weight[k] * self.vectors[base + c];
            }
        }
    }
}

/// Dense mapping `phi(x) = x + u(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    displacement: VectorField,
}

impl Transform {
    pub fn identity(grid: Grid) -> Self {
        Self {
            displacement: VectorField::zeros(grid, FieldKind::Displacement),
        }
    }

    pub fn from_displacement(field: VectorField) -> Self {
        Self {
            displacement: field.with_kind(FieldKind::Displacement),
        }
    }

    pub fn displacement(&self) -> &VectorField {
        &self.displacement
    }

    pub fn into_displacement(self) -> VectorField {
        self.displacement
    }

    pub fn grid(&self) -> &Grid {
        self.displacement.grid()
    }

    /// Maps voxel `coords` to its continuous image position.
    pub fn apply(&self, coords: &[usize], out: &mut [f64]) {
        let i = self.grid().ravel(coords);
        let u = self.displacement.vector(i);
        for a in 0..coords.len() {
            out[a] = coords[a] as f64 + u[a];
        }
    }
}

/// `output(x) = img(phi(x))` by multilinear interpolation with border clamping.
pub fn warp_image(img: &ScalarImage, phi: &Transform) -> Result<ScalarImage> {
    img.grid.check_same(phi.grid())?;
    let grid = &img.grid;
    let d = grid.ndim();
    let mut coords = vec![0usize; d];
    let mut point = [0.0; 3];
    let u = phi.displacement.vectors();
    let values = (0..grid.num_voxels())
        .map(|i| {
            grid.unravel(i, &mut coords);
            for a in 0..d {
                point[a] = coords[a] as f64 + u[i * d + a];
            }
            Stencil::new(grid.dims(), &point[..d]).apply_scalar(&img.values)
        })
        .collect();
    Ok(ScalarImage {
        grid: grid.clone(),
        values,
    })
}

/// `result(x) = outer(inner(x))`, i.e.
/// `u(x) = u_inner(x) + u_outer(x + u_inner(x))`.
pub fn compose(outer: &Transform, inner: &Transform) -> Result<Transform> {
    outer.grid().check_same(inner.grid())?;
    let vectors = compose_raw(
        outer.grid().dims(),
        outer.displacement.vectors(),
        inner.displacement.vectors(),
    );
    Ok(Transform {
        displacement: VectorField {
            grid: outer.grid().clone(),
            vectors,
            kind: FieldKind::Displacement,
        },
    })
}

/// Composition on interleaved displacement buffers sharing `dims`.
pub(crate) fn compose_raw(dims: &[usize], outer: &[f64], inner: &[f64]) -> Vec<f64> {
    let d = dims.len();
    let n: usize = dims.iter().product();
    let mut out = vec![0.0; n * d];
    let mut coords = [0usize; 3];
    let mut point = [0.0; 3];
    for i in 0..n {
        interp::unravel(dims, i, &mut coords[..d]);
        for a in 0..d {
            point[a] = coords[a] as f64 + inner[i * d + a];
        }
        let st = Stencil::new(dims, &point[..d]);
        for a in 0..d {
            let mut acc = 0.0;
            for k in 0..st.len() {
                acc += st.weight[k] * outer[st.index[k] * d + a];
            }
            out[i * d + a] = inner[i * d + a] + acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(grid: &Grid, rng: &mut ChaCha8Rng) -> ScalarImage {
        ScalarImage::from_fn(grid.clone(), |_| rng.random::<f64>())
    }

    fn smooth_random_field(grid: &Grid, amp: f64, seed: u64) -> VectorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
        VectorField::from_fn(grid.clone(), FieldKind::Displacement, |c, out| {
            let (x, y) = (c[0] as f64, c[1] as f64);
            out[0] = amp * (0.21 * x + phases[0]).sin() * (0.17 * y + phases[1]).cos();
            out[1] = amp * (0.13 * x + phases[2]).cos() * (0.23 * y + phases[3]).sin();
        })
    }

    // Bilinear interpolation written out longhand, independent of `Stencil`.
    fn bilinear_oracle(img: &ScalarImage, y: f64, x: f64) -> f64 {
        let (h, w) = (img.grid().dims()[0], img.grid().dims()[1]);
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let y0 = (y.floor() as usize).min(h - 2);
        let x0 = (x.floor() as usize).min(w - 2);
        let ty = y - y0 as f64;
        let tx = x - x0 as f64;
        let v = |yy: usize, xx: usize| img.values()[yy * w + xx];
        (1.0 - ty) * ((1.0 - tx) * v(y0, x0) + tx * v(y0, x0 + 1))
            + ty * ((1.0 - tx) * v(y0 + 1, x0) + tx * v(y0 + 1, x0 + 1))
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(Grid::unit(&[4]).is_err());
        assert!(Grid::unit(&[1, 4]).is_err());
        assert!(Grid::new(vec![4, 4], vec![1.0, 0.0]).is_err());
        assert!(Grid::unit(&[2, 3, 4]).is_ok());
    }

    #[test]
    fn identity_warp_is_exact() {
        let grid = Grid::unit(&[9, 7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&grid, &mut rng);
        let out = warp_image(&img, &Transform::identity(grid)).unwrap();
        assert_eq!(out.values(), img.values());
    }

    #[test]
    fn integer_translation_shifts_rows() {
        let grid = Grid::unit(&[8, 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&grid, &mut rng);
        let u = VectorField::from_fn(grid.clone(), FieldKind::Displacement, |_, o| {
            o[0] = 1.0;
            o[1] = 0.0;
        });
        let out = warp_image(&img, &Transform::from_displacement(u)).unwrap();
        for y in 0..7 {
            for x in 0..8 {
                assert_eq!(out.at(&[y, x]), img.at(&[y + 1, x]));
            }
        }
    }

    #[test]
    fn warp_matches_longhand_bilinear() {
        let grid = Grid::unit(&[16, 16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&grid, &mut rng);
        let phi = Transform::from_displacement(smooth_random_field(&grid, 2.5, 4));
        let out = warp_image(&img, &phi).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let u = phi.displacement().vector(y * 16 + x);
                let want = bilinear_oracle(&img, y as f64 + u[0], x as f64 + u[1]);
                let got = out.at(&[y, x]);
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn warp_rejects_grid_mismatch() {
        let a = ScalarImage::zeros(Grid::unit(&[4, 4]).unwrap());
        let phi = Transform::identity(Grid::unit(&[4, 5]).unwrap());
        assert!(matches!(warp_image(&a, &phi), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn compose_identity_and_translations() {
        let grid = Grid::unit(&[12, 12]).unwrap();
        let phi = Transform::from_displacement(smooth_random_field(&grid, 1.5, 5));
        let id = Transform::identity(grid.clone());
        assert_eq!(compose(&id, &phi).unwrap(), phi);
        assert_eq!(compose(&phi, &id).unwrap(), phi);

        let shift = |a: f64, b: f64| {
            Transform::from_displacement(VectorField::from_fn(grid.clone(), FieldKind::Displacement, |_, o| {
                o[0] = a;
                o[1] = b;
            }))
        };
        let c = compose(&shift(1.25, -0.5), &shift(0.5, 2.0)).unwrap();
        let mut coords = [0; 2];
        for i in 0..grid.num_voxels() {
            grid.unravel(i, &mut coords);
            if grid.is_interior(&coords, 4) {
                let u = c.displacement().vector(i);
                assert!((u[0] - 1.75).abs() < 1e-12 && (u[1] - 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compose_matches_direct_evaluation() {
        let grid = Grid::unit(&[16, 16]).unwrap();
        let outer = Transform::from_displacement(smooth_random_field(&grid, 2.0, 6));
        let inner = Transform::from_displacement(smooth_random_field(&grid, 1.7, 7));
        let c = compose(&outer, &inner).unwrap();
        // Oracle: interpolate each outer component as its own scalar image.
        let comp = |k: usize| {
            ScalarImage::new(
                grid.clone(),
                outer
                    .displacement()
                    .vectors()
                    .iter()
                    .skip(k)
                    .step_by(2)
                    .copied()
                    .collect(),
            )
            .unwrap()
        };
        let (o0, o1) = (comp(0), comp(1));
        for y in 0..16 {
            for x in 0..16 {
                let ui = inner.displacement().vector(y * 16 + x);
                let (py, px) = (y as f64 + ui[0], x as f64 + ui[1]);
                let want = [
                    ui[0] + bilinear_oracle(&o0, py, px),
                    ui[1] + bilinear_oracle(&o1, py, px),
                ];
                let got = c.displacement().vector(y * 16 + x);
                for k in 0..2 {
                    assert!((got[k] - want[k]).abs() <= 1e-12 * want[k].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn compose_is_approximately_associative() {
        let grid = Grid::unit(&[32, 32]).unwrap();
        let a = Transform::from_displacement(smooth_random_field(&grid, 0.002, 8));
        let b = Transform::from_displacement(smooth_random_field(&grid, 0.002, 9));
        let c = Transform::from_displacement(smooth_random_field(&grid, 0.002, 10));
        let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
        let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
        let mut coords = [0; 2];
        for i in 0..grid.num_voxels() {
            grid.unravel(i, &mut coords);
            if grid.is_interior(&coords, 2) {
                for k in 0..2 {
                    let diff = left.displacement().vector(i)[k] - right.displacement().vector(i)[k];
                    assert!(diff.abs() <= 1e-6, "diff {diff}");
                }
            }
        }
    }

    #[test]
    fn channels_first_round_trip() {
        let grid = Grid::unit(&[3, 4, 5]).unwrap();
        let f = VectorField::from_fn(grid.clone(), FieldKind::Velocity, |c, o| {
            o[0] = c[0] as f64;
            o[1] = c[1] as f64 * 10.0;
            o[2] = c[2] as f64 * 100.0;
        });
        let cf = f.to_channels_first();
        assert_eq!(cf[59], 2.0);
        assert_eq!(cf[2 * 60 + 59], 400.0);
        let back = VectorField::from_channels_first(grid, &cf, FieldKind::Velocity).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn three_dimensional_identity_warp() {
        let grid = Grid::unit(&[5, 6, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(&grid, &mut rng);
        let out = warp_image(&img, &Transform::identity(grid)).unwrap();
        assert_eq!(out, img);
    }
}
