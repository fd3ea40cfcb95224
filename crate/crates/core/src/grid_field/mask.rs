use super::{Grid, ScalarImage, Transform};
use crate::error::Result;

/// Binary segmentation on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    grid: Grid,
    values: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid, values: Vec<bool>) -> Result<Self> {
        if values.len() != grid.num_voxels() {
            return Err(crate::error::shape(
                "Mask::new",
                format!("{} values for {} voxels", values.len(), grid.num_voxels()),
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(&[usize]) -> bool) -> Self {
        let mut coords = vec![0; grid.ndim()];
        let values = (0..grid.num_voxels())
            .map(|i| {
                grid.unravel(i, &mut coords);
                f(&coords)
            })
            .collect();
        Self { grid, values }
    }

    /// Voxels where `labels` equals `label`.
    pub fn from_labels(labels: &ScalarImage, label: f64) -> Self {
        Self {
            grid: labels.grid().clone(),
            values: labels.values().iter().map(|&v| v == label).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn to_image(&self) -> ScalarImage {
        ScalarImage {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Warps by multilinear interpolation of the indicator, thresholded at 0.5.
    pub fn warp(&self, phi: &Transform) -> Result<Mask> {
        let soft = self.to_image().warp(phi)?;
        Ok(Mask {
            grid: self.grid.clone(),
            values: soft.values().iter().map(|&v| v >= 0.5).collect(),
        })
    }

    /// Warps by nearest-neighbour lookup (ties round half away from zero).
    pub fn warp_nearest(&self, phi: &Transform) -> Result<Mask> {
        self.grid.check_same(phi.grid())?;
        let d = self.grid.ndim();
        let dims = self.grid.dims();
        let mut coords = vec![0usize; d];
        let mut point = vec![0.0; d];
        let mut nearest = vec![0usize; d];
        let values = (0..self.grid.num_voxels())
            .map(|i| {
                self.grid.unravel(i, &mut coords);
                phi.apply(&coords, &mut point);
                for a in 0..d {
                    nearest[a] = point[a].round().clamp(0.0, (dims[a] - 1) as f64) as usize;
                }
                self.values[self.grid.ravel(&nearest)]
            })
            .collect();
        Ok(Mask {
            grid: self.grid.clone(),
            values,
        })
    }

    /// Foreground voxels with a face neighbour that is background or outside
    /// the grid.
    pub fn boundary(&self) -> Vec<usize> {
        let d = self.grid.ndim();
        let dims = self.grid.dims();
        let strides = self.grid.strides();
        let mut coords = vec![0usize; d];
        let mut out = Vec::new();
        for i in 0..self.values.len() {
            if !self.values[i] {
                continue;
            }
            self.grid.unravel(i, &mut coords);
            let on_edge = (0..d).any(|a| {
                coords[a] == 0
                    || coords[a] == dims[a] - 1
                    || !self.values[i - strides[a]]
                    || !self.values[i + strides[a]]
            });
            if on_edge {
                out.push(i);
            }
        }
        out
    }
}
