//! Patch extraction and the regrouping operator between layers.
//!
//! A [`FeatureGrid`] stores one vector per spatial cell as a
//! `(channels, height, width)` array. Regrouping slides a `w × w` window with
//! stride `s` over the cells and concatenates the covered vectors into a single
//! longer vector; windows that do not fit entirely are dropped. Inside a
//! window the concatenation order is channel-major, then window row, then
//! window column, i.e. output channel `c·w² + dy·w + dx`.
//!
//! Patch extraction from an image is the same operation applied to the image
//! viewed as a grid whose cells hold one pixel per color plane.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{DdlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl GridGeometry {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(DdlError::InvalidParameter(format!(
                "grid geometry must be positive, got {}x{}x{}",
                channels, height, width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Geometry after regrouping with `spec`.
    pub fn windowed(&self, spec: WindowSpec) -> Result<GridGeometry> {
        spec.validate()?;
        let w = spec.window;
        if self.height < w || self.width < w {
            return Err(DdlError::Dimension(format!(
                "{}x{} grid is smaller than the {}x{} window",
                self.height, self.width, w, w
            )));
        }
        Ok(GridGeometry {
            channels: self.channels * w * w,
            height: (self.height - w) / spec.stride + 1,
            width: (self.width - w) / spec.stride + 1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        let s = Self { window, stride };
        s.validate()?;
        Ok(s)
    }

    pub const IDENTITY: WindowSpec = WindowSpec {
        window: 1,
        stride: 1,
    };

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.stride > self.window {
            return Err(DdlError::InvalidParameter(format!(
                "window spec needs 1 <= stride <= window, got window {} stride {}",
                self.window, self.stride
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    geometry: GridGeometry,
    data: Array3<f64>,
}

impl FeatureGrid {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        let geometry = GridGeometry::new(c, h, w)?;
        // standard layout so the matrix view below is free
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        Self {
            geometry,
            data: Array3::zeros((geometry.channels, geometry.height, geometry.width)),
        }
    }

    /// Builds a grid from a `channels × cells` matrix (cells in row-major order).
    pub fn from_matrix(m: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        let c = m.nrows();
        if m.ncols() != height * width {
            return Err(DdlError::Dimension(format!(
                "matrix has {} columns, grid has {} cells",
                m.ncols(),
                height * width
            )));
        }
        let m = m.as_standard_layout().to_owned();
        let data = m
            .into_shape_with_order((c, height, width))
            .map_err(|e| DdlError::Dimension(e.to_string()))?;
        Self::new(data)
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn data(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// `channels × cells` view; column `i·width + j` is cell `(i, j)`.
    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        let g = self.geometry;
        self.data
            .view()
            .into_shape_with_order((g.channels, g.cells()))
            .expect("feature grids are kept in standard layout")
    }

    pub fn dot(&self, other: &FeatureGrid) -> f64 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum()
    }
}

/// Vectorizes every `w × w` window of a `(c, H, W)` image into one cell.
pub fn patchify(image: ArrayView3<f64>, spec: WindowSpec) -> Result<FeatureGrid> {
    let grid = FeatureGrid::new(image.to_owned())?;
    regroup(&grid, spec)
}

/// Concatenates the vectors of adjacent cells covered by each window.
pub fn regroup(grid: &FeatureGrid, spec: WindowSpec) -> Result<FeatureGrid> {
    let gin = grid.geometry;
    let gout = gin.windowed(spec)?;
    let w = spec.window;
    let s = spec.stride;
    let mut out = Array3::<f64>::zeros((gout.channels, gout.height, gout.width));
    for oi in 0..gout.height {
        for oj in 0..gout.width {
            for c in 0..gin.channels {
                for dy in 0..w {
                    for dx in 0..w {
                        out[[c * w * w + dy * w + dx, oi, oj]] =
                            grid.data[[c, oi * s + dy, oj * s + dx]];
                    }
                }
            }
        }
    }
    FeatureGrid::new(out)
}

/// Adjoint of [`regroup`]: scatters each window back onto the cells it came
/// from, summing overlapping contributions.
pub fn regroup_adjoint(
    cotangent: &FeatureGrid,
    input_geometry: GridGeometry,
    spec: WindowSpec,
) -> Result<FeatureGrid> {
    let expected = input_geometry.windowed(spec)?;
    if cotangent.geometry != expected {
        return Err(DdlError::Dimension(format!(
            "cotangent geometry {:?} does not match regroup output {:?}",
            cotangent.geometry, expected
        )));
    }
    let w = spec.window;
    let s = spec.stride;
    let mut out = Array3::<f64>::zeros((
        input_geometry.channels,
        input_geometry.height,
        input_geometry.width,
    ));
    for oi in 0..expected.height {
        for oj in 0..expected.width {
            for c in 0..input_geometry.channels {
                for dy in 0..w {
                    for dx in 0..w {
                        out[[c, oi * s + dy, oj * s + dx]] +=
                            cotangent.data[[c * w * w + dy * w + dx, oi, oj]];
                    }
                }
            }
        }
    }
    FeatureGrid::new(out)
}

/// Number of windows covering each input cell (used to average when undoing a
/// regroup, e.g. for reconstructions).
pub fn coverage_counts(input_geometry: GridGeometry, spec: WindowSpec) -> Result<Array2<f64>> {
    let out = input_geometry.windowed(spec)?;
    let mut counts = Array2::<f64>::zeros((input_geometry.height, input_geometry.width));
    for oi in 0..out.height {
        for oj in 0..out.width {
            for dy in 0..spec.window {
                for dx in 0..spec.window {
                    counts[[oi * spec.stride + dy, oj * spec.stride + dx]] += 1.0;
                }
            }
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn ramp(c: usize, h: usize, w: usize) -> Array3<f64> {
        Array::from_iter((0..c * h * w).map(|v| v as f64))
            .into_shape_with_order((c, h, w))
            .unwrap()
    }

    #[test]
    fn patchify_shapes() {
        let img = ramp(1, 4, 4);
        let g = patchify(img.view(), WindowSpec::new(2, 2).unwrap()).unwrap();
        assert_eq!(g.geometry(), GridGeometry::new(4, 2, 2).unwrap());
        let g = patchify(img.view(), WindowSpec::new(3, 1).unwrap()).unwrap();
        assert_eq!(g.geometry(), GridGeometry::new(9, 2, 2).unwrap());
    }

    #[test]
    fn constant_image_gives_constant_cells() {
        let img = Array3::from_elem((2, 5, 5), 0.25);
        let g = patchify(img.view(), WindowSpec::new(3, 2).unwrap()).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn image_smaller_than_window_fails() {
        let img = ramp(1, 2, 5);
        assert!(patchify(img.view(), WindowSpec::new(3, 1).unwrap()).is_err());
    }

    #[test]
    fn regroup_examples() {
        let g = FeatureGrid::new(ramp(2, 3, 3)).unwrap();
        let r = regroup(&g, WindowSpec::new(3, 1).unwrap()).unwrap();
        assert_eq!(r.geometry(), GridGeometry::new(18, 1, 1).unwrap());

        let id = regroup(&g, WindowSpec::IDENTITY).unwrap();
        assert_eq!(id, g);

        let g = FeatureGrid::new(ramp(1, 4, 4)).unwrap();
        let r = regroup(&g, WindowSpec::new(2, 2).unwrap()).unwrap();
        assert_eq!(r.geometry(), GridGeometry::new(4, 2, 2).unwrap());
        let cell: Vec<f64> = (0..4).map(|c| r.data()[[c, 0, 0]]).collect();
        // g(0,0), g(0,1), g(1,0), g(1,1) with g(i,j) = 4i + j
        assert_eq!(cell, vec![0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn adjoint_examples() {
        let g = FeatureGrid::new(ramp(3, 4, 5)).unwrap();
        let back = regroup_adjoint(&g, g.geometry(), WindowSpec::IDENTITY).unwrap();
        assert_eq!(back, g);

        let spec = WindowSpec::new(2, 2).unwrap();
        let u = FeatureGrid::new(ramp(2, 4, 6)).unwrap();
        let r = regroup(&u, spec).unwrap();
        assert_eq!(regroup_adjoint(&r, u.geometry(), spec).unwrap(), u);
    }

    #[test]
    fn adjoint_rejects_mismatch() {
        let spec = WindowSpec::new(2, 1).unwrap();
        let cot = FeatureGrid::zeros(GridGeometry::new(4, 3, 3).unwrap());
        let input = GridGeometry::new(1, 5, 5).unwrap();
        assert!(regroup_adjoint(&cot, input, spec).is_err());
    }

    #[test]
    fn coverage_counts_overlap() {
        let c = coverage_counts(GridGeometry::new(1, 3, 3).unwrap(), WindowSpec::new(2, 1).unwrap())
            .unwrap();
        assert_eq!(c[[1, 1]], 4.0);
        assert_eq!(c[[0, 0]], 1.0);
        assert_eq!(c[[0, 1]], 2.0);
    }
}
