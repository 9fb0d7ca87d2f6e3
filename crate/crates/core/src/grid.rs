//! Grid geometry, raster containers and the voxel-neighborhood Laplacian.
//!
//! All rasters are stored row-major with the last axis varying fastest.
//! Vector fields are stored channel-first: component `c` of voxel `i` lives
//! at `c * n_voxels + i`. Displacements and velocities are in voxel units,
//! component `a` being the displacement along axis `a`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extent per axis of a regular 2D or 3D voxel grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct GridShape {
    dims: Vec<usize>,
}

impl GridShape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() != 2 && dims.len() != 3 {
            return Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: "grid must be 2D or 3D".into(),
            });
        }
        if let Some(&e) = dims.iter().find(|&&e| e < 2) {
            return Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: format!("every extent must be at least 2, found {e}"),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.ndim()];
        for a in (0..self.ndim() - 1).rev() {
            s[a] = s[a + 1] * self.dims[a + 1];
        }
        s
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &e)| acc * e + c)
    }

    /// Writes the lattice coordinates of voxel `index` into `out`.
    pub fn coords_into(&self, mut index: usize, out: &mut [usize]) {
        for a in (0..self.ndim()).rev() {
            out[a] = index % self.dims[a];
            index /= self.dims[a];
        }
    }

    pub fn coords(&self, index: usize) -> Vec<usize> {
        let mut c = vec![0; self.ndim()];
        self.coords_into(index, &mut c);
        c
    }

    /// True when the voxel is at least `margin` voxels away from every face.
    pub fn is_interior(&self, index: usize, margin: usize) -> bool {
        let mut rem = index;
        for a in (0..self.ndim()).rev() {
            let c = rem % self.dims[a];
            rem /= self.dims[a];
            if c < margin || c + margin >= self.dims[a] {
                return false;
            }
        }
        true
    }

    /// Parses `"64x64"` or `"32x32x32"`.
    pub fn parse(text: &str) -> Result<Self> {
        let dims = text
            .split('x')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::InvalidShape {
                dims: vec![],
                reason: format!("cannot parse shape {text:?}"),
            })?;
        Self::new(&dims)
    }
}

impl TryFrom<Vec<usize>> for GridShape {
    type Error = Error;
    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Self::new(&dims)
    }
}

impl From<GridShape> for Vec<usize> {
    fn from(s: GridShape) -> Self {
        s.dims
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Intensity raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarImage {
    shape: GridShape,
    values: Vec<f64>,
}

impl ScalarImage {
    pub fn new(shape: GridShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "image of shape {shape} needs {} values, got {}",
                shape.len(),
                values.len()
            )));
        }
        check_finite(&values, "image")?;
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: GridShape) -> Self {
        let n = shape.len();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: GridShape, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let mut c = vec![0; shape.ndim()];
        let values = (0..shape.len())
            .map(|i| {
                shape.coords_into(i, &mut c);
                f(&c)
            })
            .collect();
        Self::new(shape, values)
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Min-max rescale into `[0, 1]`. Constant images map to zero.
    pub fn normalized(&self) -> Self {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        let span = hi - lo;
        let values = self
            .values
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        Self {
            shape: self.shape.clone(),
            values,
        }
    }

    /// True when every value already lies in `[0, 1]`.
    pub fn is_unit_range(&self) -> bool {
        self.values.iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

/// Integer segmentation raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: GridShape,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(shape: GridShape, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "label map of shape {shape} needs {} labels, got {}",
                shape.len(),
                labels.len()
            )));
        }
        Ok(Self { shape, labels })
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Sorted distinct labels present in the map.
    pub fn distinct(&self) -> Vec<u32> {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l
    }
}

/// Per-voxel vectors with `ndim` components, stored channel-first.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    shape: GridShape,
    data: Vec<f64>,
}

impl VectorField {
    pub fn new(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        let want = shape.ndim() * shape.len();
        if data.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "vector field of shape {shape} needs {want} components, got {}",
                data.len()
            )));
        }
        check_finite(&data, "vector field")?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: GridShape) -> Self {
        let n = shape.ndim() * shape.len();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Same vector at every voxel.
    pub fn constant(shape: GridShape, v: &[f64]) -> Result<Self> {
        if v.len() != shape.ndim() {
            return Err(Error::ShapeMismatch(
                "constant vector has wrong length".into(),
            ));
        }
        let n = shape.len();
        let data = v
            .iter()
            .flat_map(|&c| std::iter::repeat(c).take(n))
            .collect();
        Self::new(shape, data)
    }

    /// Builds a field from a per-voxel closure writing `ndim` components.
    pub fn from_fn(shape: GridShape, mut f: impl FnMut(&[usize], &mut [f64])) -> Result<Self> {
        let n = shape.len();
        let nd = shape.ndim();
        let mut data = vec![0.0; nd * n];
        let mut c = vec![0; nd];
        let mut v = vec![0.0; nd];
        for i in 0..n {
            shape.coords_into(i, &mut c);
            v.iter_mut().for_each(|x| *x = 0.0);
            f(&c, &mut v);
            for a in 0..nd {
                data[a * n + i] = v[a];
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.ndim()
    }

    /// All components, channel-first.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        let n = self.shape.len();
        &self.data[axis * n..(axis + 1) * n]
    }

    /// Vector at voxel `index`.
    pub fn at(&self, index: usize) -> Vec<f64> {
        (0..self.ndim()).map(|a| self.component(a)[index]).collect()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Squared L2 norm over all components.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Axis-aligned nearest-neighbor graph on a voxel grid (4-connected in 2D,
/// 6-connected in 3D, no wraparound). `L = D - A` is never materialized;
/// the quadratic form is evaluated by edge iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaplacianGraph {
    shape: GridShape,
    degree: Vec<u8>,
}

/// Builds the neighborhood graph of a grid.
pub fn make_laplacian(shape: &GridShape) -> LaplacianGraph {
    let mut degree = vec![0u8; shape.len()];
    let mut c = vec![0; shape.ndim()];
    for (i, d) in degree.iter_mut().enumerate() {
        shape.coords_into(i, &mut c);
        *d = c
            .iter()
            .zip(shape.dims())
            .map(|(&ci, &e)| u8::from(ci > 0) + u8::from(ci + 1 < e))
            .sum();
    }
    LaplacianGraph {
        shape: shape.clone(),
        degree,
    }
}

impl LaplacianGraph {
    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn degree(&self) -> &[u8] {
        &self.degree
    }

    pub fn edge_count(&self) -> usize {
        self.degree.iter().map(|&d| d as usize).sum::<usize>() / 2
    }

    /// Undirected edges `(i, j)` with `i < j`, each listed once.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let strides = self.shape.strides();
        let n = self.shape.len();
        let nd = self.shape.ndim();
        (0..n).flat_map(move |i| {
            let strides = strides.clone();
            (0..nd).filter_map(move |a| {
                let c = (i / strides[a]) % self.shape.dims()[a];
                (c + 1 < self.shape.dims()[a]).then(|| (i, i + strides[a]))
            })
        })
    }

    /// `zᵀ L z` summed over channels of a channel-first buffer whose channel
    /// length is the voxel count: Σ over undirected edges of `(z[i] - z[j])²`.
    pub fn quadratic_channels(&self, data: &[f64]) -> f64 {
        let n = self.shape.len();
        debug_assert_eq!(data.len() % n, 0);
        let mut total = 0.0;
        for ch in data.chunks_exact(n) {
            for_each_edge_axis(&self.shape, |i, j| {
                let d = ch[i] - ch[j];
                total += d * d;
            });
        }
        total
    }

    /// Gradient of [`quadratic_channels`](Self::quadratic_channels), `2 L z`,
    /// scaled by `scale` and accumulated into `out`.
    pub fn accumulate_gradient(&self, data: &[f64], scale: f64, out: &mut [f64]) {
        let n = self.shape.len();
        for (ch, g) in data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            for_each_edge_axis(&self.shape, |i, j| {
                let d = 2.0 * scale * (ch[i] - ch[j]);
                g[i] += d;
                g[j] -= d;
            });
        }
    }
}

/// Visits every undirected edge once in a fixed order.
fn for_each_edge_axis(shape: &GridShape, mut f: impl FnMut(usize, usize)) {
    let dims = shape.dims();
    let strides = shape.strides();
    let n = shape.len();
    for a in 0..shape.ndim() {
        let s = strides[a];
        let e = dims[a];
        for i in 0..n {
            if (i / s) % e + 1 < e {
                f(i, i + s);
            }
        }
    }
}

/// Sum over vector components of the graph quadratic form.
pub fn laplacian_quadratic(graph: &LaplacianGraph, field: &VectorField) -> Result<f64> {
    if graph.shape() != field.shape() {
        return Err(Error::ShapeMismatch(format!(
            "graph shape {} vs field shape {}",
            graph.shape(),
            field.shape()
        )));
    }
    Ok(graph.quadratic_channels(field.data()))
}
