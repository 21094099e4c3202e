//! Images, voxel clouds and the discrete operators defined on them.
//!
//! All coordinates are in voxel index units. A cloud stores its coordinates
//! planar: component `a` (the coordinate along axis `a` of the shape) of
//! voxel `v` lives at `coords[a * N + v]`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Extents of a 2D `(H, W)` or 3D `(D, H, W)` grid, last axis fastest.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape {
    extents: Vec<usize>,
}

impl Shape {
    pub fn new(extents: &[usize]) -> Result<Self> {
        if !(2..=3).contains(&extents.len()) || extents.iter().any(|&e| e < 2) {
            return Err(Error::InvalidShape(extents.to_vec()));
        }
        extents
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::InvalidShape(extents.to_vec()))?;
        Ok(Shape {
            extents: extents.to_vec(),
        })
    }

    pub fn ndim(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.ndim()];
        for a in (0..self.ndim() - 1).rev() {
            strides[a] = strides[a + 1] * self.extents[a + 1];
        }
        strides
    }

    /// Extents padded to three axes, a 2D grid gets a leading depth of 1.
    pub(crate) fn dims3(&self) -> [usize; 3] {
        match self.extents[..] {
            [h, w] => [1, h, w],
            [d, h, w] => [d, h, w],
            _ => unreachable!("shape invariant"),
        }
    }

    /// Multi-index of a flat voxel index.
    pub fn unravel(&self, mut v: usize) -> Vec<usize> {
        let mut idx = vec![0; self.ndim()];
        for a in (0..self.ndim()).rev() {
            idx[a] = v % self.extents[a];
            v /= self.extents[a];
        }
        idx
    }

    /// True when the voxel touches any face of the index box.
    pub fn on_face(&self, v: usize) -> bool {
        self.unravel(v)
            .iter()
            .zip(&self.extents)
            .any(|(&i, &e)| i == 0 || i == e - 1)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(extents: Vec<usize>) -> Result<Self> {
        Shape::new(&extents)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(shape: Shape) -> Self {
        shape.extents
    }
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Scalar intensity image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    shape: Shape,
    values: Vec<f64>,
}

impl Image {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::mismatch(shape.len(), values.len()));
        }
        check_finite(&values, "image")?;
        Ok(Image { shape, values })
    }

    pub fn zeros(shape: Shape) -> Self {
        let values = vec![0.0; shape.len()];
        Image { shape, values }
    }

    pub fn from_fn(shape: Shape, f: impl Fn(&[usize]) -> f64) -> Result<Self> {
        let values = (0..shape.len()).map(|v| f(&shape.unravel(v))).collect();
        Image::new(shape, values)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Coordinates of every voxel; the final cloud of a flow is the deformation field.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelCloud {
    shape: Shape,
    coords: Vec<f64>,
}

impl VoxelCloud {
    pub fn new(shape: Shape, coords: Vec<f64>) -> Result<Self> {
        let expected = shape.ndim() * shape.len();
        if coords.len() != expected {
            return Err(Error::mismatch(expected, coords.len()));
        }
        check_finite(&coords, "voxel cloud")?;
        Ok(VoxelCloud { shape, coords })
    }

    pub fn identity(shape: &Shape) -> Self {
        make_identity_grid(shape)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.ndim()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    /// Coordinate component along `axis` for every voxel.
    pub fn component(&self, axis: usize) -> &[f64] {
        let n = self.shape.len();
        &self.coords[axis * n..(axis + 1) * n]
    }

    pub fn point(&self, v: usize) -> Vec<f64> {
        (0..self.ndim()).map(|a| self.component(a)[v]).collect()
    }

    /// Largest absolute coordinate difference to `other`.
    pub fn max_abs_diff(&self, other: &VoxelCloud) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Categorical label per voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: Shape,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(shape: Shape, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != shape.len() {
            return Err(Error::mismatch(shape.len(), labels.len()));
        }
        Ok(LabelMap { shape, labels })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }
}

/// Per-voxel Jacobian determinant of a deformation.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMap {
    shape: Shape,
    dets: Vec<f64>,
}

impl JacobianMap {
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dets(&self) -> &[f64] {
        &self.dets
    }
}

pub fn make_identity_grid(shape: &Shape) -> VoxelCloud {
    let n = shape.len();
    let mut coords = vec![0.0; shape.ndim() * n];
    for v in 0..n {
        for (a, i) in shape.unravel(v).into_iter().enumerate() {
            coords[a * n + v] = i as f64;
        }
    }
    VoxelCloud {
        shape: shape.clone(),
        coords,
    }
}

/// Interpolation footprint of one sample point: lower corner, fractional
/// offsets and whether each axis lies inside the box (outside means clamped).
pub(crate) struct Footprint {
    base: [usize; 3],
    frac: [f64; 3],
    inside: [bool; 3],
}

pub(crate) fn footprint(extents: &[usize], p: impl Fn(usize) -> f64) -> Footprint {
    let mut fp = Footprint {
        base: [0; 3],
        frac: [0.0; 3],
        inside: [true; 3],
    };
    for (a, &e) in extents.iter().enumerate() {
        let hi = (e - 1) as f64;
        let x = p(a);
        let c = if x < 0.0 {
            fp.inside[a] = false;
            0.0
        } else if x > hi {
            fp.inside[a] = false;
            hi
        } else {
            x
        };
        let b = (c.floor() as usize).min(e - 2);
        fp.base[a] = b;
        fp.frac[a] = c - b as f64;
    }
    fp
}

fn corner_offset(fp: &Footprint, strides: &[usize], corner: usize) -> usize {
    strides
        .iter()
        .enumerate()
        .map(|(a, &s)| (fp.base[a] + ((corner >> a) & 1)) * s)
        .sum()
}

/// Multilinear sample of `values` at a clamped point.
pub(crate) fn sample(values: &[f64], extents: &[usize], strides: &[usize], fp: &Footprint) -> f64 {
    let nd = extents.len();
    let mut acc = 0.0;
    for corner in 0..(1usize << nd) {
        let mut w = 1.0;
        for a in 0..nd {
            w *= if (corner >> a) & 1 == 1 {
                fp.frac[a]
            } else {
                1.0 - fp.frac[a]
            };
        }
        acc += w * values[corner_offset(fp, strides, corner)];
    }
    acc
}

/// Derivative of the multilinear sample with respect to each coordinate.
/// Clamped axes have zero derivative.
pub(crate) fn sample_grad(
    values: &[f64],
    extents: &[usize],
    strides: &[usize],
    fp: &Footprint,
) -> [f64; 3] {
    let nd = extents.len();
    let mut grad = [0.0; 3];
    for corner in 0..(1usize << nd) {
        let val = values[corner_offset(fp, strides, corner)];
        for (a, g) in grad.iter_mut().enumerate().take(nd) {
            if !fp.inside[a] {
                continue;
            }
            let mut w = if (corner >> a) & 1 == 1 { 1.0 } else { -1.0 };
            for b in (0..nd).filter(|&b| b != a) {
                w *= if (corner >> b) & 1 == 1 {
                    fp.frac[b]
                } else {
                    1.0 - fp.frac[b]
                };
            }
            *g += w * val;
        }
    }
    grad
}

/// Resamples `image` at the cloud's coordinates (bilinear or trilinear,
/// clamped to the border).
pub fn warp(image: &Image, cloud: &VoxelCloud) -> Result<Image> {
    if image.shape() != cloud.shape() {
        return Err(Error::mismatch(image.shape(), cloud.shape()));
    }
    let shape = image.shape();
    let extents = shape.extents();
    let strides = shape.strides();
    let n = shape.len();
    let coords = cloud.coords();
    let values = (0..n)
        .map(|v| {
            let fp = footprint(extents, |a| coords[a * n + v]);
            sample(image.values(), extents, &strides, &fp)
        })
        .collect();
    Ok(Image {
        shape: shape.clone(),
        values,
    })
}

/// Nearest-neighbour resampling of a label map at clamped cloud coordinates.
pub fn warp_labels(labels: &LabelMap, cloud: &VoxelCloud) -> Result<LabelMap> {
    if labels.shape() != cloud.shape() {
        return Err(Error::mismatch(labels.shape(), cloud.shape()));
    }
    let shape = labels.shape();
    let strides = shape.strides();
    let n = shape.len();
    let out = (0..n)
        .map(|v| {
            let offset: usize = shape
                .extents()
                .iter()
                .enumerate()
                .map(|(a, &e)| {
                    let x = cloud.coords()[a * n + v].clamp(0.0, (e - 1) as f64);
                    x.round() as usize * strides[a]
                })
                .sum();
            labels.labels()[offset]
        })
        .collect();
    Ok(LabelMap {
        shape: shape.clone(),
        labels: out,
    })
}

/// Derivative of a scalar field along one axis: central differences inside,
/// one-sided differences on the two faces.
pub(crate) fn axis_derivative(field: &[f64], shape: &Shape, axis: usize) -> Vec<f64> {
    let e = shape.extents()[axis];
    let s = shape.strides()[axis];
    (0..field.len())
        .map(|v| {
            let i = (v / s) % e;
            if i == 0 {
                field[v + s] - field[v]
            } else if i == e - 1 {
                field[v] - field[v - s]
            } else {
                0.5 * (field[v + s] - field[v - s])
            }
        })
        .collect()
}

/// Adjoint of [`axis_derivative`], accumulated into `out`.
pub(crate) fn axis_derivative_transpose(cot: &[f64], shape: &Shape, axis: usize, out: &mut [f64]) {
    let e = shape.extents()[axis];
    let s = shape.strides()[axis];
    for (v, &c) in cot.iter().enumerate() {
        let i = (v / s) % e;
        if i == 0 {
            out[v + s] += c;
            out[v] -= c;
        } else if i == e - 1 {
            out[v] += c;
            out[v - s] -= c;
        } else {
            out[v + s] += 0.5 * c;
            out[v - s] -= 0.5 * c;
        }
    }
}

/// Per-voxel spatial derivative matrices `d psi_i / d x_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    shape: Shape,
    data: Vec<f64>,
}

impl GradientField {
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    /// Entry `(i, a)` of the matrix at voxel `v`.
    pub fn entry(&self, v: usize, i: usize, a: usize) -> f64 {
        let d = self.shape.ndim();
        self.data[(v * d + i) * d + a]
    }

    /// Row-major `d x d` matrix at voxel `v`.
    pub fn matrix(&self, v: usize) -> &[f64] {
        let d = self.shape.ndim();
        &self.data[v * d * d..(v + 1) * d * d]
    }

    #[cfg(test)]
    pub(crate) fn data(&self) -> &[f64] {
        &self.data
    }
}

pub fn spatial_gradient(cloud: &VoxelCloud) -> GradientField {
    let shape = cloud.shape();
    let d = shape.ndim();
    let n = shape.len();
    let mut data = vec![0.0; n * d * d];
    for i in 0..d {
        for a in 0..d {
            let deriv = axis_derivative(cloud.component(i), shape, a);
            for (v, x) in deriv.into_iter().enumerate() {
                data[(v * d + i) * d + a] = x;
            }
        }
    }
    GradientField {
        shape: shape.clone(),
        data,
    }
}

/// Adjoint of [`spatial_gradient`]: maps per-voxel matrix cotangents
/// (same layout as [`GradientField`]) to a planar cloud-shaped vector.
pub(crate) fn spatial_gradient_transpose(shape: &Shape, cot: &[f64]) -> Vec<f64> {
    let d = shape.ndim();
    let n = shape.len();
    let mut out = vec![0.0; d * n];
    let mut scratch = vec![0.0; n];
    for i in 0..d {
        for a in 0..d {
            for (v, c) in scratch.iter_mut().enumerate() {
                *c = cot[(v * d + i) * d + a];
            }
            axis_derivative_transpose(&scratch, shape, a, &mut out[i * n..(i + 1) * n]);
        }
    }
    out
}

pub(crate) fn det(m: &[f64]) -> f64 {
    match m.len() {
        4 => m[0] * m[3] - m[1] * m[2],
        9 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => unreachable!("2x2 or 3x3 only"),
    }
}

/// Derivative of the determinant with respect to each entry (the cofactor matrix).
pub(crate) fn det_grad(m: &[f64]) -> Vec<f64> {
    match m.len() {
        4 => vec![m[3], -m[2], -m[1], m[0]],
        9 => vec![
            m[4] * m[8] - m[5] * m[7],
            m[5] * m[6] - m[3] * m[8],
            m[3] * m[7] - m[4] * m[6],
            m[2] * m[7] - m[1] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[1] * m[5] - m[2] * m[4],
            m[2] * m[3] - m[0] * m[5],
            m[0] * m[4] - m[1] * m[3],
        ],
        _ => unreachable!("2x2 or 3x3 only"),
    }
}

pub fn jacobian_det_map(cloud: &VoxelCloud) -> JacobianMap {
    let grad = spatial_gradient(cloud);
    let dets = (0..cloud.shape().len())
        .map(|v| det(grad.matrix(v)))
        .collect();
    JacobianMap {
        shape: cloud.shape().clone(),
        dets,
    }
}

impl JacobianMap {
    pub fn new(shape: Shape, dets: Vec<f64>) -> Result<Self> {
        if dets.len() != shape.len() {
            return Err(Error::mismatch(shape.len(), dets.len()));
        }
        Ok(JacobianMap { shape, dets })
    }
}
