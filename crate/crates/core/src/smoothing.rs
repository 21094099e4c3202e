//! Separable Gaussian smoothing of vector fields and its exact transpose.

use crate::error::{Error, Result};
use crate::grid::Shape;

/// Normalized, truncated, separable Gaussian. A radius of zero on every axis
/// is the identity operator.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    radius: Vec<usize>,
    sigma: Vec<f64>,
    taps: Vec<Vec<f64>>,
}

fn taps(radius: usize, sigma: f64) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Half-sample symmetric reflection: `.. b a | a b c .. | c b ..`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m >= n {
        2 * n - 1 - m
    } else {
        m
    }
}

impl GaussianKernel {
    /// Same radius and sigma on each of `dim` axes.
    pub fn new(radius: usize, sigma: f64, dim: usize) -> Result<Self> {
        Self::per_axis(&vec![radius; dim], &vec![sigma; dim])
    }

    pub fn per_axis(radius: &[usize], sigma: &[f64]) -> Result<Self> {
        if radius.len() != sigma.len() || !(2..=3).contains(&radius.len()) {
            return Err(Error::Parameter(
                "kernel needs one radius and sigma per axis (2 or 3 axes)".into(),
            ));
        }
        if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Parameter(format!("sigma must be positive, got {s}")));
        }
        Ok(GaussianKernel {
            radius: radius.to_vec(),
            sigma: sigma.to_vec(),
            taps: radius.iter().zip(sigma).map(|(&r, &s)| taps(r, s)).collect(),
        })
    }

    /// The `K = I` kernel.
    pub fn identity(dim: usize) -> Self {
        Self::new(0, 1.0, dim).expect("valid identity kernel")
    }

    pub fn dim(&self) -> usize {
        self.radius.len()
    }

    pub fn radius(&self) -> &[usize] {
        &self.radius
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Normalized 1D taps for `axis`, centre at index `radius`.
    pub fn taps(&self, axis: usize) -> &[f64] {
        &self.taps[axis]
    }

    pub fn is_identity(&self) -> bool {
        self.radius.iter().all(|&r| r == 0)
    }

    fn check(&self, shape: &Shape, field: &[f64]) -> Result<usize> {
        if shape.ndim() != self.dim() {
            return Err(Error::mismatch(self.dim(), shape.ndim()));
        }
        let n = shape.len();
        if field.is_empty() || field.len() % n != 0 {
            return Err(Error::mismatch(format!("multiple of {n}"), field.len()));
        }
        Ok(field.len() / n)
    }

    /// Smooths every channel of a planar field (`channels x N` values).
    pub fn apply(&self, shape: &Shape, field: &[f64]) -> Result<Vec<f64>> {
        self.check(shape, field)?;
        let mut out = field.to_vec();
        for axis in 0..self.dim() {
            if self.radius[axis] > 0 {
                out = self.pass(shape, &out, axis, false);
            }
        }
        Ok(out)
    }

    /// Exact transpose of [`apply`](Self::apply) under the same boundary rule.
    pub fn apply_transpose(&self, shape: &Shape, field: &[f64]) -> Result<Vec<f64>> {
        self.check(shape, field)?;
        let mut out = field.to_vec();
        for axis in (0..self.dim()).rev() {
            if self.radius[axis] > 0 {
                out = self.pass(shape, &out, axis, true);
            }
        }
        Ok(out)
    }

    fn pass(&self, shape: &Shape, field: &[f64], axis: usize, transpose: bool) -> Vec<f64> {
        let n = shape.extents()[axis];
        let stride = shape.strides()[axis];
        let w = &self.taps[axis];
        let r = self.radius[axis] as isize;
        // source index along the axis for every (output position, tap)
        let table: Vec<usize> = (0..n as isize)
            .flat_map(|j| (-r..=r).map(move |t| reflect(j + t, n)))
            .collect();
        let mut out = vec![0.0; field.len()];
        let block = stride * n;
        for base in (0..field.len()).step_by(block) {
            for inner in 0..stride {
                let line = base + inner;
                for j in 0..n {
                    let srcs = &table[j * w.len()..(j + 1) * w.len()];
                    if transpose {
                        let x = field[line + j * stride];
                        for (&wt, &s) in w.iter().zip(srcs) {
                            out[line + s * stride] += wt * x;
                        }
                    } else {
                        out[line + j * stride] = w
                            .iter()
                            .zip(srcs)
                            .map(|(&wt, &s)| wt * field[line + s * stride])
                            .sum();
                    }
                }
            }
        }
        out
    }
}
