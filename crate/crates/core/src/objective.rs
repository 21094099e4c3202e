//! Registration loss: image similarity plus folding, velocity-magnitude and
//! smoothness regularizers, and the gradient of the endpoint terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::grid::{
    det, det_grad, footprint, sample_grad, spatial_gradient, spatial_gradient_transpose, warp,
    Image, Shape, VoxelCloud,
};
use crate::metrics::neg_jacobian_ratio;

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Similarity {
    Ncc { window: usize },
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub similarity: Similarity,
    pub lambda_jdet: f64,
    pub lambda_mag: f64,
    pub lambda_smt: f64,
    pub epsilon: f64,
    pub variance_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            similarity: Similarity::Ncc { window: 21 },
            lambda_jdet: 1000.0,
            lambda_mag: 0.01,
            lambda_smt: 0.5,
            epsilon: 1e-3,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if let Similarity::Ncc { window } = self.similarity {
            check_window(window)?;
        }
        for (name, w) in [
            ("lambda_jdet", self.lambda_jdet),
            ("lambda_mag", self.lambda_mag),
            ("lambda_smt", self.lambda_smt),
            ("epsilon", self.epsilon),
            ("variance_floor", self.variance_floor),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// One evaluation of the loss and its parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub sim: f64,
    pub jdet: f64,
    pub mag: f64,
    pub smt: f64,
    #[serde(rename = "rD")]
    pub neg_jacobian_ratio: f64,
}

fn check_window(w: usize) -> Result<()> {
    if w < 3 || w % 2 == 0 {
        return Err(Error::Config(format!("NCC window must be odd and at least 3, got {w}")));
    }
    Ok(())
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// Sum over the window of half-width `r` around every voxel, truncated at the
/// image border.
fn box_sum(shape: &Shape, field: &[f64], r: usize) -> Vec<f64> {
    let mut cur = field.to_vec();
    for (&e, &s) in shape.extents().iter().zip(&shape.strides()) {
        let mut out = vec![0.0; cur.len()];
        for (v, o) in out.iter_mut().enumerate() {
            let i = (v / s) % e;
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(e - 1);
            let base = v - i * s;
            *o = (lo..=hi).map(|j| cur[base + j * s]).sum();
        }
        cur = out;
    }
    cur
}

/// Per-window statistics of a fixed/warped pair.
struct WindowStats {
    /// correlation per window, zero where a variance falls below the floor
    cc: Vec<f64>,
    /// `1/sqrt(VI VJ)` and `C/(sqrt(VI) VJ^1.5)`, zero where floored
    a: Vec<f64>,
    b: Vec<f64>,
    mean_i: Vec<f64>,
    mean_j: Vec<f64>,
}

fn window_stats(i: &Image, j: &Image, w: usize, floor: f64) -> WindowStats {
    let shape = i.shape();
    let r = w / 2;
    let iv = i.values();
    let jv = j.values();
    let count = box_sum(shape, &vec![1.0; iv.len()], r);
    let si = box_sum(shape, iv, r);
    let sj = box_sum(shape, jv, r);
    let sii = box_sum(shape, &iv.iter().map(|x| x * x).collect::<Vec<_>>(), r);
    let sjj = box_sum(shape, &jv.iter().map(|x| x * x).collect::<Vec<_>>(), r);
    let sij = box_sum(shape, &iv.iter().zip(jv).map(|(x, y)| x * y).collect::<Vec<_>>(), r);
    let n = iv.len();
    let mut st = WindowStats {
        cc: vec![0.0; n],
        a: vec![0.0; n],
        b: vec![0.0; n],
        mean_i: vec![0.0; n],
        mean_j: vec![0.0; n],
    };
    for x in 0..n {
        let c = count[x];
        let (mi, mj) = (si[x] / c, sj[x] / c);
        st.mean_i[x] = mi;
        st.mean_j[x] = mj;
        let vi = (sii[x] - si[x] * mi).max(0.0);
        let vj = (sjj[x] - sj[x] * mj).max(0.0);
        if vi / c < floor || vj / c < floor {
            continue;
        }
        let cross = sij[x] - si[x] * mj;
        let denom = (vi * vj).sqrt();
        st.cc[x] = cross / denom;
        st.a[x] = 1.0 / denom;
        st.b[x] = st.cc[x] / vj;
    }
    st
}

/// Mean local normalized cross-correlation over windows of side `w`.
pub fn ncc(i: &Image, j: &Image, w: usize) -> Result<f64> {
    ncc_with_floor(i, j, w, DEFAULT_VARIANCE_FLOOR)
}

/// [`ncc`] with an explicit variance floor below which a window contributes 0.
pub fn ncc_with_floor(i: &Image, j: &Image, w: usize, floor: f64) -> Result<f64> {
    check_pair(i, j)?;
    check_window(w)?;
    let st = window_stats(i, j, w, floor);
    Ok(st.cc.iter().sum::<f64>() / st.cc.len() as f64)
}

/// Derivative of the mean NCC with respect to each voxel of `j`.
fn ncc_grad(i: &Image, j: &Image, w: usize, floor: f64) -> Vec<f64> {
    let shape = i.shape();
    let r = w / 2;
    let st = window_stats(i, j, w, floor);
    let n = st.cc.len() as f64;
    let ba = box_sum(shape, &st.a, r);
    let bai = box_sum(shape, &st.a.iter().zip(&st.mean_i).map(|(a, m)| a * m).collect::<Vec<_>>(), r);
    let bb = box_sum(shape, &st.b, r);
    let bbj = box_sum(shape, &st.b.iter().zip(&st.mean_j).map(|(b, m)| b * m).collect::<Vec<_>>(), r);
    i.values()
        .iter()
        .zip(j.values())
        .enumerate()
        .map(|(x, (iv, jv))| (iv * ba[x] - bai[x] - jv * bb[x] + bbj[x]) / n)
        .collect()
}

pub fn mse(i: &Image, j: &Image) -> Result<f64> {
    check_pair(i, j)?;
    let s: f64 = i.values().iter().zip(j.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / i.values().len() as f64)
}

/// Similarity loss: `1 - ncc` or `mse`.
pub fn similarity_loss(i: &Image, j: &Image, config: &LossConfig) -> Result<f64> {
    match config.similarity {
        Similarity::Ncc { window } => Ok(1.0 - ncc_with_floor(i, j, window, config.variance_floor)?),
        Similarity::Mse => mse(i, j),
    }
}

/// Mean of `ReLU(-(det + epsilon))` over voxels.
pub fn loss_jdet(cloud: &VoxelCloud, epsilon: f64) -> f64 {
    let g = spatial_gradient(cloud);
    let n = cloud.shape().len();
    (0..n).map(|v| (-(det(g.matrix(v)) + epsilon)).max(0.0)).sum::<f64>() / n as f64
}

/// Riemann sum `(1/N) Σ_k h ‖f_k‖²` of the recorded step velocities.
pub fn loss_mag(trajectory: &Trajectory, shape: &Shape) -> Result<f64> {
    let norms = trajectory.velocity_sq_norms();
    if norms.len() != trajectory.steps() {
        return Err(Error::Config("trajectory has no velocity records".into()));
    }
    let h = trajectory.config().step_size();
    Ok(h * norms.iter().sum::<f64>() / shape.len() as f64)
}

/// Mean squared Frobenius norm of the displacement gradient `∇(ψ - id)`.
pub fn loss_smt(cloud: &VoxelCloud) -> f64 {
    let g = spatial_gradient(cloud);
    let d = cloud.ndim();
    let n = cloud.shape().len();
    let total: f64 = (0..n)
        .map(|v| {
            g.matrix(v)
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let u = if k / d == k % d { m - 1.0 } else { *m };
                    u * u
                })
                .sum::<f64>()
        })
        .sum();
    total / n as f64
}

/// Evaluates every term at the end of `trajectory`, warping `moving` onto `fixed`.
pub fn total_loss(fixed: &Image, moving: &Image, trajectory: &Trajectory, config: &LossConfig) -> Result<LossReport> {
    check_pair(fixed, moving)?;
    config.validate()?;
    let cloud = trajectory.final_cloud(fixed.shape())?;
    let mag = loss_mag(trajectory, fixed.shape())?;
    endpoint_report(fixed, moving, &cloud, mag, config)
}

pub(crate) fn endpoint_report(
    fixed: &Image,
    moving: &Image,
    cloud: &VoxelCloud,
    mag: f64,
    config: &LossConfig,
) -> Result<LossReport> {
    let warped = warp(moving, cloud)?;
    let sim = similarity_loss(fixed, &warped, config)?;
    let jdet = loss_jdet(cloud, config.epsilon);
    let smt = loss_smt(cloud);
    Ok(LossReport {
        total: sim + config.lambda_jdet * jdet + config.lambda_mag * mag + config.lambda_smt * smt,
        sim,
        jdet,
        mag,
        smt,
        neg_jacobian_ratio: neg_jacobian_ratio(cloud),
    })
}

/// Gradient of `sim + λ1 jdet + λ3 smt` with respect to the final cloud
/// coordinates (planar layout).
pub fn grad_wrt_final_cloud(fixed: &Image, moving: &Image, cloud: &VoxelCloud, config: &LossConfig) -> Result<Vec<f64>> {
    check_pair(fixed, moving)?;
    config.validate()?;
    if cloud.shape() != fixed.shape() {
        return Err(Error::mismatch(fixed.shape(), cloud.shape()));
    }
    let shape = cloud.shape();
    let n = shape.len();
    let d = shape.ndim();
    let warped = warp(moving, cloud)?;
    let dw: Vec<f64> = match config.similarity {
        Similarity::Ncc { window } => ncc_grad(fixed, &warped, window, config.variance_floor)
            .into_iter()
            .map(|g| -g)
            .collect(),
        Similarity::Mse => fixed
            .values()
            .iter()
            .zip(warped.values())
            .map(|(i, w)| 2.0 * (w - i) / n as f64)
            .collect(),
    };

    let extents = shape.extents();
    let strides = shape.strides();
    let coords = cloud.coords();
    let mut out = vec![0.0; d * n];
    for v in 0..n {
        if dw[v] == 0.0 {
            continue;
        }
        let fp = footprint(extents, |a| coords[a * n + v]);
        let g = sample_grad(moving.values(), extents, &strides, &fp);
        for a in 0..d {
            out[a * n + v] = dw[v] * g[a];
        }
    }

    if config.lambda_jdet > 0.0 || config.lambda_smt > 0.0 {
        let grad = spatial_gradient(cloud);
        let mut cot = vec![0.0; n * d * d];
        let kj = config.lambda_jdet / n as f64;
        let ks = 2.0 * config.lambda_smt / n as f64;
        for v in 0..n {
            let m = grad.matrix(v);
            let c = &mut cot[v * d * d..(v + 1) * d * d];
            if kj > 0.0 && det(m) + config.epsilon < 0.0 {
                for (c, g) in c.iter_mut().zip(det_grad(m)) {
                    *c -= kj * g;
                }
            }
            if ks > 0.0 {
                for (k, c) in c.iter_mut().enumerate() {
                    let u = if k / d == k % d { m[k] - 1.0 } else { m[k] };
                    *c += ks * u;
                }
            }
        }
        for (o, g) in out.iter_mut().zip(spatial_gradient_transpose(shape, &cot)) {
            *o += g;
        }
    }
    Ok(out)
}
