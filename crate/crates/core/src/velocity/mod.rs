//! Parameterized velocity fields `v(q, t)`: a convolutional network over the
//! normalized voxel cloud, or a free per-voxel field stored for each time step.

mod conv;
mod neural;

pub use neural::NeuralFieldSpec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Shape, VoxelCloud};
use conv::Feature;
use neural::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// `v` ignores `t`.
    Autonomous,
    /// `t` enters the network as an extra constant channel in the bottleneck.
    TimeInjected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    Neural(NeuralFieldSpec),
    /// One free vector per voxel for each of `steps` equal time intervals.
    Tensor { steps: usize },
}

/// Everything needed to rebuild a model around a parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub shape: Shape,
    #[serde(flatten)]
    pub kind: FieldKind,
    pub time_mode: TimeMode,
    pub horizon: f64,
    pub param_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel {
    shape: Shape,
    kind: FieldKind,
    time_mode: TimeMode,
    horizon: f64,
    net: Option<Network>,
    params: Vec<f64>,
}

fn check_horizon(horizon: f64) -> Result<()> {
    if horizon.is_finite() && horizon > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("horizon must be positive, got {horizon}")))
    }
}

impl VelocityModel {
    /// Neural field with all parameters zero.
    pub fn neural(shape: &Shape, spec: NeuralFieldSpec, time_mode: TimeMode, horizon: f64) -> Result<Self> {
        check_horizon(horizon)?;
        let net = Network::build(&spec, shape.dims3(), shape.ndim(), time_mode)?;
        let params = vec![0.0; net.param_count()];
        Ok(VelocityModel {
            shape: shape.clone(),
            kind: FieldKind::Neural(spec),
            time_mode,
            horizon,
            net: Some(net),
            params,
        })
    }

    /// Per-step tensor field, all zeros. A single step gives a stationary field.
    pub fn tensor(shape: &Shape, steps: usize, horizon: f64) -> Result<Self> {
        check_horizon(horizon)?;
        if steps == 0 {
            return Err(Error::Parameter("tensor field needs at least one step".into()));
        }
        let count = shape
            .len()
            .checked_mul(shape.ndim())
            .and_then(|c| c.checked_mul(steps))
            .ok_or_else(|| Error::Parameter("tensor field too large".into()))?;
        Ok(VelocityModel {
            shape: shape.clone(),
            kind: FieldKind::Tensor { steps },
            time_mode: if steps == 1 {
                TimeMode::Autonomous
            } else {
                TimeMode::TimeInjected
            },
            horizon,
            net: None,
            params: vec![0.0; count],
        })
    }

    pub fn from_descriptor(desc: &ModelDescriptor) -> Result<Self> {
        // compare counts before allocating anything parameter-sized
        let count = match &desc.kind {
            FieldKind::Tensor { steps } => desc.shape.len().checked_mul(desc.shape.ndim()).and_then(|c| c.checked_mul(*steps)),
            FieldKind::Neural(spec) => {
                Some(Network::build(spec, desc.shape.dims3(), desc.shape.ndim(), desc.time_mode)?.param_count())
            }
        };
        if count != Some(desc.param_count) {
            return Err(Error::mismatch(count, desc.param_count));
        }
        let model = match &desc.kind {
            FieldKind::Neural(spec) => {
                Self::neural(&desc.shape, spec.clone(), desc.time_mode, desc.horizon)?
            }
            FieldKind::Tensor { steps } => Self::tensor(&desc.shape, *steps, desc.horizon)?,
        };
        if model.time_mode != desc.time_mode {
            return Err(Error::mismatch(model.time_mode, desc.time_mode));
        }
        Ok(model)
    }

    pub fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor {
            shape: self.shape.clone(),
            kind: self.kind.clone(),
            time_mode: self.time_mode,
            horizon: self.horizon,
            param_count: self.param_count(),
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    pub fn time_mode(&self) -> TimeMode {
        self.time_mode
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::mismatch(self.params.len(), params.len()));
        }
        self.params = params;
        Ok(())
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Result<Self> {
        self.set_params(params)?;
        Ok(self)
    }

    /// Deterministic initial parameters. Hidden weights are normal with
    /// variance `1 / fan_in`; biases and the whole output layer start at zero,
    /// so the initial velocity is identically zero.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut params = vec![0.0; self.params.len()];
        if let Some(net) = &self.net {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (offset, count, fan_in, is_output) in net.weight_blocks() {
                if is_output {
                    continue;
                }
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite std");
                for p in &mut params[offset..offset + count] {
                    *p = normal.sample(&mut rng);
                }
            }
        }
        params
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let tol = 1e-9 * self.horizon;
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    fn check_len(&self, what: &[f64]) -> Result<()> {
        let expected = self.shape.ndim() * self.shape.len();
        if what.len() != expected {
            return Err(Error::mismatch(expected, what.len()));
        }
        Ok(())
    }

    /// Index of the tensor block whose interval `[t_k, t_k+1)` contains `t`.
    pub fn step_of(&self, t: f64) -> usize {
        match self.kind {
            FieldKind::Tensor { steps } => {
                let h = self.horizon / steps as f64;
                ((t / h + 1e-9).floor().max(0.0) as usize).min(steps - 1)
            }
            FieldKind::Neural(_) => 0,
        }
    }

    fn normalized_input(&self, coords: &[f64]) -> Feature {
        let n = self.shape.len();
        let mut data = coords.to_vec();
        for (a, &e) in self.shape.extents().iter().enumerate() {
            let scale = 2.0 / (e - 1) as f64;
            for x in &mut data[a * n..(a + 1) * n] {
                *x = *x * scale - 1.0;
            }
        }
        Feature {
            ch: self.shape.ndim(),
            dims: self.shape.dims3(),
            data,
        }
    }

    fn time_input(&self, t: f64) -> f64 {
        match self.time_mode {
            TimeMode::Autonomous => 0.0,
            TimeMode::TimeInjected => t,
        }
    }

    fn block(&self, t_step: f64) -> std::ops::Range<usize> {
        let len = self.shape.ndim() * self.shape.len();
        let b = self.step_of(t_step);
        b * len..(b + 1) * len
    }

    /// Velocity (before smoothing) for planar coordinates at time `t`. For the
    /// tensor kind `t_step` picks the block (the start of the integration
    /// step); the neural kind ignores it.
    pub fn eval_coords(&self, coords: &[f64], t: f64, t_step: f64) -> Result<Vec<f64>> {
        self.check_len(coords)?;
        self.check_time(t)?;
        match &self.net {
            Some(net) => {
                let (out, _) = net.forward(&self.params, self.normalized_input(coords), self.time_input(t));
                Ok(out.data)
            }
            None => Ok(self.params[self.block(t_step)].to_vec()),
        }
    }

    /// `(cotᵀ ∂v/∂q, cotᵀ ∂v/∂θ)` at planar coordinates.
    pub fn vjp_coords(
        &self,
        coords: &[f64],
        t: f64,
        t_step: f64,
        cot: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (_, gq, gp) = self.eval_and_vjp_coords(coords, t, t_step, cot)?;
        Ok((gq, gp))
    }

    /// Velocity and both vector-Jacobian products from a single forward pass.
    pub fn eval_and_vjp_coords(
        &self,
        coords: &[f64],
        t: f64,
        t_step: f64,
        cot: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.check_len(coords)?;
        self.check_len(cot)?;
        self.check_time(t)?;
        let mut grad = vec![0.0; self.params.len()];
        match &self.net {
            Some(net) => {
                let (out, tape) =
                    net.forward(&self.params, self.normalized_input(coords), self.time_input(t));
                let g = Feature {
                    ch: out.ch,
                    dims: out.dims,
                    data: cot.to_vec(),
                };
                let gin = net.backward(&self.params, &tape, g, &mut grad);
                let n = self.shape.len();
                let mut gq = gin.data;
                for (a, &e) in self.shape.extents().iter().enumerate() {
                    let scale = 2.0 / (e - 1) as f64;
                    gq[a * n..(a + 1) * n].iter_mut().for_each(|x| *x *= scale);
                }
                Ok((out.data, gq, grad))
            }
            None => {
                let block = self.block(t_step);
                grad[block.clone()].copy_from_slice(cot);
                Ok((self.params[block].to_vec(), vec![0.0; cot.len()], grad))
            }
        }
    }

    fn check_cloud(&self, cloud: &VoxelCloud) -> Result<()> {
        if cloud.shape() != &self.shape {
            return Err(Error::mismatch(&self.shape, cloud.shape()));
        }
        Ok(())
    }

    pub fn eval(&self, cloud: &VoxelCloud, t: f64) -> Result<Vec<f64>> {
        self.check_cloud(cloud)?;
        self.eval_coords(cloud.coords(), t, t)
    }

    pub fn vjp_state(&self, cloud: &VoxelCloud, t: f64, cot: &[f64]) -> Result<Vec<f64>> {
        self.check_cloud(cloud)?;
        Ok(self.vjp_coords(cloud.coords(), t, t, cot)?.0)
    }

    pub fn vjp_params(&self, cloud: &VoxelCloud, t: f64, cot: &[f64]) -> Result<Vec<f64>> {
        self.check_cloud(cloud)?;
        Ok(self.vjp_coords(cloud.coords(), t, t, cot)?.1)
    }
}
